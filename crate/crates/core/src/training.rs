//! Straight-through SGD for the three architectures and the alternating
//! GD-min scheme (closed-form decoder, Riemannian step on the encoder).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::{orthogonality_defect, permutation_identity_score};
use crate::error::{Error, Result};
use crate::linalg::{
    apply_mask, format_real, gaussian_matrix, row_normalize, singular_values, EncoderMatrix, Mask, Matrix,
    Provenance,
};
use crate::models::{
    arcsin_gram, masked_mse, masks_for, mean_and_stderr, per_sample_losses, Autoencoder, DenoisedAE,
    LinearDecoderAE, Merge, MultilayerDecoderAE,
};
use crate::priors::{sample_matrix, Prior};
use crate::rng::SeedSpec;
use crate::special::{arcsin_prime, SQRT_2_OVER_PI};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub loss: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl TrajectoryPoint {
    pub fn new(iter: usize, loss: f64) -> Self {
        Self {
            iter,
            loss,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.diagnostics.insert(name.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Set when training stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub const CSV_COLUMNS: [&'static str; 7] = [
        "iter",
        "loss",
        "loss_stderr",
        "ssT_dev",
        "subspace_drift",
        "orth_defect",
        "perm_score",
    ];

    pub fn push(&mut self, p: TrajectoryPoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if p.iter <= last.iter {
                return Err(Error::State(format!("iteration {} after {}", p.iter, last.iter)));
            }
        }
        self.points.push(p);
        Ok(())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    /// Fixed-schema CSV; absent diagnostics are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = Self::CSV_COLUMNS.join(",");
        s.push('\n');
        for p in &self.points {
            s.push_str(&p.iter.to_string());
            s.push(',');
            s.push_str(&format_real(p.loss));
            for col in &Self::CSV_COLUMNS[2..] {
                s.push(',');
                if let Some(v) = p.diagnostics.get(*col) {
                    s.push_str(&format_real(*v));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Which parameter groups SGD updates. `decoder` is `A` for the shallow
/// decoders and `W1, W2, V1` for the multilayer one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableFlags {
    pub encoder: bool,
    pub decoder: bool,
    pub nonlin: bool,
    pub merge: bool,
}

impl TrainableFlags {
    pub const ALL: Self = Self {
        encoder: true,
        decoder: true,
        nonlin: true,
        merge: true,
    };

    /// Everything for the shallow decoders; scalars only for the multilayer
    /// decoder, whose matrices stay tied to the encoder.
    pub fn for_model(model: &Autoencoder) -> Self {
        match model {
            Autoencoder::Multilayer(_) => Self {
                encoder: false,
                decoder: false,
                nonlin: true,
                merge: true,
            },
            _ => Self::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    /// Straight-through temperature.
    pub tau: f64,
    pub seed: SeedSpec,
    pub trainable: TrainableFlags,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Fraction of the run after which the step decays linearly.
    pub decay_start: f64,
    /// Step multiplier reached at the end of the run.
    pub final_lr_factor: f64,
}

impl SgdConfig {
    pub fn new(seed: SeedSpec) -> Self {
        Self {
            learning_rate: 10.0,
            batch_size: 256,
            n_iters: 20_000,
            tau: 0.1,
            seed,
            trainable: TrainableFlags::ALL,
            eval_every: 50,
            eval_samples: 4096,
            decay_start: 0.7,
            final_lr_factor: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_samples < 2 {
            return Err(Error::Domain("batch_size, eval_every must be positive and eval_samples >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_start) || !(0.0..=1.0).contains(&self.final_lr_factor) {
            return Err(Error::Domain("decay_start and final_lr_factor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Step size used at iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let frac = it as f64 / self.n_iters.max(1) as f64;
        if frac < self.decay_start || self.decay_start >= 1.0 {
            self.learning_rate
        } else {
            let left = (1.0 - frac) / (1.0 - self.decay_start);
            self.learning_rate * left.max(self.final_lr_factor)
        }
    }
}

/// Derivative of `tanh(u / tau)`.
#[inline]
pub fn straight_through_deriv(u: f64, tau: f64) -> f64 {
    let t = (u / tau).tanh();
    (1.0 - t * t) / tau
}

#[inline]
fn sign_tie(v: f64, rng: &mut impl Rng) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Gradient of `d^-1 |x - xhat|^2` with respect to the raw rows of `b`
/// given the gradient with respect to the normalized rows.
fn project_rows(g_hat: &Matrix, bh: &Matrix, norms: &[f64]) -> Matrix {
    let mut g = g_hat.clone();
    for k in 0..g.nrows() {
        if norms[k] == 0.0 {
            g.row_mut(k).fill(0.0);
            continue;
        }
        let dot = g_hat.row(k).dot(&bh.row(k));
        let row = (g_hat.row(k) - bh.row(k) * dot) / norms[k];
        g.set_row(k, &row);
    }
    g
}

fn norms_of(b: &Matrix) -> Vec<f64> {
    b.row_iter().map(|r| r.norm()).collect()
}

fn sum_param_grad(f: &crate::models::Nonlinearity, x: &Matrix, up: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; f.params().len()];
    if acc.is_empty() {
        return acc;
    }
    for (xv, g) in x.iter().zip(up.iter()) {
        for (a, v) in acc.iter_mut().zip(f.param_grad(*xv)) {
            *a += g * v;
        }
    }
    acc
}

fn sum_parametric_grad(f: &crate::models::ParametricNonlin, x: &Matrix, up: &Matrix) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for (xv, g) in x.iter().zip(up.iter()) {
        let pg = f.param_grad(*xv);
        for i in 0..3 {
            acc[i] += g * pg[i];
        }
    }
    acc
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite entries in {what}")))
    }
}

/// Mutable training state; the encoder is kept as raw (unnormalized) rows.
struct SgdState {
    model: Autoencoder,
    raw_b: Matrix,
    encoder_moved: bool,
}

impl SgdState {
    fn snapshot(&self) -> Autoencoder {
        if !self.encoder_moved {
            return self.model.clone();
        }
        let enc = EncoderMatrix::new(self.raw_b.clone(), Provenance::Trained);
        let mut m = self.model.clone();
        match &mut m {
            Autoencoder::Linear(l) => l.b = enc,
            Autoencoder::Denoised(l) => l.b = enc,
            Autoencoder::Multilayer(l) => l.b = enc,
        }
        m
    }

    /// One minibatch step; returns the batch loss before the update.
    fn step(&mut self, x: &Matrix, rng: &mut impl Rng, lr: f64, cfg: &SgdConfig) -> Result<f64> {
        let d = x.nrows();
        let nb = x.ncols() as f64;
        let norms = norms_of(&self.raw_b);
        let bh = row_normalize(&self.raw_b);
        let u = &bh * x;
        let z = u.map(|v| sign_tie(v, rng));
        let scale = 2.0 / (d as f64 * nb);
        let fl = cfg.trainable;
        let (loss, dz) = match &mut self.model {
            Autoencoder::Linear(m) => {
                let err = &m.a * &z - x;
                let loss = err.norm_squared() / (d as f64 * nb);
                let dy = err * scale;
                let dz = m.a.transpose() * &dy;
                if fl.decoder {
                    m.a -= (&dy * z.transpose()) * lr;
                }
                (loss, dz)
            }
            Autoencoder::Denoised(m) => {
                let y = &m.a * &z;
                let out = y.map(|v| m.f.eval(v));
                let err = out - x;
                let loss = err.norm_squared() / (d as f64 * nb);
                let dout = err * scale;
                let dy = dout.zip_map(&y, |g, v| g * m.f.deriv(v));
                let dz = m.a.transpose() * &dy;
                if fl.nonlin {
                    let g = sum_param_grad(&m.f, &y, &dout);
                    if !g.is_empty() {
                        let p: Vec<f64> = m.f.params().iter().zip(&g).map(|(p, g)| p - lr * g).collect();
                        m.f.set_params(&p);
                    }
                }
                if fl.decoder {
                    m.a -= (&dy * z.transpose()) * lr;
                }
                (loss, dz)
            }
            Autoencoder::Multilayer(m) => {
                let c = m.forward_cached(&z);
                let [m1, m2, m3] = m.merge;
                let err = &c.out - x;
                let loss = err.norm_squared() / (d as f64 * nb);
                let dout = err * scale;
                let g_f2 = sum_parametric_grad(&m.f2, &c.v, &dout);
                let dv = dout.zip_map(&c.v, |g, v| g * m.f2.deriv(v));
                let g_b3 = dv.dot(&c.x1);
                let g_g3 = dv.dot(&c.x2);
                let dx2 = &dv * m3.gamma;
                let mut dx1 = &dv * m3.beta;
                let w2z2 = &m.w2 * &c.z2;
                let g_b2 = dx2.dot(&c.xh1);
                let g_g2 = dx2.dot(&w2z2);
                let mut dxh1 = &dx2 * m2.beta;
                let dz2 = (m.w2.transpose() * &dx2) * m2.gamma;
                let g_g1 = sum_parametric_grad(&m.g1, &c.u, &dz2);
                let du = dz2.zip_map(&c.u, |g, v| g * m.g1.deriv(v));
                let v1xh1 = &m.v1 * &c.xh1;
                let g_b1 = du.dot(&v1xh1);
                let g_gam1 = du.dot(&z);
                dxh1 += (m.v1.transpose() * &du) * m1.beta;
                let g_f1 = sum_parametric_grad(&m.f1, &c.x1, &dxh1);
                dx1 += dxh1.zip_map(&c.x1, |g, v| g * m.f1.deriv(v));
                let dz = &du * m1.gamma + m.w1.transpose() * &dx1;
                if fl.decoder {
                    let gw1 = &dx1 * z.transpose();
                    let gw2 = (&dx2 * c.z2.transpose()) * m2.gamma;
                    let gv1 = (&du * c.xh1.transpose()) * m1.beta;
                    m.w1 -= gw1 * lr;
                    m.w2 -= gw2 * lr;
                    m.v1 -= gv1 * lr;
                }
                if fl.nonlin {
                    let upd = |f: &mut crate::models::ParametricNonlin, g: [f64; 3]| {
                        let p = f.params();
                        *f = crate::models::ParametricNonlin::from_params([
                            p[0] - lr * g[0],
                            p[1] - lr * g[1],
                            p[2] - lr * g[2],
                        ]);
                    };
                    upd(&mut m.f1, g_f1);
                    upd(&mut m.g1, g_g1);
                    upd(&mut m.f2, g_f2);
                }
                if fl.merge {
                    m.merge = [
                        Merge::new(m1.beta - lr * g_b1, m1.gamma - lr * g_gam1),
                        Merge::new(m2.beta - lr * g_b2, m2.gamma - lr * g_g2),
                        Merge::new(m3.beta - lr * g_b3, m3.gamma - lr * g_g3),
                    ];
                }
                (loss, dz)
            }
        };
        if fl.encoder && lr != 0.0 {
            let du = dz.zip_map(&u, |g, v| g * straight_through_deriv(v, cfg.tau));
            let g_hat = du * x.transpose();
            let g = project_rows(&g_hat, &bh, &norms);
            self.raw_b -= g * lr;
            self.encoder_moved = true;
        }
        Ok(loss)
    }
}

fn eval_point(model: &Autoencoder, prior: &Prior, cfg: &SgdConfig, iter: usize) -> Result<TrajectoryPoint> {
    let losses = per_sample_losses(model, prior, cfg.eval_samples, cfg.seed.named("eval"))?;
    let est = mean_and_stderr(&losses);
    let b = model.encoder();
    Ok(TrajectoryPoint::new(iter, est.estimate)
        .with("loss_stderr", est.stderr)
        .with("orth_defect", orthogonality_defect(b))
        .with("perm_score", permutation_identity_score(b)))
}

/// Minibatch SGD on the Monte-Carlo MSE, with `sign` in the forward pass and
/// the derivative of `tanh(u / tau)` in the backward pass. Encoder rows are
/// trained through `B^ = B / |B|` row-wise.
pub fn sgd_train(model: &Autoencoder, prior: &Prior, cfg: &SgdConfig) -> Result<(Autoencoder, Trajectory)> {
    sgd_train_observed(model, prior, cfg, &mut |_| Vec::new())
}

/// As [`sgd_train`], adding the observer's values to every evaluation point.
pub fn sgd_train_observed(
    model: &Autoencoder,
    prior: &Prior,
    cfg: &SgdConfig,
    observe: &mut dyn FnMut(&Autoencoder) -> Vec<(String, f64)>,
) -> Result<(Autoencoder, Trajectory)> {
    cfg.validate()?;
    let mut state = SgdState {
        model: model.clone(),
        raw_b: (**model.encoder()).clone(),
        encoder_moved: false,
    };
    let d = model.d();
    let mut traj = Trajectory::default();
    let mut point = |m: &Autoencoder, iter: usize| -> Result<TrajectoryPoint> {
        let mut p = eval_point(m, prior, cfg, iter)?;
        for (k, v) in observe(m) {
            p.diagnostics.insert(k, v);
        }
        Ok(p)
    };
    traj.push(point(&state.model, 0)?)?;
    let batch_seed = cfg.seed.named("batch");
    for it in 0..cfg.n_iters {
        let mut rng = batch_seed.child(it as u64).rng();
        let x = sample_matrix(prior, d, cfg.batch_size, &mut rng)?;
        let loss = state.step(&x, &mut rng, cfg.lr_at(it), cfg)?;
        let done = it + 1;
        if !loss.is_finite() {
            traj.aborted = Some(format!("non-finite batch loss at iteration {it}"));
            break;
        }
        if done % cfg.eval_every == 0 || done == cfg.n_iters {
            let p = point(&state.snapshot(), done)?;
            let bad = !p.loss.is_finite();
            traj.push(p)?;
            if bad {
                traj.aborted = Some(format!("non-finite held-out loss at iteration {done}"));
                break;
            }
        }
    }
    Ok((state.snapshot(), traj))
}

/// Linear decoder at the training initialization: Gaussian rows normalized,
/// `A ~ N(0, 1/n)`.
pub fn init_linear(n: usize, d: usize, seed: SeedSpec) -> LinearDecoderAE {
    let mut rng = seed.rng();
    let b = gaussian_matrix(n, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let a = gaussian_matrix(d, n, 1.0 / (n as f64).sqrt(), &mut rng);
    LinearDecoderAE {
        b: EncoderMatrix::new(b, Provenance::Gaussian),
        a,
    }
}

pub fn init_denoised(n: usize, d: usize, f: crate::models::Nonlinearity, seed: SeedSpec) -> DenoisedAE {
    let l = init_linear(n, d, seed);
    DenoisedAE { b: l.b, a: l.a, f }
}

/// Merge initialization for the multilayer decoder: the output starts as
/// `f2(x1)`, the one-layer denoiser.
pub const MULTILAYER_MERGE_INIT: [Merge; 3] = [Merge::new(1.0, 1.0), Merge::new(1.0, 1.0), Merge::new(1.0, 0.0)];

pub fn init_multilayer(b: EncoderMatrix) -> MultilayerDecoderAE {
    use crate::models::ParametricNonlin;
    MultilayerDecoderAE::tied(
        b,
        ParametricNonlin::INIT,
        ParametricNonlin::INIT,
        ParametricNonlin::INIT,
        MULTILAYER_MERGE_INIT,
    )
}

/// Normalized masked encoder and the norms of its masked rows.
fn masked_rows(b: &Matrix, mask: &Mask) -> Result<(Matrix, Vec<f64>)> {
    let bm = apply_mask(b, mask)?;
    let norms = norms_of(&bm);
    Ok((row_normalize(&bm), norms))
}

const REG_START: f64 = 1e-12;
const REG_MAX: f64 = 1e-4;

/// `A = sqrt(pi/2) p^-1/2 mean(B^)^T mean(arcsin(B^ B^^T))^-1` over the
/// given masks.
pub fn optimal_a_masks(b: &Matrix, p: f64, masks: &[Mask]) -> Result<Matrix> {
    if masks.is_empty() {
        return Err(Error::Domain("optimal_A needs at least one mask".into()));
    }
    let (n, d) = b.shape();
    let mut bbar = Matrix::zeros(n, d);
    let mut mbar = Matrix::zeros(n, n);
    for m in masks {
        let (bh, _) = masked_rows(b, m)?;
        mbar += arcsin_gram(&bh);
        bbar += bh;
    }
    let k = masks.len() as f64;
    bbar /= k;
    mbar /= k;
    solve_a(&bbar, &mbar, p)
}

fn solve_a(bbar: &Matrix, mbar: &Matrix, p: f64) -> Result<Matrix> {
    let n = mbar.nrows();
    let rhs = bbar * ((PI / 2.0).sqrt() / p.sqrt());
    let scale = mbar.trace() / n.max(1) as f64;
    let mut lambda = 0.0;
    loop {
        let reg = mbar + Matrix::identity(n, n) * (lambda * scale);
        if let Some(ch) = reg.cholesky() {
            let a = ch.solve(&rhs).transpose();
            check_finite(&a, "optimal A")?;
            return Ok(a);
        }
        lambda = if lambda == 0.0 { REG_START } else { lambda * 10.0 };
        if lambda > REG_MAX {
            return Err(Error::Numerical("arcsin Gram estimate singular after regularization".into()));
        }
    }
}

/// Closed-form decoder for a fixed encoder; `p = 1` is deterministic.
pub fn optimal_a(b: &EncoderMatrix, p: f64, n_masks: usize, seed: SeedSpec) -> Result<Matrix> {
    let masks = masks_for(b.ncols(), p, n_masks, seed)?;
    optimal_a_masks(b, p, &masks)
}

fn mask_gradient(a: &Matrix, b: &Matrix, p: f64, mask: &Mask) -> Result<Matrix> {
    let (bh, norms) = masked_rows(b, mask)?;
    let n = bh.nrows();
    let g = a.transpose() * a;
    let c = &bh * bh.transpose();
    let mut w = Matrix::zeros(n, n);
    let mut rs = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = g[(i, j)] * arcsin_prime(c[(i, j)], ARCSIN_PRIME_CLAMP);
                w[(i, j)] = v;
                rs[i] += v * c[(i, j)];
            }
        }
    }
    let wb = &w * &bh;
    let ba = &bh * a;
    let coef = 2.0 * SQRT_2_OVER_PI / p.sqrt();
    let mut out = Matrix::zeros(n, bh.ncols());
    for k in 0..n {
        if norms[k] == 0.0 {
            continue;
        }
        for j in 0..bh.ncols() {
            let t1 = wb[(k, j)] - rs[k] * bh[(k, j)];
            let am = if mask.bits()[j] { a[(j, k)] } else { 0.0 };
            let t2 = am - ba[(k, k)] * bh[(k, j)];
            out[(k, j)] = ((4.0 / PI) * t1 - coef * t2) / norms[k];
        }
    }
    Ok(out)
}

const ARCSIN_PRIME_CLAMP: f64 = 1.0 - 1e-9;

/// Gradient of the mask-averaged restored MSE with respect to the raw rows
/// of `b` (rows are normalized after masking).
pub fn analytic_gradient(a: &Matrix, b: &Matrix, p: f64, masks: &[Mask]) -> Result<Matrix> {
    if masks.is_empty() {
        return Err(Error::Domain("analytic_gradient needs at least one mask".into()));
    }
    if a.nrows() != b.ncols() || a.ncols() != b.nrows() {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let mut acc = Matrix::zeros(b.nrows(), b.ncols());
    for m in masks {
        acc += mask_gradient(a, b, p, m)?;
    }
    Ok(acc / (masks.len() as f64 * b.ncols() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdminConfig {
    pub eta: f64,
    pub n_steps: usize,
    pub noise_sigma: f64,
    pub n_masks: usize,
    pub p: f64,
    pub seed: SeedSpec,
    pub record_every: usize,
    /// Fresh masks used for the final MSE.
    pub eval_masks: usize,
}

impl GdminConfig {
    pub fn new(d: usize, p: f64, seed: SeedSpec) -> Self {
        Self {
            eta: 0.5 / (d as f64).sqrt(),
            n_steps: 3000,
            noise_sigma: 0.0,
            n_masks: 32,
            p,
            seed,
            record_every: 1,
            eval_masks: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Domain("eta must be > 0 and noise_sigma >= 0".into()));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Domain(format!("keep probability must be in (0, 1], got {}", self.p)));
        }
        if self.n_masks == 0 || self.record_every == 0 || self.eval_masks == 0 {
            return Err(Error::Domain("n_masks, record_every and eval_masks must be positive".into()));
        }
        Ok(())
    }
}

/// `max_i |s_i^2 - 1|` over the singular values of `b`.
pub fn sst_deviation(b: &Matrix) -> f64 {
    singular_values(b).iter().map(|s| (s * s - 1.0).abs()).fold(0.0, f64::max)
}

fn right_singular_basis(b: &Matrix) -> Result<Matrix> {
    let svd = b.clone().svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return singular vectors".into()))?;
    Ok(vt.transpose())
}

/// Alternating GD-min iterate: `A(t)` is refit each step, `B(t)` moves by a
/// unit-row-projected gradient step.
#[derive(Debug, Clone)]
pub struct GdminState {
    pub b: Matrix,
    pub a: Matrix,
    pub t: usize,
    cfg: GdminConfig,
    v0: Matrix,
}

/// Values recorded at the start of a step, for the pair `(A(t), B(t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub mse: f64,
}

impl GdminState {
    /// Row-normalized Gaussian `B(0)` drawn from the `init` stream of the
    /// seed, so runs with different `p` share it.
    pub fn new(d: usize, r: f64, cfg: GdminConfig) -> Result<Self> {
        cfg.validate()?;
        let n = (r * d as f64).round() as usize;
        if n == 0 || n > d {
            return Err(Error::Domain(format!("need 1 <= n = round(r d) <= d, got n = {n}, d = {d}")));
        }
        let mut rng = cfg.seed.named("init").rng();
        let b = row_normalize(&gaussian_matrix(n, d, 1.0 / (d as f64).sqrt(), &mut rng));
        Self::from_encoder(b, cfg)
    }

    pub fn from_encoder(b: Matrix, cfg: GdminConfig) -> Result<Self> {
        cfg.validate()?;
        let v0 = right_singular_basis(&b)?;
        let (n, d) = b.shape();
        Ok(Self {
            b,
            a: Matrix::zeros(d, n),
            t: 0,
            cfg,
            v0,
        })
    }

    pub fn config(&self) -> &GdminConfig {
        &self.cfg
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let d = self.b.ncols();
        let p = self.cfg.p;
        let masks = masks_for(d, p, self.cfg.n_masks, self.cfg.seed.named("masks").child(self.t as u64))?;
        self.a = optimal_a_masks(&self.b, p, &masks)?;
        let mut mse = 0.0;
        for m in &masks {
            let (bh, _) = masked_rows(&self.b, m)?;
            mse += masked_mse(&self.a, &bh, p);
        }
        mse /= masks.len() as f64;
        let mut dir = analytic_gradient(&self.a, &self.b, p, &masks)? * d as f64;
        if self.cfg.noise_sigma > 0.0 {
            let mut rng = self.cfg.seed.named("noise").child(self.t as u64).rng();
            let s = self.cfg.noise_sigma;
            dir.iter_mut().for_each(|v| *v += s * rng.sample::<f64, _>(StandardNormal));
        }
        let next = row_normalize(&(&self.b - dir * self.cfg.eta));
        check_finite(&next, "encoder")?;
        if !mse.is_finite() {
            return Err(Error::Numerical(format!("non-finite MSE at step {}", self.t)));
        }
        let rec = StepRecord { t: self.t, mse };
        self.b = next;
        self.t += 1;
        Ok(rec)
    }

    /// `1 - sigma_min(V(t)^T V(0))` for the right singular subspaces.
    pub fn subspace_drift(&self) -> Result<f64> {
        let v = right_singular_basis(&self.b)?;
        let s = singular_values(&(v.transpose() * &self.v0));
        Ok(1.0 - s.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn record(&self, rec: StepRecord) -> Result<TrajectoryPoint> {
        Ok(TrajectoryPoint::new(rec.t, rec.mse)
            .with("ssT_dev", sst_deviation(&self.b))
            .with("subspace_drift", self.subspace_drift()?))
    }

    /// Restored MSE of `(optimal A, B)` on fresh evaluation masks.
    pub fn evaluate(&self) -> Result<(Matrix, f64)> {
        let d = self.b.ncols();
        let p = self.cfg.p;
        let fit = masks_for(d, p, self.cfg.eval_masks, self.cfg.seed.named("final_fit"))?;
        let a = optimal_a_masks(&self.b, p, &fit)?;
        let eval = masks_for(d, p, self.cfg.eval_masks, self.cfg.seed.named("final_eval"))?;
        let mut mse = 0.0;
        for m in &eval {
            let (bh, _) = masked_rows(&self.b, m)?;
            mse += masked_mse(&a, &bh, p);
        }
        Ok((a, mse / eval.len() as f64))
    }
}

#[derive(Debug, Clone)]
pub struct GdminRun {
    pub trajectory: Trajectory,
    pub a: Matrix,
    pub b: EncoderMatrix,
    pub final_mse: f64,
}

pub fn gdmin_run(d: usize, r: f64, cfg: &GdminConfig) -> Result<GdminRun> {
    let mut st = GdminState::new(d, r, cfg.clone())?;
    let mut traj = Trajectory::default();
    for t in 0..cfg.n_steps {
        let rec = st.step()?;
        if t % cfg.record_every == 0 || t + 1 == cfg.n_steps {
            traj.push(st.record(rec)?)?;
        }
    }
    let (a, final_mse) = st.evaluate()?;
    Ok(GdminRun {
        trajectory: traj,
        a,
        b: EncoderMatrix::new(st.b, Provenance::Trained),
        final_mse,
    })
}

/// Two GD-min runs in lockstep, at `cfg.p` and at `p = 1`, sharing `B(0)`
/// and the noise stream.
#[derive(Debug, Clone)]
pub struct GdminPair {
    pub run: GdminRun,
    pub reference: GdminRun,
    /// `(t, |B_p(t) - B_1(t)|_op)` after each step.
    pub deviation: Vec<(usize, f64)>,
    pub sup_deviation: f64,
}

pub fn gdmin_pair(d: usize, r: f64, cfg: &GdminConfig) -> Result<GdminPair> {
    let mut st = GdminState::new(d, r, cfg.clone())?;
    let mut ref_cfg = cfg.clone();
    ref_cfg.p = 1.0;
    let mut rs = GdminState::new(d, r, ref_cfg)?;
    let mut traj = Trajectory::default();
    let mut rtraj = Trajectory::default();
    let mut deviation = Vec::with_capacity(cfg.n_steps);
    let mut sup: f64 = 0.0;
    for t in 0..cfg.n_steps {
        let rec = st.step()?;
        let rrec = rs.step()?;
        let dev = crate::linalg::operator_norm(&(&st.b - &rs.b));
        sup = sup.max(dev);
        deviation.push((t + 1, dev));
        if t % cfg.record_every == 0 || t + 1 == cfg.n_steps {
            traj.push(st.record(rec)?.with("deviation", dev))?;
            rtraj.push(rs.record(rrec)?)?;
        }
    }
    let finish = |s: GdminState, trajectory: Trajectory| -> Result<GdminRun> {
        let (a, final_mse) = s.evaluate()?;
        Ok(GdminRun {
            trajectory,
            a,
            b: EncoderMatrix::new(s.b, Provenance::Trained),
            final_mse,
        })
    };
    Ok(GdminPair {
        run: finish(st, traj)?,
        reference: finish(rs, rtraj)?,
        deviation,
        sup_deviation: sup,
    })
}

/// Random unit-row encoder, for tests and examples.
pub fn random_encoder(n: usize, d: usize, seed: SeedSpec) -> Matrix {
    let mut rng = seed.rng();
    row_normalize(&gaussian_matrix(n, d, 1.0, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{row_norms, sample_haar_rows};
    use crate::models::{exact_linear_mse, exact_linear_mse_masks, Nonlinearity, ParametricNonlin};
    use crate::theory::gaussian_mse;

    fn fd_gradient(a: &Matrix, b: &Matrix, p: f64, masks: &[Mask]) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(b.nrows(), b.ncols());
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                let mut bp = b.clone();
                bp[(i, j)] += h;
                let mut bm = b.clone();
                bm[(i, j)] -= h;
                let fp = exact_linear_mse_masks(a, &bp, p, masks).unwrap();
                let fm = exact_linear_mse_masks(a, &bm, p, masks).unwrap();
                g[(i, j)] = (fp - fm) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let seed = SeedSpec::from_seed(11);
        let (n, d) = (5, 9);
        let mut rng = seed.child(0).rng();
        let b = gaussian_matrix(n, d, 1.0, &mut rng);
        let a = gaussian_matrix(d, n, 0.5, &mut rng);
        let masks = masks_for(d, 0.5, 8, seed.child(1)).unwrap();
        let g = analytic_gradient(&a, &b, 0.5, &masks).unwrap();
        let fd = fd_gradient(&a, &b, 0.5, &masks);
        let rel = (&g - &fd).norm() / fd.norm();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn single_full_mask_is_p1_gradient() {
        let b = random_encoder(4, 6, SeedSpec::from_seed(2));
        let a = gaussian_matrix(6, 4, 0.3, &mut SeedSpec::from_seed(3).rng());
        let g1 = analytic_gradient(&a, &b, 1.0, &[Mask::ones(6)]).unwrap();
        let g2 = analytic_gradient(&a, &b, 1.0, &masks_for(6, 1.0, 10, SeedSpec::from_seed(4)).unwrap()).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn stationary_at_orthonormal_rows() {
        let b = sample_haar_rows(8, 16, SeedSpec::from_seed(5)).unwrap();
        let masks = [Mask::ones(16)];
        let a = optimal_a_masks(&b, 1.0, &masks).unwrap();
        let g = analytic_gradient(&a, &b, 1.0, &masks).unwrap();
        assert!(g.norm() < 1e-6, "{}", g.norm());
    }

    #[test]
    fn optimal_a_examples() {
        let (n, d) = (16, 32);
        let b = EncoderMatrix::new(sample_haar_rows(n, d, SeedSpec::from_seed(6)).unwrap(), Provenance::HaarSubsampled);
        let a = optimal_a(&b, 1.0, 1, SeedSpec::from_seed(0)).unwrap();
        let mse = exact_linear_mse(&a, &b, 1.0, 1, SeedSpec::from_seed(0)).unwrap();
        assert!((mse - gaussian_mse(0.5).unwrap()).abs() < 1e-10, "{mse}");
        assert!((&a - b.transpose() * SQRT_2_OVER_PI).norm() < 1e-12);

        let b1 = random_encoder(1, 10, SeedSpec::from_seed(7));
        let a1 = optimal_a_masks(&b1, 1.0, &[Mask::ones(10)]).unwrap();
        assert!((a1.norm() - SQRT_2_OVER_PI).abs() < 1e-12);
        let mse1 = exact_linear_mse(&a1, &b1, 1.0, 1, SeedSpec::from_seed(0)).unwrap();
        assert!((mse1 - (1.0 - 2.0 / PI / 10.0)).abs() < 1e-12);
    }

    #[test]
    fn optimal_a_minimizes() {
        let (n, d, p) = (6, 12, 0.6);
        let b = random_encoder(n, d, SeedSpec::from_seed(8));
        let masks = masks_for(d, p, 16, SeedSpec::from_seed(9)).unwrap();
        let a = optimal_a_masks(&b, p, &masks).unwrap();
        let base = exact_linear_mse_masks(&a, &b, p, &masks).unwrap();
        let mut rng = SeedSpec::from_seed(10).rng();
        for _ in 0..20 {
            let mut da = gaussian_matrix(d, n, 1.0, &mut rng);
            da *= 1e-3 / da.norm();
            let v = exact_linear_mse_masks(&(&a + da), &b, p, &masks).unwrap();
            assert!(v >= base - 1e-8);
        }
        for _ in 0..50 {
            let ar = gaussian_matrix(d, n, 0.3, &mut rng);
            assert!(exact_linear_mse_masks(&ar, &b, p, &masks).unwrap() >= base);
        }
    }

    #[test]
    fn gdmin_keeps_unit_rows_and_is_deterministic() {
        let mut cfg = GdminConfig::new(24, 0.5, SeedSpec::from_seed(12));
        cfg.n_steps = 20;
        cfg.n_masks = 4;
        cfg.eval_masks = 8;
        cfg.noise_sigma = 0.01;
        let mut st = GdminState::new(24, 0.5, cfg.clone()).unwrap();
        for _ in 0..20 {
            st.step().unwrap();
            for nrm in row_norms(&st.b) {
                assert!((nrm - 1.0).abs() < 1e-12);
            }
        }
        let r1 = gdmin_run(24, 0.5, &cfg).unwrap();
        let r2 = gdmin_run(24, 0.5, &cfg).unwrap();
        assert_eq!(r1.trajectory.to_csv(), r2.trajectory.to_csv());
        assert_eq!(r1.final_mse.to_bits(), r2.final_mse.to_bits());
    }

    #[test]
    fn gdmin_p1_reaches_gaussian_mse() {
        let mut cfg = GdminConfig::new(32, 1.0, SeedSpec::from_seed(13));
        cfg.n_steps = 400;
        let run = gdmin_run(32, 0.5, &cfg).unwrap();
        assert!((run.final_mse - gaussian_mse(0.5).unwrap()).abs() < 1e-3, "{}", run.final_mse);
        assert!(run.trajectory.points.last().unwrap().diagnostics["ssT_dev"] < 1e-2);
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let prior = Prior::sparse_rademacher(0.5).unwrap();
        let model = Autoencoder::Linear(init_linear(6, 8, SeedSpec::from_seed(14)));
        let mut cfg = SgdConfig::new(SeedSpec::from_seed(15));
        cfg.learning_rate = 0.0;
        cfg.n_iters = 10;
        cfg.eval_every = 5;
        cfg.eval_samples = 64;
        let (m2, traj) = sgd_train(&model, &prior, &cfg).unwrap();
        assert_eq!(m2, model);
        assert_eq!(traj.points.len(), 3);
    }

    #[test]
    fn straight_through_consistency() {
        for tau in [0.1, 0.01] {
            for x in [-2.0, -0.5, 0.3, 1.7] {
                let t: f64 = (x / tau as f64).tanh();
                assert!((t - f64::signum(x)).abs() < 0.05);
            }
        }
        assert!(straight_through_deriv(0.0, 0.1) > straight_through_deriv(0.2, 0.1));
    }

    fn descent_check(model: Autoencoder, flags: TrainableFlags) {
        let prior = Prior::sparse_gaussian(0.5).unwrap();
        let d = model.d();
        let x = sample_matrix(&prior, d, 16, &mut SeedSpec::from_seed(20).rng()).unwrap();
        let mut cfg = SgdConfig::new(SeedSpec::from_seed(21));
        cfg.trainable = flags;
        let lr = 1e-7;
        let mut st = SgdState {
            model: model.clone(),
            raw_b: (**model.encoder()).clone(),
            encoder_moved: false,
        };
        let l0 = st.step(&x, &mut SeedSpec::from_seed(22).rng(), lr, &cfg).unwrap();
        let l1 = {
            let mut s2 = SgdState {
                model: st.model.clone(),
                raw_b: st.raw_b.clone(),
                encoder_moved: false,
            };
            s2.step(&x, &mut SeedSpec::from_seed(22).rng(), 0.0, &cfg).unwrap()
        };
        assert!(l1 < l0, "a small step should decrease the batch loss: {l0} -> {l1}");
    }

    #[test]
    fn sgd_steps_decrease_batch_loss() {
        let lin = init_linear(6, 8, SeedSpec::from_seed(30));
        descent_check(Autoencoder::Linear(lin.clone()), TrainableFlags { encoder: false, ..TrainableFlags::ALL });
        let den = DenoisedAE {
            b: lin.b.clone(),
            a: lin.a.clone(),
            f: Nonlinearity::Parametric(ParametricNonlin::INIT),
        };
        descent_check(Autoencoder::Denoised(den), TrainableFlags { encoder: false, ..TrainableFlags::ALL });
        let ml = init_multilayer(EncoderMatrix::new(sample_haar_rows(6, 8, SeedSpec::from_seed(31)).unwrap(), Provenance::HaarSubsampled));
        descent_check(Autoencoder::Multilayer(ml), TrainableFlags::ALL);
    }

    #[test]
    fn gaussian_data_reaches_gaussian_mse() {
        let prior = Prior::sparse_gaussian(1.0).unwrap();
        let model = Autoencoder::Linear(init_linear(16, 16, SeedSpec::from_seed(40)));
        let mut cfg = SgdConfig::new(SeedSpec::from_seed(41));
        cfg.learning_rate = 2.0;
        cfg.n_iters = 4000;
        cfg.eval_every = 500;
        let (_, traj) = sgd_train(&model, &prior, &cfg).unwrap();
        let last = traj.last_loss().unwrap();
        assert!((last - gaussian_mse(1.0).unwrap()).abs() / gaussian_mse(1.0).unwrap() < 0.05, "{last}");
    }

    #[test]
    fn trajectory_csv_schema() {
        let mut t = Trajectory::default();
        t.push(TrajectoryPoint::new(0, 0.5).with("ssT_dev", 0.1)).unwrap();
        assert!(t.push(TrajectoryPoint::new(0, 0.4)).is_err());
        let csv = t.to_csv();
        assert!(csv.starts_with("iter,loss,loss_stderr,ssT_dev,subspace_drift,orth_defect,perm_score\n"));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 7);
    }
}
