//! The three decoder architectures, their forward passes, Monte-Carlo MSE
//! estimation and the exact arcsin-law MSE of the linear decoder.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::linalg::{
    apply_mask, read_matrix_csv, row_normalize, sample_mask, write_matrix_csv, EncoderMatrix, Mask, Matrix,
    Provenance,
};
use crate::priors::{sample_matrix, Prior};
use crate::rng::SeedSpec;
use crate::special::SQRT_2_OVER_PI;
use crate::theory::StateEvolutionParams;

/// `f(x) = alpha1 x + alpha2 tanh(alpha3 x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParametricNonlin {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl ParametricNonlin {
    pub const IDENTITY: Self = Self {
        alpha1: 1.0,
        alpha2: 0.0,
        alpha3: 0.0,
    };
    pub const ZERO: Self = Self {
        alpha1: 0.0,
        alpha2: 0.0,
        alpha3: 0.0,
    };
    /// Training initialization.
    pub const INIT: Self = Self {
        alpha1: 1.0,
        alpha2: 0.1,
        alpha3: 1.0,
    };

    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Self {
        Self { alpha1, alpha2, alpha3 }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.alpha1 * x + self.alpha2 * (self.alpha3 * x).tanh()
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        let t = (self.alpha3 * x).tanh();
        self.alpha1 + self.alpha2 * self.alpha3 * (1.0 - t * t)
    }

    /// Gradient of `f(x)` with respect to `(alpha1, alpha2, alpha3)`.
    #[inline]
    pub fn param_grad(&self, x: f64) -> [f64; 3] {
        let t = (self.alpha3 * x).tanh();
        [x, t, self.alpha2 * x * (1.0 - t * t)]
    }

    pub fn params(&self) -> [f64; 3] {
        [self.alpha1, self.alpha2, self.alpha3]
    }

    pub fn from_params(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Two-branch tanh mixture: `g1 tanh(e1 x - a1) + b1` for `x >= 0`,
/// `g2 tanh(e2 x - a2) + b2` for `x < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhMixtureNonlin {
    pub gamma1: f64,
    pub eps1: f64,
    pub a1: f64,
    pub b1: f64,
    pub gamma2: f64,
    pub eps2: f64,
    pub a2: f64,
    pub b2: f64,
}

impl TanhMixtureNonlin {
    /// Antisymmetric initialization `f(-x) = -f(x)`.
    pub fn antisymmetric(gamma: f64, eps: f64, a: f64, b: f64) -> Self {
        Self {
            gamma1: gamma,
            eps1: eps,
            a1: a,
            b1: b,
            gamma2: gamma,
            eps2: eps,
            a2: -a,
            b2: -b,
        }
    }

    pub fn init() -> Self {
        Self::antisymmetric(1.0, 1.0, 0.0, 0.0)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        if x >= 0.0 {
            self.gamma1 * (self.eps1 * x - self.a1).tanh() + self.b1
        } else {
            self.gamma2 * (self.eps2 * x - self.a2).tanh() + self.b2
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        if x >= 0.0 {
            let t = (self.eps1 * x - self.a1).tanh();
            self.gamma1 * self.eps1 * (1.0 - t * t)
        } else {
            let t = (self.eps2 * x - self.a2).tanh();
            self.gamma2 * self.eps2 * (1.0 - t * t)
        }
    }

    /// Gradient with respect to `params()` order.
    #[inline]
    pub fn param_grad(&self, x: f64) -> [f64; 8] {
        if x >= 0.0 {
            let t = (self.eps1 * x - self.a1).tanh();
            let s = self.gamma1 * (1.0 - t * t);
            [t, s * x, -s, 1.0, 0.0, 0.0, 0.0, 0.0]
        } else {
            let t = (self.eps2 * x - self.a2).tanh();
            let s = self.gamma2 * (1.0 - t * t);
            [0.0, 0.0, 0.0, 0.0, t, s * x, -s, 1.0]
        }
    }

    pub fn params(&self) -> [f64; 8] {
        [
            self.gamma1,
            self.eps1,
            self.a1,
            self.b1,
            self.gamma2,
            self.eps2,
            self.a2,
            self.b2,
        ]
    }

    pub fn from_params(v: [f64; 8]) -> Self {
        Self {
            gamma1: v[0],
            eps1: v[1],
            a1: v[2],
            b1: v[3],
            gamma2: v[4],
            eps2: v[5],
            a2: v[6],
            b2: v[7],
        }
    }
}

/// Componentwise decoder nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub enum Nonlinearity {
    Identity,
    Parametric(ParametricNonlin),
    TanhMixture(TanhMixtureNonlin),
    Bayes(Box<Denoiser>),
}

impl Nonlinearity {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Parametric(f) => f.eval(x),
            Nonlinearity::TanhMixture(f) => f.eval(x),
            Nonlinearity::Bayes(d) => d.eval(x),
        }
    }

    /// Derivative; the Bayes denoiser uses a central difference.
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Parametric(f) => f.deriv(x),
            Nonlinearity::TanhMixture(f) => f.deriv(x),
            Nonlinearity::Bayes(d) => {
                let h = 1e-5 * x.abs().max(1.0);
                (d.eval(x + h) - d.eval(x - h)) / (2.0 * h)
            }
        }
    }

    /// Trainable parameters, empty for the fixed nonlinearities.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Nonlinearity::Parametric(f) => f.params().to_vec(),
            Nonlinearity::TanhMixture(f) => f.params().to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn param_grad(&self, x: f64) -> Vec<f64> {
        match self {
            Nonlinearity::Parametric(f) => f.param_grad(x).to_vec(),
            Nonlinearity::TanhMixture(f) => f.param_grad(x).to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, v: &[f64]) {
        match self {
            Nonlinearity::Parametric(f) => *f = ParametricNonlin::from_params([v[0], v[1], v[2]]),
            Nonlinearity::TanhMixture(f) => {
                let mut a = [0.0; 8];
                a.copy_from_slice(&v[..8]);
                *f = TanhMixtureNonlin::from_params(a);
            }
            _ => {}
        }
    }

    pub fn bayes(prior: Prior, se: StateEvolutionParams) -> Self {
        Nonlinearity::Bayes(Box::new(Denoiser::new(prior, se)))
    }
}

/// Merge `a (+) b = beta a + gamma b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub beta: f64,
    pub gamma: f64,
}

impl Merge {
    pub const fn new(beta: f64, gamma: f64) -> Self {
        Self { beta, gamma }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoderAE {
    pub b: EncoderMatrix,
    /// d x n
    pub a: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedAE {
    pub b: EncoderMatrix,
    pub a: Matrix,
    pub f: Nonlinearity,
}

/// Three-layer decoder with residual merges:
///
/// ```text
/// z1 = sign(B x),  x1 = W1 z1,  xh1 = f1(x1)
/// z2 = g1(V1 xh1 (+)1 z1)
/// x2 = xh1 (+)2 W2 z2,  xh2 = f2(x1 (+)3 x2)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct MultilayerDecoderAE {
    pub b: EncoderMatrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub v1: Matrix,
    pub f1: ParametricNonlin,
    pub f2: ParametricNonlin,
    pub g1: ParametricNonlin,
    pub merge: [Merge; 3],
}

/// Intermediate activations of a multilayer forward pass (columns = samples).
#[derive(Debug, Clone)]
pub struct MultilayerCache {
    pub z1: Matrix,
    pub x1: Matrix,
    pub xh1: Matrix,
    pub u: Matrix,
    pub z2: Matrix,
    pub x2: Matrix,
    pub v: Matrix,
    pub out: Matrix,
}

impl MultilayerDecoderAE {
    /// Weight-tied layout `W1 = W2 = B^T`, `V1 = B`.
    pub fn tied(b: EncoderMatrix, f1: ParametricNonlin, f2: ParametricNonlin, g1: ParametricNonlin, merge: [Merge; 3]) -> Self {
        let bt = b.transpose();
        let v1 = (*b).clone();
        Self {
            w1: bt.clone(),
            w2: bt,
            v1,
            b,
            f1,
            f2,
            g1,
            merge,
        }
    }

    pub fn forward_cached(&self, z1: &Matrix) -> MultilayerCache {
        let [m1, m2, m3] = self.merge;
        let x1 = &self.w1 * z1;
        let xh1 = x1.map(|v| self.f1.eval(v));
        let u = (&self.v1 * &xh1) * m1.beta + z1 * m1.gamma;
        let z2 = u.map(|v| self.g1.eval(v));
        let x2 = &xh1 * m2.beta + (&self.w2 * &z2) * m2.gamma;
        let v = &x1 * m3.beta + &x2 * m3.gamma;
        let out = v.map(|t| self.f2.eval(t));
        MultilayerCache {
            z1: z1.clone(),
            x1,
            xh1,
            u,
            z2,
            x2,
            v,
            out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Autoencoder {
    Linear(LinearDecoderAE),
    Denoised(DenoisedAE),
    Multilayer(MultilayerDecoderAE),
}

impl Autoencoder {
    pub fn encoder(&self) -> &EncoderMatrix {
        match self {
            Autoencoder::Linear(m) => &m.b,
            Autoencoder::Denoised(m) => &m.b,
            Autoencoder::Multilayer(m) => &m.b,
        }
    }

    pub fn architecture(&self) -> &'static str {
        match self {
            Autoencoder::Linear(_) => "linear",
            Autoencoder::Denoised(_) => "denoised",
            Autoencoder::Multilayer(_) => "multilayer",
        }
    }

    pub fn n(&self) -> usize {
        self.encoder().n()
    }

    pub fn d(&self) -> usize {
        self.encoder().d()
    }

    /// Decodes the columns of `z` (n x N) into the columns of a d x N matrix.
    pub fn decode_batch(&self, z: &Matrix) -> Result<Matrix> {
        if z.nrows() != self.n() {
            return Err(Error::Dimension(format!("code length {} != n = {}", z.nrows(), self.n())));
        }
        Ok(match self {
            Autoencoder::Linear(m) => &m.a * z,
            Autoencoder::Denoised(m) => {
                let y = &m.a * z;
                y.map(|v| m.f.eval(v))
            }
            Autoencoder::Multilayer(m) => m.forward_cached(z).out,
        })
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let zm = Matrix::from_column_slice(z.len(), 1, z.as_slice());
        let out = self.decode_batch(&zm)?;
        Ok(DVector::from_column_slice(out.as_slice()))
    }
}

#[inline]
fn sign_with_ties(v: f64, rng: &mut impl Rng) -> f64 {
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

/// `sign(B x)`, exact zeros broken by a seeded fair coin.
pub fn encode(b: &Matrix, x: &DVector<f64>, seed: SeedSpec) -> Result<DVector<f64>> {
    if x.len() != b.ncols() {
        return Err(Error::Dimension(format!("input length {} != d = {}", x.len(), b.ncols())));
    }
    let mut rng = seed.rng();
    let u = b * x;
    Ok(u.map(|v| sign_with_ties(v, &mut rng)))
}

/// `sign(B X)` for the columns of `x` (d x N).
pub fn encode_batch(b: &Matrix, x: &Matrix, rng: &mut impl Rng) -> Result<Matrix> {
    if x.nrows() != b.ncols() {
        return Err(Error::Dimension(format!("input length {} != d = {}", x.nrows(), b.ncols())));
    }
    let u = b * x;
    Ok(u.map(|v| sign_with_ties(v, rng)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

pub const MC_CHUNK: usize = 256;

/// Per-sample `d^-1 |x - xhat(x)|^2`, drawn in fixed-size chunks with one
/// derived stream per chunk so results do not depend on the thread count.
pub fn per_sample_losses(model: &Autoencoder, prior: &Prior, n_samples: usize, seed: SeedSpec) -> Result<Vec<f64>> {
    let d = model.d();
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<Result<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut rng = seed.child(c as u64).rng();
            let x = sample_matrix(prior, d, len, &mut rng)?;
            let z = encode_batch(model.encoder(), &x, &mut rng)?;
            let xh = model.decode_batch(&z)?;
            Ok((x - xh).column_iter().map(|col| col.norm_squared() / d as f64).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n_samples);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn mean_and_stderr(v: &[f64]) -> McEstimate {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    McEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
    }
}

pub fn mse_monte_carlo(model: &Autoencoder, prior: &Prior, n_samples: usize, seed: SeedSpec) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::Domain("Monte-Carlo MSE needs at least 2 samples".into()));
    }
    let losses = per_sample_losses(model, prior, n_samples, seed)?;
    Ok(mean_and_stderr(&losses))
}

const ARCSIN_CLAMP: f64 = 1.0 - 1e-12;

/// `arcsin` of the Gram matrix of the (already normalized) rows, with the
/// diagonal pinned to `pi/2` since `E[z_i^2] = 1` always.
pub fn arcsin_gram(bh: &Matrix) -> Matrix {
    let mut c = bh * bh.transpose();
    let n = c.nrows();
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = if i == j {
                PI / 2.0
            } else {
                c[(i, j)].clamp(-ARCSIN_CLAMP, ARCSIN_CLAMP).asin()
            };
        }
    }
    c
}

/// Restored MSE for one mask, given the masked and normalized encoder.
pub fn masked_mse(a: &Matrix, bh: &Matrix, p: f64) -> f64 {
    let d = bh.ncols() as f64;
    let g = a.transpose() * a;
    let m = arcsin_gram(bh);
    let quad = g.component_mul(&m).sum();
    let lin = (bh * a).trace();
    1.0 + ((2.0 / PI) * quad - 2.0 * SQRT_2_OVER_PI / p.sqrt() * lin) / d
}

pub fn masks_for(d: usize, p: f64, n_masks: usize, seed: SeedSpec) -> Result<Vec<Mask>> {
    if p >= 1.0 {
        return Ok(vec![Mask::ones(d)]);
    }
    (0..n_masks.max(1))
        .map(|i| sample_mask(d, p, true, seed.child(i as u64)))
        .collect()
}

pub fn exact_linear_mse_masks(a: &Matrix, b: &Matrix, p: f64, masks: &[Mask]) -> Result<f64> {
    let vals = masked_mse_values(a, b, p, masks)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One restored-MSE value per mask.
pub fn masked_mse_values(a: &Matrix, b: &Matrix, p: f64, masks: &[Mask]) -> Result<Vec<f64>> {
    if a.nrows() != b.ncols() || a.ncols() != b.nrows() {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    masks
        .par_iter()
        .map(|m| Ok(masked_mse(a, &row_normalize(&apply_mask(b, m)?), p)))
        .collect::<Result<Vec<f64>>>()
}

/// True MSE of `x -> A sign(B x)` for sparse data whose nonzero part is
/// Gaussian, averaged over `n_masks` nonzero Bernoulli(p) masks.
pub fn exact_linear_mse(a: &Matrix, b: &Matrix, p: f64, n_masks: usize, seed: SeedSpec) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("keep probability must be in (0, 1], got {p}")));
    }
    let masks = masks_for(b.ncols(), p, n_masks, seed)?;
    exact_linear_mse_masks(a, b, p, &masks)
}

fn kv_nonlin(map: &mut BTreeMap<String, String>, prefix: &str, f: &ParametricNonlin) {
    map.insert(format!("{prefix}.alpha1"), f.alpha1.to_string());
    map.insert(format!("{prefix}.alpha2"), f.alpha2.to_string());
    map.insert(format!("{prefix}.alpha3"), f.alpha3.to_string());
}

fn get_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    map.get(key)
        .ok_or_else(|| Error::Parse(format!("checkpoint missing {key}")))?
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("{key}: {e}")))
}

fn read_nonlin(map: &BTreeMap<String, String>, prefix: &str) -> Result<ParametricNonlin> {
    Ok(ParametricNonlin::new(
        get_f64(map, &format!("{prefix}.alpha1"))?,
        get_f64(map, &format!("{prefix}.alpha2"))?,
        get_f64(map, &format!("{prefix}.alpha3"))?,
    ))
}

pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                return None;
            }
            l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Writes `B.csv`, the decoder matrices and `nonlin.txt` into `dir`.
pub fn save_checkpoint(model: &Autoencoder, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut kv = BTreeMap::new();
    kv.insert("architecture".to_string(), model.architecture().to_string());
    kv.insert("provenance".to_string(), model.encoder().provenance().as_str().to_string());
    write_matrix_csv(&dir.join("B.csv"), model.encoder())?;
    match model {
        Autoencoder::Linear(m) => write_matrix_csv(&dir.join("A.csv"), &m.a)?,
        Autoencoder::Denoised(m) => {
            write_matrix_csv(&dir.join("A.csv"), &m.a)?;
            match &m.f {
                Nonlinearity::Identity => {
                    kv.insert("f.kind".into(), "identity".into());
                }
                Nonlinearity::Parametric(f) => {
                    kv.insert("f.kind".into(), "parametric".into());
                    kv_nonlin(&mut kv, "f", f);
                }
                Nonlinearity::TanhMixture(f) => {
                    kv.insert("f.kind".into(), "tanh_mixture".into());
                    let names = ["gamma1", "eps1", "a1", "b1", "gamma2", "eps2", "a2", "b2"];
                    for (n, v) in names.iter().zip(f.params()) {
                        kv.insert(format!("f.{n}"), v.to_string());
                    }
                }
                Nonlinearity::Bayes(den) => {
                    kv.insert("f.kind".into(), "bayes".into());
                    kv.insert("f.prior".into(), den.prior.to_string());
                    kv.insert("f.mu".into(), den.se.mu.to_string());
                    kv.insert("f.sigma2".into(), den.se.sigma2.to_string());
                }
            }
        }
        Autoencoder::Multilayer(m) => {
            write_matrix_csv(&dir.join("W1.csv"), &m.w1)?;
            write_matrix_csv(&dir.join("W2.csv"), &m.w2)?;
            write_matrix_csv(&dir.join("V1.csv"), &m.v1)?;
            kv_nonlin(&mut kv, "f1", &m.f1);
            kv_nonlin(&mut kv, "f2", &m.f2);
            kv_nonlin(&mut kv, "g1", &m.g1);
            for (i, mg) in m.merge.iter().enumerate() {
                kv.insert(format!("merge{}.beta", i + 1), mg.beta.to_string());
                kv.insert(format!("merge{}.gamma", i + 1), mg.gamma.to_string());
            }
        }
    }
    std::fs::write(dir.join("nonlin.txt"), format_kv(&kv))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Autoencoder> {
    let kv = parse_kv(&std::fs::read_to_string(dir.join("nonlin.txt"))?);
    let prov = kv
        .get("provenance")
        .map(|s| Provenance::parse(s))
        .transpose()?
        .unwrap_or(Provenance::Loaded);
    let b = EncoderMatrix::exact(read_matrix_csv(&dir.join("B.csv"))?, prov)?;
    let arch = kv.get("architecture").map(String::as_str).unwrap_or("linear");
    Ok(match arch {
        "linear" => Autoencoder::Linear(LinearDecoderAE {
            b,
            a: read_matrix_csv(&dir.join("A.csv"))?,
        }),
        "denoised" => {
            let a = read_matrix_csv(&dir.join("A.csv"))?;
            let f = match kv.get("f.kind").map(String::as_str).unwrap_or("identity") {
                "identity" => Nonlinearity::Identity,
                "parametric" => Nonlinearity::Parametric(read_nonlin(&kv, "f")?),
                "tanh_mixture" => {
                    let names = ["gamma1", "eps1", "a1", "b1", "gamma2", "eps2", "a2", "b2"];
                    let mut v = [0.0; 8];
                    for (slot, n) in v.iter_mut().zip(names) {
                        *slot = get_f64(&kv, &format!("f.{n}"))?;
                    }
                    Nonlinearity::TanhMixture(TanhMixtureNonlin::from_params(v))
                }
                "bayes" => {
                    let prior = Prior::parse(kv.get("f.prior").ok_or_else(|| Error::Parse("missing f.prior".into()))?)?;
                    let se = StateEvolutionParams {
                        mu: get_f64(&kv, "f.mu")?,
                        sigma2: get_f64(&kv, "f.sigma2")?,
                    };
                    Nonlinearity::bayes(prior, se)
                }
                other => return Err(Error::Parse(format!("unknown nonlinearity {other:?}"))),
            };
            Autoencoder::Denoised(DenoisedAE { b, a, f })
        }
        "multilayer" => {
            let mut merge = [Merge::new(0.0, 0.0); 3];
            for (i, m) in merge.iter_mut().enumerate() {
                *m = Merge::new(
                    get_f64(&kv, &format!("merge{}.beta", i + 1))?,
                    get_f64(&kv, &format!("merge{}.gamma", i + 1))?,
                );
            }
            Autoencoder::Multilayer(MultilayerDecoderAE {
                b,
                w1: read_matrix_csv(&dir.join("W1.csv"))?,
                w2: read_matrix_csv(&dir.join("W2.csv"))?,
                v1: read_matrix_csv(&dir.join("V1.csv"))?,
                f1: read_nonlin(&kv, "f1")?,
                f2: read_nonlin(&kv, "f2")?,
                g1: read_nonlin(&kv, "g1")?,
                merge,
            })
        }
        other => return Err(Error::Parse(format!("unknown architecture {other:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, sample_haar_rows};
    use approx::assert_relative_eq;

    fn haar(n: usize, d: usize, seed: u64) -> EncoderMatrix {
        EncoderMatrix::new(sample_haar_rows(n, d, SeedSpec::from_seed(seed)).unwrap(), Provenance::HaarSubsampled)
    }

    #[test]
    fn encode_examples() {
        let b = Matrix::from_element(1, 1, 1.0);
        let z = encode(&b, &DVector::from_vec(vec![2.0]), SeedSpec::from_seed(0)).unwrap();
        assert_eq!(z[0], 1.0);
        let z = encode(&Matrix::identity(2, 2), &DVector::from_vec(vec![-3.0, 5.0]), SeedSpec::from_seed(0)).unwrap();
        assert_eq!(z.as_slice(), &[-1.0, 1.0]);
        let zero = DVector::from_vec(vec![0.0]);
        let plus = (0..10_000)
            .filter(|&s| encode(&b, &zero, SeedSpec::new(1, s)).unwrap()[0] > 0.0)
            .count() as f64
            / 1e4;
        assert!((plus - 0.5).abs() < 0.02);
        assert!(encode(&b, &DVector::zeros(2), SeedSpec::from_seed(0)).is_err());
    }

    #[test]
    fn encode_scale_invariant() {
        let b = haar(8, 16, 3);
        let x = crate::priors::sample_vector(&Prior::sparse_gaussian(1.0).unwrap(), 16, SeedSpec::from_seed(4)).unwrap();
        let s = SeedSpec::from_seed(5);
        assert_eq!(encode(&b, &x, s).unwrap(), encode(&b, &(&x * 7.5), s).unwrap());
    }

    #[test]
    fn decode_examples() {
        let b = haar(3, 4, 1);
        let mut rng = SeedSpec::from_seed(2).rng();
        let a = gaussian_matrix(4, 3, 1.0, &mut rng);
        let z = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let zero = Autoencoder::Linear(LinearDecoderAE {
            b: b.clone(),
            a: Matrix::zeros(4, 3),
        });
        assert_eq!(zero.decode(&z).unwrap(), DVector::zeros(4));
        let lin = Autoencoder::Linear(LinearDecoderAE { b: b.clone(), a: a.clone() });
        let den = Autoencoder::Denoised(DenoisedAE {
            b: b.clone(),
            a: a.clone(),
            f: Nonlinearity::Parametric(ParametricNonlin::new(1.0, 0.0, 3.0)),
        });
        assert_eq!(lin.decode(&z).unwrap(), den.decode(&z).unwrap());
        let ml = Autoencoder::Multilayer(MultilayerDecoderAE {
            b: b.clone(),
            w1: a.clone(),
            w2: gaussian_matrix(4, 3, 1.0, &mut rng),
            v1: gaussian_matrix(3, 4, 1.0, &mut rng),
            f1: ParametricNonlin::IDENTITY,
            f2: ParametricNonlin::IDENTITY,
            g1: ParametricNonlin::ZERO,
            merge: [Merge::new(0.7, 0.2), Merge::new(1.0, 0.0), Merge::new(0.0, 1.0)],
        });
        assert_eq!(ml.decode(&z).unwrap(), lin.decode(&z).unwrap());
        assert!(lin.decode(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn mc_mse_examples() {
        let prior = Prior::sparse_laplace(0.3).unwrap();
        let zero = Autoencoder::Linear(LinearDecoderAE {
            b: haar(10, 20, 1),
            a: Matrix::zeros(20, 10),
        });
        let est = mse_monte_carlo(&zero, &prior, 4000, SeedSpec::from_seed(2)).unwrap();
        assert!((est.estimate - 1.0).abs() < 3.0 * est.stderr);

        let ident = EncoderMatrix::identity_like(16, 16).unwrap();
        let exact = Autoencoder::Linear(LinearDecoderAE {
            b: ident,
            a: Matrix::identity(16, 16),
        });
        let est = mse_monte_carlo(&exact, &Prior::sparse_rademacher(1.0).unwrap(), 500, SeedSpec::from_seed(3)).unwrap();
        assert_eq!(est.estimate, 0.0);

        let b = haar(400, 400, 9);
        let a = b.transpose() * SQRT_2_OVER_PI;
        let model = Autoencoder::Linear(LinearDecoderAE { b, a });
        let est = mse_monte_carlo(&model, &Prior::sparse_gaussian(1.0).unwrap(), 2000, SeedSpec::from_seed(4)).unwrap();
        assert!((est.estimate - (1.0 - 2.0 / PI)).abs() < 0.01, "{est:?}");
    }

    #[test]
    fn mc_rotation_invariance() {
        let prior = Prior::sparse_gaussian(1.0).unwrap();
        let b = haar(8, 16, 11);
        let mut rng = SeedSpec::from_seed(12).rng();
        let a = gaussian_matrix(16, 8, 0.3, &mut rng);
        let q = sample_haar_rows(16, 16, SeedSpec::from_seed(13)).unwrap();
        let m1 = Autoencoder::Linear(LinearDecoderAE { b: b.clone(), a: a.clone() });
        let m2 = Autoencoder::Linear(LinearDecoderAE {
            b: EncoderMatrix::new(&*b * q.transpose(), Provenance::HaarSubsampled),
            a: &q * &a,
        });
        let e1 = mse_monte_carlo(&m1, &prior, 20_000, SeedSpec::from_seed(14)).unwrap();
        let e2 = mse_monte_carlo(&m2, &prior, 20_000, SeedSpec::from_seed(15)).unwrap();
        let comb = (e1.stderr.powi(2) + e2.stderr.powi(2)).sqrt();
        assert!((e1.estimate - e2.estimate).abs() < 3.0 * comb);
    }

    #[test]
    fn exact_mse_examples() {
        let b = haar(64, 64, 5);
        let a = b.transpose() * SQRT_2_OVER_PI;
        let v = exact_linear_mse(&a, &b, 1.0, 1, SeedSpec::from_seed(0)).unwrap();
        assert_relative_eq!(v, 1.0 - 2.0 / PI, epsilon = 1e-10);
        let zero = Matrix::zeros(64, 64);
        assert_eq!(exact_linear_mse(&zero, &b, 0.5, 4, SeedSpec::from_seed(0)).unwrap(), 1.0);
        let v1 = exact_linear_mse(&a, &b, 1.0, 1, SeedSpec::from_seed(1)).unwrap();
        assert_eq!(v, v1);
    }

    #[test]
    fn exact_mse_matches_monte_carlo() {
        let d = 24;
        let n = 12;
        let p = 0.5;
        let mut rng = SeedSpec::from_seed(21).rng();
        let b = EncoderMatrix::new(gaussian_matrix(n, d, 1.0, &mut rng), Provenance::Gaussian);
        let a = gaussian_matrix(d, n, 0.2, &mut rng);
        let masks = masks_for(d, p, 20_000, SeedSpec::from_seed(22)).unwrap();
        let exact = mean_and_stderr(&masked_mse_values(&a, &b, p, &masks).unwrap());
        let model = Autoencoder::Linear(LinearDecoderAE { b, a });
        let mc = mse_monte_carlo(&model, &Prior::sparse_gaussian(p).unwrap(), 200_000, SeedSpec::from_seed(23)).unwrap();
        let comb = (exact.stderr.powi(2) + mc.stderr.powi(2)).sqrt();
        assert!((exact.estimate - mc.estimate).abs() < 3.0 * comb, "{exact:?} vs {mc:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = haar(3, 5, 1);
        let mut rng = SeedSpec::from_seed(2).rng();
        let models = vec![
            Autoencoder::Linear(LinearDecoderAE {
                b: b.clone(),
                a: gaussian_matrix(5, 3, 1.0, &mut rng),
            }),
            Autoencoder::Denoised(DenoisedAE {
                b: b.clone(),
                a: gaussian_matrix(5, 3, 1.0, &mut rng),
                f: Nonlinearity::TanhMixture(TanhMixtureNonlin::antisymmetric(1.2, 0.7, 0.1, 0.05)),
            }),
            Autoencoder::Multilayer(MultilayerDecoderAE::tied(
                b.clone(),
                ParametricNonlin::INIT,
                ParametricNonlin::new(0.9, 0.2, 1.5),
                ParametricNonlin::INIT,
                [Merge::new(1.0, 1.0), Merge::new(1.0, 1.0), Merge::new(1.0, 0.0)],
            )),
        ];
        for (i, m) in models.iter().enumerate() {
            let sub = dir.path().join(format!("m{i}"));
            save_checkpoint(m, &sub).unwrap();
            assert_eq!(&load_checkpoint(&sub).unwrap(), m);
        }
    }

    #[test]
    fn tanh_mixture_antisymmetric() {
        let f = TanhMixtureNonlin::antisymmetric(1.3, 0.8, 0.2, 0.1);
        for x in [0.1, 0.5, 2.0, 7.0] {
            assert_relative_eq!(f.eval(-x), -f.eval(x), epsilon = 1e-15);
        }
    }
}
