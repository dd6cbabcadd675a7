//! First RI-GAMP iterate and the VAMP state-evolution recursion for a sign
//! channel with a Haar encoder and sparse Gaussian data.

use nalgebra::DVector;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::denoisers::fstar_sparse_gaussian;
use crate::error::{Error, Result};
use crate::linalg::{format_real, Matrix};
use crate::models::{encode, McEstimate};
use crate::quadrature::integrate_pieces;
use crate::rng::SeedSpec;
use crate::special::{mills_ratio, norm_pdf};
use crate::theory::StateEvolutionParams;

/// `B^T sign(B x)`.
pub fn rigamp_first_iterate(b: &Matrix, x: &DVector<f64>, seed: SeedSpec) -> Result<DVector<f64>> {
    let z = encode(b, x, seed)?;
    Ok(b.transpose() * z)
}

/// Eigenvalue law `r delta_1 + (1 - r) delta_0` of `B^T B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralLaw {
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VampState {
    pub k: usize,
    pub gamma1: f64,
    pub tau1: f64,
    pub gamma2: f64,
    pub tau2: f64,
    /// MSE read off the updated `gamma1`.
    pub mse: f64,
    /// `B1` was evaluated with `tau1 < 1` clamped.
    pub b1_clamped: bool,
}

/// Posterior variance-like quantity of the scalar channel
/// `R = X + N(0, 1/gamma1)` with `X ~ SG(p)`: the mmse `E[(X - E[X|R])^2]`.
pub fn vamp_e1(gamma1: f64, p: f64) -> Result<f64> {
    if !(gamma1 > 0.0 && gamma1.is_finite()) || !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("vamp_e1 needs gamma1 > 0 and p in (0,1], got {gamma1}, {p}")));
    }
    let s2 = 1.0 / gamma1;
    let v = 1.0 + p * s2;
    let se = StateEvolutionParams { mu: 1.0, sigma2: s2 };
    let sd_atom = s2.sqrt();
    let sd_slab = (1.0 / p + s2).sqrt();
    let mut f = |y: f64| {
        let m = y / v;
        let fy = fstar_sparse_gaussian(y, se, p);
        // slab weight; f* = w m
        let w = if m == 0.0 { slab_weight_at_zero(p, s2) } else { fy / m };
        let dens = (1.0 - p) * norm_pdf(y / sd_atom) / sd_atom + p * norm_pdf(y / sd_slab) / sd_slab;
        (w * s2 / v + w * (1.0 - w) * m * m) * dens
    };
    let lim = 12.0 * (1.0 / gamma1.sqrt()).max(1.0 / p.sqrt());
    let mut pts = vec![-lim, lim, 0.0];
    for k in [1.0, 3.0, 6.0] {
        for sd in [sd_atom, sd_slab] {
            if k * sd < lim {
                pts.push(k * sd);
                pts.push(-k * sd);
            }
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let res = integrate_pieces(&mut f, &pts, 1e-13, 1e-10);
    if !res.value.is_finite() || res.error > 1e-8 {
        return Err(Error::Numerical(format!(
            "vamp_e1 integration failed at gamma1={gamma1}, p={p}: value {} error {}",
            res.value, res.error
        )));
    }
    Ok(res.value)
}

fn slab_weight_at_zero(p: f64, s2: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    let v = 1.0 + p * s2;
    let log_slab = 1.5 * p.ln() - 0.5 * v.ln();
    let log_atom = (1.0 - p).ln() - 0.5 * s2.ln();
    1.0 / (1.0 + (log_atom - log_slab).exp())
}

pub fn vamp_e2(tau2: f64, gamma2: f64, r: f64) -> f64 {
    r / (tau2 + gamma2) + (1.0 - r) / gamma2
}

pub fn vamp_b2(tau2: f64, gamma2: f64) -> f64 {
    tau2 / (tau2 + gamma2)
}

/// `E[Z | P1, Y]` for the sign channel at precision `tau1`.
pub fn b1_conditional_mean(p1: f64, y: f64, tau1: f64) -> f64 {
    let st = tau1.sqrt();
    let u = -y * p1 * st;
    p1 + y / st / mills_ratio(u)
}

/// `d/dP1 E[Z | P1, Y]`.
pub fn b1_derivative(p1: f64, y: f64, tau1: f64) -> f64 {
    let u = -y * p1 * tau1.sqrt();
    let lam = 1.0 / mills_ratio(u);
    1.0 - lam * (lam - u)
}

const B1_CHUNK: usize = 8192;

/// Monte-Carlo estimate of `B1(tau1)`, the mean derivative of the output
/// denoiser. Needs `tau1 >= 1` so the generative parameterization exists.
pub fn vamp_b1(tau1: f64, n_mc: usize, seed: SeedSpec) -> Result<McEstimate> {
    let b = 1.0 - 1.0 / tau1;
    if !(b >= 0.0) || !tau1.is_finite() {
        return Err(Error::Domain(format!("vamp_b1 needs tau1 >= 1 (b = 1 - 1/tau1 >= 0), got tau1 = {tau1}")));
    }
    Ok(b1_monte_carlo(tau1, b, n_mc, seed))
}

fn b1_monte_carlo(tau1: f64, b: f64, n_mc: usize, seed: SeedSpec) -> McEstimate {
    let a = (b * (1.0 - b)).sqrt();
    let n_pairs = n_mc.div_ceil(2).max(2);
    let n_chunks = n_pairs.div_ceil(B1_CHUNK);
    let sums: Vec<(f64, f64, usize)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = B1_CHUNK.min(n_pairs - c * B1_CHUNK);
            let mut rng = seed.child(c as u64).rng();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                let g: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                let y = if z >= 0.0 { 1.0 } else { -1.0 };
                // antithetic in G
                let v = 0.5 * (b1_derivative(b * z + a * g, y, tau1) + b1_derivative(b * z - a * g, y, tau1));
                s += v;
                s2 += v * v;
            }
            (s, s2, len)
        })
        .collect();
    let (s, s2, n) = sums
        .iter()
        .fold((0.0, 0.0, 0usize), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    let n = n as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    McEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
    }
}

pub const B1_CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VampRun {
    pub mse: f64,
    pub trace: Vec<VampState>,
    /// `|mse_k - mse_{k-1}|` at the last iteration.
    pub last_delta: f64,
    pub converged: bool,
}

impl VampRun {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("k,gamma1,tau1,gamma2,tau2,mse\n");
        for st in &self.trace {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                st.k,
                format_real(st.gamma1),
                format_real(st.tau1),
                format_real(st.gamma2),
                format_real(st.tau2),
                format_real(st.mse)
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VampConfig {
    pub k_max: usize,
    pub init: f64,
    pub n_mc: usize,
    pub clamp_eps: f64,
    pub seed: SeedSpec,
}

impl Default for VampConfig {
    fn default() -> Self {
        Self {
            k_max: 15,
            init: 1e-6,
            n_mc: 1_000_000,
            clamp_eps: B1_CLAMP_EPS,
            seed: SeedSpec::from_seed(0),
        }
    }
}

/// Iterates the four-function recursion `k_max` times. `B1` reuses one
/// random stream at every iteration so the map is deterministic; while
/// `tau1 < 1` it is evaluated at `b = max(1 - 1/tau1, eps)`.
pub fn vamp_se_run(p: f64, r: f64, cfg: &VampConfig) -> Result<VampRun> {
    if !(p > 0.0 && p <= 1.0) || !(r > 0.0 && r <= 1.0) {
        return Err(Error::Domain(format!("vamp_se_run needs p, r in (0,1], got p={p}, r={r}")));
    }
    if !(cfg.init > 0.0) || cfg.k_max == 0 {
        return Err(Error::Domain("vamp_se_run needs init > 0 and k_max >= 1".into()));
    }
    let (mut g1, mut t1) = (cfg.init, cfg.init);
    let mut trace = Vec::with_capacity(cfg.k_max);
    let mut prev = f64::NAN;
    let mut last_delta = f64::INFINITY;
    for k in 0..cfg.k_max {
        let alpha1 = g1 * vamp_e1(g1, p)?;
        let g2 = g1 * (1.0 - alpha1) / alpha1;
        let b = 1.0 - 1.0 / t1;
        let clamped = b < cfg.clamp_eps;
        let b1 = if clamped {
            let be = cfg.clamp_eps;
            b1_monte_carlo(1.0 / (1.0 - be), be, cfg.n_mc, cfg.seed)
        } else {
            b1_monte_carlo(t1, b, cfg.n_mc, cfg.seed)
        }
        .estimate;
        let t2 = t1 * (1.0 - b1) / b1;
        let g1_next = g2 * r * t2 / ((1.0 - r) * t2 + g2);
        let t1_next = g2;
        for (name, v) in [("gamma1", g1_next), ("tau1", t1_next), ("gamma2", g2), ("tau2", t2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "vamp state {name} = {v} at iteration {k}; trace so far: {trace:?}"
                )));
            }
        }
        let mse = vamp_e1(g1_next, p)?;
        trace.push(VampState {
            k,
            gamma1: g1_next,
            tau1: t1_next,
            gamma2: g2,
            tau2: t2,
            mse,
            b1_clamped: clamped,
        });
        last_delta = (mse - prev).abs();
        prev = mse;
        g1 = g1_next;
        t1 = t1_next;
    }
    Ok(VampRun {
        mse: prev,
        trace,
        last_delta,
        converged: last_delta <= 1e-5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_haar_rows;
    use crate::priors::{sample_vector, Prior};
    use crate::theory::{gaussian_mse, optimal_denoised_mse, state_evolution_params};
    use approx::assert_relative_eq;

    #[test]
    fn first_iterate_examples() {
        let b = Matrix::from_element(1, 1, 1.0);
        let x1 = rigamp_first_iterate(&b, &DVector::from_vec(vec![2.0]), SeedSpec::from_seed(0)).unwrap();
        assert_eq!(x1[0], 1.0);

        let d = 500;
        let b = sample_haar_rows(d, d, SeedSpec::from_seed(1)).unwrap();
        let se = state_evolution_params(1.0).unwrap();
        let prior = Prior::sparse_gaussian(1.0).unwrap();
        let (mut cross, mut resid) = (0.0, 0.0);
        let reps = 20;
        for rep in 0..reps {
            let x = sample_vector(&prior, d, SeedSpec::new(2, rep)).unwrap();
            let x1 = rigamp_first_iterate(&b, &x, SeedSpec::new(3, rep)).unwrap();
            cross += x1.dot(&x) / d as f64;
            resid += (&x1 - &x * se.mu).norm_squared() / d as f64;
        }
        assert!((cross / reps as f64 - se.mu).abs() < 0.02);
        assert!((resid / reps as f64 - se.sigma2).abs() < 0.02);
    }

    #[test]
    fn e1_examples() {
        for g in [0.1, 1.0, 7.0] {
            assert_relative_eq!(vamp_e1(g, 1.0).unwrap(), 1.0 / (1.0 + g), epsilon = 1e-9);
        }
        assert!(vamp_e1(1e6, 0.5).unwrap() < 1e-3);
        for g in [1e-6, 0.5, 3.0, 100.0] {
            let v = vamp_e1(g, 0.3).unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
        assert!(vamp_e1(0.0, 0.5).is_err());
    }

    #[test]
    fn e2_b2_examples() {
        assert_eq!(vamp_e2(1.0, 1.0, 1.0), 0.5);
        assert_eq!(vamp_e2(0.0, 4.0, 0.3), 0.25);
        assert_eq!(vamp_e2(1.0, 1.0, 0.5), 0.75);
        assert_eq!(vamp_b2(2.0, 2.0), 0.5);
        assert_eq!(vamp_b2(0.0, 1.0), 0.0);
        assert_eq!(vamp_b2(3.0, 1.0), 0.75);
        for (t, g, r) in [(0.3, 1.7, 0.4), (5.0, 0.2, 0.9), (1.0, 1.0, 1.0)] {
            assert_relative_eq!(vamp_e2(t, g, r), (1.0 - r * vamp_b2(t, g)) / g, epsilon = 1e-14);
        }
    }

    #[test]
    fn b1_derivative_matches_finite_differences() {
        let tau1 = 4.0;
        let mut rng = SeedSpec::from_seed(7).rng();
        for _ in 0..10_000 {
            let p1: f64 = rand::Rng::random_range(&mut rng, -3.0..3.0);
            let y = if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 };
            let h = 1e-5;
            let fd = (b1_conditional_mean(p1 + h, y, tau1) - b1_conditional_mean(p1 - h, y, tau1)) / (2.0 * h);
            let an = b1_derivative(p1, y, tau1);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{p1} {y}: {fd} vs {an}");
        }
    }

    #[test]
    fn b1_examples() {
        let s = SeedSpec::from_seed(3);
        let a = vamp_b1(1.5, 200_000, s).unwrap();
        let b = vamp_b1(1.5, 200_000, s).unwrap();
        assert_eq!(a, b);
        assert!(a.estimate > 0.0 && a.estimate < 1.0);
        // at tau1 = 1 the observation carries no information: 1 - 2/pi
        let at_one = vamp_b1(1.0, 1000, s).unwrap();
        assert_relative_eq!(at_one.estimate, 1.0 - 2.0 / std::f64::consts::PI, epsilon = 1e-12);
        assert!(matches!(vamp_b1(0.5, 10, s), Err(Error::Domain(_))));
    }

    #[test]
    fn se_gaussian_fixed_point() {
        let cfg = VampConfig {
            n_mc: 200_000,
            ..Default::default()
        };
        let run = vamp_se_run(1.0, 1.0, &cfg).unwrap();
        assert!((run.mse - gaussian_mse(1.0).unwrap()).abs() < 1e-3, "{}", run.mse);
        assert!(run.trace[0].b1_clamped);
    }

    #[test]
    fn se_sparse_below_one_step() {
        let cfg = VampConfig {
            n_mc: 200_000,
            ..Default::default()
        };
        let run = vamp_se_run(0.3, 1.0, &cfg).unwrap();
        let one_step = optimal_denoised_mse(&Prior::sparse_gaussian(0.3).unwrap(), 1.0).unwrap();
        assert!(run.converged);
        assert!(run.mse < one_step);
        assert_relative_eq!(run.trace[1].mse, one_step, epsilon = 1e-6);
        for st in &run.trace {
            assert!(st.gamma1 > 0.0 && st.tau1 > 0.0 && st.gamma2 > 0.0 && st.tau2 > 0.0);
        }
        let tiny = vamp_se_run(0.3, 1e-4, &cfg).unwrap();
        assert!(tiny.mse > 0.999);
    }

    #[test]
    fn fixed_point_insensitive_to_clamp() {
        let base = VampConfig {
            n_mc: 200_000,
            ..Default::default()
        };
        let loose = VampConfig { clamp_eps: 1e-8, ..base };
        let a = vamp_se_run(0.3, 0.6, &base).unwrap();
        let b = vamp_se_run(0.3, 0.6, &loose).unwrap();
        assert!(a.trace[0].b1_clamped && b.trace[0].b1_clamped);
        assert!((a.mse - b.mse).abs() < 1e-6, "{} {}", a.mse, b.mse);
    }
}
