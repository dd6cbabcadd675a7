//! Bayes posterior-mean denoisers `f*(y) = E[x | mu x + sigma g = y]`.
//!
//! Closed forms for the sparse Gaussian, Rademacher and Laplace priors are
//! evaluated in the log domain at `|y|` and the sign is applied afterwards,
//! so they are exactly odd. Other priors go through quadrature (analytic) or
//! a sample-ratio Monte-Carlo estimate (empirical).

use std::f64::consts::PI;

use crate::priors::{Prior, PriorFamily};
use crate::special::{log_partial_first_moment, log_sum_exp, norm_logcdf, LN_SQRT_2PI};
use crate::theory::StateEvolutionParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserForm {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub prior: Prior,
    pub se: StateEvolutionParams,
    pub form: DenoiserForm,
}

impl Denoiser {
    /// Picks the closed form when one exists.
    pub fn new(prior: Prior, se: StateEvolutionParams) -> Self {
        let form = match prior.family() {
            Some(PriorFamily::SparseGaussian | PriorFamily::SparseRademacher | PriorFamily::SparseLaplace) => {
                DenoiserForm::ClosedForm
            }
            Some(PriorFamily::SparseGaussianMixture) => DenoiserForm::Quadrature,
            None => DenoiserForm::MonteCarlo,
        };
        Self { prior, se, form }
    }

    pub fn eval(&self, y: f64) -> f64 {
        match (self.form, &self.prior) {
            (DenoiserForm::ClosedForm, Prior::Analytic { family, p }) => match family {
                PriorFamily::SparseGaussian => fstar_sparse_gaussian(y, self.se, *p),
                PriorFamily::SparseRademacher => fstar_sparse_rademacher(y, self.se, *p),
                PriorFamily::SparseLaplace => fstar_sparse_laplace(y, self.se, *p),
                PriorFamily::SparseGaussianMixture => posterior_mean_numeric(&self.prior, self.se, y).value,
            },
            _ => posterior_mean_numeric(&self.prior, self.se, y).value,
        }
    }

    /// Largest finite-difference slope of `f*` on a grid of `[-lim, lim]`.
    pub fn max_slope(&self, lim: f64, points: usize) -> f64 {
        let h = 2.0 * lim / (points - 1) as f64;
        let vals: Vec<f64> = (0..points).map(|i| self.eval(-lim + i as f64 * h)).collect();
        vals.windows(2).map(|w| ((w[1] - w[0]) / h).abs()).fold(0.0, f64::max)
    }
}

fn odd(y: f64, f: impl Fn(f64) -> f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let v = f(y.abs());
    if y < 0.0 {
        -v
    } else {
        v
    }
}

pub fn fstar_sparse_gaussian(y: f64, se: StateEvolutionParams, p: f64) -> f64 {
    let (mu, s2) = (se.mu, se.sigma2);
    let v = mu * mu + p * s2;
    odd(y, |y| {
        let slope = mu / v;
        if p >= 1.0 {
            return slope * y;
        }
        let log_slab = 1.5 * p.ln() - 0.5 * (2.0 * PI * v).ln() - p * y * y / (2.0 * v);
        let log_atom = (1.0 - p).ln() - 0.5 * (2.0 * PI * s2).ln() - y * y / (2.0 * s2);
        let w = 1.0 / (1.0 + (log_atom - log_slab).exp());
        w * slope * y
    })
}

pub fn fstar_sparse_rademacher(y: f64, se: StateEvolutionParams, p: f64) -> f64 {
    let (mu, s2) = (se.mu, se.sigma2);
    let a = 1.0 / p.sqrt();
    odd(y, |y| {
        let l0 = if p < 1.0 { (1.0 - p).ln() - y * y / (2.0 * s2) } else { f64::NEG_INFINITY };
        let lp = (p / 2.0).ln() - (y - mu * a).powi(2) / (2.0 * s2);
        let lm = (p / 2.0).ln() - (y + mu * a).powi(2) / (2.0 * s2);
        let lz = log_sum_exp(&[l0, lp, lm]);
        a * ((lp - lz).exp() - (lm - lz).exp())
    })
}

/// Log of the two half-line integrals against the Laplace slab,
/// `ln int_0^inf x^k exp(-lambda x - (y - mu x)^2 / (2 sigma^2)) dx` for k = 0, 1.
fn laplace_half_line(y: f64, mu: f64, s2: f64, lambda: f64) -> (f64, f64) {
    let m = (mu * y - lambda * s2) / (mu * mu);
    let s = s2.sqrt() / mu;
    let c = (mu * y - lambda * s2).powi(2) / (2.0 * mu * mu * s2) - y * y / (2.0 * s2);
    let t = m / s;
    let i0 = c + s.ln() + LN_SQRT_2PI + norm_logcdf(t);
    let i1 = c + 2.0 * s.ln() + LN_SQRT_2PI + log_partial_first_moment(t);
    (i0, i1)
}

pub fn fstar_sparse_laplace(y: f64, se: StateEvolutionParams, p: f64) -> f64 {
    let (mu, s2) = (se.mu, se.sigma2);
    let lambda = (2.0 * p).sqrt();
    let log_w = (p * lambda / 2.0).ln();
    odd(y, |y| {
        let (p0, p1) = laplace_half_line(y, mu, s2, lambda);
        let (n0, n1) = laplace_half_line(-y, mu, s2, lambda);
        let l_atom = if p < 1.0 { (1.0 - p).ln() - y * y / (2.0 * s2) } else { f64::NEG_INFINITY };
        let l_den = log_sum_exp(&[l_atom, log_w + p0, log_w + n0]);
        (log_w + p1 - l_den).exp() * (1.0 - (n1 - p1).exp())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMean {
    pub value: f64,
    /// Monte-Carlo standard error (empirical priors only).
    pub stderr: Option<f64>,
    pub precision_warning: bool,
}

/// `E[x phi((y - mu x)/sigma)] / E[phi((y - mu x)/sigma)]` over the prior.
pub fn posterior_mean_numeric(prior: &Prior, se: StateEvolutionParams, y: f64) -> PosteriorMean {
    let (mu, s2) = (se.mu, se.sigma2);
    let loglik = |x: f64| -(y - mu * x).powi(2) / (2.0 * s2);
    match prior {
        Prior::Empirical { samples } => {
            let shift = samples.iter().map(|&x| loglik(x)).fold(f64::NEG_INFINITY, f64::max);
            let n = samples.len();
            let w: Vec<f64> = samples.iter().map(|&x| (loglik(x) - shift).exp()).collect();
            let sw: f64 = w.iter().sum();
            let sxw: f64 = samples.iter().zip(&w).map(|(x, w)| x * w).sum();
            let value = sxw / sw;
            let mean_w = sw / n as f64;
            let resid: f64 = samples
                .iter()
                .zip(&w)
                .map(|(x, w)| ((x - value) * w).powi(2))
                .sum::<f64>()
                / (n.max(2) - 1) as f64;
            PosteriorMean {
                value,
                stderr: Some((resid / n as f64).sqrt() / mean_w),
                precision_warning: n < 100,
            }
        }
        Prior::Analytic { .. } => {
            let parts = prior.density_parts().expect("analytic prior");
            let s = s2.sqrt() / mu;
            let center = y / mu;
            let mut probe: Vec<f64> = parts.slab_breakpoints();
            probe.push(center);
            probe.extend(parts.discrete.iter().map(|d| d.0));
            probe.push(0.0);
            let log_dens = |x: f64| {
                let d = parts.continuous_density(x);
                if d > 0.0 {
                    d.ln()
                } else {
                    f64::NEG_INFINITY
                }
            };
            let mut shift = f64::NEG_INFINITY;
            for &x in &probe {
                shift = shift.max(log_dens(x) + loglik(x));
            }
            if parts.atom_weight > 0.0 {
                shift = shift.max(parts.atom_weight.ln() + loglik(0.0));
            }
            for &(x, w) in &parts.discrete {
                shift = shift.max(w.ln() + loglik(x));
            }
            let extra: Vec<f64> = [-12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0]
                .iter()
                .map(|k| center + k * s)
                .collect();
            let den = prior.expect(|x| (loglik(x) - shift).exp(), &extra, 1e-300);
            let num = prior.expect(|x| x * (loglik(x) - shift).exp(), &extra, 1e-300);
            PosteriorMean {
                value: num / den,
                stderr: None,
                precision_warning: false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::state_evolution_params;
    use approx::assert_relative_eq;

    fn se(r: f64) -> StateEvolutionParams {
        state_evolution_params(r).unwrap()
    }

    #[test]
    fn sparse_gaussian_examples() {
        let se1 = se(1.0);
        assert_eq!(fstar_sparse_gaussian(0.0, se1, 0.4), 0.0);
        for y in [-3.0, -0.5, 0.7, 2.5] {
            let want = se1.mu * y / (se1.mu.powi(2) + se1.sigma2);
            assert_relative_eq!(fstar_sparse_gaussian(y, se1, 1.0), want, max_relative = 1e-14);
        }
        let p = 0.4;
        let slope = se1.mu / (se1.mu.powi(2) + p * se1.sigma2);
        for y in [50.0, -50.0] {
            assert_relative_eq!(fstar_sparse_gaussian(y, se1, p) / y, slope, max_relative = 1e-3);
        }
    }

    #[test]
    fn sparse_rademacher_examples() {
        let se1 = se(1.0);
        assert_eq!(fstar_sparse_rademacher(0.0, se1, 0.3), 0.0);
        assert!((fstar_sparse_rademacher(40.0, se1, 0.25) - 2.0).abs() < 1e-6);
        let prior = Prior::sparse_rademacher(0.2).unwrap();
        for i in 0..=120 {
            let y = -6.0 + 0.1 * i as f64;
            let f = fstar_sparse_rademacher(y, se1, 0.2);
            assert!(f.abs() < 1.0 / 0.2f64.sqrt());
            let q = posterior_mean_numeric(&prior, se1, y).value;
            assert!((f - q).abs() < 1e-10, "y={y}: {f} vs {q}");
        }
    }

    #[test]
    fn sparse_laplace_matches_quadrature() {
        for (p, r) in [(1.0, 1.0), (0.4, 1.0), (0.4, 0.25), (0.1, 0.5)] {
            let s = se(r);
            let prior = Prior::sparse_laplace(p).unwrap();
            assert_eq!(fstar_sparse_laplace(0.0, s, p), 0.0);
            for i in 0..=80 {
                let y = -8.0 + 0.2 * i as f64;
                let f = fstar_sparse_laplace(y, s, p);
                let q = posterior_mean_numeric(&prior, s, y).value;
                assert!((f - q).abs() < 1e-6, "p={p} r={r} y={y}: {f} vs {q}");
            }
        }
        let s = se(1.0);
        for y in [20.0, 50.0, -50.0] {
            assert!(fstar_sparse_laplace(y, s, 0.4).is_finite());
        }
    }

    #[test]
    fn numeric_gaussian_conjugate() {
        let s = se(0.5);
        let prior = Prior::sparse_gaussian(1.0).unwrap();
        for y in [-4.0, -1.0, 0.3, 2.0, 7.0] {
            let want = s.mu * y / (s.mu.powi(2) + s.sigma2);
            assert!((posterior_mean_numeric(&prior, s, y).value - want).abs() < 1e-8);
        }
    }

    #[test]
    fn closed_forms_odd_and_monotone() {
        let s = se(1.0);
        let fs: [fn(f64, StateEvolutionParams, f64) -> f64; 3] =
            [fstar_sparse_gaussian, fstar_sparse_rademacher, fstar_sparse_laplace];
        for f in fs {
            for p in [0.2, 0.7] {
                let mut prev = f64::NEG_INFINITY;
                for i in 0..1000 {
                    let y = -20.0 + 40.0 * i as f64 / 999.0;
                    let v = f(y, s, p);
                    assert_eq!(f(-y, s, p), -v);
                    assert!(v >= prev - 1e-12);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn empirical_precision_flag() {
        let prior = Prior::empirical(vec![1.0, -1.0, 0.0]);
        let pm = posterior_mean_numeric(&prior, se(1.0), 0.5);
        assert!(pm.precision_warning);
        assert!(pm.value > 0.0);
    }
}
