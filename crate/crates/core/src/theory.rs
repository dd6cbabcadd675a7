//! One-step MSE predictions: the Gaussian law, the identity-encoder law, the
//! Haar-encoder law with a componentwise denoiser, and the sparsity levels
//! at which the optimal encoder changes structure.

use std::f64::consts::PI;

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::linalg::format_real;
use crate::priors::{Prior, PriorFamily};
use crate::quadrature::{bisect, gauss_hermite_200};
use crate::special::SQRT_2_OVER_PI;

/// Effective scalar channel `y = mu x + sigma g` of the first message-passing
/// iterate `B^T sign(B x)` for a Haar encoder with rate `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEvolutionParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl StateEvolutionParams {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

fn check_rate(r: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero { (0.0..=1.0).contains(&r) } else { r > 0.0 && r <= 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!("compression rate out of range: {r}")))
    }
}

pub fn gaussian_mse(r: f64) -> Result<f64> {
    check_rate(r, true)?;
    Ok(1.0 - 2.0 / PI * r)
}

pub fn identity_mse(prior: &Prior, r: f64) -> Result<f64> {
    check_rate(r, true)?;
    Ok(1.0 - r * prior.mean_abs().powi(2))
}

pub fn state_evolution_params(r: f64) -> Result<StateEvolutionParams> {
    check_rate(r, false)?;
    Ok(StateEvolutionParams {
        mu: r * SQRT_2_OVER_PI,
        sigma2: r * (1.0 - r * 2.0 / PI),
    })
}

/// Best of the two linear-decoder candidates (Haar rotation vs identity).
pub fn linear_envelope_mse(prior: &Prior, r: f64) -> Result<f64> {
    Ok(gaussian_mse(r)?.min(identity_mse(prior, r)?))
}

/// `E|x - f(mu x + sigma g)|^2` with Gauss-Hermite over `g` and the prior's
/// atom/slab decomposition over `x`.
pub fn haar_denoised_mse(prior: &Prior, f: &dyn Fn(f64) -> f64, r: f64) -> Result<f64> {
    if r == 0.0 {
        let c = f(0.0);
        return Ok(prior.second_moment() + c * c);
    }
    let se = state_evolution_params(r)?;
    let sigma = se.sigma();
    let gh = gauss_hermite_200();
    let mut bad = false;
    let value = prior.expect(
        |x| {
            let v = gh.expect(|g| {
                let e = x - f(se.mu * x + sigma * g);
                e * e
            });
            if !v.is_finite() {
                bad = true;
            }
            v
        },
        &[],
        1e-11,
    );
    if bad || !value.is_finite() {
        return Err(Error::Numerical("denoiser produced non-finite values".into()));
    }
    Ok(value)
}

pub fn optimal_denoised_mse(prior: &Prior, r: f64) -> Result<f64> {
    check_rate(r, true)?;
    if r == 0.0 {
        return Ok(prior.second_moment());
    }
    let den = Denoiser::new(prior.clone(), state_evolution_params(r)?);
    haar_denoised_mse(prior, &|y| den.eval(y), r)
}

/// Best of Haar-with-`f*` and identity-with-denoiser (equal to the identity
/// linear law for symmetric priors).
pub fn denoised_envelope_mse(prior: &Prior, r: f64) -> Result<f64> {
    Ok(optimal_denoised_mse(prior, r)?.min(identity_mse(prior, r)?))
}

pub const BISECTION_BRACKET: (f64, f64) = (1e-4, 1.0 - 1e-9);

/// Keep-probability above which the identity beats a rotation for the linear
/// decoder: root of `E|x| = sqrt(2/pi)`.
pub fn critical_sparsity_linear(family: PriorFamily, tol: f64) -> Option<f64> {
    let (lo, hi) = BISECTION_BRACKET;
    bisect(
        |p| family.at(p).expect("p in bracket").mean_abs() - SQRT_2_OVER_PI,
        lo,
        hi,
        tol,
    )
}

/// Same transition for the denoised decoder at rate `r`.
pub fn critical_sparsity_denoised(family: PriorFamily, r: f64, tol: f64) -> Option<f64> {
    let (lo, hi) = BISECTION_BRACKET;
    bisect(
        |p| {
            let prior = family.at(p).expect("p in bracket");
            match (optimal_denoised_mse(&prior, r), identity_mse(&prior, r)) {
                (Ok(a), Ok(b)) => a - b,
                _ => f64::NAN,
            }
        },
        lo,
        hi,
        tol,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub label: String,
}

impl MseCurve {
    pub fn from_fn(label: &str, grid: &[f64], mut f: impl FnMut(f64) -> Result<f64>) -> Result<Self> {
        let values = grid.iter().map(|&g| f(g)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.to_vec(),
            values,
            label: label.to_string(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid_value,mse,label\n");
        s.push_str(&self.csv_rows());
        s
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (g, v) in self.grid.iter().zip(&self.values) {
            s.push_str(&format!("{},{},{}\n", format_real(*g), format_real(*v), self.label));
        }
        s
    }
}
