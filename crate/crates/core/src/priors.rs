//! Scalar data laws with unit second moment, their samplers and moments, and
//! the whitening / pixel-masking preprocessing used for empirical data.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{read_matrix_csv, Matrix};
use crate::quadrature::integrate_pieces;
use crate::rng::SeedSpec;
use crate::special::{norm_cdf, norm_pdf, SQRT_2_OVER_PI};

/// The analytic families, parameterized by keep-probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorFamily {
    SparseGaussian,
    SparseRademacher,
    SparseLaplace,
    SparseGaussianMixture,
}

impl PriorFamily {
    pub fn at(self, p: f64) -> Result<Prior> {
        Prior::analytic(self, p)
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorFamily::SparseGaussian => "sparse_gaussian",
            PriorFamily::SparseRademacher => "sparse_rademacher",
            PriorFamily::SparseLaplace => "sparse_laplace",
            PriorFamily::SparseGaussianMixture => "sparse_gaussian_mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sparse_gaussian" | "gaussian" => PriorFamily::SparseGaussian,
            "sparse_rademacher" | "rademacher" => PriorFamily::SparseRademacher,
            "sparse_laplace" | "laplace" => PriorFamily::SparseLaplace,
            "sparse_gaussian_mixture" | "mixture" => PriorFamily::SparseGaussianMixture,
            other => return Err(Error::Parse(format!("unknown prior family {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Analytic { family: PriorFamily, p: f64 },
    Empirical { samples: Arc<Vec<f64>> },
}

/// Atom-plus-slab decomposition of an analytic prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityParts {
    pub atom_weight: f64,
    /// Point masses away from zero, as `(location, weight)`.
    pub discrete: Vec<(f64, f64)>,
    slab: Option<(PriorFamily, f64)>,
}

impl DensityParts {
    pub fn has_continuous(&self) -> bool {
        self.slab.is_some()
    }

    /// Density of the continuous part (already multiplied by `p`).
    pub fn continuous_density(&self, x: f64) -> f64 {
        match self.slab {
            None => 0.0,
            Some((PriorFamily::SparseGaussian, p)) => p * p.sqrt() * norm_pdf(x * p.sqrt()),
            Some((PriorFamily::SparseLaplace, p)) => p * (p / 2.0).sqrt() * (-(2.0 * p).sqrt() * x.abs()).exp(),
            Some((PriorFamily::SparseGaussianMixture, p)) => {
                let s = ((1.0 - p) / p).sqrt();
                0.5 * p * (norm_pdf((x - 1.0) / s) + norm_pdf((x + 1.0) / s)) / s
            }
            Some((PriorFamily::SparseRademacher, _)) => 0.0,
        }
    }

    /// Integration range and interior breakpoints for the continuous part.
    pub fn slab_breakpoints(&self) -> Vec<f64> {
        let mut pts = match self.slab {
            None => return Vec::new(),
            Some((PriorFamily::SparseGaussian, p)) => {
                let s = 1.0 / p.sqrt();
                [-13.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 13.0].iter().map(|k| k * s).collect::<Vec<_>>()
            }
            Some((PriorFamily::SparseLaplace, p)) => {
                let b = 1.0 / (2.0 * p).sqrt();
                [-45.0, -20.0, -8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0, 20.0, 45.0].iter().map(|k| k * b).collect()
            }
            Some((PriorFamily::SparseGaussianMixture, p)) => {
                let s = ((1.0 - p) / p).sqrt();
                let mut v = vec![0.0];
                for c in [-1.0, 1.0] {
                    for k in [-13.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 13.0] {
                        v.push(c + k * s);
                    }
                }
                v
            }
            Some((PriorFamily::SparseRademacher, _)) => return Vec::new(),
        };
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        pts
    }
}

impl Prior {
    pub fn analytic(family: PriorFamily, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("keep probability must be in (0, 1], got {p}")));
        }
        Ok(Prior::Analytic { family, p })
    }

    pub fn sparse_gaussian(p: f64) -> Result<Self> {
        Self::analytic(PriorFamily::SparseGaussian, p)
    }

    pub fn sparse_rademacher(p: f64) -> Result<Self> {
        Self::analytic(PriorFamily::SparseRademacher, p)
    }

    pub fn sparse_laplace(p: f64) -> Result<Self> {
        Self::analytic(PriorFamily::SparseLaplace, p)
    }

    pub fn sparse_gaussian_mixture(p: f64) -> Result<Self> {
        Self::analytic(PriorFamily::SparseGaussianMixture, p)
    }

    pub fn empirical(samples: Vec<f64>) -> Self {
        Prior::Empirical {
            samples: Arc::new(samples),
        }
    }

    pub fn family(&self) -> Option<PriorFamily> {
        match self {
            Prior::Analytic { family, .. } => Some(*family),
            Prior::Empirical { .. } => None,
        }
    }

    /// Keep-probability; for empirical priors the fraction of nonzero samples.
    pub fn p(&self) -> f64 {
        match self {
            Prior::Analytic { p, .. } => *p,
            Prior::Empirical { samples } => {
                if samples.is_empty() {
                    return 0.0;
                }
                samples.iter().filter(|&&x| x != 0.0).count() as f64 / samples.len() as f64
            }
        }
    }

    /// Parses `family:p=0.4` or `empirical:file=path.csv`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut p = None;
        let mut file = None;
        for kv in rest.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value in prior spec, got {kv:?}")))?;
            match k.trim() {
                "p" => {
                    p = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Parse(format!("prior p {v:?}: {e}")))?,
                    )
                }
                "file" => file = Some(v.trim().to_string()),
                other => return Err(Error::Parse(format!("unknown prior key {other:?}"))),
            }
        }
        if kind.trim() == "empirical" {
            let file = file.ok_or_else(|| Error::Parse("empirical prior needs file=".into()))?;
            return Self::load_empirical(Path::new(&file));
        }
        let family = PriorFamily::parse(kind.trim())?;
        let p = p.ok_or_else(|| Error::Parse(format!("prior spec {spec:?} needs p=")))?;
        Self::analytic(family, p)
    }

    /// Reads every number in a CSV file, either the matrix format with an
    /// `n,d` header or a plain column of values.
    pub fn load_empirical(path: &Path) -> Result<Self> {
        if let Ok(m) = read_matrix_csv(path) {
            return Ok(Self::empirical(m.transpose().as_slice().to_vec()));
        }
        let text = std::fs::read_to_string(path)?;
        let vals = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::empirical(vals))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<f64> {
        match self {
            Prior::Empirical { samples } => {
                if samples.is_empty() {
                    return Err(Error::State("empirical prior has no samples".into()));
                }
                Ok(samples[rng.random_range(0..samples.len())])
            }
            Prior::Analytic { family, p } => Ok(sample_analytic(*family, *p, rng)),
        }
    }

    pub fn sample_into(&self, out: &mut [f64], rng: &mut impl Rng) -> Result<()> {
        for v in out.iter_mut() {
            *v = self.sample(rng)?;
        }
        Ok(())
    }

    /// `E|x|`.
    pub fn mean_abs(&self) -> f64 {
        match self {
            Prior::Empirical { samples } => samples.iter().map(|x| x.abs()).sum::<f64>() / samples.len().max(1) as f64,
            Prior::Analytic { family, p } => {
                let p = *p;
                match family {
                    PriorFamily::SparseGaussian => SQRT_2_OVER_PI * p.sqrt(),
                    PriorFamily::SparseRademacher => p.sqrt(),
                    PriorFamily::SparseLaplace => (p / 2.0).sqrt(),
                    PriorFamily::SparseGaussianMixture => p * folded_normal_mean(1.0, ((1.0 - p) / p).sqrt()),
                }
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            Prior::Empirical { samples } => samples.iter().map(|x| x * x).sum::<f64>() / samples.len().max(1) as f64,
            Prior::Analytic { .. } => 1.0,
        }
    }

    pub fn density_parts(&self) -> Result<DensityParts> {
        let (family, p) = match self {
            Prior::Empirical { .. } => {
                return Err(Error::Unsupported("empirical priors have no density decomposition".into()))
            }
            Prior::Analytic { family, p } => (*family, *p),
        };
        Ok(match family {
            PriorFamily::SparseRademacher => {
                let a = 1.0 / p.sqrt();
                DensityParts {
                    atom_weight: 1.0 - p,
                    discrete: vec![(-a, p / 2.0), (a, p / 2.0)],
                    slab: None,
                }
            }
            PriorFamily::SparseGaussianMixture if p >= 1.0 => DensityParts {
                atom_weight: 0.0,
                discrete: vec![(-1.0, 0.5), (1.0, 0.5)],
                slab: None,
            },
            f => DensityParts {
                atom_weight: 1.0 - p,
                discrete: Vec::new(),
                slab: Some((f, p)),
            },
        })
    }

    /// `E[h(x)]`: exact on atoms, adaptive Gauss-Kronrod on the slab, sample
    /// average for empirical priors. `extra_points` are added as breakpoints
    /// where `h` has narrow features; they may also widen the range.
    pub fn expect(&self, mut h: impl FnMut(f64) -> f64, extra_points: &[f64], abs_tol: f64) -> f64 {
        let parts = match self {
            Prior::Empirical { samples } => {
                return samples.iter().map(|&x| h(x)).sum::<f64>() / samples.len().max(1) as f64
            }
            _ => self.density_parts().expect("analytic prior"),
        };
        let mut total = 0.0;
        if parts.atom_weight > 0.0 {
            total += parts.atom_weight * h(0.0);
        }
        for &(x, w) in &parts.discrete {
            total += w * h(x);
        }
        if parts.has_continuous() {
            let mut pts = parts.slab_breakpoints();
            pts.extend(extra_points.iter().filter(|x| x.is_finite()));
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            let mut g = |x: f64| {
                let w = parts.continuous_density(x);
                if w == 0.0 {
                    0.0
                } else {
                    w * h(x)
                }
            };
            total += integrate_pieces(&mut g, &pts, abs_tol, 1e-12).value;
        }
        total
    }

    pub fn spec_string(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::Analytic { family, p } => write!(f, "{}:p={}", family.name(), p),
            Prior::Empirical { samples } => write!(f, "empirical:n={}", samples.len()),
        }
    }
}

fn sample_analytic(family: PriorFamily, p: f64, rng: &mut impl Rng) -> f64 {
    if p < 1.0 && rng.random::<f64>() >= p {
        return 0.0;
    }
    match family {
        PriorFamily::SparseGaussian => rng.sample::<f64, _>(StandardNormal) / p.sqrt(),
        PriorFamily::SparseRademacher => {
            if rng.random::<bool>() {
                1.0 / p.sqrt()
            } else {
                -1.0 / p.sqrt()
            }
        }
        PriorFamily::SparseLaplace => {
            let e: f64 = rng.sample(Exp1);
            let mag = e / (2.0 * p).sqrt();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        }
        PriorFamily::SparseGaussianMixture => {
            let c = if rng.random::<bool>() { 1.0 } else { -1.0 };
            c + ((1.0 - p) / p).sqrt() * rng.sample::<f64, _>(StandardNormal)
        }
    }
}

/// `E|N(m, s^2)|`.
pub fn folded_normal_mean(m: f64, s: f64) -> f64 {
    if s == 0.0 {
        return m.abs();
    }
    s * SQRT_2_OVER_PI * (-m * m / (2.0 * s * s)).exp() + m * (1.0 - 2.0 * norm_cdf(-m / s))
}

/// i.i.d. draw of a length-`d` vector.
pub fn sample_vector(prior: &Prior, d: usize, seed: SeedSpec) -> Result<DVector<f64>> {
    let mut rng = seed.rng();
    let mut v = DVector::zeros(d);
    prior.sample_into(v.as_mut_slice(), &mut rng)?;
    Ok(v)
}

/// `n` i.i.d. draws as the columns of a `d x n` matrix.
pub fn sample_matrix(prior: &Prior, d: usize, n: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let mut m = Matrix::zeros(d, n);
    prior.sample_into(m.as_mut_slice(), rng)?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct WhitenedDataset {
    /// samples x d
    pub data: Matrix,
    pub mean: DVector<f64>,
    pub whitener: Matrix,
    pub rank: usize,
}

/// Centers the rows of `data` (samples x d) and multiplies by the inverse
/// square root of the empirical covariance, restricted to its numerically
/// nonzero eigenspace.
pub fn whiten(data: &Matrix) -> Result<WhitenedDataset> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::State(format!("whitening needs at least 2 samples, got {n}")));
    }
    let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
    let mut centered = data.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = 1e-10 * lmax;
    let mut rank = 0;
    let inv_sqrt = DVector::from_fn(d, |k, _| {
        let l = eig.eigenvalues[k];
        if l > cutoff {
            rank += 1;
            1.0 / l.sqrt()
        } else {
            0.0
        }
    });
    let q = &eig.eigenvectors;
    let whitener = q * Matrix::from_diagonal(&inv_sqrt) * q.transpose();
    let white = centered * &whitener;
    Ok(WhitenedDataset {
        data: white,
        mean,
        whitener,
        rank,
    })
}

/// Zeroes each entry independently with probability `1 - keep_prob`.
pub fn mask_pixels(data: &Matrix, keep_prob: f64, seed: SeedSpec) -> Result<Matrix> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Domain(format!("keep probability must be in (0, 1], got {keep_prob}")));
    }
    let mut rng = seed.rng();
    let mut out = data.clone();
    for v in out.iter_mut() {
        if rng.random::<f64>() >= keep_prob {
            *v = 0.0;
        }
    }
    Ok(out)
}
