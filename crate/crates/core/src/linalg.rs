//! Matrix primitives shared by every experiment: Haar-row sampling, row
//! normalization, Bernoulli masks and singular values.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; "rows" always mean the `n` rows of
//! an `n x d` encoder.

use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::SeedSpec;

pub type Matrix = DMatrix<f64>;

/// Where an encoder came from; carried through checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    HaarSubsampled,
    IdentityLike,
    Gaussian,
    Trained,
    Loaded,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::HaarSubsampled => "haar_subsampled",
            Provenance::IdentityLike => "identity_like",
            Provenance::Gaussian => "gaussian",
            Provenance::Trained => "trained",
            Provenance::Loaded => "loaded",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "haar_subsampled" => Provenance::HaarSubsampled,
            "identity_like" => Provenance::IdentityLike,
            "gaussian" => Provenance::Gaussian,
            "trained" => Provenance::Trained,
            "loaded" => Provenance::Loaded,
            other => return Err(Error::Parse(format!("unknown provenance {other:?}"))),
        })
    }
}

/// An `n x d` encoder whose rows have unit norm (zero rows stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMatrix {
    mat: Matrix,
    provenance: Provenance,
}

impl EncoderMatrix {
    /// Row-normalizes `mat` on construction.
    pub fn new(mat: Matrix, provenance: Provenance) -> Self {
        Self {
            mat: row_normalize(&mat),
            provenance,
        }
    }

    /// Keeps `mat` bit-for-bit; every row must already have unit norm
    /// (or be zero) within `1e-10`.
    pub fn exact(mat: Matrix, provenance: Provenance) -> Result<Self> {
        for (i, n) in row_norms(&mat).into_iter().enumerate() {
            if n != 0.0 && (n - 1.0).abs() > 1e-10 {
                return Err(Error::Domain(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { mat, provenance })
    }

    pub fn identity_like(n: usize, d: usize) -> Result<Self> {
        if n == 0 || n > d {
            return Err(Error::Dimension(format!("identity-like encoder needs 1 <= n <= d, got n={n}, d={d}")));
        }
        Ok(Self {
            mat: Matrix::identity(n, d),
            provenance: Provenance::IdentityLike,
        })
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn d(&self) -> usize {
        self.mat.ncols()
    }

    pub fn into_inner(self) -> Matrix {
        self.mat
    }
}

impl Deref for EncoderMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.mat
    }
}

/// A Bernoulli keep-mask over the `d` input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Vec<bool>,
    keep_prob: f64,
}

impl Mask {
    pub fn ones(d: usize) -> Self {
        Self {
            bits: vec![true; d],
            keep_prob: 1.0,
        }
    }

    pub fn from_bits(bits: Vec<bool>, keep_prob: f64) -> Self {
        Self { bits, keep_prob }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// First `n` rows of a Haar-distributed `d x d` orthogonal matrix.
///
/// QR of an i.i.d. Gaussian matrix, with the columns of Q multiplied by the
/// signs of diag(R) so that Q is exactly Haar rather than merely orthogonal.
pub fn sample_haar_rows(n: usize, d: usize, seed: SeedSpec) -> Result<Matrix> {
    if n == 0 || d == 0 {
        return Err(Error::Dimension("haar rows need n, d >= 1".into()));
    }
    if n > d {
        return Err(Error::Dimension(format!("cannot take {n} orthonormal rows in dimension {d}")));
    }
    let mut rng = seed.rng();
    let g = gaussian_matrix(d, d, 1.0, &mut rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q.rows(0, n).into_owned())
}

/// Normalizes each row to unit Euclidean norm; zero rows map to zero rows.
pub fn row_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

/// i.i.d. Bernoulli(p) mask; with `require_nonzero` the all-zero draw is
/// rejected and resampled.
pub fn sample_mask(d: usize, p: f64, require_nonzero: bool, seed: SeedSpec) -> Result<Mask> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("keep probability must be in (0, 1], got {p}")));
    }
    let mut rng = seed.rng();
    loop {
        let bits: Vec<bool> = (0..d).map(|_| rng.random::<f64>() < p).collect();
        let mask = Mask { bits, keep_prob: p };
        if !require_nonzero || !mask.is_zero() || d == 0 {
            return Ok(mask);
        }
    }
}

/// Zeroes column `j` of `m` wherever the mask bit is 0.
pub fn apply_mask(m: &Matrix, mask: &Mask) -> Result<Matrix> {
    if mask.len() != m.ncols() {
        return Err(Error::Dimension(format!(
            "mask length {} does not match {} columns",
            mask.len(),
            m.ncols()
        )));
    }
    let mut out = m.clone();
    for (j, &keep) in mask.bits().iter().enumerate() {
        if !keep {
            out.column_mut(j).fill(0.0);
        }
    }
    Ok(out)
}

/// Singular values, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

pub fn operator_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m).first().cloned().unwrap_or(0.0)
}

/// Writes the matrix CSV format: a header line `n,d` followed by one line per
/// row, entries in 17-significant-digit scientific notation.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{},{}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format_real(*v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("bad matrix header {header:?}: {e}")))?;
    if dims.len() != 2 {
        return Err(Error::Parse(format!("matrix header must be `n,d`, got {header:?}")));
    }
    let (n, d) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(n * d);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("row {i}: {e}")))?;
        if row.len() != d {
            return Err(Error::Parse(format!("row {i} has {} entries, expected {d}", row.len())));
        }
        data.extend(row);
    }
    if data.len() != n * d {
        return Err(Error::Parse(format!("expected {n} rows, got {}", data.len() / d.max(1))));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("matrix contains non-finite entries".into()));
    }
    Ok(Matrix::from_row_slice(n, d, &data))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    std::fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    matrix_from_csv(&std::fs::read_to_string(path)?)
}
