//! Structure diagnostics for trained encoders and plateau detection in loss
//! traces.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{row_normalize, Matrix};
use crate::training::Trajectory;

/// `|B^ B^T - I|_F / sqrt(n)` on the row-normalized encoder.
pub fn orthogonality_defect(b: &Matrix) -> f64 {
    let bh = row_normalize(b);
    let n = bh.nrows();
    if n == 0 {
        return 0.0;
    }
    let g = &bh * bh.transpose() - Matrix::identity(n, n);
    g.norm() / (n as f64).sqrt()
}

/// Mean of `|B^_{k,j(k)}|` under a greedy one-to-one assignment of rows to
/// columns by decreasing magnitude. Rows left without a column score zero.
pub fn permutation_identity_score(b: &Matrix) -> f64 {
    let bh = row_normalize(b);
    let (n, d) = bh.shape();
    if n == 0 {
        return 0.0;
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            entries.push((bh[(i, j)].abs(), i, j));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; d];
    let mut total = 0.0;
    let mut assigned = 0;
    for (v, i, j) in entries {
        if row_used[i] || col_used[j] {
            continue;
        }
        row_used[i] = true;
        col_used[j] = true;
        total += v;
        assigned += 1;
        if assigned == n.min(d) {
            break;
        }
    }
    (total / n as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    HaarLike,
    IdentityPermutation,
    Undecided,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::HaarLike => "haar_like",
            Verdict::IdentityPermutation => "identity_permutation",
            Verdict::Undecided => "undecided",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureThresholds {
    pub haar_orth_max: f64,
    pub haar_perm_max: f64,
    pub identity_perm_min: f64,
}

impl Default for StructureThresholds {
    fn default() -> Self {
        Self {
            haar_orth_max: 0.1,
            haar_perm_max: 0.5,
            identity_perm_min: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureReport {
    pub orth_defect: f64,
    pub perm_score: f64,
    pub verdict: Verdict,
}

impl StructureReport {
    pub fn new(b: &Matrix) -> Self {
        Self::with_thresholds(b, StructureThresholds::default())
    }

    pub fn with_thresholds(b: &Matrix, t: StructureThresholds) -> Self {
        let orth_defect = orthogonality_defect(b);
        let perm_score = permutation_identity_score(b);
        let verdict = if perm_score > t.identity_perm_min {
            Verdict::IdentityPermutation
        } else if orth_defect < t.haar_orth_max && perm_score < t.haar_perm_max {
            Verdict::HaarLike
        } else {
            Verdict::Undecided
        };
        Self {
            orth_defect,
            perm_score,
            verdict,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "orth_defect,perm_score,verdict\n{},{},{}\n",
            crate::linalg::format_real(self.orth_defect),
            crate::linalg::format_real(self.perm_score),
            self.verdict
        )
    }
}

/// A maximal run of evaluations within tolerance of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSegment {
    pub level: f64,
    pub start_iter: usize,
    pub end_iter: usize,
    pub n_points: usize,
    /// First evaluation after the run, if any.
    pub escape_iter: Option<usize>,
}

impl PlateauSegment {
    pub fn length(&self) -> usize {
        self.end_iter - self.start_iter
    }
}

/// For each level in order, the longest run of consecutive evaluations whose
/// loss lies within `rel_tol` of the level, searched after the previous
/// segment. Levels with no run are skipped.
pub fn detect_staircase(traj: &Trajectory, levels: &[f64], rel_tol: f64) -> Result<Vec<PlateauSegment>> {
    if levels.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Domain("staircase levels must be sorted descending".into()));
    }
    let pts = &traj.points;
    let mut out = Vec::new();
    let mut pos = 0;
    for &level in levels {
        let within = |i: usize| (pts[i].loss - level).abs() <= rel_tol * level.abs();
        let mut best: Option<(usize, usize)> = None;
        let mut i = pos;
        while i < pts.len() {
            if within(i) {
                let mut j = i;
                while j + 1 < pts.len() && within(j + 1) {
                    j += 1;
                }
                if best.is_none_or(|(s, e)| j - i > e - s) {
                    best = Some((i, j));
                }
                i = j + 1;
            } else {
                i += 1;
            }
        }
        if let Some((s, e)) = best {
            out.push(PlateauSegment {
                level,
                start_iter: pts[s].iter,
                end_iter: pts[e].iter,
                n_points: e - s + 1,
                escape_iter: pts.get(e + 1).map(|p| p.iter),
            });
            pos = e + 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_haar_rows;
    use crate::rng::SeedSpec;
    use crate::training::TrajectoryPoint;

    #[test]
    fn orthogonality_examples() {
        let b = sample_haar_rows(20, 40, SeedSpec::from_seed(1)).unwrap();
        assert!(orthogonality_defect(&b) < 1e-8);
        let dup = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((orthogonality_defect(&dup) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_score_examples() {
        let p = Matrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        assert!((permutation_identity_score(&p) - 1.0).abs() < 1e-15);
        let mut dup = Matrix::identity(4, 4);
        dup.set_row(3, &dup.row(2).clone_owned());
        assert!(permutation_identity_score(&dup) < 1.0);
        let mut worst: f64 = 0.0;
        for s in 0..100 {
            let b = sample_haar_rows(200, 200, SeedSpec::new(7, s)).unwrap();
            worst = worst.max(permutation_identity_score(&b));
        }
        assert!(worst <= 0.3, "{worst}");
    }

    #[test]
    fn verdicts() {
        let b = sample_haar_rows(64, 64, SeedSpec::from_seed(3)).unwrap();
        assert_eq!(StructureReport::new(&b).verdict, Verdict::HaarLike);
        assert_eq!(StructureReport::new(&Matrix::identity(8, 8)).verdict, Verdict::IdentityPermutation);
        let dup = Matrix::from_element(4, 4, 0.5);
        assert_eq!(StructureReport::new(&dup).verdict, Verdict::Undecided);
    }

    fn trace(losses: impl Iterator<Item = f64>) -> Trajectory {
        let mut t = Trajectory::default();
        for (i, l) in losses.enumerate() {
            t.points.push(TrajectoryPoint::new(i, l));
        }
        t
    }

    #[test]
    fn staircase_two_levels() {
        let t = trace((0..2000).map(|i| if i < 1000 { 0.36 } else { 0.20 }));
        let segs = detect_staircase(&t, &[0.3634, 0.2], 0.05).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].start_iter, 0);
        assert_eq!(segs[0].escape_iter, Some(1000));
        assert_eq!(segs[1].start_iter, 1000);
        assert_eq!(segs[1].escape_iter, None);
    }

    #[test]
    fn staircase_smooth_decay() {
        let t = trace((0..2000).map(|i| (-(i as f64) / 300.0).exp()));
        let segs = detect_staircase(&t, &[0.3634, 0.2], 0.05).unwrap();
        assert!(segs.len() <= 2);
        for s in &segs {
            assert!(s.length() < 40, "{s:?}");
        }
        assert!(detect_staircase(&t, &[0.2, 0.3], 0.05).is_err());
    }
}
