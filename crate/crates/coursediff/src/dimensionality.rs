//! Principal-component variance profile and the dimensionality upper bound
//! handed to BIC selection.

use crate::correlation::{correlation_matrix, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::grade_data::CourseResponseMatrix;
use crate::stats;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PveResult {
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
    pub pve: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub suggested_upper_bound: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionBound {
    pub k_threshold: usize,
    pub k_elbow: usize,
    /// max(k_threshold, k_elbow).
    pub upper_bound: usize,
}

pub fn pca_pve(corr: &CorrelationMatrix) -> Result<PveResult> {
    pve_of(&corr.values)
}

pub fn pve_of(values: &DMatrix<f64>) -> Result<PveResult> {
    let n = values.nrows();
    if n == 0 || values.ncols() != n {
        return Err(Error::Invalid("correlation matrix must be square and non-empty".into()));
    }
    if (values - values.transpose()).amax() > 1e-10 {
        return Err(Error::Invalid("correlation matrix is not symmetric".into()));
    }
    let (lambda, _) = stats::sorted_eigen(values);
    let eigenvalues: Vec<f64> = lambda.into_iter().map(|l| if l < 1e-10 { 0.0 } else { l }).collect();
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("correlation matrix has zero trace".into()));
    }
    let pve: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in &pve {
        acc += p;
        cumulative.push(acc);
    }
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    let mut out = PveResult {
        eigenvalues,
        pve,
        cumulative,
        suggested_upper_bound: 1,
    };
    out.suggested_upper_bound = dim_upper_bound(&out, DEFAULT_VARIANCE_THRESHOLD).upper_bound;
    Ok(out)
}

/// PVE profile of a complete matrix's correlation matrix.
pub fn matrix_pve(m: &CourseResponseMatrix) -> Result<PveResult> {
    pca_pve(&correlation_matrix(m)?)
}

/// Smallest k whose cumulative PVE reaches the threshold.
pub fn threshold_rule(pve: &PveResult, variance_threshold: f64) -> usize {
    pve.cumulative
        .iter()
        .position(|&c| c >= variance_threshold - 1e-12)
        .map_or(pve.cumulative.len(), |i| i + 1)
        .max(1)
}

/// Elbow of the scree on a log scale: the component count just before the
/// largest positive curvature of ln λ.
pub fn elbow_rule(pve: &PveResult) -> usize {
    let l = &pve.eigenvalues;
    if l.len() < 3 {
        return 1;
    }
    let floor = l[0] * 1e-12;
    let ln: Vec<f64> = l.iter().map(|&x| x.max(floor).ln()).collect();
    let mut best = (1usize, f64::NEG_INFINITY);
    // i is the 0-based index of the middle eigenvalue; 1-based i + 1
    for i in 1..l.len() - 1 {
        let d2 = ln[i - 1] - 2.0 * ln[i] + ln[i + 1];
        if d2 > best.1 + 1e-12 {
            best = (i, d2);
        }
    }
    best.0.max(1)
}

pub fn dim_upper_bound(pve: &PveResult, variance_threshold: f64) -> DimensionBound {
    let k_threshold = threshold_rule(pve, variance_threshold);
    let k_elbow = elbow_rule(pve);
    DimensionBound {
        k_threshold,
        k_elbow,
        upper_bound: k_threshold.max(k_elbow),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn from_eigen(ev: &[f64]) -> PveResult {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(ev));
        pve_of(&d).unwrap()
    }

    #[test]
    fn two_by_two_closed_form() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let p = pve_of(&c).unwrap();
        assert_abs_diff_eq!(p.eigenvalues[0], 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p.eigenvalues[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(p.pve[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(p.pve[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn identity_is_uniform() {
        let p = pve_of(&DMatrix::identity(7, 7)).unwrap();
        for v in &p.pve {
            assert_abs_diff_eq!(*v, 1.0 / 7.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.5, 1.0]);
        assert!(pve_of(&c).is_err());
    }

    #[test]
    fn dominant_first_component() {
        let p = from_eigen(&[8.0, 1.0, 0.5, 0.5]);
        assert_eq!(dim_upper_bound(&p, 0.5).upper_bound, 1);
    }

    #[test]
    fn uniform_ten_needs_five() {
        let p = from_eigen(&[1.0; 10]);
        let b = dim_upper_bound(&p, 0.5);
        assert_eq!(b.k_threshold, 5);
        assert_eq!(b.upper_bound, 5);
    }

    #[test]
    fn two_factor_profile_allows_two() {
        // 72% / 13% over 20 courses, remainder spread evenly
        let mut ev = vec![0.72 * 20.0, 0.13 * 20.0];
        ev.extend(std::iter::repeat(0.15 * 20.0 / 18.0).take(18));
        let p = from_eigen(&ev);
        let b = dim_upper_bound(&p, 0.5);
        assert_eq!(b.k_threshold, 1);
        assert_eq!(b.k_elbow, 2);
        assert_eq!(b.upper_bound, 2);
    }

    #[test]
    fn one_factor_profile_stays_at_one() {
        let mut ev = vec![0.81 * 20.0, 0.018 * 20.0];
        ev.extend((0..18).map(|i| (0.17 - 0.004 * i as f64) * 20.0 / 18.0));
        let p = from_eigen(&ev);
        assert_eq!(dim_upper_bound(&p, 0.5).upper_bound, 1);
    }

    proptest! {
        #[test]
        fn pve_sums_to_one_and_ignores_course_order(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 6)
        ) {
            let x = DMatrix::from_fn(6, 4, |i, j| raw[i][j]);
            let mut c = x.transpose() * &x + DMatrix::identity(4, 4) * 0.1;
            let d: Vec<f64> = (0..4).map(|i| c[(i, i)].sqrt()).collect();
            for i in 0..4 { for j in 0..4 { c[(i, j)] /= d[i] * d[j]; } }
            let c = (&c + c.transpose()) * 0.5;
            let p = pve_of(&c).unwrap();
            prop_assert!((p.pve.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let perm = [2usize, 0, 3, 1];
            let cp = DMatrix::from_fn(4, 4, |i, j| c[(perm[i], perm[j])]);
            let q = pve_of(&cp).unwrap();
            for (a, b) in p.pve.iter().zip(&q.pve) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            for w in p.cumulative.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-15);
            }
        }

        #[test]
        fn threshold_rule_monotone(ev in prop::collection::vec(0.01f64..5.0, 2..12), t1 in 0.05f64..0.95, t2 in 0.05f64..0.95) {
            let mut ev = ev;
            ev.sort_by(|a, b| b.total_cmp(a));
            let p = from_eigen(&ev);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(threshold_rule(&p, lo) <= threshold_rule(&p, hi));
        }
    }
}
