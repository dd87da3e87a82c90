//! Pearson and tetrachoric correlation matrices, and the bivariate normal CDF.

use crate::error::{Error, Result};
use crate::grade_data::{CourseResponseMatrix, ScaleKind};
use crate::stats::{self, gauss_legendre, normal_cdf, normal_quantile};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

pub const TETRACHORIC_BOUND: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Pearson,
    Tetrachoric,
}

#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub course_ids: Vec<String>,
    pub values: DMatrix<f64>,
    pub method: CorrelationMethod,
    /// Set when eigenvalue clipping was needed.
    pub repaired: bool,
    pub warnings: Vec<String>,
}

struct GlTables {
    rules: [(Vec<f64>, Vec<f64>); 3],
}

fn gl_tables() -> &'static GlTables {
    static T: OnceLock<GlTables> = OnceLock::new();
    T.get_or_init(|| {
        // half rules: nodes in (-1, 0)
        let half = |n: usize| {
            let (x, w) = gauss_legendre(n);
            let keep: Vec<usize> = (0..n).filter(|&i| x[i] < 0.0).collect();
            (
                keep.iter().map(|&i| x[i]).collect::<Vec<_>>(),
                keep.iter().map(|&i| w[i]).collect::<Vec<_>>(),
            )
        };
        GlTables {
            rules: [half(6), half(12), half(20)],
        }
    })
}

/// P(X > dh, Y > dk) for standard bivariate normal with correlation r
/// (Drezner–Wesolowsky reduction with Gauss–Legendre quadrature, after Genz).
fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    let t = gl_tables();
    let (x, w) = if r.abs() < 0.3 {
        &t.rules[0]
    } else if r.abs() < 0.75 {
        &t.rules[1]
    } else {
        &t.rules[2]
    };
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for i in 0..x.len() {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (sign * x[i] + 1.0) / 2.0).sin();
                bvn += w[i] * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (4.0 * PI) + normal_cdf(-h) * normal_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            bvn = a
                * (-(bs / as_ + hk) / 2.0).exp()
                * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            if hk > -160.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * (2.0 * PI).sqrt()
                    * normal_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for i in 0..x.len() {
                for sign in [-1.0, 1.0] {
                    let xs = (a * (sign * x[i] + 1.0)).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    bvn += a
                        * w[i]
                        * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs
                            - (-(bs / xs + hk) / 2.0).exp() * (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
            bvn = -bvn / (2.0 * PI);
        }
        if r > 0.0 {
            bvn += normal_cdf(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                if h < 0.0 {
                    bvn += normal_cdf(k) - normal_cdf(h);
                } else {
                    bvn += normal_cdf(-h) - normal_cdf(-k);
                }
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// P(Z₁ ≤ x, Z₂ ≤ y) for a standard bivariate normal with correlation `rho`.
pub fn bivariate_normal_cdf(x: f64, y: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("correlation {rho} outside (-1, 1)")));
    }
    if x.is_nan() || y.is_nan() {
        return Err(Error::Domain("NaN argument".into()));
    }
    let x = x.clamp(-40.0, 40.0);
    let y = y.clamp(-40.0, 40.0);
    Ok(bvn_upper(-x, -y, rho))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TetrachoricEstimate {
    pub rho: f64,
    /// Estimate pinned to ±0.999.
    pub at_boundary: bool,
    pub n: usize,
}

/// 2×2 counts n[i][j] for (C₁ = i, C₂ = j).
pub type Table2x2 = [[f64; 2]; 2];

pub fn table_loglik(n: &Table2x2, t1: f64, t2: f64, rho: f64) -> f64 {
    let p1 = normal_cdf(t1);
    let p2 = normal_cdf(t2);
    let p00 = bivariate_normal_cdf(t1, t2, rho).unwrap_or(f64::NAN);
    let cells = [
        [p00, p1 - p00],
        [p2 - p00, 1.0 - p1 - p2 + p00],
    ];
    let mut ll = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            if n[i][j] > 0.0 {
                ll += n[i][j] * cells[i][j].max(1e-300).ln();
            }
        }
    }
    ll
}

/// Two-step tetrachoric estimate from a 2×2 table: thresholds from the
/// margins, then a bounded one-dimensional likelihood maximization.
pub fn tetrachoric_from_table(n: &Table2x2) -> Result<TetrachoricEstimate> {
    let total = n[0][0] + n[0][1] + n[1][0] + n[1][1];
    let zeros1 = n[0][0] + n[0][1];
    let zeros2 = n[0][0] + n[1][0];
    if zeros1 <= 0.0 || zeros1 >= total || zeros2 <= 0.0 || zeros2 >= total {
        return Err(Error::Invalid("constant binary vector; tetrachoric correlation undefined".into()));
    }
    if n[0][1] == 0.0 && n[1][0] == 0.0 {
        return Ok(TetrachoricEstimate { rho: TETRACHORIC_BOUND, at_boundary: true, n: total as usize });
    }
    if n[0][0] == 0.0 && n[1][1] == 0.0 {
        return Ok(TetrachoricEstimate { rho: -TETRACHORIC_BOUND, at_boundary: true, n: total as usize });
    }
    // P(C = 0) = Φ(t): the latent variable falls below the threshold.
    let t1 = normal_quantile(zeros1 / total);
    let t2 = normal_quantile(zeros2 / total);
    let rho = stats::golden_section_max(
        |r| table_loglik(n, t1, t2, r),
        -TETRACHORIC_BOUND,
        TETRACHORIC_BOUND,
        1e-6,
    );
    let at_boundary = TETRACHORIC_BOUND - rho.abs() < 1e-4;
    Ok(TetrachoricEstimate { rho, at_boundary, n: total as usize })
}

/// Tetrachoric correlation of two binary vectors over jointly observed entries
/// (values ≥ 0.5 count as 1).
pub fn tetrachoric(c1: &[Option<f64>], c2: &[Option<f64>]) -> Result<TetrachoricEstimate> {
    if c1.len() != c2.len() {
        return Err(Error::Invalid("vectors differ in length".into()));
    }
    let mut n = [[0.0; 2]; 2];
    let mut joint = 0;
    for (a, b) in c1.iter().zip(c2) {
        if let (Some(a), Some(b)) = (a, b) {
            n[(*a >= 0.5) as usize][(*b >= 0.5) as usize] += 1.0;
            joint += 1;
        }
    }
    if joint < 30 {
        return Err(Error::Invalid(format!(
            "only {joint} jointly observed entries; at least 30 required"
        )));
    }
    tetrachoric_from_table(&n)
}

/// Clips negative eigenvalues to zero and rescales to unit diagonal.
/// Returns `None` when no repair was needed.
pub fn psd_repair(values: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (lambda, v) = stats::sorted_eigen(values);
    if lambda.iter().all(|&l| l >= -1e-8) {
        return None;
    }
    let n = values.nrows();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        lambda.iter().map(|&l| l.max(0.0)),
    ));
    let a = &v * d * v.transpose();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            let s = (a[(i, i)] * a[(j, j)]).sqrt();
            out[(i, j)] = if s > 0.0 { a[(i, j)] / s } else if i == j { 1.0 } else { 0.0 };
        }
    }
    let sym = (&out + out.transpose()) * 0.5;
    Some(sym)
}

/// Course-by-course correlations of a complete matrix: Pearson for
/// continuous/ordinal grades, tetrachoric for binary grades.
pub fn correlation_matrix(m: &CourseResponseMatrix) -> Result<CorrelationMatrix> {
    let method = match m.scale().kind {
        ScaleKind::Binary => CorrelationMethod::Tetrachoric,
        _ => CorrelationMethod::Pearson,
    };
    correlation_matrix_with(m, method)
}

pub fn correlation_matrix_with(
    m: &CourseResponseMatrix,
    method: CorrelationMethod,
) -> Result<CorrelationMatrix> {
    if !m.is_complete() {
        return Err(Error::Invalid("correlation matrix requires a complete matrix".into()));
    }
    let nc = m.n_courses();
    let columns: Vec<Vec<f64>> = (0..nc)
        .map(|c| m.column(c).into_iter().map(|(_, g)| g).collect())
        .collect();
    for (c, col) in columns.iter().enumerate() {
        let constant = match method {
            CorrelationMethod::Pearson => col.iter().all(|&g| g == col[0]),
            CorrelationMethod::Tetrachoric => {
                let ones = col.iter().filter(|&&g| g >= 0.5).count();
                ones == 0 || ones == col.len()
            }
        };
        if constant {
            return Err(Error::Invalid(format!("course '{}' is constant", m.course_ids()[c])));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|i| (i + 1..nc).map(move |j| (i, j))).collect();
    let estimates: Vec<Result<(f64, bool)>> = pairs
        .par_iter()
        .map(|&(i, j)| match method {
            CorrelationMethod::Pearson => stats::pearson(&columns[i], &columns[j])
                .map(|r| (r, false))
                .ok_or_else(|| Error::Numerical("zero variance".into())),
            CorrelationMethod::Tetrachoric => {
                let a: Vec<Option<f64>> = columns[i].iter().map(|&g| Some(g)).collect();
                let b: Vec<Option<f64>> = columns[j].iter().map(|&g| Some(g)).collect();
                tetrachoric(&a, &b).map(|e| (e.rho, e.at_boundary))
            }
        })
        .collect();
    let mut values = DMatrix::<f64>::identity(nc, nc);
    let mut warnings = Vec::new();
    for (&(i, j), est) in pairs.iter().zip(estimates) {
        let (r, boundary) = est?;
        if boundary {
            warnings.push(format!(
                "tetrachoric correlation of '{}' and '{}' at the boundary",
                m.course_ids()[i],
                m.course_ids()[j]
            ));
        }
        values[(i, j)] = r;
        values[(j, i)] = r;
    }
    let mut repaired = false;
    if let Some(fixed) = psd_repair(&values) {
        values = fixed;
        repaired = true;
        warnings.push("correlation matrix was not positive semidefinite; eigenvalues clipped".into());
    }
    Ok(CorrelationMatrix {
        course_ids: m.course_ids().to_vec(),
        values,
        method,
        repaired,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade_data::GradeScaleSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Independent oracle: F(x, y; ρ) = ∫_{-∞}^{x} φ(t) Φ((y − ρt)/√(1−ρ²)) dt
    /// by composite Simpson on [-10, x].
    fn oracle_cdf(x: f64, y: f64, rho: f64) -> f64 {
        let lo = -10.0f64;
        let hi = x.min(10.0);
        if hi <= lo {
            return 0.0;
        }
        let n = 20000;
        let h = (hi - lo) / n as f64;
        let s = (1.0 - rho * rho).sqrt();
        let f = |t: f64| stats::normal_pdf(t) * normal_cdf((y - rho * t) / s);
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let t = lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        acc * h / 3.0
    }

    #[test]
    fn cdf_independent_origin() {
        assert_abs_diff_eq!(bivariate_normal_cdf(0.0, 0.0, 0.0).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn cdf_arcsine_identity() {
        assert_abs_diff_eq!(bivariate_normal_cdf(0.0, 0.0, 0.5).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        for &rho in &[-0.99f64, -0.95, -0.8, -0.3, 0.1, 0.7, 0.93, 0.999] {
            let exact = 0.25 + rho.asin() / (2.0 * PI);
            assert_abs_diff_eq!(bivariate_normal_cdf(0.0, 0.0, rho).unwrap(), exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn cdf_total_mass() {
        for &rho in &[-0.99, -0.5, 0.0, 0.5, 0.99] {
            assert_abs_diff_eq!(bivariate_normal_cdf(8.0, 8.0, rho).unwrap(), 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn cdf_rejects_degenerate_rho() {
        assert!(bivariate_normal_cdf(0.0, 0.0, 1.0).is_err());
        assert!(bivariate_normal_cdf(0.0, 0.0, -1.2).is_err());
    }

    #[test]
    fn cdf_matches_integration_oracle_on_grid() {
        let pts = [-2.5, -1.0, -0.2, 0.0, 0.7, 1.9];
        let rhos = [-0.97, -0.8, -0.4, 0.0, 0.25, 0.6, 0.9, 0.98];
        for &x in &pts {
            for &y in &pts {
                for &r in &rhos {
                    let got = bivariate_normal_cdf(x, y, r).unwrap();
                    let want = oracle_cdf(x, y, r);
                    assert!((got - want).abs() < 1e-7, "F({x},{y};{r}) = {got}, oracle {want}");
                }
            }
        }
    }

    #[test]
    fn balanced_table_gives_zero() {
        let est = tetrachoric_from_table(&[[25.0, 25.0], [25.0, 25.0]]).unwrap();
        assert!(est.rho.abs() < 1e-4);
    }

    #[test]
    fn concordant_table_hits_boundary() {
        let est = tetrachoric_from_table(&[[40.0, 0.0], [0.0, 60.0]]).unwrap();
        assert_eq!(est.rho, TETRACHORIC_BOUND);
        assert!(est.at_boundary);
        let est = tetrachoric_from_table(&[[0.0, 40.0], [60.0, 0.0]]).unwrap();
        assert_eq!(est.rho, -TETRACHORIC_BOUND);
    }

    #[test]
    fn constant_vector_is_rejected() {
        let a = vec![Some(1.0); 40];
        let b: Vec<Option<f64>> = (0..40).map(|i| Some((i % 2) as f64)).collect();
        assert!(tetrachoric(&a, &b).is_err());
    }

    fn latent_sample(rho: f64, n: usize, t1: f64, t2: f64, seed: u64) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let z1: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let z2 = rho * z1 + (1.0 - rho * rho).sqrt() * e;
            a.push(Some(if z1 > t1 { 1.0 } else { 0.0 }));
            b.push(Some(if z2 > t2 { 1.0 } else { 0.0 }));
        }
        (a, b)
    }

    #[test]
    fn recovers_latent_correlation() {
        let (a, b) = latent_sample(0.5, 2000, 0.0, 0.0, 11);
        let est = tetrachoric(&a, &b).unwrap();
        assert!((est.rho - 0.5).abs() <= 0.05, "rho = {}", est.rho);
    }

    #[test]
    fn duplicated_columns() {
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let x: f64 = rng.random();
            let y: f64 = rng.random();
            rows.push(vec![Some(x), Some(x), Some(y)]);
        }
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let m = CourseResponseMatrix::new(ids("s", 60), ids("c", 3), rows.clone(), GradeScaleSpec::continuous(0.0))
            .unwrap();
        let c = correlation_matrix(&m).unwrap();
        assert_abs_diff_eq!(c.values[(0, 1)], 1.0, epsilon = 1e-12);
        let bin: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|r| r.iter().map(|g| g.map(|g| if g > 0.5 { 1.0 } else { 0.0 })).collect())
            .collect();
        let m = CourseResponseMatrix::new(ids("s", 60), ids("c", 3), bin, GradeScaleSpec::binary()).unwrap();
        let c = correlation_matrix(&m).unwrap();
        assert_eq!(c.method, CorrelationMethod::Tetrachoric);
        assert!((c.values[(0, 1)] - 0.999).abs() < 1e-3);
    }

    #[test]
    fn anti_correlated_pair() {
        let rows: Vec<Vec<Option<f64>>> = (0..10).map(|i| vec![Some(i as f64), Some(-(i as f64) + 20.0)]).collect();
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let m = CourseResponseMatrix::new(ids("s", 10), ids("c", 2), rows, GradeScaleSpec::continuous(0.0)).unwrap();
        let c = correlation_matrix(&m).unwrap();
        assert_abs_diff_eq!(c.values[(0, 1)], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_named() {
        let rows: Vec<Vec<Option<f64>>> = (0..10).map(|i| vec![Some(i as f64), Some(3.0)]).collect();
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let m = CourseResponseMatrix::new(ids("s", 10), ids("c", 2), rows, GradeScaleSpec::continuous(0.0)).unwrap();
        let err = correlation_matrix(&m).unwrap_err().to_string();
        assert!(err.contains("c1"));
    }

    #[test]
    fn repair_yields_psd_unit_diagonal() {
        let bad = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        let fixed = psd_repair(&bad).unwrap();
        let (lambda, _) = stats::sorted_eigen(&fixed);
        assert!(lambda.iter().all(|&l| l > -1e-8));
        for i in 0..3 {
            assert_abs_diff_eq!(fixed[(i, i)], 1.0, epsilon = 1e-8);
        }
        assert!(psd_repair(&DMatrix::identity(3, 3)).is_none());
    }

    proptest! {
        #[test]
        fn cdf_monotone(x in -3.0f64..3.0, y in -3.0f64..3.0, r in -0.95f64..0.95, d in 0.01f64..0.5) {
            let base = bivariate_normal_cdf(x, y, r).unwrap();
            prop_assert!(bivariate_normal_cdf(x + d, y, r).unwrap() >= base - 1e-12);
            prop_assert!(bivariate_normal_cdf(x, y + d, r).unwrap() >= base - 1e-12);
            let r2 = (r + d).min(0.99);
            prop_assert!(bivariate_normal_cdf(x, y, r2).unwrap() >= base - 1e-12);
        }

        #[test]
        fn cdf_close_to_oracle(x in -3.0f64..3.0, y in -3.0f64..3.0, r in -0.99f64..0.99) {
            let got = bivariate_normal_cdf(x, y, r).unwrap();
            prop_assert!((got - oracle_cdf(x, y, r)).abs() < 1e-7);
        }

        #[test]
        fn tetrachoric_symmetric_and_odd(
            n00 in 1u32..200, n01 in 1u32..200, n10 in 1u32..200, n11 in 1u32..200
        ) {
            let t: Table2x2 = [[n00 as f64, n01 as f64], [n10 as f64, n11 as f64]];
            let tt: Table2x2 = [[t[0][0], t[1][0]], [t[0][1], t[1][1]]];
            let a = tetrachoric_from_table(&t).unwrap().rho;
            let b = tetrachoric_from_table(&tt).unwrap().rho;
            prop_assert!((a - b).abs() < 1e-5);
            // recode the second vector: columns swap
            let neg: Table2x2 = [[t[0][1], t[0][0]], [t[1][1], t[1][0]]];
            let c = tetrachoric_from_table(&neg).unwrap().rho;
            prop_assert!((a + c).abs() < 1e-5);
        }

        #[test]
        fn pearson_matrix_invariant_to_student_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<Option<f64>>> = (0..25)
                .map(|_| (0..4).map(|_| Some(rng.random::<f64>() * 10.0)).collect())
                .collect();
            let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
            let m = CourseResponseMatrix::new(ids("s", 25), ids("c", 4), rows, GradeScaleSpec::continuous(0.0)).unwrap();
            let order: Vec<usize> = (0..25).rev().collect();
            let r = m.select(&order, &[0, 1, 2, 3]);
            let a = correlation_matrix(&m).unwrap().values;
            let b = correlation_matrix(&r).unwrap().values;
            prop_assert!((a - b).amax() < 1e-12);
        }
    }
}
