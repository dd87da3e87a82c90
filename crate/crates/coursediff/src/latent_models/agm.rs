//! Additive grade model g ≈ ⟨α_c, θ_s + δ_c⟩ fitted by alternating least
//! squares over observed cells.

use super::{
    course_components, gaussian_log_likelihood, residual_ss, rotate_leading_block, Convergence,
    LatentModel, ModelClass,
};
use crate::error::{Error, Result};
use crate::grade_data::CourseResponseMatrix;
use crate::stats;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgmConfig {
    /// Stop when |ΔJ| < tol · max(1, J).
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for AgmConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 5000 }
    }
}

pub fn fit_agm(m: &CourseResponseMatrix, n_dim: usize) -> Result<LatentModel> {
    fit_agm_with(m, n_dim, &AgmConfig::default())
}

pub fn fit_agm_with(m: &CourseResponseMatrix, n_dim: usize, cfg: &AgmConfig) -> Result<LatentModel> {
    if n_dim == 0 {
        return Err(Error::Invalid("model dimension must be at least 1".into()));
    }
    if m.n_students() == 0 || m.n_courses() == 0 {
        return Err(Error::Invalid("empty grade matrix".into()));
    }
    if let Some(c) = (0..m.n_courses()).find(|&c| m.column(c).is_empty()) {
        return Err(Error::Invalid(format!("course '{}' has no grades", m.course_ids()[c])));
    }
    let comps = course_components(m);
    if comps.len() > 1 {
        return Err(Error::Disconnected(comps));
    }
    let rows: Vec<Vec<(usize, f64)>> = (0..m.n_students()).map(|s| m.row(s)).collect();
    let cols: Vec<Vec<(usize, f64)>> = (0..m.n_courses()).map(|c| m.column(c)).collect();
    let mut model = if n_dim == 1 {
        fit_unidim(m, &rows, &cols, cfg)
    } else {
        fit_multidim(m, n_dim, &rows, &cols, cfg)?
    };
    let (rss, n) = residual_ss(&model, m);
    let sigma2 = (rss / n as f64).max(1e-12);
    model.sigma2 = Some(sigma2);
    model.log_likelihood = gaussian_log_likelihood(n, sigma2);
    model.n_params = if n_dim == 1 {
        m.n_students() + m.n_courses() + 1
    } else {
        n_dim * m.n_students() + 2 * n_dim * m.n_courses() + 1
    };
    if !model.convergence.converged {
        model
            .warnings
            .push(format!("AGM did not converge within {} sweeps", cfg.max_sweeps));
    }
    Ok(model)
}

fn shell(m: &CourseResponseMatrix, n_dim: usize) -> LatentModel {
    LatentModel {
        class: ModelClass::Agm,
        n_dim,
        student_ids: m.student_ids().to_vec(),
        course_ids: m.course_ids().to_vec(),
        theta: DMatrix::zeros(m.n_students(), n_dim),
        delta: DMatrix::zeros(m.n_courses(), n_dim),
        alpha: DMatrix::from_element(m.n_courses(), n_dim, 1.0),
        intercept: 0.0,
        sigma2: None,
        log_likelihood: 0.0,
        n_params: 0,
        convergence: Convergence::default(),
        warnings: Vec::new(),
    }
}

fn fit_unidim(
    m: &CourseResponseMatrix,
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
    cfg: &AgmConfig,
) -> LatentModel {
    let ns = rows.len();
    let nc = cols.len();
    let mut theta = vec![0.0; ns];
    let mut delta: Vec<f64> = cols.iter().map(|c| stats::mean(&c.iter().map(|x| x.1).collect::<Vec<_>>())).collect();
    let objective = |theta: &[f64], delta: &[f64]| -> f64 {
        rows.iter()
            .enumerate()
            .flat_map(|(s, r)| r.iter().map(move |&(c, g)| (s, c, g)))
            .map(|(s, c, g)| (g - theta[s] - delta[c]).powi(2))
            .sum()
    };
    let mut conv = Convergence::default();
    let mut prev = objective(&theta, &delta);
    conv.trace.push(prev);
    for sweep in 1..=cfg.max_sweeps {
        for s in 0..ns {
            if !rows[s].is_empty() {
                theta[s] = rows[s].iter().map(|&(c, g)| g - delta[c]).sum::<f64>() / rows[s].len() as f64;
            }
        }
        let shift = stats::mean(&theta);
        theta.iter_mut().for_each(|t| *t -= shift);
        for c in 0..nc {
            delta[c] = cols[c].iter().map(|&(s, g)| g - theta[s]).sum::<f64>() / cols[c].len() as f64;
        }
        let j = objective(&theta, &delta);
        conv.trace.push(j);
        conv.iterations = sweep;
        if (prev - j).abs() < cfg.tol * j.max(1.0) {
            conv.converged = true;
            break;
        }
        prev = j;
    }
    let mut model = shell(m, 1);
    model.theta = DMatrix::from_column_slice(ns, 1, &theta);
    model.delta = DMatrix::from_column_slice(nc, 1, &delta);
    model.convergence = conv;
    model
}

/// Ridge on slopes and traits in the multidimensional fit; keeps students
/// with fewer grades than dimensions finite.
const RIDGE: f64 = 1e-6;

/// Solves (xᵀx + λ·diag(pen)) β = xᵀy.
fn solve_ridge(x: &DMatrix<f64>, y: &DVector<f64>, pen: &[f64]) -> DVector<f64> {
    let mut a = x.transpose() * x;
    for (i, p) in pen.iter().enumerate() {
        a[(i, i)] += RIDGE * p;
    }
    let rhs = x.transpose() * y;
    match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
    }
}

/// Identity trait covariance for zero-mean traits; predictions unchanged.
fn whiten(theta: &mut DMatrix<f64>, alpha: &mut DMatrix<f64>) {
    let cov = theta.transpose() * &*theta / theta.nrows() as f64;
    if let Some(ch) = cov.cholesky() {
        let l = ch.l();
        if let Some(linv) = l.clone().try_inverse() {
            *theta = &*theta * linv.transpose();
            *alpha = &*alpha * &l;
        }
    }
}

fn fit_multidim(
    m: &CourseResponseMatrix,
    n_dim: usize,
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
    cfg: &AgmConfig,
) -> Result<LatentModel> {
    let ns = rows.len();
    let nc = cols.len();
    if n_dim >= nc.min(ns) {
        return Err(Error::Invalid(format!(
            "dimension {n_dim} needs more than {n_dim} courses and students"
        )));
    }
    // start from principal components of the mean-filled, centered matrix
    let means: Vec<f64> = cols.iter().map(|c| stats::mean(&c.iter().map(|x| x.1).collect::<Vec<_>>())).collect();
    let mut x = DMatrix::zeros(ns, nc);
    for (s, r) in rows.iter().enumerate() {
        for &(c, g) in r {
            x[(s, c)] = g - means[c];
        }
    }
    let svd = x.svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let sq = (ns as f64).sqrt();
    let mut theta = DMatrix::from_fn(ns, n_dim, |s, k| u[(s, order[k])] * sq);
    let mut alpha = DMatrix::from_fn(nc, n_dim, |c, k| vt[(order[k], c)] * svd.singular_values[order[k]] / sq);
    let mut b = DVector::from_vec(means);

    let objective = |theta: &DMatrix<f64>, alpha: &DMatrix<f64>, b: &DVector<f64>| -> f64 {
        let mut j = 0.0;
        for (s, r) in rows.iter().enumerate() {
            for &(c, g) in r {
                let p = b[c] + (0..n_dim).map(|k| alpha[(c, k)] * theta[(s, k)]).sum::<f64>();
                j += (g - p) * (g - p);
            }
        }
        j + RIDGE * (theta.norm_squared() + alpha.norm_squared())
    };
    let mut conv = Convergence::default();
    let mut prev = objective(&theta, &alpha, &b);
    conv.trace.push(prev);
    for sweep in 1..=cfg.max_sweeps.min(2000) {
        // students
        for (s, r) in rows.iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            let x = DMatrix::from_fn(r.len(), n_dim, |i, k| alpha[(r[i].0, k)]);
            let y = DVector::from_iterator(r.len(), r.iter().map(|&(c, g)| g - b[c]));
            let t = solve_ridge(&x, &y, &vec![1.0; n_dim]);
            theta.row_mut(s).copy_from(&t.transpose());
        }
        let mean = theta.row_mean();
        for s in 0..ns {
            for k in 0..n_dim {
                theta[(s, k)] -= mean[k];
            }
        }
        for c in 0..nc {
            b[c] += (0..n_dim).map(|k| alpha[(c, k)] * mean[k]).sum::<f64>();
        }
        // courses
        for (c, col) in cols.iter().enumerate() {
            let x = DMatrix::from_fn(col.len(), n_dim + 1, |i, k| if k == 0 { 1.0 } else { theta[(col[i].0, k - 1)] });
            let y = DVector::from_iterator(col.len(), col.iter().map(|x| x.1));
            let pen: Vec<f64> = (0..=n_dim).map(|k| if k == 0 { 0.0 } else { 1.0 }).collect();
            let beta = solve_ridge(&x, &y, &pen);
            b[c] = beta[0];
            for k in 0..n_dim {
                alpha[(c, k)] = beta[k + 1];
            }
        }
        let j = objective(&theta, &alpha, &b);
        conv.trace.push(j);
        conv.iterations = sweep;
        if (prev - j).abs() < cfg.tol * j.max(1.0) {
            conv.converged = true;
            break;
        }
        prev = j;
    }
    whiten(&mut theta, &mut alpha);
    rotate_leading_block(&mut alpha, &mut theta);
    let mut delta = DMatrix::zeros(nc, n_dim);
    let mut model = shell(m, n_dim);
    for c in 0..nc {
        let a = alpha.row(c);
        let nn = a.norm_squared();
        if nn > 0.0 {
            for k in 0..n_dim {
                delta[(c, k)] = b[c] * alpha[(c, k)] / nn;
            }
        } else {
            model
                .warnings
                .push(format!("course '{}' has zero discrimination", m.course_ids()[c]));
        }
    }
    model.theta = theta;
    model.alpha = alpha;
    model.delta = delta;
    model.convergence = conv;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade_data::GradeScaleSpec;
    use crate::latent_models::{centering_estimates, unidim_difficulty};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ids(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn flat(ns: usize, nc: usize, cells: Vec<Option<f64>>) -> CourseResponseMatrix {
        CourseResponseMatrix::from_flat(ids("s", ns), ids("c", nc), cells, GradeScaleSpec::continuous(-1e9)).unwrap()
    }

    #[test]
    fn noiseless_additive_recovery() {
        let m = flat(2, 2, vec![Some(65.0), Some(45.0), Some(75.0), Some(55.0)]);
        let f = fit_agm(&m, 1).unwrap();
        assert_abs_diff_eq!(f.theta[(0, 0)], -5.0, epsilon = 1e-8);
        assert_abs_diff_eq!(f.theta[(1, 0)], 5.0, epsilon = 1e-8);
        assert_abs_diff_eq!(f.delta[(0, 0)], 70.0, epsilon = 1e-8);
        assert_abs_diff_eq!(f.delta[(1, 0)], 50.0, epsilon = 1e-8);
    }

    #[test]
    fn equals_centering_on_complete_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells: Vec<Option<f64>> = (0..8 * 5).map(|_| Some(rng.random::<f64>() * 10.0)).collect();
        let m = flat(8, 5, cells);
        let a = fit_agm(&m, 1).unwrap();
        let c = centering_estimates(&m);
        let dd: Vec<f64> = (0..5).map(|i| a.delta[(i, 0)] - c.delta[(i, 0)]).collect();
        let dt: Vec<f64> = (0..8).map(|i| a.theta[(i, 0)] - c.theta[(i, 0)]).collect();
        assert!(dd.iter().all(|x| (x - dd[0]).abs() < 1e-8));
        assert!(dt.iter().all(|x| (x - dt[0]).abs() < 1e-8));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let m = flat(
            4,
            4,
            vec![
                Some(1.0), Some(2.0), None, None,
                Some(2.0), Some(3.0), None, None,
                None, None, Some(1.0), Some(4.0),
                None, None, Some(2.0), Some(5.0),
            ],
        );
        match fit_agm(&m, 1) {
            Err(Error::Disconnected(parts)) => {
                assert_eq!(parts.len(), 2);
                assert_eq!(parts[0], vec!["c0".to_string(), "c1".to_string()]);
            }
            other => panic!("expected disconnection, got {other:?}"),
        }
    }

    #[test]
    fn multidim_recovers_planted_structure() {
        let (ns, nc) = (400, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut th: Vec<[f64; 2]> = (0..ns).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        for k in 0..2 {
            let mu = th.iter().map(|t| t[k]).sum::<f64>() / ns as f64;
            th.iter_mut().for_each(|t| t[k] -= mu);
        }
        let al: Vec<[f64; 2]> = (0..nc).map(|c| if c % 2 == 0 { [1.0, 0.2] } else { [0.2, 1.0] }).collect();
        let bb: Vec<f64> = (0..nc).map(|c| c as f64 * 0.3).collect();
        let mut cells = Vec::new();
        for t in &th {
            for c in 0..nc {
                let g = bb[c] + al[c][0] * t[0] + al[c][1] * t[1] + 0.05 * rng.sample::<f64, _>(StandardNormal);
                cells.push(if rng.random::<f64>() < 0.1 { None } else { Some(g) });
            }
        }
        let m = flat(ns, nc, cells);
        let one = fit_agm(&m, 1).unwrap();
        let two = fit_agm(&m, 2).unwrap();
        assert!(two.convergence.converged);
        assert!(two.sigma2.unwrap() < 0.01);
        assert!(two.bic() < one.bic());
        assert!(two.alpha[(0, 1)].abs() < 1e-10);
        // whitened traits
        let cov = two.theta.transpose() * &two.theta / ns as f64;
        assert!((cov - DMatrix::identity(2, 2)).amax() < 0.05);
        // ⟨α, δ⟩ reproduces the intercepts
        let d = unidim_difficulty(&two);
        for (c, e) in d.entries.iter().enumerate() {
            let norm = two.alpha.row(c).norm();
            assert_abs_diff_eq!(-e.difficulty * norm, bb[c], epsilon = 0.05);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn objective_non_increasing(seed in 0u64..1000, miss in 0.0f64..0.4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ns, nc) = (30, 6);
            let mut cells: Vec<Option<f64>> = (0..ns * nc)
                .map(|_| if rng.random::<f64>() < miss { None } else { Some(rng.random::<f64>() * 4.0) })
                .collect();
            // keep the graph connected through the first course
            for s in 0..ns { cells[s * nc] = Some(rng.random::<f64>()); }
            let m = flat(ns, nc, cells);
            for d in [1usize, 2] {
                let f = fit_agm(&m, d).unwrap();
                for w in f.convergence.trace.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9);
                }
                let mean = f.theta.row_mean();
                prop_assert!(mean.amax() < 1e-8);
            }
        }
    }
}
