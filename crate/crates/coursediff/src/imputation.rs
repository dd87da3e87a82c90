//! Completion of the grade matrix for PCA: mean/median fill and iterative
//! PCA imputation (MIPCA).

use crate::correlation::{correlation_matrix_with, psd_repair, tetrachoric_from_table, CorrelationMethod};
use crate::dimensionality::{pve_of, threshold_rule};
use crate::error::{Error, Result};
use crate::grade_data::{CourseResponseMatrix, GradeScaleSpec, ScaleKind};
use crate::stats::{self, normal_cdf, normal_pdf, normal_quantile};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn fill_columns(m: &CourseResponseMatrix, stat: impl Fn(&[f64]) -> f64) -> Result<CourseResponseMatrix> {
    let nc = m.n_courses();
    let mut fills = Vec::with_capacity(nc);
    for c in 0..nc {
        let col: Vec<f64> = m.column(c).into_iter().map(|x| x.1).collect();
        if col.is_empty() {
            return Err(Error::Invalid(format!("course '{}' has no observed grades", m.course_ids()[c])));
        }
        fills.push(stat(&col));
    }
    let grades: Vec<Option<f64>> = m
        .grades()
        .iter()
        .enumerate()
        .map(|(i, g)| Some(g.unwrap_or(fills[i % nc])))
        .collect();
    let fractional = grades.iter().any(|g| matches!(g, Some(x) if *x != 0.0 && *x != 1.0));
    let mut out = m.clone();
    if m.scale().kind == ScaleKind::Binary && fractional {
        // fills of a binary column are proportions
        out = out.with_scale(GradeScaleSpec {
            kind: ScaleKind::Continuous,
            ..m.scale().clone()
        })?;
    }
    out.with_grades(grades)
}

/// Each missing cell takes its course's observed mean.
pub fn mean_impute(m: &CourseResponseMatrix) -> Result<CourseResponseMatrix> {
    fill_columns(m, stats::mean)
}

/// Each missing cell takes its course's observed median.
pub fn median_impute(m: &CourseResponseMatrix) -> Result<CourseResponseMatrix> {
    fill_columns(m, stats::median)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MipcaConfig {
    /// `None`: smallest k reaching 50% cumulative PVE on the mean-imputed matrix.
    pub n_components: Option<usize>,
    pub tol: f64,
    pub max_iter: usize,
    /// Seed for the final residual draw on imputed cells; `None` keeps the
    /// plain reconstruction.
    pub noise_seed: Option<u64>,
}

impl Default for MipcaConfig {
    fn default() -> Self {
        MipcaConfig {
            n_components: None,
            tol: 1e-4,
            max_iter: 100,
            noise_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MipcaResult {
    pub matrix: CourseResponseMatrix,
    pub n_components: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Max change of imputed cells per iteration, in column standard deviations
    /// (continuous) or probability units (binary).
    pub changes: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Default component count: 50% cumulative PVE on the mean-imputed matrix.
pub fn default_components(m: &CourseResponseMatrix) -> Result<usize> {
    let filled = mean_impute(m)?;
    let method = if m.scale().kind == ScaleKind::Binary {
        CorrelationMethod::Tetrachoric
    } else {
        CorrelationMethod::Pearson
    };
    let corr = correlation_matrix_with(&filled, method)?;
    let pve = pve_of(&corr.values)?;
    let cap = m.n_students().min(m.n_courses()).saturating_sub(1).max(1);
    Ok(threshold_rule(&pve, 0.5).min(cap))
}

fn check_columns(m: &CourseResponseMatrix) -> Result<()> {
    for c in 0..m.n_courses() {
        let col = m.column(c);
        if col.is_empty() || col.iter().all(|x| x.1 == col[0].1) {
            return Err(Error::Invalid(format!(
                "course '{}' is degenerate (no variation in observed grades)",
                m.course_ids()[c]
            )));
        }
    }
    Ok(())
}

/// Iterative PCA imputation: observed cells never change.
pub fn mipca_impute(m: &CourseResponseMatrix, cfg: &MipcaConfig) -> Result<MipcaResult> {
    check_columns(m)?;
    let ns = m.n_students();
    let nc = m.n_courses();
    let k = match cfg.n_components {
        Some(k) => k,
        None => default_components(m)?,
    };
    if k < 1 || k >= ns.min(nc) {
        return Err(Error::Invalid(format!(
            "n_components = {k} must lie in [1, {})",
            ns.min(nc)
        )));
    }
    if m.is_complete() {
        return Ok(MipcaResult {
            matrix: m.clone(),
            n_components: k,
            iterations: 1,
            converged: true,
            changes: vec![0.0],
            warnings: Vec::new(),
        });
    }
    if m.scale().kind == ScaleKind::Binary {
        mipca_binary(m, k, cfg)
    } else {
        mipca_continuous(m, k, cfg)
    }
}

fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let ns = x.nrows() as f64;
    let mut mu = Vec::with_capacity(x.ncols());
    let mut sd = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let m = col.sum() / ns;
        let v = col.iter().map(|g| (g - m) * (g - m)).sum::<f64>() / ns;
        mu.push(m);
        sd.push(v.sqrt().max(1e-12));
    }
    (mu, sd)
}

fn top_k_projector(corr: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (lambda, v) = stats::sorted_eigen(corr);
    let vk = v.columns(0, k).into_owned();
    (&vk * vk.transpose(), lambda[..k].to_vec())
}

fn mipca_continuous(m: &CourseResponseMatrix, k: usize, cfg: &MipcaConfig) -> Result<MipcaResult> {
    let ns = m.n_students();
    let nc = m.n_courses();
    let filled = mean_impute(m)?;
    let mut x = DMatrix::from_fn(ns, nc, |s, c| filled.get(s, c).unwrap());
    let missing: Vec<(usize, usize)> = (0..ns)
        .flat_map(|s| (0..nc).map(move |c| (s, c)))
        .filter(|&(s, c)| m.get(s, c).is_none())
        .collect();
    let mut changes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_fit = None;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let (mu, sd) = column_moments(&x);
        let z = DMatrix::from_fn(ns, nc, |s, c| (x[(s, c)] - mu[c]) / sd[c]);
        let corr = (z.transpose() * &z) / ns as f64;
        let (proj, _) = top_k_projector(&corr, k);
        let zhat = &z * proj;
        let mut change: f64 = 0.0;
        for &(s, c) in &missing {
            let v = zhat[(s, c)] * sd[c] + mu[c];
            change = change.max((v - x[(s, c)]).abs() / sd[c]);
            x[(s, c)] = v;
        }
        changes.push(change);
        last_fit = Some((z, zhat, sd));
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("MIPCA did not converge in {} iterations", cfg.max_iter));
    }
    if let (Some(seed), Some((z, zhat, sd))) = (cfg.noise_seed, last_fit) {
        // residual spread of observed cells, per column, on the standardized scale
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_sd: Vec<f64> = (0..nc)
            .map(|c| {
                let r: Vec<f64> = (0..ns)
                    .filter(|&s| m.get(s, c).is_some())
                    .map(|s| z[(s, c)] - zhat[(s, c)])
                    .collect();
                (r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64).sqrt()
            })
            .collect();
        for &(s, c) in &missing {
            let e: f64 = rng.sample(StandardNormal);
            x[(s, c)] += e * resid_sd[c] * sd[c];
        }
    }
    let grades = (0..ns * nc)
        .map(|i| {
            let (s, c) = (i / nc, i % nc);
            Some(m.get(s, c).unwrap_or(x[(s, c)]))
        })
        .collect();
    // imputed values may stray past the scale floor
    let scale = GradeScaleSpec {
        lowest_grade: m.scale().lowest_grade.min(x.min()),
        ..m.scale().clone()
    };
    let matrix = m.with_scale(scale)?.with_grades(grades)?;
    Ok(MipcaResult {
        matrix,
        n_components: k,
        iterations,
        converged,
        changes,
        warnings,
    })
}

fn mipca_binary(m: &CourseResponseMatrix, k: usize, cfg: &MipcaConfig) -> Result<MipcaResult> {
    let ns = m.n_students();
    let nc = m.n_courses();
    // latent pass iff Z_c > t_c, thresholds from observed pass rates
    let thresholds: Vec<f64> = (0..nc)
        .map(|c| {
            let col = m.column(c);
            let rate = col.iter().map(|x| x.1).sum::<f64>() / col.len() as f64;
            normal_quantile((1.0 - rate).clamp(1e-6, 1.0 - 1e-6))
        })
        .collect();
    let up: Vec<f64> = thresholds.iter().map(|&t| normal_pdf(t) / (1.0 - normal_cdf(t)).max(1e-300)).collect();
    let down: Vec<f64> = thresholds.iter().map(|&t| -normal_pdf(t) / normal_cdf(t).max(1e-300)).collect();
    let mut p = DMatrix::from_fn(ns, nc, |s, c| {
        m.get(s, c).unwrap_or_else(|| stats::mean(&m.column(c).into_iter().map(|x| x.1).collect::<Vec<_>>()))
    });
    let missing: Vec<(usize, usize)> = (0..ns)
        .flat_map(|s| (0..nc).map(move |c| (s, c)))
        .filter(|&(s, c)| m.get(s, c).is_none())
        .collect();
    let mut changes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut warnings = Vec::new();
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let b = p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let mut corr = DMatrix::<f64>::identity(nc, nc);
        for i in 0..nc {
            for j in i + 1..nc {
                let mut t = [[0.0; 2]; 2];
                for s in 0..ns {
                    t[b[(s, i)] as usize][b[(s, j)] as usize] += 1.0;
                }
                let r = tetrachoric_from_table(&t).map(|e| e.rho).unwrap_or(0.0);
                corr[(i, j)] = r;
                corr[(j, i)] = r;
            }
        }
        if let Some(fixed) = psd_repair(&corr) {
            corr = fixed;
        }
        let (lambda, v) = stats::sorted_eigen(&corr);
        let vk = v.columns(0, k).into_owned();
        let proj = &vk * vk.transpose();
        let communality: Vec<f64> = (0..nc)
            .map(|c| (0..k).map(|j| lambda[j].max(0.0) * vk[(c, j)].powi(2)).sum::<f64>())
            .collect();
        let z = DMatrix::from_fn(ns, nc, |s, c| p[(s, c)] * up[c] + (1.0 - p[(s, c)]) * down[c]);
        let zhat = &z * proj;
        let mut change: f64 = 0.0;
        for &(s, c) in &missing {
            let resid = (1.0 - communality[c]).max(0.05).sqrt();
            let prob = normal_cdf((zhat[(s, c)] - thresholds[c]) / resid);
            change = change.max((prob - p[(s, c)]).abs());
            p[(s, c)] = prob;
        }
        changes.push(change);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("MIPCA did not converge in {} iterations", cfg.max_iter));
    }
    let mut rng = cfg.noise_seed.map(ChaCha8Rng::seed_from_u64);
    let mut grades: Vec<Option<f64>> = m.grades().to_vec();
    for &(s, c) in &missing {
        let prob = p[(s, c)];
        let v = match rng.as_mut() {
            Some(r) => (r.random::<f64>() < prob) as u8 as f64,
            None => (prob >= 0.5) as u8 as f64,
        };
        grades[s * nc + c] = Some(v);
    }
    Ok(MipcaResult {
        matrix: m.with_grades(grades)?,
        n_components: k,
        iterations,
        converged,
        changes,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    #[test]
    fn mean_fill_arithmetic() {
        let m = CourseResponseMatrix::new(
            ids("s", 3),
            ids("c", 1),
            vec![vec![Some(2.0)], vec![None], vec![Some(4.0)]],
            GradeScaleSpec::continuous(0.0),
        )
        .unwrap();
        assert_eq!(mean_impute(&m).unwrap().get(1, 0), Some(3.0));
        assert_eq!(median_impute(&m).unwrap().get(1, 0), Some(3.0));
    }

    #[test]
    fn binary_fill_is_proportion() {
        let m = CourseResponseMatrix::new(
            ids("s", 4),
            ids("c", 1),
            vec![vec![Some(1.0)], vec![Some(1.0)], vec![Some(0.0)], vec![None]],
            GradeScaleSpec::binary(),
        )
        .unwrap();
        let f = mean_impute(&m).unwrap();
        assert_abs_diff_eq!(f.get(3, 0).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn complete_matrix_untouched() {
        let m = CourseResponseMatrix::new(
            ids("s", 3),
            ids("c", 2),
            vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), Some(1.0)], vec![Some(2.0), Some(5.0)]],
            GradeScaleSpec::continuous(0.0),
        )
        .unwrap();
        assert_eq!(mean_impute(&m).unwrap(), m);
        let r = mipca_impute(&m, &MipcaConfig { n_components: Some(1), ..Default::default() }).unwrap();
        assert_eq!(r.matrix, m);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn fully_missing_column_is_an_error() {
        let m = CourseResponseMatrix::new(
            ids("s", 2),
            ids("c", 2),
            vec![vec![Some(1.0), None], vec![Some(3.0), None]],
            GradeScaleSpec::continuous(0.0),
        )
        .unwrap();
        assert!(mean_impute(&m).is_err());
    }

    /// g = θ + δ on a grid with a deterministic 20% mask; rows keep ≥ 2 cells.
    fn rank_one(seed: u64) -> (CourseResponseMatrix, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ns = 200;
        let nc = 12;
        let theta: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() * 20.0).collect();
        let delta: Vec<f64> = (0..nc).map(|c| 30.0 + 3.0 * c as f64).collect();
        let truth: Vec<Vec<f64>> = theta.iter().map(|t| delta.iter().map(|d| t + d).collect()).collect();
        let mut cells = Vec::new();
        for s in 0..ns {
            for c in 0..nc {
                let miss = c > 1 && rng.random::<f64>() < 0.2 * (1.0 + theta[s] / 20.0);
                cells.push(if miss { None } else { Some(truth[s][c]) });
            }
        }
        let m = CourseResponseMatrix::from_flat(ids("s", ns), ids("c", nc), cells, GradeScaleSpec::continuous(0.0))
            .unwrap();
        (m, truth)
    }

    #[test]
    fn rank_one_oracle_recovered() {
        let (m, truth) = rank_one(7);
        let cfg = MipcaConfig { n_components: Some(1), tol: 1e-12, max_iter: 2000, noise_seed: None };
        let r = mipca_impute(&m, &cfg).unwrap();
        assert!(r.converged);
        for s in 0..m.n_students() {
            for c in 0..m.n_courses() {
                if m.get(s, c).is_none() {
                    let got = r.matrix.get(s, c).unwrap();
                    assert!((got - truth[s][c]).abs() < 1e-6, "cell ({s},{c}): {got} vs {}", truth[s][c]);
                }
            }
        }
    }

    #[test]
    fn rank_one_converges_within_fifty() {
        let (m, _) = rank_one(8);
        let cfg = MipcaConfig { n_components: Some(1), ..Default::default() };
        let r = mipca_impute(&m, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 50, "{} iterations", r.iterations);
        assert!(*r.changes.last().unwrap() < cfg.tol);
    }

    #[test]
    fn component_count_validated() {
        let (m, _) = rank_one(9);
        let cfg = MipcaConfig { n_components: Some(12), ..Default::default() };
        assert!(mipca_impute(&m, &cfg).is_err());
    }

    #[test]
    fn binary_path_fills_with_binary_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ns = 300;
        let nc = 8;
        let mut cells = Vec::new();
        for _ in 0..ns {
            let th: f64 = rng.sample(StandardNormal);
            for c in 0..nc {
                let d = -1.0 + 0.3 * c as f64;
                let pass = rng.random::<f64>() < stats::sigmoid(1.7 * (th - d));
                let miss = rng.random::<f64>() < 0.15;
                cells.push(if miss { None } else { Some(pass as u8 as f64) });
            }
        }
        let m = CourseResponseMatrix::from_flat(ids("s", ns), ids("c", nc), cells, GradeScaleSpec::binary()).unwrap();
        let r = mipca_impute(&m, &MipcaConfig { n_components: Some(1), noise_seed: Some(1), ..Default::default() })
            .unwrap();
        assert!(r.converged, "changes {:?}", r.changes);
        assert!(r.matrix.is_complete());
        assert!(r.matrix.observed_values().all(|g| g == 0.0 || g == 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn observed_cells_bit_identical_and_deterministic(seed in 0u64..1000) {
            let (m, _) = rank_one(seed);
            let cfg = MipcaConfig { n_components: Some(2), noise_seed: Some(seed), ..Default::default() };
            let a = mipca_impute(&m, &cfg).unwrap();
            let b = mipca_impute(&m, &cfg).unwrap();
            prop_assert_eq!(&a.matrix, &b.matrix);
            for (orig, new) in m.grades().iter().zip(a.matrix.grades()) {
                if let Some(g) = orig {
                    prop_assert_eq!(g.to_bits(), new.unwrap().to_bits());
                }
            }
            let f = mean_impute(&m).unwrap();
            for (orig, new) in m.grades().iter().zip(f.grades()) {
                if let Some(g) = orig {
                    prop_assert_eq!(g.to_bits(), new.unwrap().to_bits());
                }
            }
        }
    }
}
