//! Student trait and course difficulty models: heuristics, centering, AGM,
//! IRT, unidimensional difficulty, BIC, and per-offering fits.

mod agm;
mod document;
mod irt;
mod time_resolved;

pub use agm::{fit_agm, fit_agm_with, AgmConfig};
pub use document::{ModelDocument, MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use irt::{
    fit_irt, fit_irt_with, marginal_log_likelihood, IrtConfig, IrtData, IrtParams, Quadrature,
};
pub use time_resolved::{fit_time_resolved, TimeResolvedConfig};

use crate::error::{Error, Result};
use crate::grade_data::CourseResponseMatrix;
use crate::stats;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Centering,
    Agm,
    Irt,
}

impl std::fmt::Display for ModelClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelClass::Centering => "centering",
            ModelClass::Agm => "agm",
            ModelClass::Irt => "irt",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub converged: bool,
    /// Objective per iteration. AGM: residual sum of squares, plus a tiny
    /// ridge in several dimensions. IRT: penalized marginal log-likelihood.
    pub trace: Vec<f64>,
    pub final_gradient: Option<f64>,
}

/// A fitted model. Rows of `theta` follow `student_ids`, rows of `delta` and
/// `alpha` follow `course_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub class: ModelClass,
    pub n_dim: usize,
    pub student_ids: Vec<String>,
    pub course_ids: Vec<String>,
    pub theta: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    /// Constant added to centering predictions; zero for AGM and IRT.
    pub intercept: f64,
    pub sigma2: Option<f64>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub convergence: Convergence,
    pub warnings: Vec<String>,
}

impl LatentModel {
    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_courses(&self) -> usize {
        self.course_ids.len()
    }

    fn inner(&self, s: usize, c: usize, sign: f64) -> f64 {
        (0..self.n_dim)
            .map(|k| self.alpha[(c, k)] * (self.theta[(s, k)] + sign * self.delta[(c, k)]))
            .sum()
    }

    /// Model-implied value of a cell: pass probability for IRT, grade otherwise.
    pub fn expected(&self, s: usize, c: usize) -> f64 {
        match self.class {
            ModelClass::Irt => stats::sigmoid(self.inner(s, c, -1.0)),
            ModelClass::Agm => self.inner(s, c, 1.0),
            ModelClass::Centering => self.intercept + self.theta[(s, 0)] + self.delta[(c, 0)],
        }
    }

    /// σ(⟨α_c, θ_s − δ_c⟩) by identifier.
    pub fn pass_probability(&self, student: &str, course: &str) -> Result<f64> {
        if self.class != ModelClass::Irt {
            return Err(Error::Invalid("pass probabilities exist only for IRT models".into()));
        }
        let s = self
            .student_ids
            .iter()
            .position(|x| x == student)
            .ok_or_else(|| Error::Lookup(format!("student '{student}'")))?;
        let c = self
            .course_ids
            .iter()
            .position(|x| x == course)
            .ok_or_else(|| Error::Lookup(format!("course '{course}'")))?;
        Ok(self.expected(s, c))
    }

    pub fn bic(&self) -> f64 {
        bic(self.n_params, self.n_students(), self.log_likelihood)
    }

    /// One score per student: θ itself in one dimension, otherwise the first
    /// principal component of the trait vectors, oriented so that it agrees
    /// with the student's mean model-implied performance (rotation-stable).
    pub fn trait_scores(&self) -> Vec<f64> {
        if self.n_dim == 1 {
            return self.theta.column(0).iter().copied().collect();
        }
        let n = self.n_students() as f64;
        let mean = self.theta.row_mean();
        let centered = DMatrix::from_fn(self.theta.nrows(), self.n_dim, |s, k| self.theta[(s, k)] - mean[k]);
        let cov = centered.transpose() * &centered / n;
        let (_, v) = stats::sorted_eigen(&cov);
        let mut scores: Vec<f64> = (0..self.theta.nrows())
            .map(|s| (0..self.n_dim).map(|k| centered[(s, k)] * v[(k, 0)]).sum())
            .collect();
        let nc = self.n_courses().max(1) as f64;
        let performance: Vec<f64> = (0..self.theta.nrows())
            .map(|s| (0..self.n_courses()).map(|c| self.expected(s, c)).sum::<f64>() / nc)
            .collect();
        if stats::pearson(&scores, &performance).unwrap_or(1.0) < 0.0 {
            scores.iter_mut().for_each(|x| *x = -*x);
        }
        scores
    }
}

/// BIC = k ln S − 2 ln L̂, with S the number of students.
pub fn bic(k: usize, n_students: usize, log_likelihood: f64) -> f64 {
    k as f64 * (n_students as f64).ln() - 2.0 * log_likelihood
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heuristics {
    /// Mean observed grade (pass rate for binary data) per course.
    pub course_means: Vec<f64>,
    /// Mean observed grade per student.
    pub student_gpas: Vec<f64>,
}

pub fn heuristic_estimates(m: &CourseResponseMatrix) -> Heuristics {
    let mean_of = |v: Vec<(usize, f64)>| stats::mean(&v.into_iter().map(|x| x.1).collect::<Vec<_>>());
    Heuristics {
        course_means: (0..m.n_courses()).map(|c| mean_of(m.column(c))).collect(),
        student_gpas: (0..m.n_students()).map(|s| mean_of(m.row(s))).collect(),
    }
}

/// GPA-centered course means and course-centered student means.
pub fn centering_estimates(m: &CourseResponseMatrix) -> LatentModel {
    let h = heuristic_estimates(m);
    let ns = m.n_students();
    let nc = m.n_courses();
    let mut delta = DMatrix::zeros(nc, 1);
    for c in 0..nc {
        let d: Vec<f64> = m.column(c).into_iter().map(|(s, g)| g - h.student_gpas[s]).collect();
        delta[(c, 0)] = if d.is_empty() { 0.0 } else { stats::mean(&d) };
    }
    let mut theta = DMatrix::zeros(ns, 1);
    for s in 0..ns {
        let d: Vec<f64> = m.row(s).into_iter().map(|(c, g)| g - h.course_means[c]).collect();
        theta[(s, 0)] = if d.is_empty() { 0.0 } else { stats::mean(&d) };
    }
    let values: Vec<f64> = m.observed_values().collect();
    let intercept = if values.is_empty() { 0.0 } else { stats::mean(&values) };
    let mut model = LatentModel {
        class: ModelClass::Centering,
        n_dim: 1,
        student_ids: m.student_ids().to_vec(),
        course_ids: m.course_ids().to_vec(),
        theta,
        delta,
        alpha: DMatrix::from_element(nc, 1, 1.0),
        intercept,
        sigma2: None,
        log_likelihood: 0.0,
        n_params: ns + nc,
        convergence: Convergence { iterations: 1, converged: true, ..Default::default() },
        warnings: Vec::new(),
    };
    let (rss, n) = residual_ss(&model, m);
    let sigma2 = (rss / n.max(1) as f64).max(1e-12);
    model.sigma2 = Some(sigma2);
    model.log_likelihood = gaussian_log_likelihood(n, sigma2);
    model
}

pub(crate) fn residual_ss(model: &LatentModel, m: &CourseResponseMatrix) -> (f64, usize) {
    let mut rss = 0.0;
    let mut n = 0;
    for s in 0..m.n_students() {
        for (c, g) in m.row(s) {
            let r = g - model.expected(s, c);
            rss += r * r;
            n += 1;
        }
    }
    (rss, n)
}

/// Maximized Gaussian log-likelihood of `n` residuals with variance σ².
pub fn gaussian_log_likelihood(n: usize, sigma2: f64) -> f64 {
    -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseDifficulty {
    pub course_id: String,
    /// Offering label (`course@term`) for time-resolved fits.
    pub offering: Option<String>,
    pub term: Option<i64>,
    /// Higher means harder, for every model class.
    pub difficulty: f64,
    /// ⟨α, δ⟩ / ‖α‖ before orientation.
    pub raw_projection: f64,
    pub ci: Option<ConfidenceInterval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEstimates {
    pub entries: Vec<CourseDifficulty>,
    /// Courses whose discrimination vector vanished.
    pub undefined: Vec<String>,
}

impl DifficultyEstimates {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.difficulty).collect()
    }
}

/// Δ_c = ⟨α_c, δ_c⟩ / ‖α_c‖. AGM and centering estimates are sign-flipped so
/// that a higher value always means a harder course.
pub fn unidim_difficulty(model: &LatentModel) -> DifficultyEstimates {
    let mut entries = Vec::new();
    let mut undefined = Vec::new();
    for c in 0..model.n_courses() {
        let a = model.alpha.row(c);
        let norm = a.norm();
        let id = model.course_ids[c].clone();
        if !(norm > 0.0) {
            undefined.push(id);
            continue;
        }
        let raw = a.dot(&model.delta.row(c)) / norm;
        let difficulty = match model.class {
            ModelClass::Irt => raw,
            ModelClass::Agm | ModelClass::Centering => -raw,
        };
        entries.push(CourseDifficulty {
            course_id: id,
            offering: None,
            term: None,
            difficulty,
            raw_projection: raw,
            ci: None,
        });
    }
    DifficultyEstimates { entries, undefined }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub agm: AgmConfig,
    pub irt: IrtConfig,
}

/// Fits one model of the given class and dimension.
pub fn fit_model(
    m: &CourseResponseMatrix,
    class: ModelClass,
    n_dim: usize,
    cfg: &FitConfig,
) -> Result<LatentModel> {
    match class {
        ModelClass::Centering => {
            if n_dim != 1 {
                return Err(Error::Invalid("centering is one-dimensional".into()));
            }
            Ok(centering_estimates(m))
        }
        ModelClass::Agm => fit_agm_with(m, n_dim, &cfg.agm),
        ModelClass::Irt => fit_irt_with(m, n_dim, &cfg.irt),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub class: ModelClass,
    pub n_dim: usize,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub bic: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BicSelection {
    pub table: Vec<BicRow>,
    pub chosen: LatentModel,
}

/// Fits dimensions 1..=max_dim of one class concurrently and keeps the
/// lowest BIC. Classes are never compared with each other.
pub fn select_by_bic(
    m: &CourseResponseMatrix,
    class: ModelClass,
    max_dim: usize,
    cfg: &FitConfig,
) -> Result<BicSelection> {
    if class == ModelClass::Centering {
        return Err(Error::Invalid("centering has no dimension to select".into()));
    }
    let max_dim = max_dim.max(1);
    let fits: Vec<Result<LatentModel>> = (1..=max_dim)
        .into_par_iter()
        .map(|d| fit_model(m, class, d, cfg))
        .collect();
    let mut models = Vec::new();
    for (d, f) in (1..=max_dim).zip(fits) {
        match f {
            Ok(model) => models.push(model),
            Err(e) if d == 1 => return Err(e),
            Err(_) => break,
        }
    }
    let table: Vec<BicRow> = models
        .iter()
        .map(|x| BicRow {
            class,
            n_dim: x.n_dim,
            log_likelihood: x.log_likelihood,
            n_params: x.n_params,
            bic: x.bic(),
            converged: x.convergence.converged,
        })
        .collect();
    let best = table
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.bic.total_cmp(&b.1.bic))
        .map(|x| x.0)
        .expect("at least the one-dimensional fit");
    Ok(BicSelection {
        table,
        chosen: models.swap_remove(best),
    })
}

/// Orthogonal rotation making the leading n×n block of `alpha` lower
/// triangular with a positive diagonal; `theta` rotates along.
pub(crate) fn rotate_leading_block(alpha: &mut DMatrix<f64>, theta: &mut DMatrix<f64>) {
    let n = alpha.ncols();
    if n < 2 || alpha.nrows() < n {
        return;
    }
    let lead_t = alpha.rows(0, n).transpose();
    let qr = lead_t.qr();
    let q = qr.q();
    *alpha = &*alpha * &q;
    *theta = &*theta * &q;
    for k in 0..n {
        if alpha[(k, k)] < 0.0 {
            alpha.column_mut(k).neg_mut();
            theta.column_mut(k).neg_mut();
        }
    }
}

/// Union-find over the bipartite student-course graph; returns course ids
/// per connected component (students with no grades are ignored).
pub(crate) fn course_components(m: &CourseResponseMatrix) -> Vec<Vec<String>> {
    let ns = m.n_students();
    let nc = m.n_courses();
    let mut parent: Vec<usize> = (0..ns + nc).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for s in 0..ns {
        for (c, _) in m.row(s) {
            let a = find(&mut parent, s);
            let b = find(&mut parent, ns + c);
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
    for c in 0..nc {
        let r = find(&mut parent, ns + c);
        groups.entry(r).or_default().push(m.course_ids()[c].clone());
    }
    let mut out: Vec<Vec<String>> = groups.into_values().collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade_data::GradeScaleSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ids(p: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn grid() -> CourseResponseMatrix {
        CourseResponseMatrix::new(
            ids("s", 2),
            ids("c", 2),
            vec![vec![Some(80.0), Some(60.0)], vec![Some(70.0), Some(50.0)]],
            GradeScaleSpec::continuous(0.0),
        )
        .unwrap()
    }

    #[test]
    fn heuristics_on_grid() {
        let h = heuristic_estimates(&grid());
        assert_eq!(h.course_means, vec![75.0, 55.0]);
        assert_eq!(h.student_gpas, vec![70.0, 60.0]);
    }

    #[test]
    fn heuristic_pass_rate_and_singleton() {
        let m = CourseResponseMatrix::new(
            ids("s", 3),
            ids("c", 2),
            vec![vec![Some(1.0), None], vec![Some(0.0), None], vec![Some(1.0), Some(1.0)]],
            GradeScaleSpec::binary(),
        )
        .unwrap();
        let h = heuristic_estimates(&m);
        assert_abs_diff_eq!(h.course_means[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(h.student_gpas[0], 1.0);
    }

    #[test]
    fn centering_on_grid() {
        let c = centering_estimates(&grid());
        assert_eq!(c.delta.column(0).iter().copied().collect::<Vec<_>>(), vec![10.0, -10.0]);
        assert_eq!(c.theta.column(0).iter().copied().collect::<Vec<_>>(), vec![5.0, -5.0]);
    }

    #[test]
    fn centering_constant_data() {
        let m = CourseResponseMatrix::new(
            ids("s", 3),
            ids("c", 2),
            vec![vec![Some(3.0), None], vec![Some(3.0), Some(3.0)], vec![None, Some(3.0)]],
            GradeScaleSpec::continuous(0.0),
        )
        .unwrap();
        let c = centering_estimates(&m);
        assert!(c.delta.iter().all(|&x| x == 0.0));
        assert!(c.theta.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bic_formula() {
        assert_abs_diff_eq!(bic(2, 100, -50.0), 2.0 * 100f64.ln() + 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bic(2, 100, -50.0), 109.21, epsilon = 0.005);
        assert!(bic(3, 100, -50.0) > bic(2, 100, -50.0));
    }

    fn model_with(alpha: &[f64], delta: &[f64], class: ModelClass) -> LatentModel {
        let n = alpha.len();
        LatentModel {
            class,
            n_dim: n,
            student_ids: ids("s", 1),
            course_ids: ids("c", 1),
            theta: DMatrix::zeros(1, n),
            delta: DMatrix::from_row_slice(1, n, delta),
            alpha: DMatrix::from_row_slice(1, n, alpha),
            intercept: 0.0,
            sigma2: None,
            log_likelihood: 0.0,
            n_params: 0,
            convergence: Convergence::default(),
            warnings: vec![],
        }
    }

    #[test]
    fn projection_formula() {
        let d = unidim_difficulty(&model_with(&[3.0, 4.0], &[1.0, 2.0], ModelClass::Irt));
        assert_abs_diff_eq!(d.entries[0].difficulty, 2.2, epsilon = 1e-12);
        let d = unidim_difficulty(&model_with(&[1.0], &[0.7], ModelClass::Irt));
        assert_eq!(d.entries[0].difficulty, 0.7);
        let d = unidim_difficulty(&model_with(&[3.0, 4.0], &[1.0, 2.0], ModelClass::Agm));
        assert_abs_diff_eq!(d.entries[0].difficulty, -2.2, epsilon = 1e-12);
        assert_abs_diff_eq!(d.entries[0].raw_projection, 2.2, epsilon = 1e-12);
        let d = unidim_difficulty(&model_with(&[0.0, 0.0], &[1.0, 2.0], ModelClass::Irt));
        assert!(d.entries.is_empty());
        assert_eq!(d.undefined, vec!["c0".to_string()]);
    }

    #[test]
    fn pass_probability_values() {
        let mut m = model_with(&[1.0], &[0.3], ModelClass::Irt);
        m.theta[(0, 0)] = 0.3;
        assert_abs_diff_eq!(m.pass_probability("s0", "c0").unwrap(), 0.5, epsilon = 1e-15);
        m.theta[(0, 0)] = 0.3 + 3f64.ln();
        assert_abs_diff_eq!(m.pass_probability("s0", "c0").unwrap(), 0.75, epsilon = 1e-12);
        assert!(matches!(m.pass_probability("nobody", "c0"), Err(Error::Lookup(_))));
    }

    #[test]
    fn rotation_lower_triangular_and_invariant() {
        let mut alpha = DMatrix::from_row_slice(3, 2, &[0.6, 0.8, -0.3, 1.2, 1.0, 0.1]);
        let mut theta = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.3]);
        let before = &theta * alpha.transpose();
        rotate_leading_block(&mut alpha, &mut theta);
        let after = &theta * alpha.transpose();
        assert!((before - after).amax() < 1e-12);
        assert!(alpha[(0, 1)].abs() < 1e-12);
        assert!(alpha[(0, 0)] > 0.0 && alpha[(1, 1)] > 0.0);
    }

    proptest! {
        #[test]
        fn projection_scale_invariant(a1 in 0.1f64..3.0, a2 in 0.1f64..3.0, d1 in -2.0f64..2.0, d2 in -2.0f64..2.0, k in 0.1f64..10.0) {
            let x = unidim_difficulty(&model_with(&[a1, a2], &[d1, d2], ModelClass::Irt)).entries[0].difficulty;
            let y = unidim_difficulty(&model_with(&[k * a1, k * a2], &[d1, d2], ModelClass::Irt)).entries[0].difficulty;
            prop_assert!((x - y).abs() < 1e-10);
        }

        #[test]
        fn pass_probability_increasing_in_theta(a1 in 0.1f64..3.0, a2 in 0.1f64..3.0, t in -3.0f64..3.0, h in 0.01f64..1.0) {
            let mut m = model_with(&[a1, a2], &[0.2, -0.1], ModelClass::Irt);
            m.theta[(0, 0)] = t;
            let p0 = m.expected(0, 0);
            m.theta[(0, 0)] = t + h;
            let p1 = m.expected(0, 0);
            m.theta[(0, 1)] += h;
            let p2 = m.expected(0, 0);
            prop_assert!(p1 > p0 || p0 > 1.0 - 1e-15);
            prop_assert!(p2 > p1 || p1 > 1.0 - 1e-15);
        }

        #[test]
        fn centering_translation_invariant(shift in -50.0f64..50.0, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cells: Vec<Option<f64>> = (0..30)
                .map(|_| if rng.random::<f64>() < 0.2 { None } else { Some(100.0 + rng.random::<f64>() * 50.0) })
                .collect();
            let m = CourseResponseMatrix::from_flat(ids("s", 6), ids("c", 5), cells, GradeScaleSpec::continuous(0.0)).unwrap();
            let shifted = m.map_observed(m.scale().clone(), |g| g + shift).unwrap();
            let a = centering_estimates(&m);
            let b = centering_estimates(&shifted);
            prop_assert!((&a.delta - &b.delta).amax() < 1e-9);
            prop_assert!((&a.theta - &b.theta).amax() < 1e-9);
        }
    }
}
