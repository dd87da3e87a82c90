//! Missingness mechanism diagnostics: Little's MCAR test and per-course
//! logistic prediction of missing grades.

use crate::error::{Error, Result};
use crate::grade_data::CourseResponseMatrix;
use crate::stats::{self, logistic_regression};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MAR_RIDGE: f64 = 1e-6;
pub const PSEUDO_R2_FLAG: f64 = 0.1;
pub const MCAR_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessPattern {
    pub observed_set: Vec<usize>,
    pub missing_set: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LittleResult {
    pub t2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub n_patterns: usize,
    /// Diagonal shrinkage weight that made the covariance positive definite.
    pub shrinkage: f64,
    pub warnings: Vec<String>,
}

pub const MAR_FEATURES: [&str; 4] = ["GPA", "STD", "MIN", "MAX"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarCourseResult {
    pub course_id: String,
    pub n_rows: usize,
    pub n_missing: usize,
    /// Coefficients on the original feature scale, intercept first.
    /// `None` for a feature that was constant and dropped.
    pub coefficients: Vec<Option<f64>>,
    /// Wald p-values for GPA, STD, MIN, MAX.
    pub p_values: Vec<Option<f64>>,
    pub pseudo_r2: f64,
    pub flagged: bool,
    pub separation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarReport {
    pub courses: Vec<MarCourseResult>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mechanism {
    Mcar,
    Mar,
    MnarSuspect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessVerdict {
    pub mechanism: Mechanism,
    /// Courses whose missingness the observed features fail to explain.
    pub caution_courses: Vec<String>,
}

pub fn patterns(m: &CourseResponseMatrix) -> Vec<MissingnessPattern> {
    let nc = m.n_courses();
    let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    for s in 0..m.n_students() {
        let key: Vec<bool> = (0..nc).map(|c| m.get(s, c).is_some()).collect();
        *counts.entry(key).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(key, count)| MissingnessPattern {
            observed_set: (0..nc).filter(|&c| key[c]).collect(),
            missing_set: (0..nc).filter(|&c| !key[c]).collect(),
            count,
        })
        .collect()
}

fn pairwise_moments(m: &CourseResponseMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let nc = m.n_courses();
    let mu: Vec<f64> = (0..nc)
        .map(|c| stats::mean(&m.column(c).into_iter().map(|x| x.1).collect::<Vec<_>>()))
        .collect();
    if let Some(c) = mu.iter().position(|x| x.is_nan()) {
        return Err(Error::Invalid(format!("course '{}' has no observed grades", m.course_ids()[c])));
    }
    let mut cov = DMatrix::<f64>::zeros(nc, nc);
    let mut n = DMatrix::<f64>::zeros(nc, nc);
    for s in 0..m.n_students() {
        let row = m.row(s);
        for &(a, ga) in &row {
            for &(b, gb) in &row {
                if b <= a {
                    cov[(a, b)] += (ga - mu[a]) * (gb - mu[b]);
                    n[(a, b)] += 1.0;
                }
            }
        }
    }
    for a in 0..nc {
        for b in 0..=a {
            let v = if n[(a, b)] > 1.0 { cov[(a, b)] / (n[(a, b)] - 1.0) } else { 0.0 };
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
        if !(cov[(a, a)] > 0.0) {
            return Err(Error::Invalid(format!("course '{}' has zero variance", m.course_ids()[a])));
        }
    }
    Ok((mu, cov))
}

/// Little's χ² test of missing completely at random.
pub fn little_mcar_test(m: &CourseResponseMatrix) -> Result<LittleResult> {
    if m.missing_count() == 0 {
        return Err(Error::NotApplicable("matrix has no missing values".into()));
    }
    let pats = patterns(m);
    if pats.len() < 2 {
        return Err(Error::NotApplicable("only one missingness pattern".into()));
    }
    let (mu, cov) = pairwise_moments(m)?;
    let nc = m.n_courses();
    let diag = DMatrix::from_diagonal(&cov.diagonal());
    let mut shrinkage = 0.0;
    let mut sigma = cov.clone();
    while sigma.clone().cholesky().is_none() {
        shrinkage = if shrinkage == 0.0 { 0.01 } else { (shrinkage * 2.0f64).min(1.0) };
        sigma = &cov * (1.0 - shrinkage) + &diag * shrinkage;
        if shrinkage >= 1.0 {
            break;
        }
    }
    let mut warnings = Vec::new();
    if shrinkage > 0.0 {
        warnings.push(format!("covariance shrunk toward its diagonal by {shrinkage}"));
    }
    let mut t2 = 0.0;
    let mut observed_total = 0usize;
    let mut used = 0usize;
    // group students by pattern to get pattern means
    let mut sums: BTreeMap<Vec<usize>, (Vec<f64>, usize)> = BTreeMap::new();
    for s in 0..m.n_students() {
        let row = m.row(s);
        let key: Vec<usize> = row.iter().map(|x| x.0).collect();
        let entry = sums.entry(key).or_insert_with(|| (vec![0.0; row.len()], 0));
        for (k, &(_, g)) in row.iter().enumerate() {
            entry.0[k] += g;
        }
        entry.1 += 1;
    }
    for (obs, (sum, count)) in &sums {
        if obs.is_empty() {
            continue;
        }
        let k = obs.len();
        let sub = DMatrix::from_fn(k, k, |i, j| sigma[(obs[i], obs[j])]);
        let d = nalgebra::DVector::from_fn(k, |i, _| sum[i] / *count as f64 - mu[obs[i]]);
        match sub.cholesky() {
            Some(ch) => {
                t2 += *count as f64 * d.dot(&ch.solve(&d));
                observed_total += k;
                used += 1;
            }
            None => warnings.push(format!(
                "pattern observing {k} courses has a singular covariance block; skipped"
            )),
        }
    }
    if observed_total <= nc {
        return Err(Error::NotApplicable(format!(
            "non-positive degrees of freedom ({observed_total} - {nc})"
        )));
    }
    let dof = observed_total - nc;
    Ok(LittleResult {
        t2,
        dof,
        p_value: stats::chi_squared_sf(t2, dof as f64),
        n_patterns: used,
        shrinkage,
        warnings,
    })
}

fn mar_course(m: &CourseResponseMatrix, c: usize) -> std::result::Result<MarCourseResult, String> {
    let id = &m.course_ids()[c];
    let mut feats: Vec<[f64; 4]> = Vec::new();
    let mut y = Vec::new();
    for s in 0..m.n_students() {
        let others: Vec<f64> = m.row(s).into_iter().filter(|x| x.0 != c).map(|x| x.1).collect();
        if others.len() < 2 {
            continue;
        }
        let min = others.iter().copied().fold(f64::INFINITY, f64::min);
        let max = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        feats.push([stats::mean(&others), stats::sample_sd(&others), min, max]);
        y.push(if m.get(s, c).is_none() { 1.0 } else { 0.0 });
    }
    let n_missing = y.iter().filter(|&&v| v == 1.0).count();
    if n_missing == 0 || n_missing == y.len() {
        return Err(format!(
            "course '{id}' skipped: needs both missing and observed grades among eligible students"
        ));
    }
    // standardize, dropping constant features
    let mut kept = Vec::new();
    let mut centers = Vec::new();
    let mut scales = Vec::new();
    for j in 0..4 {
        let col: Vec<f64> = feats.iter().map(|f| f[j]).collect();
        let sd = stats::sample_sd(&col);
        if sd > 1e-12 {
            kept.push(j);
            centers.push(stats::mean(&col));
            scales.push(sd);
        }
    }
    let x = DMatrix::from_fn(feats.len(), kept.len() + 1, |i, k| {
        if k == 0 {
            1.0
        } else {
            (feats[i][kept[k - 1]] - centers[k - 1]) / scales[k - 1]
        }
    });
    let fit = logistic_regression(&x, &y, None, MAR_RIDGE);
    let mut coefficients = vec![None; 5];
    let mut p_values = vec![None; 4];
    let mut intercept = fit.coefficients[0];
    for (k, &j) in kept.iter().enumerate() {
        let b = fit.coefficients[k + 1] / scales[k];
        intercept -= b * centers[k];
        coefficients[j + 1] = Some(b);
        p_values[j] = Some(fit.p_values[k + 1]);
    }
    coefficients[0] = Some(intercept);
    let pseudo_r2 = if fit.null_log_likelihood < 0.0 {
        (1.0 - fit.log_likelihood / fit.null_log_likelihood).clamp(0.0, 1.0 - f64::EPSILON)
    } else {
        0.0
    };
    Ok(MarCourseResult {
        course_id: id.clone(),
        n_rows: y.len(),
        n_missing,
        coefficients,
        p_values,
        pseudo_r2,
        flagged: pseudo_r2 < PSEUDO_R2_FLAG,
        separation: fit.separation,
    })
}

/// Per-course logistic regression of the missing indicator on the student's
/// GPA, grade SD, minimum and maximum over their other courses.
pub fn mar_regression_test(m: &CourseResponseMatrix) -> Result<MarReport> {
    if m.n_courses() < 2 {
        return Err(Error::Invalid("at least two courses are needed".into()));
    }
    let outcomes: Vec<_> = (0..m.n_courses())
        .into_par_iter()
        .map(|c| mar_course(m, c))
        .collect();
    let mut courses = Vec::new();
    let mut notes = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => {
                if r.separation {
                    notes.push(format!("course '{}': separation in missingness regression", r.course_id));
                }
                courses.push(r);
            }
            Err(note) => notes.push(note),
        }
    }
    Ok(MarReport { courses, notes })
}

pub fn classify_missingness(little: &LittleResult, mar: &[MarCourseResult]) -> MissingnessVerdict {
    let caution_courses: Vec<String> = mar
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.course_id.clone())
        .collect();
    let mechanism = if little.p_value >= MCAR_ALPHA {
        Mechanism::Mcar
    } else {
        let unflagged = mar.len() - caution_courses.len();
        if 2 * unflagged > mar.len() {
            Mechanism::Mar
        } else {
            Mechanism::MnarSuspect
        }
    };
    MissingnessVerdict {
        mechanism,
        caution_courses,
    }
}
