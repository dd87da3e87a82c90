//! Post-fit checks: Yen's Q3 local independence, split-half stability,
//! concurrent validity, and PCA of model residuals.

use crate::correlation::correlation_matrix;
use crate::dimensionality::pve_of;
use crate::error::{Error, Result};
use crate::grade_data::CourseResponseMatrix;
use crate::latent_models::{fit_model, unidim_difficulty, FitConfig, LatentModel, ModelClass};
use crate::stats;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

pub const Q3_THRESHOLD: f64 = 0.2;
pub const Q3_MIN_PAIRED: usize = 10;
pub const AGREEMENT_FLAG: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Q3Violation {
    pub course_a: String,
    pub course_b: String,
    pub q3: f64,
    /// q3 − mean Q3; positive means residual dependence beyond the average.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Q3Report {
    pub course_ids: Vec<String>,
    /// Symmetric; `None` on the diagonal and for pairs with too little overlap.
    pub q3: Vec<Vec<Option<f64>>>,
    pub mean_q3: f64,
    pub n_pairs: usize,
    pub n_undefined: usize,
    pub violations: Vec<Q3Violation>,
}

fn check_alignment(model: &LatentModel, m: &CourseResponseMatrix) -> Result<()> {
    if model.student_ids != m.student_ids() || model.course_ids != m.course_ids() {
        return Err(Error::Invalid("model and matrix have different students or courses".into()));
    }
    Ok(())
}

/// Residual (observed − model-implied) per cell.
fn residuals(model: &LatentModel, m: &CourseResponseMatrix) -> Vec<Option<f64>> {
    let nc = m.n_courses();
    (0..m.n_students() * nc)
        .map(|i| m.get(i / nc, i % nc).map(|g| g - model.expected(i / nc, i % nc)))
        .collect()
}

/// Pairwise Pearson correlation of residuals. A pair counts as a violation
/// when its Q3 differs from the mean Q3 by more than 0.2 in either direction.
pub fn yen_q3(model: &LatentModel, m: &CourseResponseMatrix) -> Result<Q3Report> {
    yen_q3_with(model, m, Q3_THRESHOLD, Q3_MIN_PAIRED)
}

pub fn yen_q3_with(model: &LatentModel, m: &CourseResponseMatrix, threshold: f64, min_paired: usize) -> Result<Q3Report> {
    check_alignment(model, m)?;
    let nc = m.n_courses();
    let ns = m.n_students();
    let r = residuals(model, m);
    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|i| (i + 1..nc).map(move |j| (i, j))).collect();
    let values: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..ns)
                .filter_map(|s| Some((r[s * nc + i]?, r[s * nc + j]?)))
                .unzip();
            if a.len() < min_paired.max(2) {
                None
            } else {
                stats::pearson(&a, &b)
            }
        })
        .collect();
    let mut q3 = vec![vec![None; nc]; nc];
    for (&(i, j), v) in pairs.iter().zip(&values) {
        q3[i][j] = *v;
        q3[j][i] = *v;
    }
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let mean_q3 = if defined.is_empty() { 0.0 } else { stats::mean(&defined) };
    let violations = pairs
        .iter()
        .zip(&values)
        .filter_map(|(&(i, j), v)| {
            let v = (*v)?;
            ((v - mean_q3).abs() > threshold).then(|| Q3Violation {
                course_a: m.course_ids()[i].clone(),
                course_b: m.course_ids()[j].clone(),
                q3: v,
                deviation: v - mean_q3,
            })
        })
        .collect();
    Ok(Q3Report {
        course_ids: m.course_ids().to_vec(),
        q3,
        mean_q3,
        n_pairs: defined.len(),
        n_undefined: values.len() - defined.len(),
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    Time,
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(SplitMode::Random),
            "time" => Ok(SplitMode::Time),
            other => Err(Error::Invalid(format!("unknown split mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitHalves {
    pub first: CourseResponseMatrix,
    pub second: CourseResponseMatrix,
    /// Students with fewer than two grades, left out of both halves.
    pub excluded: Vec<String>,
}

/// Splits every student's observed grades into two halves: chronologically
/// (ties by course id) or by a seeded shuffle. Odd counts favour the first.
pub fn split_half(m: &CourseResponseMatrix, mode: SplitMode, seed: u64) -> Result<SplitHalves> {
    if mode == SplitMode::Time && !m.has_terms() {
        return Err(Error::NotApplicable("time split needs term information".into()));
    }
    let nc = m.n_courses();
    let mut first = vec![None; m.n_students() * nc];
    let mut second = first.clone();
    let mut excluded = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..m.n_students() {
        let mut cells: Vec<usize> = m.row(s).into_iter().map(|x| x.0).collect();
        if cells.len() < 2 {
            excluded.push(m.student_ids()[s].clone());
            continue;
        }
        match mode {
            SplitMode::Time => cells.sort_by(|&a, &b| {
                let ta = m.term(s, a).unwrap_or(i64::MAX);
                let tb = m.term(s, b).unwrap_or(i64::MAX);
                ta.cmp(&tb).then_with(|| m.course_ids()[a].cmp(&m.course_ids()[b]))
            }),
            SplitMode::Random => cells.shuffle(&mut rng),
        }
        let cut = cells.len().div_ceil(2);
        for (k, &c) in cells.iter().enumerate() {
            let target = if k < cut { &mut first } else { &mut second };
            target[s * nc + c] = m.get(s, c);
        }
    }
    Ok(SplitHalves {
        first: m.with_grades(first)?,
        second: m.with_grades(second)?,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHalfReport {
    pub mode: SplitMode,
    pub student_corr: f64,
    pub course_corr: f64,
    pub n_students: usize,
    pub n_courses: usize,
    /// Either correlation below 0.6.
    pub flagged: bool,
    pub notes: Vec<String>,
}

/// Drops students and courses without grades.
fn trim(m: &CourseResponseMatrix) -> CourseResponseMatrix {
    let s: Vec<usize> = (0..m.n_students()).filter(|&s| !m.row(s).is_empty()).collect();
    let c: Vec<usize> = (0..m.n_courses()).filter(|&c| !m.column(c).is_empty()).collect();
    m.select(&s, &c)
}

fn scores_by_id(model: &LatentModel) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let students = model.student_ids.iter().cloned().zip(model.trait_scores()).collect();
    let courses = unidim_difficulty(model)
        .entries
        .into_iter()
        .map(|e| (e.course_id, e.difficulty))
        .collect();
    (students, courses)
}

fn paired_r(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> (f64, usize) {
    let (x, y): (Vec<f64>, Vec<f64>) = a.iter().filter_map(|(k, v)| Some((*v, *b.get(k)?))).unzip();
    (stats::pearson(&x, &y).unwrap_or(0.0), x.len())
}

/// Fits one model per half and correlates student trait scores and course
/// difficulties across halves.
pub fn split_half_correlation(
    m: &CourseResponseMatrix,
    class: ModelClass,
    n_dim: usize,
    mode: SplitMode,
    seed: u64,
    cfg: &FitConfig,
) -> Result<SplitHalfReport> {
    let halves = split_half(m, mode, seed)?;
    let mut notes = Vec::new();
    if !halves.excluded.is_empty() {
        notes.push(format!("{} students with fewer than two grades excluded", halves.excluded.len()));
    }
    let (a, b) = (trim(&halves.first), trim(&halves.second));
    let (fa, fb) = rayon::join(|| fit_model(&a, class, n_dim, cfg), || fit_model(&b, class, n_dim, cfg));
    let (fa, fb) = (fa?, fb?);
    let (sa, ca) = scores_by_id(&fa);
    let (sb, cb) = scores_by_id(&fb);
    let (student_corr, n_students) = paired_r(&sa, &sb);
    let (course_corr, n_courses) = paired_r(&ca, &cb);
    let dropped = m.n_courses() - n_courses;
    if dropped > 0 {
        notes.push(format!("{dropped} courses missing from one half were dropped"));
    }
    Ok(SplitHalfReport {
        mode,
        student_corr,
        course_corr,
        n_students,
        n_courses,
        flagged: student_corr < AGREEMENT_FLAG || course_corr < AGREEMENT_FLAG,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Pearson r of Δ_c with the course mean grade.
    pub course_r: f64,
    /// Pearson r of the trait score with GPA.
    pub student_r: f64,
    /// Either |r| below 0.6.
    pub flagged: bool,
}

pub fn concurrent_validity(model: &LatentModel, m: &CourseResponseMatrix) -> Result<ValidityReport> {
    check_alignment(model, m)?;
    let mean_of = |v: Vec<(usize, f64)>| stats::mean(&v.into_iter().map(|x| x.1).collect::<Vec<_>>());
    let diff = unidim_difficulty(model);
    let (d, means): (Vec<f64>, Vec<f64>) = diff
        .entries
        .iter()
        .filter_map(|e| {
            let col = m.column(m.course_index(&e.course_id).ok()?);
            (!col.is_empty()).then(|| (e.difficulty, mean_of(col)))
        })
        .unzip();
    let traits = model.trait_scores();
    let (t, gpa): (Vec<f64>, Vec<f64>) = (0..m.n_students())
        .filter_map(|s| {
            let row = m.row(s);
            (!row.is_empty()).then(|| (traits[s], mean_of(row)))
        })
        .unzip();
    let course_r = stats::pearson(&d, &means).unwrap_or(0.0);
    let student_r = stats::pearson(&t, &gpa).unwrap_or(0.0);
    Ok(ValidityReport {
        course_r,
        student_r,
        flagged: course_r.abs() < AGREEMENT_FLAG || student_r.abs() < AGREEMENT_FLAG,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPcaReport {
    pub data_pve: Vec<f64>,
    /// `None` when the residuals carry no variance to decompose.
    pub residual_pve: Option<Vec<f64>>,
    /// 1 / C, the level of structureless residuals.
    pub uniform_level: f64,
    /// Residual first PVE above the data's second PVE.
    pub flagged: bool,
    pub note: Option<String>,
}

/// PCA of the residual matrix of a complete (imputed) dataset, side by side
/// with the PCA of the data itself.
pub fn residual_pca_check(model: &LatentModel, m: &CourseResponseMatrix) -> Result<ResidualPcaReport> {
    check_alignment(model, m)?;
    if !m.is_complete() {
        return Err(Error::Invalid("residual PCA needs a complete (imputed) matrix".into()));
    }
    let data_pve = pve_of(&correlation_matrix(m)?.values)?.pve;
    let ns = m.n_students();
    let nc = m.n_courses();
    let r: Vec<f64> = residuals(model, m).into_iter().map(|x| x.unwrap_or(0.0)).collect();
    let columns: Vec<Vec<f64>> = (0..nc).map(|c| (0..ns).map(|s| r[s * nc + c]).collect()).collect();
    let varying: Vec<usize> = (0..nc).filter(|&c| stats::sample_sd(&columns[c]) > 1e-9).collect();
    let uniform_level = 1.0 / nc as f64;
    if varying.len() < 2 {
        return Ok(ResidualPcaReport {
            data_pve,
            residual_pve: None,
            uniform_level,
            flagged: false,
            note: Some("no residual structure".into()),
        });
    }
    let k = varying.len();
    let mut corr = DMatrix::identity(k, k);
    for a in 0..k {
        for b in a + 1..k {
            let v = stats::pearson(&columns[varying[a]], &columns[varying[b]]).unwrap_or(0.0);
            corr[(a, b)] = v;
            corr[(b, a)] = v;
        }
    }
    let residual_pve = pve_of(&corr)?.pve;
    let second = data_pve.get(1).copied().unwrap_or(0.0);
    let note = (k < nc).then(|| format!("{} courses with constant residuals left out", nc - k));
    Ok(ResidualPcaReport {
        flagged: residual_pve[0] > second,
        data_pve,
        residual_pve: Some(residual_pve),
        uniform_level,
        note,
    })
}
