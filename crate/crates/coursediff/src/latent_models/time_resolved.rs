//! Difficulty per course offering (course × term), with student-bootstrap
//! percentile intervals.

use super::{fit_model, unidim_difficulty, ConfidenceInterval, DifficultyEstimates, FitConfig, LatentModel, ModelClass};
use crate::error::{Error, Result};
use crate::grade_data::CourseResponseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeResolvedConfig {
    /// Offerings smaller than this are pooled into their course.
    pub min_offering_size: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for TimeResolvedConfig {
    fn default() -> Self {
        Self { min_offering_size: 75, bootstrap: 200, seed: 0, level: 0.95 }
    }
}

#[derive(Debug, Clone)]
pub struct TimeResolvedFit {
    pub estimates: DifficultyEstimates,
    pub model: LatentModel,
    pub warnings: Vec<String>,
}

struct Column {
    label: String,
    course: String,
    term: Option<i64>,
}

/// Splits each course into one column per large offering plus one pooled
/// column for the rest.
fn expand(m: &CourseResponseMatrix, min_size: usize) -> (CourseResponseMatrix, Vec<Column>) {
    let ns = m.n_students();
    let mut columns = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for c in 0..m.n_courses() {
        let id = &m.course_ids()[c];
        let mut per_term: BTreeMap<i64, usize> = BTreeMap::new();
        for (s, _) in m.column(c) {
            if let Some(t) = m.term(s, c) {
                *per_term.entry(t).or_default() += 1;
            }
        }
        let big: Vec<i64> = per_term.into_iter().filter(|&(_, n)| n >= min_size).map(|x| x.0).collect();
        for &t in &big {
            columns.push(Column { label: format!("{id}@{t}"), course: id.clone(), term: Some(t) });
            cells.push((0..ns).map(|s| if m.term(s, c) == Some(t) { m.get(s, c) } else { None }).collect());
        }
        let rest: Vec<Option<f64>> = (0..ns)
            .map(|s| match m.term(s, c) {
                Some(t) if big.contains(&t) => None,
                _ => m.get(s, c),
            })
            .collect();
        if rest.iter().any(Option::is_some) {
            columns.push(Column { label: id.clone(), course: id.clone(), term: None });
            cells.push(rest);
        }
    }
    let flat: Vec<Option<f64>> = (0..ns).flat_map(|s| cells.iter().map(move |col| col[s])).collect();
    let ids: Vec<String> = columns.iter().map(|c| c.label.clone()).collect();
    let x = CourseResponseMatrix::from_flat(m.student_ids().to_vec(), ids, flat, m.scale().clone())
        .expect("expanded matrix keeps the original scale and ids");
    (x, columns)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Drops empty columns, fits, and returns Δ per column label.
fn fit_difficulties(
    m: &CourseResponseMatrix,
    class: ModelClass,
    n_dim: usize,
    cfg: &FitConfig,
) -> Result<BTreeMap<String, f64>> {
    let keep: Vec<usize> = (0..m.n_courses()).filter(|&c| !m.column(c).is_empty()).collect();
    let all: Vec<usize> = (0..m.n_students()).collect();
    let sub = m.select(&all, &keep);
    let model = fit_model(&sub, class, n_dim, cfg)?;
    Ok(unidim_difficulty(&model)
        .entries
        .into_iter()
        .map(|e| (e.course_id, e.difficulty))
        .collect())
}

pub fn fit_time_resolved(
    m: &CourseResponseMatrix,
    class: ModelClass,
    n_dim: usize,
    fit: &FitConfig,
    cfg: &TimeResolvedConfig,
) -> Result<TimeResolvedFit> {
    if !m.has_terms() {
        return Err(Error::NotApplicable("no term information attached".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Invalid("confidence level must lie in (0, 1)".into()));
    }
    let mut warnings = Vec::new();
    let (x, columns) = expand(m, cfg.min_offering_size);
    if columns.iter().all(|c| c.term.is_none()) {
        warnings.push(format!(
            "no offering reaches {} students; difficulties are per course",
            cfg.min_offering_size
        ));
    }
    let model = fit_model(&x, class, n_dim, fit)?;
    let point = unidim_difficulty(&model);

    let ns = x.n_students();
    let reps: Vec<Option<BTreeMap<String, f64>>> = (0..cfg.bootstrap)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let picks: Vec<usize> = (0..ns).map(|_| rng.random_range(0..ns)).collect();
            let mut bx = x.resample_students(&picks);
            bx = bx.without_terms();
            fit_difficulties(&bx, class, n_dim, fit).ok()
        })
        .collect();
    let failed = reps.iter().filter(|r| r.is_none()).count();
    if failed > 0 {
        warnings.push(format!("{failed} of {} bootstrap fits failed and were skipped", cfg.bootstrap));
    }
    let tail = (1.0 - cfg.level) / 2.0;
    let mut entries = Vec::new();
    for mut e in point.entries {
        let col = columns.iter().find(|c| c.label == e.course_id).expect("label from expansion");
        let mut draws: Vec<f64> = reps.iter().flatten().filter_map(|r| r.get(&col.label).copied()).collect();
        if draws.len() >= 2 {
            draws.sort_by(f64::total_cmp);
            e.ci = Some(ConfidenceInterval {
                lower: percentile(&draws, tail).min(e.difficulty),
                upper: percentile(&draws, 1.0 - tail).max(e.difficulty),
                level: cfg.level,
            });
        }
        e.offering = col.term.map(|_| col.label.clone());
        e.term = col.term;
        e.course_id = col.course.clone();
        entries.push(e);
    }
    Ok(TimeResolvedFit {
        estimates: DifficultyEstimates { entries, undefined: point.undefined },
        model,
        warnings,
    })
}
