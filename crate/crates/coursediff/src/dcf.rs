//! Differential course functioning: per-course second-stage regressions of
//! outcomes on a two-level group indicator, controlling for fitted traits,
//! with Benjamini–Hochberg control across courses.

use crate::error::{Error, Result};
use crate::grade_data::{CourseResponseMatrix, GroupAssignment, ScaleKind};
use crate::latent_models::{LatentModel, ModelClass};
use crate::stats;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcfTest {
    Wald,
    LikelihoodRatio,
}

impl FromStr for DcfTest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "wald" => Ok(DcfTest::Wald),
            "lr" | "likelihood_ratio" => Ok(DcfTest::LikelihoodRatio),
            other => Err(Error::Invalid(format!("unknown DCF test '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcfConfig {
    /// Target false discovery rate.
    pub q: f64,
    pub min_group_size: usize,
    pub test: DcfTest,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self { q: 0.05, min_group_size: 10, test: DcfTest::Wald }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcfResult {
    pub course_id: String,
    pub beta0: f64,
    /// Group coefficient. Negative: group −1 finds the course easier.
    pub beta1: f64,
    /// Trait coefficients; all 1 (fixed offset) in one dimension.
    pub beta2: Vec<f64>,
    pub std_error: f64,
    pub p_raw: f64,
    /// Filled in by `dcf_all`.
    pub p_bh_adjusted: Option<f64>,
    pub significant: Option<bool>,
    /// (group −1, group +1) students with a grade in the course.
    pub group_sizes: (usize, usize),
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCourse {
    pub course_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcfReport {
    pub q: f64,
    /// Sorted by |β₁|, largest first.
    pub results: Vec<DcfResult>,
    pub skipped: Vec<SkippedCourse>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BhOutcome {
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Benjamini–Hochberg step-up adjustment.
pub fn bh_correct(p_values: &[f64], q: f64) -> Result<BhOutcome> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    let reject = adjusted.iter().map(|&a| a <= q).collect();
    Ok(BhOutcome { adjusted, reject })
}

enum Outcome {
    Logistic,
    Linear,
}

/// Per-course regression. One-dimensional models enter the trait part
/// ⟨α_c, θ_s⟩ as an offset; in more dimensions θ_s enters with free
/// coefficients.
pub fn dcf_course(
    m: &CourseResponseMatrix,
    model: &LatentModel,
    course_id: &str,
    groups: &GroupAssignment,
    cfg: &DcfConfig,
) -> Result<DcfResult> {
    let ctx = Context::new(m, model)?;
    ctx.course(course_id, groups, cfg)
}

struct Context<'a> {
    m: &'a CourseResponseMatrix,
    model: &'a LatentModel,
    student_rows: HashMap<&'a str, usize>,
    outcome: Outcome,
}

impl<'a> Context<'a> {
    fn new(m: &'a CourseResponseMatrix, model: &'a LatentModel) -> Result<Self> {
        let outcome = match model.class {
            ModelClass::Irt => {
                if m.scale().kind != ScaleKind::Binary {
                    return Err(Error::Invalid("an IRT model needs pass/fail grades for DCF".into()));
                }
                Outcome::Logistic
            }
            _ => Outcome::Linear,
        };
        let student_rows = model.student_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        Ok(Self { m, model, student_rows, outcome })
    }

    fn course(&self, course_id: &str, groups: &GroupAssignment, cfg: &DcfConfig) -> Result<DcfResult> {
        let c = self.m.course_index(course_id)?;
        let mc = self
            .model
            .course_ids
            .iter()
            .position(|x| x == course_id)
            .ok_or_else(|| Error::Lookup(format!("course '{course_id}' is not in the fitted model")))?;
        let n_dim = self.model.n_dim;
        let mut y = Vec::new();
        let mut g = Vec::new();
        let mut traits: Vec<Vec<f64>> = Vec::new();
        for (s, grade) in self.m.column(c) {
            let id = self.m.student_ids()[s].as_str();
            let (Some(group), Some(&row)) = (groups.get(id), self.student_rows.get(id)) else {
                continue;
            };
            y.push(match self.outcome {
                Outcome::Logistic => f64::from(u8::from(grade >= 0.5)),
                Outcome::Linear => grade,
            });
            g.push(group.code());
            traits.push((0..n_dim).map(|k| self.model.theta[(row, k)]).collect());
        }
        let n_minus = g.iter().filter(|&&x| x < 0.0).count();
        let sizes = (n_minus, g.len() - n_minus);
        if sizes.0 < cfg.min_group_size || sizes.1 < cfg.min_group_size {
            return Err(Error::NotApplicable(format!(
                "course '{course_id}' has {} / {} graded students in groups -1 / +1, fewer than {}",
                sizes.0, sizes.1, cfg.min_group_size
            )));
        }

        let n = y.len();
        let free = n_dim > 1;
        let p = if free { 2 + n_dim } else { 2 };
        let x = DMatrix::from_fn(n, p, |i, j| match j {
            0 => 1.0,
            1 => g[i],
            k => traits[i][k - 2],
        });
        let offset: Option<Vec<f64>> = (!free).then(|| {
            let a = match self.model.class {
                ModelClass::Centering => 1.0,
                _ => self.model.alpha[(mc, 0)],
            };
            traits.iter().map(|t| a * t[0]).collect()
        });
        let mut warnings = Vec::new();
        let fit = match self.outcome {
            Outcome::Logistic => {
                let mut ridge = 1e-8;
                for (grp, label) in [(-1.0, "-1"), (1.0, "+1")] {
                    let ys: Vec<f64> = y.iter().zip(&g).filter(|x| *x.1 == grp).map(|x| *x.0).collect();
                    if ys.iter().all(|&v| v == ys[0]) {
                        warnings.push(format!("group {label} has identical outcomes in '{course_id}'; ridge-stabilized fit"));
                        ridge = 0.1;
                    }
                }
                logistic(&x, &y, offset.as_deref(), ridge, cfg.test, &mut warnings)
            }
            Outcome::Linear => linear(&x, &y, offset.as_deref(), cfg.test)?,
        };
        Ok(DcfResult {
            course_id: course_id.to_string(),
            beta0: fit.coefficients[0],
            beta1: fit.coefficients[1],
            beta2: if free { fit.coefficients[2..].to_vec() } else { vec![1.0] },
            std_error: fit.std_error,
            p_raw: fit.p,
            p_bh_adjusted: None,
            significant: None,
            group_sizes: sizes,
            warnings,
        })
    }
}

struct Fitted {
    coefficients: Vec<f64>,
    std_error: f64,
    p: f64,
}

fn drop_group(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().remove_column(1)
}

fn logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    ridge: f64,
    test: DcfTest,
    warnings: &mut Vec<String>,
) -> Fitted {
    let full = stats::logistic_regression(x, y, offset, ridge);
    if full.separation {
        warnings.push("linear predictor diverges; estimates are ridge-limited".into());
    }
    if !full.converged {
        warnings.push("logistic fit did not converge".into());
    }
    let p = match test {
        DcfTest::Wald => full.p_values[1],
        DcfTest::LikelihoodRatio => {
            let reduced = stats::logistic_regression(&drop_group(x), y, offset, ridge);
            stats::chi_squared_sf((2.0 * (full.log_likelihood - reduced.log_likelihood)).max(0.0), 1.0)
        }
    };
    Fitted { std_error: full.std_errors[1], coefficients: full.coefficients, p }
}

fn linear(x: &DMatrix<f64>, y: &[f64], offset: Option<&[f64]>, test: DcfTest) -> Result<Fitted> {
    let target: Vec<f64> = match offset {
        Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
        None => y.to_vec(),
    };
    let singular = || Error::Numerical("DCF design matrix is singular".into());
    let full = stats::ols(x, &target).ok_or_else(singular)?;
    let p = match test {
        DcfTest::Wald => full.p_values[1],
        DcfTest::LikelihoodRatio => {
            let n = x.nrows() as f64;
            let rss = |f: &stats::OlsFit, k: usize| f.residual_variance * (n - k as f64);
            let reduced = stats::ols(&drop_group(x), &target).ok_or_else(singular)?;
            let ratio = rss(&reduced, x.ncols() - 1) / rss(&full, x.ncols());
            if ratio.is_finite() {
                stats::chi_squared_sf((n * ratio.ln()).max(0.0), 1.0)
            } else {
                full.p_values[1]
            }
        }
    };
    Ok(Fitted { std_error: full.std_errors[1], coefficients: full.coefficients, p })
}

/// DCF for every course with enough students per group, BH-adjusted.
pub fn dcf_all(
    m: &CourseResponseMatrix,
    model: &LatentModel,
    groups: &GroupAssignment,
    cfg: &DcfConfig,
) -> Result<DcfReport> {
    let ctx = Context::new(m, model)?;
    let outcomes: Vec<(String, Result<DcfResult>)> = m
        .course_ids()
        .par_iter()
        .map(|id| (id.clone(), ctx.course(id, groups, cfg)))
        .collect();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in outcomes {
        match r {
            Ok(r) => results.push(r),
            Err(e @ (Error::NotApplicable(_) | Error::Numerical(_))) => {
                skipped.push(SkippedCourse { course_id: id, reason: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    let mut notes = Vec::new();
    if results.is_empty() {
        notes.push("no course has enough students in both groups".into());
    }
    let p: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
    let bh = bh_correct(&p, cfg.q)?;
    for (r, (adj, rej)) in results.iter_mut().zip(bh.adjusted.into_iter().zip(bh.reject)) {
        r.p_bh_adjusted = Some(adj);
        r.significant = Some(rej);
    }
    results.sort_by(|a, b| b.beta1.abs().total_cmp(&a.beta1.abs()).then_with(|| a.course_id.cmp(&b.course_id)));
    Ok(DcfReport { q: cfg.q, results, skipped, notes })
}
