//! End-to-end run: scale handling, model-class choice, missingness and
//! imputation, dimensionality, BIC selection, checks, and report files.

use crate::assumption_checks::{
    concurrent_validity, residual_pca_check, split_half_correlation, yen_q3_with, Q3Report, ResidualPcaReport,
    SplitHalfReport, SplitMode, ValidityReport,
};
use crate::config;
use crate::dcf::{bh_correct, dcf_all, dcf_course, DcfConfig, DcfReport, DcfTest};
use crate::dimensionality::{dim_upper_bound, matrix_pve, DimensionBound, PveResult};
use crate::error::{Error, Result};
use crate::grade_data::{
    binarize, normalize_scale, percentile_transform, CourseResponseMatrix, GroupAssignment, ScaleKind,
};
use crate::imputation::{mean_impute, mipca_impute, MipcaConfig};
use crate::latent_models::{
    centering_estimates, fit_time_resolved, select_by_bic, unidim_difficulty, BicRow, Convergence, DifficultyEstimates,
    FitConfig, LatentModel, ModelClass, ModelDocument, TimeResolvedConfig,
};
use crate::missingness::{classify_missingness, little_mcar_test, mar_regression_test, LittleResult, MarReport, MissingnessVerdict};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// Ordinal scales need at least this many categories to be treated as continuous.
pub const MIN_CONTINUOUS_CATEGORIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassChoice {
    Auto,
    Irt,
    Agm,
}

impl FromStr for ClassChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(ClassChoice::Auto),
            "irt" => Ok(ClassChoice::Irt),
            "agm" => Ok(ClassChoice::Agm),
            other => Err(Error::Invalid(format!("unknown model class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model_class: ClassChoice,
    /// Percentile-transform ordinal/continuous grades before fitting.
    pub percentile: bool,
    pub variance_threshold: f64,
    /// Hard cap on the BIC scan, on top of the PCA bound.
    pub max_dim: usize,
    /// `None`: time split when terms are attached, random otherwise.
    pub split_mode: Option<SplitMode>,
    pub time_resolved: bool,
    pub bootstrap: usize,
    pub min_offering_size: usize,
    pub ci_level: f64,
    pub fit: FitConfig,
    pub mipca: MipcaConfig,
    pub q3_threshold: f64,
    pub q3_min_paired: usize,
    /// Share of course pairs violating Q3 above which the flag is hard.
    pub q3_hard_share: f64,
    pub agreement_threshold: f64,
    pub dcf: DcfConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_class: ClassChoice::Auto,
            percentile: false,
            variance_threshold: 0.5,
            max_dim: 4,
            split_mode: None,
            time_resolved: true,
            bootstrap: 200,
            min_offering_size: 75,
            ci_level: 0.95,
            fit: FitConfig::default(),
            mipca: MipcaConfig::default(),
            q3_threshold: crate::assumption_checks::Q3_THRESHOLD,
            q3_min_paired: crate::assumption_checks::Q3_MIN_PAIRED,
            q3_hard_share: 0.1,
            agreement_threshold: crate::assumption_checks::AGREEMENT_FLAG,
            dcf: DcfConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Invalid(format!("bad value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Invalid(format!("bad boolean '{v}' for '{key}'"))),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "model_class" => self.model_class = v.parse()?,
            "percentile" => self.percentile = parse_bool(key, v)?,
            "variance_threshold" => self.variance_threshold = parse(key, v)?,
            "max_dim" => self.max_dim = parse(key, v)?,
            "split_mode" => {
                self.split_mode = match v {
                    "auto" => None,
                    other => Some(other.parse()?),
                }
            }
            "time_resolved" => self.time_resolved = parse_bool(key, v)?,
            "bootstrap" => self.bootstrap = parse(key, v)?,
            "min_offering_size" => self.min_offering_size = parse(key, v)?,
            "ci_level" => self.ci_level = parse(key, v)?,
            "agm_tol" => self.fit.agm.tol = parse(key, v)?,
            "agm_max_sweeps" => self.fit.agm.max_sweeps = parse(key, v)?,
            "irt_max_iter" => self.fit.irt.max_iter = parse(key, v)?,
            "irt_grad_tol" => self.fit.irt.grad_tol = parse(key, v)?,
            "irt_rel_tol" => self.fit.irt.rel_tol = parse(key, v)?,
            "irt_ridge" => self.fit.irt.ridge = parse(key, v)?,
            "irt_nodes" => self.fit.irt.nodes_per_dim = Some(parse(key, v)?),
            "mipca_components" => self.mipca.n_components = Some(parse(key, v)?),
            "mipca_tol" => self.mipca.tol = parse(key, v)?,
            "mipca_max_iter" => self.mipca.max_iter = parse(key, v)?,
            "q3_threshold" => self.q3_threshold = parse(key, v)?,
            "q3_min_paired" => self.q3_min_paired = parse(key, v)?,
            "q3_hard_share" => self.q3_hard_share = parse(key, v)?,
            "agreement_threshold" => self.agreement_threshold = parse(key, v)?,
            "fdr_q" => self.dcf.q = parse(key, v)?,
            "dcf_min_group" => self.dcf.min_group_size = parse(key, v)?,
            "dcf_test" => self.dcf.test = v.parse::<DcfTest>()?,
            other => return Err(Error::Invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in config::key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&config::read(path)?)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Hard,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub check: String,
    pub severity: Severity,
    pub message: String,
}

/// The matrix the model is fitted on, and how it was derived.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub matrix: CourseResponseMatrix,
    pub class: ModelClass,
    pub notes: Vec<String>,
}

/// Orients the scale and applies the transformation the model class needs:
/// binary grades go to IRT, continuous grades and ordinal scales with at
/// least five categories go to the AGM, coarser ordinal scales must be
/// binarized at the pass threshold.
pub fn prepare(m: &CourseResponseMatrix, cfg: &PipelineConfig) -> Result<Prepared> {
    let mut notes = Vec::new();
    let canon = normalize_scale(m);
    let kind = canon.scale().kind;
    let categories = canon.distinct_values().len();
    let wants_irt = match cfg.model_class {
        ClassChoice::Irt => true,
        ClassChoice::Agm => false,
        ClassChoice::Auto => match kind {
            ScaleKind::Binary => true,
            ScaleKind::Continuous => false,
            ScaleKind::Ordinal => categories < MIN_CONTINUOUS_CATEGORIES,
        },
    };
    if wants_irt {
        if kind == ScaleKind::Binary {
            return Ok(Prepared { matrix: canon, class: ModelClass::Irt, notes });
        }
        let threshold = canon.scale().pass_threshold.ok_or_else(|| {
            Error::Invalid(format!(
                "{categories} grade categories are too few for continuous treatment \
                 (need {MIN_CONTINUOUS_CATEGORIES}); give a pass threshold to binarize for IRT"
            ))
        })?;
        let t = binarize(&canon, threshold)?;
        notes.push(format!("grades binarized at pass threshold {threshold}"));
        notes.extend(t.warnings);
        return Ok(Prepared { matrix: t.matrix, class: ModelClass::Irt, notes });
    }
    if kind == ScaleKind::Binary {
        notes.push("binary grades modelled as continuous by request".into());
    } else if kind == ScaleKind::Ordinal {
        notes.push(format!("ordinal scale with {categories} categories treated as continuous"));
    }
    let matrix = if cfg.percentile && kind != ScaleKind::Binary {
        let t = percentile_transform(&canon);
        notes.push("grades percentile-transformed".into());
        notes.extend(t.warnings);
        t.matrix
    } else {
        canon
    };
    Ok(Prepared { matrix, class: ModelClass::Agm, notes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub n_students: usize,
    pub n_courses: usize,
    pub observed: usize,
    pub missing_rate: f64,
    pub has_terms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSection {
    pub little: Option<LittleResult>,
    pub mar: Option<MarReport>,
    pub verdict: Option<MissingnessVerdict>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSection {
    pub method: String,
    pub n_components: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionalitySection {
    pub pve: PveResult,
    pub bound: DimensionBound,
    /// Dimensions actually scanned by BIC.
    pub scanned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTrait {
    pub student_id: String,
    pub score: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub input: InputSummary,
    pub preparation: Vec<String>,
    pub model_class: ModelClass,
    pub n_dim: usize,
    pub missingness: MissingnessSection,
    pub imputation: ImputationSection,
    pub dimensionality: DimensionalitySection,
    pub bic: Vec<BicRow>,
    pub convergence: Convergence,
    pub q3: Option<Q3Report>,
    pub split_half: Option<SplitHalfReport>,
    pub validity: Option<ValidityReport>,
    pub residual_pca: Option<ResidualPcaReport>,
    pub flags: Vec<Flag>,
    pub difficulty: DifficultyEstimates,
    pub centering_difficulty: DifficultyEstimates,
    pub time_resolved: Option<DifficultyEstimates>,
    pub traits: Vec<StudentTrait>,
    pub dcf: Option<DcfReport>,
}

impl PipelineReport {
    pub fn has_hard_flags(&self) -> bool {
        self.flags.iter().any(|f| f.severity == Severity::Hard)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub model: LatentModel,
    pub prepared: Prepared,
}

struct Flags(Vec<Flag>);

impl Flags {
    fn push(&mut self, check: &str, severity: Severity, message: impl Into<String>) {
        self.0.push(Flag { check: check.into(), severity, message: message.into() });
    }
}

pub fn run_method(
    m: &CourseResponseMatrix,
    groups: Option<&GroupAssignment>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut flags = Flags(Vec::new());
    let prepared = prepare(m, cfg).map_err(|e| e.at_stage("scale preparation"))?;
    for n in &prepared.notes {
        flags.push("preparation", Severity::Info, n.clone());
    }
    let x = &prepared.matrix;
    let class = prepared.class;
    let input = InputSummary {
        n_students: x.n_students(),
        n_courses: x.n_courses(),
        observed: x.observed_count(),
        missing_rate: x.missing_count() as f64 / (x.n_students() * x.n_courses()).max(1) as f64,
        has_terms: x.has_terms(),
    };
    if let Some(c) = (0..x.n_courses()).find(|&c| x.column(c).is_empty()) {
        return Err(Error::Invalid(format!("course '{}' has no grades", x.course_ids()[c])).at_stage("input"));
    }

    let missingness = missingness_stage(x, &mut flags);
    let (imputed, imputation) = imputation_stage(x, cfg, &mut flags).map_err(|e| e.at_stage("imputation"))?;

    let pve = matrix_pve(&imputed).map_err(|e| e.at_stage("dimensionality"))?;
    let bound = dim_upper_bound(&pve, cfg.variance_threshold);
    let cap = cfg.max_dim.max(1).min(x.n_courses().saturating_sub(1).max(1));
    let scanned = bound.upper_bound.min(cap);
    if bound.upper_bound > scanned {
        flags.push(
            "dimensionality",
            Severity::Info,
            format!("PCA bound {} capped at {scanned} dimensions", bound.upper_bound),
        );
    }

    let selection = select_by_bic(x, class, scanned, &cfg.fit).map_err(|e| e.at_stage("model fit"))?;
    let model = selection.chosen;
    if !model.convergence.converged {
        flags.push(
            "convergence",
            Severity::Hard,
            format!("{} {}-dim fit stopped after {} iterations", class, model.n_dim, model.convergence.iterations),
        );
    }
    for w in &model.warnings {
        flags.push("model fit", Severity::Warning, w.clone());
    }
    let centering = centering_estimates(x);

    let q3 = yen_q3_with(&model, x, cfg.q3_threshold, cfg.q3_min_paired)
        .map_err(|e| e.at_stage("local independence"))?;
    if !q3.violations.is_empty() {
        let share = q3.violations.len() as f64 / q3.n_pairs.max(1) as f64;
        let severity = if share > cfg.q3_hard_share { Severity::Hard } else { Severity::Warning };
        flags.push(
            "q3",
            severity,
            format!("{} of {} course pairs deviate from the mean Q3 by more than {}", q3.violations.len(), q3.n_pairs, cfg.q3_threshold),
        );
    }

    let mode = cfg.split_mode.unwrap_or(if x.has_terms() { SplitMode::Time } else { SplitMode::Random });
    let split = match split_half_correlation(x, class, model.n_dim, mode, cfg.seed, &cfg.fit) {
        Ok(mut r) => {
            r.flagged = r.student_corr < cfg.agreement_threshold || r.course_corr < cfg.agreement_threshold;
            if r.flagged {
                flags.push(
                    "split_half",
                    Severity::Hard,
                    format!(
                        "split-half correlations (students {:.3}, courses {:.3}) below {}",
                        r.student_corr, r.course_corr, cfg.agreement_threshold
                    ),
                );
            }
            Some(r)
        }
        Err(e) => {
            flags.push("split_half", Severity::Warning, format!("split-half check skipped: {e}"));
            None
        }
    };

    let validity = concurrent_validity(&model, x).map_err(|e| e.at_stage("validity"))?;
    let validity = ValidityReport {
        flagged: validity.course_r.abs() < cfg.agreement_threshold || validity.student_r.abs() < cfg.agreement_threshold,
        ..validity
    };
    if validity.flagged {
        flags.push(
            "validity",
            Severity::Hard,
            format!(
                "concurrent validity |r| (courses {:.3}, students {:.3}) below {}",
                validity.course_r, validity.student_r, cfg.agreement_threshold
            ),
        );
    }

    let residual = match residual_pca_check(&model, &imputed) {
        Ok(r) => {
            if r.flagged {
                flags.push(
                    "residual_pca",
                    Severity::Warning,
                    "first residual component explains more than the second data component",
                );
            }
            Some(r)
        }
        Err(e) => {
            flags.push("residual_pca", Severity::Warning, format!("residual PCA skipped: {e}"));
            None
        }
    };

    let time_resolved = if x.has_terms() && cfg.time_resolved {
        let tcfg = TimeResolvedConfig {
            min_offering_size: cfg.min_offering_size,
            bootstrap: cfg.bootstrap,
            seed: cfg.seed,
            level: cfg.ci_level,
        };
        match fit_time_resolved(x, class, model.n_dim, &cfg.fit, &tcfg) {
            Ok(t) => {
                for w in t.warnings {
                    flags.push("time_resolved", Severity::Info, w);
                }
                Some(t.estimates)
            }
            Err(e) => {
                flags.push("time_resolved", Severity::Warning, format!("time-resolved fit skipped: {e}"));
                None
            }
        }
    } else {
        None
    };

    let dcf = match groups {
        Some(g) => {
            let r = dcf_all(x, &model, g, &cfg.dcf).map_err(|e| e.at_stage("dcf"))?;
            for s in &r.skipped {
                flags.push("dcf", Severity::Info, s.reason.clone());
            }
            Some(r)
        }
        None => None,
    };

    let scores = model.trait_scores();
    let traits = model
        .student_ids
        .iter()
        .enumerate()
        .map(|(s, id)| StudentTrait {
            student_id: id.clone(),
            score: scores[s],
            theta: model.theta.row(s).iter().copied().collect(),
        })
        .collect();
    let difficulty = unidim_difficulty(&model);
    if !difficulty.undefined.is_empty() {
        flags.push(
            "difficulty",
            Severity::Warning,
            format!("no difficulty for courses with zero discrimination: {}", difficulty.undefined.join(", ")),
        );
    }
    flags.0.sort_by(|a, b| b.severity.cmp(&a.severity).then_with(|| a.check.cmp(&b.check)));

    let report = PipelineReport {
        config: cfg.clone(),
        input,
        preparation: prepared.notes.clone(),
        model_class: class,
        n_dim: model.n_dim,
        missingness,
        imputation,
        dimensionality: DimensionalitySection { pve, bound, scanned },
        bic: selection.table,
        convergence: model.convergence.clone(),
        q3: Some(q3),
        split_half: split,
        validity: Some(validity),
        residual_pca: residual,
        flags: flags.0,
        difficulty,
        centering_difficulty: unidim_difficulty(&centering),
        time_resolved,
        traits,
        dcf,
    };
    Ok(PipelineOutput { report, model, prepared })
}

fn missingness_stage(x: &CourseResponseMatrix, flags: &mut Flags) -> MissingnessSection {
    if x.is_complete() {
        return MissingnessSection { little: None, mar: None, verdict: None, note: Some("no missing grades".into()) };
    }
    let little = little_mcar_test(x);
    let mar = mar_regression_test(x);
    let (little, mar) = match (little, mar) {
        (Ok(l), Ok(m)) => (l, m),
        (l, m) => {
            let msg = [l.err(), m.err()].into_iter().flatten().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
            flags.push("missingness", Severity::Warning, format!("missingness tests skipped: {msg}"));
            return MissingnessSection { little: None, mar: None, verdict: None, note: Some(msg) };
        }
    };
    let verdict = classify_missingness(&little, &mar.courses);
    match verdict.mechanism {
        crate::missingness::Mechanism::Mcar => {}
        crate::missingness::Mechanism::Mar => flags.push(
            "missingness",
            Severity::Info,
            "missingness depends on observed grades (MAR); imputed before PCA",
        ),
        crate::missingness::Mechanism::MnarSuspect => flags.push(
            "missingness",
            Severity::Warning,
            "observed grades explain little of the missingness; estimates may be biased",
        ),
    }
    if !verdict.caution_courses.is_empty() {
        flags.push(
            "missingness",
            Severity::Info,
            format!("courses to read with caution: {}", verdict.caution_courses.join(", ")),
        );
    }
    MissingnessSection { little: Some(little), mar: Some(mar), verdict: Some(verdict), note: None }
}

fn imputation_stage(
    x: &CourseResponseMatrix,
    cfg: &PipelineConfig,
    flags: &mut Flags,
) -> Result<(CourseResponseMatrix, ImputationSection)> {
    if x.is_complete() {
        let section = ImputationSection { method: "none".into(), n_components: None, iterations: 0, converged: true };
        return Ok((x.clone(), section));
    }
    let mcfg = MipcaConfig { noise_seed: Some(cfg.seed), ..cfg.mipca.clone() };
    match mipca_impute(x, &mcfg) {
        Ok(r) => {
            if !r.converged {
                flags.push("imputation", Severity::Warning, format!("MIPCA stopped after {} iterations", r.iterations));
            }
            let section = ImputationSection {
                method: "mipca".into(),
                n_components: Some(r.n_components),
                iterations: r.iterations,
                converged: r.converged,
            };
            Ok((r.matrix, section))
        }
        Err(e) => {
            flags.push("imputation", Severity::Warning, format!("MIPCA failed ({e}); mean imputation used"));
            let section = ImputationSection { method: "mean".into(), n_components: None, iterations: 0, converged: true };
            Ok((mean_impute(x)?, section))
        }
    }
}

/// Assumption checks for an already fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub model_class: ModelClass,
    pub n_dim: usize,
    pub q3: Q3Report,
    pub split_half: Option<SplitHalfReport>,
    pub validity: ValidityReport,
    pub residual_pca: Option<ResidualPcaReport>,
    pub flags: Vec<Flag>,
}

impl CheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("check report serializes")
    }
}

pub fn check_model(m: &CourseResponseMatrix, model: &LatentModel, cfg: &PipelineConfig) -> Result<CheckReport> {
    let mut flags = Flags(Vec::new());
    let q3 = yen_q3_with(model, m, cfg.q3_threshold, cfg.q3_min_paired).map_err(|e| e.at_stage("local independence"))?;
    if !q3.violations.is_empty() {
        let share = q3.violations.len() as f64 / q3.n_pairs.max(1) as f64;
        let severity = if share > cfg.q3_hard_share { Severity::Hard } else { Severity::Warning };
        flags.push("q3", severity, format!("{} of {} course pairs violate local independence", q3.violations.len(), q3.n_pairs));
    }
    let mode = cfg.split_mode.unwrap_or(if m.has_terms() { SplitMode::Time } else { SplitMode::Random });
    let split = match split_half_correlation(m, model.class, model.n_dim, mode, cfg.seed, &cfg.fit) {
        Ok(mut r) => {
            r.flagged = r.student_corr < cfg.agreement_threshold || r.course_corr < cfg.agreement_threshold;
            if r.flagged {
                flags.push("split_half", Severity::Hard, format!("split-half correlations below {}", cfg.agreement_threshold));
            }
            Some(r)
        }
        Err(e) => {
            flags.push("split_half", Severity::Warning, format!("split-half check skipped: {e}"));
            None
        }
    };
    let validity = concurrent_validity(model, m).map_err(|e| e.at_stage("validity"))?;
    let validity = ValidityReport {
        flagged: validity.course_r.abs() < cfg.agreement_threshold || validity.student_r.abs() < cfg.agreement_threshold,
        ..validity
    };
    if validity.flagged {
        flags.push("validity", Severity::Hard, format!("concurrent validity below {}", cfg.agreement_threshold));
    }
    let (imputed, _) = imputation_stage(m, cfg, &mut flags).map_err(|e| e.at_stage("imputation"))?;
    let residual = match residual_pca_check(model, &imputed) {
        Ok(r) => {
            if r.flagged {
                flags.push("residual_pca", Severity::Warning, "first residual component explains more than the second data component");
            }
            Some(r)
        }
        Err(e) => {
            flags.push("residual_pca", Severity::Warning, format!("residual PCA skipped: {e}"));
            None
        }
    };
    flags.0.sort_by(|a, b| b.severity.cmp(&a.severity).then_with(|| a.check.cmp(&b.check)));
    Ok(CheckReport {
        model_class: model.class,
        n_dim: model.n_dim,
        q3,
        split_half: split,
        validity,
        residual_pca: residual,
        flags: flags.0,
    })
}

/// DCF against a stored model: one course, or every course with BH control.
pub fn dcf_entrypoint(
    m: &CourseResponseMatrix,
    model: &LatentModel,
    course: Option<&str>,
    groups: &GroupAssignment,
    cfg: &DcfConfig,
) -> Result<DcfReport> {
    match course {
        None => dcf_all(m, model, groups, cfg),
        Some(id) => {
            let mut r = dcf_course(m, model, id, groups, cfg)?;
            let bh = bh_correct(&[r.p_raw], cfg.q)?;
            r.p_bh_adjusted = Some(bh.adjusted[0]);
            r.significant = Some(bh.reject[0]);
            Ok(DcfReport { q: cfg.q, results: vec![r], skipped: vec![], notes: vec![] })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub course_id: String,
    pub offering: Option<String>,
    pub term: Option<i64>,
    pub difficulty: f64,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

impl DifficultyRow {
    fn rows(est: &DifficultyEstimates) -> Vec<Self> {
        est.entries
            .iter()
            .map(|e| DifficultyRow {
                course_id: e.course_id.clone(),
                offering: e.offering.clone(),
                term: e.term,
                difficulty: e.difficulty,
                ci_lower: e.ci.map(|c| c.lower),
                ci_upper: e.ci.map(|c| c.upper),
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct TraitRow<'a> {
    student_id: &'a str,
    score: f64,
    theta: String,
}

#[derive(Debug, Serialize)]
struct AssumptionRow {
    group: &'static str,
    measure: String,
    value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcfRow {
    pub course: String,
    pub n_group_minus: usize,
    pub n_group_plus: usize,
    pub dcf: f64,
    pub p_raw: f64,
    pub p_bh: Option<f64>,
    pub significant: Option<bool>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_difficulty_table(path: impl AsRef<Path>) -> Result<Vec<DifficultyRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse { row: i + 2, column: String::new(), message: e.to_string() })
        })
        .collect()
}

pub fn dcf_rows(report: &DcfReport) -> Vec<DcfRow> {
    report
        .results
        .iter()
        .map(|r| DcfRow {
            course: r.course_id.clone(),
            n_group_minus: r.group_sizes.0,
            n_group_plus: r.group_sizes.1,
            dcf: r.beta1,
            p_raw: r.p_raw,
            p_bh: r.p_bh_adjusted,
            significant: r.significant,
        })
        .collect()
}

fn assumption_rows(r: &PipelineReport) -> Vec<AssumptionRow> {
    let row = |group, measure: &str, value: String| AssumptionRow { group, measure: measure.into(), value };
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows = vec![
        row("dimensionality", "pve_1", opt(r.dimensionality.pve.pve.first().copied())),
        row("dimensionality", "pve_2", opt(r.dimensionality.pve.pve.get(1).copied())),
        row("dimensionality", "upper_bound", r.dimensionality.bound.upper_bound.to_string()),
        row("dimensionality", "bic_choice", format!("{} {}-dim", r.model_class, r.n_dim)),
    ];
    if let Some(q3) = &r.q3 {
        rows.push(row("local_independence", "q3_violations", format!("{}/{}", q3.violations.len(), q3.n_pairs)));
        rows.push(row("local_independence", "mean_q3", q3.mean_q3.to_string()));
    }
    if let Some(s) = &r.split_half {
        let mode = match s.mode {
            SplitMode::Random => "random",
            SplitMode::Time => "time",
        };
        rows.push(row("reliability", &format!("split_half_{mode}_students"), s.student_corr.to_string()));
        rows.push(row("reliability", &format!("split_half_{mode}_courses"), s.course_corr.to_string()));
    }
    if let Some(v) = &r.validity {
        rows.push(row("validity", "courses", v.course_r.to_string()));
        rows.push(row("validity", "students", v.student_r.to_string()));
    }
    if let Some(p) = &r.residual_pca {
        rows.push(row(
            "dimensionality",
            "residual_pve_1",
            opt(p.residual_pve.as_ref().and_then(|v| v.first().copied())),
        ));
    }
    rows
}

/// Writes report.json, model.json and the CSV tables into `out_dir`.
pub fn emit_report(out: &PipelineOutput, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let report = &out.report;
    let p = dir.join("report.json");
    fs::write(&p, report.to_json()).map_err(io_err(&p))?;
    ModelDocument::from(&out.model).save(dir.join("model.json"))?;
    write_csv(&dir.join("difficulty.csv"), &DifficultyRow::rows(&report.difficulty))?;
    write_csv(&dir.join("centering_difficulty.csv"), &DifficultyRow::rows(&report.centering_difficulty))?;
    let traits: Vec<TraitRow> = report
        .traits
        .iter()
        .map(|t| TraitRow {
            student_id: &t.student_id,
            score: t.score,
            theta: t.theta.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        })
        .collect();
    write_csv(&dir.join("traits.csv"), &traits)?;
    write_csv(&dir.join("assumptions.csv"), &assumption_rows(report))?;
    write_csv(&dir.join("flags.csv"), &report.flags)?;
    if let Some(t) = &report.time_resolved {
        write_csv(&dir.join("difficulty_over_time.csv"), &DifficultyRow::rows(t))?;
    }
    if let Some(d) = &report.dcf {
        write_csv(&dir.join("dcf.csv"), &dcf_rows(d))?;
    }
    Ok(())
}

pub fn emit_dcf(report: &DcfReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("dcf.json");
    fs::write(&p, serde_json::to_string_pretty(report).expect("DCF report serializes")).map_err(io_err(&p))?;
    write_csv(&dir.join("dcf.csv"), &dcf_rows(report))
}
