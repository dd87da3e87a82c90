use clap::{Args, Parser, Subcommand};
use coursediff::config;
use coursediff::grade_data::{
    load_groups, load_matrix, load_terms, write_matrix, write_terms, CourseResponseMatrix, Direction, GradeScaleSpec,
    ScaleKind,
};
use coursediff::latent_models::{LatentModel, ModelClass, ModelDocument};
use coursediff::pipeline::{
    check_model, dcf_entrypoint, emit_dcf, emit_report, prepare, run_method, ClassChoice, PipelineConfig, Severity,
};
use coursediff::simulation::{generate_scenario, ScenarioConfig};
use coursediff::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Ordinal scales have at most this many distinct grades when the kind is inferred.
const MAX_ORDINAL_CATEGORIES: usize = 15;

#[derive(Parser)]
#[command(name = "coursediff", version, about = "Course difficulty and student trait estimation from grade matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: checks, model selection, estimates, report files.
    Run {
        #[command(flatten)]
        data: DataArgs,
        /// Student,group file (groups -1 / 1) for a DCF table.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        /// Exit with status 2 when the model fit does not converge.
        #[arg(long)]
        strict: bool,
    },
    /// Differential course functioning against a stored model.
    Dcf {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        /// Single course; all courses with BH control when omitted.
        #[arg(long)]
        course: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a synthetic dataset from a scenario file.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Assumption checks on an existing model.
    Check {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Grade table: header of course ids, first column student ids.
    #[arg(long)]
    data: PathBuf,
    /// Term table with the same layout as the grade table.
    #[arg(long)]
    terms: Option<PathBuf>,
    /// Worst possible grade; defaults to the worst observed grade.
    #[arg(long)]
    lowest_grade: Option<f64>,
    #[arg(long, default_value = "ascending")]
    direction: Direction,
    /// binary, ordinal, continuous, or auto.
    #[arg(long, default_value = "auto")]
    kind: String,
    #[arg(long)]
    pass_threshold: Option<f64>,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl CommonArgs {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = config::split_override(o)?;
            cfg.set(&k, &v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn infer_kind(m: &CourseResponseMatrix) -> ScaleKind {
    let values = m.distinct_values();
    if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        ScaleKind::Binary
    } else if values.len() <= MAX_ORDINAL_CATEGORIES {
        ScaleKind::Ordinal
    } else {
        ScaleKind::Continuous
    }
}

fn load_data(args: &DataArgs) -> Result<CourseResponseMatrix> {
    let loose = GradeScaleSpec::new(f64::NEG_INFINITY, Direction::Ascending, ScaleKind::Continuous);
    let raw = load_matrix(&args.data, loose)?;
    let values = raw.distinct_values();
    let (lo, hi) = match (values.first(), values.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::Invalid("grade table has no observed grades".into())),
    };
    let kind = match args.kind.as_str() {
        "auto" => infer_kind(&raw),
        k => k.parse()?,
    };
    let lowest = args.lowest_grade.unwrap_or(match args.direction {
        Direction::Ascending => lo,
        Direction::Descending => hi,
    });
    let mut spec = GradeScaleSpec::new(lowest, args.direction, kind);
    if let Some(t) = args.pass_threshold {
        spec = spec.with_pass_threshold(t);
    }
    let m = raw.with_scale(spec)?;
    match &args.terms {
        Some(t) => load_terms(t, m),
        None => Ok(m),
    }
}

fn load_model(path: &Path) -> Result<LatentModel> {
    ModelDocument::load(path)?.into_model()
}

/// Prepares the data the way `run` did for a stored model of this class.
fn prepared_for(m: &CourseResponseMatrix, model: &LatentModel, cfg: &PipelineConfig) -> Result<CourseResponseMatrix> {
    let cfg = PipelineConfig {
        model_class: match model.class {
            ModelClass::Irt => ClassChoice::Irt,
            _ => ClassChoice::Agm,
        },
        ..cfg.clone()
    };
    Ok(prepare(m, &cfg)?.matrix)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn simulate(config: Option<&Path>, overrides: &[String], seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = ScenarioConfig::default();
    if let Some(p) = config {
        cfg.apply_text(&config::read(p)?)?;
    }
    for o in overrides {
        let (k, v) = config::split_override(o)?;
        cfg.set(&k, &v)?;
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let g = generate_scenario(&cfg)?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.display().to_string(), source })?;
    write_matrix(&g.matrix, out.join("grades.csv"))?;
    if g.matrix.has_terms() {
        write_terms(&g.matrix, out.join("terms.csv"))?;
    }
    let n = g.truth.theta.ncols();
    let mut students = String::from("student_id");
    for k in 0..n {
        write!(students, ",theta_{}", k + 1).unwrap();
    }
    students.push('\n');
    for (s, id) in g.matrix.student_ids().iter().enumerate() {
        students.push_str(id);
        for k in 0..n {
            write!(students, ",{}", g.truth.theta[(s, k)]).unwrap();
        }
        students.push('\n');
    }
    write_text(&out.join("truth_students.csv"), &students)?;
    let mut courses = String::from("course_id,difficulty");
    for k in 0..n {
        write!(courses, ",delta_{0},alpha_{0}", k + 1).unwrap();
    }
    courses.push('\n');
    let difficulty = g.truth.difficulty();
    for (c, id) in g.matrix.course_ids().iter().enumerate() {
        write!(courses, "{id},{}", difficulty[c]).unwrap();
        for k in 0..n {
            write!(courses, ",{},{}", g.truth.delta[(c, k)], g.truth.alpha[(c, k)]).unwrap();
        }
        courses.push('\n');
    }
    write_text(&out.join("truth_courses.csv"), &courses)?;
    println!(
        "wrote {} students x {} courses to {}{}",
        g.matrix.n_students(),
        g.matrix.n_courses(),
        out.display(),
        g.missing_rate.map(|r| format!(" (missing rate {r:.3})")).unwrap_or_default()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { data, groups, common, strict } => {
            let cfg = common.pipeline_config()?;
            let m = load_data(&data)?;
            let groups = groups.map(|g| load_groups(g, &m)).transpose()?;
            let out = run_method(&m, groups.as_ref(), &cfg)?;
            emit_report(&out, &common.out)?;
            let r = &out.report;
            println!(
                "{} {}-dim model, {} flags ({} hard); report in {}",
                r.model_class,
                r.n_dim,
                r.flags.len(),
                r.flags.iter().filter(|f| f.severity == Severity::Hard).count(),
                common.out.display()
            );
            if strict && !r.convergence.converged {
                eprintln!("error: model fit did not converge");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Dcf { data, model, groups, course, common } => {
            let cfg = common.pipeline_config()?;
            let model = load_model(&model)?;
            let m = prepared_for(&load_data(&data)?, &model, &cfg)?;
            let groups = load_groups(groups, &m)?;
            let report = dcf_entrypoint(&m, &model, course.as_deref(), &groups, &cfg.dcf)?;
            emit_dcf(&report, &common.out)?;
            for r in &report.results {
                println!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}",
                    r.course_id,
                    r.group_sizes.0,
                    r.group_sizes.1,
                    r.beta1,
                    r.p_bh_adjusted.unwrap_or(r.p_raw)
                );
            }
        }
        Command::Simulate { config, overrides, seed, out } => {
            simulate(config.as_deref(), &overrides, seed, &out)?;
        }
        Command::Check { data, model, common } => {
            let cfg = common.pipeline_config()?;
            let model = load_model(&model)?;
            let m = prepared_for(&load_data(&data)?, &model, &cfg)?;
            let report = check_model(&m, &model, &cfg)?;
            let dir = &common.out;
            std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
            write_text(&dir.join("checks.json"), &report.to_json())?;
            for f in &report.flags {
                println!("{}\t{}\t{}", f.severity, f.check, f.message);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // usage errors are configuration errors: status 1, not clap's default 2
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
