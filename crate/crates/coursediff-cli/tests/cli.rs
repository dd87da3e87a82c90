use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coursediff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn simulate(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--out", out, "--set", "n_students=300", "--set", "n_courses=6"];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_then_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, &["--seed", "4"]);
    for f in ["grades.csv", "truth_students.csv", "truth_courses.csv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let grades = data.join("grades.csv");
    let out = tmp.path().join("out");
    let o = run(&["run", "--data", grades.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("irt 1-dim"));
    for f in ["report.json", "model.json", "difficulty.csv", "traits.csv", "assumptions.csv", "flags.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn identical_runs_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, &["--set", "grade_kind=continuous"]);
    let grades = data.join("grades.csv");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed = 9\nsplit_mode = random\n").unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run(&[
            "run",
            "--data",
            grades.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn fatal_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["run", "--data", tmp.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.csv"));

    let data = tmp.path().join("data");
    simulate(&data, &[]);
    let grades = data.join("grades.csv");
    let o = run(&["run", "--data", grades.to_str().unwrap(), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["run"]).status.code(), Some(1));
}

#[test]
fn strict_turns_non_convergence_into_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, &[]);
    let grades = data.join("grades.csv");
    let out = tmp.path().join("out");
    let base = ["run", "--data", grades.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "irt_max_iter=1"];
    assert_eq!(run(&base).status.code(), Some(0));
    let mut strict = base.to_vec();
    strict.push("--strict");
    assert_eq!(run(&strict).status.code(), Some(2));
}

#[test]
fn dcf_and_check_against_stored_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, &[]);
    let grades = data.join("grades.csv");
    let fit = tmp.path().join("fit");
    let o = run(&["run", "--data", grades.to_str().unwrap(), "--out", fit.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&grades).unwrap();
    let groups: String = text
        .lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| format!("{},{}\n", l.split(',').next().unwrap(), if i % 2 == 0 { 1 } else { -1 }))
        .collect();
    let gpath = tmp.path().join("groups.csv");
    fs::write(&gpath, groups).unwrap();
    let model = fit.join("model.json");
    let out = tmp.path().join("dcf");
    let o = run(&[
        "dcf",
        "--data",
        grades.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--groups",
        gpath.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("dcf.csv")).unwrap();
    assert!(table.starts_with("course,n_group_minus,n_group_plus,dcf,p_raw,p_bh,significant"));
    assert_eq!(table.lines().count(), 7);

    let o = run(&[
        "dcf",
        "--data",
        grades.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--groups",
        gpath.to_str().unwrap(),
        "--course",
        "nope",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&gpath, "ghost,1\n").unwrap();
    let o = run(&[
        "dcf",
        "--data",
        grades.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--groups",
        gpath.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ghost"));

    let chk = tmp.path().join("chk");
    let o = run(&[
        "check",
        "--data",
        grades.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        chk.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(chk.join("checks.json").exists());
}

#[test]
fn drift_scenario_writes_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("scenario.cfg");
    fs::write(&cfg, "scenario = drift\ndrift = course_drift_with_shock\nn_students = 100\nn_courses = 4\n").unwrap();
    let out = tmp.path().join("d");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("terms.csv").exists());
}
