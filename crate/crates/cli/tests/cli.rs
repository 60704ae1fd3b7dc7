use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairprice"));
    c.env_remove("FAIRPRICE_OUT").env("RUST_LOG", "error");
    c
}

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic_hmda_sample.csv")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn final_means(summary: &str) -> Vec<(String, f64)> {
    summary
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[4].parse().unwrap())
        })
        .collect()
}

fn final_of(rows: &[(String, f64)], behavior: &str) -> f64 {
    rows.iter().find(|(b, _)| b == behavior).unwrap().1
}

#[test]
fn compare_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["compare", "--horizon", "600", "--reps", "3", "--seed", "17", "--out", d.to_str().unwrap()]);
    }
    for f in ["regret_curves.csv", "manipulation.csv", "summary.csv", "regret.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&["compare", "--horizon", "600", "--reps", "3", "--seed", "18", "--out", c.to_str().unwrap()]);
    assert_ne!(read(&a.join("regret_curves.csv")), read(&c.join("regret_curves.csv")));
}

#[test]
fn svg_is_valid_and_matches_csv_series() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["compare", "--horizon", "500", "--reps", "2", "--out", dir.path().to_str().unwrap()]);
    let svg = read(&dir.path().join("regret.svg"));
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let mut labels: Vec<String> = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .map(|n| n.attribute("data-label").unwrap().to_string())
        .collect();
    let csv = read(&dir.path().join("regret_curves.csv"));
    assert_eq!(csv.lines().next(), Some("t,behavior,mean,se"));
    let mut behaviors: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    behaviors.dedup();
    labels.sort();
    behaviors.sort();
    assert_eq!(labels, behaviors);
}

#[test]
fn output_dir_defaults_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--behavior", "truthful", "--horizon", "300", "--reps", "1"])
        .env("FAIRPRICE_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("simulate_truthful_curve.csv").exists());
    let traj = read(&dir.path().join("simulate_truthful_trajectory_rep0.csv"));
    assert_eq!(
        traj.lines().next(),
        Some("t,true_group,reported_group,offered_price,p0_offered,p1_offered,instance_regret,cum_regret")
    );
    assert_eq!(traj.lines().count(), 301);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "reps = 2\noutput_dir = \"{}\"\n[seller]\nhorizon = 5000\n[buyer]\noracle = \"linear\"\n",
            out.display()
        ),
    )
    .unwrap();
    ok(&["compare", "--config", cfg.to_str().unwrap(), "--horizon", "400"]);
    let summary = read(&out.join("summary.csv"));
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(2) == Some("400")));
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));

    std::fs::write(&cfg, "repz = 2\n").unwrap();
    let bad = run(&["compare", "--config", cfg.to_str().unwrap()]);
    assert!(!bad.status.success());
}

#[test]
fn check_instances_passes_and_rejects_bad_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let stdout = ok(&["check-instances", "--out", d]);
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("PASS linear-regret growth"));
    let checks = read(&dir.path().join("instance_checks.csv"));
    assert!(checks.starts_with("check,passed,detail\n"));

    let out = run(&["check-instances", "--alpha-min", "-0.7", "--alpha-max", "-0.2", "--out", d]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("-0.7"));
}

#[test]
fn calibrate_reports_negative_slopes_and_bad_paths() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["calibrate", "--data", sample().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let model = fairprice::calibration::CalibratedModel::load(&dir.path().join("calibrated_model.toml")).unwrap();
    assert!(model.theta0.alpha() < 0.0 && model.theta1.alpha() < 0.0);
    let report = read(&dir.path().join("calibration_report.txt"));
    assert!(report.contains("unadjusted"));
    assert!(report.contains("income, age, property_value, dti, cltv, loan_term"));

    let out = run(&["calibrate", "--data", "/no/such/loans.csv", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/loans.csv"));
}

#[test]
fn generate_sample_reproduces_shipped_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sample.csv");
    ok(&["generate-sample", "--path", path.to_str().unwrap()]);
    assert!(std::fs::read(&path).unwrap() == std::fs::read(sample()).unwrap());
}

#[test]
fn single_value_sweep_matches_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let common = ["--horizon", "500", "--reps", "2", "--seed", "5"];
    ok(&[&["compare", "--out", a.to_str().unwrap()], &common[..]].concat());
    ok(&[&["sensitivity", "--param", "tau", "--values", "10", "--out", b.to_str().unwrap()], &common[..]].concat());
    assert_eq!(read(&a.join("regret_curves.csv")), read(&b.join("sensitivity_tau_10.csv")));
    let combined = read(&b.join("sensitivity_tau.csv"));
    assert_eq!(combined.lines().count(), 3);
    assert!(roxmltree::Document::parse(&read(&b.join("sensitivity_tau_10.svg"))).is_ok());
}

#[test]
fn oracle_learner_beats_always_manipulate_in_simulation_setup() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["compare", "--horizon", "10000", "--reps", "20", "--out", dir.path().to_str().unwrap()]);
    let rows = final_means(&read(&dir.path().join("summary.csv")));
    assert!(final_of(&rows, "oracle-learner") < final_of(&rows, "always-manipulate"), "{rows:?}");
}

fn sweep(param: &str, values: &str) -> Vec<(f64, String, f64)> {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "sensitivity", "--param", param, "--values", values, "--horizon", "10000", "--reps", "10", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let name = if param == "c-delta" { "c_delta" } else { param };
    read(&dir.path().join(format!("sensitivity_{name}.csv")))
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].to_string(), f[4].parse().unwrap())
        })
        .collect()
}

#[test]
fn price_cap_sweep_keeps_the_ordering() {
    let rows = sweep("B", "3,4,5");
    for v in [3.0, 4.0, 5.0] {
        let get = |b: &str| rows.iter().find(|r| r.0 == v && r.1 == b).unwrap().2;
        assert!(get("oracle-learner") < get("always-manipulate"), "B = {v}: {rows:?}");
    }
}

#[test]
fn threshold_constant_sweep_is_stable() {
    let rows = sweep("c-delta", "1,2,3");
    let learner: Vec<f64> = rows.iter().filter(|r| r.1 == "oracle-learner").map(|r| r.2).collect();
    assert_eq!(learner.len(), 3);
    let (lo, hi) = learner.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(hi <= 2.0 * lo, "{learner:?}");
}

#[test]
fn calibrated_scenario_reduces_regret_by_a_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let cal = dir.path().join("cal");
    ok(&["calibrate", "--data", sample().to_str().unwrap(), "--out", cal.to_str().unwrap()]);
    let cfg = dir.path().join("calibrated.toml");
    std::fs::write(
        &cfg,
        format!("scenario = \"calibrated\"\n[calibrated]\nmodel = \"{}\"\n", cal.join("calibrated_model.toml").display()),
    )
    .unwrap();
    let out = dir.path().join("cmp");
    let stdout = ok(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("T=50000") && stdout.contains("reps=20") && stdout.contains("C0=0.11"), "{stdout}");
    let rows = final_means(&read(&out.join("summary.csv")));
    let reduction = 1.0 - final_of(&rows, "oracle-learner") / final_of(&rows, "always-manipulate");
    assert!(reduction >= 0.25, "reduction {reduction}: {rows:?}");
}
