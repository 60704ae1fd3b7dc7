//! Subcommand implementations. Every command computes first and writes files
//! afterwards, from a single thread.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fairprice::buyers::BuyerMode;
use fairprice::calibration::{
    calibrate_demand, load_csv, preprocess, raw_gap_report, CalibratedModel, ColumnMap, GapReport, SyntheticConfig,
    FEATURE_NAMES,
};
use fairprice::harness::{aggregate_summaries, loglog_slope, run_replications_with, RegretCurve, ReplicationSummary};
use fairprice::instances::{
    linspace, run_instance_checks_on, GrowthProbe, InstanceCheck, PropertyReport, UNINFORMATIVE_PRICE_BOX,
};
use fairprice::rng::replication_seed;

use crate::config::RunConfig;
use crate::svg::{Chart, Series};

/// Behaviors run by `compare`, in output order.
pub const COMPARED: [BuyerMode; 2] = [BuyerMode::OracleLearner, BuyerMode::AlwaysManipulate];

pub const CURVES_HEADER: &str = "t,behavior,mean,se";
pub const MANIPULATION_HEADER: &str = "behavior,rep,seed,exploration_length,final_regret,group0_exploit_buyers,manipulations,manipulation_rate,late_window_start,late_window_end,late_group0_buyers,late_manipulation_rate,late_mean_abs_gap_error";
pub const SUMMARY_HEADER: &str = "behavior,reps,horizon,exploration_length,final_mean,final_se,loglog_slope,manipulation_rate";
pub const SENSITIVITY_HEADER: &str = "param,value,behavior,reps,final_mean,final_se";

#[derive(Debug, Clone)]
pub struct BehaviorRun {
    pub mode: BuyerMode,
    pub summaries: Vec<ReplicationSummary>,
    pub curve: RegretCurve,
}

impl BehaviorRun {
    pub fn final_mean(&self) -> f64 {
        self.curve.last_mean()
    }

    pub fn final_se(&self) -> f64 {
        self.curve.se.last().copied().unwrap_or(0.0)
    }

    pub fn exploration_length(&self) -> usize {
        self.summaries.first().map_or(0, |s| s.exploration_length)
    }

    /// Log-log slope of the mean curve over `t >= 2 T0`.
    pub fn loglog_slope(&self) -> Option<f64> {
        loglog_slope(&self.curve, 2 * self.exploration_length().max(1)).ok()
    }

    /// Pooled manipulation share among post-exploration group-0 buyers.
    pub fn manipulation_rate(&self) -> Option<f64> {
        let buyers: usize = self.summaries.iter().map(|s| s.group0_exploit_buyers).sum();
        let manip: usize = self.summaries.iter().map(|s| s.manipulations).sum();
        (buyers > 0).then(|| manip as f64 / buyers as f64)
    }
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub description: String,
    pub runs: Vec<BehaviorRun>,
    pub files: Vec<PathBuf>,
}

impl CompareOutcome {
    pub fn run(&self, mode: BuyerMode) -> Option<&BehaviorRun> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    /// `1 - R(oracle-learner) / R(always-manipulate)` at the horizon.
    pub fn regret_reduction(&self) -> Option<f64> {
        let learner = self.run(BuyerMode::OracleLearner)?.final_mean();
        let naive = self.run(BuyerMode::AlwaysManipulate)?.final_mean();
        (naive > 0.0).then(|| 1.0 - learner / naive)
    }
}

fn thread_count(jobs: usize) -> usize {
    if jobs > 0 {
        jobs
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn run_with_trajectory(cfg: &RunConfig, mode: BuyerMode, keep_first: bool) -> Result<(BehaviorRun, Option<Vec<u8>>)> {
    let behavior = cfg.behavior(mode);
    let results = run_replications_with(
        &cfg.environment,
        &cfg.seller,
        &behavior,
        cfg.base_seed,
        cfg.reps,
        thread_count(cfg.jobs),
        |r, traj| {
            let csv = if keep_first && r == 0 {
                let mut buf = Vec::new();
                traj.write_csv(&mut buf)?;
                Some(buf)
            } else {
                None
            };
            Ok((ReplicationSummary::new(r, replication_seed(cfg.base_seed, r), &traj), csv))
        },
    )
    .with_context(|| format!("running {mode} replications"))?;
    let mut first = None;
    let mut summaries = Vec::with_capacity(results.len());
    for (s, csv) in results {
        if csv.is_some() {
            first = csv;
        }
        summaries.push(s);
    }
    let curve = aggregate_summaries(&summaries)?;
    Ok((BehaviorRun { mode, summaries, curve }, first))
}

/// Runs one buyer behavior over all replications.
pub fn run_behavior(cfg: &RunConfig, mode: BuyerMode) -> Result<BehaviorRun> {
    Ok(run_with_trajectory(cfg, mode, false)?.0)
}

/// Runs both compared behaviors on common random numbers without writing files.
pub fn run_compare(cfg: &RunConfig) -> Result<Vec<BehaviorRun>> {
    COMPARED.iter().map(|&m| run_behavior(cfg, m)).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curves_csv(runs: &[BehaviorRun]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for run in runs {
        let c = &run.curve;
        for i in 0..c.t.len() {
            let _ = writeln!(out, "{},{},{},{}", c.t[i], run.mode, c.mean[i], c.se[i]);
        }
    }
    out
}

pub fn manipulation_csv(runs: &[BehaviorRun]) -> String {
    let mut out = String::from(MANIPULATION_HEADER);
    out.push('\n');
    for run in runs {
        for s in &run.summaries {
            let w = &s.late_window;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                run.mode,
                s.rep,
                s.seed,
                s.exploration_length,
                s.final_regret(),
                s.group0_exploit_buyers,
                s.manipulations,
                opt(s.manipulation_rate()),
                w.window_start,
                w.window_end,
                w.group0_buyers,
                opt(w.manipulation_rate),
                opt(w.mean_abs_gap_error)
            );
        }
    }
    out
}

pub fn summary_csv(runs: &[BehaviorRun], horizon: usize) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for run in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            run.mode,
            run.curve.reps,
            horizon,
            run.exploration_length(),
            run.final_mean(),
            run.final_se(),
            opt(run.loglog_slope()),
            opt(run.manipulation_rate())
        );
    }
    out
}

pub fn regret_chart(title: &str, runs: &[BehaviorRun]) -> Chart {
    Chart {
        title: title.to_string(),
        x_label: "t".into(),
        y_label: "cumulative regret (mean, ±1 SE)".into(),
        series: runs
            .iter()
            .map(|r| Series {
                label: r.mode.to_string(),
                x: r.curve.t.iter().map(|&t| t as f64).collect(),
                y: r.curve.mean.clone(),
                band: Some(r.curve.se.clone()),
            })
            .collect(),
    }
}

/// Compares oracle-learner and always-manipulate buyers and writes
/// `regret_curves.csv`, `manipulation.csv`, `summary.csv` and `regret.svg`.
pub fn cmd_compare(cfg: &RunConfig) -> Result<CompareOutcome> {
    let runs = run_compare(cfg)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut files = Vec::new();
    write_file(&dir.join("regret_curves.csv"), curves_csv(&runs).as_bytes(), &mut files)?;
    write_file(&dir.join("manipulation.csv"), manipulation_csv(&runs).as_bytes(), &mut files)?;
    write_file(&dir.join("summary.csv"), summary_csv(&runs, cfg.seller.horizon).as_bytes(), &mut files)?;
    let title = format!("Cumulative regret, {} scenario", cfg.scenario);
    write_file(&dir.join("regret.svg"), regret_chart(&title, &runs).render().as_bytes(), &mut files)?;
    Ok(CompareOutcome {
        description: cfg.describe(),
        runs,
        files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    /// Price cap B.
    #[value(name = "B", alias = "b")]
    B,
    /// Switching-threshold constant.
    CDelta,
    /// Exploration-length multiplier.
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::B => "B",
            SweepParam::CDelta => "c_delta",
            SweepParam::Tau => "tau",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::B => vec![3.0, 4.0, 5.0],
            SweepParam::CDelta => vec![1.0, 2.0, 3.0],
            SweepParam::Tau => vec![8.0, 10.0, 12.0],
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepParam::B => cfg.seller.price_cap = value,
            SweepParam::CDelta => cfg.seller.c_delta = value,
            SweepParam::Tau => cfg.seller.tau = value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub runs: Vec<BehaviorRun>,
}

#[derive(Debug, Clone)]
pub struct SensitivityOutcome {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    pub files: Vec<PathBuf>,
}

/// One comparison per value. Writes `sensitivity_<param>.csv` with final
/// regrets and, per value, a curve CSV plus its SVG panel.
pub fn cmd_sensitivity(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SensitivityOutcome> {
    if values.is_empty() {
        bail!("sensitivity sweep needs at least one value");
    }
    let mut points = Vec::new();
    for &value in values {
        let mut c = cfg.clone();
        param.apply(&mut c, value);
        c.seller
            .validate(c.dim())
            .with_context(|| format!("{} = {value}", param.name()))?;
        points.push(SweepPoint {
            value,
            runs: run_compare(&c)?,
        });
    }

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut files = Vec::new();
    let mut combined = String::from(SENSITIVITY_HEADER);
    combined.push('\n');
    for p in &points {
        for r in &p.runs {
            let _ = writeln!(
                combined,
                "{},{},{},{},{},{}",
                param.name(),
                p.value,
                r.mode,
                r.curve.reps,
                r.final_mean(),
                r.final_se()
            );
        }
        let stem = format!("sensitivity_{}_{}", param.name(), p.value);
        write_file(&dir.join(format!("{stem}.csv")), curves_csv(&p.runs).as_bytes(), &mut files)?;
        let title = format!("{} = {}", param.name(), p.value);
        write_file(
            &dir.join(format!("{stem}.svg")),
            regret_chart(&title, &p.runs).render().as_bytes(),
            &mut files,
        )?;
    }
    write_file(
        &dir.join(format!("sensitivity_{}.csv", param.name())),
        combined.as_bytes(),
        &mut files,
    )?;
    Ok(SensitivityOutcome { param, points, files })
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub model: CalibratedModel,
    pub gap: GapReport,
    pub loaded: usize,
    pub malformed: usize,
    pub unclassified: usize,
    pub after_filters: usize,
    pub kept: usize,
    pub files: Vec<PathBuf>,
}

/// Load, preprocess, calibrate and test the raw gap. Writes
/// `calibrated_model.toml` and `calibration_report.txt`.
pub fn cmd_calibrate(data: &Path, columns: &ColumnMap, out: &Path) -> Result<CalibrationOutcome> {
    let loaded = load_csv(data, columns).with_context(|| format!("loading {}", data.display()))?;
    let pre = preprocess(&loaded.records)?;
    let model = calibrate_demand(&pre.records)?;
    let gap = raw_gap_report(&pre.records)?;

    let mut report = String::new();
    let _ = writeln!(report, "source: {}", data.display());
    let _ = writeln!(report, "demand regressors: price, intercept, {}", FEATURE_NAMES.join(", "));
    let _ = writeln!(
        report,
        "rows: {} parsed, {} malformed, {} unclassified group",
        loaded.records.len(),
        loaded.malformed,
        loaded.unclassified
    );
    let _ = writeln!(report, "after age/dti filters: {}; after trimming: {}", pre.after_filters, pre.records.len());
    let _ = writeln!(report, "n0 = {}, n1 = {}, q = {:.4}", model.n0, model.n1, model.q());
    let _ = writeln!(report, "sigma_eps = {:.6}", model.sigma_eps);
    for g in fairprice::Group::BOTH {
        let raw = model.raw(g);
        let _ = writeln!(report, "group {g}: alpha = {:.6} (se {:.6})", raw.alpha, raw.alpha_se);
        let _ = writeln!(report, "  intercept = {:.6} (se {:.6})", raw.intercept, raw.intercept_se);
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            let _ = writeln!(report, "  {name} = {:.6e} (se {:.3e})", raw.slopes[j], raw.slope_se[j]);
        }
    }
    let _ = writeln!(
        report,
        "price gap ({}): mean(group 0) - mean(group 1) = {:.6}, t = {:.3}, df = {:.1}, one-sided p = {:.3e}",
        gap.label, gap.mean_gap, gap.t_statistic, gap.degrees_of_freedom, gap.one_sided_p
    );

    create_dir(out)?;
    let mut files = Vec::new();
    write_file(&out.join("calibrated_model.toml"), model.to_toml()?.as_bytes(), &mut files)?;
    write_file(&out.join("calibration_report.txt"), report.as_bytes(), &mut files)?;
    Ok(CalibrationOutcome {
        loaded: loaded.records.len(),
        malformed: loaded.malformed,
        unclassified: loaded.unclassified,
        after_filters: pre.after_filters,
        kept: pre.records.len(),
        model,
        gap,
        files,
    })
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub checks: Vec<InstanceCheck>,
    pub properties: PropertyReport,
    pub probe: GrowthProbe,
    pub files: Vec<PathBuf>,
}

impl InstanceOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Closed-form identities, structural properties and the linear-growth probe.
/// `alphas` replaces the default slope grid (50 points on the admissible
/// interval). Writes `instance_checks.csv` and `instance_properties.csv`.
pub fn cmd_check_instances(alphas: Option<Vec<f64>>, out: &Path) -> Result<InstanceOutcome> {
    let (a0, a1) = fairprice::instances::UNINFORMATIVE_ALPHA_RANGE;
    let alphas = alphas.unwrap_or_else(|| linspace(a0, a1, 50));
    let prices = linspace(UNINFORMATIVE_PRICE_BOX.0, UNINFORMATIVE_PRICE_BOX.1, 50);
    let (checks, properties, probe) = run_instance_checks_on(&alphas, &prices)?;

    create_dir(out)?;
    let mut files = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "passed", "detail"])?;
    for c in &checks {
        w.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
    }
    let bytes = w.into_inner().context("flushing instance checks")?;
    write_file(&out.join("instance_checks.csv"), &bytes, &mut files)?;
    let mut props = Vec::new();
    properties.write_csv(&mut props)?;
    write_file(&out.join("instance_properties.csv"), &props, &mut files)?;
    Ok(InstanceOutcome {
        checks,
        properties,
        probe,
        files,
    })
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub run: BehaviorRun,
    pub files: Vec<PathBuf>,
}

/// Single behavior. Writes `simulate_<behavior>_curve.csv`, its SVG,
/// `simulate_<behavior>_reps.csv` and the step-level CSV of replication 0.
pub fn cmd_simulate(cfg: &RunConfig, mode: BuyerMode) -> Result<SimulateOutcome> {
    let (run, first) = run_with_trajectory(cfg, mode, true)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut files = Vec::new();
    let runs = std::slice::from_ref(&run);
    let stem = format!("simulate_{mode}");
    write_file(&dir.join(format!("{stem}_curve.csv")), curves_csv(runs).as_bytes(), &mut files)?;
    write_file(&dir.join(format!("{stem}_reps.csv")), manipulation_csv(runs).as_bytes(), &mut files)?;
    let title = format!("Cumulative regret, {mode}, {} scenario", cfg.scenario);
    write_file(&dir.join(format!("{stem}.svg")), regret_chart(&title, runs).render().as_bytes(), &mut files)?;
    if let Some(bytes) = first {
        write_file(&dir.join(format!("{stem}_trajectory_rep0.csv")), &bytes, &mut files)?;
    }
    Ok(SimulateOutcome { run, files })
}

/// Writes the synthetic loan-level sample and returns its row count.
pub fn cmd_generate_sample(synth: &SyntheticConfig, path: &Path) -> Result<usize> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    let n = synth.write_csv(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(n)
}
