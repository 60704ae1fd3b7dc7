use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairprice::buyers::BuyerMode;
use fairprice::calibration::SyntheticConfig;
use fairprice::instances::linspace;
use fairprice_cli::config::{resolve_output_dir, DEFAULT_SAMPLE};
use fairprice_cli::{
    cmd_calibrate, cmd_check_instances, cmd_compare, cmd_generate_sample, cmd_sensitivity, cmd_simulate, ConfigFile,
    Overrides, RunConfig, Scenario, SweepParam,
};

#[derive(Parser, Debug)]
#[command(name = "fairprice", version, about = "Fair contextual pricing experiments with strategic buyers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    scenario: Option<Scenario>,
    /// Base seed; replication r uses seed + r.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory [default: $FAIRPRICE_OUT, else ./fairprice-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Oracle-learner versus always-manipulate buyers on common random numbers.
    Compare,
    /// Repeat the comparison across values of one seller hyperparameter.
    Sensitivity {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values [default: B 3,4,5; c-delta 1,2,3; tau 8,10,12].
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Fit ground-truth demand to a loan-level CSV.
    Calibrate {
        /// Input CSV [default: [calibrated].data or the shipped sample].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-form identities, instance properties and the linear-growth probe.
    CheckInstances {
        /// Replace the slope grid with `--alpha-points` values on [min, max].
        #[arg(long, requires = "alpha_max", allow_negative_numbers = true)]
        alpha_min: Option<f64>,
        #[arg(long, requires = "alpha_min", allow_negative_numbers = true)]
        alpha_max: Option<f64>,
        #[arg(long, default_value_t = 50)]
        alpha_points: usize,
    },
    /// A single buyer behavior.
    Simulate {
        #[arg(long, value_enum, default_value_t = Behavior::OracleLearner)]
        behavior: Behavior,
    },
    /// Write the synthetic loan-level sample.
    GenerateSample {
        #[arg(long, default_value = DEFAULT_SAMPLE)]
        path: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        sample_seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Behavior {
    Truthful,
    AlwaysManipulate,
    OracleLearner,
}

impl From<Behavior> for BuyerMode {
    fn from(b: Behavior) -> Self {
        match b {
            Behavior::Truthful => BuyerMode::Truthful,
            Behavior::AlwaysManipulate => BuyerMode::AlwaysManipulate,
            Behavior::OracleLearner => BuyerMode::OracleLearner,
        }
    }
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            scenario: self.scenario,
            seed: self.seed,
            reps: self.reps,
            horizon: self.horizon,
            jobs: self.jobs,
            out: self.out.clone(),
        }
    }

    fn file(&self) -> Result<ConfigFile> {
        match &self.config {
            Some(path) => ConfigFile::load(path),
            None => Ok(ConfigFile::default()),
        }
    }

    fn output_dir(&self, file: &ConfigFile) -> PathBuf {
        resolve_output_dir(self.out.as_deref(), file)
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    let file = g.file()?;
    match cli.command {
        Command::Compare => {
            let cfg = RunConfig::resolve(&file, &g.overrides())?;
            let out = cmd_compare(&cfg)?;
            println!("{}", out.description);
            for r in &out.runs {
                println!(
                    "{:<18} final regret {:.2} (se {:.2}), slope {}, manipulation rate {}",
                    r.mode.to_string(),
                    r.final_mean(),
                    r.final_se(),
                    r.loglog_slope().map_or("n/a".into(), |s| format!("{s:.3}")),
                    r.manipulation_rate().map_or("n/a".into(), |m| format!("{m:.4}"))
                );
            }
            if let Some(red) = out.regret_reduction() {
                println!("regret reduction: {:.2}%", 100.0 * red);
            }
            print_files(&out.files);
        }
        Command::Sensitivity { param, values } => {
            let cfg = RunConfig::resolve(&file, &g.overrides())?;
            let values = if values.is_empty() { param.default_values() } else { values };
            let out = cmd_sensitivity(&cfg, param, &values)?;
            for p in &out.points {
                for r in &p.runs {
                    println!(
                        "{} = {:<6} {:<18} final regret {:.2} (se {:.2})",
                        param.name(),
                        p.value,
                        r.mode.to_string(),
                        r.final_mean(),
                        r.final_se()
                    );
                }
            }
            print_files(&out.files);
        }
        Command::Calibrate { data } => {
            let data = data
                .or_else(|| file.calibrated.data.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_SAMPLE));
            let columns = file.calibrated.columns.clone().unwrap_or_default();
            let out = cmd_calibrate(&data, &columns, &g.output_dir(&file))?;
            println!(
                "{} records ({} malformed, {} unclassified skipped), {} after preprocessing",
                out.loaded, out.malformed, out.unclassified, out.kept
            );
            println!(
                "alpha0 = {:.4}, alpha1 = {:.4}, sigma_eps = {:.4}, q = {:.4}",
                out.model.raw0.alpha,
                out.model.raw1.alpha,
                out.model.sigma_eps,
                out.model.q()
            );
            println!(
                "price gap ({}) {:.4}, one-sided p = {:.3e}",
                out.gap.label, out.gap.mean_gap, out.gap.one_sided_p
            );
            print_files(&out.files);
        }
        Command::CheckInstances {
            alpha_min,
            alpha_max,
            alpha_points,
        } => {
            let alphas = match (alpha_min, alpha_max) {
                (Some(lo), Some(hi)) => {
                    if alpha_points == 0 {
                        bail!("--alpha-points must be positive");
                    }
                    Some(linspace(lo, hi, alpha_points))
                }
                _ => None,
            };
            let out = cmd_check_instances(alphas, &g.output_dir(&file))?;
            for c in &out.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            print!("{}", out.properties.to_text());
            print_files(&out.files);
            return Ok(out.passed());
        }
        Command::Simulate { behavior } => {
            let cfg = RunConfig::resolve(&file, &g.overrides())?;
            let out = cmd_simulate(&cfg, behavior.into())?;
            println!("{}", cfg.describe());
            println!(
                "{} final regret {:.2} (se {:.2})",
                out.run.mode,
                out.run.final_mean(),
                out.run.final_se()
            );
            print_files(&out.files);
        }
        Command::GenerateSample {
            path,
            rows,
            sample_seed,
        } => {
            let mut synth = SyntheticConfig::default();
            if let Some(n) = rows {
                synth.model_rows = n;
            }
            if let Some(s) = sample_seed {
                synth.seed = s;
            }
            let n = cmd_generate_sample(&synth, &path)?;
            println!("wrote {n} rows to {}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
