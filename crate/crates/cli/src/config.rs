//! Run configuration: scenario defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fairprice::buyers::{BuyerBehavior, BuyerMode, MlpConfig, OracleKind, TreeConfig};
use fairprice::calibration::{calibrate_demand, load_csv, preprocess, CalibratedModel, ColumnMap};
use fairprice::instances::{
    theorem1_env, theorem3_env, LINEAR_REGRET_COST, LINEAR_REGRET_DELTA, UNINFORMATIVE_ALPHA, UNINFORMATIVE_DELTA,
    UNINFORMATIVE_PRICE_BOX,
};
use fairprice::model::{DemandParams, EnvironmentConfig};
use fairprice::policies::{SellerConfig, SellerPolicy};
use fairprice::Environment;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "FAIRPRICE_OUT";
pub const DEFAULT_OUT: &str = "fairprice-out";
pub const DEFAULT_SAMPLE: &str = "data/synthetic_hmda_sample.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Simulation study: d = 3, q = 1/2, uniform features.
    #[default]
    SimDefault,
    /// One-dimensional instance where fair prices tempt group 0 to misreport.
    Theorem1,
    /// Bernoulli demand with uninformative crossing prices.
    Theorem3,
    /// Demand fitted to loan-level data.
    Calibrated,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::SimDefault => "sim-default",
            Scenario::Theorem1 => "theorem1",
            Scenario::Theorem3 => "theorem3",
            Scenario::Calibrated => "calibrated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SellerSection {
    pub horizon: Option<usize>,
    pub price_cap: Option<f64>,
    pub tau: Option<f64>,
    pub c_delta: Option<f64>,
    pub delta: Option<f64>,
    pub q: Option<f64>,
    pub policy: Option<SellerPolicy>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuyerSection {
    pub oracle: Option<OracleKind>,
    pub retrain_every: Option<usize>,
    pub manipulation_cost: Option<f64>,
    pub max_train_records: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSection {
    pub dim: Option<usize>,
    pub q: Option<f64>,
    pub sigma_eps: Option<f64>,
    /// Full parameter override; all of `alpha0`, `beta0`, `alpha1`, `beta1`
    /// must then be present.
    pub alpha0: Option<f64>,
    pub beta0: Option<Vec<f64>>,
    pub alpha1: Option<f64>,
    pub beta1: Option<Vec<f64>>,
    pub feature_low: Option<f64>,
    pub feature_high: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibratedSection {
    /// Previously written model file; takes precedence over `data`.
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub sigma_eps: Option<f64>,
    pub columns: Option<ColumnMap>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Option<Scenario>,
    pub reps: Option<usize>,
    pub base_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seller: SellerSection,
    pub buyer: BuyerSection,
    pub environment: EnvironmentSection,
    pub mlp: Option<MlpConfig>,
    pub tree: Option<TreeConfig>,
    pub calibrated: CalibratedSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub horizon: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seller: SellerConfig,
    /// Mode is set per run; the remaining fields are shared.
    pub buyer: BuyerBehavior,
    pub reps: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub environment: Environment,
}

struct ScenarioDefaults {
    seller: SellerConfig,
    manipulation_cost: f64,
    reps: usize,
}

fn scenario_defaults(scenario: Scenario) -> ScenarioDefaults {
    match scenario {
        Scenario::SimDefault => ScenarioDefaults {
            seller: SellerConfig::simulation_default(10_000),
            manipulation_cost: 0.8,
            reps: 20,
        },
        Scenario::Theorem1 => ScenarioDefaults {
            seller: SellerConfig {
                delta: LINEAR_REGRET_DELTA,
                ..SellerConfig::simulation_default(10_000)
            },
            manipulation_cost: LINEAR_REGRET_COST,
            reps: 20,
        },
        Scenario::Theorem3 => ScenarioDefaults {
            seller: SellerConfig {
                delta: UNINFORMATIVE_DELTA,
                price_cap: UNINFORMATIVE_PRICE_BOX.1,
                ..SellerConfig::simulation_default(10_000)
            },
            manipulation_cost: LINEAR_REGRET_COST,
            reps: 20,
        },
        Scenario::Calibrated => ScenarioDefaults {
            seller: SellerConfig {
                horizon: 50_000,
                price_cap: 1.0,
                tau: 5.0,
                c_delta: 1.0,
                delta: 0.1,
                q: None,
                policy: SellerPolicy::ExploreThenCommit,
            },
            manipulation_cost: 0.11,
            reps: 20,
        },
    }
}

impl RunConfig {
    pub fn resolve(file: &ConfigFile, flags: &Overrides) -> Result<Self> {
        let scenario = flags.scenario.or(file.scenario).unwrap_or_default();
        let defaults = scenario_defaults(scenario);

        let s = &file.seller;
        let mut seller = defaults.seller;
        seller.horizon = flags.horizon.or(s.horizon).unwrap_or(seller.horizon);
        seller.price_cap = s.price_cap.unwrap_or(seller.price_cap);
        seller.tau = s.tau.unwrap_or(seller.tau);
        seller.c_delta = s.c_delta.unwrap_or(seller.c_delta);
        seller.delta = s.delta.unwrap_or(seller.delta);
        seller.q = s.q.or(seller.q);
        seller.policy = s.policy.unwrap_or(seller.policy);

        let b = &file.buyer;
        let mut buyer = BuyerBehavior::new(
            BuyerMode::OracleLearner,
            b.manipulation_cost.unwrap_or(defaults.manipulation_cost),
        )
        .with_oracle(b.oracle.unwrap_or(OracleKind::Mlp));
        if let Some(every) = b.retrain_every {
            buyer = buyer.with_retrain_every(every);
        }
        if let Some(n) = b.max_train_records {
            buyer.oracle.max_train_records = n;
        }
        if let Some(mlp) = &file.mlp {
            buyer.oracle.mlp = mlp.clone();
        }
        if let Some(tree) = &file.tree {
            buyer.oracle.tree = tree.clone();
        }
        buyer.validate()?;

        let environment = build_environment(scenario, file)?;
        seller.validate(environment.dim())?;

        let reps = flags.reps.or(file.reps).unwrap_or(defaults.reps);
        if reps == 0 {
            bail!("reps must be at least 1");
        }
        let output_dir = resolve_output_dir(flags.out.as_deref(), file);

        Ok(Self {
            scenario,
            seller,
            buyer,
            reps,
            base_seed: flags.seed.or(file.base_seed).unwrap_or(0),
            output_dir,
            jobs: flags.jobs.or(file.jobs).unwrap_or(0),
            environment,
        })
    }

    pub fn dim(&self) -> usize {
        self.environment.dim()
    }

    pub fn behavior(&self, mode: BuyerMode) -> BuyerBehavior {
        BuyerBehavior {
            mode,
            ..self.buyer.clone()
        }
    }

    /// Human-readable parameter dump for report headers.
    pub fn describe(&self) -> String {
        let s = &self.seller;
        format!(
            "scenario={} d={} q={} T={} B={} tau={} c_delta={} delta={} C0={} oracle={} retrain_every={} reps={} base_seed={}",
            self.scenario,
            self.dim(),
            self.environment.q,
            s.horizon,
            s.price_cap,
            s.tau,
            s.c_delta,
            s.delta,
            self.buyer.manipulation_cost,
            self.buyer.oracle_kind,
            self.buyer.retrain_every,
            self.reps,
            self.base_seed
        )
    }
}

/// Flag, then config file, then `FAIRPRICE_OUT`, then [`DEFAULT_OUT`].
pub fn resolve_output_dir(flag: Option<&Path>, file: &ConfigFile) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| file.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn build_environment(scenario: Scenario, file: &ConfigFile) -> Result<Environment> {
    let e = &file.environment;
    let mut env = match scenario {
        Scenario::SimDefault => match (&e.alpha0, &e.beta0, &e.alpha1, &e.beta1) {
            (Some(a0), Some(b0), Some(a1), Some(b1)) => Environment::new(
                DemandParams::new(*a0, b0.clone())?,
                DemandParams::new(*a1, b1.clone())?,
                e.q.unwrap_or(0.5),
                e.sigma_eps.unwrap_or(1.0),
            )?,
            (None, None, None, None) => Environment::simulation_default(e.dim.unwrap_or(3), e.q.unwrap_or(0.5))?,
            _ => bail!("environment override needs all of alpha0, beta0, alpha1, beta1"),
        },
        Scenario::Theorem1 => theorem1_env(),
        Scenario::Theorem3 => theorem3_env(UNINFORMATIVE_ALPHA)?,
        Scenario::Calibrated => {
            let model = load_calibrated(&file.calibrated)?;
            model.environment(file.calibrated.sigma_eps.unwrap_or(model.sigma_eps))?
        }
    };
    if scenario != Scenario::SimDefault {
        if e.dim.is_some() || e.alpha0.is_some() {
            bail!("[environment] dim and parameter overrides only apply to the sim-default scenario");
        }
        if let Some(q) = e.q {
            env.q = q;
        }
    }
    if let Some(sigma) = e.sigma_eps {
        env.sigma_eps = sigma;
    }
    if e.feature_low.is_some() || e.feature_high.is_some() {
        let cfg = env.to_config()?;
        env = Environment::try_from(EnvironmentConfig {
            feature_low: e.feature_low.unwrap_or(cfg.feature_low),
            feature_high: e.feature_high.unwrap_or(cfg.feature_high),
            ..cfg
        })?;
    }
    env.validate()?;
    Ok(env)
}

/// Loads a model file, or calibrates from the configured (or shipped) sample.
pub fn load_calibrated(section: &CalibratedSection) -> Result<CalibratedModel> {
    if let Some(path) = &section.model {
        return CalibratedModel::load(path).with_context(|| format!("loading calibrated model {}", path.display()));
    }
    let data = section.data.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_SAMPLE));
    let columns = section.columns.clone().unwrap_or_default();
    let loaded = load_csv(&data, &columns).with_context(|| format!("loading {}", data.display()))?;
    let pre = preprocess(&loaded.records)?;
    Ok(calibrate_demand(&pre.records)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_scenario_defaults() {
        let file: ConfigFile = toml::from_str(
            r#"
            reps = 7
            base_seed = 11
            [seller]
            horizon = 500
            tau = 4.0
            [buyer]
            oracle = "tree"
            "#,
        )
        .unwrap();
        let flags = Overrides {
            seed: Some(99),
            horizon: Some(800),
            out: Some("x".into()),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(&file, &flags).unwrap();
        assert_eq!(cfg.reps, 7);
        assert_eq!(cfg.base_seed, 99);
        assert_eq!(cfg.seller.horizon, 800);
        assert_eq!(cfg.seller.tau, 4.0);
        assert_eq!(cfg.seller.price_cap, 3.0);
        assert_eq!(cfg.buyer.oracle_kind, OracleKind::Tree);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
        assert_eq!(cfg.dim(), 3);
    }

    #[test]
    fn unknown_keys_and_zero_reps_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("repz = 3").is_err());
        let file: ConfigFile = toml::from_str("reps = 0").unwrap();
        assert!(RunConfig::resolve(&file, &Overrides::default()).is_err());
    }

    #[test]
    fn partial_parameter_override_is_rejected() {
        let file: ConfigFile = toml::from_str("[environment]\nalpha0 = -1.0").unwrap();
        assert!(RunConfig::resolve(&file, &Overrides::default()).is_err());
    }

    #[test]
    fn instance_scenarios_carry_their_constants() {
        let flags = Overrides {
            scenario: Some(Scenario::Theorem1),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(&ConfigFile::default(), &flags).unwrap();
        assert_eq!(cfg.seller.delta, 0.25);
        assert_eq!(cfg.buyer.manipulation_cost, 5.0 / 16.0);
        assert_eq!(cfg.dim(), 1);
    }
}
