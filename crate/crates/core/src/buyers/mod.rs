//! Buyer-side price learning and the group-report decision.
//!
//! Buyers only ever see what the seller releases: features, the reported
//! group and the price. They fit a price model per group, compare the
//! predicted group gap with the manipulation cost, and group-0 buyers
//! misreport when the gap exceeds it.

mod mlp;
mod tree;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Group;
use crate::rng::{stream, Stream};

pub use mlp::{Mlp, MlpConfig};
pub use tree::{RegressionTree, TreeConfig};

/// One released tuple. There is deliberately no demand or true-group field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PublicRecord {
    pub x: Vec<f64>,
    pub reported_group: Group,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Linear,
    Tree,
    Mlp,
}

impl std::fmt::Display for OracleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleKind::Linear => "linear",
            OracleKind::Tree => "tree",
            OracleKind::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub tree: TreeConfig,
    pub mlp: MlpConfig,
    /// Tree and MLP train on a uniform subsample of at most this many
    /// records; the linear oracle always uses the full history.
    pub max_train_records: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            mlp: MlpConfig::default(),
            max_train_records: 4096,
        }
    }
}

/// Per-reported-group linear price model `p ~ (1, x)`.
#[derive(Debug, Clone)]
pub struct LinearPriceModel {
    coef: [Vec<f64>; 2],
}

impl LinearPriceModel {
    pub fn fit(history: &[PublicRecord]) -> Result<Self> {
        let k = history[0].x.len() + 1;
        let mut gram = [DMatrix::<f64>::zeros(k, k), DMatrix::zeros(k, k)];
        let mut rhs = [DVector::<f64>::zeros(k), DVector::zeros(k)];
        let mut counts = [0usize; 2];
        let mut row = vec![0.0; k];
        for r in history {
            row[0] = 1.0;
            row[1..].copy_from_slice(&r.x);
            let g = r.reported_group.index();
            counts[g] += 1;
            for i in 0..k {
                rhs[g][i] += row[i] * r.price;
                for j in 0..=i {
                    gram[g][(i, j)] += row[i] * row[j];
                }
            }
        }
        for g in &mut gram {
            g.fill_upper_triangle_with_lower_triangle();
        }
        let solve = |a: DMatrix<f64>, b: &DVector<f64>| -> Option<Vec<f64>> {
            let chol = a.cholesky()?;
            let c = chol.solve(b);
            c.iter().all(|v| v.is_finite()).then(|| c.iter().copied().collect())
        };
        let pooled = || -> Result<Vec<f64>> {
            solve(&gram[0] + &gram[1], &(&rhs[0] + &rhs[1])).ok_or_else(|| Error::SingularFit {
                context: "pooled linear price model".into(),
                reason: "normal equations not positive definite".into(),
            })
        };
        let mut coef: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for g in 0..2 {
            coef[g] = if counts[g] >= k {
                match solve(gram[g].clone(), &rhs[g]) {
                    Some(c) => c,
                    None => pooled()?,
                }
            } else {
                pooled()?
            };
        }
        Ok(Self { coef })
    }

    pub fn predict(&self, x: &[f64], group: Group) -> f64 {
        let c = &self.coef[group.index()];
        c[0] + c[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
enum OracleModel {
    Linear(LinearPriceModel),
    Tree(RegressionTree),
    Mlp(Box<Mlp>),
}

/// An offline regression oracle mapping `(x, group)` to a predicted price.
#[derive(Debug, Clone)]
pub struct PriceOracle {
    kind: OracleKind,
    settings: OracleSettings,
    model: Option<OracleModel>,
    trained_on: usize,
    rng: ChaCha8Rng,
}

impl PriceOracle {
    pub fn new(kind: OracleKind, settings: OracleSettings, seed: u64) -> Self {
        Self {
            kind,
            settings,
            model: None,
            trained_on: 0,
            rng: stream(seed, Stream::Oracle),
        }
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    /// Number of records in the history at the last training.
    pub fn trained_on(&self) -> usize {
        self.trained_on
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }

    /// Fits (or, for the MLP, warm-starts) the oracle on the released history.
    pub fn train(&mut self, history: &[PublicRecord]) -> Result<()> {
        if history.is_empty() {
            return Err(Error::Empty("price history"));
        }
        let dim = history[0].x.len();
        if history.iter().any(|r| r.x.len() != dim) {
            return Err(Error::config("public records have inconsistent feature dimensions"));
        }
        match self.kind {
            OracleKind::Linear => {
                self.model = Some(OracleModel::Linear(LinearPriceModel::fit(history)?));
            }
            OracleKind::Tree | OracleKind::Mlp => {
                let (inputs, targets) = self.training_set(history);
                match self.kind {
                    OracleKind::Tree => {
                        let tree = RegressionTree::fit(&inputs, &targets, &self.settings.tree);
                        self.model = Some(OracleModel::Tree(tree));
                    }
                    _ => {
                        if !matches!(self.model, Some(OracleModel::Mlp(_))) {
                            let net = Mlp::new(dim + 1, self.settings.mlp.clone(), &mut self.rng);
                            self.model = Some(OracleModel::Mlp(Box::new(net)));
                        }
                        if let Some(OracleModel::Mlp(net)) = &mut self.model {
                            net.train(&inputs, &targets, &mut self.rng);
                        }
                    }
                }
            }
        }
        self.trained_on = history.len();
        Ok(())
    }

    fn training_set(&mut self, history: &[PublicRecord]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let to_input = |r: &PublicRecord| {
            let mut v = r.x.clone();
            v.push(r.reported_group.as_f64());
            v
        };
        let cap = self.settings.max_train_records.max(1);
        if history.len() <= cap {
            (history.iter().map(to_input).collect(), history.iter().map(|r| r.price).collect())
        } else {
            let mut picks = index::sample(&mut self.rng, history.len(), cap).into_vec();
            picks.sort_unstable();
            (
                picks.iter().map(|&i| to_input(&history[i])).collect(),
                picks.iter().map(|&i| history[i].price).collect(),
            )
        }
    }

    pub fn predict_price(&self, x: &[f64], group: Group) -> Result<f64> {
        let model = self.model.as_ref().ok_or(Error::Untrained)?;
        let p = match model {
            OracleModel::Linear(m) => m.predict(x, group),
            OracleModel::Tree(t) => t.predict(&with_group(x, group)),
            OracleModel::Mlp(m) => m.predict(&with_group(x, group)),
        };
        if p.is_finite() {
            Ok(p)
        } else {
            Err(Error::NonFinite("oracle prediction"))
        }
    }

    /// Predicted price gap `p_0(x) - p_1(x)` a buyer at `x` perceives.
    pub fn learned_gap(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_price(x, Group::Zero)? - self.predict_price(x, Group::One)?)
    }
}

fn with_group(x: &[f64], group: Group) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.extend_from_slice(x);
    v.push(group.as_f64());
    v
}

/// Trains a fresh oracle with default settings.
pub fn train_oracle(kind: OracleKind, history: &[PublicRecord]) -> Result<PriceOracle> {
    let mut oracle = PriceOracle::new(kind, OracleSettings::default(), 0);
    oracle.train(history)?;
    Ok(oracle)
}

/// Group a buyer reports given the perceived gap and the manipulation cost.
/// Group 1 never misreports; group 0 misreports only when the gap strictly
/// exceeds the cost.
pub fn report_group(true_group: Group, delta_hat: f64, manipulation_cost: f64) -> Group {
    match true_group {
        Group::One => Group::One,
        Group::Zero if delta_hat > manipulation_cost => Group::One,
        Group::Zero => Group::Zero,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuyerMode {
    Truthful,
    /// Group-0 buyers misreport at every exploitation step.
    AlwaysManipulate,
    /// Group-0 buyers learn the gap from public data and apply the report rule.
    OracleLearner,
}

impl std::fmt::Display for BuyerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BuyerMode::Truthful => "truthful",
            BuyerMode::AlwaysManipulate => "always-manipulate",
            BuyerMode::OracleLearner => "oracle-learner",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuyerBehavior {
    pub mode: BuyerMode,
    pub oracle_kind: OracleKind,
    /// Exploitation steps between oracle retrains (1 retrains every step).
    pub retrain_every: usize,
    pub manipulation_cost: f64,
    #[serde(default)]
    pub oracle: OracleSettings,
}

impl BuyerBehavior {
    pub fn new(mode: BuyerMode, manipulation_cost: f64) -> Self {
        Self {
            mode,
            oracle_kind: OracleKind::Mlp,
            retrain_every: 25,
            manipulation_cost,
            oracle: OracleSettings::default(),
        }
    }

    pub fn with_oracle(mut self, kind: OracleKind) -> Self {
        self.oracle_kind = kind;
        self
    }

    pub fn with_retrain_every(mut self, every: usize) -> Self {
        self.retrain_every = every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrain_every == 0 {
            return Err(Error::config("retrain_every must be >= 1"));
        }
        if !self.manipulation_cost.is_finite() {
            return Err(Error::NonFinite("manipulation cost"));
        }
        Ok(())
    }
}

/// Group-0 decision at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group0Decision {
    pub misreport: bool,
    /// Perceived gap, for learners only.
    pub delta_hat: Option<f64>,
}

/// The buyer population of one replication and its shared price oracle.
#[derive(Debug, Clone)]
pub struct BuyerPopulation {
    behavior: BuyerBehavior,
    oracle: Option<PriceOracle>,
    exploit_steps: usize,
}

impl BuyerPopulation {
    pub fn new(behavior: BuyerBehavior, seed: u64) -> Result<Self> {
        behavior.validate()?;
        let oracle = (behavior.mode == BuyerMode::OracleLearner)
            .then(|| PriceOracle::new(behavior.oracle_kind, behavior.oracle.clone(), seed));
        Ok(Self {
            behavior,
            oracle,
            exploit_steps: 0,
        })
    }

    pub fn behavior(&self) -> &BuyerBehavior {
        &self.behavior
    }

    pub fn oracle(&self) -> Option<&PriceOracle> {
        self.oracle.as_ref()
    }

    /// Called once per exploitation step with everything released so far;
    /// retrains on the configured cadence.
    pub fn begin_exploitation_step(&mut self, history: &[PublicRecord]) -> Result<()> {
        if let Some(oracle) = &mut self.oracle {
            if self.exploit_steps % self.behavior.retrain_every == 0 {
                oracle.train(history)?;
            }
        }
        self.exploit_steps += 1;
        Ok(())
    }

    /// What a group-0 buyer at `x` does during exploitation. During
    /// exploration prices are group-blind and nobody misreports.
    pub fn group0_decision(&self, x: &[f64], exploiting: bool) -> Result<Group0Decision> {
        if !exploiting {
            return Ok(Group0Decision {
                misreport: false,
                delta_hat: None,
            });
        }
        Ok(match self.behavior.mode {
            BuyerMode::Truthful => Group0Decision {
                misreport: false,
                delta_hat: None,
            },
            BuyerMode::AlwaysManipulate => Group0Decision {
                misreport: true,
                delta_hat: None,
            },
            BuyerMode::OracleLearner => {
                let oracle = self.oracle.as_ref().ok_or(Error::Untrained)?;
                let gap = oracle.learned_gap(x)?;
                Group0Decision {
                    misreport: report_group(Group::Zero, gap, self.behavior.manipulation_cost)
                        == Group::One,
                    delta_hat: Some(gap),
                }
            }
        })
    }
}
