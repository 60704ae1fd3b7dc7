//! Seller policies: explore-then-commit with plug-in fair prices, and the
//! fairness-aware clairvoyant seller that knows the true demand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_ols, EstimatedTheta, SaleRecord};
use crate::model::{augment, AugmentedFeature, Environment, Group};
use crate::solver::{policy_prices_estimated, FairPricingProblem, PricePair};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SellerPolicy {
    /// Uniform exploration, per-group least squares, then plug-in fair prices.
    #[default]
    ExploreThenCommit,
    /// Optimal fair prices under the true parameters from the first step.
    Clairvoyant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SellerConfig {
    /// Horizon `T`.
    pub horizon: usize,
    /// Price upper bound `B`.
    pub price_cap: f64,
    /// Exploration multiplier: `T0 = round(tau sqrt(T))`.
    pub tau: f64,
    pub c_delta: f64,
    /// Fairness level.
    pub delta: f64,
    /// Group-0 share used by the seller; the environment's share when absent.
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub policy: SellerPolicy,
}

impl SellerConfig {
    /// Seller used in the simulation study.
    pub fn simulation_default(horizon: usize) -> Self {
        Self {
            horizon,
            price_cap: 3.0,
            tau: 10.0,
            c_delta: 1.0,
            delta: 0.799,
            q: None,
            policy: SellerPolicy::ExploreThenCommit,
        }
    }

    pub fn clairvoyant(mut self) -> Self {
        self.policy = SellerPolicy::Clairvoyant;
        self
    }

    /// `T0 = max(round(tau sqrt(T)), 2 (d + 2))`.
    pub fn exploration_length(&self, dim: usize) -> usize {
        let raw = (self.tau * (self.horizon as f64).sqrt()).round() as usize;
        raw.max(2 * (dim + 2))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.horizon < 4 {
            return Err(Error::config("horizon must be at least 4"));
        }
        if !(self.price_cap > 0.0 && self.price_cap.is_finite()) {
            return Err(Error::config("price cap must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.c_delta >= 0.0 && self.c_delta.is_finite()) {
            return Err(Error::config("c_delta must be non-negative"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta must be positive"));
        }
        if let Some(q) = self.q {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::config("seller q must lie in (0, 1)"));
            }
        }
        if self.policy == SellerPolicy::ExploreThenCommit {
            let t0 = self.exploration_length(dim);
            if t0 >= self.horizon {
                return Err(Error::config(format!(
                    "exploration length {t0} must be below the horizon {}",
                    self.horizon
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Exploration,
    Exploitation,
}

/// Explore-then-commit seller state.
#[derive(Debug, Clone)]
pub struct ExploreThenCommit {
    config: SellerConfig,
    q: f64,
    t0: usize,
    t: usize,
    collected: Vec<SaleRecord>,
    estimates: Option<[EstimatedTheta; 2]>,
}

impl ExploreThenCommit {
    pub fn new(config: SellerConfig, dim: usize, env_q: f64) -> Result<Self> {
        config.validate(dim)?;
        let t0 = config.exploration_length(dim);
        let q = config.q.unwrap_or(env_q);
        Ok(Self {
            config,
            q,
            t0,
            t: 0,
            collected: Vec::with_capacity(t0),
            estimates: None,
        })
    }

    pub fn config(&self) -> &SellerConfig {
        &self.config
    }

    pub fn exploration_length(&self) -> usize {
        self.t0
    }

    /// Steps observed so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn phase(&self) -> Phase {
        if self.estimates.is_some() {
            Phase::Exploitation
        } else {
            Phase::Exploration
        }
    }

    pub fn collected(&self) -> &[SaleRecord] {
        &self.collected
    }

    pub fn estimates(&self) -> Option<&[EstimatedTheta; 2]> {
        self.estimates.as_ref()
    }

    /// A fresh `Unif(0, B)` draw, the same law for every buyer.
    pub fn exploration_price(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        if self.phase() != Phase::Exploration {
            return Err(Error::config("exploration price requested after the phase switch"));
        }
        let b = self.config.price_cap;
        loop {
            let p = rng.random::<f64>() * b;
            if p > 0.0 {
                return Ok(p);
            }
        }
    }

    /// Plug-in price pair at `x` from the exploration estimates.
    pub fn price_pair(&self, x: &AugmentedFeature) -> Result<PricePair> {
        let [e0, e1] = self.estimates.as_ref().ok_or(Error::NotFitted)?;
        let problem = FairPricingProblem::new(&e0.theta, &e1.theta, self.q, self.config.delta)?;
        policy_prices_estimated(&problem, self.config.c_delta, self.t0, self.config.price_cap, x)
    }

    /// Price for a buyer reporting `reported_group` at `x`. The RNG is only
    /// touched during exploration.
    pub fn next_price(&self, x: &AugmentedFeature, reported_group: Group, rng: &mut ChaCha8Rng) -> Result<f64> {
        match self.phase() {
            Phase::Exploration => self.exploration_price(rng),
            Phase::Exploitation => Ok(self.price_pair(x)?.get(reported_group)),
        }
    }

    /// Records one sale; fits the estimates once `T0` sales are in.
    pub fn observe(&mut self, record: SaleRecord) -> Result<()> {
        if self.phase() == Phase::Exploration {
            self.collected.push(record);
        }
        self.t += 1;
        if self.t == self.t0 {
            self.end_exploration()?;
        }
        Ok(())
    }

    /// Fits per-group least squares on the exploration sales and switches
    /// to exploitation. Records are kept.
    pub fn end_exploration(&mut self) -> Result<()> {
        if self.t != self.t0 || self.estimates.is_some() {
            return Err(Error::config(format!(
                "exploration ends at step {}, currently at {}",
                self.t0, self.t
            )));
        }
        let e0 = fit_ols(&self.collected, Group::Zero)?;
        let e1 = fit_ols(&self.collected, Group::One)?;
        self.estimates = Some([e0, e1]);
        Ok(())
    }
}

/// Optimal fair price pair under the true parameters.
pub fn clairvoyant_prices(env: &Environment, delta: f64, x: &AugmentedFeature) -> Result<PricePair> {
    FairPricingProblem::new(&env.theta0, &env.theta1, env.q, delta)?.optimal_fair_prices(x)
}

/// Price the fairness-aware clairvoyant seller charges group `true_group` at raw features `x`.
pub fn clairvoyant_price(env: &Environment, delta: f64, x: &[f64], true_group: Group) -> Result<f64> {
    Ok(clairvoyant_prices(env, delta, &augment(x)?)?.get(true_group))
}
