//! Ground-truth demand environment.
//!
//! A buyer in group `j` facing price `p` with features `x` demands
//! `alpha_j * p + beta_j . (1, x) + noise`. The seller's expected revenue is
//! `p` times the expected demand.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Price sensitivities are kept at or below `-ALPHA_GUARD`, both for the
/// ground truth and for every estimate used in pricing.
pub const ALPHA_GUARD: f64 = 1e-2;

/// Tolerance on the Bernoulli success probability before it is treated as a
/// configuration error.
const BERNOULLI_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Group {
    /// The disadvantaged group, the only one with an incentive to misreport.
    Zero,
    One,
}

impl Group {
    pub const BOTH: [Group; 2] = [Group::Zero, Group::One];

    pub fn index(self) -> usize {
        match self {
            Group::Zero => 0,
            Group::One => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Group> {
        match i {
            0 => Some(Group::Zero),
            1 => Some(Group::One),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.index() as f64
    }
}

impl From<Group> for u8 {
    fn from(g: Group) -> u8 {
        g.index() as u8
    }
}

impl TryFrom<u8> for Group {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        Group::from_index(v as usize).ok_or_else(|| format!("group must be 0 or 1, got {v}"))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Feature vector with a leading 1 for the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeature(Vec<f64>);

impl AugmentedFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, coef: &[f64]) -> f64 {
        debug_assert_eq!(coef.len(), self.0.len());
        self.0.iter().zip(coef).map(|(a, b)| a * b).sum()
    }
}

/// Prepends the intercept entry to `x`.
pub fn augment(x: &[f64]) -> Result<AugmentedFeature> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector"));
    }
    let mut v = Vec::with_capacity(x.len() + 1);
    v.push(1.0);
    v.extend_from_slice(x);
    Ok(AugmentedFeature(v))
}

/// One group's demand vector `(alpha, beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandParams {
    alpha: f64,
    beta: Vec<f64>,
}

impl DemandParams {
    pub fn new(alpha: f64, beta: Vec<f64>) -> Result<Self> {
        if !alpha.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("demand parameters"));
        }
        if beta.is_empty() {
            return Err(Error::config("beta needs at least the intercept entry"));
        }
        if alpha > -ALPHA_GUARD {
            return Err(Error::config(format!(
                "price sensitivity alpha = {alpha} must be <= -{ALPHA_GUARD}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Like [`DemandParams::new`] but pulls `alpha` down to `-ALPHA_GUARD`
    /// instead of rejecting it.
    pub fn clamped(alpha: f64, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_nan() {
            return Err(Error::NonFinite("demand parameters"));
        }
        Self::new(alpha.min(-ALPHA_GUARD), beta)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Feature dimension `d` (beta has `d + 1` entries).
    pub fn dim(&self) -> usize {
        self.beta.len() - 1
    }

    /// `(alpha, beta...)` flattened, the layout used by least squares.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.beta.len() + 1);
        v.push(self.alpha);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn base_demand(&self, x: &AugmentedFeature) -> f64 {
        x.dot(&self.beta)
    }

    pub fn expected_demand(&self, p: f64, x: &AugmentedFeature) -> f64 {
        self.alpha * p + self.base_demand(x)
    }

    pub fn expected_revenue(&self, p: f64, x: &AugmentedFeature) -> f64 {
        p * self.expected_demand(p, x)
    }

    /// Revenue-maximizing price ignoring any fairness constraint.
    pub fn unconstrained_price(&self, x: &AugmentedFeature) -> f64 {
        -self.base_demand(x) / (2.0 * self.alpha)
    }

    /// Squared Euclidean distance between the flattened parameter vectors.
    pub fn squared_distance(&self, other: &DemandParams) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DemandKind {
    #[default]
    LinearGaussian,
    /// Demand in {0, 1}; only used by the uninformative-price instance.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GroupRule {
    /// Group 0 with probability `q`, independently each step.
    #[default]
    Random,
    /// `G_t = t mod 2`.
    Alternating,
}

#[derive(Debug, Clone)]
pub enum FeatureSampler {
    /// Each coordinate i.i.d. uniform on `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// Resample rows of a fixed pool with replacement.
    Empirical(Arc<Vec<Vec<f64>>>),
}

impl Default for FeatureSampler {
    fn default() -> Self {
        FeatureSampler::Uniform {
            low: -2.0,
            high: 2.0,
        }
    }
}

impl FeatureSampler {
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        match self {
            FeatureSampler::Uniform { low, high } => {
                (0..dim).map(|_| rng.random_range(*low..*high)).collect()
            }
            FeatureSampler::Empirical(pool) => pool[rng.random_range(0..pool.len())].clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Environment {
    pub theta0: DemandParams,
    pub theta1: DemandParams,
    /// Share of buyers in group 0.
    pub q: f64,
    pub sigma_eps: f64,
    pub features: FeatureSampler,
    pub demand_kind: DemandKind,
    pub group_rule: GroupRule,
}

impl Environment {
    pub fn new(theta0: DemandParams, theta1: DemandParams, q: f64, sigma_eps: f64) -> Result<Self> {
        let env = Self {
            theta0,
            theta1,
            q,
            sigma_eps,
            features: FeatureSampler::default(),
            demand_kind: DemandKind::LinearGaussian,
            group_rule: GroupRule::Random,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn with_features(mut self, features: FeatureSampler) -> Result<Self> {
        self.features = features;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta0.beta.len() != self.theta1.beta.len() {
            return Err(Error::config("theta0 and theta1 must have equal beta length"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config(format!("q = {} must lie strictly in (0, 1)", self.q)));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::config("sigma_eps must be finite and >= 0"));
        }
        match &self.features {
            FeatureSampler::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(Error::config("feature range needs finite low < high"));
                }
            }
            FeatureSampler::Empirical(pool) => {
                if pool.is_empty() || pool.iter().any(|r| r.len() != self.dim()) {
                    return Err(Error::config("empirical feature pool is empty or has wrong width"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.theta0.dim()
    }

    pub fn theta(&self, group: Group) -> &DemandParams {
        match group {
            Group::Zero => &self.theta0,
            Group::One => &self.theta1,
        }
    }

    pub fn sample_features<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.features.sample(self.dim(), rng)
    }

    /// Group of the buyer arriving at step `t` (1-based).
    pub fn sample_group<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Group {
        match self.group_rule {
            GroupRule::Random => {
                if rng.random::<f64>() < self.q {
                    Group::Zero
                } else {
                    Group::One
                }
            }
            GroupRule::Alternating => {
                if t % 2 == 0 {
                    Group::Zero
                } else {
                    Group::One
                }
            }
        }
    }

    pub fn expected_demand(&self, group: Group, p: f64, x: &AugmentedFeature) -> f64 {
        self.theta(group).expected_demand(p, x)
    }

    pub fn expected_revenue(&self, group: Group, p: f64, x: &AugmentedFeature) -> f64 {
        self.theta(group).expected_revenue(p, x)
    }

    /// Noisy demand draw. Demand always follows the buyer's true group.
    pub fn realize_demand<R: Rng + ?Sized>(
        &self,
        group: Group,
        p: f64,
        x: &AugmentedFeature,
        rng: &mut R,
    ) -> Result<f64> {
        let mean = self.expected_demand(group, p, x);
        match self.demand_kind {
            DemandKind::LinearGaussian => {
                if self.sigma_eps == 0.0 {
                    return Ok(mean);
                }
                let noise = Normal::new(0.0, self.sigma_eps)
                    .map_err(|e| Error::config(e.to_string()))?;
                Ok(mean + noise.sample(rng))
            }
            DemandKind::Bernoulli => {
                if !(-BERNOULLI_TOL..=1.0 + BERNOULLI_TOL).contains(&mean) {
                    return Err(Error::config(format!(
                        "bernoulli demand mean {mean} outside [0, 1] at price {p}"
                    )));
                }
                let prob = mean.clamp(0.0, 1.0);
                Ok(if rng.random::<f64>() < prob { 1.0 } else { 0.0 })
            }
        }
    }

    /// Demand parameters of the simulation study, generalized to `d >= 1`:
    /// `alpha_0 = alpha_1 = -1`, `beta_0 = (2, 1/2, 1, 1, 1/2, ...)`,
    /// `beta_1 = beta_0 / 2`, features uniform on `[-2, 2)`, unit noise.
    pub fn simulation_default(dim: usize, q: f64) -> Result<Self> {
        let mut beta0 = vec![2.0];
        beta0.extend((0..dim).map(|i| match i {
            1 | 2 => 1.0,
            _ => 0.5,
        }));
        let beta1 = beta0.iter().map(|b| b / 2.0).collect();
        Environment::new(
            DemandParams::new(-1.0, beta0)?,
            DemandParams::new(-1.0, beta1)?,
            q,
            1.0,
        )
    }

    pub fn to_config(&self) -> Result<EnvironmentConfig> {
        let (feature_low, feature_high) = match &self.features {
            FeatureSampler::Uniform { low, high } => (*low, *high),
            FeatureSampler::Empirical(_) => {
                return Err(Error::config("empirical feature pools are not serializable"))
            }
        };
        Ok(EnvironmentConfig {
            alpha0: self.theta0.alpha,
            beta0: self.theta0.beta.clone(),
            alpha1: self.theta1.alpha,
            beta1: self.theta1.beta.clone(),
            q: self.q,
            sigma_eps: self.sigma_eps,
            feature_low,
            feature_high,
            demand_kind: self.demand_kind,
            group_rule: self.group_rule,
        })
    }
}

/// Flat, serializable form of [`Environment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub alpha0: f64,
    pub beta0: Vec<f64>,
    pub alpha1: f64,
    pub beta1: Vec<f64>,
    pub q: f64,
    pub sigma_eps: f64,
    #[serde(default = "default_low")]
    pub feature_low: f64,
    #[serde(default = "default_high")]
    pub feature_high: f64,
    #[serde(default)]
    pub demand_kind: DemandKind,
    #[serde(default)]
    pub group_rule: GroupRule,
}

fn default_low() -> f64 {
    -2.0
}

fn default_high() -> f64 {
    2.0
}

impl TryFrom<EnvironmentConfig> for Environment {
    type Error = Error;

    fn try_from(c: EnvironmentConfig) -> Result<Self> {
        let env = Environment {
            theta0: DemandParams::new(c.alpha0, c.beta0)?,
            theta1: DemandParams::new(c.alpha1, c.beta1)?,
            q: c.q,
            sigma_eps: c.sigma_eps,
            features: FeatureSampler::Uniform {
                low: c.feature_low,
                high: c.feature_high,
            },
            demand_kind: c.demand_kind,
            group_rule: c.group_rule,
        };
        env.validate()?;
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta0() -> DemandParams {
        DemandParams::new(-1.0, vec![2.0, 0.5, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn augment_prepends_one() {
        assert_eq!(augment(&[0.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(augment(&[1.0, 2.0, -1.0]).unwrap().as_slice(), &[1.0, 1.0, 2.0, -1.0]);
        assert_eq!(augment(&[]).unwrap().as_slice(), &[1.0]);
        assert!(augment(&[f64::NAN]).is_err());
        assert!(augment(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn expected_demand_and_revenue() {
        let th = theta0();
        let x0 = augment(&[0.0; 3]).unwrap();
        assert_eq!(th.expected_demand(0.0, &x0), 2.0);
        assert_eq!(th.expected_demand(1.0, &x0), 1.0);
        assert_eq!(th.expected_revenue(0.0, &x0), 0.0);
        assert_eq!(th.expected_revenue(1.0, &x0), 1.0);
        assert_eq!(th.unconstrained_price(&x0), 1.0);
        // grid search for the revenue vertex
        let best = (0..=3000)
            .map(|i| i as f64 * 1e-3)
            .max_by(|a, b| th.expected_revenue(*a, &x0).total_cmp(&th.expected_revenue(*b, &x0)))
            .unwrap();
        assert!((best - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_guard_enforced() {
        assert!(DemandParams::new(0.0, vec![1.0]).is_err());
        assert!(DemandParams::new(-0.005, vec![1.0]).is_err());
        let c = DemandParams::clamped(0.3, vec![1.0]).unwrap();
        assert_eq!(c.alpha(), -ALPHA_GUARD);
        assert!(DemandParams::new(-1.0, vec![]).is_err());
    }

    #[test]
    fn environment_validation() {
        let th1 = DemandParams::new(-1.0, vec![1.0, 0.25]).unwrap();
        assert!(Environment::new(theta0(), th1, 0.5, 1.0).is_err());
        let th1 = DemandParams::new(-1.0, vec![1.0, 0.25, 0.5, 0.5]).unwrap();
        assert!(Environment::new(theta0(), th1.clone(), 0.0, 1.0).is_err());
        assert!(Environment::new(theta0(), th1.clone(), 1.0, 1.0).is_err());
        assert!(Environment::new(theta0(), th1, 0.5, -1.0).is_err());
    }

    #[test]
    fn simulation_default_matches_study() {
        let env = Environment::simulation_default(3, 0.5).unwrap();
        assert_eq!(env.theta0.beta(), &[2.0, 0.5, 1.0, 1.0]);
        assert_eq!(env.theta1.beta(), &[1.0, 0.25, 0.5, 0.5]);
        let env10 = Environment::simulation_default(10, 0.5).unwrap();
        assert_eq!(
            env10.theta0.beta(),
            &[2.0, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
        );
    }

    #[test]
    fn noiseless_realization_is_exact() {
        let mut env = Environment::simulation_default(3, 0.5).unwrap();
        env.sigma_eps = 0.0;
        let x = augment(&[0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(env.realize_demand(Group::Zero, 1.0, &x, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn realization_is_reproducible() {
        let env = Environment::simulation_default(3, 0.5).unwrap();
        let x = augment(&[0.3, -0.2, 1.0]).unwrap();
        let a = env
            .realize_demand(Group::One, 0.7, &x, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = env
            .realize_demand(Group::One, 0.7, &x, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_concentrates() {
        let env = Environment::simulation_default(3, 0.5).unwrap();
        let x = augment(&[0.5, -1.0, 0.25]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| env.realize_demand(Group::Zero, 1.2, &x, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let expected = env.expected_demand(Group::Zero, 1.2, &x);
        assert!((mean - expected).abs() < 4.0 * env.sigma_eps / (n as f64).sqrt());
    }

    #[test]
    fn bernoulli_rejects_out_of_range_mean() {
        let mut env = Environment::new(
            DemandParams::new(-1.0, vec![2.0]).unwrap(),
            DemandParams::new(-1.0, vec![2.0]).unwrap(),
            0.5,
            0.0,
        )
        .unwrap();
        env.demand_kind = DemandKind::Bernoulli;
        let x = augment(&[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(env.realize_demand(Group::Zero, 0.0, &x, &mut rng).is_err());
        let y = env.realize_demand(Group::Zero, 1.5, &x, &mut rng).unwrap();
        assert!(y == 0.0 || y == 1.0);
    }

    #[test]
    fn config_round_trip() {
        let env = Environment::simulation_default(3, 0.5).unwrap();
        let text = toml::to_string(&env.to_config().unwrap()).unwrap();
        let back: EnvironmentConfig = toml::from_str(&text).unwrap();
        let env2 = Environment::try_from(back).unwrap();
        assert_eq!(env2.theta0, env.theta0);
        assert_eq!(env2.q, env.q);
    }

    proptest::proptest! {
        #[test]
        fn revenue_strictly_concave(alpha in -3.0f64..-0.05, b0 in -3.0f64..3.0, p in 0.0f64..5.0, h in 0.01f64..1.0) {
            let th = DemandParams::new(alpha, vec![b0]).unwrap();
            let x = augment(&[]).unwrap();
            let second = th.expected_revenue(p + h, &x) - 2.0 * th.expected_revenue(p, &x)
                + th.expected_revenue(p - h, &x);
            proptest::prop_assert!(second < 0.0);
        }
    }
}
