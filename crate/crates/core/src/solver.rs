//! Fairness-constrained revenue maximization for two groups.
//!
//! The seller maximizes `q R_0(p_0) + (1 - q) R_1(p_1)` subject to
//! `p_0 - p_1 <= delta`. Both revenues are concave quadratics, so the KKT
//! conditions give a closed form: the per-group maximizers when their gap is
//! within `delta`, otherwise a pooled price shifted by `delta` between groups.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AugmentedFeature, DemandParams, Group};

/// Slack allowed on `p_0 - p_1 <= delta` when checking solver output.
pub const FAIRNESS_TOL: f64 = 1e-9;

/// Default grid step for [`FairPricingProblem::grid_oracle_prices`].
pub const DEFAULT_GRID_STEP: f64 = 1e-3;

/// Coefficients of the constrained branch: `p_j = gamma1 . x~ - j delta + gamma2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PricingParams {
    pub gamma1: Vec<f64>,
    pub gamma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PricePair {
    pub p0: f64,
    pub p1: f64,
    /// Whether the fairness constraint was active.
    pub constrained: bool,
}

impl PricePair {
    pub fn get(&self, group: Group) -> f64 {
        match group {
            Group::Zero => self.p0,
            Group::One => self.p1,
        }
    }

    pub fn gap(&self) -> f64 {
        self.p0 - self.p1
    }
}

/// One pricing instance: both groups' demand, the group-0 share and the
/// fairness level.
#[derive(Debug, Clone, Copy)]
pub struct FairPricingProblem<'a> {
    pub theta0: &'a DemandParams,
    pub theta1: &'a DemandParams,
    pub q: f64,
    pub delta: f64,
}

impl<'a> FairPricingProblem<'a> {
    pub fn new(theta0: &'a DemandParams, theta1: &'a DemandParams, q: f64, delta: f64) -> Result<Self> {
        if theta0.beta().len() != theta1.beta().len() {
            return Err(Error::config("groups have different feature dimensions"));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::config(format!("q = {q} must lie in (0, 1)")));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::config(format!("fairness level delta = {delta} must be >= 0")));
        }
        Ok(Self {
            theta0,
            theta1,
            q,
            delta,
        })
    }

    fn weighted_alpha(&self) -> f64 {
        self.q * self.theta0.alpha() + (1.0 - self.q) * self.theta1.alpha()
    }

    pub fn pricing_params(&self) -> Result<PricingParams> {
        let denom = self.weighted_alpha();
        if !(denom < 0.0) {
            return Err(Error::config(format!(
                "weighted price sensitivity {denom} must be negative"
            )));
        }
        let q = self.q;
        let gamma1 = self
            .theta0
            .beta()
            .iter()
            .zip(self.theta1.beta())
            .map(|(b0, b1)| -(q * b0 + (1.0 - q) * b1) / (2.0 * denom))
            .collect();
        let gamma2 = (1.0 - q) * self.theta1.alpha() * self.delta / denom;
        Ok(PricingParams { gamma1, gamma2 })
    }

    /// Gap between the unconstrained per-group optima,
    /// `beta_1 . x~ / (2 alpha_1) - beta_0 . x~ / (2 alpha_0)`.
    pub fn unconstrained_gap(&self, x: &AugmentedFeature) -> f64 {
        self.theta0.unconstrained_price(x) - self.theta1.unconstrained_price(x)
    }

    pub fn unconstrained_prices(&self, x: &AugmentedFeature) -> PricePair {
        PricePair {
            p0: self.theta0.unconstrained_price(x),
            p1: self.theta1.unconstrained_price(x),
            constrained: false,
        }
    }

    pub fn constrained_prices(&self, x: &AugmentedFeature) -> Result<PricePair> {
        let params = self.pricing_params()?;
        let base = x.dot(&params.gamma1) + params.gamma2;
        Ok(PricePair {
            p0: base,
            p1: base - self.delta,
            constrained: true,
        })
    }

    /// Exact optimum of the constrained problem over all real prices.
    pub fn optimal_fair_prices(&self, x: &AugmentedFeature) -> Result<PricePair> {
        if self.unconstrained_gap(x) <= self.delta {
            Ok(self.unconstrained_prices(x))
        } else {
            self.constrained_prices(x)
        }
    }

    pub fn weighted_revenue(&self, pair: &PricePair, x: &AugmentedFeature) -> f64 {
        self.q * self.theta0.expected_revenue(pair.p0, x)
            + (1.0 - self.q) * self.theta1.expected_revenue(pair.p1, x)
    }

    /// Exhaustive search over the grid `{0, step, 2 step, ...} x {same}` on
    /// `[0, upper]^2`, restricted to `p_0 - p_1 <= delta`.
    ///
    /// For each `p_0` the feasible `p_1` form a suffix of the grid, so a
    /// suffix maximum of the group-1 revenue makes the full enumeration linear
    /// in the grid size. No concavity is assumed.
    pub fn grid_oracle_prices(&self, x: &AugmentedFeature, step: f64, upper: f64) -> Result<PricePair> {
        if !(step > 0.0 && upper > 0.0) {
            return Err(Error::config("grid step and upper bound must be positive"));
        }
        let n = (upper / step).round() as usize;
        let grid: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
        let r1: Vec<f64> = grid
            .iter()
            .map(|&p| (1.0 - self.q) * self.theta1.expected_revenue(p, x))
            .collect();
        // suffix_best[j] = index of the best group-1 revenue among grid[j..]
        let mut suffix_best = vec![n; n + 1];
        for j in (0..n).rev() {
            let k = suffix_best[j + 1];
            suffix_best[j] = if r1[j] >= r1[k] { j } else { k };
        }

        let shift = self.delta / step;
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &p0) in grid.iter().enumerate() {
            let jmin = (i as f64 - shift - 1e-9).ceil().max(0.0) as usize;
            if jmin > n {
                continue;
            }
            let j = suffix_best[jmin];
            let value = self.q * self.theta0.expected_revenue(p0, x) + r1[j];
            if best.is_none_or(|(v, _, _)| value > v) {
                best = Some((value, i, j));
            }
        }
        let (_, i, j) = best.ok_or(Error::Empty("feasible price grid"))?;
        let (p0, p1) = (grid[i], grid[j]);
        Ok(PricePair {
            p0,
            p1,
            constrained: p0 - p1 > self.delta - step,
        })
    }
}

/// Switching threshold `delta - c_delta sqrt(log T0 / T0)` of the plug-in
/// policy.
pub fn switch_threshold(delta: f64, c_delta: f64, t0: usize) -> f64 {
    let t0 = t0 as f64;
    delta - c_delta * (t0.ln() / t0).sqrt()
}

/// Plug-in prices from estimated demand parameters.
///
/// Uses the unconstrained branch when the estimated gap is at most the
/// shrunken threshold, the constrained branch otherwise, then clamps both
/// prices to `[0, upper]`. Clamping is monotone and 1-Lipschitz, so the
/// fairness gap can only shrink.
pub fn policy_prices_estimated(
    estimated: &FairPricingProblem<'_>,
    c_delta: f64,
    t0: usize,
    upper: f64,
    x: &AugmentedFeature,
) -> Result<PricePair> {
    if t0 < 2 {
        return Err(Error::config("exploration length must be at least 2"));
    }
    let threshold = switch_threshold(estimated.delta, c_delta, t0);
    let mut pair = if estimated.unconstrained_gap(x) <= threshold {
        estimated.unconstrained_prices(x)
    } else {
        estimated.constrained_prices(x)?
    };
    pair.p0 = pair.p0.clamp(0.0, upper);
    pair.p1 = pair.p1.clamp(0.0, upper);
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::augment;
    use approx::assert_abs_diff_eq;

    fn sim_thetas() -> (DemandParams, DemandParams) {
        (
            DemandParams::new(-1.0, vec![2.0, 0.5, 1.0, 1.0]).unwrap(),
            DemandParams::new(-1.0, vec![1.0, 0.25, 0.5, 0.5]).unwrap(),
        )
    }

    fn thm1_thetas() -> (DemandParams, DemandParams) {
        (
            DemandParams::new(-1.0, vec![2.0, 1.0]).unwrap(),
            DemandParams::new(-2.0, vec![2.0, 1.0]).unwrap(),
        )
    }

    #[test]
    fn pricing_params_simulation_study() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.3).unwrap();
        let pp = prob.pricing_params().unwrap();
        let x = augment(&[0.0; 3]).unwrap();
        assert_abs_diff_eq!(x.dot(&pp.gamma1), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(pp.gamma2, 0.15, epsilon = 1e-15);
    }

    #[test]
    fn pricing_params_linear_regret_instance() {
        let (t0, t1) = thm1_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.25).unwrap();
        let pp = prob.pricing_params().unwrap();
        for x in [-0.5, -0.1, 0.0, 0.3, 0.5] {
            let xt = augment(&[x]).unwrap();
            assert_abs_diff_eq!(xt.dot(&pp.gamma1), (2.0 + x) / 3.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(pp.gamma2, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_delta_gives_zero_gamma2() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.0).unwrap();
        assert_eq!(prob.pricing_params().unwrap().gamma2, 0.0);
    }

    #[test]
    fn optimal_prices_examples() {
        let (t0, t1) = sim_thetas();
        let x = augment(&[0.0; 3]).unwrap();
        let loose = FairPricingProblem::new(&t0, &t1, 0.5, 0.799).unwrap();
        let pair = loose.optimal_fair_prices(&x).unwrap();
        assert_eq!((pair.p0, pair.p1, pair.constrained), (1.0, 0.5, false));
        let oracle = loose.grid_oracle_prices(&x, 1e-3, 3.0).unwrap();
        assert!((oracle.p0 - 1.0).abs() <= 1e-3 && (oracle.p1 - 0.5).abs() <= 1e-3);

        let tight = FairPricingProblem::new(&t0, &t1, 0.5, 0.3).unwrap();
        let pair = tight.optimal_fair_prices(&x).unwrap();
        assert!(pair.constrained);
        assert_abs_diff_eq!(pair.p0, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(pair.p1, 0.6, epsilon = 1e-12);
        let oracle = tight.grid_oracle_prices(&x, 1e-3, 3.0).unwrap();
        assert!((oracle.p0 - 0.9).abs() <= 1e-3 && (oracle.p1 - 0.6).abs() <= 1e-3);
    }

    #[test]
    fn linear_regret_instance_identity() {
        let (t0, t1) = thm1_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.25).unwrap();
        for i in 0..100 {
            let x = -0.5 + i as f64 / 99.0;
            let pair = prob.optimal_fair_prices(&augment(&[x]).unwrap()).unwrap();
            assert_abs_diff_eq!(pair.p0, x / 3.0 + 5.0 / 6.0, epsilon = 1e-12);
            assert_abs_diff_eq!(pair.p1, x / 3.0 + 7.0 / 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_with_loose_delta_matches_unconstrained() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 10.0).unwrap();
        let x = augment(&[0.4, -0.3, 0.9]).unwrap();
        let oracle = prob.grid_oracle_prices(&x, 1e-3, 5.0).unwrap();
        assert!((oracle.p0 - t0.unconstrained_price(&x)).abs() <= 1e-3);
        assert!((oracle.p1 - t1.unconstrained_price(&x)).abs() <= 1e-3);
    }

    #[test]
    fn oracle_with_zero_delta_pools_prices() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.0).unwrap();
        let x = augment(&[0.2, 0.1, -0.5]).unwrap();
        let oracle = prob.grid_oracle_prices(&x, 1e-3, 5.0).unwrap();
        assert_eq!(oracle.p0, oracle.p1);
        // 1-D search of the pooled objective
        let pooled = |p: f64| 0.5 * t0.expected_revenue(p, &x) + 0.5 * t1.expected_revenue(p, &x);
        let best = (0..=5000)
            .map(|i| i as f64 * 1e-3)
            .max_by(|a, b| pooled(*a).total_cmp(&pooled(*b)))
            .unwrap();
        // the pooled maximizer can sit halfway between two grid points
        assert!((oracle.p0 - best).abs() <= 1e-3 + 1e-9, "{} {}", oracle.p0, best);
    }

    #[test]
    fn grid_oracle_rejects_bad_step() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.3).unwrap();
        let x = augment(&[0.0; 3]).unwrap();
        assert!(prob.grid_oracle_prices(&x, 0.0, 3.0).is_err());
    }

    #[test]
    fn threshold_formula() {
        assert_abs_diff_eq!(
            switch_threshold(0.799, 1.0, 100),
            0.799 - (100f64.ln() / 100.0).sqrt(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(switch_threshold(0.799, 1.0, 100), 0.5843, epsilon = 2e-4);
        assert_eq!(switch_threshold(0.799, 0.0, 100), 0.799);
    }

    #[test]
    fn plug_in_consistency_with_truth() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.799).unwrap();
        let big_t0 = 100_000_000;
        let tau = switch_threshold(0.799, 1.0, big_t0);
        for x in [[0.0, 0.0, 0.0], [1.0, -1.0, 0.5], [-2.0, 1.5, -0.3], [0.5, 0.5, 0.5]] {
            let xt = augment(&x).unwrap();
            if prob.unconstrained_gap(&xt) <= tau {
                let est = policy_prices_estimated(&prob, 1.0, big_t0, 1e9, &xt).unwrap();
                let opt = prob.optimal_fair_prices(&xt).unwrap();
                assert_abs_diff_eq!(est.p0, opt.p0, epsilon = 1e-12);
                assert_abs_diff_eq!(est.p1, opt.p1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_margin_is_plug_in_closed_form() {
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.3).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [-1.0, -1.0, 0.0]] {
            let xt = augment(&x).unwrap();
            let est = policy_prices_estimated(&prob, 0.0, 50, 1e9, &xt).unwrap();
            let opt = prob.optimal_fair_prices(&xt).unwrap();
            assert_eq!(est, opt);
        }
    }

    #[test]
    fn tie_at_threshold_takes_unconstrained_branch() {
        // gap at x = 0 is exactly 0.5
        let (t0, t1) = sim_thetas();
        let prob = FairPricingProblem::new(&t0, &t1, 0.5, 0.5).unwrap();
        let x = augment(&[0.0; 3]).unwrap();
        let pair = policy_prices_estimated(&prob, 0.0, 10, 3.0, &x).unwrap();
        assert!(!pair.constrained);
    }

    #[test]
    fn continuity_at_switch() {
        let (t0, t1) = sim_thetas();
        let x = augment(&[0.3, -0.7, 0.2]).unwrap();
        let probe = FairPricingProblem::new(&t0, &t1, 0.5, 0.0).unwrap();
        let delta = probe.unconstrained_gap(&x);
        let prob = FairPricingProblem::new(&t0, &t1, 0.37, delta).unwrap();
        let a = prob.unconstrained_prices(&x);
        let b = prob.constrained_prices(&x).unwrap();
        assert_abs_diff_eq!(a.p0, b.p0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.p1, b.p1, epsilon = 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn closed_form_is_fair_and_beats_grid(
            a0 in -3.0f64..-0.1, a1 in -3.0f64..-0.1,
            b0 in proptest::collection::vec(-3.0f64..3.0, 3),
            b1 in proptest::collection::vec(-3.0f64..3.0, 3),
            q in 0.1f64..0.9, delta in 0.0f64..1.0,
            x in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let t0 = DemandParams::new(a0, b0).unwrap();
            let t1 = DemandParams::new(a1, b1).unwrap();
            let prob = FairPricingProblem::new(&t0, &t1, q, delta).unwrap();
            let xt = augment(&x).unwrap();
            let cf = prob.optimal_fair_prices(&xt).unwrap();
            let grid = prob.grid_oracle_prices(&xt, 1e-2, 5.0).unwrap();
            proptest::prop_assert!(cf.gap() <= delta + FAIRNESS_TOL);
            proptest::prop_assert!(grid.gap() <= delta + FAIRNESS_TOL);
            let (rc, rg) = (prob.weighted_revenue(&cf, &xt), prob.weighted_revenue(&grid, &xt));
            proptest::prop_assert!(rc >= rg - 1e-9 * (1.0 + rg.abs()));
            let est = policy_prices_estimated(&prob, 0.5, 100, 5.0, &xt).unwrap();
            proptest::prop_assert!(est.gap() <= delta + FAIRNESS_TOL);
        }
    }
}
