//! Hand-built instances with analytically known behavior.
//!
//! The linear-regret instance is a one-feature market where buyers who never
//! learn the fair gap always misreport, so any fair seller loses a constant
//! amount of revenue per step. The uninformative-price instance is a
//! Bernoulli-demand family indexed by a slope `alpha` whose demand curves all
//! cross at the optimal prices of `alpha = -2/5`.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::buyers::{BuyerBehavior, BuyerMode};
use crate::error::{Error, Result};
use crate::harness::{aggregate, loglog_slope, run_replications};
use crate::model::{augment, DemandKind, DemandParams, Environment, FeatureSampler, Group, GroupRule};
use crate::policies::{SellerConfig, SellerPolicy};
use crate::solver::FairPricingProblem;

pub const LINEAR_REGRET_DELTA: f64 = 0.25;
pub const LINEAR_REGRET_COST: f64 = 5.0 / 16.0;

pub const UNINFORMATIVE_DELTA: f64 = 0.25;
pub const UNINFORMATIVE_ALPHA_RANGE: (f64, f64) = (-0.5, -0.2);
pub const UNINFORMATIVE_PRICE_BOX: (f64, f64) = (0.5, 9.0 / 8.0);
/// Slope at which every demand curve passes through the optimal prices.
pub const UNINFORMATIVE_ALPHA: f64 = -0.4;

/// `E y_0 = 2 + x - p`, `E y_1 = 2 + x - 2p`, `x ~ U(-1/2, 1/2)`, `q = 1/2`.
pub fn theorem1_env() -> Environment {
    Environment::new(
        DemandParams::new(-1.0, vec![2.0, 1.0]).expect("valid parameters"),
        DemandParams::new(-2.0, vec![2.0, 1.0]).expect("valid parameters"),
        0.5,
        1.0,
    )
    .and_then(|e| e.with_features(FeatureSampler::Uniform { low: -0.5, high: 0.5 }))
    .expect("valid environment")
}

/// Closed-form optimal fair prices of [`theorem1_env`] at `x`.
pub fn theorem1_optimal_prices(x: f64) -> (f64, f64) {
    (x / 3.0 + 5.0 / 6.0, x / 3.0 + 7.0 / 12.0)
}

/// Closed-form unconstrained optima of [`theorem1_env`] at `x`.
pub fn theorem1_unconstrained_prices(x: f64) -> (f64, f64) {
    ((2.0 + x) / 2.0, (2.0 + x) / 4.0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    let (lo, hi) = UNINFORMATIVE_ALPHA_RANGE;
    if !(alpha >= lo && alpha <= hi) {
        return Err(Error::config(format!("alpha = {alpha} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Mean demand `1/2 + alpha [(G + 1) p - 1 - G/2]`.
pub fn theorem3_mean_demand(alpha: f64, price: f64, group: Group) -> f64 {
    let g = group.as_f64();
    0.5 + alpha * ((g + 1.0) * price - 1.0 - g / 2.0)
}

/// The uninformative-price family written as a linear demand model without
/// features: group 0 has slope `alpha` and intercept `1/2 - alpha`, group 1
/// slope `2 alpha` and intercept `1/2 - 3 alpha / 2`. Bernoulli demand,
/// alternating groups starting with group 1 at `t = 1`.
pub fn theorem3_env(alpha: f64) -> Result<Environment> {
    check_alpha(alpha)?;
    let mut env = Environment::new(
        DemandParams::new(alpha, vec![0.5 - alpha])?,
        DemandParams::new(2.0 * alpha, vec![0.5 - 1.5 * alpha])?,
        0.5,
        0.0,
    )?;
    env.demand_kind = DemandKind::Bernoulli;
    env.group_rule = GroupRule::Alternating;
    Ok(env)
}

/// `7/12 - 1/(6 alpha) - G/4`.
pub fn theorem3_optimal_price(alpha: f64, group: Group) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(7.0 / 12.0 - 1.0 / (6.0 * alpha) - group.as_f64() / 4.0)
}

fn revenue(alpha: f64, price: f64, group: Group) -> f64 {
    price * theorem3_mean_demand(alpha, price, group)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub description: &'static str,
    pub evaluated: usize,
    pub failures: usize,
    /// Smallest slack over all evaluated points; negative means violated.
    pub worst_margin: f64,
}

impl PropertyCheck {
    fn new(name: &'static str, description: &'static str) -> Self {
        Self {
            name,
            description,
            evaluated: 0,
            failures: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, margin: f64, tol: f64) {
        self.evaluated += 1;
        if margin < -tol || !margin.is_finite() {
            self.failures += 1;
        }
        self.worst_margin = self.worst_margin.min(margin);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.evaluated > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub alpha_points: usize,
    pub price_points: usize,
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(PropertyCheck::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "uninformative-price instance properties ({} alphas x {} prices)\n",
            self.alpha_points, self.price_points
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<5} {:<28} evaluated={:<6} failures={:<4} worst_margin={:.3e}  {}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.evaluated,
                c.failures,
                c.worst_margin,
                c.description
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["check", "evaluated", "failures", "worst_margin", "passed"])?;
        for c in &self.checks {
            w.write_record([
                c.name.to_string(),
                c.evaluated.to_string(),
                c.failures.to_string(),
                format!("{:e}", c.worst_margin),
                c.passed().to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "property report csv".into(),
            source,
        })?;
        Ok(())
    }
}

/// Evenly spaced grid with both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Default 50 x 50 grids over the slope interval and the price box.
pub fn default_property_grids() -> (Vec<f64>, Vec<f64>) {
    let (a0, a1) = UNINFORMATIVE_ALPHA_RANGE;
    let (p0, p1) = UNINFORMATIVE_PRICE_BOX;
    (linspace(a0, a1, 50), linspace(p0, p1, 50))
}

const PROPERTY_TOL: f64 = 1e-12;

/// Brute-force check of the instance's structural inequalities on every
/// grid combination. Inequalities the algebra shows to be tight at an
/// endpoint of the slope interval are checked non-strictly up to `1e-12`.
pub fn verify_properties(alpha_grid: &[f64], price_grid: &[f64]) -> Result<PropertyReport> {
    for &a in alpha_grid {
        check_alpha(a)?;
    }
    let (lo, hi) = UNINFORMATIVE_PRICE_BOX;
    if price_grid.iter().any(|&p| !(p >= lo && p <= hi)) {
        return Err(Error::config("price grid leaves the price box"));
    }
    let a0 = UNINFORMATIVE_ALPHA;
    let p0_ref = theorem3_optimal_price(a0, Group::Zero)?;
    let p1_ref = theorem3_optimal_price(a0, Group::One)?;

    let mut crossing = PropertyCheck::new(
        "demand-crossing",
        "demand at the reference optimal prices equals 1/2 for every alpha",
    );
    let mut quad0 = PropertyCheck::new(
        "regret-quadratic-group0",
        "revenue loss on the constraint line >= (3/5)(p0* - p0)^2",
    );
    let mut quad1 = PropertyCheck::new(
        "regret-quadratic-group1",
        "revenue loss on the constraint line >= (3/5)(p1* - p1)^2",
    );
    let mut sep0 = PropertyCheck::new(
        "price-separation-group0",
        "|p0*(a) - p0*(a0)| >= (5/6)|a - a0|",
    );
    let mut sep1 = PropertyCheck::new(
        "price-separation-group1",
        "|p1*(a) - p1*(a0)| >= (5/6)|a - a0|",
    );
    let mut lip0 = PropertyCheck::new(
        "demand-lipschitz-group0",
        "|d(p,0,a) - d(p,0,a0)| <= 2|p0*(a0) - p||a - a0|",
    );
    let mut lip1 = PropertyCheck::new(
        "demand-lipschitz-group1",
        "|d(p,1,a) - d(p,1,a0)| <= 2|p1*(a0) - p||a - a0|",
    );
    let mut range = PropertyCheck::new("demand-range", "mean demand within [1/8, 3/4] on the price box");

    for &a in alpha_grid {
        let s0 = theorem3_optimal_price(a, Group::Zero)?;
        let s1 = theorem3_optimal_price(a, Group::One)?;
        crossing.record(-(theorem3_mean_demand(a, p0_ref, Group::Zero) - 0.5).abs(), PROPERTY_TOL);
        crossing.record(-(theorem3_mean_demand(a, p1_ref, Group::One) - 0.5).abs(), PROPERTY_TOL);
        if a != a0 {
            let rhs = 5.0 / 6.0 * (a - a0).abs();
            sep0.record((s0 - p0_ref).abs() - rhs, PROPERTY_TOL);
            sep1.record((s1 - p1_ref).abs() - rhs, PROPERTY_TOL);
        }
        let optimum = revenue(a, s0, Group::Zero) + revenue(a, s1, Group::One);
        for &p in price_grid {
            // both prices on the constraint line p0 - p1 = delta
            let (q0, q1) = (p, p - UNINFORMATIVE_DELTA);
            let loss = optimum - revenue(a, q0, Group::Zero) - revenue(a, q1, Group::One);
            quad0.record(loss - 0.6 * (s0 - q0).powi(2), PROPERTY_TOL);
            quad1.record(loss - 0.6 * (s1 - q1).powi(2), PROPERTY_TOL);

            let d0 = (theorem3_mean_demand(a, p, Group::Zero) - theorem3_mean_demand(a0, p, Group::Zero)).abs();
            let d1 = (theorem3_mean_demand(a, p, Group::One) - theorem3_mean_demand(a0, p, Group::One)).abs();
            lip0.record(2.0 * (p0_ref - p).abs() * (a - a0).abs() - d0, PROPERTY_TOL);
            lip1.record(2.0 * (p1_ref - p).abs() * (a - a0).abs() - d1, PROPERTY_TOL);

            for g in Group::BOTH {
                let m = theorem3_mean_demand(a, p, g);
                range.record((m - 0.125).min(0.75 - m), PROPERTY_TOL);
            }
        }
    }
    Ok(PropertyReport {
        alpha_points: alpha_grid.len(),
        price_points: price_grid.len(),
        checks: vec![crossing, quad0, quad1, sep0, sep1, lip0, lip1, range],
    })
}

/// Linear-growth probe on [`theorem1_env`]: the clairvoyant fair seller
/// facing buyers who always misreport.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthProbe {
    pub horizon: usize,
    pub reps: usize,
    pub final_mean_regret: f64,
    /// Fitted regret per step, `final / T`.
    pub per_step: f64,
    pub loglog_slope: f64,
}

pub fn theorem1_growth_probe(horizon: usize, reps: usize, seed: u64) -> Result<GrowthProbe> {
    let env = theorem1_env();
    let seller = SellerConfig {
        horizon,
        price_cap: 3.0,
        tau: 1.0,
        c_delta: 0.0,
        delta: LINEAR_REGRET_DELTA,
        q: None,
        policy: SellerPolicy::Clairvoyant,
    };
    let buyers = BuyerBehavior::new(BuyerMode::AlwaysManipulate, LINEAR_REGRET_COST);
    let trajectories = run_replications(&env, &seller, &buyers, seed, reps, 1)?;
    let curve = aggregate(&trajectories)?;
    let final_mean_regret = curve.last_mean();
    let t_min = (horizon / 100).max(10);
    Ok(GrowthProbe {
        horizon,
        reps,
        final_mean_regret,
        per_step: final_mean_regret / horizon as f64,
        loglog_slope: loglog_slope(&curve, t_min)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Every instance check; the caller decides how to report failures.
pub fn run_instance_checks() -> Result<(Vec<InstanceCheck>, PropertyReport, GrowthProbe)> {
    let (alphas, prices) = default_property_grids();
    run_instance_checks_on(&alphas, &prices)
}

/// [`run_instance_checks`] with caller-supplied slope and price grids for the
/// uninformative instance. Slopes outside the admissible interval are errors.
pub fn run_instance_checks_on(
    alphas: &[f64],
    prices: &[f64],
) -> Result<(Vec<InstanceCheck>, PropertyReport, GrowthProbe)> {
    let report = verify_properties(alphas, prices)?;
    let mut out = Vec::new();

    let env = theorem1_env();
    let prob = FairPricingProblem::new(&env.theta0, &env.theta1, env.q, LINEAR_REGRET_DELTA)?;
    let mut worst = 0.0f64;
    let mut worst_unconstrained = 0.0f64;
    for x in linspace(-0.5, 0.5, 100) {
        let xa = augment(&[x])?;
        let pair = prob.optimal_fair_prices(&xa)?;
        let (e0, e1) = theorem1_optimal_prices(x);
        worst = worst.max((pair.p0 - e0).abs()).max((pair.p1 - e1).abs());
        let un = prob.unconstrained_prices(&xa);
        let (u0, u1) = theorem1_unconstrained_prices(x);
        worst_unconstrained = worst_unconstrained.max((un.p0 - u0).abs()).max((un.p1 - u1).abs());
    }
    out.push(InstanceCheck {
        name: "linear-regret fair prices".into(),
        passed: worst <= 1e-12,
        detail: format!("max deviation from (x/3+5/6, x/3+7/12) over 100 points: {worst:.2e}"),
    });
    out.push(InstanceCheck {
        name: "linear-regret unconstrained prices".into(),
        passed: worst_unconstrained <= 1e-12,
        detail: format!("max deviation from ((2+x)/2, (2+x)/4): {worst_unconstrained:.2e}"),
    });
    let (u0, u1) = theorem1_unconstrained_prices(0.0);
    out.push(InstanceCheck {
        name: "linear-regret manipulation incentive".into(),
        passed: u0 - u1 > LINEAR_REGRET_COST,
        detail: format!("unconstrained gap {} vs cost {}", u0 - u1, LINEAR_REGRET_COST),
    });

    let p0 = theorem3_optimal_price(UNINFORMATIVE_ALPHA, Group::Zero)?;
    let p1 = theorem3_optimal_price(UNINFORMATIVE_ALPHA, Group::One)?;
    out.push(InstanceCheck {
        name: "uninformative optimal prices".into(),
        passed: p0 == 1.0 && p1 == 0.75,
        detail: format!("p0*(-2/5) = {p0}, p1*(-2/5) = {p1}"),
    });

    let mut worst_solver = 0.0f64;
    for &a in alphas {
        let env = theorem3_env(a)?;
        let prob = FairPricingProblem::new(&env.theta0, &env.theta1, env.q, UNINFORMATIVE_DELTA)?;
        let pair = prob.optimal_fair_prices(&augment(&[])?)?;
        worst_solver = worst_solver
            .max((pair.p0 - theorem3_optimal_price(a, Group::Zero)?).abs())
            .max((pair.p1 - theorem3_optimal_price(a, Group::One)?).abs());
    }
    out.push(InstanceCheck {
        name: "uninformative prices match generic solver".into(),
        passed: worst_solver <= 1e-12,
        detail: format!("max deviation over {} slopes: {worst_solver:.2e}", alphas.len()),
    });

    out.push(InstanceCheck {
        name: "uninformative instance properties".into(),
        passed: report.passed(),
        detail: format!(
            "{} checks on a {}x{} grid",
            report.checks.len(),
            alphas.len(),
            prices.len()
        ),
    });

    let probe = theorem1_growth_probe(10_000, 5, 1)?;
    out.push(InstanceCheck {
        name: "linear-regret growth".into(),
        passed: probe.loglog_slope >= 0.9,
        detail: format!(
            "log-log slope {:.4}, regret per step {:.4} (fair prices lose 7/96 = {:.4} per step in expectation)",
            probe.loglog_slope,
            probe.per_step,
            7.0 / 96.0
        ),
    });
    Ok((out, report, probe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::FairPricingProblem;

    #[test]
    fn uninformative_reference_prices() {
        assert_eq!(theorem3_optimal_price(-0.4, Group::Zero).unwrap(), 1.0);
        assert_eq!(theorem3_optimal_price(-0.4, Group::One).unwrap(), 0.75);
        let p = theorem3_optimal_price(-0.5, Group::Zero).unwrap();
        assert!((p - 11.0 / 12.0).abs() < 1e-15);
        assert!(theorem3_optimal_price(-0.6, Group::Zero).is_err());
        assert!(theorem3_env(-0.1).is_err());
    }

    #[test]
    fn demand_curves_cross_at_reference_prices() {
        for a in linspace(-0.5, -0.2, 50) {
            assert!((theorem3_mean_demand(a, 1.0, Group::Zero) - 0.5).abs() < 1e-15);
            assert!((theorem3_mean_demand(a, 0.75, Group::One) - 0.5).abs() < 1e-15);
            for p in linspace(0.5, 1.125, 20) {
                for g in Group::BOTH {
                    let m = theorem3_mean_demand(a, p, g);
                    assert!((0.125 - 1e-12..=0.75 + 1e-12).contains(&m));
                }
            }
        }
    }

    #[test]
    fn linear_form_matches_native_mean() {
        for a in linspace(-0.5, -0.2, 7) {
            let env = theorem3_env(a).unwrap();
            let x = augment(&[]).unwrap();
            for p in linspace(0.5, 1.125, 9) {
                for g in Group::BOTH {
                    let lin = env.expected_demand(g, p, &x);
                    assert!((lin - theorem3_mean_demand(a, p, g)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn solver_agrees_with_closed_form() {
        for a in linspace(-0.5, -0.2, 31) {
            let env = theorem3_env(a).unwrap();
            let prob = FairPricingProblem::new(&env.theta0, &env.theta1, 0.5, 0.25).unwrap();
            let pair = prob.optimal_fair_prices(&augment(&[]).unwrap()).unwrap();
            assert!(pair.constrained);
            assert!((pair.p0 - theorem3_optimal_price(a, Group::Zero).unwrap()).abs() < 1e-12);
            assert!((pair.p1 - theorem3_optimal_price(a, Group::One).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn properties_hold_on_default_grid() {
        let (a, p) = default_property_grids();
        let report = verify_properties(&a, &p).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        // the separation bound is tight at the steep end of the interval
        let sep = report.checks.iter().find(|c| c.name == "price-separation-group0").unwrap();
        assert!(sep.worst_margin.abs() < 1e-12);
        assert_eq!(sep.evaluated, a.iter().filter(|&&x| x != UNINFORMATIVE_ALPHA).count());
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + report.checks.len());
    }

    #[test]
    fn quadratic_bound_is_tight_at_the_optimum() {
        let a = -0.5;
        let s0 = theorem3_optimal_price(a, Group::Zero).unwrap();
        let report = verify_properties(&[a], &[s0]).unwrap();
        let quad = &report.checks[1];
        assert!(quad.worst_margin.abs() < 1e-12);
        assert!(quad.passed());
    }

    #[test]
    fn verify_rejects_out_of_range_inputs() {
        assert!(verify_properties(&[-0.7], &[0.8]).is_err());
        assert!(verify_properties(&[-0.3], &[2.0]).is_err());
    }

    #[test]
    fn violated_property_is_reported() {
        let mut c = PropertyCheck::new("x", "y");
        c.record(0.1, 1e-12);
        c.record(-0.2, 1e-12);
        assert!(!c.passed());
        assert_eq!(c.worst_margin, -0.2);
    }

    #[test]
    fn linear_regret_closed_forms() {
        let env = theorem1_env();
        let prob = FairPricingProblem::new(&env.theta0, &env.theta1, 0.5, 0.25).unwrap();
        for x in linspace(-0.5, 0.5, 100) {
            let pair = prob.optimal_fair_prices(&augment(&[x]).unwrap()).unwrap();
            let (e0, e1) = theorem1_optimal_prices(x);
            assert!((pair.p0 - e0).abs() <= 1e-12);
            assert!((pair.p1 - e1).abs() <= 1e-12);
        }
        let (u0, u1) = theorem1_unconstrained_prices(0.0);
        assert!(u0 - u1 - LINEAR_REGRET_COST > 0.0);
    }

    #[test]
    fn growth_probe_is_linear() {
        let probe = theorem1_growth_probe(4000, 2, 3).unwrap();
        assert!(probe.loglog_slope >= 0.9, "{probe:?}");
        // expected loss per step is 7/96
        assert!((probe.per_step - 7.0 / 96.0).abs() < 0.01, "{probe:?}");
    }
}
