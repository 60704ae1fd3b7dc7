//! Simulation loop, regret accounting and replication statistics.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::buyers::{BuyerBehavior, BuyerPopulation, PublicRecord};
use crate::error::{Error, Result};
use crate::estimation::SaleRecord;
use crate::model::{augment, Environment, Group};
use crate::policies::{clairvoyant_prices, ExploreThenCommit, Phase, SellerConfig, SellerPolicy};
use crate::rng::{replication_seed, stream, Stream};
use crate::solver::PricePair;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// 1-based step index.
    pub t: usize,
    pub x: Vec<f64>,
    pub true_group: Group,
    pub reported_group: Group,
    pub offered_price: f64,
    pub demand: f64,
    /// Price a group-0 buyer at this `x` would pay, honoring its report decision.
    pub p0_offered: f64,
    /// Price a group-1 buyer at this `x` would pay.
    pub p1_offered: f64,
    pub instance_regret: f64,
    pub exploiting: bool,
    /// Gap perceived by a learning group-0 buyer at this `x`.
    pub delta_hat: Option<f64>,
    /// Gap the seller actually posts between the two reports at this `x`.
    pub posted_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
struct CsvRow {
    t: usize,
    true_group: Group,
    reported_group: Group,
    offered_price: f64,
    p0_offered: f64,
    p1_offered: f64,
    instance_regret: f64,
    cum_regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub outcomes: Vec<StepOutcome>,
    pub cum_regret: Vec<f64>,
    /// True when the realized buyer misreported its group.
    pub manipulation_flags: Vec<bool>,
    /// Exploration length (0 for the clairvoyant seller).
    pub exploration_length: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn final_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (o, &cum) in self.outcomes.iter().zip(&self.cum_regret) {
            w.serialize(CsvRow {
                t: o.t,
                true_group: o.true_group,
                reported_group: o.reported_group,
                offered_price: o.offered_price,
                p0_offered: o.p0_offered,
                p1_offered: o.p1_offered,
                instance_regret: o.instance_regret,
                cum_regret: cum,
            })?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "trajectory csv".into(),
            source,
        })?;
        Ok(())
    }
}

enum Seller {
    Learning(Box<ExploreThenCommit>),
    Clairvoyant,
}

/// Runs one replication.
///
/// Each step draws the buyer's features and true group, lets the buyer pick
/// a report, prices it, realizes demand from the true group's parameters and
/// releases `(x, reported group, price)`. Regret compares the expected
/// revenue of the prices both groups would face at this `x` against the
/// clairvoyant fair prices.
pub fn run_episode(
    env: &Environment,
    seller_config: &SellerConfig,
    behavior: &BuyerBehavior,
    seed: u64,
) -> Result<Trajectory> {
    env.validate()?;
    let dim = env.dim();
    let horizon = seller_config.horizon;
    let mut seller = match seller_config.policy {
        SellerPolicy::ExploreThenCommit => {
            Seller::Learning(Box::new(ExploreThenCommit::new(seller_config.clone(), dim, env.q)?))
        }
        SellerPolicy::Clairvoyant => {
            seller_config.validate(dim)?;
            Seller::Clairvoyant
        }
    };
    let exploration_length = match &seller {
        Seller::Learning(s) => s.exploration_length(),
        Seller::Clairvoyant => 0,
    };
    let mut buyers = BuyerPopulation::new(behavior.clone(), seed)?;

    let mut rng_features = stream(seed, Stream::Features);
    let mut rng_groups = stream(seed, Stream::Groups);
    let mut rng_noise = stream(seed, Stream::Noise);
    let mut rng_price = stream(seed, Stream::ExplorationPrice);

    let delta = seller_config.delta;
    let mut public: Vec<PublicRecord> = Vec::with_capacity(horizon);
    let mut outcomes = Vec::with_capacity(horizon);
    let mut cum_regret = Vec::with_capacity(horizon);
    let mut flags = Vec::with_capacity(horizon);
    let mut running = 0.0;

    for t in 1..=horizon {
        let x = env.sample_features(&mut rng_features);
        let true_group = env.sample_group(t, &mut rng_groups);
        let xa = augment(&x)?;
        let optimal = clairvoyant_prices(env, delta, &xa)?;

        let exploiting = match &seller {
            Seller::Learning(s) => s.phase() == Phase::Exploitation,
            Seller::Clairvoyant => true,
        };
        let (posted, decision) = if exploiting {
            buyers.begin_exploitation_step(&public)?;
            let pair = match &seller {
                Seller::Learning(s) => s.price_pair(&xa)?,
                Seller::Clairvoyant => optimal,
            };
            (pair, buyers.group0_decision(&x, true)?)
        } else {
            let p = match &seller {
                Seller::Learning(s) => s.exploration_price(&mut rng_price)?,
                Seller::Clairvoyant => unreachable!("clairvoyant seller never explores"),
            };
            let pair = PricePair {
                p0: p,
                p1: p,
                constrained: false,
            };
            (pair, buyers.group0_decision(&x, false)?)
        };

        let p0_offered = if decision.misreport { posted.p1 } else { posted.p0 };
        let p1_offered = posted.p1;
        let reported_group = match true_group {
            Group::Zero if decision.misreport => Group::One,
            g => g,
        };
        let offered_price = posted.get(reported_group);
        let demand = env.realize_demand(true_group, offered_price, &xa, &mut rng_noise)?;

        if let Seller::Learning(s) = &mut seller {
            // during exploration the report equals the true group
            s.observe(SaleRecord {
                x: x.clone(),
                group: reported_group,
                price: offered_price,
                demand,
            })?;
        }
        public.push(PublicRecord {
            x: x.clone(),
            reported_group,
            price: offered_price,
        });

        let q = env.q;
        let regret = q
            * (env.expected_revenue(Group::Zero, optimal.p0, &xa)
                - env.expected_revenue(Group::Zero, p0_offered, &xa))
            + (1.0 - q)
                * (env.expected_revenue(Group::One, optimal.p1, &xa)
                    - env.expected_revenue(Group::One, p1_offered, &xa));
        running += regret;
        cum_regret.push(running);
        flags.push(reported_group != true_group);
        outcomes.push(StepOutcome {
            t,
            x,
            true_group,
            reported_group,
            offered_price,
            demand,
            p0_offered,
            p1_offered,
            instance_regret: regret,
            exploiting,
            delta_hat: decision.delta_hat,
            posted_gap: posted.gap(),
        });
    }

    Ok(Trajectory {
        outcomes,
        cum_regret,
        manipulation_flags: flags,
        exploration_length,
    })
}

/// Runs `reps` replications with seeds `base_seed + r` on up to `jobs` threads.
/// Results are in replication order regardless of scheduling.
pub fn run_replications(
    env: &Environment,
    seller_config: &SellerConfig,
    behavior: &BuyerBehavior,
    base_seed: u64,
    reps: usize,
    jobs: usize,
) -> Result<Vec<Trajectory>> {
    run_replications_with(env, seller_config, behavior, base_seed, reps, jobs, |_, traj| Ok(traj))
}

/// Like [`run_replications`], but reduces each trajectory with `summarize`
/// on the worker thread so long horizons need not be held in memory.
pub fn run_replications_with<S, F>(
    env: &Environment,
    seller_config: &SellerConfig,
    behavior: &BuyerBehavior,
    base_seed: u64,
    reps: usize,
    jobs: usize,
    summarize: F,
) -> Result<Vec<S>>
where
    S: Send,
    F: Fn(usize, Trajectory) -> Result<S> + Sync,
{
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| summarize(r, run_episode(env, seller_config, behavior, replication_seed(base_seed, r))?))
            .collect()
    })
}

/// Per-replication digest kept after the step-level trajectory is dropped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub rep: usize,
    pub seed: u64,
    pub exploration_length: usize,
    pub cum_regret: Vec<f64>,
    /// Group-0 buyers arriving after exploration.
    pub group0_exploit_buyers: usize,
    pub manipulations: usize,
    /// Steps `T/2..=T`.
    pub late_window: WindowStats,
}

impl ReplicationSummary {
    pub fn new(rep: usize, seed: u64, trajectory: &Trajectory) -> Self {
        let exploiting0 = trajectory
            .outcomes
            .iter()
            .filter(|o| o.exploiting && o.true_group == Group::Zero);
        let (mut buyers, mut manipulations) = (0, 0);
        for o in exploiting0 {
            buyers += 1;
            manipulations += usize::from(o.reported_group == Group::One);
        }
        let t = trajectory.len();
        Self {
            rep,
            seed,
            exploration_length: trajectory.exploration_length,
            cum_regret: trajectory.cum_regret.clone(),
            group0_exploit_buyers: buyers,
            manipulations,
            late_window: window_stats(trajectory, t / 2, t),
        }
    }

    pub fn final_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }

    /// Manipulation share among post-exploration group-0 buyers.
    pub fn manipulation_rate(&self) -> Option<f64> {
        (self.group0_exploit_buyers > 0).then(|| self.manipulations as f64 / self.group0_exploit_buyers as f64)
    }
}

/// Runs replications keeping only [`ReplicationSummary`] values.
pub fn run_summaries(
    env: &Environment,
    seller_config: &SellerConfig,
    behavior: &BuyerBehavior,
    base_seed: u64,
    reps: usize,
    jobs: usize,
) -> Result<Vec<ReplicationSummary>> {
    run_replications_with(env, seller_config, behavior, base_seed, reps, jobs, |r, traj| {
        Ok(ReplicationSummary::new(r, replication_seed(base_seed, r), &traj))
    })
}

pub fn aggregate_summaries(summaries: &[ReplicationSummary]) -> Result<RegretCurve> {
    let paths: Vec<&[f64]> = summaries.iter().map(|s| s.cum_regret.as_slice()).collect();
    aggregate_paths(&paths)
}

/// Pointwise mean and standard error of cumulative regret.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretCurve {
    pub t: Vec<usize>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub reps: usize,
}

impl RegretCurve {
    pub fn last_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }
}

/// Aggregates cumulative-regret paths of equal length.
pub fn aggregate_paths(paths: &[&[f64]]) -> Result<RegretCurve> {
    let first = paths.first().ok_or(Error::Empty("trajectory list"))?;
    let len = first.len();
    if paths.iter().any(|p| p.len() != len) {
        return Err(Error::config("trajectories have different lengths"));
    }
    let n = paths.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut se = Vec::with_capacity(len);
    for i in 0..len {
        let m = paths.iter().map(|p| p[i]).sum::<f64>() / n;
        let s = if paths.len() > 1 {
            let var = paths.iter().map(|p| (p[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        mean.push(m);
        se.push(s);
    }
    Ok(RegretCurve {
        t: (1..=len).collect(),
        mean,
        se,
        reps: paths.len(),
    })
}

pub fn aggregate(trajectories: &[Trajectory]) -> Result<RegretCurve> {
    let paths: Vec<&[f64]> = trajectories.iter().map(|t| t.cum_regret.as_slice()).collect();
    aggregate_paths(&paths)
}

/// Least-squares slope of `log(mean)` against `log(t)` over `t >= t_min`.
/// Nonpositive values are skipped with a warning.
pub fn loglog_slope(curve: &RegretCurve, t_min: usize) -> Result<f64> {
    let mut skipped = 0usize;
    let mut pts = Vec::new();
    for (&t, &m) in curve.t.iter().zip(&curve.mean) {
        if t < t_min || t == 0 {
            continue;
        }
        if m > 0.0 && m.is_finite() {
            pts.push(((t as f64).ln(), m.ln()));
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("loglog_slope: skipped {skipped} nonpositive regret values");
    }
    if pts.len() < 2 {
        return Err(Error::Empty("positive regret points for slope fit"));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Statistics over steps `start..=end` (1-based, inclusive).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowStats {
    pub window_start: usize,
    pub window_end: usize,
    pub group0_buyers: usize,
    /// Share of group-0 buyers reporting group 1; absent with no group-0 buyers.
    pub manipulation_rate: Option<f64>,
    /// Mean `|delta_hat - posted gap|` over steps where a gap was perceived.
    pub mean_abs_gap_error: Option<f64>,
}

pub fn window_stats(trajectory: &Trajectory, start: usize, end: usize) -> WindowStats {
    let lo = start.max(1);
    let hi = end.min(trajectory.len());
    let slice = if lo <= hi { &trajectory.outcomes[lo - 1..hi] } else { &[][..] };
    let group0: Vec<&StepOutcome> = slice.iter().filter(|o| o.true_group == Group::Zero).collect();
    let manip = group0.iter().filter(|o| o.reported_group == Group::One).count();
    let errors: Vec<f64> = slice
        .iter()
        .filter_map(|o| o.delta_hat.map(|d| (d - o.posted_gap).abs()))
        .collect();
    WindowStats {
        window_start: start,
        window_end: end,
        group0_buyers: group0.len(),
        manipulation_rate: (!group0.is_empty()).then(|| manip as f64 / group0.len() as f64),
        mean_abs_gap_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
    }
}

/// Fraction of group-0 buyers in `start..=end` who reported group 1.
pub fn manipulation_rate(trajectory: &Trajectory, start: usize, end: usize) -> Option<f64> {
    window_stats(trajectory, start, end).manipulation_rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buyers::{BuyerMode, OracleKind};
    use crate::model::DemandParams;

    fn sim_env() -> Environment {
        Environment::simulation_default(3, 0.5).unwrap()
    }

    fn thm1_env() -> Environment {
        Environment::new(
            DemandParams::new(-1.0, vec![2.0, 1.0]).unwrap(),
            DemandParams::new(-2.0, vec![2.0, 1.0]).unwrap(),
            0.5,
            1.0,
        )
        .unwrap()
        .with_features(crate::model::FeatureSampler::Uniform { low: -0.5, high: 0.5 })
        .unwrap()
    }

    #[test]
    fn clairvoyant_with_truthful_buyers_has_zero_regret() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(2000).clairvoyant();
        let traj = run_episode(&env, &seller, &BuyerBehavior::new(BuyerMode::Truthful, 0.8), 1).unwrap();
        assert_eq!(traj.len(), 2000);
        assert!(traj.final_regret().abs() < 1e-9);
        assert!(traj.outcomes.iter().all(|o| o.instance_regret >= -1e-9));
    }

    #[test]
    fn always_manipulate_on_linear_instance_grows_linearly() {
        let env = thm1_env();
        let mut seller = SellerConfig::simulation_default(10_000);
        seller.delta = 0.25;
        seller.price_cap = 3.0;
        let behavior = BuyerBehavior::new(BuyerMode::AlwaysManipulate, 5.0 / 16.0);
        let traj = run_episode(&env, &seller, &behavior, 5).unwrap();
        assert!(traj.final_regret() >= 0.04 * 10_000.0, "{}", traj.final_regret());
    }

    #[test]
    fn running_sum_matches_instance_regrets() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(3000);
        let traj = run_episode(&env, &seller, &BuyerBehavior::new(BuyerMode::AlwaysManipulate, 0.8), 2).unwrap();
        let mut s = 0.0;
        for (o, c) in traj.outcomes.iter().zip(&traj.cum_regret) {
            s += o.instance_regret;
            assert!((s - c).abs() < 1e-9);
        }
    }

    #[test]
    fn counterfactual_gap_and_offered_consistency() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(3000);
        let behavior = BuyerBehavior::new(BuyerMode::OracleLearner, 0.8).with_oracle(OracleKind::Linear);
        let traj = run_episode(&env, &seller, &behavior, 3).unwrap();
        for o in &traj.outcomes {
            assert!(o.p0_offered - o.p1_offered <= 0.799 + 1e-9);
            let expected = match o.true_group {
                Group::Zero => o.p0_offered,
                Group::One => o.p1_offered,
            };
            assert_eq!(o.offered_price, expected);
            if !o.exploiting {
                assert_eq!(o.reported_group, o.true_group);
                assert_eq!(o.p0_offered, o.p1_offered);
            }
        }
        assert_eq!(traj.outcomes.iter().filter(|o| !o.exploiting).count(), traj.exploration_length);
    }

    #[test]
    fn identical_seeds_give_identical_csv() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(1500);
        let behavior = BuyerBehavior::new(BuyerMode::OracleLearner, 0.8).with_oracle(OracleKind::Tree);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_episode(&env, &seller, &behavior, 11).unwrap().write_csv(&mut a).unwrap();
        run_episode(&env, &seller, &behavior, 11).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let header = String::from_utf8(a[..a.iter().position(|&c| c == b'\n').unwrap()].to_vec()).unwrap();
        assert_eq!(
            header,
            "t,true_group,reported_group,offered_price,p0_offered,p1_offered,instance_regret,cum_regret"
        );
    }

    #[test]
    fn common_random_numbers_across_behaviors() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(1500);
        let a = run_episode(&env, &seller, &BuyerBehavior::new(BuyerMode::Truthful, 0.8), 7).unwrap();
        let b = run_episode(&env, &seller, &BuyerBehavior::new(BuyerMode::AlwaysManipulate, 0.8), 7).unwrap();
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.x, y.x);
            assert_eq!(x.true_group, y.true_group);
        }
    }

    #[test]
    fn aggregate_standard_errors() {
        let p = vec![1.0, 2.0, 3.0];
        let c = aggregate_paths(&[&p]).unwrap();
        assert_eq!(c.se, vec![0.0; 3]);
        let c = aggregate_paths(&[&p, &p]).unwrap();
        assert_eq!(c.se, vec![0.0; 3]);
        assert_eq!(c.mean, p);
        let q = vec![3.0, 4.0, 5.0];
        let c = aggregate_paths(&[&p, &q]).unwrap();
        assert!((c.se[0] - 1.0).abs() < 1e-12);
        assert!(aggregate_paths(&[]).is_err());
        assert!(aggregate_paths(&[&p, &p[..2]]).is_err());
    }

    #[test]
    fn slope_on_power_laws() {
        let n = 1000;
        let sqrt: Vec<f64> = (1..=n).map(|t| 3.0 * (t as f64).sqrt()).collect();
        let lin: Vec<f64> = (1..=n).map(|t| 0.2 * t as f64).collect();
        let s = loglog_slope(&aggregate_paths(&[&sqrt]).unwrap(), 10).unwrap();
        assert!((s - 0.5).abs() < 1e-6);
        let s = loglog_slope(&aggregate_paths(&[&lin]).unwrap(), 10).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
        let mut with_zero = lin.clone();
        with_zero[500] = 0.0;
        let s = loglog_slope(&aggregate_paths(&[&with_zero]).unwrap(), 10).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(loglog_slope(&aggregate_paths(&[&vec![0.0; 10]]).unwrap(), 1).is_err());
    }

    #[test]
    fn manipulation_rates_for_fixed_behaviors() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(2000);
        let t = run_episode(&env, &seller, &BuyerBehavior::new(BuyerMode::AlwaysManipulate, 0.8), 4).unwrap();
        let t0 = t.exploration_length;
        assert_eq!(manipulation_rate(&t, t0 + 1, 2000), Some(1.0));
        let t = run_episode(&env, &seller, &BuyerBehavior::new(BuyerMode::Truthful, 0.8), 4).unwrap();
        assert_eq!(manipulation_rate(&t, t0 + 1, 2000), Some(0.0));
        assert_eq!(manipulation_rate(&t, 5000, 6000), None);
    }

    #[test]
    fn replications_match_single_runs() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(500);
        let behavior = BuyerBehavior::new(BuyerMode::AlwaysManipulate, 0.8);
        let reps = run_replications(&env, &seller, &behavior, 40, 3, 2).unwrap();
        for (r, traj) in reps.iter().enumerate() {
            let single = run_episode(&env, &seller, &behavior, 40 + r as u64).unwrap();
            assert_eq!(traj, &single);
        }
    }

    #[test]
    fn summaries_agree_with_full_trajectories() {
        let env = sim_env();
        let seller = SellerConfig::simulation_default(400);
        let behavior = BuyerBehavior::new(BuyerMode::AlwaysManipulate, 0.8);
        let full = run_replications(&env, &seller, &behavior, 3, 2, 1).unwrap();
        let short = run_summaries(&env, &seller, &behavior, 3, 2, 1).unwrap();
        for (r, (t, s)) in full.iter().zip(&short).enumerate() {
            assert_eq!(s.rep, r);
            assert_eq!(s.seed, 3 + r as u64);
            assert_eq!(s.cum_regret, t.cum_regret);
            assert_eq!(s.late_window, window_stats(t, 200, 400));
            assert_eq!(s.manipulation_rate(), Some(1.0));
        }
        assert_eq!(aggregate_summaries(&short).unwrap(), aggregate(&full).unwrap());
    }
}
