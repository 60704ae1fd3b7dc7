//! Per-group least squares on exploration data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{augment, DemandParams, Environment, Group};
use crate::rng::{replication_seed, stream, Stream};

/// Designs whose condition number exceeds this are rejected as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// One sale observed by the seller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaleRecord {
    pub x: Vec<f64>,
    pub group: Group,
    pub price: f64,
    pub demand: f64,
}

#[derive(Debug, Clone)]
pub struct EstimatedTheta {
    /// Estimate with `alpha` clamped below `-ALPHA_GUARD`.
    pub theta: DemandParams,
    /// Unclamped slope, kept for diagnostics.
    pub raw_alpha: f64,
    pub n_samples: usize,
    /// Smallest eigenvalue of the (unnormalized) design Gram matrix.
    pub min_eigenvalue: f64,
}

/// Output of [`least_squares`].
#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    pub min_gram_eigenvalue: f64,
    pub condition_number: f64,
    /// `(Z^T Z)^{-1}`, used for standard errors.
    pub gram_inverse: DMatrix<f64>,
}

impl LeastSquaresFit {
    pub fn residual_sum_of_squares(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }
}

/// Least squares through the SVD of the design.
///
/// Fails instead of falling back to a pseudo-inverse when the design is rank
/// deficient or its condition number exceeds [`MAX_CONDITION`].
pub fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>, context: &str) -> Result<LeastSquaresFit> {
    let (n, k) = design.shape();
    if n < k {
        return Err(Error::SingularFit {
            context: context.to_string(),
            reason: format!("{n} rows for {k} columns"),
        });
    }
    if design.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares input"));
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition_number = smax / smin;
    if !(smin > 0.0) || condition_number > MAX_CONDITION {
        return Err(Error::SingularFit {
            context: context.to_string(),
            reason: format!("condition number {condition_number:.3e}"),
        });
    }
    let solve = |rhs: &DVector<f64>| {
        svd.solve(rhs, 0.0).map_err(|e| Error::SingularFit {
            context: context.to_string(),
            reason: e.to_string(),
        })
    };
    let mut coef = solve(y)?;
    // iterative refinement; the iterative SVD stops short of full precision
    for _ in 0..2 {
        let r = y - design * &coef;
        coef += solve(&r)?;
    }
    let residuals = (y - design * &coef).iter().copied().collect();
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let inv_sq = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / (s * s)));
    let gram_inverse = v_t.transpose() * inv_sq * v_t;
    Ok(LeastSquaresFit {
        coef: coef.iter().copied().collect(),
        residuals,
        min_gram_eigenvalue: smin * smin,
        condition_number,
        gram_inverse,
    })
}

/// Least squares of demand on `(price, 1, x)` for one group.
pub fn fit_ols(records: &[SaleRecord], group: Group) -> Result<EstimatedTheta> {
    let rows: Vec<&SaleRecord> = records.iter().filter(|r| r.group == group).collect();
    let dim = match records.first() {
        Some(r) => r.x.len(),
        None => {
            return Err(Error::TooFewRecords {
                what: "demand fit",
                group,
                needed: 2,
                got: 0,
            })
        }
    };
    let needed = dim + 2;
    if rows.len() < needed {
        return Err(Error::TooFewRecords {
            what: "demand fit",
            group,
            needed,
            got: rows.len(),
        });
    }
    if rows.iter().any(|r| r.x.len() != dim) {
        return Err(Error::config("sale records have inconsistent feature dimensions"));
    }
    let design = DMatrix::from_fn(rows.len(), needed, |i, j| match j {
        0 => rows[i].price,
        1 => 1.0,
        _ => rows[i].x[j - 2],
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.demand));
    let fit = least_squares(&design, &y, &format!("group {group} demand"))?;
    let raw_alpha = fit.coef[0];
    Ok(EstimatedTheta {
        theta: DemandParams::clamped(raw_alpha, fit.coef[1..].to_vec())?,
        raw_alpha,
        n_samples: rows.len(),
        min_eigenvalue: fit.min_gram_eigenvalue,
    })
}

/// Lower bound on the smallest eigenvalue of `E[z z^T]` for
/// `z = (1, p, x)` with `p ~ Unif(0, B)` independent of centered `x`.
pub fn lambda0(price_cap: f64, lambda_min_sigma_x: f64) -> f64 {
    let b2 = price_cap * price_cap;
    let price_block = (b2 + 3.0 - (b2 * b2 + 3.0 * b2 + 9.0).sqrt()) / 6.0;
    price_block.min(lambda_min_sigma_x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorScalingRow {
    pub t0: usize,
    /// Mean `||theta_hat - theta||^2` per group.
    pub mean_sq_error: [f64; 2],
}

/// Runs only the uniform-price exploration phase of length `t0` and reports
/// the mean squared parameter error of both group fits over `reps` seeds.
pub fn error_scaling_probe(
    env: &Environment,
    t0_list: &[usize],
    reps: usize,
    price_cap: f64,
    seed: u64,
) -> Result<Vec<ErrorScalingRow>> {
    if t0_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("exploration lengths must be strictly ascending"));
    }
    if reps == 0 {
        return Err(Error::config("reps must be positive"));
    }
    t0_list
        .iter()
        .map(|&t0| {
            let mut sums = [0.0; 2];
            for rep in 0..reps {
                let records = explore(env, t0, price_cap, replication_seed(seed, rep))?;
                for g in Group::BOTH {
                    let est = fit_ols(&records, g)?;
                    sums[g.index()] += est.theta.squared_distance(env.theta(g));
                }
            }
            Ok(ErrorScalingRow {
                t0,
                mean_sq_error: sums.map(|s| s / reps as f64),
            })
        })
        .collect()
}

fn explore(env: &Environment, t0: usize, price_cap: f64, seed: u64) -> Result<Vec<SaleRecord>> {
    let mut feat = stream(seed, Stream::Features);
    let mut groups = stream(seed, Stream::Groups);
    let mut noise = stream(seed, Stream::Noise);
    let mut prices = stream(seed, Stream::ExplorationPrice);
    (1..=t0)
        .map(|t| {
            let x = env.sample_features(&mut feat);
            let group = env.sample_group(t, &mut groups);
            let price = prices.random_range(0.0..price_cap);
            let demand = env.realize_demand(group, price, &augment(&x)?, &mut noise)?;
            Ok(SaleRecord {
                x,
                group,
                price,
                demand,
            })
        })
        .collect()
}
