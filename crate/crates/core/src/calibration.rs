//! Loan-level data ingestion and ground-truth demand calibration.
//!
//! Group 0 is the non-majority group, price is the interest rate and demand
//! is the loan amount. Six borrower features enter the demand regression:
//! income, age, property value, debt-to-income ratio, combined loan-to-value
//! ratio and loan term.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimation::least_squares;
use crate::model::{DemandParams, Environment, FeatureSampler, Group};
use crate::rng::{stream, Stream};

pub const N_FEATURES: usize = 6;
pub const FEATURE_NAMES: [&str; N_FEATURES] = ["income", "age", "property_value", "dti", "cltv", "loan_term"];

/// Kept age range, in years.
pub const AGE_RANGE: (f64, f64) = (25.0, 74.0);
/// Kept debt-to-income range, in percent.
pub const DTI_RANGE: (f64, f64) = (20.0, 60.0);
/// Share removed from each tail of every trimmed column.
pub const TRIM_TAIL: f64 = 0.05;

const MINORITY_LABELS: [&str; 6] = [
    "Black or African American",
    "Asian",
    "American Indian or Alaska Native",
    "Native Hawaiian or Other Pacific Islander",
    "2 or more minority races",
    "Other minority race",
];
const UNCLASSIFIED_LABELS: [&str; 4] = ["Joint", "Free Form Text Only", "Race Not Available", "NA"];

/// Logical field to CSV header mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub group: String,
    pub price: String,
    pub demand: String,
    pub income: String,
    pub age: String,
    pub property_value: String,
    pub dti: String,
    pub cltv: String,
    pub loan_term: String,
    /// Group-column value of the majority group (group 1).
    pub majority_label: String,
    /// Multiplier applied to the demand column; the default turns dollars
    /// into units of $10,000.
    pub demand_scale: f64,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            group: "derived_race".into(),
            price: "interest_rate".into(),
            demand: "loan_amount".into(),
            income: "income".into(),
            age: "applicant_age".into(),
            property_value: "property_value".into(),
            dti: "debt_to_income_ratio".into(),
            cltv: "combined_loan_to_value_ratio".into(),
            loan_term: "loan_term".into(),
            majority_label: "White".into(),
            demand_scale: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoanRecord {
    pub group: Group,
    pub price: f64,
    pub demand: f64,
    /// In [`FEATURE_NAMES`] order, raw units.
    pub features: [f64; N_FEATURES],
    /// Set once the record has passed [`preprocess`].
    pub preprocessed: bool,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub records: Vec<LoanRecord>,
    /// Rows with unparsable or non-finite fields.
    pub malformed: usize,
    /// Rows whose group label is neither majority nor minority.
    pub unclassified: usize,
}

fn parse_number(s: &str) -> Option<f64> {
    let v: f64 = s.trim().trim_end_matches('%').trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// Numeric ages pass through; bands like `25-34` map to their midpoint.
/// Open-ended bands map outside the kept range so the age filter drops them.
pub fn parse_age(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix('<') {
        return parse_number(rest).map(|v| v - 5.0);
    }
    if let Some(rest) = s.strip_prefix('>') {
        return parse_number(rest).map(|v| v + 5.0);
    }
    parse_band(s).or_else(|| parse_number(s))
}

fn parse_band(s: &str) -> Option<f64> {
    let (a, b) = s.split_once(['-', '\u{2013}'])?;
    let a = parse_number(a)?;
    let b = parse_number(b.trim_start_matches('<'))?;
    Some((a + b) / 2.0)
}

/// Numeric ratios pass through; ranges like `20%-<30%` map to their midpoint
/// and open-ended ranges land outside the kept range.
pub fn parse_dti(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix('<') {
        return parse_number(rest).map(|v| v - 10.0);
    }
    if let Some(rest) = s.strip_prefix('>') {
        return parse_number(rest).map(|v| v + 10.0);
    }
    parse_band(s).or_else(|| parse_number(s))
}

enum GroupLabel {
    Known(Group),
    Unclassified,
    Invalid,
}

fn parse_group(s: &str, majority: &str) -> GroupLabel {
    let s = s.trim();
    if s == majority || s == "1" {
        GroupLabel::Known(Group::One)
    } else if s == "0" || MINORITY_LABELS.contains(&s) {
        GroupLabel::Known(Group::Zero)
    } else if s.is_empty() || UNCLASSIFIED_LABELS.contains(&s) {
        GroupLabel::Unclassified
    } else {
        GroupLabel::Invalid
    }
}

/// Reads loan records from CSV with a header row.
pub fn read_records<R: Read>(reader: R, map: &ColumnMap) -> Result<LoadReport> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Empty("loan csv"));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx_group = col(&map.group)?;
    let idx_price = col(&map.price)?;
    let idx_demand = col(&map.demand)?;
    let idx_feat = [
        col(&map.income)?,
        col(&map.age)?,
        col(&map.property_value)?,
        col(&map.dti)?,
        col(&map.cltv)?,
        col(&map.loan_term)?,
    ];

    let mut records = Vec::new();
    let mut malformed = 0;
    let mut unclassified = 0;
    let mut rows = 0usize;
    for row in rdr.records() {
        rows += 1;
        let Ok(row) = row else {
            malformed += 1;
            continue;
        };
        let field = |i: usize| row.get(i).unwrap_or("");
        let group = match parse_group(field(idx_group), &map.majority_label) {
            GroupLabel::Known(g) => g,
            GroupLabel::Unclassified => {
                unclassified += 1;
                continue;
            }
            GroupLabel::Invalid => {
                malformed += 1;
                continue;
            }
        };
        let parsed = (|| {
            let price = parse_number(field(idx_price))?;
            let demand = parse_number(field(idx_demand))? * map.demand_scale;
            let features = [
                parse_number(field(idx_feat[0]))?,
                parse_age(field(idx_feat[1]))?,
                parse_number(field(idx_feat[2]))?,
                parse_dti(field(idx_feat[3]))?,
                parse_number(field(idx_feat[4]))?,
                parse_number(field(idx_feat[5]))?,
            ];
            demand.is_finite().then_some((price, demand, features))
        })();
        match parsed {
            Some((price, demand, features)) => records.push(LoanRecord {
                group,
                price,
                demand,
                features,
                preprocessed: false,
            }),
            None => malformed += 1,
        }
    }
    if rows == 0 {
        return Err(Error::Empty("loan csv"));
    }
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed loan rows");
    }
    Ok(LoadReport {
        records,
        malformed,
        unclassified,
    })
}

pub fn load_csv(path: &Path, map: &ColumnMap) -> Result<LoadReport> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_records(file, map)
}

/// Lower and upper fences keeping all but `floor(tail n)` values in each tail.
pub fn percentile_fences(values: &[f64], tail: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((tail * n as f64).floor() as usize).min((n - 1) / 2);
    Some((sorted[k], sorted[n - 1 - k]))
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub records: Vec<LoanRecord>,
    /// Feature means of the kept records.
    pub feature_means: [f64; N_FEATURES],
    pub input: usize,
    pub after_filters: usize,
}

/// Filters age and debt-to-income, then drops rows outside the 5th/95th
/// percentile fences of loan amount, rate, income, property value, CLTV and
/// term. Fences come from the filtered set. Records already marked as
/// preprocessed pass through untouched, which makes the operation idempotent.
pub fn preprocess(records: &[LoanRecord]) -> Result<Preprocessed> {
    if records.is_empty() {
        return Err(Error::Empty("loan records"));
    }
    let in_range = |r: &LoanRecord| {
        let age = r.features[1];
        let dti = r.features[3];
        (AGE_RANGE.0..=AGE_RANGE.1).contains(&age) && (DTI_RANGE.0..=DTI_RANGE.1).contains(&dti)
    };
    let fresh: Vec<&LoanRecord> = records.iter().filter(|r| !r.preprocessed && in_range(r)).collect();
    let after_filters = fresh.len() + records.iter().filter(|r| r.preprocessed).count();

    let trimmed: [fn(&LoanRecord) -> f64; 6] = [
        |r| r.demand,
        |r| r.price,
        |r| r.features[0],
        |r| r.features[2],
        |r| r.features[4],
        |r| r.features[5],
    ];
    let fences: Vec<(f64, f64)> = trimmed
        .iter()
        .filter_map(|get| percentile_fences(&fresh.iter().map(|r| get(r)).collect::<Vec<_>>(), TRIM_TAIL))
        .collect();

    let kept: Vec<LoanRecord> = records
        .iter()
        .filter(|r| {
            r.preprocessed
                || (in_range(r)
                    && trimmed
                        .iter()
                        .zip(&fences)
                        .all(|(get, (lo, hi))| (*lo..=*hi).contains(&get(r))))
        })
        .map(|r| LoanRecord {
            preprocessed: true,
            ..r.clone()
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("records after preprocessing"));
    }
    let mut feature_means = [0.0; N_FEATURES];
    for r in &kept {
        for (m, f) in feature_means.iter_mut().zip(&r.features) {
            *m += f;
        }
    }
    for m in &mut feature_means {
        *m /= kept.len() as f64;
    }
    Ok(Preprocessed {
        records: kept,
        feature_means,
        input: records.len(),
        after_filters,
    })
}

/// Per-group fit expressed in raw feature units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFit {
    pub alpha: f64,
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub alpha_se: f64,
    pub intercept_se: f64,
    pub slope_se: Vec<f64>,
}

/// Fitted ground-truth demand. `theta0`/`theta1` use standardized features
/// `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub feature_names: Vec<String>,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub theta0: DemandParams,
    pub theta1: DemandParams,
    /// Pooled residual standard deviation.
    pub sigma_eps: f64,
    pub n0: usize,
    pub n1: usize,
    /// Standard errors of `(alpha, beta)` in standardized coordinates.
    pub se0: Vec<f64>,
    pub se1: Vec<f64>,
    pub raw0: RawFit,
    pub raw1: RawFit,
}

impl CalibratedModel {
    pub fn dim(&self) -> usize {
        self.feature_means.len()
    }

    /// Share of group-0 records.
    pub fn q(&self) -> f64 {
        self.n0 as f64 / (self.n0 + self.n1) as f64
    }

    pub fn theta(&self, group: Group) -> &DemandParams {
        match group {
            Group::Zero => &self.theta0,
            Group::One => &self.theta1,
        }
    }

    pub fn raw(&self, group: Group) -> &RawFit {
        match group {
            Group::Zero => &self.raw0,
            Group::One => &self.raw1,
        }
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.feature_means.iter().zip(&self.feature_scales))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Revenue-maximizing price at raw features, ignoring fairness.
    pub fn unconstrained_price_raw(&self, raw: &[f64], group: Group) -> Result<f64> {
        let x = crate::model::augment(&self.standardize(raw))?;
        Ok(self.theta(group).unconstrained_price(&x))
    }

    /// Market simulated from the fit: standardized features drawn
    /// independently from `U(-sqrt 3, sqrt 3)` (zero mean, unit variance).
    pub fn environment(&self, sigma_eps: f64) -> Result<Environment> {
        let r = 3f64.sqrt();
        Environment::new(self.theta0.clone(), self.theta1.clone(), self.q(), sigma_eps)?
            .with_features(FeatureSampler::Uniform { low: -r, high: r })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let model: Self = toml::from_str(s)?;
        if model.feature_means.len() != model.feature_scales.len() || model.theta0.dim() != model.dim() {
            return Err(Error::config("calibrated model dimensions disagree"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&s)
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Per-group least squares of demand on price, an intercept and the
/// standardized features.
pub fn calibrate_demand(records: &[LoanRecord]) -> Result<CalibratedModel> {
    let d = N_FEATURES;
    let k = d + 2;
    for g in Group::BOTH {
        let got = records.iter().filter(|r| r.group == g).count();
        if got <= k {
            return Err(Error::TooFewRecords {
                what: "demand calibration",
                group: g,
                needed: k + 1,
                got,
            });
        }
    }
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    for j in 0..d {
        (means[j], scales[j]) = mean_sd(records.iter().map(|r| r.features[j]));
    }

    // raw = J std for parameter vectors ordered (alpha, intercept, slopes)
    let mut jac = DMatrix::<f64>::identity(k, k);
    for j in 0..d {
        jac[(2 + j, 2 + j)] = 1.0 / scales[j];
        jac[(1, 2 + j)] = -means[j] / scales[j];
    }

    let mut thetas = Vec::new();
    let mut ses = Vec::new();
    let mut raws = Vec::new();
    let mut counts = [0usize; 2];
    let mut rss_total = 0.0;
    for g in Group::BOTH {
        let rows: Vec<&LoanRecord> = records.iter().filter(|r| r.group == g).collect();
        let n = rows.len();
        counts[g.index()] = n;
        let design = DMatrix::from_fn(n, k, |i, c| match c {
            0 => rows[i].price,
            1 => 1.0,
            _ => (rows[i].features[c - 2] - means[c - 2]) / scales[c - 2],
        });
        let y = DVector::from_iterator(n, rows.iter().map(|r| r.demand));
        let fit = least_squares(&design, &y, &format!("demand calibration, group {g}"))?;
        let rss = fit.residual_sum_of_squares();
        rss_total += rss;
        let s2 = rss / (n - k) as f64;
        let cov = &fit.gram_inverse * s2;
        ses.push((0..k).map(|i| cov[(i, i)].sqrt()).collect::<Vec<_>>());

        let coef = DVector::from_column_slice(&fit.coef);
        let raw = &jac * &coef;
        let raw_cov = &jac * &cov * jac.transpose();
        let raw_se: Vec<f64> = (0..k).map(|i| raw_cov[(i, i)].sqrt()).collect();
        raws.push(RawFit {
            alpha: raw[0],
            intercept: raw[1],
            slopes: raw.iter().skip(2).copied().collect(),
            alpha_se: raw_se[0],
            intercept_se: raw_se[1],
            slope_se: raw_se[2..].to_vec(),
        });
        thetas.push(DemandParams::clamped(fit.coef[0], fit.coef[1..].to_vec())?);
    }
    let sigma_eps = (rss_total / (records.len() - 2 * k) as f64).sqrt();
    let theta1 = thetas.pop().expect("two groups");
    let theta0 = thetas.pop().expect("two groups");
    let raw1 = raws.pop().expect("two groups");
    let raw0 = raws.pop().expect("two groups");
    Ok(CalibratedModel {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_means: means,
        feature_scales: scales,
        theta0,
        theta1,
        sigma_eps,
        n0: counts[0],
        n1: counts[1],
        se1: ses.pop().expect("two groups"),
        se0: ses.pop().expect("two groups"),
        raw0,
        raw1,
    })
}

/// Unadjusted comparison of mean prices between the groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub label: &'static str,
    /// `mean(price | group 0) - mean(price | group 1)`.
    pub mean_gap: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// One-sided Welch p-value for a positive gap.
    pub one_sided_p: f64,
    pub n0: usize,
    pub n1: usize,
}

pub fn raw_gap_report(records: &[LoanRecord]) -> Result<GapReport> {
    let stats = |g: Group| -> Result<(usize, f64, f64)> {
        let prices: Vec<f64> = records.iter().filter(|r| r.group == g).map(|r| r.price).collect();
        let n = prices.len();
        if n < 2 {
            return Err(Error::TooFewRecords {
                what: "price gap test",
                group: g,
                needed: 2,
                got: n,
            });
        }
        let mean = prices.iter().sum::<f64>() / n as f64;
        let var = prices.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok((n, mean, var))
    };
    let (n0, m0, v0) = stats(Group::Zero)?;
    let (n1, m1, v1) = stats(Group::One)?;
    let (a, b) = (v0 / n0 as f64, v1 / n1 as f64);
    let se = (a + b).sqrt();
    let gap = m0 - m1;
    let (t, df, p) = if se > 0.0 {
        let t = gap / se;
        let df = (a + b).powi(2) / (a * a / (n0 - 1) as f64 + b * b / (n1 - 1) as f64);
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::config(format!("t distribution: {e}")))?;
        (t, df, dist.sf(t))
    } else {
        let p = if gap > 0.0 {
            0.0
        } else if gap < 0.0 {
            1.0
        } else {
            0.5
        };
        (gap.signum() * f64::INFINITY, (n0 + n1 - 2) as f64, p)
    };
    Ok(GapReport {
        label: "unadjusted",
        mean_gap: gap,
        t_statistic: t,
        degrees_of_freedom: df,
        one_sided_p: p,
        n0,
        n1,
    })
}

/// Parameters of the synthetic loan-level sample.
///
/// Demand (loan amount in units of $10,000) is linear in the rate and the six
/// raw features with group-specific intercept and rate slope. The rate is a
/// spread in percentage points with a higher base for group 0. A fraction of
/// rows carry implausible loan amounts, sized so that the 5% trimming fences
/// fall exactly between them and the model rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Rows drawn from the demand model.
    pub model_rows: usize,
    pub majority_share: f64,
    pub alpha: [f64; 2],
    pub intercept: [f64; 2],
    /// Raw-unit demand slopes, [`FEATURE_NAMES`] order.
    pub slopes: [f64; N_FEATURES],
    pub noise_sd: f64,
    pub rate_base: [f64; 2],
    pub rate_dti: f64,
    pub rate_cltv: f64,
    pub rate_sd: f64,
    pub unclassified_share: f64,
    pub malformed_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 20_220_101,
            model_rows: 20_000,
            majority_share: 0.8186,
            alpha: [-80.0, -80.0],
            intercept: [53.0, 29.0],
            // income $k, age years, property $, dti %, cltv %, term months
            slopes: [0.03, -0.04, 2e-5, -0.05, 0.08, 0.02],
            noise_sd: 2.0,
            rate_base: [0.42, 0.30],
            rate_dti: 0.002,
            rate_cltv: -0.0015,
            rate_sd: 0.04,
            unclassified_share: 0.02,
            malformed_share: 0.005,
        }
    }
}

const AGE_BANDS: [(&str, f64); 7] = [
    ("<25", 20.0),
    ("25-34", 29.5),
    ("35-44", 39.5),
    ("45-54", 49.5),
    ("55-64", 59.5),
    ("65-74", 69.5),
    (">74", 79.0),
];
const DEMAND_FLOOR: f64 = 1.0;

#[derive(Debug, Clone)]
struct SynthRow {
    race: String,
    rate: String,
    loan_dollars: f64,
    income: f64,
    age_band: &'static str,
    property: f64,
    dti: f64,
    cltv: f64,
    term: f64,
}

pub const SYNTHETIC_HEADER: [&str; 9] = [
    "derived_race",
    "interest_rate",
    "loan_amount",
    "income",
    "applicant_age",
    "property_value",
    "debt_to_income_ratio",
    "combined_loan_to_value_ratio",
    "loan_term",
];

impl SyntheticConfig {
    /// Writes the sample as CSV and returns the number of data rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<usize> {
        let rows = self.generate();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SYNTHETIC_HEADER)?;
        for r in &rows {
            w.write_record([
                r.race.clone(),
                r.rate.clone(),
                format!("{:.0}", r.loan_dollars),
                format!("{:.0}", r.income),
                r.age_band.to_string(),
                format!("{:.0}", r.property),
                format!("{:.0}", r.dti),
                format!("{:.2}", r.cltv),
                format!("{:.0}", r.term),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "synthetic csv".into(),
            source,
        })?;
        Ok(rows.len())
    }

    fn generate(&self) -> Vec<SynthRow> {
        let mut rng = stream(self.seed, Stream::Data);
        let income = LogNormal::new(95f64.ln(), 0.35).expect("valid");
        let property = LogNormal::new(350_000f64.ln(), 0.35).expect("valid");
        let rate_noise = Normal::new(0.0, self.rate_sd).expect("valid");
        let noise = Normal::new(0.0, self.noise_sd).expect("valid");

        // features plus the age-band index
        let draw_features = |rng: &mut ChaCha8Rng, filtered_ok: bool| -> [f64; N_FEATURES + 1] {
            let band = if filtered_ok {
                rng.random_range(1..6)
            } else {
                // about 8% of borrowers fall in the open-ended bands
                match rng.random::<f64>() {
                    u if u < 0.04 => 0,
                    u if u < 0.08 => 6,
                    _ => rng.random_range(1..6),
                }
            };
            let dti = if filtered_ok {
                rng.random_range(20..=60)
            } else {
                rng.random_range(15..=65)
            };
            let term = [(180.0, 0.15), (240.0, 0.05), (360.0, 0.80)]
                .choose_weighted(rng, |t| t.1)
                .expect("weights")
                .0;
            [
                income.sample(rng).round(),
                AGE_BANDS[band].1,
                property.sample(rng).round(),
                dti as f64,
                (rng.random_range(55.0..97.0f64) * 100.0).round() / 100.0,
                term,
                band as f64,
            ]
        };
        let draw_group = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < self.majority_share {
                Group::One
            } else {
                Group::Zero
            }
        };
        let race_label = |rng: &mut ChaCha8Rng, g: Group| match g {
            Group::One => "White".to_string(),
            Group::Zero => MINORITY_LABELS[..5].choose(rng).expect("nonempty").to_string(),
        };
        let draw_rate = |rng: &mut ChaCha8Rng, g: Group, f: &[f64]| {
            let r = self.rate_base[g.index()]
                + self.rate_dti * (f[3] - 40.0)
                + self.rate_cltv * (f[4] - 76.0)
                + rate_noise.sample(rng);
            (r.clamp(0.01, 0.99) * 1e4).round() / 1e4
        };
        let make_row = |race: String, rate: String, demand: f64, f: &[f64]| SynthRow {
            race,
            rate,
            loan_dollars: demand * 1e4,
            income: f[0],
            age_band: AGE_BANDS[f[6] as usize].0,
            property: f[2],
            dti: f[3],
            cltv: f[4],
            term: f[5],
        };

        let mut rows = Vec::with_capacity(self.model_rows + self.model_rows / 5);
        let mut kept_by_filters = 0usize;
        let (mut lo_demand, mut hi_demand) = (f64::INFINITY, 0.0f64);
        for _ in 0..self.model_rows {
            let u: f64 = rng.random();
            if u < self.unclassified_share {
                let f = draw_features(&mut rng, false);
                let label = UNCLASSIFIED_LABELS[rng.random_range(0..3)].to_string();
                rows.push(make_row(label, "0.35".into(), 25.0, &f));
                continue;
            }
            if u < self.unclassified_share + self.malformed_share {
                let f = draw_features(&mut rng, false);
                let g = draw_group(&mut rng);
                let label = race_label(&mut rng, g);
                let rate = if rng.random::<bool>() { "NA" } else { "Exempt" };
                rows.push(make_row(label, rate.into(), 25.0, &f));
                continue;
            }
            let g = draw_group(&mut rng);
            let (f, rate, demand) = loop {
                let f = draw_features(&mut rng, false);
                let rate = draw_rate(&mut rng, g, &f);
                let mut demand = self.intercept[g.index()] + self.alpha[g.index()] * rate + noise.sample(&mut rng);
                for (b, x) in self.slopes.iter().zip(&f) {
                    demand += b * x;
                }
                // loan amounts are whole dollars
                let demand = (demand * 1e4).round() / 1e4;
                if demand >= DEMAND_FLOOR {
                    break (f, rate, demand);
                }
            };
            let label = race_label(&mut rng, g);
            let passes = (AGE_RANGE.0..=AGE_RANGE.1).contains(&f[1]) && (DTI_RANGE.0..=DTI_RANGE.1).contains(&f[3]);
            if passes {
                kept_by_filters += 1;
                lo_demand = lo_demand.min(demand);
                hi_demand = hi_demand.max(demand);
            }
            rows.push(make_row(label, format!("{rate:.4}"), demand, &f));
        }

        // k outliers per tail with floor(tail (m + 2k)) = k
        let k = (0..)
            .find(|&k| (TRIM_TAIL * (kept_by_filters + 2 * k) as f64).floor() as usize == k)
            .expect("a fixed point exists");
        for i in 0..2 * k {
            let f = draw_features(&mut rng, true);
            let g = draw_group(&mut rng);
            let rate = draw_rate(&mut rng, g, &f);
            let demand = if i < k {
                lo_demand * rng.random_range(0.05..0.5)
            } else {
                hi_demand * rng.random_range(2.0..3.0)
            };
            let label = race_label(&mut rng, g);
            rows.push(make_row(label, format!("{rate:.4}"), (demand * 1e4).round() / 1e4, &f));
        }
        // interleave outliers with model rows
        for i in (1..rows.len()).rev() {
            let j = rng.random_range(0..=i);
            rows.swap(i, j);
        }
        rows
    }
}
