//! No-arbitrage checks on pricer outputs by one-variable perturbation.
//!
//! A quote is swept along a strike grid of fixed dollar steps and along a
//! multiplicative maturity grid. Put prices should be weakly increasing in
//! strike and maturity and convex in strike; each run of consecutive
//! offending steps becomes one [`ViolationRecord`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsm;
use crate::error::{Error, Result};
use crate::market_data::{MoneynessClass, OptionRecord, MAX_MONEYNESS, MAX_TTM_YEARS, MIN_MONEYNESS, MIN_TTM_YEARS};
use crate::models::{Regressor, TrainedModel};
use crate::util::fmt_sig;

/// Pass rates reported for the original S&P 500 study, in percent, for
/// strike monotonicity, maturity monotonicity and strike convexity. Kept
/// for comparison only.
pub const REFERENCE_PASS_RATES: [(ViolationTest, f64); 3] = [
    (ViolationTest::MonoStrike, 93.51),
    (ViolationTest::MonoTtm, 95.09),
    (ViolationTest::ConvexStrike, 82.92),
];

/// Prices a single quote.
pub trait RecordPricer: Sync {
    fn price(&self, record: &OptionRecord) -> Result<f64>;
}

/// Closed-form Black-Scholes on the record's own inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct BsPricer;

impl RecordPricer for BsPricer {
    fn price(&self, record: &OptionRecord) -> Result<f64> {
        bsm::record_price(record)
    }
}

/// A trained model applied to a record; the Black-Scholes input is
/// recomputed from the record when the model uses it.
#[derive(Debug, Clone, Copy)]
pub struct ModelPricer<'a>(pub &'a TrainedModel);

impl RecordPricer for ModelPricer<'_> {
    fn price(&self, record: &OptionRecord) -> Result<f64> {
        let schema = self.0.schema();
        let mut rec = record.clone();
        if schema.include_bs {
            rec.bs_price = Some(bsm::record_price(&rec)?);
        }
        let inputs = schema.inputs_of(&rec)?;
        let mut row = Vec::with_capacity(schema.width());
        schema.expand(&inputs, &mut row);
        Ok(self.0.predict_row(&row))
    }
}

/// Adapts a closure into a pricer.
pub struct FnPricer<F>(pub F);

impl<F: Fn(&OptionRecord) -> Result<f64> + Sync> RecordPricer for FnPricer<F> {
    fn price(&self, record: &OptionRecord) -> Result<f64> {
        (self.0)(record)
    }
}

/// One pricer per moneyness class.
#[derive(Clone, Copy)]
pub struct ClassPricers<'a> {
    pub otm: &'a dyn RecordPricer,
    pub itm: &'a dyn RecordPricer,
}

impl<'a> ClassPricers<'a> {
    pub fn same(p: &'a dyn RecordPricer) -> Self {
        ClassPricers { otm: p, itm: p }
    }

    /// Prices with the pricer of the record's current class.
    pub fn price(&self, r: &OptionRecord) -> Result<f64> {
        match MoneynessClass::of_ratio(r.moneyness()) {
            MoneynessClass::Otm => self.otm.price(r),
            MoneynessClass::Itm => self.itm.price(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Strike increment in index points.
    pub strike_step: f64,
    /// Allowed adverse move per step.
    pub strike_tolerance: f64,
    /// Relative maturity increment per step.
    pub ttm_step_frac: f64,
    /// Half-width of the strike sweep as a fraction of the original strike.
    pub strike_range_frac: f64,
    pub ttm_bounds: (f64, f64),
    /// Consecutive negative second differences that make a convexity violation.
    pub convexity_consecutive: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            strike_step: 5.0,
            strike_tolerance: 0.05,
            ttm_step_frac: 0.05,
            strike_range_frac: 0.30,
            ttm_bounds: (MIN_TTM_YEARS, MAX_TTM_YEARS),
            convexity_consecutive: 2,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.strike_step, self.ttm_step_frac, self.strike_range_frac, self.ttm_bounds.0];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(self.strike_tolerance >= 0.0)
            || self.strike_tolerance >= self.strike_step
            || !(self.ttm_bounds.1 > self.ttm_bounds.0)
            || self.convexity_consecutive == 0
        {
            return Err(Error::invalid(format!("invalid perturbation spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationTest {
    #[serde(rename = "MONO_STRIKE")]
    MonoStrike,
    #[serde(rename = "CONVEX_STRIKE")]
    ConvexStrike,
    #[serde(rename = "MONO_TTM")]
    MonoTtm,
}

impl ViolationTest {
    pub const ALL: [ViolationTest; 3] = [ViolationTest::MonoStrike, ViolationTest::ConvexStrike, ViolationTest::MonoTtm];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationTest::MonoStrike => "MONO_STRIKE",
            ViolationTest::ConvexStrike => "CONVEX_STRIKE",
            ViolationTest::MonoTtm => "MONO_TTM",
        }
    }
}

impl fmt::Display for ViolationTest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub record_id: usize,
    pub test: ViolationTest,
    /// Perturbation steps between the original point and the nearest
    /// offending point of the run.
    pub step_distance: usize,
    /// Sum of `|p_i - p_{i+1}|` over the prices in the run.
    pub magnitude: f64,
}

/// Grid positions `lo..=hi` relative to the original point (position 0).
struct Sweep {
    lo: i64,
    prices: Vec<f64>,
}

impl Sweep {
    fn pos(&self, idx: usize) -> i64 {
        self.lo + idx as i64
    }

    fn step_magnitude(&self, i: usize) -> f64 {
        (self.prices[i] - self.prices[i + 1]).abs()
    }

    /// Runs of adjacent pairs `(i, i + 1)` where the price drops by more than `tol`.
    fn monotone_violations(&self, record_id: usize, test: ViolationTest, tol: f64) -> Vec<ViolationRecord> {
        let bad: Vec<bool> = self.prices.windows(2).map(|w| w[1] < w[0] - tol).collect();
        runs(&bad, 1)
            .into_iter()
            .map(|(a, b)| ViolationRecord {
                record_id,
                test,
                step_distance: (a..=b).map(|i| self.pos(i).abs().max(self.pos(i + 1).abs())).min().unwrap() as usize,
                magnitude: (a..=b).map(|i| self.step_magnitude(i)).sum(),
            })
            .collect()
    }

    /// Runs of at least `min_run` interior points whose second difference is below `-tol`.
    fn convexity_violations(&self, record_id: usize, tol: f64, min_run: usize) -> Vec<ViolationRecord> {
        let p = &self.prices;
        if p.len() < 3 {
            return Vec::new();
        }
        // bad[j] refers to interior point j + 1.
        let bad: Vec<bool> = p.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2] < -tol).collect();
        runs(&bad, min_run)
            .into_iter()
            .map(|(a, b)| {
                let (first, last) = (a + 1, b + 1);
                ViolationRecord {
                    record_id,
                    test: ViolationTest::ConvexStrike,
                    step_distance: (first..=last).map(|i| self.pos(i).unsigned_abs() as usize + 1).min().unwrap(),
                    magnitude: (first - 1..=last).map(|i| self.step_magnitude(i)).sum(),
                }
            })
            .collect()
    }
}

/// Inclusive index ranges of `true` runs with at least `min_len` members.
fn runs(flags: &[bool], min_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_len {
                    out.push((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Strike offsets (in steps) kept by the sweep for `record`.
pub fn strike_grid(record: &OptionRecord, spec: &PerturbationSpec) -> (i64, i64) {
    let k0 = record.strike;
    let s = record.underlying;
    let reach = (spec.strike_range_frac * k0 / spec.strike_step).floor() as i64;
    let ok = |j: i64| {
        let k = k0 + j as f64 * spec.strike_step;
        k > 0.0 && s / k >= MIN_MONEYNESS - 1e-12 && s / k <= MAX_MONEYNESS + 1e-12
    };
    let mut lo = 0;
    while lo > -reach && ok(lo - 1) {
        lo -= 1;
    }
    let mut hi = 0;
    while hi < reach && ok(hi + 1) {
        hi += 1;
    }
    (lo, hi)
}

/// Maturity offsets (in multiplicative steps) kept by the sweep for `record`.
pub fn ttm_grid(record: &OptionRecord, spec: &PerturbationSpec) -> (i64, i64) {
    let t0 = record.ttm_years;
    let g = 1.0 + spec.ttm_step_frac;
    let (tmin, tmax) = spec.ttm_bounds;
    let mut lo = 0;
    while t0 * g.powi(lo as i32 - 1) >= tmin - 1e-12 {
        lo -= 1;
    }
    let mut hi = 0;
    while t0 * g.powi(hi as i32 + 1) <= tmax + 1e-12 {
        hi += 1;
    }
    (lo, hi)
}

/// Sweeps strike and maturity around `record` and reports every violation.
pub fn check_option(
    pricers: &ClassPricers<'_>,
    record_id: usize,
    record: &OptionRecord,
    spec: &PerturbationSpec,
) -> Result<Vec<ViolationRecord>> {
    spec.validate()?;
    record.validate()?;
    if !record.within_filter_bounds() {
        return Err(Error::invalid(format!(
            "record {record_id} (S/K {}, T {}) lies outside the filter bounds",
            record.moneyness(),
            record.ttm_years
        )));
    }
    let (klo, khi) = strike_grid(record, spec);
    let strike_prices = (klo..=khi)
        .map(|j| {
            let mut r = record.clone();
            r.strike = record.strike + j as f64 * spec.strike_step;
            pricers.price(&r)
        })
        .collect::<Result<Vec<f64>>>()?;
    let strike = Sweep { lo: klo, prices: strike_prices };

    let (tlo, thi) = ttm_grid(record, spec);
    let g = 1.0 + spec.ttm_step_frac;
    let ttm_prices = (tlo..=thi)
        .map(|j| {
            let mut r = record.clone();
            if j != 0 {
                r.ttm_years = record.ttm_years * g.powi(j as i32);
            }
            pricers.price(&r)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ttm = Sweep { lo: tlo, prices: ttm_prices };

    let tol = spec.strike_tolerance;
    let mut out = strike.monotone_violations(record_id, ViolationTest::MonoStrike, tol);
    out.extend(strike.convexity_violations(record_id, tol, spec.convexity_consecutive));
    out.extend(ttm.monotone_violations(record_id, ViolationTest::MonoTtm, tol));
    Ok(out)
}

/// Checks every record in parallel; ids are positions in `records`.
pub fn check_records(
    pricers: &ClassPricers<'_>,
    records: &[OptionRecord],
    spec: &PerturbationSpec,
) -> Result<Vec<ViolationRecord>> {
    let per: Vec<Result<Vec<ViolationRecord>>> =
        records.par_iter().enumerate().map(|(i, r)| check_option(pricers, i, r, spec)).collect();
    let mut out = Vec::new();
    for v in per {
        out.extend(v?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub test: ViolationTest,
    /// Records with no violation of this test.
    pub n_pass: usize,
    pub pass_rate_pct: f64,
    /// Number of violations per step distance.
    pub distance_histogram: BTreeMap<usize, usize>,
    /// `(step_distance, magnitude)` of every violation.
    pub distance_magnitude: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageSummary {
    pub n_checked: usize,
    pub tests: Vec<TestSummary>,
}

impl ArbitrageSummary {
    pub fn pass_rate(&self, test: ViolationTest) -> f64 {
        self.tests.iter().find(|t| t.test == test).map_or(f64::NAN, |t| t.pass_rate_pct)
    }
}

pub fn summarize(violations: &[ViolationRecord], n_checked: usize) -> Result<ArbitrageSummary> {
    if n_checked == 0 {
        return Err(Error::invalid("summary needs at least one checked record"));
    }
    let tests = ViolationTest::ALL
        .into_iter()
        .map(|test| {
            let mut of_test: Vec<&ViolationRecord> = violations.iter().filter(|v| v.test == test).collect();
            of_test.sort_by(|a, b| {
                (a.record_id, a.step_distance).cmp(&(b.record_id, b.step_distance)).then(a.magnitude.total_cmp(&b.magnitude))
            });
            let mut failed: Vec<usize> = of_test.iter().map(|v| v.record_id).collect();
            failed.dedup();
            let n_pass = n_checked.saturating_sub(failed.len());
            let mut distance_histogram = BTreeMap::new();
            for v in &of_test {
                *distance_histogram.entry(v.step_distance).or_insert(0) += 1;
            }
            let mut distance_magnitude: Vec<(usize, f64)> =
                of_test.iter().map(|v| (v.step_distance, v.magnitude)).collect();
            distance_magnitude.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            TestSummary {
                test,
                n_pass,
                pass_rate_pct: 100.0 * n_pass as f64 / n_checked as f64,
                distance_histogram,
                distance_magnitude,
            }
        })
        .collect();
    Ok(ArbitrageSummary { n_checked, tests })
}

pub fn write_violations<W: Write>(violations: &[ViolationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["record_id", "test", "step_distance", "magnitude"])?;
    for v in violations {
        w.write_record([v.record_id.to_string(), v.test.to_string(), v.step_distance.to_string(), fmt_sig(v.magnitude)])?;
    }
    w.flush()?;
    Ok(())
}
