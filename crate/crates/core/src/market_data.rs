//! Option panel data model, sample filters, spot-rate interpolation and a
//! seeded synthetic market.

use std::collections::HashSet;
use std::io::{Read, Write};

use chrono::{Datelike, Months, NaiveDate, Weekday};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bsm::{put_price, BsInputs};
use crate::error::{Error, Result};
use crate::garch::{annualized_vol, forecast_cumulative_variance, GarchFit, GarchParams, GarchSimulator, TRADING_DAYS};
use crate::util::{fmt_sig, rng_from};

/// Lowest retained moneyness `S/K` (deepest ITM put).
pub const MIN_MONEYNESS: f64 = 1.0 / 1.5;
/// Highest retained moneyness `S/K` (deepest OTM put).
pub const MAX_MONEYNESS: f64 = 1.5;
pub const MIN_TTM_YEARS: f64 = 1.0 / 12.0;
pub const MAX_TTM_YEARS: f64 = 1.5;

/// Slack for comparisons against the filter bounds; covers values read
/// back from 9-significant-digit CSV.
const BOUND_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Settlement {
    #[serde(rename = "AM")]
    Am,
    #[serde(rename = "PM")]
    Pm,
}

impl Settlement {
    pub fn as_str(self) -> &'static str {
        match self {
            Settlement::Am => "AM",
            Settlement::Pm => "PM",
        }
    }
}

impl std::str::FromStr for Settlement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "AM" | "am" => Ok(Settlement::Am),
            "PM" | "pm" => Ok(Settlement::Pm),
            other => Err(Error::Parse(format!("unknown settlement {other:?}"))),
        }
    }
}

/// Put moneyness class: OTM iff `S/K > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MoneynessClass {
    #[serde(rename = "OTM")]
    Otm,
    #[serde(rename = "ITM")]
    Itm,
}

impl MoneynessClass {
    pub const ALL: [MoneynessClass; 2] = [MoneynessClass::Otm, MoneynessClass::Itm];

    pub fn of_ratio(s_over_k: f64) -> Self {
        if s_over_k > 1.0 {
            MoneynessClass::Otm
        } else {
            MoneynessClass::Itm
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MoneynessClass::Otm => "OTM",
            MoneynessClass::Itm => "ITM",
        }
    }
}

/// One put quote on one trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionRecord {
    pub quote_date: NaiveDate,
    pub expiry_date: NaiveDate,
    pub strike: f64,
    pub underlying: f64,
    pub bid: f64,
    pub ask: f64,
    pub mid_price: f64,
    pub ttm_years: f64,
    pub spot_rate: f64,
    pub dividend_yield: f64,
    /// Annualized GARCH forecast volatility; absent until attached.
    pub garch_vol: Option<f64>,
    pub settlement: Settlement,
    /// Black-Scholes reference price; absent until attached.
    pub bs_price: Option<f64>,
}

impl OptionRecord {
    /// Builds a record with `mid_price = (bid + ask) / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        quote_date: NaiveDate,
        expiry_date: NaiveDate,
        strike: f64,
        underlying: f64,
        bid: f64,
        ask: f64,
        ttm_years: f64,
        spot_rate: f64,
        dividend_yield: f64,
        garch_vol: Option<f64>,
        settlement: Settlement,
    ) -> Self {
        OptionRecord {
            quote_date,
            expiry_date,
            strike,
            underlying,
            bid,
            ask,
            mid_price: 0.5 * (bid + ask),
            ttm_years,
            spot_rate,
            dividend_yield,
            garch_vol,
            settlement,
            bs_price: None,
        }
    }

    pub fn moneyness(&self) -> f64 {
        self.underlying / self.strike
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = pos(self.strike)
            && pos(self.underlying)
            && pos(self.ttm_years)
            && self.bid.is_finite()
            && self.ask.is_finite()
            && self.bid >= 0.0
            && self.ask >= self.bid
            && pos(self.mid_price)
            && self.spot_rate.is_finite()
            && self.dividend_yield.is_finite()
            && self.dividend_yield >= 0.0
            && self.garch_vol.is_none_or(pos)
            && self.expiry_date > self.quote_date;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("malformed option record {self:?}")))
        }
    }

    /// True when the record sits inside the sample's moneyness and maturity bounds.
    pub fn within_filter_bounds(&self) -> bool {
        let m = self.moneyness();
        m.is_finite()
            && m >= MIN_MONEYNESS - BOUND_EPS
            && m <= MAX_MONEYNESS + BOUND_EPS
            && self.ttm_years >= MIN_TTM_YEARS - BOUND_EPS
            && self.ttm_years <= MAX_TTM_YEARS + BOUND_EPS
    }
}

pub fn classify(record: &OptionRecord) -> Result<MoneynessClass> {
    if !(record.strike.is_finite() && record.strike > 0.0) {
        return Err(Error::invalid(format!("strike must be positive, got {}", record.strike)));
    }
    Ok(MoneynessClass::of_ratio(record.moneyness()))
}

/// Number of weekdays in `(from, to]`.
pub fn trading_days_between(from: NaiveDate, to: NaiveDate) -> usize {
    if to <= from {
        return 0;
    }
    let total = (to - from).num_days();
    let full_weeks = total / 7;
    let mut count = full_weeks * 5;
    let mut day = from + chrono::Duration::days(full_weeks * 7);
    while day < to {
        day = day.succ_opt().expect("date overflow");
        if is_weekday(day) {
            count += 1;
        }
    }
    count as usize
}

pub fn is_weekday(d: NaiveDate) -> bool {
    !matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Sample filters: moneyness, maturity, positive bid, and AM-over-PM
/// precedence per quote date, expiry and strike.
pub fn apply_filters(records: &[OptionRecord]) -> Vec<OptionRecord> {
    let passes = |r: &OptionRecord| r.bid > 0.0 && r.within_filter_bounds();
    let am_keys: HashSet<(NaiveDate, NaiveDate, u64)> = records
        .iter()
        .filter(|r| r.settlement == Settlement::Am && passes(r))
        .map(|r| (r.quote_date, r.expiry_date, r.strike.to_bits()))
        .collect();
    records
        .iter()
        .filter(|r| passes(r))
        .filter(|r| {
            r.settlement == Settlement::Am
                || !am_keys.contains(&(r.quote_date, r.expiry_date, r.strike.to_bits()))
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCurvePoint {
    pub tenor_years: f64,
    /// Continuously compounded zero rate.
    pub zero_rate: f64,
}

/// Linear interpolation on the zero curve, flat beyond either end.
pub fn interp_spot_rate(curve: &[RateCurvePoint], tenor_years: f64) -> Result<f64> {
    let (first, last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::invalid("rate curve is empty")),
    };
    if curve.windows(2).any(|w| w[1].tenor_years <= w[0].tenor_years) {
        return Err(Error::invalid("rate curve tenors must be strictly increasing"));
    }
    if tenor_years <= first.tenor_years {
        return Ok(first.zero_rate);
    }
    if tenor_years >= last.tenor_years {
        return Ok(last.zero_rate);
    }
    let i = curve.partition_point(|p| p.tenor_years <= tenor_years);
    let (lo, hi) = (&curve[i - 1], &curve[i]);
    let w = (tenor_years - lo.tenor_years) / (hi.tenor_years - lo.tenor_years);
    Ok(lo.zero_rate + w * (hi.zero_rate - lo.zero_rate))
}

pub fn read_rate_curve<R: Read>(input: R) -> Result<Vec<RateCurvePoint>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| Error::Parse("rate curve row needs two columns".into()))?
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad rate curve value: {e}")))
        };
        out.push(RateCurvePoint { tenor_years: parse(0)?, zero_rate: parse(1)? });
    }
    Ok(out)
}

/// Parameters of the seeded artificial market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarketConfig {
    pub seed: u64,
    /// Number of trading days (weekdays) to simulate.
    pub n_days: usize,
    pub s0: f64,
    pub garch_truth: GarchParams,
    pub strike_grid_step: f64,
    /// Target maturities in months; each maps to the next monthly expiry.
    pub maturities_months: Vec<u32>,
    /// Half-width of the uniform multiplicative price noise.
    pub price_noise_rel: f64,
    /// Volatility added per unit of `ln(K/S)`.
    pub smile_skew: f64,
    pub start_date: NaiveDate,
    pub dividend_yield: f64,
    pub rate_curve: Vec<RateCurvePoint>,
    /// Quoted `S/K` band; clipped to the filter bounds.
    pub moneyness_range: (f64, f64),
}

impl Default for SyntheticMarketConfig {
    fn default() -> Self {
        SyntheticMarketConfig {
            seed: 0,
            n_days: 252 * 4,
            s0: 1000.0,
            garch_truth: GarchParams { mu: 3e-4, a0: 2e-6, a1: 0.9, b1: 0.07 },
            strike_grid_step: 25.0,
            maturities_months: vec![1, 3, 6, 12],
            price_noise_rel: 0.0,
            smile_skew: 0.0,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).unwrap(),
            dividend_yield: 0.018,
            rate_curve: vec![
                RateCurvePoint { tenor_years: 0.25, zero_rate: 0.005 },
                RateCurvePoint { tenor_years: 1.0, zero_rate: 0.01 },
                RateCurvePoint { tenor_years: 2.0, zero_rate: 0.015 },
            ],
            moneyness_range: (MIN_MONEYNESS, MAX_MONEYNESS),
        }
    }
}

impl SyntheticMarketConfig {
    pub fn validate(&self) -> Result<()> {
        self.garch_truth.validate()?;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.n_days == 0 || !pos(self.s0) || !pos(self.strike_grid_step) {
            return Err(Error::invalid("n_days, s0 and strike_grid_step must be positive"));
        }
        if self.maturities_months.is_empty() || self.maturities_months.iter().any(|m| !(1..=18).contains(m)) {
            return Err(Error::invalid("maturities must be a non-empty list within 1..=18 months"));
        }
        if !(self.price_noise_rel >= 0.0 && self.price_noise_rel < 1.0) || !self.smile_skew.is_finite() {
            return Err(Error::invalid("price_noise_rel must lie in [0, 1) and smile_skew be finite"));
        }
        if !(self.dividend_yield >= 0.0) {
            return Err(Error::invalid("dividend yield must be nonnegative"));
        }
        let (lo, hi) = self.moneyness_range;
        if !(pos(lo) && lo < hi) {
            return Err(Error::invalid("moneyness range must be an increasing positive pair"));
        }
        interp_spot_rate(&self.rate_curve, 1.0)?;
        Ok(())
    }
}

/// Third Friday of the month containing `d`.
fn third_friday(year: i32, month: u32) -> NaiveDate {
    NaiveDate::from_weekday_of_month_opt(year, month, Weekday::Fri, 3).expect("third Friday exists")
}

/// First monthly (third-Friday) expiry on or after `target`.
pub fn next_monthly_expiry(target: NaiveDate) -> NaiveDate {
    let candidate = third_friday(target.year(), target.month());
    if candidate >= target {
        candidate
    } else {
        let next = target.with_day(1).unwrap() + Months::new(1);
        third_friday(next.year(), next.month())
    }
}

/// Simulated index path: one `(date, level, garch state)` per trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexDay {
    pub date: NaiveDate,
    pub level: f64,
    pub sigma2: f64,
    pub e2: f64,
}

pub fn simulate_index_path(config: &SyntheticMarketConfig) -> Result<Vec<IndexDay>> {
    config.validate()?;
    let mut rng = rng_from(crate::util::derive_seed(config.seed, &[1]));
    let mut sim = GarchSimulator::new(config.garch_truth)?;
    let mut date = config.start_date;
    while !is_weekday(date) {
        date = date.succ_opt().unwrap();
    }
    let mut level = config.s0;
    let mut out = Vec::with_capacity(config.n_days);
    for i in 0..config.n_days {
        if i > 0 {
            date = date.succ_opt().unwrap();
            while !is_weekday(date) {
                date = date.succ_opt().unwrap();
            }
        }
        let (r, sigma2, z) = sim.step(&mut rng);
        level *= r.exp();
        out.push(IndexDay { date, level, sigma2, e2: z * z });
    }
    Ok(out)
}

/// Emits the filtered synthetic put panel.
///
/// Mid prices are Black-Scholes puts at the true GARCH forecast volatility,
/// skewed by `smile_skew * ln(K/S)` and scaled by `1 + eps`, with eps
/// uniform in `[-price_noise_rel, price_noise_rel]`. The bid/ask spread is 1%
/// of mid with a 0.05 minimum; quotes whose bid would not be positive are
/// dropped.
pub fn generate_synthetic_market(config: &SyntheticMarketConfig) -> Result<Vec<OptionRecord>> {
    let path = simulate_index_path(config)?;
    let mut noise_rng = rng_from(crate::util::derive_seed(config.seed, &[2]));
    let (m_lo, m_hi) = (
        config.moneyness_range.0.max(MIN_MONEYNESS),
        config.moneyness_range.1.min(MAX_MONEYNESS),
    );
    let mut records = Vec::new();
    for day in &path {
        let state = GarchFit {
            params: config.garch_truth,
            last_sigma2: day.sigma2,
            last_e2: day.e2,
            loglik: 0.0,
            converged: true,
        };
        let s = day.level;
        let mut expiries: Vec<NaiveDate> = config
            .maturities_months
            .iter()
            .map(|&m| next_monthly_expiry(day.date + Months::new(m)))
            .collect();
        expiries.sort();
        expiries.dedup();
        let k_lo = (s / m_hi / config.strike_grid_step).ceil() as i64;
        let k_hi = (s / m_lo / config.strike_grid_step).floor() as i64;
        for expiry in expiries {
            let d = trading_days_between(day.date, expiry);
            if d == 0 {
                continue;
            }
            let ttm = d as f64 / TRADING_DAYS;
            let vol = annualized_vol(forecast_cumulative_variance(&state, d)?, d);
            let r = interp_spot_rate(&config.rate_curve, ttm)?;
            for j in k_lo.max(1)..=k_hi {
                let k = j as f64 * config.strike_grid_step;
                let quote_vol = if config.smile_skew == 0.0 {
                    vol
                } else {
                    (vol + config.smile_skew * (k / s).ln()).max(0.01)
                };
                let fair = put_price(&BsInputs { s, k, t: ttm, r, q: config.dividend_yield, sigma: quote_vol })?;
                let mid = if config.price_noise_rel > 0.0 {
                    fair * (1.0 + noise_rng.random_range(-config.price_noise_rel..=config.price_noise_rel))
                } else {
                    fair
                };
                let half_spread = (0.005 * mid).max(0.025);
                let bid = mid - half_spread;
                if !(bid > 0.0) {
                    continue;
                }
                let mut rec = OptionRecord::new(
                    day.date,
                    expiry,
                    k,
                    s,
                    bid,
                    mid + half_spread,
                    ttm,
                    r,
                    config.dividend_yield,
                    Some(vol),
                    Settlement::Am,
                );
                rec.mid_price = mid;
                records.push(rec);
            }
        }
    }
    Ok(apply_filters(&records))
}

const PANEL_HEADER: [&str; 11] = [
    "quote_date",
    "expiry_date",
    "strike",
    "underlying",
    "bid",
    "ask",
    "ttm_years",
    "spot_rate",
    "dividend_yield",
    "garch_vol",
    "settlement",
];

pub fn write_panel<W: Write>(records: &[OptionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PANEL_HEADER)?;
    for r in records {
        w.write_record([
            r.quote_date.to_string(),
            r.expiry_date.to_string(),
            fmt_sig(r.strike),
            fmt_sig(r.underlying),
            fmt_sig(r.bid),
            fmt_sig(r.ask),
            fmt_sig(r.ttm_years),
            fmt_sig(r.spot_rate),
            fmt_sig(r.dividend_yield),
            r.garch_vol.map(fmt_sig).unwrap_or_default(),
            r.settlement.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel<R: Read>(input: R) -> Result<Vec<OptionRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(PANEL_HEADER.iter().copied()) {
        return Err(Error::Parse(format!(
            "panel header must be {:?}, got {:?}",
            PANEL_HEADER,
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |j: usize| row.get(j).map(str::trim).unwrap_or("");
        let date = |j: usize| {
            NaiveDate::parse_from_str(field(j), "%Y-%m-%d")
                .map_err(|e| Error::Parse(format!("line {line}, {}: {e}", PANEL_HEADER[j])))
        };
        let num = |j: usize| {
            field(j)
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {line}, {}: {e}", PANEL_HEADER[j])))
        };
        let garch_vol = match field(9) {
            "" => None,
            _ => Some(num(9)?),
        };
        let rec = OptionRecord::new(
            date(0)?,
            date(1)?,
            num(2)?,
            num(3)?,
            num(4)?,
            num(5)?,
            num(6)?,
            num(7)?,
            num(8)?,
            garch_vol,
            field(10).parse()?,
        );
        out.push(rec);
    }
    Ok(out)
}
