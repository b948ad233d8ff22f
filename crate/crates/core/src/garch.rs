//! GARCH(1,1) with Gaussian innovations.
//!
//! The model is
//!
//! ```text
//! r_t       = mu + sigma_t * e_t,          e_t ~ iid N(0, 1)
//! sigma_t^2 = a0 + a1 * sigma_{t-1}^2 + b1 * sigma_{t-1}^2 * e_{t-1}^2
//! ```
//!
//! Note the naming: `a1` weights the lagged variance and `b1` the lagged
//! squared innovation, so `sigma_{t-1}^2 e_{t-1}^2 = (r_{t-1} - mu)^2`.
//!
//! Estimation maximizes the exact Gaussian log-likelihood with the variance
//! recursion started at the unconditional level `a0 / (1 - a1 - b1)`. The
//! optimizer works in an unconstrained space (log intercept, logistic
//! persistence and split) so every emitted parameter vector is stationary.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use chrono::NaiveDate;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{trading_days_between, OptionRecord};
use crate::util::{fmt_sig, rng_from};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Upper bound on `a1 + b1` reachable by the reparameterization.
const MAX_PERSISTENCE: f64 = 1.0 - 1e-6;

/// Trading days per year used to annualize variance.
pub const TRADING_DAYS: f64 = 252.0;

/// Rolling estimation window length in observations.
pub const DEFAULT_WINDOW: usize = 252;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    /// Daily mean return.
    pub mu: f64,
    /// Variance intercept.
    pub a0: f64,
    /// Weight on the lagged conditional variance.
    pub a1: f64,
    /// Weight on the lagged squared innovation.
    pub b1: f64,
}

impl GarchParams {
    pub fn validate(&self) -> Result<()> {
        let finite = self.mu.is_finite() && self.a0.is_finite() && self.a1.is_finite() && self.b1.is_finite();
        if !finite || self.a0 <= 0.0 || self.a1 < 0.0 || self.b1 < 0.0 || self.a1 + self.b1 >= 1.0 {
            return Err(Error::invalid(format!(
                "GARCH parameters must satisfy a0 > 0, a1, b1 >= 0, a1 + b1 < 1 (got {self:?})"
            )));
        }
        Ok(())
    }

    pub fn persistence(&self) -> f64 {
        self.a1 + self.b1
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.a0 / (1.0 - self.persistence())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub params: GarchParams,
    /// Filtered variance of the last observation in the window.
    pub last_sigma2: f64,
    /// Squared standardized innovation of the last observation.
    pub last_e2: f64,
    pub loglik: f64,
    pub converged: bool,
}

impl GarchFit {
    /// Builds the end-of-window state for `params` on `returns`.
    pub fn from_params(params: GarchParams, returns: &[f64], converged: bool) -> Result<Self> {
        params.validate()?;
        if returns.is_empty() {
            return Err(Error::invalid("cannot filter an empty return series"));
        }
        let h = filter_variance(&params, returns);
        let last_sigma2 = *h.last().unwrap();
        let last_r = *returns.last().unwrap();
        let last_e2 = (last_r - params.mu).powi(2) / last_sigma2;
        Ok(GarchFit {
            params,
            last_sigma2,
            last_e2,
            loglik: loglik_from_variance(&params, returns, &h),
            converged,
        })
    }
}

pub fn log_returns(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(Error::invalid("need at least two prices for a return"));
    }
    if let Some(p) = prices.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::invalid(format!("price {p} is not positive")));
    }
    Ok(prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

/// Conditional variance path, initialized at the unconditional variance.
pub fn filter_variance(params: &GarchParams, returns: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(returns.len());
    let mut h = params.unconditional_variance();
    for t in 0..returns.len() {
        if t > 0 {
            let e = returns[t - 1] - params.mu;
            h = params.a0 + params.a1 * h + params.b1 * e * e;
        }
        out.push(h);
    }
    out
}

fn loglik_from_variance(params: &GarchParams, returns: &[f64], h: &[f64]) -> f64 {
    -0.5 * returns
        .iter()
        .zip(h)
        .map(|(&r, &h)| {
            let e = r - params.mu;
            LN_2PI + h.ln() + e * e / h
        })
        .sum::<f64>()
}

/// Gaussian log-likelihood of `returns` under `params`.
pub fn log_likelihood(params: &GarchParams, returns: &[f64]) -> f64 {
    let h = filter_variance(params, returns);
    loglik_from_variance(params, returns, &h)
}

/// Log-likelihood and its gradient with respect to `(mu, a0, a1, b1)`.
fn loglik_and_grad(p: &GarchParams, returns: &[f64]) -> (f64, [f64; 4]) {
    let denom = 1.0 - p.a1 - p.b1;
    let mut h = p.a0 / denom;
    // dh/d(mu, a0, a1, b1)
    let mut dh = [0.0, 1.0 / denom, p.a0 / (denom * denom), p.a0 / (denom * denom)];
    let mut ll = 0.0;
    let mut grad = [0.0; 4];
    let mut prev_e = 0.0;
    for (t, &r) in returns.iter().enumerate() {
        if t > 0 {
            let h_prev = h;
            h = p.a0 + p.a1 * h_prev + p.b1 * prev_e * prev_e;
            dh = [
                -2.0 * p.b1 * prev_e + p.a1 * dh[0],
                1.0 + p.a1 * dh[1],
                h_prev + p.a1 * dh[2],
                prev_e * prev_e + p.a1 * dh[3],
            ];
        }
        let e = r - p.mu;
        let e2_over_h = e * e / h;
        ll += -0.5 * (LN_2PI + h.ln() + e2_over_h);
        let w = -0.5 * (1.0 - e2_over_h) / h;
        for k in 0..4 {
            grad[k] += w * dh[k];
        }
        grad[0] += e / h;
        prev_e = e;
    }
    (ll, grad)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maps between the constrained parameters and the optimizer's space
/// `(mean offset / sd, ln(a0 / var), logit persistence, logit a1 share)`.
#[derive(Debug, Clone, Copy)]
struct Reparam {
    mean: f64,
    sd: f64,
    var: f64,
}

impl Reparam {
    fn to_params(&self, x: &[f64; 4]) -> GarchParams {
        let persistence = MAX_PERSISTENCE * logistic(x[2]);
        let share = logistic(x[3]);
        GarchParams {
            mu: self.mean + self.sd * x[0],
            a0: self.var * x[1].exp(),
            a1: persistence * share,
            b1: persistence * (1.0 - share),
        }
    }

    fn from_params(&self, p: &GarchParams) -> [f64; 4] {
        let persistence = p.persistence() / MAX_PERSISTENCE;
        [
            (p.mu - self.mean) / self.sd,
            (p.a0 / self.var).ln(),
            logit(persistence),
            logit(p.a1 / p.persistence()),
        ]
    }

    /// Negative mean log-likelihood and its gradient in optimizer space.
    fn objective(&self, x: &[f64; 4], returns: &[f64]) -> (f64, [f64; 4]) {
        let p = self.to_params(x);
        let (ll, g) = loglik_and_grad(&p, returns);
        let n = returns.len() as f64;
        let lp = logistic(x[2]);
        let persistence = MAX_PERSISTENCE * lp;
        let share = logistic(x[3]);
        let dp_dv = MAX_PERSISTENCE * lp * (1.0 - lp);
        let ds_dw = share * (1.0 - share);
        let gx = [
            g[0] * self.sd,
            g[1] * p.a0,
            g[2] * share * dp_dv + g[3] * (1.0 - share) * dp_dv,
            (g[2] - g[3]) * persistence * ds_dw,
        ];
        (-ll / n, gx.map(|v| -v / n))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    /// Stop when the log-likelihood improves by less than this.
    pub loglik_tol: f64,
    pub max_iter: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { loglik_tol: 1e-9, max_iter: 500 }
    }
}

struct BfgsOutcome {
    x: [f64; 4],
    f: f64,
    converged: bool,
}

fn dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton minimization with Armijo backtracking.
fn bfgs(rp: &Reparam, returns: &[f64], x0: [f64; 4], opts: &MleOptions) -> BfgsOutcome {
    let n = returns.len() as f64;
    let mut x = x0;
    let (mut f, mut g) = rp.objective(&x, returns);
    let mut hinv = [[0.0; 4]; 4];
    for (i, row) in hinv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut converged = false;
    let mut quiet_steps = 0;
    for _ in 0..opts.max_iter {
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = -(0..4).map(|j| hinv[i][j] * g[j]).sum::<f64>();
        }
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            // Lost descent; restart from steepest descent.
            for (i, row) in hinv.iter_mut().enumerate() {
                *row = [0.0; 4];
                row[i] = 1.0;
            }
            d = g.map(|v| -v);
            slope = dot(&d, &g);
            if slope == 0.0 {
                converged = true;
                break;
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = x;
            for i in 0..4 {
                xn[i] += step * d[i];
            }
            let (fn_, gn) = rp.objective(&xn, returns);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // No descent possible along a descent direction: numerically at the optimum.
            converged = true;
            break;
        };
        let improvement = (f - fn_) * n;
        let s: [f64; 4] = std::array::from_fn(|i| xn[i] - x[i]);
        let y: [f64; 4] = std::array::from_fn(|i| gn[i] - g[i]);
        x = xn;
        f = fn_;
        g = gn;
        let sy = dot(&s, &y);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let mut hy = [0.0; 4];
            for i in 0..4 {
                hy[i] = (0..4).map(|j| hinv[i][j] * y[j]).sum();
            }
            let yhy = dot(&y, &hy);
            for i in 0..4 {
                for j in 0..4 {
                    hinv[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        if improvement < opts.loglik_tol {
            quiet_steps += 1;
            if quiet_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            quiet_steps = 0;
        }
    }
    BfgsOutcome { x, f, converged }
}

/// Maximum-likelihood fit with default options.
pub fn fit_mle(returns: &[f64]) -> Result<GarchFit> {
    fit_mle_with(returns, &MleOptions::default())
}

pub fn fit_mle_with(returns: &[f64], opts: &MleOptions) -> Result<GarchFit> {
    if returns.len() < 30 {
        return Err(Error::invalid(format!(
            "GARCH estimation needs at least 30 returns, got {}",
            returns.len()
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("return series contains non-finite values"));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-300) || var.sqrt() <= 1e-12 * mean.abs().max(1e-300) {
        return Err(Error::EstimationFailed("return series has zero variance".into()));
    }
    let rp = Reparam { mean, sd: var.sqrt(), var };

    // Starting points span high, moderate and negligible persistence; the
    // best attained likelihood wins.
    let starts = [(0.95, 0.88), (0.6, 0.5), (0.05, 0.5)];
    let mut best: Option<BfgsOutcome> = None;
    for &(persistence, share) in &starts {
        let p0 = GarchParams {
            mu: mean,
            a0: var * (1.0 - persistence),
            a1: persistence * share,
            b1: persistence * (1.0 - share),
        };
        let out = bfgs(&rp, returns, rp.from_params(&p0), opts);
        if out.f.is_finite() && best.as_ref().is_none_or(|b| out.f < b.f) {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| Error::EstimationFailed("likelihood is not finite".into()))?;
    let params = rp.to_params(&best.x);
    params
        .validate()
        .map_err(|e| Error::EstimationFailed(format!("optimizer left the feasible set: {e}")))?;
    GarchFit::from_params(params, returns, best.converged)
}

/// Sum of expected conditional variances over the next `d` days.
pub fn forecast_cumulative_variance(fit: &GarchFit, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::invalid("forecast horizon must be at least one day"));
    }
    let p = &fit.params;
    let first = p.a0 + p.a1 * fit.last_sigma2 + p.b1 * fit.last_sigma2 * fit.last_e2;
    let phi = p.persistence();
    let d_f = d as f64;
    if 1.0 - phi < 1e-7 {
        // Geometric closed form loses precision near unit persistence.
        let mut e = first;
        let mut sum = 0.0;
        for _ in 0..d {
            sum += e;
            e = p.a0 + phi * e;
        }
        return Ok(sum);
    }
    let long_run = p.a0 / (1.0 - phi);
    let geometric = (1.0 - phi.powi(d as i32)) / (1.0 - phi);
    Ok(d_f * long_run + (first - long_run) * geometric)
}

/// Annualized volatility whose total variance over `d` trading days is `cumvar`.
pub fn annualized_vol(cumvar: f64, d: usize) -> f64 {
    (cumvar * TRADING_DAYS / d as f64).sqrt()
}

/// Stateful simulator of the GARCH(1,1) return process.
#[derive(Debug, Clone)]
pub struct GarchSimulator {
    params: GarchParams,
    sigma2: f64,
}

impl GarchSimulator {
    pub fn new(params: GarchParams) -> Result<Self> {
        params.validate()?;
        Ok(GarchSimulator { params, sigma2: params.unconditional_variance() })
    }

    /// Draws one return; returns `(r_t, sigma_t^2, e_t)`.
    pub fn step<R: rand::Rng>(&mut self, rng: &mut R) -> (f64, f64, f64) {
        let z: f64 = StandardNormal.sample(rng);
        let h = self.sigma2;
        let r = self.params.mu + h.sqrt() * z;
        self.sigma2 = self.params.a0 + self.params.a1 * h + self.params.b1 * h * z * z;
        (r, h, z)
    }
}

pub fn simulate_returns(params: &GarchParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut sim = GarchSimulator::new(*params)?;
    let mut rng = rng_from(seed);
    Ok((0..n).map(|_| sim.step(&mut rng).0).collect())
}

/// Fits over every trailing window of `window` returns.
///
/// Entry `i` is the fit on `returns[i + 1 - window ..= i]` for
/// `i >= window - 1` and `None` before. A failed fit reuses the previous
/// window's parameters, refiltered on the current window, and is marked not
/// converged.
pub fn rolling_fits(returns: &[f64], window: usize) -> Result<Vec<Option<GarchFit>>> {
    if window < 30 {
        return Err(Error::invalid("rolling GARCH window must be at least 30"));
    }
    let raw: Vec<Option<Result<GarchFit>>> = (0..returns.len())
        .into_par_iter()
        .map(|i| (i + 1 >= window).then(|| fit_mle(&returns[i + 1 - window..=i])))
        .collect();

    let mut out = Vec::with_capacity(returns.len());
    let mut previous: Option<GarchParams> = None;
    for (i, fit) in raw.into_iter().enumerate() {
        let fit = match fit {
            None => None,
            Some(Ok(f)) => Some(f),
            Some(Err(err)) => {
                let slice = &returns[i + 1 - window..=i];
                let params = previous.unwrap_or_else(|| fallback_params(slice));
                log::warn!("GARCH fit for window ending at {i} failed ({err}); reusing previous parameters");
                Some(GarchFit::from_params(params, slice, false)?)
            }
        };
        if let Some(f) = &fit {
            previous = Some(f.params);
        }
        out.push(fit);
    }
    Ok(out)
}

fn fallback_params(returns: &[f64]) -> GarchParams {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    GarchParams { mu: mean, a0: var.max(1e-12), a1: 0.0, b1: 0.0 }
}

/// One row of the daily parameter export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyFit {
    pub date: NaiveDate,
    pub fit: GarchFit,
}

pub fn write_daily_fits<W: Write>(fits: &[DailyFit], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "mu", "a0", "a1", "b1", "last_sigma2", "loglik", "converged"])?;
    for d in fits {
        let p = &d.fit.params;
        w.write_record([
            d.date.to_string(),
            fmt_sig(p.mu),
            fmt_sig(p.a0),
            fmt_sig(p.a1),
            fmt_sig(p.b1),
            fmt_sig(d.fit.last_sigma2),
            fmt_sig(d.fit.loglik),
            d.fit.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Daily underlying closes keyed by quote date, in date order.
pub fn underlying_series(records: &[OptionRecord]) -> Result<Vec<(NaiveDate, f64)>> {
    let mut by_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for r in records {
        match by_date.get(&r.quote_date) {
            Some(&s) if s != r.underlying => {
                return Err(Error::invalid(format!(
                    "quote date {} carries two underlying levels ({s} and {})",
                    r.quote_date, r.underlying
                )))
            }
            _ => {
                by_date.insert(r.quote_date, r.underlying);
            }
        }
    }
    Ok(by_date.into_iter().collect())
}

/// Replaces `garch_vol` with the rolling point-in-time forecast.
///
/// Each quote uses the fit on the `window` returns ending the trading day
/// before its quote date, forecast over the option's remaining trading days
/// and annualized. Quotes without enough history are dropped. Also returns
/// the daily fits, dated by the last return in each window.
pub fn attach_rolling_garch(records: &[OptionRecord], window: usize) -> Result<(Vec<OptionRecord>, Vec<DailyFit>)> {
    let series = underlying_series(records)?;
    let levels: Vec<f64> = series.iter().map(|(_, s)| *s).collect();
    let returns = if levels.len() >= 2 { log_returns(&levels)? } else { Vec::new() };
    if returns.len() < window {
        return Err(Error::invalid(format!(
            "need more than {window} trading days of underlying history, panel has {}",
            series.len()
        )));
    }
    let fits = rolling_fits(&returns, window)?;
    let daily: Vec<DailyFit> = fits
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.map(|fit| DailyFit { date: series[i + 1].0, fit }))
        .collect();
    // Return i is realized on date i + 1, so the fit ending the day before
    // date t is the one whose last return has index t - 2.
    let fit_before: HashMap<NaiveDate, GarchFit> =
        (2..series.len()).filter_map(|t| fits[t - 2].map(|f| (series[t].0, f))).collect();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let Some(fit) = fit_before.get(&r.quote_date) else { continue };
        let d = trading_days_between(r.quote_date, r.expiry_date);
        if d == 0 {
            return Err(Error::invalid(format!("record {} expires on its quote date", r.quote_date)));
        }
        let mut rec = r.clone();
        rec.garch_vol = Some(annualized_vol(forecast_cumulative_variance(fit, d)?, d));
        out.push(rec);
    }
    if out.len() < records.len() {
        log::info!("dropped {} quotes inside the GARCH warm-up period", records.len() - out.len());
    }
    Ok((out, daily))
}
