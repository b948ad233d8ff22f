//! Black-Scholes-Merton European puts on a continuous-dividend underlying.

use crate::error::{Error, Result};
use crate::market_data::OptionRecord;

/// `d1`/`d2` are clamped to this magnitude before entering the normal CDF.
const D_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsInputs {
    pub s: f64,
    pub k: f64,
    /// Years to expiry.
    pub t: f64,
    pub r: f64,
    pub q: f64,
    /// Annualized volatility.
    pub sigma: f64,
}

impl BsInputs {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.s) && ok(self.k) && ok(self.t) && ok(self.sigma)) {
            return Err(Error::invalid(format!(
                "Black-Scholes inputs need positive s, k, t, sigma (got {self:?})"
            )));
        }
        if !self.r.is_finite() || !self.q.is_finite() || self.q < 0.0 {
            return Err(Error::invalid(format!(
                "Black-Scholes inputs need finite r and q >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    fn d1_d2(&self) -> (f64, f64) {
        let vol_sqrt_t = self.sigma * self.t.sqrt();
        let d1 = ((self.s / self.k).ln() + (self.r - self.q + 0.5 * self.sigma * self.sigma) * self.t)
            / vol_sqrt_t;
        let d2 = d1 - vol_sqrt_t;
        (d1.clamp(-D_CLAMP, D_CLAMP), d2.clamp(-D_CLAMP, D_CLAMP))
    }
}

/// Standard normal CDF, `0.5 * erfc(-x / sqrt 2)`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn put_price(inp: &BsInputs) -> Result<f64> {
    inp.validate()?;
    let (d1, d2) = inp.d1_d2();
    let disc_k = inp.k * (-inp.r * inp.t).exp();
    let disc_s = inp.s * (-inp.q * inp.t).exp();
    Ok((disc_k * norm_cdf(-d2) - disc_s * norm_cdf(-d1)).max(0.0))
}

/// The matching European call; used for parity checks.
pub fn call_price(inp: &BsInputs) -> Result<f64> {
    inp.validate()?;
    let (d1, d2) = inp.d1_d2();
    let disc_k = inp.k * (-inp.r * inp.t).exp();
    let disc_s = inp.s * (-inp.q * inp.t).exp();
    Ok((disc_s * norm_cdf(d1) - disc_k * norm_cdf(d2)).max(0.0))
}

/// Black-Scholes inputs implied by a quote and its GARCH volatility.
pub fn inputs_for(record: &OptionRecord) -> Result<BsInputs> {
    let sigma = record.garch_vol.ok_or_else(|| {
        Error::invalid(format!(
            "record {} K={} has no GARCH volatility",
            record.quote_date, record.strike
        ))
    })?;
    Ok(BsInputs {
        s: record.underlying,
        k: record.strike,
        t: record.ttm_years,
        r: record.spot_rate,
        q: record.dividend_yield,
        sigma,
    })
}

pub fn record_price(record: &OptionRecord) -> Result<f64> {
    put_price(&inputs_for(record)?)
}

/// Populates `bs_price` on every record, preserving order.
pub fn attach_bs_feature(records: &mut [OptionRecord]) -> Result<()> {
    for rec in records.iter_mut() {
        rec.bs_price = Some(record_price(rec)?);
    }
    Ok(())
}
