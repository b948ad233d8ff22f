use chrono::NaiveDate;
use proptest::prelude::*;
use vollab_core::garch::{
    annualized_vol, attach_rolling_garch, filter_variance, fit_mle, forecast_cumulative_variance, log_likelihood,
    simulate_returns, GarchFit, GarchParams,
};
use vollab_core::market_data::{generate_synthetic_market, SyntheticMarketConfig};

fn arb_params() -> impl Strategy<Value = GarchParams> {
    (-1e-3f64..1e-3, 1e-7f64..1e-4, 0.0f64..0.95, 0.0f64..0.3)
        .prop_filter("stationary", |(_, _, a1, b1)| a1 + b1 < 0.995)
        .prop_map(|(mu, a0, a1, b1)| GarchParams { mu, a0, a1, b1 })
}

/// Step-by-step expected variances: E[s2_{t+1}] from the last state, then
/// E[s2_{t+j}] = a0 + (a1 + b1) E[s2_{t+j-1}].
fn forecast_by_recursion(fit: &GarchFit, d: usize) -> f64 {
    let p = fit.params;
    let mut e = p.a0 + p.a1 * fit.last_sigma2 + p.b1 * fit.last_sigma2 * fit.last_e2;
    let mut sum = 0.0;
    for _ in 0..d {
        sum += e;
        e = p.a0 + (p.a1 + p.b1) * e;
    }
    sum
}

proptest! {
    #[test]
    fn variance_path_stays_above_intercept(p in arb_params(), seed in 0u64..1000) {
        let r = simulate_returns(&p, 300, seed).unwrap();
        let h = filter_variance(&p, &r);
        prop_assert!(h.iter().all(|v| *v >= p.a0 && v.is_finite()));
    }

    #[test]
    fn forecast_matches_recursion(p in arb_params(), seed in 0u64..1000, d in 1usize..400) {
        let r = simulate_returns(&p, 200, seed).unwrap();
        let fit = GarchFit::from_params(p, &r, true).unwrap();
        let got = forecast_cumulative_variance(&fit, d).unwrap();
        let want = forecast_by_recursion(&fit, d);
        prop_assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
        // Annualizing and scaling back recovers the forecast.
        let vol = annualized_vol(got, d);
        prop_assert!((vol * vol * d as f64 / 252.0 - got).abs() <= 1e-12 * got);
    }
}

#[test]
fn horizon_zero_rejected() {
    let p = GarchParams { mu: 0.0, a0: 1e-6, a1: 0.9, b1: 0.05 };
    let fit = GarchFit::from_params(p, &[0.01, -0.01], true).unwrap();
    assert!(forecast_cumulative_variance(&fit, 0).is_err());
}

#[test]
fn short_sample_fit_beats_truth_likelihood() {
    let truth = GarchParams { mu: 2e-4, a0: 5e-6, a1: 0.85, b1: 0.1 };
    let r = simulate_returns(&truth, 2000, 17).unwrap();
    let fit = fit_mle(&r).unwrap();
    assert!(fit.loglik >= log_likelihood(&truth, &r) - 1e-6);
    assert!(fit.params.validate().is_ok());
}

#[test]
fn attached_vol_ignores_same_day_and_later_prices() {
    let cfg = SyntheticMarketConfig { n_days: 320, maturities_months: vec![3], ..Default::default() };
    let panel = generate_synthetic_market(&cfg).unwrap();
    let (base, _) = attach_rolling_garch(&panel, 252).unwrap();
    let probe: NaiveDate = base[base.len() / 2].quote_date;

    // Shock the underlying from the probe date on.
    let shocked: Vec<_> = panel
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.quote_date >= probe {
                r.underlying *= 1.3;
            }
            r
        })
        .collect();
    let (after, _) = attach_rolling_garch(&shocked, 252).unwrap();
    let day = |v: &[vollab_core::market_data::OptionRecord]| -> Vec<f64> {
        v.iter().filter(|r| r.quote_date == probe).map(|r| r.garch_vol.unwrap()).collect()
    };
    let (a, b) = (day(&base), day(&after));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    // The following day does see the shocked return.
    let next = base.iter().map(|r| r.quote_date).find(|d| *d > probe).unwrap();
    let on = |v: &[vollab_core::market_data::OptionRecord]| -> f64 {
        v.iter().find(|r| r.quote_date == next).unwrap().garch_vol.unwrap()
    };
    assert_ne!(on(&base), on(&after));
}
