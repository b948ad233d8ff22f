use chrono::NaiveDate;
use proptest::prelude::*;
use vollab_core::arbitrage::{
    check_option, summarize, BsPricer, ClassPricers, FnPricer, PerturbationSpec, ViolationTest,
};
use vollab_core::bsm::record_price;
use vollab_core::market_data::{OptionRecord, Settlement};

fn record(s: f64, k: f64, t: f64, r: f64, sigma: f64) -> OptionRecord {
    let q = NaiveDate::from_ymd_opt(2010, 3, 1).unwrap();
    let e = q + chrono::Days::new((t * 365.0).round() as u64);
    let mut rec = OptionRecord::new(q, e, k, s, 1.0, 1.0, t, r, 0.018, Some(sigma), Settlement::Am);
    rec.mid_price = record_price(&rec).unwrap().max(1e-6);
    rec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Rates stay below the dividend yield scaled by the lowest moneyness, so
    // the closed form is non-decreasing in maturity as well.
    #[test]
    fn closed_form_passes_every_test(m in 0.7f64..1.45, t in 0.09f64..1.45, r in 0.0f64..0.011, sigma in 0.08f64..0.5) {
        let k = 1000.0;
        let rec = record(m * k, k, t, r, sigma);
        let pricer = BsPricer;
        let v = check_option(&ClassPricers::same(&pricer), 0, &rec, &PerturbationSpec::default()).unwrap();
        prop_assert!(v.is_empty(), "{:?}", v);
    }
}

#[test]
fn maturity_dent_is_located() {
    let rec = record(1000.0, 1000.0, 0.5, 0.01, 0.2);
    let spec = PerturbationSpec::default();
    let g = 1.0 + spec.ttm_step_frac;
    let dented_t = rec.ttm_years * g.powi(-2);
    let pricer = FnPricer(|r: &OptionRecord| {
        let p = record_price(r)?;
        Ok(if (r.ttm_years - dented_t).abs() < 1e-12 { p + 3.0 } else { p })
    });
    let v = check_option(&ClassPricers::same(&pricer), 7, &rec, &spec).unwrap();
    let ttm: Vec<_> = v.iter().filter(|x| x.test == ViolationTest::MonoTtm).collect();
    assert_eq!(ttm.len(), 1, "{v:?}");
    // The bump at -2 makes the (-2, -1) step fall.
    let at = |j: i32| record_price(&OptionRecord { ttm_years: rec.ttm_years * g.powi(j), ..rec.clone() }).unwrap();
    assert_eq!(ttm[0].step_distance, 2);
    assert_eq!(ttm[0].record_id, 7);
    assert!((ttm[0].magnitude - (at(-2) + 3.0 - at(-1))).abs() < 1e-9);
    assert!(v.iter().all(|x| x.test == ViolationTest::MonoTtm));
}

#[test]
fn flat_pricer_passes_and_falling_pricer_fails_strike_tests() {
    let rec = record(1000.0, 1000.0, 0.25, 0.01, 0.2);
    let spec = PerturbationSpec::default();
    let flat = FnPricer(|_: &OptionRecord| Ok(10.0));
    assert!(check_option(&ClassPricers::same(&flat), 0, &rec, &spec).unwrap().is_empty());

    let falling = FnPricer(|r: &OptionRecord| Ok(2000.0 - r.strike));
    let v = check_option(&ClassPricers::same(&falling), 0, &rec, &spec).unwrap();
    let mono: Vec<_> = v.iter().filter(|x| x.test == ViolationTest::MonoStrike).collect();
    // One run covering the whole sweep, starting next to the quote.
    assert_eq!(mono.len(), 1);
    assert_eq!(mono[0].step_distance, 1);
    let summary = summarize(&v, 4).unwrap();
    assert_eq!(summary.pass_rate(ViolationTest::MonoStrike), 75.0);
    assert_eq!(summary.pass_rate(ViolationTest::ConvexStrike), 100.0);
}

#[test]
fn invalid_requests() {
    let spec = PerturbationSpec::default();
    let pricer = BsPricer;
    let outside = record(1000.0, 400.0, 0.5, 0.01, 0.2);
    assert!(check_option(&ClassPricers::same(&pricer), 0, &outside, &spec).is_err());
    let bad = PerturbationSpec { strike_step: 0.0, ..spec };
    let inside = record(1000.0, 1000.0, 0.5, 0.01, 0.2);
    assert!(check_option(&ClassPricers::same(&pricer), 0, &inside, &bad).is_err());
    assert!(summarize(&[], 0).is_err());
}
