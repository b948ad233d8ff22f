//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use vollab_core::arbitrage::{
    self, BsPricer, ClassPricers, ModelPricer, PerturbationSpec, RecordPricer, ViolationTest, REFERENCE_PASS_RATES,
};
use vollab_core::backtest::{
    self, build_schedule, BacktestModel, BacktestOptions, BacktestReport, ModelArtifact, ARTIFACT_VERSION,
};
use vollab_core::bsm::attach_bs_feature;
use vollab_core::explain::{self, MaskingStrategy};
use vollab_core::features::{build_matrix, sort_records, FeatureSchema};
use vollab_core::garch::{attach_rolling_garch, write_daily_fits, GarchParams};
use vollab_core::market_data::{
    generate_synthetic_market, read_panel, read_rate_curve, write_panel, MoneynessClass, OptionRecord,
    SyntheticMarketConfig,
};
use vollab_core::models::{ModelKind, ModelSpec, NnConfig, RfConfig};
use vollab_core::util::{derive_seed, fmt_sig, sample_indices};

use crate::manifest::Manifest;
use crate::{BacktestArgs, CheckNoarbArgs, ClassArg, ExplainArgs, FitGarchArgs, GenDataArgs, MaskingArg, ReportArgs};

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open input file {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create output file {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_panel(path: &Path) -> Result<Vec<OptionRecord>> {
    let mut records = read_panel(open(path)?).with_context(|| format!("cannot parse panel {}", path.display()))?;
    sort_records(&mut records);
    Ok(records)
}

fn load_artifact(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::read_json(open(path)?).with_context(|| format!("cannot load model artifact {}", path.display()))
}

fn manifest(command: &str, argv: &[String], seed: Option<u64>) -> Manifest {
    Manifest::new(command, argv.get(1..).unwrap_or(&[]), seed)
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest("gen-data", argv, Some(a.seed));
    let defaults = SyntheticMarketConfig::default();
    let rate_curve = match &a.rate_curve {
        Some(p) => {
            m.input(p)?;
            read_rate_curve(open(p)?).with_context(|| format!("cannot parse rate curve {}", p.display()))?
        }
        None => defaults.rate_curve.clone(),
    };
    let config = SyntheticMarketConfig {
        seed: a.seed,
        n_days: a.days,
        s0: a.s0,
        garch_truth: GarchParams { mu: a.garch_mu, a0: a.garch_a0, a1: a.garch_a1, b1: a.garch_b1 },
        strike_grid_step: a.strike_step,
        maturities_months: a.maturities.clone(),
        price_noise_rel: a.noise,
        smile_skew: a.skew,
        start_date: a.start_date,
        dividend_yield: a.dividend_yield,
        rate_curve,
        moneyness_range: (
            a.moneyness_min.unwrap_or(defaults.moneyness_range.0),
            a.moneyness_max.unwrap_or(defaults.moneyness_range.1),
        ),
    };
    let records = generate_synthetic_market(&config)?;
    log::info!("generated {} quotes", records.len());
    write_panel(&records, create(&a.out)?)?;
    m.output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn fit_garch(a: &FitGarchArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest("fit-garch", argv, None);
    m.input(&a.panel)?;
    let records = load_panel(&a.panel)?;
    let (records, fits) = attach_rolling_garch(&records, a.window)?;
    let unconverged = fits.iter().filter(|f| !f.fit.converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {} daily GARCH fits did not converge", fits.len());
    }
    write_panel(&records, create(&a.out)?)?;
    m.output(&a.out);
    if let Some(p) = &a.params_out {
        write_daily_fits(&fits, create(p)?)?;
        m.output(p);
    }
    m.write_beside(&a.out)?;
    Ok(())
}

fn backtest_models(a: &BacktestArgs) -> Result<Vec<BacktestModel>> {
    let mut nn = NnConfig::default();
    if let Some(v) = a.nn_max_epochs {
        nn.max_epochs = v;
    }
    if let Some(v) = a.nn_learning_rate {
        nn.learning_rate = v;
    }
    if let Some(v) = a.nn_batch_size {
        nn.batch_size = v;
    }
    let mut rf = RfConfig::default();
    if let Some(v) = a.rf_trees {
        rf.n_trees = v;
    }
    if let Some(v) = a.rf_max_depth {
        rf.max_depth = v;
    }
    if let Some(v) = a.rf_features_per_split {
        rf.features_per_split = Some(v);
    }
    let mut out: Vec<BacktestModel> = Vec::new();
    for kind in &a.models {
        let model = match kind {
            ModelKind::Nn => BacktestModel::Trained(ModelSpec::Nn(nn.clone())),
            ModelKind::Rf => BacktestModel::Trained(ModelSpec::Rf(rf.clone())),
            ModelKind::Lr => BacktestModel::Trained(ModelSpec::Lr),
            ModelKind::Bs => BacktestModel::BlackScholes,
        };
        if out.iter().any(|m| m.kind() == *kind) {
            bail!("model {kind} listed twice");
        }
        out.push(model);
    }
    if out.is_empty() {
        bail!("no models selected");
    }
    Ok(out)
}

pub fn backtest(a: &BacktestArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest("backtest", argv, Some(a.seed));
    m.input(&a.panel)?;
    let models = backtest_models(a)?;
    let mut records = load_panel(&a.panel)?;
    attach_bs_feature(&mut records).context("panel needs garch_vol on every quote (run fit-garch first)")?;
    let dates: Vec<_> = records.iter().map(|r| r.quote_date).collect();
    let schedule = build_schedule(&dates, a.mode.into())?;
    log::info!("{} windows, {} quotes", schedule.windows.len(), records.len());
    let opts = BacktestOptions { include_bs: !a.no_bs, seed: a.seed, keep_models: a.models_out.is_some() };
    let output = backtest::run_backtest(&records, &schedule, &models, &opts)?;
    for w in &output.report.warnings {
        log::warn!("{w}");
    }
    output.report.write_csv(create(&a.out)?)?;
    m.output(&a.out);
    if let Some(p) = &a.models_out {
        let artifact = ModelArtifact { format_version: ARTIFACT_VERSION, mode: schedule.mode, entries: output.artifact_entries };
        let mut w = create(p)?;
        artifact.write_json(&mut w)?;
        w.flush()?;
        m.output(p);
    }
    m.write_beside(&a.out)?;
    Ok(())
}

/// Test-period quotes of `window` in the artifact, or the whole panel.
fn window_records<'a>(
    records: &'a [OptionRecord],
    artifact: Option<&ModelArtifact>,
    model: Option<ModelKind>,
    window: Option<&str>,
) -> Result<Vec<(usize, &'a OptionRecord)>> {
    let span = match artifact {
        Some(art) => Some(art.find(model, window)?.window),
        None => {
            if window.is_some() {
                bail!("--window needs a model artifact");
            }
            None
        }
    };
    Ok(records.iter().enumerate().filter(|(_, r)| span.is_none_or(|w| w.in_test(r.quote_date))).collect())
}

#[derive(Serialize)]
struct NoarbSummary<'a> {
    model: ModelKind,
    window: Option<&'a str>,
    #[serde(flatten)]
    summary: &'a arbitrage::ArbitrageSummary,
    reference_pass_rates_pct: Vec<(ViolationTest, f64)>,
}

pub fn check_noarb(a: &CheckNoarbArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest("check-noarb", argv, Some(a.seed));
    m.input(&a.panel)?;
    let records = load_panel(&a.panel)?;
    let artifact = match &a.models {
        Some(p) => {
            m.input(p)?;
            Some(load_artifact(p)?)
        }
        None if a.model == ModelKind::Bs => None,
        None => bail!("--models is required unless --model bs"),
    };
    let entry = match &artifact {
        Some(art) if a.model != ModelKind::Bs => Some(art.find(Some(a.model), a.window.as_deref())?),
        _ => None,
    };
    let model_filter = if a.model == ModelKind::Bs { None } else { Some(a.model) };
    let pool = window_records(&records, artifact.as_ref(), model_filter, a.window.as_deref())?;
    if pool.is_empty() {
        bail!("no quotes to check in the selected window");
    }
    let picked = sample_indices(pool.len(), a.sample, derive_seed(a.seed, &[3]));

    let bs = BsPricer;
    let (otm, itm): (Box<dyn RecordPricer + '_>, Box<dyn RecordPricer + '_>) = match entry {
        None => (Box::new(bs), Box::new(bs)),
        Some(e) => {
            let missing = |c: &str| anyhow!("artifact entry {} {} has no {c} model", e.window_label, e.model);
            (
                Box::new(ModelPricer(e.otm.as_ref().ok_or_else(|| missing("OTM"))?)),
                Box::new(ModelPricer(e.itm.as_ref().ok_or_else(|| missing("ITM"))?)),
            )
        }
    };
    let pricers = ClassPricers { otm: otm.as_ref(), itm: itm.as_ref() };
    let spec = PerturbationSpec::default();
    let per: Vec<_> = picked
        .par_iter()
        .map(|&i| {
            let (id, rec) = pool[i];
            arbitrage::check_option(&pricers, id, rec, &spec)
        })
        .collect::<vollab_core::Result<_>>()?;
    let violations: Vec<_> = per.into_iter().flatten().collect();
    let summary = arbitrage::summarize(&violations, picked.len())?;
    for t in &summary.tests {
        log::info!("{}: {}% pass", t.test, fmt_sig(t.pass_rate_pct));
    }
    arbitrage::write_violations(&violations, create(&a.out)?)?;
    m.output(&a.out);
    let summary_path = a.summary_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".summary.json"));
    let doc = NoarbSummary {
        model: a.model,
        window: entry.map(|e| e.window_label.as_str()),
        summary: &summary,
        reference_pass_rates_pct: REFERENCE_PASS_RATES.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&summary_path, text).with_context(|| format!("cannot write {}", summary_path.display()))?;
    m.output(&summary_path);
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn explain(a: &ExplainArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest("explain", argv, Some(a.seed));
    m.input(&a.panel)?;
    m.input(&a.models)?;
    let artifact = load_artifact(&a.models)?;
    if a.model == ModelKind::Bs {
        bail!("the Black-Scholes benchmark has no trained model to explain");
    }
    let entry = artifact.find(Some(a.model), a.window.as_deref())?;
    let class = match a.class {
        ClassArg::Otm => MoneynessClass::Otm,
        ClassArg::Itm => MoneynessClass::Itm,
    };
    let model = match class {
        MoneynessClass::Otm => entry.otm.as_ref(),
        MoneynessClass::Itm => entry.itm.as_ref(),
    }
    .ok_or_else(|| anyhow!("artifact entry {} {} has no {} model", entry.window_label, entry.model, class.as_str()))?;

    let mut records = load_panel(&a.panel)?;
    if entry.include_bs {
        attach_bs_feature(&mut records)?;
    }
    let in_class = |r: &OptionRecord| MoneynessClass::of_ratio(r.moneyness()) == class;
    let test: Vec<(usize, &OptionRecord)> =
        records.iter().enumerate().filter(|(_, r)| entry.window.in_test(r.quote_date) && in_class(r)).collect();
    if test.is_empty() {
        bail!("window {} has no {} test quotes in this panel", entry.window_label, class.as_str());
    }
    let test_records: Vec<OptionRecord> = test.iter().map(|(_, r)| (*r).clone()).collect();
    let inputs = explain::input_rows(model, &test_records)?;
    let strategy = match a.masking {
        MaskingArg::Marginal => MaskingStrategy::marginal_sample(&inputs, a.background, derive_seed(a.seed, &[5]))?,
        MaskingArg::Mean => MaskingStrategy::mean_impute(&inputs)?,
    };
    let picked = sample_indices(inputs.len(), a.n, derive_seed(a.seed, &[4]));
    let rows: Vec<Vec<f64>> = picked.iter().map(|&i| inputs[i].clone()).collect();
    let names = vollab_core::models::Regressor::schema(model).input_names();
    let f = explain::input_function(model);
    let batch = explain::shapley_batch(&f, &rows, &strategy, &names)?;

    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["row_id", "feature", "phi", "base_value"])?;
    for (res, &i) in batch.results.iter().zip(&picked) {
        let row_id = test[i].0.to_string();
        for (name, phi) in names.iter().zip(&res.phi) {
            w.write_record([row_id.as_str(), name, &fmt_sig(*phi), &fmt_sig(res.base_value)])?;
        }
    }
    w.flush()?;
    m.output(&a.out);

    let ranking_path = a.ranking_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".ranking.csv"));
    let mut w = csv::Writer::from_writer(create(&ranking_path)?);
    w.write_record(["feature", "mean_abs_phi"])?;
    for (name, v) in &batch.ranking {
        w.write_record([name.as_str(), &fmt_sig(*v)])?;
    }
    w.flush()?;
    m.output(&ranking_path);

    if let Some(p) = &a.pca_out {
        let train: Vec<OptionRecord> =
            records.iter().filter(|r| entry.window.in_train(r.quote_date) && in_class(r)).cloned().collect();
        let matrix = build_matrix(&train, &FeatureSchema::raw(entry.include_bs))?;
        let pca = explain::pca_loadings(&matrix)?;
        if pca.truncated {
            log::warn!("feature panel has rank below 3; fewer components reported");
        }
        let mut w = csv::Writer::from_writer(create(p)?);
        let mut header = vec!["feature".to_string()];
        header.extend((1..=pca.n_components()).map(|c| format!("pc{c}")));
        w.write_record(&header)?;
        for (name, row) in pca.names.iter().zip(&pca.loadings) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| fmt_sig(*v)));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["explained_variance_ratio".to_string()];
        rec.extend(pca.explained_variance_ratio.iter().map(|v| fmt_sig(*v)));
        w.write_record(&rec)?;
        w.flush()?;
        m.output(p);
    }
    m.write_beside(&a.out)?;
    Ok(())
}

pub fn report(a: &ReportArgs, argv: &[String]) -> Result<()> {
    let mut m = manifest("report", argv, None);
    m.input(&a.input)?;
    let report = BacktestReport::read_csv(open(&a.input)?)
        .with_context(|| format!("cannot parse report {}", a.input.display()))?;
    let summary = backtest::summarize_report(&report.rows);
    backtest::write_summary(&summary, create(&a.out)?)?;
    m.output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}
