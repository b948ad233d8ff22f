//! Walk-forward evaluation: half-year window schedules, per-window training
//! on OTM and ITM subsets, MAPE scoring and segmentation.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, Months, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_matrix, sort_records, FeatureMatrix};
use crate::market_data::{MoneynessClass, OptionRecord};
use crate::models::{ModelKind, ModelSpec, Regressor, TrainedModel};
use crate::util::{derive_seed, fmt_sig, quantile_sorted};

pub const TRAIN_YEARS_INITIAL: u32 = 3;
pub const TEST_MONTHS: u32 = 6;
/// Black-Scholes price splitting cheap from regular quotes.
pub const BS_PRICE_THRESHOLD: f64 = 0.075;
/// OTM moneyness bins `(lo, hi]` on `S/K`.
pub const MONEYNESS_BINS: [(f64, f64); 4] = [(1.0, 1.1), (1.1, 1.2), (1.2, 1.3), (1.3, 1.5)];
/// Share of the training window (its chronological tail) held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowMode {
    #[serde(rename = "expanding")]
    Expanding,
    #[serde(rename = "rolling")]
    Rolling,
}

impl WindowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowMode::Expanding => "expanding",
            WindowMode::Rolling => "rolling",
        }
    }
}

impl fmt::Display for WindowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WindowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "expanding" => Ok(WindowMode::Expanding),
            "rolling" => Ok(WindowMode::Rolling),
            other => Err(Error::invalid(format!("unknown window mode {other:?}"))),
        }
    }
}

/// One train/test split; all end dates are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl Window {
    /// `YY/M : YY/M`, training start to the last month of the test span.
    pub fn label(&self) -> String {
        let last = self.test_end.pred_opt().unwrap();
        format!(
            "{:02}/{} : {:02}/{}",
            self.train_start.year().rem_euclid(100),
            self.train_start.month(),
            last.year().rem_euclid(100),
            last.month()
        )
    }

    pub fn in_train(&self, d: NaiveDate) -> bool {
        d >= self.train_start && d < self.train_end
    }

    pub fn in_test(&self, d: NaiveDate) -> bool {
        d >= self.test_start && d < self.test_end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub mode: WindowMode,
    pub train_start: NaiveDate,
    pub train_years_initial: u32,
    pub test_months: u32,
    pub windows: Vec<Window>,
}

fn half_year_floor(d: NaiveDate) -> NaiveDate {
    let month = if d.month() <= 6 { 1 } else { 7 };
    NaiveDate::from_ymd_opt(d.year(), month, 1).unwrap()
}

/// Schedule over the span of `dates`, snapped to calendar half-years.
///
/// The first window trains on three years from the half-year containing the
/// earliest date and tests on the next six months; each later window moves
/// the test span six months ahead. A final, partially observed half-year
/// still receives a window.
pub fn build_schedule(dates: &[NaiveDate], mode: WindowMode) -> Result<WindowSchedule> {
    let (Some(first), Some(last)) = (dates.iter().min(), dates.iter().max()) else {
        return Err(Error::invalid("cannot schedule windows over an empty panel"));
    };
    build_schedule_between(*first, *last, mode)
}

pub fn build_schedule_between(first: NaiveDate, last: NaiveDate, mode: WindowMode) -> Result<WindowSchedule> {
    let start = half_year_floor(first);
    let end = half_year_floor(last) + Months::new(TEST_MONTHS);
    let train_span = Months::new(12 * TRAIN_YEARS_INITIAL);
    let step = Months::new(TEST_MONTHS);
    if start + train_span + step > end {
        return Err(Error::invalid(format!(
            "panel {first}..{last} spans less than {} years plus {} months",
            TRAIN_YEARS_INITIAL, TEST_MONTHS
        )));
    }
    let mut windows = Vec::new();
    let mut test_start = start + train_span;
    while test_start + step <= end {
        let train_start = match mode {
            WindowMode::Expanding => start,
            WindowMode::Rolling => test_start - train_span,
        };
        windows.push(Window { train_start, train_end: test_start, test_start, test_end: test_start + step });
        test_start = test_start + step;
    }
    Ok(WindowSchedule {
        mode,
        train_start: start,
        train_years_initial: TRAIN_YEARS_INITIAL,
        test_months: TEST_MONTHS,
        windows,
    })
}

/// Mean absolute percentage error, in percent.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::invalid(format!("MAPE needs equal, non-empty inputs ({} vs {})", y.len(), yhat.len())));
    }
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!("MAPE needs positive observed prices, got {bad}")));
    }
    Ok(100.0 * y.iter().zip(yhat).map(|(a, b)| (a - b).abs() / a).sum::<f64>() / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    AllTrain,
    AllTest,
    BsAtOrAboveThreshold,
    BsBelowThreshold,
    MoneynessBin(f64, f64),
}

impl Segment {
    pub fn label(&self) -> String {
        match self {
            Segment::AllTrain => "all_train".into(),
            Segment::AllTest => "all_test".into(),
            Segment::BsAtOrAboveThreshold => format!("bs_ge_{BS_PRICE_THRESHOLD}"),
            Segment::BsBelowThreshold => format!("bs_lt_{BS_PRICE_THRESHOLD}"),
            Segment::MoneynessBin(lo, hi) => format!("moneyness_({lo},{hi}]"),
        }
    }

    /// Whether a test record belongs to this test-side segment.
    fn contains_test(&self, r: &OptionRecord) -> bool {
        match self {
            Segment::AllTrain => false,
            Segment::AllTest => true,
            Segment::BsAtOrAboveThreshold => r.bs_price.is_some_and(|p| p >= BS_PRICE_THRESHOLD),
            Segment::BsBelowThreshold => r.bs_price.is_some_and(|p| p < BS_PRICE_THRESHOLD),
            Segment::MoneynessBin(lo, hi) => {
                let m = r.moneyness();
                m > *lo && m <= *hi
            }
        }
    }

    /// Test-side segments reported for a moneyness class.
    pub fn test_segments(class: MoneynessClass) -> Vec<Segment> {
        match class {
            MoneynessClass::Otm => {
                let mut v = vec![Segment::AllTest, Segment::BsAtOrAboveThreshold, Segment::BsBelowThreshold];
                v.extend(MONEYNESS_BINS.iter().map(|&(lo, hi)| Segment::MoneynessBin(lo, hi)));
                v
            }
            MoneynessClass::Itm => vec![Segment::AllTest],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub window_label: String,
    pub mode: WindowMode,
    pub model: ModelKind,
    pub moneyness_class: MoneynessClass,
    pub include_bs: bool,
    pub segment: String,
    pub mape_pct: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BacktestReport {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

const REPORT_HEADER: [&str; 8] = ["window_label", "mode", "model", "moneyness_class", "include_bs", "segment", "mape_pct", "n"];

impl BacktestReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.window_label.clone(),
                r.mode.to_string(),
                r.model.to_string(),
                r.moneyness_class.as_str().to_string(),
                r.include_bs.to_string(),
                r.segment.clone(),
                fmt_sig(r.mape_pct),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Parse(format!("report line {}: bad {what}", i + 2));
            let get = |j: usize| rec.get(j).map(str::trim).ok_or_else(|| bad(REPORT_HEADER[j]));
            let class = match get(3)? {
                "OTM" => MoneynessClass::Otm,
                "ITM" => MoneynessClass::Itm,
                _ => return Err(bad("moneyness_class")),
            };
            rows.push(ReportRow {
                window_label: get(0)?.to_string(),
                mode: get(1)?.parse()?,
                model: get(2)?.parse()?,
                moneyness_class: class,
                include_bs: get(4)?.parse().map_err(|_| bad("include_bs"))?,
                segment: get(5)?.to_string(),
                mape_pct: get(6)?.parse().map_err(|_| bad("mape_pct"))?,
                n: get(7)?.parse().map_err(|_| bad("n"))?,
            });
        }
        Ok(BacktestReport { rows, warnings: Vec::new() })
    }
}

/// A model taking part in a backtest.
#[derive(Debug, Clone, PartialEq)]
pub enum BacktestModel {
    Trained(ModelSpec),
    BlackScholes,
}

impl BacktestModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            BacktestModel::Trained(s) => s.kind(),
            BacktestModel::BlackScholes => ModelKind::Bs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOptions {
    pub include_bs: bool,
    pub seed: u64,
    /// Keep every trained model for the artifact.
    pub keep_models: bool,
}

/// Trained OTM/ITM pair for one window and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub window_label: String,
    pub window: Window,
    pub model: ModelKind,
    pub include_bs: bool,
    pub otm: Option<TrainedModel>,
    pub itm: Option<TrainedModel>,
}

pub const ARTIFACT_VERSION: u32 = 1;

/// Versioned JSON bundle of trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub mode: WindowMode,
    pub entries: Vec<ArtifactEntry>,
}

impl ModelArtifact {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let a: ModelArtifact = serde_json::from_reader(input)?;
        if a.format_version != ARTIFACT_VERSION {
            return Err(Error::Parse(format!(
                "model artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                a.format_version
            )));
        }
        Ok(a)
    }

    /// Entry for `model` in the window labelled `window`, or the last window.
    pub fn find(&self, model: Option<ModelKind>, window: Option<&str>) -> Result<&ArtifactEntry> {
        self.entries
            .iter()
            .rev()
            .find(|e| model.is_none_or(|m| e.model == m) && window.is_none_or(|w| e.window_label == w))
            .ok_or_else(|| {
                Error::invalid(format!("artifact has no models for model={model:?}, window={window:?}"))
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BacktestOutput {
    pub report: BacktestReport,
    pub artifact_entries: Vec<ArtifactEntry>,
}

struct TaskResult {
    rows: Vec<ReportRow>,
    warnings: Vec<String>,
    models: Vec<(ModelKind, Option<TrainedModel>)>,
}

/// Index where the chronological validation tail starts; never splits a quote date.
fn validation_cut(records: &[OptionRecord]) -> usize {
    let n = records.len();
    let tail = ((n as f64) * VALIDATION_FRACTION).floor() as usize;
    if tail == 0 || tail >= n {
        return n;
    }
    let mut cut = n - tail;
    let day = records[cut].quote_date;
    while cut > 0 && records[cut - 1].quote_date == day {
        cut -= 1;
    }
    if cut == 0 {
        n - tail
    } else {
        cut
    }
}

fn score(rows: &mut Vec<ReportRow>, base: &ReportRow, segment: &Segment, y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Ok(());
    }
    rows.push(ReportRow { segment: segment.label(), mape_pct: mape(y, yhat)?, n: y.len(), ..base.clone() });
    Ok(())
}

fn predictions(model: Option<&TrainedModel>, records: &[OptionRecord], matrix: Option<&FeatureMatrix>) -> Result<Vec<f64>> {
    match (model, matrix) {
        (Some(m), Some(x)) => m.predict(x),
        _ => records
            .iter()
            .map(|r| r.bs_price.ok_or_else(|| Error::invalid("benchmark needs bs_price on every record")))
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_task(
    window_idx: usize,
    window: &Window,
    class: MoneynessClass,
    train: &[OptionRecord],
    test: &[OptionRecord],
    mode: WindowMode,
    models: &[BacktestModel],
    opts: &BacktestOptions,
) -> Result<TaskResult> {
    let label = window.label();
    let mut out = TaskResult { rows: Vec::new(), warnings: Vec::new(), models: Vec::new() };
    if train.is_empty() {
        let msg = format!("window {label} {}: empty training subset, skipped", class.as_str());
        log::warn!("{msg}");
        out.warnings.push(msg);
        return Ok(out);
    }
    let cut = validation_cut(train);
    for (model_idx, model) in models.iter().enumerate() {
        let kind = model.kind();
        let base = ReportRow {
            window_label: label.clone(),
            mode,
            model: kind,
            moneyness_class: class,
            include_bs: opts.include_bs,
            segment: String::new(),
            mape_pct: 0.0,
            n: 0,
        };
        let (trained, train_x, test_x) = match model {
            BacktestModel::BlackScholes => (None, None, None),
            BacktestModel::Trained(spec) => {
                let schema = kind.schema(opts.include_bs).expect("trainable model has a schema");
                let train_x = build_matrix(train, &schema)?;
                let test_x = build_matrix(test, &schema)?;
                let seed = derive_seed(opts.seed, &[window_idx as u64, class as u64, model_idx as u64]);
                let spec = spec.with_seed(seed);
                let fitted = match spec {
                    ModelSpec::Nn(_) => spec.fit(&train_x.slice_rows(0..cut), &train_x.slice_rows(cut..train_x.n_rows))?,
                    _ => spec.fit(&train_x, &FeatureMatrix::empty(schema))?,
                };
                (Some(fitted), Some(train_x), Some(test_x))
            }
        };
        let train_pred = predictions(trained.as_ref(), train, train_x.as_ref())?;
        let train_y: Vec<f64> = train.iter().map(|r| r.mid_price).collect();
        score(&mut out.rows, &base, &Segment::AllTrain, &train_y, &train_pred)?;
        if !test.is_empty() {
            let test_pred = predictions(trained.as_ref(), test, test_x.as_ref())?;
            for seg in Segment::test_segments(class) {
                let (y, yhat): (Vec<f64>, Vec<f64>) = test
                    .iter()
                    .zip(&test_pred)
                    .filter(|(r, _)| seg.contains_test(r))
                    .map(|(r, p)| (r.mid_price, *p))
                    .unzip();
                score(&mut out.rows, &base, &seg, &y, &yhat)?;
            }
        }
        if kind != ModelKind::Bs {
            out.models.push((kind, if opts.keep_models { trained } else { None }));
        }
    }
    Ok(out)
}

/// Trains and scores every model on every window and moneyness class.
///
/// `panel` must be filtered with GARCH volatility and the Black-Scholes
/// feature attached. Rows come out ordered by window, class (OTM first),
/// model (in the given order) and segment.
pub fn run_backtest(
    panel: &[OptionRecord],
    schedule: &WindowSchedule,
    models: &[BacktestModel],
    opts: &BacktestOptions,
) -> Result<BacktestOutput> {
    let mut sorted = panel.to_vec();
    sort_records(&mut sorted);
    let tasks: Vec<(usize, MoneynessClass)> = (0..schedule.windows.len())
        .flat_map(|w| MoneynessClass::ALL.into_iter().map(move |c| (w, c)))
        .collect();
    let results: Vec<Result<TaskResult>> = tasks
        .par_iter()
        .map(|&(w, class)| {
            let window = &schedule.windows[w];
            let pick = |inside: &dyn Fn(NaiveDate) -> bool| -> Vec<OptionRecord> {
                sorted
                    .iter()
                    .filter(|r| inside(r.quote_date) && MoneynessClass::of_ratio(r.moneyness()) == class)
                    .cloned()
                    .collect()
            };
            let train = pick(&|d| window.in_train(d));
            let test = pick(&|d| window.in_test(d));
            run_task(w, window, class, &train, &test, schedule.mode, models, opts)
        })
        .collect();

    let mut output = BacktestOutput::default();
    let mut pending: HashMap<(usize, ModelKind), ArtifactEntry> = HashMap::new();
    let mut order = Vec::new();
    for (&(w, class), res) in tasks.iter().zip(results) {
        let res = res?;
        output.report.rows.extend(res.rows);
        output.report.warnings.extend(res.warnings);
        for (kind, trained) in res.models {
            let entry = pending.entry((w, kind)).or_insert_with(|| {
                order.push((w, kind));
                ArtifactEntry {
                    window_label: schedule.windows[w].label(),
                    window: schedule.windows[w],
                    model: kind,
                    include_bs: opts.include_bs,
                    otm: None,
                    itm: None,
                }
            });
            match class {
                MoneynessClass::Otm => entry.otm = trained,
                MoneynessClass::Itm => entry.itm = trained,
            }
        }
    }
    if opts.keep_models {
        output.artifact_entries = order.into_iter().filter_map(|k| pending.remove(&k)).collect();
    }
    Ok(output)
}

/// Distribution of MAPE across windows for one report cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: WindowMode,
    pub model: ModelKind,
    pub moneyness_class: MoneynessClass,
    pub include_bs: bool,
    pub segment: String,
    pub n_windows: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Aggregates report rows across windows, in first-appearance order.
pub fn summarize_report(rows: &[ReportRow]) -> Vec<SummaryRow> {
    type Key = (WindowMode, ModelKind, MoneynessClass, bool, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: HashMap<Key, Vec<f64>> = HashMap::new();
    for r in rows {
        let key = (r.mode, r.model, r.moneyness_class, r.include_bs, r.segment.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.mape_pct);
    }
    order
        .into_iter()
        .map(|key| {
            let mut v = groups.remove(&key).unwrap();
            v.sort_by(f64::total_cmp);
            SummaryRow {
                mode: key.0,
                model: key.1,
                moneyness_class: key.2,
                include_bs: key.3,
                segment: key.4,
                n_windows: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: quantile_sorted(&v, 0.5),
                q1: quantile_sorted(&v, 0.25),
                q3: quantile_sorted(&v, 0.75),
                min: v[0],
                max: v[v.len() - 1],
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mode", "model", "moneyness_class", "include_bs", "segment", "n_windows", "mean", "median", "q1", "q3", "min", "max",
    ])?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.model.to_string(),
            r.moneyness_class.as_str().to_string(),
            r.include_bs.to_string(),
            r.segment.clone(),
            r.n_windows.to_string(),
            fmt_sig(r.mean),
            fmt_sig(r.median),
            fmt_sig(r.q1),
            fmt_sig(r.q3),
            fmt_sig(r.min),
            fmt_sig(r.max),
        ])?;
    }
    w.flush()?;
    Ok(())
}
