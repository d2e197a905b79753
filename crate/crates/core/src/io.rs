//! File ingestion and result persistence.
//!
//! Formats:
//! - dataset CSV: `date,series_id,value`, ISO-8601 dates, one row per
//!   (date, series); internal gaps are filled by carrying the last
//!   observation forward up to a configurable cap.
//! - hierarchy spec JSON: keys `top`, `bottoms`, `groupings`.
//! - forecast bundle CSV: `origin_date,horizon,expert_id,series_id,value`,
//!   long format; `origin_date` is the last day of the training window.
//! - report CSV: long format `approach,series,horizon,metric,value` with
//!   metrics `mae`, `mse`, `q` and `failures`.
//! - coherence audit CSV: `approach,origin,horizon,residual`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};

use crate::baseline::SeriesData;
use crate::covariance::ResidualPanel;
use crate::error::{Error, Result};
use crate::evaluation::{
    ApproachScores, Approach, EvalReport, HorizonSet, ImportedProvider,
};
use crate::hierarchy::{Hierarchy, HierarchySpec};

/// Default cap on consecutive gap-filled days.
pub const DEFAULT_GAP_CAP: usize = 3;

/// An aligned daily dataset: every series covers the same date range.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Ordered common dates.
    pub dates: Vec<NaiveDate>,
    /// Values per series id, aligned with `dates`.
    pub values: BTreeMap<String, Vec<f64>>,
    /// Gap-filled day count per series.
    pub gap_counts: BTreeMap<String, usize>,
}

impl Dataset {
    /// Number of observations per series.
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    /// True when the dataset holds no dates.
    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Position of a date within the common range.
    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Observation matrix (`len x n`) in hierarchy column order.
    pub fn to_matrix(&self, hierarchy: &Hierarchy) -> Result<DMatrix<f64>> {
        let t = self.len();
        let n = hierarchy.n();
        let mut m = DMatrix::zeros(t, n);
        for (i, id) in hierarchy.series_ids().iter().enumerate() {
            let col = self
                .values
                .get(id)
                .ok_or_else(|| Error::UnknownSeriesId { id: id.clone() })?;
            for (r, v) in col.iter().enumerate() {
                m[(r, i)] = *v;
            }
        }
        Ok(m)
    }

    /// One series as [`SeriesData`] with the given seasonal period.
    pub fn series(&self, id: &str, period: usize) -> Result<SeriesData> {
        let values = self
            .values
            .get(id)
            .ok_or_else(|| Error::UnknownSeriesId { id: id.into() })?;
        SeriesData::new(id, values.clone(), period)
    }
}

/// Load a hierarchy spec from a JSON file and build it.
pub fn load_hierarchy_json(path: &Path) -> Result<Hierarchy> {
    let text = std::fs::read_to_string(path)?;
    HierarchySpec::from_json(&text)?.build()
}

/// Load a `date,series_id,value` CSV into an aligned dataset.
///
/// Series are trimmed to the intersection of their date ranges; interior
/// gaps up to `gap_cap` consecutive days are filled by carrying the last
/// observation forward, and per-series fill counts are reported.
pub fn load_dataset_csv(path: &Path, gap_cap: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["date", "series_id", "value"];
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::InvalidParameter(format!(
            "dataset header must be 'date,series_id,value', got '{}'",
            actual.join(",")
        )));
    }

    let mut raw: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let date_str = record.get(0).unwrap_or("").trim();
        let id = record.get(1).unwrap_or("").trim().to_string();
        let value_str = record.get(2).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| {
            Error::NonNumericValue {
                series: id.clone(),
                date: date_str.into(),
                value: "unparseable date".into(),
            }
        })?;
        let value: f64 = value_str.parse().map_err(|_| Error::NonNumericValue {
            series: id.clone(),
            date: date_str.into(),
            value: value_str.into(),
        })?;
        if !value.is_finite() {
            return Err(Error::NonNumericValue {
                series: id.clone(),
                date: date_str.into(),
                value: value_str.into(),
            });
        }
        let per_series = raw.entry(id.clone()).or_default();
        if per_series.insert(date, value).is_some() {
            return Err(Error::DuplicateRow {
                series: id,
                date: date_str.into(),
            });
        }
    }
    if raw.is_empty() {
        return Err(Error::InvalidParameter("dataset is empty".into()));
    }

    // Common range: latest first date through earliest last date.
    let start = raw
        .values()
        .map(|m| *m.keys().next().unwrap())
        .max()
        .unwrap();
    let end = raw
        .values()
        .map(|m| *m.keys().next_back().unwrap())
        .min()
        .unwrap();
    if start > end {
        return Err(Error::InvalidParameter(
            "series date ranges do not overlap".into(),
        ));
    }
    let mut dates = Vec::new();
    let mut d = start;
    while d <= end {
        dates.push(d);
        d = d.succ_opt().expect("date overflow");
    }

    let mut values = BTreeMap::new();
    let mut gap_counts = BTreeMap::new();
    for (id, per_series) in &raw {
        let mut col = Vec::with_capacity(dates.len());
        // Seed carry-forward with the newest observation at or before start.
        let mut last = per_series
            .range(..=start)
            .next_back()
            .map(|(_, v)| *v)
            .expect("range construction guarantees a value at or before start");
        let mut run = 0usize;
        let mut filled = 0usize;
        for date in &dates {
            match per_series.get(date) {
                Some(v) => {
                    last = *v;
                    run = 0;
                    col.push(*v);
                }
                None => {
                    run += 1;
                    if run > gap_cap {
                        return Err(Error::NonContiguousDates {
                            series: id.clone(),
                            gap: run,
                            cap: gap_cap,
                        });
                    }
                    filled += 1;
                    col.push(last);
                }
            }
        }
        values.insert(id.clone(), col);
        gap_counts.insert(id.clone(), filled);
    }

    Ok(Dataset {
        dates,
        values,
        gap_counts,
    })
}

/// Parse a forecast-bundle CSV into an [`ImportedProvider`].
///
/// Every `origin_date` must carry a complete (expert x series) grid for
/// contiguous horizons starting at 1. Expert order is lexicographic.
pub fn import_forecast_bundle(
    path: &Path,
    hierarchy: &Hierarchy,
    dataset: &Dataset,
) -> Result<ImportedProvider> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["origin_date", "horizon", "expert_id", "series_id", "value"];
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::InvalidParameter(format!(
            "bundle header must be 'origin_date,horizon,expert_id,series_id,value', got '{}'",
            actual.join(",")
        )));
    }

    // (origin, horizon, expert, series) -> value
    type Cells = BTreeMap<(usize, usize, String, usize), f64>;
    let mut cells: Cells = BTreeMap::new();
    let mut experts: BTreeSet<String> = BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let date_str = record.get(0).unwrap_or("").trim();
        let horizon: usize = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad horizon '{}'", date_str)))?;
        let expert = record.get(2).unwrap_or("").trim().to_string();
        let series = record.get(3).unwrap_or("").trim().to_string();
        let value: f64 = record
            .get(4)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::NonNumericValue {
                series: series.clone(),
                date: date_str.into(),
                value: record.get(4).unwrap_or("").into(),
            })?;
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| {
            Error::InvalidParameter(format!("bad origin_date '{date_str}'"))
        })?;
        let date_idx = dataset.date_index(date).ok_or_else(|| {
            Error::InvalidParameter(format!("origin_date '{date_str}' outside dataset range"))
        })?;
        // origin = training length = index of last training day + 1.
        let origin = date_idx + 1;
        let series_idx = hierarchy
            .index_of(&series)
            .ok_or(Error::UnknownSeriesId { id: series.clone() })?;
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        if cells
            .insert((origin, horizon, expert.clone(), series_idx), value)
            .is_some()
        {
            return Err(Error::UnbalancedBundle {
                detail: format!(
                    "duplicate cell origin {date_str}, horizon {horizon}, expert {expert}, series {series}"
                ),
            });
        }
        experts.insert(expert);
    }
    if cells.is_empty() {
        return Err(Error::UnbalancedBundle {
            detail: "bundle file holds no rows".into(),
        });
    }

    let expert_ids: Vec<String> = experts.into_iter().collect();
    let n = hierarchy.n();
    let p = expert_ids.len();

    let origins: BTreeSet<usize> = cells.keys().map(|k| k.0).collect();
    let mut by_origin = BTreeMap::new();
    for &origin in &origins {
        let horizons: BTreeSet<usize> = cells
            .keys()
            .filter(|k| k.0 == origin)
            .map(|k| k.1)
            .collect();
        let h_max = *horizons.iter().next_back().unwrap();
        if horizons.len() != h_max {
            return Err(Error::UnbalancedBundle {
                detail: format!("origin index {origin}: horizons are not contiguous from 1"),
            });
        }
        let mut mats = vec![DMatrix::zeros(h_max, n); p];
        for h in 1..=h_max {
            for (j, expert) in expert_ids.iter().enumerate() {
                for i in 0..n {
                    let key = (origin, h, expert.clone(), i);
                    let v = cells.get(&key).ok_or_else(|| Error::UnbalancedBundle {
                        detail: format!(
                            "missing cell: origin index {origin}, horizon {h}, expert {expert}, series {}",
                            hierarchy.series_ids()[i]
                        ),
                    })?;
                    mats[j][(h - 1, i)] = *v;
                }
            }
        }
        by_origin.insert(origin, mats);
    }

    let actuals = dataset.to_matrix(hierarchy)?;
    Ok(ImportedProvider::new(expert_ids, by_origin, actuals))
}

// Shortest round-trip formatting keeps score CSVs bit-exact on re-read.
fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

/// Serialize a report as long-format CSV.
pub fn report_to_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["approach", "series", "horizon", "metric", "value"])?;
    for s in &report.scores {
        let app = s.approach.to_string();
        for h in 1..=report.max_horizon {
            for (i, id) in report.series_ids.iter().enumerate() {
                w.write_record([
                    app.as_str(),
                    id.as_str(),
                    &h.to_string(),
                    "mae",
                    &fmt_value(s.mae[h - 1][i]),
                ])?;
                w.write_record([
                    app.as_str(),
                    id.as_str(),
                    &h.to_string(),
                    "mse",
                    &fmt_value(s.mse[h - 1][i]),
                ])?;
            }
            w.write_record([
                app.as_str(),
                "*",
                &h.to_string(),
                "q",
                &(s.q[h - 1]).to_string(),
            ])?;
        }
        w.write_record([app.as_str(), "*", "0", "failures", &s.failures.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Write the long-format report CSV to a file.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_to_csv(report)?)?;
    Ok(())
}

/// Reconstruct a report (scores only) from its long-format CSV.
pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut series_ids: Vec<String> = Vec::new();
    let mut approaches: Vec<Approach> = Vec::new();
    #[allow(clippy::type_complexity)]
    let mut mae: BTreeMap<(String, usize, String), f64> = BTreeMap::new();
    let mut mse: BTreeMap<(String, usize, String), f64> = BTreeMap::new();
    let mut q: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let mut max_h = 0usize;
    for record in reader.records() {
        let record = record?;
        let app_str = record.get(0).unwrap_or("").to_string();
        let series = record.get(1).unwrap_or("").to_string();
        let horizon: usize = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::InvalidParameter("bad horizon in report csv".into()))?;
        let metric = record.get(3).unwrap_or("").to_string();
        let value = record.get(4).unwrap_or("");
        let approach: Approach = app_str.parse()?;
        if !approaches.contains(&approach) {
            approaches.push(approach.clone());
        }
        match metric.as_str() {
            "mae" | "mse" => {
                max_h = max_h.max(horizon);
                if !series_ids.contains(&series) {
                    series_ids.push(series.clone());
                }
                let parsed: f64 = if value == "nan" {
                    f64::NAN
                } else {
                    value.parse().map_err(|_| Error::NonNumericValue {
                        series: series.clone(),
                        date: String::new(),
                        value: value.into(),
                    })?
                };
                if metric == "mae" {
                    mae.insert((app_str.clone(), horizon, series), parsed);
                } else {
                    mse.insert((app_str.clone(), horizon, series), parsed);
                }
            }
            "q" => {
                q.insert(
                    (app_str.clone(), horizon),
                    value.parse().unwrap_or_default(),
                );
            }
            "failures" => {
                failures.insert(app_str.clone(), value.parse().unwrap_or_default());
            }
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown metric '{other}' in report csv"
                )));
            }
        }
    }
    if approaches.is_empty() || max_h == 0 {
        return Err(Error::InvalidParameter("report csv holds no scores".into()));
    }

    let mut scores = Vec::new();
    for approach in &approaches {
        let app_str = approach.to_string();
        let mut mae_v = Vec::with_capacity(max_h);
        let mut mse_v = Vec::with_capacity(max_h);
        let mut q_v = Vec::with_capacity(max_h);
        for h in 1..=max_h {
            mae_v.push(DVector::from_iterator(
                series_ids.len(),
                series_ids
                    .iter()
                    .map(|s| *mae.get(&(app_str.clone(), h, s.clone())).unwrap_or(&f64::NAN)),
            ));
            mse_v.push(DVector::from_iterator(
                series_ids.len(),
                series_ids
                    .iter()
                    .map(|s| *mse.get(&(app_str.clone(), h, s.clone())).unwrap_or(&f64::NAN)),
            ));
            q_v.push(*q.get(&(app_str.clone(), h)).unwrap_or(&0));
        }
        scores.push(ApproachScores {
            approach: approach.clone(),
            mae: mae_v,
            mse: mse_v,
            q: q_v,
            failures: *failures.get(&app_str).unwrap_or(&0),
            max_coherence_residual: None,
        });
    }

    let benchmark = if approaches.contains(&Approach::Ew) {
        Approach::Ew
    } else {
        approaches[0].clone()
    };
    Ok(EvalReport {
        series_ids,
        max_horizon: max_h,
        scores,
        benchmark,
        audit: Vec::new(),
        failures: Vec::new(),
    })
}

/// Write the coherence audit CSV (`approach,origin,horizon,residual`).
pub fn write_audit_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["approach", "origin", "horizon", "residual"])?;
    for rec in &report.audit {
        w.write_record([
            rec.approach.as_str(),
            &rec.origin.to_string(),
            &rec.horizon.to_string(),
            &format!("{:.6e}", rec.residual),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Dump a residual panel for debugging; columns are `expert:series` ids.
pub fn write_panel_csv(
    panel: &ResidualPanel,
    expert_ids: &[String],
    series_ids: &[String],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = Vec::new();
    for e in expert_ids {
        for s in series_ids {
            header.push(format!("{e}:{s}"));
        }
    }
    w.write_record(&header)?;
    let data = panel.data();
    for r in 0..data.nrows() {
        let row: Vec<String> = (0..data.ncols()).map(|c| fmt_value(data[(r, c)])).collect();
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Render the comparison table: one row per approach, per-horizon and pooled
/// relative-error columns for MAE and MSE against the report's benchmark.
pub fn render_ar_table(report: &EvalReport) -> Result<String> {
    let rows = report.ar_table()?;
    let h = report.max_horizon;
    let mut cols: Vec<String> = (1..=h).map(|x| x.to_string()).collect();
    cols.push(format!("1:{h}"));

    let name_width = rows
        .iter()
        .map(|(a, _)| a.to_string().len())
        .max()
        .unwrap_or(8)
        .max("approach".len());

    let mut out = String::new();
    let block_width = cols.len() * 7;
    writeln!(
        out,
        "{:<name_width$}  {:<block_width$}  {:<block_width$}",
        "", "AR-MAE", "AR-MSE"
    )
    .unwrap();
    let mut header = format!("{:<name_width$}", "approach");
    for _ in 0..2 {
        for c in &cols {
            header.push_str(&format!("  {c:>5}"));
        }
        header.push(' ');
    }
    writeln!(out, "{header}").unwrap();
    let sep_len = name_width + 2 * (cols.len() * 7 + 1);
    writeln!(out, "{}", "-".repeat(sep_len)).unwrap();
    for (approach, values) in &rows {
        let mut line = format!("{:<name_width$}", approach.to_string());
        for v in values {
            line.push_str(&format!("  {:>5.3}", v.ar_mae));
        }
        line.push(' ');
        for v in values {
            line.push_str(&format!("  {:>5.3}", v.ar_mse));
        }
        writeln!(out, "{line}").unwrap();
    }

    // Disclose case counts, failures and coherence maxima.
    writeln!(out).unwrap();
    if let Some(bench) = report.scores_of(&report.benchmark) {
        let qs: Vec<String> = bench.q.iter().map(|q| q.to_string()).collect();
        writeln!(
            out,
            "benchmark {} cases per horizon: {}",
            report.benchmark,
            qs.join(", ")
        )
        .unwrap();
    }
    for s in &report.scores {
        if s.failures > 0 {
            writeln!(
                out,
                "note: {} failed at {} origin(s); scored on the rest",
                s.approach, s.failures
            )
            .unwrap();
        }
        if let Some(r) = s.max_coherence_residual {
            writeln!(out, "coherence max residual {}: {:.3e}", s.approach, r).unwrap();
        }
        let pooled = report.ar_relative(&s.approach, HorizonSet::Pooled)?;
        if pooled.excluded > 0 {
            writeln!(
                out,
                "note: {} pooled column excludes {} zero-benchmark pair(s)",
                s.approach, pooled.excluded
            )
            .unwrap();
        }
    }
    Ok(out)
}
