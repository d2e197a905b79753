//! Deterministic desk-scale expert forecasters and their in-sample residuals.
//!
//! Four simple models stand in for heavier statistical experts: seasonal
//! naive, expanding mean, drift, and simple exponential smoothing with a
//! fixed smoothing weight. Each produces point forecasts and one-step
//! in-sample errors `y_t - y_hat_{t|t-1}`; warm-up positions where a model
//! cannot predict yet are returned as NaN so panels can be trimmed to a
//! common row set across experts.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed series with its seasonal period.
#[derive(Debug, Clone)]
pub struct SeriesData {
    /// Series identifier.
    pub id: String,
    /// Time-ordered observations.
    pub values: Vec<f64>,
    /// Seasonal period in observations (7 for daily data with weekly cycle).
    pub period: usize,
}

impl SeriesData {
    /// Construct, rejecting non-finite values.
    pub fn new(id: impl Into<String>, values: Vec<f64>, period: usize) -> Result<Self> {
        let id = id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonNumericValue {
                series: id,
                date: "<in-memory>".into(),
                value: "non-finite".into(),
            });
        }
        if period == 0 {
            return Err(Error::InvalidParameter("period must be >= 1".into()));
        }
        Ok(Self { id, values, period })
    }

    /// Number of observations.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// True when the series has no observations.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A prefix view of the first `len` observations (expanding window).
    pub fn prefix(&self, len: usize) -> SeriesData {
        SeriesData {
            id: self.id.clone(),
            values: self.values[..len.min(self.values.len())].to_vec(),
            period: self.period,
        }
    }
}

/// A deterministic base forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExpertModel {
    /// Repeat the last observed seasonal cycle.
    SeasonalNaive,
    /// Mean of all observations so far.
    Mean,
    /// Last value plus the average historical increment.
    Drift,
    /// Simple exponential smoothing with fixed `alpha` in (0, 1),
    /// level initialized at the first observation.
    Ses {
        /// Smoothing weight.
        alpha: f64,
    },
}

impl ExpertModel {
    /// Parse an expert id such as `seasonal_naive` or `ses`.
    pub fn parse(id: &str, ses_alpha: f64) -> Result<Self> {
        match id {
            "seasonal_naive" | "snaive" => Ok(ExpertModel::SeasonalNaive),
            "mean" => Ok(ExpertModel::Mean),
            "drift" => Ok(ExpertModel::Drift),
            "ses" => {
                if !(0.0 < ses_alpha && ses_alpha < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "ses alpha must be in (0, 1), got {ses_alpha}"
                    )));
                }
                Ok(ExpertModel::Ses { alpha: ses_alpha })
            }
            other => Err(Error::UnknownExpert { id: other.into() }),
        }
    }

    /// Canonical identifier.
    pub fn id(&self) -> &'static str {
        match self {
            ExpertModel::SeasonalNaive => "seasonal_naive",
            ExpertModel::Mean => "mean",
            ExpertModel::Drift => "drift",
            ExpertModel::Ses { .. } => "ses",
        }
    }

    fn min_len_forecast(&self, period: usize) -> usize {
        match self {
            ExpertModel::SeasonalNaive => period,
            ExpertModel::Mean | ExpertModel::Ses { .. } => 1,
            ExpertModel::Drift => 2,
        }
    }

    /// Index of the first one-step prediction the model can make.
    fn first_prediction(&self, period: usize) -> usize {
        match self {
            ExpertModel::SeasonalNaive => period,
            ExpertModel::Mean | ExpertModel::Ses { .. } => 1,
            ExpertModel::Drift => 2,
        }
    }

    /// `h`-step-ahead point forecasts from the full series.
    pub fn forecast(&self, series: &SeriesData, h: usize) -> Result<DVector<f64>> {
        let t = series.len();
        let need = self.min_len_forecast(series.period);
        if t < need {
            return Err(Error::SeriesTooShort {
                id: series.id.clone(),
                required: need,
                actual: t,
            });
        }
        let y = &series.values;
        let out = match self {
            ExpertModel::SeasonalNaive => {
                let period = series.period;
                DVector::from_fn(h, |step, _| {
                    // Index into the last full season, cycling for long horizons.
                    y[t - period + (step % period)]
                })
            }
            ExpertModel::Mean => {
                let mean = y.iter().sum::<f64>() / t as f64;
                DVector::from_element(h, mean)
            }
            ExpertModel::Drift => {
                let slope = (y[t - 1] - y[0]) / (t - 1) as f64;
                DVector::from_fn(h, |step, _| y[t - 1] + (step + 1) as f64 * slope)
            }
            ExpertModel::Ses { alpha } => {
                let mut level = y[0];
                for &v in &y[1..] {
                    level = alpha * v + (1.0 - alpha) * level;
                }
                DVector::from_element(h, level)
            }
        };
        Ok(out)
    }

    /// One-step in-sample residuals `y_t - y_hat_{t|t-1}`, one entry per
    /// observation, with NaN on warm-up positions where no prediction
    /// exists. All models share this alignment so the caller can trim
    /// panels listwise and keep them rectangular.
    pub fn insample_residuals(&self, series: &SeriesData) -> Result<DVector<f64>> {
        let t = series.len();
        let start = self.first_prediction(series.period);
        if t < start + 1 {
            return Err(Error::SeriesTooShort {
                id: series.id.clone(),
                required: start + 1,
                actual: t,
            });
        }
        let y = &series.values;
        let mut res = DVector::from_element(t, f64::NAN);
        match self {
            ExpertModel::SeasonalNaive => {
                let period = series.period;
                for i in period..t {
                    res[i] = y[i] - y[i - period];
                }
            }
            ExpertModel::Mean => {
                let mut sum = y[0];
                for i in 1..t {
                    res[i] = y[i] - sum / i as f64;
                    sum += y[i];
                }
            }
            ExpertModel::Drift => {
                for i in 2..t {
                    let slope = (y[i - 1] - y[0]) / (i - 1) as f64;
                    res[i] = y[i] - (y[i - 1] + slope);
                }
            }
            ExpertModel::Ses { alpha } => {
                let mut level = y[0];
                for i in 1..t {
                    res[i] = y[i] - level;
                    level = alpha * y[i] + (1.0 - alpha) * level;
                }
            }
        }
        Ok(res)
    }
}
