//! Rolling-origin expanding-window evaluation and accuracy scoring.
//!
//! The driver walks a list of forecast origins; at each origin every expert
//! is refit on the expanded training window, every configured approach turns
//! the base forecasts into combined (and possibly reconciled) forecasts for
//! horizons `1..=H`, and errors against the held-out observations are
//! accumulated into per-series per-horizon MAE/MSE. Accuracy is compared
//! across approaches through geometric-mean relative errors against a
//! benchmark approach (equal-weights combination by default). Approach
//! failures at an origin are recorded and skipped, not fatal.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baseline::{ExpertModel, SeriesData};
use crate::combiner::{
    combine_ew, combine_weighted, mint_map, occ_map, single_task_weights, ForecastBundle,
    WeightScheme, COHERENCE_TOL,
};
use crate::covariance::{
    ensure_positive_definite, shrunk_covariance, CovarianceKind, ErrorCovariance, ResidualPanel,
};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

/// Origins and horizon bookkeeping of an expanding-window experiment.
#[derive(Debug, Clone)]
pub struct RollingPlan {
    /// Observations in the initial training window.
    pub first_train_len: usize,
    /// Maximum forecast horizon `H`.
    pub max_horizon: usize,
    /// Origin increment.
    pub step: usize,
    /// Total observations available.
    pub total_len: usize,
    origins: Vec<usize>,
}

impl RollingPlan {
    /// Enumerate origins `first_train_len, +step, ...` strictly below
    /// `total_len`; forecasts beyond the sample are truncated.
    pub fn new(
        total_len: usize,
        first_train_len: usize,
        max_horizon: usize,
        step: usize,
    ) -> Result<Self> {
        if max_horizon == 0 || step == 0 || first_train_len == 0 {
            return Err(Error::InvalidParameter(
                "horizon, step and first training length must be >= 1".into(),
            ));
        }
        if first_train_len >= total_len {
            return Err(Error::EmptyTestSet {
                first_train: first_train_len,
                total: total_len,
            });
        }
        let origins: Vec<usize> = (first_train_len..total_len).step_by(step).collect();
        Ok(Self {
            first_train_len,
            max_horizon,
            step,
            total_len,
            origins,
        })
    }

    /// Training-window lengths at which forecasts are issued.
    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// Number of evaluable `h`-step forecasts.
    pub fn q(&self, h: usize) -> usize {
        self.origins.iter().filter(|&&o| o + h <= self.total_len).count()
    }

    /// Horizons actually forecastable from origin `o`.
    pub fn horizon_at(&self, o: usize) -> usize {
        self.max_horizon.min(self.total_len - o)
    }
}

/// A forecasting approach in the comparison suite.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Approach {
    /// Raw base forecasts of one expert.
    Base(String),
    /// Shrunk-covariance reconciliation of one expert.
    MintShr(String),
    /// Equal-weights per-series combination.
    Ew,
    /// Inverse-MSE per-series combination.
    OwVar,
    /// Full-covariance per-series combination.
    OwCov,
    /// Reconcile every expert, then average.
    Src,
    /// Combine with equal weights, then reconcile.
    ScrEw,
    /// Combine with inverse-MSE weights, then reconcile.
    ScrVar,
    /// Combine with full-covariance weights, then reconcile.
    ScrCov,
    /// Optimal coherent combination, diagonal covariance.
    OccWlsv,
    /// Optimal coherent combination, expert-block shrunk covariance.
    OccBe,
}

impl Approach {
    /// Whether outputs are coherent by construction.
    pub fn is_coherent(&self) -> bool {
        matches!(
            self,
            Approach::MintShr(_)
                | Approach::Src
                | Approach::ScrEw
                | Approach::ScrVar
                | Approach::ScrCov
                | Approach::OccWlsv
                | Approach::OccBe
        )
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Approach::Base(e) => write!(f, "base:{e}"),
            Approach::MintShr(e) => write!(f, "mint_shr:{e}"),
            Approach::Ew => f.write_str("ew"),
            Approach::OwVar => f.write_str("ow_var"),
            Approach::OwCov => f.write_str("ow_cov"),
            Approach::Src => f.write_str("src"),
            Approach::ScrEw => f.write_str("scr_ew"),
            Approach::ScrVar => f.write_str("scr_var"),
            Approach::ScrCov => f.write_str("scr_cov"),
            Approach::OccWlsv => f.write_str("occ_wlsv"),
            Approach::OccBe => f.write_str("occ_be"),
        }
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(expert) = s.strip_prefix("base:") {
            return Ok(Approach::Base(expert.to_string()));
        }
        if let Some(expert) = s.strip_prefix("mint_shr:") {
            return Ok(Approach::MintShr(expert.to_string()));
        }
        match s {
            "ew" => Ok(Approach::Ew),
            "ow_var" => Ok(Approach::OwVar),
            "ow_cov" => Ok(Approach::OwCov),
            "src" => Ok(Approach::Src),
            "scr_ew" => Ok(Approach::ScrEw),
            "scr_var" => Ok(Approach::ScrVar),
            "scr_cov" => Ok(Approach::ScrCov),
            "occ_wlsv" => Ok(Approach::OccWlsv),
            "occ_be" => Ok(Approach::OccBe),
            other => Err(Error::UnknownApproach { id: other.into() }),
        }
    }
}

/// Base forecasts and residual material available at one origin.
#[derive(Debug, Clone)]
pub struct OriginForecasts {
    /// One `H_o x n` forecast matrix per expert.
    pub forecasts: Vec<DMatrix<f64>>,
    /// One residual matrix per expert (rows aligned across experts; NaN
    /// rows are dropped listwise when the panel is assembled).
    pub residuals: Vec<DMatrix<f64>>,
}

/// Source of expert base forecasts for the experiment driver.
pub trait BaseForecastProvider: Sync {
    /// Expert identifiers, fixing the stacking order.
    fn expert_ids(&self) -> &[String];

    /// Produce forecasts for `horizon` steps from training length `origin`.
    fn at_origin(&self, origin: usize, horizon: usize) -> Result<OriginForecasts>;
}

/// Built-in experts refit on the expanding window at every origin.
pub struct BuiltinProvider<'a> {
    actuals: &'a DMatrix<f64>,
    period: usize,
    ids: Vec<String>,
    models: Vec<ExpertModel>,
}

impl<'a> BuiltinProvider<'a> {
    /// `actuals` is the `total_len x n` observation matrix in hierarchy
    /// column order.
    pub fn new(
        actuals: &'a DMatrix<f64>,
        period: usize,
        models: Vec<(String, ExpertModel)>,
    ) -> Self {
        let (ids, models) = models.into_iter().unzip();
        Self {
            actuals,
            period,
            ids,
            models,
        }
    }
}

impl BaseForecastProvider for BuiltinProvider<'_> {
    fn expert_ids(&self) -> &[String] {
        &self.ids
    }

    fn at_origin(&self, origin: usize, horizon: usize) -> Result<OriginForecasts> {
        let n = self.actuals.ncols();
        let p = self.models.len();
        let mut forecasts = vec![DMatrix::zeros(horizon, n); p];
        let mut residuals = vec![DMatrix::zeros(origin, n); p];
        for i in 0..n {
            let prefix: Vec<f64> = (0..origin).map(|t| self.actuals[(t, i)]).collect();
            let series = SeriesData::new(format!("col{i}"), prefix, self.period)?;
            for (j, model) in self.models.iter().enumerate() {
                let f = model.forecast(&series, horizon)?;
                forecasts[j].column_mut(i).copy_from(&f);
                let r = model.insample_residuals(&series)?;
                residuals[j].column_mut(i).copy_from(&r);
            }
        }
        Ok(OriginForecasts {
            forecasts,
            residuals,
        })
    }
}

/// Pre-computed external base forecasts keyed by origin.
///
/// Residual panels are assembled from one-step forecast errors observed at
/// earlier origins, so the first origins carry too few rows for the
/// covariance-based approaches and are recorded as failures for those.
#[derive(Debug, Clone)]
pub struct ImportedProvider {
    expert_ids: Vec<String>,
    /// origin -> per-expert `H x n` forecast matrix.
    forecasts: BTreeMap<usize, Vec<DMatrix<f64>>>,
    actuals: DMatrix<f64>,
}

impl ImportedProvider {
    /// Wrap imported forecasts. Each origin must carry one matrix per expert.
    pub fn new(
        expert_ids: Vec<String>,
        forecasts: BTreeMap<usize, Vec<DMatrix<f64>>>,
        actuals: DMatrix<f64>,
    ) -> Self {
        Self {
            expert_ids,
            forecasts,
            actuals,
        }
    }
}

impl BaseForecastProvider for ImportedProvider {
    fn expert_ids(&self) -> &[String] {
        &self.expert_ids
    }

    fn at_origin(&self, origin: usize, horizon: usize) -> Result<OriginForecasts> {
        let n = self.actuals.ncols();
        let p = self.expert_ids.len();
        let stored = self.forecasts.get(&origin).ok_or(Error::MissingForecast {
            approach: "base".into(),
            origin,
            horizon: 1,
        })?;
        let mut forecasts = Vec::with_capacity(p);
        for m in stored {
            if m.nrows() < horizon {
                return Err(Error::MissingForecast {
                    approach: "base".into(),
                    origin,
                    horizon: m.nrows() + 1,
                });
            }
            forecasts.push(m.rows(0, horizon).clone_owned());
        }
        // One-step errors from all earlier origins with stored forecasts.
        let prior: Vec<usize> = self
            .forecasts
            .keys()
            .copied()
            .filter(|&o| o < origin && o < self.actuals.nrows())
            .collect();
        let mut residuals = vec![DMatrix::zeros(prior.len(), n); p];
        for (row, &o) in prior.iter().enumerate() {
            let per_expert = &self.forecasts[&o];
            for (j, m) in per_expert.iter().enumerate() {
                for i in 0..n {
                    residuals[j][(row, i)] = self.actuals[(o, i)] - m[(0, i)];
                }
            }
        }
        Ok(OriginForecasts {
            forecasts,
            residuals,
        })
    }
}

/// Scores of one approach: per-horizon, per-series MAE/MSE with case counts.
#[derive(Debug, Clone)]
pub struct ApproachScores {
    /// The approach.
    pub approach: Approach,
    /// `mae[h-1][i]`; NaN when no case was scored.
    pub mae: Vec<DVector<f64>>,
    /// `mse[h-1][i]`; NaN when no case was scored.
    pub mse: Vec<DVector<f64>>,
    /// Scored cases per horizon.
    pub q: Vec<usize>,
    /// Origins at which the approach failed.
    pub failures: usize,
    /// Largest coherence residual observed (coherent approaches only).
    pub max_coherence_residual: Option<f64>,
}

/// One coherence-audit record.
#[derive(Debug, Clone)]
pub struct CoherenceRecord {
    /// Approach id.
    pub approach: String,
    /// Origin (training length).
    pub origin: usize,
    /// Horizon.
    pub horizon: usize,
    /// Scale-free coherence residual.
    pub residual: f64,
}

/// One recorded approach failure.
#[derive(Debug, Clone)]
pub struct FailureRecord {
    /// Approach id.
    pub approach: String,
    /// Origin at which it failed.
    pub origin: usize,
    /// Error rendered as text.
    pub message: String,
}

/// Full experiment output.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Series ids in hierarchy column order.
    pub series_ids: Vec<String>,
    /// Maximum horizon `H`.
    pub max_horizon: usize,
    /// Per-approach scores, in configured order.
    pub scores: Vec<ApproachScores>,
    /// Benchmark approach for relative metrics.
    pub benchmark: Approach,
    /// Coherence residuals per (approach, origin, horizon).
    pub audit: Vec<CoherenceRecord>,
    /// Recorded approach failures.
    pub failures: Vec<FailureRecord>,
}

/// Horizon selection for relative metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizonSet {
    /// One horizon.
    Single(usize),
    /// All horizons pooled (the `1:H` column).
    Pooled,
}

/// Relative accuracy of one approach against the benchmark.
#[derive(Debug, Clone, Copy)]
pub struct ArValue {
    /// Geometric mean of per-series MAE ratios.
    pub ar_mae: f64,
    /// Geometric mean of per-series MSE ratios.
    pub ar_mse: f64,
    /// (horizon, series) pairs excluded for a zero benchmark error.
    pub excluded: usize,
}

impl EvalReport {
    /// Scores of one approach.
    pub fn scores_of(&self, approach: &Approach) -> Option<&ApproachScores> {
        self.scores.iter().find(|s| &s.approach == approach)
    }

    /// Geometric-mean relative MAE/MSE of `approach` against the report's
    /// benchmark over the chosen horizon set. Pairs with a zero benchmark
    /// error are excluded and counted.
    pub fn ar_relative(&self, approach: &Approach, horizons: HorizonSet) -> Result<ArValue> {
        let app = self
            .scores_of(approach)
            .ok_or_else(|| Error::UnknownApproach {
                id: approach.to_string(),
            })?;
        let bench = self
            .scores_of(&self.benchmark)
            .ok_or_else(|| Error::UnknownApproach {
                id: self.benchmark.to_string(),
            })?;
        let hs: Vec<usize> = match horizons {
            HorizonSet::Single(h) => vec![h],
            HorizonSet::Pooled => (1..=self.max_horizon).collect(),
        };
        let n = self.series_ids.len();
        let mut log_mae = 0.0;
        let mut log_mse = 0.0;
        let mut count = 0usize;
        let mut excluded = 0usize;
        for &h in &hs {
            if h == 0 || h > self.max_horizon {
                return Err(Error::InvalidParameter(format!(
                    "horizon {h} outside 1..={}",
                    self.max_horizon
                )));
            }
            for i in 0..n {
                let (am, bm) = (app.mae[h - 1][i], bench.mae[h - 1][i]);
                let (as2, bs2) = (app.mse[h - 1][i], bench.mse[h - 1][i]);
                if !am.is_finite() || !bm.is_finite() || bm == 0.0 || bs2 == 0.0 {
                    excluded += 1;
                    continue;
                }
                log_mae += (am / bm).ln();
                log_mse += (as2 / bs2).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::DegeneratePanel(
                "no scorable (horizon, series) pairs for relative metrics".into(),
            ));
        }
        Ok(ArValue {
            ar_mae: (log_mae / count as f64).exp(),
            ar_mse: (log_mse / count as f64).exp(),
            excluded,
        })
    }

    /// AR table rows in score order: per-horizon columns plus the pooled one.
    pub fn ar_table(&self) -> Result<Vec<(Approach, Vec<ArValue>)>> {
        let mut rows = Vec::with_capacity(self.scores.len());
        for s in &self.scores {
            let mut cols = Vec::with_capacity(self.max_horizon + 1);
            for h in 1..=self.max_horizon {
                cols.push(self.ar_relative(&s.approach, HorizonSet::Single(h))?);
            }
            cols.push(self.ar_relative(&s.approach, HorizonSet::Pooled)?);
            rows.push((s.approach.clone(), cols));
        }
        Ok(rows)
    }
}

/// Per-horizon MAE vectors, MSE vectors and scored case counts.
pub type ScoreTriplet = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<usize>);

/// Score a complete forecast set (one matrix per origin) against actuals.
/// Errors when any origin required by the plan is missing.
pub fn score(
    actuals: &DMatrix<f64>,
    forecasts: &[Option<DMatrix<f64>>],
    plan: &RollingPlan,
    approach: &Approach,
) -> Result<ScoreTriplet> {
    for (idx, o) in plan.origins().iter().enumerate() {
        if forecasts.get(idx).map(|f| f.is_none()).unwrap_or(true) {
            return Err(Error::MissingForecast {
                approach: approach.to_string(),
                origin: *o,
                horizon: 1,
            });
        }
    }
    Ok(score_partial(actuals, forecasts, plan))
}

/// Accumulate MAE/MSE over whatever origins are present.
pub fn score_partial(
    actuals: &DMatrix<f64>,
    forecasts: &[Option<DMatrix<f64>>],
    plan: &RollingPlan,
) -> ScoreTriplet {
    let n = actuals.ncols();
    let h_max = plan.max_horizon;
    let mut abs_sum = vec![DVector::zeros(n); h_max];
    let mut sq_sum = vec![DVector::zeros(n); h_max];
    let mut counts = vec![0usize; h_max];
    for (idx, &o) in plan.origins().iter().enumerate() {
        let Some(Some(f)) = forecasts.get(idx) else {
            continue;
        };
        let h_o = plan.horizon_at(o).min(f.nrows());
        for h in 1..=h_o {
            counts[h - 1] += 1;
            for i in 0..n {
                let err = actuals[(o + h - 1, i)] - f[(h - 1, i)];
                abs_sum[h - 1][i] += err.abs();
                sq_sum[h - 1][i] += err * err;
            }
        }
    }
    let mae = abs_sum
        .iter()
        .zip(&counts)
        .map(|(s, &q)| {
            if q == 0 {
                DVector::from_element(n, f64::NAN)
            } else {
                s / q as f64
            }
        })
        .collect();
    let mse = sq_sum
        .iter()
        .zip(&counts)
        .map(|(s, &q)| {
            if q == 0 {
                DVector::from_element(n, f64::NAN)
            } else {
                s / q as f64
            }
        })
        .collect();
    (mae, mse, counts)
}

/// Experiment-wide configuration beyond the rolling plan.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Approaches to run, in report order.
    pub approaches: Vec<Approach>,
    /// Benchmark for relative metrics.
    pub benchmark: Approach,
    /// Worker threads for the origin loop (1 = sequential).
    pub threads: usize,
    /// Coherence tolerance enforced on every coherent method's output.
    pub coherence_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            approaches: vec![Approach::Ew],
            benchmark: Approach::Ew,
            threads: 1,
            coherence_tol: COHERENCE_TOL,
        }
    }
}

/// Either an `H_o x n` forecast matrix with per-horizon coherence residuals,
/// or the rendered error that stopped the approach at this origin.
type ApproachOutcome = std::result::Result<(DMatrix<f64>, Vec<f64>), String>;

/// Per-origin output across the configured approaches.
struct OriginOutput {
    origin: usize,
    per_approach: Vec<ApproachOutcome>,
}

/// Run the full rolling experiment.
///
/// `actuals` is `total_len x n` in hierarchy column order. Approach failures
/// at an origin are recorded in the report and scoring continues with the
/// remaining origins.
pub fn run_experiment(
    actuals: &DMatrix<f64>,
    hierarchy: &Hierarchy,
    provider: &dyn BaseForecastProvider,
    plan: &RollingPlan,
    config: &ExperimentConfig,
) -> Result<EvalReport> {
    let n = hierarchy.n();
    if actuals.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "actuals columns",
            expected: n,
            actual: actuals.ncols(),
        });
    }
    if actuals.nrows() != plan.total_len {
        return Err(Error::DimensionMismatch {
            what: "actuals rows",
            expected: plan.total_len,
            actual: actuals.nrows(),
        });
    }
    if !config.approaches.contains(&config.benchmark) {
        return Err(Error::UnknownApproach {
            id: format!("benchmark '{}' not among approaches", config.benchmark),
        });
    }
    let expert_index: BTreeMap<&str, usize> = provider
        .expert_ids()
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    for approach in &config.approaches {
        if let Approach::Base(e) | Approach::MintShr(e) = approach {
            if !expert_index.contains_key(e.as_str()) {
                return Err(Error::UnknownExpert { id: e.clone() });
            }
        }
    }

    let run_origin = |&origin: &usize| -> Result<OriginOutput> {
        let horizon = plan.horizon_at(origin);
        let material = provider.at_origin(origin, horizon)?;
        Ok(process_origin(
            origin,
            horizon,
            &material,
            hierarchy,
            &expert_index,
            &config.approaches,
            config.coherence_tol,
        ))
    };

    let outputs: Vec<Result<OriginOutput>> = if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        pool.install(|| plan.origins().par_iter().map(run_origin).collect())
    } else {
        plan.origins().iter().map(run_origin).collect()
    };

    // Collate per approach in origin order.
    let n_app = config.approaches.len();
    let mut per_approach: Vec<Vec<Option<DMatrix<f64>>>> =
        vec![Vec::with_capacity(plan.origins().len()); n_app];
    let mut audit = Vec::new();
    let mut failures = Vec::new();
    let mut max_res: Vec<Option<f64>> = vec![None; n_app];
    for out in outputs {
        let out = out?;
        for (a, res) in out.per_approach.into_iter().enumerate() {
            match res {
                Ok((forecast, residuals)) => {
                    for (h, r) in residuals.iter().enumerate() {
                        audit.push(CoherenceRecord {
                            approach: config.approaches[a].to_string(),
                            origin: out.origin,
                            horizon: h + 1,
                            residual: *r,
                        });
                        let slot = &mut max_res[a];
                        *slot = Some(slot.map_or(*r, |m: f64| m.max(*r)));
                    }
                    per_approach[a].push(Some(forecast));
                }
                Err(message) => {
                    failures.push(FailureRecord {
                        approach: config.approaches[a].to_string(),
                        origin: out.origin,
                        message,
                    });
                    per_approach[a].push(None);
                }
            }
        }
    }

    let mut scores = Vec::with_capacity(n_app);
    for (a, approach) in config.approaches.iter().enumerate() {
        let (mae, mse, q) = score_partial(actuals, &per_approach[a], plan);
        let fail_count = per_approach[a].iter().filter(|f| f.is_none()).count();
        scores.push(ApproachScores {
            approach: approach.clone(),
            mae,
            mse,
            q,
            failures: fail_count,
            max_coherence_residual: max_res[a],
        });
    }

    Ok(EvalReport {
        series_ids: hierarchy.series_ids().to_vec(),
        max_horizon: plan.max_horizon,
        scores,
        benchmark: config.benchmark.clone(),
        audit,
        failures,
    })
}

/// Everything computable once per origin and reused across approaches.
struct OriginShared {
    bundles: Vec<ForecastBundle>,
    panel: Option<ResidualPanel>,
    panel_error: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn process_origin(
    origin: usize,
    horizon: usize,
    material: &OriginForecasts,
    hierarchy: &Hierarchy,
    expert_index: &BTreeMap<&str, usize>,
    approaches: &[Approach],
    coherence_tol: f64,
) -> OriginOutput {
    let n = hierarchy.n();
    let p = material.forecasts.len();
    let mut bundles = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut stacked = DVector::zeros(n * p);
        for (j, f) in material.forecasts.iter().enumerate() {
            for i in 0..n {
                stacked[j * n + i] = f[(h, i)];
            }
        }
        bundles.push(ForecastBundle::from_stacked(stacked, n, p).expect("stacking"));
    }
    let (panel, panel_error) = match ResidualPanel::from_expert_matrices(&material.residuals) {
        Ok(pnl) => (Some(pnl), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let shared = OriginShared {
        bundles,
        panel,
        panel_error,
    };

    let per_approach = approaches
        .iter()
        .map(|a| {
            apply_approach(a, &shared, hierarchy, expert_index, coherence_tol)
                .map_err(|e| e.to_string())
        })
        .collect();
    OriginOutput {
        origin,
        per_approach,
    }
}

fn need_panel(shared: &OriginShared) -> Result<&ResidualPanel> {
    shared.panel.as_ref().ok_or_else(|| {
        Error::DegeneratePanel(
            shared
                .panel_error
                .clone()
                .unwrap_or_else(|| "residual panel unavailable".into()),
        )
    })
}

/// Shrunk covariance of one expert's residual block.
fn expert_shrunk_cov(panel: &ResidualPanel, j: usize) -> Result<DMatrix<f64>> {
    let (mut w, _) = shrunk_covariance(&panel.expert_block(j))?;
    ensure_positive_definite(&mut w)?;
    Ok(w)
}

fn apply_approach(
    approach: &Approach,
    shared: &OriginShared,
    hierarchy: &Hierarchy,
    expert_index: &BTreeMap<&str, usize>,
    coherence_tol: f64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let c = hierarchy.constraint();
    let n = hierarchy.n();
    let horizon = shared.bundles.len();
    let mut out = DMatrix::zeros(horizon, n);
    let mut residuals = Vec::new();

    match approach {
        Approach::Base(e) => {
            let j = expert_index[e.as_str()];
            for (h, bundle) in shared.bundles.iter().enumerate() {
                out.row_mut(h).tr_copy_from(&bundle.expert(j));
            }
        }
        Approach::Ew => {
            for (h, bundle) in shared.bundles.iter().enumerate() {
                out.row_mut(h).tr_copy_from(&combine_ew(bundle));
            }
        }
        Approach::OwVar | Approach::OwCov => {
            let panel = need_panel(shared)?;
            let scheme = if matches!(approach, Approach::OwVar) {
                WeightScheme::Var
            } else {
                WeightScheme::Cov
            };
            let weights = single_task_weights(scheme, panel)?;
            for (h, bundle) in shared.bundles.iter().enumerate() {
                out.row_mut(h).tr_copy_from(&combine_weighted(bundle, &weights)?);
            }
        }
        Approach::MintShr(e) => {
            let panel = need_panel(shared)?;
            let j = expert_index[e.as_str()];
            let w_n = expert_shrunk_cov(panel, j)?;
            let map = mint_map(&w_n, c)?;
            for (h, bundle) in shared.bundles.iter().enumerate() {
                let v = &map * bundle.expert(j);
                residuals.push(c.coherence_residual(&v)?);
                out.row_mut(h).tr_copy_from(&v);
            }
        }
        Approach::Src => {
            let panel = need_panel(shared)?;
            let p = panel.n_experts();
            let maps: Vec<DMatrix<f64>> = (0..p)
                .map(|j| mint_map(&expert_shrunk_cov(panel, j)?, c))
                .collect::<Result<_>>()?;
            for (h, bundle) in shared.bundles.iter().enumerate() {
                let mut sum = DVector::zeros(n);
                for (j, map) in maps.iter().enumerate() {
                    sum += map * bundle.expert(j);
                }
                let v = sum / p as f64;
                residuals.push(c.coherence_residual(&v)?);
                out.row_mut(h).tr_copy_from(&v);
            }
        }
        Approach::ScrEw | Approach::ScrVar | Approach::ScrCov => {
            let panel = need_panel(shared)?;
            let scheme = match approach {
                Approach::ScrEw => WeightScheme::Ew,
                Approach::ScrVar => WeightScheme::Var,
                _ => WeightScheme::Cov,
            };
            let weights = single_task_weights(scheme, panel)?;
            // Residuals of the combined forecast: weights applied to the
            // expert residual columns (weights sum to one per series).
            let t = panel.n_obs();
            let combined_res = DMatrix::from_fn(t, n, |r, i| {
                (0..panel.n_experts())
                    .map(|j| weights[(i, j)] * panel.data()[(r, j * n + i)])
                    .sum()
            });
            let (mut w_n, _) = shrunk_covariance(&combined_res)?;
            ensure_positive_definite(&mut w_n)?;
            let map = mint_map(&w_n, c)?;
            for (h, bundle) in shared.bundles.iter().enumerate() {
                let v = &map * combine_weighted(bundle, &weights)?;
                residuals.push(c.coherence_residual(&v)?);
                out.row_mut(h).tr_copy_from(&v);
            }
        }
        Approach::OccWlsv | Approach::OccBe => {
            let panel = need_panel(shared)?;
            let kind = if matches!(approach, Approach::OccWlsv) {
                CovarianceKind::Diagonal
            } else {
                CovarianceKind::ExpertBlockShrunk
            };
            let w = ErrorCovariance::estimate(panel, kind)?;
            let map = occ_map(&w, c)?;
            for (h, bundle) in shared.bundles.iter().enumerate() {
                let v = &map * bundle.stacked();
                residuals.push(c.coherence_residual(&v)?);
                out.row_mut(h).tr_copy_from(&v);
            }
        }
    }
    if approach.is_coherent() {
        for r in &residuals {
            if *r > coherence_tol {
                return Err(Error::InvalidParameter(format!(
                    "coherence residual {r:.3e} above tolerance for {approach}"
                )));
            }
        }
    }
    Ok((out, residuals))
}
