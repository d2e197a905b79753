//! Run configuration: TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use cocomb::error::{Error, Result};
use serde::Deserialize;

/// Raw configuration as read from the TOML file; every field optional so
/// command-line flags can fill the gaps.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub approaches: Option<Vec<String>>,
    pub experts: Option<Vec<String>>,
    pub import: Option<PathBuf>,
    pub first_train: Option<usize>,
    pub horizon: Option<usize>,
    pub step: Option<usize>,
    pub period: Option<usize>,
    pub ses_alpha: Option<f64>,
    pub gap_cap: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub coherence_tol: Option<f64>,
}

impl FileConfig {
    /// Parse a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))
    }

    /// Overlay `other` (command-line values win) onto this file config.
    pub fn overlay(mut self, other: FileConfig) -> FileConfig {
        macro_rules! take {
            ($field:ident) => {
                if other.$field.is_some() {
                    self.$field = other.$field;
                }
            };
        }
        take!(dataset);
        take!(hierarchy);
        take!(out);
        take!(approaches);
        take!(experts);
        take!(import);
        take!(first_train);
        take!(horizon);
        take!(step);
        take!(period);
        take!(ses_alpha);
        take!(gap_cap);
        take!(seed);
        take!(threads);
        take!(coherence_tol);
        self
    }

    /// Fill defaults and enforce required fields.
    pub fn resolve(self) -> Result<RunConfig> {
        let dataset = self
            .dataset
            .ok_or_else(|| Error::InvalidParameter("missing dataset path".into()))?;
        let hierarchy = self
            .hierarchy
            .ok_or_else(|| Error::InvalidParameter("missing hierarchy path".into()))?;
        let first_train = self
            .first_train
            .ok_or_else(|| Error::InvalidParameter("missing first_train".into()))?;
        let approaches = self.approaches.unwrap_or_else(default_approaches);
        if approaches.is_empty() {
            return Err(Error::InvalidParameter("approach list is empty".into()));
        }
        let experts = self.experts.unwrap_or_else(default_experts);
        Ok(RunConfig {
            dataset,
            hierarchy,
            out: self.out.unwrap_or_else(|| PathBuf::from("out")),
            approaches,
            experts,
            import: self.import,
            first_train,
            horizon: self.horizon.unwrap_or(7),
            step: self.step.unwrap_or(1),
            period: self.period.unwrap_or(7),
            ses_alpha: self.ses_alpha.unwrap_or(0.2),
            gap_cap: self.gap_cap.unwrap_or(cocomb::io::DEFAULT_GAP_CAP),
            seed: self.seed.unwrap_or(0),
            threads: self.threads.unwrap_or(1).max(1),
            coherence_tol: self.coherence_tol.unwrap_or(1e-8),
        })
    }
}

/// The eleven-procedure comparison with `ses` as the designated single expert.
fn default_approaches() -> Vec<String> {
    [
        "base:ses", "mint_shr:ses", "ew", "ow_var", "ow_cov", "src", "scr_ew", "scr_var",
        "scr_cov", "occ_wlsv", "occ_be",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_experts() -> Vec<String> {
    ["seasonal_naive", "mean", "drift", "ses"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub hierarchy: PathBuf,
    pub out: PathBuf,
    pub approaches: Vec<String>,
    pub experts: Vec<String>,
    pub import: Option<PathBuf>,
    pub first_train: usize,
    pub horizon: usize,
    pub step: usize,
    pub period: usize,
    pub ses_alpha: f64,
    pub gap_cap: usize,
    pub seed: u64,
    pub threads: usize,
    pub coherence_tol: f64,
}

impl RunConfig {
    /// Check that all referenced paths exist.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![("dataset", &self.dataset), ("hierarchy", &self.hierarchy)];
        if let Some(import) = &self.import {
            paths.push(("import", import));
        }
        for (label, p) in paths {
            if !p.exists() {
                return Err(Error::InvalidParameter(format!(
                    "{label} path does not exist: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}
