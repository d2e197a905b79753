//! Monte Carlo study of combination accuracy under a known error covariance.
//!
//! A synthetic two-grouping hierarchy (zones x sources) is fixed, `p` experts
//! produce unbiased base forecasts whose errors are zero-mean Gaussian with a
//! heteroscedastic, within-expert-correlated block covariance, and the
//! optimal coherent combination is compared against the equal-weights
//! benchmark (plain and orthogonally projected) over many replications. A
//! second stage repeats the comparison with the block covariance estimated
//! from a finite residual panel, over independent meta-runs. Everything is
//! driven by one seed so reports are byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::combiner::{combine_ew, mint_map, occ_map, ForecastBundle};
use crate::covariance::{CovarianceKind, ErrorCovariance, ResidualPanel};
use crate::error::{Error, Result};
use crate::hierarchy::{Grouping, Hierarchy, HierarchySpec};

/// Shape of the within-expert error correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    /// Correlation decaying geometrically with series distance.
    Ar1,
    /// Constant correlation between all series of one expert.
    Equicorrelated,
}

impl NoiseFamily {
    /// Parse `ar1` or `equi`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ar1" => Ok(NoiseFamily::Ar1),
            "equi" | "equicorrelated" => Ok(NoiseFamily::Equicorrelated),
            other => Err(Error::InvalidParameter(format!(
                "unknown noise family '{other}' (expected ar1 or equi)"
            ))),
        }
    }
}

/// Simulation scenario parameters.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    /// Zone count of the synthetic hierarchy.
    pub zones: usize,
    /// Source count of the synthetic hierarchy.
    pub sources: usize,
    /// Expert count `p`.
    pub experts: usize,
    /// Test replications per accuracy comparison.
    pub replications: usize,
    /// Residual rows available to the estimated-covariance stage.
    pub train_rows: usize,
    /// Independent estimation meta-runs.
    pub meta_runs: usize,
    /// Replications for the unbiasedness check.
    pub unbiased_replications: usize,
    /// Within-expert correlation shape.
    pub noise: NoiseFamily,
    /// Master seed.
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            zones: 2,
            sources: 4,
            experts: 3,
            replications: 1000,
            train_rows: 200,
            meta_runs: 20,
            unbiased_replications: 10_000,
            noise: NoiseFamily::Ar1,
            seed: 20230101,
        }
    }
}

/// Accuracy of the known-covariance comparison.
#[derive(Debug, Clone, Copy)]
pub struct OracleStage {
    /// Mean over series of replication MSE, optimal combination with true W.
    pub mean_mse_occ: f64,
    /// Mean over series of replication MSE, equal weights.
    pub mean_mse_ew: f64,
    /// Mean over series of replication MSE, projected equal weights.
    pub mean_mse_projected_ew: f64,
    /// Geometric mean over series of MSE ratios vs equal weights.
    pub ar_mse_occ: f64,
    /// Geometric mean over series of MAE ratios vs equal weights.
    pub ar_mae_occ: f64,
    /// Largest coherence residual of the combined forecasts.
    pub max_coherence_residual: f64,
}

/// One estimated-covariance meta-run.
#[derive(Debug, Clone, Copy)]
pub struct MetaRun {
    /// Meta-run index.
    pub run: usize,
    /// Mean shrinkage intensity over expert blocks.
    pub mean_lambda: f64,
    /// Geometric mean over series of MSE ratios vs equal weights.
    pub ar_mse: f64,
}

/// Componentwise bias diagnostics of the combined forecast.
#[derive(Debug, Clone, Copy)]
pub struct BiasCheck {
    /// Replications used.
    pub replications: usize,
    /// Largest Studentized mean deviation |mean| / (sd / sqrt(R)).
    pub max_abs_z: f64,
}

/// Full simulation output.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    /// Scenario parameters.
    pub config: SimulationConfig,
    /// Series count of the synthetic hierarchy.
    pub n_series: usize,
    /// Upper series count.
    pub n_upper: usize,
    /// Known-covariance stage.
    pub oracle: OracleStage,
    /// Estimated-covariance meta-runs.
    pub meta_runs: Vec<MetaRun>,
    /// Fraction of meta-runs with relative MSE below one.
    pub meta_below_one: f64,
    /// Unbiasedness diagnostics (known-covariance combination).
    pub bias: BiasCheck,
}

/// Synthetic zones x sources hierarchy with two groupings.
pub fn synthetic_hierarchy(zones: usize, sources: usize) -> Result<Hierarchy> {
    let bottoms: Vec<String> = (0..zones)
        .flat_map(|z| (0..sources).map(move |s| format!("z{z}s{s}")))
        .collect();
    let zone_aggs: BTreeMap<String, Vec<String>> = (0..zones)
        .map(|z| {
            (
                format!("Z{z}"),
                (0..sources).map(|s| format!("z{z}s{s}")).collect(),
            )
        })
        .collect();
    let source_aggs: BTreeMap<String, Vec<String>> = (0..sources)
        .map(|s| {
            (
                format!("S{s}"),
                (0..zones).map(|z| format!("z{z}s{s}")).collect(),
            )
        })
        .collect();
    HierarchySpec {
        top: "total".into(),
        bottoms,
        groupings: vec![
            Grouping {
                name: "zones".into(),
                aggregates: zone_aggs,
            },
            Grouping {
                name: "sources".into(),
                aggregates: source_aggs,
            },
        ],
    }
    .build()
}

/// Heteroscedastic block-diagonal covariance: per expert, variances drawn
/// log-uniform and scaled by an expert-level factor, correlations from the
/// chosen family.
pub fn true_covariance(
    rng: &mut ChaCha8Rng,
    n: usize,
    p: usize,
    family: NoiseFamily,
) -> DMatrix<f64> {
    let m = n * p;
    let mut w = DMatrix::zeros(m, m);
    for j in 0..p {
        let expert_scale = 0.6 + 1.2 * rng.gen::<f64>();
        let sds: Vec<f64> = (0..n)
            .map(|_| {
                let log_var = (0.3f64.ln()) + (3.0f64.ln() - 0.3f64.ln()) * rng.gen::<f64>();
                (expert_scale * log_var.exp()).sqrt()
            })
            .collect();
        let rho = match family {
            NoiseFamily::Ar1 => 0.25 + 0.5 * rng.gen::<f64>(),
            NoiseFamily::Equicorrelated => 0.1 + 0.35 * rng.gen::<f64>(),
        };
        for a in 0..n {
            for b in 0..n {
                let corr = match family {
                    NoiseFamily::Ar1 => rho.powi((a as i32 - b as i32).abs()),
                    NoiseFamily::Equicorrelated => {
                        if a == b {
                            1.0
                        } else {
                            rho
                        }
                    }
                };
                w[(j * n + a, j * n + b)] = sds[a] * sds[b] * corr;
            }
        }
    }
    w
}

struct Scenario {
    n: usize,
    p: usize,
    y_true: DVector<f64>,
    chol_l: DMatrix<f64>,
    occ_true_map: DMatrix<f64>,
    proj_map: DMatrix<f64>,
    hierarchy: Hierarchy,
}

fn build_scenario(cfg: &SimulationConfig, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    let hierarchy = synthetic_hierarchy(cfg.zones, cfg.sources)?;
    let n = hierarchy.n();
    let p = cfg.experts;
    let bottoms = DVector::from_fn(hierarchy.n_bottom(), |i, _| {
        12.0 + 2.5 * (i as f64) + 4.0 * ((i as f64) * 0.9).sin()
    });
    let y_true = hierarchy.aggregate_bottom_slice(&bottoms);

    let w_true = true_covariance(rng, n, p, cfg.noise);
    let chol_l = Cholesky::new(w_true.clone())
        .ok_or(Error::SingularW)?
        .l()
        .clone_owned();
    let w = ErrorCovariance::from_dense(w_true, n, p)?;
    let occ_true_map = occ_map(&w, hierarchy.constraint())?;
    let proj_map = mint_map(&DMatrix::identity(n, n), hierarchy.constraint())?;
    Ok(Scenario {
        n,
        p,
        y_true,
        chol_l,
        occ_true_map,
        proj_map,
        hierarchy,
    })
}

/// Draw one stacked base-forecast vector `K y + L z`.
fn draw_bundle(sc: &Scenario, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let m = sc.n * sc.p;
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = &sc.chol_l * z;
    let mut stacked = eps;
    for j in 0..sc.p {
        for i in 0..sc.n {
            stacked[j * sc.n + i] += sc.y_true[i];
        }
    }
    stacked
}

fn geometric_mean_ratio(num: &DVector<f64>, den: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..num.len() {
        acc += (num[i] / den[i]).ln();
    }
    (acc / num.len() as f64).exp()
}

/// Run the full scenario.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationReport> {
    if cfg.experts == 0 || cfg.replications == 0 || cfg.meta_runs == 0 {
        return Err(Error::InvalidParameter(
            "experts, replications and meta runs must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sc = build_scenario(cfg, &mut rng)?;
    let n = sc.n;

    // Known-covariance comparison.
    let mut se_occ = DVector::zeros(n);
    let mut se_ew = DVector::zeros(n);
    let mut se_proj = DVector::zeros(n);
    let mut ae_occ = DVector::zeros(n);
    let mut ae_ew = DVector::zeros(n);
    let mut max_res: f64 = 0.0;
    let c = sc.hierarchy.constraint();
    for _ in 0..cfg.replications {
        let stacked = draw_bundle(&sc, &mut rng);
        let bundle = ForecastBundle::from_stacked(stacked, n, sc.p)?;
        let occ = &sc.occ_true_map * bundle.stacked();
        let ew = combine_ew(&bundle);
        let proj = &sc.proj_map * &ew;
        max_res = max_res.max(c.coherence_residual(&occ)?);
        for i in 0..n {
            let d_occ = occ[i] - sc.y_true[i];
            let d_ew = ew[i] - sc.y_true[i];
            let d_proj = proj[i] - sc.y_true[i];
            se_occ[i] += d_occ * d_occ;
            se_ew[i] += d_ew * d_ew;
            se_proj[i] += d_proj * d_proj;
            ae_occ[i] += d_occ.abs();
            ae_ew[i] += d_ew.abs();
        }
    }
    let r = cfg.replications as f64;
    let mse_occ = &se_occ / r;
    let mse_ew = &se_ew / r;
    let mse_proj = &se_proj / r;
    let oracle = OracleStage {
        mean_mse_occ: mse_occ.mean(),
        mean_mse_ew: mse_ew.mean(),
        mean_mse_projected_ew: mse_proj.mean(),
        ar_mse_occ: geometric_mean_ratio(&mse_occ, &mse_ew),
        ar_mae_occ: geometric_mean_ratio(&(&ae_occ / r), &(&ae_ew / r)),
        max_coherence_residual: max_res,
    };

    // Estimated-covariance meta-runs: fresh panel and fresh test draws each.
    let mut meta_runs = Vec::with_capacity(cfg.meta_runs);
    let mut below = 0usize;
    for k in 0..cfg.meta_runs {
        let mut rng_k = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)),
        );
        let m = n * sc.p;
        let rows = DMatrix::from_fn(cfg.train_rows, m, |_, _| 0.0);
        let mut rows = rows;
        for t in 0..cfg.train_rows {
            let z = DVector::from_fn(m, |_, _| rng_k.sample::<f64, _>(StandardNormal));
            let eps = &sc.chol_l * z;
            for col in 0..m {
                rows[(t, col)] = eps[col];
            }
        }
        let panel = ResidualPanel::new(rows, n, sc.p)?;
        let w_est = ErrorCovariance::estimate(&panel, CovarianceKind::ExpertBlockShrunk)?;
        let map = occ_map(&w_est, sc.hierarchy.constraint())?;
        let mean_lambda = if w_est.shrink_lambda().is_empty() {
            0.0
        } else {
            w_est.shrink_lambda().iter().sum::<f64>() / w_est.shrink_lambda().len() as f64
        };

        let mut se_est = DVector::zeros(n);
        let mut se_bench = DVector::zeros(n);
        for _ in 0..cfg.replications {
            let stacked = draw_bundle(&sc, &mut rng_k);
            let bundle = ForecastBundle::from_stacked(stacked, n, sc.p)?;
            let est = &map * bundle.stacked();
            let ew = combine_ew(&bundle);
            for i in 0..n {
                let d_est = est[i] - sc.y_true[i];
                let d_ew = ew[i] - sc.y_true[i];
                se_est[i] += d_est * d_est;
                se_bench[i] += d_ew * d_ew;
            }
        }
        let ar_mse = geometric_mean_ratio(&se_est, &se_bench);
        if ar_mse < 1.0 {
            below += 1;
        }
        meta_runs.push(MetaRun {
            run: k,
            mean_lambda,
            ar_mse,
        });
    }
    let meta_below_one = below as f64 / cfg.meta_runs as f64;

    // Unbiasedness of the known-covariance combination.
    let mut sum = DVector::<f64>::zeros(n);
    let mut sumsq = DVector::<f64>::zeros(n);
    for _ in 0..cfg.unbiased_replications {
        let stacked = draw_bundle(&sc, &mut rng);
        let occ = &sc.occ_true_map * stacked;
        for i in 0..n {
            let d = occ[i] - sc.y_true[i];
            sum[i] += d;
            sumsq[i] += d * d;
        }
    }
    let rb = cfg.unbiased_replications as f64;
    let mut max_abs_z = 0.0f64;
    for i in 0..n {
        let mean: f64 = sum[i] / rb;
        let var = f64::max(sumsq[i] / rb - mean * mean, 1e-300);
        let z = mean.abs() / (var / rb).sqrt();
        max_abs_z = max_abs_z.max(z);
    }
    let bias = BiasCheck {
        replications: cfg.unbiased_replications,
        max_abs_z,
    };

    Ok(SimulationReport {
        config: cfg.clone(),
        n_series: n,
        n_upper: sc.hierarchy.n_upper(),
        oracle,
        meta_runs,
        meta_below_one,
        bias,
    })
}

/// Deterministic human-readable rendering.
pub fn render_simulation_text(report: &SimulationReport) -> String {
    let mut out = String::new();
    let cfg = &report.config;
    writeln!(out, "simulation seed {}", cfg.seed).unwrap();
    writeln!(
        out,
        "hierarchy: {} zones x {} sources -> n = {} ({} upper), experts p = {}",
        cfg.zones, cfg.sources, report.n_series, report.n_upper, cfg.experts
    )
    .unwrap();
    writeln!(
        out,
        "noise: {:?}, replications {}, train rows {}, meta runs {}",
        cfg.noise, cfg.replications, cfg.train_rows, cfg.meta_runs
    )
    .unwrap();
    writeln!(out).unwrap();
    let o = &report.oracle;
    writeln!(out, "[known covariance, {} replications]", cfg.replications).unwrap();
    writeln!(out, "mean MSE optimal combination : {:.6}", o.mean_mse_occ).unwrap();
    writeln!(out, "mean MSE equal weights       : {:.6}", o.mean_mse_ew).unwrap();
    writeln!(
        out,
        "mean MSE projected equal wts : {:.6}",
        o.mean_mse_projected_ew
    )
    .unwrap();
    writeln!(out, "relative MSE vs equal weights: {:.6}", o.ar_mse_occ).unwrap();
    writeln!(out, "relative MAE vs equal weights: {:.6}", o.ar_mae_occ).unwrap();
    writeln!(
        out,
        "max coherence residual       : {:.3e}",
        o.max_coherence_residual
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(
        out,
        "[estimated block covariance, {} meta runs x {} rows]",
        cfg.meta_runs, cfg.train_rows
    )
    .unwrap();
    for m in &report.meta_runs {
        writeln!(
            out,
            "run {:>2}: relative MSE {:.6} (mean shrink lambda {:.4})",
            m.run, m.ar_mse, m.mean_lambda
        )
        .unwrap();
    }
    writeln!(
        out,
        "runs with relative MSE < 1   : {:.1}%",
        100.0 * report.meta_below_one
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(
        out,
        "[bias check, {} replications] max |z| = {:.4}",
        report.bias.replications, report.bias.max_abs_z
    )
    .unwrap();
    out
}

/// Deterministic CSV rendering (`section,key,value`).
pub fn simulation_to_csv(report: &SimulationReport) -> String {
    let mut out = String::from("section,key,value\n");
    let cfg = &report.config;
    let mut push = |section: &str, key: &str, value: String| {
        out.push_str(section);
        out.push(',');
        out.push_str(key);
        out.push(',');
        out.push_str(&value);
        out.push('\n');
    };
    push("config", "seed", cfg.seed.to_string());
    push("config", "zones", cfg.zones.to_string());
    push("config", "sources", cfg.sources.to_string());
    push("config", "experts", cfg.experts.to_string());
    push("config", "replications", cfg.replications.to_string());
    push("config", "train_rows", cfg.train_rows.to_string());
    push("config", "meta_runs", cfg.meta_runs.to_string());
    push("config", "noise", format!("{:?}", cfg.noise).to_lowercase());
    push("hierarchy", "n_series", report.n_series.to_string());
    push("hierarchy", "n_upper", report.n_upper.to_string());
    let o = &report.oracle;
    push("oracle", "mean_mse_occ", format!("{:.12e}", o.mean_mse_occ));
    push("oracle", "mean_mse_ew", format!("{:.12e}", o.mean_mse_ew));
    push(
        "oracle",
        "mean_mse_projected_ew",
        format!("{:.12e}", o.mean_mse_projected_ew),
    );
    push("oracle", "ar_mse_occ", format!("{:.12e}", o.ar_mse_occ));
    push("oracle", "ar_mae_occ", format!("{:.12e}", o.ar_mae_occ));
    push(
        "oracle",
        "max_coherence_residual",
        format!("{:.6e}", o.max_coherence_residual),
    );
    for m in &report.meta_runs {
        push(
            "meta",
            &format!("ar_mse_run_{}", m.run),
            format!("{:.12e}", m.ar_mse),
        );
    }
    push(
        "meta",
        "fraction_below_one",
        format!("{:.4}", report.meta_below_one),
    );
    push("bias", "replications", report.bias.replications.to_string());
    push("bias", "max_abs_z", format!("{:.6}", report.bias.max_abs_z));
    out
}
