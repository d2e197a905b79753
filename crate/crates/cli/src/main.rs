//! Command-line driver: rolling evaluation runs, configuration validation,
//! seeded simulation, and report reformatting.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cocomb::baseline::ExpertModel;
use cocomb::error::Error;
use cocomb::evaluation::{
    run_experiment, Approach, BaseForecastProvider, BuiltinProvider, ExperimentConfig,
    RollingPlan,
};
use cocomb::io::{
    import_forecast_bundle, load_dataset_csv, load_hierarchy_json, render_ar_table,
    read_report_csv, write_audit_csv, write_report_csv,
};
use cocomb::simulate::{
    render_simulation_text, run_simulation, simulation_to_csv, NoiseFamily, SimulationConfig,
};

use config::{FileConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "cocomb",
    version,
    about = "Coherent multi-expert forecast combination for constrained time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rolling-origin evaluation and write report files.
    Run(RunArgs),
    /// Check configuration, hierarchy and data alignment without computing.
    Validate(RunArgs),
    /// Run the seeded Monte Carlo study with a known error covariance.
    Simulate(SimArgs),
    /// Reformat an existing report CSV into the comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV (`date,series_id,value`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Hierarchy spec JSON.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Comma-separated approach ids.
    #[arg(long, value_delimiter = ',')]
    approaches: Option<Vec<String>>,
    /// Comma-separated built-in expert ids.
    #[arg(long, value_delimiter = ',')]
    experts: Option<Vec<String>>,
    /// Forecast bundle CSV replacing the built-in experts.
    #[arg(long)]
    import: Option<PathBuf>,
    /// Initial training window length.
    #[arg(long = "first-train")]
    first_train: Option<usize>,
    /// Maximum forecast horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Origin increment.
    #[arg(long)]
    step: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed recorded with the run (evaluation itself is deterministic).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the origin loop.
    #[arg(long)]
    threads: Option<usize>,
    /// Seasonal period of the data.
    #[arg(long)]
    period: Option<usize>,
    /// Smoothing weight of the ses expert.
    #[arg(long = "ses-alpha")]
    ses_alpha: Option<f64>,
    /// Consecutive-day cap for gap filling.
    #[arg(long = "gap-cap")]
    gap_cap: Option<usize>,
    /// Coherence tolerance enforced on coherent methods.
    #[arg(long = "coherence-tol")]
    coherence_tol: Option<f64>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let overrides = FileConfig {
            dataset: self.dataset,
            hierarchy: self.hierarchy,
            out: self.out,
            approaches: self.approaches,
            experts: self.experts,
            import: self.import,
            first_train: self.first_train,
            horizon: self.horizon,
            step: self.step,
            period: self.period,
            ses_alpha: self.ses_alpha,
            gap_cap: self.gap_cap,
            seed: self.seed,
            threads: self.threads,
            coherence_tol: self.coherence_tol,
        };
        base.overlay(overrides).resolve()
    }
}

#[derive(Args)]
struct SimArgs {
    /// Zones of the synthetic hierarchy.
    #[arg(long, default_value_t = 2)]
    zones: usize,
    /// Sources of the synthetic hierarchy.
    #[arg(long, default_value_t = 4)]
    sources: usize,
    /// Expert count.
    #[arg(long, default_value_t = 3)]
    experts: usize,
    /// Test replications per comparison.
    #[arg(long, default_value_t = 1000)]
    replications: usize,
    /// Residual rows for covariance estimation.
    #[arg(long = "train-rows", default_value_t = 200)]
    train_rows: usize,
    /// Estimation meta-runs.
    #[arg(long = "meta-runs", default_value_t = 20)]
    meta_runs: usize,
    /// Replications for the bias check.
    #[arg(long = "bias-replications", default_value_t = 10_000)]
    bias_replications: usize,
    /// Noise family: ar1 or equi.
    #[arg(long, default_value = "ar1")]
    noise: String,
    /// Master seed.
    #[arg(long, default_value_t = 20230101)]
    seed: u64,
    /// Output directory (omit to print only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSV produced by `run`.
    #[arg(long)]
    input: PathBuf,
    /// Write the table here instead of stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args, false),
        Command::Validate(args) => cmd_run(args, true),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Distinct exit codes per error class.
fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "config" => 2,
        "hierarchy" | "dataset" | "data" | "shape" | "plan" | "bundle" => 3,
        "covariance" | "numerical" => 4,
        _ => 5,
    }
}

fn cmd_run(args: RunArgs, validate_only: bool) -> Result<(), Error> {
    let cfg = args.resolve()?;
    cfg.check_paths()?;

    let hierarchy = load_hierarchy_json(&cfg.hierarchy)?;
    let rank = hierarchy.constraint().matrix().clone().rank(1e-10);
    if rank != hierarchy.n_upper() {
        return Err(Error::RankDeficientConstraints);
    }

    let dataset = load_dataset_csv(&cfg.dataset, cfg.gap_cap)?;
    let actuals = dataset.to_matrix(&hierarchy)?;
    let plan = RollingPlan::new(dataset.len(), cfg.first_train, cfg.horizon, cfg.step)?;

    let approaches: Vec<Approach> = cfg
        .approaches
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, Error>>()?;
    let experiment = ExperimentConfig {
        approaches,
        benchmark: Approach::Ew,
        threads: cfg.threads,
        coherence_tol: cfg.coherence_tol,
    };
    if !experiment.approaches.contains(&experiment.benchmark) {
        return Err(Error::InvalidParameter(
            "approach list must include the ew benchmark".into(),
        ));
    }

    // Either built-in experts or an imported bundle supply base forecasts.
    let builtin_models: Vec<(String, ExpertModel)> = cfg
        .experts
        .iter()
        .map(|id| Ok((id.clone(), ExpertModel::parse(id, cfg.ses_alpha)?)))
        .collect::<Result<_, Error>>()?;
    let imported = match &cfg.import {
        Some(path) => Some(import_forecast_bundle(path, &hierarchy, &dataset)?),
        None => None,
    };
    let builtin;
    let provider: &dyn BaseForecastProvider = match &imported {
        Some(p) => p,
        None => {
            builtin = BuiltinProvider::new(&actuals, cfg.period, builtin_models);
            &builtin
        }
    };

    if validate_only {
        let gaps: usize = dataset.gap_counts.values().sum();
        println!("config ok: {} series, {} observations", hierarchy.n(), dataset.len());
        println!(
            "hierarchy: n = {}, n_upper = {}, rank(C) = {rank}",
            hierarchy.n(),
            hierarchy.n_upper()
        );
        println!("dataset: {} gap-filled day(s)", gaps);
        println!(
            "plan: {} origins, horizons 1..={}, Q_1 = {}, Q_{} = {}",
            plan.origins().len(),
            plan.max_horizon,
            plan.q(1),
            plan.max_horizon,
            plan.q(plan.max_horizon)
        );
        println!("experts: {}", provider.expert_ids().join(", "));
        return Ok(());
    }

    let report = run_experiment(&actuals, &hierarchy, provider, &plan, &experiment)?;
    std::fs::create_dir_all(&cfg.out)?;
    write_report_csv(&report, &cfg.out.join("report.csv"))?;
    write_audit_csv(&report, &cfg.out.join("audit.csv"))?;
    let table = render_ar_table(&report)?;
    std::fs::write(cfg.out.join("report.txt"), &table)?;
    println!("{table}");
    println!("reports written to {} (seed {})", cfg.out.display(), cfg.seed);
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> Result<(), Error> {
    let cfg = SimulationConfig {
        zones: args.zones,
        sources: args.sources,
        experts: args.experts,
        replications: args.replications,
        train_rows: args.train_rows,
        meta_runs: args.meta_runs,
        unbiased_replications: args.bias_replications,
        noise: NoiseFamily::parse(&args.noise)?,
        seed: args.seed,
    };
    let report = run_simulation(&cfg)?;
    let text = render_simulation_text(&report);
    print!("{text}");
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("simulation.txt"), &text)?;
        std::fs::write(out.join("simulation.csv"), simulation_to_csv(&report))?;
        println!("simulation reports written to {}", out.display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    let report = read_report_csv(&args.input)?;
    let table = render_ar_table(&report)?;
    print!("{table}");
    if let Some(out) = args.out {
        std::fs::write(&out, &table)?;
    }
    Ok(())
}
