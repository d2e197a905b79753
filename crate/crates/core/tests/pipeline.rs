//! End-to-end experiment tests: built-in experts, imported bundles, failure
//! recording, parallel/sequential agreement, and report persistence.

use std::io::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use cocomb::baseline::ExpertModel;
use cocomb::error::Error;
use cocomb::evaluation::{
    run_experiment, Approach, BuiltinProvider, ExperimentConfig, RollingPlan,
};
use cocomb::hierarchy::Hierarchy;
use cocomb::io::{
    import_forecast_bundle, load_dataset_csv, read_report_csv, render_ar_table, report_to_csv,
    write_report_csv,
};
use cocomb::simulate::synthetic_hierarchy;

/// Coherent actuals with metering noise on the aggregates.
fn synthetic_actuals(hierarchy: &Hierarchy, total: usize, seed: u64) -> DMatrix<f64> {
    let n = hierarchy.n();
    let n_bottom = hierarchy.n_bottom();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actuals = DMatrix::zeros(total, n);
    for t in 0..total {
        let bottoms = DVector::from_fn(n_bottom, |i, _| {
            let weekly = 1.0 + 0.25 * ((t % 7) as f64 + i as f64).sin();
            (15.0 + 2.0 * i as f64) * weekly + 0.8 * rng.sample::<f64, _>(StandardNormal)
        });
        let full = hierarchy.aggregate_bottom_slice(&bottoms);
        for i in 0..n {
            let noise = if i < hierarchy.n_upper() {
                1.0 + 0.01 * (rng.gen::<f64>() - 0.5)
            } else {
                1.0
            };
            actuals[(t, i)] = full[i] * noise;
        }
    }
    actuals
}

fn all_builtin_models() -> Vec<(String, ExpertModel)> {
    vec![
        ("seasonal_naive".into(), ExpertModel::SeasonalNaive),
        ("mean".into(), ExpertModel::Mean),
        ("drift".into(), ExpertModel::Drift),
        ("ses".into(), ExpertModel::Ses { alpha: 0.2 }),
    ]
}

fn eleven_approaches() -> Vec<Approach> {
    vec![
        Approach::Base("ses".into()),
        Approach::MintShr("ses".into()),
        Approach::Ew,
        Approach::OwVar,
        Approach::OwCov,
        Approach::Src,
        Approach::ScrEw,
        Approach::ScrVar,
        Approach::ScrCov,
        Approach::OccWlsv,
        Approach::OccBe,
    ]
}

#[test]
fn full_run_with_builtin_experts() {
    let hierarchy = synthetic_hierarchy(2, 3).unwrap();
    let total = 80;
    let actuals = synthetic_actuals(&hierarchy, total, 31);
    let provider = BuiltinProvider::new(&actuals, 7, all_builtin_models());
    let plan = RollingPlan::new(total, 56, 5, 1).unwrap();
    let config = ExperimentConfig {
        approaches: eleven_approaches(),
        benchmark: Approach::Ew,
        threads: 1,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&actuals, &hierarchy, &provider, &plan, &config).unwrap();

    assert_eq!(report.scores.len(), 11);
    for s in &report.scores {
        assert_eq!(s.failures, 0, "{} should not fail on clean data", s.approach);
        for h in 1..=plan.max_horizon {
            assert_eq!(s.q[h - 1], plan.q(h));
        }
        if s.approach.is_coherent() {
            let max = s.max_coherence_residual.expect("audited");
            assert!(max <= 1e-8, "{}: residual {max:.2e}", s.approach);
        }
    }
    // Exactly Q_h audit records per coherent approach and horizon.
    let coherent_count = report
        .scores
        .iter()
        .filter(|s| s.approach.is_coherent())
        .count();
    let expected: usize = (1..=plan.max_horizon).map(|h| plan.q(h)).sum::<usize>() * coherent_count;
    assert_eq!(report.audit.len(), expected);

    let table = render_ar_table(&report).unwrap();
    assert!(table.contains("occ_be"));
    assert!(table.contains("1:5"));
}

#[test]
fn parallel_run_matches_sequential() {
    let hierarchy = synthetic_hierarchy(2, 2).unwrap();
    let total = 60;
    let actuals = synthetic_actuals(&hierarchy, total, 77);
    let provider = BuiltinProvider::new(&actuals, 7, all_builtin_models());
    let plan = RollingPlan::new(total, 42, 4, 1).unwrap();
    let mut config = ExperimentConfig {
        approaches: eleven_approaches(),
        benchmark: Approach::Ew,
        threads: 1,
        ..ExperimentConfig::default()
    };
    let sequential = run_experiment(&actuals, &hierarchy, &provider, &plan, &config).unwrap();
    config.threads = 4;
    let parallel = run_experiment(&actuals, &hierarchy, &provider, &plan, &config).unwrap();

    for (a, b) in sequential.scores.iter().zip(&parallel.scores) {
        assert_eq!(a.approach, b.approach);
        for h in 0..plan.max_horizon {
            assert_eq!(a.mae[h], b.mae[h], "{} mae differs at h={}", a.approach, h + 1);
            assert_eq!(a.mse[h], b.mse[h]);
        }
    }
    assert_eq!(
        report_to_csv(&sequential).unwrap(),
        report_to_csv(&parallel).unwrap()
    );
}

#[test]
fn report_csv_roundtrip_preserves_ar_table() {
    let hierarchy = synthetic_hierarchy(2, 2).unwrap();
    let total = 60;
    let actuals = synthetic_actuals(&hierarchy, total, 13);
    let provider = BuiltinProvider::new(&actuals, 7, all_builtin_models());
    let plan = RollingPlan::new(total, 42, 3, 1).unwrap();
    let config = ExperimentConfig {
        approaches: vec![Approach::Ew, Approach::OwVar, Approach::OccBe],
        benchmark: Approach::Ew,
        threads: 1,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&actuals, &hierarchy, &provider, &plan, &config).unwrap();

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("report.csv");
    write_report_csv(&report, &path).unwrap();
    let back = read_report_csv(&path).unwrap();

    // The CSV carries the scores; relative metrics must agree exactly.
    let orig_rows = report.ar_table().unwrap();
    let back_rows = back.ar_table().unwrap();
    assert_eq!(orig_rows.len(), back_rows.len());
    for ((a, cols_a), (b, cols_b)) in orig_rows.iter().zip(&back_rows) {
        assert_eq!(a, b);
        for (va, vb) in cols_a.iter().zip(cols_b) {
            assert_eq!(va.ar_mae, vb.ar_mae);
            assert_eq!(va.ar_mse, vb.ar_mse);
        }
    }
    for (sa, sb) in report.scores.iter().zip(&back.scores) {
        assert_eq!(sa.q, sb.q);
        assert_eq!(sa.failures, sb.failures);
    }
}

/// Dataset CSV matching `hierarchy` over `total` days from 2023-01-01.
fn write_dataset_csv(
    dir: &TempDir,
    hierarchy: &Hierarchy,
    actuals: &DMatrix<f64>,
) -> std::path::PathBuf {
    let path = dir.path().join("dataset.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "date,series_id,value").unwrap();
    let start = chrono::NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
    for t in 0..actuals.nrows() {
        let date = start + chrono::Duration::days(t as i64);
        for (i, id) in hierarchy.series_ids().iter().enumerate() {
            writeln!(f, "{date},{id},{:.9}", actuals[(t, i)]).unwrap();
        }
    }
    path
}

#[test]
fn imported_bundle_records_early_failures_and_continues() {
    let hierarchy = synthetic_hierarchy(2, 2).unwrap();
    let n = hierarchy.n();
    let total = 30usize;
    let actuals = synthetic_actuals(&hierarchy, total, 5);
    let dir = TempDir::new().unwrap();
    let dataset_path = write_dataset_csv(&dir, &hierarchy, &actuals);
    let dataset = load_dataset_csv(&dataset_path, 3).unwrap();

    // Two imported experts: actuals shifted by deterministic offsets.
    let bundle_path = dir.path().join("bundle.csv");
    {
        let mut f = std::fs::File::create(&bundle_path).unwrap();
        writeln!(f, "origin_date,horizon,expert_id,series_id,value").unwrap();
        let start = chrono::NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
        for origin in 20..=27usize {
            // Last training day is origin - 1 (0-based index origin-1).
            let date = start + chrono::Duration::days(origin as i64 - 1);
            for h in 1..=2usize {
                if origin + h > total {
                    continue;
                }
                for (e, offset) in [("m1", 0.5), ("m2", -0.8)] {
                    for (i, id) in hierarchy.series_ids().iter().enumerate() {
                        // Errors vary with origin so residual panels carry
                        // real variance.
                        let wobble = 1.0 + 0.4 * ((origin * 3 + i) as f64).sin();
                        let value = actuals[(origin + h - 1, i)]
                            + offset * wobble * (1.0 + (i as f64) * 0.1) * h as f64;
                        writeln!(f, "{date},{h},{e},{id},{value:.9}").unwrap();
                    }
                }
            }
        }
    }
    let provider = import_forecast_bundle(&bundle_path, &hierarchy, &dataset).unwrap();

    // Imported forecasts cover origins 20..=27, so the plan stops there.
    let plan_total = 28;
    let trimmed = actuals.rows(0, plan_total).clone_owned();
    let plan = RollingPlan::new(plan_total, 20, 2, 1).unwrap();
    let config = ExperimentConfig {
        approaches: vec![Approach::Ew, Approach::OccBe],
        benchmark: Approach::Ew,
        threads: 1,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&trimmed, &hierarchy, &provider, &plan, &config).unwrap();

    let ew = report.scores_of(&Approach::Ew).unwrap();
    let occ = report.scores_of(&Approach::OccBe).unwrap();
    assert_eq!(ew.failures, 0);
    assert_eq!(ew.q[0], plan.q(1));
    // The first two origins have fewer than two prior one-step errors, so
    // the panel cannot be built there; the run records the gaps and
    // continues. Whether the numerically thin third origin survives is
    // immaterial to the policy.
    assert!(occ.failures >= 2, "expected early-origin gaps");
    assert!(occ.failures <= 3);
    assert_eq!(occ.q[0], plan.q(1) - occ.failures);
    assert_eq!(report.failures.len(), occ.failures);
    assert!(report
        .failures
        .iter()
        .all(|f| f.approach == "occ_be" && f.origin <= 22));
    // Scores on the surviving origins are finite.
    assert!(occ.mae[0].iter().all(|v| v.is_finite()));

    // The imported experts are labelled m1/m2 in lexicographic order.
    assert_eq!(
        provider_expert_ids(&provider),
        vec!["m1".to_string(), "m2".to_string()]
    );
    let _ = n;
}

fn provider_expert_ids(p: &cocomb::evaluation::ImportedProvider) -> Vec<String> {
    use cocomb::evaluation::BaseForecastProvider;
    p.expert_ids().to_vec()
}

#[test]
fn imported_bundle_rejects_missing_cell() {
    let hierarchy = synthetic_hierarchy(2, 2).unwrap();
    let total = 25usize;
    let actuals = synthetic_actuals(&hierarchy, total, 6);
    let dir = TempDir::new().unwrap();
    let dataset_path = write_dataset_csv(&dir, &hierarchy, &actuals);
    let dataset = load_dataset_csv(&dataset_path, 3).unwrap();

    let bundle_path = dir.path().join("bundle.csv");
    {
        let mut f = std::fs::File::create(&bundle_path).unwrap();
        writeln!(f, "origin_date,horizon,expert_id,series_id,value").unwrap();
        // One cell short: skip the last series for expert m2.
        for (i, id) in hierarchy.series_ids().iter().enumerate() {
            writeln!(f, "2023-01-20,1,m1,{id},{:.3}", 10.0 + i as f64).unwrap();
            if i + 1 < hierarchy.n() {
                writeln!(f, "2023-01-20,1,m2,{id},{:.3}", 11.0 + i as f64).unwrap();
            }
        }
    }
    match import_forecast_bundle(&bundle_path, &hierarchy, &dataset) {
        Err(Error::UnbalancedBundle { .. }) => {}
        other => panic!("expected UnbalancedBundle, got {other:?}"),
    }
}

#[test]
fn imported_bundle_rejects_unknown_series() {
    let hierarchy = synthetic_hierarchy(2, 2).unwrap();
    let total = 25usize;
    let actuals = synthetic_actuals(&hierarchy, total, 6);
    let dir = TempDir::new().unwrap();
    let dataset_path = write_dataset_csv(&dir, &hierarchy, &actuals);
    let dataset = load_dataset_csv(&dataset_path, 3).unwrap();

    let bundle_path = dir.path().join("bundle.csv");
    std::fs::write(
        &bundle_path,
        "origin_date,horizon,expert_id,series_id,value\n2023-01-20,1,m1,nope,1.0\n",
    )
    .unwrap();
    match import_forecast_bundle(&bundle_path, &hierarchy, &dataset) {
        Err(Error::UnknownSeriesId { id }) => assert_eq!(id, "nope"),
        other => panic!("expected UnknownSeriesId, got {other:?}"),
    }
}

#[test]
fn benchmark_must_be_among_approaches() {
    let hierarchy = synthetic_hierarchy(2, 2).unwrap();
    let total = 40;
    let actuals = synthetic_actuals(&hierarchy, total, 3);
    let provider = BuiltinProvider::new(&actuals, 7, all_builtin_models());
    let plan = RollingPlan::new(total, 30, 2, 1).unwrap();
    let config = ExperimentConfig {
        approaches: vec![Approach::OccBe],
        benchmark: Approach::Ew,
        threads: 1,
        ..ExperimentConfig::default()
    };
    assert!(matches!(
        run_experiment(&actuals, &hierarchy, &provider, &plan, &config),
        Err(Error::UnknownApproach { .. })
    ));
}
