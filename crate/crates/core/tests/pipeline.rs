use std::fs;
use std::path::Path;

use gridconformal::conformal::{apply_offsets, calibrate_cqr, ConformalOffsets, IntervalGridSet};
use gridconformal::grid::{LevelScheme, SplitTag};
use gridconformal::pipeline::{self, store, Method, PipelineConfig};
use gridconformal::quantiles::{ensemble_to_quantiles, QuantileGridSet};
use gridconformal::synth::{record_rng, stream_id, Synth, SynthConfig};
use gridconformal::Error;

/// Exact equality that treats the `NaN` filling masked cells as equal.
fn same<T: std::fmt::Debug>(a: &T, b: &T) -> bool {
    format!("{a:?}") == format!("{b:?}")
}

fn config(root: &Path) -> PipelineConfig {
    PipelineConfig {
        dataset_dir: root.join("data"),
        output_dir: root.join("out"),
        n_calibration: 25,
        n_test: 12,
        trial_count: 3,
        synth: Some(SynthConfig {
            coarse_height: 2,
            coarse_width: 3,
            upscale_factor: 4,
            member_count: 30,
            sample_grid: Some([5, 7]),
            ..SynthConfig::default()
        }),
        ..PipelineConfig::default()
    }
}

#[test]
fn disk_stages_match_in_process_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::run_synth(&cfg).unwrap();
    pipeline::run_quantiles(&cfg).unwrap();
    pipeline::run_calibrate(&cfg).unwrap();
    pipeline::run_apply(&cfg).unwrap();

    // in memory from the same seeds, no files involved
    let synth = Synth::new(cfg.synth.clone().unwrap()).unwrap();
    let seed = synth.config().noise_seed;
    let records = |split, n: usize| -> Vec<_> {
        (0..n)
            .map(|i| synth.record(&mut record_rng(seed, stream_id(0, split, i as u32)), true))
            .collect()
    };
    let cal = records(SplitTag::Calibration, cfg.n_calibration);
    let test = records(SplitTag::Test, cfg.n_test);
    let q_cal: Vec<QuantileGridSet> = cal
        .iter()
        .map(|r| ensemble_to_quantiles(&r.ensemble, &cfg.levels).unwrap())
        .collect();
    let truths: Vec<_> = cal.iter().map(|r| r.truth.clone()).collect();
    let offsets = calibrate_cqr(&q_cal, &truths, &cfg.levels).unwrap();

    let stored = ConformalOffsets::load_dir(&store::offsets_dir(&cfg.output_dir, Method::Cqr)).unwrap();
    assert!(same(&stored, &offsets));
    for (i, r) in test.iter().enumerate() {
        let q = ensemble_to_quantiles(&r.ensemble, &cfg.levels).unwrap();
        let expected = apply_offsets(&q, &offsets, &cfg.levels).unwrap();
        let on_disk = IntervalGridSet::load_dir(&store::intervals_dir(&cfg.output_dir, Method::Cqr, i)).unwrap();
        assert!(same(&on_disk, &expected), "test record {i}");
        assert!(same(&store::load_truth(&cfg.dataset_dir, SplitTag::Test, i).unwrap(), &r.truth));
    }
}

#[test]
fn precomputed_and_on_the_fly_quantiles_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::run_synth(&cfg).unwrap();
    let on_the_fly = pipeline::run_evaluate(&cfg);
    // cqr needs offsets first
    assert!(matches!(on_the_fly, Err(Error::MissingArtifacts(_))));
    pipeline::run_calibrate(&cfg).unwrap();
    let direct = pipeline::run_evaluate(&cfg).unwrap();
    pipeline::run_quantiles(&cfg).unwrap();
    pipeline::run_calibrate(&cfg).unwrap();
    let via_files = pipeline::run_evaluate(&cfg).unwrap();
    assert!(same(&direct, &via_files));
}

#[test]
fn calibrate_is_idempotent_and_job_count_free() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::run_synth(&cfg).unwrap();
    for method in [Method::SplitCp, Method::Cqr] {
        let cfg = PipelineConfig { method, ..cfg.clone() };
        let a = pipeline::run_calibrate(&cfg).unwrap().unwrap();
        let b = pipeline::run_calibrate(&PipelineConfig { jobs: 4, ..cfg.clone() }).unwrap().unwrap();
        assert!(same(&a, &b));
        let manifest = store::offsets_dir(&cfg.output_dir, method).join("manifest.json");
        let first = fs::read(&manifest).unwrap();
        pipeline::run_calibrate(&cfg).unwrap();
        assert_eq!(fs::read(&manifest).unwrap(), first);
    }
    let raw = PipelineConfig { method: Method::Raw, ..cfg };
    assert!(pipeline::run_calibrate(&raw).unwrap().is_none());
}

#[test]
fn evaluate_lists_every_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    match pipeline::run_evaluate(&cfg) {
        Err(Error::MissingArtifacts(paths)) => {
            assert_eq!(paths.len(), 2);
            assert!(paths[0].ends_with("manifest.json"));
            assert!(paths[1].ends_with("offsets/cqr/manifest.json"));
        }
        other => panic!("expected missing artifacts, got {other:?}"),
    }
    pipeline::run_synth(&cfg).unwrap();
    fs::remove_file(store::record_dir(&cfg.dataset_dir, SplitTag::Test, 3).join("truth.cgf")).unwrap();
    let raw = PipelineConfig { method: Method::Raw, ..cfg };
    match pipeline::run_evaluate(&raw) {
        Err(Error::MissingArtifacts(paths)) => {
            assert_eq!(paths.len(), 1);
            assert!(paths[0].ends_with("test/0003/truth.cgf"));
        }
        other => panic!("expected missing artifacts, got {other:?}"),
    }
}

#[test]
fn scheme_mismatch_names_the_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        levels: LevelScheme::from_coverage(vec![0.5]).unwrap(),
        ..config(dir.path())
    };
    pipeline::run_synth(&cfg).unwrap();
    pipeline::run_quantiles(&cfg).unwrap();
    // stored quantiles hold 0.25/0.75 only; 0.8 coverage needs 0.1 and 0.9
    let wider = PipelineConfig {
        levels: LevelScheme::from_coverage(vec![0.8]).unwrap(),
        ..cfg
    };
    let err = pipeline::run_calibrate(&wider).unwrap_err();
    assert!(matches!(err, Error::MissingLevel(l) if (l - 0.1).abs() < 1e-12), "{err}");
    assert!(err.to_string().contains("0.1"));
}

#[test]
fn split_cp_covers_on_fresh_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        method: Method::SplitCp,
        n_calibration: 99,
        n_test: 60,
        ..config(dir.path())
    };
    pipeline::run_synth(&cfg).unwrap();
    pipeline::run_calibrate(&cfg).unwrap();
    let report = pipeline::run_evaluate(&cfg).unwrap();
    assert_eq!(report.records, 60);
    assert_eq!(report.valid_points, 35);
    // expected coverage k/(n+1) = 0.9; 2100 draws give SE ≈ 0.0065
    let c = report.coverage_level(0.9).unwrap();
    assert!((c.mean_picp - 0.9).abs() < 0.03, "{}", c.mean_picp);
}

#[test]
fn report_merges_methods_and_writes_charts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    assert!(matches!(pipeline::run_report(&cfg), Err(Error::MissingArtifacts(p)) if p.len() == 3));
    pipeline::run_synth(&cfg).unwrap();
    for method in [Method::Raw, Method::Cqr] {
        let cfg = PipelineConfig { method, ..cfg.clone() };
        pipeline::run_calibrate(&cfg).unwrap();
        pipeline::run_evaluate(&cfg).unwrap();
    }
    assert_eq!(pipeline::run_report(&cfg).unwrap(), vec![Method::Raw, Method::Cqr]);
    let report = cfg.output_dir.join("report");
    let table = fs::read_to_string(report.join("table_is.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "metric,method,0.1,0.3,0.5,0.7,0.9");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("IS,raw-quantile,"));
    assert!(lines[2].starts_with("IS,cqr,"));
    let qs = fs::read_to_string(report.join("table_qs.csv")).unwrap();
    assert!(qs.starts_with("metric,method,0.05,0.15,"));
    for svg in ["picp.svg", "pct_deviation.svg"] {
        let text = fs::read_to_string(report.join(svg)).unwrap();
        assert!(text.starts_with("<svg") && text.contains("cqr") && text.contains("raw-quantile"));
    }
    let maps = store::report_dir(&cfg.output_dir, Method::Cqr).join("maps");
    let picp = gridconformal::cgf::load(&maps.join("picp_0.9.cgf")).unwrap();
    assert_eq!(picp.dims(), (8, 12));
    assert_eq!(picp.valid_count(), 35);
    assert!(picp.valid_indices().all(|p| (0.0..=1.0).contains(&picp.values()[p])));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert!(summary["config"].get("dataset_dir").is_none());
    assert_eq!(summary["config"]["n_calibration"], 25);
}

#[test]
fn coverage_sim_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        method: Method::SplitCp,
        ..config(dir.path())
    };
    let study = pipeline::run_coverage_sim(&cfg).unwrap();
    assert_eq!(study.per_trial.len(), 3 * 5);
    let cov = cfg.output_dir.join("coverage");
    let trials = fs::read_to_string(cov.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 15);
    let agg = fs::read_to_string(cov.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().next().unwrap(), "level,mean,se,band_lower,band_upper,below,above,violation");
    assert!(cov.join("summary.json").is_file());
    // no dataset directory is created by the study
    assert!(!cfg.dataset_dir.exists());
}
