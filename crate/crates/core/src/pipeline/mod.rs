//! End-to-end protocol over a dataset directory: generate, quantize,
//! calibrate, apply, evaluate and report, plus a repeated-split coverage
//! study.
//!
//! Every stage reads a [`PipelineConfig`] and communicates with the others
//! only through files, so stages can be run separately from the command
//! line. Work is spread over a pool of `jobs` threads in fixed-size ordered
//! chunks; outputs do not depend on the thread count.

pub mod config;
pub mod coverage;
pub mod report;
pub mod store;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Method, PipelineConfig};
pub use coverage::{run_coverage_sim, CoverageStudy};
pub use store::DatasetManifest;

use crate::conformal::{
    apply_offsets, apply_split, raw_intervals, ConformalOffsets, CqrCalibrator, IntervalGridSet, SplitCalibrator,
};
use crate::error::{Error, Result};
use crate::grid::{GridField, LevelScheme, SplitTag};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::quantiles::{ensemble_to_quantiles, QuantileGridSet};
use crate::synth::{record_rng, stream_id, Synth};

/// Records handled per parallel batch.
const CHUNK: usize = 64;

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs `f` over `0..n` on the pool and feeds results to `sink` in index order.
fn ordered<T: Send>(
    pool: &rayon::ThreadPool,
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
    mut sink: impl FnMut(usize, T) -> Result<()>,
) -> Result<()> {
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let batch: Vec<Result<T>> = pool.install(|| (start..end).into_par_iter().map(&f).collect());
        for (i, item) in (start..end).zip(batch) {
            sink(i, item?)?;
        }
    }
    Ok(())
}

/// What a method conditions on for one record.
#[derive(Debug, Clone)]
pub enum Prediction {
    Quantiles(QuantileGridSet),
    Point(GridField),
}

/// Generates the synthetic dataset: calibration records first, then test records.
pub fn run_synth(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let synth = Synth::new(cfg.synth_config()?.clone())?;
    let seed = synth.config().noise_seed;
    let pool = pool(cfg.jobs)?;
    let (height, width) = synth.config().fine_dims();
    let manifest = DatasetManifest {
        n_calibration: cfg.n_calibration,
        n_test: cfg.n_test,
        height,
        width,
        member_count: Some(synth.config().member_count),
        time_order: vec![SplitTag::Calibration, SplitTag::Test],
        synth: Some(synth.config().clone()),
    };
    for split in [SplitTag::Calibration, SplitTag::Test] {
        ordered(
            &pool,
            manifest.count(split),
            |i| {
                let mut rng = record_rng(seed, stream_id(0, split, i as u32));
                let r = synth.record(&mut rng, true);
                store::save_record(&cfg.dataset_dir, split, i, &r)
            },
            |_, ()| Ok(()),
        )?;
    }
    store::save_manifest(&cfg.dataset_dir, &manifest)?;
    log::info!(
        "wrote {} calibration and {} test records to {}",
        cfg.n_calibration,
        cfg.n_test,
        cfg.dataset_dir.display()
    );
    Ok(manifest)
}

/// Converts every stored ensemble to quantile grids under `<out>/quantiles`.
pub fn run_quantiles(cfg: &PipelineConfig) -> Result<usize> {
    let manifest = store::load_manifest(&cfg.dataset_dir)?;
    let pool = pool(cfg.jobs)?;
    let mut written = 0;
    let mut warned = false;
    for split in [SplitTag::Calibration, SplitTag::Test] {
        ordered(
            &pool,
            manifest.count(split),
            |i| {
                let batch = store::load_ensemble(&cfg.dataset_dir, split, i)?;
                let q = ensemble_to_quantiles(&batch, &cfg.levels)?;
                q.save_dir(&store::quantile_dir(&cfg.output_dir, split, i))?;
                Ok(q.warning().map(str::to_owned))
            },
            |_, warning| {
                if let (Some(w), false) = (warning, warned) {
                    log::warn!("{w}");
                    warned = true;
                }
                written += 1;
                Ok(())
            },
        )?;
    }
    Ok(written)
}

/// Quantile set for a record: precomputed grids if present, else computed
/// from the stored ensemble.
pub fn load_quantiles(cfg: &PipelineConfig, split: SplitTag, index: usize) -> Result<QuantileGridSet> {
    let dir = store::quantile_dir(&cfg.output_dir, split, index);
    if dir.join("index.json").is_file() {
        let q = QuantileGridSet::load_dir(&dir)?;
        check_levels(&q, &cfg.levels)?;
        Ok(q)
    } else {
        ensemble_to_quantiles(&store::load_ensemble(&cfg.dataset_dir, split, index)?, &cfg.levels)
    }
}

fn check_levels(q: &QuantileGridSet, scheme: &LevelScheme) -> Result<()> {
    for &g in scheme.quantile_levels() {
        if q.position(g).is_none() {
            return Err(Error::MissingLevel(g));
        }
    }
    Ok(())
}

pub fn load_prediction(cfg: &PipelineConfig, method: Method, split: SplitTag, index: usize) -> Result<Prediction> {
    if method.uses_quantiles() {
        load_quantiles(cfg, split, index).map(Prediction::Quantiles)
    } else {
        store::load_deterministic(&cfg.dataset_dir, split, index).map(Prediction::Point)
    }
}

/// Fits offsets on the calibration split and writes them under
/// `<out>/offsets/<method>`. The raw method has nothing to fit.
pub fn run_calibrate(cfg: &PipelineConfig) -> Result<Option<ConformalOffsets>> {
    if cfg.method == Method::Raw {
        log::info!("raw intervals need no calibration");
        return Ok(None);
    }
    let manifest = store::load_manifest(&cfg.dataset_dir)?;
    let n = manifest.n_calibration;
    if n == 0 {
        return Err(Error::NoRecords);
    }
    let pool = pool(cfg.jobs)?;
    let template = store::load_truth(&cfg.dataset_dir, SplitTag::Calibration, 0)?;
    let load = |i| {
        let truth = store::load_truth(&cfg.dataset_dir, SplitTag::Calibration, i)?;
        let pred = load_prediction(cfg, cfg.method, SplitTag::Calibration, i)?;
        Ok((pred, truth))
    };
    let offsets = if cfg.method == Method::Cqr {
        let mut cal = CqrCalibrator::new(&cfg.levels, &template)?;
        ordered(&pool, n, load, |_, (pred, truth)| match pred {
            Prediction::Quantiles(q) => cal.push(&q, &truth),
            Prediction::Point(_) => unreachable!("cqr loads quantiles"),
        })?;
        cal.finish()?
    } else {
        let mut cal = SplitCalibrator::new(&cfg.levels, &template);
        ordered(&pool, n, load, |_, (pred, truth)| match pred {
            Prediction::Point(f) => cal.push(&f, &truth),
            Prediction::Quantiles(_) => unreachable!("split-cp loads point predictions"),
        })?;
        cal.finish()?
    };
    offsets.save_dir(&store::offsets_dir(&cfg.output_dir, cfg.method))?;
    Ok(Some(offsets))
}

fn load_offsets(cfg: &PipelineConfig) -> Result<Option<ConformalOffsets>> {
    if cfg.method == Method::Raw {
        return Ok(None);
    }
    let dir = store::offsets_dir(&cfg.output_dir, cfg.method);
    let off = ConformalOffsets::load_dir(&dir)?;
    for &c in cfg.levels.coverage_levels() {
        off.level(c)?;
    }
    Ok(Some(off))
}

/// Intervals of `method` for one record.
pub fn build_intervals(
    method: Method,
    pred: &Prediction,
    offsets: Option<&ConformalOffsets>,
    scheme: &LevelScheme,
) -> Result<IntervalGridSet> {
    let need = || Error::Config(format!("{method} intervals need calibration offsets"));
    match (method, pred) {
        (Method::Raw, Prediction::Quantiles(q)) => raw_intervals(q, scheme),
        (Method::Cqr, Prediction::Quantiles(q)) => apply_offsets(q, offsets.ok_or_else(need)?, scheme),
        (Method::SplitCp, Prediction::Point(f)) => apply_split(f, offsets.ok_or_else(need)?, scheme),
        _ => Err(Error::Misaligned(format!("{method} cannot use this prediction type"))),
    }
}

/// Writes test-split intervals under `<out>/intervals/<method>`.
pub fn run_apply(cfg: &PipelineConfig) -> Result<usize> {
    let manifest = store::load_manifest(&cfg.dataset_dir)?;
    let offsets = load_offsets(cfg)?;
    let pool = pool(cfg.jobs)?;
    let mut written = 0;
    ordered(
        &pool,
        manifest.n_test,
        |i| {
            let pred = load_prediction(cfg, cfg.method, SplitTag::Test, i)?;
            let iv = build_intervals(cfg.method, &pred, offsets.as_ref(), &cfg.levels)?;
            iv.save_dir(&store::intervals_dir(&cfg.output_dir, cfg.method, i))
        },
        |_, ()| {
            written += 1;
            Ok(())
        },
    )?;
    Ok(written)
}

/// `summary.json` of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config: serde_json::Value,
    pub report: MetricReport,
}

fn missing_for_evaluate(cfg: &PipelineConfig) -> Vec<PathBuf> {
    let mut missing = Vec::new();
    let manifest_path = store::manifest_path(&cfg.dataset_dir);
    let manifest = match store::load_manifest(&cfg.dataset_dir) {
        Ok(m) => Some(m),
        Err(_) => {
            missing.push(manifest_path);
            None
        }
    };
    if cfg.method != Method::Raw {
        let p = store::offsets_dir(&cfg.output_dir, cfg.method).join("manifest.json");
        if !p.is_file() {
            missing.push(p);
        }
    }
    if let Some(m) = manifest {
        for i in 0..m.n_test {
            let dir = store::record_dir(&cfg.dataset_dir, SplitTag::Test, i);
            let truth = dir.join("truth.cgf");
            if !truth.is_file() {
                missing.push(truth);
            }
            if cfg.method.uses_quantiles() {
                let q = store::quantile_dir(&cfg.output_dir, SplitTag::Test, i).join("index.json");
                let ens = dir.join("ensemble.cgf");
                if !q.is_file() && !ens.is_file() {
                    missing.push(ens);
                }
            } else {
                let det = dir.join("deterministic.cgf");
                if !det.is_file() {
                    missing.push(det);
                }
            }
        }
    }
    missing
}

/// Scores the test split and writes tables, maps, charts and a JSON
/// summary under `<out>/report/<method>`.
pub fn run_evaluate(cfg: &PipelineConfig) -> Result<MetricReport> {
    let missing = missing_for_evaluate(cfg);
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let manifest = store::load_manifest(&cfg.dataset_dir)?;
    let offsets = load_offsets(cfg)?;
    let pool = pool(cfg.jobs)?;
    let template = store::load_truth(&cfg.dataset_dir, SplitTag::Test, 0)?;
    let mut acc = MetricAccumulator::new(&cfg.levels, &template);
    ordered(
        &pool,
        manifest.n_test,
        |i| {
            let truth = store::load_truth(&cfg.dataset_dir, SplitTag::Test, i)?;
            let pred = load_prediction(cfg, cfg.method, SplitTag::Test, i)?;
            let iv = build_intervals(cfg.method, &pred, offsets.as_ref(), &cfg.levels)?;
            Ok((pred, iv, truth))
        },
        |_, (pred, iv, truth)| {
            let q = match &pred {
                Prediction::Quantiles(q) => Some(q),
                Prediction::Point(_) => None,
            };
            acc.push(&iv, q, &truth)
        },
    )?;
    let report = acc.finish()?;
    write_method_report(cfg, &report, &template)?;
    Ok(report)
}

fn write_method_report(cfg: &PipelineConfig, report: &MetricReport, template: &GridField) -> Result<()> {
    let dir = store::report_dir(&cfg.output_dir, cfg.method);
    let reports = std::slice::from_ref(report);
    store::write_json(
        &dir.join("summary.json"),
        &EvaluationSummary {
            config: cfg.provenance_echo(),
            report: report.clone(),
        },
    )?;
    store::write_text(&dir.join("table_is.csv"), &report::is_table(reports)?)?;
    store::write_text(&dir.join("table_qs.csv"), &report::qs_table(reports)?)?;
    store::write_text(&dir.join("picp.csv"), &report::picp_table(reports)?)?;
    report::write_maps(&dir.join("maps"), report, template)?;
    report::write_charts(&dir, reports)
}

/// Merges every per-method evaluation found under `<out>/report` into
/// side-by-side tables and charts. Returns the methods included.
pub fn run_report(cfg: &PipelineConfig) -> Result<Vec<Method>> {
    let mut found = Vec::new();
    let mut expected = Vec::new();
    for m in Method::ALL {
        let path = store::report_dir(&cfg.output_dir, m).join("summary.json");
        if path.is_file() {
            let s: EvaluationSummary = store::read_json(&path)?;
            found.push((m, s.report));
        } else {
            expected.push(path);
        }
    }
    if found.is_empty() {
        return Err(Error::MissingArtifacts(expected));
    }
    let dir = cfg.output_dir.join("report");
    let reports: Vec<MetricReport> = found.iter().map(|(_, r)| r.clone()).collect();
    store::write_text(&dir.join("table_is.csv"), &report::is_table(&reports)?)?;
    store::write_text(&dir.join("table_qs.csv"), &report::qs_table(&reports)?)?;
    store::write_text(&dir.join("picp.csv"), &report::picp_table(&reports)?)?;
    report::write_charts(&dir, &reports)?;
    let methods: Vec<Method> = found.iter().map(|(m, _)| *m).collect();
    let mut echo = cfg.provenance_echo();
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("method");
    }
    store::write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "methods": methods, "config": echo }),
    )?;
    Ok(methods)
}
