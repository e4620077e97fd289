//! Repeated-split coverage study on synthetic data.
//!
//! Each trial draws a fresh calibration set and a fresh test set from
//! disjoint ChaCha streams, fits the configured method and records the
//! map-averaged PICP per coverage level. The aggregate over trials is
//! compared with the finite-sample band of the method:
//!
//! | method   | band                              |
//! |----------|-----------------------------------|
//! | split-cp | `[1-α, 1-α + 1/(n+1)]`            |
//! | cqr      | `[1-α, 1-α + 2/(n+1)]`            |
//! | raw      | none                              |
//!
//! widened by three binomial standard errors `√(c(1-c)/(T·n_test))`.

use serde::{Deserialize, Serialize};

use super::config::{Method, PipelineConfig};
use super::report::num;
use super::store::{write_json, write_text};
use super::{build_intervals, ordered, pool, Prediction};
use crate::conformal::{ConformalOffsets, CqrCalibrator, SplitCalibrator};
use crate::error::Result;
use crate::grid::{LevelScheme, SplitTag};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::synth::{record_rng, stream_id, Synth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialCoverage {
    pub trial: usize,
    pub level: f64,
    pub coverage: f64,
    pub below: f64,
    pub above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub level: f64,
    pub mean: f64,
    /// Binomial standard error over `trials × n_test` test records.
    pub se: f64,
    pub band_lower: Option<f64>,
    pub band_upper: Option<f64>,
    pub mean_below: f64,
    pub mean_above: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStudy {
    pub method: Method,
    pub trials: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub valid_points: usize,
    pub levels: Vec<LevelCoverage>,
    #[serde(skip)]
    pub per_trial: Vec<TrialCoverage>,
    /// Some level's aggregate falls outside its band by more than 3 SE.
    pub violation: bool,
}

/// Finite-sample coverage band for `method` at calibration size `n`.
pub fn coverage_band(method: Method, level: f64, n: usize) -> Option<(f64, f64)> {
    let slack = match method {
        Method::Raw => return None,
        Method::SplitCp => 1.0,
        Method::Cqr => 2.0,
    };
    Some((level, level + slack / (n as f64 + 1.0)))
}

/// Aggregate `mean` lies outside `band` by more than three standard errors.
pub fn outside_band(mean: f64, se: f64, band: Option<(f64, f64)>) -> bool {
    band.is_some_and(|(lo, hi)| mean < lo - 3.0 * se || mean > hi + 3.0 * se)
}

/// One trial: fresh calibration and test draws, then evaluation.
pub fn run_trial(
    synth: &Synth,
    scheme: &LevelScheme,
    method: Method,
    trial: usize,
    n_calibration: usize,
    n_test: usize,
) -> Result<MetricReport> {
    let seed = synth.config().noise_seed;
    let draw = |split: SplitTag, i: usize| -> Result<(Prediction, crate::grid::GridField)> {
        let mut rng = record_rng(seed, stream_id(trial as u32, split, i as u32));
        let (y, x) = synth.generate_pair(&mut rng);
        let pred = if method.uses_quantiles() {
            Prediction::Quantiles(synth.ensemble_quantiles(&y, scheme, &mut rng)?)
        } else {
            Prediction::Point(synth.deterministic(&y)?)
        };
        Ok((pred, x))
    };
    let template = synth.template();
    let offsets: Option<ConformalOffsets> = match method {
        Method::Raw => None,
        Method::SplitCp => {
            let mut cal = SplitCalibrator::new(scheme, &template);
            for i in 0..n_calibration {
                if let (Prediction::Point(f), x) = draw(SplitTag::Calibration, i)? {
                    cal.push(&f, &x)?;
                }
            }
            Some(cal.finish()?)
        }
        Method::Cqr => {
            let mut cal = CqrCalibrator::new(scheme, &template)?;
            for i in 0..n_calibration {
                if let (Prediction::Quantiles(q), x) = draw(SplitTag::Calibration, i)? {
                    cal.push(&q, &x)?;
                }
            }
            Some(cal.finish()?)
        }
    };
    let mut acc = MetricAccumulator::new(scheme, &template);
    for i in 0..n_test {
        let (pred, x) = draw(SplitTag::Test, i)?;
        let iv = build_intervals(method, &pred, offsets.as_ref(), scheme)?;
        let q = match &pred {
            Prediction::Quantiles(q) => Some(q),
            Prediction::Point(_) => None,
        };
        acc.push(&iv, q, &x)?;
    }
    acc.finish()
}

/// Runs the study without touching the filesystem.
pub fn coverage_study(cfg: &PipelineConfig) -> Result<CoverageStudy> {
    let synth = Synth::new(cfg.synth_config()?.clone())?;
    let pool = pool(cfg.jobs)?;
    let mut per_trial = Vec::with_capacity(cfg.trial_count * cfg.levels.coverage_levels().len());
    let mut valid_points = 0;
    ordered(
        &pool,
        cfg.trial_count,
        |t| run_trial(&synth, &cfg.levels, cfg.method, t, cfg.n_calibration, cfg.n_test),
        |t, report| {
            valid_points = report.valid_points;
            per_trial.extend(report.coverage.iter().map(|c| TrialCoverage {
                trial: t,
                level: c.level,
                coverage: c.mean_picp,
                below: c.mean_below,
                above: c.mean_above,
            }));
            Ok(())
        },
    )?;

    let draws = (cfg.trial_count * cfg.n_test) as f64;
    let levels: Vec<LevelCoverage> = cfg
        .levels
        .coverage_levels()
        .iter()
        .map(|&level| {
            let rows: Vec<&TrialCoverage> = per_trial
                .iter()
                .filter(|r| (r.level - level).abs() <= crate::grid::LEVEL_TOL)
                .collect();
            let avg = |f: fn(&TrialCoverage) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            let mean = avg(|r| r.coverage);
            let se = (mean * (1.0 - mean) / draws).sqrt();
            let band = coverage_band(cfg.method, level, cfg.n_calibration);
            let violation = outside_band(mean, se, band);
            LevelCoverage {
                level,
                mean,
                se,
                band_lower: band.map(|b| b.0),
                band_upper: band.map(|b| b.1),
                mean_below: avg(|r| r.below),
                mean_above: avg(|r| r.above),
                violation,
            }
        })
        .collect();
    Ok(CoverageStudy {
        method: cfg.method,
        trials: cfg.trial_count,
        n_calibration: cfg.n_calibration,
        n_test: cfg.n_test,
        valid_points,
        violation: levels.iter().any(|l| l.violation),
        levels,
        per_trial,
    })
}

/// Runs the study and writes `trials.csv`, `aggregate.csv` and
/// `summary.json` under `<out>/coverage`.
pub fn run_coverage_sim(cfg: &PipelineConfig) -> Result<CoverageStudy> {
    let study = coverage_study(cfg)?;
    let dir = cfg.output_dir.join("coverage");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "level", "coverage", "below", "above"])?;
    for r in &study.per_trial {
        w.write_record([
            r.trial.to_string(),
            r.level.to_string(),
            num(Some(r.coverage)),
            num(Some(r.below)),
            num(Some(r.above)),
        ])?;
    }
    write_text(&dir.join("trials.csv"), &csv_text(w)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["level", "mean", "se", "band_lower", "band_upper", "below", "above", "violation"])?;
    for l in &study.levels {
        w.write_record([
            l.level.to_string(),
            num(Some(l.mean)),
            num(Some(l.se)),
            num(l.band_lower),
            num(l.band_upper),
            num(Some(l.mean_below)),
            num(Some(l.mean_above)),
            l.violation.to_string(),
        ])?;
    }
    write_text(&dir.join("aggregate.csv"), &csv_text(w)?)?;

    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "config": cfg.provenance_echo(), "study": &study }),
    )?;
    Ok(study)
}

fn csv_text(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
