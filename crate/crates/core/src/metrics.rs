//! Calibration and sharpness metrics: PICP, interval score, quantile score
//! and interval width, per grid point and averaged over the map.
//!
//! Grid-wise values average over test records first; map-level summaries
//! then average the grid-wise values over valid points. Both sums run in a
//! fixed order, so reports are reproducible bit for bit.
//!
//! Quantile scores are computed for the bounds actually issued: level
//! `α/2` scores the lower bound of the `1 - α` interval and `1 - α/2` its
//! upper bound. Levels that are not a tail of any coverage level fall back
//! to the raw quantile set when one is supplied.

use serde::{Deserialize, Serialize};

use crate::conformal::{IntervalGridSet, Provenance};
use crate::error::{Error, Result};
use crate::grid::{position_of, tail_pair, GridField, LevelScheme};
use crate::quantiles::QuantileGridSet;

/// Winkler interval score of `[lower, upper]` for observation `x` at miscoverage `alpha`.
pub fn interval_score(lower: f64, upper: f64, x: f64, alpha: f64) -> Result<f64> {
    if lower > upper {
        return Err(Error::InvalidInterval { lower, upper });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidLevel(alpha));
    }
    let width = upper - lower;
    Ok(if x < lower {
        width + 2.0 / alpha * (lower - x)
    } else if x > upper {
        width + 2.0 / alpha * (x - upper)
    } else {
        width
    })
}

/// Pinball loss of quantile forecast `q` at level `gamma` for observation `x`.
pub fn quantile_score(q: f64, x: f64, gamma: f64) -> f64 {
    if x > q {
        (x - q) * gamma
    } else {
        (q - x) * (1.0 - gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicpResult {
    /// Fraction of records covered per point; `NaN` at invalid points.
    pub grid: Vec<f64>,
    pub mean: f64,
}

/// Per-point fraction of records with `L ≤ X ≤ U`, and its map average.
///
/// Unbounded intervals count as covered.
pub fn picp(intervals: &[IntervalGridSet], truths: &[GridField], coverage: f64) -> Result<PicpResult> {
    if intervals.is_empty() {
        return Err(Error::NoRecords);
    }
    if intervals.len() != truths.len() {
        return Err(Error::Misaligned(format!(
            "{} interval sets for {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    let n = truths[0].len();
    let mut covered = vec![0u32; n];
    for (iv, x) in intervals.iter().zip(truths) {
        iv.check_layout(x)?;
        let l = iv.level(coverage)?;
        for p in x.valid_indices() {
            let v = x.values()[p];
            covered[p] += u32::from(l.lower[p] <= v && v <= l.upper[p]);
        }
    }
    let records = intervals.len() as f64;
    let template = &truths[0];
    let grid: Vec<f64> = (0..n)
        .map(|p| {
            if template.is_valid(p) {
                f64::from(covered[p]) / records
            } else {
                f64::NAN
            }
        })
        .collect();
    let mean = mean_defined(template, &grid).unwrap_or(f64::NAN);
    Ok(PicpResult { grid, mean })
}

/// Map average over valid points holding a finite value.
fn mean_defined(template: &GridField, grid: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in template.valid_indices() {
        if grid[p].is_finite() {
            sum += grid[p];
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    pub level: f64,
    pub mean_picp: f64,
    /// `100·(PICP - (1-α))/(1-α)`.
    pub pct_deviation: f64,
    /// `None` when every interval was unbounded.
    pub mean_is: Option<f64>,
    pub mean_iw: Option<f64>,
    /// Map-averaged fraction of records with truth below the lower bound.
    pub mean_below: f64,
    /// Map-averaged fraction of records with truth above the upper bound.
    pub mean_above: f64,
    /// Unbounded (point, record) cases left out of IS and IW.
    pub excluded_unbounded: usize,
    pub crossings: usize,
    #[serde(skip)]
    pub picp_grid: Vec<f64>,
    #[serde(skip)]
    pub is_grid: Vec<f64>,
    #[serde(skip)]
    pub iw_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMetrics {
    pub level: f64,
    pub mean_qs: Option<f64>,
    #[serde(skip)]
    pub qs_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Provenance,
    pub records: usize,
    pub valid_points: usize,
    pub height: usize,
    pub width: usize,
    pub coverage: Vec<CoverageMetrics>,
    pub quantile: Vec<QuantileMetrics>,
}

impl MetricReport {
    pub fn coverage_level(&self, level: f64) -> Option<&CoverageMetrics> {
        self.coverage
            .iter()
            .find(|c| (c.level - level).abs() <= crate::grid::LEVEL_TOL)
    }

    pub fn quantile_level(&self, level: f64) -> Option<&QuantileMetrics> {
        self.quantile
            .iter()
            .find(|c| (c.level - level).abs() <= crate::grid::LEVEL_TOL)
    }
}

#[derive(Debug, Clone)]
struct LevelTally {
    covered: Vec<u32>,
    below: Vec<u32>,
    above: Vec<u32>,
    bounded: Vec<u32>,
    is_sum: Vec<f64>,
    iw_sum: Vec<f64>,
    excluded: usize,
    crossings: usize,
}

/// Where the level-`γ` quantile forecast comes from.
#[derive(Debug, Clone, Copy)]
enum QuantileSource {
    Lower(usize),
    Upper(usize),
    Raw,
}

#[derive(Debug, Clone)]
struct QuantileTally {
    level: f64,
    source: QuantileSource,
    sum: Vec<f64>,
    count: Vec<u32>,
}

/// Streaming evaluation over test records.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    coverage: Vec<f64>,
    template: GridField,
    method: Option<Provenance>,
    records: usize,
    levels: Vec<LevelTally>,
    quantiles: Vec<QuantileTally>,
}

impl MetricAccumulator {
    /// `template` fixes the layout every record must share.
    pub fn new(scheme: &LevelScheme, template: &GridField) -> Self {
        let n = template.len();
        let coverage = scheme.coverage_levels().to_vec();
        let quantiles = scheme
            .quantile_levels()
            .iter()
            .map(|&g| {
                let source = coverage
                    .iter()
                    .enumerate()
                    .find_map(|(i, &c)| {
                        let (lo, hi) = tail_pair(c);
                        if position_of(&[lo], g).is_some() {
                            Some(QuantileSource::Lower(i))
                        } else if position_of(&[hi], g).is_some() {
                            Some(QuantileSource::Upper(i))
                        } else {
                            None
                        }
                    })
                    .unwrap_or(QuantileSource::Raw);
                QuantileTally {
                    level: g,
                    source,
                    sum: vec![0.0; n],
                    count: vec![0; n],
                }
            })
            .collect();
        let tally = LevelTally {
            covered: vec![0; n],
            below: vec![0; n],
            above: vec![0; n],
            bounded: vec![0; n],
            is_sum: vec![0.0; n],
            iw_sum: vec![0.0; n],
            excluded: 0,
            crossings: 0,
        };
        Self {
            levels: vec![tally; coverage.len()],
            coverage,
            template: template.clone(),
            method: None,
            records: 0,
            quantiles,
        }
    }

    pub fn push(
        &mut self,
        intervals: &IntervalGridSet,
        quantiles: Option<&QuantileGridSet>,
        truth: &GridField,
    ) -> Result<()> {
        self.template.check_layout(truth)?;
        intervals.check_layout(truth)?;
        if let Some(q) = quantiles {
            q.check_layout(truth)?;
        }
        match self.method {
            None => self.method = Some(intervals.provenance()),
            Some(m) if m != intervals.provenance() => {
                return Err(Error::Misaligned(format!(
                    "mixing {} and {} intervals",
                    m.as_str(),
                    intervals.provenance().as_str()
                )))
            }
            Some(_) => {}
        }
        let selected = self
            .coverage
            .iter()
            .map(|&c| intervals.level(c))
            .collect::<Result<Vec<_>>>()?;
        let x = truth.values();
        let valid: Vec<usize> = truth.valid_indices().collect();

        for ((tally, iv), &c) in self.levels.iter_mut().zip(&selected).zip(&self.coverage) {
            let alpha = 1.0 - c;
            tally.crossings += iv.crossings;
            for &p in &valid {
                let (l, u, v) = (iv.lower[p], iv.upper[p], x[p]);
                tally.below[p] += u32::from(v < l);
                tally.above[p] += u32::from(v > u);
                tally.covered[p] += u32::from(l <= v && v <= u);
                if iv.is_unbounded(p) {
                    tally.excluded += 1;
                } else {
                    tally.bounded[p] += 1;
                    tally.is_sum[p] += interval_score(l, u, v, alpha)?;
                    tally.iw_sum[p] += u - l;
                }
            }
        }

        for qt in &mut self.quantiles {
            let forecast: &[f64] = match qt.source {
                QuantileSource::Lower(i) => &selected[i].lower,
                QuantileSource::Upper(i) => &selected[i].upper,
                QuantileSource::Raw => match quantiles {
                    Some(q) => q.grid(qt.level)?,
                    None => continue,
                },
            };
            for &p in &valid {
                if forecast[p].is_finite() {
                    qt.sum[p] += quantile_score(forecast[p], x[p], qt.level);
                    qt.count[p] += 1;
                }
            }
        }
        self.records += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<MetricReport> {
        if self.records == 0 {
            return Err(Error::NoRecords);
        }
        let t = &self.template;
        let n = t.len();
        let records = self.records as f64;
        let per_point = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..n).map(|p| if t.is_valid(p) { f(p) } else { f64::NAN }).collect()
        };
        let ratio = |num: f64, den: u32| if den == 0 { f64::NAN } else { num / f64::from(den) };

        let coverage = self
            .coverage
            .iter()
            .zip(&self.levels)
            .map(|(&c, tally)| {
                let picp_grid = per_point(&|p| f64::from(tally.covered[p]) / records);
                let below = per_point(&|p| f64::from(tally.below[p]) / records);
                let above = per_point(&|p| f64::from(tally.above[p]) / records);
                let is_grid = per_point(&|p| ratio(tally.is_sum[p], tally.bounded[p]));
                let iw_grid = per_point(&|p| ratio(tally.iw_sum[p], tally.bounded[p]));
                let mean_picp = mean_defined(t, &picp_grid).unwrap_or(f64::NAN);
                CoverageMetrics {
                    level: c,
                    mean_picp,
                    pct_deviation: 100.0 * (mean_picp - c) / c,
                    mean_is: mean_defined(t, &is_grid),
                    mean_iw: mean_defined(t, &iw_grid),
                    mean_below: mean_defined(t, &below).unwrap_or(f64::NAN),
                    mean_above: mean_defined(t, &above).unwrap_or(f64::NAN),
                    excluded_unbounded: tally.excluded,
                    crossings: tally.crossings,
                    picp_grid,
                    is_grid,
                    iw_grid,
                }
            })
            .collect();

        let quantile = self
            .quantiles
            .iter()
            .filter(|q| q.count.iter().any(|&c| c > 0) || !matches!(q.source, QuantileSource::Raw))
            .map(|q| {
                let qs_grid = per_point(&|p| ratio(q.sum[p], q.count[p]));
                QuantileMetrics {
                    level: q.level,
                    mean_qs: mean_defined(t, &qs_grid),
                    qs_grid,
                }
            })
            .collect();

        Ok(MetricReport {
            method: self.method.expect("set on first push"),
            records: self.records,
            valid_points: t.valid_count(),
            height: t.height(),
            width: t.width(),
            coverage,
            quantile,
        })
    }
}

/// Full report over aligned test records.
pub fn evaluate(
    intervals: &[IntervalGridSet],
    quantiles: Option<&[QuantileGridSet]>,
    truths: &[GridField],
    scheme: &LevelScheme,
) -> Result<MetricReport> {
    if intervals.is_empty() {
        return Err(Error::NoRecords);
    }
    if intervals.len() != truths.len() || quantiles.is_some_and(|q| q.len() != truths.len()) {
        return Err(Error::Misaligned("test records are not aligned".into()));
    }
    let mut acc = MetricAccumulator::new(scheme, &truths[0]);
    for (i, (iv, x)) in intervals.iter().zip(truths).enumerate() {
        acc.push(iv, quantiles.map(|q| &q[i]), x)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::raw_intervals;
    use crate::grid::default_levels;
    use crate::quantiles::QuantileGridSet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn point(v: f64) -> GridField {
        GridField::filled(1, 1, v).unwrap()
    }

    fn interval(lower: f64, upper: f64) -> IntervalGridSet {
        let s = LevelScheme::new(vec![0.5], vec![0.25, 0.75]).unwrap();
        let q = QuantileGridSet::from_fields(vec![0.25, 0.75], vec![point(lower), point(upper)]).unwrap();
        raw_intervals(&q, &s).unwrap()
    }

    #[test]
    fn interval_score_examples() {
        assert_eq!(interval_score(0.0, 1.0, 0.5, 0.1).unwrap(), 1.0);
        assert!((interval_score(0.0, 1.0, 1.2, 0.1).unwrap() - 5.0).abs() < 1e-12);
        assert!((interval_score(0.0, 1.0, -0.2, 0.1).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(interval_score(0.0, 0.0, 0.0, 0.5).unwrap(), 0.0);
        assert!(matches!(interval_score(1.0, 0.0, 0.5, 0.1), Err(Error::InvalidInterval { .. })));
    }

    #[test]
    fn quantile_score_examples() {
        assert!((quantile_score(0.0, 1.0, 0.9) - 0.9).abs() < 1e-15);
        assert!((quantile_score(1.0, 0.0, 0.9) - 0.1).abs() < 1e-15);
        assert_eq!(quantile_score(2.5, 2.5, 0.3), 0.0);
    }

    #[test]
    fn picp_counts() {
        let ivs = vec![interval(0.0, 1.0), interval(0.0, 1.0), interval(0.0, 1.0)];
        let truths = vec![point(0.5), point(2.0), point(1.0)];
        let r = picp(&ivs, &truths, 0.5).unwrap();
        assert!((r.mean - 2.0 / 3.0).abs() < 1e-15);
        let inside = vec![point(0.2), point(0.3), point(0.0)];
        assert_eq!(picp(&ivs, &inside, 0.5).unwrap().mean, 1.0);
        assert!(matches!(picp(&[], &[], 0.5), Err(Error::NoRecords)));
    }

    #[test]
    fn unbounded_counts_as_covered_and_is_excluded() {
        let iv = interval(f64::NEG_INFINITY, f64::INFINITY);
        let s = LevelScheme::new(vec![0.5], vec![0.25, 0.75]).unwrap();
        let r = evaluate(std::slice::from_ref(&iv), None, &[point(1e9)], &s).unwrap();
        let c = &r.coverage[0];
        assert_eq!(c.mean_picp, 1.0);
        assert_eq!(c.mean_is, None);
        assert_eq!(c.mean_iw, None);
        assert_eq!(c.excluded_unbounded, 1);
        assert_eq!(picp(&[iv], &[point(-3.0)], 0.5).unwrap().mean, 1.0);
    }

    #[test]
    fn constant_data_zero_width() {
        let s = default_levels();
        let levels = s.quantile_levels().to_vec();
        let q = QuantileGridSet::from_fields(levels.clone(), levels.iter().map(|_| point(4.0)).collect()).unwrap();
        let iv = raw_intervals(&q, &s).unwrap();
        let r = evaluate(&[iv.clone(), iv], None, &[point(4.0), point(4.0)], &s).unwrap();
        for c in &r.coverage {
            assert_eq!(c.mean_picp, 1.0);
            assert_eq!(c.mean_is, Some(0.0));
            assert_eq!(c.mean_iw, Some(0.0));
        }
        assert_eq!(r.quantile.len(), 10);
        assert!(r.quantile.iter().all(|q| q.mean_qs == Some(0.0)));
    }

    #[test]
    fn pct_deviation_and_tails() {
        let ivs = vec![interval(0.0, 1.0); 4];
        let truths = vec![point(-1.0), point(0.5), point(0.5), point(2.0)];
        let s = LevelScheme::new(vec![0.5], vec![0.25, 0.75]).unwrap();
        let r = evaluate(&ivs, None, &truths, &s).unwrap();
        let c = &r.coverage[0];
        assert_eq!(c.mean_picp, 0.5);
        assert_eq!(c.pct_deviation, 0.0);
        assert_eq!((c.mean_below, c.mean_above), (0.25, 0.25));
        // IS: width 1 each, plus 2/0.5 * 1 for the two misses
        assert_eq!(c.mean_is, Some(3.0));
        assert!(c.mean_is.unwrap() >= c.mean_iw.unwrap());
    }

    #[test]
    fn masked_points_are_undefined() {
        let mask = vec![true, false];
        let f = |v: f64| GridField::filled(1, 2, v).unwrap().with_mask(mask.clone()).unwrap();
        let s = LevelScheme::new(vec![0.5], vec![0.25, 0.75]).unwrap();
        let q = QuantileGridSet::from_fields(vec![0.25, 0.75], vec![f(0.0), f(1.0)]).unwrap();
        let iv = raw_intervals(&q, &s).unwrap();
        let r = evaluate(&[iv], Some(&[q]), &[f(0.5)], &s).unwrap();
        let c = &r.coverage[0];
        assert!(c.picp_grid[0].is_finite() && c.picp_grid[1].is_nan());
        assert!(c.iw_grid[1].is_nan() && r.quantile[0].qs_grid[1].is_nan());
        assert_eq!(r.valid_points, 1);
    }

    #[test]
    fn raw_fallback_for_non_tail_levels() {
        let s = LevelScheme::new(vec![0.5], vec![0.25, 0.5, 0.75]).unwrap();
        let q = QuantileGridSet::from_fields(vec![0.25, 0.5, 0.75], vec![point(0.0), point(0.4), point(1.0)]).unwrap();
        let iv = raw_intervals(&q, &s).unwrap();
        let with = evaluate(std::slice::from_ref(&iv), Some(&[q]), &[point(0.5)], &s).unwrap();
        assert_eq!(with.quantile.len(), 3);
        let median = with.quantile_level(0.5).unwrap().mean_qs.unwrap();
        assert!((median - 0.05).abs() < 1e-15);
        let without = evaluate(&[iv], None, &[point(0.5)], &s).unwrap();
        assert_eq!(without.quantile.len(), 2);
    }

    #[test]
    fn summation_order_is_stable() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = default_levels();
        let truths: Vec<_> = (0..50).map(|_| point(rng.random::<f64>())).collect();
        let levels = s.quantile_levels().to_vec();
        let ivs: Vec<_> = (0..50)
            .map(|_| {
                let mut v: Vec<f64> = levels.iter().map(|_| rng.random::<f64>()).collect();
                v.sort_by(f64::total_cmp);
                let q = QuantileGridSet::from_fields(levels.clone(), v.into_iter().map(point).collect()).unwrap();
                raw_intervals(&q, &s).unwrap()
            })
            .collect();
        let a = evaluate(&ivs, None, &truths, &s).unwrap();
        let b = evaluate(&ivs, None, &truths, &s).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn pinball_propriety_on_gaussian_samples() {
        use rand_distr::{Distribution, StandardNormal};
        use statrs::distribution::{ContinuousCDF, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let std = Normal::standard();
        for gamma in [0.05, 0.25, 0.5, 0.9] {
            let q = std.inverse_cdf(gamma);
            let mean = |shift: f64| xs.iter().map(|&x| quantile_score(q + shift, x, gamma)).sum::<f64>() / xs.len() as f64;
            let best = mean(0.0);
            for shift in [-0.5, -0.2, -0.1, 0.1, 0.2, 0.5] {
                assert!(best <= mean(shift) + 1e-3, "gamma {gamma} shift {shift}");
            }
        }
    }

    proptest! {
        #[test]
        fn winkler_pinball_identity(a in -1e3f64..1e3, b in -1e3f64..1e3, x in -2e3f64..2e3, alpha in 0.001f64..0.999) {
            let (l, u) = if a <= b { (a, b) } else { (b, a) };
            let is = interval_score(l, u, x, alpha).unwrap();
            let qs = 2.0 / alpha * (quantile_score(l, x, alpha / 2.0) + quantile_score(u, x, 1.0 - alpha / 2.0));
            prop_assert!((is - qs).abs() <= 1e-12 * is.abs().max(qs.abs()).max(1e-300), "{is} vs {qs}");
        }

        #[test]
        fn is_dominates_width(a in -10.0f64..10.0, b in -10.0f64..10.0, x in -20.0f64..20.0, alpha in 0.01f64..0.99) {
            let (l, u) = if a <= b { (a, b) } else { (b, a) };
            let is = interval_score(l, u, x, alpha).unwrap();
            prop_assert!(is >= u - l);
            prop_assert_eq!(is == u - l, l <= x && x <= u);
        }
    }
}
