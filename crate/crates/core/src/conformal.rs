//! Split conformal calibration and grid-wise asymmetric CQR.
//!
//! Both procedures collect one conformity score per calibration record at
//! every valid grid point and take the order statistic of rank
//! `k = ⌈(n+1)·β⌉`:
//!
//! * split CP scores absolute residuals `|X - f(Y)|` at `β = 1 - α` and
//!   widens the point forecast symmetrically by `s_(k)`;
//! * CQR scores each tail separately, `q_{α/2}(Y) - X` for the lower side
//!   and `X - q_{1-α/2}(Y)` for the upper side, each at `β = 1 - α/2`, and
//!   moves each quantile bound by its own correction.
//!
//! When `k > n` no finite correction exists and the interval is reported
//! as the whole real line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cgf;
use crate::error::{Error, Result};
use crate::grid::{GridField, LevelScheme, SharedMask, LEVEL_TOL};
use crate::quantiles::QuantileGridSet;

/// `⌈(n+1)·β⌉`. Values above `n` mean no finite correction attains `β`.
pub fn conformal_rank(n: usize, beta: f64) -> usize {
    let k = ((n + 1) as f64 * beta - LEVEL_TOL).ceil();
    k.max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSide {
    Symmetric,
    Lower,
    Upper,
}

/// Where an interval set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RawQuantile,
    SplitCp,
    Cqr,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::RawQuantile => "raw-quantile",
            Provenance::SplitCp => "split-cp",
            Provenance::Cqr => "cqr",
        }
    }
}

/// Per-grid-point calibration scores for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformityScoreGrid {
    side: ScoreSide,
    height: usize,
    width: usize,
    mask: Option<SharedMask>,
    scores: Vec<Vec<f64>>,
    count: usize,
    sorted: bool,
}

impl ConformityScoreGrid {
    pub fn new(side: ScoreSide, template: &GridField) -> Self {
        Self {
            side,
            height: template.height(),
            width: template.width(),
            mask: template.shared_mask(),
            scores: vec![Vec::new(); template.len()],
            count: 0,
            sorted: true,
        }
    }

    pub fn side(&self) -> ScoreSide {
        self.side
    }

    /// Number of calibration records pushed so far.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn is_valid(&self, p: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[p])
    }

    /// Appends one record's scores; `score(p)` is called for valid points only.
    pub fn push_with(&mut self, mut score: impl FnMut(usize) -> f64) {
        for p in 0..self.scores.len() {
            if self.is_valid(p) {
                self.scores[p].push(score(p));
            }
        }
        self.count += 1;
        self.sorted = false;
    }

    fn ensure_sorted(&mut self) {
        if !self.sorted {
            for s in &mut self.scores {
                s.sort_unstable_by(f64::total_cmp);
            }
            self.sorted = true;
        }
    }

    /// Sorted scores at point `p` (empty at invalid points).
    pub fn scores_at(&mut self, p: usize) -> &[f64] {
        self.ensure_sorted();
        &self.scores[p]
    }

    /// The `k`-th smallest score at each valid point; `+∞` if `k` exceeds the
    /// record count, `NaN` at invalid points.
    pub fn order_statistic(&mut self, k: usize) -> Vec<f64> {
        self.ensure_sorted();
        let n = self.count;
        (0..self.scores.len())
            .map(|p| {
                if !self.is_valid(p) {
                    f64::NAN
                } else if k == 0 || k > n {
                    f64::INFINITY
                } else {
                    self.scores[p][k - 1]
                }
            })
            .collect()
    }
}

/// Calibrated corrections for one coverage level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOffsets {
    pub coverage: f64,
    /// Order-statistic rank used on both sides.
    pub rank: usize,
    /// `rank > n`: offsets are `+∞` and intervals cover the real line.
    pub unbounded: bool,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalOffsets {
    method: Provenance,
    height: usize,
    width: usize,
    mask: Option<SharedMask>,
    calibration_size: usize,
    levels: Vec<LevelOffsets>,
}

#[derive(Serialize, Deserialize)]
struct OffsetsManifest {
    method: Provenance,
    calibration_size: usize,
    levels: BTreeMap<String, LevelEntry>,
}

#[derive(Serialize, Deserialize)]
struct LevelEntry {
    lower: String,
    upper: String,
    unbounded_flag: bool,
    rank: usize,
}

impl ConformalOffsets {
    pub fn method(&self) -> Provenance {
        self.method
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn calibration_size(&self) -> usize {
        self.calibration_size
    }

    pub fn levels(&self) -> &[LevelOffsets] {
        &self.levels
    }

    pub fn level(&self, coverage: f64) -> Result<&LevelOffsets> {
        self.levels
            .iter()
            .find(|l| (l.coverage - coverage).abs() <= LEVEL_TOL)
            .ok_or_else(|| Error::Misaligned(format!("offsets lack coverage level {coverage}")))
    }

    fn field(&self, values: &[f64]) -> GridField {
        GridField::new(self.height, self.width, values.to_vec())
            .and_then(|g| g.with_optional_mask(self.mask.clone()))
            .expect("layout fixed at calibration")
    }

    fn check_layout(&self, dims: (usize, usize), mask: Option<&[bool]>) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: dims,
            });
        }
        if self.mask() != mask {
            return Err(Error::MaskMismatch("offsets and inputs carry different masks".into()));
        }
        Ok(())
    }

    /// One CGF1 grid per (level, side) plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut levels = BTreeMap::new();
        for l in &self.levels {
            let lower = format!("lower_{}.cgf", l.coverage);
            let upper = format!("upper_{}.cgf", l.coverage);
            cgf::save(&dir.join(&lower), &self.field(&l.lower))?;
            cgf::save(&dir.join(&upper), &self.field(&l.upper))?;
            levels.insert(
                l.coverage.to_string(),
                LevelEntry {
                    lower,
                    upper,
                    unbounded_flag: l.unbounded,
                    rank: l.rank,
                },
            );
        }
        let manifest = OffsetsManifest {
            method: self.method,
            calibration_size: self.calibration_size,
            levels,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: OffsetsManifest = serde_json::from_str(&text)?;
        let mut levels = Vec::new();
        let mut layout: Option<GridField> = None;
        for (key, entry) in manifest.levels {
            let coverage: f64 = key
                .parse()
                .map_err(|_| Error::Format(format!("bad level key {key:?} in {}", path.display())))?;
            let lower = cgf::load(&dir.join(&entry.lower))?;
            let upper = cgf::load(&dir.join(&entry.upper))?;
            lower.check_layout(&upper)?;
            if let Some(t) = &layout {
                t.check_layout(&lower)?;
            }
            levels.push(LevelOffsets {
                coverage,
                rank: entry.rank,
                unbounded: entry.unbounded_flag,
                lower: lower.values().to_vec(),
                upper: upper.into_values(),
            });
            layout.get_or_insert(lower);
        }
        let layout = layout.ok_or_else(|| Error::Format(format!("{} lists no levels", path.display())))?;
        levels.sort_by(|a, b| a.coverage.total_cmp(&b.coverage));
        Ok(Self {
            method: manifest.method,
            height: layout.height(),
            width: layout.width(),
            mask: layout.shared_mask(),
            calibration_size: manifest.calibration_size,
            levels,
        })
    }
}

fn check_count(n: usize, what: &str, other: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::NoRecords);
    }
    if n != other {
        return Err(Error::Misaligned(format!("{n} {what} for {other} truths")));
    }
    Ok(())
}

/// Streaming split-CP calibration with absolute-residual scores.
#[derive(Debug, Clone)]
pub struct SplitCalibrator {
    coverage: Vec<f64>,
    template: GridField,
    scores: ConformityScoreGrid,
}

impl SplitCalibrator {
    /// `template` fixes the layout every pushed record must share.
    pub fn new(scheme: &LevelScheme, template: &GridField) -> Self {
        Self {
            coverage: scheme.coverage_levels().to_vec(),
            scores: ConformityScoreGrid::new(ScoreSide::Symmetric, template),
            template: template.clone(),
        }
    }

    pub fn push(&mut self, prediction: &GridField, truth: &GridField) -> Result<()> {
        self.template.check_layout(prediction)?;
        self.template.check_layout(truth)?;
        let (f, x) = (prediction.values(), truth.values());
        self.scores.push_with(|p| (x[p] - f[p]).abs());
        Ok(())
    }

    pub fn finish(mut self) -> Result<ConformalOffsets> {
        let n = self.scores.len();
        if n == 0 {
            return Err(Error::NoRecords);
        }
        let levels = self
            .coverage
            .iter()
            .map(|&c| {
                let rank = conformal_rank(n, c);
                let s = self.scores.order_statistic(rank);
                LevelOffsets {
                    coverage: c,
                    rank,
                    unbounded: rank > n,
                    lower: s.clone(),
                    upper: s,
                }
            })
            .collect();
        Ok(ConformalOffsets {
            method: Provenance::SplitCp,
            height: self.template.height(),
            width: self.template.width(),
            mask: self.template.shared_mask(),
            calibration_size: n,
            levels,
        })
    }
}

pub fn calibrate_split_cp(
    predictions: &[GridField],
    truths: &[GridField],
    scheme: &LevelScheme,
) -> Result<ConformalOffsets> {
    check_count(predictions.len(), "predictions", truths.len())?;
    let mut cal = SplitCalibrator::new(scheme, &truths[0]);
    for (f, x) in predictions.iter().zip(truths) {
        cal.push(f, x)?;
    }
    cal.finish()
}

/// Streaming grid-wise CQR calibration, each tail at level `1 - α/2`.
#[derive(Debug, Clone)]
pub struct CqrCalibrator {
    coverage: Vec<f64>,
    tails: Vec<(f64, f64)>,
    template: GridField,
    lower: Vec<ConformityScoreGrid>,
    upper: Vec<ConformityScoreGrid>,
}

impl CqrCalibrator {
    pub fn new(scheme: &LevelScheme, template: &GridField) -> Result<Self> {
        let coverage = scheme.coverage_levels().to_vec();
        let tails = coverage
            .iter()
            .map(|&c| scheme.tails(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lower: vec![ConformityScoreGrid::new(ScoreSide::Lower, template); coverage.len()],
            upper: vec![ConformityScoreGrid::new(ScoreSide::Upper, template); coverage.len()],
            coverage,
            tails,
            template: template.clone(),
        })
    }

    pub fn push(&mut self, q: &QuantileGridSet, truth: &GridField) -> Result<()> {
        self.template.check_layout(truth)?;
        q.check_layout(truth)?;
        let x = truth.values();
        for (i, &(lo, hi)) in self.tails.iter().enumerate() {
            let q_lo = q.grid(lo)?;
            let q_hi = q.grid(hi)?;
            self.lower[i].push_with(|p| q_lo[p] - x[p]);
            self.upper[i].push_with(|p| x[p] - q_hi[p]);
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<ConformalOffsets> {
        let n = self.lower.first().map_or(0, ConformityScoreGrid::len);
        if n == 0 {
            return Err(Error::NoRecords);
        }
        let mut levels = Vec::with_capacity(self.coverage.len());
        for (i, &c) in self.coverage.iter().enumerate() {
            let alpha = 1.0 - c;
            let rank = conformal_rank(n, 1.0 - alpha / 2.0);
            levels.push(LevelOffsets {
                coverage: c,
                rank,
                unbounded: rank > n,
                lower: self.lower[i].order_statistic(rank),
                upper: self.upper[i].order_statistic(rank),
            });
        }
        Ok(ConformalOffsets {
            method: Provenance::Cqr,
            height: self.template.height(),
            width: self.template.width(),
            mask: self.template.shared_mask(),
            calibration_size: n,
            levels,
        })
    }
}

pub fn calibrate_cqr(
    quantile_sets: &[QuantileGridSet],
    truths: &[GridField],
    scheme: &LevelScheme,
) -> Result<ConformalOffsets> {
    check_count(quantile_sets.len(), "quantile sets", truths.len())?;
    let mut cal = CqrCalibrator::new(scheme, &truths[0])?;
    for (q, x) in quantile_sets.iter().zip(truths) {
        cal.push(q, x)?;
    }
    cal.finish()
}

/// Lower and upper bounds for one coverage level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInterval {
    pub coverage: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Points where corrected bounds crossed and were collapsed to their midpoint.
    pub crossings: usize,
}

impl LevelInterval {
    pub fn is_unbounded(&self, p: usize) -> bool {
        self.lower[p] == f64::NEG_INFINITY || self.upper[p] == f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalGridSet {
    provenance: Provenance,
    height: usize,
    width: usize,
    mask: Option<SharedMask>,
    levels: Vec<LevelInterval>,
}

#[derive(Serialize, Deserialize)]
struct IntervalManifest {
    provenance: Provenance,
    levels: BTreeMap<String, IntervalEntry>,
}

#[derive(Serialize, Deserialize)]
struct IntervalEntry {
    lower: String,
    upper: String,
    crossings: usize,
}

impl IntervalGridSet {
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn is_valid(&self, p: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[p])
    }

    pub fn levels(&self) -> &[LevelInterval] {
        &self.levels
    }

    pub fn level(&self, coverage: f64) -> Result<&LevelInterval> {
        self.levels
            .iter()
            .find(|l| (l.coverage - coverage).abs() <= LEVEL_TOL)
            .ok_or_else(|| Error::Misaligned(format!("intervals lack coverage level {coverage}")))
    }

    pub fn total_crossings(&self) -> usize {
        self.levels.iter().map(|l| l.crossings).sum()
    }

    /// Number of (point, adjacent level pair) cases where the lower-coverage
    /// interval is not contained in the next higher one.
    pub fn nesting_violations(&self) -> usize {
        let mut count = 0;
        for w in self.levels.windows(2) {
            let (inner, outer) = (&w[0], &w[1]);
            for p in (0..inner.lower.len()).filter(|&p| self.is_valid(p)) {
                if outer.lower[p] > inner.lower[p] || outer.upper[p] < inner.upper[p] {
                    count += 1;
                }
            }
        }
        count
    }

    pub(crate) fn check_layout(&self, g: &GridField) -> Result<()> {
        if self.dims() != g.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: g.dims(),
            });
        }
        if self.mask() != g.mask() {
            return Err(Error::MaskMismatch("intervals and grid carry different masks".into()));
        }
        Ok(())
    }

    fn field(&self, values: &[f64]) -> GridField {
        GridField::new(self.height, self.width, values.to_vec())
            .and_then(|g| g.with_optional_mask(self.mask.clone()))
            .expect("layout fixed at construction")
    }

    /// One CGF1 grid per (level, bound) plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut levels = BTreeMap::new();
        for l in &self.levels {
            let lower = format!("lower_{}.cgf", l.coverage);
            let upper = format!("upper_{}.cgf", l.coverage);
            cgf::save(&dir.join(&lower), &self.field(&l.lower))?;
            cgf::save(&dir.join(&upper), &self.field(&l.upper))?;
            levels.insert(
                l.coverage.to_string(),
                IntervalEntry {
                    lower,
                    upper,
                    crossings: l.crossings,
                },
            );
        }
        let manifest = IntervalManifest {
            provenance: self.provenance,
            levels,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: IntervalManifest = serde_json::from_str(&text)?;
        let mut levels = Vec::new();
        let mut layout: Option<GridField> = None;
        for (key, entry) in manifest.levels {
            let coverage: f64 = key
                .parse()
                .map_err(|_| Error::Format(format!("bad level key {key:?} in {}", path.display())))?;
            let lower = cgf::load(&dir.join(&entry.lower))?;
            let upper = cgf::load(&dir.join(&entry.upper))?;
            lower.check_layout(&upper)?;
            if let Some(t) = &layout {
                t.check_layout(&lower)?;
            }
            levels.push(LevelInterval {
                coverage,
                lower: lower.values().to_vec(),
                upper: upper.into_values(),
                crossings: entry.crossings,
            });
            layout.get_or_insert(lower);
        }
        let layout = layout.ok_or_else(|| Error::Format(format!("{} lists no levels", path.display())))?;
        levels.sort_by(|a, b| a.coverage.total_cmp(&b.coverage));
        Ok(Self {
            provenance: manifest.provenance,
            height: layout.height(),
            width: layout.width(),
            mask: layout.shared_mask(),
            levels,
        })
    }
}

fn level_interval(
    coverage: f64,
    valid: impl Fn(usize) -> bool,
    n: usize,
    bounds: impl Fn(usize) -> (f64, f64),
) -> LevelInterval {
    let mut lower = vec![f64::NAN; n];
    let mut upper = vec![f64::NAN; n];
    let mut crossings = 0;
    for p in (0..n).filter(|&p| valid(p)) {
        let (mut l, mut u) = bounds(p);
        if l > u {
            let mid = 0.5 * (l + u);
            l = mid;
            u = mid;
            crossings += 1;
        }
        lower[p] = l;
        upper[p] = u;
    }
    LevelInterval {
        coverage,
        lower,
        upper,
        crossings,
    }
}

/// `[q_{α/2} - l, q_{1-α/2} + u]` at every valid point and coverage level.
///
/// Bounds that cross after a negative correction collapse to their midpoint
/// and are counted in [`LevelInterval::crossings`].
pub fn apply_offsets(
    q: &QuantileGridSet,
    off: &ConformalOffsets,
    scheme: &LevelScheme,
) -> Result<IntervalGridSet> {
    if off.method() != Provenance::Cqr {
        return Err(Error::Misaligned(format!(
            "{} offsets apply to point predictions, not quantile sets",
            off.method().as_str()
        )));
    }
    off.check_layout(q.dims(), q.mask())?;
    let (height, width) = q.dims();
    let levels = scheme
        .coverage_levels()
        .iter()
        .map(|&c| {
            let (lo, hi) = scheme.tails(c)?;
            let (q_lo, q_hi) = (q.grid(lo)?, q.grid(hi)?);
            let o = off.level(c)?;
            Ok(level_interval(c, |p| q.is_valid(p), height * width, |p| {
                (q_lo[p] - o.lower[p], q_hi[p] + o.upper[p])
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalGridSet {
        provenance: Provenance::Cqr,
        height,
        width,
        mask: q.shared_mask(),
        levels,
    })
}

/// `f(Y) ± s_(k)` from split-CP offsets.
pub fn apply_split(
    prediction: &GridField,
    off: &ConformalOffsets,
    scheme: &LevelScheme,
) -> Result<IntervalGridSet> {
    if off.method() != Provenance::SplitCp {
        return Err(Error::Misaligned(format!(
            "{} offsets apply to quantile sets, not point predictions",
            off.method().as_str()
        )));
    }
    off.check_layout(prediction.dims(), prediction.mask())?;
    let f = prediction.values();
    let levels = scheme
        .coverage_levels()
        .iter()
        .map(|&c| {
            let o = off.level(c)?;
            Ok(level_interval(c, |p| prediction.is_valid(p), f.len(), |p| {
                (f[p] - o.lower[p], f[p] + o.upper[p])
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalGridSet {
        provenance: Provenance::SplitCp,
        height: prediction.height(),
        width: prediction.width(),
        mask: prediction.shared_mask(),
        levels,
    })
}

/// Uncalibrated `[q_{α/2}, q_{1-α/2}]` intervals.
pub fn raw_intervals(q: &QuantileGridSet, scheme: &LevelScheme) -> Result<IntervalGridSet> {
    let (height, width) = q.dims();
    let levels = scheme
        .coverage_levels()
        .iter()
        .map(|&c| {
            let (lo, hi) = scheme.tails(c)?;
            let (q_lo, q_hi) = (q.grid(lo)?, q.grid(hi)?);
            Ok(level_interval(c, |p| q.is_valid(p), height * width, |p| (q_lo[p], q_hi[p])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalGridSet {
        provenance: Provenance::RawQuantile,
        height,
        width,
        mask: q.shared_mask(),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::EnsembleBatch;
    use crate::quantiles::ensemble_to_quantiles;
    use proptest::prelude::*;

    fn point(v: f64) -> GridField {
        GridField::filled(1, 1, v).unwrap()
    }

    fn scheme(coverage: &[f64]) -> LevelScheme {
        LevelScheme::from_coverage(coverage.to_vec()).unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(conformal_rank(99, 0.9), 90);
        assert_eq!(conformal_rank(730, 0.95), 695);
        assert_eq!(731 * 95 / 100 + usize::from(731 * 95 % 100 != 0), 695);
        assert_eq!(conformal_rank(9, 0.95), 10);
        assert_eq!(conformal_rank(4, 0.5), 3);
        assert_eq!(conformal_rank(4, 0.75), 4);
    }

    #[test]
    fn split_cp_hand_sorted() {
        let truths: Vec<_> = [1.0, 2.0, 3.0, 4.0].map(point).into();
        let preds = vec![point(0.0); 4];
        let off = calibrate_split_cp(&preds, &truths, &scheme(&[0.5])).unwrap();
        let l = off.level(0.5).unwrap();
        assert_eq!(l.rank, 3);
        assert_eq!(l.lower, vec![3.0]);
        assert_eq!(l.upper, vec![3.0]);
        assert!(!l.unbounded);
    }

    #[test]
    fn split_cp_zero_residuals() {
        let truths = vec![point(2.5); 10];
        let off = calibrate_split_cp(&truths, &truths, &crate::grid::default_levels()).unwrap();
        for l in off.levels() {
            assert_eq!(l.lower, vec![0.0]);
            assert_eq!(l.upper, vec![0.0]);
        }
    }

    #[test]
    fn split_cp_unbounded_when_rank_exceeds_n() {
        let truths = vec![point(1.0); 9];
        let preds = vec![point(0.0); 9];
        let s = scheme(&[0.5, 0.95]);
        let off = calibrate_split_cp(&preds, &truths, &s).unwrap();
        let l = off.level(0.95).unwrap();
        assert!(l.unbounded);
        assert_eq!(l.lower[0], f64::INFINITY);
        assert!(!off.level(0.5).unwrap().unbounded);

        let iv = apply_split(&point(0.0), &off, &s).unwrap();
        let li = iv.level(0.95).unwrap();
        assert!(li.is_unbounded(0));
        assert_eq!((li.lower[0], li.upper[0]), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn split_cp_errors() {
        let s = scheme(&[0.5]);
        assert!(matches!(calibrate_split_cp(&[], &[], &s), Err(Error::NoRecords)));
        assert!(calibrate_split_cp(&[point(0.0)], &[point(0.0), point(1.0)], &s).is_err());
        let wide = GridField::filled(1, 2, 0.0).unwrap();
        assert!(calibrate_split_cp(&[point(0.0), wide], &[point(0.0), point(0.0)], &s).is_err());
    }

    /// Quantile set with `lo` at level α/2 and `hi` at 1 - α/2 for coverage 0.5.
    fn pair_set(lo: f64, hi: f64) -> QuantileGridSet {
        QuantileGridSet::from_fields(vec![0.25, 0.75], vec![point(lo), point(hi)]).unwrap()
    }

    #[test]
    fn cqr_upper_side_hand_sorted() {
        // e_up = X - q_hi = {-1, 0, 2, 5}
        let truths: Vec<_> = [-1.0, 0.0, 2.0, 5.0].map(point).into();
        let sets = vec![pair_set(-10.0, 0.0); 4];
        let off = calibrate_cqr(&sets, &truths, &scheme(&[0.5])).unwrap();
        let l = off.level(0.5).unwrap();
        assert_eq!(l.rank, 4);
        assert_eq!(l.upper, vec![5.0]);
    }

    #[test]
    fn cqr_shrinks_when_truth_is_deep_inside() {
        let delta = 0.5;
        let truths: Vec<_> = (0..20).map(|i| point((i % 3) as f64 * 0.1)).collect();
        let sets = vec![pair_set(-1.0, 1.0); 20];
        let off = calibrate_cqr(&sets, &truths, &scheme(&[0.5])).unwrap();
        let l = off.level(0.5).unwrap();
        assert!(l.lower[0] <= -delta && l.upper[0] <= -delta, "{l:?}");
    }

    #[test]
    fn cqr_missing_tail_names_level() {
        let s = scheme(&[0.9]);
        let sets = vec![pair_set(0.0, 1.0)];
        match calibrate_cqr(&sets, &[point(0.5)], &s) {
            Err(Error::MissingLevel(l)) => assert!((l - 0.05).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    fn cqr_offsets(lower: f64, upper: f64) -> ConformalOffsets {
        ConformalOffsets {
            method: Provenance::Cqr,
            height: 1,
            width: 1,
            mask: None,
            calibration_size: 10,
            levels: vec![LevelOffsets {
                coverage: 0.5,
                rank: 6,
                unbounded: false,
                lower: vec![lower],
                upper: vec![upper],
            }],
        }
    }

    #[test]
    fn apply_examples() {
        let s = scheme(&[0.5]);
        let q = pair_set(2.0, 5.0);

        let iv = apply_offsets(&q, &cqr_offsets(0.0, 0.0), &s).unwrap();
        assert_eq!(iv.provenance(), Provenance::Cqr);
        assert_eq!(iv, IntervalGridSet { provenance: Provenance::Cqr, ..raw_intervals(&q, &s).unwrap() });

        let iv = apply_offsets(&q, &cqr_offsets(1.0, 1.0), &s).unwrap();
        let l = iv.level(0.5).unwrap();
        assert_eq!((l.lower[0], l.upper[0]), (1.0, 6.0));

        let iv = apply_offsets(&q, &cqr_offsets(-3.0, -1.0), &s).unwrap();
        let l = iv.level(0.5).unwrap();
        // (5, 4) crosses and collapses to 4.5
        assert_eq!((l.lower[0], l.upper[0]), (4.5, 4.5));
        assert_eq!(l.crossings, 1);
        assert_eq!(iv.total_crossings(), 1);
    }

    #[test]
    fn apply_rejects_wrong_method_and_layout() {
        let s = scheme(&[0.5]);
        let mut split = cqr_offsets(0.0, 0.0);
        split.method = Provenance::SplitCp;
        assert!(apply_offsets(&pair_set(0.0, 1.0), &split, &s).is_err());
        assert!(apply_split(&point(0.0), &cqr_offsets(0.0, 0.0), &s).is_err());
        let mut wide = cqr_offsets(0.0, 0.0);
        wide.width = 2;
        assert!(apply_offsets(&pair_set(0.0, 1.0), &wide, &s).is_err());
    }

    #[test]
    fn raw_interval_examples() {
        let levels = crate::grid::default_levels();
        let batch = EnsembleBatch::new((0..40).map(|_| point(3.0)).collect()).unwrap();
        let q = ensemble_to_quantiles(&batch, &levels).unwrap();
        let iv = raw_intervals(&q, &levels).unwrap();
        for l in iv.levels() {
            assert_eq!(l.upper[0] - l.lower[0], 0.0);
        }

        let batch = EnsembleBatch::new((1..=40).map(|v| point(v as f64)).collect()).unwrap();
        let q = ensemble_to_quantiles(&batch, &levels).unwrap();
        let iv = raw_intervals(&q, &levels).unwrap();
        let l = iv.level(0.9).unwrap();
        assert_eq!((l.lower[0], l.upper[0]), (q.grid(0.05).unwrap()[0], q.grid(0.95).unwrap()[0]));
        assert_eq!(iv.nesting_violations(), 0);
        assert!(raw_intervals(&pair_set(0.0, 1.0), &levels).is_err());
    }

    #[test]
    fn offsets_and_intervals_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = vec![true, false];
        let mk = |v: f64| GridField::filled(1, 2, v).unwrap().with_mask(mask.clone()).unwrap();
        let truths: Vec<_> = (0..5).map(|i| mk(i as f64)).collect();
        let preds = vec![mk(0.5); 5];
        let s = scheme(&[0.5, 0.9]);
        let off = calibrate_split_cp(&preds, &truths, &s).unwrap();
        off.save_dir(&dir.path().join("off")).unwrap();
        let back = ConformalOffsets::load_dir(&dir.path().join("off")).unwrap();
        // NaN at the masked point defeats PartialEq; compare bits.
        assert_eq!(back.levels().len(), off.levels().len());
        for (a, b) in back.levels().iter().zip(off.levels()) {
            assert_eq!(a.rank, b.rank);
            assert_eq!(a.unbounded, b.unbounded);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.lower), bits(&b.lower));
        }
        let iv = apply_split(&preds[0], &off, &s).unwrap();
        iv.save_dir(&dir.path().join("iv")).unwrap();
        let back = IntervalGridSet::load_dir(&dir.path().join("iv")).unwrap();
        assert_eq!(back.provenance(), Provenance::SplitCp);
        assert_eq!(back.level(0.9).unwrap().upper[0], iv.level(0.9).unwrap().upper[0]);
    }

    proptest! {
        #[test]
        fn offsets_monotone_in_scores(scores in proptest::collection::vec(-10.0f64..10.0, 1..40), which in any::<prop::sample::Index>(), bump in 0.0f64..5.0) {
            let s = scheme(&[0.5, 0.8]);
            let preds = vec![point(0.0); scores.len()];
            let truths: Vec<_> = scores.iter().map(|&v| point(v)).collect();
            let base = calibrate_split_cp(&preds, &truths, &s).unwrap();
            let mut bumped = truths.clone();
            let i = which.index(scores.len());
            let v = scores[i];
            // Moving the truth away from the prediction increases |residual|.
            bumped[i] = point(if v >= 0.0 { v + bump } else { v - bump });
            let after = calibrate_split_cp(&preds, &bumped, &s).unwrap();
            for (a, b) in base.levels().iter().zip(after.levels()) {
                prop_assert!(b.upper[0] >= a.upper[0]);
            }
        }

        #[test]
        fn calibration_is_permutation_invariant(vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..3.0), 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            let run = |order: &[usize]| {
                let sets: Vec<_> = order.iter().map(|&i| pair_set(vals[i].1, vals[i].1 + vals[i].2)).collect();
                let truths: Vec<_> = order.iter().map(|&i| point(vals[i].0)).collect();
                let s = LevelScheme::new(vec![0.5], vec![0.25, 0.75]).unwrap();
                calibrate_cqr(&sets, &truths, &s).unwrap()
            };
            let a = run(&idx);
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = run(&idx);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn split_intervals_nest(vals in proptest::collection::vec(-5.0f64..5.0, 1..60)) {
            let s = crate::grid::default_levels();
            let truths: Vec<_> = vals.iter().map(|&v| point(v)).collect();
            let preds = vec![point(0.0); vals.len()];
            let off = calibrate_split_cp(&preds, &truths, &s).unwrap();
            let iv = apply_split(&point(0.0), &off, &s).unwrap();
            prop_assert_eq!(iv.nesting_violations(), 0);
            for l in iv.levels() {
                prop_assert!(l.lower[0] <= l.upper[0]);
            }
        }
    }
}
