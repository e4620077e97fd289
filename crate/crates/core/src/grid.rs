//! Raster containers, masks, ensembles, level schemes and paired datasets.
//!
//! Every field is a single scalar variable on an `height × width` raster,
//! stored row-major. An optional validity mask marks grid points that take
//! part in estimation and evaluation (`true` = valid). Derived per-point
//! products carry `NaN` at invalid points.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used when matching probability levels.
///
/// Levels such as `1 - 0.9` are not exactly representable, so tail levels
/// are looked up with this tolerance rather than by bitwise equality.
pub const LEVEL_TOL: f64 = 1e-9;

/// Validity mask shared between fields of one layout (`true` = valid).
pub type SharedMask = Arc<[bool]>;

/// One scalar field on a fine raster with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    mask: Option<SharedMask>,
}

impl GridField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch {
                expected: (height.max(1), width.max(1)),
                found: (height, width),
            });
        }
        if values.len() != height * width {
            return Err(Error::Misaligned(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            mask: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Attaches a validity mask (`true` = valid). Its length must match the grid.
    pub fn with_mask(mut self, mask: impl Into<SharedMask>) -> Result<Self> {
        let mask = mask.into();
        if mask.len() != self.values.len() {
            return Err(Error::MaskMismatch(format!(
                "mask has {} entries for a {}x{} grid",
                mask.len(),
                self.height,
                self.width
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    /// Replaces the mask with an existing optional mask.
    pub fn with_optional_mask(self, mask: Option<SharedMask>) -> Result<Self> {
        match mask {
            Some(m) => self.with_mask(m),
            None => Ok(Self { mask: None, ..self }),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn shared_mask(&self) -> Option<SharedMask> {
        self.mask.clone()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, index: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[index])
    }

    /// Row-major indices of valid grid points.
    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.values.len()).filter(move |&i| self.is_valid(i))
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.values.len(),
        }
    }

    /// First valid index holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.valid_indices().find(|&i| !self.values[i].is_finite())
    }

    /// Same dimensions and the same mask.
    pub fn same_layout(&self, other: &GridField) -> bool {
        self.dims() == other.dims() && self.mask == other.mask
    }

    pub(crate) fn check_layout(&self, other: &GridField) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        if self.mask != other.mask {
            return Err(Error::MaskMismatch("grids carry different masks".into()));
        }
        Ok(())
    }
}

/// A predictor field on the coarse raster.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CoarseField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Misaligned(format!(
                "{height}x{width} coarse field with {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// `M` exchangeable fields sampled for one conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBatch {
    members: Vec<GridField>,
}

impl EnsembleBatch {
    /// Builds a batch; every member must share the first member's dimensions and mask.
    pub fn new(members: Vec<GridField>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        for m in &members[1..] {
            first.check_layout(m)?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[GridField] {
        &self.members
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.members[0].dims()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.members[0].mask()
    }

    /// Layout template (dimensions and mask) shared by all members.
    pub fn template(&self) -> &GridField {
        &self.members[0]
    }
}

/// Coverage levels `1 - α` and the quantile levels `Γ` they are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct LevelScheme {
    coverage: Vec<f64>,
    quantiles: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    coverage: Vec<f64>,
    quantiles: Vec<f64>,
}

impl TryFrom<RawScheme> for LevelScheme {
    type Error = Error;

    fn try_from(raw: RawScheme) -> Result<Self> {
        LevelScheme::new(raw.coverage, raw.quantiles)
    }
}

impl From<LevelScheme> for RawScheme {
    fn from(s: LevelScheme) -> Self {
        RawScheme {
            coverage: s.coverage,
            quantiles: s.quantiles,
        }
    }
}

fn check_increasing(name: &str, levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidScheme(format!("{name} levels are empty")));
    }
    for &l in levels {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::InvalidLevel(l));
        }
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidScheme(format!(
            "{name} levels must be strictly increasing"
        )));
    }
    Ok(())
}

impl LevelScheme {
    pub fn new(coverage: Vec<f64>, quantiles: Vec<f64>) -> Result<Self> {
        check_increasing("coverage", &coverage)?;
        check_increasing("quantile", &quantiles)?;
        let scheme = Self {
            coverage,
            quantiles,
        };
        for &c in &scheme.coverage {
            let (lo, hi) = tail_pair(c);
            for t in [lo, hi] {
                if scheme.quantile_position(t).is_none() {
                    return Err(Error::InvalidScheme(format!(
                        "coverage level {c} needs quantile level {t}"
                    )));
                }
            }
        }
        Ok(scheme)
    }

    /// Scheme whose quantile levels are exactly the tail pairs of `coverage`.
    pub fn from_coverage(coverage: Vec<f64>) -> Result<Self> {
        let mut quantiles: Vec<f64> = Vec::with_capacity(coverage.len() * 2);
        for &c in &coverage {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::InvalidLevel(c));
            }
            let (lo, hi) = tail_pair(c);
            quantiles.push(round_level(lo));
            quantiles.push(round_level(hi));
        }
        quantiles.sort_by(f64::total_cmp);
        quantiles.dedup_by(|a, b| (*a - *b).abs() <= LEVEL_TOL);
        Self::new(coverage, quantiles)
    }

    pub fn coverage_levels(&self) -> &[f64] {
        &self.coverage
    }

    pub fn quantile_levels(&self) -> &[f64] {
        &self.quantiles
    }

    /// Position of `gamma` in the quantile levels, matched within [`LEVEL_TOL`].
    pub fn quantile_position(&self, gamma: f64) -> Option<usize> {
        position_of(&self.quantiles, gamma)
    }

    /// The stored levels `(α/2, 1 - α/2)` for coverage level `1 - α`.
    pub fn tails(&self, coverage: f64) -> Result<(f64, f64)> {
        let (lo, hi) = tail_pair(coverage);
        let lo_i = self.quantile_position(lo).ok_or(Error::MissingLevel(lo))?;
        let hi_i = self.quantile_position(hi).ok_or(Error::MissingLevel(hi))?;
        Ok((self.quantiles[lo_i], self.quantiles[hi_i]))
    }
}

/// `(α/2, 1 - α/2)` for coverage `1 - α`.
pub fn tail_pair(coverage: f64) -> (f64, f64) {
    let alpha = 1.0 - coverage;
    (alpha / 2.0, 1.0 - alpha / 2.0)
}

/// Rounds away representation noise so that `1 - 0.9` prints as `0.1`.
fn round_level(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

pub(crate) fn position_of(levels: &[f64], level: f64) -> Option<usize> {
    levels.iter().position(|&l| (l - level).abs() <= LEVEL_TOL)
}

/// Quantile levels `{0.05, 0.15, …, 0.95}` paired with coverage levels `{0.1, 0.3, 0.5, 0.7, 0.9}`.
pub fn default_levels() -> LevelScheme {
    LevelScheme::new(
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
        vec![0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95],
    )
    .expect("default scheme is balanced")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    TrainSurrogate,
    Calibration,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::TrainSurrogate => "train-surrogate",
            SplitTag::Calibration => "calibration",
            SplitTag::Test => "test",
        }
    }
}

/// One conditioning input with its target field and sampled ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub coarse: CoarseField,
    pub truth: GridField,
    pub ensemble: EnsembleBatch,
    /// Deterministic large-scale prediction, used as the point forecast for
    /// split conformal calibration.
    pub deterministic: Option<GridField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub records: Vec<Record>,
    pub split: SplitTag,
}

/// Lists every invariant violation in `d`, one line per problem.
///
/// The first record's truth field fixes the reference layout and the first
/// ensemble fixes the reference member count.
pub fn validate_dataset(d: &PairedDataset) -> Vec<String> {
    let mut out = Vec::new();
    let Some(first) = d.records.first() else {
        return out;
    };
    let reference = &first.truth;
    let ref_members = first.ensemble.member_count();

    for (i, rec) in d.records.iter().enumerate() {
        let mut v = |msg: String| out.push(format!("record {i}: {msg}"));
        let truth = &rec.truth;
        if truth.dims() != reference.dims() {
            v("truth dimension mismatch".into());
        } else if truth.mask() != reference.mask() {
            v("truth mask mismatch".into());
        }
        if let Some(p) = truth.first_non_finite() {
            v(format!("non-finite truth value at valid point {p}"));
        }
        let (ch, cw) = rec.coarse.dims();
        if ch > truth.height() || cw > truth.width() {
            v("coarse field larger than fine grid".into());
        }
        let ens = &rec.ensemble;
        if ens.dims() != truth.dims() {
            v("ensemble member dimension mismatch".into());
        } else if ens.mask() != truth.mask() {
            v("ensemble member mask mismatch".into());
        }
        if ens.member_count() < 2 {
            v(format!("member_count {} is below 2", ens.member_count()));
        }
        if ens.member_count() != ref_members {
            v(format!(
                "member_count {} differs from {ref_members}",
                ens.member_count()
            ));
        }
        for (m, member) in ens.members().iter().enumerate() {
            if let Some(p) = member.first_non_finite() {
                v(format!(
                    "ensemble member {m} has non-finite value at valid point {p}"
                ));
            }
        }
        if let Some(det) = &rec.deterministic {
            if !det.same_layout(truth) {
                v("deterministic prediction layout mismatch".into());
            } else if let Some(p) = det.first_non_finite() {
                v(format!(
                    "non-finite deterministic value at valid point {p}"
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, v: f64) -> GridField {
        GridField::filled(h, w, v).unwrap()
    }

    fn record(h: usize, w: usize) -> Record {
        Record {
            coarse: CoarseField::new(1, 1, vec![0.0]).unwrap(),
            truth: field(h, w, 1.0),
            ensemble: EnsembleBatch::new(vec![field(h, w, 0.0), field(h, w, 2.0)]).unwrap(),
            deterministic: None,
        }
    }

    #[test]
    fn consistent_dataset_has_no_violations() {
        let d = PairedDataset {
            records: vec![record(2, 3), record(2, 3), record(2, 3)],
            split: SplitTag::Calibration,
        };
        assert!(validate_dataset(&d).is_empty());
    }

    #[test]
    fn member_width_mismatch_is_reported() {
        let mut records = vec![record(2, 3), record(2, 3), record(2, 3)];
        records[1].ensemble =
            EnsembleBatch::new(vec![field(2, 4, 0.0), field(2, 4, 1.0)]).unwrap();
        let d = PairedDataset {
            records,
            split: SplitTag::Test,
        };
        assert_eq!(
            validate_dataset(&d),
            vec!["record 1: ensemble member dimension mismatch".to_string()]
        );
    }

    #[test]
    fn non_finite_member_value_is_reported() {
        let mut records = vec![record(2, 2), record(2, 2)];
        let mut vals = vec![0.0; 4];
        vals[3] = f64::NAN;
        records[0].ensemble = EnsembleBatch::new(vec![
            field(2, 2, 0.0),
            GridField::new(2, 2, vals).unwrap(),
        ])
        .unwrap();
        let d = PairedDataset {
            records,
            split: SplitTag::Test,
        };
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("record 0:"), "{v:?}");
    }

    #[test]
    fn masked_non_finite_value_is_fine() {
        let mut vals = vec![0.0; 4];
        vals[3] = f64::NAN;
        let g = GridField::new(2, 2, vals)
            .unwrap()
            .with_mask(vec![true, true, true, false])
            .unwrap();
        assert_eq!(g.first_non_finite(), None);
        assert_eq!(g.valid_count(), 3);
    }

    #[test]
    fn default_scheme() {
        let s = default_levels();
        assert_eq!(
            s.quantile_levels(),
            &[0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95]
        );
        assert_eq!(s.coverage_levels(), &[0.1, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(s.tails(0.9).unwrap(), (0.05, 0.95));
        for &c in s.coverage_levels() {
            assert!(s.tails(c).is_ok());
        }
    }

    #[test]
    fn unbalanced_scheme_is_rejected() {
        let err = LevelScheme::new(vec![0.8], vec![0.05, 0.95]).unwrap_err();
        assert!(matches!(err, Error::InvalidScheme(_)));
        assert!(LevelScheme::new(vec![0.9], vec![0.95, 0.05]).is_err());
        assert!(LevelScheme::new(vec![1.0], vec![0.5]).is_err());
    }

    #[test]
    fn scheme_from_coverage_builds_tails() {
        let s = LevelScheme::from_coverage(vec![0.5, 0.9]).unwrap();
        assert_eq!(s.quantile_levels(), &[0.05, 0.25, 0.75, 0.95]);
    }

    #[test]
    fn ensemble_rejects_mixed_layouts() {
        assert!(matches!(
            EnsembleBatch::new(vec![]),
            Err(Error::EmptyEnsemble)
        ));
        assert!(EnsembleBatch::new(vec![field(2, 2, 0.0), field(2, 3, 0.0)]).is_err());
        let masked = field(2, 2, 0.0)
            .with_mask(vec![true, false, true, true])
            .unwrap();
        assert!(EnsembleBatch::new(vec![field(2, 2, 0.0), masked]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn accepted_schemes_are_balanced(cov in proptest::collection::btree_set(1u32..99, 1..6)) {
                let coverage: Vec<f64> = cov.iter().map(|&c| c as f64 / 100.0).collect();
                let s = LevelScheme::from_coverage(coverage).unwrap();
                for &c in s.coverage_levels() {
                    let (lo, hi) = tail_pair(c);
                    prop_assert!(s.quantile_position(lo).is_some());
                    prop_assert!(s.quantile_position(hi).is_some());
                }
            }
        }
    }
}
