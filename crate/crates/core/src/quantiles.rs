//! Per-grid-point empirical quantiles of an ensemble.
//!
//! Quantiles are exact order statistics of the member values (the inverse
//! of the empirical CDF, no interpolation): the level-`γ` quantile of `M`
//! values is the `⌈γ·M⌉`-th smallest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::cgf;
use crate::error::{Error, Result};
use crate::grid::{position_of, EnsembleBatch, GridField, LevelScheme, SharedMask, LEVEL_TOL};

/// One-based order-statistic rank `⌈γ·M⌉` used for the level-`γ` quantile.
///
/// `γ·M` values within [`LEVEL_TOL`] of an integer are treated as that
/// integer, so decimal levels like `0.3` behave as written.
pub fn quantile_rank(gamma: f64, m: usize) -> usize {
    let k = (gamma * m as f64 - LEVEL_TOL).ceil();
    (k.max(1.0) as usize).min(m)
}

/// `inf{x : #{v ≤ x}/M ≥ γ}` for nondecreasing `sorted_values`.
pub fn empirical_quantile(sorted_values: &[f64], gamma: f64) -> Result<f64> {
    if sorted_values.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidLevel(gamma));
    }
    Ok(sorted_values[quantile_rank(gamma, sorted_values.len()) - 1])
}

/// Conditional quantile estimates at a set of levels, one grid per level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGridSet {
    levels: Vec<f64>,
    height: usize,
    width: usize,
    grids: Vec<Vec<f64>>,
    mask: Option<SharedMask>,
    warning: Option<String>,
}

impl QuantileGridSet {
    /// Assembles a set from per-level fields sharing one layout.
    ///
    /// Levels must be strictly increasing and the grids monotone in level at
    /// every valid point.
    pub fn from_fields(levels: Vec<f64>, fields: Vec<GridField>) -> Result<Self> {
        if levels.len() != fields.len() || fields.is_empty() {
            return Err(Error::Misaligned(format!(
                "{} levels for {} grids",
                levels.len(),
                fields.len()
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidScheme("quantile levels must increase".into()));
        }
        let template = &fields[0];
        for f in &fields[1..] {
            template.check_layout(f)?;
        }
        let set = Self {
            levels,
            height: template.height(),
            width: template.width(),
            mask: template.shared_mask(),
            grids: fields.into_iter().map(GridField::into_values).collect(),
            warning: None,
        };
        if let Some(p) = set.first_monotonicity_violation() {
            return Err(Error::Misaligned(format!(
                "quantile grids are not monotone in level at point {p}"
            )));
        }
        Ok(set)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn shared_mask(&self) -> Option<SharedMask> {
        self.mask.clone()
    }

    /// Small-ensemble warning attached at estimation time.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[index])
    }

    pub fn position(&self, gamma: f64) -> Option<usize> {
        position_of(&self.levels, gamma)
    }

    /// Grid for level `gamma`; `NaN` at invalid points.
    pub fn grid(&self, gamma: f64) -> Result<&[f64]> {
        self.position(gamma)
            .map(|i| self.grids[i].as_slice())
            .ok_or(Error::MissingLevel(gamma))
    }

    pub fn grid_at(&self, position: usize) -> &[f64] {
        &self.grids[position]
    }

    /// The level grid as a standalone field carrying this set's mask.
    pub fn field(&self, position: usize) -> GridField {
        GridField::new(self.height, self.width, self.grids[position].clone())
            .and_then(|g| g.with_optional_mask(self.mask.clone()))
            .expect("layout checked at construction")
    }

    pub(crate) fn check_layout(&self, g: &GridField) -> Result<()> {
        if self.dims() != g.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: g.dims(),
            });
        }
        if self.mask() != g.mask() {
            return Err(Error::MaskMismatch(
                "quantile set and grid carry different masks".into(),
            ));
        }
        Ok(())
    }

    /// First valid point where some level's value drops below a lower level's.
    pub fn first_monotonicity_violation(&self) -> Option<usize> {
        (0..self.height * self.width)
            .filter(|&p| self.is_valid(p))
            .find(|&p| self.grids.windows(2).any(|w| w[0][p] > w[1][p]))
    }

    /// Writes one CGF1 file per level plus `index.json` mapping level to file name.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for (i, &level) in self.levels.iter().enumerate() {
            let name = format!("q_{level}.cgf");
            cgf::save(&dir.join(&name), &self.field(i))?;
            index.insert(level.to_string(), name);
        }
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BTreeMap<String, String> = serde_json::from_str(&text)?;
        let mut entries = index
            .into_iter()
            .map(|(k, v)| {
                k.parse::<f64>()
                    .map(|l| (l, v))
                    .map_err(|_| Error::Format(format!("bad level key {k:?} in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut levels = Vec::with_capacity(entries.len());
        let mut fields = Vec::with_capacity(entries.len());
        for (level, name) in entries {
            levels.push(level);
            fields.push(cgf::load(&dir.join(name))?);
        }
        Self::from_fields(levels, fields)
    }
}

/// Ensemble size below which tail levels of `scheme` collapse onto extreme
/// members: `1 / min(γ, 1 - γ)`.
pub fn recommended_members(scheme: &LevelScheme) -> f64 {
    let tail = scheme
        .quantile_levels()
        .iter()
        .map(|&g| g.min(1.0 - g))
        .fold(f64::INFINITY, f64::min);
    1.0 / tail
}

/// Empirical quantiles of the member values at every valid grid point.
pub fn ensemble_to_quantiles(batch: &EnsembleBatch, scheme: &LevelScheme) -> Result<QuantileGridSet> {
    let members = batch.members();
    Ok(quantiles_by_point(batch.template(), scheme, batch.member_count(), |p, buf| {
        buf.extend(members.iter().map(|g| g.values()[p]))
    }))
}

/// Quantile set over `template`'s layout, with `fill(p, buf)` pushing the
/// `m` member values of valid point `p` into an empty buffer.
pub(crate) fn quantiles_by_point(
    template: &GridField,
    scheme: &LevelScheme,
    m: usize,
    mut fill: impl FnMut(usize, &mut Vec<f64>),
) -> QuantileGridSet {
    let (height, width) = template.dims();
    let levels = scheme.quantile_levels().to_vec();
    let ranks: Vec<usize> = levels.iter().map(|&g| quantile_rank(g, m)).collect();

    let n = height * width;
    let mut grids = vec![vec![f64::NAN; n]; levels.len()];
    let mut buf = Vec::with_capacity(m);
    for p in template.valid_indices() {
        buf.clear();
        fill(p, &mut buf);
        debug_assert_eq!(buf.len(), m);
        buf.sort_unstable_by(f64::total_cmp);
        for (grid, &k) in grids.iter_mut().zip(&ranks) {
            grid[p] = buf[k - 1];
        }
    }

    let needed = recommended_members(scheme);
    let warning = ((m as f64) < needed - LEVEL_TOL).then(|| {
        format!(
            "ensemble of {m} members is too small to resolve the requested tail levels (recommended at least {})",
            needed.ceil()
        )
    });
    if let Some(w) = &warning {
        log::debug!("{w}");
    }

    QuantileGridSet {
        levels,
        height,
        width,
        grids,
        mask: template.shared_mask(),
        warning,
    }
}

/// Adds each residual member to the deterministic prediction.
pub fn compose_residual(deterministic: &GridField, residual_members: &EnsembleBatch) -> Result<EnsembleBatch> {
    deterministic.check_layout(residual_members.template())?;
    let members = residual_members
        .members()
        .iter()
        .map(|r| {
            let values = deterministic
                .values()
                .iter()
                .zip(r.values())
                .map(|(d, r)| d + r)
                .collect();
            GridField::new(deterministic.height(), deterministic.width(), values)?
                .with_optional_mask(deterministic.shared_mask())
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleBatch::new(members)
}
