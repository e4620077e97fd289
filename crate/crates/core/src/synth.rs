//! Synthetic coarse/fine pairs with a known conditional law, and an ensemble
//! emulator standing in for a trained residual sampler.
//!
//! A record is built as
//!
//! ```text
//! Y      smooth random coarse field
//! X̂_d  = upsample(Y) + terrain perturbation          (deterministic part)
//! X     = X̂_d + ε,   ε ~ SkewNormal(0, σ(i,j), a)
//! X̂⁽ᵐ⁾ = X̂_d + ε⁽ᵐ⁾, ε⁽ᵐ⁾ ~ SkewNormal(0, λ·σ(i,j), a)
//! ```
//!
//! with `σ(i,j) = base_sigma·(1 + heterosc_gain·elevation(i,j))`. The
//! dispersion factor `λ` controls calibration of the emulator: `λ = 1`
//! samples the true conditional law, `λ < 1` is under-dispersed.
//!
//! All randomness flows through explicitly seeded ChaCha streams; one
//! stream per record makes datasets independent of generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, SkewNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CoarseField, EnsembleBatch, GridField, LevelScheme, Record, SharedMask};
use crate::quantiles::{quantiles_by_point, QuantileGridSet};
use crate::skewnormal;

/// Mean of the coarse predictor field.
const BASE_LEVEL: f64 = 10.0;
/// Degrees per unit of normalized elevation removed from the fine field.
const LAPSE: f64 = 4.0;
const TERRAIN_BUMPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub upscale_factor: usize,
    pub elevation_seed: u64,
    pub noise_seed: u64,
    pub base_sigma: f64,
    pub heterosc_gain: f64,
    /// Skewness knob `δ ∈ (-1, 1)`; the skew-normal shape is `δ/√(1-δ²)`.
    pub skew: f64,
    /// Ensemble spread multiplier `λ`.
    pub dispersion: f64,
    pub member_count: usize,
    /// Restrict estimation to a regular `rows × cols` lattice of fine points;
    /// everything else is masked out.
    pub sample_grid: Option<[usize; 2]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            coarse_height: 9,
            coarse_width: 11,
            upscale_factor: 8,
            elevation_seed: 7,
            noise_seed: 42,
            base_sigma: 1.0,
            heterosc_gain: 1.0,
            skew: 0.6,
            dispersion: 0.7,
            member_count: 50,
            sample_grid: None,
        }
    }
}

impl SynthConfig {
    pub fn fine_dims(&self) -> (usize, usize) {
        (
            self.coarse_height * self.upscale_factor,
            self.coarse_width * self.upscale_factor,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.coarse_height == 0 || self.coarse_width == 0 {
            return bad("coarse dimensions must be positive".into());
        }
        if self.upscale_factor == 0 {
            return bad("upscale_factor must be positive".into());
        }
        if !(self.base_sigma > 0.0 && self.base_sigma.is_finite()) {
            return bad(format!("base_sigma must be positive, got {}", self.base_sigma));
        }
        if !(self.heterosc_gain >= 0.0 && self.heterosc_gain.is_finite()) {
            return bad(format!("heterosc_gain must be nonnegative, got {}", self.heterosc_gain));
        }
        if !(self.skew > -1.0 && self.skew < 1.0) {
            return bad(format!("skew must lie in (-1, 1), got {}", self.skew));
        }
        if !(self.dispersion >= 0.0 && self.dispersion.is_finite()) {
            return bad(format!("dispersion must be nonnegative, got {}", self.dispersion));
        }
        if self.member_count == 0 {
            return bad("member_count must be positive".into());
        }
        if let Some([r, c]) = self.sample_grid {
            let (h, w) = self.fine_dims();
            if r == 0 || c == 0 || r > h || c > w {
                return bad(format!("sample_grid {r}x{c} does not fit a {h}x{w} grid"));
            }
        }
        Ok(())
    }
}

/// ChaCha stream for one record. Distinct `stream` values never overlap.
pub fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for record `index` of `split` in trial `trial`.
pub fn stream_id(trial: u32, split: crate::grid::SplitTag, index: u32) -> u64 {
    let s = match split {
        crate::grid::SplitTag::TrainSurrogate => 0u64,
        crate::grid::SplitTag::Calibration => 1,
        crate::grid::SplitTag::Test => 2,
    };
    (u64::from(trial) << 34) | (s << 32) | u64::from(index)
}

/// Generator state derived once from a config: terrain, noise scales and mask.
#[derive(Debug, Clone)]
pub struct Synth {
    cfg: SynthConfig,
    shape: f64,
    elevation: Vec<f64>,
    perturbation: Vec<f64>,
    sigma: Vec<f64>,
    mask: Option<SharedMask>,
}

impl Synth {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.fine_dims();
        let elevation = terrain(h, w, cfg.elevation_seed);
        let perturbation = elevation.iter().map(|e| -LAPSE * e).collect();
        let sigma = elevation
            .iter()
            .map(|e| cfg.base_sigma * (1.0 + cfg.heterosc_gain * e))
            .collect();
        let mask = cfg.sample_grid.map(|[r, c]| SharedMask::from(lattice_mask(h, w, r, c)));
        Ok(Self {
            shape: skewnormal::shape_from_skew(cfg.skew),
            cfg,
            elevation,
            perturbation,
            sigma,
            mask,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Skew-normal shape parameter of the noise.
    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// Normalized elevation in `[0, 1]`.
    pub fn elevation(&self) -> &[f64] {
        &self.elevation
    }

    /// Noise scale `σ(i,j)` of the true conditional law.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// An all-`NaN` fine field carrying the layout (dimensions and mask).
    pub fn template(&self) -> GridField {
        let (h, w) = self.cfg.fine_dims();
        self.fine(vec![f64::NAN; h * w])
    }

    fn is_valid(&self, p: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[p])
    }

    fn fine(&self, values: Vec<f64>) -> GridField {
        let (h, w) = self.cfg.fine_dims();
        GridField::new(h, w, values)
            .and_then(|g| g.with_optional_mask(self.mask.clone()))
            .expect("fine layout is fixed by the config")
    }

    fn standard_noise(&self) -> SkewNormal<f64> {
        SkewNormal::new(0.0, 1.0, self.shape).expect("finite shape")
    }

    /// Smooth random coarse field: box-filtered white noise plus a random
    /// large-scale gradient.
    pub fn coarse<R: Rng + ?Sized>(&self, rng: &mut R) -> CoarseField {
        let (h, w) = (self.cfg.coarse_height, self.cfg.coarse_width);
        let (ph, pw) = (h + 2, w + 2);
        let white: Vec<f64> = (0..ph * pw).map(|_| rng.sample(StandardNormal)).collect();
        let grad_r: f64 = rng.sample(StandardNormal);
        let grad_c: f64 = rng.sample(StandardNormal);
        let mut values = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        s += white[(i + di) * pw + j + dj];
                    }
                }
                let trend = grad_r * i as f64 / h as f64 + grad_c * j as f64 / w as f64;
                values.push(BASE_LEVEL + s / 3.0 + trend);
            }
        }
        CoarseField::new(h, w, values).expect("coarse layout is fixed by the config")
    }

    /// `X̂_d = upsample(Y) + terrain perturbation`, `NaN` outside the mask.
    pub fn deterministic(&self, y: &CoarseField) -> Result<GridField> {
        if y.dims() != (self.cfg.coarse_height, self.cfg.coarse_width) {
            return Err(Error::DimensionMismatch {
                expected: (self.cfg.coarse_height, self.cfg.coarse_width),
                found: y.dims(),
            });
        }
        let (h, w) = self.cfg.fine_dims();
        let factor = self.cfg.upscale_factor;
        let values = (0..h * w)
            .map(|p| {
                if self.is_valid(p) {
                    upsample_at(y, factor, p / w, p % w) + self.perturbation[p]
                } else {
                    f64::NAN
                }
            })
            .collect();
        Ok(self.fine(values))
    }

    fn add_noise<R: Rng + ?Sized>(&self, base: &[f64], scale: f64, rng: &mut R) -> GridField {
        let noise = self.standard_noise();
        let mut values = base.to_vec();
        for (p, v) in values.iter_mut().enumerate() {
            if self.is_valid(p) {
                *v += scale * self.sigma[p] * noise.sample(rng);
            }
        }
        self.fine(values)
    }

    /// One `(Y, X)` pair.
    pub fn generate_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (CoarseField, GridField) {
        let y = self.coarse(rng);
        let det = self.deterministic(&y).expect("own coarse field");
        let x = self.add_noise(det.values(), 1.0, rng);
        (y, x)
    }

    /// `M` members `X̂_d + ε⁽ᵐ⁾` with noise scale `λ·σ`.
    pub fn emulate_ensemble<R: Rng + ?Sized>(&self, y: &CoarseField, rng: &mut R) -> Result<EnsembleBatch> {
        let det = self.deterministic(y)?;
        let members = (0..self.cfg.member_count)
            .map(|_| self.add_noise(det.values(), self.cfg.dispersion, rng))
            .collect();
        EnsembleBatch::new(members)
    }

    /// Empirical quantiles of an emulated ensemble without materializing the
    /// members. Consumes `rng` exactly like [`Synth::emulate_ensemble`] and
    /// returns the same set as quantizing its output.
    pub fn ensemble_quantiles<R: Rng + ?Sized>(
        &self,
        y: &CoarseField,
        scheme: &LevelScheme,
        rng: &mut R,
    ) -> Result<QuantileGridSet> {
        let det = self.deterministic(y)?;
        let valid: Vec<usize> = det.valid_indices().collect();
        let (m, nv) = (self.cfg.member_count, valid.len());
        let noise = self.standard_noise();
        let scale = self.cfg.dispersion;
        let base = det.values();
        let mut draws = Vec::with_capacity(m * nv);
        for _ in 0..m {
            for &p in &valid {
                draws.push(base[p] + scale * self.sigma[p] * noise.sample(rng));
            }
        }
        let mut column = 0;
        Ok(quantiles_by_point(&det, scheme, m, |_, buf| {
            buf.extend((0..m).map(|k| draws[k * nv + column]));
            column += 1;
        }))
    }

    /// Pair, deterministic part and (optionally) ensemble from one stream.
    ///
    /// Without an ensemble the record carries the deterministic part as a
    /// single member.
    pub fn record<R: Rng + ?Sized>(&self, rng: &mut R, with_ensemble: bool) -> Record {
        let (coarse, truth) = self.generate_pair(rng);
        let det = self.deterministic(&coarse).expect("own coarse field");
        let ensemble = if with_ensemble {
            self.emulate_ensemble(&coarse, rng).expect("own coarse field")
        } else {
            EnsembleBatch::new(vec![det.clone()]).expect("single member")
        };
        Record {
            coarse,
            truth,
            ensemble,
            deterministic: Some(det),
        }
    }

    /// Exact conditional quantiles of `X` given `y` at the scheme's levels.
    pub fn oracle_quantiles(&self, y: &CoarseField, scheme: &LevelScheme) -> Result<OracleQuantiles> {
        let det = self.deterministic(y)?;
        let levels = scheme.quantile_levels().to_vec();
        let standard = levels.iter().map(|&g| skewnormal::quantile(g, self.shape)).collect();
        Ok(OracleQuantiles {
            levels,
            standard,
            shape: self.shape,
            sigma: self.sigma.clone(),
            deterministic: det,
        })
    }
}

pub fn generate_pair<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<(CoarseField, GridField)> {
    Ok(Synth::new(cfg.clone())?.generate_pair(rng))
}

pub fn emulate_ensemble<R: Rng + ?Sized>(cfg: &SynthConfig, y: &CoarseField, rng: &mut R) -> Result<EnsembleBatch> {
    Synth::new(cfg.clone())?.emulate_ensemble(y, rng)
}

pub fn oracle_quantiles(cfg: &SynthConfig, y: &CoarseField, scheme: &LevelScheme) -> Result<OracleQuantiles> {
    Synth::new(cfg.clone())?.oracle_quantiles(y, scheme)
}

/// Closed-form conditional law of `X` given `Y` at every grid point.
#[derive(Debug, Clone)]
pub struct OracleQuantiles {
    levels: Vec<f64>,
    standard: Vec<f64>,
    shape: f64,
    sigma: Vec<f64>,
    deterministic: GridField,
}

impl OracleQuantiles {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Conditional CDF at point `p`.
    pub fn cdf(&self, p: usize, x: f64) -> f64 {
        let z = (x - self.deterministic.values()[p]) / self.sigma[p];
        skewnormal::cdf(z, self.shape)
    }

    /// Conditional quantile at point `p` for any level.
    pub fn quantile(&self, p: usize, gamma: f64) -> f64 {
        let z = match crate::grid::position_of(&self.levels, gamma) {
            Some(i) => self.standard[i],
            None => skewnormal::quantile(gamma, self.shape),
        };
        self.deterministic.values()[p] + self.sigma[p] * z
    }

    /// Oracle quantiles as a grid set at the scheme's levels.
    pub fn to_quantile_set(&self) -> QuantileGridSet {
        let det = &self.deterministic;
        let fields = self
            .standard
            .iter()
            .map(|&z| {
                let values = (0..det.len())
                    .map(|p| {
                        if det.is_valid(p) {
                            det.values()[p] + self.sigma[p] * z
                        } else {
                            f64::NAN
                        }
                    })
                    .collect();
                GridField::new(det.height(), det.width(), values)
                    .and_then(|g| g.with_optional_mask(det.shared_mask()))
                    .expect("deterministic layout")
            })
            .collect();
        QuantileGridSet::from_fields(self.levels.clone(), fields).expect("quantiles increase in level")
    }
}

/// Kolmogorov–Smirnov distance between a sorted sample and a CDF.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / m - f).max(f - i as f64 / m)
        })
        .fold(0.0, f64::max)
}

/// Bilinear interpolation onto a grid `factor` times finer, pixel centres aligned.
pub fn bilinear_upsample(y: &CoarseField, factor: usize) -> Vec<f64> {
    let (ch, cw) = y.dims();
    let (h, w) = (ch * factor, cw * factor);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(upsample_at(y, factor, i, j));
        }
    }
    out
}

fn upsample_at(y: &CoarseField, factor: usize, i: usize, j: usize) -> f64 {
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let (ch, cw) = y.dims();
    let (r0, r1, tr) = coord(i, ch);
    let (c0, c1, tc) = coord(j, cw);
    let top = y.get(r0, c0) * (1.0 - tc) + y.get(r0, c1) * tc;
    let bottom = y.get(r1, c0) * (1.0 - tc) + y.get(r1, c1) * tc;
    top * (1.0 - tr) + bottom * tr
}

/// Normalized elevation from a few Gaussian hills placed by `seed`.
fn terrain(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = h.max(w) as f64;
    let hills: Vec<(f64, f64, f64, f64)> = (0..TERRAIN_BUMPS)
        .map(|_| {
            let r = rng.random::<f64>() * h as f64;
            let c = rng.random::<f64>() * w as f64;
            let radius = (0.15 + 0.25 * rng.random::<f64>()) * span;
            let amp = 0.3 + 0.7 * rng.random::<f64>();
            (r, c, radius, amp)
        })
        .collect();
    let mut elev: Vec<f64> = (0..h * w)
        .map(|p| {
            let (i, j) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            hills
                .iter()
                .map(|&(r, c, rad, amp)| {
                    let d2 = (i - r).powi(2) + (j - c).powi(2);
                    amp * (-d2 / (2.0 * rad * rad)).exp()
                })
                .sum()
        })
        .collect();
    let lo = elev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = elev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    for e in &mut elev {
        *e = (*e - lo) / range;
    }
    elev
}

/// `rows × cols` regular lattice of valid points.
fn lattice_mask(h: usize, w: usize, rows: usize, cols: usize) -> Vec<bool> {
    let pick = |k: usize, count: usize, n: usize| (2 * k + 1) * n / (2 * count);
    let mut mask = vec![false; h * w];
    for r in 0..rows {
        for c in 0..cols {
            mask[pick(r, rows, h) * w + pick(c, cols, w)] = true;
        }
    }
    mask
}
