//! Grid-wise conformal calibration of ensemble quantile forecasts.
//!
//! The crate turns an ensemble of downscaled fields into per-grid-point
//! prediction intervals with finite-sample marginal coverage, and evaluates
//! them with PICP, interval score, quantile score and interval width.
//!
//! * [`grid`]: raster containers, masks, level schemes, datasets
//! * [`cgf`]: the CGF1 binary grid format and CSV ingestion
//! * [`quantiles`]: empirical per-point ensemble quantiles
//! * [`conformal`]: split conformal and grid-wise asymmetric CQR
//! * [`metrics`]: calibration and sharpness scores
//! * [`synth`]: synthetic pairs with a known conditional law
//! * [`pipeline`]: configuration, persistence and the end-to-end runs
//!
//! ```
//! use gridconformal::grid::{default_levels, EnsembleBatch, GridField};
//! use gridconformal::quantiles::ensemble_to_quantiles;
//! use gridconformal::conformal::raw_intervals;
//!
//! let members = (1..=20)
//!     .map(|v| GridField::filled(2, 2, v as f64).unwrap())
//!     .collect();
//! let batch = EnsembleBatch::new(members).unwrap();
//! let scheme = default_levels();
//! let q = ensemble_to_quantiles(&batch, &scheme).unwrap();
//! let iv = raw_intervals(&q, &scheme).unwrap();
//! let l = iv.level(0.9).unwrap();
//! assert_eq!((l.lower[0], l.upper[0]), (1.0, 19.0));
//! ```

pub mod cgf;
pub mod conformal;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod quantiles;
pub mod skewnormal;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/quantiles.md")]
    mod quantiles {}
    #[doc = include_str!("../../../book/src/conformal.md")]
    mod conformal {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
