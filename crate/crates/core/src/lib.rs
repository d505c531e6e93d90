//! Pseudo-label engineering engine for incompletely supervised concealed
//! object segmentation.
//!
//! The engine turns a teacher segmenter and a promptable segmenter into
//! filtered, weighted pseudo-labels:
//!
//! * [`augment`] builds weak augmentation views and fuses their inverted masks.
//! * [`prompts`] derives point, box and mask prompts from a coarse mask.
//! * [`oracle`] wraps the two segmenters (a synthetic test double and a
//!   subprocess client).
//! * [`entropy`] and [`pool`] score pseudo-labels and keep the best `B` per image.
//! * [`supervise`] selects, weights and scores supervision, and runs the EMA.
//! * [`hgfg`] is a standalone forward/backward kernel for hybrid-granularity
//!   feature grouping.
//! * [`pipeline`] drives whole epochs.

pub mod augment;
pub mod entropy;
pub mod error;
pub mod hgfg;
pub mod oracle;
pub mod pipeline;
pub mod pool;
pub mod prompts;
pub mod raster;
pub mod supervise;

pub use error::{Error, Result};
