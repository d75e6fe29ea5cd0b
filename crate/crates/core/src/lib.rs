//! Volumetric multiple-instance learning engine.
//!
//! The crate covers the whole path from a cohort of 3D volumes to cohort-level
//! statistics: synthetic phantom cohorts ([`phantom`]), tissue segmentation and
//! 2D/3D patch grids ([`preprocess`]), analytic patch encoders ([`encoder`]), a
//! gated-attention MIL network with hand-written backpropagation and AdamW
//! training ([`mil`]), integrated-gradients attribution and heatmaps
//! ([`interpret`]), and cross-validated evaluation with survival and
//! association statistics ([`eval`]). [`config`] and [`pipeline`] wire the
//! stages together behind a single configuration file.

pub mod config;
pub mod encoder;
pub mod eval;
pub mod experiment;
pub mod interpret;
pub mod mil;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod store;
