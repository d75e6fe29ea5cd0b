//! Tissue segmentation, patch grids and patch normalization.
//!
//! Volumes are treated as stacks of planes along depth. [`segment_volume`]
//! produces one binary tissue mask per plane, [`build_patch_grid`] lays out 2D
//! tiles or 3D cuboids over the masked tissue, and [`extract_patch`] clips and
//! rescales a patch to `[0, 1]`.

mod augment;
mod grid;
mod normalize;
mod segment;

pub use augment::{augment_patch, AugmentConfig};
pub use grid::{build_patch_grid, PatchGrid, PatchMode};
pub use normalize::{extract_patch, NormParams, NormWindow, Patch, UpperClip};
pub use segment::{otsu_threshold, segment_volume, MaskStack, SegParams};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no kept tissue planes; the reference plane is undefined")]
    NoTissue,
    #[error("patch shape {shape:?} does not fit in volume dims {dims:?}")]
    PatchTooLarge { shape: [usize; 3], dims: [usize; 3] },
    #[error("patch at {origin:?} with shape {shape:?} is out of bounds for {dims:?}")]
    OutOfBounds { origin: [usize; 3], shape: [usize; 3], dims: [usize; 3] },
    #[error("malformed grid file, line {line}: {message}")]
    GridFormat { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;
