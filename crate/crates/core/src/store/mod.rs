//! Binary and text containers for volumes, cohort manifests, feature bags
//! and model checkpoints.
//!
//! Every binary format is little-endian with a fixed magic and a format
//! version. Readers validate the full payload length and reject anything
//! malformed instead of returning a partial value. Encoders are pure
//! functions of their input, so identical inputs produce identical bytes.

mod bag;
mod checkpoint;
mod cursor;
mod manifest;
mod volume;

use std::path::PathBuf;

pub use bag::{decode_feature_bag, encode_feature_bag, read_feature_bag, write_feature_bag, FeatureBag, PatchCoord};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, NamedTensor};
pub use manifest::{read_manifest, write_manifest, CohortManifest, Event, ManifestRecord};
pub use volume::{
    decode_volume, encode_volume, read_volume, write_volume, DType, Volume, VoxelData, VOLUME_HEADER_LEN,
};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("sample {0:?} has a survival time but no event flag")]
    TimeWithoutEvent(String),
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("checkpoint tensor {0:?} appears more than once")]
    DuplicateTensor(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|source| StoreError::Io { path: parent.to_path_buf(), source })?;
        }
    }
    std::fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}
