use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("tile {tile}, channel {channel}: payload has {actual} bytes, expected {expected}")]
    DimensionMismatch {
        tile: usize,
        channel: String,
        expected: usize,
        actual: usize,
    },

    #[error("tile {tile} is missing channel {channel}")]
    MissingChannel { tile: usize, channel: String },

    #[error("fewer than 2 tiles in stack (found {0})")]
    TooFewTiles(usize),

    #[error("invalid channel id: {0}")]
    InvalidChannel(String),

    #[error("tile {tile}: {message}")]
    InvalidTile { tile: usize, message: String },

    #[error("grid has no valid pixels")]
    NoValidPixels,

    #[error("degenerate plane fit: valid pixels are collinear or fewer than 3")]
    DegeneratePlane,

    #[error("grid width {0} is too narrow for an x-derivative (need at least 2)")]
    TooNarrow(usize),

    #[error("image {width}x{height} is too small for feature detection (minimum 16x16)")]
    ImageTooSmall { width: usize, height: usize },

    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),

    #[error("transform is singular")]
    SingularTransform,

    #[error("member tiles are not connected in the pair graph")]
    Disconnected,

    #[error("normal equations are rank deficient; under-constrained tiles: {tiles:?}")]
    RankDeficient { tiles: Vec<usize> },

    #[error("grid dimensions differ: {a:?} vs {b:?}")]
    DimensionsDiffer { a: (usize, usize), b: (usize, usize) },

    #[error("no jointly valid pixels to compare")]
    NoJointlyValid,

    #[error("ground truth missing for tile {0}")]
    MissingTruth(usize),

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no pair estimate was accepted; nothing to stitch (try `score` to rank candidate channels)")]
    NothingToStitch,

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
