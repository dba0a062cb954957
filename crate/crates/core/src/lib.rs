//! Bi-channel stitching of overlapping multi-channel microscopy tiles.
//!
//! Transforms are estimated on a feature-rich secondary channel and applied to
//! the primary channel.

pub mod analytics;
pub mod compose;
pub mod error;
pub mod features;
pub mod geometry;
pub mod grid;
pub(crate) mod linalg;
pub mod matching;
pub mod pipeline;
pub mod pose_graph;
pub mod preprocess;
pub mod synth;
pub mod tile_store;

pub use analytics::{ChannelScore, ChannelStats, StitchReport};
pub use compose::{BlendMode, BlendSpec, Extent, Mosaic};
pub use error::{Error, Result};
pub use features::{DetectorParams, FeatureSet, Keypoint};
pub use geometry::AffineTransform;
pub use grid::{ByteGrid, Grid};
pub use matching::{MatchParams, PairEstimate, PairGraph};
pub use pipeline::{exit_code, run_stitch, RunConfig, SecondaryChoice};
pub use pose_graph::{GlobalPose, Layout, PoseModel, PoseOptions};
pub use preprocess::PreprocessOptions;
pub use synth::{GroundTruth, SynthSpec};
pub use tile_store::{ChannelId, Tile, TileStack};
