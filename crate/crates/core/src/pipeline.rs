//! End-to-end stitching run: secondary channel for registration, primary for the mosaic.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    channel_score, detect_tiles, feature_stats, registration_error, ChannelScore, ChannelStats, LayoutSummary,
    Metrics, ScoreWeights, StitchReport, REPORT_VERSION,
};
use crate::compose::{compose_mosaic, BlendSpec, Mosaic};
use crate::error::{Error, Result};
use crate::features::{DetectorParams, FeatureSet};
use crate::geometry::AffineTransform;
use crate::grid::Grid;
use crate::matching::{match_all_detailed, MatchParams, PairAttempt};
use crate::pose_graph::{initial_poses, largest_component, refine_poses, PoseOptions};
use crate::preprocess::{derive_x, prepare_primary, PreprocessOptions};
use crate::synth::{GroundTruth, TRUTH_META_KEY};
use crate::tile_store::{load_stack, save_outputs, write_json, ChannelId, TileStack, DERIV_X};

pub const FEATURES_FILE: &str = "features.json";

/// Which channel drives registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SecondaryChoice {
    /// A measured channel by name.
    Channel(ChannelId),
    /// x-derivative of the prepared primary (or a measured `deriv_x` channel).
    DerivX,
    /// Best-scoring candidate.
    Auto,
    /// The primary itself (direct stitching).
    Primary,
}

impl FromStr for SecondaryChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            DERIV_X => SecondaryChoice::DerivX,
            "auto" => SecondaryChoice::Auto,
            "primary" => SecondaryChoice::Primary,
            other => SecondaryChoice::Channel(ChannelId::new(other)?),
        })
    }
}

impl TryFrom<String> for SecondaryChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SecondaryChoice> for String {
    fn from(c: SecondaryChoice) -> String {
        c.to_string()
    }
}

impl fmt::Display for SecondaryChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecondaryChoice::Channel(c) => write!(f, "{c}"),
            SecondaryChoice::DerivX => f.write_str(DERIV_X),
            SecondaryChoice::Auto => f.write_str("auto"),
            SecondaryChoice::Primary => f.write_str("primary"),
        }
    }
}

/// Complete configuration of a stitching run. The output directory is not part
/// of the recorded parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    /// `None` takes the first channel listed in the manifest.
    pub primary: Option<ChannelId>,
    pub secondary: SecondaryChoice,
    pub detector: DetectorParams,
    pub matching: MatchParams,
    pub pose: PoseOptions,
    pub blend: BlendSpec,
    pub preprocess: PreprocessOptions,
    pub offset_reconcile: bool,
    pub score_weights: ScoreWeights,
    pub dump_features: bool,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            out: out.into(),
            primary: None,
            secondary: SecondaryChoice::DerivX,
            detector: DetectorParams::default(),
            matching: MatchParams::default(),
            pose: PoseOptions::default(),
            blend: BlendSpec::default(),
            preprocess: PreprocessOptions::default(),
            offset_reconcile: true,
            score_weights: ScoreWeights::default(),
            dump_features: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        let m = &self.matching;
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(m.ratio > 0.0 && m.ratio <= 1.0) {
            return bad("ratio must lie in (0, 1]");
        }
        if !(m.reproj_px > 0.0) {
            return bad("reprojection threshold must be > 0");
        }
        if !(m.min_confidence >= 0.0) || !(m.confidence_base >= 0.0) || !(m.confidence_slope >= 0.0) {
            return bad("confidence parameters must be >= 0");
        }
        if m.max_iterations == 0 {
            return bad("RANSAC needs at least one iteration");
        }
        if !(m.det_bounds.0 > 0.0 && m.det_bounds.0 <= m.det_bounds.1) {
            return bad("invalid determinant bounds");
        }
        if let Some(d) = self.pose.huber_delta {
            if !(d > 0.0) {
                return bad("huber delta must be > 0");
            }
        }
        let (lo, hi) = self.preprocess.percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return bad("percentiles must satisfy 0 <= low < high <= 100");
        }
        if let Some(m) = self.blend.feather_margin {
            if !(m > 0.0) {
                return bad("feather margin must be > 0");
            }
        }
        Ok(())
    }
}

/// Process exit status for an error: 3 when nothing could be stitched, else 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NothingToStitch => 3,
        _ => 2,
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct StitchOutcome {
    pub report: StitchReport,
    pub mosaic: Mosaic,
    pub attempts: Vec<PairAttempt>,
}

fn channel_grids(stack: &TileStack, channel: &ChannelId) -> Result<Vec<Grid>> {
    stack
        .tiles
        .iter()
        .map(|t| {
            t.channel(channel).cloned().ok_or_else(|| Error::MissingChannel {
                tile: t.index,
                channel: channel.to_string(),
            })
        })
        .collect()
}

/// Primary grids after flattening / plane removal.
pub fn prepared_primary(stack: &TileStack, primary: &ChannelId, opts: &PreprocessOptions) -> Result<Vec<Grid>> {
    channel_grids(stack, primary)?
        .par_iter()
        .map(|g| prepare_primary(g, opts))
        .collect()
}

/// Registration grids for a named candidate: `deriv_x` is synthesized from the
/// prepared primary unless the stack measures it.
fn candidate_grids(stack: &TileStack, channel: &ChannelId, primary: &ChannelId, prepared: &[Grid]) -> Result<Vec<Grid>> {
    if channel == primary {
        Ok(prepared.to_vec())
    } else if channel.is_deriv_x() && !stack.has_channel(channel) {
        prepared.par_iter().map(derive_x).collect()
    } else {
        channel_grids(stack, channel)
    }
}

/// Candidates considered by `auto`: measured channels, `deriv_x`, then the primary.
pub fn auto_candidates(stack: &TileStack, primary: &ChannelId) -> Vec<ChannelId> {
    let mut out: Vec<ChannelId> = stack
        .channels
        .iter()
        .filter(|c| *c != primary && stack.has_channel(c))
        .cloned()
        .collect();
    if !out.iter().any(ChannelId::is_deriv_x) {
        out.push(ChannelId::deriv_x());
    }
    out.push(primary.clone());
    out
}

/// Ranks the `auto` candidates of a stack.
pub fn score_channels(stack: &TileStack, config: &RunConfig) -> Result<Vec<ChannelScore>> {
    let primary = resolve_primary(stack, config)?;
    let prepared = prepared_primary(stack, &primary, &config.preprocess)?;
    let candidates = auto_candidates(stack, &primary)
        .into_iter()
        .map(|c| candidate_grids(stack, &c, &primary, &prepared).map(|g| (c, g)))
        .collect::<Result<Vec<_>>>()?;
    channel_score(
        &candidates,
        &prepared,
        &config.detector,
        &config.matching,
        config.preprocess.percentiles,
        &config.score_weights,
    )
}

fn resolve_primary(stack: &TileStack, config: &RunConfig) -> Result<ChannelId> {
    let primary = match &config.primary {
        Some(p) => p.clone(),
        None => stack
            .channels
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidChannel("manifest lists no channels".into()))?,
    };
    if !stack.has_channel(&primary) {
        return Err(Error::MissingChannel {
            tile: stack
                .tiles
                .iter()
                .find(|t| t.channel(&primary).is_none())
                .map_or(0, |t| t.index),
            channel: primary.to_string(),
        });
    }
    Ok(primary)
}

/// Ground-truth poses referenced by the manifest metadata, if any.
pub fn load_truth(stack: &TileStack, manifest: &Path) -> Result<Option<GroundTruth>> {
    let Some(rel) = stack.meta.get(TRUTH_META_KEY).and_then(|v| v.as_str()) else {
        return Ok(None);
    };
    let path = manifest.parent().unwrap_or(Path::new(".")).join(rel);
    if !path.exists() {
        return Ok(None);
    }
    GroundTruth::load(&path).map(Some)
}

/// Runs the pipeline in memory on an already loaded stack.
pub fn stitch_stack(stack: &TileStack, config: &RunConfig, truth: Option<&GroundTruth>) -> Result<StitchOutcome> {
    config.validate()?;
    let primary = resolve_primary(stack, config)?;
    let prepared = prepared_primary(stack, &primary, &config.preprocess)?;

    let mut scores: Vec<ChannelScore> = Vec::new();
    let chosen = match &config.secondary {
        SecondaryChoice::Primary => primary.clone(),
        SecondaryChoice::DerivX => ChannelId::deriv_x(),
        SecondaryChoice::Channel(c) => {
            if !c.is_deriv_x() && !stack.has_channel(c) {
                return Err(Error::MissingChannel {
                    tile: 0,
                    channel: c.to_string(),
                });
            }
            c.clone()
        }
        SecondaryChoice::Auto => {
            scores = score_channels(stack, config)?;
            scores[0].channel.clone()
        }
    };
    let grids = candidate_grids(stack, &chosen, &primary, &prepared)?;
    let features = detect_tiles(&grids, &chosen, &config.detector, config.preprocess.percentiles)?;
    let (graph, attempts) = match_all_detailed(&features, &config.matching);
    if graph.edges.is_empty() {
        return Err(Error::NothingToStitch);
    }

    let (members, dropped) = largest_component(&graph);
    let initial = initial_poses(&graph, &members)?;
    let layout = refine_poses(&initial, &graph, &config.pose)?;

    let tiles: Vec<(usize, &Grid)> = prepared.iter().enumerate().collect();
    let mosaic = compose_mosaic(&tiles, &layout, &config.blend, config.offset_reconcile)?;

    let mut metrics = Metrics::default();
    if let Some(truth) = truth {
        let poses: BTreeMap<usize, AffineTransform> = truth.true_poses.iter().copied().enumerate().collect();
        let dims = |t: usize| stack.tiles[t].dims();
        let err = registration_error(&layout, &poses, dims)?;
        metrics.reg_error_mean_px = Some(err.mean);
        metrics.reg_error_max_px = Some(err.max);
    }

    let mut stats: ChannelStats = feature_stats(&features, &graph);
    stats.score = scores.iter().find(|s| s.channel == chosen).map(|s| s.score);
    let mut channels = vec![stats];
    channels.extend(scores.iter().filter(|s| s.channel != chosen).map(|s| ChannelStats {
        name: s.channel.clone(),
        mean_detected: s.mean_detected,
        pairs: 0,
        mean_matched: s.mean_matched,
        mean_inliers: 0.0,
        score: Some(s.score),
    }));

    let mut warnings = Vec::new();
    if !dropped.is_empty() {
        warnings.push(format!(
            "{} of {} tiles dropped, no accepted pair estimate links them to the stitched component: {:?}",
            dropped.len(),
            stack.tiles.len(),
            dropped
        ));
    }

    let mut recorded = config.clone();
    recorded.primary = Some(primary);
    let report = StitchReport {
        version: REPORT_VERSION,
        parameters: serde_json::to_value(&recorded)?,
        channels,
        chosen_channel: chosen,
        layout: LayoutSummary {
            members: layout.member_tiles.clone(),
            dropped,
            reference: layout.reference,
            residual_rms_px: layout.residual_rms,
        },
        metrics,
        warnings,
    };
    if config.dump_features {
        dump_features(&features, &config.out)?;
    }
    Ok(StitchOutcome {
        report,
        mosaic,
        attempts,
    })
}

fn dump_features(features: &[FeatureSet], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(crate::error::io_err(out))?;
    write_json(&out.join(FEATURES_FILE), &features)
}

/// Loads the input, stitches and writes every artifact into `config.out`.
pub fn run_stitch(config: &RunConfig) -> Result<StitchOutcome> {
    config.validate()?;
    let stack = load_stack(&config.input)?;
    let truth = load_truth(&stack, &config.input)?;
    let outcome = stitch_stack(&stack, config, truth.as_ref())?;
    save_outputs(&outcome.mosaic, &outcome.report, &config.out)?;
    Ok(outcome)
}
