use std::path::PathBuf;
use std::process::ExitCode;

use bistitch_core::analytics::ssim;
use bistitch_core::pipeline::score_channels;
use bistitch_core::synth::{generate_stack, write_synth, BlobRecipe, MasterSource};
use bistitch_core::tile_store::{load_grid, load_stack};
use bistitch_core::{
    exit_code, run_stitch, BlendMode, ChannelId, Error, PoseModel, Result, RunConfig, SecondaryChoice, SynthSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bistitch", version, about = "Bi-channel stitching of overlapping microscopy tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register on the secondary channel and stitch the primary channel.
    Stitch(StitchArgs),
    /// Write a synthetic stack with ground truth.
    Synth(SynthArgs),
    /// Rank candidate registration channels.
    Score(ScoreArgs),
    /// SSIM between two stored grids.
    Ssim { a: PathBuf, b: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseModelArg {
    Affine,
    Similarity,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlendArg {
    Feather,
    Nearest,
}

#[derive(Args)]
struct StitchArgs {
    /// Stack manifest.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from a stored configuration or report; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel to stitch (default: first manifest channel).
    #[arg(long)]
    primary: Option<String>,
    /// Channel name, `deriv_x`, `auto` or `primary`.
    #[arg(long)]
    secondary: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long = "reproj-px")]
    reproj_px: Option<f64>,
    /// Minimum pair confidence.
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "pose-model", value_enum)]
    pose_model: Option<PoseModelArg>,
    /// Huber threshold in pixels for robust pose refinement.
    #[arg(long)]
    huber: Option<f64>,
    #[arg(long, value_enum)]
    blend: Option<BlendArg>,
    #[arg(long = "no-flatten")]
    no_flatten: bool,
    #[arg(long = "no-plane")]
    no_plane: bool,
    #[arg(long = "no-offset-reconcile")]
    no_offset_reconcile: bool,
    /// Also write detected features to features.json.
    #[arg(long = "dump-features")]
    dump_features: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    cols: usize,
    #[arg(long = "tile-size", default_value_t = 512)]
    tile_size: usize,
    #[arg(long, default_value_t = 0.10)]
    overlap: f64,
    /// Maximum translation jitter in pixels.
    #[arg(long = "jitter-px", default_value_t = 5.0)]
    jitter_px: f64,
    /// Maximum rotation jitter in degrees.
    #[arg(long = "jitter-deg", default_value_t = 1.0)]
    jitter_deg: f64,
    /// Fraction of texture removed from the primary channel.
    #[arg(long, default_value_t = 0.9)]
    sparsity: f64,
    #[arg(long = "line-noise", default_value_t = 0.05)]
    line_noise: f64,
    /// Texture rods per 10^4 square pixels.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    primary: Option<String>,
}

fn stitch_config(a: StitchArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            // A report embeds the configuration under "parameters".
            let params = value.get("parameters").cloned().unwrap_or(value);
            let mut cfg: RunConfig = serde_json::from_value(params)?;
            cfg.out = a.out.clone();
            cfg
        }
        None => {
            let input = a
                .input
                .clone()
                .ok_or_else(|| Error::InvalidConfig("--input is required without --config".into()))?;
            RunConfig::new(input, a.out.clone())
        }
    };
    if let Some(input) = a.input {
        cfg.input = input;
    }
    if let Some(p) = a.primary {
        cfg.primary = Some(ChannelId::new(p)?);
    }
    if let Some(s) = a.secondary {
        cfg.secondary = s.parse::<SecondaryChoice>()?;
    }
    if let Some(v) = a.ratio {
        cfg.matching.ratio = v;
    }
    if let Some(v) = a.reproj_px {
        cfg.matching.reproj_px = v;
    }
    if let Some(v) = a.confidence {
        cfg.matching.min_confidence = v;
    }
    if let Some(v) = a.seed {
        cfg.matching.seed = v;
    }
    if let Some(m) = a.pose_model {
        cfg.pose.model = match m {
            PoseModelArg::Affine => PoseModel::Affine,
            PoseModelArg::Similarity => PoseModel::Similarity,
        };
    }
    if a.huber.is_some() {
        cfg.pose.huber_delta = a.huber;
    }
    if let Some(b) = a.blend {
        cfg.blend.mode = match b {
            BlendArg::Feather => BlendMode::Feather,
            BlendArg::Nearest => BlendMode::Nearest,
        };
    }
    cfg.preprocess.flatten &= !a.no_flatten;
    cfg.preprocess.plane &= !a.no_plane;
    cfg.offset_reconcile &= !a.no_offset_reconcile;
    cfg.dump_features |= a.dump_features;
    Ok(cfg)
}

fn stitch(a: StitchArgs) -> Result<()> {
    let cfg = stitch_config(a)?;
    let outcome = run_stitch(&cfg)?;
    let r = &outcome.report;
    println!(
        "stitched {} tiles via {} (residual {:.3} px)",
        r.layout.members.len(),
        r.chosen_channel,
        r.layout.residual_rms_px
    );
    for w in &r.warnings {
        eprintln!("WARNING: {w}");
    }
    if let (Some(mean), Some(max)) = (r.metrics.reg_error_mean_px, r.metrics.reg_error_max_px) {
        println!("registration error vs ground truth: mean {mean:.3} px, max {max:.3} px");
    }
    println!("outputs written to {}", cfg.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut recipe = BlobRecipe::default();
    if let Some(d) = a.density {
        recipe.texture_density = d;
    }
    let spec = SynthSpec {
        master: MasterSource::Recipe(recipe),
        rows: a.rows,
        cols: a.cols,
        tile_size: a.tile_size,
        overlap_frac: a.overlap,
        max_translation_jitter: a.jitter_px,
        max_rotation_jitter: a.jitter_deg.to_radians(),
        primary_sparsity: a.sparsity,
        line_noise_amp: a.line_noise,
        seed: a.seed,
    };
    let (stack, truth) = generate_stack(&spec)?;
    let manifest = write_synth(&stack, &truth, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let stack = load_stack(&a.input)?;
    let mut cfg = RunConfig::new(&a.input, PathBuf::new());
    cfg.primary = a.primary.map(ChannelId::new).transpose()?;
    let ranking = score_channels(&stack, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&ranking)?);
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf) -> Result<()> {
    let (ga, _) = load_grid(&a)?;
    let (gb, _) = load_grid(&b)?;
    println!("{:.6}", ssim(&ga, &gb)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stitch(a) => stitch(a),
        Command::Synth(a) => synth(a),
        Command::Score(a) => score(a),
        Command::Ssim { a, b } => compare(a, b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
