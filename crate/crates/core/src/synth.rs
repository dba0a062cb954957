//! Ground-truth tile stacks cut from a synthetic or supplied master image.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::bilinear;
use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, Point};
use crate::grid::Grid;
use crate::preprocess::derive_x;
use crate::tile_store::{save_stack, write_json, ChannelId, Tile, TileStack};

pub const PRIMARY_CHANNEL: &str = "topo";
pub const SECONDARY_CHANNEL: &str = "amplitude";
pub const TRUTH_FILE: &str = "truth.json";
/// Manifest `meta` key holding the truth file path, relative to the manifest.
pub const TRUTH_META_KEY: &str = "ground_truth";

/// Parameters of the procedural master: broad smooth mounds carrying rod-like
/// texture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobRecipe {
    /// Rods per 10^4 square pixels.
    pub texture_density: f64,
    pub texture_amplitude: (f64, f64),
    /// Range of the rod's short-axis sigma; the long axis is 1.2x to 2x longer.
    pub texture_sigma: (f64, f64),
    /// Mounds per 10^6 square pixels.
    pub mound_density: f64,
    pub mound_sigma: (f64, f64),
    pub mound_height: (f64, f64),
}

impl Default for BlobRecipe {
    fn default() -> Self {
        Self {
            texture_density: 30.0,
            texture_amplitude: (0.15, 0.3),
            texture_sigma: (1.5, 2.5),
            mound_density: 60.0,
            mound_sigma: (30.0, 60.0),
            mound_height: (0.05, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasterSource {
    Recipe(BlobRecipe),
    /// A supplied image; it is split into a smooth base (Gaussian blur) and texture.
    #[serde(skip)]
    Grid(Grid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub master: MasterSource,
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub overlap_frac: f64,
    pub max_translation_jitter: f64,
    /// Radians.
    pub max_rotation_jitter: f64,
    pub primary_sparsity: f64,
    pub line_noise_amp: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            master: MasterSource::Recipe(BlobRecipe::default()),
            rows: 3,
            cols: 3,
            tile_size: 512,
            overlap_frac: 0.10,
            max_translation_jitter: 5.0,
            max_rotation_jitter: 1f64.to_radians(),
            primary_sparsity: 0.9,
            line_noise_amp: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Nominal spacing between neighbouring tile origins.
    pub fn step(&self) -> usize {
        (self.tile_size as f64 * (1.0 - self.overlap_frac)).round() as usize
    }

    /// Nominal overlap area of two side neighbours.
    pub fn nominal_overlap_area(&self) -> f64 {
        (self.tile_size * (self.tile_size - self.step())) as f64
    }

    fn span(&self) -> (usize, usize) {
        let step = self.step();
        (
            step * (self.cols - 1) + self.tile_size,
            step * (self.rows - 1) + self.tile_size,
        )
    }

    /// Border kept around the nominal grid so jittered tiles stay inside the master.
    fn margin(&self) -> usize {
        let reach = self.tile_size as f64 * std::f64::consts::FRAC_1_SQRT_2 * self.max_rotation_jitter.sin().abs();
        (self.max_translation_jitter + reach).ceil() as usize + 2
    }

    /// Master image dimensions.
    pub fn master_dims(&self) -> (usize, usize) {
        match &self.master {
            MasterSource::Grid(g) => g.dims(),
            MasterSource::Recipe(_) => {
                let (w, h) = self.span();
                (w + 2 * self.margin(), h + 2 * self.margin())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be >= 1");
        }
        if self.tile_size < 16 {
            return bad("tile_size must be >= 16");
        }
        if !(self.overlap_frac > 0.0 && self.overlap_frac < 0.5) {
            return bad("overlap_frac must lie in (0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.primary_sparsity) {
            return bad("primary_sparsity must lie in [0, 1]");
        }
        for (v, name) in [
            (self.max_translation_jitter, "max_translation_jitter"),
            (self.max_rotation_jitter, "max_rotation_jitter"),
            (self.line_noise_amp, "line_noise_amp"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0")));
            }
        }
        if self.max_rotation_jitter > 0.2 {
            return bad("max_rotation_jitter must be <= 0.2 rad");
        }
        if let MasterSource::Recipe(r) = &self.master {
            let ranges = [r.texture_amplitude, r.texture_sigma, r.mound_sigma, r.mound_height];
            if r.texture_density < 0.0 || r.mound_density < 0.0 || ranges.iter().any(|(a, b)| !(a <= b && *a >= 0.0)) {
                return bad("invalid blob recipe");
            }
            if r.texture_sigma.0 <= 0.0 || r.mound_sigma.0 <= 0.0 {
                return bad("blob sigmas must be > 0");
            }
        }
        let (w, h) = self.span();
        let (mw, mh) = self.master_dims();
        if w > mw || h > mh {
            return Err(Error::InvalidSpec(format!(
                "grid spans {w}x{h} pixels but the master is {mw}x{mh}"
            )));
        }
        Ok(())
    }
}

/// Known layout of a generated stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tile_size: usize,
    /// Per tile, maps tile pixel coordinates into master coordinates.
    pub true_poses: Vec<AffineTransform>,
    /// Tile pairs `(a, b)`, `a < b`, whose footprints overlap substantially.
    pub adjacency: Vec<(usize, usize)>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// One anisotropic Gaussian bump.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    x: f64,
    y: f64,
    amp: f64,
    /// Inverse covariance entries.
    qa: f64,
    qb: f64,
    qc: f64,
    /// Support radius.
    reach: f64,
}

impl Blob {
    fn new(x: f64, y: f64, amp: f64, s_long: f64, s_short: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (il, is) = (1.0 / (s_long * s_long), 1.0 / (s_short * s_short));
        Self {
            x,
            y,
            amp,
            qa: c * c * il + s * s * is,
            qb: c * s * (il - is),
            qc: s * s * il + c * c * is,
            reach: 4.5 * s_long,
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.x, y - self.y);
        let q = self.qa * dx * dx + 2.0 * self.qb * dx * dy + self.qc * dy * dy;
        if q > 20.25 {
            0.0
        } else {
            self.amp * (-0.5 * q).exp()
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn rods(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    count: usize,
    amp: (f64, f64),
    sigma: (f64, f64),
    signed: bool,
) -> Vec<Blob> {
    (0..count)
        .map(|_| {
            let x = rng.gen_range(0.0..w as f64);
            let y = rng.gen_range(0.0..h as f64);
            let mut a = uniform(rng, amp);
            if signed && rng.gen_bool(0.5) {
                a = -a;
            }
            let short = uniform(rng, sigma);
            let long = short * rng.gen_range(1.2..2.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            Blob::new(x, y, a, long, short, theta)
        })
        .collect()
}

fn render(blobs: &[Blob], w: usize, h: usize) -> Grid {
    let mut g = Grid::zeros(w, h);
    for b in blobs {
        let c0 = (b.x - b.reach).floor().max(0.0) as usize;
        let r0 = (b.y - b.reach).floor().max(0.0) as usize;
        let c1 = ((b.x + b.reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let r1 = ((b.y + b.reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let v = g.get(r, c) + b.eval(c as f64, r as f64);
                g.set(r, c, v);
            }
        }
    }
    g
}

/// Randomly placed rod-like Gaussian bumps on a zero background, amplitudes in
/// `[0.5, 1.0]`.
pub fn blob_master(width: usize, height: usize, blob_count: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = rods(&mut rng, width, height, blob_count, (0.5, 1.0), (1.5, 4.0), false);
    render(&blobs, width, height)
}

/// Master content split into a smooth base and fine texture.
enum Master {
    Blobs { mounds: Vec<Blob>, texture: Vec<Blob> },
    Sampled { base: Grid, texture: Grid },
}

const BASE_SIGMA: f64 = 8.0;

fn gaussian_smooth(g: &Grid, sigma: f64) -> Grid {
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let pass = |src: &Grid, horizontal: bool| {
        let (w, h) = src.dims();
        Grid::from_fn(w, h, |r, c| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, kw) in kernel.iter().enumerate() {
                let off = k as isize - radius;
                let (rr, cc) = if horizontal {
                    (r as isize, c as isize + off)
                } else {
                    (r as isize + off, c as isize)
                };
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                if let Some(v) = src.value(rr as usize, cc as usize) {
                    acc += kw * v;
                    wsum += kw;
                }
            }
            if wsum > 0.0 && src.is_valid(r, c) {
                acc / wsum
            } else {
                f64::NAN
            }
        })
    };
    pass(&pass(g, true), false)
}

impl Master {
    fn build(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        match &spec.master {
            MasterSource::Grid(g) => {
                let base = gaussian_smooth(g, BASE_SIGMA);
                let texture = Grid::from_fn(g.width(), g.height(), |r, c| g.get(r, c) - base.get(r, c));
                Master::Sampled { base, texture }
            }
            MasterSource::Recipe(rec) => {
                let (w, h) = spec.master_dims();
                let area = (w * h) as f64;
                let n_mounds = (rec.mound_density * area / 1e6).round() as usize;
                let n_tex = (rec.texture_density * area / 1e4).round() as usize;
                let mounds = (0..n_mounds)
                    .map(|_| {
                        let x = rng.gen_range(0.0..w as f64);
                        let y = rng.gen_range(0.0..h as f64);
                        let a = uniform(rng, rec.mound_height);
                        let s = uniform(rng, rec.mound_sigma);
                        Blob::new(x, y, a, s * rng.gen_range(1.0..1.5), s, rng.gen_range(0.0..std::f64::consts::PI))
                    })
                    .collect();
                let texture = rods(rng, w, h, n_tex, rec.texture_amplitude, rec.texture_sigma, true);
                Master::Blobs { mounds, texture }
            }
        }
    }

    /// Base and texture layers of one tile rendered under `pose`.
    fn render_tile(&self, pose: &AffineTransform, n: usize) -> (Grid, Grid) {
        match self {
            Master::Sampled { base, texture } => {
                let sample = |src: &Grid| {
                    Grid::from_fn(n, n, |r, c| {
                        let (x, y) = pose.apply((c as f64, r as f64));
                        bilinear(src, x, y).unwrap_or(f64::NAN)
                    })
                };
                (sample(base), sample(texture))
            }
            Master::Blobs { mounds, texture } => (splat(mounds, pose, n), splat(texture, pose, n)),
        }
    }
}

/// Evaluates the blobs at the master position of every tile pixel.
fn splat(blobs: &[Blob], pose: &AffineTransform, n: usize) -> Grid {
    let inv = pose.inverse().expect("rigid pose");
    let mut g = Grid::zeros(n, n);
    let lim = n as f64 - 1.0;
    for b in blobs {
        let (cx, cy) = inv.apply((b.x, b.y));
        // Rigid poses preserve distances, so the support stays a disc of `reach`.
        if cx + b.reach < 0.0 || cy + b.reach < 0.0 || cx - b.reach > lim || cy - b.reach > lim {
            continue;
        }
        let c0 = (cx - b.reach).floor().clamp(0.0, lim) as usize;
        let c1 = (cx + b.reach).ceil().clamp(0.0, lim) as usize;
        let r0 = (cy - b.reach).floor().clamp(0.0, lim) as usize;
        let r1 = (cy + b.reach).ceil().clamp(0.0, lim) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (x, y) = pose.apply((c as f64, r as f64));
                let v = g.get(r, c) + b.eval(x, y);
                g.set(r, c, v);
            }
        }
    }
    g
}

/// Convex polygon intersection area (Sutherland-Hodgman clip + shoelace).
pub fn polygon_intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let mut out: Vec<Point> = a.to_vec();
    let sb = signed_area(b).signum();
    for i in 0..b.len() {
        if out.is_empty() {
            break;
        }
        let (p, q) = (b[i], b[(i + 1) % b.len()]);
        let side = |x: Point| sb * ((q.0 - p.0) * (x.1 - p.1) - (q.1 - p.1) * (x.0 - p.0));
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (cur, nxt) = (input[j], input[(j + 1) % input.len()]);
            let (sc, sn) = (side(cur), side(nxt));
            if sc >= 0.0 {
                out.push(cur);
            }
            if (sc >= 0.0) != (sn >= 0.0) {
                let t = sc / (sc - sn);
                out.push((cur.0 + t * (nxt.0 - cur.0), cur.1 + t * (nxt.1 - cur.1)));
            }
        }
    }
    signed_area(&out).abs()
}

fn signed_area(p: &[Point]) -> f64 {
    if p.len() < 3 {
        return 0.0;
    }
    0.5 * (0..p.len())
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % p.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

/// Pixel-area footprint of a tile in master coordinates.
pub fn footprint(pose: &AffineTransform, tile_size: usize) -> [Point; 4] {
    let e = tile_size as f64 - 0.5;
    [(-0.5, -0.5), (e, -0.5), (e, e), (-0.5, e)].map(|p| pose.apply(p))
}

/// Fraction of the nominal side overlap a pair must share to count as adjacent.
/// Diagonal neighbours, which only share a corner patch, fall below it.
pub const ADJACENCY_MIN_FRACTION: f64 = 0.25;

/// Tiles, channel list and ground truth for a spec.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Tile>, Vec<ChannelId>, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.tile_size;
    let step = spec.step() as f64;
    let (mw, mh) = spec.master_dims();
    let (sw, sh) = spec.span();
    let (ox, oy) = (((mw - sw) / 2) as f64, ((mh - sh) / 2) as f64);
    let center = (n as f64 - 1.0) / 2.0;

    let mut poses = Vec::with_capacity(spec.rows * spec.cols);
    let mut hints = Vec::with_capacity(spec.rows * spec.cols);
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let jx = if spec.max_translation_jitter > 0.0 {
                rng.gen_range(-spec.max_translation_jitter..=spec.max_translation_jitter)
            } else {
                0.0
            };
            let jy = if spec.max_translation_jitter > 0.0 {
                rng.gen_range(-spec.max_translation_jitter..=spec.max_translation_jitter)
            } else {
                0.0
            };
            let theta = if spec.max_rotation_jitter > 0.0 {
                rng.gen_range(-spec.max_rotation_jitter..=spec.max_rotation_jitter)
            } else {
                0.0
            };
            let (nx, ny) = (ox + col as f64 * step, oy + row as f64 * step);
            // Rotation about the tile centre, then placement.
            let rot = AffineTransform::rigid(theta, 0.0, 0.0);
            let (rcx, rcy) = rot.apply((center, center));
            poses.push(AffineTransform::rigid(theta, nx + jx + center - rcx, ny + jy + center - rcy));
            hints.push((row as f64, col as f64));
        }
    }
    for p in &poses {
        for (x, y) in footprint(p, n) {
            if x < 0.0 || y < 0.0 || x > mw as f64 - 1.0 || y > mh as f64 - 1.0 {
                return Err(Error::InvalidSpec("jittered tile leaves the master image".into()));
            }
        }
    }

    let master = Master::build(spec, &mut rng);
    let primary = ChannelId::new(PRIMARY_CHANNEL)?;
    let secondary = ChannelId::new(SECONDARY_CHANNEL)?;
    let tiles: Vec<Tile> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let (base, texture) = master.render_tile(pose, n);
            let full = Grid::from_fn(n, n, |r, c| base.get(r, c) + texture.get(r, c));
            let keep = 1.0 - spec.primary_sparsity;
            let mut line_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64 + 1));
            let offsets: Vec<f64> = (0..n)
                .map(|_| {
                    if spec.line_noise_amp > 0.0 {
                        line_rng.gen_range(-spec.line_noise_amp..=spec.line_noise_amp)
                    } else {
                        0.0
                    }
                })
                .collect();
            let topo = Grid::from_fn(n, n, |r, c| base.get(r, c) + keep * texture.get(r, c) + offsets[r]);
            let amplitude = derive_x(&full)?;
            let mut tile = Tile::new(i)
                .with_channel(primary.clone(), topo)
                .with_channel(secondary.clone(), amplitude);
            tile.origin_hint = Some(hints[i]);
            Ok(tile)
        })
        .collect::<Result<_>>()?;

    let threshold = ADJACENCY_MIN_FRACTION * spec.nominal_overlap_area();
    let prints: Vec<[Point; 4]> = poses.iter().map(|p| footprint(p, n)).collect();
    let mut adjacency = Vec::new();
    for a in 0..prints.len() {
        for b in a + 1..prints.len() {
            if polygon_intersection_area(&prints[a], &prints[b]) >= threshold {
                adjacency.push((a, b));
            }
        }
    }
    let truth = GroundTruth {
        tile_size: n,
        true_poses: poses,
        adjacency,
    };
    Ok((tiles, vec![primary, secondary], truth))
}

/// [`generate`] packaged as a validated stack (at least two tiles).
pub fn generate_stack(spec: &SynthSpec) -> Result<(TileStack, GroundTruth)> {
    let (tiles, channels, truth) = generate(spec)?;
    let meta = serde_json::json!({
        "synth": serde_json::to_value(spec).unwrap_or(serde_json::Value::Null),
        TRUTH_META_KEY: TRUTH_FILE,
    });
    Ok((TileStack::new(tiles, channels, meta)?, truth))
}

/// Writes the stack and its truth file into `dir`; returns the manifest path.
pub fn write_synth(stack: &TileStack, truth: &GroundTruth, dir: &Path) -> Result<PathBuf> {
    let manifest = save_stack(stack, dir)?;
    truth.save(&dir.join(TRUTH_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests;
