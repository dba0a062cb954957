//! Scale-invariant keypoints and gradient-histogram descriptors (SIFT).
//!
//! The detector follows the classic difference-of-Gaussians construction: a 2x
//! upsampled seed image, `scales_per_octave + 3` Gaussian layers per octave,
//! strict 26-neighbour extrema, quadratic subpixel refinement, contrast and
//! edge-response rejection, 36-bin orientation histograms, and a 4x4x8
//! descriptor with the 0.2 clamp-and-renormalize step.
//!
//! Intensities are divided by 255 before scale-space construction. A refined
//! extremum is kept when `|D(x̂)| * scales_per_octave >= contrast_threshold`; that
//! product is what [`Keypoint::response`] reports.

mod descriptor;
pub mod scale_space;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ByteGrid;
use crate::tile_store::ChannelId;

pub use descriptor::{normalize_descriptor, DESCRIPTOR_LEN};
use scale_space::{build_pyramid, gaussian_blur, upsample2, Plane, Pyramid};

/// Images larger than this on either side are not upsampled.
pub const MAX_UPSAMPLE_SIDE: usize = 2048;

const IMAGE_BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
/// Assumed blur of the input image, in input pixels.
const INPUT_BLUR: f64 = 0.5;
/// Maximum fraction of a descriptor window allowed to fall on invalid pixels.
const MAX_INVALID_WINDOW_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub contrast_threshold: f64,
    pub edge_threshold: f64,
    /// `None` selects `floor(log2(min(H, W))) - 3` (at least 1).
    pub octaves: Option<usize>,
    pub scales_per_octave: usize,
    pub sigma0: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.015,
            edge_threshold: 15.0,
            octaves: None,
            scales_per_octave: 3,
            sigma0: 1.6,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_threshold > 0.0) {
            return Err(Error::InvalidParams("contrast_threshold must be > 0".into()));
        }
        if !(self.edge_threshold > 1.0) {
            return Err(Error::InvalidParams("edge_threshold must be > 1".into()));
        }
        if self.octaves == Some(0) {
            return Err(Error::InvalidParams("octaves must be >= 1".into()));
        }
        if self.scales_per_octave == 0 {
            return Err(Error::InvalidParams("scales_per_octave must be >= 1".into()));
        }
        if !(self.sigma0 > INPUT_BLUR * 2.0) {
            return Err(Error::InvalidParams("sigma0 must exceed the assumed input blur".into()));
        }
        Ok(())
    }

    pub fn octaves_for(&self, width: usize, height: usize) -> usize {
        let min_side = width.min(height).max(1);
        let default = (min_side as f64).log2().floor() as isize - 3;
        self.octaves.unwrap_or(default.max(1) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Blur scale in input pixels.
    pub scale: f64,
    /// Radians in `[0, 2π)`, measured from +x towards +y (image rows grow downward).
    pub orientation: f64,
    pub response: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub tile_index: usize,
    pub channel: ChannelId,
    pub keypoints: Vec<Keypoint>,
    /// Row-major `keypoints.len() x DESCRIPTOR_LEN`.
    pub descriptors: Vec<f32>,
    /// Whether the seed image was upsampled 2x.
    pub upsampled: bool,
}

impl FeatureSet {
    pub fn empty(tile_index: usize, channel: ChannelId) -> Self {
        Self {
            tile_index,
            channel,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            upsampled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * DESCRIPTOR_LEN..(i + 1) * DESCRIPTOR_LEN]
    }

    /// Appends a keypoint with its descriptor.
    pub fn push(&mut self, kp: Keypoint, desc: &[f32]) {
        assert_eq!(desc.len(), DESCRIPTOR_LEN);
        self.keypoints.push(kp);
        self.descriptors.extend_from_slice(desc);
    }
}

/// Extremum found in the DoG stack, refined to subpixel precision.
#[derive(Debug, Clone, Copy)]
struct Extremum {
    octave: usize,
    layer: usize,
    x: usize,
    y: usize,
    off_x: f32,
    off_y: f32,
    off_s: f32,
    response: f32,
}

/// Detects keypoints and computes descriptors on a quantized image.
pub fn detect(img: &ByteGrid, params: &DetectorParams) -> Result<FeatureSet> {
    detect_channel(img, params, 0, ChannelId::new("image").expect("literal"))
}

/// [`detect`] with the tile index and channel recorded in the result.
pub fn detect_channel(
    img: &ByteGrid,
    params: &DetectorParams,
    tile_index: usize,
    channel: ChannelId,
) -> Result<FeatureSet> {
    params.validate()?;
    let (w, h) = (img.width, img.height);
    if w < 16 || h < 16 {
        return Err(Error::ImageTooSmall { width: w, height: h });
    }

    let upsampled = w.max(h) <= MAX_UPSAMPLE_SIDE;
    let factor = if upsampled { 2.0 } else { 1.0 };
    let mut base = Plane::new(w, h);
    for (o, &p) in base.data.iter_mut().zip(&img.pixels) {
        *o = f32::from(p) / 255.0;
    }
    if upsampled {
        base = upsample2(&base);
    }
    let assumed = INPUT_BLUR * factor;
    let seed = gaussian_blur(&base, (params.sigma0 * params.sigma0 - assumed * assumed).sqrt());

    let mut octaves = params.octaves_for(w, h);
    // Each octave must leave room for the extremum border and 3x3 stencils.
    let min_side = (seed.width.min(seed.height)) as f64;
    let max_octaves = ((min_side / (2.0 * IMAGE_BORDER as f64 + 3.0)).log2().floor() as isize + 1).max(1);
    octaves = octaves.min(max_octaves as usize);

    let pyramid = build_pyramid(seed, octaves, params.scales_per_octave, params.sigma0);
    let extrema = find_extrema(&pyramid, params);

    let has_holes = img.valid.iter().any(|v| !v);
    let mut out: Vec<(Keypoint, [f32; DESCRIPTOR_LEN])> = Vec::new();
    for e in extrema {
        let s = pyramid.scales as f32;
        let sigma_oct = pyramid.sigma0 as f32 * 2f32.powf((e.layer as f32 + e.off_s) / s);
        let octave_scale = 2f64.powi(e.octave as i32) / factor;
        let x = (e.x as f64 + f64::from(e.off_x)) * octave_scale;
        let y = (e.y as f64 + f64::from(e.off_y)) * octave_scale;
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            continue;
        }
        let scale = f64::from(sigma_oct) * octave_scale;
        if has_holes && window_invalid_fraction(img, x, y, scale) > MAX_INVALID_WINDOW_FRACTION {
            continue;
        }
        let gimg = &pyramid.gaussians[e.octave][e.layer];
        for angle in descriptor::dominant_orientations(gimg, e.x, e.y, sigma_oct) {
            let desc = descriptor::describe(
                gimg,
                e.x as f32 + e.off_x,
                e.y as f32 + e.off_y,
                sigma_oct,
                angle,
            );
            out.push((
                Keypoint {
                    x,
                    y,
                    scale,
                    orientation: f64::from(angle),
                    response: f64::from(e.response),
                },
                desc,
            ));
        }
    }

    out.sort_by(|(a, _), (b, _)| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.orientation.total_cmp(&b.orientation))
            .then(a.scale.total_cmp(&b.scale))
    });

    let mut fs = FeatureSet::empty(tile_index, channel);
    fs.upsampled = upsampled;
    for (kp, d) in &out {
        fs.push(*kp, d);
    }
    Ok(fs)
}

/// Descriptor half-width in input pixels for a keypoint of the given scale.
pub fn descriptor_radius(scale: f64) -> f64 {
    3.0 * scale * std::f64::consts::SQRT_2 * 2.5
}

fn window_invalid_fraction(img: &ByteGrid, x: f64, y: f64, scale: f64) -> f64 {
    let r = descriptor_radius(scale).ceil() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let (mut total, mut bad) = (0usize, 0usize);
    for yy in (cy - r).max(0)..=(cy + r).min(img.height as isize - 1) {
        for xx in (cx - r).max(0)..=(cx + r).min(img.width as isize - 1) {
            total += 1;
            if !img.valid[yy as usize * img.width + xx as usize] {
                bad += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        bad as f64 / total as f64
    }
}

fn find_extrema(p: &Pyramid, params: &DetectorParams) -> Vec<Extremum> {
    let s = p.scales;
    let prefilter = (0.5 * params.contrast_threshold / s as f64) as f32;
    let mut found = Vec::new();
    for (o, dogs) in p.dogs.iter().enumerate() {
        let (w, h) = (dogs[0].width, dogs[0].height);
        if w <= 2 * IMAGE_BORDER || h <= 2 * IMAGE_BORDER {
            continue;
        }
        for layer in 1..=s {
            let (prev, cur, next) = (&dogs[layer - 1], &dogs[layer], &dogs[layer + 1]);
            for y in IMAGE_BORDER..h - IMAGE_BORDER {
                for x in IMAGE_BORDER..w - IMAGE_BORDER {
                    let v = cur.at(x, y);
                    if v.abs() <= prefilter || !is_strict_extremum(prev, cur, next, x, y, v) {
                        continue;
                    }
                    if let Some(e) = refine(dogs, o, layer, x, y, s, params) {
                        found.push(e);
                    }
                }
            }
        }
    }
    found
}

fn is_strict_extremum(prev: &Plane, cur: &Plane, next: &Plane, x: usize, y: usize, v: f32) -> bool {
    let mut is_max = true;
    let mut is_min = true;
    for (k, img) in [prev, cur, next].into_iter().enumerate() {
        for yy in y - 1..=y + 1 {
            let row = img.row(yy);
            for xx in x - 1..=x + 1 {
                if k == 1 && xx == x && yy == y {
                    continue;
                }
                let n = row[xx];
                is_max &= v > n;
                is_min &= v < n;
            }
            if !is_max && !is_min {
                return false;
            }
        }
    }
    is_max || is_min
}

fn refine(
    dogs: &[Plane],
    octave: usize,
    layer: usize,
    x: usize,
    y: usize,
    scales: usize,
    params: &DetectorParams,
) -> Option<Extremum> {
    let (w, h) = (dogs[0].width, dogs[0].height);
    let (mut layer, mut x, mut y) = (layer, x, y);
    for _ in 0..MAX_REFINE_STEPS {
        let (prev, cur, next) = (&dogs[layer - 1], &dogs[layer], &dogs[layer + 1]);
        let v = cur.at(x, y);
        let g = [
            0.5 * (cur.at(x + 1, y) - cur.at(x - 1, y)),
            0.5 * (cur.at(x, y + 1) - cur.at(x, y - 1)),
            0.5 * (next.at(x, y) - prev.at(x, y)),
        ];
        let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - 2.0 * v;
        let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - 2.0 * v;
        let dss = next.at(x, y) + prev.at(x, y) - 2.0 * v;
        let dxy = 0.25 * (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) + cur.at(x - 1, y - 1));
        let dxs = 0.25 * (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) + prev.at(x - 1, y));
        let dys = 0.25 * (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) + prev.at(x, y - 1));
        let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        let off = solve3(hess, g)?;
        let off = [-off[0], -off[1], -off[2]];

        if off.iter().all(|o| o.abs() < 0.5) {
            let contrast = v + 0.5 * (g[0] * off[0] + g[1] * off[1] + g[2] * off[2]);
            let response = contrast.abs() * scales as f32;
            if f64::from(response) < params.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = params.edge_threshold as f32;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            return Some(Extremum {
                octave,
                layer,
                x,
                y,
                off_x: off[0],
                off_y: off[1],
                off_s: off[2],
                response,
            });
        }
        if off.iter().any(|o| !o.is_finite() || o.abs() > 1e6) {
            return None;
        }
        let nx = x as isize + off[0].round() as isize;
        let ny = y as isize + off[1].round() as isize;
        let nl = layer as isize + off[2].round() as isize;
        if nl < 1
            || nl > scales as isize
            || nx < IMAGE_BORDER as isize
            || nx >= (w - IMAGE_BORDER) as isize
            || ny < IMAGE_BORDER as isize
            || ny >= (h - IMAGE_BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    None
}

/// Solves a 3x3 system by Cramer's rule; `None` when singular.
fn solve3(m: [[f32; 3]; 3], b: [f32; 3]) -> Option<[f32; 3]> {
    let m: [[f64; 3]; 3] = m.map(|r| r.map(f64::from));
    let b = b.map(f64::from);
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0f32; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut mi = m;
        for r in 0..3 {
            mi[r][i] = b[r];
        }
        *o = (det(&mi) / d) as f32;
    }
    Some(out)
}
