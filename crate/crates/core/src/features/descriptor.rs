//! Orientation histograms and 4x4x8 gradient descriptors.

use std::f32::consts::TAU;

use super::scale_space::Plane;

pub const DESCRIPTOR_LEN: usize = 128;

const ORI_BINS: usize = 36;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const ORI_RADIUS_FACTOR: f32 = 3.0 * ORI_SIGMA_FACTOR;
pub const ORI_PEAK_RATIO: f32 = 0.8;

const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE_FACTOR: f32 = 3.0;
const DESC_MAG_CAP: f32 = 0.2;

#[inline]
fn gradient(img: &Plane, x: usize, y: usize) -> (f32, f32) {
    let dx = img.at(x + 1, y) - img.at(x - 1, y);
    let dy = img.at(x, y + 1) - img.at(x, y - 1);
    (dx, dy)
}

/// Dominant gradient orientations (radians in `[0, 2π)`) around `(x, y)` in the
/// octave frame, each peak within [`ORI_PEAK_RATIO`] of the maximum.
pub fn dominant_orientations(img: &Plane, x: usize, y: usize, sigma: f32) -> Vec<f32> {
    let radius = (ORI_RADIUS_FACTOR * sigma).round() as isize;
    let weight_scale = -1.0 / (2.0 * (ORI_SIGMA_FACTOR * sigma).powi(2));
    let mut raw = [0.0f32; ORI_BINS];
    for j in -radius..=radius {
        let yy = y as isize + j;
        if yy <= 0 || yy >= img.height as isize - 1 {
            continue;
        }
        for i in -radius..=radius {
            let xx = x as isize + i;
            if xx <= 0 || xx >= img.width as isize - 1 {
                continue;
            }
            let (dx, dy) = gradient(img, xx as usize, yy as usize);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let w = ((i * i + j * j) as f32 * weight_scale).exp();
            let ang = dy.atan2(dx).rem_euclid(TAU);
            let bin = ((ang * ORI_BINS as f32 / TAU).round() as usize) % ORI_BINS;
            raw[bin] += w * mag;
        }
    }

    let n = ORI_BINS;
    let mut hist = [0.0f32; ORI_BINS];
    for (i, h) in hist.iter_mut().enumerate() {
        let at = |d: isize| raw[(i as isize + d).rem_euclid(n as isize) as usize];
        *h = (at(-2) + at(2)) * (1.0 / 16.0) + (at(-1) + at(1)) * (4.0 / 16.0) + at(0) * (6.0 / 16.0);
    }
    let max = hist.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for k in 0..n {
        let l = hist[(k + n - 1) % n];
        let r = hist[(k + 1) % n];
        let c = hist[k];
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let denom = l - 2.0 * c + r;
            let offset = if denom != 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
            let bin = (k as f32 + offset).rem_euclid(n as f32);
            let ang = (bin * TAU / n as f32).rem_euclid(TAU);
            // rem_euclid can return exactly TAU through rounding.
            out.push(if ang >= TAU { 0.0 } else { ang });
        }
    }
    out
}

/// Gradient histogram descriptor at `(x, y)` (octave frame) with scale `sigma`
/// (octave pixels) and orientation `angle`. Returns a unit-norm vector after the
/// clamp-and-renormalize step, or all zeros for a flat patch.
pub fn describe(img: &Plane, x: f32, y: f32, sigma: f32, angle: f32) -> [f32; DESCRIPTOR_LEN] {
    let d = DESC_WIDTH as f32;
    let hist_width = DESC_SCALE_FACTOR * sigma;
    let radius = ((hist_width * std::f32::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize)
        .min(((img.width * img.width + img.height * img.height) as f32).sqrt() as isize);
    let (sin_t, cos_t) = angle.sin_cos();
    let xi = x.round() as isize;
    let yi = y.round() as isize;
    let weight_scale = -1.0 / (0.5 * d * d);

    // (DESC_WIDTH + 2)^2 spatial cells so interpolation never needs a bounds check.
    let side = DESC_WIDTH + 2;
    let mut hist = vec![0.0f32; side * side * DESC_BINS];

    for j in -radius..=radius {
        let yy = yi + j;
        if yy <= 0 || yy >= img.height as isize - 1 {
            continue;
        }
        for i in -radius..=radius {
            let xx = xi + i;
            if xx <= 0 || xx >= img.width as isize - 1 {
                continue;
            }
            // Offset from the subpixel keypoint, rotated into the keypoint frame.
            let ox = xx as f32 - x;
            let oy = yy as f32 - y;
            let rx = (cos_t * ox + sin_t * oy) / hist_width;
            let ry = (-sin_t * ox + cos_t * oy) / hist_width;
            let cbin = rx + d / 2.0 - 0.5;
            let rbin = ry + d / 2.0 - 0.5;
            if cbin <= -1.0 || cbin >= d || rbin <= -1.0 || rbin >= d {
                continue;
            }
            let (dx, dy) = gradient(img, xx as usize, yy as usize);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let rel = (dy.atan2(dx) - angle).rem_euclid(TAU);
            let obin = rel * DESC_BINS as f32 / TAU;
            let w = ((rx * rx + ry * ry) * weight_scale).exp() * mag;

            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0 = obin.floor();
            let fr = rbin - r0;
            let fc = cbin - c0;
            let fo = obin - o0;
            let r0 = (r0 as isize + 1) as usize;
            let c0 = (c0 as isize + 1) as usize;
            let o0 = (o0 as usize) % DESC_BINS;
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (dob, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let idx = ((r0 + dr) * side + (c0 + dc)) * DESC_BINS + (o0 + dob) % DESC_BINS;
                        hist[idx] += w * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut out = [0.0f32; DESCRIPTOR_LEN];
    let mut k = 0;
    for r in 1..=DESC_WIDTH {
        for c in 1..=DESC_WIDTH {
            for o in 0..DESC_BINS {
                out[k] = hist[(r * side + c) * DESC_BINS + o];
                k += 1;
            }
        }
    }
    normalize_descriptor(&mut out);
    out
}

/// Unit-normalize, cap components at 0.2, renormalize. Flat patches stay zero.
pub fn normalize_descriptor(v: &mut [f32; DESCRIPTOR_LEN]) {
    let norm = |v: &[f32]| v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let n = norm(v);
    if n <= 1e-12 {
        v.fill(0.0);
        return;
    }
    for x in v.iter_mut() {
        *x = ((f64::from(*x) / n) as f32).min(DESC_MAG_CAP);
    }
    let n = norm(v);
    for x in v.iter_mut() {
        *x = (f64::from(*x) / n) as f32;
    }
}
