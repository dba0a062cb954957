//! AFM artifact removal, x-derivative synthesis and 8-bit quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ByteGrid, Grid};

/// Statistic equalized across scan lines by [`flatten_lines`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineStatistic {
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlattenMethod {
    LineMean,
    LineMedian,
    Plane,
}

impl FlattenMethod {
    pub fn apply(self, g: &Grid) -> Result<Grid> {
        match self {
            FlattenMethod::LineMean => Ok(flatten_lines(g, LineStatistic::Mean)),
            FlattenMethod::LineMedian => Ok(flatten_lines(g, LineStatistic::Median)),
            FlattenMethod::Plane => remove_plane(g),
        }
    }
}

/// Toggles for primary-channel preparation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub flatten: bool,
    pub plane: bool,
    pub line_statistic: LineStatistic,
    /// Lower/upper valid-pixel percentiles for 8-bit quantization.
    pub percentiles: (f64, f64),
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            flatten: true,
            plane: true,
            line_statistic: LineStatistic::Median,
            percentiles: (0.5, 99.5),
        }
    }
}

/// Line flattening followed by plane removal, as enabled in `opts`.
pub fn prepare_primary(g: &Grid, opts: &PreprocessOptions) -> Result<Grid> {
    let mut out = if opts.flatten {
        flatten_lines(g, opts.line_statistic)
    } else {
        g.clone()
    };
    if opts.plane {
        out = remove_plane(&out)?;
    }
    Ok(out)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Shifts every scan line by a constant so its statistic matches the grid-wide
/// reference. Rows without valid pixels pass through.
///
/// For `Mean` the reference is the mean over all valid pixels. For `Median` it is
/// the median of the per-row medians, which keeps the operation idempotent.
pub fn flatten_lines(g: &Grid, stat: LineStatistic) -> Grid {
    let row_stats: Vec<Option<f64>> = (0..g.height())
        .map(|r| {
            let mut vals: Vec<f64> = g
                .row(r)
                .iter()
                .zip(g.row_mask(r))
                .filter_map(|(&v, &ok)| ok.then_some(v))
                .collect();
            if vals.is_empty() {
                return None;
            }
            Some(match stat {
                LineStatistic::Mean => mean(&vals),
                LineStatistic::Median => median(&mut vals),
            })
        })
        .collect();

    let reference = match stat {
        LineStatistic::Mean => {
            let vals: Vec<f64> = g.valid_values().collect();
            if vals.is_empty() {
                return g.clone();
            }
            mean(&vals)
        }
        LineStatistic::Median => {
            let mut meds: Vec<f64> = row_stats.iter().flatten().copied().collect();
            if meds.is_empty() {
                return g.clone();
            }
            median(&mut meds)
        }
    };

    g.map_valid(|r, _, v| match row_stats[r] {
        Some(s) => v + (reference - s),
        None => v,
    })
}

/// Least-squares plane `a*x + b*y + c` over valid pixels, with `x` the column and
/// `y` the row index.
pub fn fit_plane(g: &Grid) -> Result<(f64, f64, f64)> {
    let n = g.valid_count();
    if n < 3 {
        return Err(Error::DegeneratePlane);
    }
    let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
    for r in 0..g.height() {
        for c in 0..g.width() {
            if let Some(v) = g.value(r, c) {
                sx += c as f64;
                sy += r as f64;
                sz += v;
            }
        }
    }
    let nf = n as f64;
    let (mx, my, mz) = (sx / nf, sy / nf, sz / nf);
    let (mut sxx, mut syy, mut sxy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in 0..g.height() {
        for c in 0..g.width() {
            if let Some(v) = g.value(r, c) {
                let dx = c as f64 - mx;
                let dy = r as f64 - my;
                let dz = v - mz;
                sxx += dx * dx;
                syy += dy * dy;
                sxy += dx * dy;
                sxz += dx * dz;
                syz += dy * dz;
            }
        }
    }
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-9 * (sxx * syy).max(f64::MIN_POSITIVE)) {
        return Err(Error::DegeneratePlane);
    }
    let a = (sxz * syy - syz * sxy) / det;
    let b = (syz * sxx - sxz * sxy) / det;
    let c = mz - a * mx - b * my;
    Ok((a, b, c))
}

/// Subtracts the best-fit plane over valid pixels.
pub fn remove_plane(g: &Grid) -> Result<Grid> {
    let (a, b, c) = fit_plane(g)?;
    let mut out = g.map_valid(|r, col, v| v - (a * col as f64 + b * r as f64 + c));
    // Remove the rounding residue of the intercept so the valid mean is zero.
    let n = out.valid_count() as f64;
    let m = out.valid_values().sum::<f64>() / n;
    if m != 0.0 {
        out = out.map_valid(|_, _, v| v - m);
    }
    Ok(out)
}

/// Derivative along the fast-scan (x) axis: central differences in the interior,
/// one-sided differences at the first and last column. A pixel is valid only when
/// it and every sample in its stencil are valid.
pub fn derive_x(g: &Grid) -> Result<Grid> {
    let (w, h) = g.dims();
    if w < 2 {
        return Err(Error::TooNarrow(w));
    }
    let mut out = Grid::invalid(w, h);
    for r in 0..h {
        for c in 0..w {
            if !g.is_valid(r, c) {
                continue;
            }
            let d = if c == 0 {
                g.value(r, 1).zip(g.value(r, 0)).map(|(b, a)| b - a)
            } else if c == w - 1 {
                g.value(r, c).zip(g.value(r, c - 1)).map(|(b, a)| b - a)
            } else {
                g.value(r, c + 1).zip(g.value(r, c - 1)).map(|(b, a)| (b - a) / 2.0)
            };
            if let Some(d) = d {
                out.set(r, c, d);
            }
        }
    }
    Ok(out)
}

/// Linear-interpolated percentile (0..=100) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Maps the `[p_low, p_high]` valid-percentile range linearly onto `0..=255` with
/// clamping. Zero-range grids map to 128; invalid pixels map to 0.
pub fn normalize_u8(g: &Grid, percentiles: (f64, f64)) -> Result<ByteGrid> {
    let mut vals: Vec<f64> = g.valid_values().collect();
    if vals.is_empty() {
        return Err(Error::NoValidPixels);
    }
    vals.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&vals, percentiles.0);
    let hi = percentile_sorted(&vals, percentiles.1);
    let span = hi - lo;
    let pixels = g
        .samples()
        .iter()
        .zip(g.mask())
        .map(|(&v, &ok)| {
            if !ok {
                0
            } else if span <= 0.0 {
                128
            } else {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(ByteGrid {
        width: g.width(),
        height: g.height(),
        pixels,
        valid: g.mask().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| rng.gen_range(-10.0..10.0))
    }

    fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
        a.samples()
            .iter()
            .zip(b.samples())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_rows_are_equalized() {
        let g = Grid::from_fn(3, 2, |r, _| if r == 0 { 0.0 } else { 5.0 });
        let out = flatten_lines(&g, LineStatistic::Mean);
        for v in out.samples() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_fixed_point() {
        let g = Grid::from_fn(4, 3, |r, c| if c % 2 == 0 { 1.0 } else { -1.0 } + 0.0 * r as f64);
        let out = flatten_lines(&g, LineStatistic::Mean);
        assert!(max_abs_diff(&g, &out) < 1e-12);
    }

    #[test]
    fn flatten_recovers_row_offsets() {
        let base = random_grid(64, 48, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let offsets: Vec<f64> = (0..48).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let noisy = base.map_valid(|r, _, v| v + offsets[r]);
        for stat in [LineStatistic::Mean, LineStatistic::Median] {
            let a = flatten_lines(&noisy, stat);
            let b = flatten_lines(&base, stat);
            // Equal up to one global constant.
            let k = a.get(0, 0) - b.get(0, 0);
            let dev = a
                .samples()
                .iter()
                .zip(b.samples())
                .map(|(x, y)| (x - y - k).abs())
                .fold(0.0, f64::max);
            assert!(dev <= 1e-9, "{stat:?}: {dev}");
        }
    }

    #[test]
    fn rows_without_valid_pixels_pass_through() {
        let mut g = random_grid(8, 4, 1);
        for c in 0..8 {
            g.invalidate(2, c);
        }
        let out = flatten_lines(&g, LineStatistic::Median);
        assert!(out.row_mask(2).iter().all(|v| !v));
        assert_eq!(out.valid_count(), g.valid_count());
    }

    #[test]
    fn exact_plane_is_removed() {
        let g = Grid::from_fn(32, 20, |r, c| 3.0 * c as f64 + 2.0 * r as f64 + 7.0);
        let out = remove_plane(&g).unwrap();
        assert!(out.samples().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn plane_plus_noise_returns_noise() {
        let noise = random_grid(40, 30, 8);
        let m = noise.valid_values().sum::<f64>() / noise.valid_count() as f64;
        let (a, b, c) = fit_plane(&noise).unwrap();
        let g = noise.map_valid(|r, col, v| v + 0.7 * col as f64 - 1.3 * r as f64 + 4.0);
        let out = remove_plane(&g).unwrap();
        // The noise itself has a (tiny) best-fit plane; removing it is the exact LS answer.
        let expected = noise.map_valid(|r, col, v| v - (a * col as f64 + b * r as f64 + c));
        assert!(max_abs_diff(&out, &expected) < 1e-9);
        let centered = noise.map_valid(|_, _, v| v - m);
        // Small next to the +-10 noise amplitude.
        assert!(max_abs_diff(&out, &centered) < 1.5);
    }

    #[test]
    fn single_row_is_degenerate() {
        let mut g = random_grid(16, 4, 2);
        for r in 1..4 {
            for c in 0..16 {
                g.invalidate(r, c);
            }
        }
        assert!(matches!(remove_plane(&g), Err(Error::DegeneratePlane)));
    }

    #[test]
    fn derivative_of_constant_and_ramp() {
        let k = Grid::from_fn(10, 5, |_, _| 3.5);
        assert!(derive_x(&k).unwrap().samples().iter().all(|&v| v == 0.0));
        let ramp = Grid::from_fn(10, 5, |_, c| 4.0 * c as f64);
        assert!(derive_x(&ramp).unwrap().samples().iter().all(|&v| v == 4.0));
        assert!(matches!(derive_x(&Grid::zeros(1, 5)), Err(Error::TooNarrow(1))));
    }

    /// Direct per-pixel stencil, written independently of `derive_x`.
    pub(crate) fn derive_x_oracle(g: &Grid) -> Vec<Option<f64>> {
        let (w, h) = g.dims();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let (l, rr, div) = match c {
                    0 => (0, 1, 1.0),
                    c if c == w - 1 => (w - 2, w - 1, 1.0),
                    c => (c - 1, c + 1, 2.0),
                };
                let ok = g.is_valid(r, l) && g.is_valid(r, rr) && g.is_valid(r, c);
                out.push(ok.then(|| (g.get(r, rr) - g.get(r, l)) / div));
            }
        }
        out
    }

    #[test]
    fn derivative_matches_stencil_oracle_exactly() {
        let mut g = random_grid(64, 64, 11);
        g.invalidate(5, 7);
        g.invalidate(63, 0);
        let d = derive_x(&g).unwrap();
        let oracle = derive_x_oracle(&g);
        for (i, o) in oracle.iter().enumerate() {
            let (r, c) = (i / 64, i % 64);
            assert_eq!(d.value(r, c).map(f64::to_bits), o.map(f64::to_bits), "pixel {r},{c}");
        }
        assert!(!d.is_valid(5, 6) && !d.is_valid(5, 7) && !d.is_valid(5, 8) && d.is_valid(5, 9));
    }

    #[test]
    fn constant_grid_normalizes_to_mid_gray() {
        let b = normalize_u8(&Grid::from_fn(8, 8, |_, _| 2.0), (0.5, 99.5)).unwrap();
        assert!(b.pixels.iter().all(|&p| p == 128));
        assert!(matches!(normalize_u8(&Grid::invalid(4, 4), (0.5, 99.5)), Err(Error::NoValidPixels)));
    }

    #[test]
    fn spread_levels_map_to_identity() {
        // 256 levels plus enough copies of 0 and 255 that both percentiles land on the extremes.
        let mut vals: Vec<f64> = (0..256).map(f64::from).collect();
        vals.extend(std::iter::repeat_n(0.0, 16));
        vals.extend(std::iter::repeat_n(255.0, 16));
        let g = Grid::from_samples(vals.len(), 1, vals.clone());
        let b = normalize_u8(&g, (0.5, 99.5)).unwrap();
        for (v, p) in vals.iter().zip(&b.pixels) {
            assert_eq!(*v as u8, *p);
        }
    }

    #[test]
    fn outlier_clamps_and_body_keeps_contrast() {
        let mut vals: Vec<f64> = (0..4096).map(|i| (i % 256) as f64).collect();
        vals[17] = 1e6;
        let g = Grid::from_samples(64, 64, vals.clone());
        let b = normalize_u8(&g, (0.5, 99.5)).unwrap();
        assert_eq!(b.pixels[17], 255);
        // Brute-force percentile map for the body.
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let lo = percentile_sorted(&sorted, 0.5);
        let hi = percentile_sorted(&sorted, 99.5);
        let mut levels = std::collections::BTreeSet::new();
        for (i, v) in vals.iter().enumerate() {
            let expect = ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8;
            assert_eq!(b.pixels[i], expect);
            if i != 17 {
                levels.insert(b.pixels[i]);
            }
        }
        assert!(levels.len() >= 250, "{}", levels.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn flatten_and_plane_are_idempotent(seed in 0u64..1000, w in 4usize..24, h in 4usize..24) {
            let g = random_grid(w, h, seed);
            for stat in [LineStatistic::Mean, LineStatistic::Median] {
                let once = flatten_lines(&g, stat);
                let twice = flatten_lines(&once, stat);
                prop_assert!(max_abs_diff(&once, &twice) <= 1e-9);
            }
            let once = remove_plane(&g).unwrap();
            let twice = remove_plane(&once).unwrap();
            prop_assert!(max_abs_diff(&once, &twice) <= 1e-9);
        }

        #[test]
        fn plane_removal_ignores_added_planes(seed in 0u64..1000, a in -5.0f64..5.0, b in -5.0f64..5.0, c in -100.0f64..100.0) {
            let g = random_grid(20, 16, seed);
            let tilted = g.map_valid(|r, col, v| v + a * col as f64 + b * r as f64 + c);
            prop_assert!(max_abs_diff(&remove_plane(&g).unwrap(), &remove_plane(&tilted).unwrap()) <= 1e-9);
        }

        #[test]
        fn derivative_ignores_row_constants(seed in 0u64..1000) {
            let g = random_grid(16, 12, seed);
            let shifted = g.map_valid(|r, _, v| v + (r as f64) * 0.25 - 1.0);
            let d1 = derive_x(&g).unwrap();
            let d2 = derive_x(&shifted).unwrap();
            prop_assert!(max_abs_diff(&d1, &d2) <= 1e-12);
        }

        #[test]
        fn masks_are_preserved(seed in 0u64..1000, holes in proptest::collection::vec((0usize..12, 0usize..12), 0..10)) {
            let mut g = random_grid(12, 12, seed);
            for (r, c) in holes {
                g.invalidate(r, c);
            }
            let f = flatten_lines(&g, LineStatistic::Median);
            prop_assert_eq!(f.mask(), g.mask());
            if let Ok(p) = remove_plane(&g) {
                prop_assert_eq!(p.mask(), g.mask());
            }
            let d = derive_x(&g).unwrap();
            let oracle = derive_x_oracle(&g);
            for i in 0..144 {
                prop_assert_eq!(d.mask()[i], oracle[i].is_some());
                prop_assert!(!d.mask()[i] || g.mask()[i]);
            }
        }
    }
}
