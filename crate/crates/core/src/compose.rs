//! Warping primary-channel tiles into the mosaic frame and blending them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;
use crate::grid::Grid;
use crate::linalg::{cholesky_solve, SymMatrix};
use crate::pose_graph::Layout;

/// Axis-aligned canvas box in mosaic pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub min_x: i64,
    pub min_y: i64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    #[default]
    Feather,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlendSpec {
    pub mode: BlendMode,
    /// Ramp length in pixels; `None` ramps over half the tile side (full-tile ramp).
    pub feather_margin: Option<f64>,
}

/// One tile resampled into the canvas, stored over its own bounding window.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedTile {
    pub tile_index: usize,
    /// Window origin in canvas pixels.
    pub x0: usize,
    pub y0: usize,
    pub values: Grid,
    /// Blend weight per window pixel; zero outside the footprint or where invalid.
    pub weights: Vec<f64>,
}

impl WarpedTile {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    /// Value and weight at canvas pixel `(cx, cy)`, if the tile contributes there.
    pub fn at_canvas(&self, cx: usize, cy: usize) -> Option<(f64, f64)> {
        if cx < self.x0 || cy < self.y0 {
            return None;
        }
        let (c, r) = (cx - self.x0, cy - self.y0);
        if c >= self.width() || r >= self.height() {
            return None;
        }
        let w = self.weights[r * self.width() + c];
        (w > 0.0).then(|| (self.values.get(r, c), w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub grid: Grid,
    /// Accumulated blend weight per pixel.
    pub weight: Vec<f64>,
    /// Number of tiles contributing to each pixel.
    pub coverage: Vec<u16>,
    pub layout: Layout,
    pub extent: Extent,
}

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Outermost sample centres of a `w x h` tile.
fn tile_corners(w: usize, h: usize) -> [(f64, f64); 4] {
    let (w, h) = (w.saturating_sub(1) as f64, h.saturating_sub(1) as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

/// Bounding box of every warped corner sample, rounded outward to whole pixels.
pub fn canvas_extent(layout: &Layout, tile_dims: impl Fn(usize) -> (usize, usize)) -> Extent {
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for pose in &layout.poses {
        let (w, h) = tile_dims(pose.tile_index);
        for c in tile_corners(w, h) {
            let (x, y) = pose.transform.apply(c);
            lo_x = lo_x.min(snap(x));
            lo_y = lo_y.min(snap(y));
            hi_x = hi_x.max(snap(x));
            hi_y = hi_y.max(snap(y));
        }
    }
    if !lo_x.is_finite() {
        return Extent {
            min_x: 0,
            min_y: 0,
            width: 0,
            height: 0,
        };
    }
    let (min_x, min_y) = (lo_x.floor() as i64, lo_y.floor() as i64);
    Extent {
        min_x,
        min_y,
        width: (hi_x.ceil() as i64 - min_x + 1).max(0) as usize,
        height: (hi_y.ceil() as i64 - min_y + 1).max(0) as usize,
    }
}

fn feather_weight(u: f64, v: f64, w: usize, h: usize, margin: Option<f64>) -> f64 {
    let ramp = |p: f64, n: usize| {
        let m = margin.unwrap_or(n as f64 / 2.0);
        let d = p.min((n - 1) as f64 - p) + 0.5;
        (d / m).min(1.0)
    };
    ramp(u, w) * ramp(v, h)
}

/// Inverse-maps every canvas pixel inside the tile footprint and samples the
/// tile bilinearly. A pixel is valid only if every source sample with nonzero
/// interpolation weight is valid.
pub fn warp_tile(
    tile_index: usize,
    tile: &Grid,
    pose: &AffineTransform,
    extent: &Extent,
    blend: &BlendSpec,
) -> Result<WarpedTile> {
    let inv = pose.inverse()?;
    let (w, h) = tile.dims();

    // Window: footprint bounding box clipped to the canvas.
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in tile_corners(w, h) {
        let (x, y) = pose.apply(c);
        lo_x = lo_x.min(x);
        lo_y = lo_y.min(y);
        hi_x = hi_x.max(x);
        hi_y = hi_y.max(y);
    }
    let clip = |v: f64, lo: i64, n: usize| ((v.floor() as i64 - lo).clamp(0, n as i64)) as usize;
    let x0 = clip(lo_x, extent.min_x, extent.width);
    let y0 = clip(lo_y, extent.min_y, extent.height);
    let x1 = clip(hi_x.ceil() + 1.0, extent.min_x, extent.width);
    let y1 = clip(hi_y.ceil() + 1.0, extent.min_y, extent.height);
    let (ww, wh) = (x1 - x0, y1 - y0);

    let mut values = Grid::invalid(ww, wh);
    let mut weights = vec![0.0; ww * wh];
    let (umax, vmax) = ((w - 1) as f64, (h - 1) as f64);
    for r in 0..wh {
        for c in 0..ww {
            let mx = (x0 + c) as f64 + extent.min_x as f64;
            let my = (y0 + r) as f64 + extent.min_y as f64;
            let (u, v) = inv.apply((mx, my));
            let (u, v) = (snap(u), snap(v));
            if !(0.0..=umax).contains(&u) || !(0.0..=vmax).contains(&v) {
                continue;
            }
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (fu, fv) = (u - u0 as f64, v - v0 as f64);
            let mut acc = 0.0;
            let mut ok = true;
            for (du, wu) in [(0usize, 1.0 - fu), (1, fu)] {
                for (dv, wv) in [(0usize, 1.0 - fv), (1, fv)] {
                    let wt = wu * wv;
                    if wt == 0.0 {
                        continue;
                    }
                    match tile.value(v0 + dv, u0 + du) {
                        Some(s) => acc += wt * s,
                        None => ok = false,
                    }
                }
            }
            if !ok {
                continue;
            }
            values.set(r, c, acc);
            weights[r * ww + c] = feather_weight(u, v, w, h, blend.feather_margin);
        }
    }
    Ok(WarpedTile {
        tile_index,
        x0,
        y0,
        values,
        weights,
    })
}

/// Per-tile constant offsets minimizing the weighted squared mismatch of
/// overlap means, with `reference` (or the smallest tile of any component that
/// lacks it) pinned at zero.
pub fn reconcile_offsets(warped: &[WarpedTile], reference: usize) -> Vec<f64> {
    const MIN_OVERLAP: usize = 16;
    let n = warped.len();
    // (i, j, count, mean(v_i - v_j))
    let mut links: Vec<(usize, usize, f64, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&warped[i], &warped[j]);
            let xs = a.x0.max(b.x0)..(a.x0 + a.width()).min(b.x0 + b.width());
            let ys = a.y0.max(b.y0)..(a.y0 + a.height()).min(b.y0 + b.height());
            let (mut cnt, mut sum) = (0usize, 0.0);
            for y in ys {
                for x in xs.clone() {
                    if let (Some((va, _)), Some((vb, _))) = (a.at_canvas(x, y), b.at_canvas(x, y)) {
                        cnt += 1;
                        sum += va - vb;
                    }
                }
            }
            if cnt >= MIN_OVERLAP {
                links.push((i, j, cnt as f64, sum / cnt as f64));
            }
        }
    }

    // Components of the overlap graph decide which tile is pinned.
    let mut comp: Vec<usize> = (0..n).collect();
    fn root(c: &mut [usize], mut x: usize) -> usize {
        while c[x] != x {
            c[x] = c[c[x]];
            x = c[x];
        }
        x
    }
    for &(i, j, _, _) in &links {
        let (ri, rj) = (root(&mut comp, i), root(&mut comp, j));
        if ri != rj {
            comp[ri.max(rj)] = ri.min(rj);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| root(&mut comp, i)).collect();
    let pinned: Vec<bool> = (0..n)
        .map(|i| {
            let has_ref = (0..n).any(|k| roots[k] == roots[i] && warped[k].tile_index == reference);
            if has_ref {
                warped[i].tile_index == reference
            } else {
                // Component root is the smallest position, and positions follow tile order.
                roots[i] == i
            }
        })
        .collect();

    let free: Vec<usize> = (0..n).filter(|&i| !pinned[i]).collect();
    let mut slot = vec![usize::MAX; n];
    for (k, &i) in free.iter().enumerate() {
        slot[i] = k;
    }
    let mut h = SymMatrix::zeros(free.len());
    let mut rhs = vec![0.0; free.len()];
    for &(i, j, w, d) in &links {
        // Residual: o_i - o_j - d.
        match (slot[i], slot[j]) {
            (usize::MAX, usize::MAX) => {}
            (si, usize::MAX) => {
                h.add_sym(si, si, w);
                rhs[si] += w * d;
            }
            (usize::MAX, sj) => {
                h.add_sym(sj, sj, w);
                rhs[sj] -= w * d;
            }
            (si, sj) => {
                h.add_sym(si, si, w);
                h.add_sym(sj, sj, w);
                h.add_sym(si, sj, -w);
                rhs[si] += w * d;
                rhs[sj] -= w * d;
            }
        }
    }
    let mut offsets = vec![0.0; n];
    if let Ok(x) = cholesky_solve(&h, &rhs) {
        for (k, &i) in free.iter().enumerate() {
            offsets[i] = x[k];
        }
    }
    offsets
}

/// Accumulates warped tiles (in slice order) into a mosaic.
pub fn blend(warped: &[WarpedTile], mode: BlendMode, extent: Extent, layout: Layout) -> Mosaic {
    let n = extent.width * extent.height;
    let mut acc = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let mut coverage = vec![0u16; n];
    let mut best: Vec<(f64, f64)> = vec![(0.0, f64::NAN); n];
    for t in warped {
        for r in 0..t.height() {
            for c in 0..t.width() {
                let w = t.weights[r * t.width() + c];
                if w <= 0.0 {
                    continue;
                }
                let v = t.values.get(r, c);
                let i = (t.y0 + r) * extent.width + t.x0 + c;
                acc[i] += w * v;
                weight[i] += w;
                coverage[i] += 1;
                if w > best[i].0 {
                    best[i] = (w, v);
                }
            }
        }
    }
    let samples = (0..n)
        .map(|i| {
            if weight[i] <= 0.0 {
                f64::NAN
            } else {
                match mode {
                    // A lone contributor is passed through untouched.
                    BlendMode::Feather if coverage[i] == 1 => best[i].1,
                    BlendMode::Feather => acc[i] / weight[i],
                    BlendMode::Nearest => best[i].1,
                }
            }
        })
        .collect();
    Mosaic {
        grid: Grid::from_samples(extent.width, extent.height, samples),
        weight,
        coverage,
        layout,
        extent,
    }
}

/// Warps the given primary-channel grids with the layout poses and blends them.
/// `tiles` pairs tile indices with their grids; tiles without a pose are skipped.
pub fn compose_mosaic(
    tiles: &[(usize, &Grid)],
    layout: &Layout,
    spec: &BlendSpec,
    reconcile: bool,
) -> Result<Mosaic> {
    if let (BlendMode::Feather, Some(m)) = (spec.mode, spec.feather_margin) {
        if !(m > 0.0) {
            return Err(Error::InvalidConfig("feather margin must be > 0".into()));
        }
    }
    let mut members: Vec<(usize, &Grid, AffineTransform)> = tiles
        .iter()
        .filter_map(|&(i, g)| layout.pose(i).map(|p| (i, g, *p)))
        .collect();
    members.sort_by_key(|m| m.0);
    let dims: std::collections::BTreeMap<usize, (usize, usize)> = members.iter().map(|m| (m.0, m.1.dims())).collect();
    let extent = canvas_extent(layout, |t| dims.get(&t).copied().unwrap_or((0, 0)));

    let mut warped: Vec<WarpedTile> = members
        .par_iter()
        .map(|&(i, g, pose)| warp_tile(i, g, &pose, &extent, spec))
        .collect::<Result<Vec<_>>>()?;

    if reconcile {
        let offsets = reconcile_offsets(&warped, layout.reference);
        for (t, o) in warped.iter_mut().zip(offsets) {
            if o != 0.0 {
                t.values = t.values.map_valid(|_, _, v| v - o);
            }
        }
    }
    Ok(blend(&warped, spec.mode, extent, layout.clone()))
}
