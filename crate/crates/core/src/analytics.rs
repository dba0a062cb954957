//! Feature statistics, mosaic quality metrics and secondary-channel scoring.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::Mosaic;
use crate::error::{Error, Result};
use crate::features::{detect_channel, DetectorParams, FeatureSet};
use crate::geometry::{fit_affine_weighted, AffineTransform, Point};
use crate::grid::Grid;
use crate::matching::{match_all, MatchParams, PairGraph};
use crate::pose_graph::Layout;
use crate::preprocess::{derive_x, normalize_u8};
use crate::tile_store::ChannelId;

pub const REPORT_VERSION: u32 = 1;

/// Detection and matching statistics for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: ChannelId,
    pub mean_detected: f64,
    pub pairs: usize,
    pub mean_matched: f64,
    pub mean_inliers: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSummary {
    pub members: Vec<usize>,
    pub dropped: Vec<usize>,
    pub reference: usize,
    pub residual_rms_px: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_error_mean_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_error_max_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub version: u32,
    /// Full run configuration.
    pub parameters: serde_json::Value,
    pub channels: Vec<ChannelStats>,
    pub chosen_channel: ChannelId,
    pub layout: LayoutSummary,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Per-channel statistics. `features` holds one set per tile of a single channel.
pub fn feature_stats(features: &[FeatureSet], graph: &PairGraph) -> ChannelStats {
    let name = features
        .first()
        .map(|f| f.channel.clone())
        .unwrap_or_else(|| ChannelId::new("unknown").expect("literal"));
    let mean = |xs: &mut dyn Iterator<Item = usize>, n: usize| {
        if n == 0 {
            0.0
        } else {
            xs.sum::<usize>() as f64 / n as f64
        }
    };
    ChannelStats {
        name,
        mean_detected: mean(&mut features.iter().map(FeatureSet::len), features.len()),
        pairs: graph.edges.len(),
        mean_matched: mean(&mut graph.edges.iter().map(|e| e.num_matches), graph.edges.len()),
        mean_inliers: mean(&mut graph.edges.iter().map(|e| e.inliers.len()), graph.edges.len()),
        score: None,
    }
}

const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; stride * (h + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += f(r * w + c);
                data[(r + 1) * stride + c + 1] = data[r * stride + c + 1] + row;
            }
        }
        Self { w, data }
    }

    fn window(&self, r: usize, c: usize, n: usize) -> f64 {
        let s = self.w + 1;
        self.data[(r + n) * s + c + n] - self.data[r * s + c + n] - self.data[(r + n) * s + c]
            + self.data[r * s + c]
    }
}

/// Mean SSIM over every 8x8 window whose pixels are valid in both grids.
/// The dynamic range is the joint valid min-max span.
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionsDiffer {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let (w, h) = a.dims();
    let joint: Vec<bool> = a.mask().iter().zip(b.mask()).map(|(x, y)| *x && *y).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_a, mut sum_b, mut n) = (0.0, 0.0, 0usize);
    for i in (0..w * h).filter(|&i| joint[i]) {
        let (x, y) = (a.samples()[i], b.samples()[i]);
        lo = lo.min(x.min(y));
        hi = hi.max(x.max(y));
        sum_a += x;
        sum_b += y;
        n += 1;
    }
    if n == 0 || w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::NoJointlyValid);
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));

    // Second moments are accumulated about the global means to limit cancellation.
    let (ma, mb) = (sum_a / n as f64, sum_b / n as f64);
    let da = |i: usize| if joint[i] { a.samples()[i] - ma } else { 0.0 };
    let db = |i: usize| if joint[i] { b.samples()[i] - mb } else { 0.0 };
    let count = Integral::new(w, h, |i| f64::from(u8::from(joint[i])));
    let ia = Integral::new(w, h, da);
    let ib = Integral::new(w, h, db);
    let iaa = Integral::new(w, h, |i| da(i) * da(i));
    let ibb = Integral::new(w, h, |i| db(i) * db(i));
    let iab = Integral::new(w, h, |i| da(i) * db(i));

    let k = SSIM_WINDOW;
    let npx = (k * k) as f64;
    let (mut total, mut windows) = (0.0, 0usize);
    for r in 0..=h - k {
        for c in 0..=w - k {
            if count.window(r, c, k) < npx {
                continue;
            }
            let (sa, sb) = (ia.window(r, c, k) / npx, ib.window(r, c, k) / npx);
            let va = (iaa.window(r, c, k) / npx - sa * sa).max(0.0);
            let vb = (ibb.window(r, c, k) / npx - sb * sb).max(0.0);
            let cov = iab.window(r, c, k) / npx - sa * sb;
            let (mu_a, mu_b) = (sa + ma, sb + mb);
            let lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            total += lum * cs;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::NoJointlyValid);
    }
    Ok(total / windows as f64)
}

/// Ranking entry produced by [`channel_score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: ChannelId,
    pub mean_detected: f64,
    pub mean_matched: f64,
    pub mean_corr: f64,
    pub score: f64,
}

/// Weights of the standardized terms in the channel score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub matched: f64,
    pub detected: f64,
    pub corr: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            matched: 1.0,
            detected: 1.0,
            corr: 1.0,
        }
    }
}

fn derive_y(g: &Grid) -> Result<Grid> {
    let t = Grid::from_fn(g.height(), g.width(), |r, c| g.get(c, r));
    let d = derive_x(&t)?;
    Ok(Grid::from_fn(g.width(), g.height(), |r, c| d.get(c, r)))
}

/// Gradient magnitude from central differences along both axes.
pub fn gradient_magnitude(g: &Grid) -> Result<Grid> {
    let gx = derive_x(g)?;
    let gy = derive_y(g)?;
    Ok(Grid::from_fn(g.width(), g.height(), |r, c| {
        match (gx.value(r, c), gy.value(r, c)) {
            (Some(x), Some(y)) => x.hypot(y),
            _ => f64::NAN,
        }
    }))
}

/// Pearson correlation over jointly valid pixels; 0 when either side is constant.
pub fn pearson(a: &Grid, b: &Grid) -> f64 {
    let pairs: Vec<(f64, f64)> = a
        .samples()
        .iter()
        .zip(b.samples())
        .zip(a.mask().iter().zip(b.mask()))
        .filter(|(_, (x, y))| **x && **y)
        .map(|((x, y), _)| (*x, *y))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn zscores(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter()
        .map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 })
        .collect()
}

/// Detects features on every tile grid of a channel, in tile order.
pub fn detect_tiles(
    grids: &[Grid],
    channel: &ChannelId,
    params: &DetectorParams,
    percentiles: (f64, f64),
) -> Result<Vec<FeatureSet>> {
    grids
        .par_iter()
        .enumerate()
        .map(|(i, g)| detect_channel(&normalize_u8(g, percentiles)?, params, i, channel.clone()))
        .collect()
}

/// Scores candidate channels and ranks them best first.
///
/// `candidates` pairs each channel with its per-tile grids (tile order), and
/// `primary` holds the prepared primary grids in the same order.
pub fn channel_score(
    candidates: &[(ChannelId, Vec<Grid>)],
    primary: &[Grid],
    detector: &DetectorParams,
    matching: &MatchParams,
    percentiles: (f64, f64),
    weights: &ScoreWeights,
) -> Result<Vec<ChannelScore>> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate channels".into()));
    }
    let primary_grad: Vec<Grid> = primary.iter().map(gradient_magnitude).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(candidates.len());
    for (channel, grids) in candidates {
        if grids.len() != primary.len() {
            return Err(Error::MissingChannel {
                tile: grids.len().min(primary.len()),
                channel: channel.to_string(),
            });
        }
        let features = detect_tiles(grids, channel, detector, percentiles)?;
        let stats = feature_stats(&features, &match_all(&features, matching));
        let corrs: Vec<f64> = grids
            .par_iter()
            .zip(&primary_grad)
            .map(|(g, pg)| Ok(pearson(&gradient_magnitude(g)?, pg)))
            .collect::<Result<_>>()?;
        let mean_corr = corrs.iter().sum::<f64>() / corrs.len().max(1) as f64;
        rows.push(ChannelScore {
            channel: channel.clone(),
            mean_detected: stats.mean_detected,
            mean_matched: stats.mean_matched,
            mean_corr,
            score: 0.0,
        });
    }
    let zm = zscores(&rows.iter().map(|r| r.mean_matched).collect::<Vec<_>>());
    let zd = zscores(&rows.iter().map(|r| r.mean_detected).collect::<Vec<_>>());
    let zc = zscores(&rows.iter().map(|r| r.mean_corr).collect::<Vec<_>>());
    for (i, r) in rows.iter_mut().enumerate() {
        r.score = weights.matched * zm[i] + weights.detected * zd[i] + weights.corr * zc[i];
    }
    rank_scores(&mut rows);
    Ok(rows)
}

/// Sorts by score descending, then channel name.
pub fn rank_scores(rows: &mut [ChannelScore]) {
    rows.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.channel.as_str().cmp(b.channel.as_str()))
    });
}

/// Corner registration error against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationError {
    pub mean: f64,
    pub max: f64,
    /// `(tile, error)` in tile order.
    pub per_tile: Vec<(usize, f64)>,
}

fn corners(w: usize, h: usize) -> [Point; 4] {
    let (x, y) = ((w - 1) as f64, (h - 1) as f64);
    [(0.0, 0.0), (x, 0.0), (0.0, y), (x, y)]
}

/// Affine gauge `G` with `G(est corner) ~ truth corner`, fitted robustly at
/// the tile level (iteratively reweighted toward the sum of per-tile errors) so
/// that a single misplaced tile does not drag the alignment.
fn fit_gauge(sets: &[([Point; 4], [Point; 4])]) -> Result<AffineTransform> {
    let tile_err = |g: &AffineTransform, (e, t): &([Point; 4], [Point; 4])| {
        e.iter()
            .zip(t)
            .map(|(p, q)| crate::geometry::distance(g.apply(*p), *q))
            .sum::<f64>()
            / 4.0
    };
    let fit = |weights: &[f64]| {
        fit_affine_weighted(sets.iter().zip(weights).flat_map(|((e, t), &w)| {
            e.iter().zip(t).map(move |(p, q)| (*p, *q, w)).collect::<Vec<_>>()
        }))
        .ok_or(Error::SingularTransform)
    };
    let mut weights = vec![1.0; sets.len()];
    let mut g = fit(&weights)?;
    let mut prev = f64::INFINITY;
    for _ in 0..100 {
        let errs: Vec<f64> = sets.iter().map(|s| tile_err(&g, s)).collect();
        let total: f64 = errs.iter().sum();
        if prev - total <= 1e-12 * (1.0 + total) {
            break;
        }
        prev = total;
        let scale = errs.iter().cloned().fold(0.0, f64::max).max(1e-300);
        weights = errs.iter().map(|e| 1.0 / (e / scale).max(1e-9)).collect();
        g = fit(&weights)?;
    }
    Ok(g)
}

/// Mean and max over member tiles of the mean corner distance between the
/// gauge-aligned estimated pose and the true pose, in ground-truth pixels.
pub fn registration_error(
    layout: &Layout,
    truth: &BTreeMap<usize, AffineTransform>,
    tile_dims: impl Fn(usize) -> (usize, usize),
) -> Result<RegistrationError> {
    let mut tiles = Vec::new();
    let mut sets = Vec::new();
    for p in &layout.poses {
        let t = truth.get(&p.tile_index).ok_or(Error::MissingTruth(p.tile_index))?;
        let (w, h) = tile_dims(p.tile_index);
        let c = corners(w, h);
        tiles.push(p.tile_index);
        sets.push((c.map(|q| p.transform.apply(q)), c.map(|q| t.apply(q))));
    }
    if sets.is_empty() {
        return Ok(RegistrationError {
            mean: 0.0,
            max: 0.0,
            per_tile: Vec::new(),
        });
    }
    let g = fit_gauge(&sets)?;
    let per_tile: Vec<(usize, f64)> = tiles
        .iter()
        .zip(&sets)
        .map(|(&t, (e, tr))| {
            let d = e.iter().zip(tr).map(|(p, q)| crate::geometry::distance(g.apply(*p), *q)).sum::<f64>() / 4.0;
            (t, d)
        })
        .collect();
    let mean = per_tile.iter().map(|p| p.1).sum::<f64>() / per_tile.len() as f64;
    let max = per_tile.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut per_tile = per_tile;
    per_tile.sort_by_key(|p| p.0);
    Ok(RegistrationError { mean, max, per_tile })
}

/// Resamples `moving` into the pixel frame of `fixed`. The frames are related
/// by the least-squares affine between the two layouts over shared tiles.
pub fn align_mosaic(moving: &Mosaic, fixed: &Mosaic, tile_dims: impl Fn(usize) -> (usize, usize)) -> Result<Grid> {
    let pairs: Vec<(Point, Point, f64)> = fixed
        .layout
        .poses
        .iter()
        .filter_map(|pf| moving.layout.pose(pf.tile_index).map(|pm| (pf, pm)))
        .flat_map(|(pf, pm)| {
            let (w, h) = tile_dims(pf.tile_index);
            corners(w, h).map(|q| (pf.transform.apply(q), pm.apply(q), 1.0))
        })
        .collect();
    // Maps fixed-frame coordinates to moving-frame coordinates.
    let g = fit_affine_weighted(pairs).ok_or(Error::SingularTransform)?;
    let (fe, me) = (fixed.extent, moving.extent);
    let src = &moving.grid;
    Ok(Grid::from_fn(fe.width, fe.height, |r, c| {
        let (x, y) = g.apply(((c as i64 + fe.min_x) as f64, (r as i64 + fe.min_y) as f64));
        let (u, v) = (x - me.min_x as f64, y - me.min_y as f64);
        bilinear(src, u, v).unwrap_or(f64::NAN)
    }))
}

/// Bilinear sample at `(u, v)` = (column, row); `None` outside or near invalid pixels.
pub fn bilinear(g: &Grid, u: f64, v: f64) -> Option<f64> {
    let (w, h) = g.dims();
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    let mut acc = 0.0;
    for (du, wu) in [(0usize, 1.0 - fu), (1, fu)] {
        for (dv, wv) in [(0usize, 1.0 - fv), (1, fv)] {
            if wu * wv > 0.0 {
                acc += wu * wv * g.value(v0 + dv, u0 + du)?;
            }
        }
    }
    Some(acc)
}

#[cfg(test)]
mod tests;
