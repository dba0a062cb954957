//! Descriptor matching and robust pairwise affine estimation.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::FeatureSet;
use crate::geometry::{distance, fit_affine_exact, fit_affine_lsq, AffineTransform, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub idx_a: usize,
    pub idx_b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Lowe ratio; nearest / second-nearest must be below this in both directions.
    pub ratio: f64,
    /// Inlier reprojection threshold in pixels.
    pub reproj_px: f64,
    /// Acceptance threshold on `inliers / (confidence_base + confidence_slope * matches)`.
    pub min_confidence: f64,
    pub confidence_base: f64,
    pub confidence_slope: f64,
    pub max_iterations: usize,
    /// RANSAC stops early once this fraction of matches are inliers.
    pub early_exit_ratio: f64,
    /// Accepted range for the determinant of the linear part.
    pub det_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            reproj_px: 3.0,
            min_confidence: 1.0,
            confidence_base: 8.0,
            confidence_slope: 0.3,
            max_iterations: 2000,
            early_exit_ratio: 0.9,
            det_bounds: (0.5, 2.0),
            seed: 7,
        }
    }
}

/// Accepted transform between two tiles. `transform` maps `tile_b` pixel
/// coordinates into `tile_a`'s frame; inlier matches index `tile_a`'s features
/// with `idx_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub tile_a: usize,
    pub tile_b: usize,
    pub transform: AffineTransform,
    pub inliers: Vec<Match>,
    /// Inlier correspondences as (point in a, point in b).
    pub points: Vec<(Point, Point)>,
    pub num_matches: usize,
    pub confidence: f64,
}

impl PairEstimate {
    pub fn contains(&self, tile: usize) -> bool {
        self.tile_a == tile || self.tile_b == tile
    }

    pub fn other(&self, tile: usize) -> usize {
        if self.tile_a == tile {
            self.tile_b
        } else {
            self.tile_a
        }
    }
}

/// Why a candidate pair was not accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    TooFewMatches,
    NoModel,
    TooFewInliers,
    LowConfidence,
    DeterminantOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<PairEstimate>,
}

impl PairGraph {
    pub fn edge(&self, a: usize, b: usize) -> Option<&PairEstimate> {
        self.edges
            .iter()
            .find(|e| (e.tile_a == a && e.tile_b == b) || (e.tile_a == b && e.tile_b == a))
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent lanes so the loop vectorizes.
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    acc.iter().sum()
}

fn exact_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy)]
struct Best2 {
    best: f32,
    second: f32,
    idx: usize,
}

impl Best2 {
    const EMPTY: Best2 = Best2 {
        best: f32::INFINITY,
        second: f32::INFINITY,
        idx: usize::MAX,
    };

    #[inline]
    fn offer(&mut self, d: f32, idx: usize) {
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.idx = idx;
        } else if d < self.second {
            self.second = d;
        }
    }

    fn passes(&self, ratio: f64) -> bool {
        let (b, s) = (f64::from(self.best).max(0.0).sqrt(), f64::from(self.second).max(0.0).sqrt());
        b < ratio * s
    }
}

/// Mutual nearest-neighbour matching with the ratio test applied in both
/// directions. Sorted by distance, then indices.
pub fn match_pair(fa: &FeatureSet, fb: &FeatureSet, ratio: f64) -> Vec<Match> {
    let (na, nb) = (fa.len(), fb.len());
    if na == 0 || nb == 0 {
        return Vec::new();
    }
    let norms_b: Vec<f32> = (0..nb).map(|j| dot(fb.descriptor(j), fb.descriptor(j))).collect();
    let mut rows = vec![Best2::EMPTY; na];
    let mut cols = vec![Best2::EMPTY; nb];
    for (i, row) in rows.iter_mut().enumerate() {
        let da = fa.descriptor(i);
        let norm_a = dot(da, da);
        for (j, col) in cols.iter_mut().enumerate() {
            let d2 = (norm_a + norms_b[j] - 2.0 * dot(da, fb.descriptor(j))).max(0.0);
            row.offer(d2, j);
            col.offer(d2, i);
        }
    }
    let mut out: Vec<Match> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let j = r.idx;
            (cols[j].idx == i && r.passes(ratio) && cols[j].passes(ratio)).then(|| Match {
                idx_a: i,
                idx_b: j,
                distance: exact_distance(fa.descriptor(i), fb.descriptor(j)),
            })
        })
        .collect();
    sort_matches(&mut out);
    out
}

fn sort_matches(m: &mut [Match]) {
    m.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.idx_a.cmp(&b.idx_a))
            .then(a.idx_b.cmp(&b.idx_b))
    });
}

/// Content fingerprint of a feature set; independent of tile numbering.
pub fn fingerprint(fs: &FeatureSet) -> u64 {
    let mut h = DefaultHasher::new();
    fs.keypoints.len().hash(&mut h);
    for kp in &fs.keypoints {
        kp.x.to_bits().hash(&mut h);
        kp.y.to_bits().hash(&mut h);
        kp.scale.to_bits().hash(&mut h);
        kp.orientation.to_bits().hash(&mut h);
    }
    h.finish()
}

fn mix_seed(seed: u64, lo: u64, hi: u64) -> u64 {
    let mut h = DefaultHasher::new();
    (seed, lo, hi).hash(&mut h);
    h.finish()
}

fn confidence(inliers: usize, matches: usize, p: &MatchParams) -> f64 {
    inliers as f64 / (p.confidence_base + p.confidence_slope * matches as f64)
}

/// Robust affine fit between `fa` and `fb` from `matches` (indices into `fa`,
/// `fb`). The transform maps `fb` coordinates into `fa`'s frame.
///
/// The computation always runs in a canonical direction chosen from feature
/// content, so swapping the arguments yields the exact inverse transform and the
/// same inlier set.
pub fn estimate_pair(
    fa: &FeatureSet,
    fb: &FeatureSet,
    matches: &[Match],
    params: &MatchParams,
) -> Result<PairEstimate, Rejection> {
    if matches.len() < 4 {
        return Err(Rejection::TooFewMatches);
    }
    let (fpa, fpb) = (fingerprint(fa), fingerprint(fb));
    let swap = (fpb, fb.tile_index) < (fpa, fa.tile_index);
    let (ca, cb) = if swap { (fb, fa) } else { (fa, fb) };
    let mut cm: Vec<Match> = matches
        .iter()
        .map(|m| {
            if swap {
                Match {
                    idx_a: m.idx_b,
                    idx_b: m.idx_a,
                    distance: m.distance,
                }
            } else {
                *m
            }
        })
        .collect();
    sort_matches(&mut cm);
    let seed = mix_seed(params.seed, fpa.min(fpb), fpa.max(fpb));

    let (transform, inliers) = estimate_canonical(ca, cb, &cm, params, seed)?;

    let conf = confidence(inliers.len(), matches.len(), params);
    let (transform, inliers) = if swap {
        let inv = transform.inverse().map_err(|_| Rejection::NoModel)?;
        let mut back: Vec<Match> = inliers
            .iter()
            .map(|m| Match {
                idx_a: m.idx_b,
                idx_b: m.idx_a,
                distance: m.distance,
            })
            .collect();
        sort_matches(&mut back);
        (inv, back)
    } else {
        (transform, inliers)
    };
    let points = inliers
        .iter()
        .map(|m| (point(fa, m.idx_a), point(fb, m.idx_b)))
        .collect();
    Ok(PairEstimate {
        tile_a: fa.tile_index,
        tile_b: fb.tile_index,
        transform,
        inliers,
        points,
        num_matches: matches.len(),
        confidence: conf,
    })
}

#[inline]
fn point(fs: &FeatureSet, i: usize) -> Point {
    let kp = &fs.keypoints[i];
    (kp.x, kp.y)
}

/// Symmetric transfer test: forward and backward reprojection errors both under threshold.
fn inlier_set(
    t: &AffineTransform,
    pts: &[(Point, Point)],
    thr: f64,
) -> Option<(Vec<usize>, f64)> {
    let inv = t.inverse().ok()?;
    let mut idx = Vec::new();
    let mut err_sum = 0.0;
    for (k, &(pa, pb)) in pts.iter().enumerate() {
        let fwd = distance(t.apply(pb), pa);
        let bwd = distance(inv.apply(pa), pb);
        if fwd < thr && bwd < thr {
            idx.push(k);
            err_sum += fwd;
        }
    }
    Some((idx, err_sum))
}

fn estimate_canonical(
    fa: &FeatureSet,
    fb: &FeatureSet,
    matches: &[Match],
    p: &MatchParams,
    seed: u64,
) -> Result<(AffineTransform, Vec<Match>), Rejection> {
    let pts: Vec<(Point, Point)> = matches
        .iter()
        .map(|m| (point(fa, m.idx_a), point(fb, m.idx_b)))
        .collect();
    let n = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det_ok = |t: &AffineTransform| {
        let d = t.det();
        d >= p.det_bounds.0 && d <= p.det_bounds.1
    };

    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..p.max_iterations {
        let i0 = rng.gen_range(0..n);
        let mut i1 = rng.gen_range(0..n - 1);
        if i1 >= i0 {
            i1 += 1;
        }
        let mut i2 = rng.gen_range(0..n - 2);
        for lo in [i0.min(i1), i0.max(i1)] {
            if i2 >= lo {
                i2 += 1;
            }
        }
        let src = [pts[i0].1, pts[i1].1, pts[i2].1];
        let dst = [pts[i0].0, pts[i1].0, pts[i2].0];
        let Some(model) = fit_affine_exact(src, dst) else {
            continue;
        };
        if !det_ok(&model) {
            continue;
        }
        let Some((idx, err)) = inlier_set(&model, &pts, p.reproj_px) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((bi, be)) => idx.len() > bi.len() || (idx.len() == bi.len() && err < *be),
        };
        if better {
            let done = idx.len() as f64 >= p.early_exit_ratio * n as f64;
            best = Some((idx, err));
            if done {
                break;
            }
        }
    }
    let (mut support, _) = best.ok_or(Rejection::NoModel)?;
    if support.len() < 3 {
        return Err(Rejection::TooFewInliers);
    }

    // Least-squares refit on the support until the inlier set is stable.
    let mut model = None;
    for _ in 0..20 {
        let fit = fit_affine_lsq(support.iter().map(|&k| (pts[k].1, pts[k].0)).collect::<Vec<_>>())
            .ok_or(Rejection::NoModel)?;
        let (next, _) = inlier_set(&fit, &pts, p.reproj_px).ok_or(Rejection::NoModel)?;
        model = Some(fit);
        if next == support || next.len() < 3 {
            break;
        }
        support = next;
    }
    let model = model.ok_or(Rejection::NoModel)?;
    let (support, _) = inlier_set(&model, &pts, p.reproj_px).ok_or(Rejection::NoModel)?;

    if support.len() < 4 {
        return Err(Rejection::TooFewInliers);
    }
    if confidence(support.len(), n, p) < p.min_confidence {
        return Err(Rejection::LowConfidence);
    }
    if !det_ok(&model) {
        return Err(Rejection::DeterminantOutOfRange);
    }
    Ok((model, support.into_iter().map(|k| matches[k]).collect()))
}

/// Outcome for one candidate pair, accepted or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAttempt {
    pub tile_a: usize,
    pub tile_b: usize,
    pub num_matches: usize,
    pub rejection: Option<Rejection>,
}

/// Matches every unordered pair of feature sets and keeps the accepted
/// estimates. Edges are ordered by `(tile_a, tile_b)` with `tile_a < tile_b`.
pub fn match_all(features: &[FeatureSet], params: &MatchParams) -> PairGraph {
    match_all_detailed(features, params).0
}

/// [`match_all`] plus the per-pair outcome of every candidate.
pub fn match_all_detailed(features: &[FeatureSet], params: &MatchParams) -> (PairGraph, Vec<PairAttempt>) {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by_key(|&i| features[i].tile_index);
    let pairs: Vec<(usize, usize)> = order
        .iter()
        .enumerate()
        .flat_map(|(k, &i)| order[k + 1..].iter().map(move |&j| (i, j)))
        .collect();

    let results: Vec<(PairAttempt, Option<PairEstimate>)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (fa, fb) = (&features[i], &features[j]);
            let matches = match_pair(fa, fb, params.ratio);
            let outcome = estimate_pair(fa, fb, &matches, params);
            let attempt = PairAttempt {
                tile_a: fa.tile_index,
                tile_b: fb.tile_index,
                num_matches: matches.len(),
                rejection: outcome.as_ref().err().copied(),
            };
            (attempt, outcome.ok())
        })
        .collect();

    let mut attempts = Vec::with_capacity(results.len());
    let mut edges = Vec::new();
    for (a, e) in results {
        attempts.push(a);
        edges.extend(e);
    }
    edges.sort_by_key(|e| (e.tile_a, e.tile_b));
    let nodes = order.iter().map(|&i| features[i].tile_index).collect();
    (PairGraph { nodes, edges }, attempts)
}
