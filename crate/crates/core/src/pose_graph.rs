//! Global tile poses: spanning-tree initialization and a gauge-fixed linear
//! least-squares refinement over every inlier correspondence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, Point};
use crate::linalg::{cholesky_solve, SymMatrix};
use crate::matching::PairGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalPose {
    pub tile_index: usize,
    /// Tile pixel coordinates -> mosaic coordinates.
    pub transform: AffineTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseModel {
    #[default]
    Affine,
    /// Rotation + uniform scale + translation.
    Similarity,
}

impl PoseModel {
    fn dof(self) -> usize {
        match self {
            PoseModel::Affine => 6,
            PoseModel::Similarity => 4,
        }
    }

    /// Jacobian rows of `T(p)` (x then y component) with respect to the parameters.
    fn jacobian(self, p: Point) -> [[f64; 6]; 2] {
        let (x, y) = p;
        match self {
            PoseModel::Affine => [[x, y, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, x, y, 1.0]],
            PoseModel::Similarity => [[x, -y, 1.0, 0.0, 0.0, 0.0], [y, x, 0.0, 1.0, 0.0, 0.0]],
        }
    }

    fn to_transform(self, p: &[f64]) -> AffineTransform {
        match self {
            PoseModel::Affine => AffineTransform::from_coeffs([p[0], p[1], p[2], p[3], p[4], p[5]]),
            PoseModel::Similarity => AffineTransform {
                a11: p[0],
                a12: -p[1],
                tx: p[2],
                a21: p[1],
                a22: p[0],
                ty: p[3],
            },
        }
    }

    /// Closest parameters for a transform (exact for affine, projected for similarity).
    fn params_of(self, t: &AffineTransform) -> Vec<f64> {
        match self {
            PoseModel::Affine => t.coeffs().to_vec(),
            PoseModel::Similarity => vec![0.5 * (t.a11 + t.a22), 0.5 * (t.a21 - t.a12), t.tx, t.ty],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseOptions {
    pub model: PoseModel,
    /// Huber threshold in pixels; `None` is plain least squares.
    pub huber_delta: Option<f64>,
}

impl Default for PoseOptions {
    fn default() -> Self {
        Self {
            model: PoseModel::Affine,
            huber_delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub poses: Vec<GlobalPose>,
    pub member_tiles: Vec<usize>,
    pub reference: usize,
    /// Per-coordinate RMS of the correspondence residuals, in pixels.
    pub residual_rms: f64,
}

impl Layout {
    pub fn pose(&self, tile: usize) -> Option<&AffineTransform> {
        self.poses.iter().find(|p| p.tile_index == tile).map(|p| &p.transform)
    }

    pub fn to_record(&self) -> LayoutRecord {
        LayoutRecord {
            reference: self.reference,
            members: self.member_tiles.clone(),
            residual_rms_px: self.residual_rms,
            poses: self
                .poses
                .iter()
                .map(|p| PoseRecord {
                    tile: p.tile_index,
                    coeffs: p.transform.coeffs(),
                })
                .collect(),
        }
    }
}

/// Serialized layout: six coefficients `(a11, a12, tx, a21, a22, ty)` per tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRecord {
    pub reference: usize,
    pub members: Vec<usize>,
    pub residual_rms_px: f64,
    pub poses: Vec<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub tile: usize,
    pub coeffs: [f64; 6],
}

/// Largest connected component of the pair graph and the remaining tiles, both
/// sorted. Equal-size components are ranked by their smallest tile index.
pub fn largest_component(g: &PairGraph) -> (Vec<usize>, Vec<usize>) {
    let nodes: BTreeSet<usize> = g
        .nodes
        .iter()
        .copied()
        .chain(g.edges.iter().flat_map(|e| [e.tile_a, e.tile_b]))
        .collect();
    let mut parent: BTreeMap<usize, usize> = nodes.iter().map(|&n| (n, n)).collect();
    fn find(parent: &mut BTreeMap<usize, usize>, mut x: usize) -> usize {
        while parent[&x] != x {
            let up = parent[&parent[&x]];
            parent.insert(x, up);
            x = up;
        }
        x
    }
    for e in &g.edges {
        let (ra, rb) = (find(&mut parent, e.tile_a), find(&mut parent, e.tile_b));
        if ra != rb {
            // Smaller index becomes the root so roots are component minima.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent.insert(hi, lo);
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &n in &nodes {
        let r = find(&mut parent, n);
        comps.entry(r).or_default().push(n);
    }
    let best = comps
        .values()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .cloned()
        .unwrap_or_default();
    let dropped = nodes.iter().copied().filter(|n| !best.contains(n)).collect();
    (best, dropped)
}

/// Member with the largest summed edge confidence (ties: smallest index).
pub fn reference_tile(g: &PairGraph, members: &[usize]) -> Option<usize> {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    members.iter().copied().max_by(|&a, &b| {
        let total = |t: usize| -> f64 {
            g.edges
                .iter()
                .filter(|e| e.contains(t) && set.contains(&e.other(t)))
                .map(|e| e.confidence)
                .sum()
        };
        total(a).total_cmp(&total(b)).then(b.cmp(&a))
    })
}

/// Poses composed along the maximum-confidence spanning tree rooted at the
/// reference tile. Returned in `members` order.
pub fn initial_poses(g: &PairGraph, members: &[usize]) -> Result<Vec<GlobalPose>> {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let Some(root) = reference_tile(g, members) else {
        return Ok(Vec::new());
    };
    let mut poses: BTreeMap<usize, AffineTransform> = BTreeMap::new();
    poses.insert(root, AffineTransform::identity());
    let edges: Vec<_> = g
        .edges
        .iter()
        .filter(|e| set.contains(&e.tile_a) && set.contains(&e.tile_b))
        .collect();

    while poses.len() < set.len() {
        // Highest-confidence edge leaving the tree; ties by (tile_a, tile_b).
        let next = edges
            .iter()
            .filter(|e| poses.contains_key(&e.tile_a) != poses.contains_key(&e.tile_b))
            .max_by(|a, b| {
                a.confidence
                    .total_cmp(&b.confidence)
                    .then((b.tile_a, b.tile_b).cmp(&(a.tile_a, a.tile_b)))
            });
        let Some(e) = next else {
            return Err(Error::Disconnected);
        };
        if let Some(pa) = poses.get(&e.tile_a).copied() {
            poses.insert(e.tile_b, pa.compose(&e.transform));
        } else {
            let pb = poses[&e.tile_b];
            poses.insert(e.tile_a, pb.compose(&e.transform.inverse()?));
        }
    }
    Ok(members
        .iter()
        .map(|&t| GlobalPose {
            tile_index: t,
            transform: poses[&t],
        })
        .collect())
}

/// One correspondence: `point_a` in tile `a` should land where `point_b` in tile `b` lands.
#[derive(Debug, Clone, Copy)]
struct Correspondence {
    a: usize,
    b: usize,
    point_a: Point,
    point_b: Point,
}

/// The linear least-squares pose problem with the reference tile frozen.
#[derive(Debug, Clone)]
pub struct PoseProblem {
    model: PoseModel,
    reference: usize,
    /// Non-reference members in ascending order; slot `k` owns parameters `k*dof..(k+1)*dof`.
    free: Vec<usize>,
    slot: BTreeMap<usize, usize>,
    corr: Vec<Correspondence>,
}

impl PoseProblem {
    pub fn new(g: &PairGraph, members: &[usize], reference: usize, model: PoseModel) -> Self {
        let set: BTreeSet<usize> = members.iter().copied().collect();
        let free: Vec<usize> = set.iter().copied().filter(|&t| t != reference).collect();
        let slot = free.iter().enumerate().map(|(k, &t)| (t, k)).collect();
        let corr = g
            .edges
            .iter()
            .filter(|e| set.contains(&e.tile_a) && set.contains(&e.tile_b))
            .flat_map(|e| {
                e.points.iter().map(move |&(pa, pb)| Correspondence {
                    a: e.tile_a,
                    b: e.tile_b,
                    point_a: pa,
                    point_b: pb,
                })
            })
            .collect();
        Self {
            model,
            reference,
            free,
            slot,
            corr,
        }
    }

    /// Tile frozen at identity.
    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn num_params(&self) -> usize {
        self.free.len() * self.model.dof()
    }

    pub fn num_residuals(&self) -> usize {
        self.corr.len()
    }

    pub fn params_from_poses(&self, poses: &[GlobalPose]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        let dof = self.model.dof();
        for p in poses {
            if let Some(&k) = self.slot.get(&p.tile_index) {
                out[k * dof..(k + 1) * dof].copy_from_slice(&self.model.params_of(&p.transform));
            }
        }
        out
    }

    pub fn transform(&self, params: &[f64], tile: usize) -> AffineTransform {
        match self.slot.get(&tile) {
            Some(&k) => {
                let dof = self.model.dof();
                self.model.to_transform(&params[k * dof..(k + 1) * dof])
            }
            None => AffineTransform::identity(),
        }
    }

    fn residual(&self, params: &[f64], c: &Correspondence) -> (f64, f64) {
        let pa = self.transform(params, c.a).apply(c.point_a);
        let pb = self.transform(params, c.b).apply(c.point_b);
        (pa.0 - pb.0, pa.1 - pb.1)
    }

    /// Sum of squared residual norms.
    pub fn cost(&self, params: &[f64]) -> f64 {
        self.corr
            .iter()
            .map(|c| {
                let r = self.residual(params, c);
                r.0 * r.0 + r.1 * r.1
            })
            .sum()
    }

    /// Analytic gradient of [`cost`](Self::cost).
    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let dof = self.model.dof();
        let mut g = vec![0.0; params.len()];
        for c in &self.corr {
            let r = self.residual(params, c);
            for (tile, pt, sign) in [(c.a, c.point_a, 1.0), (c.b, c.point_b, -1.0)] {
                if let Some(&k) = self.slot.get(&tile) {
                    let jac = self.model.jacobian(pt);
                    for d in 0..dof {
                        g[k * dof + d] += 2.0 * sign * (jac[0][d] * r.0 + jac[1][d] * r.1);
                    }
                }
            }
        }
        g
    }

    /// Weighted normal equations `H x = rhs` for the linear residual model.
    fn normal_equations(&self, weights: &[f64]) -> (SymMatrix, Vec<f64>) {
        let dof = self.model.dof();
        let n = self.num_params();
        let mut h = SymMatrix::zeros(n);
        let mut rhs = vec![0.0; n];
        let zero = vec![0.0; n];
        for (c, &w) in self.corr.iter().zip(weights) {
            // Residual = J x + r0, with r0 the residual at x = 0.
            let r0 = self.residual(&zero, c);
            let mut blocks: Vec<(usize, [[f64; 6]; 2])> = Vec::with_capacity(2);
            for (tile, pt, sign) in [(c.a, c.point_a, 1.0), (c.b, c.point_b, -1.0)] {
                if let Some(&k) = self.slot.get(&tile) {
                    let mut jac = self.model.jacobian(pt);
                    for row in jac.iter_mut() {
                        for v in row.iter_mut() {
                            *v *= sign;
                        }
                    }
                    blocks.push((k, jac));
                }
            }
            for &(ki, ji) in &blocks {
                for di in 0..dof {
                    rhs[ki * dof + di] -= w * (ji[0][di] * r0.0 + ji[1][di] * r0.1);
                }
                for &(kj, jj) in &blocks {
                    for di in 0..dof {
                        for dj in 0..dof {
                            let (gi, gj) = (ki * dof + di, kj * dof + dj);
                            if gj < gi {
                                continue;
                            }
                            // Each unordered (gi, gj) pair is visited exactly once.
                            h.add_sym(gi, gj, w * (ji[0][di] * jj[0][dj] + ji[1][di] * jj[1][dj]));
                        }
                    }
                }
            }
        }
        (h, rhs)
    }

    /// Minimizes the (optionally Huber-weighted) objective.
    pub fn solve(&self, huber_delta: Option<f64>) -> Result<Vec<f64>> {
        let mut weights = vec![1.0; self.corr.len()];
        let rounds = if huber_delta.is_some() { 10 } else { 1 };
        let mut x = vec![0.0; self.num_params()];
        for _ in 0..rounds {
            let (h, rhs) = self.normal_equations(&weights);
            x = self.solve_scaled(&h, &rhs)?;
            // Iterative refinement against the assembled system.
            for _ in 0..2 {
                let hx = h.mul_vec(&x);
                let resid: Vec<f64> = rhs.iter().zip(&hx).map(|(b, a)| b - a).collect();
                let dx = self.solve_scaled(&h, &resid)?;
                x.iter_mut().zip(dx).for_each(|(v, d)| *v += d);
            }
            if let Some(delta) = huber_delta {
                for (w, c) in weights.iter_mut().zip(&self.corr) {
                    let r = self.residual(&x, c);
                    let norm = (r.0 * r.0 + r.1 * r.1).sqrt();
                    *w = if norm <= delta { 1.0 } else { delta / norm };
                }
            }
        }
        Ok(x)
    }

    fn solve_scaled(&self, h: &SymMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = h.dim();
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let d = h.get(i, i);
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut hs = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                hs.add_sym(i, j, h.get(i, j) * scale[i] * scale[j]);
            }
        }
        let bs: Vec<f64> = rhs.iter().zip(&scale).map(|(b, s)| b * s).collect();
        let ys = cholesky_solve(&hs, &bs).map_err(|bad| {
            let dof = self.model.dof();
            let tiles: BTreeSet<usize> = bad.iter().map(|&i| self.free[i / dof]).collect();
            Error::RankDeficient {
                tiles: tiles.into_iter().collect(),
            }
        })?;
        Ok(ys.iter().zip(&scale).map(|(y, s)| y * s).collect())
    }
}

/// Refines `initial` poses over all inlier correspondences of `g`, keeping the
/// reference tile (the member with the highest summed confidence) at identity.
pub fn refine_poses(initial: &[GlobalPose], g: &PairGraph, opts: &PoseOptions) -> Result<Layout> {
    let members: Vec<usize> = {
        let mut m: Vec<usize> = initial.iter().map(|p| p.tile_index).collect();
        m.sort_unstable();
        m
    };
    let is_identity = |t: usize| {
        initial
            .iter()
            .any(|p| p.tile_index == t && p.transform == AffineTransform::identity())
    };
    let preferred = reference_tile(g, &members);
    let reference = match preferred {
        Some(r) if is_identity(r) => r,
        _ => initial
            .iter()
            .find(|p| p.transform == AffineTransform::identity())
            .map(|p| p.tile_index)
            .or(preferred)
            .unwrap_or(0),
    };
    let problem = PoseProblem::new(g, &members, reference, opts.model);
    let params = if problem.num_params() == 0 {
        Vec::new()
    } else {
        problem.solve(opts.huber_delta)?
    };
    let residual_rms = if problem.num_residuals() == 0 {
        0.0
    } else {
        (problem.cost(&params) / (2 * problem.num_residuals()) as f64).sqrt()
    };
    let poses = members
        .iter()
        .map(|&t| GlobalPose {
            tile_index: t,
            transform: problem.transform(&params, t),
        })
        .collect::<Vec<_>>();
    for p in &poses {
        p.transform.inverse()?;
    }
    Ok(Layout {
        poses,
        member_tiles: members,
        reference,
        residual_rms,
    })
}
