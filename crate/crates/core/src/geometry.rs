//! 2D affine transforms and their least-squares estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// `(x, y) -> (a11*x + a12*y + tx, a21*x + a22*y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub tx: f64,
    pub a21: f64,
    pub a22: f64,
    pub ty: f64,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self {
            a11: 1.0,
            a12: 0.0,
            tx,
            a21: 0.0,
            a22: 1.0,
            ty,
        }
    }

    /// Rotation by `theta` (radians, +x towards +y) followed by a translation.
    pub fn rigid(theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            a11: c,
            a12: -s,
            tx,
            a21: s,
            a22: c,
            ty,
        }
    }

    /// Coefficients in `(a11, a12, tx, a21, a22, ty)` order.
    pub fn coeffs(&self) -> [f64; 6] {
        [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]
    }

    pub fn from_coeffs(c: [f64; 6]) -> Self {
        Self {
            a11: c[0],
            a12: c[1],
            tx: c[2],
            a21: c[3],
            a22: c[4],
            ty: c[5],
        }
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        (
            self.a11 * p.0 + self.a12 * p.1 + self.tx,
            self.a21 * p.0 + self.a22 * p.1 + self.ty,
        )
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a11: self.a11 * other.a11 + self.a12 * other.a21,
            a12: self.a11 * other.a12 + self.a12 * other.a22,
            tx: self.a11 * other.tx + self.a12 * other.ty + self.tx,
            a21: self.a21 * other.a11 + self.a22 * other.a21,
            a22: self.a21 * other.a12 + self.a22 * other.a22,
            ty: self.a21 * other.tx + self.a22 * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.det();
        let scale = self.a11.abs().max(self.a12.abs()).max(self.a21.abs()).max(self.a22.abs());
        if !det.is_finite() || det.abs() <= 1e-12 * scale * scale || scale == 0.0 {
            return Err(Error::SingularTransform);
        }
        let inv = 1.0 / det;
        let a11 = self.a22 * inv;
        let a12 = -self.a12 * inv;
        let a21 = -self.a21 * inv;
        let a22 = self.a11 * inv;
        Ok(AffineTransform {
            a11,
            a12,
            tx: -(a11 * self.tx + a12 * self.ty),
            a21,
            a22,
            ty: -(a21 * self.tx + a22 * self.ty),
        })
    }

    pub fn max_coeff_diff(&self, other: &AffineTransform) -> f64 {
        self.coeffs()
            .iter()
            .zip(other.coeffs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Exact affine map sending three source points onto three destination points.
/// `None` when the source points are (nearly) collinear.
pub fn fit_affine_exact(src: [Point; 3], dst: [Point; 3]) -> Option<AffineTransform> {
    let (x0, y0) = src[0];
    let (ux, uy) = (src[1].0 - x0, src[1].1 - y0);
    let (vx, vy) = (src[2].0 - x0, src[2].1 - y0);
    let det = ux * vy - uy * vx;
    let extent = (ux * ux + uy * uy).max(vx * vx + vy * vy);
    if extent == 0.0 || det.abs() <= 1e-6 * extent {
        return None;
    }
    // Solve [u v] * [a b; c d]^T = [du dv] for each output coordinate.
    let solve = |d0: f64, d1: f64, d2: f64| {
        let (du, dv) = (d1 - d0, d2 - d0);
        let a = (du * vy - dv * uy) / det;
        let b = (dv * ux - du * vx) / det;
        (a, b, d0 - a * x0 - b * y0)
    };
    let (a11, a12, tx) = solve(dst[0].0, dst[1].0, dst[2].0);
    let (a21, a22, ty) = solve(dst[0].1, dst[1].1, dst[2].1);
    Some(AffineTransform {
        a11,
        a12,
        tx,
        a21,
        a22,
        ty,
    })
}

/// Least-squares affine map from `src` to `dst`; `None` with fewer than three
/// non-collinear points.
pub fn fit_affine_lsq(pairs: impl IntoIterator<Item = (Point, Point)>) -> Option<AffineTransform> {
    fit_affine_weighted(pairs.into_iter().map(|(s, d)| (s, d, 1.0)))
}

/// Weighted least-squares affine map.
pub fn fit_affine_weighted(pairs: impl IntoIterator<Item = (Point, Point, f64)>) -> Option<AffineTransform> {
    let pairs: Vec<(Point, Point, f64)> = pairs.into_iter().filter(|p| p.2 > 0.0).collect();
    if pairs.len() < 3 {
        return None;
    }
    let wsum: f64 = pairs.iter().map(|p| p.2).sum();
    let mean = |f: &dyn Fn(&(Point, Point, f64)) -> f64| pairs.iter().map(|p| p.2 * f(p)).sum::<f64>() / wsum;
    let (mx, my) = (mean(&|p| p.0 .0), mean(&|p| p.0 .1));
    let (mu, mv) = (mean(&|p| p.1 .0), mean(&|p| p.1 .1));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut sxu, mut syu, mut sxv, mut syv) = (0.0, 0.0, 0.0, 0.0);
    for &((x, y), (u, v), w) in &pairs {
        let (dx, dy, du, dv) = (x - mx, y - my, u - mu, v - mv);
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
        sxu += w * dx * du;
        syu += w * dy * du;
        sxv += w * dx * dv;
        syv += w * dy * dv;
    }
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-9 * (sxx * syy).max(f64::MIN_POSITIVE)) {
        return None;
    }
    let a11 = (sxu * syy - syu * sxy) / det;
    let a12 = (syu * sxx - sxu * sxy) / det;
    let a21 = (sxv * syy - syv * sxy) / det;
    let a22 = (syv * sxx - sxv * sxy) / det;
    Some(AffineTransform {
        a11,
        a12,
        tx: mu - a11 * mx - a12 * my,
        a21,
        a22,
        ty: mv - a21 * mx - a22 * my,
    })
}
