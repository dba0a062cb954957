//! Gaussian / difference-of-Gaussians pyramid.

/// Single-channel `f32` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(src: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return src.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (src.width, src.height);

    // Horizontal pass over a padded row.
    let mut tmp = Plane::new(w, h);
    let mut padded = vec![0.0f32; w + 2 * radius as usize];
    for y in 0..h {
        let row = src.row(y);
        for (i, p) in padded.iter_mut().enumerate() {
            *p = row[reflect101(i as isize - radius, w)];
        }
        let out = &mut tmp.data[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let window = &padded[x..x + kernel.len()];
            *o = window.iter().zip(&kernel).map(|(a, b)| a * b).sum();
        }
    }

    // Vertical pass, accumulating whole rows.
    let mut dst = Plane::new(w, h);
    for y in 0..h {
        let out = &mut dst.data[y * w..(y + 1) * w];
        for (j, &kv) in kernel.iter().enumerate() {
            let sy = reflect101(y as isize + j as isize - radius, h);
            let srow = &tmp.data[sy * w..(sy + 1) * w];
            for (o, s) in out.iter_mut().zip(srow) {
                *o += kv * s;
            }
        }
    }
    dst
}

/// 2x upsampling: even samples copy the source, odd samples average their two
/// neighbours (edge samples are replicated).
pub fn upsample2(src: &Plane) -> Plane {
    let (w, h) = (src.width, src.height);
    let (ow, oh) = (2 * w, 2 * h);
    let mut horiz = Plane::new(ow, h);
    for y in 0..h {
        let row = src.row(y);
        for x in 0..w {
            let a = row[x];
            let b = row[(x + 1).min(w - 1)];
            horiz.data[y * ow + 2 * x] = a;
            horiz.data[y * ow + 2 * x + 1] = 0.5 * (a + b);
        }
    }
    let mut out = Plane::new(ow, oh);
    for y in 0..h {
        let a = y * ow;
        let b = (y + 1).min(h - 1) * ow;
        for x in 0..ow {
            let va = horiz.data[a + x];
            let vb = horiz.data[b + x];
            out.data[2 * y * ow + x] = va;
            out.data[(2 * y + 1) * ow + x] = 0.5 * (va + vb);
        }
    }
    out
}

/// Keeps every other sample in both directions.
pub fn downsample2(src: &Plane) -> Plane {
    let (w, h) = (src.width / 2, src.height / 2);
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = src.at(2 * x, 2 * y);
        }
    }
    out
}

pub struct Pyramid {
    /// `gaussians[octave][layer]`, `scales + 3` layers per octave.
    pub gaussians: Vec<Vec<Plane>>,
    /// `dogs[octave][layer]`, `scales + 2` layers per octave.
    pub dogs: Vec<Vec<Plane>>,
    pub scales: usize,
    pub sigma0: f64,
}

/// Builds the scale space from a seed image already blurred to `sigma0`.
pub fn build_pyramid(seed: Plane, octaves: usize, scales: usize, sigma0: f64) -> Pyramid {
    let k = 2f64.powf(1.0 / scales as f64);
    let increments: Vec<f64> = (1..scales + 3)
        .map(|i| {
            let prev = sigma0 * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut gaussians: Vec<Vec<Plane>> = Vec::with_capacity(octaves);
    for o in 0..octaves {
        let base = if o == 0 {
            seed.clone()
        } else {
            downsample2(&gaussians[o - 1][scales])
        };
        let mut layers = Vec::with_capacity(scales + 3);
        layers.push(base);
        for inc in &increments {
            let next = gaussian_blur(layers.last().expect("nonempty"), *inc);
            layers.push(next);
        }
        gaussians.push(layers);
    }

    let dogs = gaussians
        .iter()
        .map(|layers| {
            layers
                .windows(2)
                .map(|pair| {
                    let mut d = Plane::new(pair[0].width, pair[0].height);
                    for ((o, a), b) in d.data.iter_mut().zip(&pair[0].data).zip(&pair[1].data) {
                        *o = b - a;
                    }
                    d
                })
                .collect()
        })
        .collect();

    Pyramid {
        gaussians,
        dogs,
        scales,
        sigma0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.7);
        let s: f32 = k.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let mut p = Plane::new(20, 13);
        p.data.iter_mut().for_each(|v| *v = 0.25);
        let b = gaussian_blur(&p, 2.3);
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn blur_commutes_with_transpose() {
        let mut p = Plane::new(9, 7);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32;
        }
        let mut t = Plane::new(7, 9);
        for y in 0..7 {
            for x in 0..9 {
                t.data[x * 7 + y] = p.at(x, y);
            }
        }
        let bp = gaussian_blur(&p, 1.3);
        let bt = gaussian_blur(&t, 1.3);
        for y in 0..7 {
            for x in 0..9 {
                assert!((bp.at(x, y) - bt.at(y, x)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn up_and_down_sampling_round_trip() {
        let mut p = Plane::new(6, 5);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let up = upsample2(&p);
        assert_eq!((up.width, up.height), (12, 10));
        assert_eq!(up.at(3, 0), 1.5);
        assert_eq!(downsample2(&up), p);
    }
}
