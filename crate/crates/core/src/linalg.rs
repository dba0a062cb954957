//! Dense symmetric positive-definite solves for the normal equations.

/// Row-major symmetric matrix stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Adds `v` at `(i, j)` and `(j, i)` (once on the diagonal).
    #[inline]
    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
        if i != j {
            self.data[j * self.n + i] += v;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Solves `A x = b` by Cholesky factorization. On failure returns the indices
/// whose pivots collapsed (relative to the original diagonal); those are the
/// unknowns the system does not constrain.
pub fn cholesky_solve(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>, Vec<usize>> {
    let n = a.n;
    assert_eq!(b.len(), n);
    let mut l = vec![0.0; n * n];
    let mut bad = Vec::new();
    for j in 0..n {
        let diag = a.get(j, j);
        let mut s = diag;
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > 1e-10 * diag.abs().max(f64::MIN_POSITIVE)) || !s.is_finite() {
            bad.push(j);
            // Decouple the unknown so the remaining pivots stay meaningful.
            l[j * n + j] = 1.0;
            for i in j + 1..n {
                l[i * n + j] = 0.0;
            }
            continue;
        }
        let d = s.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    if !bad.is_empty() {
        return Err(bad);
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}
