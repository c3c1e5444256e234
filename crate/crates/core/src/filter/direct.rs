//! Banded Cholesky factorization of the smoothing system.
//!
//! The optimality system is SPD with bandwidth `min(H, W)` under
//! row-major ordering of the shorter axis, so desk-scale images admit an
//! exact in-core factorization: `O(n·b²)` to factor once per image and
//! `O(n·b)` per right-hand side, shared across the three channels and the
//! implicit-derivative solves. The training harness uses this path; the
//! public solver contract stays with conjugate gradients.

use super::SmoothingSystem;

/// Lower-banded Cholesky factor `A = L·Lᵀ`. Row-major band storage,
/// `store[i·(bands+1) + d] = L[i, i−d]`, keeps each elimination window
/// cache-resident.
pub(super) struct BandedCholesky {
    store: Vec<f64>,
    n: usize,
    bands: usize,
    /// The grid was transposed so the bandwidth is `min(H, W)`.
    transposed: bool,
    height: usize,
    width: usize,
}

/// Refuse factorizations beyond this many stored entries (`≈ 64 MiB`).
const MAX_ENTRIES: usize = 1 << 23;

impl BandedCholesky {
    /// Whether the direct path is reasonable for this grid.
    pub(super) fn feasible(system: &SmoothingSystem) -> bool {
        let (h, w) = (system.height, system.width);
        let bands = h.min(w);
        h * w * (bands + 1) <= MAX_ENTRIES
    }

    pub(super) fn build(system: &SmoothingSystem) -> Self {
        // Order along the longer axis so the band is the shorter one.
        let transposed = system.width > system.height;
        let (h, w) = if transposed {
            (system.width, system.height)
        } else {
            (system.height, system.width)
        };
        let n = h * w;
        let bands = w;
        let lam = system.lambda;

        // Assemble the band envelope of A in the (possibly transposed)
        // ordering: diagonal, distance-1 (west), distance-w (north).
        let wx_at = |y: usize, x: usize| -> f64 {
            // Edge between (y,x) and (y,x+1) in factor coordinates.
            if transposed {
                // Factor x-step = original y-step.
                system.wy[x * system.width + y]
            } else {
                system.wx[y * (system.width - 1) + x]
            }
        };
        let wy_at = |y: usize, x: usize| -> f64 {
            if transposed {
                system.wx[x * (system.width - 1) + y]
            } else {
                system.wy[y * system.width + x]
            }
        };

        let stride = bands + 1;
        let mut store = vec![0.0f64; stride * n];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut d = 1.0;
                if x > 0 {
                    d += lam * wx_at(y, x - 1);
                }
                if x + 1 < w {
                    d += lam * wx_at(y, x);
                }
                if y > 0 {
                    d += lam * wy_at(y - 1, x);
                }
                if y + 1 < h {
                    d += lam * wy_at(y, x);
                }
                store[p * stride] = d;
                if x > 0 {
                    store[p * stride + 1] = -lam * wx_at(y, x - 1);
                }
                if y > 0 {
                    store[p * stride + bands] = -lam * wy_at(y - 1, x);
                }
            }
        }

        // In-place banded Cholesky: for each column j, divide by the
        // pivot and update the remaining envelope (a triangle of at most
        // bands+1 consecutive rows, which stays cache-resident).
        for j in 0..n {
            let pivot = store[j * stride].max(1.0e-300).sqrt();
            store[j * stride] = pivot;
            let hi = (j + bands).min(n - 1);
            for i in j + 1..=hi {
                store[i * stride + i - j] /= pivot;
            }
            for k in j + 1..=hi {
                let ljk = store[k * stride + k - j];
                if ljk == 0.0 {
                    continue;
                }
                // A[i, k] -= L[i, j] * L[k, j] for i in k..=hi.
                for i in k..=hi {
                    let lij = store[i * stride + i - j];
                    store[i * stride + i - k] -= lij * ljk;
                }
            }
        }

        Self {
            store,
            n,
            bands,
            transposed,
            height: system.height,
            width: system.width,
        }
    }

    /// Solve `A·x = b` exactly (to rounding); `b` and `x` are in the
    /// original row-major image order.
    pub(super) fn solve(&self, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        let bands = self.bands;
        let mut y = vec![0.0f64; n];
        let reindex = |p: usize| -> usize {
            if self.transposed {
                // p indexes the original (h, w); factor order is (w, h).
                let (py, px) = (p / self.width, p % self.width);
                px * self.height + py
            } else {
                p
            }
        };
        let stride = bands + 1;
        for p in 0..n {
            y[reindex(p)] = b[p];
        }
        // Forward: L·z = y (in place). Row i's band entries are
        // contiguous.
        for i in 0..n {
            let lo = i.saturating_sub(bands);
            let row = &self.store[i * stride..(i + 1) * stride];
            let mut v = y[i];
            for j in lo..i {
                v -= row[i - j] * y[j];
            }
            y[i] = v / row[0];
        }
        // Backward: Lᵀ·x = z.
        for i in (0..n).rev() {
            let hi = (i + bands).min(n - 1);
            let mut v = y[i];
            for j in i + 1..=hi {
                v -= self.store[j * stride + j - i] * y[j];
            }
            y[i] = v / self.store[i * stride];
        }
        for p in 0..n {
            x[p] = y[reindex(p)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{compute_weights, GuidedImage};
    use crate::tensor::Tensor;

    #[test]
    fn direct_solve_matches_operator() {
        let mut rng = crate::rng::Xoshiro256PlusPlus::new(77);
        for (h, w) in [(5usize, 9usize), (9, 5), (8, 8)] {
            let image = Tensor::rand_uniform(&[1, h, w], 0.0, 1.0, &mut rng);
            let img = GuidedImage::unguided(image.clone()).unwrap();
            let system = compute_weights(&img).with_lambda(2.5);
            assert!(BandedCholesky::feasible(&system));
            let chol = BandedCholesky::build(&system);
            let b: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
            let mut x = vec![0.0f64; b.len()];
            chol.solve(&b, &mut x);
            let mut ax = vec![0.0f64; b.len()];
            system.apply(&x, &mut ax);
            for (found, want) in ax.iter().zip(b.iter()) {
                assert!((found - want).abs() < 1e-9, "{found} vs {want} ({h}x{w})");
            }
        }
    }
}
