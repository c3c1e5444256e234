//! Shared test oracles, independent of the library's solve paths.

use texshield_core::filter::SmoothingSystem;

/// Assemble the dense system matrix `A = Id + λ·(DxᵀWxDx + DyᵀWyDy)` from
/// the public weight fields, then solve `A·x = b` by Gaussian elimination
/// with partial pivoting in f64. Quadratic storage — keep images small.
pub fn dense_solve(system: &SmoothingSystem, b: &[f64]) -> Vec<f64> {
    let (h, w) = (system.height, system.width);
    let n = h * w;
    assert_eq!(b.len(), n);
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    let lam = system.lambda;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let p = y * w + x;
            let we = lam * system.wx[y * (w - 1) + x];
            a[p * n + p] += we;
            a[(p + 1) * n + p + 1] += we;
            a[p * n + p + 1] -= we;
            a[(p + 1) * n + p] -= we;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let p = y * w + x;
            let we = lam * system.wy[y * w + x];
            a[p * n + p] += we;
            a[(p + w) * n + p + w] += we;
            a[p * n + p + w] -= we;
            a[(p + w) * n + p] -= we;
        }
    }

    let mut rhs = b.to_vec();
    // Gaussian elimination with partial pivoting.
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (pivot_row, _) = (col..n)
            .map(|r| (r, a[perm[r] * n + col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        perm.swap(col, pivot_row);
        let prow = perm[col];
        let pivot = a[prow * n + col];
        assert!(pivot.abs() > 1e-300, "singular system");
        for r in col + 1..n {
            let row = perm[r];
            let factor = a[row * n + col] / pivot;
            if factor != 0.0 {
                for c in col..n {
                    a[row * n + c] -= factor * a[prow * n + c];
                }
                rhs[row] -= factor * rhs[prow];
            }
        }
    }
    let mut x = vec![0.0f64; n];
    for col in (0..n).rev() {
        let row = perm[col];
        let mut v = rhs[row];
        for c in col + 1..n {
            v -= a[row * n + c] * x[c];
        }
        x[col] = v / a[row * n + col];
    }
    x
}

/// Independent log-sum-exp cross-entropy evaluation used against the
/// library's segmentation loss.
pub fn lse_cross_entropy(logits: &[f32], c: usize, labels: &[u8], ignore: u8) -> (f64, usize) {
    let pixels = labels.len();
    assert_eq!(logits.len(), c * pixels);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for p in 0..pixels {
        if labels[p] == ignore {
            continue;
        }
        // Direct sum of exponentials, no max shift: an intentionally
        // different route than the implementation.
        let mut denom = 0.0f64;
        for ci in 0..c {
            denom += (logits[ci * pixels + p] as f64).exp();
        }
        sum += denom.ln() - logits[labels[p] as usize * pixels + p] as f64;
        count += 1;
    }
    (sum, count)
}
