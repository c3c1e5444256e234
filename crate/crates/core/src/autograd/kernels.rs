//! Dense numeric kernels behind the tape operations.
//!
//! All reductions accumulate beyond f32: dot products run in f32 within
//! fixed 32-step blocks and in f64 across blocks, statistics and losses
//! accumulate in f64 throughout. Accumulation order is fixed, so results
//! are bit-reproducible run to run.

const BLOCK: usize = 32;

/// `c = a[m×k] · b[k×n]` (row-major), f32 inputs, f64 cross-block
/// accumulation, f32 result. When `accumulate` is set the product is added
/// onto the existing contents of `c`.
pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut row64 = vec![0.0f64; n];
    let mut block = vec![0.0f32; n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        if accumulate {
            for (acc, &cv) in row64.iter_mut().zip(c[i * n..(i + 1) * n].iter()) {
                *acc = cv as f64;
            }
        } else {
            row64.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut p0 = 0;
        while p0 < k {
            let p1 = (p0 + BLOCK).min(k);
            block.iter_mut().for_each(|v| *v = 0.0);
            for p in p0..p1 {
                let av = arow[p];
                if av != 0.0 {
                    let brow = &b[p * n..(p + 1) * n];
                    for (bl, &bv) in block.iter_mut().zip(brow.iter()) {
                        *bl += av * bv;
                    }
                }
            }
            for (acc, &bl) in row64.iter_mut().zip(block.iter()) {
                *acc += bl as f64;
            }
            p0 = p1;
        }
        for (cv, &acc) in c[i * n..(i + 1) * n].iter_mut().zip(row64.iter()) {
            *cv = acc as f32;
        }
    }
}

pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Output spatial extent of a convolution; `None` when the geometry does
/// not tile exactly.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if span < kernel {
        return None;
    }
    let d = span - kernel;
    if d % stride != 0 {
        return None;
    }
    Some(d / stride + 1)
}

/// Gather one sample's patches: `cols[(c·kh·kw + r·kw + q)][oy·ow + ox]`.
/// Out-of-bounds taps read as zero (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let plane = oh * ow;
    for ch in 0..c {
        let xch = &x[ch * h * w..(ch + 1) * h * w];
        for r in 0..kh {
            for q in 0..kw {
                let row = &mut cols[(ch * kh * kw + r * kw + q) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + r) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        row[oy * ow..(oy + 1) * ow].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + q) as isize - padding as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input plane; adjoint of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let plane = oh * ow;
    for ch in 0..c {
        let dxch = &mut dx[ch * h * w..(ch + 1) * h * w];
        for r in 0..kh {
            for q in 0..kw {
                let row = &cols[(ch * kh * kw + r * kw + q) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + r) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + q) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        let e = (-x).exp();
        1.0 / (1.0 + e)
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large |x|.
#[inline]
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        matmul(&a, &b, &mut c, 2, 2, 2, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_accumulate() {
        let a = [1.0f32];
        let b = [2.0f32];
        let mut c = [10.0f32];
        matmul(&a, &b, &mut c, 1, 1, 1, true);
        assert_eq!(c, [12.0]);
    }

    #[test]
    fn matmul_long_reduction_is_accurate() {
        // 1e4 alternating large/small terms; naive f32 drifts well above
        // the f64 reference, blocked accumulation stays within 1e-6 rel.
        let k = 10_000;
        let a: Vec<f32> = (0..k)
            .map(|i| if i % 2 == 0 { 1.0 } else { 1.0e-4 })
            .collect();
        let b: Vec<f32> = (0..k)
            .map(|i| if i % 3 == 0 { 0.5 } else { 0.25 })
            .collect();
        let reference: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let mut c = [0.0f32];
        matmul(&a, &b, &mut c, 1, k, 1, false);
        let rel = ((c[0] as f64 - reference) / reference.abs()).abs();
        assert!(rel < 1e-6, "rel error {rel}");
    }

    #[test]
    fn conv_extent_rejects_ragged_geometry() {
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_extent(5, 3, 2, 1), Some(3));
        assert_eq!(conv_out_extent(6, 3, 2, 1), None);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random data: the pair is an
        // exact transpose.
        let mut rng = crate::rng::Xoshiro256PlusPlus::new(5);
        use rand::Rng;
        let (c, h, w, kh, kw, s, p) = (2usize, 5usize, 7usize, 3usize, 3usize, 2usize, 1usize);
        let oh = conv_out_extent(h, kh, s, p).unwrap();
        let ow = conv_out_extent(w, kw, s, p).unwrap();
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..c * kh * kw * oh * ow)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut cols = vec![0.0f32; y.len()];
        im2col(&x, c, h, w, kh, kw, s, p, oh, ow, &mut cols);
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let mut dx = vec![0.0f32; x.len()];
        col2im_add(&y, c, h, w, kh, kw, s, p, oh, ow, &mut dx);
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(100.0) > 0.999_999);
        assert!(sigmoid(-100.0) < 1.0e-6);
        assert!((softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
        assert!((softplus(50.0) - 50.0).abs() < 1e-6);
        assert!(softplus(-50.0) >= 0.0);
    }
}
