//! Training objectives and contour ground-truth extraction.
//!
//! The contour loss is a class-balanced binary cross-entropy with
//! `β = |Y−| / (|Y−| + |Y+|)` weighting the (rare) positive pixels; the
//! segmentation loss is a softmax cross-entropy over non-ignored pixels;
//! the total objective is `L_seg + α·L_contour` with α defaulting to 2.5.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value treated as "ignore" everywhere.
pub const IGNORE_LABEL: u8 = 255;
/// Default weight of the contour term in the total objective.
pub const DEFAULT_ALPHA: f32 = 2.5;
/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f32 = 1.0e-7;

/// Dense per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "LabelMap",
                format!("{} values for {}x{}", data.len(), height, width),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }
}

/// Binary contour map derived from semantic labels, with the pixel counts
/// and class-balance weight the contour loss needs.
#[derive(Clone, Debug)]
pub struct ContourTarget {
    pub height: usize,
    pub width: usize,
    /// 1 on contour pixels, 0 elsewhere.
    pub mask: Vec<u8>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `|Y−| / (|Y−| + |Y+|)`; 1 exactly when there are no contour pixels.
    pub beta: f32,
}

impl ContourTarget {
    fn from_mask(height: usize, width: usize, mask: Vec<u8>) -> Self {
        let n_pos = mask.iter().filter(|&&m| m != 0).count();
        let n_neg = height * width - n_pos;
        let beta = n_neg as f32 / (height * width) as f32;
        Self { height, width, mask, n_pos, n_neg, beta }
    }

    /// Reduce to a coarser stage resolution by max-pooling `factor`-sized
    /// windows, so thin positives survive downsampling. β is recomputed
    /// for the pooled map.
    pub fn downsample(&self, factor: usize) -> Result<ContourTarget> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {} does not tile {}x{}",
                factor, self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let mut mask = vec![0u8; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut any = 0u8;
                'win: for dy in 0..factor {
                    for dx in 0..factor {
                        if self.mask[(oy * factor + dy) * self.width + ox * factor + dx] != 0 {
                            any = 1;
                            break 'win;
                        }
                    }
                }
                mask[oy * ow + ox] = any;
            }
        }
        Ok(ContourTarget::from_mask(oh, ow, mask))
    }
}

/// Mark both sides of every class change: a pixel is contour iff it is
/// not ignored and some 4-neighbor carries a different, non-ignored class.
pub fn extract_contour_gt(labels: &LabelMap, ignore: u8) -> ContourTarget {
    let (h, w) = (labels.height, labels.width);
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let me = labels.data[y * w + x];
            if me == ignore {
                continue;
            }
            let mut contour = false;
            if x > 0 {
                let n = labels.data[y * w + x - 1];
                contour |= n != ignore && n != me;
            }
            if x + 1 < w {
                let n = labels.data[y * w + x + 1];
                contour |= n != ignore && n != me;
            }
            if y > 0 {
                let n = labels.data[(y - 1) * w + x];
                contour |= n != ignore && n != me;
            }
            if y + 1 < h {
                let n = labels.data[(y + 1) * w + x];
                contour |= n != ignore && n != me;
            }
            if contour {
                mask[y * w + x] = 1;
            }
        }
    }
    ContourTarget::from_mask(h, w, mask)
}

/// The contour map as a `[H, W]` float tensor in {0, 1}, e.g. for use as
/// boundary guidance of the texture filter.
pub fn contour_to_boundary(target: &ContourTarget) -> Tensor {
    Tensor {
        shape: vec![target.height, target.width],
        data: target.mask.iter().map(|&m| m as f32).collect(),
    }
}

/// Class-balanced binary cross-entropy (sum form):
/// `ℓ = −β·Σ_{j∈Y+} ln y_j − (1−β)·Σ_{j∈Y−} ln(1−y_j)`,
/// with predictions clamped into `[1e-7, 1−1e-7]`.
pub fn contour_loss(y: &[f32], target: &ContourTarget) -> Result<f64> {
    if y.len() != target.mask.len() {
        return Err(Error::shape(
            "contour_loss",
            format!("{} predictions vs {} target pixels", y.len(), target.mask.len()),
        ));
    }
    let beta = target.beta as f64;
    let mut loss = 0.0f64;
    for (&p, &m) in y.iter().zip(target.mask.iter()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP) as f64;
        if m != 0 {
            loss -= beta * p.ln();
        } else {
            loss -= (1.0 - beta) * (1.0 - p).ln();
        }
    }
    Ok(loss)
}

/// Softmax cross-entropy over non-ignored pixels of one or more images.
/// Returns `(sum, mean, pixel count)`; the sum is the plain per-pixel
/// cross-entropy total, the mean divides by the counted pixels.
pub fn seg_cross_entropy(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<(f64, f64, usize)> {
    let (n, c, h, w) = logits.dims4("seg_loss")?;
    if labels.len() != n * h * w {
        return Err(Error::shape(
            "seg_loss",
            format!("{} labels for {} pixels", labels.len(), n * h * w),
        ));
    }
    let plane = h * w;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ni in 0..n {
        for pix in 0..plane {
            let lab = labels[ni * plane + pix];
            if lab == ignore {
                continue;
            }
            if lab as usize >= c {
                return Err(Error::InvalidArgument(format!("label {lab} outside [0,{c})")));
            }
            let mut maxv = f64::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(logits.data[(ni * c + ci) * plane + pix] as f64);
            }
            let mut denom = 0.0f64;
            for ci in 0..c {
                denom += (logits.data[(ni * c + ci) * plane + pix] as f64 - maxv).exp();
            }
            sum += maxv + denom.ln() - logits.data[(ni * c + lab as usize) * plane + pix] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("seg_loss: every pixel is ignored".into()));
    }
    Ok((sum, sum / count as f64, count))
}

/// All loss terms of one optimization step.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub seg_loss: f64,
    pub contour_losses: Vec<f64>,
    pub contour_total: f64,
    pub alpha: f32,
    pub total: f64,
}

/// Combine per-map contour losses with the segmentation loss:
/// `L_total = L_seg + α·Σ ℓ_i`.
pub fn total_loss(seg: f64, contours: &[f64], alpha: f32) -> Result<LossBundle> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    if seg < 0.0 || contours.iter().any(|&c| c < 0.0) {
        return Err(Error::InvalidArgument("loss components must be non-negative".into()));
    }
    let contour_total: f64 = contours.iter().sum();
    Ok(LossBundle {
        seg_loss: seg,
        contour_losses: contours.to_vec(),
        contour_total,
        alpha,
        total: seg + alpha as f64 * contour_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_labels_have_no_contour() {
        let labels = LabelMap::filled(4, 4, 2);
        let t = extract_contour_gt(&labels, IGNORE_LABEL);
        assert_eq!(t.n_pos, 0);
        assert_eq!(t.beta, 1.0);
    }

    #[test]
    fn half_split_marks_two_central_columns() {
        let mut data = vec![0u8; 16];
        for y in 0..4 {
            for x in 2..4 {
                data[y * 4 + x] = 1;
            }
        }
        let labels = LabelMap::new(4, 4, data).unwrap();
        let t = extract_contour_gt(&labels, IGNORE_LABEL);
        assert_eq!(t.n_pos, 8);
        assert_eq!(t.beta, 0.5);
        for y in 0..4 {
            assert_eq!(t.mask[y * 4], 0);
            assert_eq!(t.mask[y * 4 + 1], 1);
            assert_eq!(t.mask[y * 4 + 2], 1);
            assert_eq!(t.mask[y * 4 + 3], 0);
        }
    }

    #[test]
    fn checkerboard_is_all_contour() {
        let data = vec![0u8, 1, 1, 0];
        let labels = LabelMap::new(2, 2, data).unwrap();
        let t = extract_contour_gt(&labels, IGNORE_LABEL);
        assert_eq!(t.n_pos, 4);
        assert_eq!(t.beta, 0.0);
    }

    #[test]
    fn ignore_neighbors_do_not_create_contours() {
        // 0 | ignore | 1: no pixel borders a *different non-ignored*
        // class, so nothing is contour.
        let labels = LabelMap::new(1, 3, vec![0, IGNORE_LABEL, 1]).unwrap();
        let t = extract_contour_gt(&labels, IGNORE_LABEL);
        assert_eq!(t.n_pos, 0);
    }

    #[test]
    fn contour_loss_hand_value() {
        // Uniform y = 0.5 with |Y+| = 1, |Y−| = 3: β = 0.75,
        // ℓ = (0.75·1 + 0.25·3)·ln 2 = 1.5·ln 2.
        let target = ContourTarget::from_mask(2, 2, vec![1, 0, 0, 0]);
        assert_eq!(target.beta, 0.75);
        let l = contour_loss(&[0.5; 4], &target).unwrap();
        assert!((l - 1.5 * std::f64::consts::LN_2).abs() < 1e-6, "{l}");
    }

    #[test]
    fn contour_loss_perfect_prediction_vanishes() {
        let target = ContourTarget::from_mask(2, 2, vec![1, 0, 0, 0]);
        let y = [1.0f32, 0.0, 0.0, 0.0];
        let l = contour_loss(&y, &target).unwrap();
        // Clamping keeps the logs finite; the loss is ~1e-7 per pixel.
        assert!(l < 1e-5, "{l}");
    }

    #[test]
    fn contour_loss_without_positives_ignores_y_plus_weight() {
        let target = ContourTarget::from_mask(1, 4, vec![0, 0, 0, 0]);
        assert_eq!(target.beta, 1.0);
        // Weight of negatives is 1−β = 0, so any prediction scores 0.
        let l = contour_loss(&[0.9, 0.2, 0.7, 0.4], &target).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn downsample_keeps_covered_positives() {
        // A full 2x2 positive block must survive 2x pooling.
        let mut mask = vec![0u8; 16];
        for y in 0..2 {
            for x in 0..2 {
                mask[y * 4 + x] = 1;
            }
        }
        let t = ContourTarget::from_mask(4, 4, mask);
        let d = t.downsample(2).unwrap();
        assert_eq!(d.mask[0], 1);
        assert!(d.n_pos <= t.n_pos);
        assert_eq!(d.height, 2);
    }

    #[test]
    fn seg_loss_uniform_logits_is_ln2() {
        let logits = Tensor::zeros(&[1, 2, 1, 1]);
        let (sum, mean, count) = seg_cross_entropy(&logits, &[0], IGNORE_LABEL).unwrap();
        assert_eq!(count, 1);
        assert!((sum - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(sum, mean);
    }

    #[test]
    fn seg_loss_confident_margin_vanishes() {
        let mut logits = Tensor::zeros(&[1, 2, 1, 1]);
        logits.data[0] = 50.0;
        let (sum, _, _) = seg_cross_entropy(&logits, &[0], IGNORE_LABEL).unwrap();
        assert!(sum < 1e-9, "{sum}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.0, &[1.0, 1.0, 1.0, 1.0], 2.5).unwrap();
        assert_eq!(b.total, 11.0);
        assert_eq!(b.contour_total, 4.0);
        let b0 = total_loss(0.7, &[5.0], 0.0).unwrap();
        assert_eq!(b0.total, 0.7);
    }

    #[test]
    fn beta_plus_positive_fraction_is_one() {
        let t = ContourTarget::from_mask(2, 3, vec![1, 0, 1, 0, 0, 0]);
        // In exact rational arithmetic on the counts.
        assert_eq!(t.n_pos + t.n_neg, 6);
        let beta_num = t.n_neg;
        let pos_num = t.n_pos;
        assert_eq!(beta_num + pos_num, t.height * t.width);
    }
}
