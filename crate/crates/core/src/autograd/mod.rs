//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Tape`] records operations as they execute (define-by-run). Nodes are
//! addressed by [`Var`] handles and held in topological order by
//! construction, so a single reverse sweep propagates gradients to every
//! leaf that requires them. Values are immutable once recorded; gradients
//! are written only during [`Tape::backward`].
//!
//! Scalar-producing operations additionally carry their value in f64 so
//! that finite-difference checks are not limited by the f32 width of the
//! stored tensors.

pub mod gradcheck;
mod kernels;

pub use kernels::{conv_out_extent, matmul, sigmoid as sigmoid_scalar, softplus as softplus_scalar};

use crate::error::{Error, Result};
use crate::tensor::{require_same_shape, Tensor};
use std::collections::HashMap;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Record {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        padding: usize,
        out: usize,
    },
    FullyConnected {
        x: usize,
        w: usize,
        b: usize,
        out: usize,
    },
    InstanceNorm {
        x: usize,
        out: usize,
        // (mean, inv_std) per (n, c) plane
        cache: Vec<(f64, f64)>,
    },
    Relu {
        x: usize,
        out: usize,
    },
    Sigmoid {
        x: usize,
        out: usize,
    },
    Softplus {
        x: usize,
        out: usize,
    },
    Clamp {
        x: usize,
        lo: f32,
        hi: f32,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    GateMul {
        feat: usize,
        gate: usize,
        out: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        out: usize,
    },
    BilinearUpsample {
        x: usize,
        out: usize,
    },
    MaxPool2d {
        x: usize,
        out: usize,
        argmax: Vec<u32>,
    },
    StyleStats {
        x: usize,
        out: usize,
        means: Vec<f64>,
    },
    Scale {
        x: usize,
        c: f32,
        out: usize,
    },
    SumAll {
        x: usize,
        out: usize,
    },
    MeanAll {
        x: usize,
        out: usize,
    },
    SegCrossEntropyMean {
        logits: usize,
        labels: Vec<i32>,
        ignore: i32,
        count: usize,
        out: usize,
    },
    ContourBceMean {
        y: usize,
        targets: Vec<u8>,
        betas: Vec<f32>,
        out: usize,
    },
}

/// Recording tape. Create one per forward/backward episode.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    f64vals: Vec<Option<f64>>,
    grads: Vec<Vec<f32>>,
    requires: Vec<bool>,
    records: Vec<Record>,
    bindings: Vec<(usize, Var)>,
    bound: HashMap<usize, Var>,
}

const CLAMP_EPS: f32 = 1.0e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires: bool, f64val: Option<f64>, record: Record) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.f64vals.push(f64val);
        self.grads.push(Vec::new());
        self.requires.push(requires);
        self.records.push(record);
        Var(id)
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, None, Record::Leaf)
    }

    /// Differentiable leaf; its gradient is available after `backward`.
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        self.push(value, true, None, Record::Leaf)
    }

    /// Differentiable leaf tied to an external parameter slot. Binding the
    /// same slot twice returns the original node so fan-out accumulates.
    pub fn bind_param(&mut self, slot: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&slot) {
            return v;
        }
        let v = self.leaf_grad(value.clone());
        self.bound.insert(slot, v);
        self.bindings.push((slot, v));
        v
    }

    /// `(slot, gradient)` pairs for every parameter bound on this tape.
    /// Call after `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.bindings.iter().map(|&(slot, v)| (slot, self.grads[v.0].as_slice()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Scalar value at f64 precision when the producing op tracked one.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        self.f64vals[v.0].unwrap_or(self.values[v.0].data[0] as f64)
    }

    pub fn grad(&self, v: Var) -> &[f32] {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    // ───────────────────────── forward operations ─────────────────────────

    /// 2-D cross-correlation, zero padding, exact output geometry.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.values[x.0].dims4("conv2d")?;
        let ws = &self.values[w.0].shape;
        if ws.len() != 4 || ws[1] != c {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} does not match input channels {}", ws, c),
            ));
        }
        let (k, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {}x{} must be odd", kh, kw)));
        }
        if self.values[b.0].shape != [k] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", self.values[b.0].shape, k),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let oh = conv_out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("height {} with k={} s={} p={}", h, kh, stride, padding)))?;
        let ow = conv_out_extent(wd, kw, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("width {} with k={} s={} p={}", wd, kw, stride, padding)))?;

        let ckk = c * kh * kw;
        let plane = oh * ow;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        let mut cols = vec![0.0f32; ckk * plane];
        let wmat = &self.values[w.0].data;
        for ni in 0..n {
            let xs = &self.values[x.0].data[ni * c * h * wd..(ni + 1) * c * h * wd];
            kernels::im2col(xs, c, h, wd, kh, kw, stride, padding, oh, ow, &mut cols);
            let dst = &mut out.data[ni * k * plane..(ni + 1) * k * plane];
            matmul(wmat, &cols, dst, k, ckk, plane, false);
        }
        let bias = &self.values[b.0].data;
        for ni in 0..n {
            for ki in 0..k {
                let base = (ni * k + ki) * plane;
                let bv = bias[ki];
                for v in &mut out.data[base..base + plane] {
                    *v += bv;
                }
            }
        }
        let req = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        Ok(self.push(
            out,
            req,
            None,
            Record::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                padding,
                out: self.values.len(),
            },
        ))
    }

    /// `x[N,D] · w[O,D]ᵀ + b[O]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.values[x.0].shape;
        let ws = &self.values[w.0].shape;
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "fully_connected",
                format!("input {:?} vs weight {:?}", xs, ws),
            ));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        if self.values[b.0].shape != [o] {
            return Err(Error::shape(
                "fully_connected",
                format!("bias {:?} vs {} outputs", self.values[b.0].shape, o),
            ));
        }
        let wt = kernels::transpose(&self.values[w.0].data, o, d);
        let mut out = Tensor::zeros(&[n, o]);
        matmul(&self.values[x.0].data, &wt, &mut out.data, n, d, o, false);
        for ni in 0..n {
            for oi in 0..o {
                out.data[ni * o + oi] += self.values[b.0].data[oi];
            }
        }
        let req = self.requires[x.0] || self.requires[w.0] || self.requires[b.0];
        Ok(self.push(
            out,
            req,
            None,
            Record::FullyConnected {
                x: x.0,
                w: w.0,
                b: b.0,
                out: self.values.len(),
            },
        ))
    }

    /// Per-(sample, channel) normalization to zero mean and unit variance
    /// over the spatial plane; no learnable affine.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4("instance_norm")?;
        let m = h * w;
        if m < 2 {
            return Err(Error::shape("instance_norm", format!("spatial plane {}x{} too small", h, w)));
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut cache = Vec::with_capacity(n * c);
        for plane_idx in 0..n * c {
            let src = &self.values[x.0].data[plane_idx * m..(plane_idx + 1) * m];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            cache.push((mean, inv_std));
            let dst = &mut out.data[plane_idx * m..(plane_idx + 1) * m];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = ((s as f64 - mean) * inv_std) as f32;
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(
            out,
            req,
            None,
            Record::InstanceNorm {
                x: x.0,
                out: self.values.len(),
                cache,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        let req = self.requires[x.0];
        self.push(out, req, None, Record::Relu { x: x.0, out: self.values.len() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(kernels::sigmoid);
        let req = self.requires[x.0];
        self.push(out, req, None, Record::Sigmoid { x: x.0, out: self.values.len() })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(kernels::softplus);
        let req = self.requires[x.0];
        self.push(out, req, None, Record::Softplus { x: x.0, out: self.values.len() })
    }

    /// Elementwise clamp; gradient passes only where the input is strictly
    /// inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.values[x.0].map(|v| v.clamp(lo, hi));
        let req = self.requires[x.0];
        self.push(out, req, None, Record::Clamp { x: x.0, lo, hi, out: self.values.len() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same_shape("elementwise_add", &self.values[a.0].shape, &self.values[b.0].shape)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(self.values[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor { shape: self.values[a.0].shape.clone(), data };
        let f64v = match (self.f64vals[a.0], self.f64vals[b.0]) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, req, f64v, Record::Add { a: a.0, b: b.0, out: self.values.len() }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same_shape("elementwise_mul", &self.values[a.0].shape, &self.values[b.0].shape)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(self.values[b.0].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor { shape: self.values[a.0].shape.clone(), data };
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, req, None, Record::Mul { a: a.0, b: b.0, out: self.values.len() }))
    }

    /// `feat[N,C,H,W] ⊙ gate[N,1,H,W]`, the gate broadcast over channels —
    /// the only multiplicative broadcast in the crate.
    pub fn gate_mul(&mut self, feat: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[feat.0].dims4("gate_mul")?;
        let gs = &self.values[gate.0].shape;
        if gs != &[n, 1, h, w] {
            return Err(Error::shape(
                "gate_mul",
                format!("gate {:?} must be [{},1,{},{}]", gs, n, h, w),
            ));
        }
        let m = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            let g = &self.values[gate.0].data[ni * m..(ni + 1) * m];
            for ci in 0..c {
                let base = (ni * c + ci) * m;
                let f = &self.values[feat.0].data[base..base + m];
                let dst = &mut out.data[base..base + m];
                for i in 0..m {
                    dst[i] = f[i] * g[i];
                }
            }
        }
        let req = self.requires[feat.0] || self.requires[gate.0];
        Ok(self.push(out, req, None, Record::GateMul { feat: feat.0, gate: gate.0, out: self.values.len() }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.values[a.0].dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.values[b.0].dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}: N,H,W must match", self.values[a.0].shape, self.values[b.0].shape),
            ));
        }
        let m = ha * wa;
        let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
        for ni in 0..na {
            let dst = &mut out.data[ni * (ca + cb) * m..(ni + 1) * (ca + cb) * m];
            dst[..ca * m].copy_from_slice(&self.values[a.0].data[ni * ca * m..(ni + 1) * ca * m]);
            dst[ca * m..].copy_from_slice(&self.values[b.0].data[ni * cb * m..(ni + 1) * cb * m]);
        }
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, req, None, Record::ConcatChannels { a: a.0, b: b.0, out: self.values.len() }))
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4("bilinear_upsample")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("bilinear_upsample: zero output size".into()));
        }
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        for plane_idx in 0..n * c {
            let src = &self.values[x.0].data[plane_idx * h * w..(plane_idx + 1) * h * w];
            let dst = &mut out.data[plane_idx * out_h * out_w..(plane_idx + 1) * out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, fy) = sample_axis(oy, sy, h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = sample_axis(ox, sx, w);
                    let v00 = src[y0 * w + x0] as f64;
                    let v01 = src[y0 * w + x1] as f64;
                    let v10 = src[y1 * w + x0] as f64;
                    let v11 = src[y1 * w + x1] as f64;
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    dst[oy * out_w + ox] = (top + (bot - top) * fy) as f32;
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(out, req, None, Record::BilinearUpsample { x: x.0, out: self.values.len() }))
    }

    /// Max pooling with floor geometry; ties resolve to the first maximum
    /// in scan order so the backward pass is deterministic.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4("maxpool2d")?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::shape("maxpool2d", format!("{}x{} input, k={} s={}", h, w, k, stride)));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for plane_idx in 0..n * c {
            let src = &self.values[x.0].data[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..k {
                        for dx in 0..k {
                            let at = (oy * stride + dy) * w + ox * stride + dx;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = plane_idx * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    argmax[o] = best_at as u32;
                }
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(out, req, None, Record::MaxPool2d { x: x.0, out: self.values.len(), argmax }))
    }

    /// Per-channel spatial mean and population variance, concatenated as
    /// `[mu ‖ var]` into an `[N, 2C]` tensor.
    pub fn style_stats(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.values[x.0].dims4("style_stats")?;
        let m = h * w;
        if m == 0 {
            return Err(Error::shape("style_stats", "empty spatial plane"));
        }
        let mut out = Tensor::zeros(&[n, 2 * c]);
        let mut means = Vec::with_capacity(n * c);
        for ni in 0..n {
            for ci in 0..c {
                let src = &self.values[x.0].data[(ni * c + ci) * m..(ni * c + ci + 1) * m];
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                means.push(mean);
                out.data[ni * 2 * c + ci] = mean as f32;
                out.data[ni * 2 * c + c + ci] = var as f32;
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(out, req, None, Record::StyleStats { x: x.0, out: self.values.len(), means }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.values[x.0].map(|v| v * c);
        let f64v = self.f64vals[x.0].map(|v| v * c as f64);
        let req = self.requires[x.0];
        self.push(out, req, f64v, Record::Scale { x: x.0, c, out: self.values.len() })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum_f64();
        let out = Tensor::from_vec(&[1], vec![s as f32]).unwrap();
        let req = self.requires[x.0];
        self.push(out, req, Some(s), Record::SumAll { x: x.0, out: self.values.len() })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.values[x.0].numel() as f64;
        let s = self.values[x.0].sum_f64() / m;
        let out = Tensor::from_vec(&[1], vec![s as f32]).unwrap();
        let req = self.requires[x.0];
        self.push(out, req, Some(s), Record::MeanAll { x: x.0, out: self.values.len() })
    }

    /// Softmax cross-entropy against integer labels, averaged over the
    /// non-ignored pixels. Returns the scalar node and the pixel count.
    pub fn seg_cross_entropy_mean(
        &mut self,
        logits: Var,
        labels: &[i32],
        ignore: i32,
    ) -> Result<(Var, usize)> {
        let (n, c, h, w) = self.values[logits.0].dims4("seg_loss")?;
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "seg_loss",
                format!("{} labels for {}x{}x{} pixels", labels.len(), n, h, w),
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
                if lab < 0 || lab as usize >= c {
                    return Err(Error::InvalidArgument(format!(
                        "seg_loss: label {} outside [0,{})",
                        lab, c
                    )));
                }
                let mut maxv = f64::NEG_INFINITY;
                for ci in 0..c {
                    maxv = maxv.max(self.values[logits.0].data[(ni * c + ci) * plane + pix] as f64);
                }
                let mut denom = 0.0f64;
                for ci in 0..c {
                    denom += (self.values[logits.0].data[(ni * c + ci) * plane + pix] as f64 - maxv).exp();
                }
                let z = self.values[logits.0].data[(ni * c + lab as usize) * plane + pix] as f64;
                sum += maxv + denom.ln() - z;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument("seg_loss: every pixel is ignored".into()));
        }
        let mean = sum / count as f64;
        let out = Tensor::from_vec(&[1], vec![mean as f32]).unwrap();
        let req = self.requires[logits.0];
        let v = self.push(
            out,
            req,
            Some(mean),
            Record::SegCrossEntropyMean {
                logits: logits.0,
                labels: labels.to_vec(),
                ignore,
                count,
                out: self.values.len(),
            },
        );
        Ok((v, count))
    }

    /// Class-balanced binary cross-entropy of a probability map against a
    /// binary contour target, normalized per pixel and averaged over the
    /// batch. `betas[i]` is the negative-pixel fraction of sample `i`.
    pub fn contour_bce_mean(&mut self, y: Var, targets: &[u8], betas: &[f32]) -> Result<Var> {
        let (n, c, h, w) = self.values[y.0].dims4("contour_loss")?;
        if c != 1 {
            return Err(Error::shape("contour_loss", format!("expected 1 channel, got {}", c)));
        }
        if targets.len() != n * h * w || betas.len() != n {
            return Err(Error::shape(
                "contour_loss",
                format!("{} targets / {} betas for {} maps of {}x{}", targets.len(), betas.len(), n, h, w),
            ));
        }
        let m = h * w;
        let mut total = 0.0f64;
        for ni in 0..n {
            let beta = betas[ni] as f64;
            let mut l = 0.0f64;
            for pix in 0..m {
                let p = (self.values[y.0].data[ni * m + pix].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)) as f64;
                if targets[ni * m + pix] != 0 {
                    l -= beta * p.ln();
                } else {
                    l -= (1.0 - beta) * (1.0 - p).ln();
                }
            }
            total += l / m as f64;
        }
        let mean = total / n as f64;
        let out = Tensor::from_vec(&[1], vec![mean as f32]).unwrap();
        let req = self.requires[y.0];
        Ok(self.push(
            out,
            req,
            Some(mean),
            Record::ContourBceMean {
                y: y.0,
                targets: targets.to_vec(),
                betas: betas.to_vec(),
                out: self.values.len(),
            },
        ))
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from `out`, seeded with ones (scalar outputs) unless a
    /// custom seed of the output's shape is supplied. Existing gradients on
    /// the tape are cleared first; leaves that never contribute stay zero.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.values[out.0].numel() != 1 {
            return Err(Error::InvalidArgument(
                "backward: output must be scalar; use backward_seeded".into(),
            ));
        }
        self.backward_seeded(out, &[1.0])
    }

    pub fn backward_seeded(&mut self, out: Var, seed: &[f32]) -> Result<()> {
        if seed.len() != self.values[out.0].numel() {
            return Err(Error::shape(
                "backward_seeded",
                format!("seed length {} vs output {}", seed.len(), self.values[out.0].numel()),
            ));
        }
        for (g, v) in self.grads.iter_mut().zip(self.values.iter()) {
            g.clear();
            g.resize(v.numel(), 0.0);
        }
        self.grads[out.0].copy_from_slice(seed);

        for ri in (0..self.records.len()).rev() {
            self.step_backward(ri);
        }
        Ok(())
    }

    fn take_grad(&mut self, id: usize) -> Vec<f32> {
        std::mem::take(&mut self.grads[id])
    }

    fn step_backward(&mut self, ri: usize) {
        // The record is moved out for the duration of the step so the
        // borrow checker lets each arm read values and write gradients
        // freely; it is restored afterwards (backward may run twice on one
        // tape, e.g. a loss sweep followed by a seeded sweep).
        let record = std::mem::replace(&mut self.records[ri], Record::Leaf);
        self.apply_backward(&record);
        self.records[ri] = record;
    }

    fn apply_backward(&mut self, record: &Record) {
        // Each arm takes the output gradient, scatters into input
        // gradients, then restores the output gradient buffer.
        match record {
            Record::Leaf => {}
            &Record::Conv2d { x, w, b, stride, padding, out } => {
                if !self.requires[out] {
                    return;
                }
                let g = self.take_grad(out);
                let (n, c, h, wd) = (
                    self.values[x].shape[0],
                    self.values[x].shape[1],
                    self.values[x].shape[2],
                    self.values[x].shape[3],
                );
                let (k, kh, kw) = (
                    self.values[w].shape[0],
                    self.values[w].shape[2],
                    self.values[w].shape[3],
                );
                let oh = conv_out_extent(h, kh, stride, padding).unwrap();
                let ow = conv_out_extent(wd, kw, stride, padding).unwrap();
                let ckk = c * kh * kw;
                let plane = oh * ow;
                if self.requires[b] {
                    for ki in 0..k {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            let base = (ni * k + ki) * plane;
                            acc += g[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                        }
                        self.grads[b][ki] += acc as f32;
                    }
                }
                let need_w = self.requires[w];
                let need_x = self.requires[x];
                if need_w || need_x {
                    let mut cols = vec![0.0f32; ckk * plane];
                    let wt = if need_x {
                        kernels::transpose(&self.values[w].data, k, ckk)
                    } else {
                        Vec::new()
                    };
                    let mut dcols = vec![0.0f32; ckk * plane];
                    for ni in 0..n {
                        let xs = &self.values[x].data[ni * c * h * wd..(ni + 1) * c * h * wd];
                        kernels::im2col(xs, c, h, wd, kh, kw, stride, padding, oh, ow, &mut cols);
                        let gn = &g[ni * k * plane..(ni + 1) * k * plane];
                        if need_w {
                            let colst = kernels::transpose(&cols, ckk, plane);
                            matmul(gn, &colst, &mut self.grads[w], k, plane, ckk, true);
                        }
                        if need_x {
                            matmul(&wt, gn, &mut dcols, ckk, k, plane, false);
                            let dx = &mut self.grads[x][ni * c * h * wd..(ni + 1) * c * h * wd];
                            kernels::col2im_add(&dcols, c, h, wd, kh, kw, stride, padding, oh, ow, dx);
                        }
                    }
                }
                self.grads[out] = g;
            }
            &Record::FullyConnected { x, w, b, out } => {
                if !self.requires[out] {
                    return;
                }
                let g = self.take_grad(out);
                let (n, d) = (self.values[x].shape[0], self.values[x].shape[1]);
                let o = self.values[w].shape[0];
                if self.requires[b] {
                    for oi in 0..o {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            acc += g[ni * o + oi] as f64;
                        }
                        self.grads[b][oi] += acc as f32;
                    }
                }
                if self.requires[w] {
                    let gt = kernels::transpose(&g, n, o);
                    matmul(&gt, &self.values[x].data, &mut self.grads[w], o, n, d, true);
                }
                if self.requires[x] {
                    matmul(&g, &self.values[w].data, &mut self.grads[x], n, o, d, true);
                }
                self.grads[out] = g;
            }
            Record::InstanceNorm { x, out, cache } => {
                let (x, out) = (*x, *out);
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                let m = self.values[x].shape[2] * self.values[x].shape[3];
                let planes = self.values[x].numel() / m;
                for p in 0..planes {
                    let (mean, inv_std) = cache[p];
                    let src = &self.values[x].data[p * m..(p + 1) * m];
                    let gp = &g[p * m..(p + 1) * m];
                    let mut gsum = 0.0f64;
                    let mut gdot = 0.0f64;
                    for i in 0..m {
                        let xh = (src[i] as f64 - mean) * inv_std;
                        gsum += gp[i] as f64;
                        gdot += gp[i] as f64 * xh;
                    }
                    let gmean = gsum / m as f64;
                    let gdotm = gdot / m as f64;
                    let dst = &mut self.grads[x][p * m..(p + 1) * m];
                    for i in 0..m {
                        let xh = (src[i] as f64 - mean) * inv_std;
                        dst[i] += (inv_std * (gp[i] as f64 - gmean - xh * gdotm)) as f32;
                    }
                }
                self.grads[out] = g;
            }
            &Record::Relu { x, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                for i in 0..g.len() {
                    if self.values[x].data[i] > 0.0 {
                        self.grads[x][i] += g[i];
                    }
                }
                self.grads[out] = g;
            }
            &Record::Sigmoid { x, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                for i in 0..g.len() {
                    let y = self.values[out].data[i];
                    self.grads[x][i] += g[i] * y * (1.0 - y);
                }
                self.grads[out] = g;
            }
            &Record::Softplus { x, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                for i in 0..g.len() {
                    self.grads[x][i] += g[i] * kernels::sigmoid(self.values[x].data[i]);
                }
                self.grads[out] = g;
            }
            &Record::Clamp { x, lo, hi, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                for i in 0..g.len() {
                    let v = self.values[x].data[i];
                    if v > lo && v < hi {
                        self.grads[x][i] += g[i];
                    }
                }
                self.grads[out] = g;
            }
            &Record::Add { a, b, out } => {
                if !self.requires[out] {
                    return;
                }
                let g = self.take_grad(out);
                if self.requires[a] {
                    for i in 0..g.len() {
                        self.grads[a][i] += g[i];
                    }
                }
                if self.requires[b] {
                    for i in 0..g.len() {
                        self.grads[b][i] += g[i];
                    }
                }
                self.grads[out] = g;
            }
            &Record::Mul { a, b, out } => {
                if !self.requires[out] {
                    return;
                }
                let g = self.take_grad(out);
                if self.requires[a] {
                    for i in 0..g.len() {
                        self.grads[a][i] += g[i] * self.values[b].data[i];
                    }
                }
                if self.requires[b] {
                    for i in 0..g.len() {
                        self.grads[b][i] += g[i] * self.values[a].data[i];
                    }
                }
                self.grads[out] = g;
            }
            &Record::GateMul { feat, gate, out } => {
                if !self.requires[out] {
                    return;
                }
                let g = self.take_grad(out);
                let (n, c, h, w) = (
                    self.values[feat].shape[0],
                    self.values[feat].shape[1],
                    self.values[feat].shape[2],
                    self.values[feat].shape[3],
                );
                let m = h * w;
                if self.requires[feat] {
                    for ni in 0..n {
                        let gv = &self.values[gate].data[ni * m..(ni + 1) * m];
                        for ci in 0..c {
                            let base = (ni * c + ci) * m;
                            for i in 0..m {
                                self.grads[feat][base + i] += g[base + i] * gv[i];
                            }
                        }
                    }
                }
                if self.requires[gate] {
                    for ni in 0..n {
                        for i in 0..m {
                            let mut acc = 0.0f64;
                            for ci in 0..c {
                                let base = (ni * c + ci) * m;
                                acc += (g[base + i] * self.values[feat].data[base + i]) as f64;
                            }
                            self.grads[gate][ni * m + i] += acc as f32;
                        }
                    }
                }
                self.grads[out] = g;
            }
            &Record::ConcatChannels { a, b, out } => {
                if !self.requires[out] {
                    return;
                }
                let g = self.take_grad(out);
                let (n, ca) = (self.values[a].shape[0], self.values[a].shape[1]);
                let cb = self.values[b].shape[1];
                let m = self.values[a].shape[2] * self.values[a].shape[3];
                for ni in 0..n {
                    let src = &g[ni * (ca + cb) * m..(ni + 1) * (ca + cb) * m];
                    if self.requires[a] {
                        let dst = &mut self.grads[a][ni * ca * m..(ni + 1) * ca * m];
                        for i in 0..ca * m {
                            dst[i] += src[i];
                        }
                    }
                    if self.requires[b] {
                        let dst = &mut self.grads[b][ni * cb * m..(ni + 1) * cb * m];
                        for i in 0..cb * m {
                            dst[i] += src[ca * m + i];
                        }
                    }
                }
                self.grads[out] = g;
            }
            &Record::BilinearUpsample { x, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                let (h, w) = (self.values[x].shape[2], self.values[x].shape[3]);
                let (oh, ow) = (self.values[out].shape[2], self.values[out].shape[3]);
                let planes = self.values[x].numel() / (h * w);
                let sy = h as f64 / oh as f64;
                let sx = w as f64 / ow as f64;
                for p in 0..planes {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut self.grads[x][p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, fy) = sample_axis(oy, sy, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = sample_axis(ox, sx, w);
                            let gv = gp[oy * ow + ox] as f64;
                            dst[y0 * w + x0] += (gv * (1.0 - fy) * (1.0 - fx)) as f32;
                            dst[y0 * w + x1] += (gv * (1.0 - fy) * fx) as f32;
                            dst[y1 * w + x0] += (gv * fy * (1.0 - fx)) as f32;
                            dst[y1 * w + x1] += (gv * fy * fx) as f32;
                        }
                    }
                }
                self.grads[out] = g;
            }
            Record::MaxPool2d { x, out, argmax } => {
                let (x, out) = (*x, *out);
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                let m = self.values[x].shape[2] * self.values[x].shape[3];
                let om = self.values[out].shape[2] * self.values[out].shape[3];
                let planes = self.values[x].numel() / m;
                for p in 0..planes {
                    for i in 0..om {
                        let src = argmax[p * om + i] as usize;
                        self.grads[x][p * m + src] += g[p * om + i];
                    }
                }
                self.grads[out] = g;
            }
            Record::StyleStats { x, out, means } => {
                let (x, out) = (*x, *out);
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                let (n, c, h, w) = (
                    self.values[x].shape[0],
                    self.values[x].shape[1],
                    self.values[x].shape[2],
                    self.values[x].shape[3],
                );
                let m = h * w;
                for ni in 0..n {
                    for ci in 0..c {
                        let gmu = g[ni * 2 * c + ci] as f64;
                        let gvar = g[ni * 2 * c + c + ci] as f64;
                        let mean = means[ni * c + ci];
                        let base = (ni * c + ci) * m;
                        for i in 0..m {
                            let xv = self.values[x].data[base + i] as f64;
                            self.grads[x][base + i] +=
                                ((gmu + gvar * 2.0 * (xv - mean)) / m as f64) as f32;
                        }
                    }
                }
                self.grads[out] = g;
            }
            &Record::Scale { x, c, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.take_grad(out);
                for i in 0..g.len() {
                    self.grads[x][i] += g[i] * c;
                }
                self.grads[out] = g;
            }
            &Record::SumAll { x, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.grads[out][0];
                for v in self.grads[x].iter_mut() {
                    *v += g;
                }
            }
            &Record::MeanAll { x, out } => {
                if !self.requires[out] || !self.requires[x] {
                    return;
                }
                let g = self.grads[out][0] / self.values[x].numel() as f32;
                for v in self.grads[x].iter_mut() {
                    *v += g;
                }
            }
            Record::SegCrossEntropyMean { logits, labels, ignore, count, out } => {
                let (logits, ignore, count, out) = (*logits, *ignore, *count, *out);
                if !self.requires[out] || !self.requires[logits] {
                    return;
                }
                let g = self.grads[out][0] as f64;
                let (n, c, h, w) = (
                    self.values[logits].shape[0],
                    self.values[logits].shape[1],
                    self.values[logits].shape[2],
                    self.values[logits].shape[3],
                );
                let plane = h * w;
                let scale = g / count as f64;
                let mut probs = vec![0.0f64; c];
                for ni in 0..n {
                    for pix in 0..plane {
                        let lab = labels[ni * plane + pix];
                        if lab == ignore {
                            continue;
                        }
                        let mut maxv = f64::NEG_INFINITY;
                        for ci in 0..c {
                            maxv = maxv.max(self.values[logits].data[(ni * c + ci) * plane + pix] as f64);
                        }
                        let mut denom = 0.0f64;
                        for ci in 0..c {
                            let e = (self.values[logits].data[(ni * c + ci) * plane + pix] as f64 - maxv).exp();
                            probs[ci] = e;
                            denom += e;
                        }
                        for ci in 0..c {
                            let p = probs[ci] / denom;
                            let delta = if ci as i32 == lab { 1.0 } else { 0.0 };
                            self.grads[logits][(ni * c + ci) * plane + pix] += ((p - delta) * scale) as f32;
                        }
                    }
                }
            }
            Record::ContourBceMean { y, targets, betas, out } => {
                let (y, out) = (*y, *out);
                if !self.requires[out] || !self.requires[y] {
                    return;
                }
                let g = self.grads[out][0] as f64;
                let n = self.values[y].shape[0];
                let m = self.values[y].shape[2] * self.values[y].shape[3];
                let scale = g / (n as f64 * m as f64);
                for ni in 0..n {
                    let beta = betas[ni] as f64;
                    for pix in 0..m {
                        let p = (self.values[y].data[ni * m + pix].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)) as f64;
                        let d = if targets[ni * m + pix] != 0 {
                            -beta / p
                        } else {
                            (1.0 - beta) / (1.0 - p)
                        };
                        self.grads[y][ni * m + pix] += (d * scale) as f32;
                    }
                }
            }
        }
    }
}

/// Source interval endpoints and interpolation weight for half-pixel
/// bilinear sampling along one axis.
#[inline]
fn sample_axis(dst: usize, scale: f64, extent: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let pos = pos.clamp(0.0, (extent - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, pos - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_ones_center_is_nine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape, vec![1, 1, 3, 3]);
        assert_eq!(tape.value(y).data[4], 9.0); // center: all nine taps inside
        assert_eq!(tape.value(y).data[0], 4.0); // corner: 2x2 window inside
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..16).map(|v| v as f32 * 0.25 - 2.0).collect();
        let x = tape.leaf(t(&[1, 1, 4, 4], &data));
        let mut wk = vec![0.0f32; 9];
        wk[4] = 1.0;
        let w = tape.leaf(t(&[1, 1, 3, 3], &wk));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data, data);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "diagnostic should name the dimension: {msg}");
    }

    #[test]
    fn instance_norm_hand_case() {
        // Channel [1,2,3,4]: mean 2.5, population variance 1.25.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.instance_norm(x, 1e-12).unwrap();
        let expect = [-1.3416408, -0.4472136, 0.4472136, 1.3416408];
        for (a, e) in tape.value(y).data.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 3.25));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_zero_mean_property() {
        let mut rng = crate::rng::Xoshiro256PlusPlus::new(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng));
        let y = tape.instance_norm(x, 1e-5).unwrap();
        let v = tape.value(y);
        for p in 0..6 {
            let m: f64 = v.data[p * 16..(p + 1) * 16].iter().map(|&x| x as f64).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-5, "plane {p} mean {m}");
        }
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data[0], 0.5);
    }

    #[test]
    fn concat_channel_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3, 4, 4]));
        let b = tape.leaf(Tensor::zeros(&[2, 5, 4, 4]));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape, vec![2, 8, 4, 4]);
        let c = tape.leaf(Tensor::zeros(&[2, 5, 2, 4]));
        assert!(tape.concat_channels(a, c).is_err());
    }

    #[test]
    fn backward_accumulates_fanout() {
        // f = sum(x * x): df/dx = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_keeps_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf_grad(t(&[2], &[5.0, 5.0]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused), &[0.0, 0.0]);
        assert_eq!(tape.grad(x), &[1.0, 1.0]);
    }

    #[test]
    fn bilinear_upsample_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 2, 3, 3], 0.7));
        let y = tape.bilinear_upsample(x, 6, 6).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(t(&[1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data, vec![5.0]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn style_stats_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.style_stats(x).unwrap();
        assert_eq!(tape.value(s).shape, vec![1, 2]);
        assert!((tape.value(s).data[0] - 2.5).abs() < 1e-6);
        assert!((tape.value(s).data[1] - 1.25).abs() < 1e-6);
    }

    #[test]
    fn style_stats_permutation_invariant() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 1, 2, 2], &[4.0, 1.0, 3.0, 2.0]));
        let b = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let sa = tape.style_stats(a).unwrap();
        let sb = tape.style_stats(b).unwrap();
        assert_eq!(tape.value(sa).data, tape.value(sb).data);
    }

    #[test]
    fn seg_ce_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        let (l, count) = tape.seg_cross_entropy_mean(logits, &[0], 255).unwrap();
        assert_eq!(count, 1);
        assert!((tape.scalar_f64(l) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn seg_ce_all_ignored_is_error() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(tape.seg_cross_entropy_mean(logits, &[255], 255).is_err());
    }
}
