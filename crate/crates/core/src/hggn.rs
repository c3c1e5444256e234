//! Hierarchical guidance generalization network.
//!
//! Two encoders walk the content image `I_c` (two convolutions per stage)
//! and the texture residual `I_t` (one convolution per stage) through four
//! 2×-downsampling stages. After every stage a structure-guided
//! enhancement (SGE) module fuses the streams: concatenation, instance
//! normalization, a three-convolution contour detector whose sigmoid map
//! gates the texture feature, and two 1×1 convolutions merged additively.
//! The SGE output feeds the next content stage; the classifier maps the
//! last feature to per-class logits at input resolution.
//!
//! Downsampling everywhere is stride-1 convolution + 2×2 max-pool, which
//! keeps every convolution on the exact output geometry the `conv2d`
//! contract requires while halving resolution per stage.

use crate::asp::{AspModel, LambdaPrediction, PredictMode};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::filter::{self, FilterResult, GuidedImage, SolveOptions};
use crate::nn::{ParamId, ParamSet};
use crate::rng::Xoshiro256PlusPlus;
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
/// Instance-norm epsilon.
pub const IN_EPS: f32 = 1.0e-5;

/// Widths and head configuration of the backbone.
#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub stage_channels: [usize; STAGES],
    pub texture_channels: [usize; STAGES],
    pub num_classes: usize,
    /// Leading SGE modules that are active (1..=4); later stages pass the
    /// content feature through unchanged.
    pub sge_levels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            texture_channels: [4, 8, 16, 32],
            num_classes: 4,
            sge_levels: STAGES,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sge_levels == 0 || self.sge_levels > STAGES {
            return Err(Error::InvalidArgument(format!(
                "sge_levels must be in 1..={STAGES}, got {}",
                self.sge_levels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.stage_channels.iter().chain(self.texture_channels.iter()).any(|&c| c == 0) {
            return Err(Error::InvalidArgument("zero-width stage".into()));
        }
        Ok(())
    }
}

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(
        params: &mut ParamSet,
        name: &str,
        k: usize,
        c: usize,
        ksize: usize,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<Self> {
        let (w, b) = params.add_conv(name, k, c, ksize, ksize, rng)?;
        Ok(Self { w, b, stride: 1, padding: ksize / 2 })
    }

    fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let wv = params.watch(tape, self.w);
        let bv = params.watch(tape, self.b);
        tape.conv2d(x, wv, bv, self.stride, self.padding)
    }
}

struct SgeModule {
    cd: [Conv; 3],
    fuse: Conv,
    enhance: Conv,
}

/// The intermediate maps of one SGE evaluation.
pub struct SgeState {
    /// Normalized fusion of the two streams.
    pub normalized: Var,
    /// Contour probability map, `[N, 1, h, w]`, strictly inside (0, 1).
    pub contour: Var,
    /// Module output at the stage width.
    pub output: Var,
}

impl SgeModule {
    fn new(
        params: &mut ParamSet,
        name: &str,
        content_ch: usize,
        texture_ch: usize,
        out_ch: usize,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<Self> {
        let fused = content_ch + texture_ch;
        let cd = [
            Conv::new(params, &format!("{name}.cd1"), 16, fused, 3, rng)?,
            Conv::new(params, &format!("{name}.cd2"), 8, 16, 3, rng)?,
            Conv::new(params, &format!("{name}.cd3"), 1, 8, 3, rng)?,
        ];
        let fuse = Conv::new(params, &format!("{name}.fuse"), out_ch, fused, 1, rng)?;
        let enhance = Conv::new(params, &format!("{name}.enhance"), out_ch, texture_ch, 1, rng)?;
        Ok(Self { cd, fuse, enhance })
    }

    fn forward(&self, tape: &mut Tape, params: &ParamSet, f_c: Var, f_t: Var) -> Result<SgeState> {
        let fused = tape.concat_channels(f_c, f_t)?;
        let z = tape.instance_norm(fused, IN_EPS)?;
        let mut y = self.cd[0].apply(tape, params, z)?;
        y = tape.relu(y);
        y = self.cd[1].apply(tape, params, y)?;
        y = tape.relu(y);
        y = self.cd[2].apply(tape, params, y)?;
        let contour = tape.sigmoid(y);
        let enhanced = tape.gate_mul(f_t, contour)?;
        let zp = self.fuse.apply(tape, params, z)?;
        let ep = self.enhance.apply(tape, params, enhanced)?;
        let output = tape.add(zp, ep)?;
        Ok(SgeState { normalized: z, contour, output })
    }
}

/// The full segmentation network over the `(I_c, I_t)` pair.
pub struct HggnModel {
    pub cfg: BackboneConfig,
    content: Vec<(Conv, Conv)>,
    texture: Vec<Conv>,
    sges: Vec<SgeModule>,
    head1: Conv,
    head2: Conv,
}

/// Logits and per-SGE contour maps of one forward pass.
pub struct HggnOutput {
    /// `[N, C, H, W]` at input resolution.
    pub logits: Var,
    /// One `[N, 1, h_i, w_i]` map per active SGE, finest first.
    pub contours: Vec<Var>,
}

impl HggnModel {
    pub fn new(cfg: BackboneConfig, params: &mut ParamSet, rng: &mut Xoshiro256PlusPlus) -> Result<Self> {
        cfg.validate()?;
        let mut content = Vec::with_capacity(STAGES);
        let mut texture = Vec::with_capacity(STAGES);
        let mut sges = Vec::with_capacity(cfg.sge_levels);
        let mut c_in = 3usize;
        let mut t_in = 3usize;
        for i in 0..STAGES {
            let c_out = cfg.stage_channels[i];
            let t_out = cfg.texture_channels[i];
            content.push((
                Conv::new(params, &format!("hggn.content{}.a", i + 1), c_out, c_in, 3, rng)?,
                Conv::new(params, &format!("hggn.content{}.b", i + 1), c_out, c_out, 3, rng)?,
            ));
            texture.push(Conv::new(params, &format!("hggn.texture{}", i + 1), t_out, t_in, 3, rng)?);
            if i < cfg.sge_levels {
                sges.push(SgeModule::new(
                    params,
                    &format!("hggn.sge{}", i + 1),
                    c_out,
                    t_out,
                    c_out,
                    rng,
                )?);
            }
            c_in = c_out;
            t_in = t_out;
        }
        let head1 = Conv::new(params, "hggn.classifier.a", cfg.stage_channels[3] / 2, cfg.stage_channels[3], 3, rng)?;
        let head2 = Conv::new(params, "hggn.classifier.b", cfg.num_classes, cfg.stage_channels[3] / 2, 1, rng)?;
        Ok(Self { cfg, content, texture, sges, head1, head2 })
    }

    /// One content stage: 2× max-pool, conv-relu, conv-relu.
    fn content_stage(&self, tape: &mut Tape, params: &ParamSet, i: usize, x: Var) -> Result<Var> {
        let pooled = tape.maxpool2d(x, 2, 2)?;
        let a = self.content[i].0.apply(tape, params, pooled)?;
        let a = tape.relu(a);
        let b = self.content[i].1.apply(tape, params, a)?;
        Ok(tape.relu(b))
    }

    fn texture_stage(&self, tape: &mut Tape, params: &ParamSet, i: usize, x: Var) -> Result<Var> {
        let pooled = tape.maxpool2d(x, 2, 2)?;
        let t = self.texture[i].apply(tape, params, pooled)?;
        Ok(tape.relu(t))
    }

    /// Content-stream features `[f_c1..f_c4]` without SGE mixing; used by
    /// tests and ablations.
    pub fn content_stream(&self, tape: &mut Tape, params: &ParamSet, i_c: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(STAGES);
        let mut x = i_c;
        for i in 0..STAGES {
            x = self.content_stage(tape, params, i, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Texture-stream features `[f_t1..f_t4]`.
    pub fn texture_stream(&self, tape: &mut Tape, params: &ParamSet, i_t: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(STAGES);
        let mut x = i_t;
        for i in 0..STAGES {
            x = self.texture_stage(tape, params, i, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Classifier head: 3×3 conv, relu, 1×1 conv to `C` classes, bilinear
    /// upsample to the requested size.
    pub fn classifier(&self, tape: &mut Tape, params: &ParamSet, f4: Var, target: (usize, usize)) -> Result<Var> {
        let h = self.head1.apply(tape, params, f4)?;
        let h = tape.relu(h);
        let logits = self.head2.apply(tape, params, h)?;
        tape.bilinear_upsample(logits, target.0, target.1)
    }

    /// Forward over already-decomposed inputs. `i_c`, `i_t` are
    /// `[N, 3, H, W]` nodes with H, W divisible by 16.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, i_c: Var, i_t: Var) -> Result<HggnOutput> {
        let (_, _, h, w) = tape.value(i_c).dims4("hggn_forward")?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape("hggn_forward", format!("{h}x{w} not divisible by 16")));
        }
        let mut contours = Vec::new();
        let mut content_in = i_c;
        let mut texture_feat = i_t;
        let mut last = i_c;
        for i in 0..STAGES {
            let f_c = self.content_stage(tape, params, i, content_in)?;
            texture_feat = self.texture_stage(tape, params, i, texture_feat)?;
            let out = if i < self.cfg.sge_levels {
                let state = self.sges[i].forward(tape, params, f_c, texture_feat)?;
                contours.push(state.contour);
                state.output
            } else {
                f_c
            };
            content_in = out;
            last = out;
        }
        let logits = self.classifier(tape, params, last, (h, w))?;
        Ok(HggnOutput { logits, contours })
    }
}

/// How the filtering strength is chosen in the full pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// ASP predicts λ per image.
    Adaptive,
    /// Constant strength for every image.
    Fixed(f32),
    /// Ablation: no filtering at all, `I_c = I`, `I_t = 0`.
    NoAfm,
}

/// Everything one full-pipeline forward produces.
pub struct FullForward {
    pub output: HggnOutput,
    /// Differentiable leaves holding the decomposition; their gradients
    /// chain the task loss back through the solver.
    pub ic_leaf: Var,
    pub it_leaf: Var,
    /// λ actually used per sample.
    pub lambdas: Vec<f32>,
    /// ASP prediction when mode is adaptive.
    pub prediction: Option<LambdaPrediction>,
    /// `dS/dλ` per sample (train + adaptive only), each `[3, H, W]`.
    pub ds_dlambda: Vec<Option<Tensor>>,
    /// False when any per-channel CG solve hit its iteration cap.
    pub solver_converged: bool,
}

/// Full pipeline: predict λ (or use the fixed/no-AFM mode), decompose each
/// image with the exact filter, then run the network on `(I_c, I_t)`.
/// `boundaries` supplies per-sample guidance maps (training only);
/// inference passes `None` and filters unguided.
#[allow(clippy::too_many_arguments)]
pub fn forward_full(
    tape: &mut Tape,
    params: &ParamSet,
    asp: Option<&AspModel>,
    hggn: &HggnModel,
    images: &Tensor,
    boundaries: Option<&[Tensor]>,
    mode: LambdaMode,
    predict_mode: PredictMode,
    solver: &SolveOptions,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<FullForward> {
    let (n, c, h, w) = images.dims4("forward_full")?;
    if c != 3 {
        return Err(Error::shape("forward_full", format!("expected 3 channels, got {c}")));
    }
    let plane = 3 * h * w;

    let prediction = match mode {
        LambdaMode::Adaptive => {
            let asp = asp.ok_or_else(|| {
                Error::InvalidArgument("adaptive lambda mode requires a strength predictor".into())
            })?;
            let img_leaf = tape.leaf(images.clone());
            Some(asp.predict_lambda(tape, params, img_leaf, predict_mode, rng)?)
        }
        _ => None,
    };
    let lambdas: Vec<f32> = match (&prediction, mode) {
        (Some(p), _) => p.lambda.clone(),
        (None, LambdaMode::Fixed(l)) => vec![l.clamp(filter::LAMBDA_RANGE.0, filter::LAMBDA_RANGE.1); n],
        (None, LambdaMode::NoAfm) => vec![0.0; n],
        (None, LambdaMode::Adaptive) => unreachable!(),
    };

    let mut ic = Tensor::zeros(&[n, 3, h, w]);
    let mut it = Tensor::zeros(&[n, 3, h, w]);
    let mut ds_dlambda: Vec<Option<Tensor>> = vec![None; n];
    let mut solver_converged = true;

    if mode == LambdaMode::NoAfm {
        ic.data.copy_from_slice(&images.data);
    } else {
        let want_ds = prediction.is_some() && predict_mode == PredictMode::Train;
        for s in 0..n {
            let single = Tensor::from_vec(&[3, h, w], images.data[s * plane..(s + 1) * plane].to_vec())?;
            let guided = match boundaries {
                Some(bs) => GuidedImage::new(single, bs[s].clone(), filter::DEFAULT_EPS)?,
                None => GuidedImage::unguided(single)?,
            };
            let system = filter::compute_weights(&guided);
            let (res, ds): (FilterResult, _) =
                filter::decompose_with_derivative(&system, &guided, lambdas[s], solver, want_ds)?;
            solver_converged &= res.converged;
            ic.data[s * plane..(s + 1) * plane].copy_from_slice(&res.content.data);
            it.data[s * plane..(s + 1) * plane].copy_from_slice(&res.texture.data);
            ds_dlambda[s] = ds;
        }
    }

    let ic_leaf = tape.leaf_grad(ic);
    let it_leaf = tape.leaf_grad(it);
    let output = hggn.forward(tape, params, ic_leaf, it_leaf)?;
    Ok(FullForward {
        output,
        ic_leaf,
        it_leaf,
        lambdas,
        prediction,
        ds_dlambda,
        solver_converged,
    })
}

/// Chain rule across the solver: with `I_t = I − S`,
/// `dL/dλ = Σ_pixels (dL/dI_c − dL/dI_t) ⊙ dS/dλ` per sample.
pub fn lambda_gradients(tape: &Tape, full: &FullForward) -> Vec<f32> {
    let n = full.lambdas.len();
    let g_ic = tape.grad(full.ic_leaf);
    let g_it = tape.grad(full.it_leaf);
    let plane = g_ic.len() / n;
    let mut out = vec![0.0f32; n];
    for s in 0..n {
        if let Some(ds) = &full.ds_dlambda[s] {
            let mut acc = 0.0f64;
            for i in 0..plane {
                let gi = g_ic[s * plane + i] as f64 - g_it[s * plane + i] as f64;
                acc += gi * ds.data[i] as f64;
            }
            out[s] = acc as f32;
        }
    }
    out
}

/// Argmax over the class axis of `[N, C, H, W]` logits.
pub fn logits_to_labels(logits: &Tensor) -> Result<Vec<crate::losses::LabelMap>> {
    let (n, c, h, w) = logits.dims4("logits_to_labels")?;
    let plane = h * w;
    let mut maps = Vec::with_capacity(n);
    for ni in 0..n {
        let mut data = vec![0u8; plane];
        for pix in 0..plane {
            let mut best = f32::NEG_INFINITY;
            let mut arg = 0u8;
            for ci in 0..c {
                let v = logits.data[(ni * c + ci) * plane + pix];
                if v > best {
                    best = v;
                    arg = ci as u8;
                }
            }
            data[pix] = arg;
        }
        maps.push(crate::losses::LabelMap::new(h, w, data)?);
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(cfg: BackboneConfig, seed: u64) -> (ParamSet, HggnModel, Xoshiro256PlusPlus) {
        let mut rng = Xoshiro256PlusPlus::new(seed);
        let mut params = ParamSet::new();
        let model = HggnModel::new(cfg, &mut params, &mut rng).unwrap();
        (params, model, rng)
    }

    #[test]
    fn stream_shapes_match_config() {
        let (params, model, mut rng) = build(BackboneConfig::default(), 5);
        let mut tape = Tape::new();
        let ic = tape.leaf(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng));
        let feats = model.content_stream(&mut tape, &params, ic).unwrap();
        let sizes: Vec<Vec<usize>> = feats.iter().map(|&f| tape.value(f).shape.clone()).collect();
        assert_eq!(sizes[0], vec![1, 16, 32, 32]);
        assert_eq!(sizes[1], vec![1, 32, 16, 16]);
        assert_eq!(sizes[2], vec![1, 64, 8, 8]);
        assert_eq!(sizes[3], vec![1, 128, 4, 4]);

        let it = tape.leaf(Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng));
        let tfeats = model.texture_stream(&mut tape, &params, it).unwrap();
        let tsizes: Vec<Vec<usize>> = tfeats.iter().map(|&f| tape.value(f).shape.clone()).collect();
        assert_eq!(tsizes[0], vec![1, 4, 32, 32]);
        assert_eq!(tsizes[3], vec![1, 32, 4, 4]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let (params, model, _) = build(BackboneConfig::default(), 6);
        let mut tape = Tape::new();
        let ic = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]));
        let feats = model.content_stream(&mut tape, &params, ic).unwrap();
        for &f in &feats {
            assert!(tape.value(f).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_shapes_and_contour_resolutions() {
        let (params, model, mut rng) = build(BackboneConfig::default(), 7);
        let mut tape = Tape::new();
        let ic = tape.leaf(Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
        let it = tape.leaf(Tensor::rand_uniform(&[2, 3, 32, 32], -0.5, 0.5, &mut rng));
        let out = model.forward(&mut tape, &params, ic, it).unwrap();
        assert_eq!(tape.value(out.logits).shape, vec![2, 4, 32, 32]);
        assert_eq!(out.contours.len(), 4);
        for (i, &cmap) in out.contours.iter().enumerate() {
            let s = 32 >> (i + 1);
            assert_eq!(tape.value(cmap).shape, vec![2, 1, s, s]);
            // Sigmoid output strictly inside (0,1).
            assert!(tape.value(cmap).data.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn sge_levels_reduce_contour_maps() {
        let cfg = BackboneConfig { sge_levels: 2, ..BackboneConfig::default() };
        let (params, model, mut rng) = build(cfg, 8);
        let mut tape = Tape::new();
        let ic = tape.leaf(Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let it = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]));
        let out = model.forward(&mut tape, &params, ic, it).unwrap();
        assert_eq!(out.contours.len(), 2);
        assert_eq!(tape.value(out.logits).shape, vec![1, 4, 32, 32]);
    }

    #[test]
    fn texture_gate_zero_limit() {
        // With y ≡ 0 the enhanced branch vanishes: feed f_t = 0 so the
        // gate product is zero and the SGE output equals the fused branch.
        let (params, model, mut rng) = build(BackboneConfig::default(), 9);
        let mut tape = Tape::new();
        let f_c = tape.leaf(Tensor::rand_uniform(&[1, 16, 8, 8], -1.0, 1.0, &mut rng));
        let f_t = tape.leaf(Tensor::zeros(&[1, 4, 8, 8]));
        let state = model.sges[0].forward(&mut tape, &params, f_c, f_t).unwrap();
        let zp = model.sges[0].fuse.apply(&mut tape, &params, state.normalized).unwrap();
        for (a, b) in tape.value(state.output).data.iter().zip(tape.value(zp).data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_inside_sge_is_zero_mean() {
        let (params, model, mut rng) = build(BackboneConfig::default(), 10);
        let mut tape = Tape::new();
        let f_c = tape.leaf(Tensor::rand_uniform(&[1, 16, 8, 8], -1.0, 1.0, &mut rng));
        let f_t = tape.leaf(Tensor::rand_uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng));
        let state = model.sges[0].forward(&mut tape, &params, f_c, f_t).unwrap();
        let z = tape.value(state.normalized);
        for ch in 0..20 {
            let m: f64 = z.data[ch * 64..(ch + 1) * 64].iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-5, "channel {ch} mean {m}");
        }
    }

    #[test]
    fn classifier_constant_feature_gives_constant_logits() {
        // Zero feature: every convolution reduces to its bias, which is
        // spatially constant, and bilinear upsampling preserves constants.
        let (params, model, _) = build(BackboneConfig::default(), 11);
        let mut tape = Tape::new();
        let f4 = tape.leaf(Tensor::zeros(&[1, 128, 4, 4]));
        let logits = model.classifier(&mut tape, &params, f4, (64, 64)).unwrap();
        let v = tape.value(logits);
        assert_eq!(v.shape, vec![1, 4, 64, 64]);
        for ci in 0..4 {
            let base = ci * 4096;
            let first = v.data[base];
            assert!(v.data[base..base + 4096].iter().all(|&x| (x - first).abs() < 1e-6));
        }
    }

    #[test]
    fn argmax_labels_are_valid() {
        let (params, model, mut rng) = build(BackboneConfig::default(), 12);
        let mut tape = Tape::new();
        let ic = tape.leaf(Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let it = tape.leaf(Tensor::zeros(&[1, 3, 32, 32]));
        let out = model.forward(&mut tape, &params, ic, it).unwrap();
        let maps = logits_to_labels(tape.value(out.logits)).unwrap();
        assert!(maps[0].data.iter().all(|&l| l < 4));
    }

    #[test]
    fn no_afm_mode_runs_degenerate_decomposition() {
        let (mut params, model, mut rng) = build(BackboneConfig::default(), 13);
        let asp = AspModel::new(&mut params, &mut rng).unwrap();
        let images = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let full = forward_full(
            &mut tape,
            &params,
            Some(&asp),
            &model,
            &images,
            None,
            LambdaMode::NoAfm,
            PredictMode::Eval,
            &SolveOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(full.lambdas, vec![0.0]);
        assert_eq!(tape.value(full.ic_leaf).data, images.data);
        assert!(tape.value(full.it_leaf).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let (mut params, model, mut rng) = build(BackboneConfig::default(), 14);
        let asp = AspModel::new(&mut params, &mut rng).unwrap();
        let images = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let mut bits = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let mut rng_eval = Xoshiro256PlusPlus::new(0);
            let full = forward_full(
                &mut tape,
                &params,
                Some(&asp),
                &model,
                &images,
                None,
                LambdaMode::Adaptive,
                PredictMode::Eval,
                &SolveOptions::default(),
                &mut rng_eval,
            )
            .unwrap();
            let logits = tape.value(full.output.logits);
            bits.push(logits.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(bits[0], bits[1]);
    }
}
