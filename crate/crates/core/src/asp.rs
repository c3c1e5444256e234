//! Adaptive strength predictor: maps an image to a smoothing strength
//! λ_a ∈ [0, 4] from the channel mean/variance statistics of a shallow
//! feature extractor. Training adds a truncated-normal perturbation to the
//! prediction; evaluation is noise-free and deterministic.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet};
use crate::rng::Xoshiro256PlusPlus;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// Magnitude bound of the training-time noise term.
pub const NOISE_BOUND: f32 = 1.5;
/// Output clamp range, matching the filter's admissible strengths.
pub const LAMBDA_MIN: f32 = 0.0;
pub const LAMBDA_MAX: f32 = 4.0;

/// Whether prediction runs with training noise or deterministically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Train,
    Eval,
}

/// Standard normal sample re-drawn until it lands inside `±bound`
/// (rejection keeps the truncated-normal shape, unlike clipping).
pub fn sample_truncated_normal(rng: &mut Xoshiro256PlusPlus, bound: f32) -> f32 {
    loop {
        let x: f32 = StandardNormal.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

/// One λ prediction for a batch of images.
#[derive(Debug)]
pub struct LambdaPrediction {
    /// Non-negative raw strengths (softplus of the FC output), per sample.
    pub lambda_raw: Vec<f32>,
    /// Noise added before clamping; zeros in eval mode.
    pub noise: Vec<f32>,
    /// Final clamped strengths in `[0, 4]`, per sample.
    pub lambda: Vec<f32>,
    /// Tape node of the clamped `[N, 1]` prediction; seed it with
    /// `dLoss/dλ` to backpropagate into the predictor.
    pub var: Var,
}

/// Feature extractor (three 3×3 convolutions with 2× max-pool
/// downsampling, channels 3→8→16→32) + fully connected head over the
/// 64-dim `[mu ‖ var]` statistics vector.
pub struct AspModel {
    convs: [(ParamId, ParamId); 3],
    fc: (ParamId, ParamId),
}

const ASP_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl AspModel {
    pub fn new(params: &mut ParamSet, rng: &mut Xoshiro256PlusPlus) -> Result<Self> {
        let mut convs = Vec::with_capacity(3);
        for i in 0..3 {
            convs.push(params.add_conv(
                &format!("asp.conv{}", i + 1),
                ASP_CHANNELS[i + 1],
                ASP_CHANNELS[i],
                3,
                3,
                rng,
            )?);
        }
        let fc = params.add_fc("asp.fc", 1, 2 * ASP_CHANNELS[3], rng)?;
        Ok(Self { convs: [convs[0], convs[1], convs[2]], fc })
    }

    /// Style statistics of the extracted features, `[N, 64]`.
    pub fn extract_stats(&self, tape: &mut Tape, params: &ParamSet, image: Var) -> Result<Var> {
        let mut x = image;
        for &(w, b) in &self.convs {
            x = tape.maxpool2d(x, 2, 2)?;
            let wv = params.watch(tape, w);
            let bv = params.watch(tape, b);
            x = tape.conv2d(x, wv, bv, 1, 1)?;
            x = tape.relu(x);
        }
        tape.style_stats(x)
    }

    /// Predict λ_a for each image in the batch. In train mode a truncated
    /// standard-normal ε is added per sample before the `[0, 4]` clamp; in
    /// eval mode ε = 0 and repeated calls agree bitwise.
    pub fn predict_lambda(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        image: Var,
        mode: PredictMode,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<LambdaPrediction> {
        let n = tape.value(image).shape[0];
        let stats = self.extract_stats(tape, params, image)?;
        let fw = params.watch(tape, self.fc.0);
        let fb = params.watch(tape, self.fc.1);
        let fc_out = tape.fully_connected(stats, fw, fb)?;
        let raw = tape.softplus(fc_out);
        let lambda_raw = tape.value(raw).data.clone();

        let noise: Vec<f32> = match mode {
            PredictMode::Train => (0..n).map(|_| sample_truncated_normal(rng, NOISE_BOUND)).collect(),
            PredictMode::Eval => vec![0.0; n],
        };
        let noise_leaf = tape.leaf(Tensor::from_vec(&[n, 1], noise.clone())?);
        let noisy = tape.add(raw, noise_leaf)?;
        let clamped = tape.clamp(noisy, LAMBDA_MIN, LAMBDA_MAX);
        let lambda = tape.value(clamped).data.clone();
        Ok(LambdaPrediction { lambda_raw, noise, lambda, var: clamped })
    }
}

/// Backpropagate the task loss into the predictor's parameters through a
/// per-sample `dLoss/dλ` seed. Skipped with an `Err` when the incoming
/// gradient is non-finite, leaving all gradients untouched.
pub fn asp_backward(
    tape: &mut Tape,
    params: &mut ParamSet,
    prediction: &LambdaPrediction,
    dloss_dlambda: &[f32],
) -> Result<()> {
    if dloss_dlambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dLoss/dlambda seed for the strength predictor".into()));
    }
    tape.backward_seeded(prediction.var, dloss_dlambda)?;
    params.accumulate_grads(tape);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(seed: u64) -> (ParamSet, AspModel, Xoshiro256PlusPlus) {
        let mut rng = Xoshiro256PlusPlus::new(seed);
        let mut params = ParamSet::new();
        let model = AspModel::new(&mut params, &mut rng).unwrap();
        (params, model, rng)
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let (params, model, mut rng) = build(3);
        let image = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(image.clone());
            let pred = model
                .predict_lambda(&mut tape, &params, leaf, PredictMode::Eval, &mut rng)
                .unwrap();
            assert_eq!(pred.noise, vec![0.0]);
            out.push(pred.lambda[0].to_bits());
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn noise_respects_truncation_and_centering() {
        let mut rng = Xoshiro256PlusPlus::new(7);
        let mut sum = 0.0f64;
        const N: usize = 10_000;
        for _ in 0..N {
            let e = sample_truncated_normal(&mut rng, NOISE_BOUND);
            assert!(e.abs() <= NOISE_BOUND, "{e}");
            sum += e as f64;
        }
        let mean = sum / N as f64;
        assert!(mean.abs() < 0.05, "empirical mean {mean}");
    }

    #[test]
    fn lambda_stays_in_range_under_adversarial_head() {
        let (params, model, mut rng) = build(11);
        let image = Tensor::filled(&[1, 3, 16, 16], 1.0);
        let mut tape = Tape::new();
        let leaf = tape.leaf(image);
        let pred = model
            .predict_lambda(&mut tape, &params, leaf, PredictMode::Train, &mut rng)
            .unwrap();
        assert!(pred.lambda[0] >= LAMBDA_MIN && pred.lambda[0] <= LAMBDA_MAX);
        // raw = 7.2 with ε = 0 clamps to exactly 4.
        let mut tape = Tape::new();
        let raw = tape.leaf(Tensor::from_vec(&[1, 1], vec![7.2]).unwrap());
        let clamped = tape.clamp(raw, LAMBDA_MIN, LAMBDA_MAX);
        assert_eq!(tape.value(clamped).data[0], 4.0);
    }

    #[test]
    fn clamped_prediction_blocks_gradient() {
        // Saturated clamp: gradient through λ must vanish upstream.
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::from_vec(&[1, 1], vec![9.0]).unwrap());
        let sp = tape.softplus(x);
        let lam = tape.clamp(sp, LAMBDA_MIN, LAMBDA_MAX);
        assert_eq!(tape.value(lam).data[0], 4.0);
        tape.backward_seeded(lam, &[1.0]).unwrap();
        assert_eq!(tape.grad(x), &[0.0]);
    }

    #[test]
    fn zero_loss_gradient_means_zero_parameter_gradients() {
        let (mut params, model, mut rng) = build(13);
        let image = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let leaf = tape.leaf(image);
        let pred = model
            .predict_lambda(&mut tape, &params, leaf, PredictMode::Eval, &mut rng)
            .unwrap();
        asp_backward(&mut tape, &mut params, &pred, &[0.0]).unwrap();
        for p in params.iter() {
            assert!(p.grad.data.iter().all(|&g| g == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn nonfinite_seed_is_rejected() {
        let (mut params, model, mut rng) = build(17);
        let image = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let leaf = tape.leaf(image);
        let pred = model
            .predict_lambda(&mut tape, &params, leaf, PredictMode::Eval, &mut rng)
            .unwrap();
        assert!(asp_backward(&mut tape, &mut params, &pred, &[f32::NAN]).is_err());
    }

    #[test]
    fn stats_are_invariant_to_spatial_permutation() {
        // extract_stats sits on top of convolutions, so check the stats op
        // directly through the model path on a constant feature: constant
        // maps stay constant under permutation trivially; the real
        // permutation-invariance test for the stats op lives in autograd.
        let (params, model, _) = build(19);
        // Zero input with zero-initialized biases: every feature plane is
        // identically zero, so mu = var = 0 in all 2×32 slots.
        let image = Tensor::zeros(&[1, 3, 16, 16]);
        let mut tape = Tape::new();
        let leaf = tape.leaf(image);
        let stats = model.extract_stats(&mut tape, &params, leaf).unwrap();
        assert_eq!(tape.value(stats).shape, vec![1, 64]);
        assert!(tape.value(stats).data.iter().all(|&v| v == 0.0));
    }
}
