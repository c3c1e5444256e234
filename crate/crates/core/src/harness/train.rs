//! Training loop: SGD with poly learning-rate decay over the full
//! ASP + solver + HGGN pipeline on the synthetic source domain.

use super::config::RunConfig;
use crate::asp::{asp_backward, AspModel, PredictMode};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::filter::SolveOptions;
use crate::hggn::{forward_full, lambda_gradients, HggnModel, LambdaMode};
use crate::losses::{self, contour_to_boundary, extract_contour_gt, IGNORE_LABEL};
use crate::nn::ParamSet;
use crate::rng::Xoshiro256PlusPlus;
use crate::scene::{self, SceneSample};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const INIT_STREAM: u64 = 0x494e_4954; // "INIT"
const BATCH_STREAM: u64 = 0x4241_5443; // "BATC"
const NOISE_STREAM: u64 = 0x4e4f_4953; // "NOIS"

/// Parameters plus the model structure they belong to.
pub struct TrainedModels {
    pub params: ParamSet,
    pub asp: Option<AspModel>,
    pub hggn: HggnModel,
}

/// One row of the loss curve CSV.
#[derive(Clone, Debug)]
pub struct LossRow {
    pub iter: usize,
    pub seg: f64,
    pub contour: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub models: TrainedModels,
    pub loss_rows: Vec<LossRow>,
}

/// Freshly initialized models for a config. The ASP is built whenever the
/// λ mode is adaptive (and also for `no_afm` runs so checkpoints keep a
/// uniform shape across the AFM ablation — its gradients simply stay
/// zero when unused).
pub fn build_models(cfg: &RunConfig, seed: u64) -> Result<TrainedModels> {
    let mut rng = Xoshiro256PlusPlus::stream(seed, &[INIT_STREAM]);
    let mut params = ParamSet::new();
    let asp = Some(AspModel::new(&mut params, &mut rng)?);
    let hggn = HggnModel::new(cfg.backbone(), &mut params, &mut rng)?;
    Ok(TrainedModels { params, asp, hggn })
}

/// Rebuild models from checkpoint bytes by inferring the backbone layout
/// from parameter shapes, then loading the values.
pub fn models_from_checkpoint(bytes: &[u8]) -> Result<TrainedModels> {
    let entries = ParamSet::parse_checkpoint(bytes)?;
    let find = |name: &str| -> Result<&Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name:?}")))
    };
    let mut stage_channels = [0usize; 4];
    let mut texture_channels = [0usize; 4];
    for i in 0..4 {
        stage_channels[i] = find(&format!("hggn.content{}.a.weight", i + 1))?.shape[0];
        texture_channels[i] = find(&format!("hggn.texture{}.weight", i + 1))?.shape[0];
    }
    let num_classes = find("hggn.classifier.b.weight")?.shape[0];
    let sge_levels = (1..=4)
        .filter(|i| entries.iter().any(|(n, _)| n.starts_with(&format!("hggn.sge{i}."))))
        .max()
        .unwrap_or(0);
    if sge_levels == 0 {
        return Err(Error::format("checkpoint", "no SGE parameters found"));
    }

    let cfg = RunConfig {
        stage_channels,
        texture_channels,
        num_classes,
        sge_levels,
        ..RunConfig::default()
    };
    let mut models = build_models(&cfg, 0)?;
    models.params.load_bytes(bytes)?;
    Ok(models)
}

/// Assemble a batch: images `[N,3,H,W]`, flat labels, per-sample boundary
/// maps and per-stage contour targets.
struct Batch {
    images: Tensor,
    labels_i32: Vec<i32>,
    boundaries: Vec<Tensor>,
    /// Per active SGE level: (targets `[N·h·w]`, betas `[N]`).
    stage_targets: Vec<(Vec<u8>, Vec<f32>)>,
}

fn assemble_batch(samples: &[SceneSample], sge_levels: usize) -> Result<Batch> {
    let n = samples.len();
    let size = samples[0].labels.height;
    let plane = size * size;
    let mut images = Tensor::zeros(&[n, 3, size, size]);
    let mut labels_i32 = Vec::with_capacity(n * plane);

    let mut boundaries = Vec::with_capacity(n);
    let mut full_targets = Vec::with_capacity(n);
    for (s, sample) in samples.iter().enumerate() {
        images.data[s * 3 * plane..(s + 1) * 3 * plane].copy_from_slice(&sample.image.data);
        labels_i32.extend(sample.labels.data.iter().map(|&l| l as i32));

        let target = extract_contour_gt(&sample.labels, IGNORE_LABEL);
        boundaries.push(contour_to_boundary(&target));
        full_targets.push(target);
    }
    let mut stage_targets = Vec::with_capacity(sge_levels);
    for level in 0..sge_levels {
        let factor = 2usize << level;
        let mut masks = Vec::new();
        let mut betas = Vec::with_capacity(n);
        for target in &full_targets {
            let down = target.downsample(factor)?;
            masks.extend_from_slice(&down.mask);
            betas.push(down.beta);
        }
        stage_targets.push((masks, betas));
    }
    Ok(Batch { images, labels_i32, boundaries, stage_targets })
}

pub struct StepOutcome {
    pub bundle: losses::LossBundle,
    pub lambdas: Vec<f32>,
    pub solver_converged: bool,
}

/// One optimization step over an assembled batch: forward, losses,
/// backward (twice when the strength predictor is learning), SGD.
fn train_step(
    cfg: &RunConfig,
    models: &mut TrainedModels,
    batch: &Batch,
    lr: f32,
    mode: LambdaMode,
    noise_rng: &mut Xoshiro256PlusPlus,
    iteration: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let solver = SolveOptions {
        tol: cfg.solver_tol,
        max_iter: None,
        method: crate::filter::SolveMethod::Direct,
    };
    let full = forward_full(
        &mut tape,
        &models.params,
        models.asp.as_ref(),
        &models.hggn,
        &batch.images,
        Some(&batch.boundaries),
        mode,
        PredictMode::Train,
        &solver,
        noise_rng,
    )?;

    let (seg, _count) = tape.seg_cross_entropy_mean(full.output.logits, &batch.labels_i32, IGNORE_LABEL as i32)?;
    let mut contour_nodes = Vec::with_capacity(full.output.contours.len());
    for (level, &cmap) in full.output.contours.iter().enumerate() {
        let (targets, betas) = &batch.stage_targets[level];
        contour_nodes.push(tape.contour_bce_mean(cmap, targets, betas)?);
    }
    let mut contour_total = None;
    for &c in &contour_nodes {
        contour_total = Some(match contour_total {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
    }
    let total = match contour_total {
        Some(ct) => {
            let scaled = tape.scale(ct, cfg.alpha);
            tape.add(seg, scaled)?
        }
        None => seg,
    };

    let total_value = tape.scalar_f64(total);
    if !total_value.is_finite() {
        return Err(Error::NonFinite(format!("total loss at iteration {iteration}")));
    }

    models.params.zero_grads();
    tape.backward(total)?;
    models.params.accumulate_grads(&tape);

    if full.prediction.is_some() {
        let dl = lambda_gradients(&tape, &full);
        let pred = full.prediction.as_ref().unwrap();
        if let Err(e) = asp_backward(&mut tape, &mut models.params, pred, &dl) {
            // Skip the predictor update this step rather than aborting.
            eprintln!("warning: iteration {iteration}: {e}");
        }
    }

    models.params.sgd_step(lr, cfg.momentum, cfg.weight_decay)?;

    let contour_values: Vec<f64> = contour_nodes.iter().map(|&c| tape.scalar_f64(c)).collect();
    let bundle = losses::total_loss(tape.scalar_f64(seg), &contour_values, cfg.alpha)?;
    Ok(StepOutcome {
        bundle,
        lambdas: full.lambdas,
        solver_converged: full.solver_converged,
    })
}

/// Poly learning-rate schedule `lr·(1 − t/T)^power`.
pub fn poly_lr(lr0: f32, t: usize, total: usize, power: f32) -> f32 {
    lr0 * (1.0 - t as f32 / total as f32).max(0.0).powf(power)
}

/// Train on the benchmark's source domain. When `out_dir` is given, the
/// loss curve lands in `loss.csv` and checkpoints in
/// `checkpoint_<iter>.ckpt` / `checkpoint_final.ckpt`.
pub fn train(cfg: &RunConfig, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let domains = scene::benchmark_domains(cfg.num_classes);
    let source = &domains[0];
    let train_set = scene::gen_dataset(source, cfg.train_size, cfg.image_size, seed, 0)?;

    let mut models = build_models(cfg, seed)?;
    let mode = cfg.pipeline_mode();
    let mut batch_rng = Xoshiro256PlusPlus::stream(seed, &[BATCH_STREAM]);
    let mut noise_rng = Xoshiro256PlusPlus::stream(seed, &[NOISE_STREAM]);
    let mut loss_rows = Vec::with_capacity(cfg.iterations);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    use rand::Rng;
    for t in 0..cfg.iterations {
        let mut aug_rng = scene::augment_rng(seed, t as u64);
        let samples: Vec<SceneSample> = (0..cfg.batch_size)
            .map(|_| {
                let idx = batch_rng.random_range(0..cfg.train_size);
                let mut s = scene::augment(&train_set[idx], &mut aug_rng);
                if cfg.color_aug {
                    s = color_augment(&s, &mut aug_rng);
                }
                s
            })
            .collect();
        let batch = assemble_batch(&samples, cfg.sge_levels)?;
        let lr = poly_lr(cfg.lr, t, cfg.iterations, cfg.poly_power);
        let step = train_step(cfg, &mut models, &batch, lr, mode, &mut noise_rng, t)?;
        loss_rows.push(LossRow {
            iter: t,
            seg: step.bundle.seg_loss,
            contour: step.bundle.contour_total,
            total: step.bundle.total,
        });

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 && t + 1 < cfg.iterations {
                models.params.save(&dir.join(format!("checkpoint_{:06}.ckpt", t + 1)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        models.params.save(&dir.join("checkpoint_final.ckpt"))?;
        write_loss_csv(&dir.join("loss.csv"), cfg, seed, &loss_rows)?;
    }
    Ok(TrainOutcome { models, loss_rows })
}

/// Brightness/contrast/color/sharpness jitter, behind the `color_aug`
/// flag (default off).
fn color_augment(sample: &SceneSample, rng: &mut Xoshiro256PlusPlus) -> SceneSample {
    use rand::Rng;
    let size = sample.labels.height;
    let plane = size * size;
    let brightness: f32 = rng.random_range(-0.08..0.08);
    let contrast: f32 = rng.random_range(0.9..1.1);
    let color: [f32; 3] = [
        rng.random_range(0.92..1.08),
        rng.random_range(0.92..1.08),
        rng.random_range(0.92..1.08),
    ];
    let sharpness: f32 = rng.random_range(0.0..0.6);
    let mut image = sample.image.clone();
    for ch in 0..3 {
        let src = &sample.image.data[ch * plane..(ch + 1) * plane];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() as f32 / plane as f32;
        let dst = &mut image.data[ch * plane..(ch + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                let p = y * size + x;
                // 4-neighbor blur for the unsharp component.
                let mut acc = src[p];
                let mut cnt = 1.0f32;
                if x > 0 {
                    acc += src[p - 1];
                    cnt += 1.0;
                }
                if x + 1 < size {
                    acc += src[p + 1];
                    cnt += 1.0;
                }
                if y > 0 {
                    acc += src[p - size];
                    cnt += 1.0;
                }
                if y + 1 < size {
                    acc += src[p + size];
                    cnt += 1.0;
                }
                let blur = acc / cnt;
                let sharpened = src[p] + sharpness * (src[p] - blur);
                let v = (sharpened - mean) * contrast + mean;
                dst[p] = ((v + brightness) * color[ch]).clamp(0.0, 1.0);
            }
        }
    }
    SceneSample { image, ..sample.clone() }
}

pub fn write_loss_csv(path: &Path, cfg: &RunConfig, seed: u64, rows: &[LossRow]) -> Result<()> {
    let mut out = String::new();
    for line in cfg.header_lines(seed) {
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("iter,seg_loss,contour_loss,total\n");
    for r in rows {
        out.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", r.iter, r.seg, r.contour, r.total));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
