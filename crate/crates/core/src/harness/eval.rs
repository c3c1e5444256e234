//! Deterministic evaluation over the benchmark domains.

use super::config::RunConfig;
use super::train::TrainedModels;
use crate::asp::PredictMode;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::filter::SolveOptions;
use crate::hggn::{forward_full, logits_to_labels};
use crate::losses::IGNORE_LABEL;
use crate::metrics::ConfusionMatrix;
use crate::rng::Xoshiro256PlusPlus;
use crate::scene::{self, DomainSpec, VAL_SEED_OFFSET};
use std::io::Write;
use std::path::Path;

/// Per-domain evaluation result.
#[derive(Clone, Debug)]
pub struct DomainEval {
    pub split: String,
    pub domain: String,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Mean predicted λ over the split (0 for fixed/no-AFM runs it still
    /// reports the strength actually used).
    pub mean_lambda: f64,
}

/// Evaluate one split of one domain. Inference is noise-free, unguided
/// (G = 0), and independent of batch assembly.
pub fn evaluate_split(
    models: &TrainedModels,
    cfg: &RunConfig,
    spec: &DomainSpec,
    n: usize,
    seed: u64,
    start_index: u64,
    split: &str,
) -> Result<DomainEval> {
    if models.hggn.cfg.num_classes != cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} classes but the dataset is configured for {}",
            models.hggn.cfg.num_classes, cfg.num_classes
        )));
    }
    let mode = cfg.pipeline_mode();
    let solver = SolveOptions {
        tol: cfg.solver_tol,
        max_iter: None,
        method: crate::filter::SolveMethod::Direct,
    };
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    let mut lambda_sum = 0.0f64;
    // Eval mode draws no random numbers; the stream exists only to
    // satisfy the pipeline signature.
    let mut rng = Xoshiro256PlusPlus::new(0);
    for i in 0..n {
        let sample = scene::gen_sample(spec, cfg.image_size, seed, start_index + i as u64)?;
        let batch = sample.image.clone();
        let batch = crate::tensor::Tensor::from_vec(
            &[1, 3, cfg.image_size, cfg.image_size],
            batch.data,
        )?;
        let mut tape = Tape::new();
        let full = forward_full(
            &mut tape,
            &models.params,
            models.asp.as_ref(),
            &models.hggn,
            &batch,
            None,
            mode,
            PredictMode::Eval,
            &solver,
            &mut rng,
        )?;
        lambda_sum += full.lambdas[0] as f64;
        let pred = logits_to_labels(tape.value(full.output.logits))?;
        cm.accumulate(&pred[0], &sample.labels, IGNORE_LABEL)?;
    }
    Ok(DomainEval {
        split: split.to_string(),
        domain: spec.tag.clone(),
        per_class: cm.per_class_iou(),
        miou: cm.miou(false),
        mean_lambda: lambda_sum / n as f64,
    })
}

/// Validation evaluation over every benchmark domain (source first).
pub fn evaluate(models: &TrainedModels, cfg: &RunConfig, seed: u64) -> Result<Vec<DomainEval>> {
    let domains = scene::benchmark_domains(cfg.num_classes);
    domains
        .iter()
        .map(|spec| evaluate_split(models, cfg, spec, cfg.val_size, seed, VAL_SEED_OFFSET, "val"))
        .collect()
}

/// Metric CSV: `split,domain,class_id,iou,miou,seed`, one row per class
/// per domain; absent classes write `NA`.
pub fn write_metrics_csv(path: &Path, cfg: &RunConfig, seed: u64, evals: &[DomainEval]) -> Result<()> {
    let mut out = String::new();
    for line in cfg.header_lines(seed) {
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("split,domain,class_id,iou,miou,seed\n");
    for e in evals {
        for (class_id, iou) in e.per_class.iter().enumerate() {
            let iou_s = match iou {
                Some(v) => format!("{v:.6}"),
                None => "NA".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                e.split, e.domain, class_id, iou_s, e.miou, seed
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::build_models;

    fn tiny_config() -> RunConfig {
        RunConfig {
            image_size: 32,
            iterations: 2,
            train_size: 2,
            val_size: 2,
            stage_channels: [8, 12, 16, 24],
            texture_channels: [2, 4, 6, 8],
            ..RunConfig::default()
        }
    }

    #[test]
    fn untrained_eval_runs_and_is_deterministic() {
        let cfg = tiny_config();
        let models = build_models(&cfg, 5).unwrap();
        let a = evaluate(&models, &cfg, 5).unwrap();
        let b = evaluate(&models, &cfg, 5).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.miou.to_bits(), y.miou.to_bits());
        }
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let cfg = tiny_config();
        let models = build_models(&cfg, 5).unwrap();
        let mut wrong = cfg.clone();
        wrong.num_classes = 5;
        let domains = scene::benchmark_domains(5);
        let err = evaluate_split(&models, &wrong, &domains[0], 1, 5, 0, "val");
        assert!(err.is_err());
    }
}
