//! Ablation suites: trains a matrix of configurations with shared seeds
//! and reports per-domain validation mIoU.

use super::config::{LambdaSetting, RunConfig};
use super::eval::evaluate;
use super::train::train;
use crate::error::{Error, Result};
use crate::scene;
use std::io::Write;
use std::path::Path;

/// The four ablation suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Full model vs. no filtering vs. fixed strengths (λ = 1, 2).
    Afm,
    /// 1- to 4-level SGE depth.
    SgeLevels,
    /// Contour-loss weight α over {1.5, 2.0, 2.5, 3.0}.
    Alpha,
    /// Adaptive vs. fixed λ over the training range endpoints.
    LambdaFixed,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "afm" => Ok(Suite::Afm),
            "sge_levels" | "sge" => Ok(Suite::SgeLevels),
            "alpha" => Ok(Suite::Alpha),
            "lambda_fixed" => Ok(Suite::LambdaFixed),
            _ => Err(Error::InvalidArgument(format!(
                "unknown suite {s:?}; expected afm|sge_levels|alpha|lambda_fixed"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Afm => "afm",
            Suite::SgeLevels => "sge_levels",
            Suite::Alpha => "alpha",
            Suite::LambdaFixed => "lambda_fixed",
        }
    }

    /// `(label, config)` pairs of the suite, derived from a base config.
    pub fn variants(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Suite::Afm => vec![
                ("full".into(), RunConfig { no_afm: false, lambda_mode: LambdaSetting::Adaptive, ..base.clone() }),
                ("wo_afm".into(), RunConfig { no_afm: true, ..base.clone() }),
                (
                    "fixed_lambda_1".into(),
                    RunConfig { no_afm: false, lambda_mode: LambdaSetting::Fixed(1.0), ..base.clone() },
                ),
                (
                    "fixed_lambda_2".into(),
                    RunConfig { no_afm: false, lambda_mode: LambdaSetting::Fixed(2.0), ..base.clone() },
                ),
            ],
            Suite::SgeLevels => (1..=4)
                .map(|k| (format!("sge_{k}"), RunConfig { sge_levels: k, ..base.clone() }))
                .collect(),
            Suite::Alpha => [1.5f32, 2.0, 2.5, 3.0]
                .iter()
                .map(|&a| (format!("alpha_{a}"), RunConfig { alpha: a, ..base.clone() }))
                .collect(),
            Suite::LambdaFixed => {
                let mut v = vec![(
                    "adaptive".to_string(),
                    RunConfig { no_afm: false, lambda_mode: LambdaSetting::Adaptive, ..base.clone() },
                )];
                for l in [0.5f32, 1.0, 2.0, 4.0] {
                    v.push((
                        format!("fixed_lambda_{l}"),
                        RunConfig { no_afm: false, lambda_mode: LambdaSetting::Fixed(l), ..base.clone() },
                    ));
                }
                v
            }
        }
    }
}

/// One result row of an ablation run.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub suite: String,
    pub config: String,
    /// Numeric seed, or `None` for the per-(config, domain) mean rows.
    pub seed: Option<u64>,
    pub domain: String,
    pub miou: f64,
    pub mean_lambda: f64,
}

/// Run the whole suite: every variant × every seed, trained and evaluated
/// on the benchmark. Rows come back variant-major, then seed, then domain
/// (source first), followed by mean rows.
pub fn ablate(suite: Suite, base: &RunConfig, progress: bool) -> Result<Vec<AblationRow>> {
    let seeds = base.effective_seeds();
    let domains = scene::benchmark_domains(base.num_classes);
    let mut rows = Vec::new();
    for (label, cfg) in suite.variants(base) {
        for &seed in &seeds {
            if progress {
                eprintln!("[ablate/{}] training {label} seed {seed}", suite.name());
            }
            let outcome = train(&cfg, seed, None)?;
            let evals = evaluate(&outcome.models, &cfg, seed)?;
            for e in &evals {
                rows.push(AblationRow {
                    suite: suite.name().into(),
                    config: label.clone(),
                    seed: Some(seed),
                    domain: e.domain.clone(),
                    miou: e.miou,
                    mean_lambda: e.mean_lambda,
                });
            }
        }
        // Per-domain means over seeds, in domain order.
        for spec in &domains {
            let vals: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.config == label && r.seed.is_some() && r.domain == spec.tag)
                .collect();
            let miou = vals.iter().map(|r| r.miou).sum::<f64>() / vals.len() as f64;
            let mean_lambda = vals.iter().map(|r| r.mean_lambda).sum::<f64>() / vals.len() as f64;
            rows.push(AblationRow {
                suite: suite.name().into(),
                config: label.clone(),
                seed: None,
                domain: spec.tag.clone(),
                miou,
                mean_lambda,
            });
        }
    }
    Ok(rows)
}

/// Mean validation mIoU over the target (non-source) domains for one
/// configuration, averaged across seeds.
pub fn target_mean(rows: &[AblationRow], config: &str, source_tag: &str) -> f64 {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.config == config && r.seed.is_some() && r.domain != source_tag)
        .map(|r| r.miou)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn write_ablation_csv(path: &Path, base: &RunConfig, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::new();
    for line in base.header_lines(base.seed) {
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(&format!("# seeds={}\n", base.effective_seeds().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")));
    out.push_str("suite,config,seed,domain,miou,mean_lambda\n");
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.suite, r.config, seed, r.domain, r.miou, r.mean_lambda
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
