//! `texshield` — synthetic-benchmark driver for adaptive texture
//! filtering and structure-guided segmentation.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use texshield_core::filter::{self, GuidedImage};
use texshield_core::harness::{self, LambdaSetting, RunConfig, Suite};
use texshield_core::scene;
use texshield_core::{io as tio, Tensor};

#[derive(Parser)]
#[command(
    name = "texshield",
    version,
    about = "Adaptive texture filtering for domain-generalized segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every run-driving subcommand. CLI flags override the
/// config file.
#[derive(Args, Clone)]
struct RunArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// λ selection: `adaptive` or `fixed:<float>` (overrides the config).
    #[arg(long)]
    lambda_mode: Option<String>,
    /// Active SGE levels, 1..=4 (overrides the config).
    #[arg(long)]
    sge_levels: Option<usize>,
    /// Contour-loss weight α (overrides the config).
    #[arg(long)]
    alpha: Option<f32>,
    /// Ablation: bypass the filtering mechanism (I_c = I, I_t = 0).
    #[arg(long)]
    no_afm: bool,
}

impl RunArgs {
    fn build_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.lambda_mode {
            cfg.lambda_mode = LambdaSetting::parse(mode)?;
        }
        if let Some(levels) = self.sge_levels {
            cfg.sge_levels = levels;
        }
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if self.no_afm {
            cfg.no_afm = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate benchmark datasets as PPM images and PGM label maps.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (one subdirectory per domain).
        #[arg(long)]
        out: PathBuf,
        /// Samples per domain and split; defaults to train_size/val_size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on the benchmark source domain.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory for checkpoints and the loss CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every benchmark domain.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the metrics CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation suite (trains every configuration).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// One of: afm, sge_levels, alpha, lambda_fixed.
        #[arg(long)]
        suite: String,
        /// Output directory for the comparison CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose one PPM image into content and texture components.
    Filter {
        /// Input image (binary PPM, P6).
        input: PathBuf,
        /// Optional boundary-guidance map (binary PGM, P5, 255 = boundary).
        #[arg(long)]
        boundary: Option<PathBuf>,
        /// `adaptive` or `fixed:<float>`.
        #[arg(long, default_value = "fixed:1")]
        lambda_mode: String,
        /// Checkpoint with predictor weights (required for adaptive mode).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory; defaults to the input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize result CSVs; optionally plot loss curves as SVG.
    Report {
        /// CSV files produced by train/eval/ablate.
        csv: Vec<PathBuf>,
        /// Write an SVG line plot next to each loss CSV.
        #[arg(long)]
        plot: bool,
    },
}

fn main() {
    // Single-threaded build: the cap is validated for compatibility and a
    // value of 0 is rejected, but no worker pool exists to resize.
    if let Ok(v) = std::env::var("TEXSHIELD_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {}
            _ => {
                eprintln!("error: TEXSHIELD_THREADS must be a positive integer, got {v:?}");
                std::process::exit(2);
            }
        }
    }
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run, out, count } => gen_data(&run, &out, count),
        Command::Train { run, out } => train(&run, &out),
        Command::Eval { run, checkpoint, out } => eval(&run, &checkpoint, &out),
        Command::Ablate { run, suite, out } => ablate(&run, &suite, &out),
        Command::Filter { input, boundary, lambda_mode, checkpoint, out } => {
            filter_cmd(&input, boundary.as_deref(), &lambda_mode, checkpoint.as_deref(), out.as_deref())
        }
        Command::Report { csv, plot } => report(&csv, plot),
    }
}

fn stamp(cfg: &RunConfig, seed: u64) -> String {
    format!(
        "texshield generator v{} seed {} size {}",
        scene::GENERATOR_VERSION,
        seed,
        cfg.image_size
    )
}

fn gen_data(run: &RunArgs, out: &Path, count: Option<usize>) -> Result<()> {
    let cfg = run.build_config()?;
    let seed = cfg.seed;
    for spec in scene::benchmark_domains(cfg.num_classes) {
        let dir = out.join(&spec.tag);
        std::fs::create_dir_all(&dir)?;
        let splits = [
            ("train", count.unwrap_or(cfg.train_size), 0u64),
            ("val", count.unwrap_or(cfg.val_size), scene::VAL_SEED_OFFSET),
        ];
        for (split, n, offset) in splits {
            for i in 0..n {
                let sample = scene::gen_sample(&spec, cfg.image_size, seed, offset + i as u64)?;
                let comment = stamp(&cfg, seed);
                tio::write_ppm(&dir.join(format!("{split}_{i:05}.ppm")), &sample.image, Some(&comment))?;
                tio::write_pgm(&dir.join(format!("{split}_{i:05}.pgm")), &sample.labels, Some(&comment))?;
            }
        }
        println!("wrote {} train + {} val samples to {}",
            count.unwrap_or(cfg.train_size), count.unwrap_or(cfg.val_size), dir.display());
    }
    Ok(())
}

fn train(run: &RunArgs, out: &Path) -> Result<()> {
    let cfg = run.build_config()?;
    let outcome = harness::train(&cfg, cfg.seed, Some(out))?;
    let last = outcome.loss_rows.last().context("no iterations ran")?;
    println!(
        "trained {} iterations (final total loss {:.4}); checkpoint at {}",
        outcome.loss_rows.len(),
        last.total,
        out.join("checkpoint_final.ckpt").display()
    );
    Ok(())
}

fn eval(run: &RunArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = run.build_config()?;
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let models = harness::models_from_checkpoint(&bytes)?;
    let evals = harness::evaluate(&models, &cfg, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    let csv = out.join("metrics.csv");
    harness::write_metrics_csv(&csv, &cfg, cfg.seed, &evals)?;
    for e in &evals {
        println!("{:<16} {:<6} miou {:.4}  mean_lambda {:.3}", e.domain, e.split, e.miou, e.mean_lambda);
    }
    println!("metrics written to {}", csv.display());
    Ok(())
}

fn ablate(run: &RunArgs, suite: &str, out: &Path) -> Result<()> {
    let cfg = run.build_config()?;
    let suite = Suite::parse(suite)?;
    let rows = harness::ablate(suite, &cfg, true)?;
    std::fs::create_dir_all(out)?;
    let csv = out.join(format!("ablation_{}.csv", suite.name()));
    harness::write_ablation_csv(&csv, &cfg, &rows)?;
    for r in rows.iter().filter(|r| r.seed.is_none()) {
        println!("{:<16} {:<16} mean miou {:.4}", r.config, r.domain, r.miou);
    }
    println!("comparison written to {}", csv.display());
    Ok(())
}

fn filter_cmd(
    input: &Path,
    boundary: Option<&Path>,
    lambda_mode: &str,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let image = tio::read_ppm(input).with_context(|| format!("reading {}", input.display()))?;
    let (h, w) = (image.shape[1], image.shape[2]);
    let guided = match boundary {
        Some(b) => {
            let map = tio::read_pgm_as_map(b)?;
            GuidedImage::new(image.clone(), map, filter::DEFAULT_EPS)?
        }
        None => GuidedImage::unguided(image.clone())?,
    };

    let lambda = match LambdaSetting::parse(lambda_mode)? {
        LambdaSetting::Fixed(l) => l,
        LambdaSetting::Adaptive => {
            let Some(ckpt) = checkpoint else {
                bail!("adaptive mode needs --checkpoint; train one with `texshield train`");
            };
            let bytes = std::fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let models = harness::models_from_checkpoint(&bytes)?;
            let asp = models.asp.as_ref().context("checkpoint has no strength predictor")?;
            if h % 8 != 0 || w % 8 != 0 {
                bail!("adaptive mode needs dimensions divisible by 8, image is {w}x{h}");
            }
            let mut tape = texshield_core::autograd::Tape::new();
            let batch = Tensor::from_vec(&[1, 3, h, w], image.data.clone())?;
            let leaf = tape.leaf(batch);
            let mut rng = texshield_core::rng::Xoshiro256PlusPlus::new(0);
            let pred = asp.predict_lambda(
                &mut tape,
                &models.params,
                leaf,
                texshield_core::asp::PredictMode::Eval,
                &mut rng,
            )?;
            println!("predicted lambda: {:.4}", pred.lambda[0]);
            pred.lambda[0]
        }
    };

    let result = filter::filter_with_strength(&guided, lambda)?;
    if !result.converged {
        eprintln!(
            "warning: solver stopped before tolerance (residuals {:?})",
            result.final_residual
        );
    }
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let ic_path = dir.join(format!("{stem}_ic.ppm"));
    let it_path = dir.join(format!("{stem}_it.ppm"));
    tio::write_ppm(&ic_path, &result.content, Some(&format!("content component, lambda {lambda}")))?;
    // The residual is signed; shift it for 8-bit storage.
    let it_vis = result.texture.map(|v| v + 0.5);
    tio::write_ppm(&it_path, &it_vis, Some("texture component, values shifted by +0.5"))?;
    println!("wrote {} and {}", ic_path.display(), it_path.display());
    Ok(())
}

fn report(csvs: &[PathBuf], plot: bool) -> Result<()> {
    if csvs.is_empty() {
        bail!("no CSV files given");
    }
    for path in csvs {
        let table = harness::report::read_csv(path)?;
        println!("== {} ==", path.display());
        if table.skipped > 0 {
            eprintln!("warning: skipped {} malformed rows", table.skipped);
        }
        if table.column("total").is_some() {
            print!("{}", harness::report::summarize_loss(&table)?);
            if plot {
                let iter_i = table.column("iter").context("loss csv without iter column")?;
                let parse = |name: &str| -> Vec<f64> {
                    let i = table.column(name).unwrap();
                    table.rows.iter().filter_map(|r| r[i].parse().ok()).collect()
                };
                let x: Vec<f64> = table.rows.iter().filter_map(|r| r[iter_i].parse().ok()).collect();
                let svg = path.with_extension("svg");
                harness::report::plot_series_svg(
                    &svg,
                    "training loss",
                    &x,
                    &[
                        ("total", parse("total")),
                        ("seg", parse("seg_loss")),
                        ("contour", parse("contour_loss")),
                    ],
                )?;
                println!("plot written to {}", svg.display());
            }
        } else if table.column("miou").is_some() && table.column("config").is_some() {
            print!("{}", harness::report::summarize_ablation(&table)?);
        } else if !table.columns.is_empty() {
            print!(
                "{}",
                harness::report::render_table(&table.columns, &table.rows)
            );
        } else {
            println!("(empty)");
        }
    }
    Ok(())
}
