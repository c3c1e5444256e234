//! Run configuration: `key = value` files with `#` comments. Every key
//! has a default; unknown keys are rejected.

use crate::error::{Error, Result};
use crate::hggn::LambdaMode;
use std::path::Path;

/// How the run chooses λ, as written in configs and CLI flags:
/// `adaptive` or `fixed:<float>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSetting {
    Adaptive,
    Fixed(f32),
}

impl LambdaSetting {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(LambdaSetting::Adaptive);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let x: f32 = v
                .parse()
                .map_err(|_| Error::format("config", format!("bad fixed lambda {v:?}")))?;
            if !x.is_finite() || x < 0.0 {
                return Err(Error::format("config", format!("fixed lambda must be >= 0, got {x}")));
            }
            return Ok(LambdaSetting::Fixed(x));
        }
        Err(Error::format(
            "config",
            format!("lambda_mode must be 'adaptive' or 'fixed:<float>', got {s:?}"),
        ))
    }
}

impl std::fmt::Display for LambdaSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaSetting::Adaptive => write!(f, "adaptive"),
            LambdaSetting::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

/// Hyperparameters of a training/evaluation run. The defaults here are
/// the documented defaults of every config key.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub poly_power: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub alpha: f32,
    pub lambda_mode: LambdaSetting,
    pub no_afm: bool,
    pub sge_levels: usize,
    pub seed: u64,
    /// Seeds for multi-seed suites; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub train_size: usize,
    pub val_size: usize,
    pub stage_channels: [usize; 4],
    pub texture_channels: [usize; 4],
    /// Color/brightness/contrast augmentations (default off).
    pub color_aug: bool,
    pub solver_tol: f64,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            iterations: 3000,
            batch_size: 2,
            lr: 2.5e-4,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 2.5,
            lambda_mode: LambdaSetting::Adaptive,
            no_afm: false,
            sge_levels: 4,
            seed: 0,
            seeds: Vec::new(),
            train_size: 128,
            val_size: 32,
            stage_channels: [16, 32, 64, 128],
            texture_channels: [4, 8, 16, 32],
            color_aug: false,
            solver_tol: crate::filter::DEFAULT_TOL,
            checkpoint_every: 500,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::format("config", format!("bad element {:?} in {key}", p.trim())))
        })
        .collect()
}

fn parse_quad(v: &str, key: &str) -> Result<[usize; 4]> {
    let list: Vec<usize> = parse_list(v, key)?;
    if list.len() != 4 {
        return Err(Error::format("config", format!("{key} needs exactly 4 entries, got {}", list.len())));
    }
    Ok([list[0], list[1], list[2], list[3]])
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image_size" => self.image_size = num(v, key)?,
            "num_classes" => self.num_classes = num(v, key)?,
            "iterations" => self.iterations = num(v, key)?,
            "batch_size" => self.batch_size = num(v, key)?,
            "lr" => self.lr = num(v, key)?,
            "poly_power" => self.poly_power = num(v, key)?,
            "momentum" => self.momentum = num(v, key)?,
            "weight_decay" => self.weight_decay = num(v, key)?,
            "alpha" => self.alpha = num(v, key)?,
            "lambda_mode" => self.lambda_mode = LambdaSetting::parse(v)?,
            "no_afm" => self.no_afm = boolean(v, key)?,
            "sge_levels" => self.sge_levels = num(v, key)?,
            "seed" => self.seed = num(v, key)?,
            "seeds" => self.seeds = parse_list(v, key)?,
            "train_size" => self.train_size = num(v, key)?,
            "val_size" => self.val_size = num(v, key)?,
            "stage_channels" => self.stage_channels = parse_quad(v, key)?,
            "texture_channels" => self.texture_channels = parse_quad(v, key)?,
            "color_aug" => self.color_aug = boolean(v, key)?,
            "solver_tol" => self.solver_tol = num(v, key)?,
            "checkpoint_every" => self.checkpoint_every = num(v, key)?,
            other => {
                return Err(Error::format("config", format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    "config",
                    format!("line {}: expected 'key = value', got {raw:?}", lineno + 1),
                ));
            };
            cfg.set(key.trim(), value)
                .map_err(|e| Error::format("config", format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 16 != 0 || self.image_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if !(2..=250).contains(&self.num_classes) {
            return Err(Error::InvalidArgument(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.batch_size == 0 || self.train_size == 0 || self.val_size == 0 {
            return Err(Error::InvalidArgument("sizes must be positive".into()));
        }
        if !(1..=4).contains(&self.sge_levels) {
            return Err(Error::InvalidArgument(format!("sge_levels {} out of 1..=4", self.sge_levels)));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidArgument("alpha must be >= 0".into()));
        }
        Ok(())
    }

    /// The seeds a suite runs over.
    pub fn effective_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// λ mode for the pipeline, folding in the `no_afm` ablation flag.
    pub fn pipeline_mode(&self) -> LambdaMode {
        if self.no_afm {
            LambdaMode::NoAfm
        } else {
            match self.lambda_mode {
                LambdaSetting::Adaptive => LambdaMode::Adaptive,
                LambdaSetting::Fixed(v) => LambdaMode::Fixed(v),
            }
        }
    }

    pub fn backbone(&self) -> crate::hggn::BackboneConfig {
        crate::hggn::BackboneConfig {
            stage_channels: self.stage_channels,
            texture_channels: self.texture_channels,
            num_classes: self.num_classes,
            sge_levels: self.sge_levels,
        }
    }

    /// `# key=value` header lines stamped into every result CSV.
    pub fn header_lines(&self, seed: u64) -> Vec<String> {
        vec![
            format!("# generator_version={}", crate::scene::GENERATOR_VERSION),
            format!("# seed={seed}"),
            format!("# image_size={}", self.image_size),
            format!("# num_classes={}", self.num_classes),
            format!("# iterations={}", self.iterations),
            format!("# batch_size={}", self.batch_size),
            format!("# lr={}", self.lr),
            format!("# poly_power={}", self.poly_power),
            format!("# momentum={}", self.momentum),
            format!("# weight_decay={}", self.weight_decay),
            format!("# alpha={}", self.alpha),
            format!("# lambda_mode={}", self.lambda_mode),
            format!("# no_afm={}", self.no_afm),
            format!("# sge_levels={}", self.sge_levels),
            format!("# train_size={}", self.train_size),
            format!("# val_size={}", self.val_size),
            format!(
                "# stage_channels={}",
                self.stage_channels.map(|c| c.to_string()).join(",")
            ),
            format!(
                "# texture_channels={}",
                self.texture_channels.map(|c| c.to_string()).join(",")
            ),
            format!("# color_aug={}", self.color_aug),
            format!("# solver_tol={}", self.solver_tol),
        ]
    }
}

fn num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::format("config", format!("bad value {v:?} for {key}")))
}

fn boolean(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::format("config", format!("bad boolean {v:?} for {key}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "
# a comment
iterations = 50
alpha = 1.5   # trailing comment
lambda_mode = fixed:2
seeds = 1, 2, 3
";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.iterations, 50);
        assert_eq!(cfg.alpha, 1.5);
        assert_eq!(cfg.lambda_mode, LambdaSetting::Fixed(2.0));
        assert_eq!(cfg.effective_seeds(), vec![1, 2, 3]);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::parse_str("iterat = 5").is_err());
    }

    #[test]
    fn lambda_mode_strings() {
        assert_eq!(LambdaSetting::parse("adaptive").unwrap(), LambdaSetting::Adaptive);
        assert_eq!(LambdaSetting::parse("fixed:1.5").unwrap(), LambdaSetting::Fixed(1.5));
        assert!(LambdaSetting::parse("fixed:-1").is_err());
        assert!(LambdaSetting::parse("???").is_err());
    }

    #[test]
    fn bad_image_size_rejected() {
        let mut cfg = RunConfig::default();
        cfg.image_size = 50;
        assert!(cfg.validate().is_err());
    }
}
