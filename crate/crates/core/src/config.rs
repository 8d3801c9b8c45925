//! Flat key=value run configuration with a canonical resolved dump. The
//! dump is itself a valid config file and its hash names the run
//! directory, so every run is reproducible from its artifacts alone.

use crate::error::{Result, SgaError};
use crate::flow::AlignmentMode;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub n_images: usize,
    pub run_root: String,
    pub eval_every: usize,
    pub checkpoint_every: usize,

    pub vae_f: usize,
    pub vae_c: usize,
    pub vae_width: usize,
    pub vae_lambda_m: f64,
    pub vae_lambda_s: f64,
    pub vae_lambda_lpips: f64,
    pub vae_lambda_adv: f64,
    pub vae_lr: f64,
    pub vae_steps: usize,

    pub diff_lambda_s: f64,
    pub diff_alignment_mode: AlignmentMode,
    pub diff_tap_index: usize,
    pub diff_width: usize,
    pub diff_blocks: usize,
    pub diff_embed_dim: usize,
    pub diff_lr: f64,
    pub diff_steps: usize,
    pub diff_sampler_steps: usize,
    pub diff_guidance_scale: f64,

    pub prior_seed: u64,
    pub prior_c_f: usize,
    pub prior_patch_budget: usize,
}

pub const VALID_KEYS: &[&str] = &[
    "seed",
    "image_size",
    "batch_size",
    "n_images",
    "run_root",
    "eval_every",
    "checkpoint_every",
    "vae.f",
    "vae.c",
    "vae.width",
    "vae.lambda_m",
    "vae.lambda_s",
    "vae.lambda_lpips",
    "vae.lambda_adv",
    "vae.lr",
    "vae.steps",
    "diffusion.lambda_s",
    "diffusion.alignment_mode",
    "diffusion.tap_index",
    "diffusion.width",
    "diffusion.blocks",
    "diffusion.embed_dim",
    "diffusion.lr",
    "diffusion.steps",
    "diffusion.sampler_steps",
    "diffusion.guidance_scale",
    "prior.seed",
    "prior.c_f",
    "prior.patch_budget",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 64,
            batch_size: 16,
            n_images: 512,
            run_root: "runs".to_string(),
            eval_every: 100,
            checkpoint_every: 500,
            vae_f: 4,
            vae_c: 4,
            vae_width: 16,
            vae_lambda_m: 1.0,
            vae_lambda_s: 1.0,
            vae_lambda_lpips: 0.1,
            vae_lambda_adv: 0.05,
            vae_lr: 1e-4,
            vae_steps: 5000,
            diff_lambda_s: 1.0,
            diff_alignment_mode: AlignmentMode::Sga,
            diff_tap_index: 3,
            diff_width: 64,
            diff_blocks: 6,
            diff_embed_dim: 16,
            diff_lr: 1e-6,
            diff_steps: 5000,
            diff_sampler_steps: 50,
            diff_guidance_scale: 7.0,
            prior_seed: 7777,
            prior_c_f: 16,
            prior_patch_budget: 4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| SgaError::config(format!("cannot parse `{value}` for key `{key}`")))
}

pub fn mode_name(mode: AlignmentMode) -> &'static str {
    match mode {
        AlignmentMode::None => "none",
        AlignmentMode::Sga => "sga",
        AlignmentMode::Patchwise => "patchwise",
    }
}

pub fn parse_mode(value: &str) -> Result<AlignmentMode> {
    match value {
        "none" => Ok(AlignmentMode::None),
        "sga" => Ok(AlignmentMode::Sga),
        "patchwise" => Ok(AlignmentMode::Patchwise),
        other => Err(SgaError::config(format!(
            "alignment_mode `{other}` not one of none|sga|patchwise"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "n_images" => self.n_images = parse_num(key, value)?,
            "run_root" => self.run_root = value.to_string(),
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "vae.f" => self.vae_f = parse_num(key, value)?,
            "vae.c" => self.vae_c = parse_num(key, value)?,
            "vae.width" => self.vae_width = parse_num(key, value)?,
            "vae.lambda_m" => self.vae_lambda_m = parse_num(key, value)?,
            "vae.lambda_s" => self.vae_lambda_s = parse_num(key, value)?,
            "vae.lambda_lpips" => self.vae_lambda_lpips = parse_num(key, value)?,
            "vae.lambda_adv" => self.vae_lambda_adv = parse_num(key, value)?,
            "vae.lr" => self.vae_lr = parse_num(key, value)?,
            "vae.steps" => self.vae_steps = parse_num(key, value)?,
            "diffusion.lambda_s" => self.diff_lambda_s = parse_num(key, value)?,
            "diffusion.alignment_mode" => self.diff_alignment_mode = parse_mode(value)?,
            "diffusion.tap_index" => self.diff_tap_index = parse_num(key, value)?,
            "diffusion.width" => self.diff_width = parse_num(key, value)?,
            "diffusion.blocks" => self.diff_blocks = parse_num(key, value)?,
            "diffusion.embed_dim" => self.diff_embed_dim = parse_num(key, value)?,
            "diffusion.lr" => self.diff_lr = parse_num(key, value)?,
            "diffusion.steps" => self.diff_steps = parse_num(key, value)?,
            "diffusion.sampler_steps" => self.diff_sampler_steps = parse_num(key, value)?,
            "diffusion.guidance_scale" => self.diff_guidance_scale = parse_num(key, value)?,
            "prior.seed" => self.prior_seed = parse_num(key, value)?,
            "prior.c_f" => self.prior_c_f = parse_num(key, value)?,
            "prior.patch_budget" => self.prior_patch_budget = parse_num(key, value)?,
            other => {
                return Err(SgaError::config(format!(
                    "unknown config key `{other}`; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a full-line comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SgaError::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Canonical dump: every key in declaration order, one per line.
    /// Feeding it back through `apply_text` reproduces the config exactly.
    pub fn resolved_dump(&self) -> String {
        let mut out = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_images", self.n_images.to_string()),
            ("run_root", self.run_root.clone()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("vae.f", self.vae_f.to_string()),
            ("vae.c", self.vae_c.to_string()),
            ("vae.width", self.vae_width.to_string()),
            ("vae.lambda_m", format_f64(self.vae_lambda_m)),
            ("vae.lambda_s", format_f64(self.vae_lambda_s)),
            ("vae.lambda_lpips", format_f64(self.vae_lambda_lpips)),
            ("vae.lambda_adv", format_f64(self.vae_lambda_adv)),
            ("vae.lr", format_f64(self.vae_lr)),
            ("vae.steps", self.vae_steps.to_string()),
            ("diffusion.lambda_s", format_f64(self.diff_lambda_s)),
            (
                "diffusion.alignment_mode",
                mode_name(self.diff_alignment_mode).to_string(),
            ),
            ("diffusion.tap_index", self.diff_tap_index.to_string()),
            ("diffusion.width", self.diff_width.to_string()),
            ("diffusion.blocks", self.diff_blocks.to_string()),
            ("diffusion.embed_dim", self.diff_embed_dim.to_string()),
            ("diffusion.lr", format_f64(self.diff_lr)),
            ("diffusion.steps", self.diff_steps.to_string()),
            ("diffusion.sampler_steps", self.diff_sampler_steps.to_string()),
            (
                "diffusion.guidance_scale",
                format_f64(self.diff_guidance_scale),
            ),
            ("prior.seed", self.prior_seed.to_string()),
            ("prior.c_f", self.prior_c_f.to_string()),
            ("prior.patch_budget", self.prior_patch_budget.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of the resolved dump.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_dump().as_bytes());
        let mut hex = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }

    pub fn validate(&self) -> Result<()> {
        if self.vae_f != 4 && self.vae_f != 8 {
            return Err(SgaError::config("vae.f must be 4 or 8"));
        }
        if self.image_size % 16 != 0 {
            return Err(SgaError::config("image_size must be divisible by 16"));
        }
        if self.diff_tap_index >= self.diff_blocks {
            return Err(SgaError::config(
                "diffusion.tap_index must be below diffusion.blocks",
            ));
        }
        if self.diff_embed_dim % 2 != 0 {
            return Err(SgaError::config("diffusion.embed_dim must be even"));
        }
        if self.batch_size == 0 || self.n_images == 0 {
            return Err(SgaError::config("batch_size and n_images must be positive"));
        }
        if self.prior_patch_budget > self.image_size / 16 {
            return Err(SgaError::config(
                "prior.patch_budget exceeds the prior's output grid",
            ));
        }
        Ok(())
    }
}

fn format_f64(v: f64) -> String {
    // shortest representation that round-trips
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}
