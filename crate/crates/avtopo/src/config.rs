//! Flat `key = value` run-configuration files for the training CLI.
//!
//! One assignment per line, `#` starts a comment, unknown keys are
//! rejected so a typo cannot silently fall back to a default. A frozen
//! copy of the effective configuration is rendered back out into the run
//! directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{Ablation, TrainConfig};

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
}

/// Parses a configuration document on top of the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seed" => cfg.seed = parse_num(key, value)?,
            "ablation" => cfg.ablation = value.parse::<Ablation>()?,
            "max_iters" => cfg.max_iters = parse_num(key, value)?,
            "batch" => cfg.batch = parse_num(key, value)?,
            "patch" => cfg.patch = parse_num(key, value)?,
            "lr0" => cfg.lr0 = parse_num(key, value)?,
            "lr_half_every" => cfg.lr_half_every = parse_num(key, value)?,
            "ckpt_every" => cfg.ckpt_every = parse_num(key, value)?,
            "lambda1" => cfg.lambda1 = parse_num(key, value)?,
            "lambda2" => cfg.lambda2 = parse_num(key, value)?,
            "mu_vessel" => cfg.mu.0 = parse_num(key, value)?,
            "mu_artery" => cfg.mu.1 = parse_num(key, value)?,
            "mu_vein" => cfg.mu.2 = parse_num(key, value)?,
            "gen_stages" => cfg.gen.encoder_stages = parse_num(key, value)?,
            "gen_base_width" => cfg.gen.base_width = parse_num(key, value)?,
            "gen_pretrained" => cfg.gen.pretrained = Some(PathBuf::from(value)),
            "disc_base_width" => cfg.disc.base_width = parse_num(key, value)?,
            "triplet_margin" => cfg.triplet.margin = parse_num(key, value)?,
            "triplet_levels" => cfg.triplet.num_levels = parse_num(key, value)?,
            "triplet_width" => cfg.triplet.extractor_width = parse_num(key, value)?,
            "triplet_pretrained" => cfg.triplet.pretrained = Some(PathBuf::from(value)),
            "shuffle_budget_low" => cfg.shuffle.budget_low = parse_num(key, value)?,
            "shuffle_budget_high" => cfg.shuffle.budget_high = parse_num(key, value)?,
            "shuffle_max_ops" => cfg.shuffle.max_ops = parse_num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config(&text)
}

/// Renders the effective configuration back into the document format, so
/// a run directory carries a frozen, re-parsable copy.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    push("seed", cfg.seed.to_string());
    push("ablation", cfg.ablation.to_string());
    push("max_iters", cfg.max_iters.to_string());
    push("batch", cfg.batch.to_string());
    push("patch", cfg.patch.to_string());
    push("lr0", cfg.lr0.to_string());
    push("lr_half_every", cfg.lr_half_every.to_string());
    push("ckpt_every", cfg.ckpt_every.to_string());
    push("lambda1", cfg.lambda1.to_string());
    push("lambda2", cfg.lambda2.to_string());
    push("mu_vessel", cfg.mu.0.to_string());
    push("mu_artery", cfg.mu.1.to_string());
    push("mu_vein", cfg.mu.2.to_string());
    push("gen_stages", cfg.gen.encoder_stages.to_string());
    push("gen_base_width", cfg.gen.base_width.to_string());
    if let Some(p) = &cfg.gen.pretrained {
        push("gen_pretrained", p.display().to_string());
    }
    push("disc_base_width", cfg.disc.base_width.to_string());
    push("triplet_margin", cfg.triplet.margin.to_string());
    push("triplet_levels", cfg.triplet.num_levels.to_string());
    push("triplet_width", cfg.triplet.extractor_width.to_string());
    if let Some(p) = &cfg.triplet.pretrained {
        push("triplet_pretrained", p.display().to_string());
    }
    push("shuffle_budget_low", cfg.shuffle.budget_low.to_string());
    push("shuffle_budget_high", cfg.shuffle.budget_high.to_string());
    push("shuffle_max_ops", cfg.shuffle.max_ops.to_string());
    out
}
