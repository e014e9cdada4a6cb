//! Effective settings: command-line flags over the TOML config file over
//! built-in defaults. `COEFORGE_ENCODER` beats every other encoder source.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use coeforge::rewards::Ablation;
use coeforge::{RewardConfig, RewardWeights};
use serde::Deserialize;

pub const ENCODER_ENV: &str = "COEFORGE_ENCODER";
pub const DEFAULT_ENCODER: &str = "mock:256";
pub const DEFAULT_SEED: u64 = 3407;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardFile {
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
    pub iou_at: Option<f64>,
    pub weights: Option<RewardWeights>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub encoder: Option<String>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
    pub ablate: Option<String>,
    pub strict_answer_in_chain: Option<bool>,
    #[serde(default)]
    pub reward: RewardFile,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Threshold and scoring flags shared by the scoring commands.
#[derive(Debug, Clone, Default, Args)]
pub struct RewardArgs {
    /// Minimum step cosine for stepwise attribution [default: 0.3]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Maximum pairwise IoU among step boxes [default: 0.5]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Accuracy gate for the step reward [default: 0.4]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Cold-start recall threshold [default: 0.8]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Grounding IoU threshold, strict [default: 0.5]
    #[arg(long = "iou-at")]
    pub iou_at: Option<f64>,
}

impl RewardArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<RewardConfig> {
        let d = RewardConfig::default();
        let f = &file.reward;
        let cfg = RewardConfig {
            tau: self.tau.or(f.tau).unwrap_or(d.tau),
            delta: self.delta.or(f.delta).unwrap_or(d.delta),
            epsilon: self.epsilon.or(f.epsilon).unwrap_or(d.epsilon),
            gamma: self.gamma.or(f.gamma).unwrap_or(d.gamma),
            iou_at: self.iou_at.or(f.iou_at).unwrap_or(d.iou_at),
            weights: f.weights.unwrap_or(d.weights),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn resolve_encoder(flag: Option<&str>, file: &FileConfig) -> String {
    std::env::var(ENCODER_ENV)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .or_else(|| flag.map(str::to_owned))
        .or_else(|| file.encoder.clone())
        .unwrap_or_else(|| DEFAULT_ENCODER.to_owned())
}

pub fn resolve_ablation(flag: Option<&str>, file: &FileConfig) -> Result<Ablation> {
    Ok(flag.or(file.ablate.as_deref()).unwrap_or("").parse()?)
}

pub fn resolve_concurrency(flag: Option<usize>, file: &FileConfig) -> Result<usize> {
    let n = flag
        .or(file.concurrency)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(4, usize::from));
    if n == 0 {
        bail!("concurrency must be at least 1");
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderSpec {
    Mock(usize),
    Remote(String),
}

impl EncoderSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(d) = s.strip_prefix("mock:") {
            let dim = d
                .parse()
                .with_context(|| format!("bad mock encoder dimension in {s:?}"))?;
            return Ok(Self::Mock(dim));
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Self::Remote(s.to_owned()));
        }
        bail!("encoder must be an http(s) URL or mock:<dim>, got {s:?}")
    }
}
