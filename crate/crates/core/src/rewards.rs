//! The four trajectory rewards and their sum.
//!
//! * accuracy: mean of the soft exact-match bit and word recall;
//! * stepwise attribution: two indicators (every step crop agrees with its
//!   step text, step boxes do not pile onto each other), gated on accuracy;
//! * grounding: the answer box hits the gold box on the gold page;
//! * format: +1 for a well-formed response, -1 otherwise.
//!
//! A malformed response scores -1 in total; nothing else about it is trusted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, normalize_vector, EmbeddingVector, EvidenceEncoder};
use crate::error::{Error, Result};
use crate::geometry::{clamp_to_page, iou, max_pairwise_iou_refs};
use crate::parser::{extract_pairs, parse_response_with, ParseOptions};
use crate::textmatch::{is_no_answer, recall, soft_em};
use crate::types::{
    resolve_page, CoETrajectory, GroundTruthRecord, PageRef, RewardBreakdown, RewardConfig,
    StepScore,
};

pub fn accuracy_reward(a: &str, a_gt: &str) -> Result<f64> {
    let r = recall(a, a_gt)?;
    Ok((f64::from(soft_em(a, a_gt)) + r) / 2.0)
}

/// Inputs to the stepwise reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAlignment {
    /// Minimum pair cosine; `None` when the chain cites no evidence.
    pub s_min: Option<f64>,
    /// Maximum pairwise IoU among step boxes, 0 with fewer than two.
    pub i_max: f64,
    pub per_step: Vec<StepScore>,
    /// Number of step boxes.
    pub k: usize,
}

fn embed_or_zero(v: Result<Vec<f64>>) -> Result<Option<EmbeddingVector>> {
    match v.and_then(|raw| normalize_vector(&raw)) {
        Ok(e) => Ok(Some(e)),
        Err(Error::ZeroVector) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores every context-evidence pair of the chain.
///
/// A crop that falls entirely off its page, or an encoder output that is the
/// zero vector, scores cosine 0 for that pair.
pub fn step_alignment<E: EvidenceEncoder + ?Sized>(
    t: &CoETrajectory,
    pages: &[PageRef],
    enc: &E,
) -> Result<StepAlignment> {
    let pairs = extract_pairs(t);
    let mut per_step = Vec::with_capacity(pairs.len());
    let mut text_cache: Option<(usize, Option<EmbeddingVector>)> = None;
    for pair in &pairs {
        let page = resolve_page(pages, pair.evidence.page_index)?;
        let text_vec = match &text_cache {
            Some((step, v)) if *step == pair.step => v.clone(),
            _ => {
                let v = embed_or_zero(enc.embed_text(pair.text))?;
                text_cache = Some((pair.step, v.clone()));
                v
            }
        };
        let region = match clamp_to_page(&pair.evidence.bbox, page) {
            Ok(r) => Some(r),
            Err(Error::EmptyAfterClamp { .. }) => None,
            Err(e) => return Err(e),
        };
        let crop_vec = match region {
            Some(r) => embed_or_zero(enc.embed_region(&r))?,
            None => None,
        };
        let c = match (&text_vec, &crop_vec) {
            (Some(a), Some(b)) => cosine(b, a)?,
            _ => 0.0,
        };
        per_step.push(StepScore {
            step: pair.step,
            cosine: c,
        });
    }
    let refs: Vec<_> = pairs.iter().map(|p| p.evidence).collect();
    Ok(StepAlignment {
        s_min: per_step.iter().map(|s| s.cosine).reduce(f64::min),
        i_max: max_pairwise_iou_refs(&refs),
        per_step,
        k: refs.len(),
    })
}

/// `((1[S >= tau] + 1[I <= delta]) / 2) * 1[r_acc >= epsilon]`; a missing `S`
/// fails the first indicator.
pub fn stepwise_reward(s: Option<f64>, i: f64, r_acc: f64, cfg: &RewardConfig) -> f64 {
    if r_acc < cfg.epsilon {
        return 0.0;
    }
    let aligned = s.is_some_and(|s| s >= cfg.tau);
    let spread = i <= cfg.delta;
    (f64::from(u8::from(aligned)) + f64::from(u8::from(spread))) / 2.0
}

pub fn grounding_reward(t: &CoETrajectory, gt: &GroundTruthRecord, cfg: &RewardConfig) -> f64 {
    let hit = match (gt.gold_box(), gt.gold_page_index()) {
        (Some(gold), Some(gold_page)) => t
            .answer_evidence
            .is_some_and(|ev| ev.page_index == gold_page && iou(&ev.bbox, gold) > cfg.iou_at),
        _ => is_no_answer(&t.answer_text),
    };
    f64::from(u8::from(hit))
}

pub fn format_reward(t: &CoETrajectory) -> f64 {
    if t.format_ok {
        1.0
    } else {
        -1.0
    }
}

/// Reward components forced to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub acc: bool,
    pub step: bool,
    pub ground: bool,
    pub format: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        acc: false,
        step: false,
        ground: false,
        format: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    pub fn apply(&self, b: &mut RewardBreakdown, cfg: &RewardConfig) {
        if self.acc {
            b.r_acc = 0.0;
        }
        if self.step {
            b.r_step = 0.0;
        }
        if self.ground {
            b.r_ground = 0.0;
        }
        if self.format {
            b.r_format = 0.0;
        }
        b.retotal(&cfg.weights);
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma list drawn from `acc`, `step`, `ground`, `format`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Ablation::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "acc" => out.acc = true,
                "step" => out.step = true,
                "ground" => out.ground = true,
                "format" => out.format = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown reward component {other:?} (expected acc, step, ground or format)"
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.acc, "acc"),
            (self.step, "step"),
            (self.ground, "ground"),
            (self.format, "format"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

/// Scores a parsed trajectory against its record.
pub fn score_trajectory<E: EvidenceEncoder + ?Sized>(
    t: &CoETrajectory,
    gt: &GroundTruthRecord,
    enc: &E,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    if !t.format_ok {
        return Ok(RewardBreakdown::new(0.0, 0.0, 0.0, -1.0, &cfg.weights));
    }
    let r_acc = accuracy_reward(&t.answer_text, gt.gold_answer())?;
    let align = step_alignment(t, gt.pages(), enc)?;
    let r_step = stepwise_reward(align.s_min, align.i_max, r_acc, cfg);
    let r_ground = grounding_reward(t, gt, cfg);
    let mut b = RewardBreakdown::new(r_acc, r_step, r_ground, format_reward(t), &cfg.weights);
    b.s_min = align.s_min;
    b.i_max = (align.k >= 2).then_some(align.i_max);
    b.per_step_scores = align.per_step;
    Ok(b)
}

/// Parses `raw` and scores it with default parse options.
pub fn total_reward<E: EvidenceEncoder + ?Sized>(
    raw: &str,
    gt: &GroundTruthRecord,
    enc: &E,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    RewardEngine::new(*cfg).score(raw, gt, enc)
}

/// Bundles the knobs that apply to every sample of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardEngine {
    pub cfg: RewardConfig,
    pub parse: ParseOptions,
    pub ablation: Ablation,
}

impl RewardEngine {
    pub fn new(cfg: RewardConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    pub fn with_parse_options(mut self, parse: ParseOptions) -> Self {
        self.parse = parse;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn score<E: EvidenceEncoder + ?Sized>(
        &self,
        raw: &str,
        gt: &GroundTruthRecord,
        enc: &E,
    ) -> Result<RewardBreakdown> {
        let parsed = parse_response_with(raw, self.parse);
        let mut b = score_trajectory(&parsed.trajectory, gt, enc, &self.cfg)?;
        if !self.ablation.is_empty() {
            self.ablation.apply(&mut b, &self.cfg);
        }
        Ok(b)
    }
}
