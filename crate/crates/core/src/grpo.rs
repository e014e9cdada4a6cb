//! Group-relative advantages and a template-policy training simulator.
//!
//! The simulator replaces the language model with a categorical policy over a
//! fixed set of trajectory templates drawn in a synthetic two-page world.
//! Each iteration samples a group, scores every rollout with the full reward,
//! and takes a policy-gradient step weighted by group-normalized advantages.
//! KL and clipping terms are left out.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{LayoutEncoder, PageLayout, TextRegion};
use crate::error::{Error, Result};
use crate::parser::serialize_trajectory;
use crate::rewards::{Ablation, RewardEngine};
use crate::types::{
    BoundingBox, CoETrajectory, EvidenceRef, GroundTruthRecord, PageRef, ReasoningStep,
    RewardBreakdown, RewardConfig,
};

const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub advantages: Vec<f64>,
}

/// `(r_i - mean) / std_pop`, or all zeros for a (numerically) constant group.
pub fn group_advantage(rewards: &[f64]) -> Result<GroupAdvantage> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let advantages = if std < STD_FLOOR {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(GroupAdvantage { advantages })
}

/// Softmax policy over templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePolicy {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl TemplatePolicy {
    pub fn uniform(n: usize, temperature: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig(
                "policy needs at least one template".into(),
            ));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {temperature} must be positive"
            )));
        }
        Ok(Self {
            logits: vec![0.0; n],
            temperature,
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let scaled: Vec<f64> = self.logits.iter().map(|l| l / self.temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let probs = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Index of the most probable template; ties go to the lower index.
    pub fn modal(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Adds `lr / G * Σ a_i ∇ log p(t_i)`; `∇_j log p(t) = (1[j = t] - p_j) / T`.
    pub fn step(&mut self, sampled: &[usize], advantages: &[f64], lr: f64) {
        let probs = self.probabilities();
        let g = sampled.len() as f64;
        let mut grad = vec![0.0; self.logits.len()];
        for (&t, &a) in sampled.iter().zip(advantages) {
            for (j, gj) in grad.iter_mut().enumerate() {
                let onehot = if j == t { 1.0 } else { 0.0 };
                *gj += a * (onehot - probs[j]) / self.temperature;
            }
        }
        for (l, gj) in self.logits.iter_mut().zip(grad) {
            *l += lr * gj / g;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    GroundedCorrect,
    UngroundedCorrect,
    DuplicatedBox,
    Misattributed,
    WrongAnswer,
    Malformed,
}

/// A response blueprint. `drop_tag`, when set, is deleted from the rendered
/// text to produce a malformed response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub steps: Vec<ReasoningStep>,
    pub answer_text: String,
    pub answer_evidence: EvidenceRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_tag: Option<String>,
}

impl TrajectoryTemplate {
    pub fn render(&self) -> Result<String> {
        let t = CoETrajectory {
            steps: self.steps.clone(),
            answer_text: self.answer_text.clone(),
            answer_evidence: Some(self.answer_evidence),
            raw: String::new(),
            format_ok: true,
            answer_evidence_in_chain: false,
        };
        let text = serialize_trajectory(&t)?;
        Ok(match &self.drop_tag {
            Some(tag) => text.replacen(tag.as_str(), "", 1),
            None => text,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPage {
    pub page: PageRef,
    pub layout: PageLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: String,
    pub question: String,
    pub gold_answer: String,
    pub pos_idx: i64,
    pub gold_box: BoundingBox,
}

/// Synthetic document, one query, and the template set the policy picks from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub mock_dim: usize,
    pub pages: Vec<SyntheticPage>,
    pub query: SyntheticQuery,
    pub templates: Vec<TrajectoryTemplate>,
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).expect("static box")
}

const REGIONS_P1: [([f64; 4], &str); 4] = [
    (
        [40.0, 30.0, 560.0, 90.0],
        "Table 2 reports melting and boiling measurements for compound X",
    ),
    (
        [40.0, 120.0, 560.0, 180.0],
        "The measured boiling point of compound X is 97 degrees",
    ),
    (
        [40.0, 210.0, 560.0, 270.0],
        "The melting point of compound X is 12 degrees",
    ),
    (
        [40.0, 300.0, 560.0, 360.0],
        "Samples were prepared at room temperature",
    ),
];

const REGIONS_P2: [([f64; 4], &str); 2] = [
    (
        [40.0, 30.0, 560.0, 90.0],
        "Related work on solvent mixtures and vapor pressure",
    ),
    (
        [40.0, 120.0, 560.0, 180.0],
        "Appendix tables list instrument calibration settings",
    ),
];

fn layout(page_id: &str, regions: &[([f64; 4], &str)]) -> PageLayout {
    PageLayout {
        page_id: page_id.into(),
        regions: regions
            .iter()
            .map(|(c, t)| TextRegion {
                bbox: bx(c[0], c[1], c[2], c[3]),
                text: (*t).into(),
            })
            .collect(),
    }
}

impl Default for SyntheticWorld {
    /// Two 600x400 pages. The gold fact sits in region B of page 1.
    fn default() -> Self {
        let page =
            |id: &str| PageRef::new(id, format!("pages/{id}.png"), 600, 400).expect("static page");
        let region = |p: u32, c: [f64; 4]| EvidenceRef::new(p, bx(c[0], c[1], c[2], c[3]));
        let [a, b, c, d] = REGIONS_P1;
        let [_, f] = REGIONS_P2;
        let ev_a = region(1, a.0);
        let ev_b = region(1, b.0);
        let ev_c = region(1, c.0);
        let ev_d = region(1, d.0);
        let ev_f = region(2, f.0);
        let merged = region(1, [40.0, 30.0, 560.0, 180.0]);
        let step = |text: &str, ev: Vec<EvidenceRef>| ReasoningStep::new(text, ev);
        let conclusion = "So the boiling point of compound X is 97 degrees";
        let template = |name: &str, kind, steps, answer: &str, ev| TrajectoryTemplate {
            name: name.into(),
            kind,
            steps,
            answer_text: answer.into(),
            answer_evidence: ev,
            drop_tag: None,
        };
        let grounded = vec![
            step(a.1, vec![ev_a]),
            step(b.1, vec![ev_b]),
            step(conclusion, vec![]),
        ];
        let mut malformed = template(
            "malformed",
            TemplateKind::Malformed,
            grounded.clone(),
            "97 degrees",
            ev_b,
        );
        malformed.drop_tag = Some("</think>".into());
        Self {
            mock_dim: 256,
            pages: vec![
                SyntheticPage {
                    page: page("synth-p1"),
                    layout: layout("synth-p1", &REGIONS_P1),
                },
                SyntheticPage {
                    page: page("synth-p2"),
                    layout: layout("synth-p2", &REGIONS_P2),
                },
            ],
            query: SyntheticQuery {
                query_id: "synth-q1".into(),
                question: "What is the boiling point of compound X?".into(),
                gold_answer: "97 degrees".into(),
                pos_idx: 0,
                gold_box: ev_b.bbox,
            },
            templates: vec![
                template(
                    "grounded-correct",
                    TemplateKind::GroundedCorrect,
                    grounded,
                    "97 degrees",
                    ev_b,
                ),
                template(
                    "ungrounded-correct",
                    TemplateKind::UngroundedCorrect,
                    vec![
                        step(
                            "The document states the boiling point of compound X",
                            vec![],
                        ),
                        step(conclusion, vec![]),
                    ],
                    "97 degrees",
                    ev_b,
                ),
                template(
                    "duplicated-box",
                    TemplateKind::DuplicatedBox,
                    vec![
                        step(a.1, vec![merged]),
                        step(b.1, vec![merged]),
                        step(conclusion, vec![]),
                    ],
                    "97 degrees",
                    merged,
                ),
                template(
                    "misattributed",
                    TemplateKind::Misattributed,
                    vec![
                        step(b.1, vec![ev_d]),
                        step(a.1, vec![ev_f]),
                        step(conclusion, vec![]),
                    ],
                    "97 degrees",
                    ev_d,
                ),
                template(
                    "wrong-answer",
                    TemplateKind::WrongAnswer,
                    vec![
                        step(a.1, vec![ev_a]),
                        step(c.1, vec![ev_c]),
                        step("So the answer is 12 degrees", vec![]),
                    ],
                    "12 degrees",
                    ev_c,
                ),
                malformed,
            ],
        }
    }
}

impl SyntheticWorld {
    pub fn record(&self) -> Result<GroundTruthRecord> {
        GroundTruthRecord::new(
            self.query.query_id.clone(),
            self.query.question.clone(),
            self.query.gold_answer.clone(),
            None,
            Some(self.query.gold_box),
            self.pages.iter().map(|p| p.page.clone()).collect(),
            self.query.pos_idx,
        )
    }

    pub fn encoder(&self) -> Result<LayoutEncoder> {
        LayoutEncoder::new(self.mock_dim, self.pages.iter().map(|p| p.layout.clone()))
    }

    /// Scores every template once under the full reward.
    pub fn score_templates(&self, cfg: &RewardConfig) -> Result<Vec<RewardBreakdown>> {
        let gt = self.record()?;
        let enc = self.encoder()?;
        let engine = RewardEngine::new(*cfg);
        self.templates
            .iter()
            .map(|t| engine.score(&t.render()?, &gt, &enc))
            .collect()
    }

    /// Exactly one template reaches the maximum total of 4, and it is the
    /// grounded-correct one.
    pub fn validate(&self, cfg: &RewardConfig) -> Result<()> {
        let scores = self.score_templates(cfg)?;
        let winners: Vec<&TrajectoryTemplate> = self
            .templates
            .iter()
            .zip(&scores)
            .filter(|(_, s)| s.total == 4.0)
            .map(|(t, _)| t)
            .collect();
        match winners.as_slice() {
            [t] if t.kind == TemplateKind::GroundedCorrect => Ok(()),
            _ => Err(Error::InvalidConfig(format!(
                "world must have exactly one grounded-correct template scoring 4, found {:?}",
                winners.iter().map(|t| &t.name).collect::<Vec<_>>()
            ))),
        }
    }

    /// White page with each text region drawn as a tinted block.
    pub fn render_page(&self, idx: usize) -> RgbImage {
        let sp = &self.pages[idx];
        let mut img = RgbImage::from_pixel(sp.page.width, sp.page.height, Rgb([255, 255, 255]));
        for (r, region) in sp.layout.regions.iter().enumerate() {
            let shade = 40 + (r as u8).wrapping_mul(37) % 160;
            let (x0, y0) = (region.bbox.x1() as u32, region.bbox.y1() as u32);
            let (x1, y1) = (
                region.bbox.x2().ceil() as u32,
                region.bbox.y2().ceil() as u32,
            );
            for y in y0..y1.min(sp.page.height) {
                for x in x0..x1.min(sp.page.width) {
                    // text-like horizontal stripes
                    let ink = (y - y0) % 12 < 7 && (x - x0) % 9 < 7;
                    let px = if ink {
                        Rgb([shade, shade / 2, 255 - shade])
                    } else {
                        Rgb([236, 236, 236])
                    };
                    img.put_pixel(x, y, px);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub steps: usize,
    pub seed: u64,
    pub group_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub ablation: Ablation,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            steps: 500,
            seed: 3407,
            group_size: 8,
            learning_rate: 0.3,
            temperature: 1.0,
            ablation: Ablation::NONE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub mean_reward: f64,
    pub modal_template: String,
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    /// Fraction of this iteration's rollouts that pass stepwise attribution.
    pub sa_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub templates: Vec<String>,
    pub iterations: Vec<IterationRecord>,
    pub final_modal_template: String,
    pub final_probabilities: Vec<f64>,
}

impl SimulationTrace {
    /// Mean SA pass rate over the last `n` iterations.
    pub fn tail_sa_rate(&self, n: usize) -> f64 {
        let tail = &self.iterations[self.iterations.len().saturating_sub(n)..];
        tail.iter().map(|r| r.sa_pass_rate).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn final_probability_of(&self, name: &str) -> Option<f64> {
        let i = self.templates.iter().position(|t| t == name)?;
        self.final_probabilities.get(i).copied()
    }
}

pub fn run_simulation(
    world: &SyntheticWorld,
    cfg: &RewardConfig,
    params: &SimulationParams,
) -> Result<SimulationTrace> {
    if params.steps == 0 {
        return Err(Error::InvalidConfig(
            "simulation needs at least one step".into(),
        ));
    }
    if params.group_size < 2 {
        return Err(Error::GroupTooSmall(params.group_size));
    }
    cfg.validate()?;
    world.validate(cfg)?;

    // Rewards are a pure function of the template, so score each one once.
    let gt = world.record()?;
    let enc = world.encoder()?;
    let engine = RewardEngine::new(*cfg).with_ablation(params.ablation);
    let mut rewards = Vec::with_capacity(world.templates.len());
    let mut sa_bits = Vec::with_capacity(world.templates.len());
    for t in &world.templates {
        let b = engine.score(&t.render()?, &gt, &enc)?;
        sa_bits.push(b.s_min.is_some_and(|s| s >= cfg.tau));
        rewards.push(b.total);
    }

    let names: Vec<String> = world.templates.iter().map(|t| t.name.clone()).collect();
    let mut policy = TemplatePolicy::uniform(world.templates.len(), params.temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut iterations = Vec::with_capacity(params.steps);
    for it in 1..=params.steps {
        let sampled: Vec<usize> = (0..params.group_size)
            .map(|_| policy.sample(&mut rng))
            .collect();
        let group: Vec<f64> = sampled.iter().map(|&i| rewards[i]).collect();
        let adv = group_advantage(&group)?;
        policy.step(&sampled, &adv.advantages, params.learning_rate);
        let g = params.group_size as f64;
        iterations.push(IterationRecord {
            iteration: it,
            mean_reward: group.iter().sum::<f64>() / g,
            modal_template: names[policy.modal()].clone(),
            probabilities: policy.probabilities(),
            logits: policy.logits.clone(),
            sa_pass_rate: sampled.iter().filter(|&&i| sa_bits[i]).count() as f64 / g,
        });
    }
    Ok(SimulationTrace {
        final_modal_template: names[policy.modal()].clone(),
        final_probabilities: policy.probabilities(),
        templates: names,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantage(&[1.0, 2.0, 3.0]).unwrap().advantages;
        let r = (1.5f64).sqrt();
        assert!((a[0] + r).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - r).abs() < 1e-12);
        assert_eq!(group_advantage(&[5.0; 4]).unwrap().advantages, vec![0.0; 4]);
        assert_eq!(
            group_advantage(&[0.0, 4.0]).unwrap().advantages,
            vec![-1.0, 1.0]
        );
        assert!(matches!(
            group_advantage(&[1.0]),
            Err(Error::GroupTooSmall(1))
        ));
    }

    #[test]
    fn policy_probabilities_and_gradient() {
        let mut p = TemplatePolicy::uniform(3, 1.0).unwrap();
        assert_eq!(p.probabilities(), vec![1.0 / 3.0; 3]);
        p.step(&[0, 1], &[1.0, -1.0], 1.0);
        // grad_0 = ((1 - 1/3) - (0 - 1/3)) / 2 = 0.5, grad_1 = -0.5, grad_2 = 0
        assert!((p.logits[0] - 0.5).abs() < 1e-12);
        assert!((p.logits[1] + 0.5).abs() < 1e-12);
        assert!(p.logits[2].abs() < 1e-12);
        assert_eq!(p.modal(), 0);
        let s: f64 = p.probabilities().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(TemplatePolicy::uniform(3, 0.0).is_err());
    }

    #[test]
    fn default_world_template_scores() {
        let w = SyntheticWorld::default();
        w.validate(&RewardConfig::default()).unwrap();
        let totals: Vec<f64> = w
            .score_templates(&RewardConfig::default())
            .unwrap()
            .iter()
            .map(|b| b.total)
            .collect();
        assert_eq!(totals, vec![4.0, 3.5, 2.5, 2.5, 1.25, -1.0]);
    }

    #[test]
    fn world_round_trips_through_json() {
        let w = SyntheticWorld::default();
        let back: SyntheticWorld =
            serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn zero_steps_rejected() {
        let p = SimulationParams {
            steps: 0,
            ..SimulationParams::default()
        };
        assert!(run_simulation(&SyntheticWorld::default(), &RewardConfig::default(), &p).is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let p = SimulationParams {
            steps: 40,
            ..SimulationParams::default()
        };
        let w = SyntheticWorld::default();
        let cfg = RewardConfig::default();
        assert_eq!(
            run_simulation(&w, &cfg, &p).unwrap(),
            run_simulation(&w, &cfg, &p).unwrap()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn advantages_are_normalized(rs in prop::collection::vec(-1.0..4.0f64, 2..16), shift in -10.0..10.0f64, scale in 0.01..100.0f64) {
                let a = group_advantage(&rs).unwrap().advantages;
                let n = a.len() as f64;
                let mean = a.iter().sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                if a.iter().any(|x| *x != 0.0) {
                    let var = a.iter().map(|x| x * x).sum::<f64>() / n;
                    prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
                }
                let moved: Vec<f64> = rs.iter().map(|r| r * scale + shift).collect();
                let b = group_advantage(&moved).unwrap().advantages;
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
