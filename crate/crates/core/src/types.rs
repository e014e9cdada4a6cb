//! Domain types shared by every module.
//!
//! Page indices are 1-based everywhere in CoE math and on the response wire.
//! Dataset records carry a 0-based `pos_idx` with `-1` for "source page
//! replaced"; [`page_index_from_pos`] is the only place the two meet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textmatch;

/// Gold answer sentinel for records whose candidate set lacks the source page.
pub const NO_ANSWER: &str = "No answer";

/// Axis-aligned pixel rectangle with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::NegativeCoordinate { x1, y1, x2, y2 });
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Validating constructor mirroring the wire order `[x1, y1, x2, y2]`.
pub fn validate_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<BoundingBox> {
    BoundingBox::new(x1, y1, x2, y2)
}

/// A box on a specific page; `page_index` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRef {
    #[serde(rename = "image_index")]
    pub page_index: u32,
    #[serde(rename = "bbox_2d")]
    pub bbox: BoundingBox,
}

impl EvidenceRef {
    pub fn new(page_index: u32, bbox: BoundingBox) -> Self {
        Self { page_index, bbox }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub text: String,
    #[serde(default)]
    pub evidence: Vec<EvidenceRef>,
}

impl ReasoningStep {
    pub fn new(text: impl Into<String>, evidence: Vec<EvidenceRef>) -> Self {
        Self {
            text: text.into(),
            evidence,
        }
    }
}

/// Parsed reasoning chain, final answer and the answer's supporting evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoETrajectory {
    pub steps: Vec<ReasoningStep>,
    pub answer_text: String,
    pub answer_evidence: Option<EvidenceRef>,
    #[serde(default)]
    pub raw: String,
    pub format_ok: bool,
    /// Whether the answer evidence also appears among the step evidence.
    #[serde(default)]
    pub answer_evidence_in_chain: bool,
}

impl CoETrajectory {
    /// Number of context-evidence pairs (K).
    pub fn evidence_count(&self) -> usize {
        self.steps.iter().map(|s| s.evidence.len()).sum()
    }

    /// All step evidence in step order.
    pub fn step_evidence(&self) -> impl Iterator<Item = &EvidenceRef> {
        self.steps.iter().flat_map(|s| s.evidence.iter())
    }

    /// Equality on everything except the raw text.
    pub fn same_structure(&self, other: &CoETrajectory) -> bool {
        self.steps == other.steps
            && self.answer_text == other.answer_text
            && self.answer_evidence == other.answer_evidence
            && self.format_ok == other.format_ok
            && self.answer_evidence_in_chain == other.answer_evidence_in_chain
    }
}

/// Locator for a rendered page image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PageRefWire")]
pub struct PageRef {
    pub page_id: String,
    /// Path (relative to the dataset directory) or `sha256:<hex>` content address.
    #[serde(rename = "image")]
    pub image_locator: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct PageRefWire {
    page_id: String,
    image: String,
    width: u32,
    height: u32,
}

impl TryFrom<PageRefWire> for PageRef {
    type Error = Error;

    fn try_from(w: PageRefWire) -> Result<Self> {
        PageRef::new(w.page_id, w.image, w.width, w.height)
    }
}

impl PageRef {
    pub fn new(
        page_id: impl Into<String>,
        image_locator: impl Into<String>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let page_id = page_id.into();
        if width == 0 || height == 0 {
            return Err(Error::Schema(format!(
                "page {page_id} has zero dimension {width}x{height}"
            )));
        }
        Ok(Self {
            page_id,
            image_locator: image_locator.into(),
            width,
            height,
        })
    }
}

/// Converts a 0-based dataset position into a 1-based page index.
pub fn page_index_from_pos(pos_idx: i64) -> Option<u32> {
    if pos_idx >= 0 {
        u32::try_from(pos_idx + 1).ok()
    } else {
        None
    }
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecordWire", into = "RecordWire")]
pub struct GroundTruthRecord {
    query_id: String,
    question: String,
    gold_answer: String,
    gold_page_index: Option<u32>,
    gold_box: Option<BoundingBox>,
    pages: Vec<PageRef>,
    pos_idx: i64,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    query_id: String,
    question: String,
    gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_page_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_box: Option<BoundingBox>,
    pages: Vec<PageRef>,
    pos_idx: i64,
}

impl TryFrom<RecordWire> for GroundTruthRecord {
    type Error = Error;

    fn try_from(w: RecordWire) -> Result<Self> {
        GroundTruthRecord::new(
            w.query_id,
            w.question,
            w.gold_answer,
            w.gold_page_index,
            w.gold_box,
            w.pages,
            w.pos_idx,
        )
    }
}

impl From<GroundTruthRecord> for RecordWire {
    fn from(r: GroundTruthRecord) -> Self {
        RecordWire {
            query_id: r.query_id,
            question: r.question,
            gold_answer: r.gold_answer,
            gold_page_index: r.gold_page_index,
            gold_box: r.gold_box,
            pages: r.pages,
            pos_idx: r.pos_idx,
        }
    }
}

impl GroundTruthRecord {
    /// Validates the record. `gold_page_index` may be omitted for answerable
    /// records; it is then derived from `pos_idx`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        query_id: impl Into<String>,
        question: impl Into<String>,
        gold_answer: impl Into<String>,
        gold_page_index: Option<u32>,
        gold_box: Option<BoundingBox>,
        pages: Vec<PageRef>,
        pos_idx: i64,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let gold_answer = gold_answer.into();
        let bad = |msg: String| Error::Schema(format!("record {query_id:?}: {msg}"));

        if pages.is_empty() {
            return Err(bad("pages must not be empty".into()));
        }
        let unanswerable = textmatch::is_no_answer(&gold_answer);
        let gold_page_index = match pos_idx {
            -1 => {
                if !unanswerable {
                    return Err(bad("pos_idx -1 requires gold_answer \"No answer\"".into()));
                }
                if gold_box.is_some() || gold_page_index.is_some() {
                    return Err(bad(
                        "unanswerable record must not carry gold evidence".into()
                    ));
                }
                None
            }
            p if p >= 0 => {
                if unanswerable {
                    return Err(bad("\"No answer\" requires pos_idx -1".into()));
                }
                if gold_box.is_none() {
                    return Err(bad("answerable record requires gold_box".into()));
                }
                if p as usize >= pages.len() {
                    return Err(bad(format!("pos_idx {p} outside {} page(s)", pages.len())));
                }
                let derived = page_index_from_pos(p);
                if gold_page_index.is_some() && gold_page_index != derived {
                    return Err(bad(format!(
                        "gold_page_index {:?} disagrees with pos_idx {p}",
                        gold_page_index
                    )));
                }
                derived
            }
            p => return Err(bad(format!("pos_idx {p} must be -1 or a page position"))),
        };

        Ok(Self {
            query_id,
            question: question.into(),
            gold_answer,
            gold_page_index,
            gold_box,
            pages,
            pos_idx,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn gold_answer(&self) -> &str {
        &self.gold_answer
    }

    pub fn gold_page_index(&self) -> Option<u32> {
        self.gold_page_index
    }

    pub fn gold_box(&self) -> Option<&BoundingBox> {
        self.gold_box.as_ref()
    }

    pub fn pages(&self) -> &[PageRef] {
        &self.pages
    }

    pub fn pos_idx(&self) -> i64 {
        self.pos_idx
    }

    pub fn is_answerable(&self) -> bool {
        self.pos_idx >= 0
    }

    /// Resolves a 1-based page index against the candidate pages.
    pub fn page(&self, page_index: u32) -> Result<&PageRef> {
        resolve_page(&self.pages, page_index)
    }
}

pub fn resolve_page(pages: &[PageRef], page_index: u32) -> Result<&PageRef> {
    (page_index as usize)
        .checked_sub(1)
        .and_then(|i| pages.get(i))
        .ok_or(Error::PageOutOfRange {
            index: page_index,
            pages: pages.len(),
        })
}

/// Per-component multipliers for the total reward. All ones reproduces the
/// plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub acc: f64,
    pub step: f64,
    pub ground: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            acc: 1.0,
            step: 1.0,
            ground: 1.0,
            format: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Minimum step cosine for the attribution indicator.
    pub tau: f64,
    /// Maximum tolerated pairwise IoU among step boxes.
    pub delta: f64,
    /// Accuracy gate on the step reward.
    pub epsilon: f64,
    /// Cold-start recall threshold.
    pub gamma: f64,
    /// Grounding IoU threshold (strict `>`).
    pub iou_at: f64,
    pub weights: RewardWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            delta: 0.5,
            epsilon: 0.4,
            gamma: 0.8,
            iou_at: 0.5,
            weights: RewardWeights::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(what.to_string()))
            }
        };
        check(self.tau > 0.0 && self.tau < 1.0, "tau must lie in (0, 1)")?;
        check(
            self.delta > 0.0 && self.delta <= 1.0,
            "delta must lie in (0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.epsilon),
            "epsilon must lie in [0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            "gamma must lie in [0, 1]",
        )?;
        check(
            (0.0..1.0).contains(&self.iou_at),
            "iou_at must lie in [0, 1)",
        )?;
        let w = self.weights;
        check(
            [w.acc, w.step, w.ground, w.format]
                .iter()
                .all(|x| x.is_finite()),
            "weights must be finite",
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    /// 1-based step ordinal.
    pub step: usize,
    pub cosine: f64,
}

/// The four reward components of one trajectory and their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_step: f64,
    pub r_ground: f64,
    pub r_format: f64,
    pub total: f64,
    pub s_min: Option<f64>,
    pub i_max: Option<f64>,
    pub per_step_scores: Vec<StepScore>,
}

impl RewardBreakdown {
    pub fn new(
        r_acc: f64,
        r_step: f64,
        r_ground: f64,
        r_format: f64,
        weights: &RewardWeights,
    ) -> Self {
        let mut b = Self {
            r_acc,
            r_step,
            r_ground,
            r_format,
            total: 0.0,
            s_min: None,
            i_max: None,
            per_step_scores: Vec::new(),
        };
        b.retotal(weights);
        b
    }

    /// Recomputes `total` from the components.
    pub fn retotal(&mut self, w: &RewardWeights) {
        self.total = w.acc * self.r_acc
            + w.step * self.r_step
            + w.ground * self.r_ground
            + w.format * self.r_format;
    }
}
