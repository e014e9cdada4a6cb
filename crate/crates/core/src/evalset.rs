//! Datasets, predictions, evaluation metrics, and data-pipeline helpers.
//!
//! Every file is line-delimited JSON. The first line may be a schema tag
//! object such as `{"schema":"coeforge.dataset.v1"}`; writers always emit it
//! and readers reject a tag naming another schema.
//!
//! Metric denominators: EM and SA count every prediction, IoU@0.5 only those
//! whose record has a gold box, and no-answer accuracy only unanswerable ones.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::EvidenceEncoder;
use crate::error::{Error, Result};
use crate::parser::parse_response_with;
use crate::rewards::{grounding_reward, RewardEngine};
use crate::textmatch::{is_no_answer, recall, soft_em};
use crate::types::{
    BoundingBox, CoETrajectory, GroundTruthRecord, PageRef, RewardBreakdown, RewardConfig,
    NO_ANSWER,
};

pub const DATASET_SCHEMA: &str = "coeforge.dataset.v1";
pub const PREDICTIONS_SCHEMA: &str = "coeforge.predictions.v1";
pub const CANDIDATES_SCHEMA: &str = "coeforge.candidates.v1";
pub const REJECTIONS_SCHEMA: &str = "coeforge.rejections.v1";
pub const SOURCES_SCHEMA: &str = "coeforge.sources.v1";
pub const SCORE_SCHEMA: &str = "coeforge.score.v1";
pub const EVAL_SCHEMA: &str = "coeforge.eval.v1";
pub const TRACE_SCHEMA: &str = "coeforge.trace.v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaTag {
    schema: String,
    /// Settings the file was produced with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Parses JSONL text. `source` only labels error messages.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, schema: &str, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) {
            if let Ok(tag) = serde_json::from_str::<SchemaTag>(line) {
                if tag.schema != schema {
                    return Err(Error::Schema(format!(
                        "{source}: schema tag {:?}, expected {schema:?}",
                        tag.schema
                    )));
                }
                continue;
            }
        }
        let row = serde_json::from_str(line)
            .map_err(|e| Error::Schema(format!("{source}:{}: {e}", n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    parse_jsonl(
        &fs::read_to_string(path)?,
        schema,
        &path.display().to_string(),
    )
}

pub fn write_jsonl<T: Serialize, W: Write>(w: W, schema: &str, rows: &[T]) -> Result<()> {
    write_jsonl_with_config(w, schema, None::<&()>, rows)
}

/// Like [`write_jsonl`], embedding `config` in the schema tag line.
pub fn write_jsonl_with_config<T: Serialize, C: Serialize, W: Write>(
    mut w: W,
    schema: &str,
    config: Option<&C>,
    rows: &[T],
) -> Result<()> {
    let tag = SchemaTag {
        schema: schema.to_owned(),
        config: config
            .map(serde_json::to_value)
            .transpose()
            .map_err(|e| Error::Schema(e.to_string()))?,
    };
    let mut line = |v: String| writeln!(w, "{v}");
    line(serde_json::to_string(&tag).expect("tag serializes"))?;
    for r in rows {
        line(serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?)?;
    }
    Ok(())
}

pub fn jsonl_string<T: Serialize>(schema: &str, rows: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, schema, rows)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub response: String,
}

/// Ground truth keyed by query id.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthIndex {
    records: HashMap<String, GroundTruthRecord>,
}

impl GroundTruthIndex {
    pub fn new(records: impl IntoIterator<Item = GroundTruthRecord>) -> Result<Self> {
        let mut map = HashMap::new();
        for r in records {
            let id = r.query_id().to_owned();
            if map.insert(id.clone(), r).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate query_id {id:?} in dataset"
                )));
            }
        }
        Ok(Self { records: map })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, query_id: &str) -> Result<&GroundTruthRecord> {
        self.records
            .get(query_id)
            .ok_or_else(|| Error::UnresolvedQueryId(query_id.to_owned()))
    }

    /// Fails on the first prediction whose id is unknown.
    pub fn resolve_all<'a>(
        &'a self,
        preds: &[PredictionRecord],
    ) -> Result<Vec<&'a GroundTruthRecord>> {
        preds.iter().map(|p| self.get(&p.query_id)).collect()
    }
}

fn parse(pred: &PredictionRecord) -> CoETrajectory {
    crate::parser::parse_response(&pred.response).trajectory
}

fn em_bit(t: &CoETrajectory, gt: &GroundTruthRecord) -> u8 {
    if !t.format_ok {
        0
    } else if gt.is_answerable() {
        soft_em(&t.answer_text, gt.gold_answer())
    } else {
        u8::from(is_no_answer(&t.answer_text))
    }
}

fn iou_bit(t: &CoETrajectory, gt: &GroundTruthRecord, threshold: f64) -> Option<u8> {
    if !gt.is_answerable() {
        return None;
    }
    let cfg = RewardConfig {
        iou_at: threshold,
        ..RewardConfig::default()
    };
    Some(u8::from(
        t.format_ok && grounding_reward(t, gt, &cfg) == 1.0,
    ))
}

fn sa_bit(b: &RewardBreakdown, tau: f64) -> u8 {
    u8::from(b.s_min.is_some_and(|s| s >= tau))
}

fn mean_bits(bits: impl Iterator<Item = u8>) -> Option<f64> {
    let (mut n, mut hits) = (0usize, 0usize);
    for b in bits {
        n += 1;
        hits += usize::from(b);
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

pub fn metric_em(preds: &[PredictionRecord], gts: &GroundTruthIndex) -> Result<f64> {
    let recs = gts.resolve_all(preds)?;
    Ok(mean_bits(preds.iter().zip(recs).map(|(p, g)| em_bit(&parse(p), g))).unwrap_or(0.0))
}

/// `None` when no prediction targets an answerable record.
pub fn metric_iou_at(
    preds: &[PredictionRecord],
    gts: &GroundTruthIndex,
    threshold: f64,
) -> Result<Option<f64>> {
    let recs = gts.resolve_all(preds)?;
    Ok(mean_bits(
        preds
            .iter()
            .zip(recs)
            .filter_map(|(p, g)| iou_bit(&parse(p), g, threshold)),
    ))
}

/// Fraction of predictions with at least one step box and every step crop at
/// cosine `>= tau` with its step text. Neither the accuracy gate nor the
/// overlap test applies.
pub fn metric_sa<E: EvidenceEncoder + ?Sized>(
    preds: &[PredictionRecord],
    gts: &GroundTruthIndex,
    enc: &E,
    tau: f64,
) -> Result<f64> {
    let recs = gts.resolve_all(preds)?;
    let mut bits = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(recs) {
        let t = parse(p);
        let bit = if t.format_ok {
            let a = crate::rewards::step_alignment(&t, g.pages(), enc)?;
            u8::from(a.s_min.is_some_and(|s| s >= tau))
        } else {
            0
        };
        bits.push(bit);
    }
    Ok(mean_bits(bits.into_iter()).unwrap_or(0.0))
}

/// Over unanswerable records only; `None` when there are none.
pub fn no_answer_accuracy(
    preds: &[PredictionRecord],
    gts: &GroundTruthIndex,
) -> Result<Option<f64>> {
    let recs = gts.resolve_all(preds)?;
    Ok(mean_bits(
        preds
            .iter()
            .zip(recs)
            .filter(|(_, g)| !g.is_answerable())
            .map(|(p, _)| {
                let t = parse(p);
                u8::from(t.format_ok && is_no_answer(&t.answer_text))
            }),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleError {
    pub kind: String,
    pub message: String,
    pub retriable: bool,
}

impl From<&Error> for SampleError {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_owned(),
            message: e.to_string(),
            retriable: e.is_retriable(),
        }
    }
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: String,
    pub reward: RewardConfig,
    pub ablation: String,
    pub strict_answer_in_chain: bool,
}

impl RunConfig {
    pub fn new(encoder: impl Into<String>, engine: &RewardEngine) -> Self {
        Self {
            encoder: encoder.into(),
            reward: engine.cfg,
            ablation: engine.ablation.to_string(),
            strict_answer_in_chain: engine.parse.strict_answer_in_chain,
        }
    }
}

/// One row of a score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub query_id: String,
    pub format_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<SampleError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub query_id: String,
    pub em_bit: u8,
    /// Absent for unanswerable records.
    pub iou_bit: Option<u8>,
    pub sa_bit: u8,
    /// Present for unanswerable records only.
    pub no_answer_bit: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<SampleError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denominators {
    pub em: usize,
    pub iou: usize,
    pub sa: usize,
    pub no_answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config: RunConfig,
    pub n_total: usize,
    pub em: Option<f64>,
    pub iou_at_05: Option<f64>,
    pub sa: Option<f64>,
    pub no_answer_accuracy: Option<f64>,
    pub denominators: Denominators,
    /// Predictions whose scoring failed (their SA bit counts as 0).
    pub n_errors: usize,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    pub fn has_provider_errors(&self) -> bool {
        self.per_sample
            .iter()
            .any(|s| s.error.as_ref().is_some_and(|e| e.retriable))
    }
}

/// Scores one prediction; failures land in the row instead of aborting.
pub fn score_one<E: EvidenceEncoder + ?Sized>(
    pred: &PredictionRecord,
    gt: &GroundTruthRecord,
    enc: &E,
    engine: &RewardEngine,
) -> ScoreRow {
    let t = parse_response_with(&pred.response, engine.parse).trajectory;
    let (breakdown, error) = match crate::rewards::score_trajectory(&t, gt, enc, &engine.cfg) {
        Ok(mut b) => {
            if !engine.ablation.is_empty() {
                engine.ablation.apply(&mut b, &engine.cfg);
            }
            (Some(b), None)
        }
        Err(e) => (None, Some(SampleError::from(&e))),
    };
    ScoreRow {
        query_id: pred.query_id.clone(),
        format_ok: t.format_ok,
        breakdown,
        error,
    }
}

/// Scores every prediction in parallel, preserving input order.
pub fn score_predictions<E: EvidenceEncoder + ?Sized>(
    preds: &[PredictionRecord],
    gts: &GroundTruthIndex,
    enc: &E,
    engine: &RewardEngine,
) -> Result<Vec<ScoreRow>> {
    let recs = gts.resolve_all(preds)?;
    Ok(preds
        .par_iter()
        .zip(recs)
        .map(|(p, g)| score_one(p, g, enc, engine))
        .collect())
}

fn evaluate_one<E: EvidenceEncoder + ?Sized>(
    pred: &PredictionRecord,
    gt: &GroundTruthRecord,
    enc: &E,
    engine: &RewardEngine,
) -> SampleResult {
    let t = parse_response_with(&pred.response, engine.parse).trajectory;
    let row = score_one(pred, gt, enc, engine);
    SampleResult {
        query_id: pred.query_id.clone(),
        em_bit: em_bit(&t, gt),
        iou_bit: iou_bit(&t, gt, engine.cfg.iou_at),
        sa_bit: row
            .breakdown
            .as_ref()
            .map_or(0, |b| sa_bit(b, engine.cfg.tau)),
        no_answer_bit: (!gt.is_answerable())
            .then(|| u8::from(t.format_ok && is_no_answer(&t.answer_text))),
        breakdown: row.breakdown,
        error: row.error,
    }
}

/// Full evaluation pass. Duplicate query ids in `preds` are scored as
/// separate samples.
pub fn evaluate<E: EvidenceEncoder + ?Sized>(
    preds: &[PredictionRecord],
    gts: &GroundTruthIndex,
    enc: &E,
    engine: &RewardEngine,
    config: RunConfig,
) -> Result<EvalReport> {
    let recs = gts.resolve_all(preds)?;
    let per_sample: Vec<SampleResult> = preds
        .par_iter()
        .zip(recs)
        .map(|(p, g)| evaluate_one(p, g, enc, engine))
        .collect();
    let denominators = Denominators {
        em: per_sample.len(),
        iou: per_sample.iter().filter(|s| s.iou_bit.is_some()).count(),
        sa: per_sample.len(),
        no_answer: per_sample
            .iter()
            .filter(|s| s.no_answer_bit.is_some())
            .count(),
    };
    Ok(EvalReport {
        schema: EVAL_SCHEMA.to_owned(),
        config,
        n_total: per_sample.len(),
        em: mean_bits(per_sample.iter().map(|s| s.em_bit)),
        iou_at_05: mean_bits(per_sample.iter().filter_map(|s| s.iou_bit)),
        sa: mean_bits(per_sample.iter().map(|s| s.sa_bit)),
        no_answer_accuracy: mean_bits(per_sample.iter().filter_map(|s| s.no_answer_bit)),
        denominators,
        n_errors: per_sample.iter().filter(|s| s.error.is_some()).count(),
        per_sample,
    })
}

/// A model response considered for the cold-start set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdStartCandidate {
    pub query_id: String,
    pub response: String,
    pub gold_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<ColdStartCandidate>,
    pub dropped: Vec<DroppedCandidate>,
}

/// Keeps candidates whose parsed answer reaches word recall `>= gamma`.
pub fn cold_start_filter(candidates: &[ColdStartCandidate], gamma: f64) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for c in candidates {
        let parsed = crate::parser::parse_response(&c.response);
        let verdict = match parsed.fatal().next() {
            Some(d) => Err(format!("unparseable: {}", d.message)),
            None => match recall(&parsed.trajectory.answer_text, &c.gold_answer) {
                Ok(r) if r >= gamma => Ok(()),
                Ok(r) => Err(format!("recall {r:.4} below {gamma}")),
                Err(e) => Err(e.to_string()),
            },
        };
        match verdict {
            Ok(()) => out.kept.push(c.clone()),
            Err(reason) => {
                log::info!("dropping cold-start candidate {}: {reason}", c.query_id);
                out.dropped.push(DroppedCandidate {
                    query_id: c.query_id.clone(),
                    reason,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub pages: Vec<PageRef>,
    /// Position of the source page, or -1 when it was left out.
    pub pos_idx: i64,
}

/// Draws a multi-page candidate set around a source page.
///
/// With probability `no_answer_prob` the set holds `m` retrieved pages and no
/// source. Otherwise it holds `m - 1` retrieved pages plus the source at a
/// uniformly random position. Pages sharing the source's `page_id` never count
/// as negatives.
pub fn build_candidate_set(
    source: &PageRef,
    retrieved_topk: &[PageRef],
    m: usize,
    no_answer_prob: f64,
    rng_seed: u64,
) -> Result<CandidateSet> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&no_answer_prob) {
        return Err(Error::InvalidConfig(format!(
            "no_answer_prob {no_answer_prob} must lie in [0, 1]"
        )));
    }
    let pool: Vec<&PageRef> = retrieved_topk
        .iter()
        .filter(|p| p.page_id != source.page_id)
        .collect();
    if pool.len() < m {
        return Err(Error::InsufficientCandidates {
            needed: m,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let no_answer = rng.random::<f64>() < no_answer_prob;
    let take = if no_answer { m } else { m - 1 };
    let mut pages: Vec<PageRef> = sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    if no_answer {
        return Ok(CandidateSet { pages, pos_idx: -1 });
    }
    let pos = rng.random_range(0..m);
    pages.insert(pos, source.clone());
    Ok(CandidateSet {
        pages,
        pos_idx: pos as i64,
    })
}

/// A single-page QA example with its retrieval list, before candidate
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub query_id: String,
    pub question: String,
    pub gold_answer: String,
    pub gold_box: BoundingBox,
    pub source: PageRef,
    pub retrieved: Vec<PageRef>,
}

impl SourceRecord {
    /// Turns the example into a multi-page record; the no-answer branch
    /// replaces the gold answer with "No answer".
    pub fn build(&self, m: usize, no_answer_prob: f64, seed: u64) -> Result<GroundTruthRecord> {
        let set = build_candidate_set(&self.source, &self.retrieved, m, no_answer_prob, seed)?;
        let (answer, gold_box) = if set.pos_idx < 0 {
            (NO_ANSWER.to_owned(), None)
        } else {
            (self.gold_answer.clone(), Some(self.gold_box))
        };
        GroundTruthRecord::new(
            self.query_id.clone(),
            self.question.clone(),
            answer,
            None,
            gold_box,
            set.pages,
            set.pos_idx,
        )
    }
}
