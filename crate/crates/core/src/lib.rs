//! Machine-checkable Chain-of-Evidence (CoE) trajectories for visual-document RAG.
//!
//! A CoE response interleaves reasoning steps with evidence references
//! (`{"bbox_2d": [x1, y1, x2, y2], "image_index": i}`) and ends with an answer
//! that cites its supporting region. This crate parses such responses, scores
//! them with a four-part rule-based reward (accuracy, stepwise attribution,
//! grounding, format), normalizes rewards into group-relative advantages, and
//! evaluates prediction sets with soft EM, IoU@0.5 and stepwise attribution.

pub mod embedding;
pub mod error;
pub mod evalset;
pub mod geometry;
pub mod grpo;
pub mod imaging;
pub mod parser;
pub mod rewards;
pub mod textmatch;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    BoundingBox, CoETrajectory, EvidenceRef, GroundTruthRecord, PageRef, ReasoningStep,
    RewardBreakdown, RewardConfig, RewardWeights, StepScore, NO_ANSWER,
};
