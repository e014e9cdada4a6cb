//! Writes a synthetic world to disk as a ready-to-score dataset.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use coeforge::evalset::{write_jsonl, PredictionRecord, DATASET_SCHEMA, PREDICTIONS_SCHEMA};
use coeforge::grpo::SyntheticWorld;
use coeforge::imaging::layout_sidecar;
use coeforge::parser::serialize_trajectory;
use coeforge::{CoETrajectory, EvidenceRef, GroundTruthRecord, ReasoningStep, NO_ANSWER};

pub const UNANSWERABLE_ID: &str = "synth-q2";

/// The world's own query plus one question the pages cannot answer.
pub fn dataset(world: &SyntheticWorld) -> Result<Vec<GroundTruthRecord>> {
    let answerable = world.record()?;
    let unanswerable = GroundTruthRecord::new(
        UNANSWERABLE_ID,
        "What is the flash point of compound X?",
        NO_ANSWER,
        None,
        None,
        answerable.pages().to_vec(),
        -1,
    )?;
    Ok(vec![answerable, unanswerable])
}

fn response(step: &str, ev: EvidenceRef, answer: &str) -> Result<String> {
    let t = CoETrajectory {
        steps: vec![ReasoningStep::new(step, vec![ev])],
        answer_text: answer.into(),
        answer_evidence: Some(ev),
        raw: String::new(),
        format_ok: true,
        answer_evidence_in_chain: true,
    };
    Ok(serialize_trajectory(&t)?)
}

/// One prediction per template, then two for the unanswerable question.
pub fn predictions(world: &SyntheticWorld) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for t in &world.templates {
        out.push(PredictionRecord {
            query_id: world.query.query_id.clone(),
            response: t.render()?,
        });
    }
    let region = world
        .pages
        .first()
        .and_then(|p| p.layout.regions.first())
        .context("world has no text regions")?;
    let ev = EvidenceRef::new(1, region.bbox);
    out.push(PredictionRecord {
        query_id: UNANSWERABLE_ID.into(),
        response: response(&region.text, ev, NO_ANSWER)?,
    });
    out.push(PredictionRecord {
        query_id: UNANSWERABLE_ID.into(),
        response: response(
            &region.text,
            EvidenceRef::new(1, world.query.gold_box),
            &world.query.gold_answer,
        )?,
    });
    Ok(out)
}

pub fn export(world: &SyntheticWorld, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, sp) in world.pages.iter().enumerate() {
        let path = dir.join(&sp.page.image_locator);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        world
            .render_page(i)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        fs::write(
            layout_sidecar(&path),
            serde_json::to_string_pretty(&sp.layout)? + "\n",
        )?;
    }
    fs::write(
        dir.join("world.json"),
        serde_json::to_string_pretty(world)? + "\n",
    )?;
    write_jsonl(
        fs::File::create(dir.join("dataset.jsonl"))?,
        DATASET_SCHEMA,
        &dataset(world)?,
    )?;
    write_jsonl(
        fs::File::create(dir.join("predictions.jsonl"))?,
        PREDICTIONS_SCHEMA,
        &predictions(world)?,
    )?;
    Ok(())
}
