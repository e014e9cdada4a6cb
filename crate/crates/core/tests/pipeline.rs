use std::path::{Path, PathBuf};

use coeforge::evalset::{
    evaluate, parse_jsonl, read_jsonl, score_predictions, GroundTruthIndex, PredictionRecord,
    RunConfig, ScoreRow, DATASET_SCHEMA, PREDICTIONS_SCHEMA, SCORE_SCHEMA,
};
use coeforge::imaging::{MockPageEncoder, PageResolver};
use coeforge::rewards::RewardEngine;
use coeforge::{GroundTruthRecord, RewardConfig};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn load() -> (GroundTruthIndex, Vec<PredictionRecord>, MockPageEncoder) {
    let dir = data_dir();
    let records: Vec<GroundTruthRecord> =
        read_jsonl(&dir.join("dataset.jsonl"), DATASET_SCHEMA).unwrap();
    let preds = read_jsonl(&dir.join("predictions.jsonl"), PREDICTIONS_SCHEMA).unwrap();
    let enc = MockPageEncoder::new(256, PageResolver::new(&dir)).unwrap();
    (GroundTruthIndex::new(records).unwrap(), preds, enc)
}

#[test]
fn library_scores_match_golden_rows() {
    let (gts, preds, enc) = load();
    let engine = RewardEngine::new(RewardConfig::default());
    let rows = score_predictions(&preds, &gts, &enc, &engine).unwrap();
    let text = std::fs::read_to_string(data_dir().join("golden/score.jsonl")).unwrap();
    let golden: Vec<ScoreRow> = parse_jsonl(&text, SCORE_SCHEMA, "golden").unwrap();
    assert_eq!(rows, golden);

    let first = rows[0].breakdown.as_ref().unwrap();
    assert_eq!(
        (first.r_acc, first.r_step, first.r_ground, first.r_format),
        (1.0, 1.0, 1.0, 1.0)
    );
    assert_eq!(first.total, 4.0);
}

#[test]
fn library_evaluation_matches_golden_report() {
    let (gts, preds, enc) = load();
    let engine = RewardEngine::new(RewardConfig::default());
    let report = evaluate(
        &preds,
        &gts,
        &enc,
        &engine,
        RunConfig::new("mock:256", &engine),
    )
    .unwrap();
    let golden = std::fs::read_to_string(data_dir().join("golden/eval.json")).unwrap();
    assert_eq!(
        serde_json::to_string_pretty(&report).unwrap() + "\n",
        golden
    );
    assert_eq!(report.n_errors, 0);
}

#[test]
fn totals_stay_in_range() {
    let (gts, preds, enc) = load();
    let engine = RewardEngine::new(RewardConfig::default());
    for row in score_predictions(&preds, &gts, &enc, &engine).unwrap() {
        let b = row.breakdown.unwrap();
        assert!((-1.0..=4.0).contains(&b.total));
        assert_eq!(b.total == -1.0, !row.format_ok);
    }
}
