use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use coeforge::evalset::{
    write_jsonl, ColdStartCandidate, EvalReport, PredictionRecord, SourceRecord, CANDIDATES_SCHEMA,
    PREDICTIONS_SCHEMA, SOURCES_SCHEMA,
};
use coeforge::parser::serialize_trajectory;
use coeforge::{BoundingBox, CoETrajectory, EvidenceRef, PageRef, ReasoningStep};
use serde_json::Value;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn coeforge() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coeforge"));
    c.env_remove("COEFORGE_ENCODER");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("spawn coeforge")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scoring(cmd: &str, predictions: &Path, out: &Path) -> Command {
    let mut c = coeforge();
    c.arg(cmd)
        .arg("--dataset")
        .arg(data_dir().join("dataset.jsonl"))
        .arg("--predictions")
        .arg(predictions)
        .arg("--out")
        .arg(out);
    c
}

fn tag_config(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap();
    let tag: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    tag["config"].clone()
}

fn response(answer: &str) -> String {
    let ev = EvidenceRef::new(1, BoundingBox::new(0.0, 0.0, 50.0, 50.0).unwrap());
    serialize_trajectory(&CoETrajectory {
        steps: vec![ReasoningStep::new("look", vec![ev])],
        answer_text: answer.into(),
        answer_evidence: Some(ev),
        raw: String::new(),
        format_ok: true,
        answer_evidence_in_chain: true,
    })
    .unwrap()
}

#[test]
fn empty_predictions_give_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("empty.jsonl");
    std::fs::write(&preds, "").unwrap();
    let out = dir.path().join("eval.json");
    let o = run(&mut scoring("evaluate", &preds, &out));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report.n_total, 0);
    assert!(report.per_sample.is_empty());
    assert_eq!(report.em, None);
    assert_eq!(report.no_answer_accuracy, None);

    let out = dir.path().join("score.jsonl");
    let o = run(&mut scoring("score", &preds, &out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);
}

#[test]
fn unknown_query_id_fails_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let rows = [PredictionRecord {
        query_id: "no-such-query".into(),
        response: response("42"),
    }];
    write_jsonl(
        std::fs::File::create(&preds).unwrap(),
        PREDICTIONS_SCHEMA,
        &rows,
    )
    .unwrap();
    let out = dir.path().join("score.jsonl");
    let o = run(&mut scoring("score", &preds, &out));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-such-query"), "{}", stderr(&o));
}

#[test]
fn flags_beat_config_file_and_env_beats_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("coeforge.toml");
    std::fs::write(
        &cfg,
        "encoder = \"mock:128\"\n[reward]\ntau = 0.25\ndelta = 0.6\n",
    )
    .unwrap();
    let preds = data_dir().join("predictions.jsonl");

    let out = dir.path().join("a.jsonl");
    let o = run(scoring("score", &preds, &out)
        .arg("--config")
        .arg(&cfg)
        .args(["--tau", "0.35"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let c = tag_config(&out);
    assert_eq!(c["reward"]["tau"], 0.35);
    assert_eq!(c["reward"]["delta"], 0.6);
    assert_eq!(c["reward"]["epsilon"], 0.4);
    assert_eq!(c["encoder"], "mock:128");

    let out = dir.path().join("b.jsonl");
    let o = run(scoring("score", &preds, &out)
        .arg("--config")
        .arg(&cfg)
        .args(["--encoder", "mock:256"])
        .env("COEFORGE_ENCODER", "mock:64"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tag_config(&out)["encoder"], "mock:64");
}

#[test]
fn bad_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[reward]\ntau_typo = 1\n").unwrap();
    let out = dir.path().join("x.jsonl");
    let o = run(
        scoring("score", &data_dir().join("predictions.jsonl"), &out)
            .arg("--config")
            .arg(&cfg),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_zeroes_components() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.jsonl");
    let o = run(
        scoring("score", &data_dir().join("predictions.jsonl"), &out)
            .args(["--ablate", "step,ground"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    for line in text.lines().skip(1) {
        let row: Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["breakdown"]["r_step"], 0.0);
        assert_eq!(row["breakdown"]["r_ground"], 0.0);
    }
    assert_eq!(tag_config(&out)["ablation"], "step,ground");
}

#[test]
fn filter_writes_kept_and_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("cands.jsonl");
    let rows = [
        ColdStartCandidate {
            query_id: "keep".into(),
            response: response("barack obama"),
            gold_answer: "Barack Obama".into(),
        },
        ColdStartCandidate {
            query_id: "drop".into(),
            response: response("obama"),
            gold_answer: "Barack Obama".into(),
        },
        ColdStartCandidate {
            query_id: "broken".into(),
            response: "<think>no answer block</think>".into(),
            gold_answer: "x".into(),
        },
    ];
    write_jsonl(
        std::fs::File::create(&cands).unwrap(),
        CANDIDATES_SCHEMA,
        &rows,
    )
    .unwrap();
    let out = dir.path().join("kept.jsonl");
    let rejected = dir.path().join("rejected.jsonl");
    let o = run(coeforge()
        .arg("filter")
        .arg("--candidates")
        .arg(&cands)
        .arg("--out")
        .arg(&out)
        .arg("--rejected")
        .arg(&rejected));
    assert!(o.status.success(), "{}", stderr(&o));
    let kept = std::fs::read_to_string(&out).unwrap();
    assert_eq!(kept.lines().count(), 2);
    assert!(kept.contains("\"keep\""));
    let dropped = std::fs::read_to_string(&rejected).unwrap();
    assert!(dropped.contains("\"drop\"") && dropped.contains("\"broken\""));
}

#[test]
fn build_candidates_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let page = |id: &str| PageRef::new(id, format!("{id}.png"), 100, 100).unwrap();
    let sources: Vec<SourceRecord> = (0..20)
        .map(|i| SourceRecord {
            query_id: format!("q{i}"),
            question: "what?".into(),
            gold_answer: "42".into(),
            gold_box: BoundingBox::new(1.0, 1.0, 9.0, 9.0).unwrap(),
            source: page(&format!("src{i}")),
            retrieved: (0..5).map(|j| page(&format!("r{i}-{j}"))).collect(),
        })
        .collect();
    let src = dir.path().join("sources.jsonl");
    write_jsonl(
        std::fs::File::create(&src).unwrap(),
        SOURCES_SCHEMA,
        &sources,
    )
    .unwrap();
    let build = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(coeforge()
            .arg("build-candidates")
            .arg("--sources")
            .arg(&src)
            .arg("--out")
            .arg(&out)
            .args(["--seed", seed]));
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out).unwrap()
    };
    let a = build("a.jsonl", "7");
    assert_eq!(a, build("b.jsonl", "7"));
    assert_ne!(a, build("c.jsonl", "8"));
    for line in a.lines().skip(1) {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["pages"].as_array().unwrap().len(), 3);
    }

    let o = run(coeforge()
        .arg("build-candidates")
        .arg("--sources")
        .arg(&src)
        .arg("--out")
        .arg(dir.path().join("d.jsonl"))
        .args(["--m", "6"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("q0"), "{}", stderr(&o));
}

#[test]
fn train_sim_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str| {
        let out = dir.path().join(name);
        let o = run(coeforge()
            .arg("train-sim")
            .arg("--out")
            .arg(&out)
            .args(["--steps", "200"]));
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(out).unwrap()
    };
    let a = train("a.jsonl");
    assert_eq!(a, train("b.jsonl"));
    assert_eq!(a.lines().count(), 201);
    assert_eq!(tag_config(&dir.path().join("a.jsonl"))["seed"], 3407);
}

#[test]
fn export_world_matches_shipped_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(coeforge().arg("export-world").arg("--out").arg(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    for rel in [
        "world.json",
        "dataset.jsonl",
        "predictions.jsonl",
        "pages/synth-p1.png",
        "pages/synth-p1.layout.json",
        "pages/synth-p2.png",
        "pages/synth-p2.layout.json",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join(rel)).unwrap(),
            std::fs::read(data_dir().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

/// Minimal encoder server: every request gets the same unit vector, so
/// every pair scores cosine 1.
fn fake_encoder() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            thread::spawn(move || {
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: Value = serde_json::from_slice(&body).unwrap();
                assert!(req["kind"] == "text" || req["kind"] == "image");
                let reply = r#"{"vector":[0.0,1.0,0.0,0.0],"dim":4}"#;
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                )
                .unwrap();
            });
        }
    });
    format!("http://{addr}")
}

#[test]
fn remote_encoder_happy_path() {
    let url = fake_encoder();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval.json");
    let o = run(
        scoring("evaluate", &data_dir().join("predictions.jsonl"), &out).args(["--encoder", &url]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report.n_errors, 0);
    assert_eq!(report.config.encoder, url);
    let first = report.per_sample[0].breakdown.as_ref().unwrap();
    assert_eq!(first.s_min, Some(1.0));
}

#[test]
fn unreachable_encoder_exits_2_with_report() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("score.jsonl");
    let o = run(
        scoring("score", &data_dir().join("predictions.jsonl"), &out)
            .args(["--encoder", &format!("http://127.0.0.1:{port}")]),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Value> = text
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 8);
    let failed: Vec<&Value> = rows.iter().filter(|r| !r["error"].is_null()).collect();
    assert!(!failed.is_empty());
    for r in failed {
        assert_eq!(r["error"]["kind"], "provider_unavailable");
        assert_eq!(r["error"]["retriable"], true);
    }
}
