//! Response grammar for CoE outputs.
//!
//! ```text
//! response    := ws think_block ws answer_block ws
//! think_block := "<think>" body "</think>"
//! answer_block:= "<answer>" body "</answer>"
//! evidence    := {"bbox_2d": [x1, y1, x2, y2], "image_index": i}
//! ```
//!
//! Evidence objects are found by a balanced-brace scan keyed on `"bbox_2d"`,
//! so prose containing braces is left alone. The think body is split into
//! steps at newlines outside evidence objects; each evidence object belongs to
//! the step whose line contains it and is removed from the step text. The
//! answer body must hold exactly one evidence object, and the rest of it
//! (minus an optional, case-insensitive `The answer is:` prefix) is the answer.
//!
//! Parsing never fails. Problems are reported as diagnostics and any
//! [`Severity::Fatal`] one clears `format_ok`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{BoundingBox, CoETrajectory, EvidenceRef, ReasoningStep};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
const EVIDENCE_KEY: &str = "bbox_2d";
const INDEX_KEY: &str = "image_index";
const ANSWER_PREFIX: &str = "the answer is:";

/// Inputs above this size are rejected outright.
pub const MAX_RESPONSE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Fatal,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCode {
    InputTooLarge,
    MissingTag,
    DuplicateTag,
    MisorderedTags,
    StrayContent,
    NoSteps,
    EmptyStepText,
    MissingAnswerEvidence,
    MultipleAnswerEvidence,
    MalformedEvidence,
    DegenerateBox,
    NegativeCoordinate,
    InvalidPageIndex,
    /// `"bbox_2d"` or `"image_index"` appears outside any well-formed evidence object.
    StrayEvidenceKey,
    NoStepEvidence,
    EmptyAnswerText,
    AnswerNotInChain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub severity: Severity,
    pub message: String,
    /// Byte range in the raw response.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub trajectory: CoETrajectory,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseOutcome {
    pub fn fatal(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Fatal)
    }

    pub fn has(&self, code: DiagnosticCode) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Treat an answer box that is not among the step boxes as fatal.
    pub strict_answer_in_chain: bool,
}

pub fn parse_response(raw: &str) -> ParseOutcome {
    parse_response_with(raw, ParseOptions::default())
}

struct Diagnostics(Vec<Diagnostic>);

impl Diagnostics {
    fn push(&mut self, code: DiagnosticCode, severity: Severity, span: Range<usize>, msg: String) {
        self.0.push(Diagnostic {
            code,
            severity,
            message: msg,
            span,
        });
    }

    fn fatal(&mut self, code: DiagnosticCode, span: Range<usize>, msg: impl Into<String>) {
        self.push(code, Severity::Fatal, span, msg.into());
    }

    fn warn(&mut self, code: DiagnosticCode, span: Range<usize>, msg: impl Into<String>) {
        self.push(code, Severity::Warning, span, msg.into());
    }
}

pub fn parse_response_with(raw: &str, opts: ParseOptions) -> ParseOutcome {
    let mut diags = Diagnostics(Vec::new());
    let mut trajectory = CoETrajectory {
        steps: Vec::new(),
        answer_text: String::new(),
        answer_evidence: None,
        raw: raw.to_owned(),
        format_ok: false,
        answer_evidence_in_chain: false,
    };

    if raw.len() > MAX_RESPONSE_BYTES {
        diags.fatal(
            DiagnosticCode::InputTooLarge,
            0..raw.len(),
            format!(
                "response is {} bytes, limit {MAX_RESPONSE_BYTES}",
                raw.len()
            ),
        );
        return ParseOutcome {
            trajectory,
            diagnostics: diags.0,
        };
    }

    let (think, answer) = locate_blocks(raw, &mut diags);

    if let Some(body) = think {
        trajectory.steps = parse_steps(raw, body.clone(), &mut diags);
        if trajectory.steps.is_empty() {
            diags.fatal(
                DiagnosticCode::NoSteps,
                body.clone(),
                "think block has no reasoning steps",
            );
        } else if trajectory.evidence_count() == 0 {
            diags.warn(
                DiagnosticCode::NoStepEvidence,
                body,
                "no reasoning step cites evidence",
            );
        }
    }

    if let Some(body) = answer {
        let (text, evidence) = parse_answer(raw, body, &mut diags);
        trajectory.answer_text = text;
        trajectory.answer_evidence = evidence;
    }

    if let Some(ans) = trajectory.answer_evidence {
        let in_chain = trajectory.step_evidence().any(|e| *e == ans);
        trajectory.answer_evidence_in_chain = in_chain;
        if !trajectory.answer_evidence_in_chain && !trajectory.steps.is_empty() {
            let severity = if opts.strict_answer_in_chain {
                Severity::Fatal
            } else {
                Severity::Warning
            };
            diags.push(
                DiagnosticCode::AnswerNotInChain,
                severity,
                0..raw.len(),
                "answer evidence does not appear among the step evidence".into(),
            );
        }
    }

    trajectory.format_ok = !diags.0.iter().any(|d| d.severity == Severity::Fatal);
    ParseOutcome {
        trajectory,
        diagnostics: diags.0,
    }
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// Returns the body ranges of the think and answer blocks when they can be
/// located, reporting tag problems along the way.
fn locate_blocks(
    raw: &str,
    diags: &mut Diagnostics,
) -> (Option<Range<usize>>, Option<Range<usize>>) {
    let positions: Vec<Vec<usize>> = TAGS.iter().map(|t| find_all(raw, t)).collect();
    for (tag, pos) in TAGS.iter().zip(&positions) {
        match pos.len() {
            0 => diags.fatal(
                DiagnosticCode::MissingTag,
                raw.len()..raw.len(),
                format!("missing {tag}"),
            ),
            1 => {}
            _ => diags.fatal(
                DiagnosticCode::DuplicateTag,
                pos[1]..pos[1] + tag.len(),
                format!("{tag} appears {} times", pos.len()),
            ),
        }
    }

    let block = |open: usize, close: usize| -> Option<Range<usize>> {
        let start = *positions[open].first()? + TAGS[open].len();
        let end = positions[close].iter().copied().find(|&c| c >= start)?;
        Some(start..end)
    };
    let think = block(0, 1);
    let answer = block(2, 3);

    if positions.iter().all(|p| p.len() == 1) {
        let [to, tc, ao, ac] = [
            positions[0][0],
            positions[1][0],
            positions[2][0],
            positions[3][0],
        ];
        if !(to < tc && tc < ao && ao < ac) {
            diags.fatal(
                DiagnosticCode::MisorderedTags,
                to.min(tc).min(ao).min(ac)..raw.len(),
                "expected <think>...</think> followed by <answer>...</answer>",
            );
        } else {
            let gaps = [
                0..to,
                tc + THINK_CLOSE.len()..ao,
                ac + ANSWER_CLOSE.len()..raw.len(),
            ];
            for gap in gaps {
                if !raw[gap.clone()].trim().is_empty() {
                    diags.fatal(
                        DiagnosticCode::StrayContent,
                        gap,
                        "non-whitespace content outside the think and answer blocks",
                    );
                }
            }
        }
    }
    (think, answer)
}

/// End (exclusive) of the JSON-ish object starting at `start`, honoring
/// string literals. `None` when braces never balance.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    debug_assert_eq!(bytes[start], b'{');
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

struct EvidenceSpan {
    /// Absolute byte range in the raw response.
    range: Range<usize>,
    parsed: Option<EvidenceRef>,
}

/// Finds evidence objects inside `body` (an absolute range of `raw`).
fn scan_evidence(raw: &str, body: Range<usize>, diags: &mut Diagnostics) -> Vec<EvidenceSpan> {
    let text = &raw[body.clone()];
    let mut spans = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('{') {
        let start = i + off;
        match balanced_end(text, start) {
            Some(end) if text[start..end].contains(EVIDENCE_KEY) => {
                let abs = body.start + start..body.start + end;
                let parsed = parse_evidence_object(&text[start..end], abs.clone(), diags);
                spans.push(EvidenceSpan { range: abs, parsed });
                i = end;
            }
            _ => i = start + 1,
        }
    }

    // Either evidence key left outside recognized objects means a damaged object.
    for key in [EVIDENCE_KEY, INDEX_KEY] {
        let mut covered = spans.iter().map(|s| s.range.clone()).peekable();
        for (pos, _) in text.match_indices(key) {
            let abs = body.start + pos;
            while covered.peek().is_some_and(|r| r.end <= abs) {
                covered.next();
            }
            if !covered.peek().is_some_and(|r| r.contains(&abs)) {
                diags.fatal(
                    DiagnosticCode::StrayEvidenceKey,
                    abs..abs + key.len(),
                    format!("\"{key}\" outside a well-formed evidence object"),
                );
            }
        }
    }
    spans
}

fn parse_evidence_object(
    text: &str,
    span: Range<usize>,
    diags: &mut Diagnostics,
) -> Option<EvidenceRef> {
    let malformed = |diags: &mut Diagnostics, why: String| {
        diags.fatal(DiagnosticCode::MalformedEvidence, span.clone(), why);
        None
    };
    let obj = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => obj,
        Ok(_) => return malformed(diags, "evidence is not a JSON object".into()),
        Err(e) => return malformed(diags, format!("evidence is not valid JSON: {e}")),
    };
    if obj.len() != 2 || !obj.contains_key(EVIDENCE_KEY) || !obj.contains_key(INDEX_KEY) {
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        return malformed(
            diags,
            format!("evidence must have exactly bbox_2d and image_index, found {keys:?}"),
        );
    }
    let coords: Vec<f64> = match &obj[EVIDENCE_KEY] {
        Value::Array(items) if items.len() == 4 => {
            match items.iter().map(Value::as_f64).collect::<Option<Vec<_>>>() {
                Some(c) => c,
                None => return malformed(diags, "bbox_2d coordinates must be numbers".into()),
            }
        }
        Value::Array(items) => {
            return malformed(
                diags,
                format!("bbox_2d needs 4 coordinates, found {}", items.len()),
            )
        }
        _ => return malformed(diags, "bbox_2d must be an array".into()),
    };
    let page_index = match &obj[INDEX_KEY] {
        Value::Number(n) => match n.as_i64() {
            Some(i) if i >= 1 && i <= i64::from(u32::MAX) => i as u32,
            Some(i) => {
                diags.fatal(
                    DiagnosticCode::InvalidPageIndex,
                    span.clone(),
                    format!("image_index {i} must be >= 1"),
                );
                return None;
            }
            None => return malformed(diags, format!("image_index {n} must be an integer")),
        },
        other => {
            return malformed(
                diags,
                format!("image_index must be an integer, found {other}"),
            )
        }
    };
    match BoundingBox::new(coords[0], coords[1], coords[2], coords[3]) {
        Ok(bbox) => Some(EvidenceRef { page_index, bbox }),
        Err(e) => {
            let code = match e {
                Error::DegenerateBox { .. } => DiagnosticCode::DegenerateBox,
                _ => DiagnosticCode::NegativeCoordinate,
            };
            diags.fatal(code, span, e.to_string());
            None
        }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_steps(raw: &str, body: Range<usize>, diags: &mut Diagnostics) -> Vec<ReasoningStep> {
    let spans = scan_evidence(raw, body.clone(), diags);
    let mut steps = Vec::new();

    let mut text = String::new();
    let mut evidence = Vec::new();
    let mut saw_object = false;
    let mut line_start = body.start;

    let mut finish = |text: &mut String,
                      evidence: &mut Vec<EvidenceRef>,
                      saw_object: &mut bool,
                      line: Range<usize>,
                      diags: &mut Diagnostics| {
        let cleaned = collapse_ws(text);
        if cleaned.is_empty() {
            if *saw_object {
                diags.fatal(
                    DiagnosticCode::EmptyStepText,
                    line,
                    "step consists only of evidence and has no text",
                );
            }
        } else {
            steps.push(ReasoningStep::new(cleaned, std::mem::take(evidence)));
        }
        text.clear();
        evidence.clear();
        *saw_object = false;
    };

    let mut pos = body.start;
    let mut next_span = spans.iter().peekable();
    while pos < body.end {
        if let Some(span) = next_span.peek().filter(|s| s.range.start == pos) {
            saw_object = true;
            if let Some(e) = span.parsed {
                evidence.push(e);
            }
            text.push(' ');
            pos = span.range.end;
            next_span.next();
            continue;
        }
        let ch = raw[pos..].chars().next().expect("in-bounds char");
        if ch == '\n' {
            finish(
                &mut text,
                &mut evidence,
                &mut saw_object,
                line_start..pos,
                diags,
            );
            line_start = pos + 1;
        } else {
            text.push(ch);
        }
        pos += ch.len_utf8();
    }
    finish(
        &mut text,
        &mut evidence,
        &mut saw_object,
        line_start..body.end,
        diags,
    );
    steps
}

fn parse_answer(
    raw: &str,
    body: Range<usize>,
    diags: &mut Diagnostics,
) -> (String, Option<EvidenceRef>) {
    let spans = scan_evidence(raw, body.clone(), diags);
    let mut text = String::new();
    let mut pos = body.start;
    for span in &spans {
        text.push_str(&raw[pos..span.range.start]);
        text.push(' ');
        pos = span.range.end;
    }
    text.push_str(&raw[pos..body.end]);

    let mut answer = collapse_ws(&text);
    if answer
        .get(..ANSWER_PREFIX.len())
        .is_some_and(|p| p.eq_ignore_ascii_case(ANSWER_PREFIX))
    {
        answer = answer[ANSWER_PREFIX.len()..].trim_start().to_owned();
    }
    if answer.is_empty() {
        diags.warn(
            DiagnosticCode::EmptyAnswerText,
            body.clone(),
            "answer text is empty",
        );
    }

    let evidence = match spans.len() {
        0 => {
            diags.fatal(
                DiagnosticCode::MissingAnswerEvidence,
                body,
                "answer must cite exactly one evidence object",
            );
            None
        }
        1 => spans[0].parsed,
        n => {
            diags.fatal(
                DiagnosticCode::MultipleAnswerEvidence,
                spans[1].range.clone(),
                format!("answer cites {n} evidence objects, expected one"),
            );
            None
        }
    };
    (answer, evidence)
}

fn push_number(out: &mut String, x: f64) {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        let _ = write!(out, "{}", x as i64);
    } else {
        // serde_json prints the shortest representation that round-trips.
        out.push_str(&serde_json::to_string(&x).expect("finite coordinate"));
    }
}

/// Renders an evidence object in the canonical wire form.
pub fn format_evidence(e: &EvidenceRef) -> String {
    let mut s = String::from("{\"bbox_2d\": [");
    for (i, c) in e.bbox.coords().iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        push_number(&mut s, *c);
    }
    let _ = write!(s, "], \"image_index\": {}}}", e.page_index);
    s
}

fn check_text(what: &str, text: &str) -> Result<()> {
    if let Some(tag) = TAGS.iter().find(|t| text.contains(*t)) {
        return Err(Error::UnserializableTrajectory(format!(
            "{what} contains {tag}"
        )));
    }
    if let Some(key) = [EVIDENCE_KEY, INDEX_KEY].iter().find(|k| text.contains(*k)) {
        return Err(Error::UnserializableTrajectory(format!(
            "{what} contains the reserved key {key}"
        )));
    }
    Ok(())
}

/// Inverse of [`parse_response`] for well-formed trajectories.
pub fn serialize_trajectory(t: &CoETrajectory) -> Result<String> {
    if !t.format_ok {
        return Err(Error::UnserializableTrajectory("format_ok is false".into()));
    }
    let answer_evidence = t
        .answer_evidence
        .ok_or_else(|| Error::UnserializableTrajectory("missing answer evidence".into()))?;
    if t.steps.is_empty() {
        return Err(Error::UnserializableTrajectory("no reasoning steps".into()));
    }

    let mut out = String::from(THINK_OPEN);
    for (i, step) in t.steps.iter().enumerate() {
        let text = collapse_ws(&step.text);
        if text.is_empty() {
            return Err(Error::UnserializableTrajectory(format!(
                "step {} has no text",
                i + 1
            )));
        }
        check_text("step text", &text)?;
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&text);
        for e in &step.evidence {
            out.push(' ');
            out.push_str(&format_evidence(e));
        }
    }
    out.push_str(THINK_CLOSE);
    out.push('\n');
    check_text("answer text", &t.answer_text)?;
    out.push_str(ANSWER_OPEN);
    out.push_str("The answer is: ");
    let answer = collapse_ws(&t.answer_text);
    if !answer.is_empty() {
        out.push_str(&answer);
        out.push(' ');
    }
    out.push_str(&format_evidence(&answer_evidence));
    out.push_str(ANSWER_CLOSE);
    Ok(out)
}

/// One context-evidence pair: the owning step's text and one of its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEvidencePair<'a> {
    /// 1-based step ordinal.
    pub step: usize,
    pub text: &'a str,
    pub evidence: EvidenceRef,
}

/// The K context-evidence pairs in step order.
pub fn extract_pairs(t: &CoETrajectory) -> Vec<ContextEvidencePair<'_>> {
    t.steps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.evidence.iter().map(move |e| ContextEvidencePair {
                step: i + 1,
                text: s.text.as_str(),
                evidence: *e,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "<think>Step 1: locate the abstract {\"bbox_2d\": [10,10,200,80], \"image_index\": 1}\nStep 2: the value is 42</think><answer>42 {\"bbox_2d\": [10,10,200,80], \"image_index\": 1}</answer>";

    fn codes(o: &ParseOutcome) -> Vec<DiagnosticCode> {
        o.diagnostics.iter().map(|d| d.code).collect()
    }

    #[test]
    fn parses_the_reference_response() {
        let o = parse_response(GOOD);
        assert!(o.trajectory.format_ok, "{:?}", o.diagnostics);
        let t = &o.trajectory;
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.evidence_count(), 1);
        assert_eq!(t.answer_text, "42");
        assert_eq!(t.steps[0].text, "Step 1: locate the abstract");
        assert_eq!(t.steps[1].text, "Step 2: the value is 42");
        assert!(t.answer_evidence_in_chain);
        assert_eq!(t.raw, GOOD);
    }

    #[test]
    fn missing_think_block() {
        let o = parse_response("<answer>42</answer>");
        assert!(!o.trajectory.format_ok);
        let c = codes(&o);
        assert!(c.contains(&DiagnosticCode::MissingTag));
        assert!(c.contains(&DiagnosticCode::MissingAnswerEvidence));
        assert_eq!(o.trajectory.answer_text, "42");
    }

    #[test]
    fn degenerate_step_box() {
        let raw = "<think>t {\"bbox_2d\": [5,5,5,9], \"image_index\": 1}</think><answer>x {\"bbox_2d\": [0,0,4,4], \"image_index\": 1}</answer>";
        let o = parse_response(raw);
        assert!(!o.trajectory.format_ok);
        let d = o.fatal().next().unwrap();
        assert_eq!(d.code, DiagnosticCode::DegenerateBox);
        assert_eq!(
            &raw[d.span.clone()],
            "{\"bbox_2d\": [5,5,5,9], \"image_index\": 1}"
        );
    }

    #[test]
    fn fatal_conditions() {
        let ev = "{\"bbox_2d\": [0,0,4,4], \"image_index\": 1}";
        let case = |raw: String, code: DiagnosticCode| {
            let o = parse_response(&raw);
            assert!(!o.trajectory.format_ok, "{raw}");
            assert!(o.has(code), "{raw}: {:?}", codes(&o));
        };
        case(
            format!("<think>a {ev}</think><answer>x {ev}</answer> trailing"),
            DiagnosticCode::StrayContent,
        );
        case(
            format!("lead <think>a {ev}</think><answer>x {ev}</answer>"),
            DiagnosticCode::StrayContent,
        );
        case(
            format!("<think>a {ev}</think>mid<answer>x {ev}</answer>"),
            DiagnosticCode::StrayContent,
        );
        case(
            format!("<answer>x {ev}</answer><think>a {ev}</think>"),
            DiagnosticCode::MisorderedTags,
        );
        case(
            format!("<think>a {ev}</think><think></think><answer>x {ev}</answer>"),
            DiagnosticCode::DuplicateTag,
        );
        case(
            format!("<think>a {ev}<answer>x {ev}</answer>"),
            DiagnosticCode::MissingTag,
        );
        case(
            format!("<think>  \n </think><answer>x {ev}</answer>"),
            DiagnosticCode::NoSteps,
        );
        case(
            format!("<think>a\n{ev}</think><answer>x {ev}</answer>"),
            DiagnosticCode::EmptyStepText,
        );
        case(
            format!("<think>a {ev}</think><answer>x {ev} {ev}</answer>"),
            DiagnosticCode::MultipleAnswerEvidence,
        );
        case(
            format!("<think>a {ev}</think><answer>x</answer>"),
            DiagnosticCode::MissingAnswerEvidence,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [0,0,4], \"image_index\": 1}}</think><answer>x {ev}</answer>"),
            DiagnosticCode::MalformedEvidence,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [0,0,\"4\",4], \"image_index\": 1}}</think><answer>x {ev}</answer>"),
            DiagnosticCode::MalformedEvidence,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [0,0,4,4], \"image_index\": 0}}</think><answer>x {ev}</answer>"),
            DiagnosticCode::InvalidPageIndex,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [0,0,4,4], \"image_index\": 1.5}}</think><answer>x {ev}</answer>"),
            DiagnosticCode::MalformedEvidence,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [-1,0,4,4], \"image_index\": 1}}</think><answer>x {ev}</answer>"),
            DiagnosticCode::NegativeCoordinate,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [0,0,4,4], \"image_index\": 1</think><answer>x {ev}</answer>"),
            DiagnosticCode::StrayEvidenceKey,
        );
        case(
            format!(
                "<think>a {{\"\": [0,0,4,4], \"image_index\": 1}}</think><answer>x {ev}</answer>"
            ),
            DiagnosticCode::StrayEvidenceKey,
        );
        case(
            format!("<think>a {{\"bbox_2d\": [0,0,4,4], \"image_index\": 1, \"x\": 2}}</think><answer>x {ev}</answer>"),
            DiagnosticCode::MalformedEvidence,
        );
    }

    #[test]
    fn prose_braces_are_ignored() {
        let ev = "{\"bbox_2d\": [0,0,4,4], \"image_index\": 2}";
        let raw = format!("<think>set {{a, b}} and {{ \"k\": 1 }} {ev}\nthen }} stray {{</think><answer>The Answer is:  b {ev}</answer>");
        let o = parse_response(&raw);
        assert!(o.trajectory.format_ok, "{:?}", o.diagnostics);
        assert_eq!(o.trajectory.steps[0].text, "set {a, b} and { \"k\": 1 }");
        assert_eq!(o.trajectory.steps[1].text, "then } stray {");
        assert_eq!(o.trajectory.answer_text, "b");
    }

    #[test]
    fn evidence_may_sit_mid_line_and_span_lines() {
        let raw = "<think>look {\"bbox_2d\": [1, 2,\n 3, 4],\n \"image_index\": 1} here\n\n  next step  </think>\n<answer>ok {\"bbox_2d\": [1.5,2,3,4], \"image_index\": 1}</answer>\n";
        let o = parse_response(raw);
        assert!(o.trajectory.format_ok, "{:?}", o.diagnostics);
        let t = &o.trajectory;
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].text, "look here");
        assert_eq!(t.steps[0].evidence[0].bbox.coords(), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.steps[1].text, "next step");
        assert!(!t.answer_evidence_in_chain);
        assert!(o.has(DiagnosticCode::AnswerNotInChain));
    }

    #[test]
    fn strict_mode_rejects_fresh_answer_box() {
        let raw = "<think>a {\"bbox_2d\": [0,0,4,4], \"image_index\": 1}</think><answer>x {\"bbox_2d\": [0,0,5,5], \"image_index\": 1}</answer>";
        assert!(parse_response(raw).trajectory.format_ok);
        let strict = ParseOptions {
            strict_answer_in_chain: true,
        };
        assert!(!parse_response_with(raw, strict).trajectory.format_ok);
    }

    #[test]
    fn zero_step_evidence_is_valid_but_flagged() {
        let raw = "<think>just thinking</think><answer>x {\"bbox_2d\": [0,0,5,5], \"image_index\": 1}</answer>";
        let o = parse_response(raw);
        assert!(o.trajectory.format_ok);
        assert!(o.has(DiagnosticCode::NoStepEvidence));
        assert_eq!(o.trajectory.evidence_count(), 0);
    }

    #[test]
    fn oversized_input_is_fatal() {
        let raw = "x".repeat(MAX_RESPONSE_BYTES + 1);
        let o = parse_response(&raw);
        assert!(o.has(DiagnosticCode::InputTooLarge));
        assert!(!o.trajectory.format_ok);
    }

    #[test]
    fn serialize_round_trips_reference() {
        let t = parse_response(GOOD).trajectory;
        let text = serialize_trajectory(&t).unwrap();
        let back = parse_response(&text).trajectory;
        assert!(back.same_structure(&t));
        // fixed point after one cycle
        assert_eq!(serialize_trajectory(&back).unwrap(), text);
    }

    #[test]
    fn serialize_rejects_bad_trajectories() {
        let mut t = parse_response("<answer>42</answer>").trajectory;
        assert!(matches!(
            serialize_trajectory(&t),
            Err(Error::UnserializableTrajectory(_))
        ));
        t = parse_response(GOOD).trajectory;
        t.steps[0].text = "sneaky </think>".into();
        assert!(serialize_trajectory(&t).is_err());
    }

    #[test]
    fn number_formatting() {
        let e = EvidenceRef::new(3, BoundingBox::new(1.0, 2.25, 30.0, 4e-3 + 3.0).unwrap());
        assert_eq!(
            format_evidence(&e),
            "{\"bbox_2d\": [1, 2.25, 30, 3.004], \"image_index\": 3}"
        );
    }

    #[test]
    fn extract_pairs_examples() {
        let t = parse_response(GOOD).trajectory;
        let pairs = extract_pairs(&t);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].step, 1);
        assert_eq!(pairs[0].text, "Step 1: locate the abstract");

        let ev = "{\"bbox_2d\": [0,0,4,4], \"image_index\": 1}";
        let ev2 = "{\"bbox_2d\": [5,5,9,9], \"image_index\": 1}";
        let raw = format!("<think>both {ev} {ev2}</think><answer>x {ev}</answer>");
        let t = parse_response(&raw).trajectory;
        let pairs = extract_pairs(&t);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].text, pairs[1].text);

        let raw = format!("<think>nothing here</think><answer>x {ev}</answer>");
        assert!(extract_pairs(&parse_response(&raw).trajectory).is_empty());
    }
}
