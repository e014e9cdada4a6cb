//! Answer normalization, word recall and soft exact match.
//!
//! Normalization: lowercase, delete Unicode punctuation, drop the articles
//! "a", "an", "the" as whole tokens, collapse whitespace.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedAnswer {
    pub tokens: Vec<String>,
    pub joined: String,
}

impl NormalizedAnswer {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid regex"))
}

pub fn normalize(raw: &str) -> NormalizedAnswer {
    let lowered = raw.to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    let tokens: Vec<String> = stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect();
    let joined = tokens.join(" ");
    NormalizedAnswer { tokens, joined }
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// `|a ∩ a_gt| / |a_gt|` over normalized token multisets.
pub fn recall(a: &str, a_gt: &str) -> Result<f64> {
    let gold = normalize(a_gt);
    if gold.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let pred = normalize(a);
    let pred_counts = counts(&pred.tokens);
    let overlap: usize = counts(&gold.tokens)
        .iter()
        .map(|(tok, &n)| n.min(pred_counts.get(tok).copied().unwrap_or(0)))
        .sum();
    Ok(overlap as f64 / gold.tokens.len() as f64)
}

/// 1 when either normalized string contains the other; both must be non-empty.
pub fn soft_em(a: &str, a_gt: &str) -> u8 {
    let p = normalize(a);
    let g = normalize(a_gt);
    if p.is_empty() || g.is_empty() {
        return 0;
    }
    u8::from(g.joined.contains(&p.joined) || p.joined.contains(&g.joined))
}

pub fn is_no_answer(a: &str) -> bool {
    normalize(a).joined == "no answer"
}
