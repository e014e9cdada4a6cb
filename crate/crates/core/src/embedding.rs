//! Encoders behind the stepwise attribution reward.
//!
//! The reward engine talks to an [`EvidenceEncoder`]: it embeds step text and
//! cropped page regions and gets back raw vectors, which the engine
//! L2-normalizes before taking cosines. Two families implement it:
//!
//! * pixel encoders ([`crate::imaging::ImageEvidenceEncoder`]) that decode the
//!   page, crop it, and hand PNG bytes to an [`EncoderProvider`] such as
//!   [`RemoteEncoder`] or [`MockEncoder`];
//! * [`LayoutEncoder`], which embeds the text regions a crop overlaps. Used
//!   for synthetic pages where the region text is known.
//!
//! The mock hash is FNV-1a (64 bit) over each normalized token's UTF-8 bytes;
//! bucket = `hash % d`, sign = `-1` when bit 63 is set.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersection_area, CropRegion};
use crate::textmatch;
use crate::types::BoundingBox;

/// Unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn normalize_vector(raw: &[f64]) -> Result<EmbeddingVector> {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(raw.iter().map(|x| x / norm).collect()))
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Embeds step texts and page crops for the stepwise reward. Returned vectors
/// are raw; callers normalize.
pub trait EvidenceEncoder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_region(&self, region: &CropRegion) -> Result<Vec<f64>>;
}

impl<E: EvidenceEncoder + ?Sized> EvidenceEncoder for Arc<E> {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_text(text)
    }

    fn embed_region(&self, region: &CropRegion) -> Result<Vec<f64>> {
        (**self).embed_region(region)
    }
}

impl<E: EvidenceEncoder + ?Sized> EvidenceEncoder for &E {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_text(text)
    }

    fn embed_region(&self, region: &CropRegion) -> Result<Vec<f64>> {
        (**self).embed_region(region)
    }
}

/// Image/text encoder capability (a retriever model or a stand-in).
pub trait EncoderProvider: Send + Sync {
    /// Output dimension, when known.
    fn dimension(&self) -> Option<usize>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    /// `png` holds lossless PNG bytes of the crop.
    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>>;
}

pub const MIN_MOCK_DIM: usize = 8;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn check_dim(d: usize) -> Result<()> {
    if d < MIN_MOCK_DIM {
        return Err(Error::InvalidConfig(format!(
            "mock encoder dimension {d} is below {MIN_MOCK_DIM}"
        )));
    }
    Ok(())
}

fn hashed_bag<'a>(
    tokens: impl IntoIterator<Item = (&'a str, f64)>,
    d: usize,
) -> Result<EmbeddingVector> {
    check_dim(d)?;
    let mut acc = vec![0.0f64; d];
    for (tok, weight) in tokens {
        let h = fnv1a(tok.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % d as u64) as usize] += sign * weight;
    }
    normalize_vector(&acc)
}

/// Hashed bag-of-words over normalized tokens.
pub fn mock_encode_text(text: &str, d: usize) -> Result<EmbeddingVector> {
    mock_encode_weighted(&[(text, 1.0)], d)
}

/// Hashed bag-of-words where each text's token counts are scaled by its weight.
pub fn mock_encode_weighted(parts: &[(&str, f64)], d: usize) -> Result<EmbeddingVector> {
    let normalized: Vec<(textmatch::NormalizedAnswer, f64)> = parts
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(t, w)| (textmatch::normalize(t), *w))
        .collect();
    hashed_bag(
        normalized
            .iter()
            .flat_map(|(n, w)| n.tokens.iter().map(move |t| (t.as_str(), *w))),
        d,
    )
}

/// A text region on a synthetic page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRegion {
    #[serde(rename = "bbox_2d")]
    pub bbox: BoundingBox,
    pub text: String,
}

/// Known text content of a page, region by region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageLayout {
    pub page_id: String,
    pub regions: Vec<TextRegion>,
}

/// Embeds the text lying inside `crop`: every region contributes its tokens
/// weighted by the fraction of the region's area the crop covers.
pub fn mock_encode_image(
    layout: &PageLayout,
    crop: &BoundingBox,
    d: usize,
) -> Result<EmbeddingVector> {
    let parts: Vec<(&str, f64)> = layout
        .regions
        .iter()
        .map(|r| {
            (
                r.text.as_str(),
                intersection_area(&r.bbox, crop) / r.bbox.area(),
            )
        })
        .collect();
    mock_encode_weighted(&parts, d)
}

/// Deterministic stand-in provider: text goes through [`mock_encode_text`],
/// images through a hashed histogram of coarsely quantized pixel colors.
#[derive(Debug, Clone, Copy)]
pub struct MockEncoder {
    pub dim: usize,
}

impl MockEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { dim })
    }
}

impl EncoderProvider for MockEncoder {
    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(mock_encode_text(text, self.dim)?.into_inner())
    }

    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>> {
        let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                locator: "<crop>".into(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let mut hist: HashMap<String, f64> = HashMap::new();
        for p in img.pixels() {
            let [r, g, b] = p.0;
            *hist
                .entry(format!("rgb{}{}{}", r >> 5, g >> 5, b >> 5))
                .or_default() += 1.0;
        }
        let mut tokens: Vec<(&str, f64)> = hist.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        tokens.sort_by(|a, b| a.0.cmp(b.0));
        Ok(hashed_bag(tokens, self.dim)?.into_inner())
    }
}

/// Layout-backed mock encoder for synthetic pages.
#[derive(Debug, Clone)]
pub struct LayoutEncoder {
    dim: usize,
    layouts: HashMap<String, PageLayout>,
}

impl LayoutEncoder {
    pub fn new(dim: usize, layouts: impl IntoIterator<Item = PageLayout>) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            dim,
            layouts: layouts
                .into_iter()
                .map(|l| (l.page_id.clone(), l))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self, page_id: &str) -> Option<&PageLayout> {
        self.layouts.get(page_id)
    }
}

impl EvidenceEncoder for LayoutEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(mock_encode_text(text, self.dim)?.into_inner())
    }

    fn embed_region(&self, region: &CropRegion) -> Result<Vec<f64>> {
        let layout = self
            .layouts
            .get(&region.page.page_id)
            .ok_or_else(|| Error::Schema(format!("no layout for page {}", region.page.page_id)))?;
        Ok(mock_encode_image(layout, &region.bbox, self.dim)?.into_inner())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEncoderConfig {
    /// Base URL; `/v1/embed` is appended unless already present.
    pub endpoint: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff: Duration,
    /// Expected dimension; learned from the first response when absent.
    pub dimension: Option<usize>,
}

impl RemoteEncoderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            max_in_flight: 8,
            retries: 1,
            backoff: Duration::from_millis(250),
            dimension: None,
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
    dim: usize,
}

/// HTTP client for an encoder server speaking `POST /v1/embed`.
pub struct RemoteEncoder {
    agent: ureq::Agent,
    url: String,
    cfg: RemoteEncoderConfig,
    dim: OnceLock<usize>,
    gate: Semaphore,
}

impl RemoteEncoder {
    pub fn new(cfg: RemoteEncoderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let base = cfg.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/v1/embed") {
            base.to_owned()
        } else {
            format!("{base}/v1/embed")
        };
        let dim = OnceLock::new();
        if let Some(d) = cfg.dimension {
            let _ = dim.set(d);
        }
        Self {
            agent,
            url,
            gate: Semaphore::new(cfg.max_in_flight),
            cfg,
            dim,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn request_once(&self, req: &EmbedRequest<'_>) -> Result<Vec<f64>> {
        let unavailable = |msg: String| Error::ProviderUnavailable(format!("{}: {msg}", self.url));
        let _permit = self.gate.acquire();
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(req)
            .map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(unavailable(format!("HTTP {status}")));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| unavailable(format!("bad response body: {e}")))?;
        if body.vector.len() != body.dim {
            return Err(unavailable(format!(
                "declared dim {} but vector has {} values",
                body.dim,
                body.vector.len()
            )));
        }
        let expected = *self.dim.get_or_init(|| body.dim);
        if body.dim != expected {
            return Err(unavailable(format!(
                "dim {} does not match {expected}",
                body.dim
            )));
        }
        Ok(body.vector)
    }

    fn request(&self, req: &EmbedRequest<'_>) -> Result<Vec<f64>> {
        let mut attempt = 0;
        loop {
            match self.request_once(req) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.cfg.retries => {
                    log::warn!("encoder request failed, retrying: {e}");
                    thread::sleep(self.cfg.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl EncoderProvider for RemoteEncoder {
    fn dimension(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.request(&EmbedRequest {
            kind: "text",
            text: Some(text),
            image_b64: None,
        })
    }

    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>> {
        self.request(&EmbedRequest {
            kind: "image",
            text: None,
            image_b64: Some(base64::engine::general_purpose::STANDARD.encode(png)),
        })
    }
}
