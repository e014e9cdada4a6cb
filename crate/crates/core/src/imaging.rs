//! Page decoding, crop materialization, and the encoders that embed crops.
//!
//! Page locators are file paths (relative ones resolve against a base
//! directory) or content-addressed blobs written `sha256:<hex>`, looked up as
//! `<blob_dir>/<hex>` and verified on read.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::embedding::{
    mock_encode_image, mock_encode_text, EncoderProvider, EvidenceEncoder, MockEncoder, PageLayout,
};
use crate::error::{Error, Result};
use crate::geometry::CropRegion;
use crate::types::{BoundingBox, PageRef};

pub const DEFAULT_CACHE_PAGES: usize = 64;

/// Decoded page raster, immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    pub pixels: RgbImage,
    pub origin: PageRef,
}

/// Maps page locators to bytes on disk.
#[derive(Debug, Clone, Default)]
pub struct PageResolver {
    pub base_dir: PathBuf,
    pub blob_dir: Option<PathBuf>,
}

impl PageResolver {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            blob_dir: None,
        }
    }

    pub fn with_blob_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.blob_dir = Some(dir.into());
        self
    }

    fn decode_err(locator: &str, message: impl Into<String>) -> Error {
        Error::Decode {
            locator: locator.to_owned(),
            message: message.into(),
        }
    }

    /// Filesystem path of a plain locator; `None` for content-addressed ones.
    pub fn path_of(&self, locator: &str) -> Option<PathBuf> {
        if locator.starts_with("sha256:") {
            return None;
        }
        let p = Path::new(locator);
        Some(if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        })
    }

    pub fn read(&self, locator: &str) -> Result<Vec<u8>> {
        if let Some(hex) = locator.strip_prefix("sha256:") {
            let hex = hex.to_ascii_lowercase();
            if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Self::decode_err(locator, "malformed sha256 digest"));
            }
            let dir = self
                .blob_dir
                .as_ref()
                .ok_or_else(|| Self::decode_err(locator, "no blob directory configured"))?;
            let bytes =
                fs::read(dir.join(&hex)).map_err(|e| Self::decode_err(locator, e.to_string()))?;
            let actual = format!("{:x}", Sha256::digest(&bytes));
            if actual != hex {
                return Err(Self::decode_err(
                    locator,
                    format!("content hash is {actual}"),
                ));
            }
            return Ok(bytes);
        }
        let path = self.path_of(locator).expect("plain locator");
        fs::read(&path).map_err(|e| Self::decode_err(locator, format!("{}: {e}", path.display())))
    }

    pub fn load_page(&self, page: &PageRef) -> Result<PageImage> {
        decode_page(&self.read(&page.image_locator)?, page)
    }
}

/// Decodes PNG or JPEG bytes and checks them against the page's declared size.
pub fn decode_page(bytes: &[u8], page: &PageRef) -> Result<PageImage> {
    let err = |m: String| Error::Decode {
        locator: page.image_locator.clone(),
        message: m,
    };
    let format = image::guess_format(bytes).map_err(|e| err(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(err(format!("unsupported image format {format:?}")));
    }
    let pixels = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| err(e.to_string()))?
        .to_rgb8();
    if pixels.width() != page.width || pixels.height() != page.height {
        return Err(Error::PageDimensionMismatch {
            page_id: page.page_id.clone(),
            expected_w: page.width,
            expected_h: page.height,
            actual_w: pixels.width(),
            actual_h: pixels.height(),
        });
    }
    Ok(PageImage {
        pixels,
        origin: page.clone(),
    })
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covering `b`, snapped outward.
pub fn snap_outward(b: &BoundingBox) -> (u32, u32, u32, u32) {
    (
        b.x1().floor() as u32,
        b.y1().floor() as u32,
        b.x2().ceil() as u32,
        b.y2().ceil() as u32,
    )
}

pub fn crop_pixels(img: &PageImage, region: &CropRegion) -> RgbImage {
    let (x0, y0, x1, y1) = snap_outward(&region.bbox);
    let x1 = x1.min(img.pixels.width());
    let y1 = y1.min(img.pixels.height());
    image::imageops::crop_imm(&img.pixels, x0, y0, x1 - x0, y1 - y0).to_image()
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding of an RGB8 buffer");
    out.into_inner()
}

/// Lossless PNG bytes of the region.
pub fn crop(img: &PageImage, region: &CropRegion) -> Vec<u8> {
    encode_png(&crop_pixels(img, region))
}

struct CacheInner {
    entries: HashMap<(String, String), (Arc<PageImage>, u64)>,
    clock: u64,
}

/// Bounded least-recently-used cache of decoded pages.
pub struct PageCache {
    capacity: usize,
    inner: Mutex<CacheInner>,
}

impl PageCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new(CacheInner {
                entries: HashMap::new(),
                clock: 0,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner
            .lock()
            .expect("page cache poisoned")
            .entries
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, page: &PageRef) -> bool {
        let key = (page.page_id.clone(), page.image_locator.clone());
        self.inner
            .lock()
            .expect("page cache poisoned")
            .entries
            .contains_key(&key)
    }

    pub fn get_or_load(&self, page: &PageRef, resolver: &PageResolver) -> Result<Arc<PageImage>> {
        let key = (page.page_id.clone(), page.image_locator.clone());
        {
            let mut inner = self.inner.lock().expect("page cache poisoned");
            inner.clock += 1;
            let now = inner.clock;
            if let Some((img, used)) = inner.entries.get_mut(&key) {
                *used = now;
                return Ok(Arc::clone(img));
            }
        }
        // decode outside the lock; a racing thread may decode the same page twice
        let img = Arc::new(resolver.load_page(page)?);
        let mut inner = self.inner.lock().expect("page cache poisoned");
        inner.clock += 1;
        let now = inner.clock;
        if inner.entries.len() >= self.capacity && !inner.entries.contains_key(&key) {
            let oldest = inner
                .entries
                .iter()
                .min_by_key(|(_, (_, used))| *used)
                .map(|(k, _)| k.clone());
            if let Some(k) = oldest {
                inner.entries.remove(&k);
            }
        }
        inner.entries.insert(key, (Arc::clone(&img), now));
        Ok(img)
    }
}

/// Crops pages from disk and embeds the PNG bytes with a provider.
pub struct ImageEvidenceEncoder<P> {
    provider: P,
    resolver: PageResolver,
    cache: PageCache,
}

impl<P: EncoderProvider> ImageEvidenceEncoder<P> {
    pub fn new(provider: P, resolver: PageResolver) -> Self {
        Self {
            provider,
            resolver,
            cache: PageCache::new(DEFAULT_CACHE_PAGES),
        }
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }
}

impl<P: EncoderProvider> EvidenceEncoder for ImageEvidenceEncoder<P> {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.provider.embed_text(text)
    }

    fn embed_region(&self, region: &CropRegion) -> Result<Vec<f64>> {
        let img = self.cache.get_or_load(&region.page, &self.resolver)?;
        self.provider.embed_image(&crop(&img, region))
    }
}

/// Sidecar holding a page's text layout: `p1.png` → `p1.layout.json`.
pub fn layout_sidecar(image_path: &Path) -> PathBuf {
    image_path.with_extension("layout.json")
}

/// The offline `mock:<dim>` encoder over real pages.
///
/// Pages with a layout sidecar are embedded from the text regions the crop
/// overlaps, so step text and crop content can match. Other pages fall back
/// to the pixel histogram of [`MockEncoder`].
pub struct MockPageEncoder {
    pixels: ImageEvidenceEncoder<MockEncoder>,
    layouts: Mutex<HashMap<String, Option<Arc<PageLayout>>>>,
}

impl MockPageEncoder {
    pub fn new(dim: usize, resolver: PageResolver) -> Result<Self> {
        Ok(Self {
            pixels: ImageEvidenceEncoder::new(MockEncoder::new(dim)?, resolver),
            layouts: Mutex::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        self.pixels.provider.dim
    }

    fn layout_for(&self, page: &PageRef) -> Result<Option<Arc<PageLayout>>> {
        if let Some(hit) = self
            .layouts
            .lock()
            .expect("layout map poisoned")
            .get(&page.image_locator)
        {
            return Ok(hit.clone());
        }
        let loaded = match self.pixels.resolver.path_of(&page.image_locator) {
            Some(path) => {
                let side = layout_sidecar(&path);
                if side.is_file() {
                    let text = fs::read_to_string(&side)?;
                    let layout: PageLayout = serde_json::from_str(&text)
                        .map_err(|e| Error::Schema(format!("{}: {e}", side.display())))?;
                    Some(Arc::new(layout))
                } else {
                    None
                }
            }
            None => None,
        };
        self.layouts
            .lock()
            .expect("layout map poisoned")
            .insert(page.image_locator.clone(), loaded.clone());
        Ok(loaded)
    }
}

impl EvidenceEncoder for MockPageEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(mock_encode_text(text, self.dim())?.into_inner())
    }

    fn embed_region(&self, region: &CropRegion) -> Result<Vec<f64>> {
        match self.layout_for(&region.page)? {
            Some(layout) => Ok(mock_encode_image(&layout, &region.bbox, self.dim())?.into_inner()),
            None => self.pixels.embed_region(region),
        }
    }
}
