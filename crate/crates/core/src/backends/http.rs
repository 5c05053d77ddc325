//! Thin HTTP/JSON adapters for remote model servers. Images travel as
//! base64-encoded PNG. Each client bounds in-flight requests and retries
//! failed calls with exponential backoff.

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AugmenterBackend, BackendError, InpainterBackend, MatcherBackend, SegmenterBackend, TaggerBackend, Tagging,
};
use crate::config::BackendConfig;
use crate::mask::{self, SegmentMask};
use crate::model::{Embedding, ObjectTag};
use crate::raster;

/// Environment variable naming a directory for cached adapter responses.
pub const CACHE_ENV: &str = "NEGMINE_CACHE";

struct Gate {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
    gate: Gate,
    cache_dir: Option<PathBuf>,
}

impl HttpClient {
    pub fn new(url: &str, cfg: &BackendConfig) -> Result<Self, BackendError> {
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(BackendError::Http {
                backend: "http",
                message: format!("unsupported url `{url}`"),
            });
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(Self {
            url: url.trim_end_matches('/').to_string(),
            agent,
            retries: cfg.retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            gate: Gate::new(cfg.max_in_flight),
            cache_dir: std::env::var_os(CACHE_ENV).map(PathBuf::from),
        })
    }

    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POST `body` to `url + route`, retrying up to `retries` extra times.
    pub fn post<Req: Serialize, Resp: DeserializeOwned + Serialize>(
        &self,
        backend: &'static str,
        route: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let payload = serde_json::to_vec(body).map_err(|e| BackendError::Http {
            backend,
            message: e.to_string(),
        })?;
        let cache_path = self.cache_dir.as_ref().map(|dir| {
            let mut h = Sha256::new();
            h.update(self.url.as_bytes());
            h.update(route.as_bytes());
            h.update(&payload);
            let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
            dir.join(backend).join(format!("{key}.json"))
        });
        if let Some(path) = &cache_path {
            if let Ok(bytes) = std::fs::read(path) {
                if let Ok(resp) = serde_json::from_slice(&bytes) {
                    return Ok(resp);
                }
            }
        }

        let target = format!("{}{route}", self.url);
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            let result = {
                let _slot = self.gate.acquire();
                self.agent
                    .post(&target)
                    .header("content-type", "application/json")
                    .send(&payload[..])
                    .and_then(|mut r| r.body_mut().read_json::<Resp>())
            };
            match result {
                Ok(resp) => {
                    if let Some(path) = &cache_path {
                        if let Some(parent) = path.parent() {
                            let _ = std::fs::create_dir_all(parent);
                        }
                        if let Ok(bytes) = serde_json::to_vec(&resp) {
                            let _ = std::fs::write(path, bytes);
                        }
                    }
                    return Ok(resp);
                }
                Err(e) => {
                    log::warn!("{backend}: attempt {} to {target} failed: {e}", attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        Err(BackendError::Http {
            backend,
            message: format!("{target}: {last_err} after {} attempts", self.retries + 1),
        })
    }
}

fn image_b64(backend: &'static str, img: &RgbImage) -> Result<String, BackendError> {
    raster::encode_png(img)
        .map(|b| B64.encode(b))
        .map_err(|e| BackendError::failed(backend, e.to_string()))
}

fn decode_b64(backend: &'static str, text: &str) -> Result<Vec<u8>, BackendError> {
    B64.decode(text).map_err(|e| BackendError::failed(backend, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

/// Language-model adapter: `POST {url}` with `{prompt, max_tokens, seed}`,
/// answered by `{text}`.
pub struct HttpAugmenter {
    client: HttpClient,
    max_tokens: u32,
    seed: u64,
}

impl HttpAugmenter {
    pub fn new(client: HttpClient, max_tokens: u32, seed: u64) -> Self {
        Self {
            client,
            max_tokens,
            seed,
        }
    }
}

impl AugmenterBackend for HttpAugmenter {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let req = CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens: self.max_tokens,
            seed: self.seed,
        };
        let resp: CompletionResponse = self.client.post("http-augmenter", "", &req)?;
        Ok(resp.text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRequest {
    image_png_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaggingResponse {
    tags: Vec<String>,
    caption: String,
}

pub struct HttpTagger {
    client: HttpClient,
}

impl HttpTagger {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl TaggerBackend for HttpTagger {
    fn tag(&self, image: &RgbImage) -> Result<Tagging, BackendError> {
        let req = ImageRequest {
            image_png_base64: image_b64("http-tagger", image)?,
        };
        let resp: TaggingResponse = self.client.post("http-tagger", "", &req)?;
        if resp.caption.trim().is_empty() {
            return Err(BackendError::failed("http-tagger", "empty caption"));
        }
        Ok(Tagging {
            tags: resp.tags.iter().map(|t| ObjectTag::detected(t)).collect(),
            caption: resp.caption,
        }
        .dedup())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRequest {
    image_png_base64: String,
    tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskResponse {
    mask_png_base64: String,
}

pub struct HttpSegmenter {
    client: HttpClient,
}

impl HttpSegmenter {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl SegmenterBackend for HttpSegmenter {
    fn segment(&self, image_id: &str, image: &RgbImage, tag: &ObjectTag) -> Result<SegmentMask, BackendError> {
        let req = SegmentRequest {
            image_png_base64: image_b64("http-segmenter", image)?,
            tag: tag.label.clone(),
        };
        let resp: MaskResponse = self.client.post("http-segmenter", "", &req)?;
        let bytes = decode_b64("http-segmenter", &resp.mask_png_base64)?;
        let bitmap = mask::decode_png(&bytes).map_err(|e| BackendError::failed("http-segmenter", e.to_string()))?;
        let m = SegmentMask::new(image_id, tag.clone(), bitmap);
        m.check_dimensions(image.width(), image.height())
            .map_err(|e| BackendError::Dimensions {
                backend: "http-segmenter",
                message: e.to_string(),
            })?;
        Ok(m)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InpaintRequest {
    image_png_base64: String,
    mask_png_base64: String,
    prompt: String,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageResponse {
    image_png_base64: String,
}

pub struct HttpInpainter {
    client: HttpClient,
}

impl HttpInpainter {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl InpainterBackend for HttpInpainter {
    fn inpaint(&self, image: &RgbImage, m: &SegmentMask, portrayal: &str, seed: u64) -> Result<RgbImage, BackendError> {
        let mask_png = mask::encode_png(&m.bitmap).map_err(|e| BackendError::failed("http-inpainter", e.to_string()))?;
        let req = InpaintRequest {
            image_png_base64: image_b64("http-inpainter", image)?,
            mask_png_base64: B64.encode(mask_png),
            prompt: portrayal.to_string(),
            seed,
        };
        let resp: ImageResponse = self.client.post("http-inpainter", "", &req)?;
        let bytes = decode_b64("http-inpainter", &resp.image_png_base64)?;
        let out = raster::decode_png(&bytes).map_err(|e| BackendError::failed("http-inpainter", e.to_string()))?;
        if out.dimensions() != image.dimensions() {
            return Err(BackendError::Dimensions {
                backend: "http-inpainter",
                message: format!("returned {:?} for input {:?}", out.dimensions(), image.dimensions()),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ItmRequest {
    image_png_base64: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreResponse {
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TextRequest {
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f64>,
}

/// Matcher adapter with routes `/itm`, `/embed_image` and `/embed_text`.
pub struct HttpMatcher {
    client: HttpClient,
}

impl HttpMatcher {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl MatcherBackend for HttpMatcher {
    fn itm_score(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError> {
        let req = ItmRequest {
            image_png_base64: image_b64("http-matcher", image)?,
            text: text.to_string(),
        };
        let resp: ScoreResponse = self.client.post("http-matcher", "/itm", &req)?;
        Ok(resp.score)
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Embedding, BackendError> {
        let req = ImageRequest {
            image_png_base64: image_b64("http-matcher", image)?,
        };
        let resp: EmbeddingResponse = self.client.post("http-matcher", "/embed_image", &req)?;
        Ok(Embedding(resp.embedding))
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, BackendError> {
        let req = TextRequest { text: text.to_string() };
        let resp: EmbeddingResponse = self.client.post("http-matcher", "/embed_text", &req)?;
        Ok(Embedding(resp.embedding))
    }
}
