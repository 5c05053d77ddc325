//! Interfaces to the heavy models the pipeline orchestrates (tagger,
//! segmenter, language model, inpainter, image-text matcher), with
//! deterministic mocks and thin HTTP adapters behind the same traits.

pub mod fixtures;
pub mod http;
pub mod mock;

use std::sync::Arc;

use image::RgbImage;
use thiserror::Error;

use crate::config::{BackendConfig, BackendKind};
use crate::mask::SegmentMask;
use crate::model::{Embedding, ObjectTag};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{backend}: {message}")]
    Failed { backend: &'static str, message: String },
    #[error("{backend}: input dimension mismatch: {message}")]
    Dimensions { backend: &'static str, message: String },
    #[error("{backend}: empty input")]
    EmptyInput { backend: &'static str },
    #[error("{backend}: http: {message}")]
    Http { backend: &'static str, message: String },
}

impl BackendError {
    pub fn failed(backend: &'static str, message: impl Into<String>) -> Self {
        Self::Failed {
            backend,
            message: message.into(),
        }
    }
}

/// Tags detected in an image plus a caption describing the whole scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tagging {
    pub tags: Vec<ObjectTag>,
    pub caption: String,
}

impl Tagging {
    /// Drops duplicate labels, keeping the first occurrence.
    pub fn dedup(mut self) -> Self {
        let mut seen = std::collections::HashSet::new();
        self.tags.retain(|t| !t.label.is_empty() && seen.insert(t.label.clone()));
        self
    }
}

pub trait TaggerBackend: Send + Sync {
    fn tag(&self, image: &RgbImage) -> Result<Tagging, BackendError>;
}

pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, image_id: &str, image: &RgbImage, tag: &ObjectTag) -> Result<SegmentMask, BackendError>;
}

/// A text-completion model driven by in-context examples.
pub trait AugmenterBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

pub trait InpainterBackend: Send + Sync {
    fn inpaint(&self, image: &RgbImage, mask: &SegmentMask, portrayal: &str, seed: u64) -> Result<RgbImage, BackendError>;
}

/// Image-text matching head plus the two encoders of a dual-encoder model.
pub trait MatcherBackend: Send + Sync {
    fn itm_score(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError>;
    fn embed_image(&self, image: &RgbImage) -> Result<Embedding, BackendError>;
    fn embed_text(&self, text: &str) -> Result<Embedding, BackendError>;
}

/// The full set of backends one pipeline run uses.
#[derive(Clone)]
pub struct Backends {
    pub tagger: Arc<dyn TaggerBackend>,
    pub segmenter: Arc<dyn SegmenterBackend>,
    pub augmenter: Arc<dyn AugmenterBackend>,
    pub inpainter: Arc<dyn InpainterBackend>,
    pub matcher: Arc<dyn MatcherBackend>,
}

impl Backends {
    pub fn mock(seed: u64, embedding_dim: usize) -> Self {
        Self {
            tagger: Arc::new(mock::MockTagger::new(seed)),
            segmenter: Arc::new(mock::MockSegmenter::new(seed)),
            augmenter: Arc::new(mock::MockAugmenter::new(seed)),
            inpainter: Arc::new(mock::MockInpainter),
            matcher: Arc::new(mock::MockMatcher::with_fixtures(embedding_dim, seed)),
        }
    }

    /// Mocks everywhere, replaced by an HTTP adapter for each configured url
    /// when `kind = real`.
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let mut b = Self::mock(cfg.mock_seed, cfg.embedding_dim);
        if cfg.kind == BackendKind::Mock {
            return Ok(b);
        }
        let client = |url: &str| http::HttpClient::new(url, cfg);
        if let Some(url) = &cfg.tagger_url {
            b.tagger = Arc::new(http::HttpTagger::new(client(url)?));
        }
        if let Some(url) = &cfg.segmenter_url {
            b.segmenter = Arc::new(http::HttpSegmenter::new(client(url)?));
        }
        if let Some(url) = &cfg.augmenter_url {
            b.augmenter = Arc::new(http::HttpAugmenter::new(client(url)?, cfg.max_tokens, cfg.mock_seed));
        }
        if let Some(url) = &cfg.inpainter_url {
            b.inpainter = Arc::new(http::HttpInpainter::new(client(url)?));
        }
        if let Some(url) = &cfg.matcher_url {
            b.matcher = Arc::new(http::HttpMatcher::new(client(url)?));
        }
        Ok(b)
    }
}
