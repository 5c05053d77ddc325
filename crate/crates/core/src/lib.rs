//! Generative hard-negative mining for image-text pairs.
//!
//! Scene decomposition, concept augmentation, caption editing and
//! inpainting produce groups of minimally different variants of a source
//! pair; statistical filters gate them; a contrastive finetuning loop mixes
//! them with real pairs; and compositional metrics score the result. Every
//! heavy model sits behind a backend trait with a deterministic mock.

pub mod analysis;
pub mod backends;
pub mod config;
pub mod curation;
pub mod evaluation;
pub mod filtering;
pub mod manifest;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod training;

pub use config::Config;
pub use model::{
    ConceptVariation, Embedding, FilterScores, GeneratedSample, ImageRef, ObjectTag, SampleStatus, SourcePair, Split,
    VariationGroup,
};
