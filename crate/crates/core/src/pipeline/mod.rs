//! Hard-negative generation: scene decomposition, concept augmentation,
//! caption editing and inpainting, run over a manifest of source pairs.

pub mod caption;
pub mod decompose;
pub mod generate;
pub mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends};
use crate::config::{ConfigError, GenerationConfig};
use crate::manifest;
use crate::mask::MaskError;
use crate::model::{GeneratedSample, ObjectTag, SourcePair, VariationGroup};
use crate::raster::{self, RasterError};

pub use caption::{edit_caption, EditError, EditedCaption};
pub use decompose::{decompose_scene, sample_objects, DroppedTag, SceneDecomposition};
pub use generate::{generate_group, DropReason, GroupInput, GroupOutcome};
pub use prompt::{build_prompt, parse_variations, PromptTemplate, TemplateError};

/// Error taxonomy for generated samples that went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureMode {
    #[serde(rename = "object tag leads to wrong mask")]
    WrongMask,
    #[serde(rename = "excessive segmentation")]
    ExcessiveSegmentation,
    #[serde(rename = "poor inpainting")]
    PoorInpainting,
    #[serde(rename = "unusual state of the object")]
    UnusualState,
    #[serde(rename = "confusion due to multiple instances")]
    MultipleInstances,
    #[serde(rename = "high complexity in the image")]
    HighComplexity,
    #[serde(rename = "small mask size")]
    SmallMask,
    #[serde(rename = "lack of descriptiveness in portrayal")]
    LackOfDescriptiveness,
    #[serde(rename = "animate objects")]
    AnimateObjects,
}

impl FailureMode {
    pub const ALL: [FailureMode; 9] = [
        Self::WrongMask,
        Self::ExcessiveSegmentation,
        Self::PoorInpainting,
        Self::UnusualState,
        Self::MultipleInstances,
        Self::HighComplexity,
        Self::SmallMask,
        Self::LackOfDescriptiveness,
        Self::AnimateObjects,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::WrongMask => "object tag leads to wrong mask",
            Self::ExcessiveSegmentation => "excessive segmentation",
            Self::PoorInpainting => "poor inpainting",
            Self::UnusualState => "unusual state of the object",
            Self::MultipleInstances => "confusion due to multiple instances",
            Self::HighComplexity => "high complexity in the image",
            Self::SmallMask => "small mask size",
            Self::LackOfDescriptiveness => "lack of descriptiveness in portrayal",
            Self::AnimateObjects => "animate objects",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == label)
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Masks covering more than this share of the image are tallied as
/// excessive segmentation.
pub const EXCESSIVE_COVERAGE_PCT: f64 = 90.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{item}: {source}")]
    Backend {
        item: String,
        #[source]
        source: BackendError,
    },
    #[error("{item}: {source}")]
    Image {
        item: String,
        #[source]
        source: RasterError,
    },
    #[error("{item}: {source}")]
    Mask {
        item: String,
        #[source]
        source: MaskError,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{item}: no variations to generate")]
    NoVariations { item: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub pairs_in: usize,
    pub pairs_decomposed: usize,
    pub tags_detected: usize,
    pub tags_dropped: usize,
    pub objects_sampled: usize,
    pub prompts_sent: usize,
    pub variations_parsed: usize,
    pub response_lines_rejected: usize,
    pub empty_responses: usize,
    pub caption_fallbacks: usize,
    pub edit_failures: usize,
    pub inpaint_failures: usize,
    pub samples_generated: usize,
    pub groups_generated: usize,
}

impl StageCounters {
    fn merge(&mut self, o: &StageCounters) {
        self.pairs_in += o.pairs_in;
        self.pairs_decomposed += o.pairs_decomposed;
        self.tags_detected += o.tags_detected;
        self.tags_dropped += o.tags_dropped;
        self.objects_sampled += o.objects_sampled;
        self.prompts_sent += o.prompts_sent;
        self.variations_parsed += o.variations_parsed;
        self.response_lines_rejected += o.response_lines_rejected;
        self.empty_responses += o.empty_responses;
        self.caption_fallbacks += o.caption_fallbacks;
        self.edit_failures += o.edit_failures;
        self.inpaint_failures += o.inpaint_failures;
        self.samples_generated += o.samples_generated;
        self.groups_generated += o.groups_generated;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub item: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub counters: StageCounters,
    pub failure_modes: BTreeMap<FailureMode, usize>,
    pub errors: Vec<ItemError>,
}

impl RunReport {
    pub fn tally(&mut self, mode: FailureMode, n: usize) {
        if n > 0 {
            *self.failure_modes.entry(mode).or_default() += n;
        }
    }

    fn error(&mut self, item: &str, stage: &str, message: impl ToString) {
        self.errors.push(ItemError {
            item: item.to_string(),
            stage: stage.to_string(),
            message: message.to_string(),
        });
    }

    pub fn merge(&mut self, other: &RunReport) {
        self.counters.merge(&other.counters);
        for (mode, n) in &other.failure_modes {
            self.tally(*mode, *n);
        }
        self.errors.extend(other.errors.iter().cloned());
    }
}

/// Generated groups in (pair, sampled object) order plus the run report.
#[derive(Debug)]
pub struct GenerationOutput {
    pub groups: Vec<VariationGroup>,
    /// Input pairs with their tagger captions filled in and image paths
    /// re-anchored to the output directory.
    pub pairs: Vec<SourcePair>,
    pub report: RunReport,
}

impl GenerationOutput {
    pub fn samples(&self) -> Vec<GeneratedSample> {
        self.groups.iter().flat_map(|g| g.samples.iter().cloned()).collect()
    }
}

pub struct GenerationRun<'a> {
    pub config: &'a GenerationConfig,
    pub template: &'a PromptTemplate,
    pub backends: &'a Backends,
    /// Directory that relative image paths in the pairs are resolved against.
    pub input_dir: &'a Path,
    pub out_dir: &'a Path,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
}

struct Unit<'a> {
    pair: &'a SourcePair,
    image: &'a image::RgbImage,
    decomposition: &'a SceneDecomposition,
    tag: ObjectTag,
}

fn objects_seed(seed: u64, pair_id: &str) -> u64 {
    raster::derive_seed(&[&seed.to_le_bytes(), b"objects", pair_id.as_bytes()])
}

fn run_unit(run: &GenerationRun<'_>, unit: &Unit<'_>) -> (Option<VariationGroup>, RunReport) {
    let mut report = RunReport::default();
    let cfg = run.config;
    let pair = unit.pair;
    let item = format!("{}/{}", pair.id, unit.tag.label);
    let Some(mask) = unit.decomposition.mask_for(&unit.tag) else {
        return (None, report);
    };
    if mask.coverage_pct > EXCESSIVE_COVERAGE_PCT {
        report.tally(FailureMode::ExcessiveSegmentation, 1);
    }

    let prompt = match build_prompt(
        run.template,
        &pair.caption,
        &unit.tag,
        cfg.variations_per_object,
        cfg.keyword_word_limit,
    ) {
        Ok(p) => p,
        Err(e) => {
            report.error(&item, "prompt", e);
            return (None, report);
        }
    };
    report.counters.prompts_sent += 1;
    let response = match run.backends.augmenter.complete(&prompt) {
        Ok(r) => r,
        Err(e) => {
            report.error(&item, "augment", e);
            return (None, report);
        }
    };
    let parsed = match parse_variations(&response, &unit.tag, cfg.variations_per_object, cfg.keyword_word_limit) {
        Ok(p) => p,
        Err(e) => {
            report.counters.empty_responses += 1;
            report.counters.response_lines_rejected += e.rejected.len();
            log::info!("{item}: {e}");
            return (None, report);
        }
    };
    report.counters.variations_parsed += parsed.variations.len();
    report.counters.response_lines_rejected += parsed.rejected.len();

    let input = GroupInput {
        pair,
        source_image: unit.image,
        mask,
        variations: &parsed.variations,
        seed: cfg.seed,
        out_dir: run.out_dir,
    };
    let outcome = match generate_group(&input, run.backends.inpainter.as_ref()) {
        Ok(o) => o,
        Err(e) => {
            report.error(&item, "generate", e);
            return (None, report);
        }
    };
    for d in &outcome.dropped {
        match &d.reason {
            DropReason::Edit(e) => {
                report.counters.edit_failures += 1;
                report.error(&item, "edit", e);
            }
            DropReason::Inpaint(msg) => {
                report.counters.inpaint_failures += 1;
                report.tally(FailureMode::PoorInpainting, 1);
                report.error(&item, "inpaint", msg);
            }
        }
    }
    let group = outcome.group;
    report.counters.caption_fallbacks += group.samples.iter().filter(|s| s.edit.used_fallback).count();
    report.tally(
        FailureMode::MultipleInstances,
        group.samples.iter().filter(|s| s.edit.multi_instance).count(),
    );
    if group.samples.is_empty() {
        return (None, report);
    }
    report.counters.samples_generated += group.samples.len();
    report.counters.groups_generated += 1;
    (Some(group), report)
}

/// Decompose every pair, sample M objects, then augment, edit and inpaint
/// each (pair, object) unit on a worker pool. Per-item failures are logged
/// and counted; output order is (pair, sampled object, variation index)
/// regardless of scheduling.
pub fn run_generation(pairs: &[SourcePair], run: &GenerationRun<'_>) -> Result<GenerationOutput, PipelineError> {
    run.config.validate()?;
    run.template.validate()?;
    std::fs::create_dir_all(run.out_dir).map_err(|source| PipelineError::Io {
        path: run.out_dir.to_path_buf(),
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.jobs)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;

    pool.install(|| {
        let decomposed: Vec<(Option<(SourcePair, image::RgbImage, SceneDecomposition)>, RunReport)> = pairs
            .par_iter()
            .map(|pair| {
                let mut report = RunReport::default();
                report.counters.pairs_in = 1;
                let path = manifest::resolve(run.input_dir, &pair.image.path);
                let image = match raster::load_rgb(&path) {
                    Ok(img) => img,
                    Err(e) => {
                        report.error(&pair.id, "load", e);
                        return (None, report);
                    }
                };
                if image.dimensions() != (pair.image.width, pair.image.height) {
                    report.error(
                        &pair.id,
                        "load",
                        format!(
                            "image is {:?}, manifest says {:?}",
                            image.dimensions(),
                            (pair.image.width, pair.image.height)
                        ),
                    );
                    return (None, report);
                }
                let mut resolved = pair.clone();
                resolved.image.path = manifest::rebase(&pair.image.path, run.input_dir, run.out_dir);
                match decompose_scene(&resolved, &image, run.backends.tagger.as_ref(), run.backends.segmenter.as_ref()) {
                    Ok(d) => {
                        report.counters.pairs_decomposed = 1;
                        report.counters.tags_detected = d.tags.len();
                        report.counters.tags_dropped = d.dropped.len();
                        for dropped in &d.dropped {
                            report.tally(dropped.mode, 1);
                        }
                        (Some((d.pair.clone(), image, d)), report)
                    }
                    Err(e) => {
                        report.error(&pair.id, "decompose", e);
                        (None, report)
                    }
                }
            })
            .collect();

        let mut report = RunReport::default();
        let mut units = Vec::new();
        let mut out_pairs = Vec::new();
        for (entry, r) in &decomposed {
            report.merge(r);
            let Some((pair, image, d)) = entry else { continue };
            out_pairs.push(pair.clone());
            let chosen = sample_objects(&d.retained_tags(), run.config.objects_per_image, objects_seed(run.config.seed, &pair.id));
            report.counters.objects_sampled += chosen.len();
            units.extend(chosen.into_iter().map(|tag| Unit {
                pair,
                image,
                decomposition: d,
                tag,
            }));
        }

        let results: Vec<_> = units.par_iter().map(|u| run_unit(run, u)).collect();
        let mut groups = Vec::new();
        for (group, r) in results {
            report.merge(&r);
            groups.extend(group);
        }
        Ok(GenerationOutput {
            groups,
            pairs: out_pairs,
            report,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_mode_labels_round_trip() {
        for m in FailureMode::ALL {
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.label()));
            assert_eq!(serde_json::from_str::<FailureMode>(&json).unwrap(), m);
            assert_eq!(FailureMode::from_label(m.label()), Some(m));
        }
        let mut r = RunReport::default();
        r.tally(FailureMode::SmallMask, 2);
        let json = serde_json::to_string(&r.failure_modes).unwrap();
        assert_eq!(json, r#"{"small mask size":2}"#);
    }

    #[test]
    fn single_pair_single_variation() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        let pairs = crate::backends::fixtures::write_corpus(&input).unwrap();
        let cfg = GenerationConfig {
            objects_per_image: 1,
            variations_per_object: 1,
            ..GenerationConfig::default()
        };
        let backends = Backends::mock(7, 16);
        let template = PromptTemplate::default_template();
        let out = run_generation(
            &pairs[..1],
            &GenerationRun {
                config: &cfg,
                template: &template,
                backends: &backends,
                input_dir: &input,
                out_dir: &dir.path().join("out"),
                jobs: 2,
            },
        )
        .unwrap();
        assert!(out.samples().len() <= 1);
        assert_eq!(out.report.counters.pairs_in, 1);
    }
}
