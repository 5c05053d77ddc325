//! Domain records shared by every stage: source pairs, tags, concept
//! variations, generated samples and their filter scores.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An invariant violation, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid `{field}`: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Prefix the field path, e.g. `mask` + `coverage_pct` -> `mask.coverage_pct`.
    pub fn within(mut self, parent: &str) -> Self {
        self.field = format!("{parent}.{}", self.field);
        self
    }
}

pub trait Validate {
    fn validate(&self) -> Result<(), ValidationError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl Validate for ImageRef {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must be non-empty"));
        }
        if self.width == 0 {
            return Err(ValidationError::new("width", "must be > 0"));
        }
        if self.height == 0 {
            return Err(ValidationError::new("height", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A human-annotated image-caption pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePair {
    pub id: String,
    pub image: ImageRef,
    pub caption: String,
    /// Scene caption produced by the tagger; covers every detected tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_caption: Option<String>,
    pub split: Split,
}

impl Validate for SourcePair {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must be non-empty"));
        }
        if self.caption.trim().is_empty() {
            return Err(ValidationError::new("caption", "must be non-empty"));
        }
        self.image.validate().map_err(|e| e.within("image"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSource {
    Detector,
    Manual,
}

/// A detected object label. Labels are stored trimmed, lowercase and with
/// single spaces between words.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectTag {
    pub label: String,
    pub source: TagSource,
}

pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl ObjectTag {
    pub fn new(label: &str, source: TagSource) -> Self {
        Self {
            label: normalize_label(label),
            source,
        }
    }

    pub fn detected(label: &str) -> Self {
        Self::new(label, TagSource::Detector)
    }

    /// Filesystem- and id-safe form of the label.
    pub fn slug(&self) -> String {
        self.label
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '-' })
            .collect()
    }
}

impl fmt::Display for ObjectTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl Validate for ObjectTag {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.label.is_empty() {
            return Err(ValidationError::new("label", "must be non-empty"));
        }
        if normalize_label(&self.label) != self.label {
            return Err(ValidationError::new(
                "label",
                format!("`{}` is not lowercase-normalized", self.label),
            ));
        }
        Ok(())
    }
}

/// One LLM-proposed alternative for an object: a detailed portrayal that
/// drives inpainting and a short keyword that is substituted into the caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVariation {
    pub object: ObjectTag,
    pub portrayal: String,
    pub keyword: String,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl ConceptVariation {
    pub fn validate_with_limit(&self, keyword_word_limit: usize) -> Result<(), ValidationError> {
        self.object.validate().map_err(|e| e.within("object"))?;
        if self.portrayal.trim().is_empty() {
            return Err(ValidationError::new("portrayal", "must be non-empty"));
        }
        if self.keyword.trim().is_empty() {
            return Err(ValidationError::new("keyword", "must be non-empty"));
        }
        let words = word_count(&self.keyword);
        if words > keyword_word_limit {
            return Err(ValidationError::new(
                "keyword",
                format!("{words} words exceeds the limit of {keyword_word_limit}"),
            ));
        }
        Ok(())
    }
}

/// Reference to a mask image stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRef {
    pub path: PathBuf,
    pub coverage_pct: f64,
}

impl Validate for MaskRef {
    fn validate(&self) -> Result<(), ValidationError> {
        if !(0.0..=100.0).contains(&self.coverage_pct) {
            return Err(ValidationError::new(
                "coverage_pct",
                format!("{} outside [0, 100]", self.coverage_pct),
            ));
        }
        Ok(())
    }
}

/// Where the keyword landed in the edited caption.
///
/// `start..end` is the byte span of the keyword inside the edited caption and
/// `original` the text it replaced, so the pre-edit caption is recoverable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEdit {
    pub start: usize,
    pub end: usize,
    pub original: String,
    /// The tagger's scene caption was edited because the tag is absent from
    /// the human caption.
    pub used_fallback: bool,
    /// The tag occurs more than once; only the first occurrence was replaced.
    pub multi_instance: bool,
}

impl CaptionEdit {
    /// Undo the edit on `edited`, returning the caption it was derived from.
    pub fn revert(&self, edited: &str) -> Option<String> {
        let head = edited.get(..self.start)?;
        let tail = edited.get(self.end..)?;
        Some(format!("{head}{}{tail}", self.original))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub itm_variation: f64,
    pub itm_original: f64,
    pub area_score_pct: f64,
    /// Absent when the mask is empty (not computable).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_in_mask: Option<f64>,
    pub passed: bool,
}

impl FilterScores {
    pub fn validate_against(&self, itm_threshold: f64, area_threshold: f64) -> Result<(), ValidationError> {
        self.validate()?;
        let expected = self.itm_variation > itm_threshold && self.area_score_pct > area_threshold;
        if expected != self.passed {
            return Err(ValidationError::new(
                "passed",
                format!("recorded {} but gates give {expected}", self.passed),
            ));
        }
        Ok(())
    }
}

impl Validate for FilterScores {
    fn validate(&self) -> Result<(), ValidationError> {
        if !self.itm_variation.is_finite() {
            return Err(ValidationError::new("itm_variation", "must be finite"));
        }
        if !self.itm_original.is_finite() {
            return Err(ValidationError::new("itm_original", "must be finite"));
        }
        if !(0.0..=100.0).contains(&self.area_score_pct) {
            return Err(ValidationError::new(
                "area_score_pct",
                format!("{} outside [0, 100]", self.area_score_pct),
            ));
        }
        if let Some(delta) = self.delta_in_mask {
            if !(delta >= 0.0 && delta.is_finite()) {
                return Err(ValidationError::new("delta_in_mask", format!("{delta} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Raw,
    Passed,
    Rejected,
    Accepted,
    HumanRejected,
}

impl SampleStatus {
    fn stage(self) -> u8 {
        match self {
            Self::Raw => 0,
            Self::Passed | Self::Rejected => 1,
            Self::Accepted | Self::HumanRejected => 2,
        }
    }

    /// Whether `self -> next` respects raw -> {passed, rejected} ->
    /// {accepted, human_rejected}. Staying put is always allowed, and human
    /// verdicts may replace one another since later decisions win.
    pub fn can_transition_to(self, next: SampleStatus) -> bool {
        use SampleStatus::*;
        if self == next {
            return true;
        }
        match (self, next) {
            (Raw, Passed | Rejected) => true,
            (Passed, Accepted | HumanRejected) => true,
            (Accepted, HumanRejected) | (HumanRejected, Accepted) => true,
            _ => false,
        }
    }

    pub fn is_human_reviewed(self) -> bool {
        self.stage() == 2
    }
}

impl fmt::Display for SampleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Raw => "raw",
            Self::Passed => "passed",
            Self::Rejected => "rejected",
            Self::Accepted => "accepted",
            Self::HumanRejected => "human_rejected",
        };
        f.write_str(s)
    }
}

/// One synthesized hard-negative variant of a source pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub id: String,
    pub source_pair_id: String,
    pub source_caption: String,
    pub source_image: ImageRef,
    pub tag: ObjectTag,
    pub variation: ConceptVariation,
    pub image: ImageRef,
    pub mask: MaskRef,
    pub caption: String,
    pub edit: CaptionEdit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<FilterScores>,
    pub status: SampleStatus,
}

impl Validate for GeneratedSample {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must be non-empty"));
        }
        if self.source_pair_id.is_empty() {
            return Err(ValidationError::new("source_pair_id", "must be non-empty"));
        }
        if self.caption.trim().is_empty() {
            return Err(ValidationError::new("caption", "must be non-empty"));
        }
        self.source_image.validate().map_err(|e| e.within("source_image"))?;
        self.image.validate().map_err(|e| e.within("image"))?;
        self.tag.validate().map_err(|e| e.within("tag"))?;
        if self.variation.portrayal.trim().is_empty() {
            return Err(ValidationError::new("variation.portrayal", "must be non-empty"));
        }
        if self.variation.keyword.trim().is_empty() {
            return Err(ValidationError::new("variation.keyword", "must be non-empty"));
        }
        self.mask.validate().map_err(|e| e.within("mask"))?;
        if (self.image.width, self.image.height) != (self.source_image.width, self.source_image.height) {
            return Err(ValidationError::new(
                "image",
                "dimensions differ from the source image",
            ));
        }
        if self.edit.start > self.edit.end || self.caption.get(self.edit.start..self.edit.end).is_none() {
            return Err(ValidationError::new("edit", "span does not index the caption"));
        }
        if !self.edit.used_fallback && self.caption == self.source_caption {
            return Err(ValidationError::new(
                "caption",
                "identical to the source caption without the fallback path",
            ));
        }
        if let Some(scores) = &self.scores {
            scores.validate().map_err(|e| e.within("scores"))?;
        }
        match (self.status, &self.scores) {
            (SampleStatus::Raw, _) => {}
            (_, None) => {
                return Err(ValidationError::new(
                    "scores",
                    format!("status `{}` requires filter scores", self.status),
                ))
            }
            (SampleStatus::Passed | SampleStatus::Accepted | SampleStatus::HumanRejected, Some(s)) if !s.passed => {
                return Err(ValidationError::new(
                    "status",
                    format!("`{}` but scores did not pass", self.status),
                ))
            }
            (SampleStatus::Rejected, Some(s)) if s.passed => {
                return Err(ValidationError::new("status", "`rejected` but scores passed"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// All variants generated for one object of one source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationGroup {
    pub source_pair_id: String,
    pub tag: ObjectTag,
    pub samples: Vec<GeneratedSample>,
}

impl VariationGroup {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Regroup a flat manifest by (source pair, tag), keeping first-seen order.
    pub fn group_samples(samples: Vec<GeneratedSample>) -> Vec<VariationGroup> {
        let mut groups: Vec<VariationGroup> = Vec::new();
        let mut index: std::collections::HashMap<(String, String), usize> = Default::default();
        for sample in samples {
            let key = (sample.source_pair_id.clone(), sample.tag.label.clone());
            match index.get(&key) {
                Some(&i) => groups[i].samples.push(sample),
                None => {
                    index.insert(key, groups.len());
                    groups.push(VariationGroup {
                        source_pair_id: sample.source_pair_id.clone(),
                        tag: sample.tag.clone(),
                        samples: vec![sample],
                    });
                }
            }
        }
        groups
    }

    pub fn into_samples(groups: Vec<VariationGroup>) -> Vec<GeneratedSample> {
        groups.into_iter().flat_map(|g| g.samples).collect()
    }
}

impl Validate for VariationGroup {
    fn validate(&self) -> Result<(), ValidationError> {
        let Some(first) = self.samples.first() else {
            return Err(ValidationError::new("samples", "group must hold at least one sample"));
        };
        let dims = (first.image.width, first.image.height);
        for (i, s) in self.samples.iter().enumerate() {
            if (s.image.width, s.image.height) != dims {
                return Err(ValidationError::new(
                    format!("samples[{i}].image"),
                    "dimensions differ within the group",
                ));
            }
            if s.source_pair_id != self.source_pair_id || s.tag.label != self.tag.label {
                return Err(ValidationError::new(
                    format!("samples[{i}]"),
                    "belongs to another (source pair, tag)",
                ));
            }
        }
        Ok(())
    }
}

/// A d-dimensional embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Cosine similarity; `None` when either vector has zero norm.
    pub fn cosine(&self, other: &Embedding) -> Option<f64> {
        cosine(&self.0, &other.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_normalized() {
        let tag = ObjectTag::detected("  Bald   Eagle ");
        assert_eq!(tag.label, "bald eagle");
        assert!(tag.validate().is_ok());
        let raw = ObjectTag {
            label: "Bird".into(),
            source: TagSource::Manual,
        };
        assert_eq!(raw.validate().unwrap_err().field, "label");
    }

    #[test]
    fn status_graph_is_monotone() {
        use SampleStatus::*;
        assert!(Raw.can_transition_to(Passed));
        assert!(Raw.can_transition_to(Rejected));
        assert!(Passed.can_transition_to(Accepted));
        assert!(Accepted.can_transition_to(HumanRejected));
        assert!(!Rejected.can_transition_to(Accepted));
        assert!(!Passed.can_transition_to(Raw));
        assert!(!Raw.can_transition_to(Accepted));
        assert!(!Accepted.can_transition_to(Passed));
    }

    #[test]
    fn edit_reverts() {
        let edit = CaptionEdit {
            start: 2,
            end: 12,
            original: "seagull".into(),
            used_fallback: false,
            multi_instance: false,
        };
        assert_eq!(edit.revert("a bald eagle flying").unwrap(), "a seagull flying");
    }

    #[test]
    fn keyword_limit() {
        let v = ConceptVariation {
            object: ObjectTag::detected("bird"),
            portrayal: "a black and white bald eagle".into(),
            keyword: "very large bald eagle".into(),
        };
        assert_eq!(v.validate_with_limit(3).unwrap_err().field, "keyword");
        assert!(v.validate_with_limit(4).is_ok());
    }
}
