use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FailureMode, PipelineError};
use crate::backends::{SegmenterBackend, TaggerBackend};
use crate::mask::SegmentMask;
use crate::model::{ObjectTag, SourcePair};

#[derive(Debug, Clone)]
pub struct DroppedTag {
    pub tag: ObjectTag,
    pub mode: FailureMode,
    pub detail: String,
}

/// Tags, scene caption and one non-empty mask per retained tag.
#[derive(Debug, Clone)]
pub struct SceneDecomposition {
    /// The input pair with `generated_caption` filled in.
    pub pair: SourcePair,
    pub tags: Vec<ObjectTag>,
    pub masks: Vec<SegmentMask>,
    pub dropped: Vec<DroppedTag>,
}

impl SceneDecomposition {
    pub fn retained_tags(&self) -> Vec<ObjectTag> {
        self.masks.iter().map(|m| m.tag.clone()).collect()
    }

    pub fn mask_for(&self, tag: &ObjectTag) -> Option<&SegmentMask> {
        self.masks.iter().find(|m| m.tag.label == tag.label)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Tag the image, then segment every tag. Tags whose mask comes back empty
/// or mis-sized are dropped as wrong-mask failures; backend errors abort.
pub fn decompose_scene(
    pair: &SourcePair,
    image: &RgbImage,
    tagger: &dyn TaggerBackend,
    segmenter: &dyn SegmenterBackend,
) -> Result<SceneDecomposition, PipelineError> {
    let backend_err = |source| PipelineError::Backend {
        item: pair.image.id.clone(),
        source,
    };
    let tagging = tagger.tag(image).map_err(backend_err)?.dedup();
    let mut pair = pair.clone();
    pair.generated_caption = Some(tagging.caption.clone());

    let mut masks = Vec::new();
    let mut dropped = Vec::new();
    for tag in &tagging.tags {
        let mask = segmenter.segment(&pair.image.id, image, tag).map_err(backend_err)?;
        if let Err(e) = mask.check_dimensions(image.width(), image.height()) {
            dropped.push(DroppedTag {
                tag: tag.clone(),
                mode: FailureMode::WrongMask,
                detail: e.to_string(),
            });
        } else if mask.bitmap.is_empty() {
            log::debug!("{}: tag `{}` segmented to an empty mask", pair.id, tag);
            dropped.push(DroppedTag {
                tag: tag.clone(),
                mode: FailureMode::WrongMask,
                detail: "empty mask".to_string(),
            });
        } else {
            masks.push(mask);
        }
    }
    Ok(SceneDecomposition {
        pair,
        tags: tagging.tags,
        masks,
        dropped,
    })
}

/// Draw `min(m, tags.len())` tags uniformly without replacement.
pub fn sample_objects(tags: &[ObjectTag], m: usize, seed: u64) -> Vec<ObjectTag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tags.choose_multiple(&mut rng, m.min(tags.len())).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::fixtures;
    use crate::backends::mock::{MockSegmenter, MockTagger};
    use std::collections::BTreeSet;

    fn tags(labels: &[&str]) -> Vec<ObjectTag> {
        labels.iter().map(|l| ObjectTag::detected(l)).collect()
    }

    #[test]
    fn seagull_scene_decomposes_fully() {
        let scene = fixtures::scene("seagull_ship").unwrap();
        let pair = scene.source_pair("x.png".as_ref());
        let d = decompose_scene(&pair, &scene.render(), &MockTagger::new(0), &MockSegmenter::new(0)).unwrap();
        let labels: Vec<_> = d.masks.iter().map(|m| m.tag.label.as_str()).collect();
        assert_eq!(labels, ["seagull", "water", "ship", "city"]);
        assert_eq!(d.pair.generated_caption.as_deref(), Some(scene.generated_caption));
        assert!(d.dropped.is_empty());
    }

    #[test]
    fn empty_mask_tag_dropped() {
        let scene = fixtures::scene("seagull_ship").unwrap();
        let pair = scene.source_pair("x.png".as_ref());
        let seg = MockSegmenter::new(0).with_empty_labels(["ship"]);
        let d = decompose_scene(&pair, &scene.render(), &MockTagger::new(0), &seg).unwrap();
        assert_eq!(d.masks.len(), 3);
        assert_eq!(d.dropped.len(), 1);
        assert_eq!(d.dropped[0].tag.label, "ship");
        assert_eq!(d.dropped[0].mode, FailureMode::WrongMask);
    }

    #[test]
    fn zero_tags_gives_empty_decomposition() {
        let scene = fixtures::blank_scene();
        let pair = scene.source_pair("x.png".as_ref());
        let d = decompose_scene(&pair, &scene.render(), &MockTagger::new(0), &MockSegmenter::new(0)).unwrap();
        assert!(d.is_empty());
        assert!(d.tags.is_empty());
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let four = tags(&["seagull", "water", "ship", "city"]);
        let a = sample_objects(&four, 3, 11);
        assert_eq!(a.len(), 3);
        assert_eq!(a, sample_objects(&four, 3, 11));
        let two = tags(&["a", "b"]);
        let set: BTreeSet<_> = sample_objects(&two, 5, 1).into_iter().map(|t| t.label).collect();
        assert_eq!(set, BTreeSet::from(["a".to_string(), "b".to_string()]));
        let all: BTreeSet<_> = sample_objects(&four, 4, 99).into_iter().map(|t| t.label).collect();
        assert_eq!(all.len(), 4);
    }
}
