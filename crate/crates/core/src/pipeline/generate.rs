use std::path::{Path, PathBuf};

use image::RgbImage;

use super::caption::{edit_caption, EditError};
use super::PipelineError;
use crate::backends::InpainterBackend;
use crate::mask::{self, SegmentMask};
use crate::model::{ConceptVariation, GeneratedSample, ImageRef, MaskRef, SampleStatus, SourcePair, VariationGroup};
use crate::raster;

/// Everything needed to render the variants of one object.
pub struct GroupInput<'a> {
    /// Source pair, with `generated_caption` set for the fallback edit.
    pub pair: &'a SourcePair,
    pub source_image: &'a RgbImage,
    pub mask: &'a SegmentMask,
    pub variations: &'a [ConceptVariation],
    pub seed: u64,
    /// Output root; images and masks are written beneath it and referenced
    /// by paths relative to it.
    pub out_dir: &'a Path,
}

#[derive(Debug)]
pub enum DropReason {
    Edit(EditError),
    Inpaint(String),
}

#[derive(Debug)]
pub struct DroppedVariation {
    pub index: usize,
    pub keyword: String,
    pub reason: DropReason,
}

#[derive(Debug)]
pub struct GroupOutcome {
    pub group: VariationGroup,
    pub dropped: Vec<DroppedVariation>,
}

/// Replace anything outside `[A-Za-z0-9._-]` so ids can be used as file names.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

pub fn sample_id(pair_id: &str, slug: &str, index: usize) -> String {
    format!("{pair_id}--{slug}--{index}")
}

pub fn variation_seed(seed: u64, pair_id: &str, tag: &str, index: usize) -> u64 {
    raster::derive_seed(&[
        &seed.to_le_bytes(),
        pair_id.as_bytes(),
        tag.as_bytes(),
        &(index as u64).to_le_bytes(),
    ])
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Inpaint one image per variation and edit the caption with its keyword.
///
/// The inpainter receives the portrayal, the caption receives the keyword.
/// A variation whose caption edit or inpainting fails is dropped on its own;
/// the rest of the group is kept. Samples come back with status `raw`.
pub fn generate_group(input: &GroupInput<'_>, inpainter: &dyn InpainterBackend) -> Result<GroupOutcome, PipelineError> {
    let pair = input.pair;
    let tag = &input.mask.tag;
    if input.variations.is_empty() {
        return Err(PipelineError::NoVariations {
            item: format!("{}/{}", pair.id, tag.label),
        });
    }
    input
        .mask
        .check_dimensions(input.source_image.width(), input.source_image.height())
        .map_err(|source| PipelineError::Mask {
            item: pair.id.clone(),
            source,
        })?;

    let slug = tag.slug();
    let mask_rel = PathBuf::from("masks").join(format!("{}--{slug}.png", file_stem(&pair.id)));
    ensure_dir(&input.out_dir.join("masks"))?;
    ensure_dir(&input.out_dir.join("images"))?;
    mask::save_mask(&input.out_dir.join(&mask_rel), &input.mask.bitmap).map_err(|source| PipelineError::Mask {
        item: pair.id.clone(),
        source,
    })?;
    let mask_ref = MaskRef {
        path: mask_rel,
        coverage_pct: input.mask.coverage_pct,
    };

    let mut samples = Vec::new();
    let mut dropped = Vec::new();
    for (index, variation) in input.variations.iter().enumerate() {
        let edited = match edit_caption(pair, tag, variation) {
            Ok(e) => e,
            Err(e) => {
                log::info!("{}/{} variation {index}: {e}", pair.id, tag.label);
                dropped.push(DroppedVariation {
                    index,
                    keyword: variation.keyword.clone(),
                    reason: DropReason::Edit(e),
                });
                continue;
            }
        };
        let seed = variation_seed(input.seed, &pair.id, &tag.label, index);
        let image = match inpainter.inpaint(input.source_image, input.mask, &variation.portrayal, seed) {
            Ok(img) if img.dimensions() == input.source_image.dimensions() => img,
            Ok(img) => {
                dropped.push(DroppedVariation {
                    index,
                    keyword: variation.keyword.clone(),
                    reason: DropReason::Inpaint(format!("returned {:?}", img.dimensions())),
                });
                continue;
            }
            Err(e) => {
                log::warn!("{}/{} variation {index}: {e}", pair.id, tag.label);
                dropped.push(DroppedVariation {
                    index,
                    keyword: variation.keyword.clone(),
                    reason: DropReason::Inpaint(e.to_string()),
                });
                continue;
            }
        };

        let id = sample_id(&pair.id, &slug, index);
        let rel = PathBuf::from("images").join(format!("{}.png", file_stem(&id)));
        raster::save_rgb(&input.out_dir.join(&rel), &image).map_err(|source| PipelineError::Image {
            item: id.clone(),
            source,
        })?;
        samples.push(GeneratedSample {
            source_pair_id: pair.id.clone(),
            source_caption: pair.caption.clone(),
            source_image: pair.image.clone(),
            tag: tag.clone(),
            variation: variation.clone(),
            image: ImageRef {
                id: id.clone(),
                path: rel,
                width: image.width(),
                height: image.height(),
            },
            mask: mask_ref.clone(),
            caption: edited.caption,
            edit: edited.edit,
            scores: None,
            status: SampleStatus::Raw,
            id,
        });
    }
    Ok(GroupOutcome {
        group: VariationGroup {
            source_pair_id: pair.id.clone(),
            tag: tag.clone(),
            samples,
        },
        dropped,
    })
}
