//! Two-stage quality gate for generated groups: an image-text matching
//! score per sample and a group-level variance-area score, plus the
//! delta-in-mask diagnostic.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageBuffer, Pixel, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, MatcherBackend};
use crate::config::FilterConfig;
use crate::manifest;
use crate::mask::{self, Bitmap};
use crate::model::{FilterScores, GeneratedSample, SampleStatus, VariationGroup};
use crate::pipeline::FailureMode;
use crate::raster;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("variance needs at least 2 images, group has {size}")]
    InsufficientGroup { size: usize },
    #[error("image {index} is {got:?}, expected {expected:?}")]
    Dimensions {
        index: usize,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("mask is {got:?}, images are {expected:?}")]
    MaskDimensions { got: (u32, u32), expected: (u32, u32) },
    #[error("delta-in-mask is not computable for an empty mask")]
    EmptyMask,
    #[error("{sample}: {source}")]
    Backend {
        sample: String,
        #[source]
        source: BackendError,
    },
}

/// Per-pixel standard deviation across the stack, averaged over channels.
///
/// Population convention (divide by n). Computed from exact integer sums so
/// the result does not depend on image order.
pub fn pixel_deviation<P>(images: &[&ImageBuffer<P, Vec<u8>>]) -> Result<Vec<f64>, FilterError>
where
    P: Pixel<Subpixel = u8>,
{
    if images.len() < 2 {
        return Err(FilterError::InsufficientGroup { size: images.len() });
    }
    let expected = images[0].dimensions();
    for (index, img) in images.iter().enumerate() {
        if img.dimensions() != expected {
            return Err(FilterError::Dimensions {
                index,
                got: img.dimensions(),
                expected,
            });
        }
    }
    let channels = usize::from(P::CHANNEL_COUNT);
    let n = images.len() as u64;
    let pixels = (expected.0 as usize) * (expected.1 as usize);
    let raws: Vec<&[u8]> = images.iter().map(|img| img.as_raw().as_slice()).collect();
    let out = (0..pixels)
        .map(|p| {
            let mut acc = 0.0;
            for c in 0..channels {
                let idx = p * channels + c;
                let (mut sum, mut sumsq) = (0u64, 0u64);
                for raw in &raws {
                    let v = u64::from(raw[idx]);
                    sum += v;
                    sumsq += v * v;
                }
                // n^2 * variance, exact in integers
                let scaled = n * sumsq - sum * sum;
                acc += (scaled as f64).sqrt() / n as f64;
            }
            acc / channels as f64
        })
        .collect();
    Ok(out)
}

/// Percentage of pixels whose channel-mean deviation across the group
/// exceeds `epsilon`.
pub fn variance_area_score<P>(images: &[&ImageBuffer<P, Vec<u8>>], epsilon: f64) -> Result<f64, FilterError>
where
    P: Pixel<Subpixel = u8>,
{
    let dev = pixel_deviation(images)?;
    Ok(area_from_deviation(&dev, epsilon))
}

pub fn area_from_deviation(dev: &[f64], epsilon: f64) -> f64 {
    if dev.is_empty() {
        return 0.0;
    }
    let count = dev.iter().filter(|&&d| d > epsilon).count();
    100.0 * count as f64 / dev.len() as f64
}

/// Mean un-thresholded deviation over the masked pixels.
pub fn delta_in_mask<P>(images: &[&ImageBuffer<P, Vec<u8>>], mask: &Bitmap) -> Result<f64, FilterError>
where
    P: Pixel<Subpixel = u8>,
{
    let dev = pixel_deviation(images)?;
    delta_from_deviation(&dev, images[0].dimensions(), mask)
}

pub fn delta_from_deviation(dev: &[f64], dims: (u32, u32), mask: &Bitmap) -> Result<f64, FilterError> {
    if mask.dimensions() != dims {
        return Err(FilterError::MaskDimensions {
            got: mask.dimensions(),
            expected: dims,
        });
    }
    let selected = mask.count_set();
    if selected == 0 {
        return Err(FilterError::EmptyMask);
    }
    let sum: f64 = dev.iter().zip(mask.bits()).filter(|(_, &m)| m).map(|(d, _)| d).sum();
    Ok(sum / selected as f64)
}

/// Matcher score of the generated image against its edited caption and
/// against the untouched source caption.
pub fn itm_scores(
    sample: &GeneratedSample,
    image: &RgbImage,
    source_caption: &str,
    matcher: &dyn MatcherBackend,
) -> Result<(f64, f64), FilterError> {
    let wrap = |source| FilterError::Backend {
        sample: sample.id.clone(),
        source,
    };
    let variation = matcher.itm_score(image, &sample.caption).map_err(wrap)?;
    let original = matcher.itm_score(image, source_caption).map_err(wrap)?;
    Ok((variation, original))
}

/// Both gates use strict inequality.
pub fn gate(itm_variation: f64, area_score_pct: f64, cfg: &FilterConfig) -> bool {
    itm_variation > cfg.itm_threshold && area_score_pct > cfg.area_threshold
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub source_pair_id: String,
    pub tag: String,
    pub size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area_score_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_in_mask: Option<f64>,
    pub area_passed: bool,
    pub itm_passed: usize,
    pub passed: usize,
    pub reasons: Vec<String>,
    pub errors: Vec<String>,
    pub failure_modes: BTreeMap<FailureMode, usize>,
}

/// Score and gate one group whose member images are already loaded.
///
/// `images[i]` belongs to `group.samples[i]`; `None` marks a member whose
/// image could not be read, which stays unscored. Human-reviewed samples
/// are left untouched so re-filtering never rewinds a verdict.
pub fn filter_loaded_group(
    group: &mut VariationGroup,
    images: &[Option<RgbImage>],
    mask: Option<&Bitmap>,
    cfg: &FilterConfig,
    matcher: &dyn MatcherBackend,
) -> GroupReport {
    let mut report = GroupReport {
        source_pair_id: group.source_pair_id.clone(),
        tag: group.tag.label.clone(),
        size: group.samples.len(),
        ..GroupReport::default()
    };
    let loaded: Vec<&RgbImage> = images.iter().flatten().collect();
    let deviation = match pixel_deviation(&loaded) {
        Ok(d) => Some(d),
        Err(e) => {
            report.reasons.push(e.to_string());
            None
        }
    };
    let area = deviation.as_ref().map(|d| area_from_deviation(d, cfg.epsilon));
    report.area_score_pct = area;
    report.area_passed = area.is_some_and(|a| a > cfg.area_threshold);
    if let Some(a) = area.filter(|_| !report.area_passed) {
        report
            .reasons
            .push(format!("area {a:.3}% <= threshold {}%", cfg.area_threshold));
    }
    let delta = match (&deviation, mask) {
        (Some(d), Some(m)) => match delta_from_deviation(d, loaded[0].dimensions(), m) {
            Ok(v) => Some(v),
            Err(e) => {
                report.reasons.push(e.to_string());
                None
            }
        },
        _ => None,
    };
    report.delta_in_mask = delta;

    for (sample, image) in group.samples.iter_mut().zip(images) {
        if sample.status.is_human_reviewed() {
            report.passed += usize::from(sample.scores.as_ref().is_some_and(|s| s.passed));
            continue;
        }
        let Some(image) = image else {
            report.errors.push(format!("{}: image unreadable", sample.id));
            continue;
        };
        let (itm_variation, itm_original) = match itm_scores(sample, image, &sample.source_caption, matcher) {
            Ok(s) => s,
            Err(e) => {
                report.errors.push(e.to_string());
                continue;
            }
        };
        let area_pct = area.unwrap_or(0.0);
        let passed = area.is_some() && gate(itm_variation, area_pct, cfg);
        if itm_variation > cfg.itm_threshold {
            report.itm_passed += 1;
        } else {
            *report.failure_modes.entry(FailureMode::PoorInpainting).or_default() += 1;
        }
        report.passed += usize::from(passed);
        sample.scores = Some(FilterScores {
            itm_variation,
            itm_original,
            area_score_pct: area_pct,
            delta_in_mask: delta,
            passed,
        });
        sample.status = if passed { SampleStatus::Passed } else { SampleStatus::Rejected };
    }
    if area.is_some() && !report.area_passed {
        let coverage = group.samples.first().map_or(0.0, |s| s.mask.coverage_pct);
        let mode = if coverage <= cfg.area_threshold {
            FailureMode::SmallMask
        } else {
            FailureMode::LackOfDescriptiveness
        };
        report.failure_modes.insert(mode, group.samples.len());
    }
    report
}

/// Load member images and the group mask relative to `base_dir`, then
/// score and gate the group.
pub fn apply_filters(
    group: &mut VariationGroup,
    base_dir: &Path,
    cfg: &FilterConfig,
    matcher: &dyn MatcherBackend,
) -> GroupReport {
    let mut load_errors = Vec::new();
    let images: Vec<Option<RgbImage>> = group
        .samples
        .iter()
        .map(|s| match raster::load_rgb(&manifest::resolve(base_dir, &s.image.path)) {
            Ok(img) => Some(img),
            Err(e) => {
                load_errors.push(format!("{}: {e}", s.id));
                None
            }
        })
        .collect();
    let mask = group
        .samples
        .first()
        .and_then(|s| match mask::load_mask(&manifest::resolve(base_dir, &s.mask.path)) {
            Ok(m) => Some(m),
            Err(e) => {
                load_errors.push(format!("{}: {e}", s.id));
                None
            }
        });
    let mut report = filter_loaded_group(group, &images, mask.as_ref(), cfg, matcher);
    report.errors.splice(0..0, load_errors);
    report
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub groups: usize,
    pub samples: usize,
    pub scored: usize,
    pub area_gate_passed: usize,
    pub itm_gate_passed: usize,
    pub passed: usize,
    pub area_pass_rate: f64,
    pub itm_pass_rate: f64,
    pub pass_rate: f64,
    pub failure_modes: BTreeMap<FailureMode, usize>,
    pub group_reports: Vec<GroupReport>,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Filter a whole manifest, groups in parallel; output keeps input order.
pub fn filter_manifest(
    samples: Vec<GeneratedSample>,
    base_dir: &Path,
    cfg: &FilterConfig,
    matcher: &dyn MatcherBackend,
) -> (Vec<GeneratedSample>, FilterReport) {
    let mut groups = VariationGroup::group_samples(samples);
    let reports: Vec<GroupReport> = groups
        .par_iter_mut()
        .map(|g| apply_filters(g, base_dir, cfg, matcher))
        .collect();
    let mut report = FilterReport {
        groups: groups.len(),
        ..FilterReport::default()
    };
    for (g, r) in groups.iter().zip(&reports) {
        report.samples += g.samples.len();
        for s in &g.samples {
            let Some(scores) = &s.scores else { continue };
            report.scored += 1;
            report.area_gate_passed += usize::from(scores.area_score_pct > cfg.area_threshold);
            report.itm_gate_passed += usize::from(scores.itm_variation > cfg.itm_threshold);
            report.passed += usize::from(scores.passed);
        }
        for (mode, n) in &r.failure_modes {
            *report.failure_modes.entry(*mode).or_default() += n;
        }
    }
    report.area_pass_rate = rate(report.area_gate_passed, report.scored);
    report.itm_pass_rate = rate(report.itm_gate_passed, report.scored);
    report.pass_rate = rate(report.passed, report.scored);
    report.group_reports = reports;
    (VariationGroup::into_samples(groups), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn solid(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    fn oracle(images: &[RgbImage], eps: f64) -> f64 {
        let (w, h) = images[0].dimensions();
        let n = images.len() as f64;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                let mut total = 0.0;
                for c in 0..3 {
                    let vals: Vec<f64> = images.iter().map(|i| f64::from(i.get_pixel(x, y)[c])).collect();
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    total += var.sqrt();
                }
                if total / 3.0 > eps {
                    count += 1;
                }
            }
        }
        100.0 * count as f64 / f64::from(w * h)
    }

    #[test]
    fn identical_images_score_zero() {
        let a = solid(8, 8, 77);
        assert_eq!(variance_area_score(&[&a, &a.clone()], 2.0).unwrap(), 0.0);
    }

    #[test]
    fn quarter_rectangle_scores_25() {
        let a = solid(8, 8, 10);
        let mut b = a.clone();
        for y in 0..4 {
            for x in 0..4 {
                b.put_pixel(x, y, Rgb([200, 200, 200]));
            }
        }
        assert_eq!(variance_area_score(&[&a, &b], 2.0).unwrap(), 25.0);
        let m = Bitmap::from_fn(8, 8, |x, y| x < 4 && y < 4);
        assert_eq!(delta_in_mask(&[&a, &b], &m).unwrap(), 95.0);
    }

    #[test]
    fn singleton_and_empty_mask_errors() {
        let a = solid(4, 4, 1);
        assert!(matches!(
            variance_area_score(&[&a], 2.0),
            Err(FilterError::InsufficientGroup { size: 1 })
        ));
        assert!(matches!(
            delta_in_mask(&[&a, &a], &Bitmap::empty(4, 4)),
            Err(FilterError::EmptyMask)
        ));
        let b = solid(4, 5, 1);
        assert!(matches!(variance_area_score(&[&a, &b], 2.0), Err(FilterError::Dimensions { .. })));
    }

    #[test]
    fn gate_is_strict() {
        let cfg = FilterConfig::default();
        assert!(!gate(0.0, 50.0, &cfg));
        assert!(!gate(1.0, 14.0, &cfg));
        assert!(gate(1e-12, 14.000001, &cfg));
        assert!(!gate(-0.3, 50.0, &cfg));
    }

    fn images_strategy() -> impl Strategy<Value = Vec<RgbImage>> {
        (2usize..5, 1u32..10, 1u32..10).prop_flat_map(|(n, w, h)| {
            proptest::collection::vec(proptest::collection::vec(any::<u8>(), (w * h * 3) as usize), n)
                .prop_map(move |raws| raws.into_iter().map(|r| RgbImage::from_raw(w, h, r).unwrap()).collect())
        })
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle(images in images_strategy(), eps in 0.0f64..80.0) {
            let refs: Vec<&RgbImage> = images.iter().collect();
            let got = variance_area_score(&refs, eps).unwrap();
            prop_assert!((got - oracle(&images, eps)).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&got));
        }

        #[test]
        fn permutation_invariant(images in images_strategy(), eps in 0.0f64..40.0) {
            let refs: Vec<&RgbImage> = images.iter().collect();
            let rev: Vec<&RgbImage> = images.iter().rev().collect();
            prop_assert_eq!(variance_area_score(&refs, eps).unwrap(), variance_area_score(&rev, eps).unwrap());
        }

        #[test]
        fn monotone_in_epsilon(images in images_strategy(), e1 in 0.0f64..40.0, d in 0.0f64..40.0) {
            let refs: Vec<&RgbImage> = images.iter().collect();
            prop_assert!(variance_area_score(&refs, e1).unwrap() >= variance_area_score(&refs, e1 + d).unwrap());
        }
    }
}
