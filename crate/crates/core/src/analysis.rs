//! Dataset statistics over a manifest: filter-score histograms, uniqueness
//! counts and per-item mask/delta medians, emitted as plot-ready tables.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeneratedSample;

pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("no scored samples in the manifest")]
    NoScores,
    #[error("histogram needs at least one value")]
    Empty,
    #[error("histogram values must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

fn summarize(values: &[f64]) -> Summary {
    Summary {
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: median(values).unwrap_or(f64::NAN),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn edges_for(values: &[f64], bins: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Index of the bin holding `x`; the last bin is closed on the right.
fn bin_of(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let idx = ((x - lo) / (hi - lo) * bins as f64).floor();
    (idx.max(0.0) as usize).min(bins - 1)
}

/// Uniform bins over the observed range. A constant sample gets a unit-wide
/// range centred on its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub summary: Summary,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self, AnalysisError> {
        if values.is_empty() {
            return Err(AnalysisError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        let bins = bins.max(1);
        let bin_edges = edges_for(values, bins);
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[bin_of(&bin_edges, v)] += 1;
        }
        Ok(Self {
            bin_edges,
            counts,
            summary: summarize(values),
        })
    }

    /// `lo\thi\tcount` rows under a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bin_lo\tbin_hi\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{c}\n", self.bin_edges[i], self.bin_edges[i + 1]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// `counts[x][y]`.
    pub counts: Vec<Vec<u64>>,
}

impl Histogram2d {
    pub fn new(xs: &[f64], ys: &[f64], bins: usize) -> Result<Self, AnalysisError> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(AnalysisError::Empty);
        }
        if xs.iter().chain(ys).any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        let bins = bins.max(1);
        let x_edges = edges_for(xs, bins);
        let y_edges = edges_for(ys, bins);
        let mut counts = vec![vec![0u64; bins]; bins];
        for (&x, &y) in xs.iter().zip(ys) {
            counts[bin_of(&x_edges, x)][bin_of(&y_edges, y)] += 1;
        }
        Ok(Self { x_edges, y_edges, counts })
    }

    /// Non-zero cells as `x_lo\tx_hi\ty_lo\ty_hi\tcount`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("x_lo\tx_hi\ty_lo\ty_hi\tcount\n");
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{c}\n",
                        self.x_edges[i],
                        self.x_edges[i + 1],
                        self.y_edges[j],
                        self.y_edges[j + 1]
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub itm_variation: Histogram,
    pub itm_original: Histogram,
    pub area_score: Histogram,
    /// itm_variation on x, area score on y.
    pub joint: Histogram2d,
}

/// Histograms over every scored sample, rejected ones included.
pub fn score_histograms(samples: &[GeneratedSample], bins: usize) -> Result<ScoreHistograms, AnalysisError> {
    let scored: Vec<_> = samples.iter().filter_map(|s| s.scores.as_ref()).collect();
    if scored.is_empty() {
        return Err(AnalysisError::NoScores);
    }
    let itm: Vec<f64> = scored.iter().map(|s| s.itm_variation).collect();
    let orig: Vec<f64> = scored.iter().map(|s| s.itm_original).collect();
    let area: Vec<f64> = scored.iter().map(|s| s.area_score_pct).collect();
    Ok(ScoreHistograms {
        itm_variation: Histogram::new(&itm, bins)?,
        itm_original: Histogram::new(&orig, bins)?,
        area_score: Histogram::new(&area, bins)?,
        joint: Histogram2d::new(&itm, &area, bins)?,
    })
}

/// Splits text into counting units.
pub type Tokenizer<'a> = &'a dyn Fn(&str) -> Vec<String>;

pub fn whitespace_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub samples: usize,
    /// Distinct tag labels.
    pub unique_items: usize,
    /// Distinct portrayal strings.
    pub unique_phrases: usize,
    pub unique_tokens: usize,
    pub unique_words: usize,
    pub item_frequency: BTreeMap<String, usize>,
    /// Repetition count -> number of phrases repeated that often.
    pub phrase_repetitions: BTreeMap<usize, usize>,
    pub items_seen_once: usize,
    pub phrases_seen_once: usize,
    pub singleton_items: Vec<String>,
}

pub fn uniqueness_report(samples: &[GeneratedSample], tokenizer: Option<Tokenizer<'_>>) -> UniquenessReport {
    let mut items: BTreeMap<String, usize> = BTreeMap::new();
    let mut phrases: HashMap<&str, usize> = HashMap::new();
    let mut tokens = HashSet::new();
    let mut words = HashSet::new();
    for s in samples {
        *items.entry(s.tag.label.clone()).or_default() += 1;
        *phrases.entry(s.variation.portrayal.as_str()).or_default() += 1;
        let w = whitespace_words(&s.variation.portrayal);
        match tokenizer {
            Some(t) => tokens.extend(t(&s.variation.portrayal)),
            None => tokens.extend(w.iter().cloned()),
        }
        words.extend(w);
    }
    let mut phrase_repetitions: BTreeMap<usize, usize> = BTreeMap::new();
    for &n in phrases.values() {
        *phrase_repetitions.entry(n).or_default() += 1;
    }
    let singleton_items: Vec<String> = items.iter().filter(|(_, &n)| n == 1).map(|(k, _)| k.clone()).collect();
    UniquenessReport {
        samples: samples.len(),
        unique_items: items.len(),
        unique_phrases: phrases.len(),
        unique_tokens: tokens.len(),
        unique_words: words.len(),
        items_seen_once: singleton_items.len(),
        phrases_seen_once: phrase_repetitions.get(&1).copied().unwrap_or(0),
        item_frequency: items,
        phrase_repetitions,
        singleton_items,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDeltaRow {
    pub item: String,
    pub samples: usize,
    pub median_mask_pct: f64,
    pub median_delta: f64,
    pub median_itm_original: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDeltaTable {
    /// Most frequent items first, ties by label.
    pub rows: Vec<MaskDeltaRow>,
    /// Samples skipped for lacking a delta-in-mask value.
    pub excluded: usize,
}

impl MaskDeltaTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("item\tsamples\tmedian_mask_pct\tmedian_delta\tmedian_itm_original\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.item, r.samples, r.median_mask_pct, r.median_delta, r.median_itm_original
            ));
        }
        out
    }
}

/// Per tag label: median mask coverage, median delta-in-mask and median
/// original-caption matching score.
pub fn mask_delta_table(samples: &[GeneratedSample]) -> MaskDeltaTable {
    let mut per_item: HashMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>)> = HashMap::new();
    let mut excluded = 0;
    for s in samples {
        let Some((delta, orig)) = s.scores.as_ref().and_then(|sc| sc.delta_in_mask.map(|d| (d, sc.itm_original))) else {
            excluded += 1;
            continue;
        };
        let e = per_item.entry(s.tag.label.as_str()).or_default();
        e.0.push(s.mask.coverage_pct);
        e.1.push(delta);
        e.2.push(orig);
    }
    let mut rows: Vec<MaskDeltaRow> = per_item
        .into_iter()
        .map(|(item, (mask, delta, orig))| MaskDeltaRow {
            item: item.to_string(),
            samples: mask.len(),
            median_mask_pct: median(&mask).unwrap_or(f64::NAN),
            median_delta: median(&delta).unwrap_or(f64::NAN),
            median_itm_original: median(&orig).unwrap_or(f64::NAN),
        })
        .collect();
    rows.sort_by(|a, b| b.samples.cmp(&a.samples).then_with(|| a.item.cmp(&b.item)));
    MaskDeltaTable { rows, excluded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_values() {
        let h = Histogram::new(&[1.0, 2.0, 3.0, 4.0, 100.0], DEFAULT_BINS).unwrap();
        assert_eq!(h.summary.mean, 22.0);
        assert_eq!(h.summary.median, 3.0);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert_eq!(*h.counts.last().unwrap(), 1);
    }

    #[test]
    fn constant_values_occupy_one_bin() {
        let h = Histogram::new(&[0.0; 7], DEFAULT_BINS).unwrap();
        let occupied: Vec<_> = h.counts.iter().enumerate().filter(|(_, &c)| c > 0).collect();
        assert_eq!(occupied.len(), 1);
        let i = occupied[0].0;
        assert!(h.bin_edges[i] <= 0.0 && 0.0 < h.bin_edges[i + 1]);
        assert_eq!(h.summary.median, 0.0);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[1.0, 3.0, 5.0]), Some(3.0));
        assert_eq!(median(&[4.0]), Some(4.0));
        assert_eq!(median(&[1.0, 2.0]), Some(1.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn counts_sum_and_median_in_range(values in proptest::collection::vec(-1e6f64..1e6, 1..200), bins in 1usize..80) {
            let h = Histogram::new(&values, bins).unwrap();
            prop_assert_eq!(h.counts.len() + 1, h.bin_edges.len());
            prop_assert_eq!(h.counts.iter().sum::<u64>() as usize, values.len());
            prop_assert!(h.summary.min <= h.summary.median && h.summary.median <= h.summary.max);
        }

        #[test]
        fn joint_counts_sum(pairs in proptest::collection::vec((-10f64..10.0, 0f64..100.0), 1..100)) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let h = Histogram2d::new(&xs, &ys, DEFAULT_BINS).unwrap();
            prop_assert_eq!(h.counts.iter().flatten().sum::<u64>() as usize, xs.len());
        }
    }
}
