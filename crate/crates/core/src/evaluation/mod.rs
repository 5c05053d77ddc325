//! Winoground-style text/image/group scores, their group-of-k extension,
//! retrieval hits@k, and adapters that feed them from a matcher or from
//! precomputed embeddings.

pub mod benchmarks;
pub mod metrics;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::MatcherBackend;
use crate::manifest::{self, ManifestError};
use crate::model::{GeneratedSample, Validate, ValidationError};
use crate::raster;

pub use metrics::{
    group_scores, hit_within, macro_average, pair_scores, retrieval_hits_at_k, GroupScores, GroupSimilarity, PairScores,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("similarities must be finite")]
    NonFinite,
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{item}: {message}")]
    Scoring { item: String, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMember {
    pub id: String,
    pub caption: String,
    pub image: PathBuf,
}

/// k matched (caption, image) pairs scored jointly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub id: String,
    pub members: Vec<EvalMember>,
}

impl EvalGroup {
    pub fn k(&self) -> usize {
        self.members.len()
    }
}

impl Validate for EvalGroup {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.members.len() < 2 {
            return Err(ValidationError::new("members", "a group needs at least 2 members"));
        }
        let mut captions = HashSet::new();
        let mut images = HashSet::new();
        let mut ids = HashSet::new();
        for m in &self.members {
            if !captions.insert(m.caption.as_str()) {
                return Err(ValidationError::new("members.caption", format!("duplicate caption `{}`", m.caption)));
            }
            if !images.insert(m.image.as_path()) {
                return Err(ValidationError::new(
                    "members.image",
                    format!("duplicate image {}", m.image.display()),
                ));
            }
            if !ids.insert(m.id.as_str()) {
                return Err(ValidationError::new("members.id", format!("duplicate id `{}`", m.id)));
            }
        }
        Ok(())
    }
}

/// One evaluation group per source image, members in manifest order.
/// Groups with fewer than two members are dropped.
pub fn groups_from_samples(samples: &[GeneratedSample]) -> Vec<EvalGroup> {
    let mut order: Vec<String> = Vec::new();
    let mut by_pair: HashMap<String, Vec<EvalMember>> = HashMap::new();
    for s in samples {
        let members = by_pair.entry(s.source_pair_id.clone()).or_insert_with(|| {
            order.push(s.source_pair_id.clone());
            Vec::new()
        });
        members.push(EvalMember {
            id: s.id.clone(),
            caption: s.caption.clone(),
            image: s.image.path.clone(),
        });
    }
    order
        .into_iter()
        .filter_map(|id| {
            let members = by_pair.remove(&id)?;
            (members.len() >= 2).then_some(EvalGroup { id, members })
        })
        .collect()
}

pub trait GroupScorer: Sync {
    fn similarity(&self, group: &EvalGroup) -> Result<GroupSimilarity, EvalError>;
}

/// Cosine between matcher embeddings; image paths resolve against `base_dir`.
pub struct MatcherScorer<'a> {
    pub matcher: &'a dyn MatcherBackend,
    pub base_dir: PathBuf,
}

impl GroupScorer for MatcherScorer<'_> {
    fn similarity(&self, group: &EvalGroup) -> Result<GroupSimilarity, EvalError> {
        let fail = |item: &str, message: String| EvalError::Scoring {
            item: item.to_string(),
            message,
        };
        let mut texts = Vec::with_capacity(group.k());
        let mut images = Vec::with_capacity(group.k());
        for m in &group.members {
            let t = self.matcher.embed_text(&m.caption).map_err(|e| fail(&m.id, e.to_string()))?;
            let img = raster::load_rgb(&manifest::resolve(&self.base_dir, &m.image)).map_err(|e| fail(&m.id, e.to_string()))?;
            let i = self.matcher.embed_image(&img).map_err(|e| fail(&m.id, e.to_string()))?;
            texts.push(t.0);
            images.push(i.0);
        }
        GroupSimilarity::from_embeddings(&texts, &images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

/// One line of a precomputed-embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: Modality,
    pub embedding: Vec<f64>,
}

/// Precomputed embeddings keyed by member id.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    entries: HashMap<(String, Modality), Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, EvalError> {
        let mut entries = HashMap::new();
        let mut dim = None;
        for r in records {
            if r.embedding.iter().any(|x| !x.is_finite()) {
                return Err(EvalError::Input(format!("{}: non-finite embedding", r.id)));
            }
            match dim {
                None => dim = Some(r.embedding.len()),
                Some(d) if d != r.embedding.len() => {
                    return Err(EvalError::Dimension(format!("{}: {} != {d}", r.id, r.embedding.len())))
                }
                _ => {}
            }
            entries.insert((r.id, r.modality), r.embedding);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_records(manifest::read_jsonl(path)?)
    }

    pub fn insert(&mut self, id: &str, modality: Modality, embedding: Vec<f64>) {
        self.entries.insert((id.to_string(), modality), embedding);
    }

    pub fn get(&self, id: &str, modality: Modality) -> Option<&Vec<f64>> {
        self.entries.get(&(id.to_string(), modality))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl GroupScorer for EmbeddingTable {
    fn similarity(&self, group: &EvalGroup) -> Result<GroupSimilarity, EvalError> {
        let lookup = |id: &str, m: Modality| {
            self.get(id, m).cloned().ok_or_else(|| EvalError::Scoring {
                item: id.to_string(),
                message: format!("no {m:?} embedding"),
            })
        };
        let texts: Vec<_> = group.members.iter().map(|m| lookup(&m.id, Modality::Text)).collect::<Result<_, _>>()?;
        let images: Vec<_> = group.members.iter().map(|m| lookup(&m.id, Modality::Image)).collect::<Result<_, _>>()?;
        GroupSimilarity::from_embeddings(&texts, &images)
    }
}

/// Averages over groups, on a 0-100 scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "Text All")]
    pub text_all: f64,
    #[serde(rename = "Image All")]
    pub image_all: f64,
    #[serde(rename = "Group All")]
    pub group_all: f64,
    #[serde(rename = "Text 1")]
    pub text_1: f64,
    #[serde(rename = "Image 1")]
    pub image_1: f64,
    #[serde(rename = "Group 1")]
    pub group_1: f64,
}

impl MetricRow {
    pub const NAMES: [&'static str; 6] = ["Text All", "Image All", "Group All", "Text 1", "Image 1", "Group 1"];

    pub fn from_scores(scores: &[GroupScores]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        let n = scores.len() as f64;
        let avg = |f: &dyn Fn(&GroupScores) -> f64| 100.0 * scores.iter().map(f).sum::<f64>() / n;
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Self {
            text_all: avg(&|s| flag(s.text_all)),
            image_all: avg(&|s| flag(s.image_all)),
            group_all: avg(&|s| flag(s.group_all)),
            text_1: avg(&|s| s.text_1),
            image_1: avg(&|s| s.image_1),
            group_1: avg(&|s| s.group_1),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.text_all, self.image_all, self.group_all, self.text_1, self.image_1, self.group_1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBreakdown {
    pub groups: usize,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedGroup {
    pub group: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestsetReport {
    pub groups_evaluated: usize,
    pub groups_excluded: usize,
    pub metrics: MetricRow,
    /// Keyed by group size k.
    pub by_size: BTreeMap<usize, SizeBreakdown>,
    pub excluded: Vec<ExcludedGroup>,
}

impl TestsetReport {
    /// Tab-separated table: one header row of metric names, then the
    /// overall row and one row per group size.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("subset\tgroups\t{}\n", MetricRow::NAMES.join("\t"));
        let row = |label: String, n: usize, m: &MetricRow| {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.2}")).collect();
            format!("{label}\t{n}\t{}\n", vals.join("\t"))
        };
        out.push_str(&row("all".into(), self.groups_evaluated, &self.metrics));
        for (k, b) in &self.by_size {
            out.push_str(&row(format!("k={k}"), b.groups, &b.metrics));
        }
        out
    }
}

/// Score every group, averaging each metric over the groups that could be
/// scored. Groups that fail validation or scoring are excluded and listed.
pub fn evaluate_testset(groups: &[EvalGroup], scorer: &dyn GroupScorer) -> TestsetReport {
    let results: Vec<Result<GroupScores, String>> = groups
        .par_iter()
        .map(|g| {
            g.validate().map_err(|e| e.to_string())?;
            let sim = scorer.similarity(g).map_err(|e| e.to_string())?;
            group_scores(&sim).map_err(|e| e.to_string())
        })
        .collect();
    let mut all = Vec::new();
    let mut sized: BTreeMap<usize, Vec<GroupScores>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for (g, r) in groups.iter().zip(results) {
        match r {
            Ok(s) => {
                all.push(s);
                sized.entry(g.k()).or_default().push(s);
            }
            Err(reason) => excluded.push(ExcludedGroup {
                group: g.id.clone(),
                reason,
            }),
        }
    }
    TestsetReport {
        groups_evaluated: all.len(),
        groups_excluded: excluded.len(),
        metrics: MetricRow::from_scores(&all),
        by_size: sized
            .into_iter()
            .map(|(k, s)| {
                (
                    k,
                    SizeBreakdown {
                        groups: s.len(),
                        metrics: MetricRow::from_scores(&s),
                    },
                )
            })
            .collect(),
        excluded,
    }
}
