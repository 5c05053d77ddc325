use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::model::cosine;

/// k x k scores; entry (a, b) compares caption a with image b.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSimilarity {
    k: usize,
    entries: Vec<f64>,
}

impl GroupSimilarity {
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self, EvalError> {
        if entries.len() != k * k {
            return Err(EvalError::Dimension(format!("{} entries for k = {k}", entries.len())));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(Self { k, entries })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, EvalError> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(EvalError::Dimension("rows must form a square matrix".into()));
        }
        Self::new(k, rows.concat())
    }

    /// Cosine between every caption embedding and every image embedding.
    pub fn from_embeddings(texts: &[Vec<f64>], images: &[Vec<f64>]) -> Result<Self, EvalError> {
        if texts.len() != images.len() {
            return Err(EvalError::Dimension(format!(
                "{} captions vs {} images",
                texts.len(),
                images.len()
            )));
        }
        let mut entries = Vec::with_capacity(texts.len() * texts.len());
        for t in texts {
            for i in images {
                entries.push(cosine(t, i).ok_or(EvalError::ZeroNorm)?);
            }
        }
        Self::new(texts.len(), entries)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, caption: usize, image: usize) -> f64 {
        self.entries[caption * self.k + image]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            k: self.k,
            entries: self.entries.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let k = self.k;
        Self {
            k,
            entries: (0..k * k).map(|idx| self.get(idx % k, idx / k)).collect(),
        }
    }

    /// Caption b is the strict argmax of column b.
    pub fn text_correct(&self, image: usize) -> bool {
        let diag = self.get(image, image);
        (0..self.k).all(|a| a == image || diag > self.get(a, image))
    }

    /// Image a is the strict argmax of row a.
    pub fn image_correct(&self, caption: usize) -> bool {
        let diag = self.get(caption, caption);
        (0..self.k).all(|b| b == caption || diag > self.get(caption, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairScores {
    pub text: bool,
    pub image: bool,
    pub group: bool,
}

/// Two-caption, two-image scores; ties count as failures.
pub fn pair_scores(sim: &GroupSimilarity) -> Result<PairScores, EvalError> {
    if sim.k() != 2 {
        return Err(EvalError::Dimension(format!("pair scores need k = 2, got {}", sim.k())));
    }
    let s = |c, i| sim.get(c, i);
    let text = s(0, 0) > s(1, 0) && s(1, 1) > s(0, 1);
    let image = s(0, 0) > s(0, 1) && s(1, 1) > s(1, 0);
    Ok(PairScores {
        text,
        image,
        group: text && image,
    })
}

/// Group-of-k scores: the "all" flags require every member to be right,
/// the "1" values are the fraction of members that are right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub text_all: bool,
    pub image_all: bool,
    pub group_all: bool,
    pub text_1: f64,
    pub image_1: f64,
    pub group_1: f64,
}

pub fn group_scores(sim: &GroupSimilarity) -> Result<GroupScores, EvalError> {
    let k = sim.k();
    if k < 2 {
        return Err(EvalError::Dimension(format!("group scores need k >= 2, got {k}")));
    }
    let text: Vec<bool> = (0..k).map(|m| sim.text_correct(m)).collect();
    let image: Vec<bool> = (0..k).map(|m| sim.image_correct(m)).collect();
    let frac = |flags: &mut dyn Iterator<Item = bool>| flags.filter(|&f| f).count() as f64 / k as f64;
    let text_all = text.iter().all(|&t| t);
    let image_all = image.iter().all(|&i| i);
    Ok(GroupScores {
        text_all,
        image_all,
        group_all: text_all && image_all,
        text_1: frac(&mut text.iter().copied()),
        image_1: frac(&mut image.iter().copied()),
        group_1: frac(&mut text.iter().zip(&image).map(|(&t, &i)| t && i)),
    })
}

/// Fraction of queries whose true candidate ranks within the top `k` by
/// cosine. A tie that straddles rank `k` counts as a miss.
pub fn retrieval_hits_at_k(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    truth: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::Input("no queries".into()));
    }
    if truth.len() != queries.len() {
        return Err(EvalError::Input(format!(
            "{} ground-truth entries for {} queries",
            truth.len(),
            queries.len()
        )));
    }
    if k == 0 || candidates.len() < k {
        return Err(EvalError::Input(format!("k = {k} with {} candidates", candidates.len())));
    }
    let mut hits = 0usize;
    for (q, &t) in queries.iter().zip(truth) {
        if t >= candidates.len() {
            return Err(EvalError::Input(format!("ground truth {t} out of range")));
        }
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| cosine(q, c).ok_or(EvalError::ZeroNorm))
            .collect::<Result<_, _>>()?;
        if hit_within(&scores, t, k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Whether `scores[truth]` ranks in the top `k`, with straddling ties missing.
pub fn hit_within(scores: &[f64], truth: usize, k: usize) -> bool {
    let target = scores[truth];
    let greater = scores.iter().filter(|&&s| s > target).count();
    let tied = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != truth && s == target)
        .count();
    greater + tied < k
}

/// Unweighted mean over categories.
pub fn macro_average(per_category: &[f64]) -> Result<f64, EvalError> {
    if per_category.is_empty() {
        return Err(EvalError::Input("no categories to average".into()));
    }
    Ok(per_category.iter().sum::<f64>() / per_category.len() as f64)
}
