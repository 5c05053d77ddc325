//! Ingest shims for public compositionality benchmarks. Each reads the
//! benchmark's annotation file and produces either evaluation groups or
//! image-to-text retrieval instances; downloading the data is up to the user.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{macro_average, EvalError, EvalGroup, EvalMember};
use crate::manifest;

#[derive(Debug, Deserialize)]
struct WinogroundRow {
    id: serde_json::Value,
    caption_0: String,
    caption_1: String,
    image_0: String,
    image_1: String,
}

/// Winoground `examples.jsonl` -> one k = 2 group per example. Image names
/// without an extension get `.png` appended and resolve against `image_dir`.
pub fn winoground_groups(path: &Path, image_dir: &Path) -> Result<Vec<EvalGroup>, EvalError> {
    let rows: Vec<WinogroundRow> = manifest::read_jsonl(path)?;
    let image = |name: &str| {
        let p = image_dir.join(name);
        if p.extension().is_none() {
            p.with_extension("png")
        } else {
            p
        }
    };
    Ok(rows
        .into_iter()
        .map(|r| {
            let id = match &r.id {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            EvalGroup {
                members: vec![
                    EvalMember {
                        id: format!("{id}-0"),
                        caption: r.caption_0,
                        image: image(&r.image_0),
                    },
                    EvalMember {
                        id: format!("{id}-1"),
                        caption: r.caption_1,
                        image: image(&r.image_1),
                    },
                ],
                id,
            }
        })
        .collect())
}

/// One image with candidate captions, exactly one of them correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub id: String,
    pub image: PathBuf,
    pub captions: Vec<String>,
    pub truth: usize,
    pub category: String,
}

#[derive(Debug, Deserialize)]
struct AroRow {
    image_path: String,
    true_caption: String,
    false_caption: String,
    #[serde(default)]
    relation_name: Option<String>,
    #[serde(default)]
    attributes: Option<Vec<String>>,
}

/// ARO relation/attribution annotations (a JSON array) -> two-caption
/// retrieval instances, categorized by relation name or attribute pair.
pub fn aro_instances(path: &Path, image_dir: &Path) -> Result<Vec<RetrievalInstance>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Input(format!("{}: {e}", path.display())))?;
    let rows: Vec<AroRow> = serde_json::from_str(&text).map_err(|e| EvalError::Input(format!("{}: {e}", path.display())))?;
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| RetrievalInstance {
            id: format!("aro-{i}"),
            image: image_dir.join(&r.image_path),
            captions: vec![r.true_caption, r.false_caption],
            truth: 0,
            category: r
                .relation_name
                .or_else(|| r.attributes.map(|a| a.join("-")))
                .unwrap_or_else(|| "all".to_string()),
        })
        .collect())
}

/// Parse a list cell written either as JSON or as a Python literal list.
fn parse_list(cell: &str) -> Vec<String> {
    if let Ok(v) = serde_json::from_str::<Vec<String>>(cell) {
        return v;
    }
    let inner = cell.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split("', '")
        .flat_map(|s| s.split("\", \""))
        .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// CREPE retrieval CSV (columns `image_id`, `caption`, `hard_negs`) ->
/// instances in `category` (e.g. the complexity level of the file).
pub fn crepe_instances(path: &Path, image_dir: &Path, category: &str) -> Result<Vec<RetrievalInstance>, EvalError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| EvalError::Input(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Input(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvalError::Input(format!("{}: missing column `{name}`", path.display())))
    };
    let (image_col, caption_col, negs_col) = (col("image_id")?, col("caption")?, col("hard_negs")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Input(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        let image_id = rec.get(image_col).unwrap_or_default();
        let image = image_dir.join(image_id);
        let mut captions = vec![rec.get(caption_col).unwrap_or_default().to_string()];
        captions.extend(parse_list(rec.get(negs_col).unwrap_or_default()));
        out.push(RetrievalInstance {
            id: format!("crepe-{category}-{i}"),
            image: if image.extension().is_none() {
                image.with_extension("jpg")
            } else {
                image
            },
            captions,
            truth: 0,
            category: category.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// hits@1 per category, in [0, 1].
    pub per_category: BTreeMap<String, f64>,
    pub macro_average: f64,
    pub instances: usize,
    pub excluded: usize,
}

/// Image-to-text hits@1 per category, then the unweighted category mean.
/// `score` returns one similarity per candidate caption.
pub fn evaluate_retrieval(
    instances: &[RetrievalInstance],
    score: &(dyn Fn(&RetrievalInstance) -> Result<Vec<f64>, EvalError> + Sync),
) -> Result<RetrievalReport, EvalError> {
    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for inst in instances {
        if inst.truth >= inst.captions.len() {
            return Err(EvalError::Input(format!("{}: ground truth out of range", inst.id)));
        }
        let scores = match score(inst) {
            Ok(s) if s.len() == inst.captions.len() => s,
            Ok(_) | Err(_) => {
                excluded += 1;
                continue;
            }
        };
        let t = tallies.entry(inst.category.clone()).or_default();
        t.1 += 1;
        if super::hit_within(&scores, inst.truth, 1) {
            t.0 += 1;
        }
    }
    let per_category: BTreeMap<String, f64> = tallies
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect();
    let values: Vec<f64> = per_category.values().copied().collect();
    Ok(RetrievalReport {
        macro_average: macro_average(&values)?,
        instances: instances.len() - excluded,
        excluded,
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winoground_rows_become_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("examples.jsonl");
        std::fs::write(
            &path,
            r#"{"id": 0, "caption_0": "an old person kisses a young person", "caption_1": "a young person kisses an old person", "image_0": "ex_0_img_0", "image_1": "ex_0_img_1", "tag": "Object"}"#,
        )
        .unwrap();
        let groups = winoground_groups(&path, Path::new("imgs")).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].id, "0");
        assert_eq!(groups[0].members[1].image, PathBuf::from("imgs/ex_0_img_1.png"));
    }

    #[test]
    fn crepe_lists_parse_both_styles() {
        assert_eq!(parse_list(r#"["a b", "c"]"#), vec!["a b", "c"]);
        assert_eq!(parse_list("['a b', 'c d']"), vec!["a b", "c d"]);
    }

    #[test]
    fn crepe_csv_and_retrieval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c4.csv");
        std::fs::write(&path, "image_id,caption,hard_negs\n12,a dog on grass,\"['a cat on grass', 'a dog on sand']\"\n").unwrap();
        let inst = crepe_instances(&path, Path::new("img"), "4").unwrap();
        assert_eq!(inst[0].captions.len(), 3);
        assert_eq!(inst[0].image, PathBuf::from("img/12.jpg"));
        let report = evaluate_retrieval(&inst, &|_| Ok(vec![0.9, 0.1, 0.2])).unwrap();
        assert_eq!(report.per_category["4"], 1.0);
        assert_eq!(report.macro_average, 1.0);
    }

    #[test]
    fn aro_categories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rel.json");
        std::fs::write(
            &path,
            r#"[{"image_path": "1.jpg", "true_caption": "the horse is eating the grass", "false_caption": "the grass is eating the horse", "relation_name": "eating"},
                {"image_path": "2.jpg", "true_caption": "the red car", "false_caption": "the car red", "attributes": ["red", "car"]}]"#,
        )
        .unwrap();
        let inst = aro_instances(&path, Path::new("vg")).unwrap();
        assert_eq!(inst[0].category, "eating");
        assert_eq!(inst[1].category, "red-car");
        let report = evaluate_retrieval(&inst, &|i| Ok(if i.category == "eating" { vec![1.0, 0.0] } else { vec![0.0, 1.0] })).unwrap();
        assert_eq!(report.macro_average, 0.5);
    }
}
