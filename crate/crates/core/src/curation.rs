//! Human verification of filtered samples: an append-only decision log,
//! last-timestamp-wins replay, and export of the accepted test set.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::manifest::{self, ManifestError};
use crate::model::{GeneratedSample, SampleStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub sample_id: String,
    pub verdict: Verdict,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Line-delimited decision log. Appends are serialized through one lock, so
/// concurrent writers never interleave records.
pub struct DecisionLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl DecisionLog {
    pub fn open(path: &Path) -> Result<Self, ManifestError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|source| ManifestError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)
            .map_err(|source| ManifestError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, decision: &ReviewDecision) -> Result<(), ManifestError> {
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        manifest::append_jsonl(&mut file, decision)?;
        file.sync_data().map_err(|source| ManifestError::Io {
            path: self.path.clone(),
            source,
        })
    }

    /// Every record written so far. Holding the append lock while reading
    /// pins the log at a consistent offset.
    pub fn snapshot(&self) -> Result<Vec<ReviewDecision>, ManifestError> {
        let _guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        read_log(&self.path)
    }
}

/// Read a decision log; a missing file is an empty log. A torn final line
/// (no trailing newline, unparseable) is ignored.
pub fn read_log(path: &Path) -> Result<Vec<ReviewDecision>, ManifestError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(ManifestError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(d) => out.push(d),
            Err(_) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: ignoring torn final record", path.display());
            }
            Err(source) => return Err(ManifestError::Parse { line: i + 1, source }),
        }
    }
    Ok(out)
}

/// Count records without parsing them.
pub fn log_len(path: &Path) -> usize {
    File::open(path)
        .map(|f| BufReader::new(f).lines().map_while(Result::ok).filter(|l| !l.trim().is_empty()).count())
        .unwrap_or(0)
}

/// The effective decision per sample: latest timestamp wins, and among equal
/// timestamps the later log record wins.
pub fn effective_decisions(decisions: &[ReviewDecision]) -> HashMap<String, ReviewDecision> {
    let mut out: HashMap<String, ReviewDecision> = HashMap::new();
    for d in decisions {
        match out.get(&d.sample_id) {
            Some(prev) if prev.timestamp > d.timestamp => {}
            _ => {
                out.insert(d.sample_id.clone(), d.clone());
            }
        }
    }
    out
}

/// Whether a sample's filter scores passed, which makes it reviewable.
pub fn is_reviewable(s: &GeneratedSample) -> bool {
    s.scores.as_ref().is_some_and(|sc| sc.passed)
        && matches!(s.status, SampleStatus::Passed | SampleStatus::Accepted | SampleStatus::HumanRejected)
}

/// Overlay the effective verdicts on the filtered statuses. Samples that did
/// not pass filtering keep their status whatever the log says.
pub fn apply_decisions(samples: &mut [GeneratedSample], effective: &HashMap<String, ReviewDecision>) {
    for s in samples.iter_mut() {
        if !is_reviewable(s) {
            continue;
        }
        s.status = match effective.get(&s.id).map(|d| d.verdict) {
            Some(Verdict::Accept) => SampleStatus::Accepted,
            Some(Verdict::Reject) => SampleStatus::HumanRejected,
            None => SampleStatus::Passed,
        };
    }
}

/// Number of source images per count of surviving variations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SizeDistribution(pub BTreeMap<usize, usize>);

impl SizeDistribution {
    pub fn images(&self) -> usize {
        self.0.values().sum()
    }

    pub fn get(&self, k: usize) -> usize {
        self.0.get(&k).copied().unwrap_or(0)
    }

    /// e.g. "278 unique images: 122 with 4 variations, 139 with 3 variations, 17 with 2 variations"
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .0
            .iter()
            .rev()
            .map(|(k, n)| format!("{n} with {k} variation{}", if *k == 1 { "" } else { "s" }))
            .collect();
        if parts.is_empty() {
            return "0 unique images".to_string();
        }
        format!("{} unique images: {}", self.images(), parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedExport {
    /// Accepted samples, grouped per source image in first-seen order.
    pub samples: Vec<GeneratedSample>,
    pub distribution: SizeDistribution,
}

impl CuratedExport {
    pub fn to_jsonl(&self) -> Result<String, ManifestError> {
        manifest::to_jsonl(&self.samples)
    }
}

/// Keep only samples that passed filtering and were accepted by a reviewer.
pub fn export_curated(samples: &[GeneratedSample], decisions: &[ReviewDecision]) -> CuratedExport {
    let effective = effective_decisions(decisions);
    let mut reviewed = samples.to_vec();
    apply_decisions(&mut reviewed, &effective);
    let mut order: Vec<String> = Vec::new();
    let mut by_source: HashMap<String, Vec<GeneratedSample>> = HashMap::new();
    for s in reviewed.into_iter().filter(|s| s.status == SampleStatus::Accepted) {
        by_source
            .entry(s.source_pair_id.clone())
            .or_insert_with(|| {
                order.push(s.source_pair_id.clone());
                Vec::new()
            })
            .push(s);
    }
    let mut distribution = BTreeMap::new();
    let mut out = Vec::new();
    for id in order {
        let group = by_source.remove(&id).unwrap_or_default();
        *distribution.entry(group.len()).or_default() += 1;
        out.extend(group);
    }
    CuratedExport {
        samples: out,
        distribution: SizeDistribution(distribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn decision(id: &str, verdict: Verdict, secs: i64) -> ReviewDecision {
        ReviewDecision {
            sample_id: id.into(),
            verdict,
            reviewer: "r".into(),
            timestamp: Utc.timestamp_opt(secs, 0).unwrap(),
            reason: None,
        }
    }

    #[test]
    fn last_timestamp_wins() {
        let log = vec![
            decision("a", Verdict::Reject, 20),
            decision("a", Verdict::Accept, 10),
            decision("b", Verdict::Accept, 5),
            decision("b", Verdict::Reject, 5),
        ];
        let eff = effective_decisions(&log);
        assert_eq!(eff["a"].verdict, Verdict::Reject);
        assert_eq!(eff["b"].verdict, Verdict::Reject);
    }

    #[test]
    fn log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        let log = DecisionLog::open(&path).unwrap();
        log.append(&decision("a", Verdict::Accept, 1)).unwrap();
        log.append(&decision("b", Verdict::Reject, 2)).unwrap();
        assert_eq!(log.snapshot().unwrap().len(), 2);
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"sample_id\": \"c\", \"ver"))
            .unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 2);
        assert!(read_log(&dir.path().join("missing.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn describe_shape() {
        let d = SizeDistribution(BTreeMap::from([(4, 122), (3, 139), (2, 17)]));
        assert_eq!(d.images(), 278);
        assert_eq!(
            d.describe(),
            "278 unique images: 122 with 4 variations, 139 with 3 variations, 17 with 2 variations"
        );
        assert_eq!(SizeDistribution::default().describe(), "0 unique images");
    }
}
