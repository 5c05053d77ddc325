use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use negmine_core::pipeline::PromptTemplate;
use negmine_core::Config;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub generation: u64,
    pub train: u64,
    pub mock_backends: u64,
}

/// Everything needed to repeat a command: its arguments, the resolved
/// config and the counters it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: Config,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PromptTemplate>,
    pub seeds: Seeds,
    pub jobs: Option<usize>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub counters: serde_json::Value,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn start(command: &str, config: &Config, jobs: Option<usize>) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            template: None,
            seeds: Seeds {
                generation: config.generation.seed,
                train: config.train.seed,
                mock_backends: config.backends.mock_seed,
            },
            jobs,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            counters: serde_json::Value::Null,
            started_at: now,
            finished_at: now,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.outputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn finish(mut self, counters: impl Serialize, path: &Path) -> anyhow::Result<()> {
        self.counters = serde_json::to_value(counters)?;
        self.finished_at = Utc::now();
        write_json(path, &self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
