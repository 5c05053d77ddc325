#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use negmine_core::analysis;
use negmine_core::backends::Backends;
use negmine_core::backends::fixtures;
use negmine_core::config::{FilterConfig, GenerationConfig};
use negmine_core::filtering::{self, FilterReport};
use negmine_core::manifest;
use negmine_core::pipeline::{run_generation, GenerationRun, PromptTemplate, RunReport};
use negmine_core::SampleStatus;

pub const SEED: u64 = 7;

pub struct EndToEnd {
    /// Every file under the output directory, keyed by relative path.
    pub files: BTreeMap<String, Vec<u8>>,
    pub generation: RunReport,
    pub filter: FilterReport,
    pub generated: usize,
    pub survivors: usize,
}

fn collect(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect(&path, root, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

/// Fixture corpus -> generate -> filter -> stats, all with mock backends.
pub fn generate_filter_stats(root: &Path, jobs: usize) -> EndToEnd {
    let input = root.join("input");
    let out = root.join("out");
    let pairs = fixtures::write_corpus(&input).unwrap();
    let backends = Backends::mock(SEED, 32);
    let config = GenerationConfig {
        objects_per_image: 3,
        variations_per_object: 4,
        seed: SEED,
        ..GenerationConfig::default()
    };
    let template = PromptTemplate::default_template();
    let run = GenerationRun {
        config: &config,
        template: &template,
        backends: &backends,
        input_dir: &input,
        out_dir: &out,
        jobs,
    };
    let output = run_generation(&pairs, &run).unwrap();
    let samples = output.samples();
    let generated = samples.len();
    manifest::save_manifest(&samples, &out.join("generated.jsonl")).unwrap();

    let (filtered, filter) = filtering::filter_manifest(samples, &out, &FilterConfig::default(), backends.matcher.as_ref());
    manifest::save_manifest(&filtered, &out.join("filtered.jsonl")).unwrap();
    let survivors = filtered.iter().filter(|s| s.status == SampleStatus::Passed).count();

    let stats = out.join("stats");
    std::fs::create_dir_all(&stats).unwrap();
    let hist = analysis::score_histograms(&filtered, analysis::DEFAULT_BINS).unwrap();
    std::fs::write(stats.join("itm_variation.tsv"), hist.itm_variation.to_tsv()).unwrap();
    std::fs::write(stats.join("area_score.tsv"), hist.area_score.to_tsv()).unwrap();
    std::fs::write(stats.join("joint.tsv"), hist.joint.to_tsv()).unwrap();
    let unique = analysis::uniqueness_report(&filtered, None);
    std::fs::write(stats.join("uniqueness.json"), serde_json::to_vec_pretty(&unique).unwrap()).unwrap();
    std::fs::write(stats.join("mask_delta.tsv"), analysis::mask_delta_table(&filtered).to_tsv()).unwrap();
    std::fs::write(stats.join("filter_report.json"), serde_json::to_vec_pretty(&filter).unwrap()).unwrap();

    let mut files = BTreeMap::new();
    collect(&out, &out, &mut files);
    EndToEnd {
        files,
        generation: output.report,
        filter,
        generated,
        survivors,
    }
}
