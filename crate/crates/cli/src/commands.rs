use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use negmine_core::analysis;
use negmine_core::backends::{fixtures, Backends, MatcherBackend};
use negmine_core::config::BackendKind;
use negmine_core::curation;
use negmine_core::evaluation::benchmarks::{self, RetrievalInstance};
use negmine_core::evaluation::{
    evaluate_testset, groups_from_samples, EmbeddingTable, EvalError, EvalGroup, GroupScorer, GroupSimilarity,
    MatcherScorer,
};
use negmine_core::filtering;
use negmine_core::manifest;
use negmine_core::model::cosine;
use negmine_core::pipeline::{run_generation, GenerationRun, PromptTemplate};
use negmine_core::raster;
use negmine_core::training::{finetune, FinetuneOptions, LinearDualEncoder, MixedBatchSampler, TrainableDualEncoder};
use negmine_core::{Config, GeneratedSample, SampleStatus};

use crate::args::*;
use crate::run::{write_json, RunManifest, RUN_MANIFEST};

pub struct Ctx {
    pub config: Config,
    pub jobs: Option<usize>,
}

fn apply_backend(config: &mut Config, choice: Option<BackendChoice>) {
    match choice {
        Some(BackendChoice::Mock) => config.backends.kind = BackendKind::Mock,
        Some(BackendChoice::Real) => config.backends.kind = BackendKind::Real,
        None => {}
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn backends(config: &Config) -> Result<Backends> {
    Backends::from_config(&config.backends).context("configuring backends")
}

fn rebase_samples(samples: &mut [GeneratedSample], from: &Path, to: &Path) {
    for s in samples {
        s.image.path = manifest::rebase(&s.image.path, from, to);
        s.mask.path = manifest::rebase(&s.mask.path, from, to);
        s.source_image.path = manifest::rebase(&s.source_image.path, from, to);
    }
}

fn load_template(path: Option<&Path>) -> Result<PromptTemplate> {
    let Some(path) = path else {
        return Ok(PromptTemplate::default_template());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let template: PromptTemplate = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    template.validate().with_context(|| format!("template {}", path.display()))?;
    Ok(template)
}

/// Resolve flag overrides into the config, then validate it.
pub fn resolve_config(mut config: Config, command: &Command) -> Result<Config> {
    match command {
        Command::Generate(a) => {
            apply_backend(&mut config, a.backend);
            if let Some(seed) = a.seed {
                config.generation.seed = seed;
                config.backends.mock_seed = seed;
            }
            if let Some(m) = a.objects {
                config.generation.objects_per_image = m;
            }
            if let Some(k) = a.variations {
                config.generation.variations_per_object = k;
            }
        }
        Command::Filter(a) => {
            apply_backend(&mut config, a.backend);
            if let Some(v) = a.itm_threshold {
                config.filter.itm_threshold = v;
            }
            if let Some(v) = a.area_threshold {
                config.filter.area_threshold = v;
            }
            if let Some(v) = a.epsilon {
                config.filter.epsilon = v;
            }
        }
        Command::Train(a) => {
            apply_backend(&mut config, a.backend);
            let t = &mut config.train;
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.mix_ratio {
                t.mix_ratio = v;
            }
            if let Some(v) = a.lr {
                t.learning_rate = v;
            }
            if let Some(v) = a.seed {
                t.seed = v;
            }
            if let Some(v) = a.max_steps {
                t.max_steps = v;
            }
        }
        Command::Eval(a) => apply_backend(&mut config, a.backend),
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

pub fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    require_file(&a.pairs, "pairs manifest")?;
    let template = load_template(a.template.as_deref())?;
    let pairs = manifest::load_pairs(&a.pairs)?;
    let backends = backends(&ctx.config)?;
    let input_dir = manifest::base_dir(&a.pairs);

    let mut rm = RunManifest::start("generate", &ctx.config, ctx.jobs);
    rm.template = Some(template.clone());
    let run = GenerationRun {
        config: &ctx.config.generation,
        template: &template,
        backends: &backends,
        input_dir: &input_dir,
        out_dir: &a.out,
        jobs: ctx.jobs.unwrap_or(0),
    };
    let output = run_generation(&pairs, &run)?;
    let samples = output.samples();
    let generated = a.out.join("generated.jsonl");
    let pairs_out = a.out.join("pairs.jsonl");
    let report = a.out.join("generate_report.json");
    manifest::save_manifest(&samples, &generated)?;
    manifest::save_pairs(&output.pairs, &pairs_out)?;
    write_json(&report, &output.report)?;
    for e in &output.report.errors {
        log::info!("{} [{}]: {}", e.item, e.stage, e.message);
    }
    log::info!(
        "{} samples in {} groups from {} pairs",
        output.report.counters.samples_generated,
        output.report.counters.groups_generated,
        pairs.len()
    );
    rm.input("pairs", &a.pairs)
        .output("generated", &generated)
        .output("pairs", &pairs_out)
        .output("report", &report);
    rm.finish(&output.report.counters, &a.out.join(RUN_MANIFEST))
}

pub fn filter(ctx: &Ctx, a: &FilterArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let mut samples = manifest::load_manifest(&a.manifest)?;
    let backends = backends(&ctx.config)?;
    let (out_dir, out) = if a.out.extension().is_some_and(|e| e == "jsonl") {
        (manifest::base_dir(&a.out), a.out.clone())
    } else {
        (a.out.clone(), a.out.join("filtered.jsonl"))
    };
    create_dir(&out_dir)?;
    rebase_samples(&mut samples, &manifest::base_dir(&a.manifest), &out_dir);

    let rm = RunManifest::start("filter", &ctx.config, ctx.jobs);
    let (filtered, report) = filtering::filter_manifest(samples, &out_dir, &ctx.config.filter, backends.matcher.as_ref());
    let report_path = out_dir.join("filter_report.json");
    manifest::save_manifest(&filtered, &out)?;
    write_json(&report_path, &report)?;
    log::info!("{} of {} samples passed", report.passed, report.samples);

    #[derive(Serialize)]
    struct Counters {
        groups: usize,
        samples: usize,
        scored: usize,
        passed: usize,
    }
    let mut rm = rm;
    rm.input("manifest", &a.manifest)
        .output("filtered", &out)
        .output("report", &report_path);
    rm.finish(
        Counters {
            groups: report.groups,
            samples: report.samples,
            scored: report.scored,
            passed: report.passed,
        },
        &out_dir.join(RUN_MANIFEST),
    )
}

pub fn stats(ctx: &Ctx, a: &StatsArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    if a.bins == 0 {
        bail!("--bins must be >= 1");
    }
    let samples = manifest::load_manifest(&a.manifest)?;
    let hist = analysis::score_histograms(&samples, a.bins)?;
    create_dir(&a.out)?;
    let mut rm = RunManifest::start("stats", &ctx.config, ctx.jobs);
    rm.input("manifest", &a.manifest);
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = a.out.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        rm.output(name, &path);
        Ok(())
    };
    write("itm_variation.tsv", hist.itm_variation.to_tsv())?;
    write("itm_original.tsv", hist.itm_original.to_tsv())?;
    write("area_score.tsv", hist.area_score.to_tsv())?;
    write("joint.tsv", hist.joint.to_tsv())?;
    write("mask_delta.tsv", analysis::mask_delta_table(&samples).to_tsv())?;
    let unique = analysis::uniqueness_report(&samples, None);
    write("uniqueness.json", serde_json::to_string_pretty(&unique)? + "\n")?;
    rm.finish(
        serde_json::json!({ "samples": samples.len(), "bins": a.bins }),
        &a.out.join(RUN_MANIFEST),
    )
}

type Features = (Vec<f64>, Vec<f64>);

fn features(matcher: &dyn MatcherBackend, caption: &str, image: &Path) -> Result<Features> {
    let t = matcher.embed_text(caption)?;
    let img = raster::load_rgb(image)?;
    let i = matcher.embed_image(&img)?;
    Ok((t.0, i.0))
}

#[derive(Debug, Serialize)]
struct TrainReport {
    generated_pool: usize,
    real_pool: usize,
    generated_per_batch: usize,
    real_per_batch: usize,
    batches_per_epoch: usize,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    tau: f64,
}

pub fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let pairs_path = a
        .pairs
        .clone()
        .unwrap_or_else(|| manifest::base_dir(&a.manifest).join("pairs.jsonl"));
    require_file(&a.manifest, "manifest")?;
    require_file(&pairs_path, "pairs manifest")?;
    let samples = manifest::load_manifest(&a.manifest)?;
    let pairs = manifest::load_pairs(&pairs_path)?;
    let backends = backends(&ctx.config)?;
    let matcher = backends.matcher.as_ref();
    let cfg = &ctx.config.train;

    let sample_dir = manifest::base_dir(&a.manifest);
    let generated: Vec<Features> = samples
        .iter()
        .filter(|s| matches!(s.status, SampleStatus::Passed | SampleStatus::Accepted))
        .map(|s| features(matcher, &s.caption, &manifest::resolve(&sample_dir, &s.image.path)))
        .collect::<Result<_>>()?;
    let pair_dir = manifest::base_dir(&pairs_path);
    let real: Vec<Features> = pairs
        .iter()
        .map(|p| features(matcher, &p.caption, &manifest::resolve(&pair_dir, &p.image.path)))
        .collect::<Result<_>>()?;
    let (gen_n, real_n) = (generated.len(), real.len());
    let (text_in, image_in) = generated
        .first()
        .or(real.first())
        .map(|(t, i)| (t.len(), i.len()))
        .ok_or_else(|| anyhow!("no training data: manifest has no passed samples and pairs is empty"))?;

    let mut sampler = MixedBatchSampler::new(generated, real, cfg.batch_size, cfg.mix_ratio, cfg.seed)?;
    let mut encoder = LinearDualEncoder::new(text_in, image_in, cfg.embedding_dim, cfg.seed);
    create_dir(&a.out)?;
    let ckpt_dir = a.out.join("checkpoints");
    let rm = RunManifest::start("train", &ctx.config, ctx.jobs);
    let opts = FinetuneOptions {
        checkpoint_dir: Some(&ckpt_dir),
        augment: None,
    };
    let outcome = finetune(&mut encoder, &mut sampler, cfg, &opts)?;

    let mut curve = String::from("step\tepoch\tloss\ttau\n");
    for r in &outcome.loss_curve {
        curve.push_str(&format!("{}\t{}\t{:.8}\t{:.8}\n", r.step, r.epoch, r.loss, r.tau));
    }
    let curve_path = a.out.join("loss_curve.tsv");
    std::fs::write(&curve_path, curve).with_context(|| format!("writing {}", curve_path.display()))?;
    let records_path = a.out.join("loss_curve.jsonl");
    manifest::write_jsonl(&records_path, &outcome.loss_curve)?;
    let encoder_path = a.out.join("encoder.json");
    write_json(&encoder_path, &encoder)?;
    let report = TrainReport {
        generated_pool: gen_n,
        real_pool: real_n,
        generated_per_batch: sampler.generated_per_batch(),
        real_per_batch: sampler.real_per_batch(),
        batches_per_epoch: sampler.batches_per_epoch(),
        steps: outcome.steps,
        initial_loss: outcome.loss_curve.first().map(|r| r.loss),
        final_loss: outcome.loss_curve.last().map(|r| r.loss),
        tau: outcome.tau,
    };
    let report_path = a.out.join("train_report.json");
    write_json(&report_path, &report)?;
    log::info!("{} steps, tau {:.4}", outcome.steps, outcome.tau);

    let mut rm = rm;
    rm.input("manifest", &a.manifest)
        .input("pairs", &pairs_path)
        .output("loss_curve", &curve_path)
        .output("loss_records", &records_path)
        .output("encoder", &encoder_path)
        .output("report", &report_path)
        .output("checkpoints", &ckpt_dir);
    rm.finish(&report, &a.out.join(RUN_MANIFEST))
}

/// Backend embeddings, optionally passed through a trained projection head.
struct Featurizer<'a> {
    matcher: &'a dyn MatcherBackend,
    encoder: Option<LinearDualEncoder>,
}

impl Featurizer<'_> {
    fn text(&self, caption: &str) -> Result<Vec<f64>, String> {
        let t = self.matcher.embed_text(caption).map_err(|e| e.to_string())?.0;
        Ok(match &self.encoder {
            Some(e) => e.encode_text(&t),
            None => t,
        })
    }

    fn image(&self, path: &Path) -> Result<Vec<f64>, String> {
        let img = raster::load_rgb(path).map_err(|e| e.to_string())?;
        let i = self.matcher.embed_image(&img).map_err(|e| e.to_string())?.0;
        Ok(match &self.encoder {
            Some(e) => e.encode_image(&i),
            None => i,
        })
    }
}

struct EncoderScorer<'a> {
    features: Featurizer<'a>,
    base_dir: PathBuf,
}

impl GroupScorer for EncoderScorer<'_> {
    fn similarity(&self, group: &EvalGroup) -> Result<GroupSimilarity, EvalError> {
        let fail = |item: &str, message: String| EvalError::Scoring {
            item: item.to_string(),
            message,
        };
        let mut texts = Vec::new();
        let mut images = Vec::new();
        for m in &group.members {
            texts.push(self.features.text(&m.caption).map_err(|e| fail(&m.id, e))?);
            let path = manifest::resolve(&self.base_dir, &m.image);
            images.push(self.features.image(&path).map_err(|e| fail(&m.id, e))?);
        }
        GroupSimilarity::from_embeddings(&texts, &images)
    }
}

enum EvalInput {
    Groups(Vec<EvalGroup>, PathBuf),
    Retrieval(Vec<RetrievalInstance>),
}

fn eval_input(a: &EvalArgs) -> Result<EvalInput> {
    let image_dir = |file: &Path| a.image_dir.clone().unwrap_or_else(|| manifest::base_dir(file));
    if let Some(p) = &a.groups {
        require_file(p, "groups file")?;
        return Ok(EvalInput::Groups(manifest::read_validated(p)?, manifest::base_dir(p)));
    }
    if let Some(p) = &a.manifest {
        require_file(p, "manifest")?;
        let samples: Vec<GeneratedSample> = manifest::load_manifest(p)?
            .into_iter()
            .filter(|s| !matches!(s.status, SampleStatus::Rejected | SampleStatus::HumanRejected))
            .collect();
        return Ok(EvalInput::Groups(groups_from_samples(&samples), manifest::base_dir(p)));
    }
    if let Some(p) = &a.winoground {
        require_file(p, "winoground file")?;
        let dir = image_dir(p);
        return Ok(EvalInput::Groups(benchmarks::winoground_groups(p, &dir)?, dir));
    }
    if let Some(p) = &a.aro {
        require_file(p, "aro file")?;
        return Ok(EvalInput::Retrieval(benchmarks::aro_instances(p, &image_dir(p))?));
    }
    if let Some(p) = &a.crepe {
        require_file(p, "crepe file")?;
        return Ok(EvalInput::Retrieval(benchmarks::crepe_instances(p, &image_dir(p), &a.category)?));
    }
    bail!("no evaluation input given")
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let input = eval_input(a)?;
    let encoder: Option<LinearDualEncoder> = match &a.encoder {
        Some(p) => {
            require_file(p, "encoder")?;
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let table = a.embeddings.as_deref().map(EmbeddingTable::load).transpose()?;
    let backends = backends(&ctx.config)?;
    create_dir(&a.report)?;

    let mut rm = RunManifest::start("eval", &ctx.config, ctx.jobs);
    for (name, p) in [
        ("groups", &a.groups),
        ("manifest", &a.manifest),
        ("winoground", &a.winoground),
        ("aro", &a.aro),
        ("crepe", &a.crepe),
        ("embeddings", &a.embeddings),
        ("encoder", &a.encoder),
    ] {
        if let Some(p) = p {
            rm.input(name, p);
        }
    }
    let report_path = a.report.join("report.json");
    let counters = match input {
        EvalInput::Groups(groups, base_dir) => {
            let report = match (&table, encoder) {
                (Some(t), _) => evaluate_testset(&groups, t),
                (None, None) => evaluate_testset(
                    &groups,
                    &MatcherScorer {
                        matcher: backends.matcher.as_ref(),
                        base_dir,
                    },
                ),
                (None, Some(e)) => evaluate_testset(
                    &groups,
                    &EncoderScorer {
                        features: Featurizer {
                            matcher: backends.matcher.as_ref(),
                            encoder: Some(e),
                        },
                        base_dir,
                    },
                ),
            };
            for x in &report.excluded {
                log::warn!("excluded {}: {}", x.group, x.reason);
            }
            let tsv_path = a.report.join("metrics.tsv");
            std::fs::write(&tsv_path, report.to_tsv()).with_context(|| format!("writing {}", tsv_path.display()))?;
            write_json(&report_path, &report)?;
            rm.output("metrics", &tsv_path);
            serde_json::json!({
                "groups_evaluated": report.groups_evaluated,
                "groups_excluded": report.groups_excluded,
            })
        }
        EvalInput::Retrieval(instances) => {
            if table.is_some() {
                bail!("--embeddings applies to group evaluation only");
            }
            let features = Featurizer {
                matcher: backends.matcher.as_ref(),
                encoder,
            };
            let score = |inst: &RetrievalInstance| -> Result<Vec<f64>, EvalError> {
                let fail = |message: String| EvalError::Scoring {
                    item: inst.id.clone(),
                    message,
                };
                let img = features.image(&inst.image).map_err(fail)?;
                inst.captions
                    .iter()
                    .map(|c| {
                        let t = features.text(c).map_err(fail)?;
                        cosine(&t, &img).ok_or(EvalError::ZeroNorm)
                    })
                    .collect()
            };
            let report = benchmarks::evaluate_retrieval(&instances, &score)?;
            let mut tsv = String::from("category\thits@1\n");
            for (c, v) in &report.per_category {
                tsv.push_str(&format!("{c}\t{:.2}\n", v * 100.0));
            }
            tsv.push_str(&format!("macro\t{:.2}\n", report.macro_average * 100.0));
            let tsv_path = a.report.join("retrieval.tsv");
            std::fs::write(&tsv_path, tsv).with_context(|| format!("writing {}", tsv_path.display()))?;
            write_json(&report_path, &report)?;
            rm.output("retrieval", &tsv_path);
            serde_json::json!({ "instances": report.instances, "excluded": report.excluded })
        }
    };
    rm.output("report", &report_path);
    rm.finish(counters, &a.report.join(RUN_MANIFEST))
}

fn decisions_path(manifest_path: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest::base_dir(manifest_path).join("decisions.jsonl"))
}

pub fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    if let Some(ui) = &a.ui {
        if !ui.is_dir() {
            bail!("ui directory {} does not exist", ui.display());
        }
    }
    let log_path = decisions_path(&a.manifest, a.decisions.as_deref());
    let state = negmine_review::AppState::open(&a.manifest, &log_path)?
        .with_ui_dir(a.ui.clone())
        .with_filter_config(ctx.config.filter.clone());
    let mut rm = RunManifest::start("serve", &ctx.config, ctx.jobs);
    rm.input("manifest", &a.manifest).output("decisions", &log_path);
    let rm_path = manifest::base_dir(&log_path).join("serve_run_manifest.json");
    rm.finish(serde_json::json!({ "bind": a.bind.to_string() }), &rm_path)?;

    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = ctx.jobs.filter(|n| *n > 0) {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().context("starting runtime")?;
    log::info!("serving {} on http://{}", a.manifest.display(), a.bind);
    rt.block_on(negmine_review::serve(state, a.bind))?;
    Ok(())
}

pub fn export(ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let log_path = decisions_path(&a.manifest, a.decisions.as_deref());
    let samples = manifest::load_manifest(&a.manifest)?;
    let decisions = if log_path.exists() {
        curation::read_log(&log_path)?
    } else {
        log::warn!("no decision log at {}; nothing is accepted", log_path.display());
        Vec::new()
    };
    let mut export = curation::export_curated(&samples, &decisions);
    create_dir(&a.out)?;
    rebase_samples(&mut export.samples, &manifest::base_dir(&a.manifest), &a.out);

    let curated = a.out.join("curated.jsonl");
    std::fs::write(&curated, export.to_jsonl()?).with_context(|| format!("writing {}", curated.display()))?;
    let dist_json = a.out.join("distribution.json");
    write_json(&dist_json, &export.distribution)?;
    let dist_txt = a.out.join("distribution.txt");
    let text = export.distribution.describe();
    std::fs::write(&dist_txt, format!("{text}\n")).with_context(|| format!("writing {}", dist_txt.display()))?;
    log::info!("{text}");

    let mut rm = RunManifest::start("export", &ctx.config, ctx.jobs);
    rm.input("manifest", &a.manifest)
        .input("decisions", &log_path)
        .output("curated", &curated)
        .output("distribution", &dist_json);
    rm.finish(
        serde_json::json!({
            "decisions": decisions.len(),
            "accepted": export.samples.len(),
            "images": export.distribution.images(),
        }),
        &a.out.join(RUN_MANIFEST),
    )
}

pub fn fixtures(ctx: &Ctx, a: &FixturesArgs) -> Result<()> {
    create_dir(&a.out)?;
    let pairs = fixtures::write_corpus(&a.out)?;
    let path = a.out.join("pairs.jsonl");
    manifest::save_pairs(&pairs, &path)?;
    let mut rm = RunManifest::start("fixtures", &ctx.config, ctx.jobs);
    rm.output("pairs", &path);
    rm.finish(serde_json::json!({ "pairs": pairs.len() }), &a.out.join(RUN_MANIFEST))
}
