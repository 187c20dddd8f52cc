use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use agenet::bench::{self, ArtifactTarget, BenchConfig, MonotonicClock};
use agenet::dataset::{self, FsImageSource};
use agenet::evaluation::{self, EvalReport};
use agenet::hpo::{self, FinalizeOptions, LockedConfig, SearchOptions, StudyRecord};
use agenet::io::{sha256_file, sha256_hex, write_atomic};
use agenet::model::Accounting;
use agenet::parity::{self, ArtifactStage, Backend, ParityOptions};
use agenet::training::{self, RunOptions};
use agenet::{AgeModel, Corpus, Pretrained, Split, SplitManifest, TransformSpec};
use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;

use crate::args::{
    BenchArgs, DataArgs, EvaluateArgs, ExportArgs, FinalizeArgs, HpoSearchArgs, ParityArgs, PrepareArgs,
    SplitArgs, StageArg, TrainArgs,
};
use crate::config::{Config, ConfigError};
use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const SAMPLES_FILE: &str = "data/samples.json";
pub const SPLIT_FILE: &str = "data/split.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.safetensors";
pub const TRAIN_LOG: &str = "logs/train.jsonl";
pub const ACCOUNTING_FILE: &str = "reports/accounting.json";

/// State shared by every command: the resolved config, the run directory
/// and the inputs read so far.
pub struct Ctx {
    pub config: Config,
    pub run_id: String,
    pub dir: PathBuf,
    pub force: bool,
    pub inputs: BTreeMap<String, String>,
}

impl Ctx {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Checks that `path` exists, records its checksum, and names the
    /// command that produces it otherwise.
    pub fn input(&mut self, path: &Path, producer: &'static str) -> Result<PathBuf> {
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                path: path.to_path_buf(),
                producer,
            }
            .into());
        }
        if path.is_file() {
            let sum = sha256_file(path).with_context(|| format!("hashing {}", path.display()))?;
            self.inputs.insert(path.display().to_string(), sum);
        }
        Ok(path.to_path_buf())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(rel);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn pretrained(&self) -> Pretrained {
        match &self.config.pretrained {
            Some(p) => Pretrained::File(p.clone()),
            None => {
                warn!("no pretrained backbone configured; using seeded random initialization");
                Pretrained::Random {
                    seed: self.config.seeds()["backbone_init"],
                }
            }
        }
    }

    fn load_corpus(&mut self, data: &DataArgs) -> Result<Corpus> {
        let samples_path = self.input(&data.samples, "prepare")?;
        let split_path = self.input(&data.split, "split")?;
        let (samples, _) = dataset::load_samples(&samples_path)?;
        let manifest = SplitManifest::load(&split_path)?;
        Ok(Corpus::new(samples, manifest, Box::new(FsImageSource))?)
    }
}

pub fn prepare(ctx: &mut Ctx, args: &PrepareArgs) -> Result<()> {
    let records = match &args.index {
        Some(index) => {
            let index = ctx.input(index, "prepare")?;
            dataset::records_from_index(&index)?
        }
        None => {
            let root = ctx.config.data_root.clone().ok_or_else(|| {
                ConfigError::new("data_root", "not set; pass --data-root or set AGENET_DATA_ROOT")
            })?;
            if !root.is_dir() {
                return Err(ConfigError::new("data_root", format!("{} is not a directory", root.display())).into());
            }
            let records = dataset::records_from_dir(&root)?;
            let listing: String = records.iter().map(|r| format!("{}\n", r.id)).collect();
            ctx.inputs
                .insert(format!("{} (listing)", root.display()), sha256_hex(listing.as_bytes()));
            records
        }
    };
    let (samples, log) = dataset::curate(records, dataset::probe_image_file)?;
    dataset::save_samples(&ctx.path(SAMPLES_FILE), &samples, &log)?;
    ctx.write_json("reports/curation.json", &log)?;
    println!("{log}");
    Ok(())
}

pub fn split(ctx: &mut Ctx, args: &SplitArgs) -> Result<()> {
    let path = ctx.input(&args.samples, "prepare")?;
    let (samples, log) = dataset::load_samples(&path)?;
    let mut manifest = dataset::stratified_split(&samples, ctx.config.split.ratios, ctx.config.seed)?;
    manifest.curation_log = Some(log);
    manifest.save(&ctx.path(SPLIT_FILE))?;
    let total: usize = manifest.bin_counts.values().map(|c| c.total()).sum();
    let mut t = String::from("split\tcount\n");
    for s in Split::ALL {
        writeln_str(&mut t, &format!("{}\t{}", s.name(), manifest.split_len(s)));
    }
    writeln_str(&mut t, &format!("total\t{total}"));
    ctx.write_text("reports/split_counts.tsv", &t)?;
    print!("{t}");
    Ok(())
}

fn writeln_str(s: &mut String, line: &str) {
    s.push_str(line);
    s.push('\n');
}

fn write_accounting(ctx: &Ctx, model: &AgeModel) -> Result<Accounting> {
    let acc = model.accounting();
    ctx.write_json(ACCOUNTING_FILE, &acc)?;
    Ok(acc)
}

fn evaluate_into(ctx: &Ctx, model: &mut AgeModel, corpus: &Corpus, split: Split) -> Result<EvalReport> {
    let side = model.spec().input_size;
    let report = evaluation::evaluate(model, corpus, split, &TransformSpec::eval(side), ctx.config.eval.batch_size)?;
    report.save(&ctx.path(&format!("reports/eval_{}.json", split.name())))?;
    evaluation::emit_diagnostics(&report, &ctx.path("reports"), split.name())?;
    println!("{} MAE {:.4} over {} samples", split.name(), report.mae, report.n);
    Ok(report)
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_mae: f64,
    epochs_run: usize,
    val_mae_eval_transform: f64,
}

pub fn train(ctx: &mut Ctx, args: &TrainArgs) -> Result<()> {
    let corpus = ctx.load_corpus(&args.data)?;
    let spec = ctx.config.train_spec();
    let pretrained = ctx.pretrained();
    if let Pretrained::File(p) = &pretrained {
        ctx.input(p, "train")?;
    }
    let mut model = AgeModel::build(ctx.config.model.clone(), &pretrained, ctx.config.seeds()["model_init"])?;
    write_accounting(ctx, &model)?;
    let opts = RunOptions {
        out_dir: Some(ctx.dir.clone()),
        resume: args.resume,
        stop_after: args.stop_after,
    };
    let outcome = training::run(&mut model, &corpus, &spec, &opts)?;
    outcome.best.save(&ctx.path(BEST_CHECKPOINT))?;
    let report = evaluate_into(ctx, &mut model, &corpus, Split::Val)?;
    ctx.write_json(
        "reports/train_summary.json",
        &TrainSummary {
            best_epoch: outcome.policy.best_epoch,
            best_val_mae: outcome.policy.best_value,
            epochs_run: outcome.records.len(),
            val_mae_eval_transform: report.mae,
        },
    )?;
    println!(
        "best epoch {} with val MAE {:.4}",
        outcome.policy.best_epoch, outcome.policy.best_value
    );
    Ok(())
}

pub fn hpo_search(ctx: &mut Ctx, args: &HpoSearchArgs) -> Result<()> {
    let corpus = ctx.load_corpus(&args.data)?;
    let c = &ctx.config;
    let mut opts = SearchOptions::new(args.study_id.clone().unwrap_or_else(|| ctx.run_id.clone()), c.seeds()["hpo"]);
    opts.budget = c.hpo.budget;
    opts.epoch_cap = c.hpo.epoch_cap;
    opts.space = c.hpo.space.clone();
    opts.base_train = c.train_spec();
    opts.base_model = c.model.clone();
    opts.pretrained = ctx.pretrained();
    let study = hpo::search(&corpus, &opts)?;
    let study_sha = hpo::save_sealed(&ctx.path("reports/study.json"), &study)?;
    let locked = hpo::lock(&study, c.hpo.final_epochs);
    let locked_sha = hpo::save_sealed(&ctx.path("reports/locked.json"), &locked)?;
    ctx.write_text("reports/trials.tsv", &trial_tsv(&study))?;
    let best = study.best();
    println!(
        "best trial {} (val MAE {:.4}); study {study_sha}, locked config {locked_sha}",
        best.trial_id,
        best.val_mae_best.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn trial_tsv(study: &StudyRecord) -> String {
    let mut t = String::from("trial\tstatus\tlr\tdropout\tbatch_size\ttransform\tval_mae_best\tbest_epoch\n");
    for r in &study.trials {
        writeln_str(
            &mut t,
            &format!(
                "{}\t{:?}\t{:.6e}\t{:.4}\t{}\t{}\t{}\t{}",
                r.trial_id,
                r.status,
                r.config.lr,
                r.config.dropout,
                r.config.batch_size,
                r.config.transform.name(),
                r.val_mae_best.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                r.best_epoch.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            ),
        );
    }
    t
}

pub fn hpo_finalize(ctx: &mut Ctx, args: &FinalizeArgs) -> Result<()> {
    let locked_path = ctx.input(&args.locked, "hpo-search")?;
    let (locked, sha): (LockedConfig, String) = hpo::load_sealed(&locked_path)?;
    let corpus = ctx.load_corpus(&args.data)?;
    let registry_dir = args
        .registry_dir
        .clone()
        .unwrap_or_else(|| ctx.config.runs_dir.join("registry"));
    let opts = FinalizeOptions {
        run_id: ctx.run_id.clone(),
        registry_dir,
        out_dir: Some(ctx.dir.clone()),
        force: ctx.force,
        pretrained: ctx.pretrained(),
    };
    let (report, mut model) = hpo::finalize(&corpus, &locked, &sha, &opts)?;
    ctx.write_json("reports/final.json", &report)?;
    model.checkpoint(report.best_epoch, "best").save(&ctx.path(BEST_CHECKPOINT))?;
    write_accounting(ctx, &model)?;
    evaluate_into(ctx, &mut model, &corpus, Split::Val)?;
    evaluate_into(ctx, &mut model, &corpus, Split::Test)?;
    println!("locked run best epoch {} val MAE {:.4}", report.best_epoch, report.best_val_mae);
    Ok(())
}

pub fn evaluate(ctx: &mut Ctx, args: &EvaluateArgs) -> Result<()> {
    let ckpt = ctx.input(&args.checkpoint, "train")?;
    let corpus = ctx.load_corpus(&args.data)?;
    let mut model = AgeModel::load_checkpoint(&ckpt)?;
    let report = evaluate_into(ctx, &mut model, &corpus, args.on.into())?;
    for (bin, s) in &report.per_bin_mae {
        info!("bin {bin}: n={} mae={:.4}", s.count, s.mae);
    }
    if !report.failures.is_empty() {
        warn!("{} samples failed and were excluded", report.failures.len());
    }
    Ok(())
}

pub fn export(ctx: &mut Ctx, args: &ExportArgs) -> Result<()> {
    let ckpt = ctx.input(&args.checkpoint, "train")?;
    let chain = parity::export(&ckpt, &ctx.path("artifacts"))?;
    let model = AgeModel::load_checkpoint(&ckpt)?;
    write_accounting(ctx, &model)?;
    ctx.write_json("reports/export.json", &chain)?;
    for a in &chain {
        println!("{:<18} {:>12} bytes  {}", a.stage.name(), a.size_bytes, a.file_ref.display());
    }
    Ok(())
}

fn artifact_file(dir: &Path, stage: ArtifactStage) -> Option<PathBuf> {
    let name = match stage {
        ArtifactStage::PortableGraph => parity::PORTABLE_FILE,
        ArtifactStage::DeploymentGraph => parity::DEPLOYMENT_FILE,
        ArtifactStage::SourceCheckpoint => return None,
    };
    [dir.join(name), dir.join("artifacts").join(name)]
        .into_iter()
        .find(|p| p.is_file())
}

pub fn parity(ctx: &mut Ctx, args: &ParityArgs) -> Result<()> {
    let corpus = ctx.load_corpus(&args.data)?;
    let mut load = |stage: StageArg| -> Result<Backend> {
        let stage: ArtifactStage = stage.into();
        let path = match stage {
            ArtifactStage::SourceCheckpoint => args
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("--checkpoint is required for the source stage".into()))?,
            _ => artifact_file(&args.artifacts, stage).unwrap_or_else(|| args.artifacts.join("artifacts")),
        };
        let path = ctx.input(&path, if stage == ArtifactStage::SourceCheckpoint { "train" } else { "export" })?;
        if path.is_dir() {
            return Err(CliError::MissingArtifact {
                path: path.join(stage.name()),
                producer: "export",
            }
            .into());
        }
        Ok(Backend::load(stage, &path)?)
    };
    let mut a = load(args.a)?;
    let mut b = load(args.b)?;
    let best = match &args.train_log {
        Some(p) => {
            let p = ctx.input(p, "train")?;
            parity::best_val_mae(&parity::read_train_log(&p)?)
        }
        None => None,
    };
    let opts = ParityOptions {
        stage_a: ArtifactStage::from(args.a).name().to_string(),
        stage_b: ArtifactStage::from(args.b).name().to_string(),
        limit: ctx.config.parity.limit,
        subset_seed: ctx.config.seeds()["parity_subset"],
        batch_size: ctx.config.parity.batch_size,
        best_train_val_mae: best,
    };
    let report = parity::run_parity(&mut a, &mut b, &corpus, args.on.into(), &opts)?;
    report.save(&ctx.path("reports/parity.json"))?;
    ctx.write_text("reports/parity.txt", &report.to_text())?;
    print!("{}", report.to_text());
    for f in &report.flagged {
        warn!("{}: {} vs {} (gap {:.4} years)", f.id, f.out_a, f.out_b, f.gap());
    }
    Ok(())
}

fn stage_from_extension(path: &Path) -> Option<ArtifactStage> {
    match path.extension()?.to_str()? {
        "agraph" => Some(ArtifactStage::PortableGraph),
        "adep" => Some(ArtifactStage::DeploymentGraph),
        "safetensors" => Some(ArtifactStage::SourceCheckpoint),
        _ => None,
    }
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    report: &'a bench::BenchReport,
    budget: &'a bench::BudgetSummary,
}

pub fn bench(ctx: &mut Ctx, args: &BenchArgs) -> Result<()> {
    let path = ctx.input(&args.artifact, "export")?;
    let stage = match args.stage {
        Some(s) => s.into(),
        None => stage_from_extension(&path)
            .ok_or_else(|| CliError::Usage(format!("cannot infer the stage of {}; pass --stage", path.display())))?,
    };
    let side = {
        use agenet::evaluation::AgePredictor;
        Backend::load(stage, &path)?.input_size()
    };
    let input = bench::bench_input(side, ctx.config.seeds()["bench_input"]);
    let mut target = ArtifactTarget::new(stage, &path);
    let cfg = BenchConfig {
        runs: ctx.config.bench.runs,
        warmup: ctx.config.bench.warmup,
    };
    let report = bench::benchmark(&mut target, &mut MonotonicClock::new(), &input, cfg)?;
    let budget = bench::report_budget(&report, ctx.config.bench.budget_ms);
    ctx.write_json(
        "reports/bench.json",
        &BenchOutput {
            report: &report,
            budget: &budget,
        },
    )?;
    let text = format!("{}{budget}\n", report.to_text());
    ctx.write_text("reports/bench.txt", &text)?;
    print!("{text}");
    Ok(())
}

pub fn find_manifests(runs_dir: &Path) -> Result<Vec<(PathBuf, RunManifest)>> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(runs_dir) else {
        return Ok(out);
    };
    for e in entries {
        let dir = e?.path();
        let m = dir.join(MANIFEST_FILE);
        if m.is_file() {
            out.push((dir, RunManifest::load(&m)?));
        }
    }
    out.sort_by(|a, b| (a.1.finished_unix, &a.1.run_id).cmp(&(b.1.finished_unix, &b.1.run_id)));
    Ok(out)
}

pub fn report(ctx: &mut Ctx) -> Result<()> {
    let runs = find_manifests(&ctx.config.runs_dir)?;
    let text = crate::summary::render(&runs, &ctx.run_id);
    ctx.write_text("reports/summary.md", &text)?;
    print!("{text}");
    Ok(())
}
