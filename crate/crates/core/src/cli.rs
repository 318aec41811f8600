//! `digan` command line: cohort generation, staged training, evaluation and
//! multi-seed reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, read_json, write_atomic, write_json};
use crate::cohort::{
    generate_synthetic_cohort, load_cohort, write_cohort, Cohort, CohortFormat, CohortSpec, Label, Task,
};
use crate::diffusion::{load_denoiser, save_denoiser, Denoiser};
use crate::error::Error;
use crate::metrics::FidelityReport;
use crate::sacnet::{load_sacnet, save_sacnet, write_embedding_csv, SacNetwork};
use crate::sequence::{extract_all, Normalizer};
use crate::train::{
    evaluate, experiment_split, run_experiment, stage_classifier, stage_diffusion, summarize, synthesis_fidelity,
    synthesize, task_cohort, train_pipeline, ClassifierConfig, DiffusionConfig, EvalReport, LossConfig, PipelineConfig,
    TrainingLog,
};

#[derive(Debug, Parser)]
#[command(
    name = "digan",
    version,
    about = "Diffusion-augmented attention classifier for longitudinal biomarkers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort from a spec file or a preset.
    Generate(GenerateArgs),
    /// Stage 1 only: fit the visit normalizer and the denoiser.
    TrainDiffusion(RunArgs),
    /// Sample augmentation profiles from a trained denoiser.
    Synthesize(RunArgs),
    /// Stage 2 only: train the classifier, optionally on synthetic profiles.
    TrainClassifier(ClassifierArgs),
    /// Both stages.
    Train(RunArgs),
    /// Evaluate checkpoints on the held-out subjects.
    Evaluate(RunArgs),
    /// Train and evaluate over several seeds and summarize mean ± std.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// CohortSpec JSON.
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in spec: `table1`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Generator seed for presets; overrides the spec file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output cohort file (`.csv` or `.jsonl`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `no-vs-mci` or `no-vs-ad`; overrides the config.
    #[arg(long)]
    pub task: Option<Task>,
    /// Checkpoint directory; defaults to `<out>/checkpoints`.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Synthetic cohort to add to the real training windows.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSource {
    /// CSV or JSONL file, relative to the config file.
    Path(PathBuf),
    Spec(CohortSpec),
    Preset {
        name: String,
        seed: u64,
    },
}

/// One experiment: where the subjects come from and every hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: Task,
    pub cohort: CohortSource,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Keep subjects with at least this many visits, truncated to it.
    #[serde(default)]
    pub visits: Option<usize>,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    /// Synthetic visits drawn for the fidelity report.
    #[serde(default = "default_fidelity_samples")]
    pub fidelity_samples: usize,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_task() -> Task {
    Task::NoVsAd
}
fn default_train_frac() -> f64 {
    0.8
}
fn default_fidelity_samples() -> usize {
    2000
}

impl RunConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            task: self.task,
            seed: self.seed,
            diffusion: self.diffusion.clone(),
            classifier: self.classifier.clone(),
            loss: self.loss.clone(),
        }
    }
}

pub fn preset(name: &str, seed: u64) -> crate::Result<CohortSpec> {
    match name {
        "table1" => Ok(CohortSpec::table1(seed)),
        other => Err(Error::Config(format!("unknown preset {other:?} (expected table1)"))),
    }
}

/// A loaded config with its paths resolved and CLI overrides applied.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub checkpoints: PathBuf,
    base: PathBuf,
}

impl Run {
    pub fn load(args: &RunArgs) -> crate::Result<Self> {
        let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
        if let Some(s) = args.seed {
            config.seed = s;
        }
        if let Some(t) = args.task {
            config.task = t;
        }
        let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = args
            .out
            .clone()
            .or_else(|| config.out.as_ref().map(|o| base.join(o)))
            .unwrap_or_else(|| PathBuf::from("out"));
        let checkpoints = args.checkpoints.clone().unwrap_or_else(|| out.join("checkpoints"));
        let run = Run {
            config,
            out,
            checkpoints,
            base,
        };
        run.validate()?;
        Ok(run)
    }

    fn validate(&self) -> crate::Result<()> {
        let c = &self.config;
        if !(c.train_frac > 0.0 && c.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} must lie in (0, 1)", c.train_frac)));
        }
        match &c.cohort {
            CohortSource::Path(p) if !self.base.join(p).is_file() => {
                return Err(Error::Config(format!(
                    "cohort file {} not found",
                    self.base.join(p).display()
                )));
            }
            CohortSource::Spec(s) => s.validate()?,
            CohortSource::Preset { name, seed } => {
                preset(name, *seed)?;
            }
            _ => {}
        }
        c.pipeline().validate()
    }

    pub fn cohort(&self) -> crate::Result<Cohort> {
        match &self.config.cohort {
            CohortSource::Path(p) => {
                let path = self.base.join(p);
                load_cohort(&path, CohortFormat::from_path(&path))
            }
            CohortSource::Spec(s) => generate_synthetic_cohort(s),
            CohortSource::Preset { name, seed } => generate_synthetic_cohort(&preset(name, *seed)?),
        }
    }

    pub fn split(&self) -> crate::Result<(Cohort, Cohort)> {
        let c = self.config.clone();
        experiment_split(&self.cohort()?, c.visits, c.train_frac, &c.pipeline())
    }

    fn mkdirs(&self) -> anyhow::Result<()> {
        for d in [&self.out, &self.checkpoints] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(())
    }
}

const VISIT_NORM: &str = "visit_normalizer.json";
const WINDOW_NORM: &str = "window_normalizer.json";

fn save_stage1(dir: &Path, run: &Run, denoiser: &Denoiser, norm: &Normalizer) -> crate::Result<()> {
    save_denoiser(dir, denoiser, &run.config.diffusion.schedule)?;
    write_json(&dir.join(VISIT_NORM), norm)
}

fn save_stage2(dir: &Path, net: &SacNetwork, norm: &Normalizer) -> crate::Result<()> {
    save_sacnet(dir, net)?;
    write_json(&dir.join(WINDOW_NORM), norm)
}

/// Loads the denoiser and checks it against the config.
fn load_stage1(run: &Run, n_features: usize) -> crate::Result<(Denoiser, Normalizer)> {
    let (denoiser, schedule) = load_denoiser(&run.checkpoints)?;
    let d = &run.config.diffusion;
    let c = &denoiser.config;
    if schedule != d.schedule
        || c.n_features != n_features
        || c.hidden != d.hidden
        || c.time_dim != d.time_dim
        || c.max_visit != d.max_visit
    {
        return Err(Error::Compatibility(format!(
            "denoiser checkpoint ({c:?}, {schedule:?}) does not match the config"
        )));
    }
    let norm: Normalizer = read_json(&run.checkpoints.join(VISIT_NORM))?;
    if norm.n_features() != n_features {
        return Err(Error::Compatibility(
            "visit normalizer width does not match the cohort".into(),
        ));
    }
    Ok((denoiser, norm))
}

fn load_stage2(run: &Run, n_features: usize) -> crate::Result<(SacNetwork, Normalizer)> {
    let net = load_sacnet(&run.checkpoints)?;
    let want = run.config.classifier.sac_config(n_features);
    if net.config != want {
        return Err(Error::Compatibility(format!(
            "classifier checkpoint {:?} does not match the config {want:?}",
            net.config
        )));
    }
    let norm: Normalizer = read_json(&run.checkpoints.join(WINDOW_NORM))?;
    if norm.n_features() != n_features {
        return Err(Error::Compatibility(
            "window normalizer width does not match the cohort".into(),
        ));
    }
    Ok((net, norm))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> crate::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("csv buffer", e.into_error()))
}

fn matrix_csv(names: &[String], m: &[Vec<f64>]) -> crate::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("feature").chain(names.iter().map(String::as_str)))?;
    for (name, row) in names.iter().zip(m) {
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(f64::to_string)))?;
    }
    w.into_inner().map_err(|e| Error::io("csv buffer", e.into_error()))
}

fn write_fidelity(out: &Path, names: &[String], f: &FidelityReport) -> crate::Result<()> {
    write_json(&out.join("fidelity.json"), f)?;
    write_atomic(
        &out.join("correlation_difference.csv"),
        &matrix_csv(names, &f.correlation_difference)?,
    )?;
    write_atomic(&out.join("pca.csv"), &csv_bytes(&f.pca.points)?)
}

fn print_report(r: &EvalReport) {
    let m = &r.metrics;
    println!(
        "{}: {} subjects  acc {:.3}  sens {:.3}  spec {:.3}  prec {:.3}{}  f1 {:.3}  auc {:.3}",
        r.task,
        r.n_subjects,
        m.accuracy,
        m.sensitivity,
        m.specificity,
        m.precision,
        if m.precision_degenerate { " (no positives)" } else { "" },
        m.f1,
        r.auc
    );
}

pub fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let spec = match (&args.spec, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut spec: CohortSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            spec
        }
        (None, Some(name)) => preset(name, args.seed.unwrap_or(0))?,
        _ => return Err(Error::Config("pass exactly one of --spec or --preset".into()).into()),
    };
    let cohort = generate_synthetic_cohort(&spec).context("generating cohort")?;
    if cohort.is_empty() {
        log::warn!("spec has no subjects; writing an empty cohort");
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_cohort(&cohort, &args.out, CohortFormat::from_path(&args.out))?;
    let counts: Vec<String> = Label::ALL
        .iter()
        .filter(|&&l| spec.classes.iter().any(|c| c.label == l))
        .map(|&l| format!("{} {l}", cohort.count(l)))
        .collect();
    println!("{} subjects: {}", cohort.len(), counts.join(" / "));
    Ok(())
}

pub fn cmd_train_diffusion(args: &RunArgs) -> anyhow::Result<()> {
    let run = Run::load(args)?;
    run.mkdirs()?;
    let (train, _) = run.split()?;
    let cfg = run.config.pipeline();
    let train = task_cohort(&train, cfg.task)?;
    let (denoiser, norm) = stage_diffusion(&train, &cfg).context("diffusion stage")?;
    save_stage1(&run.checkpoints, &run, &denoiser, &norm)?;
    println!(
        "denoiser: {} epochs, final L_diff {:.4}",
        denoiser.loss_trace.len(),
        denoiser.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_synthesize(args: &RunArgs) -> anyhow::Result<()> {
    let run = Run::load(args)?;
    run.mkdirs()?;
    let (train, _) = run.split()?;
    let cfg = run.config.pipeline();
    let train = task_cohort(&train, cfg.task)?;
    let (denoiser, norm) = load_stage1(&run, train.n_features())?;
    let l = cfg.classifier.window;
    let target = (cfg.loss.augmentation_ratio * extract_all(&train.profiles, l).len() as f64).round() as usize;
    let synthetic = synthesize(
        &denoiser,
        &cfg.diffusion.schedule,
        &norm,
        &train,
        target,
        l,
        crate::rng::SeedStream::new(cfg.seed).fork("synthesis", 0).seed(),
    )
    .context("synthesis")?;
    let path = run.out.join("synthetic.csv");
    write_cohort(&synthetic, &path, CohortFormat::Csv)?;
    println!("{} synthetic profiles -> {}", synthetic.len(), path.display());
    Ok(())
}

pub fn cmd_train_classifier(args: &ClassifierArgs) -> anyhow::Result<()> {
    let run = Run::load(&args.run)?;
    run.mkdirs()?;
    let (train, _) = run.split()?;
    let cfg = run.config.pipeline();
    let train = task_cohort(&train, cfg.task)?;
    let synthetic = args
        .synthetic
        .as_ref()
        .map(|p| load_cohort(p, CohortFormat::from_path(p)))
        .transpose()?
        .map(|s| s.for_task(cfg.task));
    if let Some(s) = &synthetic {
        if s.feature_names != train.feature_names {
            bail!(Error::dim("synthetic cohort features differ from the real cohort"));
        }
    }
    let l_diff = match checkpoint::load(&run.checkpoints, "denoiser", "denoiser") {
        Ok((m, _)) => m.loss_trace.last().copied().unwrap_or(0.0),
        Err(_) => 0.0,
    };
    let out = stage_classifier(&train, synthetic.as_ref(), &cfg, l_diff).context("classifier stage")?;
    save_stage2(&run.checkpoints, &out.net, &out.normalizer)?;
    write_json(&run.out.join("classifier_log.json"), &out.epochs)?;
    if let Some(e) = out.epochs.last() {
        println!(
            "classifier: {} epochs, final BCE {:.4}, L {:.4}",
            out.epochs.len(),
            e.bce,
            e.combined
        );
    }
    Ok(())
}

pub fn cmd_train(args: &RunArgs) -> anyhow::Result<()> {
    let run = Run::load(args)?;
    run.mkdirs()?;
    let (train, _) = run.split()?;
    let cfg = run.config.pipeline();
    let out = train_pipeline(&train, &cfg).context("training pipeline")?;
    save_stage1(&run.checkpoints, &run, &out.denoiser, &out.visit_normalizer)?;
    save_stage2(&run.checkpoints, &out.sacnet, &out.window_normalizer)?;
    write_json(&run.out.join("training_log.json"), &out.log)?;
    write_cohort(&out.synthetic, &run.out.join("synthetic.csv"), CohortFormat::Csv)?;
    summarize_log(&out.log);
    Ok(())
}

fn summarize_log(log: &TrainingLog) {
    println!(
        "trained on {} subjects: {} real + {} synthetic windows",
        log.n_train_subjects, log.n_real_windows, log.n_synthetic_windows
    );
    if let Some(e) = log.classifier.last() {
        println!(
            "final L_diff {:.4}  BCE {:.4}  L {:.4}",
            log.denoiser_loss.last().copied().unwrap_or(0.0),
            e.bce,
            e.combined
        );
    }
}

pub fn cmd_evaluate(args: &RunArgs) -> anyhow::Result<()> {
    let run = Run::load(args)?;
    run.mkdirs()?;
    let (train, test) = run.split()?;
    let cfg = run.config.pipeline();
    let p = train.n_features();
    let (net, window_norm) = load_stage2(&run, p)?;
    let (denoiser, visit_norm) = load_stage1(&run, p)?;
    let report = evaluate(&net, &window_norm, &test, cfg.task, cfg.classifier.threshold).context("evaluation")?;
    write_json(&run.out.join("report.json"), &report)?;
    write_atomic(&run.out.join("roc.csv"), &csv_bytes(&report.roc_points)?)?;
    write_atomic(&run.out.join("pr.csv"), &csv_bytes(&report.pr_points)?)?;
    let test_windows = window_norm.apply(&extract_all(&task_cohort(&test, cfg.task)?.profiles, net.config.n_time))?;
    write_embedding_csv(&run.out.join("embeddings.csv"), &net.embedding_maps(&test_windows)?)?;
    let fid = synthesis_fidelity(&train, &denoiser, &visit_norm, &cfg, run.config.fidelity_samples)
        .context("fidelity report")?;
    write_fidelity(&run.out, &train.feature_names, &fid)?;
    print_report(&report);
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    if args.seeds.is_empty() {
        bail!(Error::Config("--seeds is empty".into()));
    }
    let base = Run::load(&args.run)?;
    let cohort = base.cohort()?;
    let mut reports = Vec::new();
    for &seed in &args.seeds {
        let mut cfg = base.config.clone();
        cfg.seed = seed;
        let dir = base.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let r = run_experiment(&cohort, cfg.visits, cfg.train_frac, &cfg.pipeline())
            .with_context(|| format!("seed {seed}"))?;
        write_json(&dir.join("report.json"), &r.report)?;
        write_json(&dir.join("training_log.json"), &r.output.log)?;
        print!("seed {seed}  ");
        print_report(&r.report);
        reports.push(r.report);
    }
    let summary = summarize(&args.seeds, &reports)?;
    write_json(&base.out.join("summary.json"), &summary)?;
    let f = |m: &crate::train::MeanStd| format!("{:.3} ± {:.3}", m.mean, m.std);
    println!(
        "mean over {} seeds: acc {}  sens {}  spec {}  prec {}  f1 {}  auc {}",
        args.seeds.len(),
        f(&summary.accuracy),
        f(&summary.sensitivity),
        f(&summary.specificity),
        f(&summary.precision),
        f(&summary.f1),
        f(&summary.auc)
    );
    Ok(())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::TrainDiffusion(a) => cmd_train_diffusion(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// 0 on success; otherwise the code of the underlying library error, or 2.
pub fn exit_code(result: &anyhow::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => e.downcast_ref::<Error>().map_or(2, Error::exit_code),
    }
}
