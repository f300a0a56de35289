use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

use pairwise_cl::analysis::{alignment_csv, export_representations, mean_ci95, pwcca, AlignmentReport};
use pairwise_cl::config::{Resolver, RunConfig, RESOLVED_NAME};
use pairwise_cl::data::bridge::{attach_view, read_feature_csv, table_to_mvf, validate_export, FeatureTable};
use pairwise_cl::data::{
    load_manifest, make_cv_splits, mvf_read, mvf_write, synth_generate, write_manifest, CvSplit, Dataset, LabelMap,
    Manifest, Normalization, Part, SynthConfig, ViewDecl, SPARSE_FRACTIONS,
};
use pairwise_cl::dsp::{
    mel_spectrogram, pad_or_trim, para_csv, paralinguistic_vector, read_audio, MelConfig, ParaVector, TARGET_SECONDS,
};
use pairwise_cl::encoders::{load_checkpoint, save_checkpoint, ModelCheckpoint, ViewClassifier};
use pairwise_cl::training::{
    evaluate, finetune, labeled_train_indices, pretrain_folds, run_sparse_experiment, run_temperature_grid,
    FinetuneConfig, GridConfig, MetricsReport, PretrainConfig, SparseConfig, SparseReport,
};
use pairwise_cl::Tensor;

/// Environment variable bounding the worker pool.
const WORKERS_ENV: &str = "PCL_WORKERS";
const CHECKPOINT_NAME: &str = "checkpoint.pcl";
const CLASSIFIER_NAME: &str = "classifier.pcl";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] pairwise_cl::Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(r: pairwise_cl::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Parser, Debug)]
#[command(
    name = "pairwise-cl",
    version,
    about = "Multi-view contrastive pre-training for speech emotion recognition"
)]
struct Cli {
    /// `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the seeded synthetic multi-view corpus.
    Synth(SynthArgs),
    /// Log-mel spectrograms for every record's WAV.
    ExtractMel(ExtractArgs),
    /// 42-dim paralinguistic vectors for every record's WAV.
    ExtractPara(ExtractArgs),
    /// Convert an externally extracted feature CSV (e.g. 88 functionals) to MVF and attach it as a view.
    IngestCsv(IngestArgs),
    /// Check every feature file referenced by a manifest.
    Validate(ValidateArgs),
    /// Contrastive pre-training, one checkpoint per fold.
    Pretrain(PretrainArgs),
    /// Fine-tune one view (from a pre-training run, or from scratch).
    Finetune(FinetuneArgs),
    /// Score a fine-tuned classifier on one part of a fold.
    Eval(EvalArgs),
    /// Pretrained vs. from-scratch comparison at sparse label fractions.
    Sparse(SparseArgs),
    /// Temperature x freeze grid with average ranks.
    Grid(GridArgs),
    /// Projection-weighted CCA between two representation matrices.
    Pwcca(PwccaArgs),
    /// Write encoder representations of every record as one MVF matrix.
    ExportReps(ExportArgs),
    /// Summarize the artifacts of a finished run directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Manifest whose records point at audio under `--wav-view`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    wav_view: Option<String>,
    /// Name of the view to add.
    #[arg(long)]
    view: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    view: Option<String>,
    /// Expected number of value columns.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `none` or `utterance`.
    #[arg(long)]
    normalize: Option<String>,
    /// `identity` or `four-class`.
    #[arg(long)]
    label_map: Option<String>,
    /// `all` or comma-separated fold indices.
    #[arg(long)]
    fold: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated views (default: all declared).
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    view: Option<String>,
    /// Pre-training run directory; omitted means supervised from scratch.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    freeze: Option<bool>,
    /// Per-class label fraction.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Classifier checkpoint written by `finetune`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    part: Option<String>,
}

#[derive(Args, Debug)]
struct SparseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    view: Option<String>,
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    freeze: Option<bool>,
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    views: Option<String>,
    /// Views to fine-tune and score (default: all pre-trained views).
    #[arg(long)]
    eval_views: Option<String>,
    #[arg(long)]
    taus: Option<String>,
    /// Comma-separated subset of `frozen,tuned`.
    #[arg(long)]
    modes: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    supervised: Option<bool>,
}

#[derive(Args, Debug)]
struct PwccaArgs {
    /// Weighting view, `[N, D]` MVF.
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Pre-training or classifier checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    view: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    run: Option<PathBuf>,
}

/// Collects explicitly given flags into a config overlay.
#[derive(Default)]
struct Flags(RunConfig);

impl Flags {
    fn set<T: Display>(&mut self, key: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v);
        }
        self
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v.display());
        }
        self
    }

    fn data(&mut self, d: &DataArgs) -> &mut Self {
        self.path("manifest", &d.manifest)
            .set("normalize", &d.normalize)
            .set("label_map", &d.label_map)
            .set("fold", &d.fold)
            .set("seed", &d.seed)
            .path("out", &d.out)
    }

    fn train(&mut self, t: &TrainArgs) -> &mut Self {
        self.set("lr", &t.lr)
            .set("batch_size", &t.batch_size)
            .set("epochs", &t.epochs)
            .set("patience", &t.patience)
    }
}

fn flags_of(cmd: &Command) -> RunConfig {
    let mut f = Flags::default();
    match cmd {
        Command::Synth(a) => {
            f.path("out", &a.out)
                .set("seed", &a.seed)
                .set("n_per_class", &a.n_per_class)
                .set("sessions", &a.sessions);
        }
        Command::ExtractMel(a) | Command::ExtractPara(a) => {
            f.path("manifest", &a.manifest)
                .set("wav_view", &a.wav_view)
                .set("view", &a.view)
                .path("out", &a.out);
        }
        Command::IngestCsv(a) => {
            f.path("manifest", &a.manifest)
                .path("csv", &a.csv)
                .set("view", &a.view)
                .set("dims", &a.dims)
                .path("out", &a.out);
        }
        Command::Validate(a) => {
            f.path("manifest", &a.manifest);
        }
        Command::Pretrain(a) => {
            f.data(&a.data)
                .train(&a.train)
                .set("views", &a.views)
                .set("tau", &a.tau);
        }
        Command::Finetune(a) => {
            f.data(&a.data)
                .train(&a.train)
                .set("view", &a.view)
                .path("from", &a.from)
                .set("freeze", &a.freeze)
                .set("p", &a.p)
                .set("repeats", &a.repeats);
        }
        Command::Eval(a) => {
            f.data(&a.data).path("model", &a.model).set("part", &a.part);
        }
        Command::Sparse(a) => {
            f.data(&a.data)
                .train(&a.train)
                .set("view", &a.view)
                .path("from", &a.from)
                .set("freeze", &a.freeze)
                .set("fractions", &a.fractions)
                .set("repeats", &a.repeats);
        }
        Command::Grid(a) => {
            f.data(&a.data)
                .train(&a.train)
                .set("views", &a.views)
                .set("eval_views", &a.eval_views)
                .set("taus", &a.taus)
                .set("modes", &a.modes)
                .set("supervised", &a.supervised);
        }
        Command::Pwcca(a) => {
            f.path("a", &a.a).path("b", &a.b);
        }
        Command::ExportReps(a) => {
            f.data(&a.data).path("model", &a.model).set("view", &a.view);
        }
        Command::Report(a) => {
            f.path("run", &a.run);
        }
    }
    f.0
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::ExtractMel(_) => "extract-mel",
        Command::ExtractPara(_) => "extract-para",
        Command::IngestCsv(_) => "ingest-csv",
        Command::Validate(_) => "validate",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::Sparse(_) => "sparse",
        Command::Grid(_) => "grid",
        Command::Pwcca(_) => "pwcca",
        Command::ExportReps(_) => "export-reps",
        Command::Report(_) => "report",
    }
}

// ------------------------------------------------------------------ helpers

fn write(path: &Path, contents: impl AsRef<[u8]>) -> pairwise_cl::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| pairwise_cl::Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| pairwise_cl::Error::io(path, e))
}

fn save(path: &Path, ckpt: &ModelCheckpoint) -> pairwise_cl::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| pairwise_cl::Error::io(dir, e))?;
    }
    save_checkpoint(path, ckpt)
}

fn read_text(path: &Path) -> pairwise_cl::Result<String> {
    fs::read_to_string(path).map_err(|e| pairwise_cl::Error::io(path, e))
}

/// Validates settings, then records the resolved config in the run directory.
fn start_run(res: Resolver, out: Option<&Path>) -> CliResult<()> {
    let resolved = usage(res.finish())?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| pairwise_cl::Error::io(out, e))?;
        write(&out.join(RESOLVED_NAME), resolved.to_text())?;
    }
    Ok(())
}

struct Loaded {
    ds: Dataset,
    classes: Vec<String>,
    sessions: Vec<u32>,
}

/// Reads `manifest`, `normalize` and `label_map` and loads `views`
/// (all declared views when `None`).
fn load_data(res: &mut Resolver, views: Option<Vec<String>>) -> CliResult<Loaded> {
    let path: PathBuf = usage(res.require::<String>("manifest"))?.into();
    let norm: Normalization = usage(res.get::<String>("normalize", "none".into()))?
        .parse()
        .map_err(|e: pairwise_cl::Error| CliError::Usage(e.to_string()))?;
    let map = usage(res.get::<String>("label_map", "identity".into()))?;
    let mut manifest = load_manifest(&path)?;
    let labels = match map.as_str() {
        "identity" => {
            let mut l = manifest.labels.clone();
            if l.is_empty() {
                l = manifest.records.iter().filter_map(|r| r.label.clone()).collect();
                l.sort();
                l.dedup();
            }
            LabelMap::identity(&l)
        }
        "four-class" => LabelMap::four_class(),
        other => return Err(CliError::Usage(format!("unknown label map `{other}`"))),
    };
    manifest = labels.apply(&manifest)?;
    let views = views.unwrap_or_else(|| manifest.views.iter().map(|v| v.name.clone()).collect());
    let ds = Dataset::load(manifest, &views, norm)?;
    let sessions = ds.manifest.sessions();
    Ok(Loaded {
        classes: labels.classes().to_vec(),
        ds,
        sessions,
    })
}

fn parse_folds(res: &mut Resolver, sessions: &[u32], default: &str) -> CliResult<Vec<usize>> {
    let raw = usage(res.get::<String>("fold", default.to_string()))?;
    if raw == "all" {
        return Ok((0..sessions.len()).collect());
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&f| f < sessions.len())
                .ok_or_else(|| CliError::Usage(format!("bad fold `{s}` for {} sessions", sessions.len())))
        })
        .collect()
}

fn splits_for(sessions: &[u32], folds: &[usize]) -> CliResult<Vec<CvSplit>> {
    Ok(folds
        .iter()
        .map(|&f| make_cv_splits(sessions, f))
        .collect::<pairwise_cl::Result<Vec<_>>>()?)
}

fn parse_list<T: std::str::FromStr>(key: &str, items: &[String]) -> CliResult<Vec<T>> {
    items
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn finetune_template(res: &mut Resolver, view: String, freeze: bool) -> CliResult<FinetuneConfig> {
    let d = FinetuneConfig::default();
    let cfg = FinetuneConfig {
        view,
        freeze,
        lr: usage(res.get("lr", d.lr))?,
        batch_size: usage(res.get("batch_size", d.batch_size))?,
        max_epochs: usage(res.get("epochs", d.max_epochs))?,
        patience: usage(res.get("patience", d.patience))?,
        ..d
    };
    usage(cfg.validate())?;
    Ok(cfg)
}

fn fold_checkpoint(from: &Path, fold: usize) -> PathBuf {
    from.join(format!("fold{fold}")).join(CHECKPOINT_NAME)
}

// ------------------------------------------------------------------ commands

fn cmd_synth(mut res: Resolver) -> CliResult<()> {
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    let seed = usage(res.get("seed", 7u64))?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_per_class: usage(res.get("n_per_class", d.n_per_class))?,
        n_speakers: usage(res.get("sessions", d.n_speakers))?,
        ..d
    };
    usage(cfg.validate())?;
    start_run(res, Some(&out))?;
    let m = synth_generate(&cfg, seed, &out)?;
    println!(
        "wrote {} records, {} views to {}",
        m.records.len(),
        m.views.len(),
        out.display()
    );
    Ok(())
}

/// Output manifest for a derived view: same records, feature paths made
/// independent of the original manifest's directory.
fn rebased(manifest: &Manifest, root: &Path) -> pairwise_cl::Result<Manifest> {
    let mut m = manifest.clone();
    for r in &mut m.records {
        for p in r.view_paths.values_mut() {
            *p = absolute(&manifest.resolve(p))?;
        }
    }
    m.root = absolute(root)?;
    Ok(m)
}

fn absolute(p: &Path) -> pairwise_cl::Result<PathBuf> {
    std::path::absolute(p).map_err(|e| pairwise_cl::Error::io(p, e))
}

fn raw_manifest(path: &Path) -> pairwise_cl::Result<Manifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&read_text(path)?, &root)
}

enum Extractor {
    Mel,
    Para,
}

fn cmd_extract(mut res: Resolver, kind: Extractor) -> CliResult<()> {
    let path: PathBuf = usage(res.require::<String>("manifest"))?.into();
    let wav_view = usage(res.get::<String>("wav_view", "wav".into()))?;
    let default_view = match kind {
        Extractor::Mel => "spec",
        Extractor::Para => "para",
    };
    let view = usage(res.get::<String>("view", default_view.into()))?;
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    start_run(res, Some(&out))?;

    let skeleton = raw_manifest(&path)?;
    let cfg = MelConfig::default();
    let mut files = BTreeMap::new();
    let mut para_rows: Vec<(String, ParaVector)> = Vec::new();
    let mut failed = Vec::new();
    let mut dims = Vec::new();
    for r in &skeleton.records {
        let result = (|| -> pairwise_cl::Result<Tensor<f32>> {
            let wav = skeleton.feature_path(r, &wav_view)?;
            let wave = pad_or_trim(&read_audio(&wav)?, TARGET_SECONDS);
            match kind {
                Extractor::Mel => Ok(mel_spectrogram(&wave, &cfg)?.values),
                Extractor::Para => {
                    let v = paralinguistic_vector(&wave)?;
                    let t = v.to_tensor();
                    para_rows.push((r.id.clone(), v));
                    Ok(t)
                }
            }
        })();
        match result {
            Ok(t) => {
                dims = t.shape().to_vec();
                let dir = out.join(&view);
                fs::create_dir_all(&dir).map_err(|e| pairwise_cl::Error::io(&dir, e))?;
                let file = absolute(&dir.join(format!("{}.mvf", r.id)))?;
                mvf_write(&file, &t)?;
                files.insert(r.id.clone(), file);
            }
            Err(e) => {
                eprintln!("warning: {}: {e}", r.id);
                failed.push(r.id.clone());
            }
        }
    }
    let mut m = rebased(&skeleton, &out)?;
    m.records.retain(|r| files.contains_key(&r.id));
    if m.records.is_empty() {
        eprintln!("warning: no features extracted");
    } else {
        attach_view(
            &mut m,
            ViewDecl {
                name: view.clone(),
                dims,
            },
            &files,
        )?;
    }
    write_manifest(&out.join("manifest.txt"), &m)?;
    if let Extractor::Para = kind {
        write(&out.join(format!("{view}.csv")), para_csv(&para_rows))?;
    }
    if !failed.is_empty() {
        write(&out.join("failed.txt"), failed.join("\n") + "\n")?;
    }
    println!(
        "extracted `{view}` for {} of {} records ({} failed)",
        files.len(),
        skeleton.records.len(),
        failed.len()
    );
    Ok(())
}

fn cmd_ingest(mut res: Resolver) -> CliResult<()> {
    let path: PathBuf = usage(res.require::<String>("manifest"))?.into();
    let csv: PathBuf = usage(res.require::<String>("csv"))?.into();
    let view = usage(res.get::<String>("view", "egemaps".into()))?;
    let dims = usage(res.get("dims", pairwise_cl::data::bridge::EGEMAPS_DIM))?;
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    start_run(res, Some(&out))?;
    let table: FeatureTable = read_feature_csv(&csv, Some(dims))?;
    let files = table_to_mvf(&table, &absolute(&out)?.join(&view))?;
    let mut m = rebased(&raw_manifest(&path)?, &out)?;
    attach_view(
        &mut m,
        ViewDecl {
            name: view.clone(),
            dims: vec![dims],
        },
        &files,
    )?;
    write_manifest(&out.join("manifest.txt"), &m)?;
    println!("ingested {} rows x {dims} columns as view `{view}`", table.rows.len());
    Ok(())
}

fn cmd_validate(mut res: Resolver) -> CliResult<()> {
    let path: PathBuf = usage(res.require::<String>("manifest"))?.into();
    start_run(res, None)?;
    let report = validate_export(&raw_manifest(&path)?);
    println!("{}", report.summary());
    if report.is_ok() {
        Ok(())
    } else {
        Err(pairwise_cl::Error::schema(format!("{} problem(s) in {}", report.problems.len(), path.display())).into())
    }
}

fn cmd_pretrain(mut res: Resolver) -> CliResult<()> {
    let views = res.list("views");
    let data = load_data(&mut res, views)?;
    let folds = parse_folds(&mut res, &data.sessions, "all")?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        views: data.ds.view_names(),
        temperature: usage(res.get("tau", d.temperature))?,
        batch_size: usage(res.get("batch_size", d.batch_size))?,
        max_epochs: usage(res.get("epochs", d.max_epochs))?,
        patience: usage(res.get("patience", d.patience))?,
        lr: usage(res.get("lr", d.lr))?,
        seed: usage(res.get("seed", d.seed))?,
    };
    usage(cfg.validate())?;
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    res.note("views", cfg.views.join(","));
    start_run(res, Some(&out))?;
    let splits = splits_for(&data.sessions, &folds)?;
    let results = pretrain_folds(&data.ds, &splits, &cfg)?;
    for (&fold, (ckpt, hist)) in folds.iter().zip(&results) {
        let dir = out.join(format!("fold{fold}"));
        save(&dir.join(CHECKPOINT_NAME), ckpt)?;
        write(&dir.join("history.txt"), hist.to_text())?;
        println!("fold {fold}: best epoch {} of {}", hist.best_epoch, hist.stop_epoch);
    }
    Ok(())
}

const RESULTS_HEADER: &str = "fold,repeat,seed,p,n_labeled,val_uar,val_wa,test_uar,test_wa";

fn cmd_finetune(mut res: Resolver) -> CliResult<()> {
    let view = usage(res.require::<String>("view"))?;
    let data = load_data(&mut res, Some(vec![view.clone()]))?;
    let folds = parse_folds(&mut res, &data.sessions, "all")?;
    let from: Option<PathBuf> = usage(res.opt::<String>("from"))?.map(PathBuf::from);
    let freeze = usage(res.get("freeze", false))?;
    if freeze && from.is_none() {
        return Err(CliError::Usage("`freeze` needs a pre-trained encoder (`from`)".into()));
    }
    let p: Option<f64> = usage(res.opt("p"))?;
    let repeats = usage(res.get("repeats", 1usize))?;
    let seed = usage(res.get("seed", 0u64))?;
    let template = FinetuneConfig {
        label_fraction: p,
        ..finetune_template(&mut res, view, freeze)?
    };
    usage(template.validate())?;
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    start_run(res, Some(&out))?;

    let mut csv = format!("{RESULTS_HEADER}\n");
    let mut test_uar = Vec::new();
    let mut test_wa = Vec::new();
    for &fold in &folds {
        let split = make_cv_splits(&data.sessions, fold)?;
        let ckpt = from
            .as_ref()
            .map(|f| load_checkpoint(&fold_checkpoint(f, fold)))
            .transpose()?;
        for r in 0..repeats {
            let s = seed + r as u64;
            let labeled = labeled_train_indices(&data.ds, &split, &data.classes, p, s)?;
            let cfg = FinetuneConfig {
                seed: s,
                ..template.clone()
            };
            let o = finetune(&data.ds, &split, &cfg, ckpt.as_ref(), &data.classes, &labeled)?;
            let dir = out.join(format!("fold{fold}")).join(format!("rep{r}"));
            save(
                &dir.join(CLASSIFIER_NAME),
                &ModelCheckpoint::from_classifier(&o.model, &data.classes),
            )?;
            write(&dir.join("history.txt"), o.history.to_text())?;
            let _ = writeln!(
                csv,
                "{fold},{r},{s},{},{},{:.6},{:.6},{:.6},{:.6}",
                p.map(|p| p.to_string()).unwrap_or_else(|| "1".into()),
                labeled.len(),
                o.val.uar,
                o.val.wa,
                o.test.uar,
                o.test.wa
            );
            test_uar.push(o.test.uar);
            test_wa.push(o.test.wa);
        }
    }
    write(&out.join("results.csv"), &csv)?;
    let summary = summary_csv(&test_uar, &test_wa)?;
    write(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn summary_csv(uar: &[f64], wa: &[f64]) -> pairwise_cl::Result<String> {
    let stats = |v: &[f64]| -> pairwise_cl::Result<(f64, f64)> {
        if v.len() >= 2 {
            mean_ci95(v)
        } else {
            Ok((v[0], 0.0))
        }
    };
    let (mu, hu) = stats(uar)?;
    let (mw, hw) = stats(wa)?;
    Ok(format!(
        "n,mean_test_uar,ci95_uar,mean_test_wa,ci95_wa\n{},{mu:.6},{hu:.6},{mw:.6},{hw:.6}\n",
        uar.len()
    ))
}

fn metrics_csv(m: &MetricsReport, classes: &[String]) -> String {
    let mut out = String::from("fold,uar,wa\n");
    let _ = writeln!(out, "{},{:.6},{:.6}", m.fold, m.uar, m.wa);
    out.push_str("\ntrue\\pred");
    for c in classes {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (c, row) in classes.iter().zip(&m.confusion) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{c},{}", cells.join(","));
    }
    out
}

fn cmd_eval(mut res: Resolver) -> CliResult<()> {
    let model_path: PathBuf = usage(res.require::<String>("model"))?.into();
    let ckpt = load_checkpoint(&model_path)?;
    let model = usage(ckpt.to_classifier())?;
    let data = load_data(&mut res, Some(vec![model.spec.view.clone()]))?;
    let folds = parse_folds(&mut res, &data.sessions, "0")?;
    let part = match usage(res.get::<String>("part", "test".into()))?.as_str() {
        "train" => Part::Train,
        "val" => Part::Val,
        "test" => Part::Test,
        other => return Err(CliError::Usage(format!("unknown part `{other}`"))),
    };
    if ckpt.classes() != data.classes {
        return Err(CliError::Usage(format!(
            "model classes {:?} differ from manifest classes {:?}",
            ckpt.classes(),
            data.classes
        )));
    }
    let out: Option<PathBuf> = usage(res.opt::<String>("out"))?.map(PathBuf::from);
    start_run(res, out.as_deref())?;
    let mut text = String::new();
    for fold in folds {
        let split = make_cv_splits(&data.sessions, fold)?;
        let idx = data.ds.indices(&split, part);
        let mut m = evaluate(&model, &data.ds, &idx, &data.classes)?;
        m.fold = fold;
        text.push_str(&metrics_csv(&m, &data.classes));
    }
    if let Some(out) = out {
        write(&out.join("metrics.csv"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_sparse(mut res: Resolver) -> CliResult<()> {
    let view = usage(res.require::<String>("view"))?;
    let data = load_data(&mut res, Some(vec![view.clone()]))?;
    let folds = parse_folds(&mut res, &data.sessions, "0")?;
    let from: PathBuf = usage(res.require::<String>("from"))?.into();
    let freeze = usage(res.get("freeze", false))?;
    let fractions: Vec<f64> = match res.list("fractions") {
        Some(items) => parse_list("fractions", &items)?,
        None => {
            res.note(
                "fractions",
                SPARSE_FRACTIONS
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
            SPARSE_FRACTIONS.to_vec()
        }
    };
    let repeats = usage(res.get("repeats", 10usize))?;
    let base_seed = usage(res.get("seed", 0u64))?;
    let cfg = SparseConfig {
        fractions,
        repeats,
        finetune: finetune_template(&mut res, view, freeze)?,
        base_seed,
    };
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    start_run(res, Some(&out))?;
    for &fold in &folds {
        let split = make_cv_splits(&data.sessions, fold)?;
        let ckpt = load_checkpoint(&fold_checkpoint(&from, fold))?;
        let report: SparseReport = run_sparse_experiment(&data.ds, &split, &ckpt, &data.classes, &cfg)?;
        let dir = out.join(format!("fold{fold}"));
        write(&dir.join("sparse.csv"), report.to_csv())?;
        write(&dir.join("trials.csv"), report.trials_csv())?;
        println!("fold {fold}");
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn cmd_grid(mut res: Resolver) -> CliResult<()> {
    let views = res.list("views");
    let data = load_data(&mut res, views)?;
    let folds = parse_folds(&mut res, &data.sessions, "all")?;
    let temperatures: Vec<f64> = match res.list("taus") {
        Some(items) => parse_list("taus", &items)?,
        None => {
            res.note("taus", "0.1,0.25,0.5,1");
            pairwise_cl::contrastive::TEMPERATURE_GRID.to_vec()
        }
    };
    let modes = res.list("modes").unwrap_or_else(|| {
        res.note("modes", "frozen,tuned");
        vec!["frozen".into(), "tuned".into()]
    });
    let freeze_options = modes
        .iter()
        .map(|m| match m.as_str() {
            "frozen" => Ok(true),
            "tuned" => Ok(false),
            other => Err(CliError::Usage(format!("unknown mode `{other}`"))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    let eval_views = res.list("eval_views").unwrap_or_else(|| data.ds.view_names());
    let include_supervised = usage(res.get("supervised", true))?;
    let seed = usage(res.get("seed", 0u64))?;
    let d = PretrainConfig::default();
    let pre = PretrainConfig {
        views: data.ds.view_names(),
        batch_size: usage(res.get("batch_size", d.batch_size))?,
        max_epochs: usage(res.get("epochs", d.max_epochs))?,
        patience: usage(res.get("patience", d.patience))?,
        lr: usage(res.get("lr", d.lr))?,
        seed,
        ..d
    };
    usage(pre.validate())?;
    let ft = FinetuneConfig {
        seed,
        batch_size: pre.batch_size,
        lr: pre.lr,
        ..FinetuneConfig::default()
    };
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    res.note("eval_views", eval_views.join(","));
    start_run(res, Some(&out))?;
    let cfg = GridConfig {
        temperatures,
        freeze_options,
        eval_views,
        splits: splits_for(&data.sessions, &folds)?,
        pretrain: pre,
        finetune: ft,
        include_supervised,
    };
    let report = run_temperature_grid(&data.ds, &data.classes, &cfg)?;
    write(&out.join("grid.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_pwcca(mut res: Resolver) -> CliResult<()> {
    let a: PathBuf = usage(res.require::<String>("a"))?.into();
    let b: PathBuf = usage(res.require::<String>("b"))?.into();
    start_run(res, None)?;
    let (x, y) = (mvf_read(&a)?, mvf_read(&b)?);
    if let ([n, dx], [_, dy]) = (x.shape(), y.shape()) {
        let (n, width) = (*n, (*dx).max(*dy));
        if n <= width {
            eprintln!("warning: {n} samples for up to {width} dimensions; correlations are trivially high");
        }
    }
    let report: AlignmentReport = pwcca(&x, &y)?;
    print!(
        "{}",
        alignment_csv(&[(a.display().to_string(), b.display().to_string(), report)])
    );
    Ok(())
}

fn cmd_export(mut res: Resolver) -> CliResult<()> {
    let model_path: PathBuf = usage(res.require::<String>("model"))?.into();
    let ckpt = load_checkpoint(&model_path)?;
    let view = match usage(res.opt::<String>("view"))? {
        Some(v) => v,
        None if ckpt.views().len() == 1 => ckpt.views().remove(0),
        None => {
            return Err(CliError::Usage(format!(
                "checkpoint has views {:?}; pick one with `view`",
                ckpt.views()
            )))
        }
    };
    let data = load_data(&mut res, Some(vec![view.clone()]))?;
    let out: PathBuf = usage(res.require::<String>("out"))?.into();
    res.note("view", &view);
    start_run(res, None)?;
    let model = if ckpt.is_classifier() {
        usage(ckpt.to_classifier())?
    } else {
        let spec = ckpt.spec_for(&view)?;
        ViewClassifier::from_checkpoint(&ckpt, &spec, data.classes.len().max(2), 0)?
    };
    let reps = export_representations(&model, &data.ds, &out)?;
    println!(
        "wrote {:?} representations of `{view}` to {}",
        reps.shape(),
        out.display()
    );
    Ok(())
}

fn cmd_report(mut res: Resolver) -> CliResult<()> {
    let run: PathBuf = usage(res.require::<String>("run"))?.into();
    start_run(res, None)?;
    let cfg_path = run.join(RESOLVED_NAME);
    let cfg = RunConfig::parse(&read_text(&cfg_path)?)?;
    let command = cfg
        .get("command")
        .ok_or_else(|| pairwise_cl::Error::schema(format!("{} does not name its command", cfg_path.display())))?
        .to_string();
    let text = report_for(&run, &command)?;
    write(&run.join("report.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn fold_dirs(run: &Path) -> pairwise_cl::Result<Vec<(usize, PathBuf)>> {
    let mut dirs: Vec<(usize, PathBuf)> = fs::read_dir(run)
        .map_err(|e| pairwise_cl::Error::io(run, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("fold")?.parse().ok().map(|f| (f, e.path()))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(pairwise_cl::Error::schema(format!(
            "no fold directories under {}",
            run.display()
        )));
    }
    Ok(dirs)
}

fn require_files(paths: &[PathBuf]) -> pairwise_cl::Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(pairwise_cl::Error::schema(format!(
            "missing artifacts:\n  {}",
            missing.join("\n  ")
        )))
    }
}

fn report_for(run: &Path, command: &str) -> pairwise_cl::Result<String> {
    match command {
        "pretrain" => {
            let folds = fold_dirs(run)?;
            let files: Vec<PathBuf> = folds.iter().map(|(_, d)| d.join("history.txt")).collect();
            require_files(&files)?;
            let mut out = String::from("fold,best_epoch,stop_epoch,val_metric,best_value\n");
            for ((fold, _), path) in folds.iter().zip(&files) {
                let text = read_text(path)?;
                let mut best = String::new();
                let mut stop = String::new();
                let mut val: BTreeMap<String, (String, String)> = BTreeMap::new();
                for line in text.lines().skip(1) {
                    let f: Vec<&str> = line.splitn(3, ',').collect();
                    if f.len() != 3 {
                        continue;
                    }
                    match f[1] {
                        "best_epoch" => best = f[2].to_string(),
                        "stop_epoch" => stop = f[2].to_string(),
                        "train_loss" | "lr" => {}
                        name => {
                            val.insert(f[0].to_string(), (name.to_string(), f[2].to_string()));
                        }
                    }
                }
                let (metric, value) = val.get(&best).cloned().unwrap_or_default();
                let _ = writeln!(out, "{fold},{best},{stop},{metric},{value}");
            }
            Ok(out)
        }
        "finetune" => {
            let path = run.join("results.csv");
            require_files(std::slice::from_ref(&path))?;
            let text = read_text(&path)?;
            let mut per_fold: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || pairwise_cl::Error::format("results.csv", line.to_string());
                let fold: usize = f[0].parse().map_err(|_| bad())?;
                let e = per_fold.entry(fold).or_default();
                e.0.push(f[7].parse().map_err(|_| bad())?);
                e.1.push(f[8].parse().map_err(|_| bad())?);
            }
            let mut out = String::from("fold,n,mean_test_uar,mean_test_wa\n");
            let mut all_u = Vec::new();
            let mut all_w = Vec::new();
            for (fold, (u, w)) in &per_fold {
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let _ = writeln!(out, "{fold},{},{:.6},{:.6}", u.len(), mean(u), mean(w));
                all_u.extend(u);
                all_w.extend(w);
            }
            if !all_u.is_empty() {
                out.push('\n');
                out.push_str(&summary_csv(&all_u, &all_w)?);
            }
            Ok(out)
        }
        "sparse" => {
            let folds = fold_dirs(run)?;
            let files: Vec<PathBuf> = folds.iter().map(|(_, d)| d.join("sparse.csv")).collect();
            require_files(&files)?;
            let mut out = format!("fold,{}\n", SparseReport::CSV_HEADER);
            for ((fold, _), path) in folds.iter().zip(&files) {
                for line in read_text(path)?.lines().skip(1) {
                    let _ = writeln!(out, "{fold},{line}");
                }
            }
            Ok(out)
        }
        "grid" => {
            let path = run.join("grid.csv");
            require_files(std::slice::from_ref(&path))?;
            read_text(&path)
        }
        other => Err(pairwise_cl::Error::contract(format!("no report for `{other}` runs"))),
    }
}

fn configure_workers() -> CliResult<()> {
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{raw}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// Rejects settings the subcommand has no flag for, before any work starts.
fn check_keys(cfg: &RunConfig, command: &str) -> CliResult<()> {
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(command)
        .ok_or_else(|| CliError::Usage(format!("unknown command `{command}`")))?;
    let known: Vec<String> = sub
        .get_arguments()
        .map(|a| a.get_id().as_str().replace('-', "_"))
        .collect();
    let unknown: Vec<&str> = cfg
        .keys()
        .filter(|k| *k != "command" && !known.iter().any(|n| n == k))
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "unknown setting(s) for `{command}`: {}",
            unknown.join(", ")
        )))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    configure_workers()?;
    let file = match &cli.config {
        Some(p) => usage(RunConfig::load(p))?,
        None => RunConfig::new(),
    };
    if let Some(c) = file.get("command") {
        if c != command_name(&cli.command) {
            return Err(CliError::Usage(format!(
                "config is for `{c}`, not `{}`",
                command_name(&cli.command)
            )));
        }
    }
    let merged = file.overridden_by(&flags_of(&cli.command));
    check_keys(&merged, command_name(&cli.command))?;
    let mut res = Resolver::new(merged);
    res.note("command", command_name(&cli.command));
    let _ = res.opt::<String>("command");
    match cli.command {
        Command::Synth(_) => cmd_synth(res),
        Command::ExtractMel(_) => cmd_extract(res, Extractor::Mel),
        Command::ExtractPara(_) => cmd_extract(res, Extractor::Para),
        Command::IngestCsv(_) => cmd_ingest(res),
        Command::Validate(_) => cmd_validate(res),
        Command::Pretrain(_) => cmd_pretrain(res),
        Command::Finetune(_) => cmd_finetune(res),
        Command::Eval(_) => cmd_eval(res),
        Command::Sparse(_) => cmd_sparse(res),
        Command::Grid(_) => cmd_grid(res),
        Command::Pwcca(_) => cmd_pwcca(res),
        Command::ExportReps(_) => cmd_export(res),
        Command::Report(_) => cmd_report(res),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
