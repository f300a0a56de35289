//! Contrastive pre-training, supervised fine-tuning and evaluation.

mod experiments;
mod metrics;

pub use experiments::{
    average_ranks, run_sparse_experiment, run_temperature_grid, GridCell, GridConfig, GridReport, SparseConfig,
    SparseReport, SparseRow, SparseTrial,
};
pub use metrics::MetricsReport;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::contrastive::{multiview_loss, ContrastiveConfig};
use crate::data::{sample_sparse_labels, CvSplit, Dataset, Part, SparseLabelConfig};
use crate::encoders::{EncoderSpec, ModelCheckpoint, MultiViewModel, ViewClassifier};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Batch size used for evaluation passes that do not update parameters.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub views: Vec<String>,
    pub temperature: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            views: Vec::new(),
            temperature: ContrastiveConfig::default().temperature,
            batch_size: 128,
            max_epochs: 100,
            patience: 30,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        ContrastiveConfig::new(self.temperature)?;
        if self.views.len() < 2 {
            return Err(Error::contract("pre-training needs at least two views"));
        }
        if self.batch_size < 2 {
            return Err(Error::contract("contrastive batches need at least 2 instances"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::contract(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub view: String,
    pub freeze: bool,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Per-class share of training labels; `None` uses them all.
    pub label_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            view: String::new(),
            freeze: false,
            lr: 1e-3,
            plateau_factor: 0.9,
            plateau_patience: 5,
            max_epochs: 100,
            patience: 20,
            batch_size: 128,
            label_fraction: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(p) = self.label_fraction {
            SparseLabelConfig::new(p)?;
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::contract("batch size and max epochs must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::contract("plateau factor must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run. Epochs are 1-based in `best_epoch`
/// and `stop_epoch`; vectors are indexed from epoch 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Validation loss (pre-training) or validation UAR (fine-tuning).
    pub val_metric: Vec<f64>,
    pub val_metric_name: String,
    /// Learning rate in effect at the end of each epoch.
    pub lr: Vec<f64>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
}

impl TrainHistory {
    /// Line-oriented `epoch,metric,value` text.
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch,metric,value\n");
        for e in 0..self.train_loss.len() {
            let _ = writeln!(out, "{},train_loss,{:e}", e + 1, self.train_loss[e]);
            let _ = writeln!(out, "{},{},{:e}", e + 1, self.val_metric_name, self.val_metric[e]);
            let _ = writeln!(out, "{},lr,{:e}", e + 1, self.lr[e]);
        }
        let _ = writeln!(out, "{},best_epoch,{}", self.stop_epoch, self.best_epoch);
        let _ = writeln!(out, "{},stop_epoch,{}", self.stop_epoch, self.stop_epoch);
        out
    }
}

/// Multiplies the learning rate by `factor` after every `patience`
/// consecutive epochs without improvement.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    patience: usize,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            stale: 0,
        }
    }

    pub fn observe(&mut self, improved: bool) -> f64 {
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.patience > 0 && self.stale.is_multiple_of(self.patience) {
                self.lr *= self.factor;
            }
        }
        self.lr
    }
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Encoder specs for the requested views, chosen from their declared dims.
pub fn specs_for_views(ds: &Dataset, views: &[String]) -> Result<Vec<EncoderSpec>> {
    views
        .iter()
        .map(|v| {
            let idx = ds.view_index(v)?;
            EncoderSpec::for_view(v.clone(), ds.views[idx].decl.dims.clone())
        })
        .collect()
}

fn contrastive_batch_loss(
    model: &MultiViewModel<f32>,
    ds: &Dataset,
    view_idx: &[usize],
    batch: &[usize],
    tau: f64,
) -> Result<(Graph<f32>, Var)> {
    let mut g = Graph::new();
    let inputs: Vec<_> = view_idx.iter().map(|&v| g.input(ds.batch(v, batch))).collect();
    let z = model.project_all(&mut g, &inputs)?;
    let loss = multiview_loss(&mut g, &z, tau)?;
    Ok((g, loss))
}

/// Mean contrastive loss over consecutive `batch`-sized chunks of `idx`.
/// The trailing partial chunk is dropped unless it is the only one.
pub fn contrastive_eval_loss(
    model: &MultiViewModel<f32>,
    ds: &Dataset,
    idx: &[usize],
    batch: usize,
    tau: f64,
) -> Result<f64> {
    let view_idx = model
        .specs
        .iter()
        .map(|s| ds.view_index(&s.view))
        .collect::<Result<Vec<_>>>()?;
    if idx.len() < 2 {
        return Err(Error::EmptyDataset(
            "contrastive evaluation needs at least 2 records".into(),
        ));
    }
    let chunks: Vec<&[usize]> = if idx.len() < batch {
        vec![idx]
    } else {
        idx.chunks_exact(batch).collect()
    };
    let mut total = 0.0;
    for chunk in &chunks {
        let (g, loss) = contrastive_batch_loss(model, ds, &view_idx, chunk, tau)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / chunks.len() as f64)
}

/// Trains encoders and projection heads for one fold and returns the
/// checkpoint with the lowest validation loss.
pub fn pretrain(ds: &Dataset, split: &CvSplit, cfg: &PretrainConfig) -> Result<(ModelCheckpoint, TrainHistory)> {
    cfg.validate()?;
    let specs = specs_for_views(ds, &cfg.views)?;
    let view_idx = cfg.views.iter().map(|v| ds.view_index(v)).collect::<Result<Vec<_>>>()?;
    let train = ds.indices(split, Part::Train);
    let val = ds.indices(split, Part::Val);
    if cfg.batch_size > train.len() {
        return Err(Error::contract(format!(
            "batch size {} exceeds {} training records",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut model: MultiViewModel<f32> = MultiViewModel::new(specs, cfg.seed)?;
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut rng = epoch_rng(cfg.seed, 1);
    let mut history = TrainHistory {
        val_metric_name: "val_loss".into(),
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut stale = 0usize;
    let mut order = train.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks_exact(cfg.batch_size) {
            let (g, loss) = contrastive_batch_loss(&model, ds, &view_idx, batch, cfg.temperature)?;
            sum += g.value(loss).data()[0] as f64;
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
            steps += 1;
        }
        let val_loss = contrastive_eval_loss(&model, ds, &val, cfg.batch_size, cfg.temperature)?;
        history.train_loss.push(sum / steps as f64);
        history.val_metric.push(val_loss);
        history.lr.push(cfg.lr);
        history.stop_epoch = epoch;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.store.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }

    if let Some((_, store)) = best {
        model.store = store;
    }
    let mut ckpt = ModelCheckpoint::from_multiview(&model);
    ckpt.set_meta("fold", split.fold);
    ckpt.set_meta("temperature", cfg.temperature);
    ckpt.set_meta("best_epoch", history.best_epoch);
    Ok((ckpt, history))
}

/// Pre-trains every requested fold independently; results are in fold order.
pub fn pretrain_folds(
    ds: &Dataset,
    splits: &[CvSplit],
    cfg: &PretrainConfig,
) -> Result<Vec<(ModelCheckpoint, TrainHistory)>> {
    splits.par_iter().map(|s| pretrain(ds, s, cfg)).collect()
}

/// Labeled training records for fine-tuning, optionally subsampled per class.
pub fn labeled_train_indices(
    ds: &Dataset,
    split: &CvSplit,
    classes: &[String],
    fraction: Option<f64>,
    sample_seed: u64,
) -> Result<Vec<usize>> {
    let labels = ds.class_indices(classes);
    let train: Vec<usize> = ds
        .indices(split, Part::Train)
        .into_iter()
        .filter(|&i| labels[i].is_some())
        .collect();
    if train.is_empty() {
        return Err(Error::contract("no labeled training records"));
    }
    match fraction {
        None => Ok(train),
        Some(p) => {
            let records: Vec<_> = train.iter().map(|&i| ds.manifest.records[i].clone()).collect();
            let picked = sample_sparse_labels(&records, classes, SparseLabelConfig::new(p)?, sample_seed)?;
            Ok(picked.into_iter().map(|k| train[k]).collect())
        }
    }
}

/// Where fine-tuning reads classifier inputs from: raw view features, or
/// representations precomputed once by a frozen encoder (row = record index).
enum Source {
    Raw(usize),
    Cached(Tensor<f32>),
}

impl Source {
    fn logits(&self, model: &ViewClassifier<f32>, ds: &Dataset, g: &mut Graph<f32>, idx: &[usize]) -> Result<Var> {
        match self {
            Source::Raw(v) => {
                let x = g.input(ds.batch(*v, idx));
                model.logits(g, x)
            }
            Source::Cached(reps) => {
                let x = g.input(reps.select_rows(idx));
                model.classifier.logits(g, &model.store, x)
            }
        }
    }

    fn predict(&self, model: &ViewClassifier<f32>, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let logits = self.logits(model, ds, &mut g, chunk)?;
            let z = g.value(logits);
            let c = z.shape()[1];
            for row in z.data().chunks(c) {
                let mut arg = 0;
                for k in 1..c {
                    if row[k] > row[arg] {
                        arg = k;
                    }
                }
                out.push(arg);
            }
        }
        Ok(out)
    }

    fn evaluate(
        &self,
        model: &ViewClassifier<f32>,
        ds: &Dataset,
        idx: &[usize],
        classes: &[String],
    ) -> Result<MetricsReport> {
        let labels = ds.class_indices(classes);
        let labeled: Vec<usize> = idx.iter().copied().filter(|&i| labels[i].is_some()).collect();
        let truth: Vec<usize> = labeled.iter().map(|&i| labels[i].unwrap_or_default()).collect();
        let pred = self.predict(model, ds, &labeled)?;
        MetricsReport::from_predictions(&truth, &pred, classes.len())
    }
}

/// Predicted class (argmax of logits) per record.
pub fn predict(model: &ViewClassifier<f32>, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
    Source::Raw(ds.view_index(&model.spec.view)?).predict(model, ds, idx)
}

/// Confusion-matrix metrics over the labeled records in `idx`.
pub fn evaluate(model: &ViewClassifier<f32>, ds: &Dataset, idx: &[usize], classes: &[String]) -> Result<MetricsReport> {
    Source::Raw(ds.view_index(&model.spec.view)?).evaluate(model, ds, idx, classes)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: ViewClassifier<f32>,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub history: TrainHistory,
}

/// Fine-tunes one view's encoder plus a fresh classifier on `train_idx`,
/// selecting the epoch with the best validation UAR. Without a checkpoint
/// the encoder starts from random initialization (supervised baseline).
pub fn finetune(
    ds: &Dataset,
    split: &CvSplit,
    cfg: &FinetuneConfig,
    checkpoint: Option<&ModelCheckpoint>,
    classes: &[String],
    train_idx: &[usize],
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let vi = ds.view_index(&cfg.view)?;
    let spec = EncoderSpec::for_view(cfg.view.clone(), ds.views[vi].decl.dims.clone())?;
    let mut model = match checkpoint {
        Some(ckpt) => ViewClassifier::from_checkpoint(ckpt, &spec, classes.len(), cfg.seed)?,
        None => ViewClassifier::new(spec, classes.len(), cfg.seed)?,
    };
    model.set_encoder_frozen(cfg.freeze);

    let labels = ds.class_indices(classes);
    if train_idx.is_empty() {
        return Err(Error::contract("no labeled training records"));
    }
    for &i in train_idx {
        if split.part_of(ds.manifest.records[i].session) != Part::Train {
            return Err(Error::contract(format!(
                "record `{}` is not in the training sessions",
                ds.manifest.records[i].id
            )));
        }
        if labels[i].is_none() {
            return Err(Error::contract(format!(
                "record `{}` has no usable label",
                ds.manifest.records[i].id
            )));
        }
    }
    let val_idx: Vec<usize> = ds
        .indices(split, Part::Val)
        .into_iter()
        .filter(|&i| labels[i].is_some())
        .collect();
    let test_idx: Vec<usize> = ds
        .indices(split, Part::Test)
        .into_iter()
        .filter(|&i| labels[i].is_some())
        .collect();
    if val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::contract("validation and test sessions need labeled records"));
    }

    let source = if cfg.freeze {
        let all: Vec<usize> = (0..ds.len()).collect();
        let mut data = Vec::new();
        for chunk in all.chunks(EVAL_BATCH) {
            data.extend_from_slice(model.representations(&ds.batch(vi, chunk))?.data());
        }
        let dim = data.len() / ds.len().max(1);
        Source::Cached(Tensor::new(vec![ds.len(), dim], data)?)
    } else {
        Source::Raw(vi)
    };
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = epoch_rng(cfg.seed, 2);
    let mut history = TrainHistory {
        val_metric_name: "val_uar".into(),
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut stale = 0usize;
    let mut order = train_idx.to_vec();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i].unwrap_or_default()).collect();
            let mut g = Graph::new();
            let logits = source.logits(&model, ds, &mut g, batch)?;
            let logp = g.log_softmax_rows(logits)?;
            let picked = g.gather_rows(logp, &targets)?;
            let mean = g.mean_all(picked);
            let loss = g.scale(mean, -1.0);
            sum += g.value(loss).data()[0] as f64;
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
            steps += 1;
        }
        let val_uar = source.evaluate(&model, ds, &val_idx, classes)?.uar;
        let improved = best.as_ref().is_none_or(|(b, _)| val_uar > *b);
        adam.lr = schedule.observe(improved);
        history.train_loss.push(sum / steps as f64);
        history.val_metric.push(val_uar);
        history.lr.push(adam.lr);
        history.stop_epoch = epoch;
        if improved {
            best = Some((val_uar, model.store.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    let mut val = source.evaluate(&model, ds, &val_idx, classes)?;
    let mut test = source.evaluate(&model, ds, &test_idx, classes)?;
    for r in [&mut val, &mut test] {
        r.fold = split.fold;
        r.seed = cfg.seed;
    }
    Ok(FinetuneOutcome {
        model,
        val,
        test,
        history,
    })
}
