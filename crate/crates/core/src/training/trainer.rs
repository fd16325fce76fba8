//! Batched training and evaluation of either backbone.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::{ClsNet, ClsNetConfig, SegNet, SegNetConfig};
use crate::nn::{Mode, ParamStore, Session, Tensor, Var};
use crate::training::metrics::{argmax_among, classification_report, compute_miou, MetricReport};
use crate::training::optim::Optimizer;
use crate::training::synthetic::{parts_of_category, Dataset, Sample, Task};

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Cls(ClsNetConfig),
    Seg(SegNetConfig),
}

impl ModelSpec {
    pub fn task(&self) -> Task {
        match self {
            ModelSpec::Cls(_) => Task::Classification,
            ModelSpec::Seg(_) => Task::PartSegmentation,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Cls(ClsNet),
    Seg(SegNet),
}

/// Output for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class { class: usize, logits: Vec<f32> },
    Parts { labels: Vec<usize> },
}

impl Model {
    pub fn new(spec: ModelSpec, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Cls(cfg) => Model::Cls(ClsNet::new(cfg, store, seed)?),
            ModelSpec::Seg(cfg) => Model::Seg(SegNet::new(cfg, store, seed)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Cls(n) => ModelSpec::Cls(n.cfg.clone()),
            Model::Seg(n) => ModelSpec::Seg(n.cfg.clone()),
        }
    }

    pub fn task(&self) -> Task {
        self.spec().task()
    }

    /// Reject datasets whose task or label ranges do not fit the model.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.task != self.task() {
            return Err(Error::Config(format!(
                "dataset task {} does not match model task {}",
                data.task.name(),
                self.task().name()
            )));
        }
        let (name, have, want) = match self {
            Model::Cls(n) => ("classes", data.num_categories(), n.cfg.num_classes),
            Model::Seg(n) => ("categories", data.num_categories(), n.cfg.num_categories),
        };
        if have > want {
            return Err(Error::Config(format!("dataset has {have} {name}, model supports {want}")));
        }
        if let Model::Seg(n) = self {
            if data.num_parts() > n.cfg.num_parts {
                return Err(Error::Config(format!(
                    "dataset has {} parts, model supports {}",
                    data.num_parts(),
                    n.cfg.num_parts
                )));
            }
            for (i, s) in data.samples.iter().enumerate() {
                let labels = s
                    .cloud
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("segmentation sample {i} has no per-point labels")))?;
                let parts = parts_of_category(s.category);
                if let Some(bad) = labels.iter().find(|l| !parts.contains(l)) {
                    return Err(Error::Config(format!(
                        "sample {i}: label {bad} is not a part of category {} (parts {parts:?})",
                        s.category
                    )));
                }
            }
        }
        Ok(())
    }

    /// Logits: one row per cloud (classification) or per point
    /// (segmentation, clouds stacked in order).
    pub fn logits(&self, s: &mut Session<'_, f32>, clouds: &[&PointCloud], categories: &[usize]) -> Result<Var> {
        match self {
            Model::Cls(n) => n.forward(s, clouds),
            Model::Seg(n) => n.forward(s, clouds, categories),
        }
    }

    fn targets(&self, samples: &[&Sample]) -> Vec<usize> {
        match self {
            Model::Cls(_) => samples.iter().map(|s| s.category).collect(),
            Model::Seg(_) => samples
                .iter()
                .flat_map(|s| s.cloud.labels.as_deref().unwrap_or(&[]).iter().copied())
                .collect(),
        }
    }

    fn min_batch(&self) -> usize {
        match self {
            // batch norm in the head sees one row per cloud
            Model::Cls(_) => 2,
            Model::Seg(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Re-evaluate the training set in eval mode after every epoch.
    pub eval_each_epoch: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss of the training batches, dropout included.
    pub train_loss: f64,
    /// Eval-mode metrics on the training set after the epoch.
    pub report: Option<MetricReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct EpochContext<'a> {
    pub record: &'a EpochRecord,
    pub store: &'a ParamStore<f32>,
    pub optimizer: &'a Optimizer<f32>,
}

/// Shuffled batches of at least `min` members; a short tail is folded
/// into the previous batch.
pub fn make_batches(n: usize, batch_size: usize, min: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Train for `cfg.epochs` epochs. After every epoch the hook decides
/// whether to continue.
pub fn train_loop(
    model: &Model,
    store: &mut ParamStore<f32>,
    optimizer: &mut Optimizer<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochContext<'_>) -> Result<Control>,
) -> Result<Vec<EpochRecord>> {
    model.check_dataset(data)?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let min = model.min_batch();
    if data.len() < min || cfg.batch_size < min {
        return Err(Error::Config(format!(
            "{} training needs batches of at least {min} clouds (dataset {}, batch size {})",
            model.task().name(),
            data.len(),
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        optimizer.set_epoch(epoch);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in make_batches(data.len(), cfg.batch_size, min, &mut rng) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
            let cats: Vec<usize> = samples.iter().map(|s| s.category).collect();
            let targets = model.targets(&samples);
            store.zero_grad();
            let mut s = Session::new(store, Mode::Train, rng.next_u64());
            let logits = model.logits(&mut s, &clouds, &cats)?;
            let loss = s.graph.cross_entropy(logits, &targets)?;
            let value = s.graph.value(loss).data()[0] as f64;
            s.backward_into_store(loss)?;
            optimizer.step(store)?;
            loss_sum += value * targets.len() as f64;
            count += targets.len();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: optimizer.lr,
            train_loss: loss_sum / count as f64,
            report: if cfg.eval_each_epoch {
                Some(evaluate(model, store, data, cfg.batch_size)?)
            } else {
                None
            },
        };
        let control = hook(&EpochContext {
            record: &record,
            store,
            optimizer,
        })?;
        history.push(record);
        if control == Control::Stop {
            break;
        }
    }
    Ok(history)
}

fn predictions_from(model: &Model, logits: &Tensor<f32>, clouds: &[&PointCloud], cats: &[usize]) -> Vec<Prediction> {
    match model {
        Model::Cls(n) => (0..clouds.len())
            .map(|i| {
                let row = logits.row(i);
                let all: Vec<usize> = (0..n.cfg.num_classes).collect();
                Prediction::Class {
                    class: argmax_among(row, &all),
                    logits: row.to_vec(),
                }
            })
            .collect(),
        Model::Seg(_) => {
            let mut start = 0;
            clouds
                .iter()
                .zip(cats)
                .map(|(c, &cat)| {
                    let parts = parts_of_category(cat);
                    let labels = (start..start + c.len()).map(|p| argmax_among(logits.row(p), &parts)).collect();
                    start += c.len();
                    Prediction::Parts { labels }
                })
                .collect()
        }
    }
}

/// Eval-mode predictions. Segmentation argmax is restricted to the parts
/// of each cloud's category.
pub fn predict(
    model: &Model,
    store: &mut ParamStore<f32>,
    clouds: &[&PointCloud],
    categories: &[usize],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    if categories.len() != clouds.len() {
        return Err(Error::shape("predict", clouds.len(), categories.len()));
    }
    let mut out = Vec::with_capacity(clouds.len());
    for (cs, cats) in clouds.chunks(batch_size.max(1)).zip(categories.chunks(batch_size.max(1))) {
        let mut s = Session::new(store, Mode::Eval, 0);
        let logits = model.logits(&mut s, cs, cats)?;
        out.extend(predictions_from(model, s.graph.value(logits), cs, cats));
    }
    Ok(out)
}

/// Eval-mode loss and metrics over a dataset.
pub fn evaluate(model: &Model, store: &mut ParamStore<f32>, data: &Dataset, batch_size: usize) -> Result<MetricReport> {
    model.check_dataset(data)?;
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let samples: Vec<&Sample> = chunk.iter().collect();
        let clouds: Vec<&PointCloud> = chunk.iter().map(|s| &s.cloud).collect();
        let cats: Vec<usize> = chunk.iter().map(|s| s.category).collect();
        let targets = model.targets(&samples);
        let mut s = Session::new(store, Mode::Eval, 0);
        let logits = model.logits(&mut s, &clouds, &cats)?;
        let loss = s.graph.cross_entropy(logits, &targets)?;
        loss_sum += s.graph.value(loss).data()[0] as f64 * targets.len() as f64;
        count += targets.len();
        preds.extend(predictions_from(model, s.graph.value(logits), &clouds, &cats));
    }
    let cats: Vec<usize> = data.samples.iter().map(|s| s.category).collect();
    let mut report = match model {
        Model::Cls(n) => {
            let classes: Vec<usize> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Class { class, .. } => *class,
                    Prediction::Parts { .. } => unreachable!(),
                })
                .collect();
            classification_report(&classes, &cats, n.cfg.num_classes)?
        }
        Model::Seg(_) => {
            let labels: Vec<Vec<usize>> = preds
                .into_iter()
                .map(|p| match p {
                    Prediction::Parts { labels } => labels,
                    Prediction::Class { .. } => unreachable!(),
                })
                .collect();
            let truths: Vec<Vec<usize>> = data
                .samples
                .iter()
                .map(|s| s.cloud.labels.clone().unwrap_or_default())
                .collect();
            compute_miou(&labels, &truths, &cats, parts_of_category)?
        }
    };
    report.loss = loss_sum / count as f64;
    Ok(report)
}
