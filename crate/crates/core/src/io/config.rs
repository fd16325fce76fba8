//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! task = seg
//! preset = desk
//! blocks.0.r = 0.3
//! data.shapes = cylinder
//! train.epochs = 20
//! ```
//!
//! `#` starts a comment. `preset` picks the base network; every other key
//! overrides one field. Serialization writes every field explicitly, so a
//! written file parses back to the same value without a preset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{ClsNetConfig, SegNetConfig};
use crate::training::{ModelSpec, OptimizerConfig, OptimizerKind, Shape, SyntheticDatasetSpec, Task};
use crate::vtp::VtpConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        shapes: Vec<Shape>,
        train_clouds: usize,
        eval_clouds: usize,
        points: usize,
        noise: f64,
        seed: u64,
    },
    /// Manifests list `path category` per line; relative paths are taken
    /// from the manifest's directory.
    Files {
        train_manifest: PathBuf,
        eval_manifest: Option<PathBuf>,
    },
}

impl DataSource {
    /// Train and eval specs of a synthetic source. The eval split uses a
    /// seed derived from the train seed.
    pub fn synthetic_specs(&self, task: Task) -> Option<(SyntheticDatasetSpec, SyntheticDatasetSpec)> {
        let DataSource::Synthetic {
            shapes,
            train_clouds,
            eval_clouds,
            points,
            noise,
            seed,
        } = self
        else {
            return None;
        };
        let train = SyntheticDatasetSpec {
            task,
            shapes: shapes.clone(),
            clouds: *train_clouds,
            points_per_cloud: *points,
            noise_sigma: *noise,
            seed: *seed,
        };
        let eval = SyntheticDatasetSpec {
            clouds: *eval_clouds,
            seed: seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
            ..train.clone()
        };
        Some((train, eval))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn task(&self) -> Task {
        self.model.task()
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelSpec::Cls(c) => c.validate()?,
            ModelSpec::Seg(c) => c.validate()?,
        }
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if let DataSource::Synthetic { shapes, points, noise, .. } = &self.data {
            if shapes.is_empty() || *points == 0 || !(*noise >= 0.0) {
                return Err(Error::Config("synthetic data needs shapes, points > 0 and noise >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Entries::parse(text)?;
        let task: Task = kv.take_parsed("task")?.ok_or_else(|| Error::Config("missing key `task`".into()))?;
        let preset = kv.take("preset").unwrap_or_else(|| "desk".to_string());

        let data = match kv.take("data.source").as_deref().unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                shapes: match kv.take("data.shapes") {
                    Some(v) => parse_list(&v)?,
                    None => match task {
                        Task::Classification => Shape::ALL.to_vec(),
                        Task::PartSegmentation => vec![Shape::Cylinder],
                    },
                },
                train_clouds: kv.take_parsed("data.train_clouds")?.unwrap_or(64),
                eval_clouds: kv.take_parsed("data.eval_clouds")?.unwrap_or(32),
                points: kv.take_parsed("data.points")?.unwrap_or(256),
                noise: kv.take_parsed("data.noise")?.unwrap_or(0.01),
                seed: kv.take_parsed("data.seed")?.unwrap_or(0),
            },
            "files" => DataSource::Files {
                train_manifest: kv
                    .take("data.train_manifest")
                    .ok_or_else(|| Error::Config("data.source = files needs data.train_manifest".into()))?
                    .into(),
                eval_manifest: kv.take("data.eval_manifest").map(PathBuf::from),
            },
            other => return Err(Error::Config(format!("unknown data.source {other:?}"))),
        };
        let n_shapes = match &data {
            DataSource::Synthetic { shapes, .. } => Some(shapes.len()),
            DataSource::Files { .. } => None,
        };
        let need = |key: &str, v: Option<usize>| {
            v.ok_or_else(|| Error::Config(format!("missing key `{key}` (required with file data)")))
        };

        let model = match task {
            Task::Classification => {
                let classes = match kv.take_parsed("model.classes")? {
                    Some(c) => c,
                    None => need("model.classes", n_shapes)?,
                };
                let mut cfg = match preset.as_str() {
                    "desk" => ClsNetConfig::desk(classes),
                    "paper" => ClsNetConfig::paper(classes),
                    other => return Err(Error::Config(format!("unknown preset {other:?}"))),
                };
                cfg.blocks = parse_blocks(&mut kv, cfg.blocks)?;
                if let Some(v) = kv.take("model.head_dims") {
                    cfg.head_dims = parse_list(&v)?;
                }
                if let Some(v) = kv.take_parsed("model.sampling")? {
                    cfg.sampling = v;
                }
                ModelSpec::Cls(cfg)
            }
            Task::PartSegmentation => {
                let categories = match kv.take_parsed("model.categories")? {
                    Some(c) => c,
                    None => need("model.categories", n_shapes)?,
                };
                let parts = match kv.take_parsed("model.parts")? {
                    Some(p) => p,
                    None => categories * Shape::PARTS,
                };
                let mut cfg = match preset.as_str() {
                    "desk" => SegNetConfig::desk(parts, categories),
                    "paper" => SegNetConfig::paper(parts, categories),
                    other => return Err(Error::Config(format!("unknown preset {other:?}"))),
                };
                cfg.blocks = parse_blocks(&mut kv, cfg.blocks)?;
                if let Some(v) = kv.take("model.mlp_dims") {
                    cfg.mlp_dims = parse_list(&v)?;
                }
                if let Some(v) = kv.take("model.head_dims") {
                    cfg.head_dims = parse_list(&v)?;
                }
                if let Some(v) = kv.take_parsed("model.skip_all_blocks")? {
                    cfg.skip_all_blocks = v;
                }
                if let Some(v) = kv.take_parsed("model.sampling")? {
                    cfg.sampling = v;
                }
                ModelSpec::Seg(cfg)
            }
        };

        let kind: OptimizerKind = kv.take_parsed("optim.kind")?.unwrap_or(OptimizerKind::Adam);
        let mut optimizer = match kind {
            OptimizerKind::Adam => OptimizerConfig::adam(1e-3),
            OptimizerKind::Sgd => OptimizerConfig::sgd(1e-2, 0.9),
        };
        if let Some(v) = kv.take_parsed("optim.lr")? {
            optimizer.lr = v;
        }
        if let Some(v) = kv.take_parsed("optim.beta1")? {
            optimizer.betas.0 = v;
        }
        if let Some(v) = kv.take_parsed("optim.beta2")? {
            optimizer.betas.1 = v;
        }
        if let Some(v) = kv.take_parsed("optim.eps")? {
            optimizer.eps = v;
        }
        if let Some(v) = kv.take_parsed("optim.momentum")? {
            optimizer.momentum = v;
        }
        if let Some(v) = kv.take_parsed("optim.weight_decay")? {
            optimizer.weight_decay = v;
        }
        if let Some(v) = kv.take_parsed("optim.schedule")? {
            optimizer.schedule = v;
        }

        let cfg = RunConfig {
            model,
            data,
            optimizer,
            epochs: kv.take_parsed("train.epochs")?.unwrap_or(10),
            batch_size: kv.take_parsed("train.batch_size")?.unwrap_or(8),
            seed: kv.take_parsed("train.seed")?.unwrap_or(0),
            output_dir: kv.take("output_dir").unwrap_or_else(|| "runs/default".into()).into(),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key = value` lines, in a fixed order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("task", self.task().name().to_string());
        let blocks = match &self.model {
            ModelSpec::Cls(c) => {
                put("model.classes", c.num_classes.to_string());
                put("model.head_dims", join(&c.head_dims));
                put("model.sampling", c.sampling.name().to_string());
                &c.blocks
            }
            ModelSpec::Seg(c) => {
                put("model.categories", c.num_categories.to_string());
                put("model.parts", c.num_parts.to_string());
                put("model.mlp_dims", join(&c.mlp_dims));
                put("model.head_dims", join(&c.head_dims));
                put("model.skip_all_blocks", c.skip_all_blocks.to_string());
                put("model.sampling", c.sampling.name().to_string());
                &c.blocks
            }
        };
        put("model.blocks", blocks.len().to_string());
        for (i, b) in blocks.iter().enumerate() {
            put(&format!("blocks.{i}.c"), b.c_out.to_string());
            put(&format!("blocks.{i}.R"), b.resolution.to_string());
            put(&format!("blocks.{i}.M"), b.keypoints.to_string());
            put(&format!("blocks.{i}.r"), b.radius.to_string());
            put(&format!("blocks.{i}.K"), b.neighbors.to_string());
            put(&format!("blocks.{i}.feature_mode"), b.feature_mode.name().to_string());
            put(&format!("blocks.{i}.aggregation"), b.aggregation.name().to_string());
            put(&format!("blocks.{i}.scaled_logits"), b.scaled_logits.to_string());
        }
        match &self.data {
            DataSource::Synthetic {
                shapes,
                train_clouds,
                eval_clouds,
                points,
                noise,
                seed,
            } => {
                put("data.source", "synthetic".into());
                put("data.shapes", join(shapes));
                put("data.train_clouds", train_clouds.to_string());
                put("data.eval_clouds", eval_clouds.to_string());
                put("data.points", points.to_string());
                put("data.noise", noise.to_string());
                put("data.seed", seed.to_string());
            }
            DataSource::Files {
                train_manifest,
                eval_manifest,
            } => {
                put("data.source", "files".into());
                put("data.train_manifest", train_manifest.display().to_string());
                if let Some(e) = eval_manifest {
                    put("data.eval_manifest", e.display().to_string());
                }
            }
        }
        let o = &self.optimizer;
        put("optim.kind", o.kind.name().to_string());
        put("optim.lr", o.lr.to_string());
        put("optim.beta1", o.betas.0.to_string());
        put("optim.beta2", o.betas.1.to_string());
        put("optim.eps", o.eps.to_string());
        put("optim.momentum", o.momentum.to_string());
        put("optim.weight_decay", o.weight_decay.to_string());
        put("optim.schedule", o.schedule.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.seed", self.seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        out
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("cannot parse list item {s:?}"))))
        .collect()
}

/// Apply `model.blocks` and `blocks.<i>.<field>` keys to a preset block list.
fn parse_blocks(kv: &mut Entries, mut blocks: Vec<VtpConfig>) -> Result<Vec<VtpConfig>> {
    let count = kv.take_parsed("model.blocks")?.unwrap_or(blocks.len());
    while blocks.len() < count {
        let i = blocks.len();
        for f in ["c", "R", "M", "r", "K"] {
            if kv.peek(&format!("blocks.{i}.{f}")).is_none() {
                return Err(Error::Config(format!("new block {i} needs blocks.{i}.{f}")));
            }
        }
        blocks.push(VtpConfig::new(1, 2, 1, 1.0, 1));
    }
    blocks.truncate(count);
    for (i, b) in blocks.iter_mut().enumerate() {
        let key = |f: &str| format!("blocks.{i}.{f}");
        if let Some(v) = kv.take_parsed(&key("c"))? {
            b.c_out = v;
        }
        if let Some(v) = kv.take_parsed(&key("R"))? {
            b.resolution = v;
        }
        if let Some(v) = kv.take_parsed(&key("M"))? {
            b.keypoints = v;
        }
        if let Some(v) = kv.take_parsed(&key("r"))? {
            b.radius = v;
        }
        if let Some(v) = kv.take_parsed(&key("K"))? {
            b.neighbors = v;
        }
        if let Some(v) = kv.take_parsed(&key("feature_mode"))? {
            b.feature_mode = v;
        }
        if let Some(v) = kv.take_parsed(&key("aggregation"))? {
            b.aggregation = v;
        }
        if let Some(v) = kv.take_parsed(&key("scaled_logits"))? {
            b.scaled_logits = v;
        }
    }
    Ok(blocks)
}

/// Parsed lines, consumed key by key; anything left over is an error.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if map.insert(k.to_string(), (n + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { map })
    }

    fn peek(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for `{key}`"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}
