//! Controlled variant sweeps over block hyperparameters.

use std::fmt;
use std::str::FromStr;

use crate::attention::{Aggregation, FeatureMode};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::training::metrics::MetricReport;
use crate::training::optim::{Optimizer, OptimizerConfig};
use crate::training::synthetic::{Dataset, Task};
use crate::training::trainer::{evaluate, train_loop, Control, Model, ModelSpec, TrainConfig};
use crate::vtp::VtpConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    ScalePairing,
    FeatureMode,
    Aggregation,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::ScalePairing, AblationAxis::FeatureMode, AblationAxis::Aggregation];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::ScalePairing => "scale_pairing",
            AblationAxis::FeatureMode => "feature_mode",
            AblationAxis::Aggregation => "aggregation",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Large,
    Small,
}

/// The four (voxel scale, sphere scale) pairings. The first entry applies
/// to blocks in the large-voxel role, the second to the small-voxel role.
pub const SCALE_PAIRINGS: [[Scale; 2]; 4] = [
    [Scale::Large, Scale::Large],
    [Scale::Small, Scale::Small],
    [Scale::Large, Scale::Small],
    [Scale::Small, Scale::Large],
];

/// Concrete grid resolutions and radii behind "large" and "small". A large
/// voxel scale means a coarse grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleValues {
    pub large_voxel_resolution: usize,
    pub small_voxel_resolution: usize,
    pub large_radius: f64,
    pub small_radius: f64,
}

impl ScaleValues {
    pub fn paper() -> Self {
        Self {
            large_voxel_resolution: 16,
            small_voxel_resolution: 32,
            large_radius: 0.03,
            small_radius: 0.01,
        }
    }

    /// Extremes of a block list: coarsest and finest grid, largest and
    /// smallest radius.
    pub fn from_blocks(blocks: &[VtpConfig]) -> Self {
        Self {
            large_voxel_resolution: blocks.iter().map(|b| b.resolution).min().unwrap_or(2),
            small_voxel_resolution: blocks.iter().map(|b| b.resolution).max().unwrap_or(2),
            large_radius: blocks.iter().map(|b| b.radius).fold(f64::MIN, f64::max),
            small_radius: blocks.iter().map(|b| b.radius).fold(f64::MAX, f64::min),
        }
    }

    fn radius(&self, s: Scale) -> f64 {
        match s {
            Scale::Large => self.large_radius,
            Scale::Small => self.small_radius,
        }
    }
}

/// Odd-indexed blocks take the large-voxel role, even-indexed blocks the
/// small-voxel role, as in the alternating presets. Returns the applied
/// (resolution, radius) per role.
pub fn apply_scale_pairing(blocks: &mut [VtpConfig], pairing: [Scale; 2], scales: &ScaleValues) -> [(usize, f64); 2] {
    let roles = [
        (scales.large_voxel_resolution, scales.radius(pairing[0])),
        (scales.small_voxel_resolution, scales.radius(pairing[1])),
    ];
    for (i, b) in blocks.iter_mut().enumerate() {
        let (r, radius) = if i % 2 == 1 { roles[0] } else { roles[1] };
        b.resolution = r;
        b.radius = radius;
    }
    roles
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub axis: AblationAxis,
    pub name: String,
    pub spec: ModelSpec,
}

fn blocks_mut(spec: &mut ModelSpec) -> &mut Vec<VtpConfig> {
    match spec {
        ModelSpec::Cls(c) => &mut c.blocks,
        ModelSpec::Seg(c) => &mut c.blocks,
    }
}

/// All variants of one axis derived from a base model.
pub fn variants(axis: AblationAxis, base: &ModelSpec, scales: &ScaleValues) -> Vec<Variant> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::ScalePairing => {
            for (i, pairing) in SCALE_PAIRINGS.into_iter().enumerate() {
                let mut spec = base.clone();
                let [(ra, sa), (rb, sb)] = apply_scale_pairing(blocks_mut(&mut spec), pairing, scales);
                out.push(Variant {
                    axis,
                    name: format!("{} R{ra}/r{sa} + R{rb}/r{sb}", i + 1),
                    spec,
                });
            }
        }
        AblationAxis::FeatureMode => {
            for mode in FeatureMode::ALL {
                let mut spec = base.clone();
                blocks_mut(&mut spec).iter_mut().for_each(|b| b.feature_mode = mode);
                out.push(Variant {
                    axis,
                    name: mode.name().to_string(),
                    spec,
                });
            }
        }
        AblationAxis::Aggregation => {
            for agg in Aggregation::ALL {
                let mut spec = base.clone();
                blocks_mut(&mut spec).iter_mut().for_each(|b| b.aggregation = agg);
                out.push(Variant {
                    axis,
                    name: format!("{} {}", agg.letter(), agg.name()),
                    spec,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub axes: Vec<AblationAxis>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub scales: ScaleValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub axis: AblationAxis,
    pub variant: String,
    /// Seeds both parameter initialization and the training loop.
    pub seed: u64,
    /// mIoU for segmentation, OA for classification, on the eval set.
    pub score: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub axis: AblationAxis,
    pub variant: String,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    /// 1 is the best mean within the axis.
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub summaries: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn runs_for(&self, axis: AblationAxis) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.axis == axis)
    }

    pub fn summaries_for(&self, axis: AblationAxis) -> impl Iterator<Item = &AblationSummary> {
        self.summaries.iter().filter(move |r| r.axis == axis)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train and score every variant of every requested axis once per seed.
/// `progress` sees each finished run.
pub fn ablation_harness(
    cfg: &AblationConfig,
    base: &ModelSpec,
    train: &Dataset,
    eval: &Dataset,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationTable> {
    if cfg.seeds.is_empty() || cfg.axes.is_empty() {
        return Err(Error::Config("ablation needs at least one axis and one seed".into()));
    }
    let mut table = AblationTable::default();
    for &axis in &cfg.axes {
        let mut summaries = Vec::new();
        for variant in variants(axis, base, &cfg.scales) {
            let mut scores = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let mut store = ParamStore::new();
                let model = Model::new(variant.spec.clone(), &mut store, seed)?;
                let mut opt = Optimizer::new(cfg.optimizer.clone(), &store)?;
                let tc = TrainConfig {
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    seed,
                    eval_each_epoch: false,
                };
                train_loop(&model, &mut store, &mut opt, train, &tc, |_| Ok(Control::Continue))?;
                let report = evaluate(&model, &mut store, eval, cfg.batch_size)?;
                let score = match train.task {
                    Task::Classification => report.oa,
                    Task::PartSegmentation => report.miou,
                };
                let run = AblationRun {
                    axis,
                    variant: variant.name.clone(),
                    seed,
                    score,
                    report,
                };
                progress(&run);
                scores.push(score);
                table.runs.push(run);
            }
            let (mean, std) = mean_std(&scores);
            summaries.push(AblationSummary {
                axis,
                variant: variant.name,
                mean,
                std,
                rank: 0,
            });
        }
        let mut order: Vec<usize> = (0..summaries.len()).collect();
        order.sort_by(|&a, &b| summaries[b].mean.total_cmp(&summaries[a].mean).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            summaries[i].rank = rank + 1;
        }
        table.summaries.extend(summaries);
    }
    Ok(table)
}
