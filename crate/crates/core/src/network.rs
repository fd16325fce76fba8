//! Segmentation and classification backbones built from VTP blocks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{Linear, ParamBuilder, ParamStore, PoolKind, Pointwise, Scalar, Segments, Session, Tensor, Var};
use crate::vtp::{BatchLayout, Sampling, VtpBlock, VtpConfig};

/// Width of the per-point input: coordinates and normals.
pub const INPUT_CHANNELS: usize = 6;
pub const HEAD_DROPOUT: f64 = 0.5;

fn block(c: usize, r: usize, m: usize, radius: f64, k: usize) -> VtpConfig {
    VtpConfig::new(c, r, m, radius, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub blocks: Vec<VtpConfig>,
    pub mlp_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub num_parts: usize,
    pub num_categories: usize,
    /// Concatenate every block output into the head input; otherwise only
    /// the penultimate block's.
    pub skip_all_blocks: bool,
    pub sampling: Sampling,
}

impl SegNetConfig {
    pub fn paper(num_parts: usize, num_categories: usize) -> Self {
        Self {
            blocks: vec![
                block(64, 32, 50, 0.06, 45),
                block(128, 16, 400, 0.03, 6),
                block(64, 32, 50, 0.06, 45),
            ],
            mlp_dims: vec![512, 2048],
            head_dims: vec![512, 256],
            num_parts,
            num_categories,
            skip_all_blocks: true,
            sampling: Sampling::Seeded,
        }
    }

    /// A quarter of the channels, small grids and few keypoints; sized for
    /// clouds of a few hundred points on a CPU.
    pub fn desk(num_parts: usize, num_categories: usize) -> Self {
        Self {
            blocks: vec![
                block(16, 8, 32, 0.4, 16),
                block(32, 4, 64, 0.2, 8),
                block(16, 8, 32, 0.4, 16),
            ],
            mlp_dims: vec![128, 512],
            head_dims: vec![128, 64],
            num_parts,
            num_categories,
            skip_all_blocks: true,
            sampling: Sampling::Seeded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::Config("segmentation network needs at least 2 blocks".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        if self.mlp_dims.is_empty() || self.head_dims.is_empty() || self.num_parts == 0 || self.num_categories == 0 {
            return Err(Error::Config("segmentation network dimensions must be non-empty".into()));
        }
        if self.mlp_dims.iter().chain(&self.head_dims).any(|&d| d == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn skip_blocks(&self) -> Vec<usize> {
        if self.skip_all_blocks {
            (0..self.blocks.len()).collect()
        } else {
            vec![self.blocks.len() - 2]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsNetConfig {
    pub blocks: Vec<VtpConfig>,
    pub head_dims: Vec<usize>,
    pub num_classes: usize,
    pub sampling: Sampling,
}

impl ClsNetConfig {
    pub fn paper(num_classes: usize) -> Self {
        let a = block(64, 32, 100, 0.03, 45);
        let b = block(128, 16, 800, 0.01, 6);
        Self {
            blocks: vec![a.clone(), b.clone(), a.clone(), b, a],
            head_dims: vec![512, 256],
            num_classes,
            sampling: Sampling::Seeded,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        let a = block(16, 8, 32, 0.4, 16);
        let b = block(32, 4, 64, 0.2, 8);
        Self {
            blocks: vec![a.clone(), b.clone(), a.clone(), b, a],
            head_dims: vec![128, 64],
            num_classes,
            sampling: Sampling::Seeded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("classification network needs at least 1 block".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) || self.num_classes == 0 {
            return Err(Error::Config("classification head dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Stacked `[coords, normals]` rows of every cloud.
pub fn input_features<S: Scalar>(clouds: &[&PointCloud]) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    for (i, c) in clouds.iter().enumerate() {
        let normals = c
            .normals
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("cloud {i} has no normals; the network input is coordinates plus normals")))?;
        for (p, n) in c.coords.iter().zip(normals) {
            data.extend(p.iter().chain(n).map(|&v| S::from_f64_lossy(v)));
        }
    }
    let rows = data.len() / INPUT_CHANNELS;
    Tensor::new(vec![rows, INPUT_CHANNELS], data)
}

fn cloud_segments(layout: &BatchLayout<'_>) -> Segments {
    let lists: Vec<Vec<usize>> = (0..layout.len())
        .map(|b| (layout.offsets[b]..layout.offsets[b + 1]).collect())
        .collect();
    Segments::from_lists(layout.total(), &lists)
}

fn cloud_of_point(layout: &BatchLayout<'_>) -> Vec<usize> {
    (0..layout.len())
        .flat_map(|b| std::iter::repeat_n(b, layout.offsets[b + 1] - layout.offsets[b]))
        .collect()
}

fn pointwise_stack<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, cin: usize, dims: &[usize]) -> Result<Vec<Pointwise>> {
    let mut layers = Vec::new();
    let mut width = cin;
    for (i, &d) in dims.iter().enumerate() {
        layers.push(Pointwise::new(&mut pb.scope(&format!("{name}{i}")), width, d)?);
        width = d;
    }
    Ok(layers)
}

fn build_blocks<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cfgs: &[VtpConfig]) -> Result<Vec<VtpBlock>> {
    let mut blocks = Vec::new();
    let mut width = INPUT_CHANNELS;
    for (i, cfg) in cfgs.iter().enumerate() {
        blocks.push(VtpBlock::new(&mut pb.scope(&format!("vtp{i}")), width, cfg.clone())?);
        width = cfg.c_out;
    }
    Ok(blocks)
}

fn run_blocks<S: Scalar>(
    s: &mut Session<'_, S>,
    blocks: &[VtpBlock],
    x: Var,
    layout: &BatchLayout<'_>,
    sampling: Sampling,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        h = b.forward(s, h, layout, sampling)?;
        outs.push(h);
    }
    Ok(outs)
}

/// Per-point part segmentation.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub cfg: SegNetConfig,
    pub blocks: Vec<VtpBlock>,
    pub mlp: Vec<Pointwise>,
    pub head: Vec<Pointwise>,
    pub out: Linear,
}

impl SegNet {
    pub fn new<S: Scalar>(cfg: SegNetConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let blocks = build_blocks(&mut pb, &cfg.blocks)?;
        let last = cfg.blocks.last().unwrap().c_out;
        let mlp = pointwise_stack(&mut pb, "mlp", last, &cfg.mlp_dims)?;
        let skip: usize = cfg.skip_blocks().iter().map(|&i| cfg.blocks[i].c_out).sum();
        let head_in = cfg.mlp_dims.last().unwrap() + skip + cfg.num_categories;
        let head = pointwise_stack(&mut pb, "head", head_in, &cfg.head_dims)?;
        let out = Linear::new(&mut pb.scope("out"), *cfg.head_dims.last().unwrap(), cfg.num_parts, true)?;
        Ok(Self {
            cfg,
            blocks,
            mlp,
            head,
            out,
        })
    }

    /// Logits for every point of every cloud, stacked in cloud order.
    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, clouds: &[&PointCloud], categories: &[usize]) -> Result<Var> {
        if categories.len() != clouds.len() {
            return Err(Error::shape("segnet_forward", format!("{} categories", clouds.len()), categories.len()));
        }
        if let Some(&bad) = categories.iter().find(|&&c| c >= self.cfg.num_categories) {
            return Err(Error::invalid(format!(
                "category {bad} out of range for {} categories",
                self.cfg.num_categories
            )));
        }
        let layout = BatchLayout::new(clouds.iter().map(|c| c.coords.as_slice()).collect());
        let x = s.graph.constant(input_features(clouds)?);
        let outs = run_blocks(s, &self.blocks, x, &layout, self.cfg.sampling)?;
        let mut h = *outs.last().unwrap();
        for layer in &self.mlp {
            h = layer.forward(s, h)?;
        }
        let global = s.graph.segment_pool(h, Arc::new(cloud_segments(&layout)), PoolKind::Max)?;
        let owner = Arc::new(cloud_of_point(&layout));
        let global = s.graph.gather_rows(global, owner.clone())?;
        let nc = self.cfg.num_categories;
        let mut onehot = Tensor::<S>::zeros(&[layout.total(), nc]);
        for (p, &b) in owner.iter().enumerate() {
            onehot.row_mut(p)[categories[b]] = S::one();
        }
        let onehot = s.graph.constant(onehot);
        let mut parts = vec![global];
        parts.extend(self.cfg.skip_blocks().iter().map(|&i| outs[i]));
        parts.push(onehot);
        let mut h = s.graph.concat_cols(&parts)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i == last {
                h = s.dropout(h, HEAD_DROPOUT)?;
            }
        }
        self.out.forward(s, h)
    }
}

/// Whole-cloud classification.
#[derive(Clone, Debug)]
pub struct ClsNet {
    pub cfg: ClsNetConfig,
    pub blocks: Vec<VtpBlock>,
    pub head: Vec<Pointwise>,
    pub out: Linear,
}

impl ClsNet {
    pub fn new<S: Scalar>(cfg: ClsNetConfig, store: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let blocks = build_blocks(&mut pb, &cfg.blocks)?;
        let concat: usize = cfg.blocks.iter().map(|b| b.c_out).sum();
        let head = pointwise_stack(&mut pb, "head", concat, &cfg.head_dims)?;
        let out = Linear::new(&mut pb.scope("out"), *cfg.head_dims.last().unwrap(), cfg.num_classes, true)?;
        Ok(Self { cfg, blocks, head, out })
    }

    /// Pooled, concatenated block features: one row per cloud.
    pub fn embed<S: Scalar>(&self, s: &mut Session<'_, S>, clouds: &[&PointCloud]) -> Result<Var> {
        let layout = BatchLayout::new(clouds.iter().map(|c| c.coords.as_slice()).collect());
        let x = s.graph.constant(input_features(clouds)?);
        let outs = run_blocks(s, &self.blocks, x, &layout, self.cfg.sampling)?;
        let all = s.graph.concat_cols(&outs)?;
        s.graph.segment_pool(all, Arc::new(cloud_segments(&layout)), PoolKind::Max)
    }

    /// One row of logits per cloud.
    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, clouds: &[&PointCloud]) -> Result<Var> {
        let mut h = self.embed(s, clouds)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i == last {
                h = s.dropout(h, HEAD_DROPOUT)?;
            }
        }
        self.out.forward(s, h)
    }
}

/// Number of trainable scalars.
pub fn count_parameters<S: Scalar>(store: &ParamStore<S>) -> usize {
    store.count_trainable()
}
