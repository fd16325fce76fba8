//! The VTP block: voxel branch, point-transformer branch and point branch.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{build_neighborhood_features, Aggregation, CrossAttention, FeatureMode, InnerAttention, MiddleAggregate};
use crate::error::{Error, Result};
use crate::geometry::{
    ball_query_ordered, centroid_seed, devoxelize_rows, farthest_point_sample, three_nn_rows, NeighborOrder, Point, VoxelMap,
};
use crate::nn::layers::activation;
use crate::nn::{BatchNorm, Conv3d, Linear, ParamBuilder, Pointwise, Scalar, Segments, Session, SparseRows, Var};

/// Hyperparameters of one block, written `(c, R, M, r, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VtpConfig {
    pub c_out: usize,
    pub resolution: usize,
    pub keypoints: usize,
    pub radius: f64,
    pub neighbors: usize,
    pub feature_mode: FeatureMode,
    pub aggregation: Aggregation,
    pub scaled_logits: bool,
}

impl VtpConfig {
    pub fn new(c_out: usize, resolution: usize, keypoints: usize, radius: f64, neighbors: usize) -> Self {
        Self {
            c_out,
            resolution,
            keypoints,
            radius,
            neighbors,
            feature_mode: FeatureMode::default(),
            aggregation: Aggregation::default(),
            scaled_logits: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.c_out == 0 || self.c_out % crate::attention::CROSS_HEADS != 0 {
            return fail(format!("c_out {} must be a positive multiple of 8", self.c_out));
        }
        if self.resolution < 2 {
            return fail(format!("voxel resolution {} must be at least 2", self.resolution));
        }
        if self.keypoints < 1 {
            return fail("keypoint count must be at least 1".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return fail(format!("radius {} must be positive", self.radius));
        }
        if self.neighbors < 1 {
            return fail("neighbor count must be at least 1".into());
        }
        Ok(())
    }
}

/// How keypoint seeds and neighbor order are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Random FPS seed in train mode, index 0 in eval mode; neighbors by
    /// ascending index.
    #[default]
    Seeded,
    /// Seed nearest the centroid and distance-ordered neighbors in both
    /// modes, which makes the network blind to the order of its input.
    Pinned,
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Seeded => "seeded",
            Sampling::Pinned => "pinned",
        }
    }
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded" => Ok(Sampling::Seeded),
            "pinned" => Ok(Sampling::Pinned),
            _ => Err(Error::Config(format!("unknown sampling policy {s:?}"))),
        }
    }
}

/// Row offsets of each cloud inside a stacked batch.
#[derive(Clone, Debug)]
pub struct BatchLayout<'a> {
    pub clouds: Vec<&'a [Point]>,
    pub offsets: Vec<usize>,
}

impl<'a> BatchLayout<'a> {
    pub fn new(clouds: Vec<&'a [Point]>) -> Self {
        let mut offsets = vec![0];
        for c in &clouds {
            offsets.push(offsets.last().unwrap() + c.len());
        }
        Self { clouds, offsets }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

/// Voxel assignment and devoxelization weights of a whole batch.
#[derive(Clone, Debug)]
pub struct VoxelPlan {
    pub resolution: usize,
    pub segments: Arc<Segments>,
    pub occupied: Arc<Vec<bool>>,
    pub devox: Arc<SparseRows>,
}

impl VoxelPlan {
    pub fn new(layout: &BatchLayout<'_>, resolution: usize) -> Result<Self> {
        let vox = resolution.pow(3);
        let mut lists = Vec::with_capacity(layout.len() * vox);
        let mut devox = SparseRows::new(layout.len() * vox);
        for (b, coords) in layout.clouds.iter().enumerate() {
            let map = VoxelMap::new(coords, resolution)?;
            lists.extend(map.member_lists(layout.offsets[b]));
            devox.extend_shifted(&devoxelize_rows(&map), b * vox);
        }
        let occupied = lists.iter().map(|l| !l.is_empty()).collect();
        Ok(Self {
            resolution,
            segments: Arc::new(Segments::from_lists(layout.total(), &lists)),
            occupied: Arc::new(occupied),
            devox: Arc::new(devox),
        })
    }
}

/// Keypoints, neighborhoods and upsampling weights of a whole batch, with
/// indices into the stacked rows.
#[derive(Clone, Debug)]
pub struct GroupPlan {
    pub keypoints: usize,
    pub neighbors: usize,
    pub keypoint_rows: Arc<Vec<usize>>,
    pub neighbor_rows: Arc<Vec<usize>>,
    pub center_rows: Arc<Vec<usize>>,
    pub upsample: Arc<SparseRows>,
}

impl GroupPlan {
    pub fn new(layout: &BatchLayout<'_>, cfg: &VtpConfig, seeds: &[usize], order: NeighborOrder) -> Result<Self> {
        let (m, k) = (cfg.keypoints, cfg.neighbors);
        let mut keypoint_rows = Vec::with_capacity(layout.len() * m);
        let mut neighbor_rows = Vec::with_capacity(layout.len() * m * k);
        let mut center_rows = Vec::with_capacity(layout.len() * m * k);
        let mut upsample = SparseRows::new(layout.len() * m);
        for (b, coords) in layout.clouds.iter().enumerate() {
            if m > coords.len() {
                return Err(Error::Config(format!("{m} keypoints requested from a cloud of {} points", coords.len())));
            }
            let off = layout.offsets[b];
            let kp = farthest_point_sample(coords, m, seeds[b])?;
            let group = ball_query_ordered(coords, &kp, cfg.radius, k, order)?;
            keypoint_rows.extend(kp.iter().map(|&i| i + off));
            neighbor_rows.extend(group.neighbor_indices.iter().map(|&i| i + off));
            for &c in &kp {
                center_rows.extend(std::iter::repeat_n(c + off, k));
            }
            let sources: Vec<Point> = kp.iter().map(|&i| coords[i]).collect();
            upsample.extend_shifted(&three_nn_rows(&sources, coords)?, b * m);
        }
        Ok(Self {
            keypoints: m,
            neighbors: k,
            keypoint_rows: Arc::new(keypoint_rows),
            neighbor_rows: Arc::new(neighbor_rows),
            center_rows: Arc::new(center_rows),
            upsample: Arc::new(upsample),
        })
    }
}

#[derive(Clone, Debug)]
pub struct VBranch {
    pub conv1: Conv3d,
    pub bn1: BatchNorm,
    pub conv2: Conv3d,
    pub bn2: BatchNorm,
}

impl VBranch {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv3d::new(&mut pb.scope("conv1"), cin, c)?,
            bn1: BatchNorm::new(&mut pb.scope("bn1"), c)?,
            conv2: Conv3d::new(&mut pb.scope("conv2"), c, c)?,
            bn2: BatchNorm::new(&mut pb.scope("bn2"), c)?,
        })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var, plan: &VoxelPlan) -> Result<Var> {
        let r = plan.resolution;
        let vox = s.graph.scatter_mean(x, plan.segments.clone())?;
        let h = self.conv1.forward(s, vox, r, Some(plan.occupied.clone()))?;
        let h = self.bn1.forward(s, h)?;
        let h = activation(s, h)?;
        let h = self.conv2.forward(s, h, r, None)?;
        let h = self.bn2.forward(s, h)?;
        let h = activation(s, h)?;
        s.graph.sparse_combine(h, plan.devox.clone())
    }
}

#[derive(Clone, Debug)]
pub struct PtBranch {
    pub feature_mode: FeatureMode,
    pub inner: InnerAttention,
    pub middle: MiddleAggregate,
    pub cross: CrossAttention,
}

/// Intermediate results of the point-transformer branch.
#[derive(Clone, Copy, Debug)]
pub struct PtOutputs {
    pub neighborhood: Var,
    pub updated: Var,
    pub keypoints_new: Var,
    pub cross: Var,
    pub upsampled: Var,
}

impl PtBranch {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, cfg: &VtpConfig) -> Result<Self> {
        let c = cfg.c_out;
        Ok(Self {
            feature_mode: cfg.feature_mode,
            inner: InnerAttention::new(&mut pb.scope("inner"), cfg.feature_mode.width(cin), c, cfg.scaled_logits)?,
            middle: MiddleAggregate::new(&mut pb.scope("middle"), c, cfg.aggregation)?,
            cross: CrossAttention::new(&mut pb.scope("cross"), cin, c, cfg.scaled_logits)?,
        })
    }

    pub fn forward_parts<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var, plan: &GroupPlan) -> Result<PtOutputs> {
        let nf = build_neighborhood_features(
            &mut s.graph,
            x,
            plan.neighbor_rows.clone(),
            plan.center_rows.clone(),
            self.feature_mode,
        )?;
        let updated = self.inner.forward(s, nf, plan.neighbors)?;
        let keypoints_new = self.middle.forward(s, updated, plan.neighbors)?;
        let f_k = s.graph.gather_rows(x, plan.keypoint_rows.clone())?;
        let cross = self.cross.forward(s, f_k, keypoints_new, plan.keypoints)?;
        let upsampled = s.graph.sparse_combine(cross, plan.upsample.clone())?;
        Ok(PtOutputs {
            neighborhood: nf,
            updated,
            keypoints_new,
            cross,
            upsampled,
        })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var, plan: &GroupPlan) -> Result<Var> {
        Ok(self.forward_parts(s, x, plan)?.upsampled)
    }
}

/// Every intermediate of a block forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VtpOutputs {
    pub voxel: Var,
    pub transformer: Var,
    pub local: Var,
    pub global: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct VtpBlock {
    pub cfg: VtpConfig,
    pub cin: usize,
    pub v: VBranch,
    pub pt: PtBranch,
    pub p: Pointwise,
    pub fuse: Linear,
}

impl VtpBlock {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, cfg: VtpConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_out;
        Ok(Self {
            v: VBranch::new(&mut pb.scope("v"), cin, c)?,
            pt: PtBranch::new(&mut pb.scope("pt"), cin, &cfg)?,
            p: Pointwise::new(&mut pb.scope("p"), cin, c)?,
            fuse: Linear::new(&mut pb.scope("fuse"), 2 * c, c, true)?,
            cfg,
            cin,
        })
    }

    /// FPS seeds for every cloud under the given policy.
    pub fn seeds<S: Scalar>(s: &mut Session<'_, S>, layout: &BatchLayout<'_>, sampling: Sampling) -> Vec<usize> {
        layout
            .clouds
            .iter()
            .map(|c| match (sampling, s.is_train()) {
                (Sampling::Pinned, _) => centroid_seed(c),
                (Sampling::Seeded, true) => s.rng().random_range(0..c.len()),
                (Sampling::Seeded, false) => 0,
            })
            .collect()
    }

    pub fn plans<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        layout: &BatchLayout<'_>,
        sampling: Sampling,
    ) -> Result<(VoxelPlan, GroupPlan)> {
        let seeds = Self::seeds(s, layout, sampling);
        let order = match sampling {
            Sampling::Seeded => NeighborOrder::Index,
            Sampling::Pinned => NeighborOrder::Distance,
        };
        Ok((
            VoxelPlan::new(layout, self.cfg.resolution)?,
            GroupPlan::new(layout, &self.cfg, &seeds, order)?,
        ))
    }

    pub fn forward_with_plans<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        x: Var,
        voxels: &VoxelPlan,
        groups: &GroupPlan,
    ) -> Result<VtpOutputs> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cin || shape[0] != voxels.segments.src_rows {
            return Err(Error::shape(
                "vtp_forward",
                format!("[{}, {}]", voxels.segments.src_rows, self.cin),
                format!("{shape:?}"),
            ));
        }
        let voxel = self.v.forward(s, x, voxels)?;
        let transformer = self.pt.forward(s, x, groups)?;
        let global = self.p.forward(s, x)?;
        let both = s.graph.concat_cols(&[voxel, transformer])?;
        let local = self.fuse.forward(s, both)?;
        let out = s.graph.add(local, global)?;
        Ok(VtpOutputs {
            voxel,
            transformer,
            local,
            global,
            out,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        x: Var,
        layout: &BatchLayout<'_>,
        sampling: Sampling,
    ) -> Result<Var> {
        let (voxels, groups) = self.plans(s, layout, sampling)?;
        Ok(self.forward_with_plans(s, x, &voxels, &groups)?.out)
    }
}
