//! Inner self-attention over neighborhoods, the middle aggregation layer and
//! multi-head outer cross-attention over keypoints.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{AttentionSpec, Graph, Linear, ParamBuilder, PoolKind, Pointwise, Scalar, Segments, Session, Var};

pub const CROSS_HEADS: usize = 8;
pub const CROSS_DROPOUT: f64 = 0.5;

/// Which features the inner attention sees for each neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// `F`
    Neighbor,
    /// `F - f_k`
    Diff,
    /// `(F - f_k, F)`
    DiffNeighbor,
    /// `(F - f_k, f_k)`
    #[default]
    DiffKey,
    /// `(F - f_k, f_k, F)`
    DiffKeyNeighbor,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 5] = [
        FeatureMode::Neighbor,
        FeatureMode::Diff,
        FeatureMode::DiffNeighbor,
        FeatureMode::DiffKey,
        FeatureMode::DiffKeyNeighbor,
    ];

    pub fn width(self, cin: usize) -> usize {
        match self {
            FeatureMode::Neighbor | FeatureMode::Diff => cin,
            FeatureMode::DiffNeighbor | FeatureMode::DiffKey => 2 * cin,
            FeatureMode::DiffKeyNeighbor => 3 * cin,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Neighbor => "neighbor",
            FeatureMode::Diff => "diff",
            FeatureMode::DiffNeighbor => "diff_neighbor",
            FeatureMode::DiffKey => "diff_key",
            FeatureMode::DiffKeyNeighbor => "diff_key_neighbor",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature mode {s:?}")))
    }
}

/// How a neighborhood is reduced to its keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    Max,
    Mean,
    MaxMinusMean,
    #[default]
    MaxConcatMean,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Max,
        Aggregation::Mean,
        Aggregation::MaxMinusMean,
        Aggregation::MaxConcatMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
            Aggregation::MaxMinusMean => "max_minus_mean",
            Aggregation::MaxConcatMean => "max_concat_mean",
        }
    }

    /// Short label used in ablation tables.
    pub fn letter(self) -> char {
        match self {
            Aggregation::Max => 'A',
            Aggregation::Mean => 'B',
            Aggregation::MaxMinusMean => 'C',
            Aggregation::MaxConcatMean => 'D',
        }
    }

    pub fn input_width(self, c: usize) -> usize {
        if self == Aggregation::MaxConcatMean {
            2 * c
        } else {
            c
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s || a.letter().to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation {s:?}")))
    }
}

/// Stack the per-neighbor inputs of the inner attention. `neighbors[i]` is
/// the feature row of neighbor slot `i`, `centers[i]` the row of its
/// keypoint.
pub fn build_neighborhood_features<S: Scalar>(
    g: &mut Graph<S>,
    feats: Var,
    neighbors: Arc<Vec<usize>>,
    centers: Arc<Vec<usize>>,
    mode: FeatureMode,
) -> Result<Var> {
    if neighbors.len() != centers.len() {
        return Err(Error::shape("build_neighborhood_features", neighbors.len(), centers.len()));
    }
    let nb = g.gather_rows(feats, neighbors)?;
    if mode == FeatureMode::Neighbor {
        return Ok(nb);
    }
    let kp = g.gather_rows(feats, centers)?;
    let diff = g.sub(nb, kp)?;
    match mode {
        FeatureMode::Neighbor => unreachable!(),
        FeatureMode::Diff => Ok(diff),
        FeatureMode::DiffNeighbor => g.concat_cols(&[diff, nb]),
        FeatureMode::DiffKey => g.concat_cols(&[diff, kp]),
        FeatureMode::DiffKeyNeighbor => g.concat_cols(&[diff, kp, nb]),
    }
}

fn logit_scale(scaled: bool, head_dim: usize) -> Option<f64> {
    scaled.then(|| 1.0 / (head_dim as f64).sqrt())
}

/// Single-head attention inside each neighborhood followed by a pointwise
/// linear map, batch norm and the activation.
#[derive(Clone, Debug)]
pub struct InnerAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub post: Pointwise,
    pub scaled_logits: bool,
}

impl InnerAttention {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, width: usize, cout: usize, scaled_logits: bool) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(&mut pb.scope("wq"), width, cout, false)?,
            wk: Linear::new(&mut pb.scope("wk"), width, cout, false)?,
            wv: Linear::new(&mut pb.scope("wv"), width, cout, false)?,
            post: Pointwise::new(&mut pb.scope("post"), cout, cout)?,
            scaled_logits,
        })
    }

    /// Raw attention encoding `softmax(Q Kᵀ) V` per group of `k` rows.
    pub fn encode<S: Scalar>(&self, s: &mut Session<'_, S>, nf: Var, k: usize) -> Result<Var> {
        if s.graph.shape(nf).get(1) != Some(&self.wq.cin) {
            return Err(Error::shape("inner_self_attention", format!("width {}", self.wq.cin), format!("{:?}", s.graph.shape(nf))));
        }
        let q = self.wq.forward(s, nf)?;
        let kk = self.wk.forward(s, nf)?;
        let v = self.wv.forward(s, nf)?;
        let spec = AttentionSpec {
            group: k,
            heads: 1,
            scale: logit_scale(self.scaled_logits, self.wq.cout),
            dropout: 0.0,
        };
        let (g, rng) = s.graph_and_rng();
        g.attention(q, kk, v, spec, rng)
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, nf: Var, k: usize) -> Result<Var> {
        let enc = self.encode(s, nf, k)?;
        self.post.forward(s, enc)
    }
}

/// Pooling over each neighborhood followed by an MLP.
#[derive(Clone, Debug)]
pub struct MiddleAggregate {
    pub agg: Aggregation,
    pub mlp: Pointwise,
}

impl MiddleAggregate {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, c: usize, agg: Aggregation) -> Result<Self> {
        Ok(Self {
            agg,
            mlp: Pointwise::new(&mut pb.scope("mlp"), agg.input_width(c), c)?,
        })
    }

    /// The pooled vector that enters the MLP, one row per group of `k`.
    pub fn pooled<S: Scalar>(&self, s: &mut Session<'_, S>, updated: Var, k: usize) -> Result<Var> {
        let rows = s.graph.shape(updated)[0];
        if k == 0 || rows % k != 0 {
            return Err(Error::shape("middle_aggregate", format!("rows divisible by {k}"), rows));
        }
        let seg = Arc::new(Segments::contiguous(rows / k, k));
        let g = &mut s.graph;
        match self.agg {
            Aggregation::Max => g.segment_pool(updated, seg, PoolKind::Max),
            Aggregation::Mean => g.segment_pool(updated, seg, PoolKind::Mean),
            Aggregation::MaxMinusMean => {
                let mx = g.segment_pool(updated, seg.clone(), PoolKind::Max)?;
                let mn = g.segment_pool(updated, seg, PoolKind::Mean)?;
                g.sub(mx, mn)
            }
            Aggregation::MaxConcatMean => {
                let mx = g.segment_pool(updated, seg.clone(), PoolKind::Max)?;
                let mn = g.segment_pool(updated, seg, PoolKind::Mean)?;
                g.concat_cols(&[mx, mn])
            }
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, updated: Var, k: usize) -> Result<Var> {
        let pooled = self.pooled(s, updated, k)?;
        self.mlp.forward(s, pooled)
    }
}

/// Eight-head attention with queries from the initial keypoint features and
/// keys/values from the aggregated ones, then a linear output map.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dropout: f64,
    pub scaled_logits: bool,
}

impl CrossAttention {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, cout: usize, scaled_logits: bool) -> Result<Self> {
        if cout % CROSS_HEADS != 0 {
            return Err(Error::Config(format!("output channels {cout} not divisible by {CROSS_HEADS} heads")));
        }
        Ok(Self {
            wq: Linear::new(&mut pb.scope("wq"), cin, cout, false)?,
            wk: Linear::new(&mut pb.scope("wk"), cout, cout, false)?,
            wv: Linear::new(&mut pb.scope("wv"), cout, cout, false)?,
            out: Linear::new(&mut pb.scope("out"), cout, cout, true)?,
            heads: CROSS_HEADS,
            dropout: CROSS_DROPOUT,
            scaled_logits,
        })
    }

    /// Concatenated head outputs before the output map. Rows come in groups
    /// of `m` keypoints per cloud.
    pub fn encode<S: Scalar>(&self, s: &mut Session<'_, S>, f_k: Var, f_k_new: Var, m: usize) -> Result<Var> {
        let q = self.wq.forward(s, f_k)?;
        let k = self.wk.forward(s, f_k_new)?;
        let v = self.wv.forward(s, f_k_new)?;
        let spec = AttentionSpec {
            group: m,
            heads: self.heads,
            scale: logit_scale(self.scaled_logits, self.wq.cout / self.heads),
            dropout: if s.is_train() { self.dropout } else { 0.0 },
        };
        let (g, rng) = s.graph_and_rng();
        g.attention(q, k, v, spec, rng)
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, f_k: Var, f_k_new: Var, m: usize) -> Result<Var> {
        let enc = self.encode(s, f_k, f_k_new, m)?;
        self.out.forward(s, enc)
    }
}
