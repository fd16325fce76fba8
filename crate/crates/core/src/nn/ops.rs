//! Differentiable operations recorded on a [`Graph`].

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::kernels::{self, axpy, dot, Conv3dShape};
use crate::nn::tensor::{Scalar, Tensor};

/// Sparse row combination `out[i] = Σ w · src[j]`, stored as CSR.
/// Used for trilinear devoxelization and three-nearest-neighbor upsampling.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub src_rows: usize,
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

impl SparseRows {
    pub fn new(src_rows: usize) -> Self {
        Self {
            src_rows,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (j, w) in entries {
            self.index.push(j);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.index[r.clone()].iter().copied().zip(self.weight[r].iter().copied())
    }

    /// Append another block whose indices are shifted by `src_shift`.
    pub fn extend_shifted(&mut self, other: &SparseRows, src_shift: usize) {
        for i in 0..other.rows() {
            let entries: Vec<_> = other.row(i).map(|(j, w)| (j + src_shift, w)).collect();
            self.push_row(entries);
        }
    }
}

/// Partition of output rows into lists of input rows (CSR).
#[derive(Clone, Debug, Default)]
pub struct Segments {
    pub src_rows: usize,
    pub offsets: Vec<usize>,
    pub members: Vec<usize>,
}

impl Segments {
    /// `count` consecutive groups of `size` rows each.
    pub fn contiguous(count: usize, size: usize) -> Self {
        Self {
            src_rows: count * size,
            offsets: (0..=count).map(|g| g * size).collect(),
            members: (0..count * size).collect(),
        }
    }

    pub fn from_lists(src_rows: usize, lists: &[Vec<usize>]) -> Self {
        let mut offsets = vec![0];
        let mut members = Vec::new();
        for l in lists {
            members.extend_from_slice(l);
            offsets.push(members.len());
        }
        Self {
            src_rows,
            offsets,
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, s: usize) -> &[usize] {
        &self.members[self.offsets[s]..self.offsets[s + 1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

/// Grouped multi-head attention layout: rows come in consecutive groups of
/// `group` rows, each group attends only within itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub group: usize,
    pub heads: usize,
    /// Multiplier on the logits; `None` leaves them unscaled.
    pub scale: Option<f64>,
    /// Dropout probability applied to the attention weights.
    pub dropout: f64,
}

fn lex_cmp<S: Scalar>(a: &[S], b: &[S]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.as_f64().total_cmp(&y.as_f64());
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

/// Rows sorted lexicographically by value. Sums taken in this order do not
/// depend on how the rows were arranged, which keeps set reductions exactly
/// permutation invariant.
fn canonical_order<S: Scalar>(rows: &[usize], row: impl Fn(usize) -> Vec<S>) -> Vec<usize> {
    let mut keyed: Vec<(Vec<S>, usize)> = rows.iter().map(|&r| (row(r), r)).collect();
    keyed.sort_by(|a, b| lex_cmp(&a.0, &b.0));
    keyed.into_iter().map(|(_, r)| r).collect()
}

fn require_matrix<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, "matrix", format!("{:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<S: Scalar> Graph<S> {
    /// `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = require_matrix("matmul", self.value(a))?;
        let (k2, m) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[_, {k}] x [{k}, _]"), format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        self.push_op(
            "matmul",
            value,
            &[a, b],
            Box::new(move |args| {
                let (av, bv, g) = (args.inputs[0], args.inputs[1], args.grad.data());
                let da = args.needs[0].then(|| {
                    Tensor::new(vec![n, k], kernels::matmul_bt(g, bv.data(), n, m, k)).unwrap()
                });
                let db = args.needs[1].then(|| {
                    Tensor::new(vec![k, m], kernels::matmul_at(av.data(), g, n, k, m)).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, sign: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let s = S::from_f64_lossy(sign);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + s * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op(
            op,
            value,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad;
                vec![
                    args.needs[0].then(|| g.clone()),
                    args.needs[1].then(|| if sign > 0.0 { g.clone() } else { g.map(|v| -v) }),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, -1.0)
    }

    /// Adds a `[c]` vector to every row of an `[n×c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = require_matrix("add_row", self.value(x))?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", c, self.value(bias).len()));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..n {
            axpy(S::one(), &b, value.row_mut(i));
        }
        let bshape = self.shape(bias).to_vec();
        self.push_op(
            "add_row",
            value,
            &[x, bias],
            Box::new(move |args| {
                let g = args.grad;
                let db = args.needs[1].then(|| {
                    Tensor::new(bshape.clone(), kernels::column_sums(g.data(), n, c)).unwrap()
                });
                vec![args.needs[0].then(|| g.clone()), db]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = S::from_f64_lossy(factor);
        let value = self.value(x).map(|v| v * f);
        self.push_op("scale", value, &[x], Box::new(move |args| vec![Some(args.grad.map(|v| v * f))]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push_op(
            "relu",
            value,
            &[x],
            Box::new(|args| {
                let data = args
                    .grad
                    .data()
                    .iter()
                    .zip(args.inputs[0].data())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                vec![Some(Tensor::new(args.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let n = require_matrix("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_matrix("concat_cols", self.value(p))?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("{n} rows"), format!("{r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        self.push_op(
            "concat_cols",
            value,
            parts,
            Box::new(move |args| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(args.needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut d = Vec::with_capacity(n * w);
                            for i in 0..n {
                                d.extend_from_slice(&args.grad.row(i)[start..start + w]);
                            }
                            Tensor::new(vec![n, w], d).unwrap()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// `out[i] = x[index[i]]`; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = require_matrix("gather_rows", self.value(x))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row < {n}"), bad));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(self.value(x).row(i));
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        self.push_op(
            "gather_rows",
            value,
            &[x],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(&[n, c]);
                for (o, &i) in index.iter().enumerate() {
                    axpy(S::one(), args.grad.row(o), dx.row_mut(i));
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Row-wise softmax computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = require_matrix("softmax_rows", self.value(x))?;
        let mut value = self.value(x).clone();
        for i in 0..n {
            softmax_in_place(value.row_mut(i));
        }
        self.push_op(
            "softmax_rows",
            value,
            &[x],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let (y, g) = (args.output.row(i), args.grad.row(i));
                    let inner = dot(y, g);
                    for ((d, &yj), &gj) in dx.row_mut(i).iter_mut().zip(y).zip(g) {
                        *d = yj * (gj - inner);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Training-mode batch normalization over rows. Returns the output and
    /// the biased batch mean and variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = require_matrix("batch_norm", self.value(x))?;
        if n < 2 {
            return Err(Error::invalid(format!("batch_norm in train mode needs at least 2 rows, got {n}")));
        }
        check_channels("batch_norm", self.value(gamma), c)?;
        check_channels("batch_norm", self.value(beta), c)?;
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += xv[i * c + j].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                let d = xv[i * c + j].as_f64() - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                xhat[i * c + j] = S::from_f64_lossy((xv[i * c + j].as_f64() - mean[j]) * inv_std[j]);
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out = (0..n * c).map(|idx| gv[idx % c] * xhat[idx] + bv[idx % c]).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let pshape = self.shape(gamma).to_vec();
        let var_out = var.clone();
        let mean_out = mean.clone();
        let id = self.push_op(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for j in 0..c {
                        let gij = g[i * c + j].as_f64();
                        sum_g[j] += gij;
                        sum_gx[j] += gij * xhat[i * c + j].as_f64();
                    }
                }
                let dx = args.needs[0].then(|| {
                    let nf = n as f64;
                    let data = (0..n * c)
                        .map(|idx| {
                            let j = idx % c;
                            let v = gamma[j].as_f64() * inv_std[j] / nf
                                * (nf * g[idx].as_f64() - sum_g[j] - xhat[idx].as_f64() * sum_gx[j]);
                            S::from_f64_lossy(v)
                        })
                        .collect();
                    Tensor::new(vec![n, c], data).unwrap()
                });
                let to_param = |v: &[f64]| {
                    Tensor::new(pshape.clone(), v.iter().map(|&x| S::from_f64_lossy(x)).collect()).unwrap()
                };
                vec![
                    dx,
                    args.needs[1].then(|| to_param(&sum_gx)),
                    args.needs[2].then(|| to_param(&sum_g)),
                ]
            }),
        )?;
        Ok((id, mean_out, var_out))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = require_matrix("batch_norm", self.value(x))?;
        check_channels("batch_norm", self.value(gamma), c)?;
        check_channels("batch_norm", self.value(beta), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", c, running_mean.len()));
        }
        let eps_s = S::from_f64_lossy(eps);
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps_s).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|idx| {
                let j = idx % c;
                gv[j] * ((xv[idx] - mean[j]) * inv_std[j]) + bv[j]
            })
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let pshape = self.shape(gamma).to_vec();
        self.push_op(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let (xv, gamma) = (args.inputs[0].data(), args.inputs[1].data());
                let dx = args.needs[0].then(|| {
                    let data = (0..n * c).map(|idx| g[idx] * gamma[idx % c] * inv_std[idx % c]).collect();
                    Tensor::new(vec![n, c], data).unwrap()
                });
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for idx in 0..n * c {
                    let j = idx % c;
                    dgamma[j] += g[idx] * (xv[idx] - mean[j]) * inv_std[j];
                    dbeta[j] += g[idx];
                }
                vec![
                    dx,
                    args.needs[1].then(|| Tensor::new(pshape.clone(), dgamma).unwrap()),
                    args.needs[2].then(|| Tensor::new(pshape.clone(), dbeta).unwrap()),
                ]
            }),
        )
    }

    /// Inverted dropout: zero each entry with probability `p`, scale
    /// survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_op(
            "dropout",
            value,
            &[x],
            Box::new(move |args| {
                let data = args.grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                vec![Some(Tensor::new(args.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    /// Column-wise max or mean over each segment. Max ties resolve to the
    /// first member; means sum members in canonical order.
    pub fn segment_pool(&mut self, x: Var, segments: Arc<Segments>, kind: PoolKind) -> Result<Var> {
        if let Some(s) = (0..segments.len()).find(|&s| segments.segment(s).is_empty()) {
            return Err(Error::invalid(format!("pooling over empty segment {s}")));
        }
        self.pool_impl(x, segments, kind)
    }

    /// Segment means where empty segments produce zero rows; this is the
    /// voxel feature aggregation.
    pub fn scatter_mean(&mut self, x: Var, segments: Arc<Segments>) -> Result<Var> {
        self.pool_impl(x, segments, PoolKind::Mean)
    }

    fn pool_impl(&mut self, x: Var, segments: Arc<Segments>, kind: PoolKind) -> Result<Var> {
        let (n, c) = require_matrix("segment_pool", self.value(x))?;
        if segments.src_rows != n {
            return Err(Error::shape("segment_pool", format!("{} rows", segments.src_rows), n));
        }
        let xv = self.value(x);
        let m = segments.len();
        let mut out = vec![S::zero(); m * c];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Max => {
                argmax = vec![0usize; m * c];
                for s in 0..m {
                    let rows = segments.segment(s);
                    for j in 0..c {
                        let mut best = rows[0];
                        for &r in &rows[1..] {
                            if xv.at(r, j) > xv.at(best, j) {
                                best = r;
                            }
                        }
                        argmax[s * c + j] = best;
                        out[s * c + j] = xv.at(best, j);
                    }
                }
            }
            PoolKind::Mean => {
                for s in 0..m {
                    if segments.segment(s).is_empty() {
                        continue;
                    }
                    let rows = canonical_order(segments.segment(s), |r| xv.row(r).to_vec());
                    let orow = &mut out[s * c..(s + 1) * c];
                    for &r in &rows {
                        axpy(S::one(), xv.row(r), orow);
                    }
                    let inv = S::one() / S::from_usize(rows.len()).unwrap();
                    orow.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let value = Tensor::new(vec![m, c], out)?;
        self.push_op(
            "segment_pool",
            value,
            &[x],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(&[n, c]);
                let g = args.grad;
                match kind {
                    PoolKind::Max => {
                        for s in 0..m {
                            for j in 0..c {
                                let r = argmax[s * c + j];
                                dx.data_mut()[r * c + j] += g.at(s, j);
                            }
                        }
                    }
                    PoolKind::Mean => {
                        for s in 0..m {
                            let rows = segments.segment(s);
                            let inv = S::one() / S::from_usize(rows.len().max(1)).unwrap();
                            for &r in rows {
                                axpy(inv, g.row(s), dx.row_mut(r));
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `out[i] = Σ_j w_ij · src[j]` with fixed (non-learned) weights.
    pub fn sparse_combine(&mut self, src: Var, rows: Arc<SparseRows>) -> Result<Var> {
        let (n, c) = require_matrix("sparse_combine", self.value(src))?;
        if rows.src_rows != n {
            return Err(Error::shape("sparse_combine", format!("{} source rows", rows.src_rows), n));
        }
        let sv = self.value(src);
        let mut out = Tensor::zeros(&[rows.rows(), c]);
        for i in 0..rows.rows() {
            for (j, w) in rows.row(i) {
                axpy(S::from_f64_lossy(w), sv.row(j), out.row_mut(i));
            }
        }
        self.push_op(
            "sparse_combine",
            out,
            &[src],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(&[n, c]);
                for i in 0..rows.rows() {
                    for (j, w) in rows.row(i) {
                        axpy(S::from_f64_lossy(w), args.grad.row(i), dx.row_mut(j));
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Batched dense 3×3×3 convolution. `x` is `[batch·res³, cin]`, `w` is
    /// `[27, cin, cout]`. `active` marks input rows that need a gradient.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        res: usize,
        active: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let (rows, cin) = require_matrix("conv3d", self.value(x))?;
        let vox = res * res * res;
        if vox == 0 || rows % vox != 0 {
            return Err(Error::shape("conv3d", format!("multiple of {vox} rows"), rows));
        }
        let wshape = self.shape(w).to_vec();
        if wshape.len() != 3 || wshape[0] != 27 || wshape[1] != cin {
            return Err(Error::shape("conv3d", format!("[27, {cin}, _]"), format!("{wshape:?}")));
        }
        let cout = wshape[2];
        let shape = Conv3dShape {
            batch: rows / vox,
            res,
            cin,
            cout,
        };
        if let Some(b) = bias {
            check_channels("conv3d", self.value(b), cout)?;
        }
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &shape,
        );
        let value = Tensor::new(vec![rows, cout], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let bshape = bias.map(|b| self.shape(b).to_vec());
        self.push_op(
            "conv3d",
            value,
            &parents,
            Box::new(move |args| {
                let g = args.grad.data();
                let dx = args.needs[0].then(|| {
                    let d = kernels::conv3d_grad_input(g, args.inputs[1].data(), &shape, active.as_deref().map(|a| a.as_slice()));
                    Tensor::new(vec![shape.rows(), shape.cin], d).unwrap()
                });
                let dw = args.needs[1].then(|| {
                    let d = kernels::conv3d_grad_weight(args.inputs[0].data(), g, &shape);
                    Tensor::new(wshape.clone(), d).unwrap()
                });
                let mut grads = vec![dx, dw];
                if let Some(bs) = &bshape {
                    grads.push(args.needs[2].then(|| {
                        Tensor::new(bs.clone(), kernels::column_sums(g, shape.rows(), shape.cout)).unwrap()
                    }));
                }
                grads
            }),
        )
    }

    /// Grouped multi-head attention: per group and head,
    /// `softmax(Q·Kᵀ) · V`, with optional dropout on the weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec, rng: &mut impl Rng) -> Result<Var> {
        let (n, c) = require_matrix("attention", self.value(q))?;
        for t in [k, v] {
            if self.shape(t) != [n, c] {
                return Err(Error::shape("attention", format!("[{n}, {c}]"), format!("{:?}", self.shape(t))));
            }
        }
        if spec.group == 0 || n % spec.group != 0 {
            return Err(Error::shape("attention", format!("rows divisible by group {}", spec.group), n));
        }
        if spec.heads == 0 || c % spec.heads != 0 {
            return Err(Error::shape("attention", format!("channels divisible by {} heads", spec.heads), c));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::invalid(format!("attention dropout must be in [0, 1), got {}", spec.dropout)));
        }
        let layout = AttnLayout {
            groups: n / spec.group,
            group: spec.group,
            heads: spec.heads,
            width: c,
            scale: spec.scale.map_or(S::one(), S::from_f64_lossy),
        };
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let weights = attention_weights(qv, kv, vv, &layout);
        let mask = (spec.dropout > 0.0).then(|| {
            let keep = S::from_f64_lossy(1.0 / (1.0 - spec.dropout));
            (0..weights.len())
                .map(|_| if rng.random::<f64>() < spec.dropout { S::zero() } else { keep })
                .collect::<Vec<S>>()
        });
        let out = attention_apply(&weights, mask.as_deref(), vv, kv, &layout);
        let value = Tensor::new(vec![n, c], out)?;
        self.push_op(
            "attention",
            value,
            &[q, k, v],
            Box::new(move |args| {
                let (qv, kv, vv) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
                let (dq, dk, dv) = attention_backward(args.grad.data(), &weights, mask.as_deref(), qv, kv, vv, &layout);
                let wrap = |d: Vec<S>| Tensor::new(vec![n, c], d).unwrap();
                vec![
                    args.needs[0].then(|| wrap(dq)),
                    args.needs[1].then(|| wrap(dk)),
                    args.needs[2].then(|| wrap(dv)),
                ]
            }),
        )
    }

    /// Mean cross-entropy of row logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = require_matrix("cross_entropy", self.value(logits))?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} labels"), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            softmax_in_place(row);
            loss -= row[l].as_f64().max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        self.push_op(
            "cross_entropy",
            Tensor::scalar(S::from_f64_lossy(loss)),
            &[logits],
            Box::new(move |args| {
                let scale = args.grad.data()[0] / S::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.row_mut(i)[l] -= S::one();
                }
                vec![Some(d.map(|v| v * scale))]
            }),
        )
    }

    /// `Σ x ⊙ weights` for a fixed weight tensor; a generic scalar probe.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<S>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(Error::shape("weighted_sum", format!("{:?}", self.shape(x)), format!("{:?}", weights.shape())));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let w = weights.clone();
        self.push_op(
            "weighted_sum",
            Tensor::scalar(S::from_f64_lossy(total)),
            &[x],
            Box::new(move |args| {
                let s = args.grad.data()[0];
                vec![Some(w.map(|v| v * s))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let w = Tensor::full(self.shape(x), S::one() / S::from_usize(n.max(1)).unwrap());
        self.weighted_sum(x, &w)
    }
}

fn check_channels<S: Scalar>(op: &'static str, t: &Tensor<S>, c: usize) -> Result<()> {
    if t.len() != c {
        return Err(Error::shape(op, format!("{c} channels"), t.len()));
    }
    Ok(())
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

struct AttnLayout<S> {
    groups: usize,
    group: usize,
    heads: usize,
    width: usize,
    scale: S,
}

impl<S: Scalar> AttnLayout<S> {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Offset of the `group × group` weight block of (group, head).
    fn block(&self, g: usize, h: usize) -> usize {
        (g * self.heads + h) * self.group * self.group
    }

    fn slice<'a>(&self, data: &'a [S], row: usize, h: usize) -> &'a [S] {
        let d = self.head_dim();
        &data[row * self.width + h * d..][..d]
    }

    /// Key/value rows of one group and head in canonical order, so every sum
    /// over keys is independent of the order the rows arrived in.
    fn key_order(&self, k: &[S], v: &[S], g: usize, h: usize) -> Vec<usize> {
        let base = g * self.group;
        let rows: Vec<usize> = (0..self.group).collect();
        canonical_order(&rows, |j| {
            let mut key = self.slice(k, base + j, h).to_vec();
            key.extend_from_slice(self.slice(v, base + j, h));
            key
        })
    }
}

fn attention_weights<S: Scalar>(q: &[S], k: &[S], v: &[S], l: &AttnLayout<S>) -> Vec<S> {
    let gg = l.group * l.group;
    let mut weights = vec![S::zero(); l.groups * l.heads * gg];
    for g in 0..l.groups {
        for h in 0..l.heads {
            let order = l.key_order(k, v, g, h);
            let block = &mut weights[l.block(g, h)..][..gg];
            let base = g * l.group;
            for i in 0..l.group {
                let qi = l.slice(q, base + i, h);
                let row = &mut block[i * l.group..(i + 1) * l.group];
                for j in 0..l.group {
                    row[j] = dot(qi, l.slice(k, base + j, h)) * l.scale;
                }
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                }
                let mut total = S::zero();
                for &j in &order {
                    total += row[j];
                }
                row.iter_mut().for_each(|x| *x = *x / total);
            }
        }
    }
    weights
}

fn attention_apply<S: Scalar>(weights: &[S], mask: Option<&[S]>, v: &[S], k: &[S], l: &AttnLayout<S>) -> Vec<S> {
    let d = l.head_dim();
    let gg = l.group * l.group;
    let mut out = vec![S::zero(); l.groups * l.group * l.width];
    for g in 0..l.groups {
        let base = g * l.group;
        for h in 0..l.heads {
            let order = l.key_order(k, v, g, h);
            let off = l.block(g, h);
            for i in 0..l.group {
                let orow = &mut out[(base + i) * l.width + h * d..][..d];
                for &j in &order {
                    let idx = off + i * l.group + j;
                    let a = match mask {
                        Some(m) => weights[idx] * m[idx],
                        None => weights[idx],
                    };
                    axpy(a, l.slice(v, base + j, h), orow);
                }
            }
            debug_assert!(off + gg <= weights.len());
        }
    }
    out
}

fn attention_backward<S: Scalar>(
    grad: &[S],
    weights: &[S],
    mask: Option<&[S]>,
    q: &[S],
    k: &[S],
    v: &[S],
    l: &AttnLayout<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let d = l.head_dim();
    let n = l.groups * l.group;
    let (mut dq, mut dk, mut dv) = (vec![S::zero(); n * l.width], vec![S::zero(); n * l.width], vec![S::zero(); n * l.width]);
    let mut ds = vec![S::zero(); l.group];
    for g in 0..l.groups {
        let base = g * l.group;
        for h in 0..l.heads {
            let off = l.block(g, h);
            for i in 0..l.group {
                let gi = &grad[(base + i) * l.width + h * d..][..d];
                let arow = &weights[off + i * l.group..][..l.group];
                let mrow = mask.map(|m| &m[off + i * l.group..][..l.group]);
                // dA_ij = (dO_i · V_j) * mask_ij; dV_j += (A_ij * mask_ij) dO_i
                let mut inner = S::zero();
                for j in 0..l.group {
                    let m = mrow.map_or(S::one(), |m| m[j]);
                    let da = dot(gi, l.slice(v, base + j, h)) * m;
                    ds[j] = da;
                    inner += da * arow[j];
                    let a = arow[j] * m;
                    if a != S::zero() {
                        axpy(a, gi, &mut dv[(base + j) * l.width + h * d..][..d]);
                    }
                }
                // Softmax backward, then through the scaled logits.
                for j in 0..l.group {
                    let s = arow[j] * (ds[j] - inner) * l.scale;
                    if s == S::zero() {
                        continue;
                    }
                    axpy(s, l.slice(k, base + j, h), &mut dq[(base + i) * l.width + h * d..][..d]);
                    axpy(s, l.slice(q, base + i, h), &mut dk[(base + j) * l.width + h * d..][..d]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Attention weights of one group/head layout without recording anything;
/// exposed for inspection and tests.
pub fn attention_weight_matrix<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, spec: AttentionSpec) -> Vec<S> {
    let layout = AttnLayout {
        groups: q.rows() / spec.group,
        group: spec.group,
        heads: spec.heads,
        width: q.cols(),
        scale: spec.scale.map_or(S::one(), S::from_f64_lossy),
    };
    attention_weights(q.data(), k.data(), v.data(), &layout)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn linear_identity_and_row_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let w = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);

        let x = g.constant(t(&[vec![1.0, 2.0]]));
        let w = g.constant(t(&[vec![1.0], vec![1.0]]));
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(x, w), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
        ]));
        let y = g.softmax_rows(x).unwrap();
        let out = g.value(y);
        for j in 0..3 {
            assert!((out.at(0, j) - 1.0 / 3.0).abs() < 1e-12);
            assert!((out.at(1, j) - (j + 1) as f64 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_is_bitwise_invariant_for_constant_rows() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_rows(&[vec![0.0f32; 3]]));
        let b = g.constant(Tensor::from_rows(&[vec![123.25f32; 3]]));
        let ya = g.softmax_rows(a).unwrap();
        let yb = g.softmax_rows(b).unwrap();
        assert_eq!(g.value(ya).data(), g.value(yb).data());
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![-1.0, 0.0, 2.0]]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn pool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![1.0, 4.0], vec![3.0, 2.0]]));
        let seg = Arc::new(Segments::contiguous(1, 2));
        let mx = g.segment_pool(x, seg.clone(), PoolKind::Max).unwrap();
        let mn = g.segment_pool(x, seg, PoolKind::Mean).unwrap();
        assert_eq!(g.value(mx).data(), &[3.0, 4.0]);
        assert_eq!(g.value(mn).data(), &[2.0, 3.0]);

        let one = g.constant(t(&[vec![5.0, -1.0]]));
        let seg = Arc::new(Segments::contiguous(1, 1));
        let mx = g.segment_pool(one, seg.clone(), PoolKind::Max).unwrap();
        let mn = g.segment_pool(one, seg, PoolKind::Mean).unwrap();
        assert_eq!(g.value(mx).data(), &[5.0, -1.0]);
        assert_eq!(g.value(mn).data(), &[5.0, -1.0]);
    }

    #[test]
    fn pool_rejects_empty_segment() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[0, 2]));
        let seg = Arc::new(Segments::from_lists(0, &[vec![]]));
        assert!(g.segment_pool(x, seg, PoolKind::Max).is_err());
    }

    #[test]
    fn max_pool_gradient_goes_to_first_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[vec![2.0], vec![2.0], vec![1.0]]));
        let seg = Arc::new(Segments::contiguous(1, 3));
        let y = g.segment_pool(x, seg, PoolKind::Max).unwrap();
        let loss = g.mean_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[100_000, 1], 1.0));
        let same = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let mean = g.value(y).sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn batch_norm_zero_variance_and_column_means() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![3.0, -2.0], vec![3.0, -2.0], vec![3.0, -2.0]]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..5.0)).collect();
        let x = g.constant(Tensor::new(vec![8, 4], data).unwrap());
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        for j in 0..4 {
            let mean: f64 = (0..8).map(|i| g.value(y).at(i, j)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
        }

        let one_row = g.constant(Tensor::zeros(&[1, 4]));
        assert!(g.batch_norm_train(one_row, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_eval_identity_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![0.5, -1.5], vec![2.0, 3.0]]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.batch_norm_eval(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5 * 3.0);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![1e308, 1e308]]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn attention_rows_are_stochastic_and_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, c) = (5, 4);
        let rand_t = |rng: &mut ChaCha8Rng| {
            Tensor::<f64>::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (q, k, v) = (rand_t(&mut rng), rand_t(&mut rng), rand_t(&mut rng));
        let spec = AttentionSpec {
            group: n,
            heads: 2,
            scale: None,
            dropout: 0.0,
        };
        let w = attention_weight_matrix(&q, &k, &v, spec);
        for row in w.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let perm = [3usize, 0, 4, 2, 1];
        let permute = |t: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>());
        let mut g = Graph::<f64>::new();
        let (qa, ka, va) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let ya = g.attention(qa, ka, va, spec, &mut rng).unwrap();
        let (qb, kb, vb) = (g.constant(permute(&q)), g.constant(permute(&k)), g.constant(permute(&v)));
        let yb = g.attention(qb, kb, vb, spec, &mut rng).unwrap();
        assert_eq!(&permute(g.value(ya)), g.value(yb));
    }
}
