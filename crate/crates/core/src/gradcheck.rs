//! Finite-difference gradient checks for every differentiable building block.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_neighborhood_features, Aggregation, CrossAttention, FeatureMode, InnerAttention, MiddleAggregate};
use crate::error::{Error, Result};
use crate::geometry::{devoxelize_rows, three_nn_rows, Point, VoxelMap};
use crate::nn::{Conv3d, Linear, Mode, ParamBuilder, ParamStore, PoolKind, Pointwise, Segments, Session, Tensor, Var};
use crate::vtp::{BatchLayout, Sampling, VBranch, VoxelPlan, VtpBlock, VtpConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-3;
/// Coordinates probed per tensor.
const PROBES: usize = 24;

pub const CHECKS: [&str; 16] = [
    "linear",
    "batch_norm",
    "softmax_rows",
    "relu",
    "pool_max",
    "pool_mean",
    "conv3d",
    "devoxelize_trilinear",
    "interpolate_3nn",
    "inner_self_attention",
    "middle_aggregate",
    "outer_cross_attention",
    "p_branch",
    "v_branch",
    "vtp_forward",
    "cross_entropy",
];

/// A check whose backward pass is wrong on purpose; not part of `all`.
pub const NEGATIVE_CONTROL: &str = "negative_control";

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Forward = Box<dyn Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>>;

struct Case {
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    forward: Forward,
}

const SESSION_SEED: u64 = 99;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= PROBES {
        return (0..len).collect();
    }
    let mut picked: Vec<usize> = (0..PROBES).map(|_| rng.random_range(0..len)).collect();
    picked.sort();
    picked.dedup();
    picked
}

impl Case {
    fn evaluate(&mut self, weights: Option<&Tensor<f64>>) -> Result<(f64, Tensor<f64>, Option<Session<'_, f64>>, Vec<Var>, Var)> {
        let mut s = Session::new(&mut self.store, self.mode, SESSION_SEED);
        let vars: Vec<Var> = self.inputs.iter().map(|t| s.graph.variable(t.clone())).collect();
        let out = (self.forward)(&mut s, &vars)?;
        let shape = s.graph.value(out).clone();
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                random_tensor(&mut rng, shape.shape(), -1.0, 1.0)
            }
        };
        let loss = s.graph.weighted_sum(out, &w)?;
        let value = s.graph.value(loss).data()[0];
        Ok((value, w, Some(s), vars, loss))
    }

    fn loss(&mut self, weights: &Tensor<f64>) -> Result<f64> {
        Ok(self.evaluate(Some(weights))?.0)
    }

    fn run(mut self, name: &str) -> Result<CheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (weights, input_grads, param_grads) = {
            let (_, w, s, vars, loss) = self.evaluate(None)?;
            let s = s.unwrap();
            let grads = s.backward(loss)?;
            let inputs: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
            let params: Vec<(crate::nn::ParamId, Tensor<f64>)> = grads.params().map(|(id, g)| (id, g.clone())).collect();
            (w, inputs, params)
        };
        let mut worst = 0.0f64;
        let mut count = 0;
        for (i, grad) in input_grads.iter().enumerate() {
            let len = self.inputs[i].len();
            for j in probes(len, &mut rng) {
                let orig = self.inputs[i].data()[j];
                self.inputs[i].data_mut()[j] = orig + STEP;
                let up = self.loss(&weights)?;
                self.inputs[i].data_mut()[j] = orig - STEP;
                let down = self.loss(&weights)?;
                self.inputs[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let analytic = grad.as_ref().map_or(0.0, |g| g.data()[j]);
                worst = worst.max(relative_error(analytic, numeric));
                count += 1;
            }
        }
        for (id, grad) in &param_grads {
            for j in probes(grad.len(), &mut rng) {
                let orig = self.store.get(*id).value.data()[j];
                self.store.get_mut(*id).value.data_mut()[j] = orig + STEP;
                let up = self.loss(&weights)?;
                self.store.get_mut(*id).value.data_mut()[j] = orig - STEP;
                let down = self.loss(&weights)?;
                self.store.get_mut(*id).value.data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max(relative_error(grad.data()[j], numeric));
                count += 1;
            }
        }
        Ok(CheckResult {
            name: name.to_string(),
            max_rel_err: worst,
            probes: count,
        })
    }
}

fn builder_case(mode: Mode, inputs: Vec<Tensor<f64>>, forward: Forward) -> Case {
    Case {
        store: ParamStore::new(),
        inputs,
        mode,
        forward,
    }
}

fn with_params<T: 'static>(
    mode: Mode,
    inputs: Vec<Tensor<f64>>,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<T>,
    forward: impl Fn(&T, &mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let module = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    perturb_affine(&mut store, &mut rng);
    Ok(Case {
        store,
        inputs,
        mode,
        forward: Box::new(move |s, v| forward(&module, s, v)),
    })
}

/// Batch-norm affine parameters and biases start at constants; give them
/// random values so their gradients are exercised in general position.
fn perturb_affine(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        let leaf = p.name.rsplit('.').next().unwrap_or("");
        let span = match leaf {
            "gamma" => Some((0.5, 1.5)),
            "beta" | "b" => Some((-0.5, 0.5)),
            "running_mean" => Some((-0.2, 0.2)),
            "running_var" => Some((0.5, 1.5)),
            _ => None,
        };
        if let Some((lo, hi)) = span {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
        }
    }
}

fn case(name: &str) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let rng = &mut rng;
    Ok(match name {
        "linear" => with_params(
            Mode::Train,
            vec![random_tensor(rng, &[3, 4], -1.0, 1.0)],
            |pb| Linear::new(&mut pb.scope("lin"), 4, 2, true),
            |m, s, v| m.forward(s, v[0]),
        )?,
        "batch_norm" => with_params(
            Mode::Train,
            vec![random_tensor(rng, &[8, 4], -2.0, 2.0), random_tensor(rng, &[8, 4], -2.0, 2.0)],
            |pb| {
                Ok((
                    crate::nn::BatchNorm::new(&mut pb.scope("train"), 4)?,
                    crate::nn::BatchNorm::new(&mut pb.scope("eval"), 4)?,
                ))
            },
            |(train, eval), s, v| {
                let a = train.forward(s, v[0])?;
                // The second instance is only ever read with its stored
                // statistics, which the train pass above does not touch.
                let gamma = s.param(eval.gamma);
                let beta = s.param(eval.beta);
                let mean = s.store().get(eval.running_mean).value.data().to_vec();
                let var = s.store().get(eval.running_var).value.data().to_vec();
                let b = s.graph.batch_norm_eval(v[1], gamma, beta, &mean, &var, crate::nn::layers::BN_EPS)?;
                s.graph.concat_cols(&[a, b])
            },
        )?,
        "softmax_rows" => builder_case(
            Mode::Train,
            vec![random_tensor(rng, &[3, 5], -2.0, 2.0)],
            Box::new(|s, v| s.graph.softmax_rows(v[0])),
        ),
        "relu" => {
            let mut x = random_tensor(rng, &[4, 5], 0.1, 1.0);
            x.data_mut().iter_mut().step_by(2).for_each(|v| *v = -*v);
            builder_case(Mode::Train, vec![x], Box::new(|s, v| s.graph.relu(v[0])))
        }
        "pool_max" | "pool_mean" => {
            let kind = if name == "pool_max" { PoolKind::Max } else { PoolKind::Mean };
            builder_case(
                Mode::Train,
                vec![random_tensor(rng, &[12, 3], -1.0, 1.0)],
                Box::new(move |s, v| s.graph.segment_pool(v[0], Arc::new(Segments::contiguous(3, 4)), kind)),
            )
        }
        "conv3d" => {
            let mut x = random_tensor(rng, &[2 * 27, 2], -1.0, 1.0);
            for r in (0..54).step_by(3) {
                x.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
            with_params(
                Mode::Train,
                vec![x],
                |pb| Conv3d::new(&mut pb.scope("conv"), 2, 3),
                |m, s, v| m.forward(s, v[0], 3, None),
            )?
        }
        "devoxelize_trilinear" => {
            let pts = random_points(rng, 10);
            let rows = Arc::new(devoxelize_rows(&VoxelMap::new(&pts, 4)?));
            builder_case(
                Mode::Train,
                vec![random_tensor(rng, &[64, 2], -1.0, 1.0)],
                Box::new(move |s, v| s.graph.sparse_combine(v[0], rows.clone())),
            )
        }
        "interpolate_3nn" => {
            let src = random_points(rng, 5);
            let tgt = random_points(rng, 12);
            let rows = Arc::new(three_nn_rows(&src, &tgt)?);
            builder_case(
                Mode::Train,
                vec![random_tensor(rng, &[5, 3], -1.0, 1.0)],
                Box::new(move |s, v| s.graph.sparse_combine(v[0], rows.clone())),
            )
        }
        "inner_self_attention" => {
            // two neighborhoods of K=5 drawn from 8 points with Cin=3
            let neighbors = Arc::new(vec![0, 1, 2, 3, 4, 5, 6, 7, 2, 5]);
            let centers = Arc::new(vec![0, 0, 0, 0, 0, 5, 5, 5, 5, 5]);
            with_params(
                Mode::Train,
                vec![random_tensor(rng, &[8, 3], -1.0, 1.0)],
                |pb| InnerAttention::new(&mut pb.scope("inner"), FeatureMode::DiffKey.width(3), 8, false),
                move |m, s, v| {
                    let nf = build_neighborhood_features(&mut s.graph, v[0], neighbors.clone(), centers.clone(), FeatureMode::DiffKey)?;
                    m.forward(s, nf, 5)
                },
            )?
        }
        "middle_aggregate" => {
            let input = random_tensor(rng, &[3 * 4, 8], -1.0, 1.0);
            with_params(
                Mode::Train,
                vec![input],
                |pb| {
                    Aggregation::ALL
                        .iter()
                        .map(|&a| MiddleAggregate::new(&mut pb.scope(a.name()), 8, a))
                        .collect::<Result<Vec<_>>>()
                },
                |ms, s, v| {
                    let outs = ms.iter().map(|m| m.forward(s, v[0], 4)).collect::<Result<Vec<_>>>()?;
                    s.graph.concat_cols(&outs)
                },
            )?
        }
        "outer_cross_attention" => with_params(
            Mode::Train,
            vec![random_tensor(rng, &[2 * 6, 4], -1.0, 1.0), random_tensor(rng, &[2 * 6, 8], -1.0, 1.0)],
            |pb| CrossAttention::new(&mut pb.scope("cross"), 4, 8, false),
            |m, s, v| m.forward(s, v[0], v[1], 6),
        )?,
        "p_branch" => with_params(
            Mode::Train,
            vec![random_tensor(rng, &[10, 4], -1.0, 1.0)],
            |pb| Pointwise::new(&mut pb.scope("p"), 4, 8),
            |m, s, v| m.forward(s, v[0]),
        )?,
        "v_branch" => {
            let pts = random_points(rng, 16);
            with_params(
                Mode::Train,
                vec![random_tensor(rng, &[16, 4], -1.0, 1.0)],
                |pb| VBranch::new(&mut pb.scope("v"), 4, 8),
                move |m, s, v| {
                    let layout = BatchLayout::new(vec![&pts]);
                    let plan = VoxelPlan::new(&layout, 4)?;
                    m.forward(s, v[0], &plan)
                },
            )?
        }
        "vtp_forward" => {
            let pts = random_points(rng, 16);
            with_params(
                Mode::Train,
                vec![random_tensor(rng, &[16, 4], -1.0, 1.0)],
                |pb| VtpBlock::new(&mut pb.scope("vtp0"), 4, VtpConfig::new(8, 4, 6, 0.5, 4)),
                move |m, s, v| {
                    let layout = BatchLayout::new(vec![&pts]);
                    m.forward(s, v[0], &layout, Sampling::Seeded)
                },
            )?
        }
        "cross_entropy" => builder_case(
            Mode::Train,
            vec![random_tensor(rng, &[5, 4], -2.0, 2.0)],
            Box::new(|s, v| s.graph.cross_entropy(v[0], &[0, 3, 1, 1, 2])),
        ),
        NEGATIVE_CONTROL => builder_case(
            Mode::Train,
            vec![random_tensor(rng, &[3, 4], 0.1, 1.0)],
            Box::new(|s, v| corrupted_square(&mut s.graph, v[0])),
        ),
        other => return Err(Error::invalid(format!("unknown gradient check {other:?}"))),
    })
}

/// `x²` whose backward reports `1.5 x` instead of `2 x`.
fn corrupted_square(g: &mut crate::nn::Graph<f64>, x: Var) -> Result<Var> {
    let value = g.value(x).map(|v| v * v);
    g.push_op(
        "corrupted_square",
        value,
        &[x],
        Box::new(|args| {
            let d = args
                .grad
                .data()
                .iter()
                .zip(args.inputs[0].data())
                .map(|(g, x)| g * 1.5 * x)
                .collect();
            vec![Some(Tensor::new(args.grad.shape().to_vec(), d).unwrap())]
        }),
    )
}

/// Run one named check.
pub fn run(name: &str) -> Result<CheckResult> {
    case(name)?.run(name)
}

/// Run every registered check (the negative control excluded).
pub fn run_all() -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|n| run(n)).collect()
}
