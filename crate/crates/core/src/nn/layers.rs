use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::graph::Var;
use crate::nn::params::{ParamBuilder, ParamId};
use crate::nn::session::Session;
use crate::nn::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// The nonlinearity used everywhere.
pub fn activation<S: Scalar>(s: &mut Session<'_, S>, x: Var) -> Result<Var> {
    s.graph.relu(x)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let w = pb.fan_in_uniform("w", &[cin, cout], cin)?;
        let b = if bias { Some(pb.constant("b", &[cout], 0.0)?) } else { None };
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.graph.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
            running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer("running_var", &[channels], 1.0)?,
            channels,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_train() {
            let (y, mean, var) = s.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let n = s.graph.shape(x)[0] as f64;
            let unbiased = n / (n - 1.0);
            let store = s.store_mut();
            let rm = store.get_mut(self.running_mean).value.data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = S::from_f64_lossy((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * m);
            }
            let rv = store.get_mut(self.running_var).value.data_mut();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = S::from_f64_lossy((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * unbiased);
            }
            Ok(y)
        } else {
            let mean = s.store().get(self.running_mean).value.data().to_vec();
            let var = s.store().get(self.running_var).value.data().to_vec();
            s.graph.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

/// Per-row linear map followed by batch norm and the activation.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Pointwise {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(&mut pb.scope("linear"), cin, cout, true)?,
            bn: BatchNorm::new(&mut pb.scope("bn"), cout)?,
        })
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let y = self.linear.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        activation(s, y)
    }
}

/// 3×3×3 convolution over dense batched grids, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3d {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            w: pb.fan_in_uniform("w", &[27, cin, cout], 27 * cin)?,
            b: pb.constant("b", &[cout], 0.0)?,
            cin,
            cout,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        x: Var,
        res: usize,
        active: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.graph.conv3d(x, w, Some(b), res, active)
    }

    /// Test fixture: the centre tap maps channel `i` to channel `i`, every
    /// other tap is zero.
    pub fn set_identity<S: Scalar>(&self, store: &mut crate::nn::ParamStore<S>) -> Result<()> {
        if self.cin != self.cout {
            return Err(Error::invalid("identity conv needs cin == cout"));
        }
        let mut w = Tensor::zeros(&[27, self.cin, self.cout]);
        let centre = 13 * self.cin * self.cout;
        for i in 0..self.cin {
            w.data_mut()[centre + i * self.cout + i] = S::one();
        }
        store.get_mut(self.w).value = w;
        Ok(())
    }
}
