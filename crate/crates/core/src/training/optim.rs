//! Adam and SGD with per-epoch learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected adam or sgd)"))),
        }
    }
}

/// Learning rate as a function of the number of completed epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    StepDecay { gamma: f64, every: usize },
    Cosine { t_max: usize, lr_min: f64 },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::StepDecay { gamma, every } => base * gamma.powi((epoch / every.max(1)) as i32),
            Schedule::Cosine { t_max, lr_min } => {
                let t = epoch.min(t_max) as f64 / t_max.max(1) as f64;
                lr_min + (base - lr_min) * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant => Ok(()),
            Schedule::StepDecay { gamma, every } => {
                if every == 0 || !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::Config("step_decay needs gamma > 0 and every >= 1".into()));
                }
                Ok(())
            }
            Schedule::Cosine { t_max, lr_min } => {
                if t_max == 0 || !(lr_min >= 0.0 && lr_min.is_finite()) {
                    return Err(Error::Config("cosine needs t_max >= 1 and lr_min >= 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// Text form used in config files: `constant`, `step_decay(0.5, 10)`,
/// `cosine(150, 0.0001)`.
impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => write!(f, "constant"),
            Schedule::StepDecay { gamma, every } => write!(f, "step_decay({gamma}, {every})"),
            Schedule::Cosine { t_max, lr_min } => write!(f, "cosine({t_max}, {lr_min})"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "constant" {
            return Ok(Schedule::Constant);
        }
        let bad = || Error::Config(format!("cannot parse schedule {s:?}"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').map(str::trim).collect();
        if args.len() != 2 {
            return Err(bad());
        }
        let sched = match name.trim() {
            "step_decay" => Schedule::StepDecay {
                gamma: args[0].parse().map_err(|_| bad())?,
                every: args[1].parse().map_err(|_| bad())?,
            },
            "cosine" => Schedule::Cosine {
                t_max: args[0].parse().map_err(|_| bad())?,
                lr_min: args[1].parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        sched.validate()?;
        Ok(sched)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum,
            ..Self::adam(lr)
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay must be >= 0".into()));
        }
        self.schedule.validate()
    }
}

/// Optimizer with its moment buffers. Moments are indexed like the
/// parameter store; non-trainable entries keep empty placeholders.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    pub cfg: OptimizerConfig,
    pub lr: f64,
    pub step: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let shape = |trainable: bool, t: &Tensor<S>| {
            if trainable {
                Tensor::zeros(t.shape())
            } else {
                Tensor::zeros(&[0])
            }
        };
        let first: Vec<Tensor<S>> = store.iter().map(|(_, p)| shape(p.trainable, &p.value)).collect();
        let second = match cfg.kind {
            OptimizerKind::Adam => first.clone(),
            OptimizerKind::Sgd => store.iter().map(|_| Tensor::zeros(&[0])).collect(),
        };
        Ok(Self {
            lr: cfg.lr,
            cfg,
            step: 0,
            first,
            second,
        })
    }

    /// Apply the schedule for the given number of completed epochs.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.cfg.schedule.lr_at(self.cfg.lr, epoch);
    }

    /// One update from the gradients held in the store.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::shape("optimizer_step", self.first.len(), store.len()));
        }
        self.step += 1;
        let lr = self.lr;
        let wd = self.cfg.weight_decay;
        let (b1, b2) = self.cfg.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let eps = self.cfg.eps;
        let mom = self.cfg.momentum;
        let kind = self.cfg.kind;
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = self.first[i].data_mut();
            match kind {
                OptimizerKind::Adam => {
                    let v = self.second[i].data_mut();
                    for j in 0..values.len() {
                        let w = values[j].as_f64();
                        let g = grads[j].as_f64() + wd * w;
                        let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                        let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                        m[j] = S::from_f64_lossy(mj);
                        v[j] = S::from_f64_lossy(vj);
                        let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                        values[j] = S::from_f64_lossy(w - update);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..values.len() {
                        let w = values[j].as_f64();
                        let g = grads[j].as_f64() + wd * w;
                        let b = mom * m[j].as_f64() + g;
                        m[j] = S::from_f64_lossy(b);
                        values[j] = S::from_f64_lossy(w - lr * b);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment tensors with stable names, for checkpoints.
    pub fn state_tensors(&self, store: &ParamStore<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            out.push((format!("opt.m.{}", p.name), self.first[id.index()].clone()));
            if self.cfg.kind == OptimizerKind::Adam {
                out.push((format!("opt.v.{}", p.name), self.second[id.index()].clone()));
            }
        }
        out
    }

    /// Restore moments saved by `state_tensors`.
    pub fn load_state(&mut self, store: &ParamStore<S>, lookup: impl Fn(&str) -> Option<Tensor<S>>, step: u64) -> Result<()> {
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let mut slots = vec![("m", &mut self.first[id.index()])];
            if self.cfg.kind == OptimizerKind::Adam {
                slots.push(("v", &mut self.second[id.index()]));
            }
            for (tag, slot) in slots {
                let name = format!("opt.{tag}.{}", p.name);
                let t = lookup(&name).ok_or_else(|| Error::Config(format!("missing optimizer state {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::shape("load_state", format!("{:?}", p.value.shape()), format!("{:?}", t.shape())));
                }
                *slot = t;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f32, g: f32) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w)).unwrap();
        store.get_mut(id).grad = Tensor::scalar(g);
        store
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = one_param(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), &store).unwrap();
        opt.step(&mut store).unwrap();
        let w = store.by_name("w").unwrap().value.data()[0] as f64;
        assert!((w - 0.999).abs() < 1e-6, "{w}");
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptimizerConfig::adam(0.1), OptimizerConfig::sgd(0.1, 0.9)] {
            let mut store = one_param(0.37, 0.0);
            let mut opt = Optimizer::new(cfg, &store).unwrap();
            for _ in 0..5 {
                opt.step(&mut store).unwrap();
            }
            assert_eq!(store.by_name("w").unwrap().value.data()[0], 0.37);
        }
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut store = one_param(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.5), &store).unwrap();
        opt.step(&mut store).unwrap();
        opt.step(&mut store).unwrap();
        // buffers 1 then 1.5
        let w = store.by_name("w").unwrap().value.data()[0] as f64;
        assert!((w - 0.75).abs() < 1e-6);
    }

    #[test]
    fn schedules() {
        let s = Schedule::StepDecay { gamma: 0.5, every: 10 };
        assert_eq!(s.lr_at(1e-4, 9), 1e-4);
        assert_eq!(s.lr_at(1e-4, 10), 0.5e-4);
        assert_eq!(s.lr_at(1e-4, 25), 0.25e-4);
        let c = Schedule::Cosine { t_max: 150, lr_min: 0.0 };
        assert_eq!(c.lr_at(1.0, 0), 1.0);
        assert!((c.lr_at(1.0, 75) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(1.0, 150).abs() < 1e-12);
        assert_eq!(Schedule::Constant.lr_at(0.3, 1000), 0.3);
    }

    #[test]
    fn schedule_text_round_trip() {
        for s in [
            Schedule::Constant,
            Schedule::StepDecay { gamma: 0.5, every: 10 },
            Schedule::Cosine { t_max: 150, lr_min: 1e-4 },
        ] {
            assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        }
        assert!("step_decay(0.5)".parse::<Schedule>().is_err());
        assert!("linear(1, 2)".parse::<Schedule>().is_err());
        assert!("step_decay(0.5, 0)".parse::<Schedule>().is_err());
    }

    #[test]
    fn invalid_learning_rate() {
        let store = ParamStore::<f32>::new();
        assert!(Optimizer::new(OptimizerConfig::adam(0.0), &store).is_err());
        assert!(Optimizer::new(OptimizerConfig::adam(f64::NAN), &store).is_err());
    }
}
