//! Parameters, layers and the forward-pass context shared by every network.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A trainable tensor with a process-unique identity.
///
/// Clones share the id, which lets a frozen copy and its source be told apart
/// only by how they are bound into a graph (trainable vs constant).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Param<T> {
    #[serde(skip, default = "fresh_id")]
    id: u64,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { id: fresh_id(), value }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Give this parameter (and only this copy) a new identity.
    pub fn reidentify(&mut self) {
        self.id = fresh_id();
    }
}

/// Visits every parameter of a module.
pub trait HasParams<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }
}

/// How a forward pass binds parameters and normalizes activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Parameters become gradient-receiving leaves; otherwise constants.
    pub trainable: bool,
    /// Batch norm uses batch statistics (and reports them for running updates).
    pub batch_stats: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { trainable: true, batch_stats: true };
    /// Trainable weights, running statistics (used while the extractor is frozen but the head trains).
    pub const TRAIN_EVAL_BN: Mode = Mode { trainable: true, batch_stats: false };
    pub const FROZEN: Mode = Mode { trainable: false, batch_stats: false };
}

/// Forward-pass context: the graph plus side outputs collected from batch-norm layers.
pub struct Ctx<'g, T: Scalar> {
    pub g: &'g mut Graph<T>,
    pub mode: Mode,
    /// Batch statistics keyed by batch-norm layer id (training mode only).
    pub bn_updates: HashMap<u64, BatchStats<T>>,
    /// When set, every batch-norm input is recorded in depth order.
    pub capture_bn_inputs: bool,
    pub bn_inputs: Vec<(u64, Var)>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(g: &'g mut Graph<T>, mode: Mode) -> Self {
        Ctx {
            g,
            mode,
            bn_updates: HashMap::new(),
            capture_bn_inputs: false,
            bn_inputs: Vec::new(),
        }
    }

    pub fn bind(&mut self, p: &Param<T>) -> Var {
        if self.mode.trainable {
            self.g.bind_param(p.id, &p.value)
        } else {
            self.g.constant(p.value.clone())
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` weights; bias zero when present.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::rand_uniform(&[outputs, inputs], bound, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[outputs]))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(&self.weight);
        let y = ctx.g.matmul(x, w, false, true)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.bind(b);
                ctx.g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> HasParams<T> for Linear<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (inputs * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: Param::new(Tensor::randn(&[outputs, inputs, kernel, kernel], std, rng)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(&self.weight);
        ctx.g.conv2d(x, w, self.stride, self.pad)
    }
}

impl<T: Scalar> HasParams<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

/// Batch normalization with running estimates (momentum 0.1, eps 1e-5).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BatchNorm<T> {
    #[serde(skip, default = "fresh_id")]
    id: u64,
    pub gamma: Option<Param<T>>,
    pub beta: Option<Param<T>>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        BatchNorm {
            id: fresh_id(),
            gamma: affine.then(|| Param::new(Tensor::full(&[channels], T::one()))),
            beta: affine.then(|| Param::new(Tensor::zeros(&[channels]))),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if ctx.capture_bn_inputs {
            ctx.bn_inputs.push((self.id, x));
        }
        let gamma = self.gamma.as_ref().map(|p| ctx.bind(p));
        let beta = self.beta.as_ref().map(|p| ctx.bind(p));
        let running = (!ctx.mode.batch_stats)
            .then_some((self.running_mean.as_slice(), self.running_var.as_slice()));
        let (y, stats) = ctx.g.batch_norm(x, gamma, beta, running, T::lit(BN_EPS))?;
        if let Some(s) = stats {
            ctx.bn_updates.insert(self.id, s);
        }
        Ok(y)
    }

    /// Exponential-moving-average update from one batch.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(g) = &mut self.gamma {
            f(g);
        }
        if let Some(b) = &mut self.beta {
            f(b);
        }
    }
}

/// Modules holding batch-norm layers.
pub trait HasBatchNorm<T: Scalar> {
    fn visit_bn(&self, f: &mut dyn FnMut(&BatchNorm<T>));
    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>));

    fn apply_bn_updates(&mut self, updates: &HashMap<u64, BatchStats<T>>) {
        self.visit_bn_mut(&mut |bn| {
            if let Some(s) = updates.get(&bn.id) {
                bn.update_running(s);
            }
        });
    }
}
