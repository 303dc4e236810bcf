//! Parameterized layers built on the engine primitives.

use rand::Rng;

use crate::engine::{
    self, batch_norm2d, conv2d, conv_transpose2d, gelu, Init, NormMode, ParamRegistry, Parameter,
    RunningStats, Scalar, Tensor, Var,
};
use crate::error::Result;

/// How a forward pass runs: normalization mode and whether parameter
/// gradients are recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ctx {
    pub train: bool,
    pub track: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx {
        train: true,
        track: true,
    };
    pub const EVAL: Ctx = Ctx {
        train: false,
        track: false,
    };

    pub fn norm_mode(self) -> NormMode {
        if self.train {
            NormMode::Train
        } else {
            NormMode::Eval
        }
    }
}

/// Traversal over learnable parameters and non-learnable state.
pub trait Module<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    /// Running statistics and other persisted state.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}
}

pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Init::HeUniform { fan_in: cin * k * k }.tensor(&[cout, cin, k, k], rng);
        Self {
            weight: Parameter::new(reg, format!("{name}.weight"), w),
            bias: Parameter::new(reg, format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        conv2d(
            x,
            &self.weight.var(ctx.track),
            Some(&self.bias.var(ctx.track)),
            self.stride,
            self.padding,
        )
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub struct ConvTranspose2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = stride;
        let w = Init::HeUniform { fan_in: cin * k * k }.tensor(&[cin, cout, k, k], rng);
        Self {
            weight: Parameter::new(reg, format!("{name}.weight"), w),
            bias: Parameter::new(reg, format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        conv_transpose2d(
            x,
            &self.weight.var(ctx.track),
            Some(&self.bias.var(ctx.track)),
            self.stride,
        )
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running: RunningStats<T>,
    name: String,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(reg, format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Parameter::new(reg, format!("{name}.beta"), Tensor::zeros(&[channels])),
            running: RunningStats::new(channels),
            name: name.to_owned(),
        }
    }

    pub fn forward(&mut self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        let (y, stats) = batch_norm2d(
            x,
            &self.gamma.var(ctx.track),
            &self.beta.var(ctx.track),
            ctx.norm_mode(),
            Some(&self.running),
        )?;
        if let Some(stats) = stats {
            stats.update(&mut self.running);
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &self.running.mean);
        f(&format!("{}.running_var", self.name), &self.running.var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &mut self.running.mean);
        f(&format!("{}.running_var", self.name), &mut self.running.var);
    }
}

pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(reg, format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: Parameter::new(reg, format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        engine::layer_norm(x, &self.gamma.var(ctx.track), &self.beta.var(ctx.track))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Fully connected layer, `weight` is `[d_out, d_in]`.
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Parameter::new(reg, format!("{name}.weight"), init.tensor(&[d_out, d_in], rng)),
            bias: Parameter::new(reg, format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Applies the map to the last axis.
    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        engine::linear(x, &self.weight.var(ctx.track), Some(&self.bias.var(ctx.track)))
    }

    /// Applies the map to the channel axis of an NCHW map (per position).
    pub fn forward_map(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        let w = engine::reshape(
            &self.weight.var(ctx.track),
            &[self.d_out(), self.d_in(), 1, 1],
        )?;
        conv2d(x, &w, Some(&self.bias.var(ctx.track)), 1, 0)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two rounds of 3x3 convolution, batch norm and gelu. The first
/// convolution may be strided to downsample.
pub struct ConvBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(reg, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(reg, &format!("{name}.bn2"), cout),
        }
    }

    pub fn forward(&mut self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        let h = gelu(&self.bn1.forward(&self.conv1.forward(x, ctx)?, ctx)?);
        Ok(gelu(&self.bn2.forward(&self.conv2.forward(&h, ctx)?, ctx)?))
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
    }
}
