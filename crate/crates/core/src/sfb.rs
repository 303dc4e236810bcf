//! Swin filtering block: decoder-guided window cross-attention that
//! produces a sigmoid gate rescaling the encoder skip features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sw_mhsa, w_mhsa, RelPosBias, WindowLayout};
use crate::engine::{dims4, mul, sigmoid, Init, ParamRegistry, Parameter, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Ctx, Linear, Module};

/// Where the shifted-window stage takes its queries and keys from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondStage {
    /// Q, K from the decoder map, V from the first stage's output.
    #[default]
    CrossDecoder,
    /// Q, K and V all from the first stage's output.
    SelfIntermediate,
}

/// How the gate is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// `w = 1` everywhere: the block passes the encoder map through untouched.
    ForcedOpen,
}

/// Intermediate maps of one block application.
pub struct SfbTrace<T> {
    pub out: Var<T>,
    pub gate: Var<T>,
    pub cross_attention: Var<T>,
}

pub struct SwinFilteringBlock<T> {
    pub q1: Linear<T>,
    pub k1: Linear<T>,
    pub v1: Linear<T>,
    pub bias1: RelPosBias<T>,
    pub q2: Linear<T>,
    pub k2: Linear<T>,
    pub v2: Linear<T>,
    pub bias2: RelPosBias<T>,
    pub gate_conv: Conv2d<T>,
    pub gate_bn: BatchNorm2d<T>,
    pub heads: usize,
    pub window: usize,
    pub channels: usize,
    pub second_stage: SecondStage,
    pub gate_mode: GateMode,
}

impl<T: Scalar> SwinFilteringBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        second_stage: SecondStage,
        gate_mode: GateMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: {channels} channels are not divisible into {heads} heads"
            )));
        }
        if window == 0 {
            return Err(Error::Config(format!("{name}: window size must be positive")));
        }
        let init = Init::GlorotUniform {
            fan_in: channels,
            fan_out: channels,
        };
        let mut proj = |reg: &mut ParamRegistry, n: &str| {
            Linear::new(reg, &format!("{name}.{n}"), channels, channels, init, rng)
        };
        let q1 = proj(reg, "q1");
        let k1 = proj(reg, "k1");
        let v1 = proj(reg, "v1");
        let q2 = proj(reg, "q2");
        let k2 = proj(reg, "k2");
        let v2 = proj(reg, "v2");
        let bias1 = RelPosBias::new(reg, &format!("{name}.w_msa"), window, heads, rng);
        let bias2 = RelPosBias::new(reg, &format!("{name}.sw_msa"), window, heads, rng);
        let mut gate_conv = Conv2d::new(reg, &format!("{name}.gate_conv"), channels, channels, 1, 1, 0, rng);
        // zero weights and zero beta: the gate starts at sigmoid(0) = 0.5
        gate_conv.weight.value = Tensor::zeros(gate_conv.weight.value.shape());
        let gate_bn = BatchNorm2d::new(reg, &format!("{name}.gate_bn"), channels);
        Ok(Self {
            q1,
            k1,
            v1,
            bias1,
            q2,
            k2,
            v2,
            bias2,
            gate_conv,
            gate_bn,
            heads,
            window,
            channels,
            second_stage,
            gate_mode,
        })
    }

    /// Computes `F_out = F_enc ⊙ w` and returns the intermediates.
    pub fn forward_traced(&mut self, f_enc: &Var<T>, f_dec: &Var<T>, ctx: Ctx) -> Result<SfbTrace<T>> {
        let (n, c, h, w) = dims4("sfb", f_enc.shape())?;
        let (nd, cd, hd, wd) = dims4("sfb", f_dec.shape())?;
        if (n, h, w) != (nd, hd, wd) {
            return Err(Error::Contract(format!(
                "sfb: encoder map {:?} and decoder map {:?} differ spatially",
                f_enc.shape(),
                f_dec.shape()
            )));
        }
        if c != self.channels || cd != self.channels {
            return Err(Error::shape(
                "sfb",
                format!(
                    "block built for {} channels, got encoder {} / decoder {}",
                    self.channels, c, cd
                ),
            ));
        }
        if self.gate_mode == GateMode::ForcedOpen {
            let gate = Var::constant(Tensor::ones(f_enc.shape()));
            return Ok(SfbTrace {
                out: mul(f_enc, &gate)?,
                cross_attention: gate.clone(),
                gate,
            });
        }
        let layout = WindowLayout::new(h, w, self.window)?;
        let mask = layout.attention_mask();
        let b1 = self.bias1.materialize(ctx)?;
        let inter = w_mhsa(
            &self.q1.forward_map(f_dec, ctx)?,
            &self.k1.forward_map(f_dec, ctx)?,
            &self.v1.forward_map(f_enc, ctx)?,
            self.heads,
            &layout,
            Some(&b1),
            &mask,
        )?
        .out;
        let qk_src = match self.second_stage {
            SecondStage::CrossDecoder => f_dec,
            SecondStage::SelfIntermediate => &inter,
        };
        let b2 = self.bias2.materialize(ctx)?;
        let (ca, _) = sw_mhsa(
            &self.q2.forward_map(qk_src, ctx)?,
            &self.k2.forward_map(qk_src, ctx)?,
            &self.v2.forward_map(&inter, ctx)?,
            self.heads,
            self.window,
            Some(&b2),
        )?;
        let ca = ca.out;
        let gate = sigmoid(&self.gate_bn.forward(&self.gate_conv.forward(&ca, ctx)?, ctx)?);
        Ok(SfbTrace {
            out: mul(f_enc, &gate)?,
            gate,
            cross_attention: ca,
        })
    }

    pub fn forward(&mut self, f_enc: &Var<T>, f_dec: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        Ok(self.forward_traced(f_enc, f_dec, ctx)?.out)
    }
}

impl<T: Scalar> Module<T> for SwinFilteringBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for l in [&self.q1, &self.k1, &self.v1] {
            l.visit_params(f);
        }
        self.bias1.visit_params(f);
        for l in [&self.q2, &self.k2, &self.v2] {
            l.visit_params(f);
        }
        self.bias2.visit_params(f);
        self.gate_conv.visit_params(f);
        self.gate_bn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for l in [&mut self.q1, &mut self.k1, &mut self.v1] {
            l.visit_params_mut(f);
        }
        self.bias1.visit_params_mut(f);
        for l in [&mut self.q2, &mut self.k2, &mut self.v2] {
            l.visit_params_mut(f);
        }
        self.bias2.visit_params_mut(f);
        self.gate_conv.visit_params_mut(f);
        self.gate_bn.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.gate_bn.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.gate_bn.visit_buffers_mut(f);
    }
}
