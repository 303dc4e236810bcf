//! SFB-net assembly: convolutional encoder/decoder, gated skips, bottleneck
//! transformer and deep-supervision heads.

mod checkpoint;
mod cost;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cost::{count_flops, count_parameters, measure_throughput, CostReport, Throughput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::BottleneckTransformer;
use crate::engine::{concat_channels, softmax_lastdim, permute, ParamRegistry, Parameter, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvBlock, ConvTranspose2d, Ctx, Module};
use crate::sfb::{GateMode, SecondStage, SwinFilteringBlock};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSfb,
    NoTrans,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSfb => "no_sfb",
            Variant::NoTrans => "no_trans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Variant::Full),
            "no_sfb" => Ok(Variant::NoSfb),
            "no_trans" => Ok(Variant::NoTrans),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub classes: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub downsamples: usize,
    pub window: usize,
    /// Heads per skip level, shallowest first.
    pub sfb_heads: Vec<usize>,
    pub bottleneck_heads: usize,
    pub mlp_ratio: usize,
    pub use_sfb: bool,
    pub use_bottleneck_transformer: bool,
    pub sfb_second_stage: SecondStage,
    pub sfb_gate: GateMode,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size configuration: 224x224 input, 64 base filters, 512 at the bottleneck.
    pub fn paper() -> Self {
        Self {
            input_size: [224, 224],
            in_channels: 1,
            classes: 4,
            base_channels: 64,
            max_channels: 512,
            downsamples: 3,
            window: 7,
            sfb_heads: vec![2, 4, 8],
            bottleneck_heads: 16,
            mlp_ratio: 4,
            use_sfb: true,
            use_bottleneck_transformer: true,
            sfb_second_stage: SecondStage::CrossDecoder,
            sfb_gate: GateMode::Learned,
            precision: Precision::F32,
            seed: 0,
        }
    }

    /// Desk-scale configuration used for overfitting runs.
    pub fn tiny() -> Self {
        Self {
            input_size: [32, 32],
            base_channels: 8,
            window: 4,
            ..Self::paper()
        }
    }

    /// Smallest configuration exercised by gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            input_size: [8, 8],
            base_channels: 4,
            window: 2,
            precision: Precision::F64,
            ..Self::paper()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full => {
                self.use_sfb = true;
                self.use_bottleneck_transformer = true;
            }
            Variant::NoSfb => {
                self.use_sfb = false;
                self.use_bottleneck_transformer = true;
            }
            Variant::NoTrans => {
                self.use_sfb = true;
                self.use_bottleneck_transformer = false;
            }
        }
        self
    }

    /// Channel count at encoder level `l` (level `downsamples` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    /// Spatial size at level `l`.
    pub fn spatial(&self, level: usize) -> (usize, usize) {
        (self.input_size[0] >> level, self.input_size[1] >> level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.downsamples != 3 {
            return bad(format!(
                "downsamples must be 3 (three supervised decoder levels), got {}",
                self.downsamples
            ));
        }
        let f = 1 << self.downsamples;
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!("input size {h}x{w} is not divisible by {f}"));
        }
        if self.in_channels == 0 || self.classes < 2 || self.base_channels == 0 {
            return bad("in_channels, base_channels must be positive and classes >= 2".into());
        }
        if self.max_channels < self.base_channels {
            return bad("max_channels is smaller than base_channels".into());
        }
        if self.window == 0 {
            return bad("window size must be positive".into());
        }
        if self.sfb_heads.len() != self.downsamples {
            return bad(format!(
                "sfb_heads needs {} entries, got {}",
                self.downsamples,
                self.sfb_heads.len()
            ));
        }
        for (l, &heads) in self.sfb_heads.iter().enumerate() {
            if heads == 0 || self.channels(l) % heads != 0 {
                return bad(format!(
                    "level {l}: {} channels not divisible into {heads} sfb heads",
                    self.channels(l)
                ));
            }
        }
        let cb = self.channels(self.downsamples);
        if self.bottleneck_heads == 0 || cb % self.bottleneck_heads != 0 {
            return bad(format!(
                "bottleneck: {cb} channels not divisible into {} heads",
                self.bottleneck_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

pub enum Bottleneck<T> {
    Transformer(BottleneckTransformer<T>),
    ConvBlock(ConvBlock<T>),
}

pub struct EncoderLevel<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

pub struct DecoderLevel<T> {
    pub level: usize,
    pub up: ConvTranspose2d<T>,
    pub sfb: Option<SwinFilteringBlock<T>>,
    pub block: ConvBlock<T>,
    pub head: Conv2d<T>,
}

/// Logits at full, half and quarter resolution.
pub struct Outputs<T> {
    pub full: Var<T>,
    pub half: Var<T>,
    pub quarter: Var<T>,
}

impl<T: Scalar> Outputs<T> {
    pub fn as_array(&self) -> [&Var<T>; 3] {
        [&self.full, &self.half, &self.quarter]
    }
}

pub struct SfbNet<T> {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLevel<T>>,
    pub bottleneck: Bottleneck<T>,
    /// Deepest level first.
    pub decoder: Vec<DecoderLevel<T>>,
}

impl<T: Scalar> SfbNet<T> {
    pub fn forward(&mut self, image: &Var<T>, ctx: Ctx) -> Result<Outputs<T>> {
        let cfg = &self.config;
        let (h, w) = (cfg.input_size[0], cfg.input_size[1]);
        match *image.shape() {
            [_, c, ih, iw] if c == cfg.in_channels && (ih, iw) == (h, w) => {}
            _ => {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "image {:?} vs configured [N, {}, {}, {}]",
                        image.shape(),
                        cfg.in_channels,
                        h,
                        w
                    ),
                ))
            }
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = image.clone();
        for level in &mut self.encoder {
            for block in &mut level.blocks {
                x = block.forward(&x, ctx)?;
            }
            skips.push(x.clone());
        }
        let mut d = match &mut self.bottleneck {
            Bottleneck::Transformer(t) => t.forward(&x, ctx)?,
            Bottleneck::ConvBlock(b) => b.forward(&x, ctx)?,
        };
        let mut logits = Vec::with_capacity(self.decoder.len());
        for dec in &mut self.decoder {
            let up = dec.up.forward(&d, ctx)?;
            let skip = &skips[dec.level];
            let skip = match &mut dec.sfb {
                Some(sfb) => sfb.forward(skip, &up, ctx)?,
                None => skip.clone(),
            };
            d = dec.block.forward(&concat_channels(&skip, &up)?, ctx)?;
            logits.push(dec.head.forward(&d, ctx)?);
        }
        let full = logits.pop().expect("three decoder levels");
        let half = logits.pop().expect("three decoder levels");
        let quarter = logits.pop().expect("three decoder levels");
        Ok(Outputs {
            full,
            half,
            quarter,
        })
    }

    /// Softmax class probabilities at full resolution, `[N, classes, H, W]`,
    /// computed in eval mode.
    pub fn predict_probs(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(&Var::constant(image.clone()), Ctx::EVAL)?;
        channel_softmax(out.full.value())
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    /// Replaces every parameter value with that of a same-named parameter
    /// in `other` when shapes match. Returns the number copied.
    pub fn copy_matching_params_from(&mut self, other: &SfbNet<T>) -> usize {
        let mut src = std::collections::HashMap::new();
        other.visit_params(&mut |p| {
            src.insert(p.name.clone(), p.value.clone());
        });
        let mut copied = 0;
        self.visit_params_mut(&mut |p| {
            if let Some(v) = src.get(&p.name) {
                if v.shape() == p.value.shape() {
                    p.value = v.clone();
                    copied += 1;
                }
            }
        });
        copied
    }
}

/// Softmax over axis 1 of an NCHW tensor.
pub fn channel_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let x = Var::constant(logits.clone());
    let moved = permute(&x, &[0, 2, 3, 1])?;
    let p = softmax_lastdim(&moved);
    Ok(permute(&p, &[0, 3, 1, 2])?.value().clone())
}

impl<T: Scalar> Module<T> for SfbNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for level in &self.encoder {
            for b in &level.blocks {
                b.visit_params(f);
            }
        }
        match &self.bottleneck {
            Bottleneck::Transformer(t) => t.visit_params(f),
            Bottleneck::ConvBlock(b) => b.visit_params(f),
        }
        for d in &self.decoder {
            d.up.visit_params(f);
            if let Some(s) = &d.sfb {
                s.visit_params(f);
            }
            d.block.visit_params(f);
            d.head.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for level in &mut self.encoder {
            for b in &mut level.blocks {
                b.visit_params_mut(f);
            }
        }
        match &mut self.bottleneck {
            Bottleneck::Transformer(t) => t.visit_params_mut(f),
            Bottleneck::ConvBlock(b) => b.visit_params_mut(f),
        }
        for d in &mut self.decoder {
            d.up.visit_params_mut(f);
            if let Some(s) = &mut d.sfb {
                s.visit_params_mut(f);
            }
            d.block.visit_params_mut(f);
            d.head.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for level in &self.encoder {
            for b in &level.blocks {
                b.visit_buffers(f);
            }
        }
        if let Bottleneck::ConvBlock(b) = &self.bottleneck {
            b.visit_buffers(f);
        }
        for d in &self.decoder {
            if let Some(s) = &d.sfb {
                s.visit_buffers(f);
            }
            d.block.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for level in &mut self.encoder {
            for b in &mut level.blocks {
                b.visit_buffers_mut(f);
            }
        }
        if let Bottleneck::ConvBlock(b) = &mut self.bottleneck {
            b.visit_buffers_mut(f);
        }
        for d in &mut self.decoder {
            if let Some(s) = &mut d.sfb {
                s.visit_buffers_mut(f);
            }
            d.block.visit_buffers_mut(f);
        }
    }
}

/// Builds a freshly initialized network; all randomness derives from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<SfbNet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reg = ParamRegistry::new();
    let depth = config.downsamples;

    let mut encoder = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        let cin = if l == 0 {
            config.in_channels
        } else {
            config.channels(l - 1)
        };
        let c = config.channels(l);
        let stride = if l == 0 { 1 } else { 2 };
        let blocks = vec![
            ConvBlock::new(&mut reg, &format!("enc{l}.block0"), cin, c, stride, &mut rng),
            ConvBlock::new(&mut reg, &format!("enc{l}.block1"), c, c, 1, &mut rng),
        ];
        encoder.push(EncoderLevel { blocks });
    }

    let cb = config.channels(depth);
    let (bh, bw) = config.spatial(depth);
    let bottleneck = if config.use_bottleneck_transformer {
        Bottleneck::Transformer(BottleneckTransformer::new(
            &mut reg,
            "bottleneck.transformer",
            cb,
            bh * bw,
            config.bottleneck_heads,
            config.mlp_ratio,
            &mut rng,
        )?)
    } else {
        Bottleneck::ConvBlock(ConvBlock::new(&mut reg, "bottleneck.block", cb, cb, 1, &mut rng))
    };

    let mut decoder = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let (c_in, c) = (config.channels(l + 1), config.channels(l));
        let up = ConvTranspose2d::new(&mut reg, &format!("dec{l}.up"), c_in, c, 2, &mut rng);
        let sfb = if config.use_sfb {
            Some(SwinFilteringBlock::new(
                &mut reg,
                &format!("dec{l}.sfb"),
                c,
                config.sfb_heads[l],
                config.window,
                config.sfb_second_stage,
                config.sfb_gate,
                &mut rng,
            )?)
        } else {
            None
        };
        let block = ConvBlock::new(&mut reg, &format!("dec{l}.block"), 2 * c, c, 1, &mut rng);
        let head = Conv2d::new(&mut reg, &format!("dec{l}.head"), c, config.classes, 1, 1, 0, &mut rng);
        decoder.push(DecoderLevel {
            level: l,
            up,
            sfb,
            block,
            head,
        });
    }

    Ok(SfbNet {
        config: config.clone(),
        encoder,
        bottleneck,
        decoder,
    })
}
