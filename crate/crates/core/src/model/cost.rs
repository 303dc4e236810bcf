//! Parameter, FLOP and throughput accounting.
//!
//! FLOP conventions: one multiply-accumulate is 2 FLOPs; a bias add is one
//! FLOP per output element; batch and layer normalization cost 4 FLOPs per
//! element; gelu, sigmoid, residual adds, Hadamard products, logit scaling
//! and bias/mask additions cost 1 FLOP per element; softmax costs 3 FLOPs
//! per element. Data movement (window partitioning, permutes, concat) is free.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Bottleneck, SfbNet};
use crate::attention::WindowLayout;
use crate::engine::{Scalar, Tensor};
use crate::error::Result;
use crate::layers::{Conv2d, ConvBlock};
use crate::sfb::{GateMode, SwinFilteringBlock};

/// Cost summary for one model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: usize,
    pub flops: f64,
    pub images_per_sec: f64,
    pub batch: usize,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops / 1e9
    }
}

pub fn count_parameters<T: Scalar>(model: &SfbNet<T>) -> usize {
    model.num_parameters()
}

/// Running FLOP and activation tally.
#[derive(Default)]
struct Tally {
    flops: f64,
    /// Output elements produced, a proxy for activation memory.
    elements: f64,
}

impl Tally {
    fn elementwise(&mut self, per_elem: f64, n: f64) {
        self.flops += per_elem * n;
        self.elements += n;
    }

    fn conv(&mut self, conv: &Conv2d<impl Scalar>, ho: usize, wo: usize) {
        let (cin, cout, k) = (conv.in_channels(), conv.out_channels(), conv.kernel());
        let out = (cout * ho * wo) as f64;
        self.flops += 2.0 * (cin * k * k) as f64 * out + out;
        self.elements += out;
    }

    fn linear(&mut self, d_in: usize, d_out: usize, tokens: usize) {
        let out = (d_out * tokens) as f64;
        self.flops += 2.0 * d_in as f64 * out + out;
        self.elements += out;
    }

    /// Scores, scale, bias, optional mask, softmax and weighted sum for
    /// `groups` independent attention problems of `tokens` tokens.
    fn attention(&mut self, groups: usize, tokens: usize, channels: usize, heads: usize, bias: bool, mask: bool) {
        let scores = (groups * heads * tokens * tokens) as f64;
        let matmul = 2.0 * (groups * tokens * tokens * channels) as f64;
        self.flops += 2.0 * matmul;
        let mut per = 1.0 + 3.0;
        if bias {
            per += 1.0;
        }
        if mask {
            per += 1.0;
        }
        self.flops += per * scores;
        self.elements += 2.0 * scores + (groups * tokens * channels) as f64;
    }

    fn conv_block(&mut self, block: &ConvBlock<impl Scalar>, ho: usize, wo: usize) {
        let n = (block.conv1.out_channels() * ho * wo) as f64;
        self.conv(&block.conv1, ho, wo);
        self.elementwise(4.0 + 1.0, n);
        self.conv(&block.conv2, ho, wo);
        self.elementwise(4.0 + 1.0, n);
    }

    fn sfb(&mut self, sfb: &SwinFilteringBlock<impl Scalar>, h: usize, w: usize) {
        let c = sfb.channels;
        let n = (c * h * w) as f64;
        if sfb.gate_mode == GateMode::ForcedOpen {
            self.elementwise(1.0, n);
            return;
        }
        let plain = WindowLayout::new(h, w, sfb.window).expect("validated window");
        let shifted = WindowLayout::shifted(h, w, sfb.window).expect("validated window");
        for layout in [&plain, &shifted] {
            // projections run on the unpadded map, attention on padded windows
            for _ in 0..3 {
                self.linear(c, c, h * w);
            }
            self.attention(
                layout.num_windows(),
                layout.tokens_per_window(),
                c,
                sfb.heads,
                true,
                !layout.attention_mask().is_all_zero(),
            );
        }
        self.conv(&sfb.gate_conv, h, w);
        // batch norm, sigmoid, Hadamard product
        self.elementwise(4.0 + 1.0 + 1.0, n);
    }
}

fn tally<T: Scalar>(model: &SfbNet<T>, batch: usize) -> Tally {
    let cfg = &model.config;
    let mut t = Tally::default();
    for (l, level) in model.encoder.iter().enumerate() {
        let (h, w) = cfg.spatial(l);
        for b in &level.blocks {
            t.conv_block(b, h, w);
        }
    }
    let depth = cfg.downsamples;
    let (bh, bw) = cfg.spatial(depth);
    match &model.bottleneck {
        Bottleneck::Transformer(tr) => {
            let (c, n) = (tr.channels, tr.tokens);
            let e = (c * n) as f64;
            t.elementwise(1.0, e); // position embedding
            t.elementwise(4.0, e); // ln1
            for _ in 0..3 {
                t.linear(c, c, n);
            }
            t.attention(1, n, c, tr.heads, false, false);
            t.linear(c, c, n);
            t.elementwise(1.0, e); // residual
            t.elementwise(4.0, e); // ln2
            t.linear(c, tr.fc1.d_out(), n);
            t.elementwise(1.0, (tr.fc1.d_out() * n) as f64); // gelu
            t.linear(tr.fc1.d_out(), c, n);
            t.elementwise(1.0, e); // residual
        }
        Bottleneck::ConvBlock(b) => t.conv_block(b, bh, bw),
    }
    for dec in &model.decoder {
        let (h, w) = cfg.spatial(dec.level);
        let (hin, win) = cfg.spatial(dec.level + 1);
        let (cin, cout) = (
            dec.up.weight.value.shape()[0],
            dec.up.weight.value.shape()[1],
        );
        let k = dec.up.stride;
        let out = (cout * h * w) as f64;
        t.flops += 2.0 * (cin * cout * k * k * hin * win) as f64 + out;
        t.elements += out;
        if let Some(sfb) = &dec.sfb {
            t.sfb(sfb, h, w);
        }
        t.conv_block(&dec.block, h, w);
        t.conv(&dec.head, h, w);
    }
    t.flops *= batch as f64;
    t.elements *= batch as f64;
    t
}

/// Analytic forward FLOPs for `batch` images.
pub fn count_flops<T: Scalar>(model: &SfbNet<T>, batch: usize) -> f64 {
    tally(model, batch).flops
}

/// Estimated activation bytes for one image in inference.
pub fn activation_bytes_per_image<T: Scalar>(model: &SfbNet<T>) -> f64 {
    tally(model, 1).elements * std::mem::size_of::<T>() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub images_per_sec: f64,
    pub batch: usize,
    pub repeats: usize,
    pub seconds: f64,
}

/// Mean inference throughput over `repeats` timed passes (after one warm-up
/// pass) at the largest batch whose estimated activations fit in
/// `memory_budget` bytes, capped at `max_batch`.
pub fn measure_throughput<T: Scalar>(
    model: &mut SfbNet<T>,
    repeats: usize,
    memory_budget: usize,
    max_batch: usize,
) -> Result<Throughput> {
    let per_image = activation_bytes_per_image(model).max(1.0);
    let batch = ((memory_budget as f64 / per_image).floor() as usize).clamp(1, max_batch.max(1));
    let [h, w] = model.config.input_size;
    let shape = [batch, model.config.in_channels, h, w];
    let image = Tensor::from_fn(&shape, |i| T::lit(((i * 2654435761) % 1000) as f64 / 500.0 - 1.0));
    model.predict_probs(&image)?;
    let repeats = repeats.max(1);
    let start = Instant::now();
    for _ in 0..repeats {
        std::hint::black_box(model.predict_probs(&image)?);
    }
    let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(Throughput {
        images_per_sec: (batch * repeats) as f64 / seconds,
        batch,
        repeats,
        seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamRegistry;
    use rand::SeedableRng;

    #[test]
    fn single_linear_costs_fourteen_flops() {
        let mut t = Tally::default();
        t.linear(3, 2, 1);
        assert_eq!(t.flops, 14.0);
    }

    #[test]
    fn single_conv_cost() {
        let mut reg = ParamRegistry::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(&mut reg, "c", 1, 8, 3, 1, 1, &mut rng);
        let mut t = Tally::default();
        t.conv(&conv, 4, 4);
        assert_eq!(t.flops, (2 * 9 * 8 * 16 + 8 * 16) as f64);
        assert_eq!(conv.weight.numel() + conv.bias.numel(), 80);
    }
}
