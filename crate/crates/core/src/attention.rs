//! Windowed and shifted-window multi-head attention, relative position
//! bias, and the global transformer layer used at the bottleneck.

use std::rc::Rc;

use rand::Rng;

use crate::engine::{
    add, add_bcast, add_const, bmm, dims4, gather, gelu, ops::ZERO_FILL, permute, reshape,
    scale, softmax_lastdim, Init, ParamRegistry, Parameter, Scalar, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::layers::{Ctx, LayerNorm, Linear, Module};

/// Additive logit for blocked attention pairs. Large enough that the
/// post-softmax weight underflows to exactly zero in f32 and f64.
pub const MASK_LOGIT: f64 = -1e9;

/// Region label given to zero-padding positions.
pub const PAD_REGION: u32 = u32::MAX;

/// Tiling of an `H x W` map (zero-padded to multiples of `M`) into
/// non-overlapping `M x M` windows, optionally after a cyclic shift.
///
/// Window tokens live in the *rolled* frame: rolled position `(Y, X)` holds
/// padded position `((Y + shift) mod Hp, (X + shift) mod Wp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub windows_y: usize,
    pub windows_x: usize,
    /// Region id per rolled-frame position (`Y * Wp + X`). Attention is
    /// allowed only inside a region.
    pub region_ids: Vec<u32>,
}

impl WindowLayout {
    /// Plain (unshifted) window layout.
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        Self::build(height, width, window, false)
    }

    /// Layout shifted by `floor(M / 2)` in both axes.
    pub fn shifted(height: usize, width: usize, window: usize) -> Result<Self> {
        Self::build(height, width, window, true)
    }

    fn build(height: usize, width: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 {
            return Err(Error::Contract("window size must be positive".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::Contract("feature map must be non-empty".into()));
        }
        let padded_h = height.div_ceil(window) * window;
        let padded_w = width.div_ceil(window) * window;
        let shift = if shifted { window / 2 } else { 0 };
        let mut layout = Self {
            height,
            width,
            window,
            shift,
            pad_bottom: padded_h - height,
            pad_right: padded_w - width,
            windows_y: padded_h / window,
            windows_x: padded_w / window,
            region_ids: Vec::new(),
        };
        // three bands per axis in the rolled frame; only the last window
        // row/column straddles the wrap-around
        let band = |pos: usize, extent: usize| -> u32 {
            if shift == 0 || pos < extent - window {
                0
            } else if pos < extent - shift {
                1
            } else {
                2
            }
        };
        let mut ids = Vec::with_capacity(padded_h * padded_w);
        for y in 0..padded_h {
            for x in 0..padded_w {
                ids.push(match layout.source(y, x) {
                    None => PAD_REGION,
                    Some(_) => band(y, padded_h) * 3 + band(x, padded_w),
                });
            }
        }
        layout.region_ids = ids;
        Ok(layout)
    }

    pub fn padded_height(&self) -> usize {
        self.windows_y * self.window
    }

    pub fn padded_width(&self) -> usize {
        self.windows_x * self.window
    }

    pub fn num_windows(&self) -> usize {
        self.windows_y * self.windows_x
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Original feature position held at rolled position `(y, x)`, or
    /// `None` for padding.
    pub fn source(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let py = (y + self.shift) % self.padded_height();
        let px = (x + self.shift) % self.padded_width();
        (py < self.height && px < self.width).then_some((py, px))
    }

    /// Rolled position of original feature position `(y, x)`.
    pub fn rolled(&self, y: usize, x: usize) -> (usize, usize) {
        let (hp, wp) = (self.padded_height(), self.padded_width());
        ((y + hp - self.shift) % hp, (x + wp - self.shift) % wp)
    }

    /// Window index and token index of rolled position `(y, x)`.
    pub fn window_of(&self, y: usize, x: usize) -> (usize, usize) {
        let m = self.window;
        ((y / m) * self.windows_x + x / m, (y % m) * m + x % m)
    }

    fn check(&self, op: &'static str, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::shape(
                op,
                format!("map is {}x{} but layout is {}x{}", h, w, self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Gather index taking NCHW `[n, c, H, W]` to `[n * windows, M*M, c]`.
    pub fn partition_index(&self, n: usize, c: usize) -> (Vec<usize>, Rc<[usize]>) {
        let (m, nw) = (self.window, self.num_windows());
        let tokens = m * m;
        let mut index = Vec::with_capacity(n * nw * tokens * c);
        for b in 0..n {
            for wy in 0..self.windows_y {
                for wx in 0..self.windows_x {
                    for ty in 0..m {
                        for tx in 0..m {
                            let src = self.source(wy * m + ty, wx * m + tx);
                            for ch in 0..c {
                                index.push(match src {
                                    Some((y, x)) => {
                                        ((b * c + ch) * self.height + y) * self.width + x
                                    }
                                    None => ZERO_FILL,
                                });
                            }
                        }
                    }
                }
            }
        }
        (vec![n * nw, tokens, c], index.into())
    }

    /// Gather index taking `[n * windows, M*M, c]` back to NCHW, undoing
    /// the shift and cropping padding.
    pub fn merge_index(&self, n: usize, c: usize) -> (Vec<usize>, Rc<[usize]>) {
        let (nw, tokens) = (self.num_windows(), self.tokens_per_window());
        let mut index = Vec::with_capacity(n * c * self.height * self.width);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..self.height {
                    for x in 0..self.width {
                        let (ry, rx) = self.rolled(y, x);
                        let (win, tok) = self.window_of(ry, rx);
                        index.push(((b * nw + win) * tokens + tok) * c + ch);
                    }
                }
            }
        }
        (vec![n, c, self.height, self.width], index.into())
    }

    /// Which token pairs may attend, per window.
    pub fn attention_mask(&self) -> AttentionMask {
        let (nw, t, m) = (self.num_windows(), self.tokens_per_window(), self.window);
        let wp = self.padded_width();
        let mut blocked = vec![false; nw * t * t];
        let mut any = false;
        for wy in 0..self.windows_y {
            for wx in 0..self.windows_x {
                let win = wy * self.windows_x + wx;
                let rid = |tok: usize| {
                    let (y, x) = (wy * m + tok / m, wx * m + tok % m);
                    self.region_ids[y * wp + x]
                };
                for p in 0..t {
                    for q in 0..t {
                        if rid(p) != rid(q) {
                            blocked[(win * t + p) * t + q] = true;
                            any = true;
                        }
                    }
                }
            }
        }
        AttentionMask {
            windows: nw,
            tokens: t,
            blocked,
            any_blocked: any,
        }
    }
}

/// Per-window additive attention mask: `MASK_LOGIT` where a pair is
/// blocked, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub windows: usize,
    pub tokens: usize,
    blocked: Vec<bool>,
    any_blocked: bool,
}

impl AttentionMask {
    pub fn is_blocked(&self, window: usize, p: usize, q: usize) -> bool {
        self.blocked[(window * self.tokens + p) * self.tokens + q]
    }

    pub fn is_all_zero(&self) -> bool {
        !self.any_blocked
    }

    /// Additive logits for a `[batch * windows, heads, t, t]` score tensor.
    fn logits<T: Scalar>(&self, batch: usize, heads: usize) -> Tensor<T> {
        let t = self.tokens;
        let neg = T::lit(MASK_LOGIT);
        let mut data = Vec::with_capacity(batch * self.windows * heads * t * t);
        for _ in 0..batch {
            for w in 0..self.windows {
                let win = &self.blocked[w * t * t..(w + 1) * t * t];
                for _ in 0..heads {
                    data.extend(win.iter().map(|&b| if b { neg } else { T::zero() }));
                }
            }
        }
        Tensor::new(&[batch * self.windows, heads, t, t], data).expect("mask shape")
    }
}

/// Rearranges an NCHW map into window tokens `[n * windows, M*M, c]`.
pub fn window_partition<T: Scalar>(x: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    let (n, c, h, w) = dims4("window_partition", x.shape())?;
    layout.check("window_partition", h, w)?;
    let (shape, index) = layout.partition_index(n, c);
    gather(x, &shape, index)
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(windows: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    let (nw, t) = (layout.num_windows(), layout.tokens_per_window());
    let (bw, tok, c) = match *windows.shape() {
        [bw, tok, c] => (bw, tok, c),
        _ => {
            return Err(Error::shape(
                "window_merge",
                format!("expected [batch*windows, tokens, c], got {:?}", windows.shape()),
            ))
        }
    };
    if tok != t || bw % nw != 0 {
        return Err(Error::shape(
            "window_merge",
            format!(
                "{:?} does not match layout with {} windows of {} tokens",
                windows.shape(),
                nw,
                t
            ),
        ));
    }
    let (shape, index) = layout.merge_index(bw / nw, c);
    gather(windows, &shape, index)
}

/// Learnable bias indexed by relative offset `(dy, dx)` in
/// `[-(M-1), M-1]^2`, one table per head.
pub struct RelPosBias<T> {
    pub table: Parameter<T>,
    pub window: usize,
    pub heads: usize,
    index: Rc<[usize]>,
}

/// Offset-table slot for tokens `p`, `q` of an `M x M` window.
pub fn relative_offset_slot(window: usize, p: usize, q: usize) -> usize {
    let m = window as isize;
    let (py, px) = ((p / window) as isize, (p % window) as isize);
    let (qy, qx) = ((q / window) as isize, (q % window) as isize);
    ((py - qy + m - 1) * (2 * m - 1) + (px - qx + m - 1)) as usize
}

impl<T: Scalar> RelPosBias<T> {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        window: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let span = (2 * window - 1) * (2 * window - 1);
        let table = Init::Normal { std: 0.02 }.tensor(&[heads, span], rng);
        let t = window * window;
        let mut index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            for p in 0..t {
                for q in 0..t {
                    index.push(h * span + relative_offset_slot(window, p, q));
                }
            }
        }
        Self {
            table: Parameter::new(reg, format!("{name}.rel_bias"), table),
            window,
            heads,
            index: index.into(),
        }
    }

    /// Full bias `B` with shape `[heads, M*M, M*M]`.
    pub fn materialize(&self, ctx: Ctx) -> Result<Var<T>> {
        let t = self.window * self.window;
        gather(
            &self.table.var(ctx.track),
            &[self.heads, t, t],
            Rc::clone(&self.index),
        )
    }
}

impl<T: Scalar> Module<T> for RelPosBias<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.table);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.table);
    }
}

/// Output of an attention call, with the post-softmax weights
/// `[batch, heads, tokens, tokens]` kept for inspection.
pub struct Attended<T> {
    pub out: Var<T>,
    pub probs: Var<T>,
}

fn split_heads<T: Scalar>(x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let (b, t, c) = match *x.shape() {
        [b, t, c] => (b, t, c),
        _ => return Err(Error::shape("attention", format!("tokens {:?}", x.shape()))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{} channels are not divisible into {} heads",
            c, heads
        )));
    }
    permute(&reshape(x, &[b, t, heads, c / heads])?, &[0, 2, 1, 3])
}

/// Scaled dot-product attention over token batches `[b, t, c]`:
/// `softmax(Q K^T / sqrt(d) + B + mask) V` per head, `d = c / heads`.
pub fn multi_head_attention<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    bias: Option<&Var<T>>,
    mask: Option<&AttentionMask>,
) -> Result<Attended<T>> {
    if q.shape() != k.shape() {
        return Err(Error::shape(
            "attention",
            format!("query {:?} vs key {:?}", q.shape(), k.shape()),
        ));
    }
    if v.shape()[..2] != q.shape()[..2] {
        return Err(Error::shape(
            "attention",
            format!("value {:?} vs query {:?}", v.shape(), q.shape()),
        ));
    }
    let (b, t, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let cv = v.shape()[2];
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let d = c / heads;
    let mut logits = scale(&bmm(&qh, &kh, true)?, T::lit(1.0 / (d as f64).sqrt()));
    if let Some(bias) = bias {
        logits = add_bcast(&logits, bias)?;
    }
    if let Some(mask) = mask.filter(|m| !m.is_all_zero()) {
        if b % mask.windows != 0 || mask.tokens != t {
            return Err(Error::shape(
                "attention",
                format!(
                    "mask for {} windows of {} tokens vs batch {} of {} tokens",
                    mask.windows, mask.tokens, b, t
                ),
            ));
        }
        logits = add_const(&logits, &mask.logits(b / mask.windows, heads))?;
    }
    let probs = softmax_lastdim(&logits);
    let out = bmm(&probs, &vh, false)?;
    let out = reshape(&permute(&out, &[0, 2, 1, 3])?, &[b, t, cv])?;
    Ok(Attended { out, probs })
}

fn same_spatial<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<(usize, usize, usize)> {
    let (n, _, h, w) = dims4("w_mhsa", q.shape())?;
    for (name, x) in [("key", k), ("value", v)] {
        let (n2, _, h2, w2) = dims4("w_mhsa", x.shape())?;
        if (n2, h2, w2) != (n, h, w) {
            return Err(Error::shape(
                "w_mhsa",
                format!("{} {:?} vs query {:?}", name, x.shape(), q.shape()),
            ));
        }
    }
    Ok((n, h, w))
}

/// Window attention on NCHW maps that already hold the projected
/// queries, keys and values.
pub fn w_mhsa<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    layout: &WindowLayout,
    bias: Option<&Var<T>>,
    mask: &AttentionMask,
) -> Result<Attended<T>> {
    same_spatial(q, k, v)?;
    let qw = window_partition(q, layout)?;
    let kw = window_partition(k, layout)?;
    let vw = window_partition(v, layout)?;
    let att = multi_head_attention(&qw, &kw, &vw, heads, bias, Some(mask))?;
    Ok(Attended {
        out: window_merge(&att.out, layout)?,
        probs: att.probs,
    })
}

/// Shifted-window attention: windows displaced by `floor(M/2)` in both
/// axes with the cross-region mask applied.
pub fn sw_mhsa<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    window: usize,
    bias: Option<&Var<T>>,
) -> Result<(Attended<T>, WindowLayout)> {
    let (_, h, w) = same_spatial(q, k, v)?;
    let layout = WindowLayout::shifted(h, w, window)?;
    let mask = layout.attention_mask();
    let att = w_mhsa(q, k, v, heads, &layout, bias, &mask)?;
    Ok((att, layout))
}

/// Global pre-norm transformer layer over the flattened bottleneck map.
///
/// `h = x + Proj(MHSA(LN1(x + pos)))`, `out = h + FC2(gelu(FC1(LN2(h))))`.
/// The position embedding feeds the attention branch only, so zeroed
/// output projections make the layer an exact identity.
pub struct BottleneckTransformer<T> {
    pub pos_emb: Parameter<T>,
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
    pub tokens: usize,
    pub channels: usize,
}

impl<T: Scalar> BottleneckTransformer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        channels: usize,
        tokens: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "bottleneck: {} channels are not divisible into {} heads",
                channels, heads
            )));
        }
        let glorot = Init::GlorotUniform {
            fan_in: channels,
            fan_out: channels,
        };
        let hidden = channels * mlp_ratio;
        let mut lin = |reg: &mut ParamRegistry, n: &str, i: usize, o: usize, init: Init| {
            Linear::new(reg, &format!("{name}.{n}"), i, o, init, rng)
        };
        let ln1 = LayerNorm::new(reg, &format!("{name}.ln1"), channels);
        let q = lin(reg, "q", channels, channels, glorot);
        let k = lin(reg, "k", channels, channels, glorot);
        let v = lin(reg, "v", channels, channels, glorot);
        let proj = lin(reg, "proj", channels, channels, glorot);
        let ln2 = LayerNorm::new(reg, &format!("{name}.ln2"), channels);
        let fc1 = lin(reg, "fc1", channels, hidden, Init::HeUniform { fan_in: channels });
        let fc2 = lin(
            reg,
            "fc2",
            hidden,
            channels,
            Init::GlorotUniform {
                fan_in: hidden,
                fan_out: channels,
            },
        );
        let pos_emb = Parameter::new(
            reg,
            format!("{name}.pos_emb"),
            Init::Normal { std: 0.02 }.tensor(&[tokens, channels], rng),
        );
        Ok(Self {
            pos_emb,
            ln1,
            q,
            k,
            v,
            proj,
            ln2,
            fc1,
            fc2,
            heads,
            tokens,
            channels,
        })
    }

    /// Applies the layer to token batches `[n, tokens, c]`.
    pub fn forward_tokens(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        let with_pos = add_bcast(x, &self.pos_emb.var(ctx.track))?;
        let a = self.ln1.forward(&with_pos, ctx)?;
        let att = multi_head_attention(
            &self.q.forward(&a, ctx)?,
            &self.k.forward(&a, ctx)?,
            &self.v.forward(&a, ctx)?,
            self.heads,
            None,
            None,
        )?;
        let h = add(x, &self.proj.forward(&att.out, ctx)?)?;
        let m = self.ln2.forward(&h, ctx)?;
        let m = self.fc2.forward(&gelu(&self.fc1.forward(&m, ctx)?), ctx)?;
        add(&h, &m)
    }

    /// NCHW in, NCHW out.
    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        let (n, c, h, w) = dims4("bottleneck_transformer", x.shape())?;
        if c != self.channels || h * w != self.tokens {
            return Err(Error::shape(
                "bottleneck_transformer",
                format!(
                    "input {:?} vs layer built for {} channels and {} tokens",
                    x.shape(),
                    self.channels,
                    self.tokens
                ),
            ));
        }
        let tokens = permute(&reshape(x, &[n, c, h * w])?, &[0, 2, 1])?;
        let out = self.forward_tokens(&tokens, ctx)?;
        reshape(&permute(&out, &[0, 2, 1])?, &[n, c, h, w])
    }
}

impl<T: Scalar> Module<T> for BottleneckTransformer<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.pos_emb);
        self.ln1.visit_params(f);
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            l.visit_params(f);
        }
        self.ln2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.pos_emb);
        self.ln1.visit_params_mut(f);
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.proj] {
            l.visit_params_mut(f);
        }
        self.ln2.visit_params_mut(f);
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

/// Convenience for callers holding plain tensors.
pub fn window_roundtrip<T: Scalar>(x: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let v = Var::constant(x.clone());
    Ok(window_merge(&window_partition(&v, layout)?, layout)?
        .value()
        .clone())
}
