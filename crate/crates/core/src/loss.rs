//! Segmentation losses with deep supervision, and the Dice metric.

use serde::{Deserialize, Serialize};

use crate::engine::{add, dims4, scale, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Integer class map of shape `[n, h, w]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<i32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "label_map",
                format!("{}x{}x{} map holds {} labels, got {}", n, h, w, n * h * w, data.len()),
            ));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, v: i32) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![v; n * h * w],
        }
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> i32 {
        self.data[(b * self.h + y) * self.w + x]
    }

    /// Label set (sorted, deduplicated).
    pub fn classes_present(&self) -> Vec<i32> {
        let mut v = self.data.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn check_range(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self.data.iter().find(|&&l| l < 0 || l as usize >= classes) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(())
    }

    /// Stacks single-image maps into one batch.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero label maps".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("label_map", "stacked maps differ in size"));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        Self::new(n, first.h, first.w, data)
    }
}

fn check_pair<T: Scalar>(op: &'static str, logits: &Var<T>, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims4(op, logits.shape())?;
    if (n, h, w) != (labels.n, labels.h, labels.w) {
        return Err(Error::shape(
            op,
            format!(
                "logits {:?} vs labels {}x{}x{}",
                logits.shape(),
                labels.n,
                labels.h,
                labels.w
            ),
        ));
    }
    labels.check_range(c)?;
    Ok((n, c, h * w))
}

/// Channel softmax of NCHW logits, as a flat buffer in the same layout.
fn softmax_channels<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut p = vec![T::zero(); x.len()];
    for b in 0..n {
        for i in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + i;
            let max = (0..c).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..c {
                let e = (x[idx(k)] - max).exp();
                p[idx(k)] = e;
                total = total + e;
            }
            for k in 0..c {
                p[idx(k)] = p[idx(k)] / total;
            }
        }
    }
    p
}

/// Mean over pixels of `-log softmax(logits)[true class]`.
pub fn cross_entropy_loss<T: Scalar>(logits: &Var<T>, labels: &LabelMap) -> Result<Var<T>> {
    let (n, c, hw) = check_pair("cross_entropy_loss", logits, labels)?;
    let x = logits.value().data();
    let count = T::lit((n * hw) as f64);
    let mut total = T::zero();
    for b in 0..n {
        for i in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + i;
            let max = (0..c).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..c).map(|k| (x[idx(k)] - max).exp()).sum::<T>().ln();
            let y = labels.data[b * hw + i] as usize;
            total = total + (lse - x[idx(y)]);
        }
    }
    let value = Tensor::scalar(total / count);
    let lc = logits.clone();
    let labels = labels.clone();
    Ok(Var::from_op(
        value,
        &[logits],
        Box::new(move |g| {
            let mut p = softmax_channels(lc.value().data(), n, c, hw);
            let s = g.data()[0] / count;
            for b in 0..n {
                for i in 0..hw {
                    let y = labels.data[b * hw + i] as usize;
                    let j = (b * c + y) * hw + i;
                    p[j] = p[j] - T::one();
                }
            }
            for v in &mut p {
                *v = *v * s;
            }
            vec![Some(Tensor::new(lc.shape(), p).expect("shape"))]
        }),
    ))
}

/// `1 - mean_c (2 Σ p g + ε) / (Σ p + Σ g + ε)` over foreground classes
/// `c >= 1`, with `p` the channel softmax and `g` the one-hot labels; sums
/// run over the whole batch.
pub fn soft_dice_loss<T: Scalar>(logits: &Var<T>, labels: &LabelMap) -> Result<Var<T>> {
    let (n, c, hw) = check_pair("soft_dice_loss", logits, labels)?;
    if c < 2 {
        return Err(Error::Config("dice loss needs a foreground class".into()));
    }
    let p = softmax_channels(logits.value().data(), n, c, hw);
    let eps = T::lit(DICE_SMOOTH);
    let mut inter = vec![T::zero(); c];
    let mut psum = vec![T::zero(); c];
    let mut gsum = vec![T::zero(); c];
    for b in 0..n {
        for k in 0..c {
            for i in 0..hw {
                let pv = p[(b * c + k) * hw + i];
                psum[k] = psum[k] + pv;
                if labels.data[b * hw + i] as usize == k {
                    inter[k] = inter[k] + pv;
                    gsum[k] = gsum[k] + T::one();
                }
            }
        }
    }
    let fg = T::lit((c - 1) as f64);
    let mean_dice = (1..c)
        .map(|k| (T::lit(2.0) * inter[k] + eps) / (psum[k] + gsum[k] + eps))
        .sum::<T>()
        / fg;
    let value = Tensor::scalar(T::one() - mean_dice);
    let lc = logits.clone();
    let labels = labels.clone();
    Ok(Var::from_op(
        value,
        &[logits],
        Box::new(move |g| {
            let go = g.data()[0];
            // dL/dp for each class and pixel
            let mut dp = vec![T::zero(); p.len()];
            for k in 1..c {
                let den = psum[k] + gsum[k] + eps;
                let num = T::lit(2.0) * inter[k] + eps;
                for b in 0..n {
                    for i in 0..hw {
                        let gk = if labels.data[b * hw + i] as usize == k {
                            T::one()
                        } else {
                            T::zero()
                        };
                        let d = (T::lit(2.0) * gk * den - num) / (den * den);
                        dp[(b * c + k) * hw + i] = -go * d / fg;
                    }
                }
            }
            // back through the channel softmax
            let mut dx = vec![T::zero(); p.len()];
            for b in 0..n {
                for i in 0..hw {
                    let idx = |k: usize| (b * c + k) * hw + i;
                    let dot: T = (0..c).map(|k| p[idx(k)] * dp[idx(k)]).sum();
                    for k in 0..c {
                        dx[idx(k)] = p[idx(k)] * (dp[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(lc.shape(), dx).expect("shape"))]
        }),
    ))
}

/// Dice + cross-entropy at one scale, weighted 1:1.
pub fn segmentation_loss<T: Scalar>(logits: &Var<T>, labels: &LabelMap) -> Result<Var<T>> {
    add(&soft_dice_loss(logits, labels)?, &cross_entropy_loss(logits, labels)?)
}

/// Stage weights for full, half and quarter resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionWeights(pub [f64; 3]);

impl Default for SupervisionWeights {
    fn default() -> Self {
        Self::halving(1.0)
    }
}

impl SupervisionWeights {
    /// `(a, a/2, a/4)`.
    pub fn halving(first: f64) -> Self {
        Self([first, first / 2.0, first / 4.0])
    }
}

/// Ground truth at full, half and quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPyramid {
    pub levels: [LabelMap; 3],
}

impl LabelPyramid {
    pub fn from_full(labels: &LabelMap) -> Result<Self> {
        Ok(Self {
            levels: [
                labels.clone(),
                downsample_labels(labels, 2)?,
                downsample_labels(labels, 4)?,
            ],
        })
    }
}

/// Weighted sum of per-stage losses plus the stage values themselves.
pub struct DeepSupervisionLoss<T> {
    pub total: Var<T>,
    pub stages: [f64; 3],
}

/// `α1 L(full) + α2 L(half) + α3 L(quarter)` with `L = dice + CE`.
pub fn deep_supervision_loss<T: Scalar>(
    outputs: [&Var<T>; 3],
    pyramid: &LabelPyramid,
    weights: SupervisionWeights,
) -> Result<DeepSupervisionLoss<T>> {
    let mut total: Option<Var<T>> = None;
    let mut stages = [0.0; 3];
    for (s, (out, labels)) in outputs.iter().zip(&pyramid.levels).enumerate() {
        let l = segmentation_loss(out, labels)?;
        stages[s] = l.value().data()[0].to_f64_lossy();
        let term = scale(&l, T::lit(weights.0[s]));
        total = Some(match total {
            None => term,
            Some(t) => add(&t, &term)?,
        });
    }
    Ok(DeepSupervisionLoss {
        total: total.expect("three stages"),
        stages,
    })
}

/// Nearest-neighbour downsampling keeping the top-left label of each
/// `factor x factor` block.
pub fn downsample_labels(labels: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || labels.h % factor != 0 || labels.w % factor != 0 {
        return Err(Error::shape(
            "downsample_labels",
            format!("{}x{} map is not divisible by {}", labels.h, labels.w, factor),
        ));
    }
    let (h, w) = (labels.h / factor, labels.w / factor);
    let mut data = Vec::with_capacity(labels.n * h * w);
    for b in 0..labels.n {
        for y in 0..h {
            for x in 0..w {
                data.push(labels.get(b, y * factor, x * factor));
            }
        }
    }
    LabelMap::new(labels.n, h, w, data)
}

/// Hard Dice `2|P∩G| / (|P| + |G|)` for one class; 1.0 when both are empty.
pub fn dice_score(pred: &[i32], truth: &[i32], class: i32) -> f64 {
    assert_eq!(pred.len(), truth.len(), "dice_score: maps differ in size");
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Per-pixel argmax over channels of `[n, c, h, w]` scores.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Result<LabelMap> {
    let (n, c, h, w) = dims4("argmax_labels", scores.shape())?;
    let hw = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + i] > d[(b * c + best) * hw + i] {
                    best = k;
                }
            }
            out.push(best as i32);
        }
    }
    LabelMap::new(n, h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(labels: &LabelMap, c: usize, mag: f64) -> Var<f64> {
        let hw = labels.h * labels.w;
        Var::constant(Tensor::from_fn(&[labels.n, c, labels.h, labels.w], |j| {
            let b = j / (c * hw);
            let k = (j / hw) % c;
            let i = j % hw;
            if labels.data[b * hw + i] as usize == k {
                mag
            } else {
                -mag
            }
        }))
    }

    #[test]
    fn saturated_correct_logits_give_near_zero_losses() {
        let labels = LabelMap::new(1, 2, 4, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let z = logits_for(&labels, 4, 30.0);
        assert!(soft_dice_loss(&z, &labels).unwrap().value().data()[0] < 0.01);
        assert!(cross_entropy_loss(&z, &labels).unwrap().value().data()[0] < 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let labels = LabelMap::new(1, 3, 3, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
        let z = Var::constant(Tensor::<f64>::zeros(&[1, 4, 3, 3]));
        let l = cross_entropy_loss(&z, &labels).unwrap().value().data()[0];
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_gives_dice_loss_near_one() {
        let labels = LabelMap::new(1, 1, 4, vec![1, 1, 0, 0]).unwrap();
        let pred = LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap();
        let z = logits_for(&pred, 2, 40.0);
        let l = soft_dice_loss(&z, &labels).unwrap().value().data()[0];
        assert!((l - 1.0).abs() < 1e-5, "{l}");
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let labels = LabelMap::new(1, 1, 2, vec![0, 4]).unwrap();
        let z = Var::constant(Tensor::<f64>::zeros(&[1, 4, 1, 2]));
        assert!(matches!(cross_entropy_loss(&z, &labels), Err(Error::Data(_))));
        assert!(matches!(soft_dice_loss(&z, &labels), Err(Error::Data(_))));
    }

    #[test]
    fn downsample_keeps_top_left_and_checks_divisibility() {
        // 4x4 made of 2x2 blocks whose top-left values are 0,1 / 1,0
        let m = LabelMap::new(
            1,
            4,
            4,
            vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0],
        )
        .unwrap();
        let d = downsample_labels(&m, 2).unwrap();
        assert_eq!(d.data, vec![0, 1, 1, 0]);
        assert!(downsample_labels(&m, 3).is_err());
        let c = downsample_labels(&LabelMap::filled(1, 32, 32, 2), 2).unwrap();
        assert_eq!((c.h, c.w), (16, 16));
        assert!(c.data.iter().all(|&v| v == 2));
    }

    #[test]
    fn dice_score_cases() {
        let a = [1, 1, 0, 2];
        assert_eq!(dice_score(&a, &a, 1), 1.0);
        assert_eq!(dice_score(&[1, 0], &[0, 1], 1), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 3), 1.0);
    }

    #[test]
    fn stage_weights_halve() {
        assert_eq!(SupervisionWeights::default().0, [1.0, 0.5, 0.25]);
    }
}
