//! Batch normalization over NCHW maps and layer normalization over the last axis.

use super::tensor::dims4;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

/// Per-channel batch statistics observed in a training-mode call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> BatchStats<T> {
    /// Folds these statistics into running averages; the running variance
    /// uses the unbiased estimate.
    pub fn update(&self, running: &mut RunningStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        let unbias = if self.count > 1 {
            T::lit(self.count as f64 / (self.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in running.mean.data_mut().iter_mut().zip(&self.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in running.var.data_mut().iter_mut().zip(&self.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Batch normalization. In training mode normalizes with batch statistics
/// and returns them so the caller can update its running averages; in eval
/// mode normalizes with `running`, which must be supplied.
pub fn batch_norm2d<T: Scalar>(
    input: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    mode: NormMode,
    running: Option<&RunningStats<T>>,
) -> Result<(Var<T>, Option<BatchStats<T>>)> {
    let (n, c, h, w) = dims4("batch_norm2d", input.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm2d",
            format!(
                "gamma {:?} / beta {:?} vs {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    let hw = h * w;
    let count = n * hw;
    let xd = input.value().data();
    let (mean, var, stats) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                let mu = s / T::lit(count as f64);
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / T::lit(count as f64);
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, Some(stats))
        }
        NormMode::Eval => {
            let Some(r) = running else {
                return Err(Error::Config(
                    "batch_norm2d in eval mode needs running statistics".into(),
                ));
            };
            (r.mean.data().to_vec(), r.var.data().to_vec(), None)
        }
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt())
        .collect();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    let out = Tensor::new(input.shape(), out)?;
    let gc = gamma.clone();
    let train = mode == NormMode::Train;
    let var = Var::from_op(
        out,
        &[input, gamma, beta],
        Box::new(move |g| {
            let gdat = g.data();
            let gam = gc.value().data();
            let mut gx = vec![T::zero(); gdat.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sg = sg + gdat[i];
                        sgx = sgx + gdat[i] * xhat[i];
                    }
                }
                gbeta[ch] = sg;
                ggamma[ch] = sgx;
                let scale = gam[ch] * inv_std[ch];
                let cnt = T::lit(count as f64);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        gx[i] = if train {
                            scale * (gdat[i] - sg / cnt - xhat[i] * sgx / cnt)
                        } else {
                            scale * gdat[i]
                        };
                    }
                }
            }
            vec![
                Some(Tensor::new(g.shape(), gx).expect("shape")),
                Some(Tensor::new(&[c], ggamma).expect("shape")),
                Some(Tensor::new(&[c], gbeta).expect("shape")),
            ]
        }),
    );
    Ok((var, stats))
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta must be [{}], got {:?}/{:?}", d, gamma.shape(), beta.shape()),
        ));
    }
    let xd = x.value().data();
    let rows = xd.len() / d;
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); rows];
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut out = vec![T::zero(); xd.len()];
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let xh = (row[i] - mu) * is;
            xhat[r * d + i] = xh;
            out[r * d + i] = gd[i] * xh + bd[i];
        }
    }
    let out = Tensor::new(x.shape(), out)?;
    let gc = gamma.clone();
    Ok(Var::from_op(
        out,
        &[x, gamma, beta],
        Box::new(move |g| {
            let gdat = g.data();
            let gam = gc.value().data();
            let mut gx = vec![T::zero(); gdat.len()];
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for r in 0..rows {
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for i in 0..d {
                    let j = r * d + i;
                    let gh = gdat[j] * gam[i];
                    s1 = s1 + gh;
                    s2 = s2 + gh * xhat[j];
                    ggamma[i] = ggamma[i] + gdat[j] * xhat[j];
                    gbeta[i] = gbeta[i] + gdat[j];
                }
                for i in 0..d {
                    let j = r * d + i;
                    let gh = gdat[j] * gam[i];
                    gx[j] = inv_std[r] * (gh - s1 / dn - xhat[j] * s2 / dn);
                }
            }
            vec![
                Some(Tensor::new(g.shape(), gx).expect("shape")),
                Some(Tensor::new(&[d], ggamma).expect("shape")),
                Some(Tensor::new(&[d], gbeta).expect("shape")),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize, g: f64, b: f64) -> (Var<f64>, Var<f64>) {
        (
            Var::constant(Tensor::full(&[c], g)),
            Var::constant(Tensor::full(&[c], b)),
        )
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Var::constant(Tensor::full(&[2, 1, 3, 3], 4.2));
        let (g, b) = affine(1, 1.0, 0.0);
        let (y, _) = batch_norm2d(&x, &g, &b, NormMode::Train, None).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_gamma_returns_beta() {
        let x = Var::constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let (g, b) = affine(2, 0.0, 0.75);
        let (y, _) = batch_norm2d(&x, &g, &b, NormMode::Train, None).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn eval_without_running_stats_is_config_error() {
        let x = Var::constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let (g, b) = affine(1, 1.0, 0.0);
        assert!(matches!(
            batch_norm2d(&x, &g, &b, NormMode::Eval, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let x = Var::constant(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f64));
        let (g, b) = affine(1, 1.0, 0.0);
        let (_, stats) = batch_norm2d(&x, &g, &b, NormMode::Train, None).unwrap();
        let mut run = RunningStats::new(1);
        stats.unwrap().update(&mut run);
        // batch mean 1.5, unbiased var 5/3
        assert!((run.mean.data()[0] - 0.15).abs() < 1e-12);
        assert!((run.var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Var::constant(Tensor::from_fn(&[3, 5], |i| (i * i % 7) as f64));
        let (g, b) = affine(5, 1.0, 0.0);
        let y = layer_norm(&x, &g, &b).unwrap();
        for row in y.value().data().chunks(5) {
            let mu: f64 = row.iter().sum::<f64>() / 5.0;
            assert!(mu.abs() < 1e-12);
        }
    }
}
