//! 2-d convolution and transposed convolution via patch gather + GEMM.

use super::tensor::dims4;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Gathers `[c*k*k, ho*wo]` patch columns from one `[c, h, w]` image.
fn im2col<T: Scalar>(img: &[T], g: Geometry, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[c, h, w]`.
fn col2im<T: Scalar>(cols: &[T], g: Geometry, img: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = &mut dst[ix as usize];
                            *d = *d + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], hw: usize) {
    for (plane, &b) in out.chunks_mut(hw).zip(bias.iter().cycle()) {
        for v in plane {
            *v = *v + b;
        }
    }
}

fn channel_bias_grad<T: Scalar>(g: &[T], channels: usize, hw: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, plane) in g.chunks(hw).enumerate() {
        let s: T = plane.iter().copied().sum();
        gb[i % channels] = gb[i % channels] + s;
    }
    gb
}

/// Cross-correlation of an NCHW input with an `[out, in, k, k]` kernel.
pub fn conv2d<T: Scalar>(
    input: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let (n, c, h, w) = dims4("conv2d", input.shape())?;
    let (o, wi, kh, kw) = dims4("conv2d", weight.shape())?;
    if wi != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels (axis 1) = {} but weight in-channels (axis 1) = {}", c, wi),
        ));
    }
    if kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("non-square kernel {}x{} (axes 2, 3)", kh, kw),
        ));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} vs out-channels {}", b.shape(), o),
            ));
        }
    }
    let k = kh;
    let (Some(ho), Some(wo)) = (
        conv_out_dim(h, k, stride, padding),
        conv_out_dim(w, k, stride, padding),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {} larger than padded input {}x{} (axes 2, 3)", k, h, w),
        ));
    };
    let g = Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let ckk = c * k * k;
    let (hw_in, hw_out) = (h * w, ho * wo);
    let mut cols = vec![T::zero(); ckk * hw_out];
    let mut out = vec![T::zero(); n * o * hw_out];
    let (xd, wd) = (input.value().data(), weight.value().data());
    for b in 0..n {
        im2col(&xd[b * c * hw_in..(b + 1) * c * hw_in], g, &mut cols);
        T::gemm(
            o,
            ckk,
            hw_out,
            wd,
            false,
            &cols,
            false,
            T::zero(),
            &mut out[b * o * hw_out..(b + 1) * o * hw_out],
        );
    }
    if let Some(bv) = bias {
        add_channel_bias(&mut out, bv.value().data(), hw_out);
    }
    let out = Tensor::new(&[n, o, ho, wo], out)?;

    let (xc, wc) = (input.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut parents = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Ok(Var::from_op(
        out,
        &parents,
        Box::new(move |gout| {
            let gd = gout.data();
            let (xd, wd) = (xc.value().data(), wc.value().data());
            let mut cols = vec![T::zero(); ckk * hw_out];
            let mut gx = xc.requires_grad().then(|| vec![T::zero(); n * c * hw_in]);
            let mut gw = wc.requires_grad().then(|| vec![T::zero(); o * ckk]);
            for b in 0..n {
                let gb = &gd[b * o * hw_out..(b + 1) * o * hw_out];
                if let Some(gw) = gw.as_mut() {
                    im2col(&xd[b * c * hw_in..(b + 1) * c * hw_in], g, &mut cols);
                    T::gemm(o, hw_out, ckk, gb, false, &cols, true, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(ckk, o, hw_out, wd, true, gb, false, T::zero(), &mut cols);
                    col2im(&cols, g, &mut gx[b * c * hw_in..(b + 1) * c * hw_in]);
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::new(xc.shape(), v).expect("shape")),
                gw.map(|v| Tensor::new(wc.shape(), v).expect("shape")),
            ];
            if has_bias {
                grads.push(Some(
                    Tensor::new(&[o], channel_bias_grad(gd, o, hw_out)).expect("shape"),
                ));
            }
            grads
        }),
    ))
}

/// Transposed convolution with an `[in, out, k, k]` kernel and no padding.
///
/// Output extent per axis is `(h - 1) * stride + k`; with `k == stride` the
/// map is upsampled by exactly `stride`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
) -> Result<Var<T>> {
    let (n, c, h, w) = dims4("conv_transpose2d", input.shape())?;
    let (wi, o, kh, kw) = dims4("conv_transpose2d", weight.shape())?;
    if wi != c {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input channels (axis 1) = {} but weight in-channels (axis 0) = {}", c, wi),
        ));
    }
    if kh != kw {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("non-square kernel {}x{} (axes 2, 3)", kh, kw),
        ));
    }
    if stride == 0 {
        return Err(Error::Contract("conv_transpose2d stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("bias {:?} vs out-channels {}", b.shape(), o),
            ));
        }
    }
    let k = kh;
    let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
    // the output image plays the role of the conv2d input
    let g = Geometry {
        c: o,
        h: ho,
        w: wo,
        k,
        stride,
        pad: 0,
        ho: h,
        wo: w,
    };
    let okk = o * k * k;
    let (hw_in, hw_out) = (h * w, ho * wo);
    let mut cols = vec![T::zero(); okk * hw_in];
    let mut out = vec![T::zero(); n * o * hw_out];
    let (xd, wd) = (input.value().data(), weight.value().data());
    for b in 0..n {
        T::gemm(
            okk,
            c,
            hw_in,
            wd,
            true,
            &xd[b * c * hw_in..(b + 1) * c * hw_in],
            false,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, g, &mut out[b * o * hw_out..(b + 1) * o * hw_out]);
    }
    if let Some(bv) = bias {
        add_channel_bias(&mut out, bv.value().data(), hw_out);
    }
    let out = Tensor::new(&[n, o, ho, wo], out)?;

    let (xc, wc) = (input.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut parents = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Ok(Var::from_op(
        out,
        &parents,
        Box::new(move |gout| {
            let gd = gout.data();
            let (xd, wd) = (xc.value().data(), wc.value().data());
            let mut cols = vec![T::zero(); okk * hw_in];
            let mut gx = xc.requires_grad().then(|| vec![T::zero(); n * c * hw_in]);
            let mut gw = wc.requires_grad().then(|| vec![T::zero(); c * okk]);
            for b in 0..n {
                im2col(&gd[b * o * hw_out..(b + 1) * o * hw_out], g, &mut cols);
                if let Some(gx) = gx.as_mut() {
                    T::gemm(
                        c,
                        okk,
                        hw_in,
                        wd,
                        false,
                        &cols,
                        false,
                        T::zero(),
                        &mut gx[b * c * hw_in..(b + 1) * c * hw_in],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    T::gemm(
                        c,
                        hw_in,
                        okk,
                        &xd[b * c * hw_in..(b + 1) * c * hw_in],
                        false,
                        &cols,
                        true,
                        T::one(),
                        gw,
                    );
                }
            }
            let mut grads = vec![
                gx.map(|v| Tensor::new(xc.shape(), v).expect("shape")),
                gw.map(|v| Tensor::new(wc.shape(), v).expect("shape")),
            ];
            if has_bias {
                grads.push(Some(
                    Tensor::new(&[o], channel_bias_grad(gd, o, hw_out)).expect("shape"),
                ));
            }
            grads
        }),
    ))
}
