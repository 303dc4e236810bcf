//! Differentiable primitives that are not convolutions or normalizations.

use std::rc::Rc;

use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Sentinel in a gather index: the output element is zero.
pub const ZERO_FILL: usize = usize::MAX;

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("add", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Ok(Var::from_op(
        out,
        &[a, b],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("sub", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Ok(Var::from_op(
        out,
        &[a, b],
        Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("mul", a, b)?;
    let out = a.value().zip_map(b.value(), |x, y| x * y);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Var::from_op(
        out,
        &[a, b],
        Box::new(move |g| {
            let ga = ac
                .requires_grad()
                .then(|| g.zip_map(bc.value(), |g, y| g * y));
            let gb = bc
                .requires_grad()
                .then(|| g.zip_map(ac.value(), |g, x| g * x));
            vec![ga, gb]
        }),
    ))
}

pub fn scale<T: Scalar>(a: &Var<T>, s: T) -> Var<T> {
    Var::from_op(
        a.value().map(|v| v * s),
        &[a],
        Box::new(move |g| vec![Some(g.map(|v| v * s))]),
    )
}

/// Adds a constant tensor of the same shape; no gradient flows into it.
pub fn add_const<T: Scalar>(a: &Var<T>, c: &Tensor<T>) -> Result<Var<T>> {
    if a.shape() != c.shape() {
        return Err(Error::shape(
            "add_const",
            format!("{:?} vs {:?}", a.shape(), c.shape()),
        ));
    }
    Ok(Var::from_op(
        a.value().zip_map(c, |x, y| x + y),
        &[a],
        Box::new(|g| vec![Some(g.clone())]),
    ))
}

/// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape; `b` is
/// repeated over the leading axes.
pub fn add_bcast<T: Scalar>(x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (xs, bs) = (x.shape(), b.shape());
    if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
        return Err(Error::shape(
            "add_bcast",
            format!("{:?} is not a suffix of {:?}", bs, xs),
        ));
    }
    let blen = b.value().numel().max(1);
    let bd = b.value().data();
    let mut out = x.value().clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v + bd[i % blen];
    }
    let bshape = bs.to_vec();
    Ok(Var::from_op(
        out,
        &[x, b],
        Box::new(move |g| {
            let mut gb = Tensor::zeros(&bshape);
            {
                let gbd = gb.data_mut();
                for (i, &v) in g.data().iter().enumerate() {
                    gbd[i % blen] = gbd[i % blen] + v;
                }
            }
            vec![Some(g.clone()), Some(gb)]
        }),
    ))
}

pub fn sum<T: Scalar>(a: &Var<T>) -> Var<T> {
    let shape = a.shape().to_vec();
    Var::from_op(
        Tensor::scalar(a.value().sum()),
        &[a],
        Box::new(move |g| vec![Some(Tensor::full(&shape, g.data()[0]))]),
    )
}

pub fn mean<T: Scalar>(a: &Var<T>) -> Var<T> {
    let n = T::lit(a.value().numel() as f64);
    scale(&sum(a), T::one() / n)
}

pub fn reshape<T: Scalar>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let out = a.value().clone().reshaped(shape)?;
    let orig = a.shape().to_vec();
    Ok(Var::from_op(
        out,
        &[a],
        Box::new(move |g| vec![Some(g.clone().reshaped(&orig).expect("same numel"))]),
    ))
}

/// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_FILL`.
///
/// Covers permutations, window partitioning, cyclic shifts, padding and
/// cropping. The backward rule scatter-adds, so repeated indices (e.g. a
/// relative-position table materialized into a full bias) accumulate.
pub fn gather<T: Scalar>(x: &Var<T>, out_shape: &[usize], index: Rc<[usize]>) -> Result<Var<T>> {
    let n: usize = out_shape.iter().product();
    if index.len() != n {
        return Err(Error::shape(
            "gather",
            format!("index has {} entries for shape {:?}", index.len(), out_shape),
        ));
    }
    let src = x.value().data();
    if let Some(&bad) = index
        .iter()
        .find(|&&i| i != ZERO_FILL && i >= src.len())
    {
        return Err(Error::shape(
            "gather",
            format!("index {} out of range for {} elements", bad, src.len()),
        ));
    }
    let data = index
        .iter()
        .map(|&i| if i == ZERO_FILL { T::zero() } else { src[i] })
        .collect();
    let out = Tensor::new(out_shape, data)?;
    let in_shape = x.shape().to_vec();
    Ok(Var::from_op(
        out,
        &[x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (&i, &v) in index.iter().zip(g.data()) {
                if i != ZERO_FILL {
                    gd[i] = gd[i] + v;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Index map for an axis permutation: `out` axis `k` is input axis `perm[k]`.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Rc<[usize]>) {
    assert_eq!(shape.len(), perm.len());
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        let off: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        index.push(off);
        for a in (0..rank).rev() {
            counter[a] += 1;
            if counter[a] < out_shape[a] {
                break;
            }
            counter[a] = 0;
        }
    }
    (out_shape, index.into())
}

pub fn permute<T: Scalar>(x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
    if perm.len() != x.shape().len() {
        return Err(Error::shape(
            "permute",
            format!("perm {:?} for shape {:?}", perm, x.shape()),
        ));
    }
    let (shape, index) = permute_index(x.shape(), perm);
    gather(x, &shape, index)
}

/// Concatenates two NCHW maps along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (na, ca, ha, wa) = super::tensor::dims4("concat_channels", a.shape())?;
    let (nb, cb, hb, wb) = super::tensor::dims4("concat_channels", b.shape())?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("N/H/W {:?} vs {:?}", (na, ha, wa), (nb, hb, wb)),
        ));
    }
    let hw = ha * wa;
    let c = ca + cb;
    let mut out = Vec::with_capacity(na * c * hw);
    for n in 0..na {
        out.extend_from_slice(&a.value().data()[n * ca * hw..(n + 1) * ca * hw]);
        out.extend_from_slice(&b.value().data()[n * cb * hw..(n + 1) * cb * hw]);
    }
    let out = Tensor::new(&[na, c, ha, wa], out)?;
    Ok(Var::from_op(
        out,
        &[a, b],
        Box::new(move |g| {
            let gd = g.data();
            let mut ga = Vec::with_capacity(na * ca * hw);
            let mut gb = Vec::with_capacity(na * cb * hw);
            for n in 0..na {
                let base = n * c * hw;
                ga.extend_from_slice(&gd[base..base + ca * hw]);
                gb.extend_from_slice(&gd[base + ca * hw..base + c * hw]);
            }
            vec![
                Some(Tensor::new(&[na, ca, ha, wa], ga).expect("shape")),
                Some(Tensor::new(&[na, cb, ha, wa], gb).expect("shape")),
            ]
        }),
    ))
}

/// Batched matrix product: `a` is `[.., n, k]`, `b` is `[.., k, m]` (or
/// `[.., m, k]` with `trans_b`), sharing identical leading axes.
pub fn bmm<T: Scalar>(a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
        return Err(Error::shape("bmm", format!("{:?} x {:?}", ash, bsh)));
    }
    let r = ash.len();
    let (n, k) = (ash[r - 2], ash[r - 1]);
    let (kb, m) = if trans_b {
        (bsh[r - 1], bsh[r - 2])
    } else {
        (bsh[r - 2], bsh[r - 1])
    };
    if k != kb {
        return Err(Error::shape(
            "bmm",
            format!("inner extents {} vs {} ({:?} x {:?})", k, kb, ash, bsh),
        ));
    }
    let batch: usize = ash[..r - 2].iter().product();
    let mut out_shape = ash[..r - 2].to_vec();
    out_shape.extend([n, m]);
    let mut out = vec![T::zero(); batch * n * m];
    let (ad, bd) = (a.value().data(), b.value().data());
    for i in 0..batch {
        T::gemm(
            n,
            k,
            m,
            &ad[i * n * k..],
            false,
            &bd[i * k * m..],
            trans_b,
            T::zero(),
            &mut out[i * n * m..(i + 1) * n * m],
        );
    }
    let out = Tensor::new(&out_shape, out)?;
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Var::from_op(
        out,
        &[a, b],
        Box::new(move |g| {
            let gd = g.data();
            let (ad, bd) = (ac.value().data(), bc.value().data());
            let ga = ac.requires_grad().then(|| {
                // dA = G * op(B)^T
                let mut ga = vec![T::zero(); batch * n * k];
                for i in 0..batch {
                    T::gemm(
                        n,
                        m,
                        k,
                        &gd[i * n * m..],
                        false,
                        &bd[i * k * m..],
                        !trans_b,
                        T::zero(),
                        &mut ga[i * n * k..(i + 1) * n * k],
                    );
                }
                Tensor::new(ac.shape(), ga).expect("shape")
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![T::zero(); batch * k * m];
                for i in 0..batch {
                    if trans_b {
                        // B stored m x k: dB = G^T * A
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[i * n * m..],
                            true,
                            &ad[i * n * k..],
                            false,
                            T::zero(),
                            &mut gb[i * k * m..(i + 1) * k * m],
                        );
                    } else {
                        // dB = A^T * G
                        T::gemm(
                            k,
                            n,
                            m,
                            &ad[i * n * k..],
                            true,
                            &gd[i * n * m..],
                            false,
                            T::zero(),
                            &mut gb[i * k * m..(i + 1) * k * m],
                        );
                    }
                }
                Tensor::new(bc.shape(), gb).expect("shape")
            });
            vec![ga, gb]
        }),
    ))
}

/// Affine map on the last axis: `y = x W^T + b` with `W` of shape
/// `[d_out, d_in]`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let xs = x.shape();
    let (d_out, d_in) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape("linear", format!("weight {:?}", w.shape()))),
    };
    if xs.last() != Some(&d_in) {
        return Err(Error::shape(
            "linear",
            format!("input last axis {:?} vs weight in-features {}", xs.last(), d_in),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs out-features {}", b.shape(), d_out),
            ));
        }
    }
    let rows = x.value().numel() / d_in;
    let mut out = vec![T::zero(); rows * d_out];
    T::gemm(
        rows,
        d_in,
        d_out,
        x.value().data(),
        false,
        w.value().data(),
        true,
        T::zero(),
        &mut out,
    );
    if let Some(b) = b {
        let bd = b.value().data();
        for row in out.chunks_mut(d_out) {
            for (v, &bb) in row.iter_mut().zip(bd) {
                *v = *v + bb;
            }
        }
    }
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().expect("rank >= 1") = d_out;
    let out = Tensor::new(&out_shape, out)?;
    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    Ok(Var::from_op(
        out,
        &parents,
        Box::new(move |g| {
            let gd = g.data();
            let gx = xc.requires_grad().then(|| {
                let mut gx = vec![T::zero(); rows * d_in];
                T::gemm(
                    rows,
                    d_out,
                    d_in,
                    gd,
                    false,
                    wc.value().data(),
                    false,
                    T::zero(),
                    &mut gx,
                );
                Tensor::new(xc.shape(), gx).expect("shape")
            });
            let gw = wc.requires_grad().then(|| {
                let mut gw = vec![T::zero(); d_out * d_in];
                T::gemm(
                    d_out,
                    rows,
                    d_in,
                    gd,
                    true,
                    xc.value().data(),
                    false,
                    T::zero(),
                    &mut gw,
                );
                Tensor::new(&[d_out, d_in], gw).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); d_out];
                for row in gd.chunks(d_out) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                grads.push(Some(Tensor::new(&[d_out], gb).expect("shape")));
            }
            grads
        }),
    ))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Var<T>) -> Var<T> {
    let d = x.shape().last().copied().unwrap_or(1).max(1);
    let mut out = x.value().clone();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    let y = out.clone();
    Var::from_op(
        out,
        &[x],
        Box::new(move |g| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (a, &b) in gr.iter_mut().zip(yr) {
                    *a = b * (*a - dot);
                }
            }
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(sigmoid_scalar);
    let y = out.clone();
    Var::from_op(
        out,
        &[x],
        Box::new(move |g| vec![Some(g.zip_map(&y, |g, s| g * s * (T::one() - s)))]),
    )
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}

/// Exact gelu `x * Phi(x)`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * std_normal_cdf(x)
}

pub fn gelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(gelu_scalar);
    let xv = x.value().clone();
    Var::from_op(
        out,
        &[x],
        Box::new(move |g| {
            vec![Some(g.zip_map(&xv, |g, x| {
                g * (std_normal_cdf(x) + x * std_normal_pdf(x))
            }))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::backward;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = Var::constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = Var::constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero_b = Var::constant(Tensor::zeros(&[3]));
        let y = linear(&x, &eye, Some(&zero_b)).unwrap();
        assert_eq!(y.value(), x.value());

        let w0 = Var::constant(Tensor::zeros(&[2, 3]));
        let b = Var::constant(t(&[2], &[0.5, -1.5]));
        let y = linear(&x, &w0, Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn linear_rejects_wrong_in_features() {
        let x = Var::constant(Tensor::<f64>::zeros(&[2, 4]));
        let w = Var::constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(linear(&x, &w, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_matches_naive_matmul() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[4, 5], |i| ((i * 3 % 13) as f64 - 6.0) * 0.07);
        let b = Tensor::from_fn(&[4], |i| i as f64 * 0.01);
        let y = linear(
            &Var::constant(x.clone()),
            &Var::constant(w.clone()),
            Some(&Var::constant(b.clone())),
        )
        .unwrap();
        for r in 0..6 {
            for o in 0..4 {
                let mut s = b.data()[o];
                for i in 0..5 {
                    s += x.data()[r * 5 + i] * w.data()[o * 5 + i];
                }
                assert!((y.value().data()[r * 4 + o] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_lastdim(&Var::constant(t(&[4], &[0.0; 4])));
        for &v in y.value().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let y = softmax_lastdim(&Var::constant(t(&[2], &[1000.0, 0.0])));
        assert_eq!(y.value().data()[0], 1.0);
        assert!(y.value().data()[1] < 1e-300);
        let a = softmax_lastdim(&Var::constant(t(&[3], &[0.3, -1.2, 2.0])));
        let b = softmax_lastdim(&Var::constant(t(&[3], &[7.3, 5.8, 9.0])));
        assert!(a.value().max_abs_diff(b.value()) < 1e-12);
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(sigmoid_scalar(-1000.0f64), 0.0);
        assert_eq!(sigmoid_scalar(-1000.0f32), 0.0);
        for i in -40..=40 {
            let x = i as f64 * 0.25;
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // 3 * Phi(3), Phi(3) = 0.998650101968370
        assert!((gelu_scalar(3.0f64) - 2.995950305905).abs() < 1e-9);
        let mut prev = 0.0;
        for i in 0..400 {
            let v = gelu_scalar(i as f64 * 0.01);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn gather_zero_fill_and_scatter_back() {
        let x = Var::input(t(&[3], &[1.0, 2.0, 3.0]));
        let idx: Rc<[usize]> = vec![2, ZERO_FILL, 0, 2].into();
        let y = gather(&x, &[4], idx).unwrap();
        assert_eq!(y.value().data(), &[3.0, 0.0, 1.0, 3.0]);
        let g = backward(&sum(&y)).unwrap().wrt(&x);
        assert_eq!(g.data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn permute_transposes() {
        let x = Var::constant(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64));
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn add_bcast_rejects_non_suffix() {
        let x = Var::constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = Var::constant(Tensor::zeros(&[2]));
        assert!(add_bcast(&x, &b).is_err());
    }
}
