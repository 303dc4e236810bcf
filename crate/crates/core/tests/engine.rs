mod common;

use common::{randn, rng};
use proptest::prelude::*;
use sfbnet::engine::{
    backward, batch_norm2d, bmm, conv2d, conv_transpose2d, gelu, layer_norm, linear, mul, sigmoid,
    softmax_lastdim, sum, NormMode, Scalar, Tensor, Var,
};
use sfbnet::Result;

fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

/// Direct sliding-window cross-correlation.
fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (wt.shape()[0], wt.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[b, ic, iy as usize, ix as usize]) * wt.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    let off = out.offset(&[b, oc, oy, ox]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut r = rng(1);
    for (c, o, h, w, k, stride, pad) in [
        (1, 8, 5, 5, 3, 1, 1),
        (3, 4, 7, 6, 3, 2, 1),
        (2, 2, 4, 4, 1, 1, 0),
        (4, 3, 9, 9, 3, 2, 0),
    ] {
        let x = randn::<f64>(&[2, c, h, w], &mut r);
        let wt = randn::<f64>(&[o, c, k, k], &mut r);
        let b = randn::<f64>(&[o], &mut r);
        let got = conv2d(
            &Var::constant(x.clone()),
            &Var::constant(wt.clone()),
            Some(&Var::constant(b.clone())),
            stride,
            pad,
        )
        .unwrap();
        let want = conv_oracle(&x, &wt, b.data(), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.value().max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    // <conv(x), y> == <x, conv_transpose(y)> for stride == kernel, no padding
    let mut r = rng(2);
    for (c, o, k, h) in [(3, 5, 2, 8), (1, 4, 3, 9), (2, 2, 2, 4)] {
        let x = randn::<f64>(&[2, c, h, h], &mut r);
        let wt = randn::<f64>(&[o, c, k, k], &mut r);
        let cx = conv2d(&Var::constant(x.clone()), &Var::constant(wt.clone()), None, k, 0).unwrap();
        let y = randn::<f64>(cx.shape(), &mut r);
        // conv_transpose2d takes [in, out, k, k]; the conv kernel [o, c, k, k] is already that
        let ty = conv_transpose2d(&Var::constant(y.clone()), &Var::constant(wt.clone()), None, k).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs = dot(cx.value(), &y);
        let rhs = dot(&x, ty.value());
        assert!((lhs - rhs).abs() < 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn sum_of_squares_gradient_and_unreached_leaf() {
    let mut r = rng(3);
    let x = Var::input(randn::<f64>(&[3, 4], &mut r));
    let unused = Var::input(randn::<f64>(&[2], &mut r));
    let loss = sum(&mul(&x, &x).unwrap());
    let g = backward(&loss).unwrap();
    let want = x.value().map(|v| 2.0 * v);
    assert_eq!(g.wrt(&x).data(), want.data());
    assert!(g.wrt(&unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng(4);
    let mut x = randn::<f64>(&[5, 7, 9], &mut r);
    x.data_mut()[3] = 800.0;
    x.data_mut()[10] = -800.0;
    let p = softmax_lastdim(&Var::constant(x));
    for row in p.value().data().chunks(9) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn sigmoid_is_symmetric_and_stable() {
    let grid = Tensor::<f32>::from_fn(&[201], |i| (i as f32 - 100.0) * 0.37);
    let s = sigmoid(&Var::constant(grid.clone()));
    let neg = sigmoid(&Var::constant(grid.map(|v| -v)));
    for (a, b) in s.value().data().iter().zip(neg.value().data()) {
        assert!((a + b - 1.0).abs() < 1e-6);
    }
    let extreme = sigmoid(&Var::constant(Tensor::<f32>::new(&[2], vec![-1000.0, 1000.0]).unwrap()));
    assert_eq!(extreme.value().data(), &[0.0, 1.0]);
    assert!(extreme.value().is_finite());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut r = rng(5);
    let x = randn::<f32>(&[2, 3, 9, 9], &mut r);
    let wt = randn::<f32>(&[4, 3, 3, 3], &mut r);
    let run = || {
        let y = conv2d(&Var::constant(x.clone()), &Var::constant(wt.clone()), None, 1, 1).unwrap();
        let y = gelu(&y);
        softmax_lastdim(&y).value().clone()
    };
    assert_eq!(run().data(), run().data());
}

/// Central-difference check of `f` at `x` in single precision against the
/// gradient of `sum(f(x) * proj)`.
fn check_f32(x: &Tensor<f32>, f: &dyn Fn(&Var<f32>) -> Result<Var<f32>>, seed: u64) -> f64 {
    let mut r = rng(seed);
    let probe = f(&Var::constant(x.clone())).unwrap();
    let proj = randn::<f32>(probe.shape(), &mut r);
    let objective = |t: &Tensor<f32>| -> f64 {
        let y = f(&Var::constant(t.clone())).unwrap();
        y.value()
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };
    let xv = Var::input(x.clone());
    let y = f(&xv).unwrap();
    let loss = sum(&mul(&y, &Var::constant(proj.clone())).unwrap());
    let g = backward(&loss).unwrap().wrt(&xv);
    let h = 1e-2f32;
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        num.push((objective(&p) - objective(&m)) / (2.0 * h as f64));
        ana.push(g.data()[i] as f64);
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm(&num).max(norm(&ana)).max(1e-6)
}

#[test]
fn single_precision_gradients_within_1e_3() {
    let mut r = rng(6);
    let x4 = randn::<f32>(&[2, 3, 5, 5], &mut r);
    let wt = Var::constant(randn::<f32>(&[4, 3, 3, 3], &mut r));
    let wl = Var::constant(randn::<f32>(&[6, 5], &mut r));
    let gamma = Var::constant(randn::<f32>(&[3], &mut r));
    let beta = Var::constant(randn::<f32>(&[3], &mut r));
    let g5 = Var::constant(randn::<f32>(&[5], &mut r));
    let b5 = Var::constant(randn::<f32>(&[5], &mut r));
    let other = Var::constant(randn::<f32>(&[2, 3, 5, 5], &mut r));

    let cases: Vec<(&str, Box<dyn Fn(&Var<f32>) -> Result<Var<f32>>>)> = vec![
        ("conv2d", Box::new(|x| conv2d(x, &wt, None, 1, 1))),
        ("linear", Box::new(|x| linear(x, &wl, None))),
        ("softmax", Box::new(|x| Ok(softmax_lastdim(x)))),
        ("gelu", Box::new(|x| Ok(gelu(x)))),
        ("sigmoid", Box::new(|x| Ok(sigmoid(x)))),
        (
            "batch_norm2d",
            Box::new(|x| Ok(batch_norm2d(x, &gamma, &beta, NormMode::Train, None)?.0)),
        ),
        ("layer_norm", Box::new(|x| layer_norm(x, &g5, &b5))),
        (
            "bmm",
            Box::new(|x| {
                let a = sfbnet::engine::reshape(x, &[6, 5, 5])?;
                let b = sfbnet::engine::reshape(&other, &[6, 5, 5])?;
                bmm(&a, &b, true)
            }),
        ),
    ];
    for (i, (name, f)) in cases.iter().enumerate() {
        let err = check_f32(&x4, f.as_ref(), 100 + i as u64);
        assert!(err < 1e-3, "{name}: relative error {err:.3e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_output_shape_follows_formula(
        c in 1usize..4, o in 1usize..4, h in 3usize..12, w in 3usize..12,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
    ) {
        let x = Var::constant(Tensor::<f32>::ones(&[1, c, h, w]));
        let wt = Var::constant(Tensor::<f32>::ones(&[o, c, k, k]));
        let y = conv2d(&x, &wt, None, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[1, o, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
    }

    #[test]
    fn softmax_is_shift_invariant(vals in prop::collection::vec(-30.0f64..30.0, 2..12), shift in -50.0f64..50.0) {
        let n = vals.len();
        let a = softmax_lastdim(&Var::constant(Tensor::new(&[n], vals.clone()).unwrap()));
        let b = softmax_lastdim(&Var::constant(Tensor::new(&[n], vals.iter().map(|v| v + shift).collect()).unwrap()));
        prop_assert!(a.value().max_abs_diff(b.value()) < 1e-12);
    }
}
