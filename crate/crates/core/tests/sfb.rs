mod common;

use std::cell::RefCell;

use common::{max_abs_diff, randn, rng, window_attention_oracle};
use rand::Rng;
use sfbnet::engine::{ParamRegistry, Tensor, Var};
use sfbnet::gradcheck::{check_component, GradcheckOptions};
use sfbnet::layers::{Ctx, Module};
use sfbnet::sfb::{GateMode, SecondStage, SwinFilteringBlock};

fn block(channels: usize, heads: usize, window: usize, stage: SecondStage, gate: GateMode, seed: u64) -> SwinFilteringBlock<f64> {
    let mut reg = ParamRegistry::new();
    SwinFilteringBlock::new(&mut reg, "sfb", channels, heads, window, stage, gate, &mut rng(seed)).unwrap()
}

/// Random gate weights and running statistics so the gate is not constant.
fn randomize(b: &mut SwinFilteringBlock<f64>, seed: u64) {
    let mut r = rng(seed);
    b.visit_params_mut(&mut |p| {
        let shape = p.value.shape().to_vec();
        let scale = if p.name.ends_with("gate_bn.gamma") { 1.0 } else { 0.5 };
        p.value = randn::<f64>(&shape, &mut r).map(|v| v * scale);
    });
    b.visit_buffers_mut(&mut |name, t| {
        let shape = t.shape().to_vec();
        *t = if name.ends_with("var") {
            Tensor::from_fn(&shape, |_| r.random_range(0.5..2.0))
        } else {
            randn(&shape, &mut r)
        };
    });
}

fn param(b: &SwinFilteringBlock<f64>, suffix: &str) -> Tensor<f64> {
    let mut out = None;
    b.visit_params(&mut |p| {
        if p.name.ends_with(suffix) {
            out = Some(p.value.clone());
        }
    });
    out.unwrap_or_else(|| panic!("no parameter ending in {suffix}"))
}

fn buffer(b: &SwinFilteringBlock<f64>, suffix: &str) -> Tensor<f64> {
    let mut out = None;
    b.visit_buffers(&mut |name, t| {
        if name.ends_with(suffix) {
            out = Some(t.clone());
        }
    });
    out.unwrap_or_else(|| panic!("no buffer ending in {suffix}"))
}

/// Per-position linear map over channels: `y[o] = sum_i w[o, i] x[i] + b[o]`.
fn project(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, [n, c, h, wd]: [usize; 4]) -> Vec<f64> {
    let o = w.shape()[0];
    let hw = h * wd;
    let mut out = vec![0.0; n * o * hw];
    for bi in 0..n {
        for oc in 0..o {
            for p in 0..hw {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    acc += w.data()[oc * w.shape()[1] + ic] * x[(bi * c + ic) * hw + p];
                }
                out[(bi * o + oc) * hw + p] = acc;
            }
        }
    }
    out
}

fn offset_tables(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|c| c.to_vec()).collect()
}

/// The whole block as one straight-line function in eval mode.
fn reference(b: &SwinFilteringBlock<f64>, f_enc: &Tensor<f64>, f_dec: &Tensor<f64>) -> Vec<f64> {
    let shape = [f_enc.shape()[0], f_enc.shape()[1], f_enc.shape()[2], f_enc.shape()[3]];
    let (c, m, heads) = (shape[1], b.window, b.heads);
    let lin = |x: &[f64], name: &str| project(x, &param(b, &format!("{name}.weight")), &param(b, &format!("{name}.bias")), shape);
    let q1 = lin(f_dec.data(), "q1");
    let k1 = lin(f_dec.data(), "k1");
    let v1 = lin(f_enc.data(), "v1");
    let t1 = offset_tables(&param(b, ".w_msa.rel_bias"));
    let inter = window_attention_oracle(&q1, &k1, &v1, shape, c, heads, m, 0, Some(&t1));
    let qk_src = match b.second_stage {
        SecondStage::CrossDecoder => f_dec.data().to_vec(),
        SecondStage::SelfIntermediate => inter.clone(),
    };
    let q2 = lin(&qk_src, "q2");
    let k2 = lin(&qk_src, "k2");
    let v2 = lin(&inter, "v2");
    let t2 = offset_tables(&param(b, ".sw_msa.rel_bias"));
    let ca = window_attention_oracle(&q2, &k2, &v2, shape, c, heads, m, m / 2, Some(&t2));
    let pre = project(&ca, &param(b, "gate_conv.weight"), &param(b, "gate_conv.bias"), shape);
    let (gamma, beta) = (param(b, "gate_bn.gamma"), param(b, "gate_bn.beta"));
    let (mean, var) = (buffer(b, "mean"), buffer(b, "var"));
    let hw = shape[2] * shape[3];
    pre.iter()
        .enumerate()
        .map(|(i, &z)| {
            let ch = (i / hw) % c;
            let bn = (z - mean.data()[ch]) / (var.data()[ch] + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
            let w = 1.0 / (1.0 + (-bn).exp());
            f_enc.data()[i] * w
        })
        .collect()
}

#[test]
fn matches_straight_line_reference_c4_8x8_m4() {
    for (stage, seed) in [(SecondStage::CrossDecoder, 1), (SecondStage::SelfIntermediate, 2)] {
        let mut b = block(4, 2, 4, stage, GateMode::Learned, seed);
        randomize(&mut b, seed + 10);
        let mut r = rng(seed + 20);
        let f_enc = randn::<f64>(&[2, 4, 8, 8], &mut r);
        let f_dec = randn::<f64>(&[2, 4, 8, 8], &mut r);
        let got = b
            .forward(&Var::constant(f_enc.clone()), &Var::constant(f_dec.clone()), Ctx::EVAL)
            .unwrap();
        let want = reference(&b, &f_enc, &f_dec);
        let d = max_abs_diff(got.value().data(), &want);
        assert!(d < 1e-5, "{stage:?}: {d:e}");
    }
}

#[test]
fn zero_encoder_map_gives_zero_output() {
    let mut b = block(8, 2, 4, SecondStage::CrossDecoder, GateMode::Learned, 3);
    randomize(&mut b, 4);
    let f_dec = randn::<f64>(&[1, 8, 8, 8], &mut rng(5));
    let out = b
        .forward(&Var::constant(Tensor::zeros(&[1, 8, 8, 8])), &Var::constant(f_dec), Ctx::EVAL)
        .unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_lies_strictly_inside_unit_interval_and_shrinks_encoder() {
    let mut r = rng(6);
    for (train, seed) in [(false, 7), (true, 8)] {
        let mut b = block(8, 4, 4, SecondStage::CrossDecoder, GateMode::Learned, seed);
        randomize(&mut b, seed + 1);
        let f_enc = randn::<f64>(&[2, 8, 12, 12], &mut r);
        let f_dec = randn::<f64>(&[2, 8, 12, 12], &mut r).map(|v| v * 3.0);
        let ctx = Ctx { train, track: false };
        let tr = b
            .forward_traced(&Var::constant(f_enc.clone()), &Var::constant(f_dec), ctx)
            .unwrap();
        assert!(tr.gate.value().data().iter().all(|&w| w > 0.0 && w < 1.0));
        assert_eq!(tr.out.shape(), f_enc.shape());
        for (o, e) in tr.out.value().data().iter().zip(f_enc.data()) {
            if *e != 0.0 {
                assert!(o.abs() < e.abs());
            }
        }
    }
}

#[test]
fn fresh_gate_starts_at_one_half() {
    let mut b = block(8, 2, 4, SecondStage::CrossDecoder, GateMode::Learned, 9);
    let mut r = rng(10);
    let tr = b
        .forward_traced(
            &Var::constant(randn::<f64>(&[1, 8, 8, 8], &mut r)),
            &Var::constant(randn::<f64>(&[1, 8, 8, 8], &mut r)),
            Ctx::EVAL,
        )
        .unwrap();
    assert!(tr.gate.value().data().iter().all(|&w| w == 0.5));
}

#[test]
fn forced_open_gate_returns_encoder_map_bitwise() {
    let mut b = block(8, 2, 4, SecondStage::CrossDecoder, GateMode::ForcedOpen, 11);
    let mut r = rng(12);
    let f_enc = randn::<f64>(&[2, 8, 8, 8], &mut r);
    let out = b
        .forward(&Var::constant(f_enc.clone()), &Var::constant(randn(&[2, 8, 8, 8], &mut r)), Ctx::TRAIN)
        .unwrap();
    assert!(out.value().data().iter().zip(f_enc.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn spatial_mismatch_is_a_contract_error() {
    let mut b = block(4, 2, 4, SecondStage::CrossDecoder, GateMode::Learned, 13);
    let e = Var::constant(Tensor::<f64>::zeros(&[1, 4, 8, 8]));
    let d = Var::constant(Tensor::<f64>::zeros(&[1, 4, 4, 4]));
    assert!(matches!(b.forward(&e, &d, Ctx::EVAL), Err(sfbnet::Error::Contract(_))));
}

#[test]
fn input_gradients_match_finite_differences() {
    for (train, padded) in [(false, false), (true, false), (false, true)] {
        let mut b = block(4, 2, 4, SecondStage::CrossDecoder, GateMode::Learned, 14);
        randomize(&mut b, 15);
        let size = if padded { 6 } else { 8 };
        let mut r = rng(16);
        let inputs = vec![randn::<f64>(&[2, 4, size, size], &mut r), randn::<f64>(&[2, 4, size, size], &mut r)];
        let cell = RefCell::new(b);
        let ctx = Ctx { train, track: false };
        let f = |v: &[Var<f64>]| cell.borrow_mut().forward(&v[0], &v[1], ctx);
        let res = check_component("sfb", &inputs, &f, &GradcheckOptions::default()).unwrap();
        assert!(res.passed, "train={train} padded={padded}: {:e}", res.worst_rel_err);
    }
}
