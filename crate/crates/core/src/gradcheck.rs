//! Finite-difference gradient checks in double precision.
//!
//! Every check reduces the output under test to a scalar with a fixed random
//! projection `sum(out * r)`, compares the analytic gradient against the
//! central difference `(f(x + h) - f(x - h)) / 2h` on a sample of
//! coordinates of every tensor, and reports the worst tensor-wise relative
//! error `||a - n|| / max(||a||, ||n||, NORM_FLOOR)`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{sw_mhsa, w_mhsa, WindowLayout};
use crate::engine::{
    backward, batch_norm2d, bmm, conv2d, conv_transpose2d, gelu, layer_norm, linear, mul, sigmoid,
    softmax_lastdim, sum, NormMode, Tensor, Var,
};
use crate::error::Result;
use crate::layers::{Ctx, Module};
use crate::loss::{
    cross_entropy_loss, deep_supervision_loss, soft_dice_loss, LabelMap, LabelPyramid, SupervisionWeights,
};
use crate::model::{build_model, ModelConfig, Precision, SfbNet};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Denominator floor. Gradient vectors below it are indistinguishable from
/// finite-difference roundoff (about `1e-16 |f| / h`).
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Images in the end-to-end batch.
    pub batch: usize,
    /// Batch statistics in the end-to-end check instead of running
    /// statistics.
    pub train_norm: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            coords_per_tensor: 8,
            seed: 0,
            batch: 2,
            train_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub worst_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component.as_str())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.components.iter().map(|c| c.worst_rel_err).fold(0.0, f64::max)
    }
}

/// `||a - n|| / max(||a||, ||n||, NORM_FLOOR)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

fn coords(numel: usize, limit: usize, rng: &mut impl Rng) -> Vec<usize> {
    if numel <= limit {
        (0..numel).collect()
    } else {
        let mut v = sample(rng, numel, limit).into_vec();
        v.sort_unstable();
        v
    }
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// `sum(out * r)` with `r` fixed by `seed` and the output shape.
fn project(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Var::constant(Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0)));
    Ok(sum(&mul(out, &r)?))
}

type BuildFn<'a> = dyn Fn(&[Var<f64>]) -> Result<Var<f64>> + 'a;

/// Checks the gradient of `build(inputs)` with respect to every input.
/// `build` returns any tensor; it is reduced by a fixed random projection.
pub fn check_component(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &BuildFn<'_>,
    opts: &GradcheckOptions,
) -> Result<ComponentResult> {
    let seed = opts.seed ^ 0xC0FFEE;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<_> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(project(&build(&vars)?, seed)?.value().data()[0])
    };
    let vars: Vec<_> = inputs.iter().map(|t| Var::input(t.clone())).collect();
    let grads = backward(&project(&build(&vars)?, seed)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(v);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for j in coords(inputs[i].numel(), opts.coords_per_tensor, &mut rng) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            analytic.push(g.data()[j]);
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        checked += analytic.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(ComponentResult {
        component: name.to_owned(),
        worst_rel_err: worst,
        checked,
        passed: worst < opts.tolerance,
    })
}

/// Layer that owns a parameter: the name with its last segment removed.
pub fn layer_of(param_name: &str) -> &str {
    param_name.rsplit_once('.').map_or(param_name, |(layer, _)| layer)
}

/// Checks parameter gradients of `module` under `loss`, grouped per layer
/// as `"{prefix}{layer}"`. Perturbed evaluations run with `ctx.train` and
/// no gradient tracking.
pub fn check_module_params<M: Module<f64>>(
    prefix: &str,
    module: &mut M,
    ctx: Ctx,
    loss: &mut dyn FnMut(&mut M, Ctx) -> Result<Var<f64>>,
    opts: &GradcheckOptions,
) -> Result<Vec<ComponentResult>> {
    let grads = backward(&loss(module, Ctx { track: true, ..ctx })?)?;
    let mut targets = Vec::new();
    module.visit_params(&mut |p| {
        let g = grads
            .param(p.key())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        targets.push((p.name.clone(), p.numel(), g));
    });
    let probe = Ctx { track: false, ..ctx };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xA11CE);
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (name, numel, g) in &targets {
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for j in coords(*numel, opts.coords_per_tensor, &mut rng) {
            let nudge = |delta: f64, m: &mut M| {
                m.visit_params_mut(&mut |p| {
                    if &p.name == name {
                        p.value.data_mut()[j] += delta;
                    }
                })
            };
            nudge(opts.step, module);
            let plus = loss(module, probe)?.value().data()[0];
            nudge(-2.0 * opts.step, module);
            let minus = loss(module, probe)?.value().data()[0];
            nudge(opts.step, module);
            analytic.push(g.data()[j]);
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        let entry = groups.entry(format!("{prefix}{}", layer_of(name))).or_default();
        entry.0 = entry.0.max(relative_error(&analytic, &numeric));
        entry.1 += analytic.len();
    }
    Ok(groups
        .into_iter()
        .map(|(component, (worst, checked))| ComponentResult {
            component,
            passed: worst < opts.tolerance,
            worst_rel_err: worst,
            checked,
        })
        .collect())
}

fn random_labels(n: usize, h: usize, w: usize, classes: usize, rng: &mut impl Rng) -> LabelMap {
    let data = (0..n * h * w).map(|_| rng.random_range(0..classes as i32)).collect();
    LabelMap::new(n, h, w, data).expect("sized")
}

/// Primitive and block-level checks on small random inputs.
pub fn primitive_checks(opts: &GradcheckOptions) -> Result<Vec<ComponentResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut r = |shape: &[usize]| randn(shape, &mut rng);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &BuildFn<'_>| -> Result<()> {
        out.push(check_component(name, &inputs, f, opts)?);
        Ok(())
    };

    run("conv2d", vec![r(&[2, 3, 5, 5]), r(&[4, 3, 3, 3]), r(&[4])], &|v| {
        conv2d(&v[0], &v[1], Some(&v[2]), 2, 1)
    })?;
    run("conv_transpose2d", vec![r(&[2, 3, 3, 3]), r(&[3, 2, 2, 2]), r(&[2])], &|v| {
        conv_transpose2d(&v[0], &v[1], Some(&v[2]), 2)
    })?;
    run("batch_norm2d", vec![r(&[3, 2, 3, 3]), r(&[2]), r(&[2])], &|v| {
        Ok(batch_norm2d(&v[0], &v[1], &v[2], NormMode::Train, None)?.0)
    })?;
    run("layer_norm", vec![r(&[4, 6]), r(&[6]), r(&[6])], &|v| {
        layer_norm(&v[0], &v[1], &v[2])
    })?;
    run("linear", vec![r(&[3, 5]), r(&[4, 5]), r(&[4])], &|v| {
        linear(&v[0], &v[1], Some(&v[2]))
    })?;
    run("bmm", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], &|v| bmm(&v[0], &v[1], true))?;
    run("softmax", vec![r(&[3, 5])], &|v| Ok(softmax_lastdim(&v[0])))?;
    run("gelu", vec![r(&[12])], &|v| Ok(gelu(&v[0])))?;
    run("sigmoid", vec![r(&[12])], &|v| Ok(sigmoid(&v[0])))?;

    let layout = WindowLayout::new(5, 5, 3)?;
    let mask = layout.attention_mask();
    run(
        "w_mhsa",
        vec![r(&[1, 4, 5, 5]), r(&[1, 4, 5, 5]), r(&[1, 4, 5, 5]), r(&[2, 9, 9])],
        &|v| Ok(w_mhsa(&v[0], &v[1], &v[2], 2, &layout, Some(&v[3]), &mask)?.out),
    )?;
    run(
        "sw_mhsa",
        vec![r(&[1, 4, 6, 6]), r(&[1, 4, 6, 6]), r(&[1, 4, 6, 6]), r(&[2, 16, 16])],
        &|v| Ok(sw_mhsa(&v[0], &v[1], &v[2], 2, 4, Some(&v[3]))?.0.out),
    )?;

    let mut lrng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1AB);
    let labels = random_labels(2, 4, 4, 4, &mut lrng);
    run("cross_entropy", vec![r(&[2, 4, 4, 4])], &|v| cross_entropy_loss(&v[0], &labels))?;
    run("soft_dice", vec![r(&[2, 4, 4, 4])], &|v| soft_dice_loss(&v[0], &labels))?;
    let full = random_labels(2, 8, 8, 4, &mut lrng);
    let pyramid = LabelPyramid::from_full(&full)?;
    run(
        "deep_supervision",
        vec![r(&[2, 4, 8, 8]), r(&[2, 4, 4, 4]), r(&[2, 4, 2, 2])],
        &|v| Ok(deep_supervision_loss([&v[0], &v[1], &v[2]], &pyramid, SupervisionWeights::default())?.total),
    )?;
    Ok(out)
}

/// End-to-end checks on a double-precision model built from `config`:
/// one component per parameterized layer plus the input gradient.
pub fn model_checks(config: &ModelConfig, opts: &GradcheckOptions) -> Result<Vec<ComponentResult>> {
    let config = ModelConfig {
        precision: Precision::F64,
        ..config.clone()
    };
    let mut model = build_model::<f64>(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xD00D);
    // constant-initialized tensors (zero gates, unit gains) get jitter so
    // their gradients are exercised away from the symmetric point
    model.visit_params_mut(&mut |p| {
        let first = p.value.data()[0];
        if p.value.data().iter().all(|&v| v == first) {
            for v in p.value.data_mut() {
                *v += 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
    });
    let [h, w] = config.input_size;
    let batch = opts.batch.max(1);
    let image = randn(&[batch, config.in_channels, h, w], &mut rng);
    let labels = random_labels(batch, h, w, config.classes, &mut rng);
    let pyramid = LabelPyramid::from_full(&labels)?;
    let weights = SupervisionWeights::default();
    let ctx = Ctx {
        train: opts.train_norm,
        track: true,
    };

    let mut loss = |m: &mut SfbNet<f64>, ctx: Ctx| -> Result<Var<f64>> {
        let out = m.forward(&Var::constant(image.clone()), ctx)?;
        Ok(deep_supervision_loss(out.as_array(), &pyramid, weights)?.total)
    };
    let mut results = check_module_params("model:", &mut model, ctx, &mut loss, opts)?;

    let model = RefCell::new(model);
    let input = check_component(
        "model:input",
        std::slice::from_ref(&image),
        &|v| {
            let out = model.borrow_mut().forward(&v[0], ctx)?;
            Ok(deep_supervision_loss(out.as_array(), &pyramid, weights)?.total)
        },
        opts,
    )?;
    results.push(input);
    Ok(results)
}

/// Runs every primitive check and the end-to-end model checks.
pub fn run_gradcheck(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut components = primitive_checks(opts)?;
    components.extend(model_checks(config, opts)?);
    Ok(GradcheckReport {
        components,
        tolerance: opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}
