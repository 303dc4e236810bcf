//! Brute-force reference implementations shared by the integration tests.
//! None of them call into the library code they are compared against.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sfbnet::engine::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Which padded position a rolled-frame coordinate holds and whether the
/// cyclic shift wrapped it around.
fn unroll(r: usize, shift: usize, padded: usize) -> (usize, bool) {
    ((r + shift) % padded, r + shift >= padded)
}

/// Reference windowed attention on NCHW maps that already hold projected
/// queries, keys and values.
///
/// Maps are zero padded to multiples of `m`, cyclically shifted by
/// `shift` and cut into `m x m` windows. Inside a window token `p` may
/// attend to `q` only when both are real positions, or both padding, and
/// neither axis wraps for one but not the other. `bias[h][(dy+m-1)*(2m-1)
/// + dx+m-1]` is added per head, with `(dy, dx)` the in-window offset.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    shape: [usize; 4],
    cv: usize,
    heads: usize,
    m: usize,
    shift: usize,
    bias: Option<&[Vec<f64>]>,
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let d = c / heads;
    let dv = cv / heads;
    let span = 2 * m - 1;
    let at = |t: &[f64], ch: usize, cc: usize, b: usize, y: usize, x: usize| -> f64 {
        if y < h && x < w {
            t[((b * ch + cc) * h + y) * w + x]
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; n * cv * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                // rolled coordinates of the query
                let ry = (y + hp - shift % hp) % hp;
                let rx = (x + wp - shift % wp) % wp;
                let (wy, wx) = (ry / m, rx / m);
                let (_, qwy) = unroll(ry, shift, hp);
                let (_, qwx) = unroll(rx, shift, wp);
                let mut keys = Vec::with_capacity(m * m);
                for ty in 0..m {
                    for tx in 0..m {
                        let (ky, kwy) = unroll(wy * m + ty, shift, hp);
                        let (kx, kwx) = unroll(wx * m + tx, shift, wp);
                        let real = ky < h && kx < w;
                        let allowed = real && kwy == qwy && kwx == qwx;
                        keys.push((ky, kx, ty, tx, allowed));
                    }
                }
                let (qy_in, qx_in) = (ry - wy * m, rx - wx * m);
                for head in 0..heads {
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|&(ky, kx, ty, tx, allowed)| {
                            if !allowed {
                                return f64::NEG_INFINITY;
                            }
                            let mut s = 0.0;
                            for j in 0..d {
                                let cc = head * d + j;
                                s += at(q, c, cc, b, y, x) * at(k, c, cc, b, ky, kx);
                            }
                            s /= (d as f64).sqrt();
                            if let Some(bias) = bias {
                                let dy = qy_in as isize - ty as isize + m as isize - 1;
                                let dx = qx_in as isize - tx as isize + m as isize - 1;
                                s += bias[head][dy as usize * span + dx as usize];
                            }
                            s
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..dv {
                        let cc = head * dv + j;
                        let mut acc = 0.0;
                        for (p, &(ky, kx, _, _, _)) in e.iter().zip(&keys) {
                            acc += p / z * at(v, cv, cc, b, ky, kx);
                        }
                        out[((b * cv + cc) * h + y) * w + x] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Unwindowed multi-head attention over all `h * w` positions.
pub fn full_attention_oracle(q: &[f64], k: &[f64], v: &[f64], shape: [usize; 4], heads: usize) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let t = h * w;
    let d = c / heads;
    let mut out = vec![0.0; n * c * t];
    for b in 0..n {
        for head in 0..heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..d)
                            .map(|e| {
                                let cc = (b * c + head * d + e) * t;
                                q[cc + i] * k[cc + j]
                            })
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for ch in 0..d {
                    let cc = (b * c + head * d + ch) * t;
                    out[cc + i] = (0..t).map(|j| e[j] / z * v[cc + j]).sum();
                }
            }
        }
    }
    out
}

/// `[heads, t, t]` bias tensor from per-head offset tables.
pub fn materialize_bias<T: Scalar>(tables: &[Vec<f64>], m: usize) -> Tensor<T> {
    let t = m * m;
    let span = 2 * m - 1;
    Tensor::from_fn(&[tables.len(), t, t], |i| {
        let (head, p, q) = (i / (t * t), (i / t) % t, i % t);
        let dy = (p / m) as isize - (q / m) as isize + m as isize - 1;
        let dx = (p % m) as isize - (q % m) as isize + m as isize - 1;
        T::lit(tables[head][dy as usize * span + dx as usize])
    })
}

/// Largest 4-connected foreground component by breadth-first flood fill.
/// Ties go to the component whose first pixel comes earliest in row-major
/// order.
pub fn flood_fill_largest(labels: &[i32], h: usize, w: usize) -> Vec<i32> {
    let mut comp = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    for start in 0..h * w {
        if labels[start] == 0 || comp[start] != usize::MAX {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([start]);
        comp[start] = next;
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if labels[j] != 0 && comp[j] == usize::MAX {
                    comp[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        None => labels.to_vec(),
        Some((id, _)) => labels
            .iter()
            .zip(&comp)
            .map(|(&l, &c)| if c == id { l } else { 0 })
            .collect(),
    }
}

/// Number of 4-connected foreground components.
pub fn count_components(labels: &[i32], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for s in 0..h * w {
        if labels[s] == 0 || seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let cand = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in cand.into_iter().flatten() {
                if labels[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

/// Dice by set counting.
pub fn dice_oracle(pred: &[i32], truth: &[i32], class: i32) -> f64 {
    let p: std::collections::HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let g: std::collections::HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

/// Random blobby label plane with values in `0..classes`.
pub fn random_blobs(h: usize, w: usize, classes: i32, density: f64, rng: &mut impl Rng) -> Vec<i32> {
    let mut m = vec![0; h * w];
    let blobs = rng.random_range(1..12);
    for _ in 0..blobs {
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let r = rng.random_range(1.0..(h.min(w) as f64 / 5.0).max(1.5));
        let class = rng.random_range(1..classes);
        for y in 0..h {
            for x in 0..w {
                let dd = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if dd <= r * r {
                    m[y * w + x] = class;
                }
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(density) {
            *v = rng.random_range(0..classes);
        }
    }
    m
}
