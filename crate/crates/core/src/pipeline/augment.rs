//! Training-time augmentation. Geometric transforms move image and labels
//! together (bilinear for the image, nearest for labels); intensity
//! transforms touch the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::resample::{resize_bilinear, resize_nearest};
use super::Sample;
use crate::engine::Tensor;
use crate::loss::LabelMap;

/// Probabilities and ranges of each transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub max_rotation_deg: f64,
    pub p_scale: f64,
    pub scale_range: [f64; 2],
    pub p_mirror: f64,
    pub p_gamma: f64,
    pub gamma_range: [f64; 2],
    pub p_brightness: f64,
    pub brightness_range: [f64; 2],
    pub p_contrast: f64,
    pub contrast_range: [f64; 2],
    pub p_low_res: f64,
    pub low_res_range: [f64; 2],
    pub p_noise: f64,
    pub max_noise_std: f64,
    pub p_blur: f64,
    pub blur_sigma_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate: 0.2,
            max_rotation_deg: 15.0,
            p_scale: 0.2,
            scale_range: [0.85, 1.25],
            p_mirror: 0.5,
            p_gamma: 0.3,
            gamma_range: [0.7, 1.4],
            p_brightness: 0.15,
            brightness_range: [0.75, 1.25],
            p_contrast: 0.15,
            contrast_range: [0.75, 1.25],
            p_low_res: 0.25,
            low_res_range: [1.0, 2.0],
            p_noise: 0.1,
            max_noise_std: 0.1,
            p_blur: 0.2,
            blur_sigma_range: [0.5, 1.0],
        }
    }
}

/// Rotation about the image centre, isotropic zoom, then axis flips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub angle_rad: f64,
    pub scale: f64,
    pub flip_y: bool,
    pub flip_x: bool,
}

impl Default for GeometricTransform {
    fn default() -> Self {
        Self {
            angle_rad: 0.0,
            scale: 1.0,
            flip_y: false,
            flip_x: false,
        }
    }
}

impl GeometricTransform {
    pub fn mirror(flip_y: bool, flip_x: bool) -> Self {
        Self {
            flip_y,
            flip_x,
            ..Self::default()
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.angle_rad == 0.0 && self.scale == 1.0
    }

    /// Source coordinate sampled by output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let y = if self.flip_y { h - 1 - y } else { y };
        let x = if self.flip_x { w - 1 - x } else { x };
        if self.is_affine_identity() {
            return (y as f64, x as f64);
        }
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let (s, c) = self.angle_rad.sin_cos();
        // inverse rotation and zoom
        let sy = (c * dy - s * dx) / self.scale;
        let sx = (s * dy + c * dx) / self.scale;
        (cy + sy, cx + sx)
    }

    fn nearest_index(&self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let (fy, fx) = self.source(y, x, h, w);
        let yy = fy.round().clamp(0.0, (h - 1) as f64) as usize;
        let xx = fx.round().clamp(0.0, (w - 1) as f64) as usize;
        yy * w + xx
    }

    /// Nearest-neighbour transport of any per-pixel plane.
    pub fn apply_nearest<V: Copy>(&self, plane: &[V], h: usize, w: usize) -> Vec<V> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(plane[self.nearest_index(y, x, h, w)]);
            }
        }
        out
    }

    pub fn apply_bilinear(&self, plane: &[f32], h: usize, w: usize) -> Vec<f32> {
        if self.is_affine_identity() {
            return self.apply_nearest(plane, h, w);
        }
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = self.source(y, x, h, w);
                out.push(bilinear_at(plane, h, w, fy, fx));
            }
        }
        out
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        let (h, w) = (labels.h, labels.w);
        let mut data = Vec::with_capacity(labels.data.len());
        for plane in labels.data.chunks(h * w) {
            data.extend(self.apply_nearest(plane, h, w));
        }
        LabelMap { data, ..labels.clone() }
    }
}

fn bilinear_at(plane: &[f32], h: usize, w: usize, fy: f64, fx: f64) -> f32 {
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let v = |y: usize, x: usize| plane[y * w + x] as f64;
    let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
    let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
    (top * (1.0 - ty) + bot * ty) as f32
}

/// One drawn set of intensity transforms; `None` means skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntensityTransform {
    pub gamma: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub low_res: Option<f64>,
    pub noise_std: Option<f64>,
    pub noise_seed: u64,
    pub blur_sigma: Option<f64>,
}

impl IntensityTransform {
    pub fn apply(&self, plane: &mut [f32], h: usize, w: usize) {
        if let Some(g) = self.gamma {
            let (lo, hi) = min_max(plane);
            let range = (hi - lo).max(1e-8);
            for v in plane.iter_mut() {
                let t = ((*v - lo) / range).clamp(0.0, 1.0) as f64;
                *v = lo + t.powf(g) as f32 * range;
            }
        }
        if let Some(b) = self.brightness {
            plane.iter_mut().for_each(|v| *v *= b as f32);
        }
        if let Some(c) = self.contrast {
            let (lo, hi) = min_max(plane);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
            for v in plane.iter_mut() {
                *v = (((*v as f64 - mean) * c + mean) as f32).clamp(lo, hi);
            }
        }
        if let Some(f) = self.low_res {
            let (lh, lw) = (
                ((h as f64 / f).round() as usize).max(1),
                ((w as f64 / f).round() as usize).max(1),
            );
            let small = resize_nearest_f32(plane, h, w, lh, lw);
            plane.copy_from_slice(&resize_bilinear(&small, lh, lw, h, w));
        }
        if let Some(sd) = self.noise_std {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            let n = Normal::new(0.0, sd).expect("noise std is finite and non-negative");
            plane.iter_mut().for_each(|v| *v += n.sample(&mut rng) as f32);
        }
        if let Some(sigma) = self.blur_sigma {
            gaussian_blur(plane, h, w, sigma);
        }
    }
}

fn min_max(plane: &[f32]) -> (f32, f32) {
    plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn resize_nearest_f32(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let idx: Vec<i32> = (0..(h * w) as i32).collect();
    resize_nearest(&idx, h, w, nh, nw)
        .into_iter()
        .map(|i| src[i as usize])
        .collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(plane: &mut [f32], h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x] as f64;
            }
            plane[y * w + x] = acc as f32;
        }
    }
}

/// A full draw of augmentation parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub geometric: GeometricTransform,
    pub intensity: IntensityTransform,
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut hit = |p: f64| rng.random::<f64>() < p;
        let (rot, zoom, fy, fx) = (hit(cfg.p_rotate), hit(cfg.p_scale), hit(cfg.p_mirror), hit(cfg.p_mirror));
        let (gamma, bright, contrast, low_res, noise, blur) = (
            hit(cfg.p_gamma),
            hit(cfg.p_brightness),
            hit(cfg.p_contrast),
            hit(cfg.p_low_res),
            hit(cfg.p_noise),
            hit(cfg.p_blur),
        );
        let mut uniform = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
        let max_rot = cfg.max_rotation_deg.to_radians();
        let geometric = GeometricTransform {
            angle_rad: if rot { uniform([-max_rot, max_rot]) } else { 0.0 },
            scale: if zoom { uniform(cfg.scale_range) } else { 1.0 },
            flip_y: fy,
            flip_x: fx,
        };
        let intensity = IntensityTransform {
            gamma: gamma.then(|| uniform(cfg.gamma_range)),
            brightness: bright.then(|| uniform(cfg.brightness_range)),
            contrast: contrast.then(|| uniform(cfg.contrast_range)),
            low_res: low_res.then(|| uniform(cfg.low_res_range)),
            noise_std: noise.then(|| uniform([0.0, cfg.max_noise_std])),
            noise_seed: uniform([0.0, 1e15]) as u64,
            blur_sigma: blur.then(|| uniform(cfg.blur_sigma_range)),
        };
        Self { geometric, intensity }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let (h, w) = (sample.labels.h, sample.labels.w);
        let mut image = self.geometric.apply_bilinear(sample.image.data(), h, w);
        self.intensity.apply(&mut image, h, w);
        Sample {
            image: Tensor::new(sample.image.shape(), image).expect("shape preserved"),
            labels: self.geometric.apply_labels(&sample.labels),
            spacing: sample.spacing,
        }
    }
}

/// Draws transform parameters from `seed` and applies them.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentParams::sample(cfg, &mut rng).apply(sample)
}
