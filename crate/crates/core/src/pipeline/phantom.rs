//! Synthetic short-axis cardiac phantoms: an elliptical LV blood pool
//! inside a myocardial ring, with an RV crescent to its left.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::loss::LabelMap;

pub const BACKGROUND: i32 = 0;
pub const RV: i32 = 1;
pub const MYO: i32 = 2;
pub const LV: i32 = 3;
pub const CLASS_NAMES: [&str; 3] = ["RV", "MYO", "LV"];

/// Geometry and appearance of one phantom. Lengths are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: [usize; 2],
    /// LV centre `(y, x)`.
    pub lv_center: [f64; 2],
    /// LV semi-axes `(ry, rx)`.
    pub lv_radii: [f64; 2],
    pub myo_thickness: f64,
    /// Horizontal distance from the LV centre to the RV ellipse centre.
    pub rv_offset: f64,
    /// RV ellipse semi-axes `(ry, rx)`.
    pub rv_radii: [f64; 2],
    /// Mean intensity of background, RV, MYO, LV.
    pub intensity: [f64; 4],
    pub noise_std: f64,
    pub spacing: [f64; 2],
}

impl PhantomSpec {
    /// Canonical phantom centred in a `size` image.
    pub fn centered(seed: u64, size: [usize; 2]) -> Self {
        let s = size[0].min(size[1]) as f64;
        Self {
            seed,
            size,
            lv_center: [size[0] as f64 / 2.0, size[1] as f64 / 2.0 + 0.08 * s],
            lv_radii: [0.14 * s, 0.13 * s],
            myo_thickness: (0.07 * s).max(2.0),
            rv_offset: 0.26 * s,
            rv_radii: [0.24 * s, 0.15 * s],
            intensity: [0.1, 0.75, 0.35, 0.9],
            noise_std: 0.05,
            spacing: [1.25, 1.25],
        }
    }

    /// Randomly jittered phantom; everything derives from `seed`.
    pub fn random(seed: u64, size: [usize; 2]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a17);
        let base = Self::centered(seed, size);
        let s = size[0].min(size[1]) as f64;
        let mut j = |v: f64, frac: f64| v * (1.0 + rng.random_range(-frac..=frac));
        let lv_radii = [j(base.lv_radii[0], 0.15), j(base.lv_radii[1], 0.15)];
        let myo_thickness = j(base.myo_thickness, 0.2).max(2.0);
        let rv_offset = j(base.rv_offset, 0.1);
        let rv_radii = [j(base.rv_radii[0], 0.15), j(base.rv_radii[1], 0.15)];
        let spacing = [j(1.25, 0.06), j(1.25, 0.06)];
        let lv_center = [
            base.lv_center[0] + rng.random_range(-0.05..=0.05) * s,
            base.lv_center[1] + rng.random_range(-0.05..=0.05) * s,
        ];
        Self {
            lv_center,
            lv_radii,
            myo_thickness,
            rv_offset,
            rv_radii,
            spacing,
            ..base
        }
    }

    fn validate(&self) -> Result<()> {
        let [h, w] = self.size;
        let bad = |m: &str| Err(Error::Data(format!("phantom geometry: {m}")));
        if h == 0 || w == 0 {
            return bad("empty image");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        if self.lv_radii.iter().chain(&self.rv_radii).any(|&r| !(r > 0.0)) || self.myo_thickness <= 0.0 {
            return bad("radii and thickness must be positive");
        }
        let [cy, cx] = self.lv_center;
        let outer = [self.lv_radii[0] + self.myo_thickness, self.lv_radii[1] + self.myo_thickness];
        if cy - outer[0] < 0.0 || cy + outer[0] > h as f64 - 1.0 || cx - outer[1] < 0.0 || cx + outer[1] > w as f64 - 1.0 {
            return bad("myocardium does not fit inside the image");
        }
        let rcx = cx - self.rv_offset;
        if rcx - self.rv_radii[1] < 0.0 || cy - self.rv_radii[0] < 0.0 || cy + self.rv_radii[0] > h as f64 - 1.0 {
            return bad("right ventricle does not fit inside the image");
        }
        Ok(())
    }

    /// Class at pixel `(y, x)`.
    pub fn label_at(&self, y: usize, x: usize) -> i32 {
        let (py, px) = (y as f64, x as f64);
        let [cy, cx] = self.lv_center;
        let inside = |cy: f64, cx: f64, ry: f64, rx: f64| {
            let (dy, dx) = ((py - cy) / ry, (px - cx) / rx);
            dy * dy + dx * dx <= 1.0
        };
        let [ly, lx] = self.lv_radii;
        let t = self.myo_thickness;
        if inside(cy, cx, ly, lx) {
            LV
        } else if inside(cy, cx, ly + t, lx + t) {
            MYO
        } else if inside(cy, cx - self.rv_offset, self.rv_radii[0], self.rv_radii[1])
            && !inside(cy, cx, ly + t + 1.0, lx + t + 1.0)
        {
            RV
        } else {
            BACKGROUND
        }
    }
}

/// Renders the phantom: labels from geometry, image = class intensity plus
/// Gaussian noise, z-score normalized.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let [h, w] = spec.size;
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push(spec.label_at(y, x));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let raw: Vec<f64> = labels
        .iter()
        .map(|&l| spec.intensity[l as usize] + noise.sample(&mut rng))
        .collect();
    let image = zscore(&raw);
    Ok(Sample {
        image: Tensor::new(&[1, h, w], image)?,
        labels: LabelMap::new(1, h, w, labels)?,
        spacing: spec.spacing,
    })
}

/// Per-image z-score normalization.
pub fn zscore(values: &[f64]) -> Vec<f32> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    values.iter().map(|v| ((v - mean) / sd) as f32).collect()
}

/// `count` phantoms with per-index seeds derived from `base_seed`.
pub fn phantom_set(base_seed: u64, count: usize, size: [usize; 2]) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| generate_phantom(&PhantomSpec::random(derive_seed(base_seed, i as u64), size)))
        .collect()
}

/// Deterministic per-item seed (splitmix64 of the pair).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
