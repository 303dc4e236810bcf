//! Data handling: synthetic phantoms, spacing resampling, augmentation,
//! mirrored test-time prediction, connected-component cleanup and RAWT I/O.

mod augment;
mod phantom;
mod postprocess;
mod rawt;
mod resample;
mod tta;

pub use augment::{augment, gaussian_blur, AugmentConfig, AugmentParams, GeometricTransform, IntensityTransform};
pub use phantom::{
    derive_seed, generate_phantom, phantom_set, zscore, PhantomSpec, BACKGROUND, CLASS_NAMES, LV, MYO, RV,
};
pub use postprocess::{connected_components, largest_component_filter, largest_component_plane};
pub use rawt::{read_rawt, read_split, write_rawt, write_split, DType, Rawt, RawtData, RawtHeader};
pub use resample::{fit_to_size, median_spacing, resample_xy, resize_bilinear, resize_nearest};
pub use tta::{flip_spatial, tta_mirror, tta_mirror_predict, MIRRORS};

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::loss::LabelMap;

/// One image with its label map. `image` is `[1, h, w]`, `labels` holds a
/// single `h x w` map and `spacing` is millimetres per pixel in x and y.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub spacing: [f64; 2],
}

/// Resamples every sample to the median spacing of `reference`, then centre
/// crops or pads to `size`.
pub fn prepare_samples(samples: &[Sample], reference: &[Sample], size: [usize; 2]) -> Result<Vec<Sample>> {
    let target = median_spacing(reference)
        .ok_or_else(|| Error::Data("cannot compute median spacing of an empty dataset".into()))?;
    samples
        .iter()
        .map(|s| fit_to_size(&resample_xy(s, target)?, size[0], size[1]))
        .collect()
}

/// Stacks samples into an `[n, 1, h, w]` image batch and label map.
pub fn make_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot batch zero samples".into()))?;
    let (h, w) = (first.labels.h, first.labels.w);
    let mut pixels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        pixels.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
    }
    let labels = LabelMap::stack(&samples.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
    Ok((Tensor::new(&[samples.len(), 1, h, w], pixels)?, labels))
}
