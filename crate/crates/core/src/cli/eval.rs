use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tensor};
use crate::error::Result;
use crate::loss::{argmax_labels, dice_score, LabelMap};
use crate::model::SfbNet;
use crate::pipeline::{largest_component_filter, tta_mirror_predict, Sample, LV, MYO, RV};

/// Dice per foreground class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    #[serde(rename = "RV")]
    pub rv: f64,
    #[serde(rename = "MYO")]
    pub myo: f64,
    #[serde(rename = "LV")]
    pub lv: f64,
}

impl ClassDice {
    pub fn mean(&self) -> f64 {
        (self.rv + self.myo + self.lv) / 3.0
    }

    pub fn of(pred: &[i32], truth: &[i32]) -> Self {
        Self {
            rv: dice_score(pred, truth, RV),
            myo: dice_score(pred, truth, MYO),
            lv: dice_score(pred, truth, LV),
        }
    }

    fn add(&mut self, o: &Self) {
        self.rv += o.rv;
        self.myo += o.myo;
        self.lv += o.lv;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            rv: self.rv * s,
            myo: self.myo * s,
            lv: self.lv * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_dice: ClassDice,
    pub mean_dice: f64,
    pub n_images: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub tta: bool,
    pub postprocess: bool,
}

/// Predicted label map for one `[1, h, w]` sample.
pub fn predict_labels<T: Scalar>(model: &mut SfbNet<T>, sample: &Sample, opts: EvalOptions) -> Result<LabelMap> {
    let (h, w) = (sample.labels.h, sample.labels.w);
    let image: Tensor<T> = sample.image.cast::<T>().reshaped(&[1, 1, h, w])?;
    let probs = if opts.tta {
        tta_mirror_predict(model, &image)?
    } else {
        model.predict_probs(&image)?
    };
    let labels = argmax_labels(&probs)?;
    Ok(if opts.postprocess {
        largest_component_filter(&labels)
    } else {
        labels
    })
}

/// Mean over images of the per-image, per-class Dice.
pub fn evaluate<T: Scalar>(model: &mut SfbNet<T>, samples: &[Sample], opts: EvalOptions) -> Result<EvalReport> {
    let mut total = ClassDice::default();
    for s in samples {
        let pred = predict_labels(model, s, opts)?;
        total.add(&ClassDice::of(&pred.data, &s.labels.data));
    }
    let per_class = if samples.is_empty() {
        ClassDice::default()
    } else {
        total.scaled(1.0 / samples.len() as f64)
    };
    Ok(EvalReport {
        per_class_dice: per_class,
        mean_dice: per_class.mean(),
        n_images: samples.len(),
    })
}
