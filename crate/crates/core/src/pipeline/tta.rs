use crate::engine::{dims4, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::SfbNet;

/// Flips an NCHW tensor along H and/or W.
pub fn flip_spatial<T: Scalar>(t: &Tensor<T>, flip_y: bool, flip_x: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("flip_spatial", t.shape())?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            let sy = if flip_y { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flip_x { w - 1 - x } else { x };
                out.push(src[base + sy * w + sx]);
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// The four mirror configurations used at test time.
pub const MIRRORS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

/// Mean of `predict` over the four mirrored inputs, each output flipped back
/// before averaging.
pub fn tta_mirror<T: Scalar>(
    image: &Tensor<T>,
    mut predict: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for (fy, fx) in MIRRORS {
        let probs = flip_spatial(&predict(&flip_spatial(image, fy, fx)?)?, fy, fx)?;
        match &mut acc {
            None => acc = Some(probs),
            Some(a) if a.shape() == probs.shape() => a.add_assign(&probs),
            Some(a) => {
                return Err(Error::shape(
                    "tta_mirror",
                    format!("prediction shape changed from {:?} to {:?}", a.shape(), probs.shape()),
                ))
            }
        }
    }
    let quarter = T::lit(0.25);
    Ok(acc.expect("four passes").map(|v| v * quarter))
}

/// Mirrored test-time prediction of softmax probabilities.
pub fn tta_mirror_predict<T: Scalar>(model: &mut SfbNet<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    tta_mirror(image, |x| model.predict_probs(x))
}
