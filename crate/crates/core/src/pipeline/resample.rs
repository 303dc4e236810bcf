use super::Sample;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::loss::LabelMap;

/// Source coordinate of output pixel `i` under pixel-centre alignment.
fn src_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// Bilinear resize of one `[h, w]` plane with edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let fy = src_coord(y, sy).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = src_coord(x, sx).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let v = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
            let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

/// Nearest-neighbour resize of one `[h, w]` label plane.
pub fn resize_nearest(src: &[i32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<i32> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        for x in 0..nw {
            let xx = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
            out.push(src[yy * w + xx]);
        }
    }
    out
}

/// Resamples to `target` spacing (mm per pixel, `[x, y]`): image bilinear,
/// labels nearest-neighbour, new extent `round(old * old_spacing / target)`.
pub fn resample_xy(sample: &Sample, target: [f64; 2]) -> Result<Sample> {
    if target.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Data(format!("target spacing {:?} must be positive", target)));
    }
    let (h, w) = (sample.labels.h, sample.labels.w);
    let nw = (w as f64 * sample.spacing[0] / target[0]).round() as usize;
    let nh = (h as f64 * sample.spacing[1] / target[1]).round() as usize;
    if nh == 0 || nw == 0 {
        return Err(Error::Data(format!(
            "resampling {}x{} from {:?} to {:?} gives an empty image",
            h, w, sample.spacing, target
        )));
    }
    if (nh, nw) == (h, w) {
        return Ok(Sample {
            spacing: target,
            ..sample.clone()
        });
    }
    let image = resize_bilinear(sample.image.data(), h, w, nh, nw);
    let labels = resize_nearest(&sample.labels.data, h, w, nh, nw);
    Ok(Sample {
        image: Tensor::new(&[1, nh, nw], image)?,
        labels: LabelMap::new(1, nh, nw, labels)?,
        spacing: target,
    })
}

/// Median of per-sample spacings, per axis.
pub fn median_spacing(samples: &[Sample]) -> Option<[f64; 2]> {
    if samples.is_empty() {
        return None;
    }
    let med = |axis: usize| {
        let mut v: Vec<f64> = samples.iter().map(|s| s.spacing[axis]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    Some([med(0), med(1)])
}

/// Centre crop / pad to `[h, w]`; padding uses the image minimum and
/// background label.
pub fn fit_to_size(sample: &Sample, h: usize, w: usize) -> Result<Sample> {
    let (sh, sw) = (sample.labels.h, sample.labels.w);
    if (sh, sw) == (h, w) {
        return Ok(sample.clone());
    }
    let fill = sample
        .image
        .data()
        .iter()
        .copied()
        .fold(f32::INFINITY, f32::min);
    let off = |dst: usize, src: usize| src as isize / 2 - dst as isize / 2;
    let (oy, ox) = (off(h, sh), off(w, sw));
    let mut image = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (yy, xx) = (y as isize + oy, x as isize + ox);
            if yy >= 0 && xx >= 0 && (yy as usize) < sh && (xx as usize) < sw {
                let i = yy as usize * sw + xx as usize;
                image.push(sample.image.data()[i]);
                labels.push(sample.labels.data[i]);
            } else {
                image.push(fill);
                labels.push(0);
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(&[1, h, w], image)?,
        labels: LabelMap::new(1, h, w, labels)?,
        spacing: sample.spacing,
    })
}
