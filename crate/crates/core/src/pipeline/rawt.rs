//! RAWT files: one JSON header line `{"dtype", "shape", "spacing"}`, a
//! newline, then the little-endian element blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::loss::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawtHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub spacing: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawtData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rawt {
    pub header: RawtHeader,
    pub data: RawtData,
}

pub fn write_rawt(path: &Path, rawt: &Rawt) -> Result<()> {
    let mut bytes = serde_json::to_vec(&rawt.header)?;
    bytes.push(b'\n');
    match &rawt.data {
        RawtData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        RawtData::I32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_rawt(path: &Path) -> Result<Rawt> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: RawtHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("bad header: {e}")))?;
    let blob = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if blob.len() != 4 * n {
        return Err(bad(format!(
            "shape {:?} needs {} bytes, blob has {}",
            header.shape,
            4 * n,
            blob.len()
        )));
    }
    let words = blob.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
    let data = match header.dtype {
        DType::F32 => RawtData::F32(words.map(f32::from_le_bytes).collect()),
        DType::I32 => RawtData::I32(words.map(i32::from_le_bytes).collect()),
    };
    Ok(Rawt { header, data })
}

fn case_path(dir: &Path, split: &str, index: usize, kind: &str) -> PathBuf {
    dir.join(split).join(format!("case_{index:04}.{kind}.rawt"))
}

/// Writes samples as `dir/split/case_####.{img,lbl}.rawt`.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.labels.h, s.labels.w);
        write_rawt(
            &case_path(dir, split, i, "img"),
            &Rawt {
                header: RawtHeader {
                    dtype: DType::F32,
                    shape: vec![1, h, w],
                    spacing: s.spacing,
                },
                data: RawtData::F32(s.image.data().to_vec()),
            },
        )?;
        write_rawt(
            &case_path(dir, split, i, "lbl"),
            &Rawt {
                header: RawtHeader {
                    dtype: DType::I32,
                    shape: vec![h, w],
                    spacing: s.spacing,
                },
                data: RawtData::I32(s.labels.data.clone()),
            },
        )?;
    }
    Ok(())
}

/// Reads every `case_####` pair of a split, in index order.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let sub = dir.join(split);
    let mut indices = Vec::new();
    for entry in fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))? {
        let name = entry.map_err(|e| Error::io(&sub, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name
            .strip_prefix("case_")
            .and_then(|r| r.strip_suffix(".img.rawt"))
            .and_then(|d| d.parse::<usize>().ok())
        {
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Data(format!("{}: no case_####.img.rawt files", sub.display())));
    }
    indices
        .into_iter()
        .map(|i| read_case(&case_path(dir, split, i, "img"), &case_path(dir, split, i, "lbl")))
        .collect()
}

fn read_case(img_path: &Path, lbl_path: &Path) -> Result<Sample> {
    let img = read_rawt(img_path)?;
    let lbl = read_rawt(lbl_path)?;
    let (RawtData::F32(pixels), RawtData::I32(labels)) = (img.data, lbl.data) else {
        return Err(Error::Data(format!(
            "{}: image must be f32 and labels i32",
            img_path.display()
        )));
    };
    let (h, w) = match (img.header.shape.as_slice(), lbl.header.shape.as_slice()) {
        ([1, h, w], [lh, lw]) if (h, w) == (lh, lw) => (*h, *w),
        (a, b) => {
            return Err(Error::Data(format!(
                "{}: image shape {:?} does not match label shape {:?}",
                img_path.display(),
                a,
                b
            )))
        }
    };
    if img.header.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Data(format!("{}: spacing must be positive", img_path.display())));
    }
    Ok(Sample {
        image: Tensor::new(&[1, h, w], pixels)?,
        labels: LabelMap::new(1, h, w, labels)?,
        spacing: img.header.spacing,
    })
}
