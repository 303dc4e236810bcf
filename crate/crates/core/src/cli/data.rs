use super::config::RunConfig;
use crate::error::Result;
use crate::pipeline::{derive_seed, phantom_set, prepare_samples, read_split, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Training and validation samples, resampled to the training median
/// spacing and fitted to the model input size.
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Phantom seeds: stream 1 for training cases, stream 2 for validation.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let size = cfg.model.input_size;
    let (train, val) = match &cfg.data.dir {
        Some(dir) => {
            let train = read_split(dir, "train")?;
            let val = if dir.join("val").is_dir() {
                read_split(dir, "val")?
            } else {
                Vec::new()
            };
            (train, val)
        }
        None => (
            phantom_set(derive_seed(cfg.seed, 1), cfg.data.synthetic_train, size)?,
            phantom_set(derive_seed(cfg.seed, 2), cfg.data.synthetic_val, size)?,
        ),
    };
    Ok(Dataset {
        train: prepare_samples(&train, &train, size)?,
        val: prepare_samples(&val, &train, size)?,
    })
}
