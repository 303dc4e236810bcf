//! Run configuration: a profile preset, overlaid by a JSON file, overlaid by
//! `--set key=value` pairs, overlaid by the `SFBNET_SEED` variable.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gradcheck::GradcheckOptions;
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::pipeline::AugmentConfig;

pub const SEED_ENV: &str = "SFBNET_SEED";
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Tiny images and a short schedule that run on a desktop CPU.
    Desk,
    /// Full published hyperparameters; not expected to finish at desk scale.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train/` and `val/` RAWT cases. When absent,
    /// phantoms are generated in memory.
    pub dir: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub repeats: usize,
    pub memory_budget_bytes: usize,
    pub max_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub augmentation: bool,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckOptions,
    /// Model the end-to-end gradient check is run on; defaults to the
    /// 8x8 double-precision configuration whatever `model` is.
    pub gradcheck_model: ModelConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::tiny(),
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            epochs: 20,
            iterations_per_epoch: 50,
            batch_size: 4,
            augmentation: false,
            augment: AugmentConfig::default(),
            data: DataConfig {
                dir: None,
                synthetic_train: 8,
                synthetic_val: 4,
            },
            output_dir: PathBuf::from("runs/desk"),
            seed: 0,
            bench: BenchConfig {
                repeats: 3,
                memory_budget_bytes: DEFAULT_MEMORY_BUDGET,
                max_batch: 8,
            },
            gradcheck: GradcheckOptions::default(),
            gradcheck_model: ModelConfig::gradcheck(),
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            optimizer: OptimizerConfig::default(),
            epochs: 1000,
            iterations_per_epoch: 250,
            batch_size: 10,
            augmentation: true,
            augment: AugmentConfig::default(),
            data: DataConfig {
                dir: Some(PathBuf::from("data")),
                synthetic_train: 0,
                synthetic_val: 0,
            },
            output_dir: PathBuf::from("runs/paper"),
            seed: 0,
            bench: BenchConfig {
                repeats: 100,
                memory_budget_bytes: DEFAULT_MEMORY_BUDGET,
                max_batch: 16,
            },
            gradcheck: GradcheckOptions::default(),
            gradcheck_model: ModelConfig::gradcheck(),
        }
    }

    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.iterations_per_epoch == 0 {
            return bad("iterations_per_epoch must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.bench.repeats == 0 || self.bench.max_batch == 0 {
            return bad("bench.repeats and bench.max_batch must be >= 1".into());
        }
        if self.data.dir.is_none() && self.data.synthetic_train == 0 {
            return bad("data.dir is unset and data.synthetic_train is 0".into());
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.gradcheck_model.validate()
    }

    /// Builds the configuration from `profile`, an optional JSON file, and
    /// `key=value` overrides, then applies `SFBNET_SEED` and validates.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::resolve(profile, file, overrides, env_seed.as_deref())
    }

    pub fn resolve(
        profile: Profile,
        file: Option<&Path>,
        overrides: &[String],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut profile = profile;
        let mut file_value = None;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let Some(p) = v.as_object_mut().and_then(|o| o.remove("profile")) {
                let name = p
                    .as_str()
                    .ok_or_else(|| Error::Config("profile must be a string".into()))?;
                profile = name.parse()?;
            }
            file_value = Some(v);
        }
        let mut value = serde_json::to_value(Self::preset(profile))?;
        if let Some(v) = file_value {
            merge(&mut value, v, "")?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {item:?}")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut value, key, parsed)?;
        }
        let mut cfg: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.model.seed = cfg.seed;
        cfg.gradcheck_model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursively overlays `patch` on `base`; keys must already exist in `base`.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {sub:?}")))?;
                if slot.is_null() || !slot.is_object() || !v.is_object() {
                    *slot = v;
                } else {
                    merge(slot, v, &sub)?;
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut patch = v;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_owned(), patch);
        patch = Value::Object(m);
    }
    merge(root, patch, "")
}
