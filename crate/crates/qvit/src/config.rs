//! Run configuration for the command-line tool: model, training,
//! distillation and data-source settings in one JSON file with strict
//! unknown-key rejection. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::distill::DistillationConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
    Synthetic {
        train: SyntheticSpec,
        eval: SyntheticSpec,
    },
}

impl DataSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
            } => Ok((
                data::load_idx(train_images, train_labels)?,
                data::load_idx(eval_images, eval_labels)?,
            )),
            DataSpec::Synthetic { train, eval } => Ok((
                data::generate_synthetic(train)?,
                data::generate_synthetic(eval)?,
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillationConfig,
    pub data: DataSpec,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        Ok(())
    }
}

/// Parse a `W-A` bit-width argument such as `4-4`.
pub fn parse_bits(s: &str) -> Result<(u8, u8)> {
    let parts: Vec<&str> = s.split('-').collect();
    if parts.len() != 2 {
        return Err(Error::config(format!(
            "bit-width '{s}' must look like W-A, e.g. 4-4"
        )));
    }
    let parse = |p: &str| -> Result<u8> {
        let v: u8 = p
            .parse()
            .map_err(|_| Error::config(format!("invalid bit-width component '{p}'")))?;
        if ![2, 3, 4, 8, 32].contains(&v) {
            return Err(Error::config(format!(
                "unsupported bit-width {v}; expected 2, 3, 4, 8 or 32"
            )));
        }
        Ok(v)
    };
    Ok((parse(parts[0])?, parse(parts[1])?))
}
