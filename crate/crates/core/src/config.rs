//! Experiment configuration files (TOML or JSON). Unknown keys are rejected and
//! every error names the offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_manifest, LocationRecord, SyntheticSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{default_sweep_angles, EvalKind, EvalSetting};
use crate::losses::LossConfig;
use crate::training::TrainConfig;
use crate::transforms::PerturbationSpec;

/// Environment variable naming the directory that relative output
/// directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CONGEO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// CSV manifest; a relative path resolves against the config file's directory.
    Manifest(PathBuf),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<LocationRecord>> {
        match self {
            DatasetConfig::Synthetic(spec) => generate_synthetic(spec),
            DatasetConfig::Manifest(path) => load_manifest(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: Vec<EvalSetting>,
    pub sweep_angles: Vec<f64>,
    /// Perturbations run by `eval` in addition to `eval` settings.
    pub unseen: Vec<PerturbationSpec>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalSetting::default_suite(0),
            sweep_angles: default_sweep_angles(),
            unseen: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    /// `.json` files are JSON; everything else is TOML.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        }
    }
}

fn path_key(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        "<root>".into()
    } else {
        s
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        let cfg: Self = match format {
            ConfigFormat::Json => {
                let mut de = serde_json::Deserializer::from_str(text);
                serde_path_to_error::deserialize(&mut de).map_err(|e| config_err(path_key(e.path()), e.inner().to_string()))?
            }
            ConfigFormat::Toml => {
                let de = toml::Deserializer::parse(text).map_err(|e| config_err("<root>", e.to_string()))?;
                serde_path_to_error::deserialize(de).map_err(|e| {
                    let msg = e.inner().message().to_string();
                    config_err(path_key(e.path()), msg)
                })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; a relative manifest path is
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, ConfigFormat::from_path(path))?;
        if let DatasetConfig::Manifest(m) = &mut cfg.dataset {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.pano_size != self.encoder.ground_size {
                return Err(config_err(
                    "encoder.ground_size",
                    format!("{:?} differs from dataset.synthetic.pano_size {:?}", self.encoder.ground_size, spec.pano_size),
                ));
            }
            if spec.aerial_size != self.encoder.aerial_size {
                return Err(config_err(
                    "encoder.aerial_size",
                    format!("{} differs from dataset.synthetic.aerial_size {}", self.encoder.aerial_size, spec.aerial_size),
                ));
            }
        }
        for (i, s) in self.eval.iter().enumerate() {
            s.validate().map_err(|e| config_err(format!("eval[{i}]"), e.to_string()))?;
        }
        for (i, a) in self.sweep_angles.iter().enumerate() {
            if !a.is_finite() {
                return Err(config_err(format!("sweep_angles[{i}]"), format!("angle {a} is not finite")));
            }
        }
        for (i, p) in self.unseen.iter().enumerate() {
            p.validate().map_err(|e| config_err(format!("unseen[{i}]"), e.to_string()))?;
        }
        let mut labels: Vec<String> = self.eval.iter().map(EvalSetting::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(config_err("eval", format!("setting `{}` listed twice", w[0])));
        }
        Ok(())
    }

    /// Output directory after `--out` and the output-root variable are applied.
    pub fn resolve_output_dir(&self, out_override: Option<&Path>, env_root: Option<&Path>) -> PathBuf {
        let dir = out_override.map(Path::to_path_buf).unwrap_or_else(|| self.output_dir.clone());
        match env_root {
            Some(root) if dir.is_relative() => root.join(dir),
            _ => dir,
        }
    }

    pub fn has_limited_fov(&self, alpha: f64) -> bool {
        self.eval.iter().any(|s| s.kind == EvalKind::LimitedFov && s.alpha_deg == Some(alpha))
    }
}
