//! Run configuration files (TOML).
//!
//! Unknown keys are rejected and every omitted key takes its default.
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::PriorKind;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::pacloss::PacBayesConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Blobs,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Generator seed for blobs and the split seed; defaults to the root seed.
    pub seed: Option<u64>,
    pub samples: usize,
    pub classes: usize,
    pub spread: f64,
    pub label_noise: f64,
    /// CSV file (`source = "csv"`).
    pub path: Option<PathBuf>,
    /// IDX image and label files (`source = "idx"`).
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Optional separate test set: `test_path` for CSV, `test_images` and
    /// `test_labels` for IDX. When given, `split[2]` must be 0.
    pub test_path: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Train, held-out and test fractions.
    pub split: [f64; 3],
    pub stratify: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            seed: None,
            samples: 3000,
            classes: 2,
            spread: 0.35,
            label_noise: 0.1,
            path: None,
            images: None,
            labels: None,
            test_path: None,
            test_images: None,
            test_labels: None,
            split: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input width and class count come from the data.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prior: PriorKind,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pacbayes: PacBayesConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prior: PriorKind::Layerwise,
            output_dir: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pacbayes: PacBayesConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub heldout: Dataset,
    pub test: Dataset,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn required<'a>(key: &str, v: &'a Option<PathBuf>) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::config(key, "required for this data source but missing"))
}

impl RunConfig {
    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(if key.is_empty() { context.to_string() } else { key }, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.path, &mut d.images, &mut d.labels, &mut d.test_path, &mut d.test_images, &mut d.test_labels]
            .into_iter()
            .flatten()
        {
            *p = resolve(base, p);
        }
        if let Some(o) = &mut self.output_dir {
            *o = resolve(base, o);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pacbayes.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        let d = &self.data;
        if d.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", format!("fractions {:?} must lie in [0, 1] and sum to 1", d.split)));
        }
        match d.source {
            DataSource::Blobs => {
                if d.classes < 2 || d.samples < d.classes {
                    return Err(Error::config("data.samples", "blobs need classes >= 2 and samples >= classes"));
                }
                if !(0.0..=1.0).contains(&d.label_noise) {
                    return Err(Error::config("data.label_noise", "must be in [0, 1]"));
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(Error::config("data.spread", "must be finite and non-negative"));
                }
            }
            DataSource::Csv => {
                required("data.path", &d.path)?;
            }
            DataSource::Idx => {
                required("data.images", &d.images)?;
                required("data.labels", &d.labels)?;
                if d.test_images.is_some() != d.test_labels.is_some() {
                    return Err(Error::config("data.test_labels", "test_images and test_labels go together"));
                }
            }
        }
        let explicit_test = d.test_path.is_some() || d.test_images.is_some();
        if explicit_test && d.split[2] != 0.0 {
            return Err(Error::config("data.split", "with a separate test set the test fraction must be 0"));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.pacbayes.seed)
    }

    /// Loads or generates the data and splits it.
    pub fn load_splits(&self) -> Result<Splits> {
        let d = &self.data;
        let seed = self.data_seed();
        let full = match d.source {
            DataSource::Blobs => data::gen_blobs(seed, d.samples, d.classes, d.spread, d.label_noise)?,
            DataSource::Csv => data::load_csv(required("data.path", &d.path)?)?,
            DataSource::Idx => data::load_idx(required("data.images", &d.images)?, required("data.labels", &d.labels)?)?,
        };
        let explicit_test = match d.source {
            DataSource::Csv => d.test_path.as_deref().map(data::load_csv).transpose()?,
            DataSource::Idx => match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Some(data::load_idx(i, l)?),
                _ => None,
            },
            DataSource::Blobs => None,
        };
        let (train, heldout, test) = if d.stratify {
            data::split_stratified(&full, d.split, seed)?
        } else {
            data::split(&full, d.split, seed)?
        };
        let test = explicit_test.unwrap_or(test);
        if train.is_empty() {
            return Err(Error::config("data.split", "training split is empty"));
        }
        if test.width() != train.width() && !test.is_empty() {
            return Err(Error::Invalid(format!("test width {} vs train width {}", test.width(), train.width())));
        }
        Ok(Splits { train, heldout, test })
    }

    /// Layer widths for `train`, including input and output.
    pub fn model_for(&self, train: &Dataset) -> Result<MlpModel> {
        let mut widths = vec![train.width()];
        widths.extend_from_slice(&self.model.hidden);
        widths.push(train.classes());
        MlpModel::new(&widths)
    }
}
