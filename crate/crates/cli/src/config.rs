//! Experiment documents for `train` and `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use proxbundle::data::{gen_images, load_idx, DatasetSplit, SyntheticImageSpec};
use proxbundle::train::TrainConfig;
use proxbundle::vit::VitConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// A full experiment: encoder shape, training setup and data source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub vit: VitConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Output directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticImageSpec),
    /// IDX image and label files, split 80/20 by the loader. Relative paths
    /// resolve against the config file's directory.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Placement list such as `"none;1;L"`.
    pub placements: String,
}

impl ExperimentConfig {
    /// Reads a JSON or TOML document (chosen by extension, `.toml` or anything else as JSON).
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e == "toml") {
            toml::Deserializer::parse(&text)
                .map_err(|e| e.to_string())
                .and_then(|de| serde_path_to_error::deserialize(de).map_err(|e| describe(e.path(), e.inner())))
        } else {
            let mut de = serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| describe(e.path(), e.inner()))
        };
        let mut cfg = parsed.map_err(|msg| Failure::usage(format!("invalid config {}: {msg}", path.display())))?;
        if let DataSource::Idx { images, labels } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            *images = base.join(&*images);
            *labels = base.join(&*labels);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.vit.validate().map_err(Failure::usage)?;
        self.train.validate(self.vit.num_layers).map_err(Failure::usage)?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(Failure::usage)?;
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<DatasetSplit, Failure> {
        let data = match &self.data {
            DataSource::Synthetic(spec) => gen_images(spec),
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
        .map_err(Failure::usage)?;
        let want = (self.vit.image_height, self.vit.image_width, self.vit.channels);
        if let Some(img) = data.samples.iter().find(|i| (i.height, i.width, i.channels) != want) {
            return Err(Failure::usage(format!(
                "images are {}x{}x{} but the encoder expects {}x{}x{}",
                img.height, img.width, img.channels, want.0, want.1, want.2
            )));
        }
        Ok(data)
    }
}

fn describe(path: &serde_path_to_error::Path, inner: &impl std::fmt::Display) -> String {
    let at = path.to_string();
    if at == "." {
        inner.to_string()
    } else {
        format!("at `{at}`: {inner}")
    }
}
