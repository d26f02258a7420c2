//! Checkpoints: a directory of PXB1 files plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockWeights, VitConfig, VitParams, VitWeights};
use crate::error::{Error, Result};
use crate::linalg::{pxb, Matrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "proxbundle-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub vit: VitConfig,
    /// Tensor name to file name, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
    /// Free-form metadata (classifier shape, prox settings, seed).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Loaded checkpoint: the manifest and every tensor it lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn take(&mut self, name: &str) -> Result<Matrix> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no tensor `{name}`")))
    }

    /// Pulls the encoder parameters out, checking every shape against the manifest config.
    pub fn take_vit(&mut self) -> Result<VitParams> {
        let cfg = self.manifest.vit.clone();
        cfg.validate()?;
        let template = VitParams::init(&cfg, &mut crate::linalg::SplitMix64::new(0));
        let mut missing = None;
        let params = template.map(&mut |name, m| match self.tensors.remove(name) {
            Some(t) if t.shape() == m.shape() => t,
            Some(t) => {
                missing.get_or_insert(format!("tensor `{name}` is {:?}, expected {:?}", t.shape(), m.shape()));
                m.clone()
            }
            None => {
                missing.get_or_insert(format!("checkpoint has no tensor `{name}`"));
                m.clone()
            }
        });
        match missing {
            Some(msg) => Err(Error::config(msg)),
            None => Ok(params),
        }
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    cfg: &VitConfig,
    tensors: &BTreeMap<String, Matrix>,
    extra: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (name, m) in tensors {
        let file = format!("{name}.pxb");
        pxb::write_matrix(dir.join(&file), m)?;
        files.insert(name.clone(), file);
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        vit: cfg.clone(),
        tensors: files,
        extra,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::config(format!("unknown checkpoint format `{}`", manifest.format)));
    }
    let mut tensors = BTreeMap::new();
    for (name, file) in &manifest.tensors {
        if file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(Error::config(format!("tensor file `{file}` escapes the checkpoint directory")));
        }
        tensors.insert(name.clone(), pxb::read_matrix(dir.join(file))?);
    }
    Ok(Checkpoint { manifest, tensors })
}

impl VitWeights<Matrix> {
    pub fn named_tensors(&self) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        self.for_each(&mut |n, m| {
            out.insert(n.to_string(), m.clone());
        });
        out
    }
}

impl BlockWeights<Matrix> {
    pub fn named_tensors(&self, prefix: &str) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        self.for_each(prefix, &mut |n, m| {
            out.insert(n.to_string(), m.clone());
        });
        out
    }
}
