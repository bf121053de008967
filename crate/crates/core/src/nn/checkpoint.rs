use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Result, RqaError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.json";

/// Everything needed to rebuild a model besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub name: String,
    pub config: serde_json::Value,
    pub vocab: super::vocab::Vocab,
    /// Training configuration and seed, when the weights came from training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

pub fn save(dir: &Path, manifest: &Manifest, params: &ParamSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(file, manifest)?;
    params.save(&dir.join(WEIGHTS_FILE))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| RqaError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RqaError::Load {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads a checkpoint, checking that it holds a model of `kind`.
pub fn load(dir: &Path, kind: &str) -> Result<(Manifest, ParamSet)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(RqaError::Config(format!(
            "checkpoint {} holds a `{}`, expected `{kind}`",
            dir.display(),
            manifest.kind
        )));
    }
    let params = ParamSet::load(&dir.join(WEIGHTS_FILE))?;
    Ok((manifest, params))
}
