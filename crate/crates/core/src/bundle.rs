//! Trained model directory: a JSON manifest plus checksummed weight files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::config::PipelineConfig;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::forest::ForestModel;
use crate::fusion::FusionWeights;
use crate::mlp::MlpModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "bundle.json";
const BACKBONE_FILE: &str = "backbone.bin";
const MLP_FILE: &str = "mlp.bin";
const FOREST_FILE: &str = "forest.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub backbone: Backbone,
    pub mlp: MlpModel,
    pub forest: ForestModel,
    pub mdf_fusion: FusionWeights,
    pub hdhf_fusion: FusionWeights,
    pub crf: CrfParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileRef {
    path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: PipelineConfig,
    backbone: FileRef,
    mlp: FileRef,
    forest: FileRef,
    mdf_fusion: FusionWeights,
    hdhf_fusion: FusionWeights,
    crf: CrfParams,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_ref(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileRef> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef {
        path: name.to_string(),
        sha256: digest(bytes),
    })
}

fn verify_ref(dir: &Path, file: &FileRef) -> Result<PathBuf> {
    let path = dir.join(&file.path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let got = digest(&bytes);
    if got != file.sha256 {
        return Err(Error::Bundle(format!(
            "checksum mismatch for {}: manifest {}, file {}",
            path.display(),
            file.sha256,
            got
        )));
    }
    Ok(path)
}

impl ModelBundle {
    /// Writes the bundle into `dir`, creating it if needed. The output
    /// depends only on the bundle contents.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            backbone: write_ref(dir, BACKBONE_FILE, &self.backbone.to_bytes())?,
            mlp: write_ref(dir, MLP_FILE, &self.mlp.to_bytes())?,
            forest: write_ref(dir, FOREST_FILE, &self.forest.to_bytes())?,
            mdf_fusion: self.mdf_fusion.clone(),
            hdhf_fusion: self.hdhf_fusion.clone(),
            crf: self.crf.clone(),
        };
        let path = dir.join(MANIFEST);
        let mut json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Bundle(format!("manifest: {e}")))?;
        json.push(b'\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let version: serde_json::Value =
            serde_json::from_slice(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Bundle(format!(
                    "format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::malformed(&path, "no format_version")),
        }
        let m: Manifest =
            serde_json::from_value(version).map_err(|e| Error::malformed(&path, e.to_string()))?;
        m.config.validate()?;
        let backbone = Backbone::load(verify_ref(dir, &m.backbone)?)?;
        let mlp = MlpModel::load(verify_ref(dir, &m.mlp)?)?;
        let forest = ForestModel::load(verify_ref(dir, &m.forest)?)?;
        let levels = m.config.levels;
        for (name, w) in [("mdf", &m.mdf_fusion), ("hdhf", &m.hdhf_fusion)] {
            if w.alphas.len() != levels {
                return Err(Error::Bundle(format!(
                    "{name} fusion has {} weights for {levels} levels",
                    w.alphas.len()
                )));
            }
        }
        if mlp.input_dim() != 3 * backbone.feature_dim() {
            return Err(Error::Bundle(format!(
                "MLP expects {} inputs but the backbone yields {}",
                mlp.input_dim(),
                3 * backbone.feature_dim()
            )));
        }
        Ok(ModelBundle {
            config: m.config,
            backbone,
            mlp,
            forest,
            mdf_fusion: m.mdf_fusion,
            hdhf_fusion: m.hdhf_fusion,
            crf: m.crf,
        })
    }
}
