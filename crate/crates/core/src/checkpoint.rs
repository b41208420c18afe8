//! Versioned policy checkpoint container.
//!
//! Single-file layout: an 8-byte magic, a little-endian u64 header length,
//! a JSON header (format version, role marker, stage metadata, denoiser
//! config, parameter manifest), then the named parameter arrays as raw
//! little-endian f32 in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::util::{read_f32_le, write_f32_le};

const MAGIC: &[u8; 8] = b"SYNCKPT1";
const FORMAT_VERSION: u32 = 1;

/// Which stage of the pipeline produced the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyRole {
    /// The base policy trained with the denoising objective.
    #[serde(rename = "pi0")]
    Base,
    /// Preference-aligned on the false-alarm metric (stage 1).
    #[serde(rename = "pi_alpha")]
    FarAligned,
    /// Aligned on the hit metric under the stage-1 preservation constraint.
    #[serde(rename = "pi_beta")]
    CsiAligned,
}

impl std::fmt::Display for PolicyRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyRole::Base => write!(f, "pi0"),
            PolicyRole::FarAligned => write!(f, "pi_alpha"),
            PolicyRole::CsiAligned => write!(f, "pi_beta"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageMetadata {
    /// Human-readable stage name ("base", "far_align", "csi_align").
    pub stage: String,
    pub trained_steps: u64,
    pub seed: u64,
    /// Content hash of the policy this one was initialized from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    role: PolicyRole,
    stage: StageMetadata,
    config: DenoiserConfig,
    params: Vec<ParamEntry>,
}

/// A denoiser plus its role marker and provenance metadata.
#[derive(Debug, Clone)]
pub struct PolicyCheckpoint {
    pub role: PolicyRole,
    pub stage: StageMetadata,
    pub model: Denoiser,
}

impl PolicyCheckpoint {
    pub fn new(role: PolicyRole, stage: StageMetadata, model: Denoiser) -> Self {
        Self { role, stage, model }
    }

    pub fn content_hash(&self) -> String {
        self.model.params.content_hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let params: Vec<ParamEntry> = self
            .model
            .params
            .iter()
            .map(|(name, tensor)| ParamEntry { name: name.clone(), shape: tensor.shape().to_vec() })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            role: self.role,
            stage: self.stage.clone(),
            config: self.model.config.clone(),
            params,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, tensor) in self.model.params.iter() {
            write_f32_le(&mut w, tensor)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| {
            Error::Format(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("{}: truncated magic: {e}", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("{}: malformed header: {e}", path.display())))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported format version {}",
                path.display(),
                header.format_version
            )));
        }
        header.config.validate()?;
        let mut params = ParamStore::new();
        for entry in &header.params {
            let tensor = read_f32_le(&mut r, &entry.shape)?;
            params.insert(entry.name.clone(), tensor);
        }
        let model = Denoiser { config: header.config, params };
        Ok(Self { role: header.role, stage: header.stage, model })
    }
}
