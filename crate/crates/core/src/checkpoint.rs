//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 0..8       | magic `b"LLCKPT01"`                      |
//! | 8..40      | SHA-256 of the network spec (JSON)       |
//! | 40..48     | task index, `u64`                        |
//! | 48..56     | seed, `u64`                              |
//! | 56..64     | parameter count `P`, `u64`               |
//! | 64..64+8P  | parameters, `f64`                        |

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mlp::{MlpSpec, ParamVector};

pub const MAGIC: &[u8; 8] = b"LLCKPT01";
const HEADER: usize = 64;

pub fn spec_hash(spec: &MlpSpec) -> [u8; 32] {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    Sha256::digest(&json).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: [u8; 32],
    pub task: u64,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(spec: &MlpSpec, params: &ParamVector, task: u64, seed: u64) -> Self {
        Self {
            spec_hash: spec_hash(spec),
            task,
            seed,
            params: params.values().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.spec_hash);
        out.extend_from_slice(&self.task.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::MalformedCheckpoint(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::MalformedCheckpoint("bad magic".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let mut spec_hash = [0u8; 32];
        spec_hash.copy_from_slice(&bytes[8..40]);
        let task = u64_at(40);
        let seed = u64_at(48);
        let p = u64_at(56) as usize;
        let expected = p.checked_mul(8).and_then(|b| b.checked_add(HEADER));
        if expected != Some(bytes.len()) {
            return Err(Error::MalformedCheckpoint(format!(
                "header declares {p} parameters but payload is {} bytes",
                bytes.len() - HEADER
            )));
        }
        let params = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            spec_hash,
            task,
            seed,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters as a vector for `spec`, refusing a different network.
    pub fn params_for(&self, spec: &MlpSpec) -> Result<ParamVector> {
        if self.spec_hash != spec_hash(spec) {
            return Err(Error::MalformedCheckpoint("network spec hash does not match".into()));
        }
        ParamVector::from_values(spec, self.params.clone())
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
