//! Binary checkpoints.
//!
//! Layout: `NCAP`, u32 version, u64 header length, JSON header, every
//! parameter as little-endian f32 in layout order, then the Adam first and
//! second moments when present, then a SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NCAP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training progress needed to resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_cider: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    /// Master seed; shuffles and dropout masks are derived from it, the
    /// epoch and the step, so no generator position needs saving.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub vocab_hash: String,
    pub progress: Progress,
    pub adam: Option<AdamConfig>,
    /// Full training configuration, kept for provenance.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        params: ParamStore<f32>,
        vocab: &Vocabulary,
        progress: Progress,
        adam: Option<AdamState<f32>>,
    ) -> Self {
        let header = CheckpointHeader {
            model: model.config.clone(),
            params: params
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            vocab_hash: vocab.hash(),
            progress,
            adam: adam.as_ref().map(|a| a.config),
            train_config: None,
        };
        Checkpoint { header, params, adam }
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.hash();
        if found != self.header.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.header.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Rebuilds the parameter layout from the stored configuration.
    pub fn model(&self) -> Result<Model> {
        let (model, layout) = Model::build::<f32, _>(self.header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let same = layout.len() == self.params.len()
            && layout
                .iter()
                .zip(self.params.iter())
                .all(|((_, a, ta), (_, b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Checkpoint("parameter layout does not match the model configuration".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_elements() * 12 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, _, t) in self.params.iter() {
            put(t);
        }
        if let Some(a) = &self.adam {
            a.m.iter().chain(&a.v).for_each(&mut put);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch);
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let rest = body
            .get(16..)
            .filter(|r| r.len() >= hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen])?;
        let mut floats = rest[hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if rest[hlen..].len() % 4 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of floats".into()));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Checkpoint("payload shorter than the declared parameters".into()));
            }
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParamStore::new();
        for e in &header.params {
            let t = take(&e.shape)?;
            params.insert(e.name.clone(), t);
        }
        let adam = match header.adam {
            Some(config) => {
                let m = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    config,
                    step: header.progress.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if floats.next().is_some() {
            return Err(Error::Checkpoint("trailing data after the declared tensors".into()));
        }
        Ok(Checkpoint { header, params, adam })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
