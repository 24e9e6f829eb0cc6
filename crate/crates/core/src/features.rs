//! Image feature files: raw little-endian f32 `[K×D]` with a JSON sidecar
//! `{k, d, checksum}` next to it (`<file>.json`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ProcessedSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub k: usize,
    pub d: usize,
    /// Hex SHA-256 of the raw bytes.
    pub checksum: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_features(t: &Tensor<f32>) -> (Vec<u8>, FeatureHeader) {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = FeatureHeader {
        k: t.rows(),
        d: t.cols(),
        checksum: hex::encode(Sha256::digest(&bytes)),
    };
    (bytes, header)
}

pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::shape("write_features", format!("{:?}", t.shape())));
    }
    let (bytes, header) = encode_features(t);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string(&header)?).map_err(|e| Error::io(&side, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let side = sidecar_path(path);
    let header: FeatureHeader =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.k * header.d * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: {} bytes for a {}x{} grid",
            path.display(),
            bytes.len(),
            header.k,
            header.d
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != header.checksum {
        return Err(Error::ChecksumMismatch);
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let t = Tensor::new(vec![header.k, header.d], data)?;
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("features in {}", path.display())));
    }
    Ok(t)
}

/// Seeded standard-normal grid.
pub fn synthetic_features(k: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![k, d], data).expect("k*d elements")
}

/// Features of a sample set, loaded once and keyed by sample id.
#[derive(Clone, Debug, Default)]
pub struct FeatureStore {
    by_id: HashMap<String, Tensor<f32>>,
}

impl FeatureStore {
    /// Resolves each `feature_ref` against `base` (absolute refs are kept).
    pub fn load(samples: &[ProcessedSample], base: &Path) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(samples.len());
        for s in samples {
            let Some(r) = &s.feature_ref else {
                return Err(Error::InvalidInput(format!("sample {} has no feature file", s.id)));
            };
            by_id.insert(s.id.clone(), read_features(&base.join(r))?);
        }
        Ok(FeatureStore { by_id })
    }

    pub fn insert(&mut self, id: impl Into<String>, t: Tensor<f32>) {
        self.by_id.insert(id.into(), t);
    }

    pub fn get(&self, id: &str) -> Result<&Tensor<f32>> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no features for sample {id}")))
    }

    /// Checks every grid has `d` channels.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.by_id.iter().find(|(_, t)| t.cols() != d) {
            Some((id, t)) => Err(Error::shape(
                "image features",
                format!("sample {id} has {:?}, model expects D = {d}", t.shape()),
            )),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        let t = synthetic_features(3, 4, 9);
        write_features(&p, &t).unwrap();
        assert_eq!(read_features(&p).unwrap(), t);
        let mut bytes = fs::read(&p).unwrap();
        bytes[5] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::ChecksumMismatch)));
        fs::write(&p, &bytes[..8]).unwrap();
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn generator_is_seeded() {
        assert_eq!(synthetic_features(2, 3, 1), synthetic_features(2, 3, 1));
        assert_ne!(synthetic_features(2, 3, 1), synthetic_features(2, 3, 2));
    }
}
