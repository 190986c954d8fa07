//! Named f32 tensors: safetensors IO and seeded synthetic initialization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, ValidationError};

/// Where backbone weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// A safetensors checkpoint, optionally pinned to a sha256 digest.
    File { path: PathBuf, expected_digest: Option<String> },
    /// Deterministic random initialization; for tests and offline smoke runs.
    Seeded(u64),
}

impl FromStr for WeightSource {
    type Err = String;

    /// `seed:N` or a file path, optionally suffixed with `#sha256`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(seed) = s.strip_prefix("seed:") {
            return seed.parse().map(WeightSource::Seeded).map_err(|_| format!("bad seed in {s:?}"));
        }
        if s.is_empty() {
            return Err("empty weight source".into());
        }
        let (path, digest) = match s.split_once('#') {
            Some((p, d)) => (p, Some(d.to_ascii_lowercase())),
            None => (s, None),
        };
        Ok(WeightSource::File { path: PathBuf::from(path), expected_digest: digest })
    }
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSource::Seeded(s) => write!(f, "seed:{s}"),
            WeightSource::File { path, expected_digest: Some(d) } => write!(f, "{}#{d}", path.display()),
            WeightSource::File { path, .. } => write!(f, "{}", path.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// How a tensor is filled for seeded initialization.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f32),
    Const(f32),
}

/// Canonical tensor list of an architecture: name, shape, seeded init.
pub type Layout = Vec<(String, Vec<usize>, Init)>;

#[derive(Clone, Debug, Default)]
pub struct WeightMap {
    tensors: BTreeMap<String, NamedTensor>,
}

impl WeightMap {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), NamedTensor { shape, data });
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Removes a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self.tensors.remove(name).ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Weights(format!("tensor {name}: expected shape {shape:?}, found {:?}", t.shape)));
        }
        Ok(t.data)
    }

    /// Fills every tensor of `layout` deterministically from `seed`.
    pub fn seeded(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = WeightMap::default();
        for (name, shape, init) in layout {
            let len: usize = shape.iter().product();
            let data = match *init {
                Init::Const(v) => vec![v; len],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0f32, std).expect("positive std");
                    (0..len).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            map.insert(name.clone(), shape.clone(), data);
        }
        map
    }

    /// Reads a safetensors file (F32, F16 or BF16). A leading `visual.`
    /// prefix, as in full CLIP checkpoints, is stripped; text-tower tensors
    /// are dropped.
    pub fn load_safetensors(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Weights(e.to_string()))?;
        let has_visual = st.names().iter().any(|n| n.starts_with("visual."));
        let mut map = WeightMap::default();
        for (name, view) in st.tensors() {
            let key = match (has_visual, name.strip_prefix("visual.")) {
                (true, Some(rest)) => rest.to_string(),
                (true, None) => continue,
                (false, _) => name.clone(),
            };
            map.insert(key, view.shape().to_vec(), to_f32(&name, &view)?);
        }
        Ok(map)
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let views: Vec<(String, TensorView<'_>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = f32_bytes(&t.data);
                let view = TensorView::new(Dtype::F32, t.shape.clone(), bytes).map_err(|e| Error::Weights(e.to_string()))?;
                Ok((name.clone(), view))
            })
            .collect::<Result<_>>()?;
        let bytes = safetensors::serialize(views, &None).map_err(|e| Error::Weights(e.to_string()))?;
        crate::data::write_atomic(path, &bytes)
    }
}

pub(crate) fn f32_bytes(data: &[f32]) -> &[u8] {
    // SAFETY: f32 has no padding or invalid bit patterns; alignment of u8 is 1.
    unsafe { std::slice::from_raw_parts(data.as_ptr().cast::<u8>(), std::mem::size_of_val(data)) }
}

fn to_f32(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let raw = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        Dtype::F16 => raw.chunks_exact(2).map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32()).collect(),
        Dtype::BF16 => raw.chunks_exact(2).map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32()).collect(),
        other => return Err(Error::Weights(format!("tensor {name}: unsupported dtype {other:?}"))),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads weights for `layout` from `source`; returns the map and its
/// provenance digest (file sha256, or `seed:N`).
pub fn resolve(source: &WeightSource, layout: &Layout) -> Result<(WeightMap, String)> {
    match source {
        WeightSource::Seeded(seed) => Ok((WeightMap::seeded(layout, *seed), format!("seed:{seed}"))),
        WeightSource::File { path, expected_digest } => {
            if !path.is_file() {
                return Err(ValidationError::MissingFile(path.clone()).into());
            }
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let digest = sha256_hex(&bytes);
            if let Some(expected) = expected_digest {
                if *expected != digest {
                    return Err(ValidationError::DigestMismatch { expected: expected.clone(), found: digest }.into());
                }
            }
            let map = WeightMap::load_safetensors(&bytes)?;
            Ok((map, digest))
        }
    }
}

/// Running sha256 over named f32 tensors, used for the frozen-weight check.
#[derive(Default)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn update(&mut self, name: &str, data: &[f32]) {
        self.0.update(name.as_bytes());
        self.0.update(f32_bytes(data));
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_source_parses() {
        assert_eq!("seed:7".parse::<WeightSource>().unwrap(), WeightSource::Seeded(7));
        assert_eq!(
            "w.safetensors#ABC".parse::<WeightSource>().unwrap(),
            WeightSource::File { path: "w.safetensors".into(), expected_digest: Some("abc".into()) }
        );
        assert!("seed:x".parse::<WeightSource>().is_err());
    }

    #[test]
    fn safetensors_round_trip_and_digest_pin() {
        let layout: Layout = vec![("a".into(), vec![2, 3], Init::Normal(1.0)), ("b".into(), vec![4], Init::Const(0.5))];
        let map = WeightMap::seeded(&layout, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        map.save_safetensors(&path).unwrap();
        let src = WeightSource::File { path: path.clone(), expected_digest: None };
        let (mut back, digest) = resolve(&src, &layout).unwrap();
        assert_eq!(back.take("b", &[4]).unwrap(), vec![0.5; 4]);
        assert!(back.take("a", &[3, 2]).is_err());
        let pinned = WeightSource::File { path, expected_digest: Some("00".repeat(32)) };
        match resolve(&pinned, &layout) {
            Err(Error::Validation(ValidationError::DigestMismatch { found, .. })) => assert_eq!(found, digest),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let layout: Layout = vec![("a".into(), vec![16], Init::Normal(0.02))];
        let mut a = WeightMap::seeded(&layout, 1);
        let mut b = WeightMap::seeded(&layout, 1);
        assert_eq!(a.take("a", &[16]).unwrap(), b.take("a", &[16]).unwrap());
    }
}
