use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::nn::{upsample::resize_plane, Tensor4};

/// `height x width x dim` block of encoder activations, row-major with the
/// channel axis innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    height: usize,
    width: usize,
    dim: usize,
    dtype: String,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width * dim, "feature grid length");
        Self { height, width, dim, values }
    }

    /// From a channel-major `dim x height x width` buffer.
    pub fn from_chw(dim: usize, height: usize, width: usize, chw: &[f32]) -> Self {
        let plane = height * width;
        let mut values = vec![0.0; plane * dim];
        for c in 0..dim {
            for p in 0..plane {
                values[p * dim + c] = chw[c * plane + p];
            }
        }
        Self::new(height, width, dim, values)
    }

    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.dim];
        for p in 0..plane {
            for c in 0..self.dim {
                out[c * plane + p] = self.values[p * self.dim + c];
            }
        }
        out
    }

    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.dim;
        &self.values[o..o + self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bilinear resample of every channel (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> FeatureGrid {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let chw = self.to_chw();
        let (p, op) = (self.height * self.width, height * width);
        let mut out = vec![0.0f32; op * self.dim];
        for c in 0..self.dim {
            resize_plane(&chw[c * p..(c + 1) * p], self.height, self.width, height, width, &mut out[c * op..(c + 1) * op]);
        }
        FeatureGrid::from_chw(self.dim, height, width, &out)
    }

    /// Writes a one-line JSON shape header followed by little-endian f32 data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CacheHeader { height: self.height, width: self.width, dim: self.dim, dtype: "f32le".into() };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::data::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let h: CacheHeader = serde_json::from_str(line.trim_end())?;
        if h.dtype != "f32le" {
            return Err(Error::Weights(format!("unsupported feature dtype {}", h.dtype)));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        if raw.len() != h.height * h.width * h.dim * 4 {
            return Err(Error::Weights(format!("truncated feature file {}", path.display())));
        }
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Self::new(h.height, h.width, h.dim, values))
    }
}

/// Stacks two grids of the same image along the channel axis. The lower
/// resolution grid is bilinearly upsampled to the higher one; `a`'s channels
/// come first.
pub fn concat_features(a: &FeatureGrid, b: &FeatureGrid) -> FeatureGrid {
    let (h, w) = if a.height * a.width >= b.height * b.width { (a.height, a.width) } else { (b.height, b.width) };
    let ra = a.resize(h, w);
    let rb = b.resize(h, w);
    let dim = a.dim + b.dim;
    let mut values = Vec::with_capacity(h * w * dim);
    for p in 0..h * w {
        values.extend_from_slice(&ra.values[p * a.dim..(p + 1) * a.dim]);
        values.extend_from_slice(&rb.values[p * b.dim..(p + 1) * b.dim]);
    }
    FeatureGrid::new(h, w, dim, values)
}

pub fn concat_batches(a: &[FeatureGrid], b: &[FeatureGrid]) -> Result<Vec<FeatureGrid>> {
    if a.len() != b.len() {
        return Err(dim_mismatch(format!("batch sizes {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| concat_features(x, y)).collect())
}

/// Packs grids of equal shape into an `N x D x H x W` tensor.
pub fn to_tensor(grids: &[&FeatureGrid]) -> Result<Tensor4<f32>> {
    let first = grids.first().ok_or_else(|| dim_mismatch("empty feature batch"))?;
    let (h, w, d) = (first.height, first.width, first.dim);
    let mut data = Vec::with_capacity(grids.len() * h * w * d);
    for g in grids {
        if (g.height, g.width, g.dim) != (h, w, d) {
            return Err(dim_mismatch("feature grids differ in shape within a batch"));
        }
        data.extend(g.to_chw());
    }
    Ok(Tensor4::from_vec(grids.len(), d, h, w, data))
}
