//! Named parameter tensors with seeded initialization and a portable file
//! format: a JSON header describing shapes followed by the values as flat
//! little-endian 32-bit floats.
//!
//! Parameters are generated at 32-bit precision and widened to f64 in memory,
//! so a save/load round trip is bitwise lossless.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &str = "coponerf-weights-v1";

/// Shaped, named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadRange(format!("tensor {name} has non-finite values")));
        }
        Ok(Tensor {
            name: name.to_string(),
            shape,
            data,
        })
    }
}

/// Uniform values in `[-scale, scale]`, quantized to f32 so they survive the
/// file round trip exactly.
pub fn seeded_uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * scale) as f32 as f64)
        .collect()
}

/// Uniform values in `[lo, hi]`, f32-quantized.
pub fn seeded_uniform_range(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| (lo + rng.random::<f64>() * (hi - lo)) as f32 as f64)
        .collect()
}

/// Ordered collection of tensors plus the seed that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    seed: u64,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

impl WeightStore {
    pub fn new(seed: u64, tensors: Vec<Tensor>) -> Self {
        WeightStore { seed, tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            magic: MAGIC.to_string(),
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut file = std::fs::File::create(path)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())?;
        file.write_all(&header_json)?;
        let mut payload = Vec::new();
        for t in &self.tensors {
            for &v in &t.data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::MalformedFile {
            path: path.display().to_string(),
            reason,
        };
        let mut file = std::fs::File::open(path)?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|e| bad(format!("header length unreadable: {e}")))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        if header_len > 16 * 1024 * 1024 {
            return Err(bad(format!("implausible header length {header_len}")));
        }
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json)
            .map_err(|e| bad(format!("header truncated: {e}")))?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| bad(format!("header is not valid JSON: {e}")))?;
        if header.magic != MAGIC {
            return Err(bad(format!("bad magic {:?}", header.magic)));
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let want: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if payload.len() != want * 4 {
            return Err(bad(format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                want * 4
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0;
        for meta in header.tensors {
            let n: usize = meta.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let bytes: [u8; 4] = payload[off..off + 4].try_into().unwrap();
                let v = f32::from_le_bytes(bytes);
                if !v.is_finite() {
                    return Err(bad(format!("tensor {} has non-finite value", meta.name)));
                }
                data.push(v as f64);
                off += 4;
            }
            tensors.push(Tensor::new(&meta.name, meta.shape, data)?);
        }
        Ok(WeightStore {
            seed: header.seed,
            tensors,
        })
    }
}
