//! Named-tensor parameter container with deterministic seeded init and a
//! manifest + blob file format.
//!
//! File layout: an 8-byte magic, a little-endian u64 manifest length, the
//! JSON manifest (`{"tensors":[{"name","shape","offset"},..]}` in name
//! order, offsets in bytes into the blob), then the packed blob of
//! little-endian f32 values. Save/load round-trips are bitwise stable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub use rand_chacha::rand_core::RngCore;
use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GSWAPRM1";

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = serde_json::to_vec(&Manifest { tensors: entries })
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;

        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&(manifest.len() as u64).to_le_bytes())?;
        file.write_all(&manifest)?;
        file.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..8] != MAGIC {
            return Err(Error::Format("not a parameter file (bad magic)".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if 16 + mlen > bytes.len() {
            return Err(Error::Format("manifest length exceeds file size".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        let blob = &bytes[16 + mlen..];

        let mut store = ParamStore::new();
        let mut expected_offset = 0u64;
        for entry in &manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            if entry.offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor '{}': offset {} does not match packed position {}",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let start = entry.offset as usize;
            let end = start + numel * 4;
            if end > blob.len() {
                return Err(Error::Format(format!(
                    "tensor '{}': shape {:?} overruns blob ({} > {} bytes)",
                    entry.name,
                    entry.shape,
                    end,
                    blob.len()
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Format(format!("tensor '{}': {e}", entry.name)))?;
            store.insert(entry.name.clone(), t);
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(Error::Format(format!(
                "blob has {} trailing bytes past the last tensor",
                blob.len() - expected_offset as usize
            )));
        }
        Ok(store)
    }
}

// ── Seeded initialization ────────────────────────────────────────────

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One deterministic stream per (seed, name) pair; inserting new tensors
/// never shifts existing ones.
pub fn seeded_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

fn next_unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    // 53 uniform bits in [0, 1)
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Tensor of i.i.d. uniform values in [-bound, +bound].
pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| ((next_unit_f64(rng) * 2.0 - 1.0) * bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

/// Tensor of i.i.d. normal values via Box-Muller (platform independent).
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = next_unit_f64(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * theta.cos() * sigma) as f32);
        if data.len() < numel {
            data.push((r * theta.sin() * sigma) as f32);
        }
    }
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

/// Adds a `<name>.w` / `<name>.b` pair initialized uniform in
/// [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn init_linear(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w_name = format!("{name}.w");
    let b_name = format!("{name}.b");
    let mut rng = seeded_rng(seed, &w_name);
    store.insert(
        w_name,
        uniform_tensor(&mut rng, vec![fan_in, fan_out], bound),
    );
    let mut rng = seeded_rng(seed, &b_name);
    store.insert(b_name, uniform_tensor(&mut rng, vec![fan_out], bound));
}

/// Adds a weight matrix without bias, same uniform law.
pub fn init_matrix(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = seeded_rng(seed, name);
    store.insert(
        name.to_string(),
        uniform_tensor(&mut rng, vec![fan_in, fan_out], bound),
    );
}

/// Layer-norm affine pair: gain ones, bias zeros.
pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::filled(vec![dim], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![dim]));
}
