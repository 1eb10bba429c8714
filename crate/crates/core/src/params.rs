//! Named parameter storage, SGD with momentum, and the checkpoint archive.
//!
//! A checkpoint is two files: `<stem>.bin`, the little-endian `f64` values of
//! every tensor back to back, and `<stem>.json`, a manifest listing each
//! tensor's name, shape and byte offset into the archive.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// FNV-1a, used to give every parameter its own init stream.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Gaussian init with standard deviation `std`, seeded from `(seed, name)`
    /// so the value does not depend on which other parameters exist.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(name));
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        self.params.insert(name.to_string(), t);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name.to_string(), Tensor::zeros(shape));
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len(),
                len: t.numel(),
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: "f64-le".into(),
            total_bytes: bytes.len(),
            tensors: entries,
        };
        std::fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        std::fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
        Ok((bin, json))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != manifest.total_bytes {
            return Err(Error::InvalidConfig(format!(
                "checkpoint archive has {} bytes, manifest says {}",
                bytes.len(),
                manifest.total_bytes
            )));
        }
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let end = e.offset + e.len * 8;
            if end > bytes.len() {
                return Err(Error::InvalidConfig(format!("tensor `{}` runs past the archive", e.name)));
            }
            let data = bytes[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub total_bytes: usize,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Parameters placed on a tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Puts every parameter on the tape as a trainable leaf.
    pub fn all(tape: &mut Tape, store: &ParamStore) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, &v)| (k.clone(), tape.grad_tensor(v))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the active gradients so their global L2 norm is at most this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the gradients accepted by `active`.
    pub fn grad_norm(grads: &BTreeMap<String, Tensor>, active: impl Fn(&str) -> bool) -> f64 {
        grads
            .iter()
            .filter(|(n, _)| active(n))
            .flat_map(|(_, g)| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Updates only the parameters accepted by `active`. Returns the
    /// gradient norm before clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        active: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        let norm = Self::grad_norm(grads, &active);
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            if !active(name) {
                continue;
            }
            let w = store.get_mut(name)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.cfg.momentum * *vi + scale * gi + self.cfg.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        store.init_normal("a.w", &[2, 3], 1.0, 9);
        store.init_zeros("a.b", &[2]);
        store.insert("z", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        let dir = tempfile::tempdir().unwrap();
        let (bin, json) = store.save(&dir.path().join("ckpt")).unwrap();
        assert_eq!(std::fs::metadata(&bin).unwrap().len(), 11 * 8);
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
        assert_eq!(manifest.tensors[0].name, "a.b");
        assert_eq!(manifest.tensors[1].offset, 16);
        assert_eq!(ParamStore::load(&dir.path().join("ckpt")).unwrap(), store);
    }

    #[test]
    fn init_is_independent_of_other_params() {
        let mut a = ParamStore::new();
        a.init_normal("x", &[4], 1.0, 3);
        let mut b = ParamStore::new();
        b.init_normal("other", &[10], 1.0, 3);
        b.init_normal("x", &[4], 1.0, 3);
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]));
        store.insert("frozen", Tensor::from_vec(vec![1.0]));
        let grads: BTreeMap<_, _> = [
            ("w".to_string(), Tensor::from_vec(vec![0.5])),
            ("frozen".to_string(), Tensor::from_vec(vec![0.5])),
        ]
        .into();
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.1,
            clip_norm: None,
        });
        opt.step(&mut store, &grads, 0.1, |n| n == "w").unwrap();
        // v = 0.5 + 0.1 = 0.6, w = 1 - 0.06
        assert!((store.get("w").unwrap().item() - 0.94).abs() < 1e-15);
        opt.step(&mut store, &grads, 0.1, |n| n == "w").unwrap();
        // v = 0.9·0.6 + 0.5 + 0.094 = 1.134
        assert!((store.get("w").unwrap().item() - (0.94 - 0.1134)).abs() < 1e-15);
        assert_eq!(store.get("frozen").unwrap().item(), 1.0);
    }

    #[test]
    fn clipping_rescales_to_the_norm() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![0.0, 0.0]));
        let grads: BTreeMap<_, _> = [("a".to_string(), Tensor::from_vec(vec![3.0, 4.0]))].into();
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        });
        let norm = opt.step(&mut store, &grads, 1.0, |_| true).unwrap();
        assert_eq!(norm, 5.0);
        let w = store.get("a").unwrap().data().to_vec();
        assert!((w[0] + 0.6).abs() < 1e-15 && (w[1] + 0.8).abs() < 1e-15);
    }
}
