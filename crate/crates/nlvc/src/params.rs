//! Named parameter storage, per-graph binding, and checkpoint files.
//!
//! Modules hold [`ParamId`]s into a [`ParamStore`]; every forward pass binds
//! the store onto a fresh graph in registration order, which keeps parameter
//! traversal deterministic everywhere (updates, checkpoints, hashing).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), shape, data });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].data
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Instantiates every parameter as a differentiable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| g.param(e.data.clone(), &e.shape).expect("stored shapes are valid"))
            .collect();
        Binding { ids }
    }

    /// Instantiates every parameter as a constant (no gradients; cheaper
    /// for pure inference graphs).
    pub fn bind_const(&self, g: &mut Graph) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| g.constant(e.data.clone(), &e.shape).expect("stored shapes are valid"))
            .collect();
        Binding { ids }
    }

    /// Gradient of each parameter on a bound graph after backward; zero for
    /// parameters the loss never touched.
    pub fn grads(&self, g: &Graph, binding: &Binding) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                g.grad(binding.ids[i])
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; e.data.len()])
            })
            .collect()
    }

    /// SHA-256 over the little-endian parameter blob.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            for v in &e.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter leaves bound to one graph, indexed by [`ParamId`].
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

// ── Initializers ────────────────────────────────────────────────────────

/// Scaled-normal init for a conv kernel (fan-in variance scaling).
pub fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in_g: usize, k: usize, gain: f64) -> Vec<f64> {
    let fan_in = (c_in_g * k * k) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    (0..c_out * c_in_g * k * k).map(|_| normal(rng) * std).collect()
}

pub fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

/// Box-Muller standard normal.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"NLVCCKPT";

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_hash: String,
    train_config: TrainConfig,
    params: Vec<ParamMeta>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the f64 blob, in elements.
    offset: usize,
}

/// Flat little-endian f64 blob with a JSON header.
pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &TrainConfig) -> Result<()> {
    let mut metas = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (_, e) in store.entries() {
        metas.push(ParamMeta { name: e.name.clone(), shape: e.shape.clone(), offset });
        offset += e.data.len();
    }
    let header = CheckpointHeader {
        version: 1,
        config_hash: crate::config::config_hash(cfg),
        train_config: cfg.clone(),
        params: metas,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(CKPT_MAGIC)
        .and_then(|_| file.write_all(&(header_json.len() as u32).to_le_bytes()))
        .and_then(|_| file.write_all(&header_json))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for (_, e) in store.entries() {
        for v in &e.data {
            file.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Loads a checkpoint; returns the parameter blob keyed by name plus the
/// training config it was produced under.
pub fn load_checkpoint(path: &Path) -> Result<(Vec<ParamEntry>, TrainConfig)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::input(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::input(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::input(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            header.version
        )));
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if blob.len() % 8 != 0 {
        return Err(Error::input(format!("{}: truncated blob", path.display())));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut entries = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        if meta.offset + n > values.len() {
            return Err(Error::input(format!(
                "{}: parameter {} exceeds blob",
                path.display(),
                meta.name
            )));
        }
        entries.push(ParamEntry {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            data: values[meta.offset..meta.offset + n].to_vec(),
        });
    }
    Ok((entries, header.train_config))
}

/// Copies loaded entries into a freshly built store, insisting that names
/// and shapes line up exactly.
pub fn restore_into(store: &mut ParamStore, loaded: &[ParamEntry]) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::input(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for i in 0..loaded.len() {
        let expect = &store.entries[i];
        let got = &loaded[i];
        if expect.name != got.name || expect.shape != got.shape {
            return Err(Error::input(format!(
                "checkpoint parameter mismatch at {}: {} {:?} vs {} {:?}",
                i, got.name, got.shape, expect.name, expect.shape
            )));
        }
        store.entries[i].data = got.data.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("a.w", vec![2, 3], conv_init(&mut rng, 1, 1, 1, 1.0).repeat(6)[..6].to_vec());
        store.register("a.b", vec![4], vec![0.5, -0.5, 1.5, 0.0]);
        let cfg = TrainConfig::default();
        let dir = std::env::temp_dir().join(format!("nlvc-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        save_checkpoint(&path, &store, &cfg).unwrap();
        let (entries, cfg_back) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg_back, cfg);
        let mut fresh = ParamStore::new();
        fresh.register("a.w", vec![2, 3], vec![0.0; 6]);
        fresh.register("a.b", vec![4], vec![0.0; 4]);
        restore_into(&mut fresh, &entries).unwrap();
        assert_eq!(fresh.entry(ParamId(0)).data, store.entry(ParamId(0)).data);
        assert_eq!(fresh.entry(ParamId(1)).data, store.entry(ParamId(1)).data);
    }

    #[test]
    fn restore_rejects_mismatched_shapes() {
        let mut store = ParamStore::new();
        store.register("w", vec![2], vec![0.0; 2]);
        let loaded = vec![ParamEntry { name: "w".into(), shape: vec![3], data: vec![0.0; 3] }];
        assert!(restore_into(&mut store, &loaded).is_err());
    }
}
