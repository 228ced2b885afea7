//! Checkpoint directories: `manifest.json` plus one little-endian blob.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "blob": "params.bin",
//!   "config": { ... model configuration ... },
//!   "params": { "<name>": { "shape": [r, c], "dtype": "f64", "offset": <bytes> }, ... }
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub blob: String,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, ParamEntry>,
}

/// A loaded checkpoint: the stored config and every named tensor.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copies stored values into `store`; every store parameter must be
    /// present with a matching shape.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            store.assign(id, t)?;
        }
        Ok(())
    }
}

pub fn save<C: Serialize>(dir: &Path, store: &ParamStore, config: &C) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut params = BTreeMap::new();
    for id in store.ids() {
        let t = store.get(id);
        params.insert(
            store.name(id).to_string(),
            ParamEntry {
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: blob.len() as u64,
            },
        );
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        blob: BLOB_FILE.into(),
        config: serde_json::to_value(config)?,
        params,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: man_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Schema {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, entry) in &manifest.params {
        if entry.dtype != "f64" {
            return Err(Error::Data(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Data(format!("{name}: blob too short")));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        config: manifest.config,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::uniform(3, 4, 1.0, &mut rng));
        store.add("a.adj", Tensor::uniform(2, 2, 1e-300, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store, &serde_json::json!({"widths": [1, 2]})).unwrap();

        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.config["widths"][1], 2);
        let mut other = store.clone();
        other.get_mut(other.find("a.weight").unwrap()).data_mut().fill(0.0);
        ck.apply_to(&mut other).unwrap();
        assert_eq!(other, store);

        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.format_version, 1);
        assert_eq!(m.params["a.adj"].offset, 96);
        assert_eq!(m.params["a.weight"].dtype, "f64");
    }

    #[test]
    fn version_mismatch_and_missing_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(1, 1));
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store, &()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 2")).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Schema { found: 2, .. })));

        fs::write(&path, text).unwrap();
        let mut bigger = store.clone();
        bigger.add("extra", Tensor::zeros(1, 1));
        let err = load(dir.path()).unwrap().apply_to(&mut bigger).unwrap_err();
        assert!(err.to_string().contains("extra"));
    }
}
