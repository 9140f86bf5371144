//! Versioned JSON container of named tensors with a shape manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabs;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "dmbgn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// What produced the file, e.g. `items`, `vouchers`, `dmbgn`, `lr`.
    pub kind: String,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: BTreeMap<String, Tensor>,
    pub vocabs: Option<Vocabs>,
    /// Free-form settings needed to rebuild the producer.
    pub config: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            manifest: Vec::new(),
            tensors: BTreeMap::new(),
            vocabs: None,
            config: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.manifest.retain(|m| m.name != name);
        self.manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
        });
        self.tensors.insert(name, tensor);
    }

    /// Every parameter of `store`, under `prefix`.
    pub fn insert_store(&mut self, store: &ParamStore, prefix: &str) {
        for (name, t) in store.named() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint ({}) has no tensor {name}", self.kind)))
    }

    /// Copies `prefix + name` into each store parameter accepted by `filter`;
    /// shapes must match exactly. Returns the names loaded.
    pub fn load_into(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        filter: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if !filter(&name) {
                continue;
            }
            let t = self.get(&format!("{prefix}{name}"))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        t.shape(),
                        store.get(id).shape()
                    ),
                ));
            }
            store.assign(id, t.clone())?;
            loaded.push(name);
        }
        Ok(loaded)
    }

    pub fn set_config(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Data(format!("not a checkpoint (format {:?})", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Data(format!("checkpoint version {} unsupported", self.version)));
        }
        if self.manifest.len() != self.tensors.len() {
            return Err(Error::Data("checkpoint manifest and tensors disagree".into()));
        }
        for m in &self.manifest {
            let t = self.get(&m.name)?;
            if t.shape() != m.shape.as_slice() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{}: manifest {:?} vs stored {:?}", m.name, m.shape, t.shape()),
                ));
            }
            Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = Checkpoint::new("test");
        let awkward = vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, -0.0];
        ck.insert("a/b", Tensor::matrix(2, 3, awkward.clone()).unwrap());
        ck.set_config("dim", 16);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.get("a/b").unwrap().data()), bits(&awkward));
        assert_eq!(back, ck);
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut ck = Checkpoint::new("test");
        ck.insert("w", Tensor::zeros(&[2, 2]));
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Weight, Tensor::zeros(&[3, 2]));
        let e = ck.load_into(&mut store, "", |_| true).unwrap_err();
        assert!(matches!(e, Error::Shape { .. }), "{e}");
    }

    #[test]
    fn corrupted_manifest_rejected() {
        let mut ck = Checkpoint::new("test");
        ck.insert("w", Tensor::zeros(&[2, 2]));
        ck.manifest[0].shape = vec![4];
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
