//! Flat parameter storage and named tensor bundles.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. For each forward pass the whole
//! store is bound onto a fresh tape as differentiable leaves, and after backward
//! the gradients are mapped back by id.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive FNV-1a digest over names and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::text::Fnv1a::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.write(n.as_bytes());
            for x in v.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Plain gradient descent: `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, bound: &Bound<'_>, grads: &Gradients, lr: f64) {
        for (value, var) in self.values.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                for (p, d) in value.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        }
    }

    /// Writes `dir/manifest.json` plus one tensor container per parameter.
    pub fn save_bundle(&self, dir: &Path, kind: &str, meta: serde_json::Value) -> Result<()> {
        self.save_subset(dir, kind, meta, &self.ids().collect::<Vec<_>>())
    }

    pub fn save_subset(
        &self,
        dir: &Path,
        kind: &str,
        meta: serde_json::Value,
        ids: &[ParamId],
    ) -> Result<()> {
        fs::create_dir_all(dir.join("tensors"))?;
        let mut entries = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let file = format!("tensors/{i:04}.tensor");
            self.get(id).save(dir.join(&file))?;
            entries.push(BundleEntry {
                name: self.name(id).to_string(),
                file,
                shape: self.get(id).shape().to_vec(),
            });
        }
        let manifest = BundleManifest {
            kind: kind.to_string(),
            meta,
            tensors: entries,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Reads a bundle; returns the store, the bundle kind and its metadata.
    pub fn load_bundle(dir: &Path) -> Result<(ParamStore, String, serde_json::Value)> {
        let manifest: BundleManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let t = Tensor::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::input(format!(
                    "bundle tensor {} has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            store.add(e.name, t);
        }
        Ok((store, manifest.kind, manifest.meta))
    }

    pub(crate) fn require(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::input(format!("missing parameter {name}")))
    }
}

#[derive(Serialize, Deserialize)]
struct BundleEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<BundleEntry>,
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars created elsewhere; `vars[i]` stands for the store's i-th parameter.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

impl<'t> std::ops::Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}
