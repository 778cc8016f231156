//! Named parameter tensors, seeded initialisation and checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), values).expect("sized"));
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.shape().iter().product::<usize>() != t.len() {
                return Err(Error::Checkpoint(format!("{name}: shape does not match values")));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            format_version: FORMAT_VERSION,
            params: self.clone(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let f: ParamFile = serde_json::from_str(&s)?;
        f.into_store()
    }
}

/// On-disk parameter document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamFile {
    pub format_version: u32,
    pub params: ParamStore,
}

impl ParamFile {
    pub fn into_store(self) -> Result<ParamStore> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        self.params.validate()?;
        Ok(self.params)
    }
}
