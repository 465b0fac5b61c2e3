use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_safetensors_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<Vec<u8>> = self
            .tensors
            .iter()
            .map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = self
            .names
            .iter()
            .zip(&self.tensors)
            .zip(&bytes)
            .map(|((name, t), b)| {
                TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                    .map(|view| (name.clone(), view))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_safetensors_bytes()?)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors blob. Names and shapes
    /// must match exactly.
    pub fn load_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let file = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut loaded: HashMap<String, Tensor> = HashMap::new();
        for (name, view) in file.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
            }
            let shape: [usize; 4] = view.shape().try_into().map_err(|_| {
                Error::Checkpoint(format!("tensor `{name}` is not 4-dimensional"))
            })?;
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            loaded.insert(name, Tensor::from_vec(shape, data)?);
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = loaded
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read weights {}: {e}", path.display()))
        })?;
        self.load_from_bytes(&bytes)
    }
}
