//! Named parameter storage and the per-forward binding of parameters to
//! autodiff leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wfn_tensor::{Float, Gradients, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    /// Learnable.
    Param,
    /// State carried alongside parameters (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub kind: EntryKind,
    pub tensor: Tensor<T>,
}

/// Flat map from slash/dot separated paths to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterTree<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Float> Default for ParameterTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParameterTree<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, kind: EntryKind, tensor: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::InvalidArgument(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, Entry { kind, tensor });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Entry<T>> {
        self.entries.get(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(path)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(path)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    /// Replaces an existing tensor, keeping its kind; shapes must agree.
    pub fn set(&mut self, path: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.tensor_mut(path)?;
        slot.expect_same_shape(&tensor, "ParameterTree::set")?;
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(k, e)| (k, &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParameterTree<U> {
        ParameterTree {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            kind: e.kind,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copy with every path prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn subtree(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: Self) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v.kind, v.tensor)?;
        }
        Ok(())
    }

    /// SHA-256 over paths, kinds, shapes and little-endian `f32` bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, e) in &self.entries {
            h.update(k.as_bytes());
            h.update([e.kind as u8]);
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Fan-in scaled uniform initialisation helpers.
pub(crate) struct Initializer<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Initializer<'_, R> {
    fn uniform<T: Float>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }

    /// `path.weight` `[c_out, c_in, k, k]` and `path.bias` `[c_out]`, both
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn conv<T: Float>(&mut self, tree: &mut ParameterTree<T>, path: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let w = self.uniform(vec![c_out, c_in, k, k], bound);
        let b = self.uniform(vec![c_out], bound);
        tree.insert(format!("{path}.weight"), EntryKind::Param, w)?;
        tree.insert(format!("{path}.bias"), EntryKind::Param, b)
    }

    /// Bias-free variant for filter banks.
    pub fn conv_no_bias<T: Float>(&mut self, tree: &mut ParameterTree<T>, path: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let w = self.uniform(vec![c_out, c_in, k, k], bound);
        tree.insert(format!("{path}.weight"), EntryKind::Param, w)
    }

    pub fn batch_norm<T: Float>(&mut self, tree: &mut ParameterTree<T>, path: &str, c: usize) -> Result<()> {
        tree.insert(format!("{path}.weight"), EntryKind::Param, Tensor::ones([c]))?;
        tree.insert(format!("{path}.bias"), EntryKind::Param, Tensor::zeros([c]))?;
        tree.insert(format!("{path}.running_mean"), EntryKind::Buffer, Tensor::zeros([c]))?;
        tree.insert(format!("{path}.running_var"), EntryKind::Buffer, Tensor::ones([c]))
    }
}

/// Zeroes `path.weight` and `path.bias` (e.g. a network's output projection).
pub fn zero_layer<T: Float>(tree: &mut ParameterTree<T>, path: &str) -> Result<()> {
    for suffix in ["weight", "bias"] {
        let t = tree.tensor_mut(&format!("{path}.{suffix}"))?;
        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParameterTree`] to one forward pass.
///
/// Parameters become autodiff leaves on first use (constants when the
/// session is frozen). Train-mode batch-norm statistics are staged here and
/// written back by [`ParameterTree::apply_buffer_updates`], so the tree itself is
/// only borrowed immutably.
pub struct Session<'a, T: Float> {
    tree: &'a ParameterTree<T>,
    mode: Mode,
    trainable: bool,
    leaves: RefCell<BTreeMap<String, Var<T>>>,
    staged: RefCell<BTreeMap<String, Tensor<T>>>,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(tree: &'a ParameterTree<T>, mode: Mode, trainable: bool) -> Self {
        Self {
            tree,
            mode,
            trainable,
            leaves: RefCell::new(BTreeMap::new()),
            staged: RefCell::new(BTreeMap::new()),
        }
    }

    /// Frozen evaluation-mode session: no gradients, no state changes.
    pub fn frozen(tree: &'a ParameterTree<T>) -> Self {
        Self::new(tree, Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, path: &str) -> Result<Var<T>> {
        if let Some(v) = self.leaves.borrow().get(path) {
            return Ok(v.clone());
        }
        let t = self.tree.tensor(path)?.clone();
        let v = if self.trainable { Var::leaf(t) } else { Var::constant(t) };
        self.leaves.borrow_mut().insert(path.to_string(), v.clone());
        Ok(v)
    }

    /// Current buffer value, including updates staged earlier in this pass.
    pub fn buffer(&self, path: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.staged.borrow().get(path) {
            return Ok(t.clone());
        }
        Ok(self.tree.tensor(path)?.clone())
    }

    pub fn stage_buffer(&self, path: &str, value: Tensor<T>) {
        self.staged.borrow_mut().insert(path.to_string(), value);
    }

    pub fn take_buffer_updates(&self) -> BTreeMap<String, Tensor<T>> {
        std::mem::take(&mut *self.staged.borrow_mut())
    }

    /// Gradient per parameter path touched in this pass.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

impl<T: Float> ParameterTree<T> {
    pub fn apply_buffer_updates(&mut self, updates: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (k, v) in updates {
            self.set(&k, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut t = ParameterTree::<f32>::new();
        t.insert("a", EntryKind::Param, Tensor::zeros([2])).unwrap();
        assert!(t.insert("a", EntryKind::Param, Tensor::zeros([2])).is_err());
    }

    #[test]
    fn prefix_roundtrip() {
        let mut t = ParameterTree::<f32>::new();
        t.insert("x.weight", EntryKind::Param, Tensor::ones([3])).unwrap();
        t.insert("x.running_mean", EntryKind::Buffer, Tensor::zeros([3])).unwrap();
        assert_eq!(t.prefixed("fusion/").subtree("fusion/"), t);
        assert_eq!(t.num_parameters(), 3);
    }

    #[test]
    fn frozen_session_yields_constants() {
        let mut t = ParameterTree::<f32>::new();
        t.insert("w", EntryKind::Param, Tensor::ones([1])).unwrap();
        assert!(!Session::frozen(&t).param("w").unwrap().requires_grad());
        assert!(Session::new(&t, Mode::Train, true).param("w").unwrap().requires_grad());
    }
}
