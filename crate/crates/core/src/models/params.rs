use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Flat view of scalar `i` across all arrays, in order.
    pub fn scalar_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if i < t.numel() {
                return &mut t.data_mut()[i];
            }
            i -= t.numel();
        }
        panic!("parameter index out of range");
    }

    /// Places every array on the graph, as trainable inputs or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// True when names and shapes agree.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn layout_mismatch(&self, other: &ParamSet) -> Option<String> {
        if self.same_layout(other) {
            return None;
        }
        for (i, (n, t)) in self.iter().enumerate() {
            match other.names.get(i) {
                Some(on) if on == n && other.tensors[i].shape() == t.shape() => continue,
                Some(on) => {
                    return Some(format!("entry {i}: {n}{:?} vs {on}{:?}", t.shape(), other.tensors[i].shape()))
                }
                None => return Some(format!("entry {i} ({n}) missing")),
            }
        }
        Some(format!("{} vs {} arrays", self.len(), other.len()))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `custom + (tuned - base)` parameterwise. Where `custom` equals `base`
    /// elementwise the tuned value is taken directly, so both algebraic
    /// identities hold bit-exactly.
    pub fn apply_delta(base: &ParamSet, tuned: &ParamSet, custom: &ParamSet) -> Result<ParamSet> {
        for other in [tuned, custom] {
            if let Some(why) = base.layout_mismatch(other) {
                return Err(Error::ArchMismatch(why));
            }
        }
        let mut out = custom.clone();
        for ((o, b), t) in out.tensors.iter_mut().zip(&base.tensors).zip(&tuned.tensors) {
            for ((ov, bv), tv) in o.data_mut().iter_mut().zip(b.data()).zip(t.data()) {
                *ov = if ov.to_bits() == bv.to_bits() { *tv } else { *ov + (tv - bv) };
            }
        }
        Ok(out)
    }
}

/// Gaussian init with standard deviation `1 / sqrt(fan_in)`.
pub(crate) fn lecun<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
