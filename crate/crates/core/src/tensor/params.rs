use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Optimizer/reporting group, e.g. `gnn_graph` or `lgpt`.
    pub group: String,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Order is the declaration order and
/// is what digests, checkpoints and optimizer state rely on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: bool,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Handles in store order, for callers that register leaves themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        value: Tensor,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group: group.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// `rows×cols` matrix drawn from uniform(−1/√fan_in, 1/√fan_in), fan_in = rows.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(
            name,
            group,
            Tensor::matrix(rows, cols, data).expect("shape"),
        )
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(
            name,
            group,
            Tensor::matrix(rows, cols, data).expect("shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Distinct group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Registers every parameter as a leaf. Frozen stores never request gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let requires_grad = !self.frozen;
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Per-parameter gradients in store order; zeros where a parameter did not
    /// contribute to the loss.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.grad(v)).collect()
    }

    /// SHA-256 over names, shapes and little-endian weights, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub(crate) fn check_same_layout(&self, other: &[Tensor]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} gradient tensors, got {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, g) in self.params.iter().zip(other) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("param/grad", p.value.shape(), g.shape()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digest_tracks_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let w = s.add_uniform("w", "g", 3, 2, &mut rng);
        let before = s.digest();
        assert_eq!(before, s.clone().digest());
        s.value_mut(w).data_mut()[0] += 1e-12;
        assert_ne!(before, s.digest());
    }

    #[test]
    fn frozen_store_binds_without_grad() {
        let mut s = ParamStore::new();
        s.add("w", "g", Tensor::row(vec![1.0, 2.0]));
        s.freeze();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        assert!(!tape.requires_grad(b.vars()[0]));
    }

    #[test]
    fn groups_keep_first_appearance_order() {
        let mut s = ParamStore::new();
        s.add("a", "x", Tensor::scalar(0.0));
        s.add("b", "y", Tensor::scalar(0.0));
        s.add("c", "x", Tensor::scalar(0.0));
        assert_eq!(s.groups(), vec!["x".to_string(), "y".to_string()]);
    }
}
