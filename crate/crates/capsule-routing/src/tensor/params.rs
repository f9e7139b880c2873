//! Named parameter storage shared by model layers, the optimizer and
//! checkpoints.
//!
//! Parameters live outside any tape. A [`Session`] binds them onto one
//! worker's tape on first use, so several workers can run forward/backward
//! over read-only parameter values concurrently and merge gradients at a
//! synchronization point.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::tape::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable parameter, visited by the optimizer.
    Param,
    /// Persistent state (e.g. batch-norm running statistics); saved in
    /// checkpoints but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            kind,
        });
        ParamId(id)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Param)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Total element count over trainable parameters.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Convert every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(&e.name, e.value.cast::<U>(), e.kind);
        }
        out
    }
}

/// Binds a [`ParamStore`] to one tape for a single forward/backward pass.
pub struct Session<'g, 's, T: Scalar> {
    pub tape: &'g Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
    train_mode: bool,
    /// Batch statistics observed this pass, keyed by buffer id; the trainer
    /// folds them into running statistics at the synchronization point.
    observed_stats: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'g, 's, T: Scalar> Session<'g, 's, T> {
    pub fn new(tape: &'g Tape<T>, store: &'s ParamStore<T>, train_mode: bool) -> Self {
        Session {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            train_mode,
            observed_stats: RefCell::new(Vec::new()),
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Pre-bind a parameter to an existing tape variable. Verification
    /// harnesses use this to differentiate with respect to externally
    /// created leaves instead of the store's values.
    pub fn bind(&self, id: ParamId, var: Var<'g, T>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    /// Tape variable for a trainable parameter (leafed on first use).
    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let entry = self.store.get(id);
        let var = match entry.kind {
            ParamKind::Param => self.tape.leaf(entry.value.clone()),
            ParamKind::Buffer => self.tape.constant(entry.value.clone()),
        };
        bound[id.0] = Some(var);
        var
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.tape.constant(t)
    }

    pub fn record_batch_stat(&self, id: ParamId, value: Tensor<T>) {
        self.observed_stats.borrow_mut().push((id, value));
    }

    pub fn take_batch_stats(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.observed_stats.borrow_mut())
    }

    /// Collect parameter gradients in store order after a backward pass.
    /// Parameters never touched by the forward pass are absent.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        for (i, slot) in bound.iter().enumerate() {
            if let Some(var) = slot {
                if self.store.entries[i].kind == ParamKind::Param {
                    if let Some(g) = grads.wrt(*var) {
                        out.push((ParamId(i), g.clone()));
                    }
                }
            }
        }
        out
    }
}

/// Accumulate shard gradients into a dense per-parameter sum.
pub fn merge_grad_shards<T: Scalar>(
    store: &ParamStore<T>,
    shards: &[Vec<(ParamId, Tensor<T>)>],
) -> Result<Vec<Option<Tensor<T>>>> {
    let mut merged: Vec<Option<Tensor<T>>> = vec![None; store.len()];
    for shard in shards {
        for (id, g) in shard {
            match &mut merged[id.0] {
                None => merged[id.0] = Some(g.clone()),
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "merge_grad_shards",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add_param("w", Tensor::scalar(2.0));
        let tape = Tape::new();
        let sess = Session::new(&tape, &store, true);
        let a = sess.param(w);
        let b = sess.param(w);
        assert_eq!(a.id(), b.id());
        let y = a.mul(b).unwrap().sum_all();
        let grads = tape.backward(y).unwrap();
        let collected = sess.param_grads(&grads);
        assert_eq!(collected.len(), 1);
        // d(w^2)/dw = 2w = 4
        assert!((collected[0].1.item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn merge_sums_shards_in_order() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add_param("w", Tensor::scalar(0.0));
        let shards = vec![
            vec![(w, Tensor::scalar(1.5))],
            vec![(w, Tensor::scalar(2.0))],
        ];
        let merged = merge_grad_shards(&store, &shards).unwrap();
        assert!((merged[0].as_ref().unwrap().item() - 3.5).abs() < 1e-12);
    }
}
