//! Named parameter storage shared by all models in a training session.

use std::collections::HashMap;
use std::sync::Arc;

use crate::graph::Arr;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct Param {
    pub name: String,
    pub value: Arc<Arr>,
    pub trainable: bool,
}

/// Flat, name-indexed tensor store. Weights are immutable while a graph
/// borrows the store; trainers mutate between steps.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.params[id.0].value
    }

    pub fn arc(&self, id: ParamId) -> Arc<Arr> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_value(&mut self, id: ParamId, value: Arr) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "shape change for parameter {}",
            self.params[id.0].name
        );
        self.params[id.0].value = Arc::new(value);
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Export all tensors (used by checkpointing).
    pub fn export(&self) -> Vec<(String, bool, Arr)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.trainable, (*p.value).clone()))
            .collect()
    }

    /// Overwrite values by name. Returns the names that were not found in
    /// the store (callers decide whether that is an error).
    pub fn import(&mut self, tensors: &[(String, Arr)]) -> Vec<String> {
        let mut missing = Vec::new();
        for (name, value) in tensors {
            match self.by_name.get(name) {
                Some(&i) => {
                    assert_eq!(
                        self.params[i].value.shape(),
                        value.shape(),
                        "shape mismatch while loading parameter {name}"
                    );
                    self.params[i].value = Arc::new(value.clone());
                }
                None => missing.push(name.clone()),
            }
        }
        missing
    }
}
