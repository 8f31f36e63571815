//! Minimal dense-tensor engine with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use gradcheck::{finite_diff_check, BlockReport, CheckOptions, CheckReport};
pub use graph::{Gradients, Graph, Mark, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
pub type NamedTensors = BTreeMap<String, Tensor>;

/// Graph handles for a set of named tensors registered on one graph.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Registers every tensor as a trainable leaf.
    pub fn params(g: &mut Graph, tensors: &NamedTensors) -> Self {
        Self::register(g, tensors, true)
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn constants(g: &mut Graph, tensors: &NamedTensors) -> Self {
        Self::register(g, tensors, false)
    }

    fn register(g: &mut Graph, tensors: &NamedTensors, trainable: bool) -> Self {
        let vars = tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects the gradient of every bound tensor by name.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Result<NamedTensors> {
        self.vars
            .iter()
            .map(|(name, v)| {
                grads
                    .take(*v)
                    .map(|t| (name.clone(), t))
                    .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))
            })
            .collect()
    }
}
