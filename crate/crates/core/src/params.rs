//! Uniform traversal of parameter structures.
//!
//! Parameter structs are generic over their leaf type so one definition holds
//! tensors, tape variables, gradients or optimizer state. Traversal order is
//! fixed and defines the canonical enumeration used by checkpoints, gradient
//! checks and the optimizer.

use crate::tensor::{Element, Tensor};

pub trait ParamTree<P> {
    type With<Q>;

    /// Rebuilds the structure with every leaf replaced by `f(name, leaf)`.
    fn map_leaves<'s, Q>(&'s self, path: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> Self::With<Q>;

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P));

    fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map_leaves("", &mut |n, p| out.push((n.to_string(), p)));
        out
    }

    fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.map_leaves("", &mut |_, p| out.push(p));
        out
    }
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// Total scalar count over all tensor leaves.
pub fn scalar_count<T: Element, S: ParamTree<Tensor<T>>>(tree: &S) -> usize {
    tree.leaves().iter().map(|t| t.numel()).sum()
}
