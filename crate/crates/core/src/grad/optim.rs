//! SGD with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::ParamTree;
use crate::tensor::{Element, Tensor};

fn check_like<T: Element>(what: &str, a: &[(String, &Tensor<T>)], b: &[(String, &Tensor<T>)]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} tensors for {} parameters", b.len(), a.len())));
    }
    for ((name, p), (_, g)) in a.iter().zip(b) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{what} for {name}: shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

/// One update: `v ← momentum·v + g`, then `p ← p − lr·v`.
pub fn sgd_step<T: Element, S: ParamTree<Tensor<T>>>(
    params: &mut S,
    grads: &S,
    velocity: &mut S,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_like("gradient", &params.named(), &grads.named())?;
    check_like("velocity", &params.named(), &velocity.named())?;
    let (lr, momentum) = (T::lit(lr), T::lit(momentum));
    let g = grads.leaves();
    let mut i = 0;
    velocity.visit_mut("", &mut |_, v| {
        for (v, &g) in v.data_mut().iter_mut().zip(g[i].data()) {
            *v = momentum * *v + g;
        }
        i += 1;
    });
    let v = velocity.leaves();
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        for (p, &v) in p.data_mut().iter_mut().zip(v[i].data()) {
            *p -= lr * v;
        }
        i += 1;
    });
    Ok(())
}

/// Optimizer state: hyperparameters plus one velocity tensor per parameter.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub lr: f64,
    pub momentum: f64,
    velocity: S,
}

impl<T: Element> Sgd<ModelParams<Tensor<T>>> {
    pub fn new(params: &ModelParams<Tensor<T>>, lr: f64, momentum: f64) -> Self {
        let velocity = params.zeros_like();
        Sgd { lr, momentum, velocity }
    }

    pub fn step(&mut self, params: &mut ModelParams<Tensor<T>>, grads: &ModelParams<Tensor<T>>) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, self.lr, self.momentum)
    }

    pub fn velocity(&self) -> &ModelParams<Tensor<T>> {
        &self.velocity
    }
}
