use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};

/// Adagrad: `accum += g²; w -= lr · g / (√accum + eps)`.
///
/// Gradients for parameters of other stores are ignored. Frozen
/// (non-trainable) parameters are skipped entirely, so their values and
/// accumulators never change.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accum: Vec<Option<Tensor>>,
    steps: u64,
}

impl Adagrad {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            accum: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accumulator(&self, idx: usize) -> Option<&Tensor> {
        self.accum.get(idx).and_then(|a| a.as_ref())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.accum.len() < store.len() {
            self.accum.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            if !store.owns(id) {
                continue;
            }
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let acc = self.accum[id.index].get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            for ((w, a), &gv) in param
                .value
                .values_mut()
                .iter_mut()
                .zip(acc.values_mut())
                .zip(g.values())
            {
                if gv == 0.0 {
                    continue;
                }
                *a += gv * gv;
                *w -= self.lr * gv / (a.sqrt() + self.eps);
            }
        }
        self.steps += 1;
    }
}
