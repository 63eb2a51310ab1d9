use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Module, Scalar};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar, M: Module<T> + ?Sized>(&self, module: &mut M) {
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        let wd = T::of(self.weight_decay);
        for (_, p) in module.params_mut() {
            Zip::from(&mut p.value)
                .and(&mut p.velocity)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                });
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}
