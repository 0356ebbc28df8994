//! First-order optimizers over the parameters of selected layers.

use serde::{Deserialize, Serialize};

use crate::model::{LayerSpec, Param, Sequential};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
enum Slot<T> {
    Empty,
    Adam { m: Tensor<T>, v: Tensor<T> },
    Momentum(Tensor<T>),
}

/// Optimizer state. Slots are indexed by the position of a parameter in the
/// visiting order of the whole sequence, so frozen layers keep stable indices.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    step: i32,
    slots: Vec<Slot<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self { kind, momentum, weight_decay, step: 0, slots: Vec::new() }
    }

    /// Applies one update with learning rate `lr` to layers where `trainable(index)` holds.
    pub fn step(&mut self, seq: &mut Sequential<T>, trainable: &dyn Fn(usize) -> bool, lr: f64) {
        self.step += 1;
        let mut slot = 0;
        for (idx, layer) in seq.layers.iter_mut().enumerate() {
            let active = trainable(idx);
            self.visit(layer, active, lr, &mut slot);
        }
    }

    fn visit(&mut self, layer: &mut LayerSpec<T>, active: bool, lr: f64, slot: &mut usize) {
        layer.visit_params_mut(&mut |p: &mut Param<T>| {
            let i = *slot;
            *slot += 1;
            if self.slots.len() <= i {
                self.slots.resize_with(i + 1, || Slot::Empty);
            }
            if active {
                update(&mut self.slots[i], p, self.kind, self.momentum, self.weight_decay, self.step, lr);
            }
        });
    }
}

fn update<T: Scalar>(slot: &mut Slot<T>, p: &mut Param<T>, kind: OptimizerKind, momentum: f64, wd: f64, step: i32, lr: f64) {
    let wd = T::from_f64_lossy(wd);
    let lr_t = T::from_f64_lossy(lr);
    match kind {
        OptimizerKind::Adam => {
            if !matches!(slot, Slot::Adam { .. }) {
                *slot = Slot::Adam { m: Tensor::zeros(p.value.shape()), v: Tensor::zeros(p.value.shape()) };
            }
            let Slot::Adam { m, v } = slot else { unreachable!() };
            let (b1, b2) = (T::from_f64_lossy(BETA1), T::from_f64_lossy(BETA2));
            let c1 = T::from_f64_lossy(1.0 - BETA1.powi(step));
            let c2 = T::from_f64_lossy(1.0 - BETA2.powi(step));
            let eps = T::from_f64_lossy(ADAM_EPS);
            let one = T::one();
            for (((w, &g), mi), vi) in
                p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let g = g + wd * *w;
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        OptimizerKind::Sgd => {
            if !matches!(slot, Slot::Momentum(_)) {
                *slot = Slot::Momentum(Tensor::zeros(p.value.shape()));
            }
            let Slot::Momentum(buf) = slot else { unreachable!() };
            let mu = T::from_f64_lossy(momentum);
            for ((w, &g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.data_mut()) {
                let g = g + wd * *w;
                *b = mu * *b + g;
                *w -= lr_t * *b;
            }
        }
    }
}
