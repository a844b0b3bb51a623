use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// First-order optimiser over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    group: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr: f64,
        weight_decay: f64,
        group: Vec<ParamId>,
        store: &ParamStore,
    ) -> Self {
        let zeros: Vec<Vec<f64>> = group.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Optimizer {
            kind,
            lr,
            weight_decay,
            group,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter in the group. Each must carry a
    /// gradient from a backward pass since the last `zero_grad`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&missing) = self.group.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(Error::Contract(format!(
                "optimizer step without gradient for `{}`",
                store.name(missing)
            )));
        }
        self.steps += 1;
        let t = self.steps as f64;
        for (slot, &id) in self.group.iter().enumerate() {
            let grad: Vec<f64> = store
                .grad(id)
                .expect("checked above")
                .iter()
                .zip(store.value(id).data())
                .map(|(g, p)| g + self.weight_decay * p)
                .collect();
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let params = store.value_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((p, g), buf) in params.iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *buf = momentum * *buf + g;
                        *p -= self.lr * *buf;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for (((p, g), mi), vi) in params.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
