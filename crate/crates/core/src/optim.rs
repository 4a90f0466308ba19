//! First-order optimizers over named tensor maps.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD with heavy-ball momentum or Adam; both add `weight_decay · θ` to the
/// gradient before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F: Scalar> {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    step: u64,
    slots: NamedTensors<F>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, momentum, weight_decay)
    }

    pub fn adam(weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, ADAM_BETA1, weight_decay)
    }

    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Optimizer { kind, momentum, weight_decay, step: 0, slots: NamedTensors::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Per-parameter state, keyed `<slot>.<param>`.
    pub fn state(&self) -> &NamedTensors<F> {
        &self.slots
    }

    pub fn restore(&mut self, step: u64, slots: NamedTensors<F>) {
        self.step = step;
        self.slots = slots;
    }

    /// Applies one update to every tensor in `params` that has a gradient.
    pub fn step(&mut self, params: &mut NamedTensors<F>, grads: &NamedTensors<F>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown tensor {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let lr = F::lit(lr);
        let wd = F::lit(self.weight_decay);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g.scaled_add(wd, p);
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    if self.momentum != 0.0 {
                        let mu = F::lit(self.momentum);
                        let buf = slot(&mut self.slots, "momentum", name, &g);
                        buf.zip_mut_with(&g, |b, &gi| *b = mu * *b + gi);
                        p.scaled_add(-lr, buf);
                    } else {
                        p.scaled_add(-lr, &g);
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.step as i32;
                    let c1 = F::lit(1.0 - ADAM_BETA1.powi(t));
                    let c2 = F::lit(1.0 - ADAM_BETA2.powi(t));
                    let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
                    let eps = F::lit(ADAM_EPS);
                    let m = slot(&mut self.slots, "m", name, &g);
                    m.zip_mut_with(&g, |m, &gi| *m = b1 * *m + (F::one() - b1) * gi);
                    let m = m.clone();
                    let v = slot(&mut self.slots, "v", name, &g);
                    v.zip_mut_with(&g, |v, &gi| *v = b2 * *v + (F::one() - b2) * gi * gi);
                    ndarray::Zip::from(&mut *p).and(&m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, F: Scalar>(
    slots: &'a mut NamedTensors<F>,
    prefix: &str,
    name: &str,
    like: &ArrayD<F>,
) -> &'a mut ArrayD<F> {
    slots
        .entry(format!("{prefix}.{name}"))
        .or_insert_with(|| ArrayD::zeros(like.raw_dim()))
}
