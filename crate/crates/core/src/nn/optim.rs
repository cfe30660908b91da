use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Mat, ParamStore};
use super::tape::Grads;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with its moment buffers keyed by parameter name so the state
/// survives a checkpoint round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub first: BTreeMap<String, Mat>,
    pub second: BTreeMap<String, Mat>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let mut ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
        ids.sort();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let g = grads.get(id).expect("listed id");
            match self.kind {
                OptimizerKind::Sgd => params.get_mut(id).scaled_add(-self.lr, g),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let name = params.name(id).to_string();
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(g.raw_dim()));
                    m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(g.raw_dim()));
                    v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let lr = self.lr;
                    let m = &self.first[&name];
                    let v = &self.second[&name];
                    ndarray::Zip::from(params.get_mut(id))
                        .and(m)
                        .and(v)
                        .for_each(|p, &m, &v| {
                            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                        });
                }
            }
        }
    }
}
