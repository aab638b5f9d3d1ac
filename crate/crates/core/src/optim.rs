use serde::{Deserialize, Serialize};

use crate::head::{HeadGradients, HeadParameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

// single instance per run
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        first: HeadParameters,
        second: HeadParameters,
        step: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &HeadParameters) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                first: params.zeros_like(),
                second: params.zeros_like(),
                step: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut HeadParameters, grads: &HeadGradients, learning_rate: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= learning_rate * g;
                    }
                }
            }
            Optimizer::Adam { first, second, step } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step);
                let c2 = 1.0 - ADAM_BETA2.powi(*step);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(first.tensors_mut())
                    .zip(second.tensors_mut());
                for (((p, g), m), v) in tensors {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}
