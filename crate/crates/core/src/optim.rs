//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?} (expected sgd or adam)"
            ))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd { lr: T },
    Adam { lr: T, m: Vec<T>, v: Vec<T>, step: i32 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let lr = T::lit(lr);
        match kind {
            OptimizerKind::Sgd => Self::Sgd { lr },
            OptimizerKind::Adam => Self::Adam {
                lr,
                m: vec![T::zero(); n_params],
                v: vec![T::zero(); n_params],
                step: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Self::Sgd { lr } => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= *lr * g;
                }
            }
            Self::Adam { lr, m, v, step } => {
                *step += 1;
                let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
                let c1 = T::one() - b1.powi(*step);
                let c2 = T::one() - b2.powi(*step);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + T::lit(ADAM_EPS));
                }
            }
        }
    }
}
