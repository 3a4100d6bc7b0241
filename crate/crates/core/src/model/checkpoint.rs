//! Checkpoint file: one JSON document with a config header and every
//! parameter tensor listed by name, shape and row-major values.
//!
//! ```text
//! {
//!   "format": "equigrid-forecaster",
//!   "version": 1,
//!   "config": { "hidden_channels": 16, ... },
//!   "tensors": [ { "name": "temporal1.weight", "shape": [3, 32], "values": [...] }, ... ],
//!   "adapted_adjacency": [[...], ...] | null
//! }
//! ```
//!
//! RAA projections appear as `raa.query`, `raa.key` and `raa.value` when the
//! block is attached. Values are written with shortest round-trip formatting,
//! so a save/load cycle is exact for `f64`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Forecaster, ForecasterConfig};
use crate::error::{Error, Result};
use crate::raa::AttentionState;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "equigrid-forecaster";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ForecasterConfig,
    pub tensors: Vec<TensorRecord>,
    pub adapted_adjacency: Option<Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Forecaster<T>) -> Self {
        let tensors = model
            .trainable_parameters()
            .into_iter()
            .map(|p| TensorRecord {
                name: p.name,
                shape: p.shape,
                values: p.values.into_iter().map(Scalar::as_f64).collect(),
            })
            .collect();
        let adapted_adjacency = model.raa().map(|raa| {
            raa.a_adapted
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect()
        });
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: *model.config(),
            tensors,
            adapted_adjacency,
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<Forecaster<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = Vec::new();
        let mut raa = [None, None, None];
        for t in self.tensors {
            let vals: Vec<T> = t.values.iter().map(|&v| T::lit(v)).collect();
            match t.name.as_str() {
                "raa.query" => raa[0] = Some(Array1::from(vals)),
                "raa.key" => raa[1] = Some(Array1::from(vals)),
                "raa.value" => raa[2] = Some(Array1::from(vals)),
                _ => params.extend(vals),
            }
        }
        let state = match (raa, self.adapted_adjacency) {
            ([Some(q), Some(k), Some(v)], Some(rows)) => {
                let n = rows.len();
                let flat: Vec<T> = rows.iter().flatten().map(|&v| T::lit(v)).collect();
                let a = Array2::from_shape_vec((n, n), flat)
                    .map_err(|_| Error::ShapeMismatch("adapted adjacency is not square".into()))?;
                let mut s = AttentionState::with_weights(&a, q, k, v)?;
                s.a_adapted = a;
                Some(s)
            }
            ([None, None, None], None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "checkpoint has an incomplete attention block".into(),
                ))
            }
        };
        Forecaster::from_parts(self.config, params, state)
    }
}

pub fn save_checkpoint<T: Scalar, W: Write>(model: &Forecaster<T>, out: W) -> Result<()> {
    serde_json::to_writer(out, &Checkpoint::from_model(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar, R: Read>(input: R) -> Result<Forecaster<T>> {
    let ckpt: Checkpoint = serde_json::from_reader(input)?;
    ckpt.into_model()
}
