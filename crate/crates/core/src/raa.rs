//! Residual-aware attention over regions.
//!
//! The per-region residual vector is projected to queries, keys and values
//! through bias-free `1 → d_k` maps followed by `tanh`. Scaled dot-product
//! scores between regions are softmax-normalized row-wise, and the result
//! reweights the original adjacency elementwise for the next epoch.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::domain::ResidualVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ATTENTION_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState<T> {
    pub w_q: Array1<T>,
    pub w_k: Array1<T>,
    pub w_v: Array1<T>,
    /// Softmax weights from the most recent update.
    pub h_last: Option<Array2<T>>,
    /// Pre-softmax scores from the most recent update.
    pub scores_last: Option<Array2<T>>,
    /// Residual vector that produced `h_last`.
    pub residual_last: Option<Array1<T>>,
    pub a_adapted: Array2<T>,
}

/// Intermediate products of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub queries: Array2<T>,
    pub keys: Array2<T>,
    pub values: Array2<T>,
    pub scores: Array2<T>,
    pub weights: Array2<T>,
}

impl<T: Scalar> AttentionState<T> {
    /// Projection weights drawn uniformly from `[-1/√d_k, 1/√d_k]`.
    pub fn init<R: Rng>(a_original: &Array2<T>, d_k: usize, rng: &mut R) -> Result<Self> {
        if d_k == 0 {
            return Err(Error::InvalidArgument("attention width must be at least 1".into()));
        }
        let bound = T::one() / T::from_usize_lossy(d_k).sqrt();
        let mut draw = || Array1::from_shape_fn(d_k, |_| rng.gen_range(-bound..=bound));
        let (w_q, w_k, w_v) = (draw(), draw(), draw());
        Self::with_weights(a_original, w_q, w_k, w_v)
    }

    pub fn with_weights(
        a_original: &Array2<T>,
        w_q: Array1<T>,
        w_k: Array1<T>,
        w_v: Array1<T>,
    ) -> Result<Self> {
        let d_k = w_q.len();
        if d_k == 0 || w_k.len() != d_k || w_v.len() != d_k {
            return Err(Error::ShapeMismatch(
                "query/key/value maps must share a nonzero width".into(),
            ));
        }
        if a_original.nrows() != a_original.ncols() {
            return Err(Error::ShapeMismatch("adjacency must be square".into()));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            h_last: None,
            scores_last: None,
            residual_last: None,
            a_adapted: a_original.clone(),
        })
    }

    pub fn d_k(&self) -> usize {
        self.w_q.len()
    }

    pub fn parameter_count(&self) -> usize {
        3 * self.d_k()
    }
}

fn project<T: Scalar>(r: &Array1<T>, w: &Array1<T>) -> Array2<T> {
    Array2::from_shape_fn((r.len(), w.len()), |(i, c)| (r[i] * w[c]).tanh())
}

fn softmax_rows<T: Scalar>(s: &Array2<T>) -> Array2<T> {
    let mut h = s.clone();
    for mut row in h.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: T = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    h
}

/// Scores `S = QKᵀ/√d_k` and row-softmax weights `H`.
pub fn attention_scores<T: Scalar>(
    r: &ResidualVector<T>,
    state: &AttentionState<T>,
) -> Result<AttentionOutput<T>> {
    let n = state.a_adapted.nrows();
    if r.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "residual length {} vs {n} regions",
            r.len()
        )));
    }
    let rv = r.values();
    let queries = project(rv, &state.w_q);
    let keys = project(rv, &state.w_k);
    let values = project(rv, &state.w_v);
    let scale = T::from_usize_lossy(state.d_k()).sqrt();
    let scores = queries.dot(&keys.t()) / scale;
    let weights = softmax_rows(&scores);
    Ok(AttentionOutput {
        queries,
        keys,
        values,
        scores,
        weights,
    })
}

/// Elementwise product `A ⊙ H`.
pub fn adapt_adjacency<T: Scalar>(a: &Array2<T>, h: &Array2<T>) -> Result<Array2<T>> {
    if a.dim() != h.dim() {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {:?} vs attention {:?}",
            a.dim(),
            h.dim()
        )));
    }
    Ok(a * h)
}

/// Recomputes attention from the epoch-mean residual and replaces the
/// adapted adjacency with `A_original ⊙ H`.
pub fn epoch_update<T: Scalar>(
    state: &mut AttentionState<T>,
    r_epoch: &ResidualVector<T>,
    a_original: &Array2<T>,
) -> Result<()> {
    let out = attention_scores(r_epoch, state)?;
    let adapted = adapt_adjacency(a_original, &out.weights)?;
    state.a_adapted = adapted;
    state.h_last = Some(out.weights);
    state.scores_last = Some(out.scores);
    state.residual_last = Some(r_epoch.values().clone());
    Ok(())
}

/// Gradients of a scalar objective with respect to the projection weights,
/// given its gradient `d_h` with respect to the last attention weights.
///
/// Returns `(d_w_q, d_w_k, d_w_v)`; values do not feed the adjacency so
/// `d_w_v` is zero.
pub fn attention_weight_gradients<T: Scalar>(
    state: &AttentionState<T>,
    d_h: &Array2<T>,
) -> Result<(Array1<T>, Array1<T>, Array1<T>)> {
    let r = state.residual_last.as_ref().ok_or(Error::NoAttention)?;
    let h = state.h_last.as_ref().ok_or(Error::NoAttention)?;
    if d_h.dim() != h.dim() {
        return Err(Error::ShapeMismatch("attention gradient shape".into()));
    }
    let q = project(r, &state.w_q);
    let k = project(r, &state.w_k);
    let scale = T::from_usize_lossy(state.d_k()).sqrt();
    // softmax backward, row-wise
    let inner = (d_h * h).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_s = h * &(d_h - &inner);
    let d_q = d_s.dot(&k) / scale;
    let d_k = d_s.t().dot(&q) / scale;
    let tanh_back = |out: &Array2<T>, d_out: &Array2<T>| -> Array1<T> {
        let pre = d_out * &out.mapv(|v| T::one() - v * v);
        r.dot(&pre)
    };
    Ok((
        tanh_back(&q, &d_q),
        tanh_back(&k, &d_k),
        Array1::zeros(state.d_k()),
    ))
}
