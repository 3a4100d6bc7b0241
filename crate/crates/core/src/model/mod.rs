//! Minimal spatio-temporal graph forecaster.
//!
//! Layer stack, per batch of windows `[batch, region, lookback]`:
//!
//! 1. gated temporal convolution `1 → C` (GLU, kernel `K`)
//! 2. graph convolution with `P = row_normalize(A_eff + I)`, channel mix, ReLU
//! 3. gated temporal convolution `C → C`
//! 4. linear head over the remaining `(time, channel)` block to `horizon` steps
//!
//! Gradients are derived by hand; [`Forecaster::backward`] returns gradients
//! for every parameter and optionally for the effective adjacency.

mod checkpoint;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::row_normalize;
use crate::error::{Error, Result};
use crate::raa::AttentionState;
use crate::rng::{stream_rng, SeedStream};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub hidden_channels: usize,
    pub temporal_kernel: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            temporal_kernel: 3,
            lookback: 12,
            horizon: 3,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.temporal_kernel == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(
                "hidden_channels, temporal_kernel and horizon must be positive".into(),
            ));
        }
        if self.lookback <= 2 * (self.temporal_kernel - 1) {
            return Err(Error::InvalidArgument(format!(
                "lookback {} leaves no steps after two temporal convolutions of width {}",
                self.lookback, self.temporal_kernel
            )));
        }
        Ok(())
    }

    fn t1(&self) -> usize {
        self.lookback - self.temporal_kernel + 1
    }

    fn t2(&self) -> usize {
        self.t1() - self.temporal_kernel + 1
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Conv1W,
    Conv1B,
    GraphW,
    GraphB,
    Conv2W,
    Conv2B,
    HeadW,
    HeadB,
}

const SLOTS: [Slot; 8] = [
    Slot::Conv1W,
    Slot::Conv1B,
    Slot::GraphW,
    Slot::GraphB,
    Slot::Conv2W,
    Slot::Conv2B,
    Slot::HeadW,
    Slot::HeadB,
];

impl Slot {
    fn name(self) -> &'static str {
        match self {
            Slot::Conv1W => "temporal1.weight",
            Slot::Conv1B => "temporal1.bias",
            Slot::GraphW => "graph.weight",
            Slot::GraphB => "graph.bias",
            Slot::Conv2W => "temporal2.weight",
            Slot::Conv2B => "temporal2.bias",
            Slot::HeadW => "head.weight",
            Slot::HeadB => "head.bias",
        }
    }

    /// (rows, cols); biases are `(1, n)`.
    fn shape(self, c: &ForecasterConfig) -> (usize, usize) {
        let (k, ch) = (c.temporal_kernel, c.hidden_channels);
        match self {
            Slot::Conv1W => (k, 2 * ch),
            Slot::Conv1B => (1, 2 * ch),
            Slot::GraphW => (ch, ch),
            Slot::GraphB => (1, ch),
            Slot::Conv2W => (k * ch, 2 * ch),
            Slot::Conv2B => (1, 2 * ch),
            Slot::HeadW => (c.t2() * ch, c.horizon),
            Slot::HeadB => (1, c.horizon),
        }
    }

    fn fan_in(self, c: &ForecasterConfig) -> Option<usize> {
        match self {
            Slot::Conv1W | Slot::GraphW | Slot::Conv2W | Slot::HeadW => Some(self.shape(c).0),
            _ => None,
        }
    }
}

/// One entry of the flat parameter collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Flat gradient buffer matching [`Forecaster::params`].
pub type Gradients<T> = Vec<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster<T> {
    config: ForecasterConfig,
    offsets: Vec<usize>,
    params: Vec<T>,
    raa: Option<AttentionState<T>>,
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache<T> {
    input: Array3<T>,
    propagation: Array2<T>,
    row_sums: Array1<T>,
    conv1_cols: Array2<T>,
    conv1_lin: Array2<T>,
    conv1_gate: Array2<T>,
    h1: Array4<T>,
    mixed: Array4<T>,
    h2: Array4<T>,
    conv2_cols: Array2<T>,
    conv2_lin: Array2<T>,
    conv2_gate: Array2<T>,
    h3_flat: Array2<T>,
    output: Array3<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Array3<T> {
        &self.output
    }
}

pub struct BackwardResult<T> {
    pub grads: Gradients<T>,
    /// `∂L/∂A_eff`, present when requested.
    pub d_adjacency: Option<Array2<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// im2col for a temporal convolution over `[batch, region, time, channel]`.
/// Rows are `(b, n, τ)`; columns are `(k, channel)`.
fn unfold_time<T: Scalar>(x: &Array4<T>, kernel: usize) -> Array2<T> {
    let (b, n, t, c) = x.dim();
    let t_out = t - kernel + 1;
    let src = x.as_standard_layout();
    let src = src.as_slice().unwrap();
    let width = kernel * c;
    let mut cols = vec![T::zero(); b * n * t_out * width];
    for series in 0..b * n {
        let base = series * t * c;
        for tau in 0..t_out {
            let row = (series * t_out + tau) * width;
            // the k time slices of one window are adjacent in memory
            cols[row..row + width].copy_from_slice(&src[base + tau * c..base + tau * c + width]);
        }
    }
    Array2::from_shape_vec((b * n * t_out, width), cols).unwrap()
}

/// Adjoint of [`unfold_time`].
fn fold_time<T: Scalar>(cols: &Array2<T>, shape: (usize, usize, usize, usize), kernel: usize) -> Array4<T> {
    let (b, n, t, c) = shape;
    let t_out = t - kernel + 1;
    let width = kernel * c;
    let src = cols.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut x = vec![T::zero(); b * n * t * c];
    for series in 0..b * n {
        let base = series * t * c;
        for tau in 0..t_out {
            let row = (series * t_out + tau) * width;
            for (d, &v) in x[base + tau * c..base + tau * c + width].iter_mut().zip(&src[row..row + width]) {
                *d += v;
            }
        }
    }
    Array4::from_shape_vec(shape, x).unwrap()
}

/// Gated linear unit on `[rows, 2C]` pre-activations: `lin ⊙ σ(gate)`.
fn glu<T: Scalar>(pre: &Array2<T>) -> (Array2<T>, Array2<T>, Array2<T>) {
    let c = pre.ncols() / 2;
    let lin = pre.slice(s![.., ..c]).to_owned();
    let gate = pre.slice(s![.., c..]).mapv(sigmoid);
    let out = &lin * &gate;
    (lin, gate, out)
}

fn glu_backward<T: Scalar>(d_out: &Array2<T>, lin: &Array2<T>, gate: &Array2<T>) -> Array2<T> {
    let c = lin.ncols();
    let mut d_pre = Array2::zeros((lin.nrows(), 2 * c));
    d_pre.slice_mut(s![.., ..c]).assign(&(d_out * gate));
    let d_gate = d_out * lin * &gate.mapv(|g| g * (T::one() - g));
    d_pre.slice_mut(s![.., c..]).assign(&d_gate);
    d_pre
}

impl<T: Scalar> Forecaster<T> {
    /// Xavier-uniform weights, zero biases, drawn from the model-init stream.
    pub fn new(config: ForecasterConfig) -> Result<Self> {
        config.validate()?;
        let mut offsets = Vec::with_capacity(SLOTS.len() + 1);
        let mut total = 0;
        for slot in SLOTS {
            offsets.push(total);
            let (r, c) = slot.shape(&config);
            total += r * c;
        }
        offsets.push(total);
        let mut params = vec![T::zero(); total];
        let mut rng = stream_rng(config.seed, SeedStream::ModelInit);
        for (idx, slot) in SLOTS.iter().enumerate() {
            if let Some(fan_in) = slot.fan_in(&config) {
                let fan_out = slot.shape(&config).1;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in &mut params[offsets[idx]..offsets[idx + 1]] {
                    *p = T::lit(rng.gen_range(-bound..bound));
                }
            }
        }
        Ok(Self {
            config,
            offsets,
            params,
            raa: None,
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len() + self.raa.as_ref().map_or(0, AttentionState::parameter_count)
    }

    pub fn attach_raa(&mut self, state: AttentionState<T>) {
        self.raa = Some(state);
    }

    pub fn raa(&self) -> Option<&AttentionState<T>> {
        self.raa.as_ref()
    }

    pub fn raa_mut(&mut self) -> Option<&mut AttentionState<T>> {
        self.raa.as_mut()
    }

    /// All learnable tensors, RAA projections included when attached.
    pub fn trainable_parameters(&self) -> Vec<ParameterTensor<T>> {
        let mut out: Vec<ParameterTensor<T>> = SLOTS
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                let (r, c) = slot.shape(&self.config);
                let shape = if r == 1 { vec![c] } else { vec![r, c] };
                ParameterTensor {
                    name: slot.name().to_string(),
                    shape,
                    values: self.params[self.offsets[i]..self.offsets[i + 1]].to_vec(),
                }
            })
            .collect();
        if let Some(raa) = &self.raa {
            for (name, w) in [("raa.query", &raa.w_q), ("raa.key", &raa.w_k), ("raa.value", &raa.w_v)] {
                out.push(ParameterTensor {
                    name: name.to_string(),
                    shape: vec![w.len()],
                    values: w.to_vec(),
                });
            }
        }
        out
    }

    fn slot(&self, slot: Slot) -> ArrayView2<'_, T> {
        let i = SLOTS.iter().position(|&s| s == slot).unwrap();
        let shape = slot.shape(&self.config);
        ArrayView2::from_shape(shape, &self.params[self.offsets[i]..self.offsets[i + 1]]).unwrap()
    }

    fn slot_grad<'a>(&self, grads: &'a mut [T], slot: Slot) -> ArrayViewMut2<'a, T> {
        let i = SLOTS.iter().position(|&s| s == slot).unwrap();
        let shape = slot.shape(&self.config);
        ArrayViewMut2::from_shape(shape, &mut grads[self.offsets[i]..self.offsets[i + 1]]).unwrap()
    }

    fn check_inputs(&self, x: &ArrayView3<T>, a_effective: &Array2<T>) -> Result<()> {
        let (_, n, t) = x.dim();
        if t != self.config.lookback {
            return Err(Error::ShapeMismatch(format!(
                "input has {t} steps, model expects {}",
                self.config.lookback
            )));
        }
        if a_effective.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "adjacency {:?} for {n} regions",
                a_effective.dim()
            )));
        }
        if a_effective.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "effective adjacency must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Single-window forecast: `[region, lookback] → [region, horizon]`.
    pub fn forward(&self, x_window: ArrayView2<T>, a_effective: &Array2<T>) -> Result<Array2<T>> {
        let x = x_window.insert_axis(Axis(0));
        let out = self.forward_batch(x, a_effective)?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    pub fn forward_batch(&self, x: ArrayView3<T>, a_effective: &Array2<T>) -> Result<Array3<T>> {
        Ok(self.forward_cached(x, a_effective)?.output)
    }

    /// Batched forward pass retaining activations for [`Self::backward`].
    pub fn forward_cached(&self, x: ArrayView3<T>, a_effective: &Array2<T>) -> Result<ForwardCache<T>> {
        self.check_inputs(&x, a_effective)?;
        let cfg = self.config;
        let (b, n, t_in) = x.dim();
        let (k, ch) = (cfg.temporal_kernel, cfg.hidden_channels);
        let (t1, t2) = (cfg.t1(), cfg.t2());

        let with_self = a_effective + &Array2::eye(n);
        let row_sums = with_self.sum_axis(Axis(1));
        let propagation = row_normalize(&with_self);

        let input4 = x.to_owned().into_shape_with_order((b, n, t_in, 1)).unwrap();
        let conv1_cols = unfold_time(&input4, k);
        let pre1 = conv1_cols.dot(&self.slot(Slot::Conv1W)) + &self.slot(Slot::Conv1B);
        let (conv1_lin, conv1_gate, h1_flat) = glu(&pre1);
        let h1 = h1_flat.into_shape_with_order((b, n, t1, ch)).unwrap();

        // channel mix then propagate along regions
        let mixed = h1
            .view()
            .into_shape_with_order((b * n * t1, ch))
            .unwrap()
            .dot(&self.slot(Slot::GraphW))
            .into_shape_with_order((b, n, t1, ch))
            .unwrap();
        let mut h2 = Array4::zeros((b, n, t1, ch));
        let bias = self.slot(Slot::GraphB).row(0).to_owned();
        for bi in 0..b {
            let m = mixed.slice(s![bi, .., .., ..]).into_shape_with_order((n, t1 * ch)).unwrap();
            let z = propagation.dot(&m).into_shape_with_order((n, t1, ch)).unwrap();
            let mut dst = h2.slice_mut(s![bi, .., .., ..]);
            dst.assign(&z);
            dst += &bias;
        }
        h2.mapv_inplace(|v| v.max(T::zero()));

        let conv2_cols = unfold_time(&h2, k);
        let pre2 = conv2_cols.dot(&self.slot(Slot::Conv2W)) + &self.slot(Slot::Conv2B);
        let (conv2_lin, conv2_gate, h3) = glu(&pre2);
        let h3_flat = h3.into_shape_with_order((b * n, t2 * ch)).unwrap();

        let out = h3_flat.dot(&self.slot(Slot::HeadW)) + &self.slot(Slot::HeadB);
        let output = out.into_shape_with_order((b, n, cfg.horizon)).unwrap();

        Ok(ForwardCache {
            input: x.to_owned(),
            propagation,
            row_sums,
            conv1_cols,
            conv1_lin,
            conv1_gate,
            h1,
            mixed,
            h2,
            conv2_cols,
            conv2_lin,
            conv2_gate,
            h3_flat,
            output,
        })
    }

    /// Backpropagates `∂L/∂output` through the cached forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_output: &Array3<T>,
        want_adjacency_grad: bool,
    ) -> Result<BackwardResult<T>> {
        if d_output.dim() != cache.output.dim() {
            return Err(Error::ShapeMismatch("output gradient shape".into()));
        }
        let cfg = self.config;
        let (b, n, _) = cache.input.dim();
        let (k, ch) = (cfg.temporal_kernel, cfg.hidden_channels);
        let (t1, t2) = (cfg.t1(), cfg.t2());
        let mut grads = vec![T::zero(); self.params.len()];

        // head
        let d_out = d_output.view().into_shape_with_order((b * n, cfg.horizon)).unwrap();
        self.slot_grad(&mut grads, Slot::HeadW)
            .assign(&cache.h3_flat.t().dot(&d_out));
        self.slot_grad(&mut grads, Slot::HeadB)
            .assign(&d_out.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let d_h3 = d_out
            .dot(&self.slot(Slot::HeadW).t())
            .into_shape_with_order((b * n * t2, ch))
            .unwrap();

        // second temporal convolution
        let d_pre2 = glu_backward(&d_h3, &cache.conv2_lin, &cache.conv2_gate);
        self.slot_grad(&mut grads, Slot::Conv2W)
            .assign(&cache.conv2_cols.t().dot(&d_pre2));
        self.slot_grad(&mut grads, Slot::Conv2B)
            .assign(&d_pre2.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let d_cols2 = d_pre2.dot(&self.slot(Slot::Conv2W).t());
        let mut d_h2 = fold_time(&d_cols2, (b, n, t1, ch), k);

        // ReLU
        d_h2.zip_mut_with(&cache.h2, |d, &h| {
            if h <= T::zero() {
                *d = T::zero();
            }
        });
        self.slot_grad(&mut grads, Slot::GraphB).assign(
            &d_h2
                .view()
                .into_shape_with_order((b * n * t1, ch))
                .unwrap()
                .sum_axis(Axis(0))
                .insert_axis(Axis(0)),
        );

        // propagation: z_b = P · mixed_b
        let mut d_mixed = Array4::zeros((b, n, t1, ch));
        let mut d_prop = want_adjacency_grad.then(|| Array2::<T>::zeros((n, n)));
        for bi in 0..b {
            let dz = d_h2.slice(s![bi, .., .., ..]).into_shape_with_order((n, t1 * ch)).unwrap();
            let dm = cache.propagation.t().dot(&dz).into_shape_with_order((n, t1, ch)).unwrap();
            d_mixed.slice_mut(s![bi, .., .., ..]).assign(&dm);
            if let Some(dp) = d_prop.as_mut() {
                let m = cache.mixed.slice(s![bi, .., .., ..]).into_shape_with_order((n, t1 * ch)).unwrap();
                *dp += &dz.dot(&m.t());
            }
        }
        let d_mixed_flat = d_mixed.into_shape_with_order((b * n * t1, ch)).unwrap();
        let h1_flat = cache.h1.view().into_shape_with_order((b * n * t1, ch)).unwrap();
        self.slot_grad(&mut grads, Slot::GraphW)
            .assign(&h1_flat.t().dot(&d_mixed_flat));
        let d_h1 = d_mixed_flat.dot(&self.slot(Slot::GraphW).t());

        // first temporal convolution
        let d_pre1 = glu_backward(&d_h1, &cache.conv1_lin, &cache.conv1_gate);
        self.slot_grad(&mut grads, Slot::Conv1W)
            .assign(&cache.conv1_cols.t().dot(&d_pre1));
        self.slot_grad(&mut grads, Slot::Conv1B)
            .assign(&d_pre1.sum_axis(Axis(0)).insert_axis(Axis(0)));

        let d_adjacency =
            d_prop.map(|dp| propagation_to_adjacency_grad(&cache.propagation, &cache.row_sums, &dp));
        Ok(BackwardResult { grads, d_adjacency })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: ForecasterConfig, params: Vec<T>, raa: Option<AttentionState<T>>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, model has {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        model.raa = raa;
        Ok(model)
    }
}

/// Chain rule through `P = row_normalize(A + I)`: with row sums `s_i`,
/// `∂L/∂A_ij = (∂L/∂P_ij − Σ_k ∂L/∂P_ik · P_ik) / s_i`.
fn propagation_to_adjacency_grad<T: Scalar>(
    p: &Array2<T>,
    row_sums: &Array1<T>,
    d_p: &Array2<T>,
) -> Array2<T> {
    // the self-loop keeps every s_i ≥ 1
    let mut out = d_p.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let inner: T = d_p.row(i).iter().zip(p.row(i).iter()).map(|(&d, &q)| d * q).sum();
        let s_i = row_sums[i];
        row.mapv_inplace(|d| (d - inner) / s_i);
    }
    out
}

/// Flattens a forecaster's output rows for all windows into `[window, region, horizon]`.
pub fn stack_windows<T: Scalar>(blocks: &[Array2<T>]) -> Array3<T> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::stack(Axis(0), &views).expect("windows share a shape")
}
