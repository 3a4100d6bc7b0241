//! Epoch loop, early stopping and the multi-seed ablation runner.
//!
//! Inputs are z-scored per region with statistics from the span of time steps
//! touched by training windows. Predictions are mapped back to original units
//! before the joint loss, so every fairness term sees unit-bearing residuals.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{chronological_split, make_windows, DataSplit, SupervisedWindow};
use crate::domain::{DemandTensor, DemographicTable, ForecastWindow, RegionGraph, ResidualVector};
use crate::error::{Error, Result};
use crate::loss::{joint_loss_with_grad, LossBreakdown, LossConfig, Variant};
use crate::metrics::{evaluate_all, mean_residual, MetricsReport};
use crate::model::{Forecaster, ForecasterConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::raa::{attention_weight_gradients, epoch_update, AttentionState, DEFAULT_ATTENTION_DIM};
use crate::rng::{stream_rng, SeedStream};
use crate::scalar::Scalar;

/// How the attention projections receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RaaGradient {
    /// The adapted adjacency is a constant inside each epoch; projections keep their init.
    #[default]
    Detached,
    /// Projections are updated once per epoch from `∂L/∂A_eff` routed through `H`.
    ThroughAdjacency,
}

impl FromStr for RaaGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detached" => Ok(Self::Detached),
            "through_adjacency" => Ok(Self::ThroughAdjacency),
            other => Err(Error::InvalidArgument(format!(
                "unknown raa_gradient {other:?} (expected detached or through_adjacency)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: Variant,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
    pub attention_dim: usize,
    pub raa_gradient: RaaGradient,
    pub hidden_channels: usize,
    pub temporal_kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ForecasterConfig::default();
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            variant: Variant::Original,
            early_stop_patience: 10,
            optimizer: OptimizerKind::Sgd,
            attention_dim: DEFAULT_ATTENTION_DIM,
            raa_gradient: RaaGradient::Detached,
            hidden_channels: m.hidden_channels,
            temporal_kernel: m.temporal_kernel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.attention_dim == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size and attention_dim must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, window: ForecastWindow) -> ForecasterConfig {
        ForecasterConfig {
            hidden_channels: self.hidden_channels,
            temporal_kernel: self.temporal_kernel,
            lookback: window.lookback,
            horizon: window.horizon,
            seed: self.seed,
        }
    }
}

/// Mean training-loss terms over one epoch's batches plus validation MSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub ds_term: f64,
    pub dd_term: f64,
    pub total: f64,
    pub val_mse: f64,
}

/// Which windows fed the optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAudit {
    pub split: (usize, usize, usize),
    pub max_window_index: usize,
    pub windows_seen: usize,
}

#[derive(Debug, Clone)]
pub struct RunRecord<T> {
    pub variant: Variant,
    pub seed: u64,
    pub loss_config: LossConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub metrics: MetricsReport<T>,
    /// Mean test residual per region, `y − ŷ`.
    pub test_residual: ResidualVector<T>,
    pub region_ids: Vec<String>,
    pub attention: Option<AttentionState<T>>,
    pub model: Forecaster<T>,
    pub audit: BatchAudit,
    pub wall_seconds: f64,
}

impl<T: Scalar> RunRecord<T> {
    pub fn h_last(&self) -> Option<&Array2<T>> {
        self.attention.as_ref().and_then(|a| a.h_last.as_ref())
    }

    pub fn a_adapted(&self) -> Option<&Array2<T>> {
        self.attention.as_ref().map(|a| &a.a_adapted)
    }
}

/// Per-region z-score.
#[derive(Debug, Clone)]
struct Scaler<T> {
    mean: Array1<T>,
    std: Array1<T>,
}

impl<T: Scalar> Scaler<T> {
    fn fit(values: &Array2<T>, steps: usize) -> Self {
        let span = values.slice(ndarray::s![.., ..steps]);
        let mean = span.mean_axis(Axis(1)).expect("nonempty span");
        let std = Array1::from_shape_fn(values.nrows(), |i| {
            let m = mean[i];
            let var = span.row(i).iter().map(|&v| (v - m) * (v - m)).sum::<T>()
                / T::from_usize_lossy(steps);
            let s = var.sqrt();
            if s > T::lit(1e-8) {
                s
            } else {
                T::one()
            }
        });
        Self { mean, std }
    }

    fn normalize(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[i], self.std[i]);
            row.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    /// `[window, region, horizon]` in place.
    fn denormalize(&self, z: &mut Array3<T>) {
        for mut w in z.outer_iter_mut() {
            for (i, mut row) in w.rows_mut().into_iter().enumerate() {
                let (m, s) = (self.mean[i], self.std[i]);
                row.mapv_inplace(|v| v * s + m);
            }
        }
    }

    fn scale_grad(&self, d: &mut Array3<T>) {
        for mut w in d.outer_iter_mut() {
            for (i, mut row) in w.rows_mut().into_iter().enumerate() {
                let s = self.std[i];
                row.mapv_inplace(|v| v * s);
            }
        }
    }
}

struct Prepared<T> {
    inputs: Vec<Array2<T>>,
    targets: Vec<Array2<T>>,
    split: DataSplit,
    scaler: Scaler<T>,
}

fn prepare<T: Scalar>(demand: &DemandTensor<T>, window: ForecastWindow) -> Result<Prepared<T>> {
    let windows: Vec<SupervisedWindow<T>> = make_windows(demand, window)?;
    let split = chronological_split(windows.len())?;
    let last_train_step = split.train.end - 1 + window.lookback + window.horizon;
    let scaler = Scaler::fit(demand.values(), last_train_step);
    let (inputs, targets) = windows
        .into_iter()
        .map(|w| (scaler.normalize(&w.input), w.target))
        .unzip();
    Ok(Prepared {
        inputs,
        targets,
        split,
        scaler,
    })
}

fn gather<T: Scalar>(blocks: &[Array2<T>], idx: &[usize]) -> Array3<T> {
    let views: Vec<_> = idx.iter().map(|&i| blocks[i].view()).collect();
    ndarray::stack(Axis(0), &views).expect("windows share a shape")
}

/// Predictions in original units for the given window indices.
fn predict<T: Scalar>(
    model: &Forecaster<T>,
    data: &Prepared<T>,
    idx: &[usize],
    a_eff: &Array2<T>,
    chunk: usize,
) -> Result<Array3<T>> {
    let mut parts = Vec::new();
    for c in idx.chunks(chunk.max(1)) {
        let mut y = model.forward_batch(gather(&data.inputs, c).view(), a_eff)?;
        data.scaler.denormalize(&mut y);
        parts.push(y);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share a shape"))
}

fn mse<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum();
    s / a.len() as f64
}

fn nonfinite_term<T: Scalar>(b: &LossBreakdown<T>) -> Option<&'static str> {
    [("mse", b.mse), ("spatial disparity", b.ds_term), ("fairness regularizer", b.dd_term), ("total", b.total)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
}

/// Trains one model and evaluates it on the test split.
pub fn train<T: Scalar>(
    graph: &RegionGraph<T>,
    demand: &DemandTensor<T>,
    demographics: Option<&DemographicTable<T>>,
    window: ForecastWindow,
    config: &TrainConfig,
    loss_config: &LossConfig,
) -> Result<RunRecord<T>> {
    config.validate()?;
    loss_config.validate()?;
    if demand.n_regions() != graph.len() {
        return Err(Error::ShapeMismatch(format!(
            "demand has {} regions, graph has {}",
            demand.n_regions(),
            graph.len()
        )));
    }
    if let Some(d) = demographics {
        if !d.is_aligned_with(graph) {
            return Err(Error::InvalidArgument(
                "demographics rows do not follow the graph's region order".into(),
            ));
        }
    }
    let started = Instant::now();
    let data = prepare(demand, window)?;
    let a_orig = graph.adjacency();
    let n = graph.len();

    let mut model = Forecaster::<T>::new(config.model_config(window))?;
    if config.variant.uses_raa() {
        let mut rng = stream_rng(config.seed, SeedStream::AttentionInit);
        model.attach_raa(AttentionState::init(a_orig, config.attention_dim, &mut rng)?);
    }
    let mut opt = Optimizer::<T>::new(config.optimizer, config.learning_rate, model.params().len());
    let through = config.raa_gradient == RaaGradient::ThroughAdjacency && model.raa().is_some();
    let mut att_opt = Optimizer::<T>::new(config.optimizer, config.learning_rate, 3 * config.attention_dim);
    let mut shuffle = stream_rng(config.seed, SeedStream::BatchShuffle);

    let mut order: Vec<usize> = data.split.train.clone().collect();
    let val_idx: Vec<usize> = data.split.val.clone().collect();
    let val_y = gather(&data.targets, &val_idx);
    let mut audit = BatchAudit {
        split: (data.split.train.end, data.split.val.end, data.split.test.end),
        max_window_index: 0,
        windows_seen: 0,
    };

    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Forecaster<T>)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        let a_eff = model.raa().map_or_else(|| a_orig.clone(), |r| r.a_adapted.clone());
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 4];
        let mut n_batches = 0usize;
        let mut resid_sum = Array1::<T>::zeros(n);
        let mut resid_count = 0usize;
        let mut att_grad = through.then(|| Array1::<T>::zeros(3 * config.attention_dim));

        for batch in order.chunks(config.batch_size) {
            audit.max_window_index = audit.max_window_index.max(*batch.iter().max().unwrap());
            audit.windows_seen += batch.len();
            let x = gather(&data.inputs, batch);
            let y = gather(&data.targets, batch);
            let cache = model.forward_cached(x.view(), &a_eff)?;
            let mut y_hat = cache.output().clone();
            data.scaler.denormalize(&mut y_hat);
            if y_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch, term: "prediction".into() });
            }
            let lg = joint_loss_with_grad(y_hat.view(), y.view(), a_orig, loss_config, demographics)?;
            if let Some(term) = nonfinite_term(&lg.breakdown) {
                return Err(Error::Diverged { epoch, term: term.into() });
            }
            let b = lg.breakdown;
            for (s, v) in sums.iter_mut().zip([b.mse, b.ds_term, b.dd_term, b.total]) {
                *s += v.as_f64();
            }
            n_batches += 1;
            let r = mean_residual(y_hat.view(), y.view())?;
            let w = T::from_usize_lossy(batch.len() * window.horizon);
            resid_sum.zip_mut_with(&Array1::from(r.into_inner()), |s, &v| *s += v * w);
            resid_count += batch.len() * window.horizon;

            let mut d_z = lg.d_pred;
            data.scaler.scale_grad(&mut d_z);
            let want_adj = att_grad.is_some() && model.raa().is_some_and(|r| r.h_last.is_some());
            let back = model.backward(&cache, &d_z, want_adj)?;
            opt.step(model.params_mut(), &back.grads);
            if let (Some(acc), Some(d_a)) = (att_grad.as_mut(), back.d_adjacency) {
                let d_h = &d_a * a_orig;
                let (gq, gk, gv) = attention_weight_gradients(model.raa().unwrap(), &d_h)?;
                let k = config.attention_dim;
                acc.slice_mut(ndarray::s![..k]).zip_mut_with(&gq, |s, &g| *s += g);
                acc.slice_mut(ndarray::s![k..2 * k]).zip_mut_with(&gk, |s, &g| *s += g);
                acc.slice_mut(ndarray::s![2 * k..]).zip_mut_with(&gv, |s, &g| *s += g);
            }
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, term: "parameters".into() });
        }

        if let Some(state) = model.raa_mut() {
            if let Some(acc) = att_grad {
                let k = config.attention_dim;
                let mut w: Vec<T> = state.w_q.iter().chain(&state.w_k).chain(&state.w_v).copied().collect();
                att_opt.step(&mut w, acc.as_slice().unwrap());
                state.w_q = Array1::from(w[..k].to_vec());
                state.w_k = Array1::from(w[k..2 * k].to_vec());
                state.w_v = Array1::from(w[2 * k..].to_vec());
            }
            let r_epoch = resid_sum.mapv(|s| s / T::from_usize_lossy(resid_count));
            epoch_update(state, &ResidualVector::new(r_epoch)?, a_orig)?;
        }

        let a_next = model.raa().map_or_else(|| a_orig.clone(), |r| r.a_adapted.clone());
        let val_pred = predict(&model, &data, &val_idx, &a_next, config.batch_size.max(64))?;
        let val_mse = mse(&val_pred, &val_y);
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch, term: "validation mse".into() });
        }
        let nb = n_batches as f64;
        logs.push(EpochLog {
            epoch,
            mse: sums[0] / nb,
            ds_term: sums[1] / nb,
            dd_term: sums[2] / nb,
            total: sums[3] / nb,
            val_mse,
        });

        if best.as_ref().map_or(true, |(v, _, _)| val_mse < *v) {
            best = Some((val_mse, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.early_stop_patience {
                break;
            }
        }
    }

    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    let test_idx: Vec<usize> = data.split.test.clone().collect();
    let a_final = model.raa().map_or_else(|| a_orig.clone(), |r| r.a_adapted.clone());
    let test_pred = predict(&model, &data, &test_idx, &a_final, config.batch_size.max(64))?;
    let test_y = gather(&data.targets, &test_idx);
    let metrics = evaluate_all(test_pred.view(), test_y.view(), a_orig, demographics)?;
    let test_residual = mean_residual(test_pred.view(), test_y.view())?;

    Ok(RunRecord {
        variant: config.variant,
        seed: config.seed,
        loss_config: *loss_config,
        epochs: logs,
        best_epoch,
        metrics,
        test_residual,
        region_ids: graph.region_ids().to_vec(),
        attention: model.raa().cloned(),
        model,
        audit,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Loss settings for a variant, keeping the caller's λ values.
pub fn loss_for_variant(variant: Variant, base: &LossConfig) -> LossConfig {
    LossConfig {
        lambda_s: base.lambda_s,
        lambda_d: base.lambda_d,
        ..variant.loss_config()
    }
}

/// One (variant, seed) cell of the ablation matrix.
#[derive(Debug, Clone)]
pub struct AblationCell<T> {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: std::result::Result<RunRecord<T>, String>,
}

/// Per-variant medians across the seeds that completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mae: Option<f64>,
    pub smape: Option<f64>,
    pub gei: Option<f64>,
    pub sdi: Option<f64>,
    pub morans_i: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct AblationTable<T> {
    pub cells: Vec<AblationCell<T>>,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

pub fn summarize<T: Scalar>(variant: Variant, cells: &[AblationCell<T>]) -> AblationRow {
    let ok: Vec<MetricsReport<f64>> = cells
        .iter()
        .filter(|c| c.variant == variant)
        .filter_map(|c| c.outcome.as_ref().ok().map(|r| r.metrics.to_f64()))
        .collect();
    let failed = cells
        .iter()
        .filter(|c| c.variant == variant && c.outcome.is_err())
        .count();
    let pick = |f: &dyn Fn(&MetricsReport<f64>) -> Option<f64>| {
        median(&ok.iter().filter_map(f).filter(|v| v.is_finite()).collect::<Vec<_>>())
    };
    AblationRow {
        variant,
        mae: pick(&|m| Some(m.mae)),
        smape: pick(&|m| Some(m.smape)),
        gei: pick(&|m| Some(m.gei)),
        sdi: pick(&|m| m.sdi),
        morans_i: pick(&|m| m.morans_i),
        completed: ok.len(),
        failed,
    }
}

/// Runs every variant for every seed. Cells are independent and may run on
/// `jobs` threads; results are ordered variant-major regardless.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<T: Scalar + Send + Sync>(
    graph: &RegionGraph<T>,
    demand: &DemandTensor<T>,
    demographics: Option<&DemographicTable<T>>,
    window: ForecastWindow,
    config: &TrainConfig,
    base_loss: &LossConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable<T>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let plan: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let slots: Vec<Mutex<Option<AblationCell<T>>>> = plan.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(variant, seed)) = plan.get(i) else { break };
        let cfg = TrainConfig { variant, seed, ..*config };
        let outcome = train(graph, demand, demographics, window, &cfg, &loss_for_variant(variant, base_loss))
            .map_err(|e| e.to_string());
        *slots[i].lock().unwrap() = Some(AblationCell { variant, seed, outcome });
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1) {
            s.spawn(worker);
        }
        worker();
    });
    let cells: Vec<AblationCell<T>> = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every cell ran"))
        .collect();
    let rows = Variant::ALL.iter().map(|&v| summarize(v, &cells)).collect();
    Ok(AblationTable { cells, rows })
}
