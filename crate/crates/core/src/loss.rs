//! Equality-enhancing training objective.
//!
//! `L = MSE(ŷ, y) + λ_s·D_s(r, A) + λ_d·T_d(r)` where `r` is the per-region
//! mean residual of the batch and `T_d` is a configurable fairness term.
//! Every term comes with its analytic gradient with respect to `ŷ`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::DemographicTable;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_GEI_ALPHA, GEI_SHIFT_EPS};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.05;
/// Variance floor applied inside Moran's I and correlations during training.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdKind {
    None,
    MoransIShifted,
    Gei,
    Demographic,
}

impl DdKind {
    pub const ALL: [DdKind; 4] = [
        DdKind::None,
        DdKind::MoransIShifted,
        DdKind::Gei,
        DdKind::Demographic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DdKind::None => "none",
            DdKind::MoransIShifted => "morans_i_shifted",
            DdKind::Gei => "gei",
            DdKind::Demographic => "demographic",
        }
    }
}

impl FromStr for DdKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DdKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dd_kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub dd_kind: DdKind,
    pub use_ds: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_s: DEFAULT_LAMBDA,
            lambda_d: DEFAULT_LAMBDA,
            dd_kind: DdKind::None,
            use_ds: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a finite nonnegative number"
                )));
            }
        }
        Ok(())
    }
}

/// The seven ablation configurations, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Raa,
    RaaDs,
    RaaMorans,
    RaaGei,
    RaaDsMorans,
    RaaDsGei,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Original,
        Variant::Raa,
        Variant::RaaDs,
        Variant::RaaMorans,
        Variant::RaaGei,
        Variant::RaaDsMorans,
        Variant::RaaDsGei,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Raa => "raa",
            Variant::RaaDs => "raa_ds",
            Variant::RaaMorans => "raa_morans",
            Variant::RaaGei => "raa_gei",
            Variant::RaaDsMorans => "raa_ds_morans",
            Variant::RaaDsGei => "raa_ds_gei",
        }
    }

    pub fn uses_raa(self) -> bool {
        self != Variant::Original
    }

    pub fn loss_config(self) -> LossConfig {
        let (use_ds, dd_kind) = match self {
            Variant::Original | Variant::Raa => (false, DdKind::None),
            Variant::RaaDs => (true, DdKind::None),
            Variant::RaaMorans => (false, DdKind::MoransIShifted),
            Variant::RaaGei => (false, DdKind::Gei),
            Variant::RaaDsMorans => (true, DdKind::MoransIShifted),
            Variant::RaaDsGei => (true, DdKind::Gei),
        };
        LossConfig {
            use_ds,
            dd_kind,
            ..LossConfig::default()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            })
    }
}

/// Loss configuration and RAA flag for a named variant.
pub fn variant_config(name: &str) -> Result<(LossConfig, bool)> {
    let v: Variant = name.parse()?;
    Ok((v.loss_config(), v.uses_raa()))
}

/// Weighted terms of the joint loss; they sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub mse: T,
    pub ds_term: T,
    pub dd_term: T,
    pub total: T,
}

#[derive(Debug, Clone)]
pub struct LossGradient<T> {
    pub breakdown: LossBreakdown<T>,
    /// `∂L/∂ŷ`, same layout as the predictions.
    pub d_pred: Array3<T>,
}

/// Evaluates the joint loss on predictions laid out `[window, region, horizon]`.
pub fn joint_loss<T: Scalar>(
    y_hat: ArrayView3<T>,
    y: ArrayView3<T>,
    a_effective: &Array2<T>,
    config: &LossConfig,
    demographics: Option<&DemographicTable<T>>,
) -> Result<LossBreakdown<T>> {
    evaluate(y_hat, y, a_effective, config, demographics, false).map(|g| g.breakdown)
}

/// Joint loss together with its gradient with respect to the predictions.
pub fn joint_loss_with_grad<T: Scalar>(
    y_hat: ArrayView3<T>,
    y: ArrayView3<T>,
    a_effective: &Array2<T>,
    config: &LossConfig,
    demographics: Option<&DemographicTable<T>>,
) -> Result<LossGradient<T>> {
    evaluate(y_hat, y, a_effective, config, demographics, true)
}

fn evaluate<T: Scalar>(
    y_hat: ArrayView3<T>,
    y: ArrayView3<T>,
    a: &Array2<T>,
    config: &LossConfig,
    demographics: Option<&DemographicTable<T>>,
    want_grad: bool,
) -> Result<LossGradient<T>> {
    config.validate()?;
    if y_hat.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            y_hat.dim(),
            y.dim()
        )));
    }
    let (w, n, h) = y.dim();
    if w * n * h == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if a.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {:?} for {n} regions",
            a.dim()
        )));
    }
    let demo = match (config.dd_kind, demographics) {
        (DdKind::Demographic, None) => {
            return Err(Error::InvalidArgument(
                "dd_kind=demographic requires a demographic table".into(),
            ))
        }
        (DdKind::Demographic, Some(d)) if d.len() != n => {
            return Err(Error::ShapeMismatch("demographics vs regions".into()))
        }
        (_, d) => d,
    };

    let diff = &y_hat - &y;
    let n_el = T::from_usize_lossy(w * n * h);
    let mse = diff.iter().map(|&d| d * d).sum::<T>() / n_el;

    // r = mean over windows and horizon of (y − ŷ)
    let r = diff.sum_axis(Axis(0)).sum_axis(Axis(1)) / (-T::from_usize_lossy(w * h));

    let lambda_s = T::lit(config.lambda_s);
    let lambda_d = T::lit(config.lambda_d);
    let mut d_r = Array1::<T>::zeros(n);

    let ds_term = if config.use_ds {
        let (v, g) = spatial_disparity_grad(&r, a);
        d_r.scaled_add(lambda_s, &g);
        lambda_s * v
    } else {
        T::zero()
    };

    let (td, g_td) = match config.dd_kind {
        DdKind::None => (T::zero(), None),
        DdKind::MoransIShifted => {
            let (v, g) = morans_shifted_grad(&r, a)?;
            (v, Some(g))
        }
        DdKind::Gei => {
            let (v, g) = gei_grad(&r, T::lit(DEFAULT_GEI_ALPHA));
            (v, Some(g))
        }
        DdKind::Demographic => {
            let d = demo.expect("checked above");
            let (v1, g1) = abs_correlation_grad(&r, d.minority_frac());
            let (v2, g2) = abs_correlation_grad(&r, d.majority_frac());
            (v1 + v2, Some(g1 + g2))
        }
    };
    if let Some(g) = g_td {
        d_r.scaled_add(lambda_d, &g);
    }
    let dd_term = lambda_d * td;

    let breakdown = LossBreakdown {
        mse,
        ds_term,
        dd_term,
        total: mse + ds_term + dd_term,
    };

    let d_pred = if want_grad {
        let two_over = T::lit(2.0) / n_el;
        let mut g = diff.mapv(|d| d * two_over);
        // ∂r_i/∂ŷ[w,i,h] = −1/(W·H)
        let per_region = d_r.mapv(|v| -v / T::from_usize_lossy(w * h));
        for mut window in g.outer_iter_mut() {
            for (i, mut row) in window.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| v + per_region[i]);
            }
        }
        g
    } else {
        Array3::zeros((0, 0, 0))
    };
    Ok(LossGradient { breakdown, d_pred })
}

fn centered<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    let m = x.mean().unwrap_or_else(T::zero);
    x.mapv(|v| v - m)
}

/// `D_s` and its gradient; the ReLU splits use the subgradient 0 at r_i = 0.
fn spatial_disparity_grad<T: Scalar>(r: &Array1<T>, a: &Array2<T>) -> (T, Array1<T>) {
    let n = T::from_usize_lossy(r.len());
    let pos = r.mapv(|v| v.max(T::zero()));
    let neg = r.mapv(|v| v.min(T::zero()));
    let dev_pos = centered(&a.dot(&pos));
    let dev_neg = centered(&a.dot(&neg));
    let value = (dev_pos.dot(&dev_pos) + dev_neg.dot(&dev_neg)) / n;
    let two_n = T::lit(2.0) / n;
    let back_pos = a.t().dot(&dev_pos) * two_n;
    let back_neg = a.t().dot(&dev_neg) * two_n;
    let grad = Array1::from_shape_fn(r.len(), |i| {
        if r[i] > T::zero() {
            back_pos[i]
        } else if r[i] < T::zero() {
            back_neg[i]
        } else {
            T::zero()
        }
    });
    (value, grad)
}

fn morans_shifted_grad<T: Scalar>(r: &Array1<T>, a: &Array2<T>) -> Result<(T, Array1<T>)> {
    let w: T = a.sum();
    if !(w > T::zero()) {
        return Err(Error::ZeroAdjacency);
    }
    let n = T::from_usize_lossy(r.len());
    let z = centered(r);
    let az = a.dot(&z);
    let num = z.dot(&az);
    let den_raw = z.dot(&z);
    let floor = n * T::lit(VARIANCE_FLOOR);
    let floored = den_raw < floor;
    let den = if floored { floor } else { den_raw };
    let k = n / w;
    let value = k * num / den + T::one();
    let sym = &az + &a.t().dot(&z);
    let mut g = sym.mapv(|v| k * v / den);
    if !floored {
        g.scaled_add(-k * T::lit(2.0) * num / (den * den), &z);
    }
    Ok((value, centered(&g)))
}

fn gei_grad<T: Scalar>(r: &Array1<T>, alpha: T) -> (T, Array1<T>) {
    let len = r.len();
    let n = T::from_usize_lossy(len);
    let eps = T::lit(GEI_SHIFT_EPS);
    let (argmin, min) = r
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::infinity()), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let shift_active = min < T::zero();
    let shift = (-min).max(T::zero()) + eps;
    let b = r.mapv(|v| v + shift);
    let b_mean = b.mean().unwrap_or_else(T::zero);
    if b_mean < eps {
        return (T::zero(), Array1::zeros(len));
    }
    let ratio = b.mapv(|v| v / b_mean);
    let value = ratio.iter().map(|&q| q.powf(alpha) - T::one()).sum::<T>()
        / (n * alpha * (alpha - T::one()));
    let mean_pow = ratio.iter().map(|&q| q.powf(alpha)).sum::<T>() / n;
    let coef = T::one() / (n * (alpha - T::one()) * b_mean);
    let d_b = ratio.mapv(|q| coef * (q.powf(alpha - T::one()) - mean_pow));
    let mut grad = d_b.clone();
    if shift_active {
        // b_i = r_i − r_argmin + eps
        grad[argmin] = grad[argmin] - d_b.sum();
    }
    (value, grad)
}

fn abs_correlation_grad<T: Scalar>(r: &Array1<T>, p: &Array1<T>) -> (T, Array1<T>) {
    let n = T::from_usize_lossy(r.len());
    let floor = n * T::lit(VARIANCE_FLOOR);
    let z = centered(r);
    let q = centered(p);
    let szz_raw = z.dot(&z);
    let z_floored = szz_raw < floor;
    let szz = szz_raw.max(floor);
    let sqq = q.dot(&q).max(floor);
    let root = (szz * sqq).sqrt();
    let c = z.dot(&q) / root;
    let mut g = q.mapv(|v| v / root);
    if !z_floored {
        g.scaled_add(-c / szz, &z);
    }
    let sign = if c > T::zero() {
        T::one()
    } else if c < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    (c.abs(), g * sign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ResidualVector;
    use crate::metrics;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn grid_adjacency() -> Array2<f64> {
        array![
            [0.0, 1.0, 0.5, 0.0],
            [1.0, 0.0, 0.0, 0.5],
            [0.5, 0.0, 0.0, 1.0],
            [0.0, 0.5, 1.0, 0.0]
        ]
    }

    fn demo() -> DemographicTable<f64> {
        DemographicTable::new(
            (0..4).map(|i| format!("r{i}")).collect(),
            array![0.1, 0.3, 0.7, 0.9],
            array![0.85, 0.6, 0.3, 0.05],
        )
        .unwrap()
    }

    fn batch() -> (Array3<f64>, Array3<f64>) {
        let y = Array3::from_shape_fn((3, 4, 2), |(w, n, h)| 1.0 + (w * 5 + n * 3 + h) as f64 * 0.37);
        let y_hat = Array3::from_shape_fn((3, 4, 2), |(w, n, h)| {
            y[[w, n, h]] + ((w + 2 * n + 3 * h) % 7) as f64 * 0.21 - 0.55 + n as f64 * 0.13
        });
        (y_hat, y)
    }

    #[test]
    fn zero_lambdas_give_plain_mse() {
        let (p, t) = batch();
        let cfg = LossConfig {
            lambda_s: 0.0,
            lambda_d: 0.0,
            dd_kind: DdKind::Gei,
            use_ds: true,
        };
        let l = joint_loss(p.view(), t.view(), &grid_adjacency(), &cfg, None).unwrap();
        let mse = (&p - &t).mapv(|d| d * d).mean().unwrap();
        assert_eq!(l.total, l.mse);
        assert_abs_diff_eq!(l.mse, mse, epsilon = 1e-14);
        assert_eq!(l.ds_term, 0.0);
    }

    #[test]
    fn terms_match_standalone_metrics() {
        let (p, t) = batch();
        let a = grid_adjacency();
        let r = metrics::mean_residual(p.view(), t.view()).unwrap();
        let d = demo();
        for kind in DdKind::ALL {
            let cfg = LossConfig {
                dd_kind: kind,
                use_ds: true,
                ..LossConfig::default()
            };
            let l = joint_loss(p.view(), t.view(), &a, &cfg, Some(&d)).unwrap();
            let ds = metrics::spatial_disparity(&r, &a).unwrap();
            assert_abs_diff_eq!(l.ds_term, 0.05 * ds, epsilon = 1e-12);
            let td = match kind {
                DdKind::None => 0.0,
                DdKind::MoransIShifted => metrics::morans_i_shifted(&r, &a).unwrap(),
                DdKind::Gei => metrics::gei(&r, 2.0).unwrap(),
                DdKind::Demographic => metrics::demographic_disparity(&r, &d).unwrap(),
            };
            assert_abs_diff_eq!(l.dd_term, 0.05 * td, epsilon = 1e-12);
            assert_abs_diff_eq!(l.total, l.mse + l.ds_term + l.dd_term, epsilon = 1e-10);
        }
    }

    #[test]
    fn perfect_prediction_is_zero_loss() {
        let (_, t) = batch();
        let cfg = Variant::RaaDsGei.loss_config();
        let l = joint_loss(t.view(), t.view(), &grid_adjacency(), &cfg, None).unwrap();
        assert_eq!(l.total, 0.0);
        // Moran's term does not abort on constant residuals
        let cfg = Variant::RaaDsMorans.loss_config();
        let l = joint_loss_with_grad(t.view(), t.view(), &grid_adjacency(), &cfg, None).unwrap();
        assert!(l.breakdown.total.is_finite());
        assert!(l.d_pred.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn demographic_kind_requires_table() {
        let (p, t) = batch();
        let cfg = LossConfig {
            dd_kind: DdKind::Demographic,
            ..LossConfig::default()
        };
        assert!(joint_loss(p.view(), t.view(), &grid_adjacency(), &cfg, None).is_err());
    }

    #[test]
    fn rejects_negative_lambda_and_shape_mismatch() {
        let (p, t) = batch();
        let cfg = LossConfig {
            lambda_s: -1.0,
            ..LossConfig::default()
        };
        assert!(joint_loss(p.view(), t.view(), &grid_adjacency(), &cfg, None).is_err());
        let cfg = LossConfig::default();
        assert!(joint_loss(p.view(), t.view(), &Array2::zeros((3, 3)), &cfg, None).is_err());
    }

    #[test]
    fn increasing_lambda_s_never_decreases_loss() {
        let (p, t) = batch();
        let mut last = f64::NEG_INFINITY;
        for k in 0..10 {
            let cfg = LossConfig {
                lambda_s: k as f64 * 0.1,
                use_ds: true,
                ..LossConfig::default()
            };
            let l = joint_loss(p.view(), t.view(), &grid_adjacency(), &cfg, None).unwrap();
            assert!(l.total >= last);
            last = l.total;
        }
    }

    #[test]
    fn variant_table() {
        let (cfg, raa) = variant_config("original").unwrap();
        assert!(!raa && !cfg.use_ds && cfg.dd_kind == DdKind::None);
        let (cfg, raa) = variant_config("raa_ds_gei").unwrap();
        assert!(raa && cfg.use_ds && cfg.dd_kind == DdKind::Gei);
        let (cfg, raa) = variant_config("raa_morans").unwrap();
        assert!(raa && !cfg.use_ds && cfg.dd_kind == DdKind::MoransIShifted);
        assert_eq!(cfg.lambda_s, 0.05);
        assert_eq!(cfg.lambda_d, 0.05);
        assert!(matches!(variant_config("bogus"), Err(Error::UnknownVariant { .. })));
        assert!(Variant::ALL.iter().all(|v| v.loss_config().dd_kind != DdKind::Demographic));
    }

    #[test]
    fn lone_minimum_shift_enters_gei_gradient() {
        let r = array![-1.0, 0.5, 2.0];
        let (v, g) = gei_grad(&r, 2.0);
        let rv = ResidualVector::new(r.clone()).unwrap();
        assert_abs_diff_eq!(v, metrics::gei(&rv, 2.0).unwrap(), epsilon = 1e-15);
        // translation invariance of the shifted index: gradients sum to zero
        assert_abs_diff_eq!(g.sum(), 0.0, epsilon = 1e-12);
    }
}
