//! Error and fairness metrics over prediction residuals.
//!
//! Every fairness metric consumes a per-region [`ResidualVector`]; error
//! metrics (MAE, SMAPE) consume raw prediction/target elements.

use ndarray::{Array1, Array2, ArrayView, ArrayView3, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::domain::{DemographicTable, ResidualVector};
use crate::error::{Error, Result};
use crate::scalar::{mean, Scalar};

/// Offset added to the minimal shift that makes GEI inputs nonnegative.
pub const GEI_SHIFT_EPS: f64 = 1e-9;
pub const DEFAULT_GEI_ALPHA: f64 = 2.0;
pub const DEFAULT_SMAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub mae: T,
    pub smape: T,
    pub gei: T,
    pub spatial_disparity: T,
    /// `None` when the residuals have zero variance.
    pub morans_i: Option<T>,
    /// `None` when a correlation is degenerate or no demographics were given.
    pub sdi: Option<T>,
    pub demographic_disparity: Option<T>,
}

impl<T: Scalar> MetricsReport<T> {
    pub fn to_f64(&self) -> MetricsReport<f64> {
        MetricsReport {
            mae: self.mae.as_f64(),
            smape: self.smape.as_f64(),
            gei: self.gei.as_f64(),
            spatial_disparity: self.spatial_disparity.as_f64(),
            morans_i: self.morans_i.map(Scalar::as_f64),
            sdi: self.sdi.map(Scalar::as_f64),
            demographic_disparity: self.demographic_disparity.map(Scalar::as_f64),
        }
    }
}

fn check_square<T>(r: &ResidualVector<T>, a: &Array2<T>) -> Result<()>
where
    T: Scalar,
{
    let n = r.len();
    if a.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "residual length {n} vs adjacency {:?}",
            a.dim()
        )));
    }
    Ok(())
}

/// Sign-aware variance of neighbour-aggregated residuals.
///
/// With `s⁺ = A·max(r, 0)` and `s⁻ = A·min(r, 0)`, returns the mean over
/// regions of `(s⁺_i − mean s⁺)² + (s⁻_i − mean s⁻)²`.
pub fn spatial_disparity<T: Scalar>(r: &ResidualVector<T>, a: &Array2<T>) -> Result<T> {
    check_square(r, a)?;
    let pos = r.values().mapv(|v| v.max(T::zero()));
    let neg = r.values().mapv(|v| v.min(T::zero()));
    let s_pos = a.dot(&pos);
    let s_neg = a.dot(&neg);
    Ok(population_variance(s_pos.as_slice().unwrap())
        + population_variance(s_neg.as_slice().unwrap()))
}

fn population_variance<T: Scalar>(xs: &[T]) -> T {
    let m = mean(xs);
    mean(&xs.iter().map(|&x| (x - m) * (x - m)).collect::<Vec<_>>())
}

/// Pearson correlation; errors when either side has zero variance.
pub fn pearson<T: Scalar>(
    x: &Array1<T>,
    y: &Array1<T>,
    x_name: &'static str,
    y_name: &'static str,
) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "correlation of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mx = mean(x.as_slice().unwrap());
    let my = mean(y.as_slice().unwrap());
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y.iter()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if !(sxx > T::zero()) {
        return Err(Error::DegenerateCorrelation(x_name));
    }
    if !(syy > T::zero()) {
        return Err(Error::DegenerateCorrelation(y_name));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn group_correlations<T: Scalar>(
    r: &ResidualVector<T>,
    d: &DemographicTable<T>,
) -> Result<(T, T)> {
    if d.len() != r.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} residuals vs {} demographic rows",
            r.len(),
            d.len()
        )));
    }
    let c_minor = pearson(r.values(), d.minority_frac(), "residuals", "minority_frac")?;
    let c_major = pearson(r.values(), d.majority_frac(), "residuals", "majority_frac")?;
    Ok((c_minor, c_major))
}

/// `|Corr(r, minority)| + |Corr(r, majority)|`, in `[0, 2]`.
pub fn demographic_disparity<T: Scalar>(
    r: &ResidualVector<T>,
    d: &DemographicTable<T>,
) -> Result<T> {
    let (cm, c_maj) = group_correlations(r, d)?;
    Ok(cm.abs() + c_maj.abs())
}

/// Generalized entropy index of residuals shifted to be nonnegative.
///
/// The shift is the smallest `m` making every `r_i + m ≥ 0`, plus
/// [`GEI_SHIFT_EPS`].
pub fn gei<T: Scalar>(r: &ResidualVector<T>, alpha: T) -> Result<T> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("GEI of an empty residual vector".into()));
    }
    if alpha == T::zero() || alpha == T::one() || !alpha.is_finite() {
        return Err(Error::InvalidArgument("GEI alpha must differ from 0 and 1".into()));
    }
    let eps = T::lit(GEI_SHIFT_EPS);
    let min = r.values().iter().copied().fold(T::infinity(), T::min);
    let shift = (-min).max(T::zero()) + eps;
    let b: Vec<T> = r.values().iter().map(|&v| v + shift).collect();
    let b_mean = mean(&b);
    if b_mean < eps {
        return Ok(T::zero());
    }
    let n = T::from_usize_lossy(b.len());
    let total: T = b.iter().map(|&bi| (bi / b_mean).powf(alpha) - T::one()).sum();
    Ok(total / (n * alpha * (alpha - T::one())))
}

/// Global Moran's I of the residuals under spatial weights `a`.
pub fn morans_i<T: Scalar>(r: &ResidualVector<T>, a: &Array2<T>) -> Result<T> {
    check_square(r, a)?;
    let w: T = a.iter().copied().sum();
    if !(w > T::zero()) {
        return Err(Error::ZeroAdjacency);
    }
    let m = mean(r.values().as_slice().unwrap());
    let z = r.values().mapv(|v| v - m);
    let den = z.dot(&z);
    if !(den > T::zero()) {
        return Err(Error::ZeroVariance);
    }
    let num = z.dot(&a.dot(&z));
    let n = T::from_usize_lossy(r.len());
    Ok(n / w * num / den)
}

/// `I* = I + 1`, the nonnegative form used as a loss term.
pub fn morans_i_shifted<T: Scalar>(r: &ResidualVector<T>, a: &Array2<T>) -> Result<T> {
    Ok(morans_i(r, a)? + T::one())
}

/// Scaled disparity index from the two group correlations.
pub fn sdi_from_correlations<T: Scalar>(c_minor: T, c_major: T) -> T {
    let denom = c_minor.abs() + c_major.abs();
    if denom < T::lit(1e-12) {
        return T::zero();
    }
    (c_minor - c_major).abs() / denom * (c_minor * c_major).abs().sqrt()
}

pub fn sdi<T: Scalar>(r: &ResidualVector<T>, d: &DemographicTable<T>) -> Result<T> {
    let (cm, c_maj) = group_correlations(r, d)?;
    Ok(sdi_from_correlations(cm, c_maj))
}

fn check_same_shape<T, D: Dimension>(a: &ArrayView<T, D>, b: &ArrayView<T, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn smape<T: Scalar, D: Dimension>(
    y_hat: ArrayView<T, D>,
    y: ArrayView<T, D>,
    eps: T,
) -> Result<T> {
    check_same_shape(&y_hat, &y)?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("SMAPE of empty arrays".into()));
    }
    let two = T::lit(2.0);
    let total: T = y_hat
        .iter()
        .zip(y.iter())
        .map(|(&p, &t)| (two * (p - t).abs() + eps) / (p.abs() + t.abs() + eps))
        .sum();
    Ok(total / T::from_usize_lossy(y.len()))
}

pub fn mae<T: Scalar, D: Dimension>(y_hat: ArrayView<T, D>, y: ArrayView<T, D>) -> Result<T> {
    check_same_shape(&y_hat, &y)?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("MAE of empty arrays".into()));
    }
    let total: T = y_hat.iter().zip(y.iter()).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(total / T::from_usize_lossy(y.len()))
}

/// Per-region mean of `y − ŷ` over windows and horizon steps.
///
/// Arrays are laid out `[window, region, horizon]`.
pub fn mean_residual<T: Scalar>(
    y_hat: ArrayView3<T>,
    y: ArrayView3<T>,
) -> Result<ResidualVector<T>> {
    check_same_shape(&y_hat, &y)?;
    let (w, _, h) = y.dim();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("no predictions to aggregate".into()));
    }
    let diff = &y - &y_hat;
    let per_region = diff.sum_axis(Axis(0)).sum_axis(Axis(1)) / T::from_usize_lossy(w * h);
    ResidualVector::new(per_region)
}

/// Computes the full report on the per-region mean residual.
///
/// Degenerate fairness metrics (zero variance, missing demographics) are
/// recorded as `None` instead of failing the report.
pub fn evaluate_all<T: Scalar>(
    y_hat: ArrayView3<T>,
    y: ArrayView3<T>,
    a: &Array2<T>,
    demographics: Option<&DemographicTable<T>>,
) -> Result<MetricsReport<T>> {
    let r = mean_residual(y_hat, y)?;
    let morans = match morans_i(&r, a) {
        Ok(v) => Some(v),
        Err(Error::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    let (sdi_v, dd_v) = match demographics {
        Some(d) => match group_correlations(&r, d) {
            Ok((cm, c_maj)) => (Some(sdi_from_correlations(cm, c_maj)), Some(cm.abs() + c_maj.abs())),
            Err(Error::DegenerateCorrelation(_)) => (None, None),
            Err(e) => return Err(e),
        },
        None => (None, None),
    };
    Ok(MetricsReport {
        mae: mae(y_hat, y)?,
        smape: smape(y_hat, y, T::lit(DEFAULT_SMAPE_EPS))?,
        gei: gei(&r, T::lit(DEFAULT_GEI_ALPHA))?,
        spatial_disparity: spatial_disparity(&r, a)?,
        morans_i: morans,
        sdi: sdi_v,
        demographic_disparity: dd_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn rv(v: &[f64]) -> ResidualVector<f64> {
        ResidualVector::from_vec(v.to_vec()).unwrap()
    }

    fn demo(minor: &[f64], major: &[f64]) -> DemographicTable<f64> {
        let ids = (0..minor.len()).map(|i| format!("r{i}")).collect();
        DemographicTable::new(ids, Array1::from(minor.to_vec()), Array1::from(major.to_vec()))
            .unwrap()
    }

    #[test]
    fn spatial_disparity_examples() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(spatial_disparity(&rv(&[0.0, 0.0]), &a).unwrap(), 0.0);
        assert_abs_diff_eq!(spatial_disparity(&rv(&[2.0, -1.0]), &a).unwrap(), 1.25, epsilon = 1e-15);
        let stoch = array![[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [0.0, 0.0, 1.0]];
        assert_abs_diff_eq!(spatial_disparity(&rv(&[3.0, 3.0, 3.0]), &stoch).unwrap(), 0.0, epsilon = 1e-15);
        assert!(spatial_disparity(&rv(&[1.0]), &a).is_err());
    }

    #[test]
    fn demographic_disparity_examples() {
        let m = [0.1, 0.5, 0.9, 0.3];
        let maj: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        let d = demo(&m, &maj);
        assert_abs_diff_eq!(demographic_disparity(&rv(&m), &d).unwrap(), 2.0, epsilon = 1e-12);
        assert!(matches!(
            demographic_disparity(&rv(&[1.0; 4]), &d),
            Err(Error::DegenerateCorrelation("residuals"))
        ));
    }

    #[test]
    fn gei_examples() {
        assert_abs_diff_eq!(gei(&rv(&[2.0, 2.0, 2.0]), 2.0).unwrap(), 0.0, epsilon = 1e-15);
        // shift is 1e-9 here, below the tolerance
        assert_abs_diff_eq!(gei(&rv(&[1.0, 3.0]), 2.0).unwrap(), 0.125, epsilon = 1e-9);
        assert!(gei(&rv(&[]), 2.0).is_err());
        assert!(gei(&rv(&[1.0]), 1.0).is_err());
        // all residuals sit at the minimum: b̄ = eps, degenerate branch
        assert_eq!(gei(&rv(&[-4.0, -4.0]), 2.0).unwrap(), 0.0);
    }

    #[test]
    fn morans_i_examples() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        assert_abs_diff_eq!(morans_i(&rv(&[1.0, -1.0]), &a).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(morans_i_shifted(&rv(&[1.0, -1.0]), &a).unwrap(), 0.0, epsilon = 1e-12);
        assert!(matches!(morans_i(&rv(&[1.0, 1.0]), &a), Err(Error::ZeroVariance)));
        assert!(matches!(
            morans_i(&rv(&[1.0, 2.0]), &Array2::zeros((2, 2))),
            Err(Error::ZeroAdjacency)
        ));
    }

    #[test]
    fn morans_i_two_cliques_is_near_two_shifted() {
        // 4 nodes, cliques {0,1} and {2,3}; residuals clustered per clique
        let a = array![
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0]
        ];
        let v = morans_i_shifted(&rv(&[1.0, 1.0, -1.0, -1.0]), &a).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sdi_examples() {
        assert_eq!(sdi_from_correlations(0.3, 0.3), 0.0);
        assert_abs_diff_eq!(sdi_from_correlations(0.5, -0.5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sdi_from_correlations(0.4, 0.1), 0.12, epsilon = 1e-15);
        assert_eq!(sdi_from_correlations(0.0, 0.0), 0.0);
    }

    #[test]
    fn error_metric_examples() {
        let eps = 1e-8;
        let v = smape(array![1.0].view(), array![1.0].view(), eps).unwrap();
        assert_abs_diff_eq!(v, eps / (2.0 + eps), epsilon = 1e-20);
        assert_eq!(smape(array![0.0].view(), array![0.0].view(), eps).unwrap(), 1.0);
        let v = smape(array![0.0].view(), array![2.0].view(), eps).unwrap();
        assert_abs_diff_eq!(v, (4.0 + eps) / (2.0 + eps), epsilon = 1e-15);
        assert!(smape(array![0.0].view(), array![0.0, 1.0].view(), eps).is_err());

        assert_eq!(mae(array![1.0, 3.0].view(), array![1.0, 3.0].view()).unwrap(), 0.0);
        assert_eq!(mae(array![1.0, 3.0].view(), array![2.0, 2.0].view()).unwrap(), 1.0);
    }

    #[test]
    fn perfect_predictions_report() {
        let y = Array3::from_shape_fn((3, 4, 2), |(w, n, h)| (w + n * 2 + h) as f64);
        let a = array![
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0]
        ];
        let d = demo(&[0.1, 0.2, 0.8, 0.9], &[0.9, 0.8, 0.2, 0.1]);
        let rep = evaluate_all(y.view(), y.view(), &a, Some(&d)).unwrap();
        assert_eq!(rep.mae, 0.0);
        assert_eq!(rep.gei, 0.0);
        assert_eq!(rep.spatial_disparity, 0.0);
        assert!(rep.morans_i.is_none());
        assert!(rep.sdi.is_none());
        assert!(rep.demographic_disparity.is_none());
    }

    #[test]
    fn clustered_residuals_on_segregated_grid() {
        // 4x4 rook grid, bottom half high-minority, residual = minority share
        let side = 4;
        let n = side * side;
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            let (x, y) = (i % side, i / side);
            for j in 0..n {
                let (u, v) = (j % side, j / side);
                if x.abs_diff(u) + y.abs_diff(v) == 1 {
                    a[[i, j]] = 1.0;
                }
            }
        }
        let minor: Vec<f64> = (0..n).map(|i| if i / side >= 2 { 0.9 } else { 0.1 }).collect();
        let major: Vec<f64> = minor.iter().map(|m| 1.0 - m).collect();
        let d = demo(&minor, &major);
        let y_hat = Array3::zeros((1, n, 1));
        let y = Array3::from_shape_fn((1, n, 1), |(_, i, _)| minor[i]);
        let rep = evaluate_all(y_hat.view(), y.view(), &a, Some(&d)).unwrap();
        assert!(rep.sdi.unwrap() > 0.0);
        assert!(rep.morans_i.unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn spatial_disparity_permutation_invariant(
            r in prop::collection::vec(-5.0f64..5.0, 6),
            w in prop::collection::vec(0.0f64..1.0, 36),
            seed in 0usize..720,
        ) {
            let a = Array2::from_shape_vec((6, 6), w).unwrap();
            // decode a permutation of 6 from the seed (factorial number system)
            let mut pool: Vec<usize> = (0..6).collect();
            let mut perm = Vec::new();
            let mut s = seed;
            for k in (1..=6).rev() {
                perm.push(pool.remove(s % k));
                s /= k;
            }
            let rp: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
            let ap = Array2::from_shape_fn((6, 6), |(i, j)| a[[perm[i], perm[j]]]);
            let d0 = spatial_disparity(&rv(&r), &a).unwrap();
            let d1 = spatial_disparity(&rv(&rp), &ap).unwrap();
            prop_assert!((d0 - d1).abs() <= 1e-12 * (1.0 + d0.abs()));
        }

        #[test]
        fn gei_scale_free_for_nonnegative(
            r in prop::collection::vec(0.0f64..10.0, 2..16),
            c in 0.1f64..20.0,
        ) {
            let scaled: Vec<f64> = r.iter().map(|v| v * c).collect();
            let g0 = gei(&rv(&r), 2.0).unwrap();
            let g1 = gei(&rv(&scaled), 2.0).unwrap();
            // the 1e-9 shift offset breaks exact scale freedom slightly
            prop_assert!((g0 - g1).abs() <= 1e-6 * (1.0 + g0));
        }

        #[test]
        fn morans_i_affine_invariant(
            r in prop::collection::vec(-5.0f64..5.0, 5),
            w in prop::collection::vec(0.01f64..1.0, 25),
            c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
            b in -10.0f64..10.0,
        ) {
            let a = Array2::from_shape_vec((5, 5), w).unwrap();
            let rr = rv(&r);
            prop_assume!(rr.values().var(0.0) > 1e-6);
            let t: Vec<f64> = r.iter().map(|v| c * v + b).collect();
            let i0 = morans_i(&rr, &a).unwrap();
            let i1 = morans_i(&rv(&t), &a).unwrap();
            prop_assert!((i0 - i1).abs() < 1e-9);
        }

        #[test]
        fn correlation_metrics_invariant_to_positive_affine(
            r in prop::collection::vec(-5.0f64..5.0, 6),
            m in prop::collection::vec(0.0f64..1.0, 6),
            c in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let rr = rv(&r);
            prop_assume!(rr.values().var(0.0) > 1e-6);
            prop_assume!(Array1::from(m.clone()).var(0.0) > 1e-6);
            let maj: Vec<f64> = m.iter().map(|v| (1.0 - v) * 0.7).collect();
            let d = demo(&m, &maj);
            let t = rv(&r.iter().map(|v| c * v + b).collect::<Vec<_>>());
            prop_assert!((sdi(&rr, &d).unwrap() - sdi(&t, &d).unwrap()).abs() < 1e-9);
            prop_assert!((demographic_disparity(&rr, &d).unwrap()
                - demographic_disparity(&t, &d).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn mae_symmetric_and_nonnegative(
            p in prop::collection::vec(-5.0f64..5.0, 8),
            t in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let (p, t) = (Array1::from(p), Array1::from(t));
            let a = mae(p.view(), t.view()).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, mae(t.view(), p.view()).unwrap());
            prop_assert!(smape(p.view(), t.view(), 1e-8).unwrap() >= 0.0);
        }
    }
}
