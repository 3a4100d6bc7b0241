use std::ops::Range;

use ndarray::{s, Array2};

use crate::domain::{DemandTensor, ForecastWindow};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

/// One supervised sample: `lookback` steps in, `horizon` steps out.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedWindow<T> {
    pub start: usize,
    pub input: Array2<T>,
    pub target: Array2<T>,
}

/// Stride-1 sliding windows in chronological order.
pub fn make_windows<T: Scalar>(
    x: &DemandTensor<T>,
    w: ForecastWindow,
) -> Result<Vec<SupervisedWindow<T>>> {
    let t = x.n_steps();
    let span = w.lookback + w.horizon;
    if t < span {
        return Err(Error::InvalidArgument(format!(
            "{t} time steps cannot hold a window of {} + {}",
            w.lookback, w.horizon
        )));
    }
    let v = x.values();
    Ok((0..=t - span)
        .map(|start| SupervisedWindow {
            start,
            input: v.slice(s![.., start..start + w.lookback]).to_owned(),
            target: v.slice(s![.., start + w.lookback..start + span]).to_owned(),
        })
        .collect())
}

/// Chronological train/validation/test ranges over window indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn chronological_split(n_windows: usize) -> Result<DataSplit> {
    let n_train = (n_windows as f64 * TRAIN_FRACTION).floor() as usize;
    let n_val = (n_windows as f64 * VAL_FRACTION).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n_windows {
        return Err(Error::InvalidArgument(format!(
            "{n_windows} windows are too few for a train/validation/test split"
        )));
    }
    Ok(DataSplit {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..n_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tensor(t: usize) -> DemandTensor<f64> {
        DemandTensor::new(Array2::from_shape_fn((2, t), |(i, j)| (i * 100 + j) as f64), 15).unwrap()
    }

    #[test]
    fn window_count() {
        let w = make_windows(&tensor(5), ForecastWindow::new(3, 1).unwrap()).unwrap();
        assert_eq!(w.len(), 2);
        assert!(make_windows(&tensor(4), ForecastWindow::new(3, 2).unwrap()).is_err());
    }

    #[test]
    fn window_contents() {
        let x = DemandTensor::new(array![[1.0, 2.0, 3.0, 4.0]], 15).unwrap();
        let w = make_windows(&x, ForecastWindow::new(2, 1).unwrap()).unwrap();
        assert_eq!(w[0].input, array![[1.0, 2.0]]);
        assert_eq!(w[0].target, array![[3.0]]);
        assert_eq!(w[1].input, array![[2.0, 3.0]]);
        assert_eq!(w[1].target, array![[4.0]]);
    }

    #[test]
    fn split_fractions() {
        let s = chronological_split(100).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.val, 70..80);
        assert_eq!(s.test, 80..100);
        assert!(chronological_split(5).is_err());
    }

    proptest! {
        #[test]
        fn inputs_precede_targets(t in 4usize..40, lb in 1usize..6, hz in 1usize..4) {
            prop_assume!(t >= lb + hz);
            let ws = make_windows(&tensor(t), ForecastWindow::new(lb, hz).unwrap()).unwrap();
            prop_assert_eq!(ws.len(), t - lb - hz + 1);
            for (k, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.start, k);
                // values encode their time index in row 0
                let max_in = w.input.row(0).iter().cloned().fold(f64::MIN, f64::max);
                let min_out = w.target.row(0).iter().cloned().fold(f64::MAX, f64::min);
                prop_assert!(max_in < min_out);
            }
        }
    }
}
