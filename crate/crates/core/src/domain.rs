//! Value types shared across the pipeline: the region graph, demand matrix,
//! forecast window, residuals and demographic table.

use std::collections::{HashMap, HashSet};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Regions plus a dense nonnegative affinity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGraph<T> {
    region_ids: Vec<String>,
    adjacency: Array2<T>,
    coordinates: Option<Vec<(T, T)>>,
}

impl<T: Scalar> RegionGraph<T> {
    pub fn new(region_ids: Vec<String>, adjacency: Array2<T>) -> Result<Self> {
        let n = region_ids.len();
        if adjacency.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "adjacency is {:?} but there are {n} regions",
                adjacency.dim()
            )));
        }
        if adjacency.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adjacency".into()));
        }
        if adjacency.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument(
                "adjacency entries must be nonnegative".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &region_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate region id `{id}`")));
            }
        }
        Ok(Self {
            region_ids,
            adjacency,
            coordinates: None,
        })
    }

    /// Builds the graph from planar centroids with a thresholded Gaussian kernel.
    pub fn from_coordinates(
        region_ids: Vec<String>,
        coordinates: Vec<(T, T)>,
        sigma: T,
        threshold: T,
    ) -> Result<Self> {
        if coordinates.len() != region_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates for {} regions",
                coordinates.len(),
                region_ids.len()
            )));
        }
        let adjacency = build_distance_adjacency(&coordinates, sigma, threshold)?;
        let mut graph = Self::new(region_ids, adjacency)?;
        graph.coordinates = Some(coordinates);
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.region_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_ids.is_empty()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn adjacency(&self) -> &Array2<T> {
        &self.adjacency
    }

    pub fn coordinates(&self) -> Option<&[(T, T)]> {
        self.coordinates.as_deref()
    }

    /// Region id to row index.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.region_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

/// Per-region, per-time-bin observations; rows follow the graph's region order.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTensor<T> {
    values: Array2<T>,
    bin_minutes: u32,
}

impl<T: Scalar> DemandTensor<T> {
    pub fn new(values: Array2<T>, bin_minutes: u32) -> Result<Self> {
        if bin_minutes == 0 {
            return Err(Error::InvalidArgument("bin_minutes must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("demand tensor".into()));
        }
        Ok(Self {
            values,
            bin_minutes,
        })
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn bin_minutes(&self) -> u32 {
        self.bin_minutes
    }

    pub fn n_regions(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }
}

/// Lookback and horizon lengths of a supervised sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecastWindow {
    pub lookback: usize,
    pub horizon: usize,
}

impl ForecastWindow {
    pub fn new(lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::InvalidArgument(
                "lookback and horizon must both be at least 1".into(),
            ));
        }
        Ok(Self { lookback, horizon })
    }
}

/// Per-region residual, observed minus predicted (positive = under-prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector<T>(Array1<T>);

impl<T: Scalar> ResidualVector<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual vector".into()));
        }
        Ok(Self(values))
    }

    pub fn from_vec(values: Vec<T>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn values(&self) -> &Array1<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Array1<T> {
        self.0
    }
}

/// Minority and majority population shares per region.
#[derive(Debug, Clone, PartialEq)]
pub struct DemographicTable<T> {
    region_ids: Vec<String>,
    minority_frac: Array1<T>,
    majority_frac: Array1<T>,
}

impl<T: Scalar> DemographicTable<T> {
    pub fn new(
        region_ids: Vec<String>,
        minority_frac: Array1<T>,
        majority_frac: Array1<T>,
    ) -> Result<Self> {
        let n = region_ids.len();
        if minority_frac.len() != n || majority_frac.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "demographic vectors must have {n} entries"
            )));
        }
        let in_unit = |v: &T| *v >= T::zero() && *v <= T::one();
        for (i, id) in region_ids.iter().enumerate() {
            if !in_unit(&minority_frac[i]) || !in_unit(&majority_frac[i]) {
                return Err(Error::InvalidArgument(format!(
                    "population fraction outside [0, 1] for region `{id}`"
                )));
            }
        }
        Ok(Self {
            region_ids,
            minority_frac,
            majority_frac,
        })
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn minority_frac(&self) -> &Array1<T> {
        &self.minority_frac
    }

    pub fn majority_frac(&self) -> &Array1<T> {
        &self.majority_frac
    }

    pub fn len(&self) -> usize {
        self.region_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_ids.is_empty()
    }

    pub fn is_aligned_with(&self, graph: &RegionGraph<T>) -> bool {
        self.region_ids == graph.region_ids()
    }
}

/// `A_ij = exp(-d_ij² / sigma²)` when it exceeds `threshold` and `i != j`, else 0.
pub fn build_distance_adjacency<T: Scalar>(
    coords: &[(T, T)],
    sigma: T,
    threshold: T,
) -> Result<Array2<T>> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 regions".into()));
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    if !(threshold >= T::zero() && threshold < T::one()) {
        return Err(Error::InvalidArgument("threshold must lie in [0, 1)".into()));
    }
    if coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("coordinates".into()));
    }
    let s2 = sigma * sigma;
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            let w = (-(dx * dx + dy * dy) / s2).exp();
            if w > threshold {
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
    }
    Ok(a)
}

/// Divides each row with positive sum by that sum; zero rows stay zero.
pub fn row_normalize<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let s: T = row.iter().copied().sum();
        if s > T::zero() {
            row.mapv_inplace(|v| v / s);
        }
    }
    out
}
