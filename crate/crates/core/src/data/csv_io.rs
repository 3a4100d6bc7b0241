use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;

use csv::{ReaderBuilder, StringRecord};
use ndarray::{Array1, Array2};

use crate::domain::{DemandTensor, DemographicTable, RegionGraph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const TRIPS_HEADER: [&str; 3] = ["region_id", "t_index", "count"];
const DEMO_FRAC_HEADER: [&str; 3] = ["region_id", "minority_frac", "majority_frac"];
const DEMO_COUNT_HEADER: [&str; 4] = ["region_id", "total", "minority", "majority"];
const EDGE_HEADER: [&str; 3] = ["src", "dst", "weight"];

struct Rows<R: Read> {
    reader: csv::Reader<R>,
    header: Vec<String>,
}

impl<R: Read> Rows<R> {
    fn open(input: R) -> Result<Self> {
        let mut reader = ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        Ok(Self { reader, header })
    }

    fn header_is(&self, expected: &[&str]) -> bool {
        self.header.len() == expected.len() && self.header.iter().zip(expected).all(|(a, b)| a == b)
    }

    /// Next data row with its 1-based line number.
    fn next_row(&mut self, width: usize) -> Option<Result<(u64, StringRecord)>> {
        let mut rec = StringRecord::new();
        match self.reader.read_record(&mut rec) {
            Ok(false) => None,
            Ok(true) => {
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                if rec.len() != width {
                    return Some(Err(parse_err(
                        line,
                        format!("expected {width} fields, found {}", rec.len()),
                    )));
                }
                Some(Ok((line, rec)))
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Some(Err(parse_err(line, e.to_string())))
            }
        }
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn header_mismatch(expected: &[&str], found: &[String]) -> Error {
    parse_err(
        1,
        format!(
            "expected header `{}`, found `{}`",
            expected.join(","),
            found.join(",")
        ),
    )
}

fn parse_field<V: std::str::FromStr>(line: u64, name: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| parse_err(line, format!("invalid {name} `{raw}`")))
}

/// Pivots `region_id,t_index,count` rows into a region × time matrix.
///
/// Duplicate `(region_id, t_index)` pairs are summed; absent cells are zero.
pub fn load_trips<T: Scalar, R: Read>(
    input: R,
    graph: &RegionGraph<T>,
    bin_minutes: u32,
) -> Result<DemandTensor<T>> {
    let mut rows = Rows::open(input)?;
    if !rows.header_is(&TRIPS_HEADER) {
        return Err(header_mismatch(&TRIPS_HEADER, &rows.header));
    }
    let index = graph.index();
    let mut cells: Vec<(usize, usize, u64)> = Vec::new();
    let mut max_t = None;
    while let Some(row) = rows.next_row(3) {
        let (line, rec) = row?;
        let region = index
            .get(&rec[0])
            .copied()
            .ok_or_else(|| Error::UnknownRegion(rec[0].to_string()))?;
        let t: usize = parse_field(line, "t_index", &rec[1])?;
        let count: i64 = parse_field(line, "count", &rec[2])?;
        if count < 0 {
            return Err(parse_err(line, format!("negative count {count}")));
        }
        max_t = Some(max_t.map_or(t, |m: usize| m.max(t)));
        cells.push((region, t, count as u64));
    }
    let n_steps = max_t.ok_or(Error::NoRows)? + 1;
    let mut values = Array2::<T>::zeros((graph.len(), n_steps));
    for (region, t, count) in cells {
        values[[region, t]] += T::from_u64(count).expect("count representable");
    }
    DemandTensor::new(values, bin_minutes)
}

/// Reads per-region population shares, aligned to the graph's region order.
///
/// Accepts either `region_id,minority_frac,majority_frac` or raw counts as
/// `region_id,total,minority,majority`.
pub fn load_demographics<T: Scalar, R: Read>(
    input: R,
    graph: &RegionGraph<T>,
) -> Result<DemographicTable<T>> {
    let mut rows = Rows::open(input)?;
    let from_counts = if rows.header_is(&DEMO_FRAC_HEADER) {
        false
    } else if rows.header_is(&DEMO_COUNT_HEADER) {
        true
    } else {
        return Err(header_mismatch(&DEMO_FRAC_HEADER, &rows.header));
    };
    let width = if from_counts { 4 } else { 3 };
    let index = graph.index();
    let mut found: HashMap<usize, (f64, f64)> = HashMap::new();
    while let Some(row) = rows.next_row(width) {
        let (line, rec) = row?;
        let region = index
            .get(&rec[0])
            .copied()
            .ok_or_else(|| Error::UnknownRegion(rec[0].to_string()))?;
        let (minor, major) = if from_counts {
            let total: f64 = parse_field(line, "total", &rec[1])?;
            let minor: f64 = parse_field(line, "minority", &rec[2])?;
            let major: f64 = parse_field(line, "majority", &rec[3])?;
            if !(total > 0.0) {
                return Err(parse_err(line, "total population must be positive"));
            }
            (minor / total, major / total)
        } else {
            (
                parse_field(line, "minority_frac", &rec[1])?,
                parse_field(line, "majority_frac", &rec[2])?,
            )
        };
        for v in [minor, major] {
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(
                    line,
                    format!("fraction {v} outside [0, 1] for region `{}`", &rec[0]),
                ));
            }
        }
        if found.insert(region, (minor, major)).is_some() {
            return Err(parse_err(line, format!("duplicate region `{}`", &rec[0])));
        }
    }
    if found.is_empty() {
        return Err(Error::NoRows);
    }
    let missing: Vec<String> = graph
        .region_ids()
        .iter()
        .enumerate()
        .filter(|(i, _)| !found.contains_key(i))
        .map(|(_, id)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRegions(missing));
    }
    let n = graph.len();
    let minor = Array1::from_shape_fn(n, |i| T::lit(found[&i].0));
    let major = Array1::from_shape_fn(n, |i| T::lit(found[&i].1));
    DemographicTable::new(graph.region_ids().to_vec(), minor, major)
}

/// Builds a graph from a `src,dst,weight` edge list over the given regions.
///
/// Edges are taken as directed; duplicate edges are summed.
pub fn load_edge_list<T: Scalar, R: Read>(input: R, region_ids: Vec<String>) -> Result<RegionGraph<T>> {
    let mut rows = Rows::open(input)?;
    if !rows.header_is(&EDGE_HEADER) {
        return Err(header_mismatch(&EDGE_HEADER, &rows.header));
    }
    let index: HashMap<String, usize> = region_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    let n = region_ids.len();
    let mut a = Array2::<T>::zeros((n, n));
    while let Some(row) = rows.next_row(3) {
        let (line, rec) = row?;
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownRegion(id.to_string()))
        };
        let (i, j) = (lookup(&rec[0])?, lookup(&rec[1])?);
        let w: f64 = parse_field(line, "weight", &rec[2])?;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(parse_err(line, format!("weight {w} must be finite and nonnegative")));
        }
        a[[i, j]] += T::lit(w);
    }
    RegionGraph::new(region_ids, a)
}

/// Every cell of the demand matrix as a trips row, zeros included, so the
/// time extent survives a round trip.
pub fn write_trips<T: Scalar>(demand: &DemandTensor<T>, graph: &RegionGraph<T>) -> Result<String> {
    if demand.n_regions() != graph.len() {
        return Err(Error::ShapeMismatch("demand rows vs regions".into()));
    }
    let mut out = String::from("region_id,t_index,count\n");
    for (i, id) in graph.region_ids().iter().enumerate() {
        for (t, &v) in demand.values().row(i).iter().enumerate() {
            let c = v.as_f64();
            if c < 0.0 || c.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "trip count {c} at ({id}, {t}) is not a nonnegative integer"
                )));
            }
            writeln!(out, "{id},{t},{}", c as u64).unwrap();
        }
    }
    Ok(out)
}

pub fn write_demographics<T: Scalar>(d: &DemographicTable<T>) -> String {
    let mut out = String::from("region_id,minority_frac,majority_frac\n");
    for (i, id) in d.region_ids().iter().enumerate() {
        writeln!(
            out,
            "{id},{},{}",
            d.minority_frac()[i].as_f64(),
            d.majority_frac()[i].as_f64()
        )
        .unwrap();
    }
    out
}

/// Nonzero adjacency entries as `src,dst,weight`, row-major.
pub fn write_edge_list<T: Scalar>(graph: &RegionGraph<T>) -> String {
    let mut out = String::from("src,dst,weight\n");
    let ids = graph.region_ids();
    for ((i, j), &w) in graph.adjacency().indexed_iter() {
        if w != T::zero() {
            writeln!(out, "{},{},{}", ids[i], ids[j], w.as_f64()).unwrap();
        }
    }
    out
}
