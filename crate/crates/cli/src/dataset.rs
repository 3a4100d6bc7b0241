//! Dataset directory layout:
//!
//! - `trips.csv`: `region_id,t_index,count`
//! - `demographics.csv`: `region_id,minority_frac,majority_frac` (or counts)
//! - `adjacency.csv`: `src,dst,weight` edge list
//! - `manifest.json`: region order, bin width and the generator config when synthetic
//!
//! Without a manifest, region order is taken from `demographics.csv`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use equigrid::data::{
    load_demographics, load_edge_list, load_trips, write_demographics, write_edge_list, write_trips,
    SyntheticCity, SyntheticCityConfig,
};
use equigrid::{DemandTensor64, DemographicTable64, RegionGraph64};
use serde::{Deserialize, Serialize};

pub const TRIPS: &str = "trips.csv";
pub const DEMOGRAPHICS: &str = "demographics.csv";
pub const ADJACENCY: &str = "adjacency.csv";
pub const MANIFEST: &str = "manifest.json";
const DEFAULT_BIN_MINUTES: u32 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub region_ids: Vec<String>,
    pub bin_minutes: u32,
    pub generator: Option<SyntheticCityConfig>,
}

pub struct Dataset {
    pub graph: RegionGraph64,
    pub demand: DemandTensor64,
    pub demographics: Option<DemographicTable64>,
}

pub fn write_dataset(city: &SyntheticCity<f64>, config: &SyntheticCityConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join(TRIPS), write_trips(&city.demand, &city.graph)?)?;
    fs::write(dir.join(DEMOGRAPHICS), write_demographics(&city.demographics))?;
    fs::write(dir.join(ADJACENCY), write_edge_list(&city.graph))?;
    let manifest = Manifest {
        region_ids: city.graph.region_ids().to_vec(),
        bin_minutes: config.bin_minutes,
        generator: Some(*config),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn open(dir: &Path, name: &str) -> Result<fs::File> {
    let path = dir.join(name);
    fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))
}

fn region_order_from_demographics(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(DEMOGRAPHICS);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("no {MANIFEST} and cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').next().unwrap_or("").trim().to_string())
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let manifest_path = dir.join(MANIFEST);
    let (ids, bin_minutes) = if manifest_path.exists() {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .with_context(|| format!("invalid {}", manifest_path.display()))?;
        (m.region_ids, m.bin_minutes)
    } else {
        (region_order_from_demographics(dir)?, DEFAULT_BIN_MINUTES)
    };
    let graph: RegionGraph64 =
        load_edge_list(open(dir, ADJACENCY)?, ids).with_context(|| format!("in {}", dir.join(ADJACENCY).display()))?;
    let demand = load_trips(open(dir, TRIPS)?, &graph, bin_minutes)
        .with_context(|| format!("in {}", dir.join(TRIPS).display()))?;
    let demographics = if dir.join(DEMOGRAPHICS).exists() {
        Some(
            load_demographics(open(dir, DEMOGRAPHICS)?, &graph)
                .with_context(|| format!("in {}", dir.join(DEMOGRAPHICS).display()))?,
        )
    } else {
        None
    };
    Ok(Dataset {
        graph,
        demand,
        demographics,
    })
}
