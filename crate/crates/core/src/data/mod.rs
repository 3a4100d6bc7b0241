//! Dataset ingestion, synthetic city generation and supervised windowing.

mod csv_io;
mod synthetic;
mod window;

pub use csv_io::{
    load_demographics, load_edge_list, load_trips, write_demographics, write_edge_list,
    write_trips,
};
pub use synthetic::{generate_synthetic_city, SyntheticCity, SyntheticCityConfig};
pub use window::{chronological_split, make_windows, DataSplit, SupervisedWindow};
