//! Dataset files, run configuration and result tables.

pub mod config;
pub mod dataset;
pub mod table;

pub use config::RunConfig;
pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset, Dataset};
pub use table::Table;
