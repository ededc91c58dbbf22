//! Two-regime switching state space models with feedback.

pub mod bench;
pub mod bootstrap;
pub mod data;
pub mod em;
pub mod error;
pub mod filter;
pub mod io;
pub mod linalg;
pub mod model;
pub mod params;
pub mod optim;
pub mod oracle;
pub mod plugin;
pub mod simulate;
pub mod smoother;
pub mod study;
pub mod template;

pub use data::SubjectSeries;
pub use error::{Error, Result};
pub use model::{ModelSpec, ModelTemplate, TemperaturePreset};
pub use params::{ParameterSet, Transform};
pub use plugin::PluginFeedback;
