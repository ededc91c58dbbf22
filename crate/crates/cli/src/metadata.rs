//! Run-metadata document written next to every command's tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mssfs::bench::BenchReport;
use mssfs::em::{FitResult, StopReason};
use mssfs::io::{Dataset, RunConfig};
use mssfs::{Error, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct DataInfo {
    pub source: Option<String>,
    pub format_version: u32,
    pub subjects: usize,
    pub covariates: Vec<String>,
}

impl DataInfo {
    pub fn of(d: &Dataset) -> Self {
        Self {
            source: d.provenance.source.clone(),
            format_version: d.provenance.format_version,
            subjects: d.len(),
            covariates: d.covariate_names.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub loglik_trace: Vec<f64>,
    pub d_em_trace: Vec<f64>,
    pub objective_evals: usize,
}

impl FitInfo {
    pub fn of(r: &FitResult) -> Self {
        Self {
            iterations: r.iterations,
            converged: r.converged,
            stop_reason: r.stop_reason,
            loglik_trace: r.loglik_trace.clone(),
            d_em_trace: r.d_em_trace.clone(),
            objective_evals: r.objective_evals,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BootstrapInfo {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub successful: usize,
    pub failures: Vec<(usize, String)>,
    pub jackknife_failures: Vec<(usize, String)>,
    /// Replicates resume from the base estimate and its feedback with half
    /// the iteration budget.
    pub warm_start: bool,
    pub replicate_n_max: usize,
}

#[derive(Debug, Serialize)]
pub struct Metadata {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataInfo>,
    /// How the reported states were obtained when no fit was run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchReport>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
}

impl Metadata {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            threads: config.threads,
            config: config.clone(),
            data: None,
            evaluation: None,
            fit: None,
            bootstrap: None,
            bench: None,
            timings: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn time(&mut self, stage: &str, since: Instant) {
        self.timings.insert(stage.to_string(), since.elapsed().as_secs_f64());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
