//! Monte Carlo replication harness: simulate, fit, and summarize the
//! estimation error per parameter.

use serde::{Deserialize, Serialize};

use crate::em::{fit, EmConfig, StopReason};
use crate::error::{Error, Result};
use crate::model::{ModelTemplate, PresetValues};
use crate::simulate::{simulate_study, StudyDesign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Unit variances and zero switching coefficients.
    ColdStart,
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: StudyDesign,
    pub replications: usize,
    pub em: EmConfig,
    pub start: StartRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub mse: f64,
    pub bias2: f64,
    pub variance: f64,
    /// Monte Carlo standard error of `mse`.
    pub mse_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub summaries: Vec<ParameterSummary>,
    /// Constrained-scale estimates, one row per replicate that produced a fit.
    pub estimates: Vec<Vec<f64>>,
    pub stop_reasons: Vec<StopReason>,
    /// `(replicate, reason)` for replicates whose fit errored.
    pub failures: Vec<(usize, String)>,
}

impl StudyReport {
    pub fn summary(&self, name: &str) -> Option<&ParameterSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }
}

/// Seed of replicate `r`.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

/// Error summaries of estimates against the truth; `variance` uses the
/// `1/R` convention so that `mse = bias2 + variance`.
pub fn summarize(names: &[String], truth: &[f64], estimates: &[Vec<f64>]) -> Result<Vec<ParameterSummary>> {
    if estimates.is_empty() {
        return Err(Error::Validation("no estimates to summarize".into()));
    }
    let r = estimates.len() as f64;
    Ok(names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let xs: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let mean = xs.iter().sum::<f64>() / r;
            let sq: Vec<f64> = xs.iter().map(|x| (x - truth[j]).powi(2)).collect();
            let mse = sq.iter().sum::<f64>() / r;
            let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r;
            let spread = if xs.len() > 1 {
                sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            ParameterSummary {
                name: name.clone(),
                truth: truth[j],
                mean,
                mse,
                bias2: (mean - truth[j]).powi(2),
                variance,
                mse_se: (spread / r).sqrt(),
            }
        })
        .collect())
}

/// Runs `replications` simulate-and-fit rounds. Fits that stop without
/// converging still count; fits that error are recorded as failures.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.design.validate()?;
    if config.replications == 0 {
        return Err(Error::Config("a study needs at least one replication".into()));
    }
    let template = config.design.template();
    let truth = config.design.true_values().to_parameter_set();
    template.build(&truth)?;
    let start = match config.start {
        StartRule::Truth => truth.clone(),
        StartRule::ColdStart => PresetValues::cold_start(template.n_covariates).to_parameter_set(),
    };
    let mut estimates = Vec::new();
    let mut stop_reasons = Vec::new();
    let mut failures = Vec::new();
    for r in 0..config.replications {
        let design = StudyDesign { seed: replicate_seed(config.design.seed, r), ..config.design.clone() };
        let data: Vec<_> = simulate_study(&design)?.into_iter().map(|s| s.series).collect();
        match fit(&data, &template, &config.em, &start) {
            Ok(f) => {
                estimates.push(f.params.values());
                stop_reasons.push(f.stop_reason);
            }
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    let names: Vec<String> = truth.names().map(str::to_string).collect();
    let summaries = summarize(&names, &truth.values(), &estimates)?;
    Ok(StudyReport { summaries, estimates, stop_reasons, failures })
}
