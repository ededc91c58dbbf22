//! TOML run configuration. Every section is optional; defaults are the
//! settings used for the fever application (30 EM iterations, `D_EM = 0.001`,
//! `kappa = 1e-6`, ridge 0.01, `L = 3`, `rho = 0.5`, 300 bootstrap replicates).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapConfig;
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::model::{FeedbackSpec, ModelTemplate, PresetValues, TemperaturePreset};
use crate::params::ParameterSet;
use crate::simulate::{Setting, StudyDesign};
use crate::template::{GeneralModel, GeneralTemplate};

pub const TEMPERATURE: &str = "temperature";
pub const GENERAL: &str = "general";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `temperature` or `general`.
    pub preset: String,
    pub feedback: FeedbackSpec,
    pub general: Option<GeneralModel>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: TEMPERATURE.into(),
            feedback: FeedbackSpec::default(),
            general: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub level: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let d = BootstrapConfig::default();
        Self {
            replicates: d.replicates,
            level: d.level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub m: usize,
    pub n: usize,
    pub setting: Setting,
    pub delta: f64,
    pub missing_rate: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = StudyDesign::default();
        Self {
            m: d.m,
            n: d.n,
            setting: d.setting,
            delta: d.delta,
            missing_rate: d.missing_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub m_grid: Vec<usize>,
    pub n: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            m_grid: vec![100, 200, 400],
            n: 101,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub output: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: ModelSection,
    /// Starting values (constrained scale) overriding the model defaults.
    pub initial: BTreeMap<String, f64>,
    pub em: EmConfig,
    pub bootstrap: BootstrapSection,
    pub simulate: SimulateSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            output: None,
            data: None,
            model: ModelSection::default(),
            initial: BTreeMap::new(),
            em: EmConfig::default(),
            bootstrap: BootstrapSection::default(),
            simulate: SimulateSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Offset separating the bootstrap streams from the simulation streams
/// drawn from the same seed.
const BOOTSTRAP_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        match self.model.preset.as_str() {
            TEMPERATURE => {
                if self.model.general.is_some() {
                    return Err(Error::Config("[model.general] requires preset = \"general\"".into()));
                }
            }
            GENERAL => {
                if self.model.general.is_none() {
                    return Err(Error::Config("preset = \"general\" requires a [model.general] section".into()));
                }
            }
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
        if self.model.feedback.lag == 0 {
            return Err(Error::Config("feedback lag must be at least 1".into()));
        }
        if !self.model.feedback.rho.is_finite() {
            return Err(Error::Config("feedback rho must be finite".into()));
        }
        if self.initial.values().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial values must be finite".into()));
        }
        self.em.validate()?;
        self.bootstrap_config().validate()?;
        self.study_design().validate()?;
        if self.bench.m_grid.is_empty() || self.bench.m_grid.contains(&0) || self.bench.n == 0 || self.bench.repeats == 0 {
            return Err(Error::Config("bench needs a non-empty grid of positive sizes".into()));
        }
        Ok(())
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.bootstrap.replicates,
            level: self.bootstrap.level,
            seed: self.seed.wrapping_add(BOOTSTRAP_SEED_OFFSET),
        }
    }

    pub fn study_design(&self) -> StudyDesign {
        StudyDesign {
            m: self.simulate.m,
            n: self.simulate.n,
            setting: self.simulate.setting,
            delta: self.simulate.delta,
            missing_rate: self.simulate.missing_rate,
            seed: self.seed,
            feedback: self.model.feedback,
        }
    }

    /// Model template and starting parameters for data with
    /// `n_covariates` covariates.
    pub fn model(&self, n_covariates: usize) -> Result<(Box<dyn ModelTemplate>, ParameterSet)> {
        match self.model.preset.as_str() {
            TEMPERATURE => {
                let mut start = PresetValues::cold_start(n_covariates).to_parameter_set();
                for (name, v) in &self.initial {
                    start
                        .set(name, *v)
                        .map_err(|_| Error::Config(format!("unknown parameter `{name}` in [initial]")))?;
                }
                Ok((Box::new(TemperaturePreset::new(self.model.feedback, n_covariates)), start))
            }
            _ => {
                let general = self.model.general.as_ref().expect("validated");
                if general.n_covariates != n_covariates {
                    return Err(Error::Config(format!(
                        "model declares {} covariates, data has {n_covariates}",
                        general.n_covariates
                    )));
                }
                let t = GeneralTemplate::new(general, self.model.feedback)?;
                let start = t.parameter_set(&self.initial)?;
                Ok((Box::new(t), start))
            }
        }
    }
}
