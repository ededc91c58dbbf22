//! Named parameter vectors and their constrained/unconstrained transforms.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logistic, logit};

/// Lower bound applied to log-transformed quantities on the constrained scale.
pub const LOG_FLOOR: f64 = -30.0;

pub const SIGMA2_V: &str = "sigma2_v";
pub const SIGMA2_0: &str = "sigma2_0";
pub const SIGMA2_1: &str = "sigma2_1";
pub const DELTA: &str = "delta";
pub const G0: &str = "g0";
pub const G1: &str = "g1";
pub const ALPHA0: &str = "alpha0";
pub const ALPHA1: &str = "alpha1";
pub const ZETA0: &str = "zeta0";
pub const ZETA1: &str = "zeta1";

pub fn beta0(j: usize) -> String {
    format!("beta0[{j}]")
}

pub fn beta1(j: usize) -> String {
    format!("beta1[{j}]")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// Positive quantity, optimized as `ln(value)`.
    Log,
    /// Quantity in (0, 1), optimized as `logit(value)`.
    Logit,
    Identity,
}

impl Transform {
    pub fn to_unconstrained(self, value: f64) -> Result<f64> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite value {value}")));
        }
        match self {
            Transform::Log => {
                if value <= 0.0 {
                    return Err(Error::Domain(format!(
                        "log-transformed value must be positive, got {value}"
                    )));
                }
                Ok(value.ln())
            }
            Transform::Logit => {
                if value <= 0.0 || value >= 1.0 {
                    return Err(Error::Domain(format!(
                        "logit-transformed value must lie in (0,1), got {value}"
                    )));
                }
                Ok(logit(value))
            }
            Transform::Identity => Ok(value),
        }
    }

    pub fn to_constrained(self, value: f64) -> Result<f64> {
        if value.is_nan() {
            return Err(Error::Domain("NaN unconstrained value".into()));
        }
        Ok(match self {
            Transform::Log => value.max(LOG_FLOOR).exp(),
            Transform::Logit => logistic(value),
            Transform::Identity => value,
        })
    }

    /// Default optimizer box on the unconstrained scale.
    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            Transform::Log => (LOG_FLOOR, 20.0),
            Transform::Logit => (-25.0, 25.0),
            Transform::Identity => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Constrained,
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToUnconstrained,
    ToConstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: f64,
    pub transform: Transform,
}

/// Ordered collection of named scalar parameters. Vector-valued parameters
/// are stored element-wise (`beta0[0]`, `beta0[1]`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    scale: Scale,
}

impl ParameterSet {
    pub fn new(scale: Scale) -> Self {
        Self {
            entries: Vec::new(),
            scale,
        }
    }

    pub fn constrained() -> Self {
        Self::new(Scale::Constrained)
    }

    /// Appends or overwrites an entry.
    pub fn with(mut self, name: impl Into<String>, value: f64, transform: Transform) -> Self {
        self.set_entry(name.into(), value, transform);
        self
    }

    pub fn set_entry(&mut self, name: String, value: f64, transform: Transform) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                e.value = value;
                e.transform = transform;
            }
            None => self.entries.push(ParamEntry {
                name,
                value,
                transform,
            }),
        }
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn require(&self, name: &str) -> Result<f64> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        e.value = value;
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = *v;
        }
    }

    /// Values of the `beta0[j]`/`beta1[j]` family for `prefix`, in index order.
    pub fn indexed(&self, prefix: &str) -> Vec<f64> {
        let mut found: Vec<(usize, f64)> = self
            .entries
            .iter()
            .filter_map(|e| {
                let rest = e.name.strip_prefix(prefix)?.strip_prefix('[')?;
                let idx = rest.strip_suffix(']')?.parse().ok()?;
                Some((idx, e.value))
            })
            .collect();
        found.sort_by_key(|(i, _)| *i);
        found.into_iter().map(|(_, v)| v).collect()
    }

    pub fn ensure_scale(&self, scale: Scale) -> Result<()> {
        if self.scale != scale {
            return Err(Error::Domain(format!(
                "parameter set is on the {:?} scale, expected {:?}",
                self.scale, scale
            )));
        }
        Ok(())
    }
}

/// Maps every entry through its transform. Fails if the set is not on the
/// source scale of `direction` or a constrained value violates its constraint.
pub fn apply_transform(params: &ParameterSet, direction: Direction) -> Result<ParameterSet> {
    let (from, to) = match direction {
        Direction::ToUnconstrained => (Scale::Constrained, Scale::Unconstrained),
        Direction::ToConstrained => (Scale::Unconstrained, Scale::Constrained),
    };
    params.ensure_scale(from)?;
    let entries = params
        .entries
        .iter()
        .map(|e| {
            let value = match direction {
                Direction::ToUnconstrained => e.transform.to_unconstrained(e.value),
                Direction::ToConstrained => e.transform.to_constrained(e.value),
            }
            .map_err(|err| Error::Domain(format!("parameter `{}`: {err}", e.name)))?;
            Ok(ParamEntry {
                name: e.name.clone(),
                value,
                transform: e.transform,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParameterSet { entries, scale: to })
}

impl fmt::Display for ParameterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}={}", e.name, e.value)?;
        }
        Ok(())
    }
}
