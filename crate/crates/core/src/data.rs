//! Per-subject observation series.

use crate::error::{Error, Result};

/// One subject's series. Observations are stored time-major as an `n × p`
/// block; `NaN` marks a missing element.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub id: String,
    /// Resampling unit; several series (e.g. study arms) may share a group.
    pub group: String,
    /// Time label of the first step.
    pub start_time: i64,
    p: usize,
    y: Vec<f64>,
    pub covariates: Vec<f64>,
}

impl SubjectSeries {
    /// Builds a series from per-time observation rows (`None` = missing).
    pub fn new(
        id: impl Into<String>,
        rows: &[Vec<Option<f64>>],
        covariates: Vec<f64>,
    ) -> Result<Self> {
        let p = rows.first().map_or(1, Vec::len);
        let mut y = Vec::with_capacity(rows.len() * p);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Validation(format!(
                    "observation at t={} has {} elements, expected {p}",
                    t + 1,
                    row.len()
                )));
            }
            for v in row {
                match v {
                    Some(x) if !x.is_finite() => {
                        return Err(Error::Validation(format!(
                            "non-finite observation at t={}",
                            t + 1
                        )))
                    }
                    Some(x) => y.push(*x),
                    None => y.push(f64::NAN),
                }
            }
        }
        Self::from_raw(id, p, y, covariates)
    }

    /// Scalar series convenience constructor.
    pub fn scalar(id: impl Into<String>, y: &[Option<f64>], covariates: Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<Option<f64>>> = y.iter().map(|v| vec![*v]).collect();
        let mut s = Self::new(id, &rows, covariates)?;
        s.p = 1;
        Ok(s)
    }

    /// Builds from a flat `n × p` block with `NaN` for missing entries.
    pub fn from_raw(id: impl Into<String>, p: usize, y: Vec<f64>, covariates: Vec<f64>) -> Result<Self> {
        if p == 0 {
            return Err(Error::Validation("observation dimension must be positive".into()));
        }
        if y.len() % p != 0 {
            return Err(Error::Validation("observation block is not a multiple of p".into()));
        }
        if y.iter().any(|v| v.is_infinite()) {
            return Err(Error::Validation("infinite observation".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("covariates must be finite".into()));
        }
        let id = id.into();
        Ok(Self {
            group: id.clone(),
            id,
            start_time: 1,
            p,
            y,
            covariates,
        })
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = group.into();
        self
    }

    pub fn with_start_time(mut self, start: i64) -> Self {
        self.start_time = start;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.p
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.p
    }

    /// Observation at time `t` (1-based), `NaN` marking missing entries.
    #[inline]
    pub fn observation(&self, t: usize) -> &[f64] {
        &self.y[(t - 1) * self.p..t * self.p]
    }

    pub fn raw(&self) -> &[f64] {
        &self.y
    }

    pub fn observed_count(&self) -> usize {
        self.y.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn set_missing(&mut self, t: usize) {
        let p = self.p;
        self.y[(t - 1) * p..t * p].fill(f64::NAN);
    }

    pub fn time_label(&self, t: usize) -> i64 {
        self.start_time + t as i64 - 1
    }
}
