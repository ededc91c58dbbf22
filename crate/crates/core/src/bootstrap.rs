//! Nonparametric bootstrap over resampling groups with BCa intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::SubjectSeries;
use crate::em::{fit_from, EmConfig, FitResult, StopReason};
use crate::error::{Error, Result};
use crate::model::ModelTemplate;
use crate::params::ParameterSet;
use crate::plugin::PluginFeedback;
use crate::simulate::subject_rng;

/// Largest tolerated share of failed replicate fits.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcaInterval {
    pub lower: f64,
    pub upper: f64,
    pub z0: f64,
    pub acceleration: f64,
    /// The jackknife had zero spread and the plain percentile interval was used.
    pub percentile_fallback: bool,
    /// Every replicate fell on one side of the point estimate.
    pub z0_clamped: bool,
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Splits the dataset into resampling groups, in order of first appearance.
pub fn groups(dataset: &[SubjectSeries]) -> Vec<Vec<usize>> {
    let mut keys: Vec<&str> = Vec::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        match keys.iter().position(|k| *k == s.group) {
            Some(g) => out[g].push(i),
            None => {
                keys.push(&s.group);
                out.push(vec![i]);
            }
        }
    }
    out
}

/// Draws as many groups as the dataset has, with replacement. Copies are
/// relabeled `r<k>:<id>` so ids stay unique.
pub fn resample_dataset<R: Rng>(dataset: &[SubjectSeries], rng: &mut R) -> Result<Vec<SubjectSeries>> {
    Ok(resample_indices(&groups(dataset), rng)?
        .into_iter()
        .map(|(k, i)| relabel(&dataset[i], k))
        .collect())
}

/// `(draw, subject index)` pairs of one resample.
fn resample_indices<R: Rng>(gs: &[Vec<usize>], rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if gs.len() < 2 {
        return Err(Error::Bootstrap("resampling needs at least two groups".into()));
    }
    let mut out = Vec::new();
    for k in 0..gs.len() {
        let g = &gs[rng.random_range(0..gs.len())];
        out.extend(g.iter().map(|&i| (k, i)));
    }
    Ok(out)
}

fn relabel(s: &SubjectSeries, k: usize) -> SubjectSeries {
    let mut copy = s.clone();
    copy.id = format!("r{k}:{}", s.id);
    copy.group = format!("r{k}");
    copy
}

/// The dataset without group `drop`.
pub fn leave_one_out(dataset: &[SubjectSeries], groups: &[Vec<usize>], drop: usize) -> Vec<SubjectSeries> {
    leave_one_out_indices(groups, drop).map(|i| dataset[i].clone()).collect()
}

fn leave_one_out_indices(groups: &[Vec<usize>], drop: usize) -> impl Iterator<Item = usize> + '_ {
    groups
        .iter()
        .enumerate()
        .filter(move |(g, _)| *g != drop)
        .flat_map(|(_, members)| members.iter().copied())
}

fn percentile(sorted: &[f64], alpha: f64) -> f64 {
    let b = sorted.len();
    // the small slack keeps rounding noise in alpha from skipping an order statistic
    let k = ((alpha * b as f64 - 1e-9).ceil().max(1.0) as usize).min(b);
    sorted[k - 1]
}

/// BCa interval at confidence `level` from bootstrap replicates and
/// jackknife (leave-one-out) estimates.
pub fn bca_interval(replicates: &[f64], jackknife: &[f64], point: f64, level: f64) -> Result<BcaInterval> {
    if replicates.len() < 10 {
        return Err(Error::Bootstrap(format!(
            "BCa needs at least 10 replicates, got {}",
            replicates.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if replicates.iter().chain(jackknife).any(|v| !v.is_finite()) || !point.is_finite() {
        return Err(Error::Bootstrap("non-finite replicate or point estimate".into()));
    }
    let b = replicates.len() as f64;
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let normal = std_normal();

    let jn = jackknife.len() as f64;
    let mean = jackknife.iter().sum::<f64>() / jn.max(1.0);
    let d: Vec<f64> = jackknife.iter().map(|v| mean - v).collect();
    let s2: f64 = d.iter().map(|x| x * x).sum();
    if jackknife.len() < 2 || s2 == 0.0 {
        return Ok(BcaInterval {
            lower: percentile(&sorted, tail),
            upper: percentile(&sorted, 1.0 - tail),
            z0: 0.0,
            acceleration: 0.0,
            percentile_fallback: true,
            z0_clamped: false,
        });
    }
    let acceleration = d.iter().map(|x| x.powi(3)).sum::<f64>() / (6.0 * s2.powf(1.5));

    let below = replicates.iter().filter(|&&r| r < point).count() as f64;
    let lo_clamp = 0.5 / b;
    let frac = (below / b).clamp(lo_clamp, 1.0 - lo_clamp);
    let z0_clamped = below == 0.0 || below == b;
    let z0 = normal.inverse_cdf(frac);

    let adjust = |alpha: f64| {
        let z = normal.inverse_cdf(alpha);
        let num = z0 + z;
        normal.cdf(z0 + num / (1.0 - acceleration * num))
    };
    let (a1, a2) = (adjust(tail), adjust(1.0 - tail));
    Ok(BcaInterval {
        lower: percentile(&sorted, a1),
        upper: percentile(&sorted, a2),
        z0,
        acceleration,
        percentile_fallback: false,
        z0_clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 300,
            level: 0.95,
            seed: 1,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("bootstrap level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    pub point: Vec<f64>,
    pub replicates: usize,
    pub level: f64,
    /// Constrained-scale estimates of the successful replicates.
    pub estimates: Vec<Vec<f64>>,
    /// Leave-one-group-out estimates.
    pub jackknife: Vec<Vec<f64>>,
    pub intervals: Vec<BcaInterval>,
    /// `(replicate, reason)` for failed bootstrap fits.
    pub failures: Vec<(usize, String)>,
    pub jackknife_failures: Vec<(usize, String)>,
}

fn refit(
    data: &[SubjectSeries],
    feedback: &[PluginFeedback],
    template: &dyn ModelTemplate,
    config: &EmConfig,
    start: &ParameterSet,
) -> std::result::Result<Vec<f64>, String> {
    match fit_from(data, template, config, start, Some(feedback)) {
        Ok(FitResult {
            stop_reason: StopReason::Converged,
            params,
            ..
        }) => Ok(params.values()),
        Ok(r) => Err(format!("not converged ({:?}) after {} iterations", r.stop_reason, r.iterations)),
        Err(e) => Err(e.to_string()),
    }
}

/// Replicate fit settings: warm start at the base estimate, half the
/// iteration budget. Each subject's feedback starts from its value in the
/// base fit.
pub fn replicate_config(config: &EmConfig) -> EmConfig {
    EmConfig {
        skip_init: true,
        n_max: (config.n_max / 2).max(1),
        ..config.clone()
    }
}

/// Runs `config.replicates` resample-and-refit replicates plus the
/// leave-one-group-out jackknife around `base`, and forms BCa intervals.
pub fn run_bootstrap(
    dataset: &[SubjectSeries],
    template: &dyn ModelTemplate,
    em: &EmConfig,
    base: &FitResult,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.replicates == 0 {
        return Err(Error::Bootstrap("at least one replicate is required".into()));
    }
    let gs = groups(dataset);
    if gs.len() < 2 {
        return Err(Error::Bootstrap("bootstrap needs at least two groups".into()));
    }
    if base.z_hat.len() != dataset.len() {
        return Err(Error::Bootstrap("base fit does not match the dataset".into()));
    }
    let rep_config = replicate_config(em);
    let start = &base.params;

    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = subject_rng(config.seed, r as u64);
            let draw = resample_indices(&gs, &mut rng).map_err(|e| e.to_string())?;
            let data: Vec<_> = draw.iter().map(|&(k, i)| relabel(&dataset[i], k)).collect();
            let fb: Vec<_> = draw.iter().map(|&(_, i)| base.z_hat[i].clone()).collect();
            refit(&data, &fb, template, &rep_config, start)
        })
        .collect();
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => estimates.push(v),
            Err(e) => failures.push((r, e)),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * config.replicates as f64 {
        let log: Vec<String> = failures.iter().map(|(r, e)| format!("replicate {r}: {e}")).collect();
        return Err(Error::Bootstrap(format!(
            "{} of {} replicate fits failed: {}",
            failures.len(),
            config.replicates,
            log.join("; ")
        )));
    }

    let jack_outcomes: Vec<std::result::Result<Vec<f64>, String>> = (0..gs.len())
        .into_par_iter()
        .map(|g| {
            let keep: Vec<usize> = leave_one_out_indices(&gs, g).collect();
            let data: Vec<_> = keep.iter().map(|&i| dataset[i].clone()).collect();
            let fb: Vec<_> = keep.iter().map(|&i| base.z_hat[i].clone()).collect();
            refit(&data, &fb, template, &rep_config, start)
        })
        .collect();
    let mut jackknife = Vec::new();
    let mut jackknife_failures = Vec::new();
    for (g, o) in jack_outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => jackknife.push(v),
            Err(e) => jackknife_failures.push((g, e)),
        }
    }
    if jackknife_failures.len() as f64 > MAX_FAILURE_RATE * gs.len() as f64 {
        return Err(Error::Bootstrap(format!(
            "{} of {} jackknife fits failed",
            jackknife_failures.len(),
            gs.len()
        )));
    }

    let point = start.values();
    let intervals = (0..point.len())
        .map(|j| {
            let reps: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let jack: Vec<f64> = jackknife.iter().map(|e| e[j]).collect();
            bca_interval(&reps, &jack, point[j], config.level)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapResult {
        names: start.names().map(str::to_string).collect(),
        point,
        replicates: config.replicates,
        level: config.level,
        estimates,
        jackknife,
        intervals,
        failures,
        jackknife_failures,
    })
}
