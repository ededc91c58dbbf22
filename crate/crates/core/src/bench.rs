//! Wall-clock scaling of the fit in the number of subjects.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::em::{dataset_loglik, fit, EmConfig};
use crate::error::{Error, Result};
use crate::model::{ModelTemplate, PresetValues};
use crate::plugin::PluginFeedback;
use crate::simulate::{simulate_study, StudyDesign};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub m: usize,
    /// Median wall time of a full fit, seconds.
    pub seconds: f64,
    pub iterations: usize,
    pub objective_evals: usize,
    pub seconds_per_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub threads: usize,
    pub points: Vec<BenchPoint>,
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(xs, ys)`: `(intercept, slope, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Validation("a line needs at least two points".into()));
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((intercept, slope, r2))
}

/// Times cold-start fits on simulated data of each size in `m_grid`, on a
/// pool of `threads` workers.
pub fn scaling_benchmark(
    m_grid: &[usize],
    n: usize,
    repeats: usize,
    em: &EmConfig,
    seed: u64,
    threads: usize,
) -> Result<BenchReport> {
    if m_grid.is_empty() || repeats == 0 || threads == 0 {
        return Err(Error::Config("benchmark needs sizes, repeats and threads".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::new();
    for &m in m_grid {
        let design = StudyDesign { m, n, seed, ..Default::default() };
        let data: Vec<_> = simulate_study(&design)?.into_iter().map(|s| s.series).collect();
        let template = design.template();
        let start = PresetValues::cold_start(template.n_covariates).to_parameter_set();
        template.build(&start)?;
        let mut runs = Vec::new();
        for _ in 0..repeats {
            let t0 = Instant::now();
            let r = pool.install(|| fit(&data, &template, em, &start))?;
            runs.push((t0.elapsed().as_secs_f64(), r.iterations, r.objective_evals));
        }
        runs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (seconds, iterations, objective_evals) = runs[runs.len() / 2];
        points.push(BenchPoint {
            m,
            seconds,
            iterations,
            objective_evals,
            seconds_per_eval: seconds / objective_evals.max(1) as f64,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.m as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    let (intercept, slope, r_squared) = if points.len() >= 2 {
        linear_fit(&xs, &ys)?
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(BenchReport { n, threads, points, intercept, slope, r_squared })
}

/// Fastest of `repeats` single-threaded likelihood evaluations at the true
/// parameters, on `m` simulated subjects of length `n`.
pub fn evaluation_seconds(m: usize, n: usize, seed: u64, repeats: usize) -> Result<f64> {
    let design = StudyDesign { m, n, seed, ..Default::default() };
    let data: Vec<_> = simulate_study(&design)?.into_iter().map(|s| s.series).collect();
    let model = design.template().build(&design.true_values().to_parameter_set())?;
    let feedback: Vec<_> = data.iter().map(|s| PluginFeedback::zero(s.len())).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        pool.install(|| dataset_loglik(&data, &model, &feedback))?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Cost ratio of one likelihood evaluation at `2m` subjects to one at `m`.
pub fn doubling_ratio(m: usize, n: usize, seed: u64, repeats: usize) -> Result<f64> {
    Ok(evaluation_seconds(2 * m, n, seed, repeats)? / evaluation_seconds(m, n, seed, repeats)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_through_exact_points() {
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = linear_fit(&[1.0, 2.0, 3.0], &[1.0, 3.0, 1.0]).unwrap();
        assert_eq!(r2, 0.0);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
        assert!(linear_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn tiny_benchmark() {
        let em = EmConfig { n_max: 1, ..Default::default() };
        let r = scaling_benchmark(&[2, 4], 20, 1, &em, 3, 1).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(r.points.iter().all(|p| p.seconds > 0.0 && p.objective_evals > 0));
        assert!(r.r_squared.is_finite());
    }
}
