//! Fixed-interval smoothing over a collapsed filter pass: smoothed state
//! moments, smoothed regime probabilities and one-step-ahead predictions.

use nalgebra::{DMatrix, DVector};

use crate::data::SubjectSeries;
use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterOutput, RegimeState};
use crate::linalg::{log_sum_exp, safe_ln, spd_factor, symmetrize};
use crate::model::{ModelSpec, TransitionProbs};
use crate::plugin::PluginFeedback;

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    /// `θ_{t|n}` for `t = 1..n` (index `t - 1`).
    pub smooth_mean: Vec<DVector<f64>>,
    pub smooth_cov: Vec<DMatrix<f64>>,
    /// `Pr(I_t = p | ψ_n)`.
    pub smooth_prob: Vec<[f64; 2]>,
    /// `Pr(I_t = p, I_{t+1} = q | ψ_n)` for `t = 1..n-1`.
    pub pairwise_prob: Vec<[[f64; 2]; 2]>,
    /// `θ_{t+1|t}` for `t = 0..n-1` (index `t`).
    pub pred_mean: Vec<DVector<f64>>,
    /// `Pr(I_{t+1} = 1 | ψ_t)` for `t = 0..n-1`.
    pub pred_prob: Vec<f64>,
    /// `Σ_{t,t+1}` for `t = 0..n-1`.
    pub cross_cov: Vec<DMatrix<f64>>,
    /// `P_{t+1|t}` for `t = 0..n-1`.
    pub pred_cov: Vec<DMatrix<f64>>,
    /// Times whose smoothed probabilities fell back to the filtered ones
    /// because a regime had zero predicted mass.
    pub prob_fallback: Vec<usize>,
}

impl SmootherOutput {
    pub fn len(&self) -> usize {
        self.smooth_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smooth_mean.is_empty()
    }

    /// Smoothed path of one state component.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.smooth_mean.iter().map(|m| m[k]).collect()
    }
}

/// Mixture moments of `(θ_t, θ_{t+1})` given `ψ_t`: returns
/// `(θ_{t+1|t}, Σ_{t,t+1}, P_{t+1|t})`. `next` is the time index `t + 1`
/// used for the dynamics; `joint[p][q] = Pr(I_t = p, I_{t+1} = q | ψ_t)`.
pub fn predictive_moments(
    state: &RegimeState,
    model: &ModelSpec,
    next: usize,
    joint: &[[f64; 2]; 2],
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Domain(format!(
            "joint regime probabilities sum to {total}"
        )));
    }
    let q = model.q;
    let (theta_tt, _) = state.marginal();
    let mut mean = DVector::zeros(q);
    let mut second = DMatrix::zeros(q, q);
    let mut cross = DMatrix::zeros(q, q);
    let mut within = DMatrix::zeros(q, q);
    for p in 0..2 {
        let m = &state.mean[p];
        let outer = m * m.transpose() + &state.cov[p];
        for k in 0..2 {
            let w = joint[p][k];
            if w == 0.0 {
                continue;
            }
            let gamma = model.regimes[k].gamma.at(next);
            let g = model.regimes[k].g.at(next);
            let wk = model.regimes[k].w.at(next);
            let centre = gamma + g * m;
            mean += w * &centre;
            second += w * (&centre * centre.transpose());
            cross += w * (m * gamma.transpose() + &outer * g.transpose());
            within += w * (g * &state.cov[p] * g.transpose() + wk);
        }
    }
    let mut pred_cov = within + second - &mean * mean.transpose();
    symmetrize(&mut pred_cov);
    let cross_cov = cross - &theta_tt * mean.transpose();
    if mean.iter().chain(pred_cov.iter()).chain(cross_cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical(next - 1, "non-finite predictive moments"));
    }
    Ok((mean, cross_cov, pred_cov))
}

fn predictive_joint(prob: &[f64; 2], trans: &TransitionProbs) -> [[f64; 2]; 2] {
    let mut j = [[0.0; 2]; 2];
    for p in 0..2 {
        for q in 0..2 {
            j[p][q] = prob[p] * trans.get(p, q);
        }
    }
    let total: f64 = j.iter().flatten().sum();
    for v in j.iter_mut().flatten() {
        *v /= total;
    }
    j
}

/// State prediction `θ_{t+1|t}` and `Pr(I_{t+1} = 1 | ψ_t)` from the regime
/// state at `t` and the transition kernel into `t + 1`.
pub fn one_step_predict(
    state: &RegimeState,
    model: &ModelSpec,
    next: usize,
    trans: &TransitionProbs,
) -> Result<(DVector<f64>, f64)> {
    let joint = predictive_joint(&state.prob, trans);
    let (mean, _, _) = predictive_moments(state, model, next, &joint)?;
    Ok((mean, joint[0][1] + joint[1][1]))
}

/// Smoothed regime probabilities. Returns `(pairwise, marginal, fallback)`.
pub fn smooth_probabilities(
    filter: &FilterOutput,
) -> (Vec<[[f64; 2]; 2]>, Vec<[f64; 2]>, Vec<usize>) {
    let n = filter.len();
    let mut marginal = vec![[0.0; 2]; n];
    let mut pairwise = vec![[[0.0; 2]; 2]; n.saturating_sub(1)];
    let mut fallback = Vec::new();
    if n == 0 {
        return (pairwise, marginal, fallback);
    }
    marginal[n - 1] = filter.steps[n - 1].regime_prob;
    for t in (1..n).rev() {
        let filt = &filter.steps[t - 1].log_regime_prob;
        let trans = &filter.steps[t].trans;
        let mut log_joint = [[0.0; 2]; 2];
        for p in 0..2 {
            for q in 0..2 {
                log_joint[p][q] = filt[p] + safe_ln(trans.get(p, q));
            }
        }
        let after = marginal[t];
        let mut pair = [[0.0; 2]; 2];
        let mut degenerate = false;
        for q in 0..2 {
            if after[q] == 0.0 {
                continue;
            }
            let denom = log_sum_exp(&[log_joint[0][q], log_joint[1][q]]);
            if !denom.is_finite() {
                degenerate = true;
                break;
            }
            for p in 0..2 {
                pair[p][q] = (after[q].ln() + log_joint[p][q] - denom).exp();
            }
        }
        if degenerate {
            fallback.push(t);
            let total = log_sum_exp(&[
                log_joint[0][0],
                log_joint[0][1],
                log_joint[1][0],
                log_joint[1][1],
            ]);
            for p in 0..2 {
                for q in 0..2 {
                    pair[p][q] = (log_joint[p][q] - total).exp();
                }
            }
            marginal[t - 1] = filter.steps[t - 1].regime_prob;
        } else {
            marginal[t - 1] = [pair[0][0] + pair[0][1], pair[1][0] + pair[1][1]];
        }
        pairwise[t - 1] = pair;
    }
    fallback.reverse();
    (pairwise, marginal, fallback)
}

/// Backward smoothing pass over a filter output.
pub fn smooth_pass(filter: &FilterOutput, model: &ModelSpec) -> Result<SmootherOutput> {
    let n = filter.len();
    let mut pred_mean = Vec::with_capacity(n);
    let mut pred_cov = Vec::with_capacity(n);
    let mut cross_cov = Vec::with_capacity(n);
    let mut pred_prob = Vec::with_capacity(n);
    for t in 0..n {
        let state = filter.regime_state(t);
        let joint = predictive_joint(&state.prob, &filter.steps[t].trans);
        let (m, c, p) = predictive_moments(&state, model, t + 1, &joint)?;
        pred_mean.push(m);
        cross_cov.push(c);
        pred_cov.push(p);
        pred_prob.push(joint[0][1] + joint[1][1]);
    }

    let mut smooth_mean = vec![DVector::zeros(model.q); n];
    let mut smooth_cov = vec![DMatrix::zeros(model.q, model.q); n];
    if n > 0 {
        smooth_mean[n - 1] = filter.steps[n - 1].marg_mean.clone();
        smooth_cov[n - 1] = filter.steps[n - 1].marg_cov.clone();
    }
    for t in (1..n).rev() {
        let step = &filter.steps[t - 1];
        let sigma = &cross_cov[t];
        let chol = spd_factor(&pred_cov[t])
            .ok_or_else(|| Error::numerical(t, "predicted covariance is singular"))?;
        // A = Σ P⁻¹, via P⁻¹ Σᵀ with P symmetric
        let gain = chol.solve(&sigma.transpose()).transpose();
        let mean = &step.marg_mean + &gain * (&smooth_mean[t] - &pred_mean[t]);
        let mut cov = &step.marg_cov - &gain * sigma.transpose()
            + &gain * &smooth_cov[t] * gain.transpose();
        symmetrize(&mut cov);
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical(t, "non-finite smoothed moments"));
        }
        smooth_mean[t - 1] = mean;
        smooth_cov[t - 1] = cov;
    }

    let (pairwise_prob, smooth_prob, prob_fallback) = smooth_probabilities(filter);
    Ok(SmootherOutput {
        smooth_mean,
        smooth_cov,
        smooth_prob,
        pairwise_prob,
        pred_mean,
        pred_prob,
        cross_cov,
        pred_cov,
        prob_fallback,
    })
}

/// Filters then smooths one series.
pub fn run_smoother(
    series: &SubjectSeries,
    model: &ModelSpec,
    feedback: &PluginFeedback,
) -> Result<(FilterOutput, SmootherOutput)> {
    let filter = run_filter(series, model, feedback)?;
    let smooth = smooth_pass(&filter, model)?;
    Ok((filter, smooth))
}
