//! Multiprocess Kalman filtering with collapsing.
//!
//! At each time the posterior is tracked conditional on the regime pair
//! `(I_{t-1}, I_t) = (o, p)`. The four pair posteriors are collapsed over `o`
//! into one Gaussian per regime, and again over `p` into the marginal. Regime
//! probabilities are updated in log space.

pub mod dual;
pub mod scalar;

use nalgebra::{DMatrix, DVector};

use crate::data::SubjectSeries;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_log_density, log_logistic, log_sum_exp, safe_ln, spd_factor, symmetrize};
use crate::model::{ModelSpec, TransitionProbs};
use crate::plugin::PluginFeedback;

pub use scalar::ScalarModel;

pub type Pair<T> = [[T; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingKind {
    /// Every element of `y_t` is missing.
    Full,
    Partial,
    /// Nothing is missing.
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingPattern {
    pub kind: MissingKind,
    /// Observed slots, only populated for [`MissingKind::Partial`].
    pub observed_indices: Vec<usize>,
}

/// Observation equation restricted to the observed slots of `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedObservation {
    pub pattern: MissingPattern,
    pub y: DVector<f64>,
    pub f: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// Drops the rows of `F` and rows/columns of `V` for missing (`NaN`) slots.
pub fn subset_observation(y: &[f64], f: &DMatrix<f64>, v: &DMatrix<f64>) -> ReducedObservation {
    let observed: Vec<usize> = (0..y.len()).filter(|&i| !y[i].is_nan()).collect();
    if observed.len() == y.len() {
        return ReducedObservation {
            pattern: MissingPattern {
                kind: MissingKind::Complete,
                observed_indices: Vec::new(),
            },
            y: DVector::from_column_slice(y),
            f: f.clone(),
            v: v.clone(),
        };
    }
    if observed.is_empty() {
        return ReducedObservation {
            pattern: MissingPattern {
                kind: MissingKind::Full,
                observed_indices: Vec::new(),
            },
            y: DVector::zeros(0),
            f: DMatrix::zeros(0, f.ncols()),
            v: DMatrix::zeros(0, 0),
        };
    }
    let k = observed.len();
    let y_star = DVector::from_iterator(k, observed.iter().map(|&i| y[i]));
    let f_star = f.select_rows(observed.iter());
    let v_star = DMatrix::from_fn(k, k, |a, b| v[(observed[a], observed[b])]);
    ReducedObservation {
        pattern: MissingPattern {
            kind: MissingKind::Partial,
            observed_indices: observed,
        },
        y: y_star,
        f: f_star,
        v: v_star,
    }
}

/// Per-regime filtered moments and probabilities at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeState {
    pub mean: [DVector<f64>; 2],
    pub cov: [DMatrix<f64>; 2],
    pub prob: [f64; 2],
    pub log_prob: [f64; 2],
}

impl RegimeState {
    pub fn initial(model: &ModelSpec) -> Self {
        let p0 = model.init.prob0;
        Self {
            mean: model.init.mean.clone(),
            cov: model.init.cov.clone(),
            prob: [p0, 1.0 - p0],
            log_prob: [safe_ln(p0), safe_ln(1.0 - p0)],
        }
    }

    /// Marginal moments after collapsing over the regime.
    pub fn marginal(&self) -> (DVector<f64>, DMatrix<f64>) {
        collapse_unchecked(&self.prob, &self.mean, &self.cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub t: usize,
    pub pattern: MissingPattern,
    /// Transition kernel into time `t`.
    pub trans: TransitionProbs,
    pub pred_mean: Pair<DVector<f64>>,
    pub pred_cov: Pair<DMatrix<f64>>,
    /// Absent when `y_t` is fully missing.
    pub innovation: Option<Pair<DVector<f64>>>,
    pub innovation_cov: Option<Pair<DMatrix<f64>>>,
    pub post_mean_pair: Pair<DVector<f64>>,
    pub post_cov_pair: Pair<DMatrix<f64>>,
    /// `Pr(I_{t-1} = o, I_t = p | ψ_t)`.
    pub joint_prob: Pair<f64>,
    pub regime_mean: [DVector<f64>; 2],
    pub regime_cov: [DMatrix<f64>; 2],
    pub regime_prob: [f64; 2],
    pub log_regime_prob: [f64; 2],
    pub marg_mean: DVector<f64>,
    pub marg_cov: DMatrix<f64>,
    /// `ln p(y_t | ψ_{t-1})`, zero when `y_t` is fully missing.
    pub loglik_inc: f64,
}

impl FilterStep {
    pub fn regime_state(&self) -> RegimeState {
        RegimeState {
            mean: self.regime_mean.clone(),
            cov: self.regime_cov.clone(),
            prob: self.regime_prob,
            log_prob: self.log_regime_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// State at `t = 0` taken from the initial condition.
    pub initial: RegimeState,
    pub steps: Vec<FilterStep>,
    pub loglik: f64,
    /// `α_k + xᵀβ_k` for the series' covariates.
    pub base_logits: [f64; 2],
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Regime state at `t` (`t = 0` is the initial condition).
    pub fn regime_state(&self, t: usize) -> RegimeState {
        if t == 0 {
            self.initial.clone()
        } else {
            self.steps[t - 1].regime_state()
        }
    }
}

/// Moment-matches a Gaussian mixture: `mean = Σ w_i μ_i`,
/// `cov = Σ w_i (P_i + (μ_i - mean)(μ_i - mean)ᵀ)`.
pub fn collapse_mixture(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if weights.len() != means.len() || weights.len() != covs.len() || weights.is_empty() {
        return Err(Error::Domain("mixture component counts differ".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Domain(format!("negative mixture weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Domain(format!("mixture weights sum to {total}")));
    }
    Ok(collapse_unchecked(weights, means, covs))
}

fn collapse_unchecked(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let q = means[0].len();
    let mut mean = DVector::zeros(q);
    for (w, m) in weights.iter().zip(means) {
        mean.axpy(*w, m, 1.0);
    }
    let mut cov = DMatrix::zeros(q, q);
    for ((w, m), c) in weights.iter().zip(means).zip(covs) {
        if *w == 0.0 {
            continue;
        }
        let d = m - &mean;
        cov += (c + &d * d.transpose()) * *w;
    }
    symmetrize(&mut cov);
    (mean, cov)
}

/// One step of the multiprocess filter from the regime state at `t - 1`.
/// `z` holds the plug-in feedback terms `(z_0, z_1)` for time `t`.
pub fn filter_step(
    prev: &RegimeState,
    model: &ModelSpec,
    base_logits: [f64; 2],
    z: (f64, f64),
    y: &[f64],
    t: usize,
) -> Result<FilterStep> {
    let logit01 = base_logits[0] + z.0;
    let logit11 = base_logits[1] + z.1;
    if !logit01.is_finite() || !logit11.is_finite() {
        return Err(Error::numerical(t, "non-finite switching logit"));
    }
    let trans = TransitionProbs::from_logits(logit01, logit11);
    let log_trans = [
        [log_logistic(-logit01), log_logistic(logit01)],
        [log_logistic(-logit11), log_logistic(logit11)],
    ];

    let f = model.f.at(t);
    let reduced = subset_observation(y, f, model.v.at(t));
    let observed = reduced.pattern.kind != MissingKind::Full;

    let zero_vec = || DVector::zeros(model.q);
    let zero_mat = || DMatrix::zeros(model.q, model.q);
    let mut pred_mean: Pair<DVector<f64>> = Default::default();
    let mut pred_cov: Pair<DMatrix<f64>> = Default::default();
    let mut post_mean: Pair<DVector<f64>> = Default::default();
    let mut post_cov: Pair<DMatrix<f64>> = Default::default();
    let mut innovation: Pair<DVector<f64>> = Default::default();
    let mut innovation_cov: Pair<DMatrix<f64>> = Default::default();
    let mut log_joint = [[0.0; 2]; 2];

    for p in 0..2 {
        let dyn_p = &model.regimes[p];
        let g = dyn_p.g.at(t);
        let gamma = dyn_p.gamma.at(t);
        let w = dyn_p.w.at(t);
        for o in 0..2 {
            let m = gamma + g * &prev.mean[o];
            let mut pc = g * &prev.cov[o] * g.transpose() + w;
            symmetrize(&mut pc);
            log_joint[o][p] = prev.log_prob[o] + log_trans[o][p];

            if observed {
                let eta = &reduced.y - &reduced.f * &m;
                // F* P, shared by the gain and the innovation covariance
                let fp = &reduced.f * &pc;
                let mut h = &fp * reduced.f.transpose() + &reduced.v;
                symmetrize(&mut h);
                let chol = spd_factor(&h).ok_or(Error::Numerical {
                    t,
                    branch: Some((o, p)),
                    msg: "innovation covariance is not positive definite".into(),
                })?;
                log_joint[o][p] += gaussian_log_density(&chol, &eta);
                let h_inv_eta = chol.solve(&eta);
                let h_inv_fp = chol.solve(&fp);
                let pm = &m + fp.transpose() * h_inv_eta;
                let mut pcov = &pc - fp.transpose() * h_inv_fp;
                symmetrize(&mut pcov);
                post_mean[o][p] = pm;
                post_cov[o][p] = pcov;
                innovation[o][p] = eta;
                innovation_cov[o][p] = h;
            } else {
                post_mean[o][p] = m.clone();
                post_cov[o][p] = pc.clone();
                innovation[o][p] = DVector::zeros(0);
                innovation_cov[o][p] = DMatrix::zeros(0, 0);
            }
            pred_mean[o][p] = m;
            pred_cov[o][p] = pc;
        }
    }

    let flat = [log_joint[0][0], log_joint[0][1], log_joint[1][0], log_joint[1][1]];
    let log_norm = log_sum_exp(&flat);
    if !log_norm.is_finite() {
        return Err(Error::numerical(t, "observation has zero likelihood under every regime pair"));
    }
    let loglik_inc = if observed { log_norm } else { 0.0 };
    for row in log_joint.iter_mut() {
        for v in row.iter_mut() {
            *v -= log_norm;
        }
    }
    let joint_prob = log_joint.map(|row| row.map(f64::exp));

    let mut log_regime_prob = [0.0; 2];
    let mut regime_mean = [zero_vec(), zero_vec()];
    let mut regime_cov = [zero_mat(), zero_mat()];
    for p in 0..2 {
        let lr = log_sum_exp(&[log_joint[0][p], log_joint[1][p]]);
        log_regime_prob[p] = lr;
        // Pr(I_{t-1} = o | I_t = p, ψ_t), well defined even if Pr(I_t = p) underflows
        let w = [(log_joint[0][p] - lr).exp(), (log_joint[1][p] - lr).exp()];
        let (m, c) = collapse_unchecked(
            &w,
            &[post_mean[0][p].clone(), post_mean[1][p].clone()],
            &[post_cov[0][p].clone(), post_cov[1][p].clone()],
        );
        regime_mean[p] = m;
        regime_cov[p] = c;
    }
    let regime_prob = log_regime_prob.map(f64::exp);
    let (marg_mean, marg_cov) = collapse_unchecked(&regime_prob, &regime_mean, &regime_cov);

    Ok(FilterStep {
        t,
        pattern: reduced.pattern,
        trans,
        pred_mean,
        pred_cov,
        innovation: observed.then_some(innovation),
        innovation_cov: observed.then_some(innovation_cov),
        post_mean_pair: post_mean,
        post_cov_pair: post_cov,
        joint_prob,
        regime_mean,
        regime_cov,
        regime_prob,
        log_regime_prob,
        marg_mean,
        marg_cov,
        loglik_inc,
    })
}

pub(crate) fn check_inputs(
    series: &SubjectSeries,
    model: &ModelSpec,
    feedback: &PluginFeedback,
) -> Result<[f64; 2]> {
    if series.obs_dim() != model.p && !series.is_empty() {
        return Err(Error::Domain(format!(
            "series has {} observation channels, model expects {}",
            series.obs_dim(),
            model.p
        )));
    }
    model.validate_length(series.len())?;
    feedback.check_covers(series.len())?;
    model.switch.base_logits(&series.covariates)
}

/// Runs the filter over `t = 1..n` from the model's initial condition.
pub fn run_filter(
    series: &SubjectSeries,
    model: &ModelSpec,
    feedback: &PluginFeedback,
) -> Result<FilterOutput> {
    let base_logits = check_inputs(series, model, feedback)?;
    let initial = RegimeState::initial(model);
    let mut steps: Vec<FilterStep> = Vec::with_capacity(series.len());
    let mut loglik = 0.0;
    for t in 1..=series.len() {
        let step = {
            let prev = match steps.last() {
                Some(s) => s.regime_state(),
                None => initial.clone(),
            };
            filter_step(
                &prev,
                model,
                base_logits,
                feedback.z(t, &model.switch),
                series.observation(t),
                t,
            )?
        };
        loglik += step.loglik_inc;
        steps.push(step);
    }
    Ok(FilterOutput {
        initial,
        steps,
        loglik,
        base_logits,
    })
}

/// Collapsed log-likelihood of one series, using the scalar kernel when the
/// model is scalar and time-invariant.
pub fn log_likelihood(
    series: &SubjectSeries,
    model: &ModelSpec,
    feedback: &PluginFeedback,
) -> Result<f64> {
    match ScalarModel::from_model(model) {
        Some(sm) => scalar::log_likelihood(series, &sm, feedback),
        None => run_filter(series, model, feedback).map(|out| out.loglik),
    }
}

#[cfg(test)]
mod tests;
