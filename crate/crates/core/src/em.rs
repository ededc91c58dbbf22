//! Approximate EM estimation: plug-in feedback from smoothed states, a
//! penalized collapsed-likelihood M-step at fixed feedback, and convergence
//! control on the unconstrained parameter scale.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SubjectSeries;
use crate::error::{Error, Result};
use crate::filter::dual::{Dual, Primitive, N as N_PRIMITIVES};
use crate::filter::scalar::{log_likelihood_dual, Seeds};
use crate::filter::{log_likelihood, ScalarModel};
use crate::model::{ModelSpec, ModelTemplate};
use crate::optim::{minimize_with_gradient, GradientMode, OptimizerConfig};
use crate::params::{apply_transform, Direction, ParameterSet, Scale};
use crate::plugin::PluginFeedback;
use crate::smoother::{run_smoother, SmootherOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub n_max: usize,
    pub d_em: f64,
    pub kappa: f64,
    /// Ridge weight on the regime-1 switching coefficients.
    pub penalty: f64,
    /// Parameters to estimate; `None` estimates all of them.
    pub free_params: Option<Vec<String>>,
    /// Unconstrained-scale bounds overriding the transform defaults.
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub optimizer: OptimizerConfig,
    /// Start the EM loop directly from the given parameters instead of
    /// first fitting the model without feedback.
    pub skip_init: bool,
    /// Relative objective increase that counts towards divergence.
    pub divergence_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_max: 30,
            d_em: 0.001,
            kappa: 1e-6,
            penalty: 0.01,
            free_params: None,
            bounds: BTreeMap::new(),
            optimizer: OptimizerConfig::default(),
            skip_init: false,
            divergence_tol: 1e-4,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        if !(self.d_em > 0.0) {
            return Err(Error::Config("d_em must be positive".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if !(self.penalty >= 0.0) || !self.penalty.is_finite() {
            return Err(Error::Config("penalty must be non-negative".into()));
        }
        for (name, (lo, hi)) in &self.bounds {
            if !(lo <= hi) {
                return Err(Error::Config(format!("bounds for `{name}` are inverted")));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Final estimates on the constrained scale.
    pub params: ParameterSet,
    /// Estimates from the no-feedback initialization (the start when it was
    /// skipped).
    pub init_params: ParameterSet,
    /// Penalized log-likelihood after each M-step.
    pub loglik_trace: Vec<f64>,
    pub d_em_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub smoothed: Vec<SmootherOutput>,
    pub z_hat: Vec<PluginFeedback>,
    pub objective_evals: usize,
}

/// `‖θ_curr − θ_prev‖² / (‖θ_prev‖² + κ)`.
pub fn check_convergence(prev: &[f64], curr: &[f64], kappa: f64) -> f64 {
    assert_eq!(prev.len(), curr.len(), "parameter dimension changed");
    let num: f64 = prev.iter().zip(curr).map(|(a, b)| (b - a).powi(2)).sum();
    let den: f64 = prev.iter().map(|a| a * a).sum::<f64>() + kappa;
    num / den
}

/// Plug-in feedback from one subject's smoothed states.
pub fn plugin_feedback(smoothed: &SmootherOutput, model: &ModelSpec) -> Result<PluginFeedback> {
    let spec = &model.switch.feedback;
    PluginFeedback::from_states(spec, &smoothed.component(spec.component))
}

/// Sum of per-subject log-likelihoods, reduced in subject order.
pub fn dataset_loglik(
    dataset: &[SubjectSeries],
    model: &ModelSpec,
    feedback: &[PluginFeedback],
) -> Result<f64> {
    if dataset.len() != feedback.len() {
        return Err(Error::Domain("plug-in feedback does not cover every subject".into()));
    }
    let parts: Vec<Result<f64>> = dataset
        .par_iter()
        .zip(feedback.par_iter())
        .map(|(s, fb)| log_likelihood(s, model, fb).map_err(|e| e.in_subject(&s.id)))
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total)
}

/// Filters and smooths every subject.
pub fn smooth_dataset(
    dataset: &[SubjectSeries],
    model: &ModelSpec,
    feedback: &[PluginFeedback],
) -> Result<Vec<SmootherOutput>> {
    dataset
        .par_iter()
        .zip(feedback.par_iter())
        .map(|(s, fb)| {
            run_smoother(s, model, fb)
                .map(|(_, sm)| sm)
                .map_err(|e| e.in_subject(&s.id))
        })
        .collect()
}

/// Alternates smoothing and plug-in updates at fixed parameters until the
/// feedback averages stop changing (at most `max_iter` rounds).
pub fn self_consistent_feedback(
    dataset: &[SubjectSeries],
    model: &ModelSpec,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<SmootherOutput>, Vec<PluginFeedback>)> {
    let zero = dataset.iter().map(|s| PluginFeedback::zero(s.len())).collect();
    self_consistent_feedback_from(dataset, model, zero, max_iter, tol)
}

/// As [`self_consistent_feedback`], starting from `feedback`.
pub fn self_consistent_feedback_from(
    dataset: &[SubjectSeries],
    model: &ModelSpec,
    mut feedback: Vec<PluginFeedback>,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<SmootherOutput>, Vec<PluginFeedback>)> {
    let mut smoothed = smooth_dataset(dataset, model, &feedback)?;
    for _ in 0..max_iter {
        let next = smoothed
            .iter()
            .map(|s| plugin_feedback(s, model))
            .collect::<Result<Vec<_>>>()?;
        let change = feedback
            .iter()
            .zip(&next)
            .map(|(a, b)| max_abs_diff(a, b))
            .fold(0.0, f64::max);
        feedback = next;
        smoothed = smooth_dataset(dataset, model, &feedback)?;
        if change <= tol {
            break;
        }
    }
    Ok((smoothed, feedback))
}

fn max_abs_diff(a: &PluginFeedback, b: &PluginFeedback) -> f64 {
    match (a, b) {
        (PluginFeedback::Averages(x), PluginFeedback::Averages(y)) => x
            .iter()
            .zip(y)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    }
}

/// Penalized negative log-likelihood over a full unconstrained parameter
/// vector laid out like `layout`.
pub struct Objective<'a> {
    pub template: &'a dyn ModelTemplate,
    pub dataset: &'a [SubjectSeries],
    pub feedback: &'a [PluginFeedback],
    pub layout: &'a ParameterSet,
    pub penalty: f64,
    penalty_idx: Vec<usize>,
}

impl<'a> Objective<'a> {
    pub fn new(
        template: &'a dyn ModelTemplate,
        dataset: &'a [SubjectSeries],
        feedback: &'a [PluginFeedback],
        layout: &'a ParameterSet,
        penalty: f64,
    ) -> Self {
        let penalty_idx = template
            .penalty_targets(layout)
            .iter()
            .filter_map(|n| layout.index_of(n))
            .collect();
        Self {
            template,
            dataset,
            feedback,
            layout,
            penalty,
            penalty_idx,
        }
    }

    pub fn constrained(&self, unconstrained: &[f64]) -> Result<ParameterSet> {
        let mut u = self.layout.clone();
        if u.scale() != Scale::Unconstrained {
            u = apply_transform(&u, Direction::ToUnconstrained)?;
        }
        u.set_values(unconstrained);
        apply_transform(&u, Direction::ToConstrained)
    }

    pub fn penalty_term(&self, unconstrained: &[f64]) -> f64 {
        self.penalty * self.penalty_idx.iter().map(|&i| unconstrained[i].powi(2)).sum::<f64>()
    }

    pub fn evaluate(&self, unconstrained: &[f64]) -> Result<f64> {
        let params = self.constrained(unconstrained)?;
        let model = self.template.build(&params)?;
        let ll = dataset_loglik(self.dataset, &model, self.feedback)?;
        Ok(-ll + self.penalty_term(unconstrained))
    }

    /// Gradient of [`evaluate`](Self::evaluate) with respect to the `free`
    /// coordinates. Exact through the likelihood, with the parameter-to-model
    /// map differentiated numerically. `None` unless the model is scalar and
    /// time-invariant.
    pub fn gradient(&self, unconstrained: &[f64], free: &[usize]) -> Option<Vec<f64>> {
        let model = self.template.build(&self.constrained(unconstrained).ok()?).ok()?;
        let sm = ScalarModel::from_model(&model)?;
        let centre = quantities(&sm)?;
        let nx = sm.switch.covariate_dim();

        let h = 1e-6;
        let at = |u: &[f64]| -> Option<Vec<f64>> {
            let m = self.template.build(&self.constrained(u).ok()?).ok()?;
            quantities(&ScalarModel::from_model(&m)?)
        };
        let mut jacobian = Vec::with_capacity(free.len());
        let mut u = unconstrained.to_vec();
        for &i in free {
            let x = unconstrained[i];
            u[i] = x + h;
            let up = at(&u);
            u[i] = x - h;
            let down = at(&u);
            u[i] = x;
            let (a, b, step) = match (up, down) {
                (Some(a), Some(b)) => (a, b, 2.0 * h),
                (Some(a), None) => (a, centre.clone(), h),
                (None, Some(b)) => (centre.clone(), b, h),
                (None, None) => return None,
            };
            jacobian.push(a.iter().zip(&b).map(|(a, b)| (a - b) / step).collect::<Vec<f64>>());
        }

        // only primitives that move with a free parameter carry a tangent
        let mut seeds: Seeds = [None; N_PRIMITIVES];
        let mut active = 0;
        for (q, p) in (0..centre.len()).map(|q| (q, primitive_of(q, nx))) {
            if seeds[p].is_none() && jacobian.iter().any(|col| col[q] != 0.0) {
                seeds[p] = Some(active);
                active += 1;
            }
        }
        let per_subject = match active {
            0 => Some(vec![[0.0; N_PRIMITIVES]; self.dataset.len()]),
            1..=4 => self.primitive_gradients::<4>(&sm, &seeds),
            5..=10 => self.primitive_gradients::<10>(&sm, &seeds),
            _ => self.primitive_gradients::<N_PRIMITIVES>(&sm, &seeds),
        }?;

        let mut dq = vec![0.0; centre.len()];
        for (series, d) in self.dataset.iter().zip(per_subject) {
            for (q, g) in dq.iter_mut().enumerate() {
                let p = primitive_of(q, nx);
                *g += match q {
                    _ if (15..15 + 2 * nx).contains(&q) => d[p] * series.covariates[(q - 15) % nx],
                    _ => d[p],
                };
            }
        }
        if dq.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(
            free.iter()
                .zip(&jacobian)
                .map(|(&i, col)| {
                    let dll: f64 = col.iter().zip(&dq).map(|(a, b)| a * b).sum();
                    let pen = if self.penalty_idx.contains(&i) { 2.0 * self.penalty * unconstrained[i] } else { 0.0 };
                    -dll + pen
                })
                .collect(),
        )
    }

    /// Per-subject log-likelihood derivatives with respect to every
    /// primitive; unseeded entries are zero.
    fn primitive_gradients<const M: usize>(&self, sm: &ScalarModel, seeds: &Seeds) -> Option<Vec<[f64; N_PRIMITIVES]>> {
        let duals: Vec<Option<Dual<M>>> = self
            .dataset
            .par_iter()
            .zip(self.feedback.par_iter())
            .map(|(s, fb)| log_likelihood_dual::<M>(s, sm, fb, seeds).ok())
            .collect();
        duals
            .into_iter()
            .map(|d| {
                let d = d?;
                let mut out = [0.0; N_PRIMITIVES];
                for (o, k) in out.iter_mut().zip(seeds) {
                    if let Some(k) = k {
                        *o = d.d[*k];
                    }
                }
                Some(out)
            })
            .collect()
    }
}

/// Primitive input that model quantity `q` (in the order of `quantities`)
/// feeds; covariate coefficients feed the base logits.
fn primitive_of(q: usize, nx: usize) -> usize {
    let base0 = Primitive::Base0 as usize;
    match q {
        0..13 => q,
        13 | 14 => base0 + (q - 13),
        _ if q < 15 + 2 * nx => base0 + (q - 15) / nx,
        _ => Primitive::Zeta0 as usize + (q - 15 - 2 * nx),
    }
}

fn quantities(m: &ScalarModel) -> Option<Vec<f64>> {
    let s = &m.switch;
    if s.beta[1].len() != s.beta[0].len() {
        return None;
    }
    let mut q = vec![
        m.f, m.v, m.gamma[0], m.gamma[1], m.g[0], m.g[1], m.w[0], m.w[1], m.init_mean[0], m.init_mean[1],
        m.init_var[0], m.init_var[1], m.prob0, s.alpha[0], s.alpha[1],
    ];
    q.extend(&s.beta[0]);
    q.extend(&s.beta[1]);
    q.extend(s.zeta);
    Some(q)
}

/// Penalized negative log-likelihood at unconstrained parameters.
pub fn penalized_negloglik(
    params: &ParameterSet,
    template: &dyn ModelTemplate,
    dataset: &[SubjectSeries],
    feedback: &[PluginFeedback],
    penalty: f64,
) -> Result<f64> {
    params.ensure_scale(Scale::Unconstrained)?;
    Objective::new(template, dataset, feedback, params, penalty).evaluate(&params.values())
}

/// Minimizes the objective over the `free` coordinates, holding the rest at
/// `start`. Returns the full unconstrained vector and its objective value.
pub fn m_step(
    objective: &Objective<'_>,
    start: &[f64],
    free: &[usize],
    bounds: &[(f64, f64)],
    config: &OptimizerConfig,
) -> Result<(Vec<f64>, f64, usize)> {
    let full = |x: &[f64]| {
        let mut u = start.to_vec();
        for (k, &i) in free.iter().enumerate() {
            u[i] = x[k];
        }
        u
    };
    let f = |x: &[f64]| objective.evaluate(&full(x)).unwrap_or(f64::INFINITY);
    let x0: Vec<f64> = free.iter().map(|&i| start[i]).collect();
    let lower: Vec<f64> = free.iter().map(|&i| bounds[i].0).collect();
    let upper: Vec<f64> = free.iter().map(|&i| bounds[i].1).collect();
    if !f(&x0).is_finite() {
        // surface the underlying error
        objective.evaluate(&full(&x0))?;
        return Err(Error::Fit("objective is not finite at the M-step start".into()));
    }
    let g = |x: &[f64]| objective.gradient(&full(x), free);
    let grad: Option<&dyn Fn(&[f64]) -> Option<Vec<f64>>> = match config.gradient {
        GradientMode::Analytic => Some(&g),
        GradientMode::FiniteDifference => None,
    };
    let r = minimize_with_gradient(&f, grad, &x0, &lower, &upper, config)?;
    Ok((full(&r.x), r.value, r.evals))
}

fn resolve_free(config: &EmConfig, layout: &ParameterSet) -> Result<Vec<usize>> {
    match &config.free_params {
        None => Ok((0..layout.len()).collect()),
        Some(names) => {
            let mut idx = names
                .iter()
                .map(|n| {
                    layout
                        .index_of(n)
                        .ok_or_else(|| Error::Config(format!("unknown free parameter `{n}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            idx.sort_unstable();
            idx.dedup();
            Ok(idx)
        }
    }
}

fn resolve_bounds(config: &EmConfig, layout: &ParameterSet) -> Result<Vec<(f64, f64)>> {
    for name in config.bounds.keys() {
        if layout.index_of(name).is_none() {
            return Err(Error::Config(format!("bounds given for unknown parameter `{name}`")));
        }
    }
    Ok(layout
        .entries()
        .iter()
        .map(|e| {
            config
                .bounds
                .get(&e.name)
                .copied()
                .unwrap_or_else(|| e.transform.default_bounds())
        })
        .collect())
}

/// Fits the model by approximate EM.
pub fn fit(
    dataset: &[SubjectSeries],
    template: &dyn ModelTemplate,
    config: &EmConfig,
    start: &ParameterSet,
) -> Result<FitResult> {
    fit_from(dataset, template, config, start, None)
}

/// As [`fit`]. With `skip_init` and `feedback` (one entry per subject), the
/// EM loop resumes from `start` and that feedback, as when continuing an
/// earlier fit; without `feedback` it starts from the self-consistent
/// feedback at `start`.
pub fn fit_from(
    dataset: &[SubjectSeries],
    template: &dyn ModelTemplate,
    config: &EmConfig,
    start: &ParameterSet,
    feedback: Option<&[PluginFeedback]>,
) -> Result<FitResult> {
    config.validate()?;
    let initial_feedback = feedback;
    if dataset.is_empty() {
        return Err(Error::Fit("dataset has no subjects".into()));
    }
    if dataset.iter().all(|s| s.observed_count() == 0) {
        return Err(Error::Fit("degenerate likelihood: dataset has no observed data".into()));
    }
    start.ensure_scale(Scale::Constrained)?;
    template.build(start)?;
    let layout = apply_transform(start, Direction::ToUnconstrained)?;
    let free = resolve_free(config, &layout)?;
    let bounds = resolve_bounds(config, &layout)?;
    let mut u: Vec<f64> = layout
        .values()
        .iter()
        .zip(&bounds)
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect();
    let mut evals = 0;

    let zero_feedback: Vec<PluginFeedback> =
        dataset.iter().map(|s| PluginFeedback::zero(s.len())).collect();
    let (mut smoothed, mut feedback, init_params);
    if config.skip_init {
        let model = template.build(start)?;
        (smoothed, feedback) = match initial_feedback {
            Some(fb) if fb.len() == dataset.len() => (smooth_dataset(dataset, &model, fb)?, fb.to_vec()),
            Some(_) => return Err(Error::Domain("initial feedback does not cover every subject".into())),
            None => self_consistent_feedback(dataset, &model, 30, 1e-6)?,
        };
        init_params = start.clone();
    } else {
        let fb_names = template.feedback_params();
        let fb_idx: Vec<usize> = fb_names.iter().filter_map(|n| layout.index_of(n)).collect();
        for &i in &fb_idx {
            u[i] = 0.0;
        }
        let init_free: Vec<usize> = free.iter().copied().filter(|i| !fb_idx.contains(i)).collect();
        let obj = Objective::new(template, dataset, &zero_feedback, &layout, config.penalty);
        let (u_init, _, n) = m_step(&obj, &u, &init_free, &bounds, &config.optimizer)
            .map_err(|e| Error::Fit(format!("initialization: {e}")))?;
        evals += n;
        u = u_init;
        let model = template.build(&constrained(&layout, &u)?)?;
        smoothed = smooth_dataset(dataset, &model, &zero_feedback)?;
        feedback = smoothed
            .iter()
            .map(|s| plugin_feedback(s, &model))
            .collect::<Result<Vec<_>>>()?;
        init_params = constrained(&layout, &u)?;
    }

    let mut loglik_trace = Vec::new();
    let mut d_em_trace = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let mut rising = 0;
    for tau in 1..=config.n_max {
        let obj = Objective::new(template, dataset, &feedback, &layout, config.penalty);
        let (u_new, value, n) = m_step(&obj, &u, &free, &bounds, &config.optimizer)
            .map_err(|e| Error::Fit(format!("iteration {tau}: {e}")))?;
        evals += n;
        let d = check_convergence(&u, &u_new, config.kappa);
        u = u_new;
        let model = template.build(&constrained(&layout, &u)?)?;
        smoothed = smooth_dataset(dataset, &model, &feedback)
            .map_err(|e| Error::Fit(format!("iteration {tau}: {e}")))?;
        feedback = smoothed
            .iter()
            .map(|s| plugin_feedback(s, &model))
            .collect::<Result<Vec<_>>>()?;

        if let Some(&prev) = loglik_trace.last() {
            let prev: f64 = prev;
            if -value < prev - config.divergence_tol * prev.abs().max(1.0) {
                rising += 1;
            } else {
                rising = 0;
            }
        }
        loglik_trace.push(-value);
        d_em_trace.push(d);
        if d <= config.d_em {
            stop_reason = StopReason::Converged;
            break;
        }
        if rising >= 3 {
            stop_reason = StopReason::Diverged;
            break;
        }
    }

    Ok(FitResult {
        params: constrained(&layout, &u)?,
        init_params,
        iterations: loglik_trace.len(),
        converged: stop_reason == StopReason::Converged,
        stop_reason,
        loglik_trace,
        d_em_trace,
        smoothed,
        z_hat: feedback,
        objective_evals: evals,
    })
}

fn constrained(layout: &ParameterSet, u: &[f64]) -> Result<ParameterSet> {
    let mut p = layout.clone();
    p.set_values(u);
    apply_transform(&p, Direction::ToConstrained)
}
