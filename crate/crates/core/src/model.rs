//! The two-regime switching state space model with state feedback.
//!
//! Observation: `y_t = F_t θ_t + v_t`, `v_t ~ N(0, V_t)`.
//! System, regime `k`: `θ_t = γ_k + G_k θ_{t-1} + w_{t,k}`, `w_{t,k} ~ N(0, W_k)`.
//! Switching: `Pr(I_t = 1 | I_{t-1} = 0) = logistic(α_0 + xᵀβ_0 + z_{t,0})` and
//! `Pr(I_t = 1 | I_{t-1} = 1) = logistic(α_1 + xᵀβ_1 + z_{t,1})`, where
//! `z_{t,k} = ζ_k · (weighted average of the previous L states)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_psd, is_symmetric, logistic};
use crate::params::{self, ParameterSet, Scale};

/// A per-time quantity that is usually constant.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T> {
    Constant(T),
    /// Element `t - 1` applies at time `t`.
    Varying(Vec<T>),
}

impl<T> Schedule<T> {
    /// Value in effect at time `t` (1-based). Varying schedules must cover `t`;
    /// [`ModelSpec::validate_length`] checks this up front.
    #[inline]
    pub fn at(&self, t: usize) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::Varying(vs) => &vs[t.saturating_sub(1).min(vs.len() - 1)],
        }
    }

    pub fn len_limit(&self) -> Option<usize> {
        match self {
            Schedule::Constant(_) => None,
            Schedule::Varying(vs) => Some(vs.len()),
        }
    }

    pub fn constant(&self) -> Option<&T> {
        match self {
            Schedule::Constant(v) => Some(v),
            Schedule::Varying(_) => None,
        }
    }

    fn iter(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            Schedule::Constant(v) => Box::new(std::iter::once(v)),
            Schedule::Varying(vs) => Box::new(vs.iter()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSpec {
    /// Number of past states averaged.
    pub lag: usize,
    /// Exponent rate in `w_l = exp(rho * (L - l + 1))`.
    pub rho: f64,
    /// Renormalize the weights of the available lags to sum to one.
    pub normalize: bool,
    /// State component that feeds back (0 for scalar states).
    #[serde(default)]
    pub component: usize,
}

impl Default for FeedbackSpec {
    fn default() -> Self {
        Self {
            lag: 3,
            rho: 0.5,
            normalize: true,
            component: 0,
        }
    }
}

impl FeedbackSpec {
    /// Weighted average of the available lags of `history` for time `t`, with
    /// `history[k]` holding the state at time `k + 1`. Zero at `t = 1`.
    pub fn weighted_average(&self, history: &[f64], t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::Domain("feedback requested at t = 0".into()));
        }
        if self.lag == 0 {
            return Err(Error::Domain("feedback lag must be positive".into()));
        }
        let available = self.lag.min(t - 1);
        if available == 0 {
            return Ok(0.0);
        }
        if history.len() < t - 1 {
            return Err(Error::Domain(format!(
                "feedback at t={t} needs {} past states, got {}",
                t - 1,
                history.len()
            )));
        }
        let lag = self.lag as f64;
        // l runs over L - available + 1 ..= L; the state index is t - L + l - 1.
        let first_l = self.lag - available + 1;
        // weights are shifted by the largest exponent for normalized mode
        let shift = if self.normalize {
            self.rho.max(self.rho * (lag - first_l as f64 + 1.0))
        } else {
            0.0
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for l in first_l..=self.lag {
            let w = (self.rho * (lag - l as f64 + 1.0) - shift).exp();
            let state_time = t + l - self.lag - 1;
            num += w * history[state_time - 1];
            den += w;
        }
        let value = if self.normalize { num / den } else { num };
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite feedback average at t={t}")));
        }
        Ok(value)
    }
}

/// `ζ · Σ_l w̃_l θ_{t-L+l-1}` over the available lags.
pub fn feedback_value(spec: &FeedbackSpec, zeta: f64, history: &[f64], t: usize) -> Result<f64> {
    if zeta == 0.0 {
        return Ok(0.0);
    }
    Ok(zeta * spec.weighted_average(history, t)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSpec {
    pub alpha: [f64; 2],
    pub beta: [Vec<f64>; 2],
    pub zeta: [f64; 2],
    pub feedback: FeedbackSpec,
}

impl SwitchSpec {
    pub fn covariate_dim(&self) -> usize {
        self.beta[0].len()
    }

    /// `α_k + xᵀβ_k` for both origin regimes.
    pub fn base_logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.covariate_dim() {
            return Err(Error::Domain(format!(
                "covariate vector has length {}, expected {}",
                x.len(),
                self.covariate_dim()
            )));
        }
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.alpha[k] + x.iter().zip(&self.beta[k]).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(out)
    }
}

/// Transition kernel `π_{op} = Pr(I_t = p | I_{t-1} = o)` at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionProbs {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

impl TransitionProbs {
    pub fn from_logits(logit01: f64, logit11: f64) -> Self {
        let p01 = logistic(logit01);
        let p11 = logistic(logit11);
        Self {
            p00: 1.0 - p01,
            p01,
            p10: 1.0 - p11,
            p11,
        }
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        match (from, to) {
            (0, 0) => self.p00,
            (0, _) => self.p01,
            (_, 0) => self.p10,
            _ => self.p11,
        }
    }
}

/// Logistic switching probabilities; `z0`/`z1` are the already-scaled
/// feedback terms.
pub fn transition_probabilities(
    switch: &SwitchSpec,
    x: &[f64],
    z0: f64,
    z1: f64,
) -> Result<TransitionProbs> {
    if !z0.is_finite() || !z1.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite switching input".into()));
    }
    let base = switch.base_logits(x)?;
    let (l0, l1) = (base[0] + z0, base[1] + z1);
    if !l0.is_finite() || !l1.is_finite() {
        return Err(Error::Domain("non-finite switching logit".into()));
    }
    Ok(TransitionProbs::from_logits(l0, l1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub mean: [DVector<f64>; 2],
    pub cov: [DMatrix<f64>; 2],
    /// `Pr(I_0 = 0)`.
    pub prob0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeDynamics {
    pub gamma: Schedule<DVector<f64>>,
    pub g: Schedule<DMatrix<f64>>,
    pub w: Schedule<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub p: usize,
    pub q: usize,
    pub f: Schedule<DMatrix<f64>>,
    pub v: Schedule<DMatrix<f64>>,
    pub regimes: [RegimeDynamics; 2],
    pub switch: SwitchSpec,
    pub init: InitialCondition,
}

const SYM_TOL: f64 = 1e-8;

impl ModelSpec {
    /// Checks dimensions, symmetry and positive semi-definiteness.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.p, self.q);
        if p == 0 || q == 0 {
            return Err(Error::Config("observation and state dimensions must be positive".into()));
        }
        let bad = |what: &str| Err(Error::Config(format!("{what} has inconsistent dimensions")));
        for f in self.f.iter() {
            if f.shape() != (p, q) {
                return bad("F");
            }
        }
        for v in self.v.iter() {
            if v.shape() != (p, p) {
                return bad("V");
            }
            check_cov(v, "V")?;
        }
        for (k, r) in self.regimes.iter().enumerate() {
            for g in r.g.iter() {
                if g.shape() != (q, q) {
                    return bad(&format!("G[{k}]"));
                }
            }
            for gamma in r.gamma.iter() {
                if gamma.len() != q {
                    return bad(&format!("gamma[{k}]"));
                }
            }
            for w in r.w.iter() {
                if w.shape() != (q, q) {
                    return bad(&format!("W[{k}]"));
                }
                check_cov(w, &format!("W[{k}]"))?;
            }
            if self.init.mean[k].len() != q || self.init.cov[k].shape() != (q, q) {
                return bad(&format!("initial condition {k}"));
            }
            check_cov(&self.init.cov[k], &format!("initial covariance {k}"))?;
        }
        if !(0.0..=1.0).contains(&self.init.prob0) {
            return Err(Error::Config(format!(
                "initial regime probability {} outside [0,1]",
                self.init.prob0
            )));
        }
        let s = &self.switch;
        if s.beta[0].len() != s.beta[1].len() {
            return bad("beta");
        }
        if s.feedback.lag == 0 {
            return Err(Error::Config("feedback lag must be positive".into()));
        }
        if s.feedback.component >= q {
            return Err(Error::Config("feedback component outside the state vector".into()));
        }
        let scalars = s.alpha.iter().chain(&s.zeta).chain(&s.beta[0]).chain(&s.beta[1]);
        if scalars.copied().any(|v| !v.is_finite()) || !s.feedback.rho.is_finite() {
            return Err(Error::Config("non-finite switching parameter".into()));
        }
        Ok(())
    }

    /// Longest series the time-varying schedules cover, if any are varying.
    pub fn n_max(&self) -> Option<usize> {
        let mut limits = vec![self.f.len_limit(), self.v.len_limit()];
        for r in &self.regimes {
            limits.extend([r.gamma.len_limit(), r.g.len_limit(), r.w.len_limit()]);
        }
        limits.into_iter().flatten().min()
    }

    pub fn validate_length(&self, n: usize) -> Result<()> {
        match self.n_max() {
            Some(max) if n > max => Err(Error::Config(format!(
                "series of length {n} exceeds the model schedule length {max}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        self.n_max().is_none()
    }
}

fn check_cov(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !is_symmetric(m, SYM_TOL) || !is_psd(m, SYM_TOL) {
        return Err(Error::Config(format!("{what} must be symmetric positive semidefinite")));
    }
    Ok(())
}

/// Builds a [`ModelSpec`] from a constrained parameter vector.
pub trait ModelTemplate: Send + Sync {
    fn build(&self, params: &ParameterSet) -> Result<ModelSpec>;

    /// Parameters subject to the ridge penalty: the regime-1 switching
    /// coefficients (`alpha1`, `beta1[*]`, `zeta1`).
    fn penalty_targets(&self, params: &ParameterSet) -> Vec<String> {
        params
            .names()
            .filter(|n| *n == params::ALPHA1 || *n == params::ZETA1 || n.starts_with("beta1["))
            .map(str::to_string)
            .collect()
    }

    /// Parameters fixed at zero when fitting the model without feedback.
    fn feedback_params(&self) -> Vec<String> {
        vec![params::ZETA0.to_string(), params::ZETA1.to_string()]
    }
}

/// Scalar fever/no-fever preset: `F = 1`, `V = σ_v²`; regime 0 is
/// `θ_t = G_0 θ_{t-1} + w`, regime 1 is `θ_t = δ(1 - G_1) + G_1 θ_{t-1} + w`.
/// Feedback acts only on staying in regime 1, and every series starts in
/// regime 0 with `θ_{0|0}^{(0)} = 0`, `θ_{0|0}^{(1)} = δ` and zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperaturePreset {
    pub feedback: FeedbackSpec,
    pub n_covariates: usize,
}

/// Constrained-scale values of the preset's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetValues {
    pub sigma2_v: f64,
    pub sigma2_0: f64,
    pub sigma2_1: f64,
    pub delta: f64,
    pub g0: f64,
    pub g1: f64,
    pub alpha0: f64,
    pub beta0: Vec<f64>,
    pub alpha1: f64,
    pub beta1: Vec<f64>,
    pub zeta1: f64,
}

impl PresetValues {
    /// Default starting point: unit variances, `delta = 1`, `G = 0.5`,
    /// switching coefficients at zero.
    pub fn cold_start(n_covariates: usize) -> Self {
        Self {
            sigma2_v: 1.0,
            sigma2_0: 1.0,
            sigma2_1: 1.0,
            delta: 1.0,
            g0: 0.5,
            g1: 0.5,
            alpha0: 0.0,
            beta0: vec![0.0; n_covariates],
            alpha1: 0.0,
            beta1: vec![0.0; n_covariates],
            zeta1: 0.0,
        }
    }

    /// Parameter vector in reporting order with the preset's transforms.
    pub fn to_parameter_set(&self) -> ParameterSet {
        use params::*;
        let mut p = ParameterSet::constrained()
            .with(SIGMA2_V, self.sigma2_v, Transform::Log)
            .with(SIGMA2_0, self.sigma2_0, Transform::Log)
            .with(SIGMA2_1, self.sigma2_1, Transform::Log)
            .with(DELTA, self.delta, Transform::Log)
            .with(G0, self.g0, Transform::Logit)
            .with(G1, self.g1, Transform::Logit)
            .with(ALPHA0, self.alpha0, Transform::Identity);
        for (j, b) in self.beta0.iter().enumerate() {
            p = p.with(beta0(j), *b, Transform::Identity);
        }
        p = p.with(ALPHA1, self.alpha1, Transform::Identity);
        for (j, b) in self.beta1.iter().enumerate() {
            p = p.with(beta1(j), *b, Transform::Identity);
        }
        p.with(ZETA1, self.zeta1, Transform::Identity)
    }

    pub fn from_parameter_set(p: &ParameterSet) -> Result<Self> {
        use params::*;
        Ok(Self {
            sigma2_v: p.require(SIGMA2_V)?,
            sigma2_0: p.require(SIGMA2_0)?,
            sigma2_1: p.require(SIGMA2_1)?,
            delta: p.require(DELTA)?,
            g0: p.require(G0)?,
            g1: p.require(G1)?,
            alpha0: p.require(ALPHA0)?,
            beta0: p.indexed("beta0"),
            alpha1: p.require(ALPHA1)?,
            beta1: p.indexed("beta1"),
            zeta1: p.require(ZETA1)?,
        })
    }
}

impl TemperaturePreset {
    pub fn new(feedback: FeedbackSpec, n_covariates: usize) -> Self {
        Self {
            feedback,
            n_covariates,
        }
    }
}

/// Builds the scalar preset model from its parameters.
pub fn temperature_preset(
    params: &ParameterSet,
    feedback: FeedbackSpec,
    n_covariates: usize,
) -> Result<ModelSpec> {
    params.ensure_scale(Scale::Constrained)?;
    let v = PresetValues::from_parameter_set(params)?;
    if v.beta0.len() != n_covariates || v.beta1.len() != n_covariates {
        return Err(Error::Config(format!(
            "preset expects {n_covariates} covariate coefficients per regime, got {} and {}",
            v.beta0.len(),
            v.beta1.len()
        )));
    }
    for (name, s) in [
        (params::SIGMA2_V, v.sigma2_v),
        (params::SIGMA2_0, v.sigma2_0),
        (params::SIGMA2_1, v.sigma2_1),
    ] {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("{name} must be a non-negative variance, got {s}")));
        }
    }
    if !(v.delta >= 0.0) || !v.delta.is_finite() {
        return Err(Error::Config(format!("delta must be non-negative, got {}", v.delta)));
    }
    for (name, g) in [(params::G0, v.g0), (params::G1, v.g1)] {
        if !(0.0..1.0).contains(&g) {
            return Err(Error::Config(format!("{name} must lie in [0,1), got {g}")));
        }
    }
    let scalar = |x: f64| DMatrix::from_element(1, 1, x);
    let vector = |x: f64| DVector::from_element(1, x);
    let model = ModelSpec {
        p: 1,
        q: 1,
        f: Schedule::Constant(scalar(1.0)),
        v: Schedule::Constant(scalar(v.sigma2_v)),
        regimes: [
            RegimeDynamics {
                gamma: Schedule::Constant(vector(0.0)),
                g: Schedule::Constant(scalar(v.g0)),
                w: Schedule::Constant(scalar(v.sigma2_0)),
            },
            RegimeDynamics {
                gamma: Schedule::Constant(vector(v.delta * (1.0 - v.g1))),
                g: Schedule::Constant(scalar(v.g1)),
                w: Schedule::Constant(scalar(v.sigma2_1)),
            },
        ],
        switch: SwitchSpec {
            alpha: [v.alpha0, v.alpha1],
            beta: [v.beta0, v.beta1],
            zeta: [0.0, v.zeta1],
            feedback,
        },
        init: InitialCondition {
            mean: [vector(0.0), vector(v.delta)],
            cov: [scalar(0.0), scalar(0.0)],
            prob0: 1.0,
        },
    };
    model.validate()?;
    Ok(model)
}

impl ModelTemplate for TemperaturePreset {
    fn build(&self, params: &ParameterSet) -> Result<ModelSpec> {
        temperature_preset(params, self.feedback, self.n_covariates)
    }

    fn feedback_params(&self) -> Vec<String> {
        vec![params::ZETA1.to_string()]
    }
}
