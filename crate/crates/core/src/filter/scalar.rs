//! Allocation-free likelihood kernel for scalar (`p = q = 1`), time-invariant
//! models. Computes the same collapsed log-likelihood as
//! [`run_filter`](super::run_filter); the M-step spends nearly all of its time
//! here.

use crate::data::SubjectSeries;
use crate::error::{Error, Result};
use super::dual::{Dual, Primitive, Real, N};
use crate::linalg::{log_sum_exp, LN_2PI, PROB_FLOOR};
use crate::model::{ModelSpec, SwitchSpec};
use crate::plugin::PluginFeedback;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarModel {
    pub f: f64,
    pub v: f64,
    pub gamma: [f64; 2],
    pub g: [f64; 2],
    pub w: [f64; 2],
    pub init_mean: [f64; 2],
    pub init_var: [f64; 2],
    pub prob0: f64,
    pub switch: SwitchSpec,
}

impl ScalarModel {
    pub fn from_model(model: &ModelSpec) -> Option<Self> {
        if model.p != 1 || model.q != 1 || !model.is_time_invariant() {
            return None;
        }
        let s = |m: &nalgebra::DMatrix<f64>| m[(0, 0)];
        let r = &model.regimes;
        Some(Self {
            f: s(model.f.constant()?),
            v: s(model.v.constant()?),
            gamma: [r[0].gamma.constant()?[0], r[1].gamma.constant()?[0]],
            g: [s(r[0].g.constant()?), s(r[1].g.constant()?)],
            w: [s(r[0].w.constant()?), s(r[1].w.constant()?)],
            init_mean: [model.init.mean[0][0], model.init.mean[1][0]],
            init_var: [s(&model.init.cov[0]), s(&model.init.cov[1])],
            prob0: model.init.prob0,
            switch: model.switch.clone(),
        })
    }
}

/// Kernel inputs in a numeric type `T`.
struct Inputs<T> {
    f: T,
    v: T,
    gamma: [T; 2],
    g: [T; 2],
    w: [T; 2],
    init_mean: [T; 2],
    init_var: [T; 2],
    prob0: T,
    base: [T; 2],
    zeta: [T; 2],
}

#[inline]
fn logistic_t<T: Real>(x: T) -> T {
    if x.value() >= 0.0 {
        ((-x).exp() + 1.0).recip()
    } else {
        let e = x.exp();
        e / (e + 1.0)
    }
}

#[inline]
fn safe_ln_t<T: Real>(p: T) -> T {
    if p.value() < PROB_FLOOR {
        T::cst(PROB_FLOOR.ln())
    } else {
        p.ln()
    }
}

fn prepare(series: &SubjectSeries, model: &ScalarModel, feedback: &PluginFeedback) -> Result<[f64; 2]> {
    if series.obs_dim() != 1 && !series.is_empty() {
        return Err(Error::Domain("scalar kernel needs a single observation channel".into()));
    }
    feedback.check_covers(series.len())?;
    model.switch.base_logits(&series.covariates)
}

pub fn log_likelihood(
    series: &SubjectSeries,
    model: &ScalarModel,
    feedback: &PluginFeedback,
) -> Result<f64> {
    let base = prepare(series, model, feedback)?;
    let m = model;
    let inputs = Inputs {
        f: m.f,
        v: m.v,
        gamma: m.gamma,
        g: m.g,
        w: m.w,
        init_mean: m.init_mean,
        init_var: m.init_var,
        prob0: m.prob0,
        base,
        zeta: m.switch.zeta,
    };
    kernel(series, &inputs, feedback)
}

/// Tangent component carried by each [`Primitive`], or `None` for inputs
/// held constant.
pub type Seeds = [Option<usize>; N];

/// Every primitive in its own component.
pub const ALL_PRIMITIVES: Seeds = {
    let mut s = [None; N];
    let mut i = 0;
    while i < N {
        s[i] = Some(i);
        i += 1;
    }
    s
};

/// Log-likelihood with its derivatives with respect to the seeded
/// [`Primitive`] inputs.
pub fn log_likelihood_dual<const M: usize>(
    series: &SubjectSeries,
    model: &ScalarModel,
    feedback: &PluginFeedback,
    seeds: &Seeds,
) -> Result<Dual<M>> {
    use Primitive as P;
    if seeds.iter().flatten().any(|&k| k >= M) {
        return Err(Error::Domain(format!("tangent slot outside {M} components")));
    }
    let base = prepare(series, model, feedback)?;
    let m = model;
    let d = |v: f64, p: P| match seeds[p as usize] {
        Some(k) => Dual::var(v, k),
        None => Dual::cst(v),
    };
    let inputs = Inputs {
        f: d(m.f, P::F),
        v: d(m.v, P::V),
        gamma: [d(m.gamma[0], P::Gamma0), d(m.gamma[1], P::Gamma1)],
        g: [d(m.g[0], P::G0), d(m.g[1], P::G1)],
        w: [d(m.w[0], P::W0), d(m.w[1], P::W1)],
        init_mean: [d(m.init_mean[0], P::Mean0), d(m.init_mean[1], P::Mean1)],
        init_var: [d(m.init_var[0], P::Var0), d(m.init_var[1], P::Var1)],
        prob0: d(m.prob0, P::Prob0),
        base: [d(base[0], P::Base0), d(base[1], P::Base1)],
        zeta: [d(m.switch.zeta[0], P::Zeta0), d(m.switch.zeta[1], P::Zeta1)],
    };
    kernel(series, &inputs, feedback)
}

fn kernel<T: Real>(series: &SubjectSeries, m: &Inputs<T>, feedback: &PluginFeedback) -> Result<T> {
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let mut mean = m.init_mean;
    let mut var = m.init_var;
    let mut prob = [m.prob0, one - m.prob0];
    let mut loglik = zero;
    let y = series.raw();

    for t in 1..=series.len() {
        let (z0, z1) = match feedback {
            PluginFeedback::Averages(s) => (m.zeta[0] * s[t - 1], m.zeta[1] * s[t - 1]),
            PluginFeedback::Fixed(z) => (T::cst(z[t - 1].0), T::cst(z[t - 1].1)),
        };
        let p01 = logistic_t(m.base[0] + z0);
        let p11 = logistic_t(m.base[1] + z1);
        if !p01.value().is_finite() || !p11.value().is_finite() {
            return Err(Error::numerical(t, "non-finite switching logit"));
        }
        let prior = [
            [prob[0] * (one - p01), prob[0] * p01],
            [prob[1] * (one - p11), prob[1] * p11],
        ];
        let mut pm = [[zero; 2]; 2];
        let mut pv = [[zero; 2]; 2];
        for o in 0..2 {
            for p in 0..2 {
                pm[o][p] = m.gamma[p] + m.g[p] * mean[o];
                pv[o][p] = m.g[p] * m.g[p] * var[o] + m.w[p];
            }
        }

        let obs = y[t - 1];
        let mut joint = prior;
        let mut post_m = pm;
        let mut post_v = pv;
        if !obs.is_nan() {
            let mut expo = [[zero; 2]; 2];
            let mut inv_sqrt = [[zero; 2]; 2];
            let mut emax = zero;
            let mut have_max = false;
            for o in 0..2 {
                for p in 0..2 {
                    let h = m.f * m.f * pv[o][p] + m.v;
                    if !(h.value() > 0.0) {
                        return Err(Error::Numerical {
                            t,
                            branch: Some((o, p)),
                            msg: "innovation variance is not positive".into(),
                        });
                    }
                    let h_inv = h.recip();
                    let eta = (m.f * pm[o][p]) * -1.0 + obs;
                    expo[o][p] = eta * eta * h_inv * -0.5;
                    inv_sqrt[o][p] = h_inv.sqrt();
                    if prior[o][p].value() > 0.0 && (!have_max || expo[o][p].value() > emax.value()) {
                        emax = expo[o][p];
                        have_max = true;
                    }
                    let gain = pv[o][p] * m.f * h_inv;
                    post_m[o][p] = pm[o][p] + gain * eta;
                    post_v[o][p] = pv[o][p] * m.v * h_inv;
                }
            }
            let mut total = zero;
            for o in 0..2 {
                for p in 0..2 {
                    joint[o][p] = prior[o][p] * (expo[o][p] - emax).exp() * inv_sqrt[o][p];
                    total += joint[o][p];
                }
            }
            if have_max && total.value() > 1e-250 && total.value().is_finite() {
                loglik += emax + total.ln() + (-0.5 * LN_2PI);
                for row in joint.iter_mut() {
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
            } else {
                // weights too small for the shifted linear form; redo in log space
                let mut lw = [zero; 4];
                for o in 0..2 {
                    for p in 0..2 {
                        lw[2 * o + p] = safe_ln_t(prior[o][p]) + expo[o][p] + inv_sqrt[o][p].ln();
                    }
                }
                let vals = lw.map(Real::value);
                if !log_sum_exp(&vals).is_finite() {
                    return Err(Error::numerical(
                        t,
                        "observation has zero likelihood under every regime pair",
                    ));
                }
                let top = lw
                    .iter()
                    .copied()
                    .fold(lw[0], |a, b| if b.value() > a.value() { b } else { a });
                let mut sum = zero;
                for v in &lw {
                    sum += (*v - top).exp();
                }
                let norm = top + sum.ln();
                loglik += norm + (-0.5 * LN_2PI);
                for o in 0..2 {
                    for p in 0..2 {
                        joint[o][p] = (lw[2 * o + p] - norm).exp();
                    }
                }
            }
        } else {
            let mut total = zero;
            for v in prior.iter().flatten() {
                total += *v;
            }
            for row in joint.iter_mut() {
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }

        for p in 0..2 {
            let r = joint[0][p] + joint[1][p];
            let (w0, w1) = if r.value() > 0.0 {
                (joint[0][p] / r, joint[1][p] / r)
            } else {
                (T::cst(0.5), T::cst(0.5))
            };
            let mm = w0 * post_m[0][p] + w1 * post_m[1][p];
            let d0 = post_m[0][p] - mm;
            let d1 = post_m[1][p] - mm;
            mean[p] = mm;
            var[p] = w0 * (post_v[0][p] + d0 * d0) + w1 * (post_v[1][p] + d1 * d1);
            prob[p] = r;
        }
    }
    if !loglik.value().is_finite() {
        return Err(Error::numerical(series.len(), "non-finite log-likelihood"));
    }
    Ok(loglik)
}
