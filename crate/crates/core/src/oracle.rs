//! Reference implementations for testing: an exact mixture filter that
//! enumerates every regime path, and a textbook single-regime Kalman filter
//! and fixed-interval smoother. Neither shares recursion code with
//! [`filter`](crate::filter) or [`smoother`](crate::smoother).

use nalgebra::{DMatrix, DVector};

use crate::data::SubjectSeries;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, LN_2PI};
use crate::model::{transition_probabilities, ModelSpec};
use crate::plugin::PluginFeedback;

pub const MAX_ENUMERATION_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    /// Posterior of each path `I_{1:n}`; bit `t - 1` of the index is `I_t`.
    pub path_probs: Vec<f64>,
    /// Exact `Pr(I_t = p | y_{1:t})`.
    pub filtered_prob: Vec<[f64; 2]>,
    /// Exact `Pr(I_t = p | y_{1:n})`.
    pub smoothed_prob: Vec<[f64; 2]>,
    pub loglik: f64,
}

struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// One Kalman update of `prior` with the observed part of `y`; returns the
/// posterior and `ln p(y_obs)`.
fn kalman_update(
    prior: &Gaussian,
    y: &[f64],
    f: &DMatrix<f64>,
    v: &DMatrix<f64>,
    t: usize,
) -> Result<(Gaussian, f64)> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| !y[i].is_nan()).collect();
    if idx.is_empty() {
        return Ok((
            Gaussian {
                mean: prior.mean.clone(),
                cov: prior.cov.clone(),
            },
            0.0,
        ));
    }
    let k = idx.len();
    let fo = DMatrix::from_fn(k, f.ncols(), |i, j| f[(idx[i], j)]);
    let vo = DMatrix::from_fn(k, k, |i, j| v[(idx[i], idx[j])]);
    let yo = DVector::from_fn(k, |i, _| y[idx[i]]);
    let resid = yo - &fo * &prior.mean;
    let s = &fo * &prior.cov * fo.transpose() + vo;
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical(t, "singular innovation covariance"))?;
    let det = s.determinant();
    if !(det > 0.0) {
        return Err(Error::numerical(t, "innovation covariance is not positive definite"));
    }
    let gain = &prior.cov * fo.transpose() * &s_inv;
    let mean = &prior.mean + &gain * &resid;
    let ident = DMatrix::<f64>::identity(prior.cov.nrows(), prior.cov.nrows());
    let cov = (&ident - &gain * &fo) * &prior.cov;
    let cov = 0.5 * (&cov + cov.transpose());
    let quad = (resid.transpose() * &s_inv * &resid)[(0, 0)];
    let ll = -0.5 * (k as f64 * LN_2PI + det.ln() + quad);
    Ok((Gaussian { mean, cov }, ll))
}

fn propagate(post: &Gaussian, model: &ModelSpec, regime: usize, t: usize) -> Gaussian {
    let r = &model.regimes[regime];
    let g = r.g.at(t);
    Gaussian {
        mean: r.gamma.at(t) + g * &post.mean,
        cov: g * &post.cov * g.transpose() + r.w.at(t),
    }
}

struct Enumeration<'a> {
    series: &'a SubjectSeries,
    model: &'a ModelSpec,
    log_trans: Vec<[[f64; 2]; 2]>,
    // per time and regime: log weights of prefixes ending there
    prefix: Vec<[Vec<f64>; 2]>,
    leaves: Vec<Vec<f64>>,
}

impl Enumeration<'_> {
    fn visit(&mut self, t: usize, prev: usize, path: usize, logw: f64, post: &Gaussian) -> Result<()> {
        let n = self.series.len();
        if t > n {
            self.leaves[path].push(logw);
            return Ok(());
        }
        for cur in 0..2 {
            let lt = self.log_trans[t - 1][prev][cur];
            if lt == f64::NEG_INFINITY {
                continue;
            }
            let prior = propagate(post, self.model, cur, t);
            let (next, ll) = kalman_update(
                &prior,
                self.series.observation(t),
                self.model.f.at(t),
                self.model.v.at(t),
                t,
            )?;
            let w = logw + lt + ll;
            self.prefix[t - 1][cur].push(w);
            self.visit(t + 1, cur, path | (cur << (t - 1)), w, &next)?;
        }
        Ok(())
    }
}

/// Exact posterior over regime paths at fixed plug-in feedback.
pub fn exact_filter(
    series: &SubjectSeries,
    model: &ModelSpec,
    feedback: &PluginFeedback,
) -> Result<ExactPosterior> {
    let n = series.len();
    if n > MAX_ENUMERATION_LEN {
        return Err(Error::Capacity(format!(
            "exact enumeration supports at most {MAX_ENUMERATION_LEN} steps, got {n}"
        )));
    }
    model.validate()?;
    feedback.check_covers(n)?;
    let base = model.switch.base_logits(&series.covariates)?;
    let mut log_trans = Vec::with_capacity(n);
    for t in 1..=n {
        let (z0, z1) = feedback.z(t, &model.switch);
        let tp = transition_probabilities(&model.switch, &series.covariates, z0, z1)?;
        debug_assert!((tp.p01 - crate::linalg::logistic(base[0] + z0)).abs() < 1e-15);
        let mut lt = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let p = tp.get(a, b);
                lt[a][b] = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
            }
        }
        log_trans.push(lt);
    }

    let mut e = Enumeration {
        series,
        model,
        log_trans,
        prefix: (0..n).map(|_| [Vec::new(), Vec::new()]).collect(),
        leaves: vec![Vec::new(); 1 << n],
    };
    let p0 = model.init.prob0;
    for (i0, w0) in [(0usize, p0), (1, 1.0 - p0)] {
        if w0 <= 0.0 {
            continue;
        }
        let start = Gaussian {
            mean: model.init.mean[i0].clone(),
            cov: model.init.cov[i0].clone(),
        };
        e.visit(1, i0, 0, w0.ln(), &start)?;
    }

    let leaf_logs: Vec<f64> = e
        .leaves
        .iter()
        .map(|ws| if ws.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(ws) })
        .collect();
    let loglik = log_sum_exp(&leaf_logs);
    if !loglik.is_finite() {
        return Err(Error::numerical(n, "every regime path has zero likelihood"));
    }
    let path_probs: Vec<f64> = leaf_logs.iter().map(|l| (l - loglik).exp()).collect();

    let filtered_prob = e
        .prefix
        .iter()
        .map(|[a, b]| {
            let la = if a.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(a) };
            let lb = if b.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(b) };
            let norm = log_sum_exp(&[la, lb]);
            [(la - norm).exp(), (lb - norm).exp()]
        })
        .collect();
    let smoothed_prob = exact_smoother_probs(&path_probs, n);
    Ok(ExactPosterior {
        path_probs,
        filtered_prob,
        smoothed_prob,
        loglik,
    })
}

/// `Pr(I_t = p | y_{1:n})` by summing path posteriors.
pub fn exact_smoother_probs(path_probs: &[f64], n: usize) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; n];
    for (path, &w) in path_probs.iter().enumerate() {
        for (t, slot) in out.iter_mut().enumerate() {
            slot[(path >> t) & 1] += w;
        }
    }
    out
}

/// Single-regime linear-Gaussian model for [`standard_kalman_reference`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub f: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub g: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

impl LinearGaussian {
    /// Regime `k` of a time-invariant model, started from its regime-`k`
    /// initial condition.
    pub fn from_regime(model: &ModelSpec, k: usize) -> Option<Self> {
        let r = &model.regimes[k];
        Some(Self {
            f: model.f.constant()?.clone(),
            v: model.v.constant()?.clone(),
            gamma: r.gamma.constant()?.clone(),
            g: r.g.constant()?.clone(),
            w: r.w.constant()?.clone(),
            mean0: model.init.mean[k].clone(),
            cov0: model.init.cov[k].clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanReference {
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    pub smoothed_mean: Vec<DVector<f64>>,
    pub smoothed_cov: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Textbook Kalman filter and Rauch-Tung-Striebel smoother.
pub fn standard_kalman_reference(series: &SubjectSeries, model: &LinearGaussian) -> Result<KalmanReference> {
    let n = series.len();
    let mut filtered: Vec<Gaussian> = Vec::with_capacity(n);
    let mut predicted: Vec<Gaussian> = Vec::with_capacity(n);
    let mut loglik = 0.0;
    let mut post = Gaussian {
        mean: model.mean0.clone(),
        cov: model.cov0.clone(),
    };
    for t in 1..=n {
        let prior = Gaussian {
            mean: &model.gamma + &model.g * &post.mean,
            cov: &model.g * &post.cov * model.g.transpose() + &model.w,
        };
        let (next, ll) = kalman_update(&prior, series.observation(t), &model.f, &model.v, t)?;
        loglik += ll;
        predicted.push(prior);
        filtered.push(Gaussian {
            mean: next.mean.clone(),
            cov: next.cov.clone(),
        });
        post = next;
    }

    let mut smoothed_mean: Vec<DVector<f64>> = filtered.iter().map(|g| g.mean.clone()).collect();
    let mut smoothed_cov: Vec<DMatrix<f64>> = filtered.iter().map(|g| g.cov.clone()).collect();
    for t in (0..n.saturating_sub(1)).rev() {
        let p_inv = predicted[t + 1]
            .cov
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical(t + 1, "singular predicted covariance"))?;
        let c = &filtered[t].cov * model.g.transpose() * p_inv;
        smoothed_mean[t] = &filtered[t].mean + &c * (&smoothed_mean[t + 1] - &predicted[t + 1].mean);
        smoothed_cov[t] =
            &filtered[t].cov + &c * (&smoothed_cov[t + 1] - &predicted[t + 1].cov) * c.transpose();
    }
    Ok(KalmanReference {
        filtered_mean: filtered.iter().map(|g| g.mean.clone()).collect(),
        filtered_cov: filtered.into_iter().map(|g| g.cov).collect(),
        smoothed_mean,
        smoothed_cov,
        loglik,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::run_filter;
    use crate::model::{FeedbackSpec, InitialCondition, RegimeDynamics, Schedule, SwitchSpec};

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar(g: f64, w: f64, v: f64) -> LinearGaussian {
        LinearGaussian {
            f: m1(1.0),
            v: m1(v),
            gamma: v1(0.0),
            g: m1(g),
            w: m1(w),
            mean0: v1(0.0),
            cov0: m1(1.0),
        }
    }

    fn switching(alpha: [f64; 2], prob0: f64) -> ModelSpec {
        let dyn_ = |gamma: f64, g: f64, w: f64| RegimeDynamics {
            gamma: Schedule::Constant(v1(gamma)),
            g: Schedule::Constant(m1(g)),
            w: Schedule::Constant(m1(w)),
        };
        ModelSpec {
            p: 1,
            q: 1,
            f: Schedule::Constant(m1(1.0)),
            v: Schedule::Constant(m1(0.3)),
            regimes: [dyn_(0.0, 0.6, 0.05), dyn_(2.0, 0.4, 0.2)],
            switch: SwitchSpec {
                alpha,
                beta: [vec![], vec![]],
                zeta: [0.0, 0.0],
                feedback: FeedbackSpec::default(),
            },
            init: InitialCondition {
                mean: [v1(0.0), v1(2.0)],
                cov: [m1(0.5), m1(0.5)],
                prob0,
            },
        }
    }

    fn series(y: &[Option<f64>]) -> SubjectSeries {
        SubjectSeries::scalar("s", y, vec![]).unwrap()
    }

    #[test]
    fn hand_kalman_update() {
        let r = standard_kalman_reference(&series(&[Some(2.0)]), &scalar(1.0, 0.0, 1.0)).unwrap();
        assert!((r.filtered_mean[0][0] - 1.0).abs() < 1e-15);
        assert!((r.filtered_cov[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(r.smoothed_mean, r.filtered_mean);
    }

    #[test]
    fn empty_series() {
        let r = standard_kalman_reference(&series(&[]), &scalar(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(r.loglik, 0.0);
        let e = exact_filter(&series(&[]), &switching([0.0, 0.0], 0.5), &PluginFeedback::zero(0)).unwrap();
        assert_eq!(e.loglik, 0.0);
        assert_eq!(e.path_probs, vec![1.0]);
    }

    #[test]
    fn capacity_limit() {
        let y = vec![Some(0.0); 17];
        let err = exact_filter(&series(&y), &switching([0.0, 0.0], 0.5), &PluginFeedback::zero(17));
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn unreachable_regime_reduces_to_kalman() {
        let model = switching([-800.0, 0.0], 1.0);
        let y = [Some(0.3), None, Some(-0.2), Some(0.9)];
        let e = exact_filter(&series(&y), &model, &PluginFeedback::zero(4)).unwrap();
        let k = standard_kalman_reference(&series(&y), &LinearGaussian::from_regime(&model, 0).unwrap()).unwrap();
        assert!((e.loglik - k.loglik).abs() < 1e-12);
        assert!((e.path_probs[0] - 1.0).abs() < 1e-12);
        for s in &e.smoothed_prob {
            assert!((s[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_matches_collapsed_filter() {
        let model = switching([-1.0, 0.5], 0.7);
        let y = [Some(1.3), Some(0.2), Some(2.5), Some(2.2), None, Some(0.1)];
        let e = exact_filter(&series(&y), &model, &PluginFeedback::zero(6)).unwrap();
        let f = run_filter(&series(&y), &model, &PluginFeedback::zero(6)).unwrap();
        assert!((e.filtered_prob[0][1] - f.steps[0].regime_prob[1]).abs() < 1e-12);
        assert!((e.filtered_prob[0][0] - f.steps[0].regime_prob[0]).abs() < 1e-12);
        assert!((e.path_probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let n1 = exact_filter(&series(&y[..1]), &model, &PluginFeedback::zero(1)).unwrap();
        assert!((n1.loglik - f.steps[0].loglik_inc).abs() < 1e-12);
        for (ef, es) in e.filtered_prob.iter().zip(&e.smoothed_prob) {
            assert!((ef[0] + ef[1] - 1.0).abs() < 1e-12);
            assert!((es[0] + es[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn path_probabilities_independent_of_enumeration_order() {
        let model = switching([-0.5, 0.5], 0.6);
        let y = [Some(0.4), Some(2.1), Some(1.7), None, Some(0.2)];
        let e = exact_filter(&series(&y), &model, &PluginFeedback::zero(5)).unwrap();
        let n = y.len();
        // brute force each path separately, visiting paths in reverse
        let mut logs = vec![f64::NEG_INFINITY; 1 << n];
        for path in (0..1usize << n).rev() {
            let mut terms = Vec::new();
            for (i0, w0) in [(0usize, 0.6f64), (1, 0.4)] {
                let mut g = Gaussian {
                    mean: model.init.mean[i0].clone(),
                    cov: model.init.cov[i0].clone(),
                };
                let mut lw = w0.ln();
                let mut prev = i0;
                for t in 1..=n {
                    let cur = (path >> (t - 1)) & 1;
                    let tp = transition_probabilities(&model.switch, &[], 0.0, 0.0).unwrap();
                    lw += tp.get(prev, cur).ln();
                    let prior = propagate(&g, &model, cur, t);
                    let (post, ll) = kalman_update(&prior, &[y[t - 1].unwrap_or(f64::NAN)], &m1(1.0), &m1(0.3), t).unwrap();
                    lw += ll;
                    g = post;
                    prev = cur;
                }
                terms.push(lw);
            }
            logs[path] = log_sum_exp(&terms);
        }
        let total = log_sum_exp(&logs);
        assert!((total - e.loglik).abs() < 1e-12);
        for (l, p) in logs.iter().zip(&e.path_probs) {
            assert!(((l - total).exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_regimes_give_half() {
        let dyn_ = |gamma: f64| RegimeDynamics {
            gamma: Schedule::Constant(v1(gamma)),
            g: Schedule::Constant(m1(0.0)),
            w: Schedule::Constant(m1(0.2)),
        };
        let model = ModelSpec {
            p: 1,
            q: 1,
            f: Schedule::Constant(m1(1.0)),
            v: Schedule::Constant(m1(0.3)),
            regimes: [dyn_(-1.0), dyn_(1.0)],
            switch: SwitchSpec {
                alpha: [0.0, 0.0],
                beta: [vec![], vec![]],
                zeta: [0.0, 0.0],
                feedback: FeedbackSpec::default(),
            },
            init: InitialCondition {
                mean: [v1(0.0), v1(0.0)],
                cov: [m1(1.0), m1(1.0)],
                prob0: 0.5,
            },
        };
        let y = [Some(0.0), None, Some(0.0), Some(0.0), None];
        let e = exact_filter(&series(&y), &model, &PluginFeedback::zero(5)).unwrap();
        assert!((e.smoothed_prob[2][0] - 0.5).abs() < 1e-12);
    }
}
