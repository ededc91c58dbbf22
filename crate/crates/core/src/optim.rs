//! Box-constrained limited-memory quasi-Newton minimizer. Gradients come
//! from a caller-supplied function when available, central differences
//! otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Exact derivatives where the model supports them, differences elsewhere.
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Budget of objective evaluations; an analytic gradient counts as one.
    pub max_evals: usize,
    pub gradient: GradientMode,
    /// Central-difference step on the unconstrained scale.
    pub fd_step: f64,
    /// Stop when the projected gradient's max-norm falls below this.
    pub tolerance: f64,
    /// Stop when an iteration improves the objective by less than this
    /// fraction of its magnitude.
    pub rel_tolerance: f64,
    pub memory: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_evals: 3000,
            gradient: GradientMode::Analytic,
            fd_step: 1e-5,
            tolerance: 1e-4,
            rel_tolerance: 1e-10,
            memory: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0) || !self.fd_step.is_finite() {
            return Err(Error::Config("finite-difference step must be positive".into()));
        }
        if self.max_evals == 0 || self.memory == 0 {
            return Err(Error::Config("optimizer needs max_evals and memory of at least 1".into()));
        }
        if !(self.tolerance >= 0.0) || !(self.rel_tolerance >= 0.0) {
            return Err(Error::Config("optimizer tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

struct Counted<'a, F> {
    f: &'a F,
    evals: usize,
}

impl<F: Fn(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(*lo, *hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type GradFn<'a> = &'a dyn Fn(&[f64]) -> Option<Vec<f64>>;

#[allow(clippy::too_many_arguments)]
fn gradient<F: Fn(&[f64]) -> f64>(
    obj: &mut Counted<'_, F>,
    analytic: Option<GradFn<'_>>,
    x: &[f64],
    fx: f64,
    lower: &[f64],
    upper: &[f64],
    h: f64,
) -> Vec<f64> {
    if let Some(grad) = analytic {
        obj.evals += 1;
        if let Some(g) = grad(x) {
            if g.len() == x.len() && g.iter().all(|v| v.is_finite()) {
                return g;
            }
        }
    }
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let up_ok = x[i] + h <= upper[i];
        let down_ok = x[i] - h >= lower[i];
        let fp = if up_ok {
            probe[i] = x[i] + h;
            obj.eval(&probe)
        } else {
            f64::INFINITY
        };
        let fm = if down_ok {
            probe[i] = x[i] - h;
            obj.eval(&probe)
        } else {
            f64::INFINITY
        };
        probe[i] = x[i];
        g[i] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => 0.0,
        };
    }
    g
}

/// Projected-gradient max-norm: `‖P(x − g) − x‖_∞`.
fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((xi, gi), (lo, hi))| ((xi - gi).clamp(*lo, *hi) - xi).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
/// Non-finite objective values are treated as `+∞`. The returned point never
/// has a larger objective than the (projected) start.
pub fn minimize<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &OptimizerConfig,
) -> Result<OptimResult> {
    minimize_with_gradient(f, None, x0, lower, upper, config)
}

/// As [`minimize`], taking gradients from `grad` where it returns a finite
/// vector and falling back to central differences elsewhere.
pub fn minimize_with_gradient<F: Fn(&[f64]) -> f64>(
    f: &F,
    grad: Option<GradFn<'_>>,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &OptimizerConfig,
) -> Result<OptimResult> {
    config.validate()?;
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(Error::Config("bounds do not match the parameter dimension".into()));
    }
    if lower.iter().zip(upper).any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::Config("lower bound exceeds upper bound".into()));
    }
    let mut obj = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut fx = obj.eval(&x);
    if !fx.is_finite() {
        return Err(Error::Fit("objective is not finite at the starting point".into()));
    }
    if n == 0 {
        return Ok(OptimResult { x, value: fx, evals: obj.evals, iterations: 0, converged: true });
    }

    let h = config.fd_step;
    let mut g = gradient(&mut obj, grad, &x, fx, lower, upper, h);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut small_steps = 0;

    while obj.evals < config.max_evals {
        if projected_gradient_norm(&x, &g, lower, upper) <= config.tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        // variables held at a bound by the gradient stay fixed this iteration
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let masked = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&free).map(|(a, f)| if *f { *a } else { 0.0 }).collect()
        };

        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !s_hist.is_empty();
            let mut d = if use_memory {
                two_loop(&masked(&g), &s_hist, &y_hist)
            } else {
                g.iter().map(|v| -v).collect()
            };
            d = masked(&d);
            if !use_memory {
                let norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if norm > 1.0 {
                    d.iter_mut().for_each(|v| *v /= norm);
                }
            }
            if dot(&d, &g) >= 0.0 {
                continue;
            }
            if let Some(step) = line_search(&mut obj, &x, fx, &g, &d, lower, upper, config.max_evals) {
                accepted = Some(step);
                break;
            }
        }
        let Some((x_new, f_new)) = accepted else {
            // no descent along either direction within evaluation budget
            converged = projected_gradient_norm(&x, &g, lower, upper) <= config.tolerance.max(1e-3);
            break;
        };

        let g_new = gradient(&mut obj, grad, &x_new, f_new, lower, upper, h);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > config.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let improvement = fx - f_new;
        x = x_new;
        g = g_new;
        fx = f_new;
        if improvement <= config.rel_tolerance * fx.abs().max(1.0) {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }

    Ok(OptimResult {
        x,
        value: fx,
        evals: obj.evals,
        iterations,
        converged,
    })
}

fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let k = s_hist.len();
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; k];
    for i in (0..k).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alpha[i] = rho * dot(&s_hist[i], &q);
        q.iter_mut().zip(&y_hist[i]).for_each(|(a, y)| *a -= alpha[i] * y);
    }
    let last = k - 1;
    let scale = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
    q.iter_mut().for_each(|v| *v *= scale);
    for i in 0..k {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let beta = rho * dot(&y_hist[i], &q);
        q.iter_mut().zip(&s_hist[i]).for_each(|(a, s)| *a += (alpha[i] - beta) * s);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[allow(clippy::too_many_arguments)]
fn line_search<F: Fn(&[f64]) -> f64>(
    obj: &mut Counted<'_, F>,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    lower: &[f64],
    upper: &[f64],
    max_evals: usize,
) -> Option<(Vec<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..40 {
        if obj.evals >= max_evals {
            return None;
        }
        let mut trial: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
        project(&mut trial, lower, upper);
        let moved: Vec<f64> = trial.iter().zip(x).map(|(a, b)| a - b).collect();
        if moved.iter().all(|v| *v == 0.0) {
            return None;
        }
        let ft = obj.eval(&trial);
        if ft.is_finite() && ft <= fx + 1e-4 * dot(g, &moved) && ft < fx {
            return Some((trial, ft));
        }
        step *= if ft.is_finite() { 0.5 } else { 0.1 };
    }
    None
}
