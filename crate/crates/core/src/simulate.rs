//! Synthetic data from the generative model, including the fever/no-fever
//! simulation designs.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SubjectSeries;
use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::model::{transition_probabilities, FeedbackSpec, ModelSpec, PresetValues, TemperaturePreset};
use crate::ModelTemplate;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSubject {
    pub series: SubjectSeries,
    /// `θ_t` for `t = 1..n`.
    pub true_states: Vec<DVector<f64>>,
    /// `I_t` for `t = 1..n`.
    pub true_regimes: Vec<u8>,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    PositiveFeedback,
    NegativeFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyDesign {
    pub m: usize,
    pub n: usize,
    pub setting: Setting,
    pub delta: f64,
    /// Probability that a time point is fully missing.
    pub missing_rate: f64,
    pub seed: u64,
    pub feedback: FeedbackSpec,
}

impl Default for StudyDesign {
    fn default() -> Self {
        Self {
            m: 100,
            n: 101,
            setting: Setting::PositiveFeedback,
            delta: 10.0,
            missing_rate: 0.0,
            seed: 1,
            feedback: FeedbackSpec::default(),
        }
    }
}

impl StudyDesign {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("study design needs at least one subject".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("study design needs series length of at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::Config("delta must be non-negative".into()));
        }
        Ok(())
    }

    /// True parameter values of the design.
    pub fn true_values(&self) -> PresetValues {
        let (alpha1, zeta1) = match self.setting {
            Setting::PositiveFeedback => (0.2, 0.3),
            Setting::NegativeFeedback => (4.0, -0.3),
        };
        PresetValues {
            sigma2_v: 0.1,
            sigma2_0: 0.03,
            sigma2_1: 0.3,
            delta: self.delta,
            g0: 0.5,
            g1: 0.5,
            alpha0: -3.0,
            beta0: vec![0.15, -0.2],
            alpha1,
            beta1: vec![-0.8, 0.5],
            zeta1,
        }
    }

    pub fn template(&self) -> TemperaturePreset {
        TemperaturePreset::new(self.feedback, 2)
    }
}

fn standard_normal_vector<R: Rng>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// Draws one series, feeding back the true simulated states.
pub fn simulate_with_rng<R: Rng>(
    model: &ModelSpec,
    n: usize,
    covariates: Vec<f64>,
    id: &str,
    rng: &mut R,
) -> Result<(SubjectSeries, Vec<DVector<f64>>, Vec<u8>)> {
    model.validate()?;
    model.validate_length(n)?;
    let spec = &model.switch.feedback;
    let mut regime = usize::from(rng.random::<f64>() >= model.init.prob0);
    let init_sqrt = psd_sqrt(&model.init.cov[regime]);
    let mut theta = &model.init.mean[regime] + init_sqrt * standard_normal_vector(rng, model.q);

    let mut history: Vec<f64> = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut regimes = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n * model.p);
    for t in 1..=n {
        let s = spec.weighted_average(&history, t)?;
        let tp = transition_probabilities(
            &model.switch,
            &covariates,
            model.switch.zeta[0] * s,
            model.switch.zeta[1] * s,
        )?;
        let to_one = if regime == 0 { tp.p01 } else { tp.p11 };
        regime = usize::from(rng.random::<f64>() < to_one);
        let dynamics = &model.regimes[regime];
        let w_sqrt = psd_sqrt(dynamics.w.at(t));
        theta = dynamics.gamma.at(t)
            + dynamics.g.at(t) * &theta
            + w_sqrt * standard_normal_vector(rng, model.q);
        let v_sqrt = psd_sqrt(model.v.at(t));
        let obs = model.f.at(t) * &theta + v_sqrt * standard_normal_vector(rng, model.p);
        y.extend(obs.iter());
        history.push(theta[spec.component]);
        states.push(theta.clone());
        regimes.push(regime as u8);
    }
    let series = SubjectSeries::from_raw(id, model.p, y, covariates)?;
    Ok((series, states, regimes))
}

/// Draws one series from a seeded generator.
pub fn simulate_subject(
    model: &ModelSpec,
    n: usize,
    covariates: Vec<f64>,
    id: &str,
    seed: u64,
) -> Result<SimulatedSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (series, true_states, true_regimes) = simulate_with_rng(model, n, covariates, id, &mut rng)?;
    Ok(SimulatedSubject {
        series,
        true_states,
        true_regimes,
        seed,
        stream: 0,
    })
}

/// Marks each time of `series` fully missing with probability `rate`.
pub fn inject_missing<R: Rng>(series: &mut SubjectSeries, rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    for t in 1..=series.len() {
        if rng.random::<f64>() < rate {
            series.set_missing(t);
        }
    }
}

/// Generator for subject `index` of a study with base seed `seed`.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates a full study design. Each subject has its own generator
/// stream, so the result does not depend on scheduling.
pub fn simulate_study(design: &StudyDesign) -> Result<Vec<SimulatedSubject>> {
    design.validate()?;
    let truth = design.true_values().to_parameter_set();
    let model = design.template().build(&truth)?;
    simulate_panel(&model, design)
}

fn draw_covariates<R: Rng>(rng: &mut R) -> Vec<f64> {
    let male = Bernoulli::new(0.605).expect("valid probability");
    let x1 = if male.sample(rng) { 1.0 } else { 0.0 };
    let x2: f64 = StandardNormal.sample(rng);
    vec![x1, x2]
}

/// Simulates `design.m` subjects from `model` (which must take the two
/// covariates: a Bernoulli(0.605) indicator and a standard normal).
pub fn simulate_panel(model: &ModelSpec, design: &StudyDesign) -> Result<Vec<SimulatedSubject>> {
    design.validate()?;
    (0..design.m)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(design.seed, i as u64);
            let cov = draw_covariates(&mut rng);
            let id = format!("s{:04}", i + 1);
            let (mut series, true_states, true_regimes) = simulate_with_rng(model, design.n, cov, &id, &mut rng)?;
            inject_missing(&mut series, design.missing_rate, &mut rng);
            Ok(SimulatedSubject {
                series,
                true_states,
                true_regimes,
                seed: design.seed,
                stream: i as u64,
            })
        })
        .collect()
}

/// Two series per patient (arms `a` and `b`) sharing the patient's
/// covariates and resampling group. `design.m` counts patients.
pub fn simulate_two_arm(model: &ModelSpec, design: &StudyDesign) -> Result<Vec<SimulatedSubject>> {
    design.validate()?;
    let per_patient: Vec<Vec<SimulatedSubject>> = (0..design.m)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(design.seed, i as u64);
            let cov = draw_covariates(&mut rng);
            let patient = format!("p{:03}", i + 1);
            ["a", "b"]
                .iter()
                .map(|arm| {
                    let id = format!("{patient}{arm}");
                    let (series, true_states, true_regimes) =
                        simulate_with_rng(model, design.n, cov.clone(), &id, &mut rng)?;
                    let mut series = series.with_group(patient.clone());
                    inject_missing(&mut series, design.missing_rate, &mut rng);
                    Ok(SimulatedSubject {
                        series,
                        true_states,
                        true_regimes,
                        seed: design.seed,
                        stream: i as u64,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_patient.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialCondition, RegimeDynamics, Schedule, SwitchSpec};
    use nalgebra::DMatrix;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar(g: [f64; 2], w: [f64; 2], v: f64, alpha: [f64; 2], zeta1: f64, mean0: f64) -> ModelSpec {
        let dynamics = |k: usize, gamma: f64| RegimeDynamics {
            gamma: Schedule::Constant(v1(gamma)),
            g: Schedule::Constant(m1(g[k])),
            w: Schedule::Constant(m1(w[k])),
        };
        ModelSpec {
            p: 1,
            q: 1,
            f: Schedule::Constant(m1(1.0)),
            v: Schedule::Constant(m1(v)),
            regimes: [dynamics(0, 0.0), dynamics(1, 2.0)],
            switch: SwitchSpec {
                alpha,
                beta: [vec![], vec![]],
                zeta: [0.0, zeta1],
                feedback: FeedbackSpec::default(),
            },
            init: InitialCondition {
                mean: [v1(mean0), v1(mean0)],
                cov: [m1(0.0), m1(0.0)],
                prob0: 1.0,
            },
        }
    }

    #[test]
    fn noiseless_single_regime() {
        let model = scalar([0.8, 0.8], [0.0, 0.0], 0.0, [-800.0, 0.0], 0.0, 2.0);
        let s = simulate_subject(&model, 10, vec![], "a", 3).unwrap();
        for t in 1..=10 {
            let expected = 0.8f64.powi(t as i32) * 2.0;
            assert!((s.series.observation(t)[0] - expected).abs() < 1e-12);
        }
        assert!(s.true_regimes.iter().all(|&r| r == 0));
        assert_eq!(s.true_states.len(), 10);
    }

    #[test]
    fn deterministic_given_seed() {
        let design = StudyDesign { m: 5, n: 20, missing_rate: 0.2, ..Default::default() };
        let a = simulate_study(&design).unwrap();
        let b = simulate_study(&design).unwrap();
        let same = a.iter().zip(&b).all(|(x, y)| {
            x.series.raw().iter().zip(y.series.raw()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        assert!(same);
        let other = simulate_study(&StudyDesign { seed: 2, ..design.clone() }).unwrap();
        assert_ne!(a[0].series.raw()[5].to_bits(), other[0].series.raw()[5].to_bits());
        // subject i does not depend on how many subjects come before it
        let single = simulate_study(&StudyDesign { m: 3, ..design }).unwrap();
        assert_eq!(a[2].true_regimes, single[2].true_regimes);
    }

    #[test]
    fn study_design_values() {
        let d = StudyDesign::default();
        let v = d.true_values();
        assert_eq!((v.alpha1, v.zeta1, v.delta), (0.2, 0.3, 10.0));
        let v = StudyDesign { setting: Setting::NegativeFeedback, delta: 5.0, ..d }.true_values();
        assert_eq!((v.alpha1, v.zeta1, v.delta), (4.0, -0.3, 5.0));
        assert!(simulate_study(&StudyDesign { m: 0, ..Default::default() }).is_err());
        assert!(simulate_study(&StudyDesign { missing_rate: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn missing_injection_keeps_other_draws() {
        let base = StudyDesign { m: 2, n: 50, ..Default::default() };
        let full = simulate_study(&base).unwrap();
        let holes = simulate_study(&StudyDesign { missing_rate: 0.3, ..base }).unwrap();
        let s = &holes[0].series;
        let missing = (1..=50).filter(|&t| s.observation(t)[0].is_nan()).count();
        assert!(missing > 0 && missing < 50);
        for t in 1..=50 {
            let y = s.observation(t)[0];
            if !y.is_nan() {
                assert_eq!(y, full[0].series.observation(t)[0]);
            }
        }
    }

    #[test]
    fn transition_frequencies_match_kernel() {
        // no feedback: empirical switching rates against the logistic kernel
        let model = scalar([0.5, 0.5], [0.1, 0.1], 0.1, [-1.0, 0.7], 0.0, 0.0);
        let s = simulate_subject(&model, 100_000, vec![], "a", 11).unwrap();
        let mut counts = [[0usize; 2]; 2];
        let mut prev = 0usize;
        for &r in &s.true_regimes {
            counts[prev][r as usize] += 1;
            prev = r as usize;
        }
        for (from, logit) in [(0usize, -1.0f64), (1, 0.7)] {
            let p = crate::linalg::logistic(logit);
            let total = (counts[from][0] + counts[from][1]) as f64;
            let freq = counts[from][1] as f64 / total;
            let se = (p * (1.0 - p) / total).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "from {from}: {freq} vs {p}");
        }
    }

    #[test]
    fn observation_noise_variance() {
        let model = scalar([0.5, 0.5], [0.1, 0.3], 0.1, [-1.0, 0.7], 0.0, 0.0);
        let s = simulate_subject(&model, 100_000, vec![], "a", 5).unwrap();
        let resid: Vec<f64> = (1..=100_000)
            .map(|t| s.series.observation(t)[0] - s.true_states[t - 1][0])
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!((var / 0.1 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn positive_feedback_raises_persistence() {
        let design = StudyDesign { m: 400, n: 101, ..Default::default() };
        let truth = design.true_values();
        let subjects = simulate_study(&design).unwrap();
        // bin staying probabilities by the feedback average of the true states
        let spec = design.feedback;
        let edges = [f64::NEG_INFINITY, 4.0, 8.0, f64::INFINITY];
        let mut stay = [0usize; 3];
        let mut total = [0usize; 3];
        for s in &subjects {
            let path: Vec<f64> = s.true_states.iter().map(|x| x[0]).collect();
            for t in 2..s.true_regimes.len() {
                if s.true_regimes[t - 1] != 1 {
                    continue;
                }
                let avg = spec.weighted_average(&path, t + 1).unwrap();
                let bin = edges.windows(2).position(|w| avg >= w[0] && avg < w[1]).unwrap();
                total[bin] += 1;
                stay[bin] += usize::from(s.true_regimes[t] == 1);
            }
        }
        let rates: Vec<f64> = (0..3).map(|b| stay[b] as f64 / total[b].max(1) as f64).collect();
        assert!(total.iter().all(|&c| c > 50), "{total:?}");
        assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
        assert!(truth.zeta1 > 0.0);
    }
}
