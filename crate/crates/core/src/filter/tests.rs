use super::*;
use crate::model::{FeedbackSpec, InitialCondition, RegimeDynamics, Schedule, SwitchSpec};
use proptest::prelude::*;

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[derive(Debug, Clone)]
struct Scalar {
    f: f64,
    v: f64,
    gamma: [f64; 2],
    g: [f64; 2],
    w: [f64; 2],
    mean0: [f64; 2],
    var0: [f64; 2],
    prob0: f64,
    alpha: [f64; 2],
    zeta: [f64; 2],
}

impl Default for Scalar {
    fn default() -> Self {
        Self {
            f: 1.0,
            v: 0.5,
            gamma: [0.0, 2.0],
            g: [0.8, 0.5],
            w: [0.1, 0.3],
            mean0: [0.0, 1.0],
            var0: [1.0, 0.5],
            prob0: 0.7,
            alpha: [-1.0, 1.0],
            zeta: [0.0, 0.0],
        }
    }
}

impl Scalar {
    fn build(&self) -> ModelSpec {
        let dynamics = |k: usize| RegimeDynamics {
            gamma: Schedule::Constant(v1(self.gamma[k])),
            g: Schedule::Constant(m1(self.g[k])),
            w: Schedule::Constant(m1(self.w[k])),
        };
        ModelSpec {
            p: 1,
            q: 1,
            f: Schedule::Constant(m1(self.f)),
            v: Schedule::Constant(m1(self.v)),
            regimes: [dynamics(0), dynamics(1)],
            switch: SwitchSpec {
                alpha: self.alpha,
                beta: [vec![], vec![]],
                zeta: self.zeta,
                feedback: FeedbackSpec::default(),
            },
            init: InitialCondition {
                mean: [v1(self.mean0[0]), v1(self.mean0[1])],
                cov: [m1(self.var0[0]), m1(self.var0[1])],
                prob0: self.prob0,
            },
        }
    }
}

fn series(y: &[Option<f64>]) -> SubjectSeries {
    SubjectSeries::scalar("s", y, vec![]).unwrap()
}

#[test]
fn subset_partial_drops_rows_and_columns() {
    let f = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    let v = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]);
    let r = subset_observation(&[1.5, f64::NAN], &f, &v);
    assert_eq!(r.pattern.kind, MissingKind::Partial);
    assert_eq!(r.pattern.observed_indices, vec![0]);
    assert_eq!(r.y, v1(1.5));
    assert_eq!(r.f, m1(1.0));
    assert_eq!(r.v, m1(0.1));

    let r = subset_observation(&[1.0, 2.0], &f, &v);
    assert_eq!(r.pattern.kind, MissingKind::Complete);
    assert_eq!((r.f, r.v), (f.clone(), v.clone()));

    let r = subset_observation(&[f64::NAN, f64::NAN], &f, &v);
    assert_eq!(r.pattern.kind, MissingKind::Full);
    assert_eq!(r.y.len(), 0);
    assert_eq!(r.f.nrows(), 0);
}

#[test]
fn single_branch_hand_update() {
    // θ_prev=0, P_prev=1, G=1, γ=0, W=0, F=1, V=1, y=2
    let model = Scalar {
        v: 1.0,
        gamma: [0.0, 0.0],
        g: [1.0, 1.0],
        w: [0.0, 0.0],
        mean0: [0.0, 0.0],
        var0: [1.0, 1.0],
        prob0: 1.0,
        alpha: [-40.0, 0.0],
        ..Default::default()
    }
    .build();
    let prev = RegimeState::initial(&model);
    let step = filter_step(&prev, &model, [-40.0, 0.0], (0.0, 0.0), &[2.0], 1).unwrap();
    let innov = step.innovation.as_ref().unwrap();
    let h = step.innovation_cov.as_ref().unwrap();
    assert_eq!(innov[0][0][0], 2.0);
    assert_eq!(h[0][0][(0, 0)], 2.0);
    assert!((step.post_mean_pair[0][0][0] - 1.0).abs() < 1e-15);
    assert!((step.post_cov_pair[0][0][(0, 0)] - 0.5).abs() < 1e-15);
    assert!((step.marg_mean[0] - 1.0).abs() < 1e-12);
    assert!((step.marg_cov[(0, 0)] - 0.5).abs() < 1e-12);
}

#[test]
fn fully_missing_keeps_predictions() {
    let model = Scalar::default().build();
    let prev = RegimeState::initial(&model);
    let step = filter_step(&prev, &model, [-1.0, 1.0], (0.0, 0.0), &[f64::NAN], 1).unwrap();
    assert_eq!(step.pattern.kind, MissingKind::Full);
    assert!(step.innovation.is_none());
    assert_eq!(step.loglik_inc, 0.0);
    for o in 0..2 {
        for p in 0..2 {
            assert_eq!(step.post_mean_pair[o][p], step.pred_mean[o][p]);
            assert_eq!(step.post_cov_pair[o][p], step.pred_cov[o][p]);
            // probabilities propagate by the kernel alone
            let prior = prev.prob[o] * step.trans.get(o, p);
            assert!((step.joint_prob[o][p] - prior).abs() < 1e-14);
        }
    }
}

#[test]
fn degenerate_probabilities_concentrate_on_origin_branch() {
    let model = Scalar {
        prob0: 1.0,
        alpha: [-800.0, 0.0],
        ..Default::default()
    }
    .build();
    let prev = RegimeState::initial(&model);
    let step = filter_step(&prev, &model, [-800.0, 0.0], (0.0, 0.0), &[0.3], 1).unwrap();
    assert!((step.joint_prob[0][0] - 1.0).abs() < 1e-12);
    assert!((step.marg_mean[0] - step.post_mean_pair[0][0][0]).abs() < 1e-12);
    assert!((step.marg_cov[(0, 0)] - step.post_cov_pair[0][0][(0, 0)]).abs() < 1e-12);
}

#[test]
fn collapse_examples() {
    let (m, c) = collapse_mixture(&[0.5, 0.5], &[v1(0.0), v1(2.0)], &[m1(1.0), m1(1.0)]).unwrap();
    assert_eq!(m[0], 1.0);
    assert_eq!(c[(0, 0)], 2.0);
    let (m, c) = collapse_mixture(&[1.0, 0.0], &[v1(3.0), v1(-7.0)], &[m1(0.4), m1(9.0)]).unwrap();
    assert_eq!((m[0], c[(0, 0)]), (3.0, 0.4));
    let (m, c) = collapse_mixture(&[0.3, 0.7], &[v1(1.5), v1(1.5)], &[m1(1.0), m1(2.0)]).unwrap();
    assert!((m[0] - 1.5).abs() < 1e-15);
    assert!((c[(0, 0)] - (0.3 + 1.4)).abs() < 1e-15);
    assert!(collapse_mixture(&[1.2, -0.2], &[v1(0.0), v1(1.0)], &[m1(1.0), m1(1.0)]).is_err());
    assert!(collapse_mixture(&[0.4, 0.4], &[v1(0.0), v1(1.0)], &[m1(1.0), m1(1.0)]).is_err());
}

#[test]
fn empty_series_has_zero_loglik() {
    let model = Scalar::default().build();
    let out = run_filter(&series(&[]), &model, &PluginFeedback::zero(0)).unwrap();
    assert!(out.steps.is_empty());
    assert_eq!(out.loglik, 0.0);
    assert_eq!(log_likelihood(&series(&[]), &model, &PluginFeedback::zero(0)).unwrap(), 0.0);
}

#[test]
fn singular_innovation_reports_branch() {
    let model = Scalar {
        v: 0.0,
        w: [0.0, 0.0],
        var0: [0.0, 0.0],
        ..Default::default()
    }
    .build();
    let err = run_filter(&series(&[Some(1.0)]), &model, &PluginFeedback::zero(1)).unwrap_err();
    assert!(matches!(err, Error::Numerical { t: 1, branch: Some(_), .. }), "{err}");
}

#[test]
fn fully_missing_step_matches_kernel_propagation() {
    let model = Scalar {
        zeta: [0.0, 0.4],
        ..Default::default()
    }
    .build();
    let y = [Some(0.4), Some(1.9), None, Some(2.2), Some(0.1)];
    let fb = PluginFeedback::Averages(vec![0.0, 0.3, 1.0, 1.2, 2.0]);
    let out = run_filter(&series(&y), &model, &fb).unwrap();
    let base = out.base_logits;

    // propagate the regime state at t = 2 through the kernel at t = 3 by hand
    let prev = out.regime_state(2);
    let (z0, z1) = fb.z(3, &model.switch);
    let tp = crate::model::TransitionProbs::from_logits(base[0] + z0, base[1] + z1);
    let mut gap = prev.clone();
    for p in 0..2 {
        let w: Vec<f64> = (0..2).map(|o| prev.prob[o] * tp.get(o, p)).collect();
        let r = w[0] + w[1];
        let mut mean = 0.0;
        let mut comps = [(0.0, 0.0); 2];
        for o in 0..2 {
            let m = model.regimes[p].gamma.at(3)[0] + model.regimes[p].g.at(3)[(0, 0)] * prev.mean[o][0];
            let g = model.regimes[p].g.at(3)[(0, 0)];
            let v = g * g * prev.cov[o][(0, 0)] + model.regimes[p].w.at(3)[(0, 0)];
            comps[o] = (m, v);
            mean += w[o] / r * m;
        }
        let var: f64 = (0..2)
            .map(|o| w[o] / r * (comps[o].1 + (comps[o].0 - mean).powi(2)))
            .sum();
        gap.mean[p] = v1(mean);
        gap.cov[p] = m1(var);
        gap.prob[p] = r;
        gap.log_prob[p] = r.ln();
    }
    let next = filter_step(&gap, &model, base, fb.z(4, &model.switch), &[2.2], 4).unwrap();
    let reference = &out.steps[3];
    assert!((next.marg_mean[0] - reference.marg_mean[0]).abs() < 1e-10);
    assert!((next.marg_cov[(0, 0)] - reference.marg_cov[(0, 0)]).abs() < 1e-10);
    for p in 0..2 {
        assert!((next.regime_prob[p] - reference.regime_prob[p]).abs() < 1e-10);
    }
    assert!((next.loglik_inc - reference.loglik_inc).abs() < 1e-10);
}

fn two_channel_model(v: f64) -> ModelSpec {
    let mut m = Scalar {
        v,
        ..Default::default()
    }
    .build();
    m.p = 2;
    m.f = Schedule::Constant(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
    m.v = Schedule::Constant(DMatrix::from_diagonal_element(2, 2, v));
    m
}

#[test]
fn partial_missing_consistency() {
    let v = 0.5;
    let single = Scalar {
        v,
        ..Default::default()
    }
    .build();
    let double = two_channel_model(v);
    let ys = [0.7, 1.4, -0.2, 2.5];

    let s1 = series(&ys.map(Some));
    let rows_one: Vec<Vec<Option<f64>>> = ys.iter().map(|y| vec![Some(*y), None]).collect();
    let rows_both: Vec<Vec<Option<f64>>> = ys.iter().map(|y| vec![Some(*y), Some(*y)]).collect();
    let s_one = SubjectSeries::new("s", &rows_one, vec![]).unwrap();
    let s_both = SubjectSeries::new("s", &rows_both, vec![]).unwrap();
    let fb = PluginFeedback::zero(ys.len());

    let a = run_filter(&s1, &single, &fb).unwrap();
    let b = run_filter(&s_one, &double, &fb).unwrap();
    let c = run_filter(&s_both, &double, &fb).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-12);
    for (sa, (sb, sc)) in a.steps.iter().zip(b.steps.iter().zip(&c.steps)) {
        assert_eq!(sb.pattern.kind, MissingKind::Partial);
        assert!((sa.marg_mean[0] - sb.marg_mean[0]).abs() < 1e-12);
        assert!((sa.marg_cov[(0, 0)] - sb.marg_cov[(0, 0)]).abs() < 1e-12);
        for o in 0..2 {
            for p in 0..2 {
                assert!(sc.post_cov_pair[o][p][(0, 0)] < sb.post_cov_pair[o][p][(0, 0)]);
            }
        }
    }
}

#[test]
fn general_path_handles_two_dimensional_state() {
    // local linear trend observed with noise
    let q = 2;
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let w = DMatrix::from_diagonal_element(2, 2, 0.05);
    let dynamics = |gamma: f64| RegimeDynamics {
        gamma: Schedule::Constant(DVector::from_vec(vec![gamma, 0.0])),
        g: Schedule::Constant(g.clone()),
        w: Schedule::Constant(w.clone()),
    };
    let model = ModelSpec {
        p: 1,
        q,
        f: Schedule::Constant(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
        v: Schedule::Constant(m1(0.2)),
        regimes: [dynamics(0.0), dynamics(1.5)],
        switch: SwitchSpec {
            alpha: [-2.0, 1.0],
            beta: [vec![], vec![]],
            zeta: [0.0, 0.0],
            feedback: FeedbackSpec::default(),
        },
        init: InitialCondition {
            mean: [DVector::zeros(2), DVector::zeros(2)],
            cov: [DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            prob0: 0.9,
        },
    };
    model.validate().unwrap();
    let s = series(&[Some(0.1), Some(0.3), None, Some(2.4), Some(2.9)]);
    let out = run_filter(&s, &model, &PluginFeedback::zero(5)).unwrap();
    assert!(out.loglik.is_finite());
    for step in &out.steps {
        assert!(crate::linalg::is_psd(&step.marg_cov, 1e-8));
        let total: f64 = step.joint_prob.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }
}

prop_compose! {
    fn scalar_model()(
        v in 0.05f64..2.0,
        g0 in 0.0f64..0.99, g1 in 0.0f64..0.99,
        w0 in 0.0f64..1.0, w1 in 0.01f64..1.0,
        gamma1 in -5.0f64..5.0,
        a0 in -5.0f64..2.0, a1 in -2.0f64..5.0,
        z1 in -1.0f64..1.0,
        prob0 in 0.0f64..=1.0,
        var0 in 0.0f64..2.0,
    ) -> Scalar {
        Scalar {
            f: 1.0, v,
            gamma: [0.0, gamma1],
            g: [g0, g1],
            w: [w0, w1],
            mean0: [0.0, gamma1],
            var0: [var0, var0],
            prob0,
            alpha: [a0, a1],
            zeta: [0.0, z1],
        }
    }
}

fn observations(n: usize) -> impl Strategy<Value = Vec<Option<f64>>> {
    proptest::collection::vec(proptest::option::weighted(0.85, -6.0f64..8.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scalar_kernel_matches_general_filter(model in scalar_model(), y in observations(40),
                                            avg in proptest::collection::vec(-2.0f64..10.0, 40)) {
        let spec = model.build();
        let s = series(&y);
        let fb = PluginFeedback::Averages(avg);
        let general = run_filter(&s, &spec, &fb).unwrap().loglik;
        let fast = scalar::log_likelihood(&s, &ScalarModel::from_model(&spec).unwrap(), &fb).unwrap();
        prop_assert!((general - fast).abs() <= 1e-9 * (1.0 + general.abs()), "{general} vs {fast}");
    }

    #[test]
    fn probabilities_normalized_and_covariances_psd(model in scalar_model(), y in observations(30)) {
        let spec = model.build();
        let out = run_filter(&series(&y), &spec, &PluginFeedback::zero(30)).unwrap();
        let mut acc = 0.0;
        for step in &out.steps {
            let joint: f64 = step.joint_prob.iter().flatten().sum();
            prop_assert!((joint - 1.0).abs() < 1e-10);
            prop_assert!((step.regime_prob[0] + step.regime_prob[1] - 1.0).abs() < 1e-10);
            prop_assert!(crate::linalg::is_psd(&step.marg_cov, 1e-8));
            for p in 0..2 {
                prop_assert!(crate::linalg::is_psd(&step.regime_cov[p], 1e-8));
            }
            acc += step.loglik_inc;
        }
        prop_assert_eq!(acc, out.loglik);
    }
}
