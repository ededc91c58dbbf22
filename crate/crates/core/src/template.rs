//! General constant-coefficient model with named parameters bound to matrix
//! entries.
//!
//! Entries are addressed as `f[i,j]`, `v[i,j]`, `gamma0[i]`, `g1[i,j]`,
//! `w0[i,j]`, `mean1[i]`, `cov0[i,j]` (0-based). Off-diagonal entries of the
//! covariance matrices `v`, `w*` and `cov*` are mirrored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    FeedbackSpec, InitialCondition, ModelSpec, ModelTemplate, RegimeDynamics, Schedule, SwitchSpec,
};
use crate::params::{self, ParameterSet, Scale, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    F,
    V,
    Gamma(usize),
    G(usize),
    W(usize),
    Mean(usize),
    Cov(usize),
}

impl Target {
    fn is_vector(self) -> bool {
        matches!(self, Target::Gamma(_) | Target::Mean(_))
    }

    fn is_covariance(self) -> bool {
        matches!(self, Target::V | Target::W(_) | Target::Cov(_))
    }
}

/// One matrix or vector entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub target: Target,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.target {
            Target::F => "f".to_string(),
            Target::V => "v".to_string(),
            Target::Gamma(k) => format!("gamma{k}"),
            Target::G(k) => format!("g{k}"),
            Target::W(k) => format!("w{k}"),
            Target::Mean(k) => format!("mean{k}"),
            Target::Cov(k) => format!("cov{k}"),
        };
        if self.target.is_vector() {
            write!(f, "{name}[{}]", self.row)
        } else {
            write!(f, "{name}[{},{}]", self.row, self.col)
        }
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid matrix entry `{s}`"));
        let (name, rest) = s.trim().split_once('[').ok_or_else(bad)?;
        let inner = rest.strip_suffix(']').ok_or_else(bad)?;
        let regime = |prefix: &str| match name.strip_prefix(prefix) {
            Some("0") => Some(0),
            Some("1") => Some(1),
            _ => None,
        };
        let target = match name {
            "f" => Target::F,
            "v" => Target::V,
            _ => {
                if let Some(k) = regime("gamma") {
                    Target::Gamma(k)
                } else if let Some(k) = regime("mean") {
                    Target::Mean(k)
                } else if let Some(k) = regime("cov") {
                    Target::Cov(k)
                } else if let Some(k) = regime("g") {
                    Target::G(k)
                } else if let Some(k) = regime("w") {
                    Target::W(k)
                } else {
                    return Err(bad());
                }
            }
        };
        let index = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let (row, col) = if target.is_vector() {
            (index(inner)?, 0)
        } else {
            let (r, c) = inner.split_once(',').ok_or_else(bad)?;
            (index(r)?, index(c)?)
        };
        Ok(Slot { target, row, col })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeMatrices {
    pub gamma: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitMatrices {
    pub mean0: Vec<f64>,
    pub mean1: Vec<f64>,
    pub cov0: Vec<Vec<f64>>,
    pub cov1: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub prob0: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    pub param: String,
    pub transform: Transform,
    pub slots: Vec<String>,
}

/// Serializable description of a general model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralModel {
    pub f: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub regime0: RegimeMatrices,
    pub regime1: RegimeMatrices,
    pub init: InitMatrices,
    #[serde(default)]
    pub n_covariates: usize,
    #[serde(default)]
    pub bind: Vec<Binding>,
    /// Switching parameters held at zero and never estimated, e.g. `zeta0`.
    #[serde(default)]
    pub fixed_zero: Vec<String>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// A [`ModelTemplate`] over a [`GeneralModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralTemplate {
    base: ModelSpec,
    bindings: Vec<(String, Transform, Vec<Slot>)>,
    fixed_zero: Vec<String>,
}

fn switch_names(d: usize) -> Vec<String> {
    let mut names = vec![params::ALPHA0.to_string()];
    names.extend((0..d).map(params::beta0));
    names.push(params::ALPHA1.into());
    names.extend((0..d).map(params::beta1));
    names.push(params::ZETA0.into());
    names.push(params::ZETA1.into());
    names
}

impl GeneralTemplate {
    pub fn new(config: &GeneralModel, feedback: FeedbackSpec) -> Result<Self> {
        let f = matrix(&config.f, "f")?;
        let (p, q) = f.shape();
        let regime = |r: &RegimeMatrices, k: usize| -> Result<RegimeDynamics> {
            Ok(RegimeDynamics {
                gamma: Schedule::Constant(DVector::from_vec(r.gamma.clone())),
                g: Schedule::Constant(matrix(&r.g, &format!("g{k}"))?),
                w: Schedule::Constant(matrix(&r.w, &format!("w{k}"))?),
            })
        };
        let d = config.n_covariates;
        let base = ModelSpec {
            p,
            q,
            f: Schedule::Constant(f),
            v: Schedule::Constant(matrix(&config.v, "v")?),
            regimes: [regime(&config.regime0, 0)?, regime(&config.regime1, 1)?],
            switch: SwitchSpec {
                alpha: [0.0; 2],
                beta: [vec![0.0; d], vec![0.0; d]],
                zeta: [0.0; 2],
                feedback,
            },
            init: InitialCondition {
                mean: [
                    DVector::from_vec(config.init.mean0.clone()),
                    DVector::from_vec(config.init.mean1.clone()),
                ],
                cov: [matrix(&config.init.cov0, "cov0")?, matrix(&config.init.cov1, "cov1")?],
                prob0: config.init.prob0,
            },
        };
        base.validate()?;
        let reserved = switch_names(d);
        let mut bindings = Vec::new();
        let mut seen = BTreeMap::new();
        for b in &config.bind {
            if reserved.contains(&b.param) {
                return Err(Error::Config(format!("`{}` is a switching parameter and cannot be bound", b.param)));
            }
            if seen.insert(b.param.clone(), ()).is_some() {
                return Err(Error::Config(format!("parameter `{}` is bound twice", b.param)));
            }
            if b.slots.is_empty() {
                return Err(Error::Config(format!("parameter `{}` has no slots", b.param)));
            }
            let slots = b
                .slots
                .iter()
                .map(|s| s.parse::<Slot>())
                .collect::<Result<Vec<_>>>()?;
            for s in &slots {
                let (r, c) = shape(&base, s.target);
                if s.row >= r || s.col >= c {
                    return Err(Error::Config(format!("entry `{s}` is out of range")));
                }
            }
            bindings.push((b.param.clone(), b.transform, slots));
        }
        for name in &config.fixed_zero {
            if !reserved.contains(name) {
                return Err(Error::Config(format!("`{name}` is not a switching parameter")));
            }
        }
        Ok(Self {
            base,
            bindings,
            fixed_zero: config.fixed_zero.clone(),
        })
    }

    /// Parameter vector with bound entries first (values read from the
    /// base matrices unless overridden), then the switching coefficients.
    pub fn parameter_set(&self, overrides: &BTreeMap<String, f64>) -> Result<ParameterSet> {
        let mut p = ParameterSet::constrained();
        for (name, transform, slots) in &self.bindings {
            let value = overrides.get(name).copied().unwrap_or_else(|| read(&self.base, slots[0]));
            p = p.with(name.clone(), value, *transform);
        }
        for name in switch_names(self.base.switch.covariate_dim()) {
            if self.fixed_zero.contains(&name) {
                continue;
            }
            p = p.with(name.clone(), overrides.get(&name).copied().unwrap_or(0.0), Transform::Identity);
        }
        for name in overrides.keys() {
            if p.index_of(name).is_none() {
                return Err(Error::Config(format!("unknown parameter `{name}`")));
            }
        }
        Ok(p)
    }
}

fn shape(m: &ModelSpec, target: Target) -> (usize, usize) {
    let (p, q) = (m.p, m.q);
    match target {
        Target::F => (p, q),
        Target::V => (p, p),
        Target::Gamma(_) | Target::Mean(_) => (q, 1),
        Target::G(_) | Target::W(_) | Target::Cov(_) => (q, q),
    }
}

fn entry_ref(m: &ModelSpec, target: Target) -> &DMatrix<f64> {
    fn constant(s: &Schedule<DMatrix<f64>>) -> &DMatrix<f64> {
        s.constant().expect("general templates hold constant matrices")
    }
    match target {
        Target::F => constant(&m.f),
        Target::V => constant(&m.v),
        Target::G(k) => constant(&m.regimes[k].g),
        Target::W(k) => constant(&m.regimes[k].w),
        Target::Cov(k) => &m.init.cov[k],
        Target::Gamma(_) | Target::Mean(_) => unreachable!("vector targets"),
    }
}

fn entry(m: &mut ModelSpec, target: Target) -> &mut DMatrix<f64> {
    fn constant(s: &mut Schedule<DMatrix<f64>>) -> &mut DMatrix<f64> {
        match s {
            Schedule::Constant(v) => v,
            Schedule::Varying(_) => unreachable!("general templates hold constant matrices"),
        }
    }
    match target {
        Target::F => constant(&mut m.f),
        Target::V => constant(&mut m.v),
        Target::G(k) => constant(&mut m.regimes[k].g),
        Target::W(k) => constant(&mut m.regimes[k].w),
        Target::Cov(k) => &mut m.init.cov[k],
        Target::Gamma(_) | Target::Mean(_) => unreachable!("vector targets"),
    }
}

fn read(m: &ModelSpec, s: Slot) -> f64 {
    match s.target {
        Target::Gamma(k) => match &m.regimes[k].gamma {
            Schedule::Constant(v) => v[s.row],
            Schedule::Varying(_) => unreachable!("general templates hold constant vectors"),
        },
        Target::Mean(k) => m.init.mean[k][s.row],
        t => entry_ref(m, t)[(s.row, s.col)],
    }
}

fn write(m: &mut ModelSpec, s: Slot, value: f64) {
    match s.target {
        Target::Gamma(k) => {
            if let Schedule::Constant(v) = &mut m.regimes[k].gamma {
                v[s.row] = value;
            }
        }
        Target::Mean(k) => m.init.mean[k][s.row] = value,
        t => {
            let mat = entry(m, t);
            mat[(s.row, s.col)] = value;
            if t.is_covariance() {
                mat[(s.col, s.row)] = value;
            }
        }
    }
}

impl ModelTemplate for GeneralTemplate {
    fn build(&self, params: &ParameterSet) -> Result<ModelSpec> {
        params.ensure_scale(Scale::Constrained)?;
        let mut m = self.base.clone();
        for (name, _, slots) in &self.bindings {
            let v = params.require(name)?;
            for s in slots {
                write(&mut m, *s, v);
            }
        }
        let get = |n: &str| params.get(n).unwrap_or(0.0);
        let d = m.switch.covariate_dim();
        m.switch.alpha = [get(params::ALPHA0), get(params::ALPHA1)];
        m.switch.beta = [
            (0..d).map(|j| get(&params::beta0(j))).collect(),
            (0..d).map(|j| get(&params::beta1(j))).collect(),
        ];
        m.switch.zeta = [get(params::ZETA0), get(params::ZETA1)];
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{temperature_preset, PresetValues};
    use crate::simulate::{simulate_subject, StudyDesign};
    use crate::PluginFeedback;
    use proptest::prelude::*;

    fn scalar_preset_as_general() -> GeneralModel {
        let m = |x: f64| vec![vec![x]];
        GeneralModel {
            f: m(1.0),
            v: m(0.1),
            regime0: RegimeMatrices { gamma: vec![0.0], g: m(0.5), w: m(0.03) },
            regime1: RegimeMatrices { gamma: vec![5.0], g: m(0.5), w: m(0.3) },
            init: InitMatrices { mean0: vec![0.0], mean1: vec![10.0], cov0: m(0.0), cov1: m(0.0), prob0: 1.0 },
            n_covariates: 2,
            bind: vec![
                Binding { param: "sigma2_v".into(), transform: Transform::Log, slots: vec!["v[0,0]".into()] },
                Binding { param: "g".into(), transform: Transform::Logit, slots: vec!["g0[0,0]".into(), "g1[0,0]".into()] },
            ],
            fixed_zero: vec!["zeta0".into()],
        }
    }

    #[test]
    fn slot_names_round_trip() {
        for s in ["f[0,1]", "v[2,2]", "gamma1[3]", "g0[0,0]", "w1[1,0]", "mean0[0]", "cov1[0,1]"] {
            assert_eq!(s.parse::<Slot>().unwrap().to_string(), s);
        }
        for s in ["", "x[0]", "g2[0,0]", "gamma[0]", "v[0]", "w0[a,b]", "f[0,0", "mean0[0,0]", "g01[0,0]"] {
            assert!(s.parse::<Slot>().is_err(), "{s}");
        }
    }

    #[test]
    fn reproduces_the_scalar_preset() {
        let t = GeneralTemplate::new(&scalar_preset_as_general(), FeedbackSpec::default()).unwrap();
        let mut overrides = BTreeMap::new();
        for (k, v) in [("alpha0", -3.0), ("beta0[0]", 0.15), ("beta0[1]", -0.2), ("alpha1", 0.2), ("beta1[0]", -0.8), ("beta1[1]", 0.5), ("zeta1", 0.3)] {
            overrides.insert(k.to_string(), v);
        }
        let p = t.parameter_set(&overrides).unwrap();
        assert_eq!(p.get("sigma2_v"), Some(0.1));
        assert_eq!(p.get("g"), Some(0.5));
        assert!(p.get("zeta0").is_none());
        let general = t.build(&p).unwrap();
        let preset = temperature_preset(
            &StudyDesign::default().true_values().to_parameter_set(),
            FeedbackSpec::default(),
            2,
        )
        .unwrap();
        assert_eq!(general, preset);

        let s = simulate_subject(&preset, 30, vec![1.0, 0.3], "a", 5).unwrap().series;
        let fb = PluginFeedback::zero(30);
        let a = crate::filter::run_filter(&s, &general, &fb).unwrap().loglik;
        let b = crate::filter::run_filter(&s, &preset, &fb).unwrap().loglik;
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_entries_are_mirrored() {
        let m2 = |a: f64, b: f64, c: f64| vec![vec![a, b], vec![b, c]];
        let cfg = GeneralModel {
            f: vec![vec![1.0, 0.0]],
            v: vec![vec![0.5]],
            regime0: RegimeMatrices { gamma: vec![0.0, 0.0], g: m2(0.5, 0.0, 0.5), w: m2(1.0, 0.0, 1.0) },
            regime1: RegimeMatrices { gamma: vec![1.0, 0.0], g: m2(0.5, 0.0, 0.5), w: m2(1.0, 0.0, 1.0) },
            init: InitMatrices { mean0: vec![0.0; 2], mean1: vec![0.0; 2], cov0: m2(1.0, 0.0, 1.0), cov1: m2(1.0, 0.0, 1.0), prob0: 0.5 },
            n_covariates: 0,
            bind: vec![Binding { param: "c".into(), transform: Transform::Identity, slots: vec!["w0[0,1]".into()] }],
            fixed_zero: vec![],
        };
        let t = GeneralTemplate::new(&cfg, FeedbackSpec::default()).unwrap();
        let mut p = t.parameter_set(&BTreeMap::new()).unwrap();
        p.set("c", 0.4).unwrap();
        let m = t.build(&p).unwrap();
        let w = m.regimes[0].w.constant().unwrap();
        assert_eq!(w[(0, 1)], 0.4);
        assert_eq!(w[(1, 0)], 0.4);
        p.set("c", 2.0).unwrap();
        assert!(t.build(&p).is_err());
    }

    #[test]
    fn rejects_bad_bindings() {
        let mut cfg = scalar_preset_as_general();
        cfg.bind[0].slots = vec!["v[1,0]".into()];
        assert!(GeneralTemplate::new(&cfg, FeedbackSpec::default()).is_err());
        let mut cfg = scalar_preset_as_general();
        cfg.bind[0].param = "alpha1".into();
        assert!(GeneralTemplate::new(&cfg, FeedbackSpec::default()).is_err());
        let mut cfg = scalar_preset_as_general();
        cfg.fixed_zero = vec!["sigma2_v".into()];
        assert!(GeneralTemplate::new(&cfg, FeedbackSpec::default()).is_err());
        let t = GeneralTemplate::new(&scalar_preset_as_general(), FeedbackSpec::default()).unwrap();
        let mut o = BTreeMap::new();
        o.insert("nope".to_string(), 1.0);
        assert!(t.parameter_set(&o).is_err());
    }

    #[test]
    fn preset_cold_start_is_valid() {
        let p = PresetValues::cold_start(2).to_parameter_set();
        assert!(temperature_preset(&p, FeedbackSpec::default(), 2).is_ok());
    }

    proptest! {
        #[test]
        fn slot_parser_never_panics(s in "\\PC{0,16}") {
            let _ = s.parse::<Slot>();
        }

        #[test]
        fn slot_display_parses_back(k in 0usize..7, r in 0usize..100, c in 0usize..100, reg in 0usize..2) {
            let target = [Target::F, Target::V, Target::Gamma(reg), Target::G(reg), Target::W(reg), Target::Mean(reg), Target::Cov(reg)][k];
            let col = if target.is_vector() { 0 } else { c };
            let s = Slot { target, row: r, col };
            prop_assert_eq!(s.to_string().parse::<Slot>().unwrap(), s);
        }
    }
}
