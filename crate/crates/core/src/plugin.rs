//! Plug-in feedback: the state history entering the switching equations,
//! estimated from smoothed states and held fixed while the likelihood is
//! evaluated.

use crate::error::{Error, Result};
use crate::model::{FeedbackSpec, SwitchSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum PluginFeedback {
    /// Weighted state averages per time (`averages[t-1]` for time `t`); the
    /// feedback terms are `(ζ_0 s_t, ζ_1 s_t)` at whatever ζ is being evaluated.
    Averages(Vec<f64>),
    /// Explicit `(z_0, z_1)` per time, used as given.
    Fixed(Vec<(f64, f64)>),
}

impl PluginFeedback {
    pub fn zero(n: usize) -> Self {
        PluginFeedback::Averages(vec![0.0; n])
    }

    /// Averages computed from a state path (`states[t-1]` is the fed-back state
    /// component at time `t`).
    pub fn from_states(spec: &FeedbackSpec, states: &[f64]) -> Result<Self> {
        let averages = (1..=states.len())
            .map(|t| spec.weighted_average(states, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(PluginFeedback::Averages(averages))
    }

    pub fn len(&self) -> usize {
        match self {
            PluginFeedback::Averages(v) => v.len(),
            PluginFeedback::Fixed(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_covers(&self, n: usize) -> Result<()> {
        if self.len() < n {
            return Err(Error::Domain(format!(
                "plug-in feedback covers {} steps, series has {n}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Feedback terms `(z_0, z_1)` at time `t` (1-based).
    #[inline]
    pub fn z(&self, t: usize, switch: &SwitchSpec) -> (f64, f64) {
        match self {
            PluginFeedback::Averages(v) => {
                let s = v[t - 1];
                (switch.zeta[0] * s, switch.zeta[1] * s)
            }
            PluginFeedback::Fixed(v) => v[t - 1],
        }
    }

    /// All `(z_0, z_1)` pairs under `switch`.
    pub fn pairs(&self, switch: &SwitchSpec) -> Vec<(f64, f64)> {
        (1..=self.len()).map(|t| self.z(t, switch)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_scale_by_zeta() {
        let spec = FeedbackSpec::default();
        let fb = PluginFeedback::from_states(&spec, &[2.0, 2.0, 2.0, 2.0]).unwrap();
        let switch = SwitchSpec {
            alpha: [0.0; 2],
            beta: [vec![], vec![]],
            zeta: [0.0, 0.5],
            feedback: spec,
        };
        assert_eq!(fb.z(1, &switch), (0.0, 0.0));
        for t in 2..=4 {
            let (z0, z1) = fb.z(t, &switch);
            assert_eq!(z0, 0.0);
            assert!((z1 - 1.0).abs() < 1e-15);
        }
    }
}
