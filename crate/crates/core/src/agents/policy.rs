//! Softmax policy over the three directional actions.

use rand::Rng as _;

use crate::env::{Action, Decision, ForecastState, Mode, Policy};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet};
use crate::Rng;

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Dense trunk producing one logit per action.
///
/// States are divided element-wise by `input_scale` before the trunk, so raw
/// return-sized forecasts reach the tanh layers at unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub trunk: DenseNet,
    pub input_scale: Vec<f64>,
}

/// Per-component root mean square of `states`, 1 where a component is all zero.
pub fn fit_input_scale<'a>(states: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sums = vec![0.0; dim];
    let mut n = 0usize;
    for s in states {
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v * v;
        }
        n += 1;
    }
    sums.into_iter()
        .map(|s| {
            let r = (s / n.max(1) as f64).sqrt();
            if r.is_finite() && r > 0.0 {
                r
            } else {
                1.0
            }
        })
        .collect()
}

impl PolicyNet {
    /// `state_dim → hidden… → 3` with tanh hiddens and a near-uniform start.
    pub fn new(state_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![state_dim];
        dims.extend(hidden);
        dims.push(Action::COUNT);
        let mut trunk = DenseNet::new(&dims, Activation::Tanh, rng)?;
        trunk.scale_output_layer(0.01);
        Ok(Self {
            trunk,
            input_scale: vec![1.0; state_dim],
        })
    }

    pub fn from_net(trunk: DenseNet) -> Result<Self> {
        if trunk.output_dim() != Action::COUNT {
            return Err(Error::DimensionMismatch {
                expected: Action::COUNT,
                got: trunk.output_dim(),
            });
        }
        let input_scale = vec![1.0; trunk.input_dim()];
        Ok(Self { trunk, input_scale })
    }

    pub fn with_input_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.trunk.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.trunk.input_dim(),
                got: scale.len(),
            });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput("input scales must be positive".into()));
        }
        self.input_scale = scale;
        Ok(self)
    }

    /// The trunk's actual input for `state`.
    pub fn prepare(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.input_scale).map(|(x, s)| x / s).collect()
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.input_scale.len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_scale.len(),
                got: state.len(),
            });
        }
        self.trunk.forward(&self.prepare(state))
    }

    pub fn log_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(state)?))
    }

    pub fn log_prob(&self, state: &[f64], action: Action) -> Result<f64> {
        Ok(self.log_probs(state)?[action.index()])
    }

    pub fn greedy(&self, state: &[f64]) -> Result<Action> {
        Action::from_index(argmax(&self.logits(state)?))
    }
}

/// Categorical draw by inverse CDF.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl Policy for PolicyNet {
    fn decide(&self, state: &ForecastState, mode: Mode, rng: &mut Rng) -> Result<Decision> {
        let x = state.to_vec();
        match mode {
            Mode::Greedy => Ok(Decision {
                action: self.greedy(&x)?,
                log_prob: None,
            }),
            Mode::Train => {
                let lp = self.log_probs(&x)?;
                if lp.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("policy log-probabilities".into()));
                }
                let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                let i = sample_index(&probs, rng);
                Ok(Decision {
                    action: Action::from_index(i)?,
                    log_prob: Some(lp[i]),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dominant_logit_wins() {
        assert_eq!(argmax(&[10.0, 0.0, 0.0]), 0);
        let p = softmax(&[10.0, 0.0, 0.0]);
        assert!(p[0] > 0.99);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn greedy_policy_net_is_deterministic_and_read_only() {
        let mut rng = crate::rng_from_seed(1);
        let net = PolicyNet::new(7, &[8], &mut rng).unwrap();
        let before = net.trunk.fingerprint();
        let s = ForecastState {
            alpha: vec![0.1; 6],
            prev_action: Action::Long,
        };
        let a = net.decide(&s, Mode::Greedy, &mut rng).unwrap();
        let b = net.decide(&s, Mode::Greedy, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.trunk.fingerprint(), before);
    }

    #[test]
    fn sampled_log_prob_matches_distribution() {
        let mut rng = crate::rng_from_seed(2);
        let net = PolicyNet::new(3, &[4], &mut rng).unwrap();
        let s = ForecastState {
            alpha: vec![0.2, -0.1],
            prev_action: Action::Flat,
        };
        let d = net.decide(&s, Mode::Train, &mut rng).unwrap();
        let expected = net.log_prob(&s.to_vec(), d.action).unwrap();
        assert_eq!(d.log_prob, Some(expected));
    }

    #[test]
    fn input_scale_is_applied_before_trunk() {
        let mut rng = crate::rng_from_seed(3);
        let net = PolicyNet::new(2, &[4], &mut rng).unwrap();
        let scaled = net.clone().with_input_scale(vec![1e-4, 1.0]).unwrap();
        let a = net.logits(&[0.5, 1.0]).unwrap();
        let b = scaled.logits(&[0.5e-4, 1.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(net.clone().with_input_scale(vec![0.0, 1.0]).is_err());
        let fitted = fit_input_scale([[3.0, 0.0].as_slice(), [-4.0, 0.0].as_slice()], 2);
        assert!((fitted[0] - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(fitted[1], 1.0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 3)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 3), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            // Shifts can merge near-ties through rounding; compare on clear winners.
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(&logits), argmax(&shifted));
        }
    }
}
