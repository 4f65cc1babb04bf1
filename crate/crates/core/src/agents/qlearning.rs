//! Tabular Q-learning over a discretised forecast state.
//!
//! Each forecast component is bucketed by per-horizon cutoffs, and the bucket
//! tuple is combined with the previous action into a mixed-radix id in
//! `1..=S`, where `S = bins^H · 3`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::policy::argmax;
use crate::env::{make_state, Action, Decision, EpisodeTrajectory, ForecastState, Mode, Policy, StepRecord, TradingEnv};
use crate::error::{Error, Result};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QLearningConfig {
    pub bins: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the updates over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            bins: 3,
            learning_rate: 0.1,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.8,
        }
    }
}

impl QLearningConfig {
    /// Exploration rate at update `update` of `total`.
    pub fn epsilon(&self, update: usize, total: usize) -> f64 {
        let horizon = (self.epsilon_decay_fraction * total as f64).max(1.0);
        let frac = (update as f64 / horizon).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Per-horizon bucket boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub bins: usize,
    /// `cutoffs[h]` holds `bins − 1` ascending values; bucket = number of
    /// cutoffs strictly below the value.
    pub cutoffs: Vec<Vec<f64>>,
}

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Discretizer {
    /// Three buckets per horizon: below `−τ_h`, within, above `+τ_h`.
    pub fn symmetric(taus: &[f64]) -> Result<Self> {
        if taus.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidInput("thresholds must be finite and non-negative".into()));
        }
        Ok(Self {
            bins: 3,
            cutoffs: taus.iter().map(|t| vec![-t, *t]).collect(),
        })
    }

    /// Empirical `k/bins` quantiles of each component (terciles by default).
    pub fn fit<'a>(alphas: impl IntoIterator<Item = &'a [f64]>, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidInput("need at least 2 bins".into()));
        }
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for a in alphas {
            if columns.is_empty() {
                columns = vec![Vec::new(); a.len()];
            } else if a.len() != columns.len() {
                return Err(Error::DimensionMismatch {
                    expected: columns.len(),
                    got: a.len(),
                });
            }
            for (c, v) in columns.iter_mut().zip(a) {
                if !v.is_finite() {
                    return Err(Error::NonFinite("forecast used for discretisation".into()));
                }
                c.push(*v);
            }
        }
        if columns.is_empty() || columns[0].is_empty() {
            return Err(Error::InvalidInput("no forecasts to fit cutoffs on".into()));
        }
        let cutoffs = columns
            .into_iter()
            .map(|mut c| {
                c.sort_by(f64::total_cmp);
                (1..bins).map(|k| quantile(&c, k as f64 / bins as f64)).collect()
            })
            .collect();
        Ok(Self { bins, cutoffs })
    }

    pub fn horizons(&self) -> usize {
        self.cutoffs.len()
    }

    /// `bins^H · 3`.
    pub fn num_states(&self) -> usize {
        self.bins.pow(self.horizons() as u32) * Action::COUNT
    }

    pub fn bucket(&self, h: usize, x: f64) -> usize {
        self.cutoffs[h].iter().filter(|c| **c < x).count()
    }

    /// Id in `1..=S` from bucket indices and the previous action.
    pub fn id_from_buckets(&self, buckets: &[usize], prev: Action) -> usize {
        let mut code = 0;
        for b in buckets.iter().rev() {
            code = code * self.bins + b;
        }
        1 + prev.index() + Action::COUNT * code
    }

    pub fn discretize(&self, state: &ForecastState) -> Result<usize> {
        if state.alpha.len() != self.horizons() {
            return Err(Error::DimensionMismatch {
                expected: self.horizons(),
                got: state.alpha.len(),
            });
        }
        let buckets: Vec<usize> = state
            .alpha
            .iter()
            .enumerate()
            .map(|(h, x)| self.bucket(h, *x))
            .collect();
        Ok(self.id_from_buckets(&buckets, state.prev_action))
    }
}

/// Dense action-value table over ids `1..=S`; unvisited entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<[f64; 3]>,
}

impl QTable {
    pub fn new(num_states: usize) -> Self {
        Self {
            values: vec![[0.0; 3]; num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.values.len()
    }

    fn row(&self, id: usize) -> Result<&[f64; 3]> {
        id.checked_sub(1)
            .and_then(|i| self.values.get(i))
            .ok_or(Error::OutOfRange {
                index: id,
                len: self.values.len(),
            })
    }

    fn row_mut(&mut self, id: usize) -> Result<&mut [f64; 3]> {
        let len = self.values.len();
        id.checked_sub(1)
            .and_then(|i| self.values.get_mut(i))
            .ok_or(Error::OutOfRange { index: id, len })
    }

    pub fn get(&self, id: usize, action: Action) -> Result<f64> {
        Ok(self.row(id)?[action.index()])
    }

    pub fn set(&mut self, id: usize, action: Action, value: f64) -> Result<()> {
        self.row_mut(id)?[action.index()] = value;
        Ok(())
    }

    pub fn max_value(&self, id: usize) -> Result<f64> {
        Ok(self.row(id)?.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn greedy(&self, id: usize) -> Result<Action> {
        Action::from_index(argmax(self.row(id)?))
    }

    /// One-step TD update; `next = None` marks a terminal transition.
    /// Returns the TD error.
    pub fn q_update(
        &mut self,
        id: usize,
        action: Action,
        reward: f64,
        next: Option<usize>,
        learning_rate: f64,
        gamma: f64,
    ) -> Result<f64> {
        let bootstrap = match next {
            Some(n) => gamma * self.max_value(n)?,
            None => 0.0,
        };
        let q = self.get(id, action)?;
        let td = reward + bootstrap - q;
        let updated = q + learning_rate * td;
        if !updated.is_finite() {
            return Err(Error::NonFinite(format!("Q({id}, {action:?})")));
        }
        self.set(id, action, updated)?;
        Ok(td)
    }

    /// Non-zero entries as `(id, action, value)`, ordered by id then action.
    pub fn entries(&self) -> impl Iterator<Item = (usize, Action, f64)> + '_ {
        self.values.iter().enumerate().flat_map(|(i, row)| {
            Action::ALL
                .into_iter()
                .filter(move |a| row[a.index()] != 0.0)
                .map(move |a| (i + 1, a, row[a.index()]))
        })
    }
}

/// Discretiser plus table, usable as a [`Policy`].
#[derive(Debug, Clone, PartialEq)]
pub struct QAgent {
    pub discretizer: Discretizer,
    pub table: QTable,
    pub config: QLearningConfig,
    /// Exploration rate used in [`Mode::Train`].
    pub epsilon: f64,
}

const QTABLE_HEADER: &str = "# lobrl q-table v1";

impl QAgent {
    pub fn new(discretizer: Discretizer, config: QLearningConfig) -> Self {
        let table = QTable::new(discretizer.num_states());
        Self {
            epsilon: config.epsilon_start,
            discretizer,
            table,
            config,
        }
    }

    /// Fits cutoffs on the forecasts available inside `windows`.
    pub fn fit(env: &TradingEnv, windows: &[Range<usize>], config: QLearningConfig) -> Result<Self> {
        let mut alphas = Vec::new();
        for w in windows {
            for t in w.clone() {
                alphas.push(env.alpha(t)?);
            }
        }
        let discretizer = Discretizer::fit(alphas, config.bins)?;
        Ok(Self::new(discretizer, config))
    }

    fn choose(&self, id: usize, explore: bool, rng: &mut Rng) -> Result<Action> {
        if explore && rng.random::<f64>() < self.epsilon {
            return Action::from_index(rng.random_range(0..Action::COUNT));
        }
        self.table.greedy(id)
    }

    /// Runs one ε-greedy episode, updating the table after every step.
    /// Returns the trajectory and the mean absolute TD error.
    pub fn train_episode(
        &mut self,
        env: &TradingEnv,
        window: Range<usize>,
        rng: &mut Rng,
    ) -> Result<(EpisodeTrajectory, f64)> {
        let mut steps = Vec::with_capacity(window.len());
        let mut prev = Action::Flat;
        let mut state = make_state(env.alpha(window.start)?, prev)?;
        let mut id = self.discretizer.discretize(&state)?;
        let (mut episode_return, mut td_sum) = (0.0, 0.0);
        for t in window.clone() {
            let action = self.choose(id, true, rng)?;
            let reward = env.reward(t, action)?;
            let pnl = env.pnl(t, action)?;
            let next = if t + 1 < window.end {
                let s = make_state(env.alpha(t + 1)?, action)?;
                let nid = self.discretizer.discretize(&s)?;
                Some((s, nid))
            } else {
                None
            };
            let td = self.table.q_update(
                id,
                action,
                reward,
                next.as_ref().map(|(_, n)| *n),
                self.config.learning_rate,
                self.config.gamma,
            )?;
            td_sum += td.abs();
            episode_return += reward;
            steps.push(StepRecord {
                t,
                state: state.clone(),
                action,
                log_prob: None,
                reward,
                pnl,
            });
            prev = action;
            if let Some((s, n)) = next {
                state = s;
                id = n;
            }
        }
        debug_assert!(steps.last().is_none_or(|s| s.action == prev));
        let n = steps.len().max(1) as f64;
        Ok((
            EpisodeTrajectory {
                window,
                steps,
                episode_return,
            },
            td_sum / n,
        ))
    }

    /// Sorted textual map: a header, the cutoffs, then one `q id action value`
    /// line for every non-zero entry.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{QTABLE_HEADER}")?;
        writeln!(out, "bins {}", self.discretizer.bins)?;
        writeln!(out, "horizons {}", self.discretizer.horizons())?;
        for (h, c) in self.discretizer.cutoffs.iter().enumerate() {
            let mut line = format!("cutoffs {h}");
            for v in c {
                let _ = write!(line, " {v}");
            }
            writeln!(out, "{line}")?;
        }
        for (id, a, v) in self.table.entries() {
            writeln!(out, "q {id} {} {v}", a.index())?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R, config: QLearningConfig) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(format!("q-table: {m}"));
        let mut lines = input.lines();
        let header = lines.next().transpose().map_err(|e| bad(e.to_string()))?;
        if header.as_deref() != Some(QTABLE_HEADER) {
            return Err(bad("missing header".into()));
        }
        let (mut bins, mut cutoffs, mut entries) = (None, Vec::new(), Vec::new());
        let mut horizons = None;
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));
            match parts.as_slice() {
                [] => {}
                ["bins", b] => bins = Some(int(b)?),
                ["horizons", h] => horizons = Some(int(h)?),
                ["cutoffs", h, rest @ ..] => {
                    if int(h)? != cutoffs.len() {
                        return Err(bad("cutoff rows out of order".into()));
                    }
                    cutoffs.push(rest.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
                }
                ["q", id, a, v] => entries.push((int(id)?, Action::from_index(int(a)?)?, num(v)?)),
                _ => return Err(bad(format!("unrecognised line {line:?}"))),
            }
        }
        let bins = bins.ok_or_else(|| bad("missing bins".into()))?;
        if horizons != Some(cutoffs.len()) || cutoffs.iter().any(|c| c.len() + 1 != bins) {
            return Err(bad("cutoff shape inconsistent with bins/horizons".into()));
        }
        let mut agent = Self::new(Discretizer { bins, cutoffs }, config);
        for (id, a, v) in entries {
            if !v.is_finite() {
                return Err(bad(format!("non-finite entry for id {id}")));
            }
            agent.table.set(id, a, v)?;
        }
        agent.epsilon = 0.0;
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_text(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, config: QLearningConfig) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(std::io::BufReader::new(file), config)
    }
}

impl Policy for QAgent {
    fn decide(&self, state: &ForecastState, mode: Mode, rng: &mut Rng) -> Result<Decision> {
        let id = self.discretizer.discretize(state)?;
        Ok(Decision {
            action: self.choose(id, mode == Mode::Train, rng)?,
            log_prob: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn ids_enumerate_all_states() {
        let d = Discretizer::symmetric(&[0.1; 6]).unwrap();
        assert_eq!(d.num_states(), 2187);
        let mut seen = HashSet::new();
        for code in 0..729usize {
            let buckets: Vec<usize> = (0..6).map(|h| code / 3usize.pow(h) % 3).collect();
            for a in Action::ALL {
                let id = d.id_from_buckets(&buckets, a);
                assert!((1..=2187).contains(&id));
                assert!(seen.insert(id));
            }
        }
        assert_eq!(seen.len(), 2187);
    }

    #[test]
    fn zero_alpha_lands_in_middle_bins() {
        let d = Discretizer::symmetric(&[0.1; 6]).unwrap();
        let s = ForecastState {
            alpha: vec![0.0; 6],
            prev_action: Action::Flat,
        };
        assert_eq!(d.discretize(&s).unwrap(), d.id_from_buckets(&[1; 6], Action::Flat));
        let s2 = ForecastState {
            prev_action: Action::Long,
            ..s.clone()
        };
        assert_ne!(d.discretize(&s).unwrap(), d.discretize(&s2).unwrap());
    }

    #[test]
    fn fitted_cutoffs_are_terciles() {
        let xs: Vec<Vec<f64>> = (0..=9).map(|i| vec![i as f64]).collect();
        let d = Discretizer::fit(xs.iter().map(|v| v.as_slice()), 3).unwrap();
        assert!((d.cutoffs[0][0] - 3.0).abs() < 1e-12);
        assert!((d.cutoffs[0][1] - 6.0).abs() < 1e-12);
        assert_eq!(d.bucket(0, 3.0), 0);
        assert_eq!(d.bucket(0, 3.5), 1);
        assert_eq!(d.bucket(0, 9.0), 2);
    }

    #[test]
    fn one_step_algebra() {
        let mut q = QTable::new(2);
        q.q_update(1, Action::Long, 5.0, Some(2), 1.0, 0.0).unwrap();
        assert_eq!(q.get(1, Action::Long).unwrap(), 5.0);
        let mut z = QTable::new(2);
        z.q_update(1, Action::Short, 0.0, Some(2), 0.1, 0.99).unwrap();
        assert_eq!(z, QTable::new(2));
        assert!(z.q_update(3, Action::Flat, 1.0, None, 0.1, 0.9).is_err());
    }

    /// Value iteration on a deterministic MDP, `next[s][a]`, `reward[s][a]`.
    fn value_iteration(next: &[[usize; 3]], reward: &[[f64; 3]], gamma: f64) -> Vec<usize> {
        let n = next.len();
        let mut v = vec![0.0; n];
        for _ in 0..5000 {
            v = (0..n)
                .map(|s| {
                    (0..3)
                        .map(|a| reward[s][a] + gamma * v[next[s][a]])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        (0..n)
            .map(|s| {
                let q: Vec<f64> = (0..3).map(|a| reward[s][a] + gamma * v[next[s][a]]).collect();
                argmax(&q)
            })
            .collect()
    }

    fn q_learn(next: &[[usize; 3]], reward: &[[f64; 3]], gamma: f64, updates: usize) -> Vec<usize> {
        let mut rng = crate::rng_from_seed(3);
        let mut q = QTable::new(next.len());
        let mut s = 0;
        for _ in 0..updates {
            let a = rng.random_range(0..3);
            let s2 = next[s][a];
            q.q_update(s + 1, Action::ALL[a], reward[s][a], Some(s2 + 1), 0.1, gamma)
                .unwrap();
            s = s2;
        }
        (0..next.len()).map(|s| q.greedy(s + 1).unwrap().index()).collect()
    }

    #[test]
    fn two_state_chain_matches_value_iteration() {
        // Staying in state 1 pays 1; moving there from 0 costs a little.
        let next = [[0, 1, 0], [0, 1, 1]];
        let reward = [[0.0, -0.1, 0.0], [0.0, 1.0, 0.5]];
        let opt = value_iteration(&next, &reward, 0.9);
        assert_eq!(opt, vec![1, 1]);
        assert_eq!(q_learn(&next, &reward, 0.9, 10_000), opt);
    }

    #[test]
    fn three_state_toy_matches_value_iteration() {
        let next = [[1, 2, 0], [2, 0, 1], [0, 2, 1]];
        let reward = [[0.0, 1.0, 0.2], [0.5, 0.0, -1.0], [2.0, 0.1, 0.3]];
        let opt = value_iteration(&next, &reward, 0.9);
        assert_eq!(q_learn(&next, &reward, 0.9, 10_000), opt);
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let c = QLearningConfig::default();
        assert_eq!(c.epsilon(0, 100), 1.0);
        assert!((c.epsilon(40, 100) - 0.525).abs() < 1e-12);
        assert!((c.epsilon(80, 100) - 0.05).abs() < 1e-12);
        assert!((c.epsilon(99, 100) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn greedy_takes_uniformly_best_action() {
        let d = Discretizer::symmetric(&[0.1, 0.1]).unwrap();
        let mut agent = QAgent::new(d, QLearningConfig::default());
        for id in 1..=agent.table.num_states() {
            agent.table.set(id, Action::Short, 1.0).unwrap();
        }
        let mut rng = crate::rng_from_seed(0);
        for x in [-1.0, 0.0, 0.05, 3.0] {
            let s = ForecastState {
                alpha: vec![x, -x],
                prev_action: Action::Long,
            };
            assert_eq!(agent.decide(&s, Mode::Greedy, &mut rng).unwrap().action, Action::Short);
        }
    }

    #[test]
    fn text_round_trip() {
        let d = Discretizer::symmetric(&[0.25, 0.5]).unwrap();
        let mut agent = QAgent::new(d, QLearningConfig::default());
        agent.table.set(4, Action::Long, -0.1 / 3.0).unwrap();
        agent.table.set(27, Action::Flat, 1e-300).unwrap();
        let mut buf = Vec::new();
        agent.write_text(&mut buf).unwrap();
        let back = QAgent::read_text(buf.as_slice(), QLearningConfig::default()).unwrap();
        assert_eq!(back.table, agent.table);
        assert_eq!(back.discretizer, agent.discretizer);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().any(|l| l == "q 4 1 -0.03333333333333333"));
    }
}
