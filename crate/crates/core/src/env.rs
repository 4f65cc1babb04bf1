//! Episodic directional-trading MDP on top of frozen forecasts.
//!
//! State is `[α̂_t; a_{t−1}]`. Each step the agent holds a full position in
//! `{−1, 0, +1}` and is paid `a_t · (m_{t+k} − m_t) / max(spread_t, floor)`.

use std::io::{self, Write};
use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::market_data::EventStream;
use crate::Rng;

/// Discrete directional action. The index order (flat, long, short) is what
/// policies see; ties in greedy selection resolve to the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Flat,
    Long,
    Short,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Flat, Action::Long, Action::Short];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Action::Flat => 0,
            Action::Long => 1,
            Action::Short => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(Error::OutOfRange { index: i, len: 3 })
    }

    /// Position held: −1, 0 or +1.
    pub fn position(self) -> f64 {
        match self {
            Action::Flat => 0.0,
            Action::Long => 1.0,
            Action::Short => -1.0,
        }
    }

    pub fn from_sign(x: f64) -> Self {
        if x > 0.0 {
            Action::Long
        } else if x < 0.0 {
            Action::Short
        } else {
            Action::Flat
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastState {
    pub alpha: Vec<f64>,
    pub prev_action: Action,
}

impl ForecastState {
    pub fn dim(&self) -> usize {
        self.alpha.len() + 1
    }

    /// `alpha` followed by the previous position as −1/0/+1.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.alpha);
        v.push(self.prev_action.position());
        v
    }
}

pub fn make_state(alpha: &[f64], prev_action: Action) -> Result<ForecastState> {
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("forecast state".into()));
    }
    Ok(ForecastState {
        alpha: alpha.to_vec(),
        prev_action,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub episode_length: usize,
    /// Mid-price lookahead `k` of the reward, in event steps.
    pub reward_horizon: usize,
    /// Lower bound on the spread divisor, in ticks.
    pub spread_floor_ticks: f64,
    /// Tick size in price units.
    pub tick: i64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_length: 100,
            reward_horizon: 1,
            spread_floor_ticks: 1.0,
            tick: 100,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length < 1 || self.reward_horizon < 1 {
            return Err(Error::InvalidInput(
                "episode_length and reward_horizon must be >= 1".into(),
            ));
        }
        if self.tick <= 0 || !(self.spread_floor_ticks.is_finite() && self.spread_floor_ticks > 0.0) {
            return Err(Error::InvalidInput("tick and spread floor must be positive".into()));
        }
        Ok(())
    }

    fn spread_floor(&self) -> f64 {
        self.spread_floor_ticks * self.tick as f64
    }
}

fn reward_from(mid_now: f64, mid_later: f64, spread: f64, action: Action, cfg: &EnvConfig) -> f64 {
    if action == Action::Flat {
        return 0.0;
    }
    action.position() * (mid_later - mid_now) / spread.max(cfg.spread_floor())
}

/// Spread-scaled reward for holding `action` from event `t` to `t + k`.
pub fn step_reward(stream: &EventStream, t: usize, action: Action, cfg: &EnvConfig) -> Result<f64> {
    let later = t + cfg.reward_horizon;
    if later >= stream.len() {
        return Err(Error::OutOfRange {
            index: later,
            len: stream.len(),
        });
    }
    let now = &stream.snapshots[t];
    let mid = |i: usize| crate::forecaster::mid_price(&stream.snapshots[i]);
    Ok(reward_from(mid(t), mid(later), now.spread() as f64, action, cfg))
}

/// Consecutive windows of `episode_length`; a trailing partial window is kept
/// when at least half the episode length.
pub fn segment_episodes(split: Range<usize>, cfg: &EnvConfig) -> Vec<Range<usize>> {
    let t_len = cfg.episode_length.max(1);
    let mut out = Vec::new();
    let mut start = split.start;
    while start < split.end {
        let end = (start + t_len).min(split.end);
        if end - start == t_len || 2 * (end - start) >= t_len {
            out.push(start..end);
        }
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: ForecastState,
    pub action: Action,
    pub log_prob: Option<f64>,
    pub reward: f64,
    /// Position PnL `a_t · (m_{t+k} − m_t)` in price units.
    pub pnl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub window: Range<usize>,
    pub steps: Vec<StepRecord>,
    pub episode_return: f64,
}

impl EpisodeTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn old_log_probs(&self) -> Option<Vec<f64>> {
        self.steps.iter().map(|s| s.log_prob).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Sample / explore; policy agents record log-probabilities.
    Train,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub log_prob: Option<f64>,
}

pub trait Policy {
    fn decide(&self, state: &ForecastState, mode: Mode, rng: &mut Rng) -> Result<Decision>;
}

/// Always flat.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatPolicy;

impl Policy for FlatPolicy {
    fn decide(&self, _: &ForecastState, _: Mode, _: &mut Rng) -> Result<Decision> {
        Ok(Decision {
            action: Action::Flat,
            log_prob: None,
        })
    }
}

/// Uniform over the three actions in every mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn decide(&self, _: &ForecastState, _: Mode, rng: &mut Rng) -> Result<Decision> {
        Ok(Decision {
            action: Action::from_index(rng.random_range(0..Action::COUNT))?,
            log_prob: Some(-(Action::COUNT as f64).ln()),
        })
    }
}

/// Trades the sign of one forecast component.
#[derive(Debug, Clone, Copy, Default)]
pub struct SignPolicy {
    pub horizon_index: usize,
}

impl Policy for SignPolicy {
    fn decide(&self, state: &ForecastState, _: Mode, _: &mut Rng) -> Result<Decision> {
        let a = state
            .alpha
            .get(self.horizon_index)
            .ok_or(Error::OutOfRange {
                index: self.horizon_index,
                len: state.alpha.len(),
            })?;
        Ok(Decision {
            action: Action::from_sign(*a),
            log_prob: None,
        })
    }
}

/// Precomputed mids, spreads and forecasts for one event stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TradingEnv {
    mids: Vec<f64>,
    spreads: Vec<f64>,
    alphas: Vec<Option<Vec<f64>>>,
    pub cfg: EnvConfig,
}

impl TradingEnv {
    pub fn new(stream: &EventStream, forecaster: &Forecaster, cfg: EnvConfig) -> Result<Self> {
        let alphas = forecaster.predict_stream(stream)?;
        Self::from_parts(
            stream.mids(),
            stream.spreads().into_iter().map(|s| s as f64).collect(),
            alphas,
            cfg,
        )
    }

    pub fn from_parts(
        mids: Vec<f64>,
        spreads: Vec<f64>,
        alphas: Vec<Option<Vec<f64>>>,
        cfg: EnvConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if mids.len() != spreads.len() || mids.len() != alphas.len() {
            return Err(Error::DimensionMismatch {
                expected: mids.len(),
                got: spreads.len().min(alphas.len()),
            });
        }
        Ok(Self {
            mids,
            spreads,
            alphas,
            cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.mids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mids.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.alphas
            .iter()
            .flatten()
            .next()
            .map_or(1, |a| a.len() + 1)
    }

    /// Events that have a forecast and a reward lookahead.
    pub fn decision_range(&self) -> Range<usize> {
        let first = self.alphas.iter().position(Option::is_some).unwrap_or(self.len());
        let last = self.len().saturating_sub(self.cfg.reward_horizon);
        first..last.max(first)
    }

    pub fn alpha(&self, t: usize) -> Result<&[f64]> {
        self.alphas
            .get(t)
            .and_then(|a| a.as_deref())
            .ok_or(Error::OutOfRange {
                index: t,
                len: self.len(),
            })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        let later = t + self.cfg.reward_horizon;
        if later >= self.len() {
            return Err(Error::OutOfRange {
                index: later,
                len: self.len(),
            });
        }
        Ok(())
    }

    pub fn reward(&self, t: usize, action: Action) -> Result<f64> {
        self.check_step(t)?;
        let later = t + self.cfg.reward_horizon;
        Ok(reward_from(self.mids[t], self.mids[later], self.spreads[t], action, &self.cfg))
    }

    pub fn pnl(&self, t: usize, action: Action) -> Result<f64> {
        self.check_step(t)?;
        if action == Action::Flat {
            return Ok(0.0);
        }
        Ok(action.position() * (self.mids[t + self.cfg.reward_horizon] - self.mids[t]))
    }

    /// Keeps the intersection of each window with the decision range.
    pub fn clip_windows(&self, windows: &[Range<usize>]) -> Vec<Range<usize>> {
        let valid = self.decision_range();
        windows
            .iter()
            .map(|w| w.start.max(valid.start)..w.end.min(valid.end))
            .filter(|w| !w.is_empty())
            .collect()
    }

    pub fn run_episode<P: Policy + ?Sized>(
        &self,
        policy: &P,
        window: Range<usize>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<EpisodeTrajectory> {
        let mut steps = Vec::with_capacity(window.len());
        let mut prev = Action::Flat;
        let mut episode_return = 0.0;
        for t in window.clone() {
            let state = make_state(self.alpha(t)?, prev)?;
            let decision = policy.decide(&state, mode, rng)?;
            let reward = self.reward(t, decision.action)?;
            let pnl = self.pnl(t, decision.action)?;
            episode_return += reward;
            steps.push(StepRecord {
                t,
                state,
                action: decision.action,
                log_prob: match mode {
                    Mode::Train => decision.log_prob,
                    Mode::Greedy => None,
                },
                reward,
                pnl,
            });
            prev = decision.action;
        }
        Ok(EpisodeTrajectory {
            window,
            steps,
            episode_return,
        })
    }
}

/// Runs one episode per window in order; `prev_action` resets to flat each time.
pub fn rollout<P: Policy + ?Sized>(
    env: &TradingEnv,
    policy: &P,
    windows: &[Range<usize>],
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<EpisodeTrajectory>> {
    windows
        .iter()
        .map(|w| env.run_episode(policy, w.clone(), mode, rng))
        .collect()
}

pub fn mean_return(trajectories: &[EpisodeTrajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().map(|t| t.episode_return).sum::<f64>() / trajectories.len() as f64
}

/// One row per step: episode, t, action, reward, pnl, cumulative pnl.
pub fn write_trajectories<W: Write>(trajectories: &[EpisodeTrajectory], mut out: W) -> io::Result<()> {
    writeln!(out, "episode,t,action,reward,pnl,cum_pnl")?;
    let mut cum = 0.0;
    for (e, traj) in trajectories.iter().enumerate() {
        for s in &traj.steps {
            cum += s.pnl;
            writeln!(
                out,
                "{e},{},{},{},{},{cum}",
                s.t,
                s.action.position(),
                s.reward,
                s.pnl
            )?;
        }
    }
    Ok(())
}
