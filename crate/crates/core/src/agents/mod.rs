//! The four trainable policies and their shared train / evaluate interface.
//!
//! * `qtable` — tabular Q-learning on discretised forecasts, ε-greedy.
//! * `ppo` — per-step clipped surrogate with GAE and a separate value net.
//! * `grpo` — per-step clipped surrogate, critic-free, advantages centred over
//!   the group of episodes collected in one update.
//! * `gspo` — like GRPO but with one importance ratio per whole episode.
//!   Sequence ratios drift quickly, so a smaller clip range than the per-step
//!   methods may be warranted.

pub mod policy;
pub mod qlearning;
pub mod surrogate;

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Decision, EpisodeTrajectory, ForecastState, Mode, Policy, TradingEnv};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Checkpoint, DenseNet, Gradients};
use crate::Rng;

pub use policy::PolicyNet;
pub use qlearning::{Discretizer, QAgent, QLearningConfig, QTable};
pub use surrogate::{LossStats, StepBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Qtable,
    Ppo,
    Grpo,
    Gspo,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Qtable, AgentKind::Ppo, AgentKind::Grpo, AgentKind::Gspo];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Qtable => "qtable",
            AgentKind::Ppo => "ppo",
            AgentKind::Grpo => "grpo",
            AgentKind::Gspo => "gspo",
        }
    }

    /// Name used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            AgentKind::Qtable => "Q-Learning",
            AgentKind::Ppo => "PPO",
            AgentKind::Grpo => "GRPO",
            AgentKind::Gspo => "GSPO",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qtable" | "q" | "qlearning" | "q-learning" => Ok(AgentKind::Qtable),
            "ppo" => Ok(AgentKind::Ppo),
            "grpo" => Ok(AgentKind::Grpo),
            "gspo" => Ok(AgentKind::Gspo),
            other => Err(Error::InvalidInput(format!("unknown agent kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Policy updates; each collects `group_size` episodes.
    pub updates: usize,
    pub group_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub clip_eps_seq: f64,
    /// Surrogate epochs per batch for PPO and GRPO.
    pub epochs: usize,
    pub gspo_epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Standardise PPO advantages over each update's batch.
    pub standardize_ppo_advantages: bool,
    /// Divide group advantages by the group's standard deviation.
    pub standardize_group_advantages: bool,
    pub eps_std: f64,
    /// Bound on `|Σ log π − Σ log π_old|` before exponentiation.
    pub log_ratio_bound: f64,
    pub qlearning: QLearningConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            updates: 200,
            group_size: 16,
            hidden: vec![64, 64],
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            clip_eps_seq: 0.2,
            epochs: 4,
            gspo_epochs: 1,
            minibatches: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            standardize_ppo_advantages: true,
            standardize_group_advantages: true,
            eps_std: 1e-8,
            log_ratio_bound: 20.0,
            qlearning: QLearningConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self, kind: AgentKind) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.updates == 0 || self.group_size == 0 {
            return bad("updates and group_size must be positive");
        }
        if matches!(kind, AgentKind::Grpo | AgentKind::Gspo) && self.group_size < 2 {
            return bad("group methods need group_size >= 2");
        }
        if self.minibatches == 0 || self.epochs == 0 || self.gspo_epochs == 0 {
            return bad("epochs and minibatches must be positive");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps_seq > 0.0) {
            return bad("clip ranges must be positive");
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One row of the per-update training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub mean_return: f64,
    pub loss: f64,
    pub entropy: f64,
    pub epsilon: Option<f64>,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub kind: Option<AgentKind>,
    pub rows: Vec<UpdateLog>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("update,mean_return,loss,entropy,epsilon,clip_fraction,grad_norm,clamped\n");
        for r in &self.rows {
            let eps = r.epsilon.map(|e| e.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.update, r.mean_return, r.loss, r.entropy, eps, r.clip_fraction, r.grad_norm, r.clamped
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedAgent {
    Q(QAgent),
    Ppo { policy: PolicyNet, value: DenseNet },
    Grpo(PolicyNet),
    Gspo(PolicyNet),
}

impl TrainedAgent {
    pub fn kind(&self) -> AgentKind {
        match self {
            TrainedAgent::Q(_) => AgentKind::Qtable,
            TrainedAgent::Ppo { .. } => AgentKind::Ppo,
            TrainedAgent::Grpo(_) => AgentKind::Grpo,
            TrainedAgent::Gspo(_) => AgentKind::Gspo,
        }
    }

    /// Parameter hash used to show evaluation does not mutate the agent.
    pub fn fingerprint(&self) -> u64 {
        match self {
            TrainedAgent::Q(q) => {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for (id, a, v) in q.table.entries() {
                    for x in [id as u64, a.index() as u64, v.to_bits()] {
                        h = (h ^ x).wrapping_mul(0x0100_0000_01b3);
                    }
                }
                h
            }
            TrainedAgent::Ppo { policy, value } => policy_fingerprint(policy) ^ value.fingerprint().rotate_left(1),
            TrainedAgent::Grpo(p) | TrainedAgent::Gspo(p) => policy_fingerprint(p),
        }
    }

    /// Writes `qtable.txt` or `policy.json` (+ `value.json` for PPO) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, config_fingerprint: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tagged = |net: &DenseNet, role: &str| {
            let mut c = Checkpoint::from_net(net, config_fingerprint);
            c.metadata.insert("agent".into(), self.kind().to_string());
            c.metadata.insert("role".into(), role.into());
            c
        };
        let with_scale = |mut c: Checkpoint, p: &PolicyNet| {
            let scale: Vec<String> = p.input_scale.iter().map(f64::to_string).collect();
            c.metadata.insert("input_scale".into(), scale.join(","));
            c
        };
        match self {
            TrainedAgent::Q(q) => q.save(dir.join("qtable.txt")),
            TrainedAgent::Ppo { policy, value } => {
                with_scale(tagged(&policy.trunk, "policy"), policy).save(dir.join("policy.json"))?;
                tagged(value, "value").save(dir.join("value.json"))
            }
            TrainedAgent::Grpo(p) | TrainedAgent::Gspo(p) => {
                with_scale(tagged(&p.trunk, "policy"), p).save(dir.join("policy.json"))
            }
        }
    }

    /// Loads an agent saved by [`TrainedAgent::save`], returning the stored
    /// config fingerprint for network agents.
    pub fn load(kind: AgentKind, dir: impl AsRef<Path>, qconfig: &QLearningConfig) -> Result<(Self, Option<String>)> {
        let dir = dir.as_ref();
        let load_policy = || -> Result<(PolicyNet, String)> {
            let c = Checkpoint::load(dir.join("policy.json"))?;
            if c.metadata.get("agent").map(String::as_str) != Some(kind.as_str()) {
                return Err(Error::Checkpoint(format!("policy checkpoint is not a {kind} agent")));
            }
            let scale = c
                .metadata
                .get("input_scale")
                .ok_or_else(|| Error::Checkpoint("policy checkpoint lacks input_scale".into()))?
                .split(',')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Checkpoint(format!("input_scale: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let policy = PolicyNet::from_net(c.to_net()?)?.with_input_scale(scale)?;
            Ok((policy, c.config_fingerprint))
        };
        Ok(match kind {
            AgentKind::Qtable => (TrainedAgent::Q(QAgent::load(dir.join("qtable.txt"), qconfig.clone())?), None),
            AgentKind::Ppo => {
                let (policy, fp) = load_policy()?;
                let value = Checkpoint::load(dir.join("value.json"))?.to_net()?;
                (TrainedAgent::Ppo { policy, value }, Some(fp))
            }
            AgentKind::Grpo => {
                let (p, fp) = load_policy()?;
                (TrainedAgent::Grpo(p), Some(fp))
            }
            AgentKind::Gspo => {
                let (p, fp) = load_policy()?;
                (TrainedAgent::Gspo(p), Some(fp))
            }
        })
    }
}

fn policy_fingerprint(p: &PolicyNet) -> u64 {
    p.input_scale
        .iter()
        .fold(p.trunk.fingerprint(), |h, s| (h ^ s.to_bits()).wrapping_mul(0x0100_0000_01b3))
}

impl Policy for TrainedAgent {
    fn decide(&self, state: &ForecastState, mode: Mode, rng: &mut Rng) -> Result<Decision> {
        match self {
            TrainedAgent::Q(q) => q.decide(state, mode, rng),
            TrainedAgent::Ppo { policy, .. } | TrainedAgent::Grpo(policy) | TrainedAgent::Gspo(policy) => {
                policy.decide(state, mode, rng)
            }
        }
    }
}

fn sample_windows(windows: &[Range<usize>], n: usize, rng: &mut Rng) -> Vec<Range<usize>> {
    (0..n)
        .map(|_| windows[rng.random_range(0..windows.len())].clone())
        .collect()
}

/// Shuffled index chunks for one epoch.
fn minibatches(n: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let count = count.clamp(1, n.max(1));
    let size = n.div_ceil(count);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Clips, checks and applies one policy-gradient step. Returns the pre-clip norm.
fn apply(net: &mut DenseNet, adam: &mut AdamState, grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    let norm = grads.clip_global_norm(max_norm);
    adam.step_net(net, grads)?;
    if !net.is_finite() {
        return Err(Error::NonFinite("network parameters after update".into()));
    }
    Ok(norm)
}

#[derive(Default)]
struct Accum {
    loss: f64,
    entropy: f64,
    clip_fraction: f64,
    grad_norm: f64,
    clamped: usize,
    n: usize,
}

impl Accum {
    fn add(&mut self, s: &LossStats, grad_norm: f64) {
        self.loss += s.loss;
        self.entropy += s.entropy;
        self.clip_fraction += s.clip_fraction;
        self.grad_norm += grad_norm;
        self.clamped += s.clamped;
        self.n += 1;
    }

    fn row(&self, update: usize, mean_return: f64, epsilon: Option<f64>) -> UpdateLog {
        let n = self.n.max(1) as f64;
        UpdateLog {
            update,
            mean_return,
            loss: self.loss / n,
            entropy: self.entropy / n,
            epsilon,
            clip_fraction: self.clip_fraction / n,
            grad_norm: self.grad_norm / n,
            clamped: self.clamped,
        }
    }
}

/// Trains `kind` on episodes drawn from `train_windows`. Deterministic per seed.
pub fn train_agent(
    kind: AgentKind,
    env: &TradingEnv,
    train_windows: &[Range<usize>],
    cfg: &AgentConfig,
    seed: u64,
) -> Result<(TrainedAgent, TrainingLog)> {
    cfg.validate(kind)?;
    let windows = env.clip_windows(train_windows);
    if windows.is_empty() {
        return Err(Error::InvalidInput("no usable training windows".into()));
    }
    let mut rng = crate::rng_from_seed(crate::derive_seed(seed, kind.as_str()));
    let mut log = TrainingLog {
        kind: Some(kind),
        rows: Vec::with_capacity(cfg.updates),
    };
    let state_dim = env.state_dim();

    if kind == AgentKind::Qtable {
        let mut agent = QAgent::fit(env, &windows, cfg.qlearning.clone())?;
        for u in 0..cfg.updates {
            agent.epsilon = cfg.qlearning.epsilon(u, cfg.updates);
            let (mut ret, mut td) = (0.0, 0.0);
            for w in sample_windows(&windows, cfg.group_size, &mut rng) {
                let (traj, e) = agent.train_episode(env, w, &mut rng)?;
                ret += traj.episode_return;
                td += e;
            }
            let g = cfg.group_size as f64;
            log.rows.push(UpdateLog {
                update: u,
                mean_return: ret / g,
                loss: td / g,
                entropy: 0.0,
                epsilon: Some(agent.epsilon),
                clip_fraction: 0.0,
                grad_norm: 0.0,
                clamped: 0,
            });
        }
        agent.epsilon = 0.0;
        return Ok((TrainedAgent::Q(agent), log));
    }

    let mut alphas = Vec::new();
    for w in &windows {
        for t in w.clone() {
            alphas.push(env.alpha(t)?);
        }
    }
    // The previous-action component is already unit scale.
    let mut input_scale = policy::fit_input_scale(alphas, state_dim - 1);
    input_scale.push(1.0);
    let mut policy = PolicyNet::new(state_dim, &cfg.hidden, &mut rng)?.with_input_scale(input_scale)?;
    let mut value = if kind == AgentKind::Ppo {
        let mut dims = vec![state_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        Some(DenseNet::new(&dims, Activation::Tanh, &mut rng)?)
    } else {
        None
    };
    let mut policy_adam = AdamState::new(cfg.adam());
    let mut value_adam = AdamState::new(cfg.adam());

    for u in 0..cfg.updates {
        let batch_windows = sample_windows(&windows, cfg.group_size, &mut rng);
        let trajs = rollout(env, &policy, &batch_windows, Mode::Train, &mut rng)?;
        let mean_return = crate::env::mean_return(&trajs);
        let mut acc = Accum::default();

        match kind {
            AgentKind::Ppo => {
                let vnet = value.as_mut().expect("ppo has a value net");
                let mut advs = Vec::new();
                let mut rets = Vec::new();
                for t in &trajs {
                    let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
                    let values = t
                        .steps
                        .iter()
                        .map(|s| vnet.forward(&policy.prepare(&s.state.to_vec())).map(|v| v[0]))
                        .collect::<Result<Vec<_>>>()?;
                    let (a, r) = surrogate::gae(&rewards, &values, cfg.gamma, cfg.gae_lambda);
                    advs.push(a);
                    rets.push(r);
                }
                let mut batch = StepBatch::from_trajectories(&trajs, |i, t| advs[i][t])?;
                batch.returns = rets.into_iter().flatten().collect();
                if cfg.standardize_ppo_advantages {
                    surrogate::standardize(&mut batch.advantages, 1e-8);
                }
                let loss_cfg = surrogate::PpoLossConfig {
                    clip_eps: cfg.clip_eps,
                    entropy_coef: cfg.entropy_coef,
                    value_coef: cfg.value_coef,
                };
                for _ in 0..cfg.epochs {
                    for mb in minibatches(batch.len(), cfg.minibatches, &mut rng) {
                        let mut out = surrogate::ppo_loss(&policy, vnet, &batch, &mb, &loss_cfg)?;
                        let norm = apply(&mut policy.trunk, &mut policy_adam, &mut out.policy_grads, cfg.max_grad_norm)?;
                        let mut vg = out.value_grads.take().expect("ppo loss returns value grads");
                        apply(vnet, &mut value_adam, &mut vg, cfg.max_grad_norm)?;
                        acc.add(&out.stats, norm);
                    }
                }
            }
            AgentKind::Grpo => {
                let returns: Vec<f64> = trajs.iter().map(|t| t.episode_return).collect();
                let adv = surrogate::grpo_advantages(&returns, cfg.standardize_group_advantages, cfg.eps_std)?;
                let batch = StepBatch::from_trajectories(&trajs, |i, _| adv[i])?;
                for _ in 0..cfg.epochs {
                    for mb in minibatches(batch.len(), cfg.minibatches, &mut rng) {
                        let mut out = surrogate::grpo_loss(&policy, &batch, &mb, cfg.clip_eps, cfg.entropy_coef)?;
                        let norm = apply(&mut policy.trunk, &mut policy_adam, &mut out.policy_grads, cfg.max_grad_norm)?;
                        acc.add(&out.stats, norm);
                    }
                }
            }
            AgentKind::Gspo => {
                let returns: Vec<f64> = trajs.iter().map(|t| t.episode_return).collect();
                let adv = surrogate::grpo_advantages(&returns, cfg.standardize_group_advantages, cfg.eps_std)?;
                let samples = trajs
                    .iter()
                    .zip(&adv)
                    .map(|(t, a)| surrogate::SequenceSample::from_trajectory(t, *a))
                    .collect::<Result<Vec<_>>>()?;
                for _ in 0..cfg.gspo_epochs {
                    for mb in minibatches(samples.len(), cfg.minibatches, &mut rng) {
                        let group: Vec<_> = mb.iter().map(|&i| samples[i].clone()).collect();
                        let mut out = surrogate::gspo_loss(
                            &policy,
                            &group,
                            cfg.clip_eps_seq,
                            cfg.entropy_coef,
                            cfg.log_ratio_bound,
                        )?;
                        let norm = apply(&mut policy.trunk, &mut policy_adam, &mut out.policy_grads, cfg.max_grad_norm)?;
                        acc.add(&out.stats, norm);
                    }
                }
            }
            AgentKind::Qtable => unreachable!(),
        }
        log.rows.push(acc.row(u, mean_return, None));
    }

    let agent = match kind {
        AgentKind::Ppo => TrainedAgent::Ppo {
            policy,
            value: value.expect("ppo has a value net"),
        },
        AgentKind::Grpo => TrainedAgent::Grpo(policy),
        AgentKind::Gspo => TrainedAgent::Gspo(policy),
        AgentKind::Qtable => unreachable!(),
    };
    Ok((agent, log))
}

/// Deterministic greedy episodes over `windows` (clipped to the decision range).
pub fn evaluate_greedy<P: Policy + ?Sized>(
    policy: &P,
    env: &TradingEnv,
    windows: &[Range<usize>],
) -> Result<Vec<EpisodeTrajectory>> {
    // Greedy decisions never draw from the generator.
    let mut rng = crate::rng_from_seed(0);
    rollout(env, policy, &env.clip_windows(windows), Mode::Greedy, &mut rng)
}
