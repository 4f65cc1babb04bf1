//! Clipped policy-gradient objectives: PPO (per-step ratio, GAE advantages),
//! GRPO (per-step ratio, group-centred episode advantages) and GSPO (one
//! sequence-level ratio per episode).
//!
//! Every loss here is the quantity to *minimise*, i.e. the negated surrogate
//! plus regularisers, together with its analytic gradient.

use serde::{Deserialize, Serialize};

use super::policy::{entropy, log_softmax, PolicyNet};
use crate::env::{Action, EpisodeTrajectory};
use crate::error::{Error, Result};
use crate::nn::{DenseNet, Gradients};

pub fn clip(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, eps) * advantage)
}

/// `∂ clipped_surrogate / ∂ log ρ`: `ρA` while the unclipped branch is the
/// minimum, zero once the clipped branch takes over.
pub fn surrogate_log_ratio_grad(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    if unclipped <= clip(ratio, eps) * advantage {
        unclipped
    } else {
        0.0
    }
}

/// Generalized advantage estimates for one episode that terminates after its
/// last step. Returns `(advantages, value targets)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// In-place standardisation with population standard deviation.
pub fn standardize(values: &mut [f64], eps: f64) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std == 0.0 { 0.0 } else { (*v - mean) / (std + eps) };
    }
}

/// Critic-free episode advantages `R_i − R̄`, optionally divided by `σ_R + ε`
/// with the population standard deviation.
pub fn grpo_advantages(returns: &[f64], standardize: bool, eps_std: f64) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "group advantages need at least 2 episodes, got {}",
            returns.len()
        )));
    }
    let g = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / g;
    let centered: Vec<f64> = returns.iter().map(|r| r - mean).collect();
    if !standardize {
        return Ok(centered);
    }
    let sigma = (centered.iter().map(|c| c * c).sum::<f64>() / g).sqrt();
    if sigma == 0.0 {
        return Ok(vec![0.0; returns.len()]);
    }
    Ok(centered.into_iter().map(|c| c / (sigma + eps_std)).collect())
}

/// Flattened per-step training data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Value targets; PPO only.
    pub returns: Vec<f64>,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Pools every step of `trajectories`; `advantage(i, t)` supplies step `t` of episode `i`.
    pub fn from_trajectories(
        trajectories: &[EpisodeTrajectory],
        mut advantage: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut batch = StepBatch::default();
        for (i, traj) in trajectories.iter().enumerate() {
            for (t, s) in traj.steps.iter().enumerate() {
                batch.states.push(s.state.to_vec());
                batch.actions.push(s.action);
                batch.old_log_probs.push(s.log_prob.ok_or_else(|| {
                    Error::InvalidInput("trajectory lacks behaviour log-probabilities".into())
                })?);
                batch.advantages.push(advantage(i, t));
            }
        }
        Ok(batch)
    }
}

/// One whole episode for the sequence-level objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantage: f64,
}

impl SequenceSample {
    pub fn from_trajectory(traj: &EpisodeTrajectory, advantage: f64) -> Result<Self> {
        Ok(Self {
            states: traj.steps.iter().map(|s| s.state.to_vec()).collect(),
            actions: traj.steps.iter().map(|s| s.action).collect(),
            old_log_probs: traj.old_log_probs().ok_or_else(|| {
                Error::InvalidInput("trajectory lacks behaviour log-probabilities".into())
            })?,
            advantage,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    /// Total objective being minimised.
    pub loss: f64,
    /// Mean clipped surrogate (to be maximised).
    pub surrogate: f64,
    pub entropy: f64,
    pub value_loss: f64,
    /// Fraction of terms whose clipped branch was active.
    pub clip_fraction: f64,
    /// Sequence log-ratios clamped before exponentiation (GSPO).
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub stats: LossStats,
    pub policy_grads: Gradients,
    pub value_grads: Option<Gradients>,
}

/// Upstream gradient on the logits for `coef · log π(a)` plus `entropy_coef · H`.
fn logit_grad(log_probs: &[f64], action: Action, coef: f64, entropy_coef: f64) -> (Vec<f64>, f64) {
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let h = entropy(&probs);
    let grad = probs
        .iter()
        .zip(log_probs)
        .enumerate()
        .map(|(j, (p, lp))| {
            let onehot = if j == action.index() { 1.0 } else { 0.0 };
            coef * (onehot - p) - entropy_coef * p * (lp + h)
        })
        .collect();
    (grad, h)
}

fn check_ratio(ratio: f64) -> Result<f64> {
    if ratio.is_finite() {
        Ok(ratio)
    } else {
        Err(Error::NonFinite("importance ratio".into()))
    }
}

/// Per-step clipped surrogate over `idx`, with entropy bonus. Shared by PPO and GRPO.
pub fn clipped_step_loss(
    policy: &PolicyNet,
    batch: &StepBatch,
    idx: &[usize],
    eps: f64,
    entropy_coef: f64,
) -> Result<LossOutput> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    let n = idx.len() as f64;
    let mut grads = Gradients::zeros_like(&policy.trunk);
    let (mut surr_sum, mut ent_sum, mut clipped) = (0.0, 0.0, 0usize);
    for &i in idx {
        let trace = policy.trunk.forward_trace(&policy.prepare(&batch.states[i]))?;
        let lp = log_softmax(trace.output());
        let a = batch.actions[i];
        let ratio = check_ratio((lp[a.index()] - batch.old_log_probs[i]).exp())?;
        let adv = batch.advantages[i];
        let surr = clipped_surrogate(ratio, adv, eps);
        let g = surrogate_log_ratio_grad(ratio, adv, eps);
        if g == 0.0 && adv != 0.0 {
            clipped += 1;
        }
        surr_sum += surr;
        // d(−surr/n − c·H/n)/dz
        let (upstream, h) = logit_grad(&lp, a, -g / n, -entropy_coef / n);
        ent_sum += h;
        policy.trunk.accumulate_backward(&trace, &upstream, &mut grads)?;
    }
    let surrogate = surr_sum / n;
    let ent = ent_sum / n;
    Ok(LossOutput {
        stats: LossStats {
            loss: -surrogate - entropy_coef * ent,
            surrogate,
            entropy: ent,
            value_loss: 0.0,
            clip_fraction: clipped as f64 / n,
            clamped: 0,
        },
        policy_grads: grads,
        value_grads: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoLossConfig {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
}

/// PPO: clipped surrogate on GAE advantages, plus value MSE and entropy terms.
pub fn ppo_loss(
    policy: &PolicyNet,
    value: &DenseNet,
    batch: &StepBatch,
    idx: &[usize],
    cfg: &PpoLossConfig,
) -> Result<LossOutput> {
    let mut out = clipped_step_loss(policy, batch, idx, cfg.clip_eps, cfg.entropy_coef)?;
    let n = idx.len() as f64;
    let mut vgrads = Gradients::zeros_like(value);
    let mut vloss = 0.0;
    for &i in idx {
        let trace = value.forward_trace(&policy.prepare(&batch.states[i]))?;
        let err = trace.output()[0] - batch.returns[i];
        vloss += err * err;
        value.accumulate_backward(&trace, &[cfg.value_coef * 2.0 * err / n], &mut vgrads)?;
    }
    let value_loss = vloss / n;
    out.stats.value_loss = value_loss;
    out.stats.loss += cfg.value_coef * value_loss;
    out.value_grads = Some(vgrads);
    Ok(out)
}

/// GRPO: the per-step clipped surrogate with each step weighted by its
/// episode's group advantage. No value network.
pub fn grpo_loss(
    policy: &PolicyNet,
    batch: &StepBatch,
    idx: &[usize],
    eps: f64,
    entropy_coef: f64,
) -> Result<LossOutput> {
    clipped_step_loss(policy, batch, idx, eps, entropy_coef)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceRatio {
    pub ratio: f64,
    pub log_ratio: f64,
    pub clamped: bool,
}

fn sequence_ratio_from_sum(log_ratio: f64, bound: f64) -> Result<SequenceRatio> {
    if !log_ratio.is_finite() {
        return Err(Error::NonFinite("sequence log-ratio".into()));
    }
    let clamped = log_ratio.abs() > bound;
    let ratio = check_ratio(log_ratio.clamp(-bound, bound).exp())?;
    if clamped {
        log::debug!("sequence log-ratio {log_ratio} clamped to ±{bound}");
    }
    Ok(SequenceRatio {
        ratio,
        log_ratio,
        clamped,
    })
}

/// `exp(Σ log π_θ − Σ log π_old)` over one episode, summed in log space.
pub fn gspo_ratio(traj: &EpisodeTrajectory, policy: &PolicyNet, bound: f64) -> Result<SequenceRatio> {
    let sample = SequenceSample::from_trajectory(traj, 0.0)?;
    let mut new_sum = 0.0;
    for (s, a) in sample.states.iter().zip(&sample.actions) {
        new_sum += policy.log_prob(s, *a)?;
    }
    let old_sum: f64 = sample.old_log_probs.iter().sum();
    sequence_ratio_from_sum(new_sum - old_sum, bound)
}

/// GSPO: one clipped term per episode, averaged over the group.
pub fn gspo_loss(
    policy: &PolicyNet,
    episodes: &[SequenceSample],
    eps: f64,
    entropy_coef: f64,
    log_ratio_bound: f64,
) -> Result<LossOutput> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("empty episode group".into()));
    }
    let g = episodes.len() as f64;
    let total_steps: usize = episodes.iter().map(|e| e.actions.len()).sum();
    if total_steps == 0 {
        return Err(Error::InvalidInput("episodes have no steps".into()));
    }
    let steps = total_steps as f64;
    let mut grads = Gradients::zeros_like(&policy.trunk);
    let (mut surr_sum, mut ent_sum, mut clipped, mut clamped) = (0.0, 0.0, 0usize, 0usize);

    for ep in episodes {
        let traces = ep
            .states
            .iter()
            .map(|s| policy.trunk.forward_trace(&policy.prepare(s)))
            .collect::<Result<Vec<_>>>()?;
        let log_probs: Vec<Vec<f64>> = traces.iter().map(|t| log_softmax(t.output())).collect();
        let log_ratio: f64 = log_probs
            .iter()
            .zip(&ep.actions)
            .zip(&ep.old_log_probs)
            .map(|((lp, a), old)| lp[a.index()] - old)
            .sum();
        let ratio = sequence_ratio_from_sum(log_ratio, log_ratio_bound)?;
        surr_sum += clipped_surrogate(ratio.ratio, ep.advantage, eps);
        let mut coef = surrogate_log_ratio_grad(ratio.ratio, ep.advantage, eps);
        if ratio.clamped {
            clamped += 1;
            coef = 0.0;
        }
        if coef == 0.0 && ep.advantage != 0.0 {
            clipped += 1;
        }
        for ((trace, lp), a) in traces.iter().zip(&log_probs).zip(&ep.actions) {
            let (upstream, h) = logit_grad(lp, *a, -coef / g, -entropy_coef / steps);
            ent_sum += h;
            policy.trunk.accumulate_backward(trace, &upstream, &mut grads)?;
        }
    }
    let surrogate = surr_sum / g;
    let ent = ent_sum / steps;
    Ok(LossOutput {
        stats: LossStats {
            loss: -surrogate - entropy_coef * ent,
            surrogate,
            entropy: ent,
            value_loss: 0.0,
            clip_fraction: clipped as f64 / g,
            clamped,
        },
        policy_grads: grads,
        value_grads: None,
    })
}
