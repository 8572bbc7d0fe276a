//! Two-stage training of the rewrite policy.
//!
//! Stage one is full-batch gradient descent on the negative log-likelihood of
//! the mined targets. Stage two alternates between drawing groups of
//! candidates under a snapshot of the parameters and descending the hybrid
//! loss
//!
//! ```text
//! L = L_sft - beta * mean_r[ (1/G) sum_i ratio_i * A_i - gamma * KL(pi || pi_ref) ]
//! ```
//!
//! where `ratio_i = pi(d_i) / pi_old(d_i)`, `A_i` are group-normalized
//! advantages and `pi_ref` is frozen at the end of stage one. Advantages and
//! `pi_old` are constants; the KL term is exact over the candidate set.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::TrainingSample;
use crate::policy::{log_softmax, target_key, FeatureVector, PolicyDistribution, PolicyInput, PolicyParams, DIM};
use crate::reward::{reward_for, RewardOracle, RewardParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon_adv: f64,
    pub learning_rate: f64,
    pub sft_epochs: usize,
    pub grpo_iters: usize,
    /// Inputs that receive a sampled group per iteration.
    pub rollout_batch: usize,
    /// Gradient steps taken per rollout snapshot.
    pub inner_steps: usize,
    pub seed: u64,
    pub reward: RewardParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            beta: 0.5,
            gamma: 0.1,
            epsilon_adv: 1e-8,
            learning_rate: 0.1,
            sft_epochs: 50,
            grpo_iters: 100,
            rollout_batch: 16,
            inner_steps: 1,
            seed: 0,
            reward: RewardParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.epsilon_adv > 0.0) {
            return bad("epsilon_adv must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative");
        }
        if self.rollout_batch == 0 || self.inner_steps == 0 {
            return bad("rollout_batch and inner_steps must be at least 1");
        }
        self.reward.validate()
    }
}

/// A training sample with its candidate set, features and per-candidate
/// rewards precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: PolicyInput,
    pub rewards: Vec<f64>,
    /// Position of the target among the candidates, if it is one.
    pub target: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub samples: Vec<PreparedSample>,
}

impl PreparedDataset {
    /// Rejecting serves the original query, so the reject candidate earns the
    /// reward of `q_orig`.
    pub fn new(dataset: &[TrainingSample], oracle: &RewardOracle, reward: &RewardParams) -> Self {
        let samples = dataset
            .par_iter()
            .map(|s| {
                let input = PolicyInput::new(&s.q_orig, &s.context, oracle);
                let orig_reward = reward_for(oracle.get_normalized(&input.query), reward);
                let rewards = input
                    .candidates
                    .iter()
                    .map(|c| {
                        if c.is_reject() {
                            orig_reward
                        } else {
                            reward_for(oracle.get_normalized(&c.key()), reward)
                        }
                    })
                    .collect();
                let target = input.position(&target_key(s.target.text()));
                PreparedSample {
                    input,
                    rewards,
                    target,
                }
            })
            .collect();
        PreparedDataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples whose target is among the candidates.
    pub fn usable(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].target.is_some())
            .collect()
    }

    /// Mean negative log-likelihood of the targets of `batch` and its exact
    /// gradient. Samples without a target are skipped.
    pub fn sft_loss_and_grad(&self, params: &PolicyParams, batch: &[usize]) -> Result<(f64, FeatureVector)> {
        let mut loss = 0.0;
        let mut grad = [0.0; DIM];
        let mut used = 0usize;
        for &i in batch {
            let s = &self.samples[i];
            let Some(t) = s.target else { continue };
            let (logp, g) = s.input.logprob_and_grad(params, t);
            loss -= logp;
            for k in 0..DIM {
                grad[k] -= g[k];
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::TrainingData(
                "no sample has its target among the generated candidates".into(),
            ));
        }
        let n = used as f64;
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss / n, grad))
    }

    /// Exact expected reward under the policy, averaged over `inputs`.
    pub fn expected_reward(&self, params: &PolicyParams, inputs: &[usize]) -> f64 {
        mean(inputs.iter().map(|&i| {
            let s = &self.samples[i];
            s.input
                .log_probs(params)
                .iter()
                .zip(&s.rewards)
                .map(|(l, r)| l.exp() * r)
                .sum::<f64>()
        }))
    }

    /// Mean probability assigned to the target over the usable samples.
    pub fn target_prob(&self, params: &PolicyParams) -> f64 {
        mean(self.samples.iter().filter_map(|s| {
            s.target.map(|t| s.input.log_probs(params)[t].exp())
        }))
    }

    /// Target probability of the uniform policy, averaged the same way.
    pub fn uniform_target_prob(&self) -> f64 {
        mean(
            self.samples
                .iter()
                .filter(|s| s.target.is_some())
                .map(|s| 1.0 / s.input.len() as f64),
        )
    }

    /// Mean exact KL(pi_params || pi_reference) over `inputs`.
    pub fn mean_kl(&self, params: &PolicyParams, reference: &PolicyParams, inputs: &[usize]) -> f64 {
        mean(inputs.iter().map(|&i| {
            let f = &self.samples[i].input.features;
            kl_logp(&log_softmax(&params.theta, f), &log_softmax(&reference.theta, f))
        }))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Loss and gradient of the supervised stage over every sample of `dataset`.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    dataset: &[TrainingSample],
    oracle: &RewardOracle,
) -> Result<(f64, FeatureVector)> {
    let data = PreparedDataset::new(dataset, oracle, &RewardParams::default());
    let all: Vec<usize> = (0..data.len()).collect();
    data.sft_loss_and_grad(params, &all)
}

/// Group-normalized advantages `(R_i - mean) / (std + eps)` with the
/// population standard deviation.
///
/// Deviations are computed from pairwise differences, so a constant shift of
/// the rewards cancels before any rounding happens.
pub fn grpo_advantages(rewards: &[f64], epsilon_adv: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 rewards per group, got {n}")));
    }
    let nf = n as f64;
    let dev: Vec<f64> = rewards
        .iter()
        .map(|ri| rewards.iter().map(|rj| ri - rj).sum::<f64>() / nf)
        .collect();
    let mut sq = 0.0;
    for j in 0..n {
        for k in j + 1..n {
            let d = rewards[j] - rewards[k];
            sq += d * d;
        }
    }
    let std = sq.sqrt() / nf;
    let denom = std + epsilon_adv;
    if denom == 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok(dev.into_iter().map(|d| d / denom).collect())
}

fn kl_logp(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

/// `sum_i p_i ln(p_i / q_i)` over a shared candidate list.
pub fn kl_exact(p: &PolicyDistribution, q: &PolicyDistribution) -> Result<f64> {
    if p.candidates != q.candidates || p.probs.len() != q.probs.len() {
        return Err(Error::Contract("distributions are over different candidates".into()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { pi * (pi / qi).ln() })
        .sum())
}

/// One sampled group for input `input` (an index into the prepared dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub input: usize,
    /// Candidate positions of the draws.
    pub draws: Vec<usize>,
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<f64>,
}

pub fn rollout(
    data: &PreparedDataset,
    input: usize,
    params_old: &PolicyParams,
    group_size: usize,
    rng_seed: u64,
) -> Result<GroupRollout> {
    let s = &data.samples[input];
    let logp = s.input.log_probs(params_old);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let draws = crate::policy::sample_indices(&probs, rng_seed, group_size)?;
    Ok(GroupRollout {
        input,
        rewards: draws.iter().map(|&d| s.rewards[d]).collect(),
        old_logprobs: draws.iter().map(|&d| logp[d]).collect(),
        draws,
    })
}

/// `pi(d_i) / pi_old(d_i)` for each draw of `r` under `params`.
pub fn ratios(data: &PreparedDataset, params: &PolicyParams, r: &GroupRollout) -> Vec<f64> {
    let logp = data.samples[r.input].input.log_probs(params);
    r.draws
        .iter()
        .zip(&r.old_logprobs)
        .map(|(&d, old)| (logp[d] - old).exp())
        .collect()
}

/// Per-term breakdown of the hybrid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridTerms {
    pub sft_loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub loss: f64,
}

pub fn hybrid_loss_and_grad(
    data: &PreparedDataset,
    params: &PolicyParams,
    params_ref: &PolicyParams,
    sft_batch: &[usize],
    rollouts: &[GroupRollout],
    cfg: &TrainConfig,
) -> Result<(HybridTerms, FeatureVector)> {
    let (sft_loss, sft_grad) = data.sft_loss_and_grad(params, sft_batch)?;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut rl_grad = [0.0; DIM];
    for r in rollouts {
        let input = &data.samples[r.input].input;
        let logp = input.log_probs(params);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let mean_phi = input.mean_features(&probs);
        let adv = grpo_advantages(&r.rewards, cfg.epsilon_adv)?;
        let g = r.draws.len() as f64;

        let mut s = 0.0;
        for ((&d, &a), &old) in r.draws.iter().zip(&adv).zip(&r.old_logprobs) {
            let ratio = (logp[d] - old).exp();
            if !ratio.is_finite() {
                return Err(Error::Numerical(format!("non-finite ratio for input {}", r.input)));
            }
            s += ratio * a / g;
            let phi = &input.features[d];
            for k in 0..DIM {
                rl_grad[k] += ratio * a / g * (phi[k] - mean_phi[k]);
            }
        }

        let logq = log_softmax(&params_ref.theta, &input.features);
        let kl_r = kl_logp(&logp, &logq);
        for ((p, phi), (lp, lq)) in probs.iter().zip(&input.features).zip(logp.iter().zip(&logq)) {
            if *p == 0.0 {
                continue;
            }
            let w = p * (lp - lq - kl_r);
            for k in 0..DIM {
                rl_grad[k] -= cfg.gamma * w * (phi[k] - mean_phi[k]);
            }
        }
        surrogate += s;
        kl += kl_r;
    }
    let m = rollouts.len().max(1) as f64;
    surrogate /= m;
    kl /= m;
    let rl = surrogate - cfg.gamma * kl;
    let loss = sft_loss - cfg.beta * rl;
    let mut grad = sft_grad;
    for k in 0..DIM {
        grad[k] -= cfg.beta * rl_grad[k] / m;
    }
    Ok((
        HybridTerms {
            sft_loss,
            surrogate,
            kl,
            loss,
        },
        grad,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub sft_loss: f64,
    /// Mean reward of the sampled groups.
    pub mean_reward: f64,
    pub kl_to_ref: f64,
    pub hybrid_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub std_convention: String,
    pub samples: usize,
    pub usable_samples: usize,
    pub skipped_samples: usize,
    pub sft_losses: Vec<f64>,
    pub uniform_target_prob: f64,
    pub post_sft_target_prob: f64,
    pub post_sft_mean_reward: f64,
    pub final_target_prob: f64,
    pub final_mean_reward: f64,
    pub final_kl_to_ref: f64,
    pub iterations: Vec<IterationStats>,
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3u64, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

fn step(params: &mut PolicyParams, grad: &FeatureVector, lr: f64) {
    for k in 0..DIM {
        params.theta[k] -= lr * grad[k];
    }
}

fn diverged(message: String, report: &TrainReport) -> Error {
    Error::Diverged {
        message,
        report: Box::new(report.clone()),
    }
}

pub fn train(
    dataset: &[TrainingSample],
    oracle: &RewardOracle,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::TrainingData("empty dataset".into()));
    }
    let data = PreparedDataset::new(dataset, oracle, &cfg.reward);
    train_prepared(&data, cfg)
}

pub fn train_prepared(data: &PreparedDataset, cfg: &TrainConfig) -> Result<(PolicyParams, TrainReport)> {
    cfg.validate()?;
    let usable = data.usable();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        std_convention: "population".into(),
        samples: data.len(),
        usable_samples: usable.len(),
        skipped_samples: data.len() - usable.len(),
        ..Default::default()
    };
    if usable.is_empty() {
        return Err(Error::TrainingData(
            "no sample has its target among the generated candidates".into(),
        ));
    }
    if report.skipped_samples > 0 {
        log::info!("{} samples skipped: target not among candidates", report.skipped_samples);
    }
    report.uniform_target_prob = data.uniform_target_prob();

    let mut params = PolicyParams::default();
    for epoch in 0..cfg.sft_epochs {
        let (loss, grad) = data.sft_loss_and_grad(&params, &usable)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(format!("non-finite SFT loss at epoch {epoch}"), &report));
        }
        report.sft_losses.push(loss);
        step(&mut params, &grad, cfg.learning_rate);
    }
    let reference = params;
    report.post_sft_target_prob = data.target_prob(&params);
    report.post_sft_mean_reward = data.expected_reward(&params, &all);

    for it in 0..cfg.grpo_iters {
        let old = params;
        let mut batch: Vec<usize> = if cfg.rollout_batch >= all.len() {
            all.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, it as u64]));
            sample(&mut rng, all.len(), cfg.rollout_batch).into_vec()
        };
        batch.sort_unstable();
        let rollouts = batch
            .par_iter()
            .map(|&i| rollout(data, i, &old, cfg.group_size, mix(&[cfg.seed, it as u64, i as u64, 1])))
            .collect::<Result<Vec<_>>>()?;
        let mut terms = None;
        for _ in 0..cfg.inner_steps {
            let (t, grad) = hybrid_loss_and_grad(data, &params, &reference, &usable, &rollouts, cfg)?;
            if !t.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite hybrid loss at iteration {it}"), &report));
            }
            terms.get_or_insert(t);
            step(&mut params, &grad, cfg.learning_rate);
        }
        let t = terms.expect("inner_steps >= 1");
        let sampled = mean(rollouts.iter().flat_map(|r| r.rewards.iter().copied()));
        report.iterations.push(IterationStats {
            iteration: it,
            sft_loss: t.sft_loss,
            mean_reward: sampled,
            kl_to_ref: t.kl,
            hybrid_loss: t.loss,
        });
    }
    if !params.is_finite() {
        return Err(diverged("non-finite parameters".into(), &report));
    }
    report.final_target_prob = data.target_prob(&params);
    report.final_mean_reward = data.expected_reward(&params, &all);
    report.final_kl_to_ref = data.mean_kl(&params, &reference, &all);
    Ok((params, report))
}
