//! Advantage estimators, the clipped importance-sampling surrogate, and the
//! parameter update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::policy::{PolicyParams, Rollout, Sampling};
use crate::rng::Streams;
use crate::vocab::Token;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Grpo,
    Rloo,
    Reinforcepp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlvrConfig {
    pub estimator: Estimator,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub n_rollout: usize,
    /// Questions per sampling wave.
    pub train_batch: usize,
    /// Questions per optimizer update; a wave gives `train_batch / mini_batch` updates.
    pub mini_batch: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub optimizer: AdamConfig,
}

impl Default for RlvrConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Grpo,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            n_rollout: 8,
            train_batch: 16,
            mini_batch: 8,
            epochs: 1,
            max_len: 24,
            temperature: 1.0,
            top_p: 1.0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl RlvrConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return fail(format!("clip ratios must be positive, got {} / {}", self.eps_low, self.eps_high));
        }
        if self.eps_low >= 1.0 {
            return fail(format!("eps_low must be < 1, got {}", self.eps_low));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.n_rollout < 2 {
            return fail(format!("n_rollout must be >= 2, got {}", self.n_rollout));
        }
        if self.train_batch == 0 || self.mini_batch == 0 || self.epochs == 0 || self.max_len == 0 {
            return fail("train_batch, mini_batch, epochs and max_len must be positive".into());
        }
        self.sampling().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optimizer.validate()
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: self.temperature,
            top_p: self.top_p,
            greedy: false,
        }
    }
}

/// `(R_i - mean) / std` with population std; all zeros when std = 0.
pub fn grpo_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("group of {} rollouts", rewards.len())));
    }
    Ok(z_normalize(rewards))
}

/// `R_i - mean(R_j, j != i)`.
pub fn rloo_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group of {g} rollouts")));
    }
    let total: f64 = rewards.iter().sum();
    let mut adv: Vec<f64> = rewards
        .iter()
        .map(|r| r - (total - r) / (g - 1) as f64)
        .collect();
    // remove rounding drift so the advantages sum to exactly zero
    let drift = adv.iter().sum::<f64>() / g as f64;
    if drift != 0.0 {
        for a in adv.iter_mut() {
            *a -= drift;
        }
    }
    Ok(adv)
}

/// Global z-normalization over every reward in the batch.
pub fn reinforcepp_advantage(batch: &[f64]) -> Result<Vec<f64>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!("batch of {} rewards", batch.len())));
    }
    Ok(z_normalize(batch))
}

fn z_normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// `min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A)`.
pub fn surrogate_term(ratio: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * adv).min(clipped * adv)
}

/// Whether the clipped branch is strictly the one selected by the min.
pub fn is_clipped(ratio: f64, adv: f64, eps_low: f64, eps_high: f64) -> bool {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    clipped * adv < ratio * adv
}

/// Derivative of the surrogate with respect to the new log-prob.
fn surrogate_logp_grad(ratio: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    if is_clipped(ratio, adv, eps_low, eps_high) {
        0.0
    } else {
        ratio * adv
    }
}

/// Per-token `exp(d) - d - 1` with `d = logp_ref - logp_new`.
pub fn kl_penalty(logp_new: &[f64], logp_ref: &[f64]) -> Result<Vec<f64>> {
    if logp_new.len() != logp_ref.len() {
        return Err(Error::LengthMismatch {
            expected: logp_new.len(),
            got: logp_ref.len(),
        });
    }
    Ok(logp_new.iter().zip(logp_ref).map(|(n, r)| k3(r - n)).collect())
}

fn k3(delta: f64) -> f64 {
    // expm1 keeps the estimate exactly zero at delta = 0 and nonnegative nearby
    (delta.exp_m1() - delta).max(0.0)
}

/// The rollouts sampled for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: u64,
    pub rollouts: Vec<Rollout>,
    /// Filled in once per wave by [`assign_advantages`].
    pub advantages: Option<Vec<f64>>,
}

impl RolloutGroup {
    pub fn new(task_id: u64, rollouts: Vec<Rollout>) -> Self {
        Self {
            task_id,
            rollouts,
            advantages: None,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rollouts.is_empty() {
            return 0.0;
        }
        self.rollouts.iter().map(|r| r.reward).sum::<f64>() / self.rollouts.len() as f64
    }
}

/// Computes advantages for every group of a wave.
pub fn assign_advantages(groups: &mut [RolloutGroup], estimator: Estimator) -> Result<()> {
    match estimator {
        Estimator::Grpo | Estimator::Rloo => {
            for g in groups.iter_mut() {
                let r = g.rewards();
                g.advantages = Some(if estimator == Estimator::Grpo {
                    grpo_advantage(&r)?
                } else {
                    rloo_advantage(&r)?
                });
            }
        }
        Estimator::Reinforcepp => {
            let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
            let adv = reinforcepp_advantage(&all)?;
            let mut at = 0;
            for g in groups.iter_mut() {
                let n = g.rollouts.len();
                g.advantages = Some(adv[at..at + n].to_vec());
                at += n;
            }
        }
    }
    Ok(())
}

/// Diagnostics of one optimizer update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    /// Token-mean surrogate objective `J`.
    pub surrogate: f64,
    /// Loss actually minimized (`-J` plus any extra terms).
    pub loss: f64,
    pub n_tokens: usize,
}

/// Gradient of `-J` over a set of groups, plus its diagnostics.
pub struct RlvrGradient {
    pub grad: Vec<f64>,
    pub stats: StepStats,
}

// extra accumulator slots appended after the parameter gradient
const X_SURR: usize = 0;
const X_OBJ: usize = 1;
const X_KL: usize = 2;
const X_CLIPPED: usize = 3;
const X_TOKENS: usize = 4;
const X_LEN: usize = 5;

/// Gradient of the loss `-J`, where `J` averages per-token
/// `surrogate - beta * kl` over tokens, then rollouts, then groups.
pub fn rlvr_gradient(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    groups: &[RolloutGroup],
    config: &RlvrConfig,
    exec: Exec,
) -> Result<RlvrGradient> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no rollout groups".into()));
    }
    let p = params.len();
    let n_groups = groups.len() as f64;
    let mut items = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let adv = g
            .advantages
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("group {gi} has no advantages")))?;
        if adv.len() != g.rollouts.len() {
            return Err(Error::LengthMismatch {
                expected: g.rollouts.len(),
                got: adv.len(),
            });
        }
        for (ri, r) in g.rollouts.iter().enumerate() {
            if r.behavior_logprobs.len() != r.tokens.len() {
                return Err(Error::LengthMismatch {
                    expected: r.tokens.len(),
                    got: r.behavior_logprobs.len(),
                });
            }
            if !r.tokens.is_empty() {
                items.push((gi, ri));
            }
        }
    }
    let (el, eh, beta) = (config.eps_low, config.eps_high, config.beta);
    let per_rollout = |_: usize, &(gi, ri): &(usize, usize), acc: &mut [f64]| -> Result<()> {
        let g = &groups[gi];
        let r = &g.rollouts[ri];
        let a = g.advantages.as_ref().expect("checked above")[ri];
        let trace = params.trace(&r.prompt, &r.tokens)?;
        let ref_lp = match reference {
            Some(rp) if beta > 0.0 => Some(rp.logprob(&r.prompt, &r.tokens)?),
            _ => None,
        };
        let scale = 1.0 / (n_groups * g.rollouts.len() as f64 * r.tokens.len() as f64);
        let mut weights = vec![0.0; r.tokens.len()];
        let (mut surr, mut kl, mut clipped) = (0.0, 0.0, 0.0);
        for t in 0..r.tokens.len() {
            let lp = trace.logprobs[t];
            let ratio = (lp - r.behavior_logprobs[t]).exp();
            surr += surrogate_term(ratio, a, el, eh);
            let mut w = surrogate_logp_grad(ratio, a, el, eh);
            if is_clipped(ratio, a, el, eh) {
                clipped += 1.0;
            }
            if let Some(rl) = &ref_lp {
                let delta = rl[t] - lp;
                kl += k3(delta);
                // d/dlogp of -beta * (exp(d) - d - 1)
                w -= beta * (1.0 - delta.exp());
            }
            // the loss is -J, so the log-prob weights flip sign
            weights[t] = -w * scale;
        }
        let obj = (surr - beta * kl) * scale;
        if !obj.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss {
                group: gi,
                task_id: g.task_id,
            });
        }
        let (grad, extra) = acc.split_at_mut(p);
        params.accumulate_backward(&trace, &weights, grad)?;
        extra[X_SURR] += surr * scale;
        extra[X_OBJ] += obj;
        extra[X_KL] += kl;
        extra[X_CLIPPED] += clipped;
        extra[X_TOKENS] += r.tokens.len() as f64;
        Ok(())
    };
    // errors are carried out of the reduction through a side slot per item
    let errors = std::sync::Mutex::new(None);
    let acc = exec.sum_vectors(&items, p + X_LEN, 8, |i, item, acc| {
        if let Err(e) = per_rollout(i, item, acc) {
            let mut slot = errors.lock().expect("error slot");
            if slot.is_none() {
                *slot = Some(e);
            }
        }
    });
    if let Some(e) = errors.into_inner().expect("error slot") {
        return Err(e);
    }
    let (grad, extra) = acc.split_at(p);
    let tokens = extra[X_TOKENS].max(1.0);
    let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    let stats = StepStats {
        step: 0,
        mean_reward: groups.iter().map(|g| g.mean_reward()).sum::<f64>() / n_groups,
        mean_advantage: groups
            .iter()
            .flat_map(|g| g.advantages.iter().flatten())
            .sum::<f64>()
            / n_rollouts.max(1) as f64,
        clip_fraction: extra[X_CLIPPED] / tokens,
        kl: extra[X_KL] / tokens,
        surrogate: extra[X_SURR],
        loss: -extra[X_OBJ],
        n_tokens: extra[X_TOKENS] as usize,
    };
    Ok(RlvrGradient {
        grad: grad.to_vec(),
        stats,
    })
}

/// Mutable training state: the single writer of a parameter vector.
#[derive(Clone, Debug)]
pub struct Learner {
    pub params: PolicyParams,
    pub optimizer: Adam,
    /// Frozen snapshot for the KL penalty.
    pub reference: Option<PolicyParams>,
    pub config: RlvrConfig,
    pub exec: Exec,
    pub updates: u64,
}

impl Learner {
    pub fn new(params: PolicyParams, config: RlvrConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let reference = (config.beta > 0.0).then(|| params.clone());
        Ok(Self {
            optimizer: Adam::new(config.optimizer, params.len()),
            params,
            reference,
            config,
            exec,
            updates: 0,
        })
    }

    /// Applies one update along the gradient of a loss.
    pub fn apply(&mut self, loss_grad: &[f64]) -> Result<()> {
        self.optimizer.step(self.params.values_mut(), loss_grad)?;
        if !self.params.all_finite() {
            return Err(Error::NonFiniteLoss { group: 0, task_id: 0 });
        }
        self.updates += 1;
        Ok(())
    }
}

/// One clipped-surrogate update on groups that already carry advantages.
pub fn rlvr_step(learner: &mut Learner, groups: &[RolloutGroup]) -> Result<StepStats> {
    let g = rlvr_gradient(
        &learner.params,
        learner.reference.as_ref(),
        groups,
        &learner.config,
        learner.exec,
    )?;
    learner.apply(&g.grad)?;
    let mut stats = g.stats;
    stats.step = learner.updates;
    Ok(stats)
}

/// A question to roll out: prompt plus bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub task_id: u64,
    pub prompt: Vec<Token>,
    pub guided: bool,
}

/// Samples `n` rollouts per job from stream `name` at `step` and scores them.
/// The generator for rollout `r` of job `j` is `streams.rng(name, [step, j, r])`.
#[allow(clippy::too_many_arguments)]
pub fn sample_groups<F>(
    params: &PolicyParams,
    jobs: &[Job],
    n: usize,
    sampling: &Sampling,
    max_len: usize,
    streams: &Streams,
    name: &str,
    step: u64,
    exec: Exec,
    reward: F,
) -> Result<Vec<RolloutGroup>>
where
    F: Fn(usize, usize, &[Token]) -> f64 + Sync + Send,
{
    let flat: Vec<(usize, usize)> = (0..jobs.len()).flat_map(|j| (0..n).map(move |r| (j, r))).collect();
    let rollouts = exec.map(&flat, |_, &(j, r)| -> Result<Rollout> {
        let mut rng = streams.rng(name, &[step, j as u64, r as u64]);
        let mut ro = params.sample(&jobs[j].prompt, sampling, max_len, &mut rng)?;
        ro.guided = jobs[j].guided;
        ro.reward = reward(j, r, &ro.tokens);
        Ok(ro)
    });
    let mut it = rollouts.into_iter();
    let mut groups = Vec::with_capacity(jobs.len());
    for job in jobs {
        let rs = it.by_ref().take(n).collect::<Result<Vec<_>>>()?;
        groups.push(RolloutGroup::new(job.task_id, rs));
    }
    Ok(groups)
}

/// Splits a wave into mini-batches and runs `epochs` passes of updates.
/// Advantages are computed once, over the whole wave.
pub fn wave_update(learner: &mut Learner, mut groups: Vec<RolloutGroup>) -> Result<Vec<StepStats>> {
    assign_advantages(&mut groups, learner.config.estimator)?;
    let mb = learner.config.mini_batch;
    let mut out = Vec::new();
    for _ in 0..learner.config.epochs {
        for chunk in groups.chunks(mb) {
            out.push(rlvr_step(learner, chunk)?);
        }
    }
    Ok(out)
}

/// Wave-level summary of per-update stats.
pub fn summarize(step: u64, groups_mean_reward: f64, updates: &[StepStats]) -> StepStats {
    let n = updates.len().max(1) as f64;
    StepStats {
        step,
        mean_reward: groups_mean_reward,
        mean_advantage: updates.iter().map(|s| s.mean_advantage).sum::<f64>() / n,
        clip_fraction: updates.iter().map(|s| s.clip_fraction).sum::<f64>() / n,
        kl: updates.iter().map(|s| s.kl).sum::<f64>() / n,
        surrogate: updates.iter().map(|s| s.surrogate).sum::<f64>() / n,
        loss: updates.iter().map(|s| s.loss).sum::<f64>() / n,
        n_tokens: updates.iter().map(|s| s.n_tokens).sum(),
    }
}
