//! Sub-question annotation and reasoner training with gated in-context
//! distillation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decomposer::{batch_indices, format_check, parse_subquestions};
use crate::env::{render_decomposer_prompt, render_prompt, EnvConfig, PromptStyle, SubQuestionList, TaskInstance};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::par::Exec;
use crate::policy::{PolicyParams, Rollout, Sampling};
use crate::rlvr::{assign_advantages, rlvr_gradient, sample_groups, Job, Learner, RlvrConfig, StepStats};
use crate::rng::{StreamRng, Streams};
use crate::vocab::Token;

/// A task paired with its sub-questions. `flagged` marks tasks whose
/// decomposer samples never passed the format check; those carry an empty list.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedInstance {
    pub task: TaskInstance,
    pub subq: SubQuestionList,
    /// The accepted decomposer response (empty when flagged).
    pub response: Vec<Token>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2dConfig {
    pub k1: f64,
    pub k2: f64,
    pub alpha: f64,
    pub selection_enabled: bool,
    pub diversity_enabled: bool,
}

impl Default for A2dConfig {
    fn default() -> Self {
        Self {
            k1: 0.25,
            k2: 0.25,
            alpha: 1.0,
            selection_enabled: true,
            diversity_enabled: true,
        }
    }
}

impl A2dConfig {
    pub fn validate(&self) -> Result<()> {
        // k1 = 0 is accepted: it switches the gate off entirely
        if !(0.0..=1.0).contains(&self.k1) {
            return Err(Error::Config(format!("a2d.k1 must be in [0, 1], got {}", self.k1)));
        }
        if !(self.k2 > 0.0 && self.k2 <= 1.0) {
            return Err(Error::Config(format!("a2d.k2 must be in (0, 1], got {}", self.k2)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("a2d.alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// `floor(k2 * n)`, robust to representation error in `k2`.
    pub fn cap(&self, n_rollout: usize) -> usize {
        (self.k2 * n_rollout as f64 + 1e-9).floor() as usize
    }
}

/// One line of the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: u64,
    pub subquestions: SubQuestionList,
    pub response_hash: String,
    pub flagged: bool,
    pub attempts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub n_tasks: usize,
    pub n_flagged: usize,
    pub total_attempts: usize,
}

pub fn response_hash(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.0.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Samples a decomposition per task, retrying failed parses up to
/// `max_retries` times.
pub fn annotate_dataset(
    decomposer: &PolicyParams,
    dataset: &[TaskInstance],
    sampling: &Sampling,
    max_len: usize,
    min_content_chars: usize,
    max_retries: usize,
    streams: &Streams,
    exec: Exec,
) -> Result<(Vec<AnnotatedInstance>, Vec<AnnotationRecord>, AnnotationReport)> {
    let out = exec.map(dataset, |i, task| -> Result<(AnnotatedInstance, AnnotationRecord)> {
        let prompt = render_decomposer_prompt(task);
        for attempt in 0..=max_retries {
            let mut rng = streams.rng("annotate", &[i as u64, attempt as u64]);
            let r = decomposer.sample(&prompt, sampling, max_len, &mut rng)?;
            if format_check(&r.tokens, min_content_chars).passes() {
                let subq = parse_subquestions(&r.tokens).expect("format check implies a parse");
                let rec = AnnotationRecord {
                    task_id: task.task_id,
                    subquestions: subq.clone(),
                    response_hash: response_hash(&r.tokens),
                    flagged: false,
                    attempts: attempt + 1,
                };
                let inst = AnnotatedInstance {
                    task: task.clone(),
                    subq,
                    response: r.tokens,
                    flagged: false,
                };
                return Ok((inst, rec));
            }
        }
        Ok((
            AnnotatedInstance {
                task: task.clone(),
                subq: SubQuestionList::empty(),
                response: Vec::new(),
                flagged: true,
            },
            AnnotationRecord {
                task_id: task.task_id,
                subquestions: SubQuestionList::empty(),
                response_hash: response_hash(&[]),
                flagged: true,
                attempts: max_retries + 1,
            },
        ))
    });
    let mut insts = Vec::with_capacity(dataset.len());
    let mut recs = Vec::with_capacity(dataset.len());
    for r in out {
        let (a, b) = r?;
        insts.push(a);
        recs.push(b);
    }
    let report = AnnotationReport {
        n_tasks: recs.len(),
        n_flagged: recs.iter().filter(|r| r.flagged).count(),
        total_attempts: recs.iter().map(|r| r.attempts).sum(),
    };
    Ok((insts, recs, report))
}

/// Rebuilds annotated instances from a task set and its annotation records.
pub fn join_annotations(tasks: &[TaskInstance], records: &[AnnotationRecord]) -> Result<Vec<AnnotatedInstance>> {
    let by_id: std::collections::HashMap<u64, &AnnotationRecord> = records.iter().map(|r| (r.task_id, r)).collect();
    tasks
        .iter()
        .map(|t| {
            let r = by_id
                .get(&t.task_id)
                .ok_or_else(|| Error::Mismatch(format!("task {} has no annotation", t.task_id)))?;
            Ok(AnnotatedInstance {
                task: t.clone(),
                subq: r.subquestions.clone(),
                response: r.subquestions.to_tokens(),
                flagged: r.flagged,
            })
        })
        .collect()
}

/// Indices of the kept positives: a seeded shuffle of the positives, then
/// the first `min(N_pos, cap)`.
pub fn select_positive(rollouts: &[Rollout], cap: usize, env: &EnvConfig, rng: &mut StreamRng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..rollouts.len())
        .filter(|&i| env.is_success(rollouts[i].reward))
        .collect();
    pos.shuffle(rng);
    pos.truncate(cap);
    pos
}

/// Value and gradient of the distillation loss.
#[derive(Clone, Debug)]
pub struct IdlOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Conditioning prompt used for each selected response.
    pub prompts: Vec<Vec<Token>>,
}

/// `-(1/|S|) sum_j log pi(y_j | prompt_j)`, where `prompt_j` is a diversity
/// prompt (variant drawn from `rng`) or the vanilla prompt. No sub-question
/// tokens ever enter the conditioning prompt.
pub fn idl_loss(
    params: &PolicyParams,
    task: &TaskInstance,
    selected: &[&[Token]],
    diversity: Option<usize>,
    rng: &mut StreamRng,
) -> Result<IdlOutput> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n = selected.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut prompts = Vec::with_capacity(selected.len());
    for &y in selected {
        let style = match diversity {
            Some(nv) if nv > 0 => PromptStyle::Diversity(rng.random_range(0..nv)),
            _ => PromptStyle::Vanilla,
        };
        let prompt = render_prompt(task, style, None)?;
        let trace = params.trace(&prompt, y)?;
        loss -= trace.logprobs.iter().sum::<f64>() / n;
        params.accumulate_backward(&trace, &vec![-1.0 / n; y.len()], &mut grad)?;
        prompts.push(prompt);
    }
    Ok(IdlOutput { loss, grad, prompts })
}

/// How the reasoner's training prompts are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPrompt {
    #[default]
    Vanilla,
    /// Sub-question hints in the training prompt (plain RLVR on guided prompts).
    WithSubQuestions,
}

/// One line of the reasoner metrics stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub gate_rate: f64,
    pub guided_mean_reward: Option<f64>,
    pub n_selected: usize,
    pub idl_loss: Option<f64>,
    pub rlvr: StepStats,
}

/// Verified guided responses to distill for one question of a wave.
#[derive(Clone, Debug, PartialEq)]
pub struct Distill {
    /// Position of the question in the wave's batch.
    pub slot: usize,
    pub responses: Vec<Vec<Token>>,
}

/// Everything sampled for one wave before any update.
#[derive(Clone, Debug)]
pub struct Wave {
    /// Unguided groups, with advantages assigned.
    pub groups: Vec<crate::rlvr::RolloutGroup>,
    pub distill: Vec<Distill>,
    pub mean_reward: f64,
    pub gated: usize,
    pub guided_mean_reward: Option<f64>,
}

/// Samples the unguided groups of a wave and, for gated questions, the
/// guided rollouts and the selected positives. Questions whose unguided mean
/// reward is below `k1` are gated.
#[allow(clippy::too_many_arguments)]
pub fn sample_wave(
    params: &PolicyParams,
    data: &[AnnotatedInstance],
    batch: &[usize],
    env: &EnvConfig,
    a2d: Option<&A2dConfig>,
    train_prompt: TrainPrompt,
    cfg: &RlvrConfig,
    streams: &Streams,
    step: u64,
    exec: Exec,
) -> Result<Wave> {
    let sampling = cfg.sampling();
    let jobs = batch
        .iter()
        .map(|&i| {
            let inst = &data[i];
            let (style, subq) = match train_prompt {
                TrainPrompt::WithSubQuestions if !inst.subq.is_empty() => (PromptStyle::WithSubQuestions, Some(&inst.subq)),
                _ => (PromptStyle::Vanilla, None),
            };
            Ok(Job {
                task_id: inst.task.task_id,
                prompt: render_prompt(&inst.task, style, subq)?,
                guided: style == PromptStyle::WithSubQuestions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut groups = sample_groups(
        params,
        &jobs,
        cfg.n_rollout,
        &sampling,
        cfg.max_len,
        streams,
        "unguided",
        step,
        exec,
        |j, _, toks| env.verify(&data[batch[j]].task, toks),
    )?;
    let mean_reward = groups.iter().map(|g| g.mean_reward()).sum::<f64>() / groups.len().max(1) as f64;

    let mut distill: Vec<Distill> = Vec::new();
    let mut gated = 0usize;
    let mut guided_mean_reward = None;
    if let Some(a) = a2d {
        let gate: Vec<usize> = (0..batch.len())
            .filter(|&s| !data[batch[s]].subq.is_empty() && a.k1 > groups[s].mean_reward())
            .collect();
        gated = gate.len();
        if !gate.is_empty() {
            let gjobs = gate
                .iter()
                .map(|&s| {
                    let inst = &data[batch[s]];
                    Ok(Job {
                        task_id: inst.task.task_id,
                        prompt: render_prompt(&inst.task, PromptStyle::WithSubQuestions, Some(&inst.subq))?,
                        guided: true,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let guided = sample_groups(
                params,
                &gjobs,
                cfg.n_rollout,
                &sampling,
                cfg.max_len,
                streams,
                "guided",
                step,
                exec,
                |j, _, toks| env.verify(&data[batch[gate[j]]].task, toks),
            )?;
            guided_mean_reward = Some(guided.iter().map(|g| g.mean_reward()).sum::<f64>() / guided.len() as f64);
            for (g, &s) in guided.iter().zip(&gate) {
                let cap = if a.selection_enabled { a.cap(cfg.n_rollout) } else { usize::MAX };
                let mut rng = streams.rng("select", &[step, s as u64]);
                let sel = select_positive(&g.rollouts, cap, env, &mut rng);
                if !sel.is_empty() {
                    distill.push(Distill {
                        slot: s,
                        responses: sel.iter().map(|&i| g.rollouts[i].tokens.clone()).collect(),
                    });
                }
            }
        }
    }
    assign_advantages(&mut groups, cfg.estimator)?;
    Ok(Wave {
        groups,
        distill,
        mean_reward,
        gated,
        guided_mean_reward,
    })
}

/// Gradient applied for mini-batch `chunk` of a wave.
pub struct MiniBatchGradient {
    pub grad: Vec<f64>,
    pub stats: StepStats,
    /// Distillation loss of each gated question in the mini-batch.
    pub idl_losses: Vec<f64>,
}

/// Gradient of the RLVR loss over mini-batch `chunk`, plus `alpha / |chunk|`
/// times the distillation gradient of every gated question in it.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_gradient(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    wave: &Wave,
    chunk: usize,
    data: &[AnnotatedInstance],
    batch: &[usize],
    env: &EnvConfig,
    a2d: Option<&A2dConfig>,
    cfg: &RlvrConfig,
    streams: &Streams,
    step: u64,
    exec: Exec,
) -> Result<MiniBatchGradient> {
    let lo = chunk * cfg.mini_batch;
    let hi = (lo + cfg.mini_batch).min(wave.groups.len());
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("mini-batch {chunk} is out of range")));
    }
    let g = rlvr_gradient(params, reference, &wave.groups[lo..hi], cfg, exec)?;
    let (mut grad, mut stats) = (g.grad, g.stats);
    let mut idl_losses = Vec::new();
    let alpha = a2d.map_or(0.0, |a| a.alpha);
    if alpha > 0.0 {
        let diversity = a2d.and_then(|a| a.diversity_enabled.then_some(env.n_variants));
        let mine: Vec<&Distill> = wave.distill.iter().filter(|d| d.slot >= lo && d.slot < hi).collect();
        let parts = exec.map(&mine, |_, d| {
            let sel: Vec<&[Token]> = d.responses.iter().map(|r| r.as_slice()).collect();
            let mut rng = streams.rng("diversity", &[step, d.slot as u64]);
            idl_loss(params, &data[batch[d.slot]].task, &sel, diversity, &mut rng)
        });
        // per-question gating, averaged over every question in the mini-batch
        let w = alpha / (hi - lo) as f64;
        for p in parts {
            let p = p?;
            for (x, y) in grad.iter_mut().zip(&p.grad) {
                *x += w * y;
            }
            stats.loss += w * p.loss;
            idl_losses.push(p.loss);
        }
    }
    Ok(MiniBatchGradient { grad, stats, idl_losses })
}

/// One sampling wave of reasoner training over the questions `batch`.
/// With `a2d = None` this is plain RLVR; otherwise questions whose unguided
/// mean reward is below `k1` are rolled out again with their sub-questions
/// and the verified guided responses are distilled into the unguided prompt.
#[allow(clippy::too_many_arguments)]
pub fn a2d_step(
    learner: &mut Learner,
    data: &[AnnotatedInstance],
    batch: &[usize],
    env: &EnvConfig,
    a2d: Option<&A2dConfig>,
    train_prompt: TrainPrompt,
    streams: &Streams,
    step: u64,
) -> Result<ReasonerRecord> {
    let cfg: RlvrConfig = learner.config.clone();
    let exec = learner.exec;
    let wave = sample_wave(&learner.params, data, batch, env, a2d, train_prompt, &cfg, streams, step, exec)?;
    let n_chunks = wave.groups.len().div_ceil(cfg.mini_batch);
    let mut updates = Vec::new();
    let mut idl_losses = Vec::new();
    for _ in 0..cfg.epochs {
        for c in 0..n_chunks {
            let mb = minibatch_gradient(
                &learner.params,
                learner.reference.as_ref(),
                &wave,
                c,
                data,
                batch,
                env,
                a2d,
                &cfg,
                streams,
                step,
                exec,
            )?;
            learner.apply(&mb.grad)?;
            let mut stats = mb.stats;
            stats.step = learner.updates;
            updates.push(stats);
            idl_losses.extend(mb.idl_losses);
        }
    }
    Ok(ReasonerRecord {
        step,
        mean_reward: wave.mean_reward,
        gate_rate: wave.gated as f64 / batch.len().max(1) as f64,
        guided_mean_reward: wave.guided_mean_reward,
        n_selected: wave.distill.iter().map(|d| d.responses.len()).sum(),
        idl_loss: (!idl_losses.is_empty()).then(|| idl_losses.iter().sum::<f64>() / idl_losses.len() as f64),
        rlvr: crate::rlvr::summarize(step, wave.mean_reward, &updates),
    })
}

/// Runs `steps` waves of reasoner training.
#[allow(clippy::too_many_arguments)]
pub fn train_reasoner(
    init: PolicyParams,
    data: &[AnnotatedInstance],
    rlvr: &RlvrConfig,
    env: &EnvConfig,
    a2d: Option<&A2dConfig>,
    train_prompt: TrainPrompt,
    steps: usize,
    streams: &Streams,
    exec: Exec,
    mut on_step: impl FnMut(&ReasonerRecord, &PolicyParams) -> Result<()>,
) -> Result<PolicyParams> {
    if let Some(a) = a2d {
        a.validate()?;
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("reasoner dataset is empty".into()));
    }
    let mut learner = Learner::new(init, rlvr.clone(), exec)?;
    for step in 0..steps as u64 {
        let batch = batch_indices(streams, step, data.len(), rlvr.train_batch);
        let rec = a2d_step(&mut learner, data, &batch, env, a2d, train_prompt, streams, step)?;
        on_step(&rec, &learner.params)?;
    }
    Ok(learner.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_floors() {
        let a = A2dConfig { k2: 0.25, ..Default::default() };
        assert_eq!(a.cap(32), 8);
        assert_eq!(a.cap(7), 1);
        assert_eq!(A2dConfig { k2: 0.29, ..Default::default() }.cap(100), 29);
    }

    #[test]
    fn validation() {
        assert!(A2dConfig { k1: 0.0, ..Default::default() }.validate().is_ok());
        assert!(A2dConfig { k2: 0.0, ..Default::default() }.validate().is_err());
        assert!(A2dConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
    }
}
