//! Supervised warm-up that turns a random init into the "pretrained"
//! backbone every later phase starts from.
//!
//! The curriculum teaches three skills on freshly generated tasks: answering
//! chains from the bare question, answering chains when sub-question hints
//! are present, and decomposing chains. The default mix shows hinted chains
//! far more often than bare ones, so the backbone follows hints well but
//! composes long chains on its own only occasionally.

use serde::{Deserialize, Serialize};

use crate::env::{generate_task, oracle_decompose, render_decomposer_prompt, render_prompt, EnvConfig, PromptStyle};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::policy::PolicyParams;
use crate::rng::Streams;
use crate::vocab::Token;
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub steps: usize,
    pub batch: usize,
    /// Longest chain shown without hints.
    pub vanilla_len_max: usize,
    /// Longest chain the decomposition examples use.
    pub decompose_len_max: usize,
    /// Relative frequency of vanilla, guided and decomposition examples.
    pub mix: [usize; 3],
    pub optimizer: AdamConfig,
    /// Probability mass moved from each target token to a uniform spread over
    /// the vocab. Keeps the backbone from becoming certain about the skills it
    /// has not been taught.
    pub label_smoothing: f64,
    /// Learning rate reached at the last step by linear decay.
    pub lr_final: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 32,
            vanilla_len_max: 3,
            decompose_len_max: 3,
            mix: [2, 48, 1],
            optimizer: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            label_smoothing: 0.01,
            lr_final: 1e-3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mix.iter().sum::<usize>() == 0 {
            return Err(Error::Config("backbone.mix must have a positive entry".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_final.is_finite()) {
            return Err(Error::Config("backbone.lr_final must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("backbone.label_smoothing must be in [0, 1)".into()));
        }
        if self.batch == 0 || self.vanilla_len_max == 0 || self.decompose_len_max == 0 {
            return Err(Error::Config("backbone.batch and chain lengths must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Vanilla,
    Guided,
    Decompose,
}

/// One teacher-forced example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub kind: ExampleKind,
    pub prompt: Vec<Token>,
    pub target: Vec<Token>,
}

/// The `i`-th example of warm-up step `step`; its kind is drawn with
/// probabilities proportional to `mix`.
pub fn example(env: &EnvConfig, cfg: &BackboneConfig, streams: &Streams, step: u64, i: usize) -> Result<Example> {
    let mut rng = streams.rng("backbone-data", &[step, i as u64]);
    let total: usize = cfg.mix.iter().sum();
    let mut slot = rng.random_range(0..total);
    let mut kind = ExampleKind::Decompose;
    for (k, &m) in [ExampleKind::Vanilla, ExampleKind::Guided, ExampleKind::Decompose].iter().zip(&cfg.mix) {
        if slot < m {
            kind = *k;
            break;
        }
        slot -= m;
    }
    let max_len = match kind {
        ExampleKind::Vanilla => cfg.vanilla_len_max,
        ExampleKind::Guided => env.chain_len_max,
        ExampleKind::Decompose => cfg.decompose_len_max,
    };
    let len = rng.random_range(1..=max_len);
    let task = generate_task(u64::MAX - i as u64, rng.random(), len, env.modulus);
    Ok(match kind {
        ExampleKind::Vanilla => Example {
            kind,
            // the instruction variants are paraphrases of the plain instruction
            prompt: match rng.random_range(0..=env.n_variants) {
                0 => render_prompt(&task, PromptStyle::Vanilla, None)?,
                v => render_prompt(&task, PromptStyle::Diversity(v - 1), None)?,
            },
            target: task.reference_solution(),
        },
        ExampleKind::Guided => Example {
            kind,
            prompt: render_prompt(&task, PromptStyle::WithSubQuestions, Some(&oracle_decompose(&task)))?,
            target: task.reference_solution(),
        },
        ExampleKind::Decompose => {
            let mut target = oracle_decompose(&task).to_tokens();
            target.push(Token::EOS);
            Example {
                kind,
                prompt: render_decomposer_prompt(&task),
                target,
            }
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecord {
    pub step: u64,
    /// Mean per-token negative log-likelihood over the batch.
    pub loss: f64,
}

/// Minimizes the mean per-token negative log-likelihood of the curriculum.
pub fn warmup(
    init: PolicyParams,
    env: &EnvConfig,
    cfg: &BackboneConfig,
    streams: &Streams,
    exec: Exec,
    mut on_step: impl FnMut(&BackboneRecord) -> Result<()>,
) -> Result<PolicyParams> {
    cfg.validate()?;
    env.validate()?;
    let mut params = init;
    let mut opt = Adam::new(cfg.optimizer, params.len());
    let p = params.len();
    for step in 0..cfg.steps as u64 {
        let frac = step as f64 / cfg.steps.max(1) as f64;
        opt.config.lr = cfg.optimizer.lr + (cfg.lr_final - cfg.optimizer.lr) * frac;
        let batch = (0..cfg.batch)
            .map(|i| example(env, cfg, streams, step, i))
            .collect::<Result<Vec<_>>>()?;
        let n = batch.len() as f64;
        let errors = std::sync::Mutex::new(None);
        let acc = exec.sum_vectors(&batch, p + 1, 4, |_, ex, acc| {
            let res = params.trace(&ex.prompt, &ex.target).and_then(|tr| {
                let m = ex.target.len() as f64;
                let (grad, extra) = acc.split_at_mut(p);
                extra[0] -= tr.logprobs.iter().sum::<f64>() / (m * n);
                params.accumulate_backward_smoothed(&tr, &vec![-1.0 / (m * n); ex.target.len()], cfg.label_smoothing, grad)
            });
            if let Err(e) = res {
                errors.lock().expect("error slot").get_or_insert(e);
            }
        });
        if let Some(e) = errors.into_inner().expect("error slot") {
            return Err(e);
        }
        opt.step(params.values_mut(), &acc[..p])?;
        if !params.all_finite() {
            return Err(Error::NonFiniteLoss { group: 0, task_id: step });
        }
        on_step(&BackboneRecord { step, loss: acc[p] })?;
    }
    Ok(params.with_lineage(format!("backbone:{}", cfg.steps)))
}
