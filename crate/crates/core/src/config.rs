//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::a2d::{A2dConfig, TrainPrompt};
use crate::backbone::BackboneConfig;
use crate::decomposer::{DecomposerConfig, QualityMode};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::par::Exec;
use crate::policy::{PolicyShape, Sampling};
use crate::rlvr::{Estimator, RlvrConfig};
use crate::vocab::VOCAB_SIZE;

/// Which training recipe a run follows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain GRPO on the bare question.
    Grpo,
    /// Plain GRPO with twice the configured rollouts per question.
    GrpoN64,
    /// Decomposer, annotation, then gated in-context distillation.
    #[default]
    A2d,
    /// GRPO whose training prompts carry the decomposer's sub-questions.
    PromptWithSq,
    Rloo,
    Reinforcepp,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Grpo,
        Mode::GrpoN64,
        Mode::A2d,
        Mode::PromptWithSq,
        Mode::Rloo,
        Mode::Reinforcepp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::GrpoN64 => "grpo_n64",
            Mode::A2d => "a2d",
            Mode::PromptWithSq => "prompt_with_sq",
            Mode::Rloo => "rloo",
            Mode::Reinforcepp => "reinforcepp",
        }
    }

    /// Modes that train a decomposer and annotate the training set.
    pub fn uses_subquestions(self) -> bool {
        matches!(self, Mode::A2d | Mode::PromptWithSq)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Switches that remove one ingredient of the recipe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_format_reward: bool,
    /// Quality reward from a single proxy attempt.
    pub pass_at_1: bool,
    pub no_selection: bool,
    pub no_diversity: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.no_format_reward || self.pass_at_1 || self.no_selection || self.no_diversity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub mode: Mode,
    pub ablations: Ablations,
    /// Worker threads for rollout fan-out; 0 keeps the pool's default.
    pub workers: usize,
    pub exec: Exec,
    /// Reuse this backbone checkpoint instead of running the warm-up.
    pub backbone: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::A2d,
            ablations: Ablations::default(),
            workers: 0,
            exec: Exec::Parallel,
            backbone: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training tasks, chain lengths uniform over the env bounds.
    pub n_train: usize,
    /// Held-out tasks, all of length `eval_chain_len`.
    pub n_eval: usize,
    pub eval_chain_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 256,
            n_eval: 128,
            eval_chain_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerConfig {
    pub steps: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self { steps: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub k_list: Vec<usize>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    /// Also evaluate with oracle sub-questions in the prompt.
    pub with_oracle_hints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            k_list: vec![1, 2, 4, 8],
            temperature: 1.0,
            top_p: 1.0,
            max_len: 24,
            with_oracle_hints: false,
        }
    }
}

impl EvalConfig {
    pub fn sampling(&self) -> Sampling {
        Sampling {
            temperature: self.temperature,
            top_p: self.top_p,
            greedy: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub policy: PolicyShape,
    pub backbone: BackboneConfig,
    pub rlvr: RlvrConfig,
    pub decomposer: DecomposerConfig,
    pub a2d: A2dConfig,
    pub reasoner: ReasonerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        if self.policy.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "policy.vocab must equal the vocabulary size {VOCAB_SIZE}, got {}",
                self.policy.vocab
            )));
        }
        self.backbone.validate()?;
        self.rlvr.validate()?;
        self.decomposer.validate()?;
        self.a2d.validate()?;
        if self.data.n_eval == 0 {
            return Err(Error::Config("data.n_eval must be positive".into()));
        }
        if !(self.env.chain_len_min..=self.env.chain_len_max).contains(&self.data.eval_chain_len) {
            return Err(Error::Config(format!(
                "data.eval_chain_len {} is outside env.chain_len_min..=max",
                self.data.eval_chain_len
            )));
        }
        if self.eval.n_samples == 0 || self.eval.max_len == 0 {
            return Err(Error::Config("eval.n_samples and eval.max_len must be positive".into()));
        }
        if let Some(&k) = self.eval.k_list.iter().find(|&&k| k == 0 || k > self.eval.n_samples) {
            return Err(Error::Config(format!("eval.k_list entry {k} is outside [1, n_samples]")));
        }
        self.eval.sampling().validate().map_err(|e| Error::Config(e.to_string()))?;
        let ab = self.run.ablations;
        if (ab.no_selection || ab.no_diversity) && self.run.mode != Mode::A2d {
            return Err(Error::Config("selection and diversity ablations need mode a2d".into()));
        }
        if (ab.no_format_reward || ab.pass_at_1) && !self.run.mode.uses_subquestions() {
            return Err(Error::Config(format!(
                "decomposer ablations have no effect in mode {}",
                self.run.mode
            )));
        }
        Ok(())
    }

    /// Hash of everything that influences results. The backbone path is
    /// included; worker count and executor are not.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.run.workers = 0;
        c.run.exec = Exec::Parallel;
        sha256_hex(serde_json::to_string(&c).expect("serializable").as_bytes())
    }

    pub fn env_hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.env).expect("serializable").as_bytes())
    }

    /// RLVR settings after applying the mode.
    pub fn effective_rlvr(&self) -> RlvrConfig {
        let mut r = self.rlvr.clone();
        match self.run.mode {
            Mode::GrpoN64 => r.n_rollout *= 2,
            Mode::Rloo => r.estimator = Estimator::Rloo,
            Mode::Reinforcepp => r.estimator = Estimator::Reinforcepp,
            _ => {}
        }
        r
    }

    pub fn effective_decomposer(&self) -> DecomposerConfig {
        let mut d = self.decomposer.clone();
        if self.run.ablations.no_format_reward {
            d.format_reward_enabled = false;
        }
        if self.run.ablations.pass_at_1 {
            d.quality_mode = QualityMode::PassAt1;
        }
        d
    }

    /// The distillation settings, or `None` for modes that train with plain RLVR.
    pub fn effective_a2d(&self) -> Option<A2dConfig> {
        (self.run.mode == Mode::A2d).then(|| {
            let mut a = self.a2d.clone();
            a.selection_enabled &= !self.run.ablations.no_selection;
            a.diversity_enabled &= !self.run.ablations.no_diversity;
            a
        })
    }

    pub fn train_prompt(&self) -> TrainPrompt {
        match self.run.mode {
            Mode::PromptWithSq => TrainPrompt::WithSubQuestions,
            _ => TrainPrompt::Vanilla,
        }
    }
}
