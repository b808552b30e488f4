//! Decomposer: parsing of sub-question responses, the format x quality
//! reward, and RLVR training of the decomposer policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{is_span_content, render_decomposer_prompt, render_prompt, EnvConfig, PromptStyle, SubQuestionList, TaskInstance};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::policy::{PolicyParams, Sampling};
use crate::rlvr::{sample_groups, summarize, wave_update, Job, Learner, RlvrConfig, StepStats};
use crate::rng::{StreamRng, Streams};
use crate::vocab::{render_text, Token};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMode {
    #[default]
    PassAtK,
    PassAt1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposerConfig {
    pub steps: usize,
    pub n_proxy: usize,
    pub quality_mode: QualityMode,
    pub format_reward_enabled: bool,
    pub min_content_chars: usize,
    /// Resamples per task during annotation before giving up.
    pub max_retries: usize,
    pub proxy_temperature: f64,
    /// Learning rate of the decomposer's optimizer; the rest of the
    /// optimizer settings come from the RLVR config.
    pub lr: f64,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            n_proxy: 4,
            quality_mode: QualityMode::PassAtK,
            format_reward_enabled: true,
            min_content_chars: 10,
            max_retries: 3,
            proxy_temperature: 1.0,
            lr: 3e-3,
        }
    }
}

impl DecomposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_proxy == 0 {
            return Err(Error::Config("decomposer.n_proxy must be >= 1".into()));
        }
        if self.min_content_chars == 0 {
            return Err(Error::Config("decomposer.min_content_chars must be >= 1".into()));
        }
        if !(self.proxy_temperature > 0.0 && self.proxy_temperature.is_finite()) {
            return Err(Error::Config("decomposer.proxy_temperature must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("decomposer.lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn attempts(&self) -> usize {
        match self.quality_mode {
            QualityMode::PassAtK => self.n_proxy,
            QualityMode::PassAt1 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum ParseFailure {
    #[error("response does not begin with a sub-question tag")]
    MissingOpen,
    #[error("sub-question contains a nested opening tag")]
    NestedOpen,
    #[error("sub-question is never closed")]
    Unclosed,
    #[error("empty sub-question")]
    EmptySpan,
    #[error("token outside of any sub-question")]
    StrayToken,
    #[error("reserved token inside a sub-question")]
    ReservedToken,
}

/// Strips one trailing EOS.
fn body(tokens: &[Token]) -> &[Token] {
    match tokens.split_last() {
        Some((&Token::EOS, rest)) => rest,
        _ => tokens,
    }
}

/// Splits `OPEN .. CLOSE OPEN .. CLOSE [EOS]` into spans.
pub fn parse_subquestions(tokens: &[Token]) -> std::result::Result<SubQuestionList, ParseFailure> {
    let toks = body(tokens);
    if toks.first() != Some(&Token::SUBQ_OPEN) {
        return Err(ParseFailure::MissingOpen);
    }
    let mut items = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i] != Token::SUBQ_OPEN {
            return Err(ParseFailure::StrayToken);
        }
        let mut span = Vec::new();
        i += 1;
        loop {
            match toks.get(i) {
                None => return Err(ParseFailure::Unclosed),
                Some(&Token::SUBQ_CLOSE) => break,
                Some(&Token::SUBQ_OPEN) => return Err(ParseFailure::NestedOpen),
                Some(&t) if !is_span_content(t) => return Err(ParseFailure::ReservedToken),
                Some(&t) => span.push(t),
            }
            i += 1;
        }
        if span.is_empty() {
            return Err(ParseFailure::EmptySpan);
        }
        items.push(span);
        i += 1;
    }
    Ok(SubQuestionList::new(items).expect("spans validated while parsing"))
}

/// Best-effort spans for the no-format ablation: well-formed responses parse
/// normally, anything else keeps its span-content tokens as a single span.
pub fn lenient_subquestions(tokens: &[Token]) -> SubQuestionList {
    if let Ok(s) = parse_subquestions(tokens) {
        return s;
    }
    let content: Vec<Token> = tokens.iter().copied().filter(|&t| is_span_content(t)).collect();
    if content.is_empty() {
        SubQuestionList::empty()
    } else {
        SubQuestionList::new(vec![content]).expect("filtered to span content")
    }
}

/// Outcome of each format rule on one response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatCheck {
    pub begins_with_open: bool,
    pub no_nested_open: bool,
    pub long_enough: bool,
    pub parses: bool,
}

impl FormatCheck {
    pub fn passes(&self) -> bool {
        self.begins_with_open && self.no_nested_open && self.long_enough && self.parses
    }
}

pub fn format_check(tokens: &[Token], min_content_chars: usize) -> FormatCheck {
    let mut open = false;
    let mut nested = false;
    for &t in tokens {
        if t == Token::SUBQ_OPEN {
            nested |= open;
            open = true;
        } else if t == Token::SUBQ_CLOSE {
            open = false;
        }
    }
    FormatCheck {
        begins_with_open: tokens.first() == Some(&Token::SUBQ_OPEN),
        no_nested_open: !nested,
        long_enough: render_text(tokens).chars().count() > min_content_chars,
        parses: parse_subquestions(tokens).is_ok(),
    }
}

/// 1 when every format rule holds, else 0.
pub fn format_reward(tokens: &[Token], config: &DecomposerConfig) -> f64 {
    if format_check(tokens, config.min_content_chars).passes() {
        1.0
    } else {
        0.0
    }
}

/// A reasoner that attempts a task given sub-question hints.
pub trait Proxy: Sync {
    fn attempt(&self, task: &TaskInstance, subq: &SubQuestionList, rng: &mut StreamRng) -> Result<bool>;
}

/// The frozen policy used as proxy reasoner.
pub struct PolicyProxy<'a> {
    pub params: &'a PolicyParams,
    pub env: EnvConfig,
    pub sampling: Sampling,
    pub max_len: usize,
}

impl Proxy for PolicyProxy<'_> {
    fn attempt(&self, task: &TaskInstance, subq: &SubQuestionList, rng: &mut StreamRng) -> Result<bool> {
        let prompt = render_prompt(task, PromptStyle::WithSubQuestions, Some(subq))?;
        let r = self.params.sample(&prompt, &self.sampling, self.max_len, rng)?;
        Ok(self.env.is_success(self.env.verify(task, &r.tokens)))
    }
}

/// Proxy whose attempts succeed independently with probability `p`.
pub struct BernoulliProxy(pub f64);

impl Proxy for BernoulliProxy {
    fn attempt(&self, _: &TaskInstance, _: &SubQuestionList, rng: &mut StreamRng) -> Result<bool> {
        Ok(rng.random::<f64>() < self.0)
    }
}

/// 1 when any of the configured proxy attempts solves the task.
pub fn quality_reward(
    task: &TaskInstance,
    subq: &SubQuestionList,
    config: &DecomposerConfig,
    proxy: &dyn Proxy,
    rng: &mut StreamRng,
) -> Result<f64> {
    for _ in 0..config.attempts() {
        if proxy.attempt(task, subq, rng)? {
            return Ok(1.0);
        }
    }
    Ok(0.0)
}

/// `R_F * R_Q`; the proxy is not consulted when `R_F = 0`.
pub fn decomposer_reward(
    task: &TaskInstance,
    response: &[Token],
    config: &DecomposerConfig,
    proxy: &dyn Proxy,
    rng: &mut StreamRng,
) -> Result<f64> {
    let subq = if config.format_reward_enabled {
        if format_reward(response, config) == 0.0 {
            return Ok(0.0);
        }
        parse_subquestions(response).expect("format check implies a parse")
    } else {
        lenient_subquestions(response)
    };
    quality_reward(task, &subq, config, proxy, rng)
}

/// One line of the decomposer metrics stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecomposerRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub format_pass_rate: f64,
    /// Format-passing responses that contain an answer marker.
    pub leaks: usize,
    pub mean_spans: f64,
    pub rlvr: StepStats,
}

/// Picks `k` distinct dataset indices for a step (cycling when `k > n`).
pub fn batch_indices(streams: &Streams, step: u64, n: usize, k: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = streams.rng("batch", &[step]);
    let mut out = Vec::with_capacity(k);
    while out.len() < k && n > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        out.extend(idx.into_iter().take(k - out.len()));
    }
    out
}

/// GRPO-style training of the decomposer; the proxy stays frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_decomposer(
    init: PolicyParams,
    proxy: &dyn Proxy,
    dataset: &[TaskInstance],
    rlvr: &RlvrConfig,
    config: &DecomposerConfig,
    streams: &Streams,
    exec: Exec,
    mut on_step: impl FnMut(&DecomposerRecord) -> Result<()>,
) -> Result<PolicyParams> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("decomposer dataset is empty".into()));
    }
    let mut rlvr = rlvr.clone();
    rlvr.optimizer.lr = config.lr;
    let mut learner = Learner::new(init, rlvr.clone(), exec)?;
    let sampling = rlvr.sampling();
    for step in 0..config.steps as u64 {
        let batch = batch_indices(streams, step, dataset.len(), rlvr.train_batch);
        let jobs: Vec<Job> = batch
            .iter()
            .map(|&i| Job {
                task_id: dataset[i].task_id,
                prompt: render_decomposer_prompt(&dataset[i]),
                guided: false,
            })
            .collect();
        let errors = std::sync::Mutex::new(None);
        let groups = sample_groups(
            &learner.params,
            &jobs,
            rlvr.n_rollout,
            &sampling,
            rlvr.max_len,
            streams,
            "decomposer",
            step,
            exec,
            |j, r, tokens| {
                let mut rng = streams.rng("proxy", &[step, j as u64, r as u64]);
                decomposer_reward(&dataset[batch[j]], tokens, config, proxy, &mut rng).unwrap_or_else(|e| {
                    errors.lock().expect("error slot").get_or_insert(e);
                    0.0
                })
            },
        )?;
        if let Some(e) = errors.into_inner().expect("error slot") {
            return Err(e);
        }
        let mut n = 0usize;
        let (mut passed, mut leaks, mut spans) = (0usize, 0usize, 0usize);
        for r in groups.iter().flat_map(|g| &g.rollouts) {
            n += 1;
            if format_check(&r.tokens, config.min_content_chars).passes() {
                passed += 1;
                leaks += r.tokens.contains(&Token::ANSWER) as usize;
                spans += parse_subquestions(&r.tokens).map(|s| s.count()).unwrap_or(0);
            }
        }
        let mean_reward = groups.iter().map(|g| g.mean_reward()).sum::<f64>() / groups.len() as f64;
        let updates = wave_update(&mut learner, groups)?;
        on_step(&DecomposerRecord {
            step,
            mean_reward,
            format_pass_rate: passed as f64 / n.max(1) as f64,
            leaks,
            mean_spans: spans as f64 / passed.max(1) as f64,
            rlvr: summarize(step, mean_reward, &updates),
        })?;
    }
    Ok(learner.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Op;

    fn so() -> Token {
        Token::SUBQ_OPEN
    }
    fn sc() -> Token {
        Token::SUBQ_CLOSE
    }

    #[test]
    fn parses_well_formed_spans() {
        let a = Token::op(Op::Add);
        let d = Token::digit(3);
        let s = parse_subquestions(&[so(), a, d, sc(), so(), d, a, sc(), Token::EOS]).unwrap();
        assert_eq!(s.items(), &[vec![a, d], vec![d, a]]);
    }

    #[test]
    fn parse_failures() {
        let d = Token::digit(1);
        assert_eq!(parse_subquestions(&[d, so(), d, sc()]), Err(ParseFailure::MissingOpen));
        assert_eq!(parse_subquestions(&[]), Err(ParseFailure::MissingOpen));
        assert_eq!(parse_subquestions(&[so(), sc()]), Err(ParseFailure::EmptySpan));
        assert_eq!(parse_subquestions(&[so(), d, so(), d, sc()]), Err(ParseFailure::NestedOpen));
        assert_eq!(parse_subquestions(&[so(), d]), Err(ParseFailure::Unclosed));
        assert_eq!(parse_subquestions(&[so(), d, sc(), d]), Err(ParseFailure::StrayToken));
        assert_eq!(
            parse_subquestions(&[so(), Token::ANSWER, d, sc()]),
            Err(ParseFailure::ReservedToken)
        );
    }

    #[test]
    fn lenient_extraction_keeps_content() {
        let d = Token::digit(2);
        let a = Token::op(Op::Mul);
        assert_eq!(lenient_subquestions(&[a, d, sc(), Token::EOS]).items(), &[vec![a, d]]);
        assert!(lenient_subquestions(&[Token::EOS]).is_empty());
    }

    #[test]
    fn each_format_rule_can_fail_alone() {
        let cfg = DecomposerConfig::default();
        let a = Token::op(Op::Add);
        let d = Token::digit(3);
        let good = [so(), a, d, sc(), so(), a, d, sc(), Token::EOS];
        assert_eq!(format_reward(&good, &cfg), 1.0);

        let c = format_check(&[a, so(), a, d, sc()], 10);
        assert!(!c.begins_with_open && c.no_nested_open && c.long_enough);
        let c = format_check(&[so(), a, so(), d, sc(), sc()], 10);
        assert!(c.begins_with_open && !c.no_nested_open && c.long_enough);
        let c = format_check(&[so(), d, sc()], 10);
        assert!(c.begins_with_open && c.no_nested_open && !c.long_enough && c.parses);
        for bad in [vec![a, so(), a, d, sc()], vec![so(), a, so(), d, sc(), sc()], vec![so(), d, sc()]] {
            assert_eq!(format_reward(&bad, &cfg), 0.0);
        }
    }

    #[test]
    fn batch_indices_are_distinct_within_a_pass() {
        let s = Streams::new(3);
        let mut b = batch_indices(&s, 0, 10, 10);
        b.sort();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(&s, 1, 3, 7).len(), 7);
        assert_eq!(batch_indices(&s, 4, 10, 5), batch_indices(&s, 4, 10, 5));
    }
}
