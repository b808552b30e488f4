//! Pass@k estimation, evaluation runs and sub-question statistics.

use serde::{Deserialize, Serialize};

use crate::a2d::AnnotatedInstance;
use crate::env::{render_prompt, EnvConfig, PromptStyle, SubQuestionList, TaskInstance};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::policy::{PolicyParams, Sampling};
use crate::rng::Streams;
use crate::vocab::Token;

/// Unbiased estimate of P(at least one of k draws without replacement is
/// correct) from `c` correct out of `n`: `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::InvalidArgument(format!("c={c} exceeds n={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n-c-i) / (n-i)
    let miss: f64 = (0..k).map(|i| (n - c - i) as f64 / (n - i) as f64).product();
    Ok(1.0 - miss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u64,
    pub n: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub style: String,
    pub n_samples: usize,
    pub k_list: Vec<usize>,
    pub pass_at_1: f64,
    /// `(k, mean pass@k over tasks)` in `k_list` order.
    pub pass_at_k: Vec<(usize, f64)>,
    pub tasks: Vec<TaskResult>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Everything `evaluate` needs besides the policy and the suite.
#[derive(Clone, Debug)]
pub struct EvalSpec<'a> {
    pub suite: &'a str,
    pub style: PromptStyle,
    /// Per-task sub-questions; required for `WithSubQuestions`.
    pub subq: Option<&'a [SubQuestionList]>,
    pub n_samples: usize,
    pub k_list: &'a [usize],
    pub sampling: Sampling,
    pub max_len: usize,
    pub config_hash: &'a str,
}

/// Samples `n_samples` responses per task and aggregates pass@k.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[TaskInstance],
    env: &EnvConfig,
    spec: &EvalSpec,
    streams: &Streams,
    exec: Exec,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("evaluation suite is empty".into()));
    }
    if spec.k_list.is_empty() {
        return Err(Error::InvalidArgument("k_list is empty".into()));
    }
    if let Some(&k) = spec.k_list.iter().find(|&&k| k == 0 || k > spec.n_samples) {
        return Err(Error::InvalidArgument(format!("k={k} is not in [1, n_samples={}]", spec.n_samples)));
    }
    if let Some(s) = spec.subq {
        if s.len() != tasks.len() {
            return Err(Error::LengthMismatch {
                expected: tasks.len(),
                got: s.len(),
            });
        }
    }
    let results = exec.map(tasks, |i, task| -> Result<TaskResult> {
        let prompt = render_prompt(task, spec.style, spec.subq.map(|s| &s[i]))?;
        let mut c = 0;
        for j in 0..spec.n_samples {
            let mut rng = streams.rng("eval", &[task.task_id, j as u64]);
            let r = params.sample(&prompt, &spec.sampling, spec.max_len, &mut rng)?;
            c += env.is_success(env.verify(task, &r.tokens)) as usize;
        }
        Ok(TaskResult {
            task_id: task.task_id,
            n: spec.n_samples,
            c,
        })
    });
    let tasks: Vec<TaskResult> = results.into_iter().collect::<Result<_>>()?;
    let mean_pass = |k: usize| -> Result<f64> {
        let mut s = 0.0;
        for t in &tasks {
            s += pass_at_k(t.n, t.c, k)?;
        }
        Ok(s / tasks.len() as f64)
    };
    let pass_at_k = spec
        .k_list
        .iter()
        .map(|&k| Ok((k, mean_pass(k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        suite: spec.suite.to_string(),
        style: style_name(spec.style),
        n_samples: spec.n_samples,
        k_list: spec.k_list.to_vec(),
        pass_at_1: mean_pass(1)?,
        pass_at_k,
        tasks,
        seeds: vec![streams.master()],
        config_hash: spec.config_hash.to_string(),
    })
}

pub fn style_name(style: PromptStyle) -> String {
    match style {
        PromptStyle::Vanilla => "vanilla".into(),
        PromptStyle::WithSubQuestions => "with_subquestions".into(),
        PromptStyle::Diversity(v) => format!("diversity_{v}"),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Population statistics; `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Answer-revealing content found in sub-questions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakFlags {
    /// An answer marker (`ANSWER`) anywhere in the decomposition.
    pub answer_marker: bool,
    /// A worked step (`=`) inside a sub-question.
    pub solution_step: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubqStats {
    pub n_annotations: usize,
    pub n_flagged: usize,
    /// Sub-questions per annotation.
    pub count: Summary,
    /// Tokens per sub-question span, delimiters excluded.
    pub span_tokens: Summary,
    pub leaks: LeakFlags,
    /// Annotations containing an answer marker.
    pub n_answer_marker: usize,
}

pub fn subq_stats(annotations: &[AnnotatedInstance]) -> Result<SubqStats> {
    if annotations.is_empty() {
        return Err(Error::InvalidArgument("no annotations".into()));
    }
    let counts: Vec<f64> = annotations.iter().map(|a| a.subq.count() as f64).collect();
    let lens: Vec<f64> = annotations
        .iter()
        .flat_map(|a| a.subq.items().iter().map(|s| s.len() as f64))
        .collect();
    let has_answer = |a: &AnnotatedInstance| {
        a.response.contains(&Token::ANSWER) || a.subq.items().iter().flatten().any(|&t| t == Token::ANSWER)
    };
    let n_answer_marker = annotations.iter().filter(|a| has_answer(a)).count();
    Ok(SubqStats {
        n_annotations: annotations.len(),
        n_flagged: annotations.iter().filter(|a| a.flagged).count(),
        count: Summary::of(&counts).expect("non-empty"),
        span_tokens: Summary::of(&lens).unwrap_or_default(),
        leaks: LeakFlags {
            answer_marker: n_answer_marker > 0,
            solution_step: annotations.iter().flat_map(|a| a.subq.items().iter().flatten()).any(|&t| t == Token::EQ),
        },
        n_answer_marker,
    })
}
