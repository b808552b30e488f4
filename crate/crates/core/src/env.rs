//! Synthetic compositional arithmetic environment.
//!
//! A task is a chain of `(op, operand)` steps applied left to right to the
//! start value 0, all arithmetic mod `M`. Questions, sub-question hints and
//! answers are token sequences over [`crate::vocab`]; rewards are exact.
//!
//! Reasoner responses are expected in step-by-step form
//! `op k = v` per step followed by `ANSWER v EOS`, but the verifier only
//! reads the final answer span.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{Op, Token, MAX_MODULUS, MAX_VARIANTS};

/// Start value every chain is folded from.
pub const START_VALUE: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub modulus: u32,
    pub chain_len_min: usize,
    pub chain_len_max: usize,
    pub n_variants: usize,
    pub r_pos: f64,
    pub r_neg: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            modulus: 5,
            chain_len_min: 2,
            chain_len_max: 3,
            n_variants: 4,
            r_pos: 1.0,
            r_neg: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_MODULUS).contains(&self.modulus) {
            return Err(Error::Config(format!(
                "env.modulus must be in [2, {MAX_MODULUS}], got {}",
                self.modulus
            )));
        }
        if self.chain_len_min < 1 || self.chain_len_min > self.chain_len_max {
            return Err(Error::Config(format!(
                "env.chain_len_min/max must satisfy 1 <= min <= max, got {}..{}",
                self.chain_len_min, self.chain_len_max
            )));
        }
        if self.n_variants < 1 || self.n_variants > MAX_VARIANTS {
            return Err(Error::Config(format!(
                "env.n_variants must be in [1, {MAX_VARIANTS}], got {}",
                self.n_variants
            )));
        }
        if !self.r_pos.is_finite() || !self.r_neg.is_finite() || self.r_pos <= self.r_neg {
            return Err(Error::Config("env.r_pos must be finite and exceed env.r_neg".into()));
        }
        Ok(())
    }

    /// Reward for a response: `r_pos` iff its last answer span matches.
    pub fn verify(&self, task: &TaskInstance, response: &[Token]) -> f64 {
        if extract_answer(response) == Some(task.answer) {
            self.r_pos
        } else {
            self.r_neg
        }
    }

    pub fn is_success(&self, reward: f64) -> bool {
        reward == self.r_pos
    }

    /// Generates a task, rejecting lengths and moduli outside the configured bounds.
    pub fn generate_task(&self, task_id: u64, seed: u64, chain_len: usize, modulus: u32) -> Result<TaskInstance> {
        if chain_len < 1 || chain_len > self.chain_len_max {
            return Err(Error::InvalidArgument(format!(
                "chain_len {chain_len} outside [1, {}]",
                self.chain_len_max
            )));
        }
        if !(2..=MAX_MODULUS).contains(&modulus) {
            return Err(Error::InvalidArgument(format!(
                "modulus {modulus} outside [2, {MAX_MODULUS}]"
            )));
        }
        Ok(generate_task(task_id, seed, chain_len, modulus))
    }
}

/// Deterministic task draw: ops uniform over {add, sub, mul}, operands uniform in `[1, M)`.
pub fn generate_task(task_id: u64, seed: u64, chain_len: usize, modulus: u32) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = (0..chain_len)
        .map(|_| {
            let op = Op::ALL[rng.random_range(0..Op::ALL.len())];
            let k = rng.random_range(1..modulus);
            (op, k)
        })
        .collect();
    TaskInstance::from_chain(task_id, chain, modulus)
}

/// Left-to-right fold of a chain from [`START_VALUE`].
pub fn fold_chain(chain: &[(Op, u32)], modulus: u32) -> u32 {
    chain
        .iter()
        .fold(START_VALUE, |v, &(op, k)| op.apply(v, k, modulus))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task_id: u64,
    pub chain: Vec<(Op, u32)>,
    pub modulus: u32,
    pub question_tokens: Vec<Token>,
    pub answer: u32,
}

impl TaskInstance {
    pub fn from_chain(task_id: u64, chain: Vec<(Op, u32)>, modulus: u32) -> Self {
        assert!(!chain.is_empty(), "a task needs at least one step");
        let mut question_tokens = Vec::with_capacity(1 + 2 * chain.len());
        question_tokens.push(Token::QUESTION);
        for &(op, k) in &chain {
            question_tokens.push(Token::op(op));
            question_tokens.push(Token::digit(k % modulus));
        }
        let answer = fold_chain(&chain, modulus);
        Self {
            task_id,
            chain,
            modulus,
            question_tokens,
            answer,
        }
    }

    pub fn difficulty(&self) -> usize {
        self.chain.len()
    }

    /// Values after each step; the last one is the answer.
    pub fn trajectory(&self) -> Vec<u32> {
        self.chain
            .iter()
            .scan(START_VALUE, |v, &(op, k)| {
                *v = op.apply(*v, k, self.modulus);
                Some(*v)
            })
            .collect()
    }

    /// A correct step-by-step response: `op k = v` per step, then `ANSWER v EOS`.
    pub fn reference_solution(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(4 * self.chain.len() + 3);
        for (&(op, k), v) in self.chain.iter().zip(self.trajectory()) {
            out.extend([Token::op(op), Token::digit(k), Token::EQ, Token::digit(v)]);
        }
        out.extend(render_answer(self.answer));
        out
    }
}

/// Parses question tokens back into a chain.
pub fn parse_question(tokens: &[Token]) -> Option<Vec<(Op, u32)>> {
    let (first, rest) = tokens.split_first()?;
    if *first != Token::QUESTION || rest.is_empty() || rest.len() % 2 != 0 {
        return None;
    }
    rest.chunks(2)
        .map(|pair| Some((pair[0].as_op()?, pair[1].as_digit()?)))
        .collect()
}

/// `ANSWER a EOS`.
pub fn render_answer(answer: u32) -> [Token; 3] {
    [Token::ANSWER, Token::digit(answer), Token::EOS]
}

/// Value of the last `ANSWER d` span; `None` when absent or malformed.
pub fn extract_answer(response: &[Token]) -> Option<u32> {
    let pos = response.iter().rposition(|&t| t == Token::ANSWER)?;
    response.get(pos + 1)?.as_digit()
}

/// Ordered sub-question spans. Spans are non-empty and never carry
/// delimiters or answer markers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Token>>", into = "Vec<Vec<Token>>")]
pub struct SubQuestionList {
    items: Vec<Vec<Token>>,
}

impl SubQuestionList {
    pub fn new(items: Vec<Vec<Token>>) -> Result<Self> {
        for (i, span) in items.iter().enumerate() {
            if span.is_empty() {
                return Err(Error::InvalidArgument(format!("sub-question {i} is empty")));
            }
            if let Some(t) = span.iter().find(|t| !is_span_content(**t)) {
                return Err(Error::InvalidArgument(format!(
                    "sub-question {i} contains reserved token {t}"
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[Vec<Token>] {
        &self.items
    }

    pub fn count(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Delimited rendering: `SUBQ_OPEN span SUBQ_CLOSE` per item.
    pub fn to_tokens(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for span in &self.items {
            out.push(Token::SUBQ_OPEN);
            out.extend_from_slice(span);
            out.push(Token::SUBQ_CLOSE);
        }
        out
    }
}

impl TryFrom<Vec<Vec<Token>>> for SubQuestionList {
    type Error = Error;
    fn try_from(items: Vec<Vec<Token>>) -> Result<Self> {
        Self::new(items)
    }
}

impl From<SubQuestionList> for Vec<Vec<Token>> {
    fn from(list: SubQuestionList) -> Self {
        list.items
    }
}

/// Tokens allowed inside a sub-question span.
pub fn is_span_content(t: Token) -> bool {
    !matches!(
        t,
        Token::PAD | Token::QUESTION | Token::TIPS | Token::SUBQ_OPEN | Token::SUBQ_CLOSE | Token::ANSWER | Token::EOS
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Vanilla,
    WithSubQuestions,
    Diversity(usize),
}

/// Renders a reasoner prompt. Every style starts with the question tokens.
///
/// * `Vanilla`: question + reasoning instruction.
/// * `WithSubQuestions`: question + `TIPS` + delimited spans + reasoning instruction.
/// * `Diversity(v)`: question + the v-th exploration instruction.
pub fn render_prompt(task: &TaskInstance, style: PromptStyle, subq: Option<&SubQuestionList>) -> Result<Vec<Token>> {
    let mut out = task.question_tokens.clone();
    match style {
        PromptStyle::Vanilla => out.push(Token::INSTR_REASON),
        PromptStyle::WithSubQuestions => {
            let subq = subq.ok_or_else(|| {
                Error::InvalidArgument("WithSubQuestions prompt needs a sub-question list".into())
            })?;
            out.push(Token::TIPS);
            out.extend(subq.to_tokens());
            out.push(Token::INSTR_REASON);
        }
        PromptStyle::Diversity(v) => {
            if v >= MAX_VARIANTS {
                return Err(Error::InvalidArgument(format!("diversity variant {v} >= {MAX_VARIANTS}")));
            }
            out.push(Token::variant(v));
        }
    }
    Ok(out)
}

/// Decomposer prompt: question + decomposition instruction.
pub fn render_decomposer_prompt(task: &TaskInstance) -> Vec<Token> {
    let mut out = task.question_tokens.clone();
    out.push(Token::INSTR_DECOMPOSE);
    out
}

/// Ground-truth decomposition: the i-th span is step i, asking for the value after it.
pub fn oracle_decompose(task: &TaskInstance) -> SubQuestionList {
    let items = task
        .chain
        .iter()
        .map(|&(op, k)| vec![Token::op(op), Token::digit(k)])
        .collect();
    SubQuestionList { items }
}

/// Targets of a step-form decomposition: the value after applying spans
/// `1..=i` to the start value. `None` if a span is not a single `op k` step.
pub fn subquestion_targets(subq: &SubQuestionList, modulus: u32) -> Option<Vec<u32>> {
    let mut v = START_VALUE;
    subq.items()
        .iter()
        .map(|span| match span.as_slice() {
            [op, k] => {
                let (op, k) = (op.as_op()?, k.as_digit()?);
                v = op.apply(v, k, modulus);
                Some(v)
            }
            _ => None,
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    task_id: u64,
    chain: Vec<(Op, u32)>,
    modulus: u32,
    answer: u32,
}

/// Writes one task per line.
pub fn write_tasks<W: Write>(mut w: W, tasks: &[TaskInstance]) -> std::io::Result<()> {
    for t in tasks {
        let rec = TaskRecord {
            task_id: t.task_id,
            chain: t.chain.clone(),
            modulus: t.modulus,
            answer: t.answer,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a task file, skipping provenance header lines. Answers are re-checked.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || crate::io::is_provenance_line(&line) {
            continue;
        }
        let bad = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: TaskRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.chain.is_empty() || !(2..=MAX_MODULUS).contains(&rec.modulus) {
            return Err(bad("empty chain or modulus out of range".into()));
        }
        if rec.chain.iter().any(|&(_, k)| k >= rec.modulus) {
            return Err(bad("operand not reduced mod M".into()));
        }
        let task = TaskInstance::from_chain(rec.task_id, rec.chain, rec.modulus);
        if task.answer != rec.answer {
            return Err(bad(format!("answer {} does not match chain ({})", rec.answer, task.answer)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}
