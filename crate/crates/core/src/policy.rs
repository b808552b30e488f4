//! Small autoregressive token policy with exact log-probabilities and
//! hand-derived gradients.
//!
//! Architecture, for a context whose last `W` tokens are `x_0` (most
//! recent) .. `x_{W-1}` (left-padded with PAD):
//!
//! ```text
//! e      = (1/W) * sum_j E[j, x_j]          position-specific embeddings, dim d
//! h      = tanh(A e + a)                    hidden layer, dim H
//! logits = B h + b                          vocab V
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::vocab::Token;

pub const INIT_SCALE: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 8] = b"A2DPOLv1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyShape {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: usize,
    a: usize,
    a_bias: usize,
    b: usize,
    b_bias: usize,
    total: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            window: 32,
            embed_dim: 48,
            hidden: 128,
            vocab: crate::vocab::VOCAB_SIZE,
        }
    }
}

impl PolicyShape {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.embed_dim == 0 || self.hidden == 0 || self.vocab == 0 {
            return Err(Error::Config(format!("degenerate policy shape {self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (w, d, h, v) = (self.window, self.embed_dim, self.hidden, self.vocab);
        let emb = 0;
        let a = emb + w * v * d;
        let a_bias = a + h * d;
        let b = a_bias + h;
        let b_bias = b + v * h;
        Layout {
            emb,
            a,
            a_bias,
            b,
            b_bias,
            total: b_bias + v,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub version: String,
    /// Seeds and phases this vector descends from, oldest first.
    pub lineage: Vec<String>,
    values: Vec<f64>,
}

/// Deterministic uniform init in `[-INIT_SCALE, INIT_SCALE]`.
pub fn init_params(seed: u64, shape: PolicyShape) -> Result<PolicyParams> {
    shape.validate()?;
    let mut rng = crate::rng::Streams::new(seed).rng("policy-init", &[]);
    let values = (0..shape.param_count())
        .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
        .collect();
    Ok(PolicyParams {
        shape,
        version: crate::vocab::VOCAB_VERSION.to_string(),
        lineage: vec![format!("init:{seed}")],
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    /// Argmax decoding (the temperature -> 0 limit).
    pub greedy: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            greedy: false,
        }
    }
}

impl Sampling {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// A sampled response with its log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    /// Untruncated temperature-1 log-probs of the sampling-time policy.
    pub behavior_logprobs: Vec<f64>,
    /// Log-probs under the most recent evaluation; equal to the behavior
    /// log-probs right after sampling.
    pub logprobs: Vec<f64>,
    pub reward: f64,
    pub guided: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ended_with_eos(&self) -> bool {
        self.tokens.last() == Some(&Token::EOS)
    }
}

/// Per-position activations kept for a backward pass.
pub struct Trace {
    slots: Vec<usize>,
    embed: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    targets: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl PolicyParams {
    pub fn from_values(shape: PolicyShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.param_count() {
            return Err(Error::LengthMismatch {
                expected: shape.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self {
            shape,
            version: crate::vocab::VOCAB_VERSION.to_string(),
            lineage: Vec::new(),
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.id() >= self.shape.vocab) {
            Some(t) => Err(Error::UnknownToken(t.0)),
            None => Ok(()),
        }
    }

    /// Window slots for a context: slot 0 is the most recent token.
    fn fill_slots(&self, context: &[Token], slots: &mut [usize]) {
        let n = context.len();
        for (j, s) in slots.iter_mut().enumerate() {
            *s = if j < n { context[n - 1 - j].id() } else { Token::PAD.id() };
        }
    }

    /// Forward pass for one position. Writes `e`, `h` and logits.
    fn forward(&self, slots: &[usize], e: &mut [f64], h: &mut [f64], logits: &mut [f64]) {
        let PolicyShape {
            window: w,
            embed_dim: d,
            hidden: hid,
            vocab: v,
        } = self.shape;
        let lay = self.shape.layout();
        let p = &self.values;
        e.fill(0.0);
        for (j, &tok) in slots.iter().enumerate() {
            let row = &p[lay.emb + (j * v + tok) * d..][..d];
            for (acc, x) in e.iter_mut().zip(row) {
                *acc += x;
            }
        }
        let inv_w = 1.0 / w as f64;
        for x in e.iter_mut() {
            *x *= inv_w;
        }
        for k in 0..hid {
            let row = &p[lay.a + k * d..][..d];
            let pre: f64 = row.iter().zip(e.iter()).map(|(a, x)| a * x).sum::<f64>() + p[lay.a_bias + k];
            h[k] = pre.tanh();
        }
        for t in 0..v {
            let row = &p[lay.b + t * hid..][..hid];
            logits[t] = row.iter().zip(h.iter()).map(|(b, x)| b * x).sum::<f64>() + p[lay.b_bias + t];
        }
    }

    /// Full next-token log-distribution for a context.
    pub fn next_logprobs(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(context)?;
        let s = self.shape;
        let mut slots = vec![0; s.window];
        let (mut e, mut h, mut logits) = (vec![0.0; s.embed_dim], vec![0.0; s.hidden], vec![0.0; s.vocab]);
        self.fill_slots(context, &mut slots);
        self.forward(&slots, &mut e, &mut h, &mut logits);
        log_softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Samples a response autoregressively. Stops after EOS or `max_len` tokens.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &[Token],
        sampling: &Sampling,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Rollout> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be positive".into()));
        }
        sampling.validate()?;
        self.check_tokens(prompt)?;
        let s = self.shape;
        let mut context = prompt.to_vec();
        let mut slots = vec![0; s.window];
        let (mut e, mut h, mut logits) = (vec![0.0; s.embed_dim], vec![0.0; s.hidden], vec![0.0; s.vocab]);
        let mut probs = vec![0.0; s.vocab];
        let mut order: Vec<usize> = Vec::with_capacity(s.vocab);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        while tokens.len() < max_len {
            self.fill_slots(&context, &mut slots);
            self.forward(&slots, &mut e, &mut h, &mut logits);
            let choice = if sampling.greedy {
                argmax(&logits)
            } else {
                for (p, l) in probs.iter_mut().zip(&logits) {
                    *p = l / sampling.temperature;
                }
                softmax_in_place(&mut probs);
                if sampling.top_p < 1.0 {
                    nucleus_in_place(&mut probs, sampling.top_p, &mut order);
                }
                draw(&probs, rng)
            };
            log_softmax_in_place(&mut logits);
            let tok = Token(choice as u16);
            logprobs.push(logits[choice]);
            tokens.push(tok);
            context.push(tok);
            if tok == Token::EOS {
                break;
            }
        }
        Ok(Rollout {
            prompt: prompt.to_vec(),
            tokens,
            behavior_logprobs: logprobs.clone(),
            logprobs,
            reward: 0.0,
            guided: false,
        })
    }

    /// Runs the model over `prompt ++ tokens`, keeping activations.
    pub fn trace(&self, prompt: &[Token], tokens: &[Token]) -> Result<Trace> {
        self.check_tokens(prompt)?;
        self.check_tokens(tokens)?;
        let s = self.shape;
        let n = tokens.len();
        let mut seq = Vec::with_capacity(prompt.len() + n);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(tokens);
        let mut tr = Trace {
            slots: vec![0; n * s.window],
            embed: vec![0.0; n * s.embed_dim],
            hidden: vec![0.0; n * s.hidden],
            probs: vec![0.0; n * s.vocab],
            targets: tokens.iter().map(|t| t.id()).collect(),
            logprobs: vec![0.0; n],
        };
        for t in 0..n {
            let slots = &mut tr.slots[t * s.window..][..s.window];
            self.fill_slots(&seq[..prompt.len() + t], slots);
            let logits = &mut tr.probs[t * s.vocab..][..s.vocab];
            self.forward(
                slots,
                &mut tr.embed[t * s.embed_dim..][..s.embed_dim],
                &mut tr.hidden[t * s.hidden..][..s.hidden],
                logits,
            );
            log_softmax_in_place(logits);
            tr.logprobs[t] = logits[tr.targets[t]];
            for x in logits.iter_mut() {
                *x = x.exp();
            }
        }
        Ok(tr)
    }

    /// Exact per-token log-probabilities of `tokens` given `prompt`.
    pub fn logprob(&self, prompt: &[Token], tokens: &[Token]) -> Result<Vec<f64>> {
        Ok(self.trace(prompt, tokens)?.logprobs)
    }

    /// Adds `d/dθ sum_t weights[t] * log π(tokens[t] | prefix)` into `grad`.
    pub fn accumulate_backward(&self, trace: &Trace, weights: &[f64], grad: &mut [f64]) -> Result<()> {
        self.accumulate_backward_smoothed(trace, weights, 0.0, grad)
    }

    /// Like `accumulate_backward`, but each token's term is the expected
    /// log-probability under the target distribution that puts `1 - smoothing`
    /// on the observed token and spreads `smoothing` uniformly over the vocab.
    pub fn accumulate_backward_smoothed(
        &self,
        trace: &Trace,
        weights: &[f64],
        smoothing: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!("smoothing must be in [0, 1), got {smoothing}")));
        }
        if weights.len() != trace.len() {
            return Err(Error::LengthMismatch {
                expected: trace.len(),
                got: weights.len(),
            });
        }
        if grad.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                got: grad.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite token weight".into()));
        }
        let PolicyShape {
            window: w,
            embed_dim: d,
            hidden: hid,
            vocab: v,
        } = self.shape;
        let lay = self.shape.layout();
        let p = &self.values;
        let mut dlogits = vec![0.0; v];
        let mut dpre = vec![0.0; hid];
        let mut de = vec![0.0; d];
        let inv_w = 1.0 / w as f64;
        for (t, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let probs = &trace.probs[t * v..][..v];
            let h = &trace.hidden[t * hid..][..hid];
            let e = &trace.embed[t * d..][..d];
            let floor = smoothing / v as f64;
            for (dl, pr) in dlogits.iter_mut().zip(probs) {
                *dl = wt * (floor - pr);
            }
            dlogits[trace.targets[t]] += wt * (1.0 - smoothing);

            dpre.fill(0.0);
            for (tok, &dl) in dlogits.iter().enumerate() {
                grad[lay.b_bias + tok] += dl;
                let brow = &p[lay.b + tok * hid..][..hid];
                let grow = &mut grad[lay.b + tok * hid..][..hid];
                for k in 0..hid {
                    grow[k] += dl * h[k];
                    dpre[k] += dl * brow[k];
                }
            }
            de.fill(0.0);
            for k in 0..hid {
                let dk = dpre[k] * (1.0 - h[k] * h[k]);
                grad[lay.a_bias + k] += dk;
                let arow = &p[lay.a + k * d..][..d];
                let grow = &mut grad[lay.a + k * d..][..d];
                for m in 0..d {
                    grow[m] += dk * e[m];
                    de[m] += dk * arow[m];
                }
            }
            for (j, &tok) in trace.slots[t * w..][..w].iter().enumerate() {
                let grow = &mut grad[lay.emb + (j * v + tok) * d..][..d];
                for (g, x) in grow.iter_mut().zip(&de) {
                    *g += x * inv_w;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `sum_t weights[t] * log π(tokens[t] | prefix)`.
    pub fn backward(&self, prompt: &[Token], tokens: &[Token], weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != tokens.len() {
            return Err(Error::LengthMismatch {
                expected: tokens.len(),
                got: weights.len(),
            });
        }
        let trace = self.trace(prompt, tokens)?;
        let mut grad = vec![0.0; self.values.len()];
        self.accumulate_backward(&trace, weights, &mut grad)?;
        Ok(grad)
    }

    /// Hash over shape and raw parameter bytes.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(32 + self.values.len() * 8);
        for x in [self.shape.window, self.shape.embed_dim, self.shape.hidden, self.shape.vocab] {
            bytes.extend_from_slice(&(x as u64).to_le_bytes());
        }
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn with_lineage(mut self, entry: impl Into<String>) -> Self {
        self.lineage.push(entry.into());
        self
    }

    /// Header (magic, length-prefixed JSON) followed by little-endian f64 values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, provenance: Option<&crate::io::Provenance>) -> std::io::Result<()> {
        let header = CheckpointHeader {
            shape: self.shape,
            version: self.version.clone(),
            lineage: self.lineage.clone(),
            param_count: self.values.len(),
            provenance: provenance.cloned(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, Option<crate::io::Provenance>)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(bad("header too large"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        header.shape.validate()?;
        if header.param_count != header.shape.param_count() {
            return Err(bad("parameter count does not match shape"));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|_| bad("truncated values"))?;
        if raw.len() != header.param_count * 8 {
            return Err(bad("value block has wrong length"));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut params = PolicyParams::from_values(header.shape, values)?;
        params.version = header.version;
        params.lineage = header.lineage;
        Ok((params, header.provenance))
    }

    pub fn save(&self, path: &Path, provenance: Option<&crate::io::Provenance>) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, provenance).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<crate::io::Provenance>)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    shape: PolicyShape,
    version: String,
    lineage: Vec<String>,
    param_count: usize,
    provenance: Option<crate::io::Provenance>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in xs.iter_mut() {
        *x -= lse;
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Keeps the smallest high-probability set with mass >= `top_p`, renormalized.
fn nucleus_in_place(probs: &mut [f64], top_p: f64, order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..probs.len());
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (n, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= top_p {
            keep = n + 1;
            break;
        }
    }
    for &i in &order[keep..] {
        probs[i] = 0.0;
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
