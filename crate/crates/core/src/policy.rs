//! A tiny autoregressive policy with analytic gradients.
//!
//! The hidden state at each completion position is
//! `h_t = tanh(embed[y_{t-1}] + mean_{u in context} ctx[u])`, with `EOS`
//! standing in for the token before the first one, and next-token logits are
//! `out^T h_t + bias`. The context is the bag of prompt and principle tokens.

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::mi::{log_softmax, TokenScorer};
use crate::prob_metrics::ProbVector;

pub const R_OPEN: usize = 0;
pub const R_CLOSE: usize = 1;
pub const A_OPEN: usize = 2;
pub const A_CLOSE: usize = 3;
pub const EOS: usize = 4;
const RESERVED: usize = 5;

/// Token inventory: five structural tokens followed by reasoning and answer fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 8 {
            return Err(Error::validation(format!("vocabulary needs >= 8 tokens, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn answer_count(&self) -> usize {
        ((self.size - RESERVED + 1) / 4).max(1)
    }

    pub fn reasoning_fillers(&self) -> std::ops::Range<usize> {
        RESERVED..self.size - self.answer_count()
    }

    pub fn answer_fillers(&self) -> std::ops::Range<usize> {
        self.size - self.answer_count()..self.size
    }

    pub fn fillers(&self) -> std::ops::Range<usize> {
        RESERVED..self.size
    }

    pub fn check(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size) {
            Some(t) => Err(Error::validation(format!(
                "token {t} outside vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }

    /// Render tokens as tagged text; `EOS` renders as nothing.
    pub fn render(&self, tokens: &[usize]) -> String {
        let mut s = String::new();
        for &t in tokens {
            match t {
                R_OPEN => s.push_str("<reasoning>"),
                R_CLOSE => s.push_str("</reasoning>"),
                A_OPEN => s.push_str("<answer>"),
                A_CLOSE => s.push_str("</answer>"),
                EOS => {}
                t => s.push_str(&filler_name(t - RESERVED)),
            }
        }
        s
    }
}

fn filler_name(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    if i < 26 {
        letter.to_string()
    } else {
        format!("{letter}{}", i / 26)
    }
}

/// Sampling knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables the top-k filter.
    pub top_k: usize,
    pub repetition_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            top_k: 8,
            repetition_penalty: 1.1,
            max_len: 12,
        }
    }
}

/// Parameter-shaped buffer: `embed` (V x d), `ctx` (V x d), `out` (d x V), `bias` (V).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub vocab: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Embed,
    Ctx,
    Out,
    Bias,
}

impl Params {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            data: vec![0.0; 3 * vocab * dim + vocab],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self, block: Block) -> std::ops::Range<usize> {
        let vd = self.vocab * self.dim;
        match block {
            Block::Embed => 0..vd,
            Block::Ctx => vd..2 * vd,
            Block::Out => 2 * vd..3 * vd,
            Block::Bias => 3 * vd..3 * vd + self.vocab,
        }
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.data[self.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.range(block);
        &mut self.data[r]
    }

    fn embed_row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    fn ctx_row(&self, t: usize) -> &[f64] {
        let off = self.vocab * self.dim;
        &self.data[off + t * self.dim..off + (t + 1) * self.dim]
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Hex SHA-256 over the little-endian bit patterns of every parameter.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Forward-pass record for one completion under one context.
#[derive(Debug, Clone)]
pub struct Trace {
    context: Vec<usize>,
    prev: Vec<usize>,
    /// Hidden state per position.
    pub hidden: Vec<Vec<f64>>,
    /// Full next-token log-distribution per position.
    pub log_dists: Vec<Vec<f64>>,
}

impl Trace {
    pub fn token_log_probs(&self, completion: &[usize]) -> Vec<f64> {
        self.log_dists.iter().zip(completion).map(|(ld, &y)| ld[y]).collect()
    }

    pub fn token_entropies(&self) -> Vec<f64> {
        self.log_dists
            .iter()
            .map(|ld| -ld.iter().map(|l| l.exp() * l).sum::<f64>())
            .collect()
    }

    pub fn distribution(&self, t: usize) -> Result<ProbVector> {
        ProbVector::from_weights(&self.log_dists[t].iter().map(|l| l.exp()).collect::<Vec<_>>())
    }
}

/// A sampled completion with the log-probabilities cached at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub token_entropies: Vec<f64>,
    /// Hit the length cap without emitting `EOS`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub vocab: Vocab,
    pub params: Params,
    pub decode: DecodeConfig,
}

impl ToyPolicy {
    /// All-zero parameters: the uniform policy.
    pub fn zeros(vocab: Vocab, dim: usize, decode: DecodeConfig) -> Self {
        Self {
            vocab,
            params: Params::zeros(vocab.size(), dim),
            decode,
        }
    }

    /// Random token embeddings, zero context and readout; still uniform.
    pub fn init<R: Rng + ?Sized>(vocab: Vocab, dim: usize, decode: DecodeConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, dim, decode);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        for x in p.params.block_mut(Block::Embed) {
            *x = normal.sample(rng);
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Frozen snapshot used as the fixed comparison point for diagnostics.
    pub fn reference_policy(&self) -> ToyPolicy {
        self.clone()
    }

    fn context_vector(&self, context: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        if context.is_empty() {
            return c;
        }
        for &u in context {
            for (ci, x) in c.iter_mut().zip(self.params.ctx_row(u)) {
                *ci += x;
            }
        }
        let inv = 1.0 / context.len() as f64;
        c.iter_mut().for_each(|x| *x *= inv);
        c
    }

    fn step(&self, ctx_vec: &[f64], prev: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let v = self.vocab.size();
        let h: Vec<f64> = self
            .params
            .embed_row(prev)
            .iter()
            .zip(ctx_vec)
            .map(|(e, c)| (e + c).tanh())
            .collect();
        let out = self.params.block(Block::Out);
        let mut logits = self.params.block(Block::Bias).to_vec();
        for (k, hk) in h.iter().enumerate() {
            let row = &out[k * v..(k + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hk * w;
            }
        }
        debug_assert_eq!(h.len(), d);
        (h, logits)
    }

    fn context(prompt: &[usize], principle: &[usize]) -> Vec<usize> {
        prompt.iter().chain(principle).copied().collect()
    }

    /// Teacher-forced forward pass.
    pub fn trace(&self, prompt: &[usize], principle: &[usize], completion: &[usize]) -> Result<Trace> {
        self.vocab.check(prompt)?;
        self.vocab.check(principle)?;
        self.vocab.check(completion)?;
        let context = Self::context(prompt, principle);
        let c = self.context_vector(&context);
        let mut prev = Vec::with_capacity(completion.len());
        let mut hidden = Vec::with_capacity(completion.len());
        let mut log_dists = Vec::with_capacity(completion.len());
        let mut last = EOS;
        for &y in completion {
            let (h, logits) = self.step(&c, last);
            prev.push(last);
            hidden.push(h);
            log_dists.push(log_softmax(&logits));
            last = y;
        }
        Ok(Trace {
            context,
            prev,
            hidden,
            log_dists,
        })
    }

    pub fn logprobs(&self, prompt: &[usize], principle: &[usize], completion: &[usize]) -> Result<Vec<f64>> {
        Ok(self.trace(prompt, principle, completion)?.token_log_probs(completion))
    }

    /// Next-token distribution after `prefix`.
    pub fn next_distribution(&self, prompt: &[usize], principle: &[usize], prefix: &[usize]) -> Result<ProbVector> {
        self.vocab.check(prompt)?;
        self.vocab.check(principle)?;
        self.vocab.check(prefix)?;
        let c = self.context_vector(&Self::context(prompt, principle));
        let (_, logits) = self.step(&c, prefix.last().copied().unwrap_or(EOS));
        ProbVector::from_weights(&log_softmax(&logits).iter().map(|l| l.exp()).collect::<Vec<_>>())
    }

    /// Backpropagate `sum_t weights[t] * d log p(y_t) + sum_t dh[t] . d h_t`
    /// into `grad`.
    pub fn accumulate_grad(
        &self,
        trace: &Trace,
        completion: &[usize],
        weights: Option<&[f64]>,
        dhidden: Option<&[Vec<f64>]>,
        grad: &mut Params,
    ) {
        let d = self.dim();
        let v = self.vocab.size();
        let out = self.params.block(Block::Out).to_vec();
        let vd = v * d;
        let n_ctx = trace.context.len();
        let mut dctx = vec![0.0; d];
        for t in 0..completion.len() {
            let h = &trace.hidden[t];
            let mut dh = dhidden.map_or_else(|| vec![0.0; d], |g| g[t].clone());
            if let Some(w) = weights {
                let wt = w[t];
                if wt != 0.0 {
                    let ld = &trace.log_dists[t];
                    let y = completion[t];
                    for j in 0..v {
                        let dl = wt * ((j == y) as u8 as f64 - ld[j].exp());
                        grad.data[3 * vd + j] += dl;
                        for k in 0..d {
                            grad.data[2 * vd + k * v + j] += h[k] * dl;
                            dh[k] += out[k * v + j] * dl;
                        }
                    }
                }
            }
            let prev = trace.prev[t];
            for k in 0..d {
                let da = dh[k] * (1.0 - h[k] * h[k]);
                grad.data[prev * d + k] += da;
                dctx[k] += da;
            }
        }
        if n_ctx > 0 {
            let inv = 1.0 / n_ctx as f64;
            for &u in &trace.context {
                for k in 0..d {
                    grad.data[vd + u * d + k] += dctx[k] * inv;
                }
            }
        }
    }

    /// Gradient of the sequence log-likelihood.
    pub fn grad_seq_logprob(&self, prompt: &[usize], principle: &[usize], completion: &[usize]) -> Result<Params> {
        let mut g = Params::zeros(self.vocab.size(), self.dim());
        if completion.is_empty() {
            return Ok(g);
        }
        let tr = self.trace(prompt, principle, completion)?;
        let ones = vec![1.0; completion.len()];
        self.accumulate_grad(&tr, completion, Some(&ones), None, &mut g);
        Ok(g)
    }

    /// L2-normalised mean hidden state over completion positions.
    pub fn hidden_summary(&self, prompt: &[usize], principle: &[usize], completion: &[usize]) -> Result<Vec<f64>> {
        if completion.is_empty() {
            return Err(Error::validation("hidden summary needs a non-empty completion"));
        }
        Ok(summary_from_trace(&self.trace(prompt, principle, completion)?).0)
    }

    /// Draw `g` completions. Cached log-probabilities come from the plain
    /// softmax, i.e. the distribution the trainer later differentiates.
    pub fn sample_group<R: Rng + ?Sized>(
        &self,
        prompt: &[usize],
        principle: &[usize],
        g: usize,
        rng: &mut R,
    ) -> Result<Vec<Completion>> {
        if g < 2 {
            return Err(Error::validation("group size must be >= 2"));
        }
        (0..g).map(|_| self.sample(prompt, principle, rng)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, prompt: &[usize], principle: &[usize], rng: &mut R) -> Result<Completion> {
        self.vocab.check(prompt)?;
        self.vocab.check(principle)?;
        let c = self.context_vector(&Self::context(prompt, principle));
        let mut tokens = Vec::new();
        let mut old_log_probs = Vec::new();
        let mut token_entropies = Vec::new();
        let mut last = EOS;
        while tokens.len() < self.decode.max_len {
            let (_, logits) = self.step(&c, last);
            let ld = log_softmax(&logits);
            let y = self.pick(&logits, &tokens, rng);
            old_log_probs.push(ld[y]);
            token_entropies.push(-ld.iter().map(|l| l.exp() * l).sum::<f64>());
            tokens.push(y);
            last = y;
            if y == EOS {
                break;
            }
        }
        let truncated = tokens.last() != Some(&EOS);
        Ok(Completion {
            tokens,
            old_log_probs,
            token_entropies,
            truncated,
        })
    }

    fn pick<R: Rng + ?Sized>(&self, logits: &[f64], history: &[usize], rng: &mut R) -> usize {
        let cfg = &self.decode;
        let mut l = logits.to_vec();
        if cfg.repetition_penalty != 1.0 {
            let mut seen = vec![false; l.len()];
            for &t in history {
                seen[t] = true;
            }
            for (x, s) in l.iter_mut().zip(seen) {
                if s {
                    *x = if *x > 0.0 {
                        *x / cfg.repetition_penalty
                    } else {
                        *x * cfg.repetition_penalty
                    };
                }
            }
        }
        if cfg.temperature <= 0.0 {
            return argmax(&l);
        }
        let probs: Vec<f64> = log_softmax(&l.iter().map(|x| x / cfg.temperature).collect::<Vec<_>>())
            .iter()
            .map(|x| x.exp())
            .collect();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        if cfg.top_k > 0 {
            order.truncate(cfg.top_k);
        }
        let mut kept = Vec::new();
        let mut mass = 0.0;
        for t in order {
            kept.push(t);
            mass += probs[t];
            if mass >= cfg.top_p {
                break;
            }
        }
        let total: f64 = kept.iter().map(|&t| probs[t]).sum();
        let mut u = rng.random::<f64>() * total;
        for &t in &kept {
            u -= probs[t];
            if u <= 0.0 {
                return t;
            }
        }
        *kept.last().expect("at least one token kept")
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Normalised mean hidden state and the pre-normalisation norm.
pub(crate) fn summary_from_trace(trace: &Trace) -> (Vec<f64>, f64) {
    let d = trace.hidden[0].len();
    let n = trace.hidden.len() as f64;
    let mut m = vec![0.0; d];
    for h in &trace.hidden {
        for (a, b) in m.iter_mut().zip(h) {
            *a += b / n;
        }
    }
    let norm = crate::rep_metrics::l2_norm(&m);
    if norm > 0.0 {
        m.iter_mut().for_each(|x| *x /= norm);
    }
    (m, norm)
}

/// Per-position hidden gradients that realise `d summary` = `upstream`.
pub(crate) fn summary_backward(trace: &Trace, upstream: &[f64]) -> Vec<Vec<f64>> {
    let (s, norm) = summary_from_trace(trace);
    let t = trace.hidden.len();
    if norm == 0.0 {
        return vec![vec![0.0; s.len()]; t];
    }
    let dot: f64 = s.iter().zip(upstream).map(|(a, b)| a * b).sum();
    let dm: Vec<f64> = upstream
        .iter()
        .zip(&s)
        .map(|(g, si)| (g - si * dot) / norm / t as f64)
        .collect();
    vec![dm; t]
}

impl TokenScorer for ToyPolicy {
    fn token_log_probs(&self, prompt: &[usize], principle: &[usize], completion: &[usize]) -> Result<Vec<f64>> {
        self.logprobs(prompt, principle, completion)
    }
}

/// Check a policy's parameter blob against an expected hash.
pub fn verify_hash(params: &Params, expected: &str) -> Result<()> {
    let got = params.hash();
    if got != expected {
        return Err(Error::validation(format!(
            "parameter hash mismatch: expected {expected}, got {got}"
        )));
    }
    check_dim(3 * params.vocab * params.dim + params.vocab, params.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_policy(seed: u64) -> ToyPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ToyPolicy::init(Vocab::new(16).unwrap(), 6, DecodeConfig::default(), &mut rng);
        for x in p.params.data.iter_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
        p
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = ToyPolicy::zeros(Vocab::new(16).unwrap(), 4, DecodeConfig::default());
        for l in p.logprobs(&[5, 6], &[7], &[0, 9, 1, 4]).unwrap() {
            assert_abs_diff_eq!(l, -(16f64).ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn distributions_normalise() {
        let p = random_policy(1);
        let tr = p.trace(&[5, 9], &[6, 7], &[0, 5, 1, 2, 13, 3, 4]).unwrap();
        for ld in &tr.log_dists {
            let s: f64 = ld.iter().map(|l| l.exp()).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let p = random_policy(1);
        assert!(p.logprobs(&[5], &[6], &[16]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_policy(2);
        let (prompt, principle, y) = ([5usize, 11, 8], [6usize, 7], [0usize, 6, 6, 1, 2, 14, 3, 4]);
        let g = p.grad_seq_logprob(&prompt, &principle, &y).unwrap();
        let f = |q: &ToyPolicy| q.logprobs(&prompt, &principle, &y).unwrap().iter().sum::<f64>();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = g.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..g.len() {
            let mut a = p.clone();
            a.params.data[k] += h;
            let mut b = p.clone();
            b.params.data[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            worst = worst.max((fd - g.data[k]).abs() / scale);
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn summary_gradient_matches_finite_differences() {
        let p = random_policy(3);
        let (prompt, principle, y) = ([5usize, 9], [10usize], [0usize, 7, 1, 4]);
        let upstream = vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4];
        let tr = p.trace(&prompt, &principle, &y).unwrap();
        let dh = summary_backward(&tr, &upstream);
        let mut g = Params::zeros(16, 6);
        p.accumulate_grad(&tr, &y, None, Some(&dh), &mut g);
        let f = |q: &ToyPolicy| {
            let s = q.hidden_summary(&prompt, &principle, &y).unwrap();
            s.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for k in 0..g.len() {
            let mut a = p.clone();
            a.params.data[k] += h;
            let mut b = p.clone();
            b.params.data[k] -= h;
            assert_abs_diff_eq!(g.data[k], (f(&a) - f(&b)) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn empty_completion_has_zero_gradient() {
        let p = random_policy(4);
        assert!(p
            .grad_seq_logprob(&[5], &[6], &[])
            .unwrap()
            .data
            .iter()
            .all(|x| *x == 0.0));
        assert!(p.hidden_summary(&[5], &[6], &[]).is_err());
    }

    #[test]
    fn summary_is_unit_norm() {
        let p = random_policy(5);
        let s = p.hidden_summary(&[5, 6], &[7], &[0, 8]).unwrap();
        assert_abs_diff_eq!(crate::rep_metrics::l2_norm(&s), 1.0, epsilon = 1e-12);
        let single = p.hidden_summary(&[5, 6], &[7], &[0]).unwrap();
        let tr = p.trace(&[5, 6], &[7], &[0]).unwrap();
        let n = crate::rep_metrics::l2_norm(&tr.hidden[0]);
        for (a, b) in single.iter().zip(&tr.hidden[0]) {
            assert_abs_diff_eq!(*a, b / n, epsilon = 1e-15);
        }
    }

    #[test]
    fn sampling_is_seeded_and_cached_logprobs_match() {
        let p = random_policy(6);
        let a = p
            .sample_group(&[5, 6], &[7, 8], 4, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = p
            .sample_group(&[5, 6], &[7, 8], 4, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert_eq!(c.old_log_probs.len(), c.tokens.len());
            let fresh = p.logprobs(&[5, 6], &[7, 8], &c.tokens).unwrap();
            assert_eq!(fresh, c.old_log_probs);
            assert_eq!(c.truncated, c.tokens.last() != Some(&EOS));
        }
    }

    #[test]
    fn greedy_group_is_identical() {
        let mut p = random_policy(7);
        p.decode.temperature = 0.0;
        let g = p
            .sample_group(&[5], &[6], 4, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(g.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rendering() {
        let v = Vocab::new(16).unwrap();
        assert_eq!(
            v.render(&[R_OPEN, 5, 6, R_CLOSE, A_OPEN, 15, A_CLOSE, EOS]),
            "<reasoning>ab</reasoning><answer>k</answer>"
        );
        assert_eq!(v.reasoning_fillers(), 5..13);
        assert_eq!(v.answer_fillers(), 13..16);
        assert!(Vocab::new(7).is_err());
    }

    #[test]
    fn hash_tracks_parameters() {
        let p = random_policy(8);
        let r = p.reference_policy();
        assert_eq!(p.params.hash(), r.params.hash());
        let mut q = p.clone();
        q.params.data[0] += 1e-12;
        assert_ne!(q.params.hash(), r.params.hash());
        assert!(verify_hash(&p.params, &r.params.hash()).is_ok());
    }
}
