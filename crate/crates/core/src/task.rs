//! Synthetic principle-conditioned reasoning task for the toy policy.
//!
//! Prompts are random filler strings. Each principle is a token pattern; gold
//! continuations follow the tag template and draw reasoning fillers from the
//! principle's own tokens with probability `bias`, which makes the principle
//! recoverable from the continuation.

use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Block, Params, ToyPolicy, Vocab, A_CLOSE, A_OPEN, EOS, R_CLOSE, R_OPEN};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub vocab: Vocab,
    /// Token pattern of each principle.
    pub principles: Vec<Vec<usize>>,
    pub prompt_len: usize,
    pub bias: f64,
}

/// One replayable task item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<usize>,
    pub principle: usize,
    pub gold: Vec<usize>,
}

impl ToyTask {
    pub fn new(vocab: Vocab, principles: Vec<Vec<usize>>, prompt_len: usize, bias: f64) -> Result<Self> {
        if principles.is_empty() {
            return Err(Error::validation("task needs at least one principle"));
        }
        for p in &principles {
            vocab.check(p)?;
        }
        if !(0.0..=1.0).contains(&bias) {
            return Err(Error::validation(format!("bias must lie in [0, 1], got {bias}")));
        }
        Ok(Self {
            vocab,
            principles,
            prompt_len,
            bias,
        })
    }

    /// Prompts use answer fillers only, so they never mimic a principle.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let fillers = self.vocab.answer_fillers();
        (0..self.prompt_len)
            .map(|_| rng.random_range(fillers.clone()))
            .collect()
    }

    /// Gold continuation; `None` draws reasoning fillers without principle bias.
    pub fn gold<R: Rng + ?Sized>(&self, principle: Option<usize>, rng: &mut R) -> Vec<usize> {
        match principle {
            Some(p) => self.gold_for(&self.principles[p], rng),
            None => self.gold_for(&[], rng),
        }
    }

    /// Gold continuation whose reasoning fillers lean toward `pattern`.
    pub fn gold_for<R: Rng + ?Sized>(&self, pattern: &[usize], rng: &mut R) -> Vec<usize> {
        let reasoning = self.vocab.reasoning_fillers();
        let answer = self.vocab.answer_fillers();
        let favoured: Vec<usize> = pattern.iter().copied().filter(|t| reasoning.contains(t)).collect();
        let mut out = vec![R_OPEN];
        for _ in 0..rng.random_range(1..=3) {
            let t = if !favoured.is_empty() && rng.random::<f64>() < self.bias {
                *favoured.choose(rng).expect("non-empty")
            } else {
                rng.random_range(reasoning.clone())
            };
            out.push(t);
        }
        out.extend([R_CLOSE, A_OPEN]);
        for _ in 0..rng.random_range(1..=2) {
            out.push(rng.random_range(answer.clone()));
        }
        out.extend([A_CLOSE, EOS]);
        out
    }

    pub fn instance<R: Rng + ?Sized>(&self, principle: usize, rng: &mut R) -> TaskInstance {
        TaskInstance {
            prompt: self.sample_prompt(rng),
            principle,
            gold: self.gold(Some(principle), rng),
        }
    }

    pub fn instances<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TaskInstance> {
        (0..n).map(|i| self.instance(i % self.principles.len(), rng)).collect()
    }
}

pub fn write_jsonl<W: Write>(items: &[TaskInstance], mut writer: W) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut writer, it)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<task jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<task jsonl>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One supervised example: context tokens and a target continuation.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub principle: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct SftConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    /// Keep the context block at its current value.
    pub freeze_ctx: bool,
}

/// Minibatch SGD on the length-normalised negative log-likelihood.
/// Returns the mean loss of the final minibatch.
pub fn supervised_fit<R: Rng + ?Sized>(
    policy: &mut ToyPolicy,
    data: &[SftExample],
    cfg: &SftConfig,
    rng: &mut R,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("no supervised examples"));
    }
    let mut last = f64::NAN;
    for _ in 0..cfg.steps {
        let mut grad = Params::zeros(policy.vocab.size(), policy.dim());
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let ex = data.choose(rng).expect("non-empty");
            let tr = policy.trace(&ex.prompt, &ex.principle, &ex.target)?;
            let n = ex.target.len() as f64;
            loss -= tr.token_log_probs(&ex.target).iter().sum::<f64>() / n / cfg.batch as f64;
            let w = vec![1.0 / n / cfg.batch as f64; ex.target.len()];
            policy.accumulate_grad(&tr, &ex.target, Some(&w), None, &mut grad);
        }
        if cfg.freeze_ctx {
            grad.block_mut(Block::Ctx).iter_mut().for_each(|x| *x = 0.0);
        }
        let norm = grad.norm();
        if norm > cfg.clip {
            grad.scale(cfg.clip / norm);
        }
        // ascent on log-likelihood
        policy.params.add_scaled(&grad, cfg.lr);
        last = loss;
    }
    Ok(last)
}
