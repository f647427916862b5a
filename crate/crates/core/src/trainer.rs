//! Single-loop optimiser: group-relative clipped policy gradient, symmetric
//! InfoNCE auxiliary with a light diagonal shaping term, and a Sinkhorn
//! anchor on hidden summaries, plus the per-step diagnostics.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::{
    clean_mi_bounds, diag_mi, reduce_log_probs, sami_aux_with_grad, sami_lambdas, shaping_term, ContrastRow,
    ScoreMatrix, ScoreNormalisation, ShadowDraw,
};
use crate::ot::{ot_regulariser, OtRegulariser};
use crate::policy::{
    summary_backward, summary_from_trace, Block, Completion, DecodeConfig, Params, ToyPolicy, Trace, Vocab,
};
use crate::prob_metrics::probe_report;
use crate::rep_metrics::{effective_dims, frechet_distance, EmpiricalMeasure, GaussianSummary, Spectrum};
use crate::rewards::{
    autoscale_update, entropy_gate, format_gate_schedule, is_xml_valid, mi_tiebreak_reward, sequence_entropy,
    tiebreak_z, AutoscalerState, GateStatus, RewardBreakdown,
};
use crate::task::{supervised_fit, SftConfig, SftExample, ToyTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRewards {
    #[default]
    Group,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub clip_eps: f64,
    /// Reserved; must stay 0.
    pub kl_beta: f64,
    pub lambda_sami: f64,
    pub mi_warmup_steps: usize,
    pub rowcol_anneal_fraction: f64,
    pub shaping_weight: f64,
    pub lambda_ot: f64,
    pub ot_warmup: usize,
    pub blur: f64,
    pub scaling: f64,
    pub ot_subsample_cap: usize,
    /// Sinkhorn iteration budget for the training-time cross term.
    pub ot_max_iter: usize,
    pub shadows_k: usize,
    pub entropy_quantile: f64,
    pub channel_weight: f64,
    pub sigmoid_slope: f64,
    pub autoscale_target: f64,
    pub autoscale_rate: f64,
    pub autoscale_decay: f64,
    pub scale_rewards: ScaleRewards,
    pub mask_truncated: bool,
    /// Fixed divisor for token sums in the policy loss.
    pub length_norm_constant: usize,
    pub score_normalisation: ScoreNormalisation,
    /// Standard deviation of zero-mean jitter added to the base reward.
    pub jitter_sigma: f64,
    pub lr: f64,
    pub grad_clip: f64,

    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub max_completion_len: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub repetition_penalty: f64,
    pub prompt_len: usize,
    pub principle_bias: f64,
    pub warmstart_steps: usize,
    pub warmstart_lr: f64,
    pub warmstart_batch: usize,
    /// Std of the initial context weights; zero makes every principle look alike.
    pub ctx_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            batch_prompts: 8,
            clip_eps: 0.1,
            kl_beta: 0.0,
            lambda_sami: 0.05,
            mi_warmup_steps: 50,
            rowcol_anneal_fraction: 0.1,
            shaping_weight: 0.01,
            lambda_ot: 0.01,
            ot_warmup: 200,
            blur: 0.12,
            scaling: 0.8,
            ot_subsample_cap: 512,
            ot_max_iter: 1000,
            shadows_k: 2,
            entropy_quantile: 0.8,
            channel_weight: 0.15,
            sigmoid_slope: 2.5,
            autoscale_target: 0.2,
            autoscale_rate: 0.05,
            autoscale_decay: 0.99,
            scale_rewards: ScaleRewards::Group,
            mask_truncated: true,
            length_norm_constant: 12,
            score_normalisation: ScoreNormalisation::LengthMean,
            jitter_sigma: 0.0,
            lr: 0.05,
            grad_clip: 1.0,
            vocab_size: 16,
            hidden_dim: 32,
            max_completion_len: 12,
            temperature: 1.0,
            top_p: 0.95,
            top_k: 8,
            repetition_penalty: 1.1,
            prompt_len: 3,
            principle_bias: 0.8,
            warmstart_steps: 150,
            warmstart_lr: 0.5,
            warmstart_batch: 16,
            ctx_init_std: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be >= 1".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if self.kl_beta != 0.0 {
            return bad("kl_beta is not supported; leave it at 0".into());
        }
        let weights = [
            ("lambda_sami", self.lambda_sami),
            ("shaping_weight", self.shaping_weight),
            ("lambda_ot", self.lambda_ot),
            ("channel_weight", self.channel_weight),
            ("jitter_sigma", self.jitter_sigma),
            ("autoscale_rate", self.autoscale_rate),
            ("lr", self.lr),
            ("ctx_init_std", self.ctx_init_std),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("{name} must be a finite nonnegative number, got {w}"));
            }
        }
        if !(self.blur > 0.0) {
            return bad("blur must be > 0".into());
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return bad("scaling must lie in (0, 1)".into());
        }
        if self.shadows_k == 0 {
            return bad("shadows_k must be >= 1".into());
        }
        if !(self.entropy_quantile > 0.0 && self.entropy_quantile < 1.0) {
            return bad("entropy_quantile must lie in (0, 1)".into());
        }
        if !(self.sigmoid_slope > 0.0) {
            return bad("sigmoid_slope must be > 0".into());
        }
        if !(self.autoscale_target > 0.0 && self.autoscale_target < 1.0) {
            return bad("autoscale_target must lie in (0, 1)".into());
        }
        if !(self.autoscale_decay >= 0.0 && self.autoscale_decay < 1.0) {
            return bad("autoscale_decay must lie in [0, 1)".into());
        }
        if self.length_norm_constant == 0 || self.max_completion_len == 0 {
            return bad("length constants must be >= 1".into());
        }
        if self.vocab_size < 8 {
            return bad(format!("vocab_size must be >= 8, got {}", self.vocab_size));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: self.top_k,
            repetition_penalty: self.repetition_penalty,
            max_len: self.max_completion_len,
        }
    }

    /// Auxiliary weight after the linear warmup ramp.
    pub fn lambda_sami_at(&self, step: usize) -> f64 {
        self.lambda_sami * ramp(step, self.mi_warmup_steps)
    }

    pub fn shaping_weight_at(&self, step: usize) -> f64 {
        self.shaping_weight * ramp(step, self.mi_warmup_steps)
    }

    pub fn ot_active(&self, step: usize) -> bool {
        step >= self.ot_warmup && self.lambda_ot > 0.0
    }
}

fn ramp(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    }
}

/// `(lambda_row, lambda_col)` at `step`.
pub fn rowcol_anneal(step: usize, max_steps: usize) -> (f64, f64) {
    sami_lambdas(step, max_steps, 0.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `A_i = R_i - mean`, divided by the group std in `Group` mode; all zero
/// when the group has no spread.
pub fn group_advantages(rewards: &[f64], mode: ScaleRewards) -> Result<GroupAdvantages> {
    if rewards.len() < 2 {
        return Err(Error::validation("group needs >= 2 rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let advantages = if std <= 1e-12 {
        vec![0.0; rewards.len()]
    } else {
        let scale = match mode {
            ScaleRewards::Group => std,
            ScaleRewards::None => 1.0,
        };
        rewards.iter().map(|r| (r - mean) / scale).collect()
    };
    Ok(GroupAdvantages { advantages, mean, std })
}

/// `-min(r A, clip(r, 1-eps, 1+eps) A)` and `d/dr` of it.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let un = ratio * advantage;
    let cl = clipped * advantage;
    if un <= cl {
        (-un, -advantage)
    } else {
        (-cl, 0.0)
    }
}

/// Sequence-level importance ratio `exp(mean_t (new_t - old_t))`.
pub fn sequence_ratio(new_log_probs: &[f64], old_log_probs: &[f64]) -> f64 {
    let n = new_log_probs.len().max(1) as f64;
    (new_log_probs.iter().zip(old_log_probs).map(|(a, b)| a - b).sum::<f64>() / n).exp()
}

/// `L = L_grpo + lambda_sami(step) * L_sami + shaping + R_ot(step)`.
pub fn enigma_loss(grpo: f64, sami: f64, shaping: f64, ot: f64, cfg: &TrainConfig, step: usize) -> f64 {
    let ot = if cfg.ot_active(step) { ot } else { 0.0 };
    grpo + cfg.lambda_sami_at(step) * sami + shaping + ot
}

/// Undefined metrics (for example bounds on a step with no clean rows) are
/// NaN in memory and `null` on disk.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One line of `steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub reward_base_mean: f64,
    pub reward_mi_mean: f64,
    pub reward_std: f64,
    pub loss_total: f64,
    pub loss_grpo: f64,
    pub loss_sami: f64,
    pub loss_ot: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub mi_row_clean: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub mi_col_clean: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub mi_gap: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub diag_mi: f64,
    pub grad_norm: f64,
    pub entropy: f64,
    pub clean_count: usize,
    pub bhat_angle: f64,
    pub hellinger: f64,
    pub js_bits: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub frechet: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub effrank: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub pr: f64,
    pub loss_shaping: f64,
    pub lambda_sami: f64,
    pub autoscale_beta: f64,
    pub reward_total_mean: f64,
    pub format_rate: f64,
}

/// Serialisable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub params_hash: String,
    pub reference_hash: String,
    pub params: Params,
    pub autoscaler: AutoscalerState,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    pub max_steps: usize,
    pub task: ToyTask,
    pub policy: ToyPolicy,
    reference: ToyPolicy,
    pub autoscaler: AutoscalerState,
    pub step: usize,
}

struct Sampled {
    prompt: Vec<usize>,
    principle: usize,
    completion: Completion,
    trace: Trace,
    score: f64,
}

impl Trainer {
    /// Random init followed by a format-only warm start with the context block
    /// held at zero; the result is also frozen as the reference.
    pub fn new(cfg: TrainConfig, task: ToyTask, seed: u64, max_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if task.vocab.size() != cfg.vocab_size {
            return Err(Error::Config("task vocabulary does not match vocab_size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = ToyPolicy::init(task.vocab, cfg.hidden_dim, cfg.decode(), &mut rng);
        if cfg.ctx_init_std > 0.0 {
            let normal = Normal::new(0.0, cfg.ctx_init_std).map_err(|e| Error::Config(e.to_string()))?;
            for x in policy.params.block_mut(Block::Ctx) {
                *x = normal.sample(&mut rng);
            }
        }
        if cfg.warmstart_steps > 0 {
            let data: Vec<SftExample> = (0..256)
                .map(|i| SftExample {
                    prompt: task.sample_prompt(&mut rng),
                    principle: task.principles[i % task.principles.len()].clone(),
                    target: task.gold(None, &mut rng),
                })
                .collect();
            let sft = SftConfig {
                steps: cfg.warmstart_steps,
                batch: cfg.warmstart_batch,
                lr: cfg.warmstart_lr,
                clip: 1.0,
                freeze_ctx: true,
            };
            supervised_fit(&mut policy, &data, &sft, &mut rng)?;
        }
        let reference = policy.reference_policy();
        let autoscaler = AutoscalerState {
            target: cfg.autoscale_target,
            rate: cfg.autoscale_rate,
            decay: cfg.autoscale_decay,
            ..Default::default()
        };
        Ok(Self {
            cfg,
            seed,
            max_steps,
            task,
            policy,
            reference,
            autoscaler,
            step: 0,
        })
    }

    pub fn reference(&self) -> &ToyPolicy {
        &self.reference
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params_hash: self.policy.params.hash(),
            reference_hash: self.reference.params.hash(),
            params: self.policy.params.clone(),
            autoscaler: self.autoscaler,
        }
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    /// Run one step; on error the trainer state is left untouched.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let (report, params, autoscaler) = self.compute_step()?;
        self.policy.params = params;
        self.autoscaler = autoscaler;
        self.step += 1;
        Ok(report)
    }

    fn score(&self, tr: &Trace, completion: &[usize]) -> Result<f64> {
        reduce_log_probs(&tr.token_log_probs(completion), self.cfg.score_normalisation)
    }

    /// Gradient weights per token that realise `d score / d log p_t`.
    fn score_weights(&self, tr: &Trace, completion: &[usize], scale: f64) -> Vec<f64> {
        let n = completion.len();
        match self.cfg.score_normalisation {
            ScoreNormalisation::RawSum => vec![scale; n],
            ScoreNormalisation::LengthMean => vec![scale / n as f64; n],
            ScoreNormalisation::FisherWeighted => crate::mi::fisher_weights(&tr.token_log_probs(completion))
                .into_iter()
                .map(|w| w * scale)
                .collect(),
        }
    }

    fn compute_step(&self) -> Result<(StepReport, Params, AutoscalerState)> {
        let cfg = &self.cfg;
        let s = self.step;
        let mut rng = self.step_rng();
        let policy = &self.policy;
        let n_principles = self.task.principles.len();
        let k = cfg.shadows_k;
        let g_size = cfg.group_size;

        // 1. sample groups
        let mut batch: Vec<Sampled> = Vec::with_capacity(cfg.batch_prompts * g_size);
        for b in 0..cfg.batch_prompts {
            let principle = b % n_principles;
            let prompt = self.task.sample_prompt(&mut rng);
            let ctx = &self.task.principles[principle];
            for completion in policy.sample_group(&prompt, ctx, g_size, &mut rng)? {
                let trace = policy.trace(&prompt, ctx, &completion.tokens)?;
                let score = self.score(&trace, &completion.tokens)?;
                batch.push(Sampled {
                    prompt: prompt.clone(),
                    principle,
                    completion,
                    trace,
                    score,
                });
            }
        }
        let n = batch.len();

        // 2. gates and contrast rows
        let format_pass: Vec<bool> = batch
            .iter()
            .map(|x| !x.completion.truncated && is_xml_valid(&policy.vocab.render(&x.completion.tokens)))
            .collect();
        let entropies: Vec<f64> = batch
            .iter()
            .map(|x| sequence_entropy(&x.completion.token_entropies))
            .collect();
        let entropy_pass = entropy_gate(&entropies, cfg.entropy_quantile)?;
        let format_active = format_gate_schedule(s, cfg.mi_warmup_steps);
        let clean: Vec<bool> = format_pass.iter().zip(&entropy_pass).map(|(a, b)| *a && *b).collect();

        let mut row_contrasts = Vec::with_capacity(n);
        let mut col_contrasts = Vec::with_capacity(n);
        let can_shadow = n_principles >= 2;
        for (i, x) in batch.iter().enumerate() {
            if can_shadow {
                let draw = ShadowDraw::sample(&mut rng, n_principles, x.principle, k)?;
                let mut shadows = Vec::with_capacity(k);
                for &c in &draw.shadow_ids {
                    let tr = policy.trace(&x.prompt, &self.task.principles[c], &x.completion.tokens)?;
                    shadows.push(self.score(&tr, &x.completion.tokens)?);
                }
                row_contrasts.push(ContrastRow {
                    positive: x.score,
                    shadows,
                });
            }
            let others: Vec<usize> = (0..n).filter(|&j| batch[j].principle != x.principle).collect();
            let pool: Vec<usize> = if others.is_empty() {
                (0..n).filter(|&j| j / g_size != i / g_size).collect()
            } else {
                others
            };
            if !pool.is_empty() {
                let mut shadows = Vec::with_capacity(k);
                for _ in 0..k {
                    let j = *pool.choose(&mut rng).expect("non-empty");
                    let y = &batch[j].completion.tokens;
                    let tr = policy.trace(&x.prompt, &self.task.principles[x.principle], y)?;
                    shadows.push(self.score(&tr, y)?);
                }
                col_contrasts.push(ContrastRow {
                    positive: x.score,
                    shadows,
                });
            }
        }

        // 3. rewards
        let jitter = if cfg.jitter_sigma > 0.0 {
            Some(Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let beta = self.autoscaler.beta;
        let mut rewards = Vec::with_capacity(n);
        for i in 0..n {
            let gates = GateStatus {
                entropy_pass: entropy_pass[i],
                format_pass: format_pass[i],
                format_active,
            };
            let base = if format_pass[i] { 1.0 } else { 0.0 };
            let mi = if can_shadow && cfg.channel_weight > 0.0 {
                let z = tiebreak_z(&row_contrasts[i].candidates());
                mi_tiebreak_reward(z, cfg.sigmoid_slope, cfg.channel_weight, &gates, beta)
            } else {
                0.0
            };
            let noise = jitter.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            rewards.push(RewardBreakdown::new(base, mi, noise, gates, beta));
        }
        let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| rewards.iter().map(f).sum::<f64>() / n as f64;
        let reward_base_mean = mean(&|r| r.base);
        let reward_mi_mean = mean(&|r| r.mi);
        let reward_total_mean = mean(&|r| r.total);
        let autoscaler = autoscale_update(&self.autoscaler, mean(&|r| r.mi.abs()), mean(&|r| r.base.abs()));

        // 4. advantages and policy loss
        let mut grad = Params::zeros(policy.vocab.size(), policy.dim());
        let mut loss_grpo = 0.0;
        let mut reward_std = 0.0;
        let denom = (n * cfg.length_norm_constant) as f64;
        for (gi, chunk) in rewards.chunks(g_size).enumerate() {
            let totals: Vec<f64> = chunk.iter().map(|r| r.total).collect();
            let adv = group_advantages(&totals, cfg.scale_rewards)?;
            reward_std += adv.std / (n / g_size) as f64;
            for (j, a) in adv.advantages.iter().enumerate() {
                let x = &batch[gi * g_size + j];
                if cfg.mask_truncated && x.completion.truncated {
                    continue;
                }
                let y = &x.completion.tokens;
                let new_lp = x.trace.token_log_probs(y);
                let ratio = sequence_ratio(&new_lp, &x.completion.old_log_probs);
                let (c, dc_dr) = clipped_surrogate(ratio, *a, cfg.clip_eps);
                let len = y.len() as f64;
                loss_grpo += len * c / denom;
                if dc_dr != 0.0 {
                    // d ratio / d log p_t = ratio / |y|
                    let w = vec![dc_dr * ratio / denom; y.len()];
                    policy.accumulate_grad(&x.trace, y, Some(&w), None, &mut grad);
                }
            }
        }

        // 5. in-batch SAMI slices: rows are completions, columns principles
        let lambda_eff = cfg.lambda_sami_at(s);
        let shaping_w = cfg.shaping_weight_at(s);
        let (lambda_row, lambda_col) = sami_lambdas(s, self.max_steps, cfg.rowcol_anneal_fraction);
        let mut slices: Vec<Vec<usize>> = Vec::new();
        for g in 0..g_size {
            for block in (0..cfg.batch_prompts).collect::<Vec<_>>().chunks(n_principles) {
                let rows: Vec<usize> = block
                    .iter()
                    .map(|&b| b * g_size + g)
                    .filter(|&i| !(cfg.mask_truncated && batch[i].completion.truncated))
                    .collect();
                if rows.len() >= 2 {
                    slices.push(rows);
                }
            }
        }
        let mut loss_sami = 0.0;
        let mut loss_shaping = 0.0;
        let mut diag_total = 0.0;
        let n_slices = slices.len();
        for rows in &slices {
            let m = rows.len();
            let mut traces: Vec<Vec<Option<Trace>>> = vec![vec![None; m]; m];
            let mut values = vec![vec![0.0; m]; m];
            for (a, &i) in rows.iter().enumerate() {
                for (b, &j) in rows.iter().enumerate() {
                    let x = &batch[i];
                    if a == b {
                        values[a][b] = x.score;
                    } else {
                        let tr = policy.trace(
                            &x.prompt,
                            &self.task.principles[batch[j].principle],
                            &x.completion.tokens,
                        )?;
                        values[a][b] = self.score(&tr, &x.completion.tokens)?;
                        traces[a][b] = Some(tr);
                    }
                }
            }
            let l = ScoreMatrix::from_rows(values, cfg.score_normalisation)?;
            diag_total += diag_mi(&l)?;
            let (sami, dsami) = sami_aux_with_grad(&l, lambda_row, lambda_col)?;
            loss_sami += sami / n_slices as f64;
            let mask: Vec<bool> = rows.iter().map(|&i| entropy_pass[i]).collect();
            let shaping = shaping_term(&l, &mask, shaping_w)?;
            loss_shaping -= shaping.value / n_slices as f64;
            if lambda_eff == 0.0 && shaping_w == 0.0 {
                continue;
            }
            for a in 0..m {
                let y = &batch[rows[a]].completion.tokens;
                for b in 0..m {
                    let coef = (lambda_eff * dsami[a][b] - shaping.grad[a][b]) / n_slices as f64;
                    if coef == 0.0 {
                        continue;
                    }
                    let tr = traces[a][b].as_ref().unwrap_or(&batch[rows[a]].trace);
                    let w = self.score_weights(tr, y, coef);
                    policy.accumulate_grad(tr, y, Some(&w), None, &mut grad);
                }
            }
        }
        let diag = if n_slices > 0 {
            diag_total / n_slices as f64
        } else {
            f64::NAN
        };

        // 6. representation anchor
        let current: Vec<Vec<f64>> = batch.iter().map(|x| summary_from_trace(&x.trace).0).collect();
        let ref_traces: Vec<Trace> = batch
            .iter()
            .map(|x| {
                self.reference
                    .trace(&x.prompt, &self.task.principles[x.principle], &x.completion.tokens)
            })
            .collect::<Result<_>>()?;
        let reference: Vec<Vec<f64>> = ref_traces.iter().map(|t| summary_from_trace(t).0).collect();
        let mut loss_ot = 0.0;
        if cfg.ot_active(s) {
            let reg = OtRegulariser {
                weight: cfg.lambda_ot,
                blur: cfg.blur,
                subsample_cap: cfg.ot_subsample_cap,
                scaling: cfg.scaling,
                max_iter: cfg.ot_max_iter,
            };
            let term = ot_regulariser(&current, &reference, &reg, self.seed, s as u64, true)?;
            loss_ot = term.value;
            if let Some(g) = &term.grad {
                for (row, up) in term.rows.iter().zip(g) {
                    let x = &batch[*row];
                    let dh = summary_backward(&x.trace, up);
                    policy.accumulate_grad(&x.trace, &x.completion.tokens, None, Some(&dh), &mut grad);
                }
            }
        }

        // 7. diagnostics (pre-update)
        let bounds = if can_shadow {
            clean_mi_bounds(&row_contrasts, &col_contrasts, &clean, k)?
        } else {
            crate::mi::CleanMiBounds {
                row_bound: f64::NAN,
                col_bound: f64::NAN,
                gap: f64::NAN,
                clean_count: clean.iter().filter(|c| **c).count(),
            }
        };
        let (mut angle, mut hell, mut js) = (0.0, 0.0, 0.0);
        for (x, rt) in batch.iter().zip(&ref_traces) {
            let last = x.completion.tokens.len() - 1;
            let r = probe_report(&x.trace.distribution(last)?, &rt.distribution(last)?)?;
            angle += r.bhat_angle / n as f64;
            hell += r.hellinger / n as f64;
            js += r.js_bits / n as f64;
        }
        let cur_m = EmpiricalMeasure::new(current, true)?;
        let ref_m = EmpiricalMeasure::new(reference, true)?;
        let cur_g = GaussianSummary::fit(&cur_m)?;
        let frechet = frechet_distance(&cur_g, &GaussianSummary::fit(&ref_m)?)?;
        let dims = effective_dims(&Spectrum::of_covariance(cur_g.cov())?)
            .map(|d| (d.effrank, d.participation_ratio))
            .unwrap_or((f64::NAN, f64::NAN));

        // 8. update
        let grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::validation("non-finite gradient"));
        }
        if grad_norm > cfg.grad_clip {
            grad.scale(cfg.grad_clip / grad_norm);
        }
        let mut params = policy.params.clone();
        params.add_scaled(&grad, -cfg.lr);

        let loss_total = loss_grpo + lambda_eff * loss_sami + loss_shaping + loss_ot;
        let report = StepReport {
            step: s,
            reward_base_mean,
            reward_mi_mean,
            reward_std,
            loss_total,
            loss_grpo,
            loss_sami,
            loss_ot,
            mi_row_clean: bounds.row_bound,
            mi_col_clean: bounds.col_bound,
            mi_gap: bounds.gap,
            diag_mi: diag,
            grad_norm,
            entropy: entropies.iter().sum::<f64>() / n as f64,
            clean_count: bounds.clean_count,
            bhat_angle: angle,
            hellinger: hell,
            js_bits: js,
            frechet,
            effrank: dims.0,
            pr: dims.1,
            loss_shaping,
            lambda_sami: lambda_eff,
            autoscale_beta: beta,
            reward_total_mean,
            format_rate: format_pass.iter().filter(|f| **f).count() as f64 / n as f64,
        };
        Ok((report, params, autoscaler))
    }

    /// Restore parameters and scaler state from a checkpoint of this run.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        crate::policy::verify_hash(&ck.params, &ck.params_hash)?;
        if ck.reference_hash != self.reference.params.hash() {
            return Err(Error::validation("checkpoint belongs to a different reference policy"));
        }
        self.policy.params = ck.params.clone();
        self.autoscaler = ck.autoscaler;
        self.step = ck.step;
        Ok(())
    }
}
