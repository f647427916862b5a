//! Format reward, gates and the autoscaled MI tie-breaker channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::{log_softmax, standardise};

const TAGS: [&str; 4] = ["<reasoning>", "</reasoning>", "<answer>", "</answer>"];

/// 1.0 iff `text` is exactly `<reasoning>..</reasoning><answer>..</answer>`.
///
/// Anchored at both ends, with no tag repeated inside either block.
pub fn xml_format_reward(text: &str) -> f64 {
    if is_xml_valid(text) {
        1.0
    } else {
        0.0
    }
}

pub fn is_xml_valid(text: &str) -> bool {
    let Some(rest) = text.strip_prefix("<reasoning>") else {
        return false;
    };
    let Some(rest) = rest.strip_suffix("</answer>") else {
        return false;
    };
    let Some((reasoning, answer)) = rest.split_once("</reasoning><answer>") else {
        return false;
    };
    !TAGS.iter().any(|t| reasoning.contains(t) || answer.contains(t))
}

/// Nearest-rank `q`-quantile of `values` (requires non-empty input).
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Rows whose sequence entropy does not exceed the batch `q`-quantile; ties pass.
pub fn entropy_gate(seq_entropies: &[f64], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::validation(format!("quantile must lie in (0, 1), got {q}")));
    }
    if seq_entropies.is_empty() {
        return Ok(Vec::new());
    }
    let threshold = nearest_rank_quantile(seq_entropies, q);
    Ok(seq_entropies.iter().map(|h| *h <= threshold).collect())
}

/// Mean per-token entropy of the policy over a sampled completion.
pub fn sequence_entropy(token_entropies: &[f64]) -> f64 {
    if token_entropies.is_empty() {
        return 0.0;
    }
    token_entropies.iter().sum::<f64>() / token_entropies.len() as f64
}

/// Whether the format gate applies at `step`; inclusive at `0.3 * warmup`.
pub fn format_gate_schedule(step: usize, mi_warmup_steps: usize) -> bool {
    step as f64 >= 0.3 * mi_warmup_steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GateStatus {
    pub entropy_pass: bool,
    pub format_pass: bool,
    /// False while the format gate is still scheduled off.
    pub format_active: bool,
}

impl GateStatus {
    pub fn open(&self) -> bool {
        self.entropy_pass && (self.format_pass || !self.format_active)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscalerState {
    pub ema_mi: f64,
    pub ema_base: f64,
    pub beta: f64,
    pub target: f64,
    pub rate: f64,
    pub decay: f64,
}

impl Default for AutoscalerState {
    fn default() -> Self {
        Self {
            ema_mi: 0.0,
            ema_base: 0.0,
            beta: 1.0,
            target: 0.2,
            rate: 0.05,
            decay: 0.99,
        }
    }
}

pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 1e3;
const RHO_FLOOR: f64 = 1e-8;

impl AutoscalerState {
    pub fn ratio(&self) -> f64 {
        self.ema_mi / self.ema_base.max(RHO_FLOOR)
    }
}

/// Fold one batch's mean |MI reward| and mean |base reward| into the EMAs and
/// move `beta` toward the target share.
pub fn autoscale_update(state: &AutoscalerState, batch_mi_mag: f64, batch_base_mag: f64) -> AutoscalerState {
    let d = state.decay;
    let mut next = *state;
    next.ema_mi = d * state.ema_mi + (1.0 - d) * batch_mi_mag.abs();
    next.ema_base = d * state.ema_base + (1.0 - d) * batch_base_mag.abs();
    let rho = next.ratio();
    next.beta = (state.beta * (state.rate * (state.target - rho)).exp()).clamp(BETA_MIN, BETA_MAX);
    next
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `z`: row log-softmax of the standardised candidate scores, positive first.
pub fn tiebreak_z(candidates: &[f64]) -> f64 {
    log_softmax(&standardise(candidates))[0]
}

pub fn mi_tiebreak_reward(z: f64, slope: f64, channel_weight: f64, gates: &GateStatus, beta: f64) -> f64 {
    if !gates.open() {
        return 0.0;
    }
    beta * channel_weight * sigmoid(slope * z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub base: f64,
    pub mi: f64,
    /// Zero-mean jitter; only nonzero in the jitter ablation.
    pub noise: f64,
    pub total: f64,
    pub gates: GateStatus,
    pub beta: f64,
}

impl RewardBreakdown {
    pub fn new(base: f64, mi: f64, noise: f64, gates: GateStatus, beta: f64) -> Self {
        Self {
            base,
            mi,
            noise,
            total: base + mi + noise,
            gates,
            beta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const OPEN: GateStatus = GateStatus {
        entropy_pass: true,
        format_pass: true,
        format_active: true,
    };

    #[test]
    fn xml_examples() {
        assert_eq!(xml_format_reward("<reasoning>a</reasoning><answer>b</answer>"), 1.0);
        assert_eq!(xml_format_reward("<reasoning>a</reasoning><answer>b</answer> "), 0.0);
        assert_eq!(xml_format_reward(" <reasoning>a</reasoning><answer>b</answer>"), 0.0);
        assert_eq!(
            xml_format_reward("<reasoning>a</reasoning><answer>b</answer><answer>c</answer>"),
            0.0
        );
        assert_eq!(xml_format_reward("<reasoning>a</reasoning>\n<answer>b</answer>"), 0.0);
        assert_eq!(
            xml_format_reward("<reasoning><reasoning>a</reasoning><answer>b</answer>"),
            0.0
        );
        assert_eq!(xml_format_reward(""), 0.0);
    }

    #[test]
    fn entropy_gate_examples() {
        assert_eq!(entropy_gate(&[2.0; 5], 0.8).unwrap(), vec![true; 5]);
        assert_eq!(
            entropy_gate(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.8).unwrap(),
            vec![true, true, true, true, false]
        );
        assert_eq!(entropy_gate(&[7.0], 0.8).unwrap(), vec![true]);
        assert!(entropy_gate(&[], 0.8).unwrap().is_empty());
        assert!(entropy_gate(&[1.0], 1.0).is_err());
    }

    #[test]
    fn tiebreak_examples() {
        assert_abs_diff_eq!(mi_tiebreak_reward(0.0, 2.5, 0.15, &OPEN, 1.0), 0.075, epsilon = 1e-15);
        let blocked = GateStatus {
            format_pass: false,
            ..OPEN
        };
        assert_eq!(mi_tiebreak_reward(3.0, 2.5, 0.15, &blocked, 1.0), 0.0);
        assert_abs_diff_eq!(mi_tiebreak_reward(1e3, 2.5, 0.15, &OPEN, 2.0), 0.3, epsilon = 1e-15);
        // before the format gate switches on, only entropy matters
        let early = GateStatus {
            format_pass: false,
            format_active: false,
            ..OPEN
        };
        assert!(mi_tiebreak_reward(0.0, 2.5, 0.15, &early, 1.0) > 0.0);
    }

    #[test]
    fn z_of_constant_row_is_chance() {
        assert_abs_diff_eq!(tiebreak_z(&[1.0, 1.0, 1.0]), -(3f64.ln()), epsilon = 1e-15);
        assert!(tiebreak_z(&[2.0, 0.0, 0.0]) > tiebreak_z(&[0.0, 2.0, 0.0]));
    }

    #[test]
    fn autoscaler_examples() {
        let at_target = AutoscalerState {
            ema_mi: 0.2,
            ema_base: 1.0,
            ..Default::default()
        };
        let next = autoscale_update(&at_target, 0.2, 1.0);
        assert_eq!(next.beta, 1.0);

        let high = autoscale_update(&at_target, 5.0, 1.0);
        assert!(high.beta < 1.0);

        let mut frozen = AutoscalerState {
            rate: 0.0,
            ..Default::default()
        };
        for i in 0..100 {
            frozen = autoscale_update(&frozen, i as f64, 0.5);
        }
        assert_eq!(frozen.beta, 1.0);
    }

    #[test]
    fn autoscaler_stays_bounded() {
        let mut s = AutoscalerState {
            rate: 50.0,
            ..Default::default()
        };
        for _ in 0..50 {
            s = autoscale_update(&s, 0.0, 1.0);
        }
        assert_eq!(s.beta, BETA_MAX);
        for _ in 0..50 {
            s = autoscale_update(&s, 1e6, 0.0);
        }
        assert_eq!(s.beta, BETA_MIN);
    }

    #[test]
    fn format_gate_boundary() {
        assert!(!format_gate_schedule(0, 50));
        assert!(!format_gate_schedule(14, 50));
        assert!(format_gate_schedule(15, 50));
        assert!(format_gate_schedule(0, 0));
    }
}
