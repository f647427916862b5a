//! Principle-set metrology: how much selective signal a constitution carries
//! before any training happens.
//!
//! Scores come either from a [`TokenScorer`] (the toy policy, fitted as a
//! world model of the synthetic task) or from externally produced CSV files.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mi::{clean_bound, ContrastRow, ScoreMatrix, ScoreNormalisation, ShadowDraw, TokenScorer};
use crate::policy::{DecodeConfig, ToyPolicy, Vocab};
use crate::task::{supervised_fit, SftConfig, SftExample, ToyTask};

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principle {
    pub id: String,
    pub text: String,
}

impl Principle {
    /// Read the text as a whitespace-separated token pattern.
    pub fn tokens(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        let toks = self
            .text
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::validation(format!("principle {}: `{t}` is not a token id", self.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        vocab.check(&toks)?;
        Ok(toks)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipleSet {
    pub name: String,
    pub positives: Vec<Principle>,
    pub negatives: Vec<Principle>,
}

impl PrincipleSet {
    /// Parse the `name:` / `positives:` / `negatives:` list layout.
    ///
    /// ```text
    /// name: toy_high_si
    /// positives:
    ///   - 5 6
    /// negatives:
    ///   - 9 10
    /// ```
    /// Entries are numbered `p1, p2, ..` and `n1, n2, ..` in file order.
    pub fn parse(src: &str, source_name: &str) -> Result<Self> {
        let schema = |line: usize, message: String| Error::Schema {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut name = None;
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut section: Option<Role> = None;
        let mut seen_sections = HashSet::new();
        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let trimmed = line.trim_start();
            if let Some(item) = trimmed.strip_prefix("- ").or_else(|| (trimmed == "-").then_some("")) {
                let role = section.ok_or_else(|| schema(line_no, "list entry outside positives/negatives".into()))?;
                let text = unquote(item.trim());
                let list = match role {
                    Role::Positive => &mut positives,
                    Role::Negative => &mut negatives,
                };
                let id = format!("{}{}", if role == Role::Positive { 'p' } else { 'n' }, list.len() + 1);
                if text.is_empty() {
                    return Err(schema(line_no, format!("entry {id} is empty")));
                }
                if list.iter().any(|p: &Principle| p.text == text) {
                    return Err(schema(line_no, format!("entry {id} duplicates `{text}`")));
                }
                list.push(Principle { id, text });
                continue;
            }
            let (key, value) = trimmed
                .split_once(':')
                .ok_or_else(|| schema(line_no, format!("expected `key:` or `- entry`, got `{trimmed}`")))?;
            let value = value.trim();
            match key.trim() {
                "name" => {
                    if value.is_empty() {
                        return Err(schema(line_no, "name must not be empty".into()));
                    }
                    name = Some(unquote(value));
                    section = None;
                }
                k @ ("positives" | "negatives") => {
                    if !seen_sections.insert(k.to_string()) {
                        return Err(schema(line_no, format!("`{k}` given twice")));
                    }
                    section = Some(if k == "positives" {
                        Role::Positive
                    } else {
                        Role::Negative
                    });
                    if value == "[]" {
                        section = None;
                    } else if !value.is_empty() {
                        return Err(schema(line_no, format!("`{k}:` must be followed by a list")));
                    }
                }
                other => return Err(schema(line_no, format!("unknown key `{other}`"))),
            }
        }
        let end = src.lines().count().max(1);
        if positives.is_empty() {
            return Err(schema(end, "positives list is empty".into()));
        }
        if negatives.is_empty() {
            return Err(schema(end, "negatives list is empty".into()));
        }
        Ok(Self {
            name: name.unwrap_or_else(|| source_name.to_string()),
            positives,
            negatives,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, &path.display().to_string())
    }

    pub fn all(&self) -> impl Iterator<Item = (Role, &Principle)> {
        self.positives
            .iter()
            .map(|p| (Role::Positive, p))
            .chain(self.negatives.iter().map(|p| (Role::Negative, p)))
    }
}

fn unquote(s: &str) -> String {
    let t = s.trim();
    for q in ['"', '\''] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            return t[1..t.len() - 1].to_string();
        }
    }
    t.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaNll {
    pub delta_bits: f64,
    /// `2^-delta`; below 1 means conditioning lowers perplexity.
    pub perplexity_ratio: f64,
}

impl DeltaNll {
    /// Perplexity drop in percent (negative for a rise).
    pub fn perplexity_drop_pct(&self) -> f64 {
        100.0 * (1.0 - self.perplexity_ratio)
    }
}

/// NLLs in bits/token without and with the principle in context.
pub fn delta_nll(nll_without: f64, nll_with: f64) -> DeltaNll {
    let delta_bits = nll_without - nll_with;
    DeltaNll {
        delta_bits,
        perplexity_ratio: (-delta_bits).exp2(),
    }
}

/// `P[s+ > s-] + P[s+ = s-] / 2` over all pairs.
pub fn mann_whitney_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::validation("AUC needs non-empty positive and negative lists"));
    }
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

pub fn mi_effective(pos_margin: f64, neg_margin: f64) -> f64 {
    pos_margin - neg_margin
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiWeights {
    pub w_b: f64,
    pub w_m: f64,
    pub w_s: f64,
}

impl Default for SiWeights {
    fn default() -> Self {
        Self {
            w_b: 0.6,
            w_m: 0.3,
            w_s: 0.1,
        }
    }
}

impl SiWeights {
    fn check(&self) -> Result<()> {
        if [self.w_b, self.w_m, self.w_s]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::validation("SI weights must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn combine(&self, bits: f64, mi: f64, sep: f64) -> f64 {
        self.w_b * bits + self.w_m * mi + self.w_s * sep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiMode {
    #[default]
    Raw,
    Zscored,
}

/// The three inputs of the index for one principle set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiComponents {
    pub bits: f64,
    pub mi_effective: f64,
    pub auc: f64,
}

impl SiComponents {
    pub fn separation(&self) -> f64 {
        2.0 * self.auc - 1.0
    }
}

/// Raw mode: `w_b bits + w_m mi_eff + w_s (2 auc - 1)`.
pub fn sufficiency_index(c: &SiComponents, w: &SiWeights) -> Result<f64> {
    w.check()?;
    Ok(w.combine(c.bits, c.mi_effective, c.separation()))
}

/// Z-scored mode: each component is robustly standardised across the cohort
/// of candidate sets before weighting. Returns one SI per cohort member.
pub fn sufficiency_index_zscored(cohort: &[SiComponents], w: &SiWeights) -> Result<Vec<f64>> {
    w.check()?;
    if cohort.len() < 2 {
        return Err(Error::validation("z-scored SI needs a cohort of at least 2 sets"));
    }
    let zb = robust_z(&cohort.iter().map(|c| c.bits).collect::<Vec<_>>());
    let zm = robust_z(&cohort.iter().map(|c| c.mi_effective).collect::<Vec<_>>());
    let zs = robust_z(&cohort.iter().map(|c| c.separation()).collect::<Vec<_>>());
    Ok((0..cohort.len()).map(|i| w.combine(zb[i], zm[i], zs[i])).collect())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `(x - median) / (1.4826 MAD)`; all zeros when the MAD vanishes.
pub fn robust_z(values: &[f64]) -> Vec<f64> {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    let scale = 1.4826 * median(&dev);
    if !(scale > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - med) / scale).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LeakyReport {
    pub count: usize,
    pub ids: Vec<String>,
}

/// A negative is leaky when conditioning on it makes gold continuations more
/// likely (`delta > 0`).
pub fn leaky_negative_flags(ids: &[String], deltas: &[f64]) -> Result<LeakyReport> {
    check_dim(ids.len(), deltas.len())?;
    let flagged: Vec<String> = ids
        .iter()
        .zip(deltas)
        .filter(|(_, d)| **d > 0.0)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(LeakyReport {
        count: flagged.len(),
        ids: flagged,
    })
}

/// Row `i` paired with column `i mod m`, the layout expected of exported matrices.
pub fn cyclic_pairing(rows: usize, cols: usize) -> Vec<usize> {
    (0..rows).map(|i| i % cols).collect()
}

fn check_pairing(l: &ScoreMatrix, pairing: &[usize]) -> Result<()> {
    check_dim(l.nrows(), pairing.len())?;
    if let Some(bad) = pairing.iter().find(|&&d| d >= l.ncols()) {
        return Err(Error::validation(format!(
            "paired column {bad} outside {} columns",
            l.ncols()
        )));
    }
    Ok(())
}

/// Mean over rows of `L[i, d(i)] - mean_{j != d(i)} L[i, j]`. Zero when there
/// is a single column, since nothing can be contrasted.
pub fn diag_margin(l: &ScoreMatrix, pairing: &[usize]) -> Result<f64> {
    check_pairing(l, pairing)?;
    let m = l.ncols();
    if m < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &d) in pairing.iter().enumerate() {
        let off: f64 = (0..m).filter(|&j| j != d).map(|j| l.get(i, j)).sum::<f64>() / (m - 1) as f64;
        total += l.get(i, d) - off;
    }
    Ok(total / l.nrows() as f64)
}

/// Row bound in bits with the paired column as positive and `k` shadows from
/// the remaining columns. Zero when there is a single column.
pub fn paired_bound_bits(l: &ScoreMatrix, pairing: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    check_pairing(l, pairing)?;
    let m = l.ncols();
    if m < 2 {
        return Ok(0.0);
    }
    let mut rows = Vec::with_capacity(l.nrows());
    for (i, &d) in pairing.iter().enumerate() {
        let draw = ShadowDraw::sample(rng, m, d, k)?;
        rows.push(ContrastRow {
            positive: l.get(i, d),
            shadows: draw.shadow_ids.iter().map(|&j| l.get(i, j)).collect(),
        });
    }
    let (nats, _) = clean_bound(&rows, &vec![true; rows.len()], k)?;
    Ok(nats / LN2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrincipleRow {
    pub id: String,
    pub role: Role,
    pub text: String,
    /// Median per-item ΔNLL, bits/token.
    pub delta_nll_bits: f64,
    pub leaky: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub name: String,
    pub delta_nll_median: f64,
    pub perplexity_drop_pct: f64,
    pub auc: f64,
    pub mi_diag_margin_pos: f64,
    pub mi_diag_margin_neg: f64,
    pub mi_lb_pos_bits: f64,
    pub mi_lb_neg_bits: f64,
    pub mi_effective: f64,
    pub si: f64,
    /// Filled in by [`attach_zscored`] once a cohort is available.
    pub si_zscored: Option<f64>,
    pub weights: SiWeights,
    pub leaky: LeakyReport,
    pub principles: Vec<PrincipleRow>,
}

impl SufficiencyReport {
    pub fn components(&self) -> SiComponents {
        SiComponents {
            bits: self.delta_nll_median,
            mi_effective: self.mi_effective,
            auc: self.auc,
        }
    }

    /// Per-principle CSV: `id,role,text,delta_nll_bits,leaky`.
    pub fn write_principles_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "role", "text", "delta_nll_bits", "leaky"])?;
        for p in &self.principles {
            let role = match p.role {
                Role::Positive => "positive",
                Role::Negative => "negative",
            };
            w.write_record([
                p.id.as_str(),
                role,
                p.text.as_str(),
                &format!("{:?}", p.delta_nll_bits),
                if p.leaky { "true" } else { "false" },
            ])?;
        }
        w.flush().map_err(|e| Error::io("<principles csv>", e))?;
        Ok(())
    }
}

/// Fill `si_zscored` for every report, treating them as one cohort.
pub fn attach_zscored(reports: &mut [SufficiencyReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Ok(());
    };
    let w = first.weights;
    let cohort: Vec<SiComponents> = reports.iter().map(|r| r.components()).collect();
    let z = sufficiency_index_zscored(&cohort, &w)?;
    for (r, s) in reports.iter_mut().zip(z) {
        r.si_zscored = Some(s);
    }
    Ok(())
}

/// Already-aggregated components for one principle set, as in a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub label: String,
    pub bits: f64,
    pub auc: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    pub lb_pos_bits: f64,
    pub lb_neg_bits: f64,
}

pub fn read_components_csv<R: Read>(reader: R) -> Result<Vec<ComponentRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn report_from_components(row: &ComponentRow, w: &SiWeights) -> Result<SufficiencyReport> {
    let mi_eff = mi_effective(row.margin_pos, row.margin_neg);
    let c = SiComponents {
        bits: row.bits,
        mi_effective: mi_eff,
        auc: row.auc,
    };
    Ok(SufficiencyReport {
        name: row.label.clone(),
        delta_nll_median: row.bits,
        perplexity_drop_pct: delta_nll(row.bits, 0.0).perplexity_drop_pct(),
        auc: row.auc,
        mi_diag_margin_pos: row.margin_pos,
        mi_diag_margin_neg: row.margin_neg,
        mi_lb_pos_bits: row.lb_pos_bits,
        mi_lb_neg_bits: row.lb_neg_bits,
        mi_effective: mi_eff,
        si: sufficiency_index(&c, w)?,
        si_zscored: None,
        weights: *w,
        leaky: LeakyReport::default(),
        principles: Vec::new(),
    })
}

/// One scored example: gold continuation produced under positive `positive`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub prompt: Vec<usize>,
    pub gold: Vec<usize>,
    pub positive: usize,
}

/// `per_positive` gold items for each positive principle of `set`.
pub fn sample_items(task: &ToyTask, set: &PrincipleSet, per_positive: usize, seed: u64) -> Result<Vec<EvalItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(per_positive * set.positives.len());
    for _ in 0..per_positive {
        for (i, p) in set.positives.iter().enumerate() {
            let pattern = p.tokens(&task.vocab)?;
            items.push(EvalItem {
                prompt: task.sample_prompt(&mut rng),
                gold: task.gold_for(&pattern, &mut rng),
                positive: i,
            });
        }
    }
    Ok(items)
}

/// Settings for the toy world model used as a frozen scorer.
#[derive(Debug, Clone, Copy)]
pub struct WorldModelConfig {
    pub hidden_dim: usize,
    pub examples: usize,
    pub sft: SftConfig,
    /// Share of training examples with no principle in context.
    pub unconditioned_share: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            examples: 2048,
            sft: SftConfig {
                steps: 1500,
                batch: 16,
                lr: 0.5,
                clip: 1.0,
                freeze_ctx: false,
            },
            unconditioned_share: 0.2,
        }
    }
}

/// Fit a toy policy that has seen every pair of reasoning fillers as a
/// principle, so any token-pattern principle has a meaningful effect.
pub fn fit_world_model(task: &ToyTask, cfg: &WorldModelConfig, seed: u64) -> Result<ToyPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reasoning: Vec<usize> = task.vocab.reasoning_fillers().collect();
    let mut policy = ToyPolicy::init(task.vocab, cfg.hidden_dim, DecodeConfig::default(), &mut rng);
    let data: Vec<SftExample> = (0..cfg.examples)
        .map(|_| {
            let pattern: Vec<usize> = if rng.random::<f64>() < cfg.unconditioned_share {
                Vec::new()
            } else {
                reasoning.choose_multiple(&mut rng, 2).copied().collect()
            };
            SftExample {
                prompt: task.sample_prompt(&mut rng),
                target: task.gold_for(&pattern, &mut rng),
                principle: pattern,
            }
        })
        .collect();
    supervised_fit(&mut policy, &data, &cfg.sft, &mut rng)?;
    Ok(policy)
}

/// Score a principle set against gold items with any token scorer.
///
/// Negative `k` is paired with positive `k mod P` and scored on that
/// positive's items. Margins use raw-sum sequence scores in nats; ΔNLL is in
/// bits/token against the unconditioned context.
pub fn evaluate_principle_set<S: TokenScorer + ?Sized>(
    scorer: &S,
    vocab: &Vocab,
    items: &[EvalItem],
    set: &PrincipleSet,
    k: usize,
    weights: &SiWeights,
    seed: u64,
) -> Result<SufficiencyReport> {
    if items.is_empty() {
        return Err(Error::validation("no items to score"));
    }
    let n_pos = set.positives.len();
    let pos_tokens = set
        .positives
        .iter()
        .map(|p| p.tokens(vocab))
        .collect::<Result<Vec<_>>>()?;
    let neg_tokens = set
        .negatives
        .iter()
        .map(|p| p.tokens(vocab))
        .collect::<Result<Vec<_>>>()?;
    let raw = |item: &EvalItem, ctx: &[usize]| -> Result<f64> {
        Ok(scorer.token_log_probs(&item.prompt, ctx, &item.gold)?.iter().sum())
    };
    let base: Vec<f64> = items.iter().map(|it| raw(it, &[])).collect::<Result<_>>()?;

    // per-item ΔNLL in bits/token for a principle on the items it is paired with
    let delta_for = |ctx: &[usize], owner: usize| -> Result<Vec<f64>> {
        items
            .iter()
            .zip(&base)
            .filter(|(it, _)| it.positive == owner)
            .map(|(it, b)| Ok((raw(it, ctx)? - b) / (it.gold.len() as f64 * LN2)))
            .collect()
    };
    let mut rows = Vec::new();
    let mut pos_deltas = Vec::new();
    let mut pos_pooled = Vec::new();
    for (i, (p, toks)) in set.positives.iter().zip(&pos_tokens).enumerate() {
        let d = delta_for(toks, i)?;
        pos_pooled.extend_from_slice(&d);
        let m = median(&d);
        pos_deltas.push(m);
        rows.push(PrincipleRow {
            id: p.id.clone(),
            role: Role::Positive,
            text: p.text.clone(),
            delta_nll_bits: m,
            leaky: false,
        });
    }
    let mut neg_deltas = Vec::new();
    for (kk, toks) in neg_tokens.iter().enumerate() {
        neg_deltas.push(median(&delta_for(toks, kk % n_pos)?));
    }
    let neg_ids: Vec<String> = set.negatives.iter().map(|p| p.id.clone()).collect();
    let leaky = leaky_negative_flags(&neg_ids, &neg_deltas)?;
    for (p, d) in set.negatives.iter().zip(&neg_deltas) {
        rows.push(PrincipleRow {
            id: p.id.clone(),
            role: Role::Negative,
            text: p.text.clone(),
            delta_nll_bits: *d,
            leaky: *d > 0.0,
        });
    }

    // one row per (item, column paired with the item's positive)
    let matrix = |cols: &[Vec<usize>]| -> Result<(ScoreMatrix, Vec<usize>)> {
        let mut values = Vec::new();
        let mut pairing = Vec::new();
        for it in items {
            let scores: Vec<f64> = cols.iter().map(|c| raw(it, c)).collect::<Result<_>>()?;
            for d in (0..cols.len()).filter(|d| d % n_pos == it.positive) {
                values.extend_from_slice(&scores);
                pairing.push(d);
            }
        }
        Ok((
            ScoreMatrix::new(pairing.len(), cols.len(), values, ScoreNormalisation::RawSum)?,
            pairing,
        ))
    };
    let (pos_l, pos_pair) = matrix(&pos_tokens)?;
    let (neg_l, neg_pair) = matrix(&neg_tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin_pos = diag_margin(&pos_l, &pos_pair)?;
    let margin_neg = diag_margin(&neg_l, &neg_pair)?;
    let lb_pos = paired_bound_bits(&pos_l, &pos_pair, k, &mut rng)?;
    let lb_neg = paired_bound_bits(&neg_l, &neg_pair, k, &mut rng)?;

    let bits = median(&pos_pooled);
    let auc = mann_whitney_auc(&pos_deltas, &neg_deltas)?;
    let mi_eff = mi_effective(margin_pos, margin_neg);
    let si = sufficiency_index(
        &SiComponents {
            bits,
            mi_effective: mi_eff,
            auc,
        },
        weights,
    )?;
    Ok(SufficiencyReport {
        name: set.name.clone(),
        delta_nll_median: bits,
        perplexity_drop_pct: delta_nll(bits, 0.0).perplexity_drop_pct(),
        auc,
        mi_diag_margin_pos: margin_pos,
        mi_diag_margin_neg: margin_neg,
        mi_lb_pos_bits: lb_pos,
        mi_lb_neg_bits: lb_neg,
        mi_effective: mi_eff,
        si,
        si_zscored: None,
        weights: *weights,
        leaky,
        principles: rows,
    })
}

/// One line of an external NLL export: bits/token for an item, with and
/// without the principle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRecord {
    pub principle: String,
    pub item: String,
    pub nll_without_bits: f64,
    pub nll_with_bits: f64,
}

pub fn read_nll_csv<R: Read>(reader: R) -> Result<Vec<NllRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Assemble a report from exported scores: `nll` rows keyed by principle id,
/// and positive/negative score matrices whose row `i` pairs with column
/// `i mod M` (columns in file order of the principle set).
pub fn evaluate_external(
    set: &PrincipleSet,
    nll: &[NllRecord],
    pos_scores: &ScoreMatrix,
    neg_scores: &ScoreMatrix,
    k: usize,
    weights: &SiWeights,
    seed: u64,
) -> Result<SufficiencyReport> {
    check_dim(set.positives.len(), pos_scores.ncols())?;
    check_dim(set.negatives.len(), neg_scores.ncols())?;
    let deltas_of = |id: &str| -> Result<Vec<f64>> {
        let d: Vec<f64> = nll
            .iter()
            .filter(|r| r.principle == id)
            .map(|r| delta_nll(r.nll_without_bits, r.nll_with_bits).delta_bits)
            .collect();
        if d.is_empty() {
            return Err(Error::validation(format!("no NLL rows for principle {id}")));
        }
        Ok(d)
    };
    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    let mut pos_d = Vec::new();
    for p in &set.positives {
        let d = deltas_of(&p.id)?;
        pooled.extend_from_slice(&d);
        let m = median(&d);
        pos_d.push(m);
        rows.push(PrincipleRow {
            id: p.id.clone(),
            role: Role::Positive,
            text: p.text.clone(),
            delta_nll_bits: m,
            leaky: false,
        });
    }
    let mut neg_d = Vec::new();
    for p in &set.negatives {
        let m = median(&deltas_of(&p.id)?);
        neg_d.push(m);
        rows.push(PrincipleRow {
            id: p.id.clone(),
            role: Role::Negative,
            text: p.text.clone(),
            delta_nll_bits: m,
            leaky: m > 0.0,
        });
    }
    let neg_ids: Vec<String> = set.negatives.iter().map(|p| p.id.clone()).collect();
    let leaky = leaky_negative_flags(&neg_ids, &neg_d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_pair = cyclic_pairing(pos_scores.nrows(), pos_scores.ncols());
    let neg_pair = cyclic_pairing(neg_scores.nrows(), neg_scores.ncols());
    let margin_pos = diag_margin(pos_scores, &pos_pair)?;
    let margin_neg = diag_margin(neg_scores, &neg_pair)?;
    let lb_pos = paired_bound_bits(pos_scores, &pos_pair, k, &mut rng)?;
    let lb_neg = paired_bound_bits(neg_scores, &neg_pair, k, &mut rng)?;
    let bits = median(&pooled);
    let auc = mann_whitney_auc(&pos_d, &neg_d)?;
    let mi_eff = mi_effective(margin_pos, margin_neg);
    let si = sufficiency_index(
        &SiComponents {
            bits,
            mi_effective: mi_eff,
            auc,
        },
        weights,
    )?;
    Ok(SufficiencyReport {
        name: set.name.clone(),
        delta_nll_median: bits,
        perplexity_drop_pct: delta_nll(bits, 0.0).perplexity_drop_pct(),
        auc,
        mi_diag_margin_pos: margin_pos,
        mi_diag_margin_neg: margin_neg,
        mi_lb_pos_bits: lb_pos,
        mi_lb_neg_bits: lb_neg,
        mi_effective: mi_eff,
        si,
        si_zscored: None,
        weights: *weights,
        leaky,
        principles: rows,
    })
}
