//! Contrastive scores between completions and principle-conditioned prompts.
//!
//! Rows index completions, columns index principles. The square in-batch form
//! feeds the symmetric InfoNCE auxiliary; the positive-plus-shadows form feeds
//! the clean lower bounds and the reward channel.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalisation {
    RawSum,
    #[default]
    LengthMean,
    FisherWeighted,
}

impl ScoreNormalisation {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreNormalisation::RawSum => "raw_sum",
            ScoreNormalisation::LengthMean => "length_mean",
            ScoreNormalisation::FisherWeighted => "fisher_weighted",
        }
    }
}

impl fmt::Display for ScoreNormalisation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreNormalisation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_sum" => Ok(Self::RawSum),
            "length_mean" => Ok(Self::LengthMean),
            "fisher_weighted" => Ok(Self::FisherWeighted),
            other => Err(Error::validation(format!("unknown normalisation `{other}`"))),
        }
    }
}

/// Anything that can produce per-token log-probabilities of a completion.
pub trait TokenScorer {
    fn token_log_probs(&self, prompt: &[usize], principle: &[usize], completion: &[usize]) -> Result<Vec<f64>>;
}

/// Collapse per-token log-probabilities into one sequence score.
///
/// Fisher weights are `p_t (1 - p_t)` normalised to sum to one; if every
/// weight vanishes (all tokens certain) the plain mean is used.
pub fn reduce_log_probs(log_probs: &[f64], normalisation: ScoreNormalisation) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::validation("completion must be non-empty"));
    }
    let n = log_probs.len() as f64;
    Ok(match normalisation {
        ScoreNormalisation::RawSum => log_probs.iter().sum(),
        ScoreNormalisation::LengthMean => log_probs.iter().sum::<f64>() / n,
        ScoreNormalisation::FisherWeighted => {
            let w: Vec<f64> = fisher_weights(log_probs);
            log_probs.iter().zip(&w).map(|(l, w)| l * w).sum()
        }
    })
}

/// Normalised token weights `p_t (1 - p_t) / sum`, uniform when all are zero.
pub fn fisher_weights(log_probs: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = log_probs
        .iter()
        .map(|l| {
            let p = l.exp();
            p * (1.0 - p)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / log_probs.len() as f64; log_probs.len()]
    }
}

pub fn sequence_score<S: TokenScorer + ?Sized>(
    scorer: &S,
    prompt: &[usize],
    principle: &[usize],
    completion: &[usize],
    normalisation: ScoreNormalisation,
) -> Result<f64> {
    if completion.is_empty() {
        return Err(Error::validation("completion must be non-empty"));
    }
    reduce_log_probs(&scorer.token_log_probs(prompt, principle, completion)?, normalisation)
}

/// N x M matrix of sequence scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    normalisation: ScoreNormalisation,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, normalisation: ScoreNormalisation) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::validation("score matrix needs N >= 1 and M >= 1"));
        }
        check_dim(rows * cols, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("score matrix entries must be finite"));
        }
        Ok(Self {
            rows,
            cols,
            values,
            normalisation,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, normalisation: ScoreNormalisation) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        for r in &rows {
            check_dim(m, r.len())?;
        }
        Self::new(n, m, rows.into_iter().flatten().collect(), normalisation)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn normalisation(&self) -> ScoreNormalisation {
        self.normalisation
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            values.extend(self.column(j));
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
            normalisation: self.normalisation,
        }
    }

    /// Per-row mean and population standard deviation.
    pub fn row_stats(&self) -> Vec<(f64, f64)> {
        (0..self.rows).map(|i| mean_std(self.row(i))).collect()
    }

    /// `(L_ij - mu_i) / sigma_i`; a constant row standardises to zeros.
    pub fn standardised_row(&self, i: usize) -> Vec<f64> {
        standardise(self.row(i))
    }

    fn require_square(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::validation(format!(
                "square score matrix required, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let io = |e| Error::io("<score matrix csv>", e);
        writeln!(
            writer,
            "normalisation={},N={},M={}",
            self.normalisation, self.rows, self.cols
        )
        .map_err(io)?;
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(writer, "{}", line.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R, source_name: &str) -> Result<Self> {
        let schema = |line: usize, message: String| Error::Schema {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| schema(1, "missing metadata line".into()))?;
        let header = header.map_err(|e| Error::io(source_name, e))?;
        let (mut norm, mut n, mut m) = (None, None, None);
        for part in header.trim().split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| schema(1, format!("expected key=value, got `{part}`")))?;
            let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| schema(1, format!("bad integer `{v}`")));
            match key.trim() {
                "normalisation" => norm = Some(value.trim().parse().map_err(|e: Error| schema(1, e.to_string()))?),
                "N" => n = Some(parse_usize(value.trim())?),
                "M" => m = Some(parse_usize(value.trim())?),
                other => return Err(schema(1, format!("unknown metadata key `{other}`"))),
            }
        }
        let (norm, n, m) = match (norm, n, m) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(schema(1, "metadata needs normalisation, N and M".into())),
        };
        let mut values = Vec::with_capacity(n * m);
        let mut seen = 0;
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(source_name, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| schema(idx + 1, format!("bad number `{t}`")))
                })
                .collect::<Result<_>>()?;
            if row.len() != m {
                return Err(schema(idx + 1, format!("expected {m} columns, got {}", row.len())));
            }
            values.extend(row);
            seen += 1;
        }
        if seen != n {
            return Err(schema(n + 1, format!("expected {n} rows, got {seen}")));
        }
        Self::new(n, m, values, norm)
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn standardise(xs: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(xs);
    if std > 0.0 {
        xs.iter().map(|x| (x - mean) / std).collect()
    } else {
        vec![0.0; xs.len()]
    }
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let (arg, max) = xs.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, x)| if x > acc.1 { (i, x) } else { acc },
    );
    // ln(1 + rest) keeps precision when one entry dominates.
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    let log_z = rest.ln_1p();
    xs.iter().map(|x| (x - max) - log_z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNceLosses {
    pub row_loss: f64,
    pub col_loss: f64,
}

pub fn infonce_losses(l: &ScoreMatrix) -> Result<InfoNceLosses> {
    l.require_square()?;
    let n = l.nrows();
    let row_loss = -(0..n).map(|i| log_softmax(l.row(i))[i]).sum::<f64>() / n as f64;
    let col_loss = -(0..n).map(|j| log_softmax(&l.column(j))[j]).sum::<f64>() / n as f64;
    Ok(InfoNceLosses { row_loss, col_loss })
}

pub fn sami_aux(l: &ScoreMatrix, lambda_row: f64, lambda_col: f64) -> Result<f64> {
    Ok(sami_aux_with_grad(l, lambda_row, lambda_col)?.0)
}

/// SAMI loss and its gradient with respect to every entry of `l`.
pub fn sami_aux_with_grad(l: &ScoreMatrix, lambda_row: f64, lambda_col: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(lambda_row >= 0.0 && lambda_col >= 0.0) {
        return Err(Error::validation("SAMI weights must be nonnegative"));
    }
    let losses = infonce_losses(l)?;
    let n = l.nrows();
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![vec![0.0; n]; n];
    for i in 0..n {
        let ls = log_softmax(l.row(i));
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            grad[i][j] += lambda_row * inv_n * (ls[j].exp() - delta);
        }
    }
    for j in 0..n {
        let ls = log_softmax(&l.column(j));
        for i in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            grad[i][j] += lambda_col * inv_n * (ls[i].exp() - delta);
        }
    }
    Ok((lambda_row * losses.row_loss + lambda_col * losses.col_loss, grad))
}

/// `(lambda_row, lambda_col)` annealed linearly from 0.7/0.3 to 0.5/0.5 over
/// the first `anneal_fraction` of training.
pub fn sami_lambdas(step: usize, max_steps: usize, anneal_fraction: f64) -> (f64, f64) {
    let horizon = anneal_fraction * max_steps as f64;
    let t = if horizon > 0.0 {
        (step as f64 / horizon).min(1.0)
    } else {
        1.0
    };
    (0.7 * (1.0 - t) + 0.5 * t, 0.3 * (1.0 - t) + 0.5 * t)
}

pub fn diag_mi(l: &ScoreMatrix) -> Result<f64> {
    let losses = infonce_losses(l)?;
    Ok(-0.5 * (losses.row_loss + losses.col_loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapingTerm {
    pub value: f64,
    /// `d value / d L_ij`.
    pub grad: Vec<Vec<f64>>,
    pub masked_rows: usize,
}

/// `weight * mean_{i in mask} (log softmax_j L_ij |_{j=i} + ln N)`.
///
/// The `ln N` offset centres the statistic so uniform rows contribute zero.
pub fn shaping_term(l: &ScoreMatrix, mask: &[bool], weight: f64) -> Result<ShapingTerm> {
    if !(weight >= 0.0) {
        return Err(Error::validation("shaping weight must be nonnegative"));
    }
    l.require_square()?;
    let n = l.nrows();
    check_dim(n, mask.len())?;
    let mut grad = vec![vec![0.0; n]; n];
    let active: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if active.is_empty() || weight == 0.0 {
        return Ok(ShapingTerm {
            value: 0.0,
            grad,
            masked_rows: active.len(),
        });
    }
    let scale = weight / active.len() as f64;
    let log_n = (n as f64).ln();
    let mut total = 0.0;
    for &i in &active {
        let ls = log_softmax(l.row(i));
        total += ls[i] + log_n;
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            grad[i][j] = scale * (delta - ls[j].exp());
        }
    }
    Ok(ShapingTerm {
        value: scale * total,
        grad,
        masked_rows: active.len(),
    })
}

/// K shadow principles for one row, drawn from a pool that excludes the truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowDraw {
    pub true_id: usize,
    pub shadow_ids: Vec<usize>,
    /// Set when the pool was too small and shadows were drawn with replacement.
    pub with_replacement: bool,
}

impl ShadowDraw {
    /// Draw `k` ids from `0..pool_size` other than `true_id`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, pool_size: usize, true_id: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::validation("need K >= 1 shadows"));
        }
        if true_id >= pool_size {
            return Err(Error::validation(format!(
                "true principle {true_id} outside pool of {pool_size}"
            )));
        }
        let others = pool_size - 1;
        if others == 0 {
            return Err(Error::validation("pool has no principle besides the positive"));
        }
        let lift = |x: usize| if x >= true_id { x + 1 } else { x };
        let (shadow_ids, with_replacement) = if others >= k {
            (sample(rng, others, k).into_iter().map(lift).collect(), false)
        } else {
            ((0..k).map(|_| lift(rng.random_range(0..others))).collect(), true)
        };
        Ok(Self {
            true_id,
            shadow_ids,
            with_replacement,
        })
    }

    /// Candidate ids with the positive at index 0.
    pub fn candidates(&self) -> Vec<usize> {
        std::iter::once(self.true_id)
            .chain(self.shadow_ids.iter().copied())
            .collect()
    }
}

/// Scores of one positive pairing against its K shadows.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastRow {
    pub positive: f64,
    pub shadows: Vec<f64>,
}

impl ContrastRow {
    pub fn candidates(&self) -> Vec<f64> {
        std::iter::once(self.positive)
            .chain(self.shadows.iter().copied())
            .collect()
    }

    /// `-log softmax(candidates)[0]`.
    pub fn nce_loss(&self) -> f64 {
        -log_softmax(&self.candidates())[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanMiBounds {
    pub row_bound: f64,
    pub col_bound: f64,
    pub gap: f64,
    pub clean_count: usize,
}

/// `ln(K+1) - mean NCE loss` over clean rows; NaN when none are clean.
pub fn clean_bound(rows: &[ContrastRow], clean: &[bool], k: usize) -> Result<(f64, usize)> {
    if k == 0 {
        return Err(Error::validation("need K >= 1 shadows"));
    }
    check_dim(rows.len(), clean.len())?;
    let mut total = 0.0;
    let mut count = 0;
    for (row, _) in rows.iter().zip(clean).filter(|(_, c)| **c) {
        check_dim(k, row.shadows.len())?;
        total += row.nce_loss();
        count += 1;
    }
    if count == 0 {
        return Ok((f64::NAN, 0));
    }
    Ok((((k + 1) as f64).ln() - total / count as f64, count))
}

/// Row bound contrasts principles for a fixed completion; column bound
/// contrasts completions for a fixed principle.
pub fn clean_mi_bounds(
    row_contrasts: &[ContrastRow],
    col_contrasts: &[ContrastRow],
    clean: &[bool],
    k: usize,
) -> Result<CleanMiBounds> {
    let (row_bound, clean_count) = clean_bound(row_contrasts, clean, k)?;
    let (col_bound, _) = clean_bound(col_contrasts, clean, k)?;
    Ok(CleanMiBounds {
        row_bound,
        col_bound,
        gap: row_bound - col_bound,
        clean_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sm(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        ScoreMatrix::from_rows(rows, ScoreNormalisation::LengthMean).unwrap()
    }

    struct Fixed(Vec<f64>);
    impl TokenScorer for Fixed {
        fn token_log_probs(&self, _: &[usize], _: &[usize], c: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0[..c.len()].to_vec())
        }
    }

    #[test]
    fn sequence_score_examples() {
        let certain = Fixed(vec![0.0; 3]);
        for norm in [
            ScoreNormalisation::RawSum,
            ScoreNormalisation::LengthMean,
            ScoreNormalisation::FisherWeighted,
        ] {
            assert_eq!(sequence_score(&certain, &[], &[], &[1, 2, 3], norm).unwrap(), 0.0);
        }
        let uniform = Fixed(vec![0.25f64.ln(); 3]);
        assert_abs_diff_eq!(
            sequence_score(&uniform, &[], &[], &[0, 1, 2], ScoreNormalisation::LengthMean).unwrap(),
            -1.3862943611198906,
            epsilon = 1e-15
        );
        let halves = Fixed(vec![0.5f64.ln(); 4]);
        let lm = sequence_score(&halves, &[], &[], &[0; 4], ScoreNormalisation::LengthMean).unwrap();
        let fw = sequence_score(&halves, &[], &[], &[0; 4], ScoreNormalisation::FisherWeighted).unwrap();
        assert_abs_diff_eq!(lm, fw, epsilon = 1e-15);
        assert!(sequence_score(&halves, &[], &[], &[], ScoreNormalisation::RawSum).is_err());
    }

    #[test]
    fn infonce_examples() {
        let z = infonce_losses(&sm(vec![vec![0.0, 0.0], vec![0.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(z.row_loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(z.col_loss, std::f64::consts::LN_2, epsilon = 1e-15);
        let d = infonce_losses(&sm(vec![vec![10.0, 0.0], vec![0.0, 10.0]])).unwrap();
        assert_abs_diff_eq!(d.row_loss, 4.539889921686465e-5, epsilon = 1e-17);
        assert_eq!(infonce_losses(&sm(vec![vec![3.0]])).unwrap().row_loss, 0.0);
        assert!(infonce_losses(&sm(vec![vec![0.0, 1.0]])).is_err());
    }

    #[test]
    fn sami_examples() {
        let zero = sm(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_abs_diff_eq!(
            sami_aux(&zero, 0.5, 0.5).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let asym = sm(vec![vec![2.0, 0.0], vec![1.0, 0.0]]);
        let losses = infonce_losses(&asym).unwrap();
        assert_abs_diff_eq!(losses.row_loss, 0.7200948492805977, epsilon = 1e-14);
        assert_abs_diff_eq!(losses.col_loss, 0.5032044340390841, epsilon = 1e-14);
        assert_eq!(sami_aux(&asym, 1.0, 0.0).unwrap(), losses.row_loss);
        assert_abs_diff_eq!(sami_aux(&asym, 0.7, 0.3).unwrap(), 0.6550277247081436, epsilon = 1e-14);
        assert!(sami_aux(&asym, -0.1, 0.3).is_err());
    }

    #[test]
    fn sami_gradient_matches_finite_differences() {
        let base = vec![vec![0.3, -1.2, 0.8], vec![0.1, 0.4, -0.5], vec![1.1, 0.0, 0.2]];
        let (_, g) = sami_aux_with_grad(&sm(base.clone()), 0.6, 0.4).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = base.clone();
                p[i][j] += h;
                let mut m = base.clone();
                m[i][j] -= h;
                let fd = (sami_aux(&sm(p), 0.6, 0.4).unwrap() - sami_aux(&sm(m), 0.6, 0.4).unwrap()) / (2.0 * h);
                assert_abs_diff_eq!(g[i][j], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn lambda_schedule() {
        assert_eq!(sami_lambdas(0, 2000, 0.1), (0.7, 0.3));
        let (r, c) = sami_lambdas(100, 2000, 0.1);
        assert_abs_diff_eq!(r, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.4, epsilon = 1e-15);
        let (r, c) = sami_lambdas(5000, 2000, 0.1);
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn diag_mi_examples() {
        assert_abs_diff_eq!(
            diag_mi(&sm(vec![vec![0.0, 0.0], vec![0.0, 0.0]])).unwrap(),
            -std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            diag_mi(&sm(vec![vec![10.0, 0.0], vec![0.0, 10.0]])).unwrap(),
            -4.539889921686465e-5,
            epsilon = 1e-17
        );
        assert_eq!(diag_mi(&sm(vec![vec![-2.0]])).unwrap(), 0.0);
    }

    #[test]
    fn shaping_examples() {
        let l = sm(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(shaping_term(&l, &[true, true], 0.0).unwrap().value, 0.0);
        assert_eq!(shaping_term(&l, &[false, false], 1.0).unwrap().value, 0.0);
        let flat = sm(vec![vec![0.7, 0.7], vec![-1.0, -1.0]]);
        assert_abs_diff_eq!(
            shaping_term(&flat, &[true, true], 1.0).unwrap().value,
            0.0,
            epsilon = 1e-15
        );
        assert!(shaping_term(&l, &[true, true], 0.5).unwrap().value > 0.0);
    }

    #[test]
    fn clean_bound_examples() {
        let flat = vec![
            ContrastRow {
                positive: 1.0,
                shadows: vec![1.0, 1.0]
            };
            3
        ];
        let (b, n) = clean_bound(&flat, &[true; 3], 2).unwrap();
        assert_abs_diff_eq!(b, 0.0, epsilon = 1e-15);
        assert_eq!(n, 3);
        let sharp = vec![ContrastRow {
            positive: 200.0,
            shadows: vec![0.0, 0.0],
        }];
        assert_abs_diff_eq!(clean_bound(&sharp, &[true], 2).unwrap().0, 3f64.ln(), epsilon = 1e-12);
        let (nan, zero) = clean_bound(&sharp, &[false], 2).unwrap();
        assert!(nan.is_nan());
        assert_eq!(zero, 0);
    }

    #[test]
    fn shadow_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = ShadowDraw::sample(&mut rng, 4, 2, 2).unwrap();
            assert!(!d.with_replacement);
            assert!(!d.shadow_ids.contains(&2));
            assert_ne!(d.shadow_ids[0], d.shadow_ids[1]);
            assert_eq!(d.candidates()[0], 2);
        }
        let d = ShadowDraw::sample(&mut rng, 2, 0, 2).unwrap();
        assert!(d.with_replacement);
        assert_eq!(d.shadow_ids, vec![1, 1]);
        assert!(ShadowDraw::sample(&mut rng, 1, 0, 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = ScoreMatrix::from_rows(
            vec![vec![0.1, -2.5, 3.0], vec![1e-12, 4.0, -0.3]],
            ScoreNormalisation::RawSum,
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("normalisation=raw_sum,N=2,M=3\n"));
        assert_eq!(ScoreMatrix::read_csv(buf.as_slice(), "mem").unwrap(), m);
        let bad = "normalisation=raw_sum,N=2,M=3\n1,2,3\n";
        assert!(matches!(
            ScoreMatrix::read_csv(bad.as_bytes(), "mem"),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn constant_row_standardises_to_zero() {
        let m = sm(vec![vec![2.0, 2.0, 2.0]]);
        assert_eq!(m.standardised_row(0), vec![0.0; 3]);
    }
}
