//! Entropic optimal transport between weighted point clouds.
//!
//! Sinkhorn iterations run on dual potentials in the log domain, with
//! epsilon-scaling from the cost diameter down to the target temperature.
//! `exact_w2_small` is a brute-force reference used to check the solver.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::prob_metrics::ProbVector;
use crate::rep_metrics::EmpiricalMeasure;

/// Dense nonnegative cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, costs.len())?;
        if rows == 0 || cols == 0 {
            return Err(Error::validation("cost matrix must be non-empty"));
        }
        if let Some(c) = costs.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::validation(format!(
                "cost entries must be finite and nonnegative, found {c}"
            )));
        }
        Ok(Self { rows, cols, costs })
    }

    /// `C_ab = ||x_a - y_b||^2`.
    pub fn squared_euclidean(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Self> {
        let mut costs = Vec::with_capacity(xs.len() * ys.len());
        for x in xs {
            for y in ys {
                check_dim(x.len(), y.len())?;
                costs.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        Self::new(xs.len(), ys.len(), costs)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn max(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }
}

/// A coupling together with the marginals it is meant to match.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    plan: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

/// Plans larger than this are summarised instead of dumped densely.
pub const DENSE_PLAN_LIMIT: usize = 10_000;

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.plan.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// L1 violation of the (row, column) marginal constraints.
    pub fn marginal_violation(&self) -> (f64, f64) {
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        (l1(&self.row_sums(), &self.alpha), l1(&self.col_sums(), &self.beta))
    }

    /// Transport cost `sum_ab pi_ab C_ab`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.plan.iter().zip(&c.costs).map(|(p, c)| p * c).sum()
    }

    /// Dense CSV when `rows * cols <= 10_000`, otherwise a one-row summary.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.rows * self.cols <= DENSE_PLAN_LIMIT {
            for row in self.plan.chunks(self.cols) {
                w.write_record(row.iter().map(|v| format!("{v:?}")))?;
            }
        } else {
            let (rv, cv) = self.marginal_violation();
            let mass: f64 = self.plan.iter().sum();
            let max = self.plan.iter().copied().fold(0.0, f64::max);
            let entropy: f64 = self.plan.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            w.write_record([
                "rows",
                "cols",
                "mass",
                "max_entry",
                "entropy",
                "row_violation",
                "col_violation",
            ])?;
            w.write_record([
                self.rows.to_string(),
                self.cols.to_string(),
                mass.to_string(),
                max.to_string(),
                entropy.to_string(),
                rv.to_string(),
                cv.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<plan csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SinkhornOptions {
    /// Stop once the L1 marginal violation falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Geometric annealing factor for epsilon-scaling.
    pub scaling: f64,
    /// Record the marginal violation after every iteration at the target epsilon.
    pub trace: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
            scaling: 0.8,
            trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntropicOt {
    /// `<pi, C> + eps * KL(pi || alpha x beta)` at the fixed point (dual value).
    pub value: f64,
    pub plan: TransportPlan,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_trace: Vec<f64>,
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT between histograms `alpha`, `beta` under cost `c`.
pub fn sinkhorn(
    alpha: &[f64],
    beta: &[f64],
    c: &CostMatrix,
    epsilon: f64,
    opts: &SinkhornOptions,
) -> Result<EntropicOt> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::validation(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (n, m) = c.shape();
    check_dim(n, alpha.len())?;
    check_dim(m, beta.len())?;
    if alpha.iter().chain(beta).any(|w| !(*w > 0.0)) {
        return Err(Error::validation("marginal weights must be strictly positive"));
    }
    let log_a: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let update_g = |f: &[f64], g: &mut [f64], eps: f64| {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = -eps * logsumexp((0..n).map(|i| log_a[i] + (f[i] - c.get(i, j)) / eps));
        }
    };
    let update_f = |f: &mut [f64], g: &[f64], eps: f64| {
        for (i, fi) in f.iter_mut().enumerate() {
            *fi = -eps * logsumexp((0..m).map(|j| log_b[j] + (g[j] - c.get(i, j)) / eps));
        }
    };
    // Row marginals are exact after an f-update; only columns can be off.
    let col_violation = |f: &[f64], g: &[f64], eps: f64| -> f64 {
        (0..m)
            .map(|j| {
                let s: f64 = (0..n)
                    .map(|i| (log_a[i] + log_b[j] + (f[i] + g[j] - c.get(i, j)) / eps).exp())
                    .sum();
                (s - beta[j]).abs()
            })
            .sum()
    };

    let mut eps = c.max().max(epsilon);
    while eps > epsilon {
        update_g(&f, &mut g, eps);
        update_f(&mut f, &g, eps);
        eps *= opts.scaling;
    }

    let mut iterations = 0;
    let mut converged = false;
    let mut marginal_trace = Vec::new();
    while iterations < opts.max_iter {
        update_g(&f, &mut g, epsilon);
        update_f(&mut f, &g, epsilon);
        iterations += 1;
        let v = col_violation(&f, &g, epsilon);
        if opts.trace {
            marginal_trace.push(v);
        }
        if v < opts.tol {
            converged = true;
            break;
        }
    }

    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            plan.push((log_a[i] + log_b[j] + (f[i] + g[j] - c.get(i, j)) / epsilon).exp());
        }
    }
    let value =
        alpha.iter().zip(&f).map(|(a, x)| a * x).sum::<f64>() + beta.iter().zip(&g).map(|(b, y)| b * y).sum::<f64>();
    Ok(EntropicOt {
        value,
        plan: TransportPlan {
            rows: n,
            cols: m,
            plan,
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
        },
        iterations,
        converged,
        marginal_trace,
    })
}

/// Entropic OT of a histogram with itself.
///
/// The optimal potentials coincide (`f = g`), so iterating the averaged map
/// `f <- (f + T(f)) / 2` avoids the slow oscillating mode that alternating
/// updates show on clustered clouds. The returned plan is exactly symmetric.
pub fn sinkhorn_symmetric(alpha: &[f64], c: &CostMatrix, epsilon: f64, opts: &SinkhornOptions) -> Result<EntropicOt> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::validation(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (n, m) = c.shape();
    if n != m {
        return Err(Error::validation("self transport needs a square cost matrix"));
    }
    check_dim(n, alpha.len())?;
    if alpha.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::validation("marginal weights must be strictly positive"));
    }
    let log_a: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let averaged = |f: &[f64], eps: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = -eps * logsumexp((0..n).map(|j| log_a[j] + (f[j] - c.get(i, j)) / eps));
                0.5 * (f[i] + t)
            })
            .collect()
    };
    let violation = |f: &[f64], eps: f64| -> f64 {
        (0..n)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| (log_a[i] + log_a[j] + (f[i] + f[j] - c.get(i, j)) / eps).exp())
                    .sum();
                (s - alpha[i]).abs()
            })
            .sum()
    };
    let mut f = vec![0.0; n];
    let mut eps = c.max().max(epsilon);
    while eps > epsilon {
        f = averaged(&f, eps);
        eps *= opts.scaling;
    }
    let mut iterations = 0;
    let mut converged = false;
    let mut marginal_trace = Vec::new();
    while iterations < opts.max_iter {
        f = averaged(&f, epsilon);
        iterations += 1;
        let v = violation(&f, epsilon);
        if opts.trace {
            marginal_trace.push(v);
        }
        if v < opts.tol {
            converged = true;
            break;
        }
    }
    let mut plan = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            plan.push((log_a[i] + log_a[j] + (f[i] + f[j] - c.get(i, j)) / epsilon).exp());
        }
    }
    Ok(EntropicOt {
        value: 2.0 * alpha.iter().zip(&f).map(|(a, x)| a * x).sum::<f64>(),
        plan: TransportPlan {
            rows: n,
            cols: n,
            plan,
            alpha: alpha.to_vec(),
            beta: alpha.to_vec(),
        },
        iterations,
        converged,
        marginal_trace,
    })
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Entropic OT between two uniform-weight point clouds with squared Euclidean cost.
pub fn entropic_ot(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    epsilon: f64,
    opts: &SinkhornOptions,
) -> Result<EntropicOt> {
    entropic_ot_points(a.points(), b.points(), epsilon, opts)
}

fn entropic_ot_points(xs: &[Vec<f64>], ys: &[Vec<f64>], epsilon: f64, opts: &SinkhornOptions) -> Result<EntropicOt> {
    let c = CostMatrix::squared_euclidean(xs, ys)?;
    sinkhorn(
        &uniform_weights(xs.len()),
        &uniform_weights(ys.len()),
        &c,
        epsilon,
        opts,
    )
}

fn self_ot_points(xs: &[Vec<f64>], epsilon: f64, opts: &SinkhornOptions) -> Result<EntropicOt> {
    let c = CostMatrix::squared_euclidean(xs, xs)?;
    sinkhorn_symmetric(&uniform_weights(xs.len()), &c, epsilon, opts)
}

/// Exact `W_2^2` between equal-size uniform clouds by enumerating permutations.
pub fn exact_w2_small(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    const MAX_POINTS: usize = 10;
    let n = a.len();
    if n != b.len() {
        return Err(Error::Unsupported(format!(
            "exact W2 needs equal-size clouds, got {n} and {}",
            b.len()
        )));
    }
    if n > MAX_POINTS {
        return Err(Error::Unsupported(format!(
            "exact W2 enumerates permutations; {n} points exceeds {MAX_POINTS}"
        )));
    }
    let c = CostMatrix::squared_euclidean(a.points(), b.points())?;
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>();
    let mut best = cost(&perm);
    // Heap's algorithm, iterative form.
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            let k = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(k, i);
            best = best.min(cost(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

#[derive(Debug, Clone)]
pub struct SinkhornDivergence {
    pub value: f64,
    pub converged: bool,
    /// Gradient with respect to each point of the first measure, when requested.
    pub grad_first: Option<Vec<Vec<f64>>>,
}

/// Debiased `S_eps(a, b) = OT(a,b) - OT(a,a)/2 - OT(b,b)/2`, clamped at 0.
pub fn sinkhorn_divergence(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    epsilon: f64,
    opts: &SinkhornOptions,
) -> Result<SinkhornDivergence> {
    sinkhorn_divergence_points(a.points(), b.points(), epsilon, opts, false)
}

fn cloud_order(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Ordering {
    xs.len().cmp(&ys.len()).then_with(|| {
        xs.iter()
            .flatten()
            .zip(ys.iter().flatten())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

pub(crate) fn sinkhorn_divergence_points(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    epsilon: f64,
    opts: &SinkhornOptions,
    with_grad: bool,
) -> Result<SinkhornDivergence> {
    let aa = self_ot_points(xs, epsilon, opts)?;
    let bb = self_ot_points(ys, epsilon, opts)?;
    // Identical clouds: the cross term is the self term, so S vanishes exactly.
    // Otherwise solve in a canonical orientation so that S(a, b) == S(b, a) bitwise.
    let swap = cloud_order(xs, ys) == Ordering::Greater;
    let ab = if xs == ys {
        aa.clone()
    } else if swap {
        entropic_ot_points(ys, xs, epsilon, opts)?
    } else {
        entropic_ot_points(xs, ys, epsilon, opts)?
    };
    let cross = |i: usize, j: usize| if swap { ab.plan.get(j, i) } else { ab.plan.get(i, j) };
    let raw = ab.value - 0.5 * (aa.value + bb.value);
    let converged = ab.converged && aa.converged && bb.converged;

    let grad_first = with_grad.then(|| {
        // Envelope theorem: dOT/dx_i = sum_j pi_ij * 2 (x_i - y_j); the self
        // term sees x_i on both sides, so its coupling is symmetrised.
        let d = xs[0].len();
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let mut g = vec![0.0; d];
                for (j, y) in ys.iter().enumerate() {
                    let w = 2.0 * cross(i, j);
                    for k in 0..d {
                        g[k] += w * (x[k] - y[k]);
                    }
                }
                for (j, z) in xs.iter().enumerate() {
                    let w = -0.5 * 2.0 * (aa.plan.get(i, j) + aa.plan.get(j, i));
                    for k in 0..d {
                        g[k] += w * (x[k] - z[k]);
                    }
                }
                g
            })
            .collect()
    });
    Ok(SinkhornDivergence {
        value: raw.max(0.0),
        converged,
        grad_first,
    })
}

/// Weighted, warmup-aware Sinkhorn penalty between current and reference summaries.
#[derive(Debug, Clone, Copy)]
pub struct OtRegulariser {
    pub weight: f64,
    pub blur: f64,
    pub subsample_cap: usize,
    pub scaling: f64,
    /// Iteration budget for the cross term at the target temperature.
    pub max_iter: usize,
}

impl OtRegulariser {
    /// Squared-Euclidean temperature derived from the blur length scale.
    pub fn epsilon(&self) -> f64 {
        self.blur * self.blur
    }
}

#[derive(Debug, Clone)]
pub struct OtTerm {
    /// `weight * S_eps`.
    pub value: f64,
    pub divergence: f64,
    pub epsilon: f64,
    pub converged: bool,
    /// Rows of `current` that entered the solve.
    pub rows: Vec<usize>,
    /// `d value / d current[rows[k]]`, when requested.
    pub grad: Option<Vec<Vec<f64>>>,
    pub warning: Option<String>,
}

pub fn ot_regulariser(
    current: &[Vec<f64>],
    reference: &[Vec<f64>],
    reg: &OtRegulariser,
    seed: u64,
    step: u64,
    with_grad: bool,
) -> Result<OtTerm> {
    let eps = reg.epsilon();
    let zero = |warning: Option<String>| OtTerm {
        value: 0.0,
        divergence: 0.0,
        epsilon: eps,
        converged: true,
        rows: Vec::new(),
        grad: None,
        warning,
    };
    if current.is_empty() || reference.is_empty() {
        return Ok(zero(Some("empty measure; OT term set to 0".into())));
    }
    if reg.weight == 0.0 {
        return Ok(zero(None));
    }
    if !(reg.blur > 0.0) {
        return Err(Error::validation("blur must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut pick = |len: usize| -> Vec<usize> {
        if len <= reg.subsample_cap {
            (0..len).collect()
        } else {
            let mut idx = sample(&mut rng, len, reg.subsample_cap).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let rows = pick(current.len());
    let ref_rows = if reference.len() == current.len() {
        rows.clone()
    } else {
        pick(reference.len())
    };
    let xs: Vec<Vec<f64>> = rows.iter().map(|&i| current[i].clone()).collect();
    let ys: Vec<Vec<f64>> = ref_rows.iter().map(|&i| reference[i].clone()).collect();
    let opts = SinkhornOptions {
        scaling: reg.scaling,
        max_iter: reg.max_iter,
        ..Default::default()
    };
    let div = sinkhorn_divergence_points(&xs, &ys, eps, &opts, with_grad)?;
    let grad = div.grad_first.map(|g| {
        g.into_iter()
            .map(|row| row.into_iter().map(|v| v * reg.weight).collect())
            .collect()
    });
    Ok(OtTerm {
        value: reg.weight * div.value,
        divergence: div.value,
        epsilon: eps,
        converged: div.converged,
        rows,
        grad,
        warning: (!div.converged).then(|| "Sinkhorn did not converge".to_string()),
    })
}

fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Options for the output-space OT diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct OutputOtOptions {
    pub top_k: usize,
    /// Temperature in squared-index units.
    pub epsilon: f64,
}

impl Default for OutputOtOptions {
    fn default() -> Self {
        Self {
            top_k: 4096,
            epsilon: 1e-2,
        }
    }
}

/// Debiased entropic OT between two token distributions, restricted to the
/// union of each side's top-k tokens and using `(i - j)^2` as ground cost.
pub fn output_space_ot_diag(p: &ProbVector, q: &ProbVector, opts: &OutputOtOptions) -> Result<f64> {
    check_dim(p.support_size(), q.support_size())?;
    if opts.top_k == 0 {
        return Err(Error::validation("top_k must be >= 1"));
    }
    let mut support = top_k_indices(p.probs(), opts.top_k);
    support.extend(top_k_indices(q.probs(), opts.top_k));
    support.sort_unstable();
    support.dedup();

    // Zero-mass tokens are dropped per side; they carry no transport.
    let side = |dist: &ProbVector| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let kept: Vec<usize> = support.iter().copied().filter(|&t| dist.probs()[t] > 0.0).collect();
        let mass: f64 = kept.iter().map(|&t| dist.probs()[t]).sum();
        if !(mass > 0.0) {
            return Err(Error::validation("distribution has no mass on the top-k support"));
        }
        Ok((
            kept.iter().map(|&t| vec![t as f64]).collect(),
            kept.iter().map(|&t| dist.probs()[t] / mass).collect(),
        ))
    };
    let (xs, wa) = side(p)?;
    let (ys, wb) = side(q)?;
    let sopts = SinkhornOptions::default();
    let ot = |x: &[Vec<f64>], a: &[f64], y: &[Vec<f64>], b: &[f64]| -> Result<f64> {
        let c = CostMatrix::squared_euclidean(x, y)?;
        Ok(sinkhorn(a, b, &c, opts.epsilon, &sopts)?.value)
    };
    let self_ot = |x: &[Vec<f64>], a: &[f64]| -> Result<f64> {
        let c = CostMatrix::squared_euclidean(x, x)?;
        Ok(sinkhorn_symmetric(a, &c, opts.epsilon, &sopts)?.value)
    };
    let (saa, sbb) = (self_ot(&xs, &wa)?, self_ot(&ys, &wb)?);
    let sab = if xs == ys && wa == wb {
        saa
    } else {
        ot(&xs, &wa, &ys, &wb)?
    };
    let s = sab - 0.5 * saa - 0.5 * sbb;
    Ok(s.max(0.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSummary {
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub converged: bool,
}
