//! Representation-space probes over per-sequence hidden summaries.

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;
const FRECHET_NEG_TOL: f64 = 1e-7;
const UNIT_NORM_TOL: f64 = 1e-9;

static FRECHET_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times a slightly negative squared Fréchet distance was clamped to 0.
pub fn frechet_clamp_count() -> u64 {
    FRECHET_CLAMPS.load(Ordering::Relaxed)
}

/// Uniform-weight point cloud of per-sequence summaries in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    normalised: bool,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vec<f64>>, normalised: bool) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("empirical measure needs at least one point"));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::validation("points must have dimension >= 1"));
        }
        for (i, p) in points.iter().enumerate() {
            check_dim(d, p.len())?;
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("point {i} has a non-finite entry")));
            }
            if normalised {
                let n = l2_norm(p);
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::validation(format!("point {i} has norm {n}, expected 1")));
                }
            }
        }
        Ok(Self { points, normalised })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn is_normalised(&self) -> bool {
        self.normalised
    }

    /// Rows as a `B x d` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.points[i][j])
    }

    /// Keep only the listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let points = rows
            .iter()
            .map(|&r| {
                self.points
                    .get(r)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("row {r} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, self.normalised)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let io = |e| Error::io("<measure csv>", e);
        writeln!(writer, "dim={},normalised={}", self.dim(), self.normalised).map_err(io)?;
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|x| format!("{x:?}")).collect();
            writeln!(writer, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let schema = |line: usize, message: String| Error::Schema {
            source_name: "measure csv".into(),
            line,
            message,
        };
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or_else(|| schema(1, "missing header".into()))?
            .map_err(|e| Error::io("<measure csv>", e))?;
        let mut dim = None;
        let mut normalised = None;
        for kv in header.trim().split(',') {
            match kv.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("normalised", v)) => normalised = v.parse::<bool>().ok(),
                _ => return Err(schema(1, format!("unexpected header field '{kv}'"))),
            }
        }
        let (dim, normalised) = match (dim, normalised) {
            (Some(d), Some(n)) => (d, n),
            _ => return Err(schema(1, "header must be dim=<d>,normalised=<bool>".into())),
        };
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<measure csv>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| schema(i + 2, e.to_string()))?;
            if row.len() != dim {
                return Err(schema(i + 2, format!("expected {dim} values, got {}", row.len())));
            }
            points.push(row);
        }
        Self::new(points, normalised)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean and covariance of a point cloud.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim(d, cov.nrows())?;
        check_dim(d, cov.ncols())?;
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(Error::validation(format!(
                "covariance is not symmetric (max asymmetry {asym})"
            )));
        }
        let cov = symmetrise(&cov);
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(Error::validation(format!(
                "covariance is not PSD (min eigenvalue {min_eig})"
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Fit with the unbiased (B-1) covariance estimator; needs B >= 2.
    pub fn fit(measure: &EmpiricalMeasure) -> Result<Self> {
        let b = measure.len();
        if b < 2 {
            return Err(Error::validation("fitting a Gaussian summary needs at least 2 points"));
        }
        let x = measure.to_matrix();
        let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (b as f64 - 1.0);
        Self::new(mean, symmetrise(&cov))
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn symmetrise(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrise(m));
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussian summaries.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    check_dim(a.mean.len(), b.mean.len())?;
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let a_half = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&a_half * &b.cov * &a_half));
    let d2 = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    if d2 < -FRECHET_NEG_TOL {
        return Err(Error::validation(format!(
            "squared Fréchet distance {d2} is negative beyond tolerance"
        )));
    }
    if d2 < 0.0 {
        FRECHET_CLAMPS.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    Ok(d2)
}

/// Nonincreasing nonnegative eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    /// Sorts descending; entries in `[-1e-9, 0)` are clamped to 0.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        for v in &mut values {
            if !v.is_finite() || *v < -PSD_TOL {
                return Err(Error::validation(format!("invalid eigenvalue {v}")));
            }
            *v = v.max(0.0);
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { eigenvalues: values })
    }

    pub fn of_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(symmetrise(cov));
        Self::new(eig.eigenvalues.iter().copied().collect())
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveDims {
    pub effrank: f64,
    pub participation_ratio: f64,
}

pub fn effective_dims(s: &Spectrum) -> Result<EffectiveDims> {
    let total: f64 = s.eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::validation(
            "spectrum needs at least one strictly positive eigenvalue",
        ));
    }
    let entropy: f64 = s
        .eigenvalues
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let p = l / total;
            -p * p.ln()
        })
        .sum();
    let sum_sq: f64 = s.eigenvalues.iter().map(|l| l * l).sum();
    Ok(EffectiveDims {
        effrank: entropy.exp(),
        participation_ratio: total * total / sum_sq,
    })
}

fn centre_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Linear CKA between two design matrices with examples as rows.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_dim(x.nrows(), y.nrows())?;
    if x.nrows() < 2 {
        return Err(Error::validation("linear CKA needs at least 2 rows"));
    }
    let x = centre_columns(x);
    let y = centre_columns(y);
    let xx = (x.transpose() * &x).norm();
    let yy = (y.transpose() * &y).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::validation("linear CKA of a zero (or constant) matrix"));
    }
    let yx = (y.transpose() * &x).norm_squared();
    Ok((yx / (xx * yy)).clamp(0.0, 1.0))
}

/// Per-sequence completion-token means, L2-normalised.
///
/// Sequences without any unmasked token (or with a zero mean) are dropped and
/// counted in the second return value.
pub fn summarise_hidden(states: &[Vec<Vec<f64>>], masks: &[Vec<bool>]) -> Result<(EmpiricalMeasure, usize)> {
    check_dim(states.len(), masks.len())?;
    let mut points = Vec::with_capacity(states.len());
    let mut dropped = 0;
    for (seq, mask) in states.iter().zip(masks) {
        check_dim(seq.len(), mask.len())?;
        let mut mean: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for (v, &m) in seq.iter().zip(mask) {
            if !m {
                continue;
            }
            let acc = mean.get_or_insert_with(|| vec![0.0; v.len()]);
            check_dim(acc.len(), v.len())?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            count += 1;
        }
        match mean {
            Some(mut m) => {
                for a in &mut m {
                    *a /= count as f64;
                }
                let n = l2_norm(&m);
                if n > 0.0 {
                    points.push(m.into_iter().map(|a| a / n).collect());
                } else {
                    dropped += 1;
                }
            }
            None => dropped += 1,
        }
    }
    Ok((EmpiricalMeasure::new(points, true)?, dropped))
}
