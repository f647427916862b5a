//! Distances and angles between categorical distributions.
//!
//! Everything here works on the probability simplex through the square-root
//! embedding `p -> sqrt(p)`, which maps the simplex onto the positive orthant of
//! the unit sphere. Under that map the Fisher-Rao geodesic distance is twice the
//! Bhattacharyya angle, so path lengths and turning angles computed here are
//! coordinate-free.

use std::f64::consts::LN_2;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mi::{diag_mi, ScoreMatrix, ScoreNormalisation};

/// Tolerance on `sum(p) == 1`.
pub const NORMALISATION_TOL: f64 = 1e-9;

/// A point on the categorical simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("probability vector is empty"));
        }
        if let Some((k, v)) = probs.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::validation(format!(
                "probability entry {k} is {v}, expected a finite nonnegative value"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALISATION_TOL {
            return Err(Error::validation(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Normalise arbitrary nonnegative weights onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::validation("weights must have a positive finite sum"));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::validation("uniform distribution needs k >= 1"));
        }
        Ok(Self {
            probs: vec![1.0 / k as f64; k],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    /// Unit vector `sqrt(p) / ||sqrt(p)||` on the sphere.
    pub fn sqrt_embedding(&self) -> Vec<f64> {
        let mut u: Vec<f64> = self.probs.iter().map(|p| p.sqrt()).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut u {
            *x /= norm;
        }
        u
    }
}

/// All output-space proximity measures for one pair of distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub bc: f64,
    pub bhat_angle: f64,
    pub bhat_distance: f64,
    pub hellinger: f64,
    pub js_nats: f64,
    pub js_bits: f64,
    pub fr_distance: f64,
}

impl ProbeReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "bc",
        "bhat_angle",
        "bhat_distance",
        "hellinger",
        "js_nats",
        "js_bits",
        "fr_distance",
    ];
}

/// Bhattacharyya coefficient, rescaled by the two masses so rounding in the
/// normalisation never pushes an identical pair below 1.
pub fn bhattacharyya(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_dim(p.support_size(), q.support_size())?;
    let raw: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a * b).sqrt()).sum();
    let mass_p: f64 = p.probs.iter().sum();
    let mass_q: f64 = q.probs.iter().sum();
    Ok((raw / (mass_p * mass_q).sqrt()).clamp(0.0, 1.0))
}

/// Fisher-Rao geodesic distance `2 * arccos(BC)`.
pub fn fr_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    Ok(2.0 * bhattacharyya(p, q)?.acos())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .map(|(&a, &c)| if a > 0.0 { a * (a / c).ln() } else { 0.0 })
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_dim(p.support_size(), q.support_size())?;
    let m: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(&p.probs, &m) + 0.5 * kl_to_mixture(&q.probs, &m);
    Ok(js.max(0.0))
}

pub fn probe_report(p: &ProbVector, q: &ProbVector) -> Result<ProbeReport> {
    let bc = bhattacharyya(p, q)?;
    let bhat_angle = bc.acos();
    let js_nats = js_divergence(p, q)?;
    Ok(ProbeReport {
        bc,
        bhat_angle,
        bhat_distance: 0.0 - bc.ln(),
        hellinger: (1.0 - bc).max(0.0).sqrt(),
        js_nats,
        js_bits: (js_nats / LN_2).min(1.0),
        fr_distance: 2.0 * bhat_angle,
    })
}

pub fn write_probe_csv<W: Write>(reports: &[ProbeReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if reports.is_empty() {
        w.write_record(ProbeReport::CSV_HEADER)?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<probe csv>", e))?;
    Ok(())
}

pub fn read_probe_csv<R: Read>(reader: R) -> Result<Vec<ProbeReport>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != ProbeReport::CSV_HEADER {
        return Err(Error::Schema {
            source_name: "probe csv".into(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// An ordered sequence of checkpoint distributions over a shared support.
#[derive(Debug, Clone)]
pub struct ProbePath {
    checkpoints: Vec<ProbVector>,
    labels: Vec<u64>,
}

impl ProbePath {
    pub fn new(checkpoints: Vec<ProbVector>, labels: Vec<u64>) -> Result<Self> {
        if checkpoints.len() < 2 {
            return Err(Error::validation("a probe path needs at least 2 checkpoints"));
        }
        check_dim(checkpoints.len(), labels.len())?;
        let k = checkpoints[0].support_size();
        for c in &checkpoints {
            check_dim(k, c.support_size())?;
        }
        Ok(Self { checkpoints, labels })
    }

    /// Labels default to `0, 1, 2, ...`.
    pub fn unlabelled(checkpoints: Vec<ProbVector>) -> Result<Self> {
        let labels = (0..checkpoints.len() as u64).collect();
        Self::new(checkpoints, labels)
    }

    pub fn checkpoints(&self) -> &[ProbVector] {
        &self.checkpoints
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStats {
    pub segment_lengths: Vec<f64>,
    pub cumulative_length: f64,
    pub endpoint_geodesic: f64,
    /// `cumulative_length / endpoint_geodesic`, NaN when the endpoints coincide.
    pub ratio: f64,
    /// Set when the endpoints coincide (stationary or closed path).
    pub degenerate: bool,
}

pub fn fr_path_stats(path: &ProbePath) -> Result<PathStats> {
    let cps = &path.checkpoints;
    let segment_lengths = cps
        .windows(2)
        .map(|w| fr_distance(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let cumulative_length: f64 = segment_lengths.iter().sum();
    let endpoint_geodesic = fr_distance(&cps[0], &cps[cps.len() - 1])?;
    let degenerate = endpoint_geodesic <= 0.0;
    let ratio = if degenerate {
        f64::NAN
    } else {
        cumulative_length / endpoint_geodesic
    };
    Ok(PathStats {
        segment_lengths,
        cumulative_length,
        endpoint_geodesic,
        ratio,
        degenerate,
    })
}

/// Angle between successive chord displacements in the sqrt-embedding, one per
/// interior checkpoint. Zero-length segments give an angle of 0.
pub fn turning_angles(path: &ProbePath) -> Result<Vec<f64>> {
    let cps = &path.checkpoints;
    if cps.len() < 3 {
        return Err(Error::validation("turning angles need at least 3 checkpoints"));
    }
    let emb: Vec<Vec<f64>> = cps.iter().map(ProbVector::sqrt_embedding).collect();
    let disp: Vec<Vec<f64>> = emb
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    Ok(disp
        .windows(2)
        .map(|w| {
            let n0 = w[0].iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1 = w[1].iter().map(|x| x * x).sum::<f64>().sqrt();
            if n0 == 0.0 || n1 == 0.0 {
                return 0.0;
            }
            let dot: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
            (dot / (n0 * n1)).clamp(-1.0, 1.0).acos()
        })
        .collect())
}

/// Decoding perturbation `(1 - beta) * normalise(p^alpha) + beta * uniform`.
///
/// `alpha` acts as an inverse temperature, `beta` mixes toward uniform.
pub fn perturb(p: &ProbVector, alpha: f64, beta: f64) -> Result<ProbVector> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::validation(format!("alpha must be > 0, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::validation(format!("beta must lie in [0, 1], got {beta}")));
    }
    let k = p.support_size() as f64;
    let powered: Vec<f64> = p.probs.iter().map(|x| x.powf(alpha)).collect();
    let z: f64 = powered.iter().sum();
    let probs: Vec<f64> = powered.iter().map(|x| (1.0 - beta) * x / z + beta / k).collect();
    ProbVector::from_weights(&probs)
}

/// Teacher-forced decodes aligned as a principle x completion grid.
///
/// `cells[i][j]` holds, for completion `i` scored under context `j`, the
/// next-token distribution at each completion position together with the
/// token actually observed there.
#[derive(Debug, Clone)]
pub struct AlignedDecodes {
    pub cells: Vec<Vec<Vec<(ProbVector, usize)>>>,
}

impl AlignedDecodes {
    /// Length-mean score matrix after applying a perturbation to every decode.
    pub fn score_matrix(&self, alpha: f64, beta: f64) -> Result<ScoreMatrix> {
        let n = self.cells.len();
        let mut rows = Vec::with_capacity(n);
        for row in &self.cells {
            check_dim(n, row.len())?;
            let mut out = Vec::with_capacity(n);
            for cell in row {
                if cell.is_empty() {
                    return Err(Error::validation("aligned decode cell is empty"));
                }
                let mut total = 0.0;
                for (dist, tok) in cell {
                    let pert = perturb(dist, alpha, beta)?;
                    let prob = *pert
                        .probs()
                        .get(*tok)
                        .ok_or_else(|| Error::validation(format!("target token {tok} out of support")))?;
                    total += prob.ln();
                }
                out.push(total / cell.len() as f64);
            }
            rows.push(out);
        }
        ScoreMatrix::from_rows(rows, ScoreNormalisation::LengthMean)
    }
}

#[derive(Debug, Clone)]
pub enum LandscapeMetric<'a> {
    /// Fisher-Rao distance from the unperturbed base distribution.
    Fr,
    /// Diagonal PMI statistic of the perturbed aligned score matrix.
    DiagMi(&'a AlignedDecodes),
}

#[derive(Debug, Clone, Serialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `values[a][b]` for `alphas[a]`, `betas[b]`.
    pub values: Vec<Vec<f64>>,
    pub metric: String,
    pub perturbation: String,
}

pub const PERTURBATION_SCHEME: &str = "p(alpha,beta) = (1-beta)*normalise(p^alpha) + beta*uniform";

impl LandscapeGrid {
    /// CSV with a leading `# key=value` metadata line and `alpha,beta,value` rows.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# metric={},perturbation={}", self.metric, self.perturbation)
            .map_err(|e| Error::io("<landscape csv>", e))?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["alpha", "beta", "value"])?;
        for (a, row) in self.alphas.iter().zip(&self.values) {
            for (b, v) in self.betas.iter().zip(row) {
                w.write_record([a.to_string(), b.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<landscape csv>", e))?;
        Ok(())
    }
}

pub fn landscape_grid(
    base: &ProbVector,
    alphas: &[f64],
    betas: &[f64],
    metric: &LandscapeMetric<'_>,
) -> Result<LandscapeGrid> {
    if alphas.iter().chain(betas).any(|x| !x.is_finite()) {
        return Err(Error::validation("landscape axes must be finite"));
    }
    let mut values = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut row = Vec::with_capacity(betas.len());
        for &beta in betas {
            let v = match metric {
                LandscapeMetric::Fr => fr_distance(&perturb(base, alpha, beta)?, base)?,
                LandscapeMetric::DiagMi(decodes) => diag_mi(&decodes.score_matrix(alpha, beta)?)?,
            };
            row.push(v);
        }
        values.push(row);
    }
    Ok(LandscapeGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        values,
        metric: match metric {
            LandscapeMetric::Fr => "fr".into(),
            LandscapeMetric::DiagMi(_) => "diag_mi".into(),
        },
        perturbation: PERTURBATION_SCHEME.into(),
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_pair_is_zero_everywhere() {
        let r = probe_report(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap();
        assert_eq!(r.bc, 1.0);
        assert_eq!(r.bhat_angle, 0.0);
        assert_eq!(r.hellinger, 0.0);
        assert_eq!(r.js_nats, 0.0);
        assert_eq!(r.fr_distance, 0.0);
        assert_eq!(r.bhat_distance, 0.0);
    }

    #[test]
    fn disjoint_supports() {
        let r = probe_report(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        assert_eq!(r.bc, 0.0);
        assert_abs_diff_eq!(r.bhat_angle, FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(r.hellinger, 1.0);
        assert_abs_diff_eq!(r.js_bits, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.fr_distance, PI, epsilon = 1e-15);
        assert!(r.bhat_distance.is_infinite());
    }

    #[test]
    fn half_vs_skewed_matches_high_precision_oracle() {
        // mpmath, 40 digits
        let r = probe_report(&pv(&[0.5, 0.5]), &pv(&[0.9, 0.1])).unwrap();
        assert_abs_diff_eq!(r.bc, 0.894_427_190_999_915_9, epsilon = 1e-14);
        assert_abs_diff_eq!(r.bhat_angle, 0.463_647_609_000_806_1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.hellinger, 0.324_919_696_232_906_3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.js_nats, 0.101_749_225_079_196_7, epsilon = 1e-14);
        assert_abs_diff_eq!(r.bhat_distance, 0.111_571_775_657_104_9, epsilon = 1e-13);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            probe_report(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(ProbVector::new(vec![0.5, 0.6]), Err(Error::Validation(_))));
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    #[test]
    fn great_circle_path() {
        let path = ProbePath::unlabelled(vec![pv(&[1.0, 0.0]), pv(&[0.5, 0.5]), pv(&[0.0, 1.0])]).unwrap();
        let s = fr_path_stats(&path).unwrap();
        assert_abs_diff_eq!(s.segment_lengths[0], FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.segment_lengths[1], FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cumulative_length, PI, epsilon = 1e-12);
        assert_abs_diff_eq!(s.endpoint_geodesic, PI, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ratio, 1.0, epsilon = 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn stationary_and_closed_paths_are_flagged() {
        let p = pv(&[0.2, 0.3, 0.5]);
        let s = fr_path_stats(&ProbePath::unlabelled(vec![p.clone(), p]).unwrap()).unwrap();
        assert_eq!(s.cumulative_length, 0.0);
        assert_eq!(s.endpoint_geodesic, 0.0);
        assert!(s.ratio.is_nan() && s.degenerate);

        let path = ProbePath::unlabelled(vec![pv(&[1.0, 0.0]), pv(&[0.5, 0.5]), pv(&[1.0, 0.0])]).unwrap();
        let s = fr_path_stats(&path).unwrap();
        assert_abs_diff_eq!(s.cumulative_length, PI, epsilon = 1e-12);
        assert_eq!(s.endpoint_geodesic, 0.0);
        assert!(s.ratio.is_nan() && s.degenerate);
    }

    #[test]
    fn short_paths_rejected() {
        assert!(ProbePath::unlabelled(vec![pv(&[1.0])]).is_err());
        let two = ProbePath::unlabelled(vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0])]).unwrap();
        assert!(turning_angles(&two).is_err());
    }

    #[test]
    fn turning_angle_conventions() {
        let a = pv(&[0.7, 0.2, 0.1]);
        let b = pv(&[0.1, 0.6, 0.3]);
        let repeated = ProbePath::unlabelled(vec![a.clone(), b.clone(), b.clone()]).unwrap();
        assert_eq!(turning_angles(&repeated).unwrap(), vec![0.0]);
        let reversal = ProbePath::unlabelled(vec![a.clone(), b, a]).unwrap();
        assert_abs_diff_eq!(turning_angles(&reversal).unwrap()[0], PI, epsilon = 1e-7);
    }

    #[test]
    fn great_circle_turning_angle_matches_chord_oracle() {
        // Chords u1-u0 and u2-u1 with u0=(1,0), u1=(s,s), u2=(0,1), s=1/sqrt 2.
        let s = 0.5f64.sqrt();
        let d1 = [s - 1.0, s];
        let d2 = [-s, 1.0 - s];
        let cos = (d1[0] * d2[0] + d1[1] * d2[1])
            / ((d1[0] * d1[0] + d1[1] * d1[1]).sqrt() * (d2[0] * d2[0] + d2[1] * d2[1]).sqrt());
        let oracle = cos.acos();
        assert_abs_diff_eq!(oracle, FRAC_PI_4, epsilon = 1e-12);
        let path = ProbePath::unlabelled(vec![pv(&[1.0, 0.0]), pv(&[0.5, 0.5]), pv(&[0.0, 1.0])]).unwrap();
        assert_abs_diff_eq!(turning_angles(&path).unwrap()[0], oracle, epsilon = 1e-12);
    }

    #[test]
    fn landscape_identity_and_uniform_limit() {
        let base = pv(&[0.6, 0.25, 0.1, 0.05]);
        let g = landscape_grid(&base, &[1.0], &[0.0, 1.0], &LandscapeMetric::Fr).unwrap();
        assert_eq!(g.values[0][0], 0.0);
        let closed: f64 = 2.0 * base.probs().iter().map(|p| (p / 4.0).sqrt()).sum::<f64>().acos();
        assert_abs_diff_eq!(g.values[0][1], closed, epsilon = 1e-12);
        assert!(matches!(
            landscape_grid(&base, &[0.0], &[0.0], &LandscapeMetric::Fr),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn landscape_monotone_in_beta() {
        let base = pv(&[0.6, 0.25, 0.1, 0.05]);
        let betas = linspace(0.0, 1.0, 21);
        let g = landscape_grid(&base, &[1.0], &betas, &LandscapeMetric::Fr).unwrap();
        for w in g.values[0].windows(2) {
            assert!(w[1] >= w[0], "{:?}", g.values[0]);
        }
    }

    #[test]
    fn probe_csv_round_trip() {
        let r = probe_report(&pv(&[0.5, 0.5]), &pv(&[0.9, 0.1])).unwrap();
        let mut buf = Vec::new();
        write_probe_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("bc,bhat_angle,bhat_distance,hellinger,js_nats,js_bits,fr_distance\n"));
        let back = read_probe_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![r]);
    }
}
