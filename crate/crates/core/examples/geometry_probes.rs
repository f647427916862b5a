//! Probe metrics between two categorical distributions, a short probe path and
//! an (alpha, beta) perturbation landscape around a base distribution.
use enigma::prob_metrics::{
    fr_path_stats, landscape_grid, linspace, probe_report, turning_angles, LandscapeMetric, ProbVector, ProbePath,
};

fn main() -> enigma::Result<()> {
    let p = ProbVector::new(vec![0.5, 0.3, 0.2])?;
    let q = ProbVector::new(vec![0.2, 0.3, 0.5])?;
    let r = probe_report(&p, &q)?;
    println!(
        "BC={:.4} angle={:.4} hellinger={:.4} JS={:.4} bits FR={:.4}",
        r.bc, r.bhat_angle, r.hellinger, r.js_bits, r.fr_distance
    );

    let path = ProbePath::new(
        vec![
            p.clone(),
            ProbVector::new(vec![0.4, 0.4, 0.2])?,
            ProbVector::new(vec![0.3, 0.3, 0.4])?,
            q,
        ],
        vec![0, 100, 200, 300],
    )?;
    let stats = fr_path_stats(&path)?;
    println!(
        "path length {:.4} vs geodesic {:.4} (ratio {:.3})",
        stats.cumulative_length, stats.endpoint_geodesic, stats.ratio
    );
    println!("turning angles {:?}", turning_angles(&path)?);

    let grid = landscape_grid(&p, &linspace(0.5, 1.5, 5), &linspace(0.0, 0.5, 5), &LandscapeMetric::Fr)?;
    grid.write_csv(std::io::stdout().lock())?;
    Ok(())
}
