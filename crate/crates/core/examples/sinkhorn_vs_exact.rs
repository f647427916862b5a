//! Entropic OT at small epsilon against brute-force W2 on tiny clouds, plus the
//! debiased Sinkhorn divergence.
use enigma::ot::{entropic_ot, exact_w2_small, sinkhorn_divergence, SinkhornOptions};
use enigma::rep_metrics::EmpiricalMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> enigma::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pts =
        |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect() };
    let a = EmpiricalMeasure::new(pts(6), false)?;
    let b = EmpiricalMeasure::new(pts(6), false)?;
    let opts = SinkhornOptions::default();
    let exact = exact_w2_small(&a, &b)?;
    for eps in [1e-1, 1e-2, 1e-3] {
        let ot = entropic_ot(&a, &b, eps, &opts)?;
        let (row, col) = ot.plan.marginal_violation();
        println!(
            "eps={eps:<6} OT={:.6} exact={exact:.6} rel.err={:.2e} iters={} marginals=({row:.1e}, {col:.1e})",
            ot.value,
            (ot.plan
                .cost(&enigma::ot::CostMatrix::squared_euclidean(a.points(), b.points())?)
                - exact)
                .abs()
                / exact,
            ot.iterations
        );
    }
    println!("S(a, a) = {:.3e}", sinkhorn_divergence(&a, &a, 0.0144, &opts)?.value);
    println!("S(a, b) = {:.6}", sinkhorn_divergence(&a, &b, 0.0144, &opts)?.value);
    Ok(())
}
