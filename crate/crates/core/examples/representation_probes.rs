//! Frechet distance, effective rank and linear CKA on synthetic hidden states.
use enigma::rep_metrics::{effective_dims, frechet_distance, linear_cka, EmpiricalMeasure, GaussianSummary, Spectrum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| noise.sample(rng) * (1.0 + j as f64) + if i % 2 == 0 { shift } else { 0.0 })
                .collect()
        })
        .collect()
}

fn main() -> enigma::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = EmpiricalMeasure::new(cloud(&mut rng, 200, 4, 0.0), false)?;
    let b = EmpiricalMeasure::new(cloud(&mut rng, 200, 4, 1.5), false)?;
    let (ga, gb) = (GaussianSummary::fit(&a)?, GaussianSummary::fit(&b)?);
    println!("frechet(a, a) = {:.3e}", frechet_distance(&ga, &ga)?);
    println!("frechet(a, b) = {:.4}", frechet_distance(&ga, &gb)?);

    let dims = effective_dims(&Spectrum::of_covariance(ga.cov())?)?;
    println!(
        "effrank = {:.3}, participation ratio = {:.3} (d = 4)",
        dims.effrank, dims.participation_ratio
    );

    let x = a.to_matrix();
    let rotated =
        &x * DMatrix::from_row_slice(4, 4, &[0., 1., 0., 0., -1., 0., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.]);
    println!("CKA(x, rotated x) = {:.6}", linear_cka(&x, &rotated)?);
    println!("CKA(x, other)     = {:.6}", linear_cka(&x, &b.to_matrix())?);
    Ok(())
}
