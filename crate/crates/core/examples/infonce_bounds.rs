//! Row/column InfoNCE on a score matrix and clean shadow-principle MI bounds.
use enigma::mi::{
    clean_mi_bounds, diag_mi, infonce_losses, sami_lambdas, ContrastRow, ScoreMatrix, ScoreNormalisation, ShadowDraw,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> enigma::Result<()> {
    // completion i scored under principle j; the diagonal is the true pairing
    let rows = vec![
        vec![-1.0, -2.5, -2.2, -2.8],
        vec![-2.1, -1.1, -2.6, -2.4],
        vec![-2.4, -2.3, -0.9, -2.0],
        vec![-2.6, -2.2, -2.5, -1.2],
    ];
    let l = ScoreMatrix::from_rows(rows.clone(), ScoreNormalisation::LengthMean)?;
    let nce = infonce_losses(&l)?;
    println!(
        "row NCE {:.4}  col NCE {:.4}  diag_mi {:.4} (chance: -ln 4 = {:.4})",
        nce.row_loss,
        nce.col_loss,
        diag_mi(&l)?,
        -(4f64.ln())
    );
    for step in [0, 250, 500, 1000] {
        println!(
            "step {step:>4}: (lambda_row, lambda_col) = {:?}",
            sami_lambdas(step, 1000, 0.5)
        );
    }

    let k = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut row_c = Vec::new();
    let mut col_c = Vec::new();
    for i in 0..rows.len() {
        let draw = ShadowDraw::sample(&mut rng, rows.len(), i, k)?;
        row_c.push(ContrastRow {
            positive: rows[i][i],
            shadows: draw.shadow_ids.iter().map(|&j| rows[i][j]).collect(),
        });
        col_c.push(ContrastRow {
            positive: rows[i][i],
            shadows: draw.shadow_ids.iter().map(|&j| rows[j][i]).collect(),
        });
    }
    let clean = [true, true, false, true];
    let b = clean_mi_bounds(&row_c, &col_c, &clean, k)?;
    println!(
        "clean rows {}: row bound {:.4}, col bound {:.4}, gap {:+.4} nats (max ln 3 = {:.4})",
        b.clean_count,
        b.row_bound,
        b.col_bound,
        b.gap,
        3f64.ln()
    );
    Ok(())
}
