//! Score the two bundled principle sets with the toy world model.
use std::path::Path;

use enigma::constitution::{
    attach_zscored, evaluate_principle_set, fit_world_model, sample_items, PrincipleSet, SiWeights, WorldModelConfig,
};
use enigma::policy::Vocab;
use enigma::task::ToyTask;

fn main() -> enigma::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/constitutions");
    let task = ToyTask::new(Vocab::new(16)?, vec![Vec::new()], 3, 0.8)?;
    let world = fit_world_model(&task, &WorldModelConfig::default(), 0)?;
    let mut reports = Vec::new();
    for file in ["toy_high_si.yaml", "toy_low_si.yaml"] {
        let set = PrincipleSet::from_path(&data.join(file))?;
        let items = sample_items(&task, &set, 64, 1)?;
        reports.push(evaluate_principle_set(
            &world,
            &task.vocab,
            &items,
            &set,
            2,
            &SiWeights::default(),
            2,
        )?);
    }
    attach_zscored(&mut reports)?;
    for r in &reports {
        println!(
            "{:<12} SI={:.4} SI_z={:+.3}  dNLL={:.4} bits  AUC={:.3}  margin+={:.3} margin-={:.3}  leaky={:?}",
            r.name,
            r.si,
            r.si_zscored.unwrap_or(f64::NAN),
            r.delta_nll_median,
            r.auc,
            r.mi_diag_margin_pos,
            r.mi_diag_margin_neg,
            r.leaky.ids
        );
    }
    Ok(())
}
