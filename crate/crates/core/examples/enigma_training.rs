//! Train the toy policy in-process and print a few metrics.
//!
//! `cargo run --release --example enigma_training -- 300`
use enigma::policy::Vocab;
use enigma::task::ToyTask;
use enigma::trainer::{TrainConfig, Trainer};

fn main() -> enigma::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = TrainConfig {
        lambda_sami: 1.0,
        lr: 0.1,
        ..TrainConfig::default()
    };
    let principles = vec![vec![5, 6], vec![7, 8], vec![9, 10], vec![11, 12]];
    let task = ToyTask::new(
        Vocab::new(cfg.vocab_size)?,
        principles,
        cfg.prompt_len,
        cfg.principle_bias,
    )?;
    let mut trainer = Trainer::new(cfg, task, 7, steps)?;
    println!(
        "{:>5} {:>8} {:>8} {:>9} {:>9} {:>8} {:>7}",
        "step", "reward", "format", "mi_row", "ot", "entropy", "beta"
    );
    for _ in 0..steps {
        let r = trainer.train_step()?;
        if r.step % 25 == 0 || r.step + 1 == steps {
            println!(
                "{:>5} {:>8.3} {:>8.3} {:>+9.4} {:>9.5} {:>8.3} {:>7.3}",
                r.step, r.reward_total_mean, r.format_rate, r.mi_row_clean, r.loss_ot, r.entropy, r.autoscale_beta
            );
        }
    }
    Ok(())
}
