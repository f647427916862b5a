//! Sample completions from a random toy policy and from the format warm start
//! the trainer begins with.
use enigma::policy::{DecodeConfig, ToyPolicy, Vocab};
use enigma::rewards::xml_format_reward;
use enigma::task::ToyTask;
use enigma::trainer::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(name: &str, policy: &ToyPolicy, task: &ToyTask, rng: &mut ChaCha8Rng) -> enigma::Result<()> {
    let inst = task.instance(0, rng);
    println!(
        "-- {name}: prompt {:?}, principle {:?}",
        inst.prompt, task.principles[0]
    );
    for c in policy.sample_group(&inst.prompt, &task.principles[0], 4, rng)? {
        let text = policy.vocab.render(&c.tokens);
        let logp: f64 = c.old_log_probs.iter().sum();
        println!(
            "  format={} truncated={:<5} logp={logp:+7.3}  {text}",
            xml_format_reward(&text),
            c.truncated
        );
    }
    Ok(())
}

fn main() -> enigma::Result<()> {
    let cfg = TrainConfig::default();
    let vocab = Vocab::new(cfg.vocab_size)?;
    let task = ToyTask::new(vocab, vec![vec![5, 6], vec![7, 8]], cfg.prompt_len, cfg.principle_bias)?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    let random = ToyPolicy::init(vocab, cfg.hidden_dim, DecodeConfig::default(), &mut rng);
    show("random init", &random, &task, &mut rng)?;
    let trainer = Trainer::new(cfg, task.clone(), 42, 1)?;
    show("after warm start", &trainer.policy, &task, &mut rng)?;
    Ok(())
}
