//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance`

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use enigma::cli::{cmd_eval_constitution, cmd_train, EvalArgs, RunConfig, TrainArgs};
use enigma::constitution::{read_components_csv, report_from_components, SiWeights};
use enigma::mi::{clean_mi_bounds, ContrastRow};
use enigma::ot::{exact_w2_small, sinkhorn_divergence, SinkhornOptions};
use enigma::policy::{DecodeConfig, Params, ToyPolicy, Vocab};
use enigma::prob_metrics::{bhattacharyya, fr_distance, js_divergence, probe_report, ProbVector};
use enigma::rep_metrics::{effective_dims, frechet_distance, EmpiricalMeasure, GaussianSummary, Spectrum};
use enigma::task::ToyTask;
use enigma::trainer::{StepReport, Trainer};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn table_arithmetic() -> Outcome {
    let rows = read_components_csv(File::open(root().join("data/table1_components.csv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mi_eff = [2.42, 6.44, 2.06, 6.50];
    let drop = [8.2, 8.2, 3.9, 3.9];
    let si = [0.715, 1.959, 0.582, 1.956];
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for (i, row) in rows.iter().enumerate() {
        let r = report_from_components(row, &SiWeights::default()).map_err(|e| e.to_string())?;
        worst.0 = worst.0.max((r.mi_effective - mi_eff[i]).abs());
        worst.1 = worst.1.max((r.perplexity_drop_pct - drop[i]).abs());
        worst.2 = worst.2.max((r.si - si[i]).abs());
    }
    check(
        rows.len() == 4 && worst.0 <= 0.01 && worst.1 <= 0.1 && worst.2 <= 0.01,
        format!(
            "{} rows; max |err| MI-eff {:.4}, ppl drop {:.3} pt, SI {:.4}",
            rows.len(),
            worst.0,
            worst.1,
            worst.2
        ),
    )
}

fn ot_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SinkhornOptions::default();
    let (mut worst_rel, mut worst_self) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let mut cloud = || -> Vec<Vec<f64>> { (0..n).map(|_| vec![rng.random(), rng.random()]).collect() };
        let a = EmpiricalMeasure::new(cloud(), false).map_err(|e| e.to_string())?;
        let b = EmpiricalMeasure::new(cloud(), false).map_err(|e| e.to_string())?;
        let exact = exact_w2_small(&a, &b).map_err(|e| e.to_string())?;
        let s = sinkhorn_divergence(&a, &b, 1e-3, &opts)
            .map_err(|e| e.to_string())?
            .value;
        worst_rel = worst_rel.max((s - exact).abs() / exact);
        let saa = sinkhorn_divergence(&a, &a, 1e-3, &opts)
            .map_err(|e| e.to_string())?
            .value;
        worst_self = worst_self.max(saa.abs());
    }
    check(
        worst_rel <= 0.01 && worst_self <= 1e-9,
        format!("50 instances; max rel err {worst_rel:.2e}, max S(a,a) {worst_self:.1e}"),
    )
}

fn mi_ceiling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..100_000 {
        let k = rng.random_range(1..=6);
        let n = rng.random_range(1..=4);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let mut row = || ContrastRow {
            positive: scale * rng.random_range(-1.0..1.0),
            shadows: (0..k).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
        };
        let rows: Vec<_> = (0..n).map(|_| row()).collect();
        let cols: Vec<_> = (0..n).map(|_| row()).collect();
        let b = clean_mi_bounds(&rows, &cols, &vec![true; n], k).map_err(|e| e.to_string())?;
        let cap = ((k + 1) as f64).ln();
        worst_excess = worst_excess.max(b.row_bound - cap).max(b.col_bound - cap);
    }
    let mut worst_flat = 0.0f64;
    for k in 1..=8 {
        let flat = vec![
            ContrastRow {
                positive: -1.7,
                shadows: vec![-1.7; k]
            };
            3
        ];
        let b = clean_mi_bounds(&flat, &flat, &[true, true, true], k).map_err(|e| e.to_string())?;
        worst_flat = worst_flat.max(b.row_bound.abs()).max(b.col_bound.abs());
    }
    check(
        worst_excess <= 1e-9 && worst_flat <= 1e-9,
        format!("1e5 draws; max bound - ln(K+1) = {worst_excess:.3e}; equal scores |bound| <= {worst_flat:.1e}"),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vocab = Vocab::new(16).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let h = 1e-5;
    for _ in 0..100 {
        let dim = rng.random_range(2..=6);
        let mut policy = ToyPolicy::zeros(vocab, dim, DecodeConfig::default());
        for x in &mut policy.params.data {
            *x = rng.random_range(-0.8..0.8);
        }
        let fill = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(5..16)).collect() };
        let prompt = fill(&mut rng, 3);
        let principle = fill(&mut rng, 2);
        let len = rng.random_range(1..=8);
        let completion: Vec<usize> = (0..len).map(|_| rng.random_range(0..16)).collect();
        let weights: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &ToyPolicy| -> f64 {
            let lp = p.logprobs(&prompt, &principle, &completion).expect("valid tokens");
            lp.iter().zip(&weights).map(|(l, w)| l * w).sum()
        };
        let trace = policy
            .trace(&prompt, &principle, &completion)
            .map_err(|e| e.to_string())?;
        let mut grad = Params::zeros(16, dim);
        policy.accumulate_grad(&trace, &completion, Some(&weights), None, &mut grad);
        let scale = grad.data.iter().fold(1e-8f64, |m, g| m.max(g.abs()));
        for k in 0..grad.len() {
            let mut plus = policy.clone();
            plus.params.data[k] += h;
            let mut minus = policy.clone();
            minus.params.data[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad.data[k].abs()).max(1e-3 * scale);
            worst = worst.max((fd - grad.data[k]).abs() / denom);
        }
    }
    check(worst <= 1e-4, format!("100 instances; max relative error {worst:.2e}"))
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    ProbVector::from_weights(&w).unwrap_or_else(|_| ProbVector::uniform(k).expect("k >= 1"))
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut fr_exact, mut worst_h, mut worst_js) = (true, 0.0f64, 0.0f64);
    for _ in 0..2000 {
        let k = rng.random_range(1..=12);
        let (p, q) = (random_simplex(&mut rng, k), random_simplex(&mut rng, k));
        let bc = bhattacharyya(&p, &q).map_err(|e| e.to_string())?;
        fr_exact &= fr_distance(&p, &q).map_err(|e| e.to_string())? == 2.0 * bc.acos();
        let r = probe_report(&p, &q).map_err(|e| e.to_string())?;
        worst_h = worst_h.max((r.hellinger * r.hellinger + bc - 1.0).abs());
        worst_js = worst_js.max(js_divergence(&p, &q).map_err(|e| e.to_string())? / std::f64::consts::LN_2);
    }
    let mut worst_frechet = 0.0f64;
    let g = |m: Vec<f64>, d: Vec<f64>| {
        GaussianSummary::new(DVector::from_vec(m), DMatrix::from_diagonal(&DVector::from_vec(d)))
    };
    let fixed = frechet_distance(
        &g(vec![0.0, 0.0], vec![1.0, 4.0]).map_err(|e| e.to_string())?,
        &g(vec![0.0, 0.0], vec![4.0, 1.0]).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    worst_frechet = worst_frechet.max((fixed - 2.0).abs());
    for _ in 0..500 {
        let d = rng.random_range(1..=6);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..5.0)).collect();
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
        let got = frechet_distance(
            &g(vec![0.0; d], a).map_err(|e| e.to_string())?,
            &g(vec![0.0; d], b).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        worst_frechet = worst_frechet.max((got - oracle).abs() / oracle.max(1.0));
    }
    let mut worst_dims = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=64);
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let e = effective_dims(&Spectrum::new(vec![c; n]).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst_dims = worst_dims
            .max((e.effrank - n as f64).abs())
            .max((e.participation_ratio - n as f64).abs());
    }
    check(
        fr_exact && worst_h <= 1e-12 && worst_js <= 1.0 && worst_frechet <= 1e-9 && worst_dims <= 1e-9,
        format!(
            "FR==2acos(BC) {fr_exact}; |H^2+BC-1| {worst_h:.1e}; max JS {worst_js:.4} bits; \
             Frechet diag err {worst_frechet:.1e} (fixed case {fixed:.12}); isotropic err {worst_dims:.1e}"
        ),
    )
}

fn run(cfg: &RunConfig) -> Result<Vec<StepReport>, String> {
    let set = enigma::constitution::PrincipleSet::from_path(&cfg.constitution).map_err(|e| e.to_string())?;
    let train = cfg.effective_train();
    let task: ToyTask = enigma::cli::task_for(&train, &set).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(train, task, cfg.seed, cfg.max_steps).map_err(|e| e.to_string())?;
    (0..cfg.max_steps)
        .map(|_| trainer.train_step().map_err(|e| e.to_string()))
        .collect()
}

fn signal_collapse() -> Outcome {
    use enigma::cli::Ablation;
    let base = RunConfig::load(&root().join("configs/grpo_cot_saturated.toml")).map_err(|e| e.to_string())?;
    let tail = |steps: &[StepReport]| steps[steps.len() - 20..].to_vec();
    let with = |ablation: Ablation, mi_only: bool| -> Result<Vec<StepReport>, String> {
        let mut cfg = base.clone();
        cfg.ablation = ablation;
        if mi_only {
            cfg.train.lambda_sami = 0.0;
            cfg.train.lambda_ot = 0.0;
            cfg.train.shaping_weight = 0.0;
        }
        Ok(tail(&run(&cfg)?))
    };
    let cot = with(Ablation::GrpoCot, false)?;
    let plus = with(Ablation::GrpoCotPlus, false)?;
    let tie = with(Ablation::Enigma, true)?;
    let format = cot.iter().map(|s| s.format_rate).sum::<f64>() / cot.len() as f64;
    let collapsed = cot.iter().all(|s| s.reward_std == 0.0 && s.grad_norm == 0.0);
    let alive = |xs: &[StepReport]| xs.iter().all(|s| s.reward_std > 0.0 && s.grad_norm > 0.0);
    let mean = |xs: &[StepReport], f: fn(&StepReport) -> f64| xs.iter().map(f).sum::<f64>() / xs.len() as f64;
    check(
        format > 0.99 && collapsed && alive(&plus) && alive(&tie),
        format!(
            "grpo_cot format {format:.3}, std/grad all zero: {collapsed}; \
             jitter std {:.3} grad {:.3}; tie-breaker std {:.4} grad {:.4}",
            mean(&plus, |s| s.reward_std),
            mean(&plus, |s| s.grad_norm),
            mean(&tie, |s| s.reward_std),
            mean(&tie, |s| s.grad_norm),
        ),
    )
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::load(&root().join("configs/enigma_high_si.toml")).map_err(|e| e.to_string())?;
    if cfg.max_steps != 2000 {
        return Err(format!("bundled config runs {} steps, expected 2000", cfg.max_steps));
    }
    let steps = run(&cfg)?;
    let start = steps[0].mi_row_clean;
    let end = steps[steps.len() - 20..].iter().map(|s| s.mi_row_clean).sum::<f64>() / 20.0;
    let ot_max = steps.iter().map(|s| s.loss_ot).fold(0.0, f64::max);
    check(
        start <= 0.01 && end > 0.05 && ot_max < 0.1,
        format!("row bound {start:+.4} at step 0 -> {end:.4} nats (last 20 mean); max OT term {ot_max:.5}"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = |dir: &str| {
        cmd_train(&TrainArgs {
            config: root().join("configs/enigma_high_si.toml"),
            output_dir: Some(tmp.path().join(dir)),
            max_steps: Some(200),
            quiet: true,
            ..Default::default()
        })
        .map_err(|e| e.to_string())
    };
    let a = std::fs::read(train("a")?.join("steps.jsonl")).map_err(|e| e.to_string())?;
    let b = std::fs::read(train("b")?.join("steps.jsonl")).map_err(|e| e.to_string())?;
    check(
        a == b && !a.is_empty(),
        format!("200 steps; {} bytes each, identical: {}", a.len(), a == b),
    )
}

fn si_ordering() -> Outcome {
    let reports = cmd_eval_constitution(&EvalArgs {
        constitutions: vec![
            root().join("data/constitutions/toy_high_si.yaml"),
            root().join("data/constitutions/toy_low_si.yaml"),
        ],
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (high, low) = (&reports[0], &reports[1]);
    check(
        high.si > low.si,
        format!(
            "{} SI {:.4} (neg margin {:.3}) > {} SI {:.4} (neg margin {:.3})",
            high.name, high.si, high.mi_diag_margin_neg, low.name, low.si, low.mi_diag_margin_neg
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 table arithmetic", table_arithmetic),
        ("2 OT oracle", ot_oracle),
        ("3 MI bound ceiling", mi_ceiling),
        ("4 gradients", gradients),
        ("5 geometry closed forms", geometry),
        ("6 ablation signal collapse", signal_collapse),
        ("7 end-to-end toy run", end_to_end),
        ("8 determinism", determinism),
        ("9 SI ordering", si_ordering),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail}  [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail}  [{secs:.1}s]");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
