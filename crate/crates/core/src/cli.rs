//! Run configuration, command implementations and on-disk formats.
//!
//! The `enigma` binary is a thin clap front end over [`cmd_train`],
//! [`cmd_eval_constitution`] and [`cmd_probe`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constitution::{
    attach_zscored, evaluate_external, evaluate_principle_set, fit_world_model, read_components_csv, read_nll_csv,
    report_from_components, sample_items, PrincipleSet, SiWeights, SufficiencyReport, WorldModelConfig,
};
use crate::error::{Error, Result};
use crate::mi::{diag_mi, ScoreMatrix};
use crate::policy::ToyPolicy;
use crate::prob_metrics::{
    fr_path_stats, landscape_grid, linspace, probe_report, turning_angles, AlignedDecodes, LandscapeMetric, ProbVector,
    ProbePath, ProbeReport,
};
use crate::task::ToyTask;
use crate::trainer::{Checkpoint, StepReport, TrainConfig, Trainer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Enigma,
    /// Format reward only: no MI channel, no auxiliary, no OT.
    GrpoCot,
    /// `GrpoCot` plus zero-mean Gaussian jitter on the base reward.
    GrpoCotPlus,
}

/// Jitter used by `grpo_cot_plus` when the config leaves it at zero.
pub const DEFAULT_JITTER_SIGMA: f64 = 0.5;

impl Ablation {
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        if self != Ablation::Enigma {
            out.lambda_sami = 0.0;
            out.shaping_weight = 0.0;
            out.lambda_ot = 0.0;
            out.channel_weight = 0.0;
        }
        match self {
            Ablation::GrpoCotPlus if out.jitter_sigma == 0.0 => out.jitter_sigma = DEFAULT_JITTER_SIGMA,
            Ablation::GrpoCot => out.jitter_sigma = 0.0,
            _ => {}
        }
        out
    }
}

/// Keys that live at run level; everything else belongs to [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    schema_version: u32,
    seed: u64,
    max_steps: usize,
    #[serde(default = "default_checkpoint_every")]
    checkpoint_every: usize,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    constitution: PathBuf,
    #[serde(default)]
    ablation: Ablation,
}

const RUN_KEYS: [&str; 7] = [
    "schema_version",
    "seed",
    "max_steps",
    "checkpoint_every",
    "output_dir",
    "constitution",
    "ablation",
];

fn default_checkpoint_every() -> usize {
    500
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/run")
}

/// Flat TOML run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Relative paths are resolved against the config file's directory.
    pub constitution: PathBuf,
    pub ablation: Ablation,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(seed: u64, max_steps: usize, constitution: PathBuf) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            max_steps,
            checkpoint_every: default_checkpoint_every(),
            output_dir: default_output_dir(),
            constitution,
            ablation: Ablation::Enigma,
            train: TrainConfig::default(),
        }
    }

    pub fn parse(src: &str) -> Result<Self> {
        let cfg_err = |e: toml::de::Error| Error::Config(e.to_string());
        let mut table: toml::Table = src.parse().map_err(cfg_err)?;
        let mut run = toml::Table::new();
        for key in RUN_KEYS {
            if let Some(v) = table.remove(key) {
                run.insert(key.to_string(), v);
            }
        }
        let run: RunSection = run.try_into().map_err(cfg_err)?;
        let train: TrainConfig = table.try_into().map_err(cfg_err)?;
        if run.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                run.schema_version
            )));
        }
        let cfg = Self {
            schema_version: run.schema_version,
            seed: run.seed,
            max_steps: run.max_steps,
            checkpoint_every: run.checkpoint_every,
            output_dir: run.output_dir,
            constitution: run.constitution,
            ablation: run.ablation,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        let run = RunSection {
            schema_version: self.schema_version,
            seed: self.seed,
            max_steps: self.max_steps,
            checkpoint_every: self.checkpoint_every,
            output_dir: self.output_dir.clone(),
            constitution: self.constitution.clone(),
            ablation: self.ablation,
        };
        let ser = |e: toml::ser::Error| Error::Config(e.to_string());
        Ok(format!(
            "{}{}",
            toml::to_string(&run).map_err(ser)?,
            toml::to_string(&self.train).map_err(ser)?
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&src)?;
        if cfg.constitution.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.constitution = dir.join(&cfg.constitution);
            }
        }
        Ok(cfg)
    }

    /// Training settings after the ablation switches are applied.
    pub fn effective_train(&self) -> TrainConfig {
        self.ablation.apply(&self.train)
    }
}

/// The pieces of a run that determine its trajectory.
#[derive(Serialize)]
struct Fingerprint<'a> {
    seed: u64,
    max_steps: usize,
    ablation: Ablation,
    train: &'a TrainConfig,
    principles: &'a [Vec<usize>],
}

pub fn config_hash(cfg: &RunConfig, principles: &[Vec<usize>]) -> Result<String> {
    let train = cfg.effective_train();
    let fp = Fingerprint {
        seed: cfg.seed,
        max_steps: cfg.max_steps,
        ablation: cfg.ablation,
        train: &train,
        principles,
    };
    Ok(Sha256::digest(serde_json::to_vec(&fp)?)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Task whose principle pool is the constitution's positives.
pub fn task_for(cfg: &TrainConfig, set: &PrincipleSet) -> Result<ToyTask> {
    let vocab = cfg.vocab()?;
    let principles = set
        .positives
        .iter()
        .map(|p| p.tokens(&vocab))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Config(format!("constitution {}: {e}", set.name)))?;
    ToyTask::new(vocab, principles, cfg.prompt_len, cfg.principle_bias)
}

fn load_constitution(path: &Path) -> Result<PrincipleSet> {
    match PrincipleSet::from_path(path) {
        Err(Error::Io { path, source }) => Err(Error::Config(format!(
            "cannot read constitution {}: {source}",
            path.display()
        ))),
        other => other,
    }
}

/// On-disk checkpoint: trainer snapshot plus the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub config_hash: String,
    #[serde(flatten)]
    pub checkpoint: Checkpoint,
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Write via a temporary file and rename, so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_at(&tmp))?;
        f.write_all(bytes).map_err(io_at(&tmp))?;
        f.sync_all().map_err(io_at(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_at(path))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.json"))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let f = File::open(path).map_err(io_at(path))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointEntry {
    pub step: usize,
    pub path: String,
    pub params_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub reference_hash: String,
    pub steps_completed: usize,
    pub last: Option<StepReport>,
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Run configuration (flat TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's ablation mode.
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    /// Override the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Override the config's step budget.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// Train a toy policy and write `steps.jsonl`, checkpoints and `summary.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = args.max_steps {
        cfg.max_steps = n;
    }
    cfg.validate()?;
    let set = load_constitution(&cfg.constitution)?;
    // the echoed config must stay loadable from inside the run directory
    cfg.constitution = fs::canonicalize(&cfg.constitution).map_err(io_at(&cfg.constitution))?;
    let train_cfg = cfg.effective_train();
    let task = task_for(&train_cfg, &set)?;
    let hash = config_hash(&cfg, &task.principles)?;
    run_training(&cfg, train_cfg, task, &hash, args.quiet)
}

fn run_training(cfg: &RunConfig, train_cfg: TrainConfig, task: ToyTask, hash: &str, quiet: bool) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    let mut trainer = Trainer::new(train_cfg, task, cfg.seed, cfg.max_steps)?;
    fs::create_dir_all(dir.join("checkpoints")).map_err(io_at(&dir))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let steps_path = dir.join("steps.jsonl");
    let mut steps = BufWriter::new(File::create(&steps_path).map_err(io_at(&steps_path))?);
    let ts_path = dir.join("timestamps.jsonl");
    let mut stamps = BufWriter::new(File::create(&ts_path).map_err(io_at(&ts_path))?);
    let started = Instant::now();
    let mut checkpoints = Vec::new();
    let save = |trainer: &Trainer, checkpoints: &mut Vec<CheckpointEntry>| -> Result<()> {
        let ck = CheckpointFile {
            config_hash: hash.to_string(),
            checkpoint: trainer.checkpoint(),
        };
        let path = checkpoint_path(&dir, trainer.step);
        write_atomic(&path, &serde_json::to_vec(&ck)?)?;
        checkpoints.push(CheckpointEntry {
            step: trainer.step,
            path: path.strip_prefix(&dir).unwrap_or(&path).display().to_string(),
            params_hash: ck.checkpoint.params_hash,
        });
        Ok(())
    };
    save(&trainer, &mut checkpoints)?;
    let mut last = None;
    for _ in 0..cfg.max_steps {
        let report = trainer.train_step()?;
        serde_json::to_writer(&mut steps, &report)?;
        steps.write_all(b"\n").map_err(io_at(&steps_path))?;
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis());
        writeln!(
            stamps,
            "{{\"step\":{},\"unix_ms\":{wall},\"elapsed_ms\":{}}}",
            report.step,
            started.elapsed().as_millis()
        )
        .map_err(io_at(&ts_path))?;
        if !quiet && (report.step % 100 == 0 || trainer.step == cfg.max_steps) {
            eprintln!(
                "step {:>5}  reward {:.3}  mi_row {:+.4}  ot {:.5}  grad {:.4}",
                report.step, report.reward_total_mean, report.mi_row_clean, report.loss_ot, report.grad_norm
            );
        }
        last = Some(report);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 || trainer.step == cfg.max_steps {
            steps.flush().map_err(io_at(&steps_path))?;
            save(&trainer, &mut checkpoints)?;
        }
    }
    steps.flush().map_err(io_at(&steps_path))?;
    stamps.flush().map_err(io_at(&ts_path))?;
    checkpoints.dedup_by_key(|c| c.step);

    let config: toml::Table = cfg
        .to_toml()?
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let summary = RunSummary {
        config: serde_json::to_value(config)?,
        config_hash: hash.to_string(),
        reference_hash: trainer.reference().params.hash(),
        steps_completed: trainer.step,
        last,
        checkpoints,
    };
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(dir)
}

/// Read a `steps.jsonl` file back.
pub fn read_steps(path: &Path) -> Result<Vec<StepReport>> {
    let src = fs::read_to_string(path).map_err(io_at(path))?;
    src.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Constitution files; two or more also get cohort z-scored SI.
    pub constitutions: Vec<PathBuf>,
    /// Replay pre-aggregated components (label,bits,auc,margin_pos,margin_neg,lb_pos_bits,lb_neg_bits).
    #[arg(long)]
    pub components: Option<PathBuf>,
    /// External per-item NLL export (principle,item,nll_without_bits,nll_with_bits).
    #[arg(long, requires_all = ["pos_scores", "neg_scores"])]
    pub external_nll: Option<PathBuf>,
    /// External positive score matrix (row i pairs with column i mod M).
    #[arg(long)]
    pub pos_scores: Option<PathBuf>,
    /// External negative score matrix (row i pairs with column i mod M).
    #[arg(long)]
    pub neg_scores: Option<PathBuf>,
    /// Shadow principles per row for the bounds.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Gold items sampled per positive principle.
    #[arg(long, default_value_t = 64)]
    pub per_positive: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `<name>.report.json` and `<name>.principles.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        Self {
            constitutions: Vec::new(),
            components: None,
            external_nll: None,
            pos_scores: None,
            neg_scores: None,
            k: 2,
            per_positive: 64,
            seed: 0,
            out: None,
        }
    }
}

/// Score principle sets and return one report per set.
pub fn cmd_eval_constitution(args: &EvalArgs) -> Result<Vec<SufficiencyReport>> {
    let weights = SiWeights::default();
    let mut reports = Vec::new();
    if let Some(path) = &args.components {
        let f = File::open(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for row in read_components_csv(f)? {
            reports.push(report_from_components(&row, &weights)?);
        }
    } else if let Some(nll_path) = &args.external_nll {
        let [set_path] = args.constitutions.as_slice() else {
            return Err(Error::Config("external scores need exactly one constitution".into()));
        };
        let set = load_constitution(set_path)?;
        let nll = read_nll_csv(File::open(nll_path).map_err(io_at(nll_path))?)?;
        let read_matrix = |p: &Option<PathBuf>| -> Result<ScoreMatrix> {
            let p = p
                .as_ref()
                .ok_or_else(|| Error::Config("missing score matrix path".into()))?;
            let f = File::open(p).map_err(io_at(p))?;
            ScoreMatrix::read_csv(std::io::BufReader::new(f), &p.display().to_string())
        };
        let pos = read_matrix(&args.pos_scores)?;
        let neg = read_matrix(&args.neg_scores)?;
        reports.push(evaluate_external(&set, &nll, &pos, &neg, args.k, &weights, args.seed)?);
    } else {
        if args.constitutions.is_empty() {
            return Err(Error::Config("no constitution files given".into()));
        }
        let sets = args
            .constitutions
            .iter()
            .map(|p| load_constitution(p))
            .collect::<Result<Vec<_>>>()?;
        let defaults = TrainConfig::default();
        let probe_task = ToyTask::new(
            defaults.vocab()?,
            vec![Vec::new()],
            defaults.prompt_len,
            defaults.principle_bias,
        )?;
        let world = fit_world_model(&probe_task, &WorldModelConfig::default(), args.seed)?;
        for set in &sets {
            let items = sample_items(&probe_task, set, args.per_positive, args.seed.wrapping_add(1))?;
            reports.push(evaluate_principle_set(
                &world,
                &probe_task.vocab,
                &items,
                set,
                args.k,
                &weights,
                args.seed.wrapping_add(2),
            )?);
        }
    }
    if reports.len() >= 2 {
        attach_zscored(&mut reports)?;
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(io_at(out))?;
        for r in &reports {
            let stem = r.name.replace(['/', '\\', ' '], "_");
            write_atomic(&out.join(format!("{stem}.report.json")), &serde_json::to_vec_pretty(r)?)?;
            if !r.principles.is_empty() {
                let mut buf = Vec::new();
                r.write_principles_csv(&mut buf)?;
                write_atomic(&out.join(format!("{stem}.principles.csv")), &buf)?;
            }
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    /// Run directory written by `train` (uses its config.toml and checkpoints/).
    #[arg(long, conflicts_with = "config")]
    pub run_dir: Option<PathBuf>,
    /// Run configuration, when checkpoints are given explicitly.
    #[arg(long, requires = "checkpoint")]
    pub config: Option<PathBuf>,
    /// Checkpoint files, in path order.
    #[arg(long = "checkpoint")]
    pub checkpoint: Vec<PathBuf>,
    /// Probe items (cycled over the constitution's principles).
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Landscape grid resolution per axis.
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    /// Only emit the probe table.
    #[arg(long)]
    pub no_path: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (defaults to `<run-dir>/probe`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for ProbeArgs {
    fn default() -> Self {
        Self {
            run_dir: None,
            config: None,
            checkpoint: Vec::new(),
            samples: 16,
            grid: 11,
            no_path: false,
            seed: 0,
            out: None,
        }
    }
}

struct ProbeItem {
    prompt: Vec<usize>,
    principle: usize,
    gold: Vec<usize>,
}

/// Next-token distribution after the reasoning-open tag, where principles act.
fn probe_distribution(policy: &ToyPolicy, task: &ToyTask, item: &ProbeItem) -> Result<ProbVector> {
    let tr = policy.trace(&item.prompt, &task.principles[item.principle], &item.gold)?;
    tr.distribution(1)
}

/// Write plot-ready probe CSVs; returns the output directory.
pub fn cmd_probe(args: &ProbeArgs) -> Result<PathBuf> {
    let (config_path, mut ck_paths, default_out) = match (&args.run_dir, &args.config) {
        (Some(run), _) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(run.join("checkpoints"))
                .map_err(|e| Error::Config(format!("cannot list checkpoints in {}: {e}", run.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            (run.join("config.toml"), paths, run.join("probe"))
        }
        (None, Some(cfg)) => (cfg.clone(), args.checkpoint.clone(), PathBuf::from("probe")),
        (None, None) => return Err(Error::Config("give --run-dir or --config with --checkpoint".into())),
    };
    if args.run_dir.is_some() && !args.checkpoint.is_empty() {
        ck_paths = args.checkpoint.clone();
    }
    if ck_paths.is_empty() {
        return Err(Error::Config("no checkpoints to probe".into()));
    }
    if !args.no_path && ck_paths.len() < 2 {
        return Err(Error::Config(
            "path statistics need at least 2 checkpoints (or pass --no-path)".into(),
        ));
    }
    let cfg = RunConfig::load(&config_path)?;
    let set = load_constitution(&cfg.constitution)?;
    let train_cfg = cfg.effective_train();
    let task = task_for(&train_cfg, &set)?;
    let hash = config_hash(&cfg, &task.principles)?;
    let trainer = Trainer::new(train_cfg, task.clone(), cfg.seed, cfg.max_steps)?;
    let reference = trainer.reference();
    let ref_hash = reference.params.hash();

    let mut policies = Vec::with_capacity(ck_paths.len());
    let mut steps = Vec::with_capacity(ck_paths.len());
    for p in &ck_paths {
        let ck = read_checkpoint(p)?;
        if ck.config_hash != hash {
            return Err(Error::Config(format!(
                "{}: checkpoint was written under a different config",
                p.display()
            )));
        }
        if ck.checkpoint.reference_hash != ref_hash {
            return Err(Error::Config(format!(
                "{}: reference policy hash mismatch",
                p.display()
            )));
        }
        crate::policy::verify_hash(&ck.checkpoint.params, &ck.checkpoint.params_hash)?;
        let mut pol = reference.clone();
        pol.params = ck.checkpoint.params;
        steps.push(ck.checkpoint.step);
        policies.push(pol);
    }

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed);
    let items: Vec<ProbeItem> = (0..args.samples.max(1))
        .map(|i| {
            let principle = i % task.principles.len();
            ProbeItem {
                prompt: task.sample_prompt(&mut rng),
                principle,
                gold: task.gold(Some(principle), &mut rng),
            }
        })
        .collect();

    let out = args.out.clone().unwrap_or(default_out);
    fs::create_dir_all(&out).map_err(io_at(&out))?;
    let ref_dists = items
        .iter()
        .map(|it| probe_distribution(reference, &task, it))
        .collect::<Result<Vec<_>>>()?;
    // pooled (item-averaged) distribution per checkpoint
    let mut pooled = Vec::with_capacity(policies.len());
    let mut table = Vec::with_capacity(policies.len());
    for pol in &policies {
        let dists = items
            .iter()
            .map(|it| probe_distribution(pol, &task, it))
            .collect::<Result<Vec<_>>>()?;
        let reports = dists
            .iter()
            .zip(&ref_dists)
            .map(|(p, q)| probe_report(p, q))
            .collect::<Result<Vec<_>>>()?;
        table.push(mean_report(&reports));
        let k = dists[0].support_size();
        let avg: Vec<f64> = (0..k)
            .map(|j| dists.iter().map(|d| d.probs()[j]).sum::<f64>() / dists.len() as f64)
            .collect();
        pooled.push(ProbVector::from_weights(&avg)?);
    }
    write_probe_table(&out.join("probe_report.csv"), &steps, &table)?;
    if args.no_path {
        return Ok(out);
    }

    let labels: Vec<u64> = steps.iter().map(|s| *s as u64).collect();
    let path = ProbePath::new(pooled.clone(), labels)?;
    let stats = fr_path_stats(&path)?;
    let mut w = csv::Writer::from_path(out.join("fr_path.csv"))?;
    w.write_record(["segment", "from_step", "to_step", "length", "cumulative"])?;
    let mut cum = 0.0;
    for (i, len) in stats.segment_lengths.iter().enumerate() {
        cum += len;
        w.write_record([
            i.to_string(),
            steps[i].to_string(),
            steps[i + 1].to_string(),
            format!("{len:?}"),
            format!("{cum:?}"),
        ])?;
    }
    w.flush().map_err(io_at(&out))?;
    let mut w = csv::Writer::from_path(out.join("fr_path_summary.csv"))?;
    w.write_record(["cumulative_length", "endpoint_geodesic", "ratio", "degenerate"])?;
    w.write_record([
        format!("{:?}", stats.cumulative_length),
        format!("{:?}", stats.endpoint_geodesic),
        format!("{:?}", stats.ratio),
        stats.degenerate.to_string(),
    ])?;
    w.flush().map_err(io_at(&out))?;
    if pooled.len() >= 3 {
        let angles = turning_angles(&path)?;
        let mut w = csv::Writer::from_path(out.join("turning_angles.csv"))?;
        w.write_record(["at_step", "angle"])?;
        for (i, a) in angles.iter().enumerate() {
            w.write_record([steps[i + 1].to_string(), format!("{a:?}")])?;
        }
        w.flush().map_err(io_at(&out))?;
    }

    // aligned decodes of the final checkpoint: completion i under principle j
    let last = policies.last().expect("non-empty");
    let n_p = task.principles.len();
    let aligned_items: Vec<&ProbeItem> = items.iter().take(n_p).collect();
    let mut cells = Vec::with_capacity(aligned_items.len());
    for it in &aligned_items {
        let mut row = Vec::with_capacity(aligned_items.len());
        for other in &aligned_items {
            let tr = last.trace(&it.prompt, &task.principles[other.principle], &it.gold)?;
            let cell = (0..it.gold.len())
                .map(|t| Ok((tr.distribution(t)?, it.gold[t])))
                .collect::<Result<Vec<_>>>()?;
            row.push(cell);
        }
        cells.push(row);
    }
    let decodes = AlignedDecodes { cells };
    let scores = decodes.score_matrix(1.0, 0.0)?;
    let mut buf = Vec::new();
    scores.write_csv(&mut buf)?;
    write_atomic(&out.join("aligned_scores.csv"), &buf)?;
    let mut w = csv::Writer::from_path(out.join("diag_hist.csv"))?;
    w.write_record(["row", "diag_log_softmax"])?;
    for i in 0..scores.nrows() {
        let ls = crate::mi::log_softmax(scores.row(i));
        w.write_record([i.to_string(), format!("{:?}", ls[i])])?;
    }
    w.flush().map_err(io_at(&out))?;

    let n = args.grid.max(1);
    let alphas = linspace(0.5, 1.5, n);
    let betas = linspace(0.0, 0.5, n);
    let base = pooled.last().expect("non-empty");
    let mut buf = Vec::new();
    landscape_grid(base, &alphas, &betas, &LandscapeMetric::Fr)?.write_csv(&mut buf)?;
    write_atomic(&out.join("landscape_fr.csv"), &buf)?;
    if scores.is_square() && scores.nrows() >= 2 {
        let mut buf = Vec::new();
        landscape_grid(base, &alphas, &betas, &LandscapeMetric::DiagMi(&decodes))?.write_csv(&mut buf)?;
        write_atomic(&out.join("landscape_diag_mi.csv"), &buf)?;
        let _ = diag_mi(&scores)?;
    }
    Ok(out)
}

fn mean_report(reports: &[ProbeReport]) -> ProbeReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&ProbeReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    ProbeReport {
        bc: avg(|r| r.bc),
        bhat_angle: avg(|r| r.bhat_angle),
        bhat_distance: avg(|r| r.bhat_distance),
        hellinger: avg(|r| r.hellinger),
        js_nats: avg(|r| r.js_nats),
        js_bits: avg(|r| r.js_bits),
        fr_distance: avg(|r| r.fr_distance),
    }
}

fn write_probe_table(path: &Path, steps: &[usize], table: &[ProbeReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "bc",
        "bhat_angle",
        "bhat_distance",
        "hellinger",
        "js_nats",
        "js_bits",
        "fr_distance",
    ])?;
    for (s, r) in steps.iter().zip(table) {
        w.write_record(
            std::iter::once(s.to_string()).chain(
                [
                    r.bc,
                    r.bhat_angle,
                    r.bhat_distance,
                    r.hellinger,
                    r.js_nats,
                    r.js_bits,
                    r.fr_distance,
                ]
                .iter()
                .map(|v| format!("{v:?}")),
            ),
        )?;
    }
    w.flush().map_err(io_at(path))?;
    Ok(())
}

/// Exit code for a command result: 0 ok, 2 bad configuration or input schema, 1 otherwise.
pub fn exit_code<T>(result: &Result<T>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_config_error() => 2,
        Err(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\nseed = 3\nmax_steps = 10\nconstitution = \"c.yaml\"\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.checkpoint_every, 500);
        assert_eq!(cfg.ablation, Ablation::Enigma);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = RunConfig::parse(&format!("{MINIMAL}lr = 0.1\nablation = \"grpo_cot_plus\"\n")).unwrap();
        cfg.train.lambda_sami = 1.0;
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_errors() {
        for bad in [
            format!("{MINIMAL}lr_typo = 1.0\n"),
            MINIMAL.replace("seed = 3\n", ""),
            MINIMAL.replace("schema_version = 1", "schema_version = 9"),
            format!("{MINIMAL}ablation = \"sft\"\n"),
            format!("{MINIMAL}group_size = 1\n"),
        ] {
            let err = RunConfig::parse(&bad).unwrap_err();
            assert!(err.is_config_error(), "{bad}: {err}");
        }
    }

    #[test]
    fn ablations_switch_channels() {
        let base = TrainConfig::default();
        let cot = Ablation::GrpoCot.apply(&base);
        assert_eq!(
            (cot.lambda_sami, cot.lambda_ot, cot.channel_weight, cot.jitter_sigma),
            (0.0, 0.0, 0.0, 0.0)
        );
        let plus = Ablation::GrpoCotPlus.apply(&base);
        assert_eq!(plus.channel_weight, 0.0);
        assert_eq!(plus.jitter_sigma, DEFAULT_JITTER_SIGMA);
        assert_eq!(Ablation::Enigma.apply(&base), base);
    }
}
