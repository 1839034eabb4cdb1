use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use t2diff::data::{
    build_sequences, leave_one_out, load_split, parse_kuairand, parse_ml1m, persist_split, synthetic, DatasetSplit,
    InteractionLog, SessionRule,
};
use t2diff::diffusion::{rate_for_endpoint, NoiseSchedule, ScheduleKind};
use t2diff::experiment::{
    ablate, ablation_csv, ablation_summary, check_tiny_model, digest_bytes, digest_file, evaluate, load_run,
    popularity_baseline, run_dir, save_run, train, AblationAxis, EvalOptions, TrainConfig, GRADCHECK_TOLERANCE,
};
use t2diff::par::Parallelism;

#[derive(Parser)]
#[command(name = "t2diff", version, about = "Two-tower retrieval with a diffusion user tower")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw interaction log into a leave-one-out dataset file.
    PrepareData(PrepareArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Exact top-K evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Train and test every point of one ablation axis.
    Ablate(AblateArgs),
    /// Finite-difference check of every parameter of a tiny model.
    Gradcheck(GradcheckArgs),
    /// Print the noise schedule as CSV.
    DumpSchedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Ml1m,
    Kuairand,
    /// Seeded synthetic ring corpus; needs no input file.
    Ring,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    dataset: Dataset,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1800)]
    gap_seconds: i64,
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Seed of the synthetic corpus.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModeArgs {
    /// Run on one thread instead of the rayon pool.
    #[arg(long)]
    sequential: bool,
}

impl ModeArgs {
    fn mode(&self) -> Parallelism {
        if self.sequential {
            Parallelism::Sequential
        } else {
            Parallelism::Rayon
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "2,20")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exclude items the user already interacted with.
    #[arg(long)]
    filter_seen: bool,
    /// Evaluate the first N users only.
    #[arg(long, default_value_t = 0)]
    max_users: usize,
    /// Evaluate the validation targets instead of the test targets.
    #[arg(long)]
    validation: bool,
    /// Also report the popularity baseline.
    #[arg(long)]
    baseline: bool,
    /// Report path stem; defaults to `eval_report` beside the checkpoint.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// variant, schedule or steps.
    #[arg(long)]
    axis: String,
    /// Defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "2,20")]
    k: Vec<usize>,
    /// Users timed per grid point; 0 skips timing.
    #[arg(long, default_value_t = 0)]
    timing: usize,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per parameter; all when omitted.
    #[arg(long)]
    coords: Option<usize>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 1e-4)]
    a: f64,
    /// Growth rate; derived from `--beta-end` when omitted.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, short = 'T', default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "exp")]
    kind: String,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 input, 3 numerical, 4 format; errors from outside the library count as input errors.
fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<t2diff::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpSchedule(a) => dump_schedule(a),
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let input = || a.input.as_deref().context("--input is required for this dataset");
    let log: InteractionLog = match a.dataset {
        Dataset::Ml1m => parse_ml1m(input()?).with_context(|| format!("reading {}", input().unwrap().display()))?,
        Dataset::Kuairand => {
            parse_kuairand(input()?).with_context(|| format!("reading {}", input().unwrap().display()))?
        }
        Dataset::Ring => synthetic::ring_log(synthetic::RingLogConfig {
            seed: a.seed,
            ..Default::default()
        }),
    };
    let seqs = build_sequences(&log.interactions, a.max_len, a.min_count);
    let rule = SessionRule {
        gap_seconds: a.gap_seconds,
        k_max: a.k_max,
    };
    let split = leave_one_out(&seqs, log.user_count(), log.item_count(), rule);
    persist_split(&split, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} users / {} items / {} interactions",
        log.user_count(),
        log.item_count(),
        log.interactions.len()
    );
    println!(
        "{} sequences kept ({} excluded): {} train / {} validation / {} test examples",
        split.test.len(),
        split.excluded,
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    println!("digest {}", digest_file(&a.out)?);
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = TrainConfig::parse(&text)
        .with_context(|| format!("in {}", path.display()))?
        .with_overrides(|k| std::env::var(k).ok())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<DatasetSplit> {
    load_split(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let split = load_data(&a.data)?;
    for (k, v) in cfg.echo() {
        eprintln!("{k} = {v}");
    }
    let outcome = train(&split, &cfg, a.mode.mode())?;
    let dir = run_dir(&a.out, &cfg);
    let manifest = save_run(&dir, &cfg, &outcome, &digest_file(&a.data)?)?;
    println!("run {}", dir.display());
    println!(
        "variant {} | params {} (U-Net {}) | best epoch {} | {} steps",
        manifest.variant, manifest.param_count, manifest.unet_param_count, manifest.best_epoch, manifest.steps
    );
    if let Some((_, r)) = outcome.validation.iter().find(|(e, _)| *e == outcome.best_epoch) {
        println!("validation recall@20 {r:.5}");
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = load_data(&a.data)?;
    let (cfg, model, store) = load_run(&a.checkpoint, split.item_count as usize)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let examples = if a.validation { &split.validation } else { &split.test };
    let opts = EvalOptions {
        ks: a.k.clone(),
        seed: a.seed,
        filter_seen: a.filter_seen,
        max_users: a.max_users,
    };
    let mut report = evaluate(&model, &store, examples, &cfg.noise_schedule()?, &opts, a.mode.mode())?;
    report.config = cfg.echo().into_iter().collect();
    let similarity = a.checkpoint.with_file_name("similarity.csv");
    if similarity.exists() {
        report.similarity_trace = Some(similarity.display().to_string());
    }
    print!("{}", report.table());
    println!("users {} | {:.3} ms per user", report.users, report.per_sample_ms);
    if a.baseline {
        let n = if a.max_users == 0 { examples.len() } else { a.max_users.min(examples.len()) };
        let pop = popularity_baseline(&split, &examples[..n], &a.k, a.filter_seen)?;
        println!("popularity baseline");
        print!("{}", pop.table());
    }
    let stem = a.report.unwrap_or_else(|| a.checkpoint.with_file_name("eval_report"));
    fs::write(stem.with_extension("json"), report.to_json())?;
    fs::write(stem.with_extension("csv"), report.to_csv())?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config, None)?;
    let axis: AblationAxis = a.axis.parse()?;
    let split = load_data(&a.data)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let rows = ablate(&split, &cfg, axis, &seeds, &a.k, a.timing, a.mode.mode())?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("ablation_{}.csv", axis.name()));
    let csv = ablation_csv(&rows);
    fs::write(&path, &csv)?;
    print!("{}", ablation_summary(&rows));
    println!("{} rows -> {} (digest {})", rows.len(), path.display(), &digest_bytes(csv.as_bytes())[..16]);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = check_tiny_model(a.seed, a.coords)?;
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        println!("PASS max_rel_err={:.3e} checked={}", report.max_rel_err, report.checked);
        Ok(())
    } else {
        println!("FAIL max_rel_err={:.3e} checked={}", report.max_rel_err, report.checked);
        Err(t2diff::Error::Backward(format!(
            "relative error {:.3e} >= {GRADCHECK_TOLERANCE:e}, worst {:?}",
            report.max_rel_err, report.worst
        )))?
    }
}

fn dump_schedule(a: ScheduleArgs) -> Result<()> {
    let kind: ScheduleKind = a.kind.parse()?;
    if a.steps == 0 {
        bail!(t2diff::Error::Config("steps must be positive".into()));
    }
    let b = a.b.unwrap_or_else(|| rate_for_endpoint(a.a, a.beta_end, a.steps));
    let csv = NoiseSchedule::new(kind, a.a, b, a.steps)?.to_csv();
    match a.out {
        Some(path) => fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}
