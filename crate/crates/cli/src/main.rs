mod gradcheck;
mod run;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use symlora::adapters::{AdapterKind, DEFAULT_INIT_STD};
use symlora::analysis::{compare_runs, norm_report, ArmResults, NormKind, NormReportFile};
use symlora::model::TinyTransformerConfig;
use symlora::numerics::ParamId;
use symlora::store::{AdapterCheckpoint, CheckpointKind};
use symlora::tasks::{SequenceTaskKind, DEFAULT_NOISE_STD, DEFAULT_PLANTED_DIM, DEFAULT_PLANTED_RANK};
use symlora::training::{bernoulli_interval, confidence_interval, TrainConfig};

use run::{Host, PretrainSpec, RunSpec, Task, TaskSpec};

#[derive(Parser)]
#[command(name = "symlora", version, about = "Train, inspect and swap low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one adapter set and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate checkpoints on the task they were trained for.
    Eval(EvalArgs),
    /// Write the dense merged weights of a checkpoint.
    Merge(MergeArgs),
    /// Write per-matrix norm reports.
    Norms(NormsArgs),
    /// Tabulate two stats files side by side.
    Compare(CompareArgs),
    /// Check tape gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Load one checkpoint, then replace it with another on the same base.
    Swap(SwapArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskName {
    PlantedSym,
    PlantedAsym,
    Parity,
    Majority,
    FirstTokenCopy,
}

impl TaskName {
    fn sequence_kind(self) -> Option<SequenceTaskKind> {
        match self {
            Self::Parity => Some(SequenceTaskKind::Parity),
            Self::Majority => Some(SequenceTaskKind::Majority),
            Self::FirstTokenCopy => Some(SequenceTaskKind::FirstTokenCopy),
            Self::PlantedSym | Self::PlantedAsym => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: TaskName,
    /// `lora` or `symlora`.
    #[arg(long)]
    adapter: AdapterKind,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = DEFAULT_INIT_STD)]
    init_std: f64,
    /// Record symmetry and rank diagnostics at each logged step.
    #[arg(long)]
    check_invariants: bool,
    /// Seed of the task data (and of the planted target).
    #[arg(long, default_value_t = 0)]
    task_seed: u64,

    /// Planted task: layer dimension.
    #[arg(long, default_value_t = DEFAULT_PLANTED_DIM)]
    dim: usize,
    /// Planted task: rank of the planted update.
    #[arg(long, default_value_t = DEFAULT_PLANTED_RANK)]
    planted_rank: usize,
    /// Planted task: label noise std.
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    noise: f64,

    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Share one λ per attention block.
    #[arg(long)]
    tie_lambda: bool,
    /// Pretrain the base on this task before adapting (0 steps disables).
    #[arg(long, value_enum, default_value = "majority")]
    pretrain_task: TaskName,
    #[arg(long, default_value_t = 200)]
    pretrain_steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pretrain_lr: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    /// Write per-task score summaries for `compare`.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormChoice {
    Frobenius,
    AbsSum,
    Both,
}

#[derive(Args)]
struct NormsArgs {
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "frobenius")]
    kind: NormChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Two stats files written by `eval --stats-out`, one per adapter kind.
    #[arg(num_args = 2, required = true)]
    stats: Vec<PathBuf>,
    /// Use sqrt(p(1-p)) instead of p(1-p) for single-run accuracy intervals.
    #[arg(long)]
    bernoulli_sqrt: bool,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random layers per adapter kind.
    #[arg(long, default_value_t = 50)]
    cases: usize,
}

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    to: PathBuf,
}

/// Scores of one adapter kind, keyed by task id.
#[derive(Debug, Default, Serialize, Deserialize)]
struct StatsFile {
    adapter: Option<AdapterKind>,
    tasks: BTreeMap<String, TaskScores>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskScores {
    metric: String,
    /// Evaluation-set size, used for intervals on a single accuracy.
    eval_size: Option<usize>,
    scores: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Norms(a) => cmd_norms(a),
        Command::Compare(a) => cmd_compare(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Swap(a) => cmd_swap(a),
    }
}

fn run_spec(a: &TrainArgs) -> Result<RunSpec> {
    let train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        optimizer: run::optimizer(&a.optimizer)?,
        seed: a.seed,
        eval_every: a.eval_every,
        weight_decay: a.weight_decay,
        check_invariants: a.check_invariants,
    };
    let (task, model, pretrain) = match a.task.sequence_kind() {
        None => (
            TaskSpec::Planted {
                symmetric: matches!(a.task, TaskName::PlantedSym),
                dim: a.dim,
                rank: a.planted_rank,
                noise_std: a.noise,
                seed: a.task_seed,
            },
            None,
            None,
        ),
        Some(kind) => {
            let m = &a.model;
            let model = TinyTransformerConfig {
                vocab_size: m.vocab,
                d_model: m.d_model,
                n_heads: m.heads,
                n_layers: m.layers,
                max_seq_len: m.seq_len,
                n_classes: 2,
                d_ff: 2 * m.d_model,
                seed: m.model_seed,
            };
            let pretrain = match m.pretrain_task.sequence_kind() {
                Some(task) if m.pretrain_steps > 0 => Some(PretrainSpec {
                    task,
                    steps: m.pretrain_steps,
                    learning_rate: m.pretrain_lr,
                    seed: m.model_seed.wrapping_add(1),
                }),
                Some(_) => None,
                None => bail!("--pretrain-task must be a sequence task"),
            };
            let task = TaskSpec::Sequence {
                kind,
                vocab_size: m.vocab,
                seq_len: m.seq_len,
                n_classes: 2,
                seed: a.task_seed,
            };
            (task, Some(model), pretrain)
        }
    };
    Ok(RunSpec {
        task,
        model,
        pretrain,
        adapter: a.adapter,
        rank: a.rank,
        alpha: a.alpha.unwrap_or(a.rank as f64),
        init_std: a.init_std,
        tie_lambda: a.model.tie_lambda,
        train,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let spec = run_spec(&a)?;
    let task = spec.task.build()?;
    let mut host = spec.base(&task)?;
    spec.attach(&mut host)?;
    let result = run::train_host(&mut host, &task, &spec.train)?;
    if let Some(log) = &a.log {
        result.write_log(log).with_context(|| format!("writing {}", log.display()))?;
    }
    let ckpt = run::capture(&host, spec.metadata()?)?;
    ckpt.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} {} r={} steps={} {}: {:.6e} -> {:.6e} ({:.1}s)",
        spec.task.id(),
        spec.adapter.as_str(),
        spec.rank,
        spec.train.steps,
        run::metric_name(&task),
        result.initial_metric,
        result.final_metric,
        result.wall_clock_seconds
    );
    println!("wrote {} ({} payload values)", a.out.display(), ckpt.payload_len());
    Ok(())
}

fn read_ckpt(path: &Path) -> Result<AdapterCheckpoint> {
    AdapterCheckpoint::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Metric of a merged checkpoint: its dense weights replace the base's.
fn evaluate_merged(ckpt: &AdapterCheckpoint) -> Result<(RunSpec, Task, f64)> {
    let spec = RunSpec::from_metadata(&ckpt.metadata)?;
    let task = spec.task.build()?;
    let mut host = spec.base(&task)?;
    let actual = match &host {
        Host::Layer(l) => symlora::store::AdapterHost::<f64>::base_fingerprint(l),
        Host::Model(m) => m.base_fingerprint(),
    };
    ensure!(
        actual == ckpt.base_fingerprint,
        "base fingerprint mismatch: expected {:016x}, got {actual:016x}",
        ckpt.base_fingerprint
    );
    let metric = match (&mut host, &task) {
        (Host::Layer(_), Task::Planted(t)) => {
            let w = &ckpt.dense.first().context("merged checkpoint is empty")?.value;
            t.population_mse(w)?
        }
        (Host::Model(m), Task::Sequence(_)) => {
            for t in &ckpt.dense {
                m.set_named_tensor(&ParamId::from(t.name.as_str()), t.value.clone())?;
            }
            run::evaluate(&host, &task)?
        }
        _ => bail!("task and model do not match"),
    };
    Ok((spec, task, metric))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut stats = StatsFile::default();
    for path in &a.ckpts {
        let ckpt = read_ckpt(path)?;
        let (spec, task, metric) = if ckpt.kind == CheckpointKind::Merged {
            evaluate_merged(&ckpt)?
        } else {
            let (spec, task, host) = run::restore(&ckpt)?;
            let metric = run::evaluate(&host, &task)?;
            (spec, task, metric)
        };
        let name = run::metric_name(&task);
        println!(
            "{}  {}  {}  seed {}  {name} {metric:.6e}",
            path.display(),
            spec.task.id(),
            ckpt.kind.as_str(),
            spec.train.seed
        );
        match stats.adapter {
            None => stats.adapter = Some(spec.adapter),
            Some(k) if k != spec.adapter && a.stats_out.is_some() => {
                bail!("--stats-out needs checkpoints of one adapter kind")
            }
            Some(_) => {}
        }
        let eval_size = match &task {
            Task::Sequence(t) => Some(t.eval_size),
            Task::Planted(_) => None,
        };
        stats
            .tasks
            .entry(spec.task.id())
            .or_insert_with(|| TaskScores {
                metric: name.to_string(),
                eval_size,
                scores: Vec::new(),
            })
            .scores
            .push(metric);
    }
    if let Some(out) = &a.stats_out {
        fs::write(out, serde_json::to_string_pretty(&stats)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> Result<()> {
    let ckpt = read_ckpt(&a.ckpt)?;
    let (_, _, host) = run::restore(&ckpt)?;
    let merged = run::merged(&host, ckpt.metadata.clone())?;
    merged.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} ({} dense matrices)", a.out.display(), merged.dense.len());
    Ok(())
}

fn cmd_norms(a: NormsArgs) -> Result<()> {
    let kinds: &[NormKind] = match a.kind {
        NormChoice::Frobenius => &[NormKind::Frobenius],
        NormChoice::AbsSum => &[NormKind::EntrywiseAbsSum],
        NormChoice::Both => &[NormKind::Frobenius, NormKind::EntrywiseAbsSum],
    };
    let mut grids = Vec::new();
    for path in &a.ckpts {
        let ckpt = read_ckpt(path)?;
        let (_, _, host) = run::restore(&ckpt)?;
        for &kind in kinds {
            let mut report = match &host {
                Host::Layer(l) => norm_report(l, kind)?,
                Host::Model(m) => norm_report(m, kind)?,
            };
            report.task = Some(ckpt.metadata.task_id.clone());
            grids.push(report);
        }
    }
    let file = NormReportFile::new(grids);
    file.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for grid in &file.grids {
        print!("{}", grid.render_text());
    }
    Ok(())
}

fn summarize(scores: &TaskScores, bernoulli_sqrt: bool) -> Result<symlora::training::ScoreStats> {
    match (scores.scores.as_slice(), scores.eval_size) {
        ([p], Some(n)) if scores.metric == "accuracy" => Ok(bernoulli_interval(*p, n, bernoulli_sqrt)?),
        (all, _) => Ok(confidence_interval(all)?),
    }
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut results: BTreeMap<String, ArmResults> = BTreeMap::new();
    for path in &a.stats {
        let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: StatsFile = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        let kind = file.adapter.with_context(|| format!("{} names no adapter kind", path.display()))?;
        for (task, scores) in &file.tasks {
            let stats = summarize(scores, a.bernoulli_sqrt)?;
            let entry = results.entry(task.clone()).or_insert_with(|| ArmResults {
                metric: scores.metric.clone(),
                symlora: None,
                lora: None,
            });
            let slot = match kind {
                AdapterKind::Symlora => &mut entry.symlora,
                AdapterKind::Lora => &mut entry.lora,
                AdapterKind::None => bail!("{}: stats for no adapter", path.display()),
            };
            ensure!(slot.is_none(), "{task}: both files hold {} scores", kind.as_str());
            *slot = Some(stats);
        }
    }
    let table = compare_runs(&results)?;
    print!("{}", table.render_text());
    println!("ties: {}/{}", table.ties(), table.rows.len());
    if let Some(out) = &a.out {
        table.write(out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    ensure!(a.cases > 0, "--cases must be positive");
    let report = gradcheck::run(a.seed, a.cases)?;
    println!(
        "{} configurations, max relative error {:.3e}",
        report.cases, report.max_relative_error
    );
    ensure!(
        report.max_relative_error <= 1e-5,
        "max relative error {:e} exceeds 1e-5",
        report.max_relative_error
    );
    Ok(())
}

fn cmd_swap(a: SwapArgs) -> Result<()> {
    let from = read_ckpt(&a.from)?;
    let to = read_ckpt(&a.to)?;
    let (_, task_a, mut host) = run::restore(&from)?;
    let before = run::evaluate(&host, &task_a)?;
    println!("{}  {}  {} {before:.6e}", a.from.display(), from.metadata.task_id, run::metric_name(&task_a));

    let spec_b = RunSpec::from_metadata(&to.metadata)?;
    let task_b = spec_b.task.build()?;
    run::apply(&to, &mut host).with_context(|| format!("attaching {}", a.to.display()))?;
    let after = run::evaluate(&host, &task_b)?;
    println!("{}  {}  {} {after:.6e}", a.to.display(), to.metadata.task_id, run::metric_name(&task_b));
    Ok(())
}
