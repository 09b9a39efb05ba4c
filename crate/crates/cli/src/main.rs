use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spikefm::bench_diag::{self, Component};
use spikefm::config::RunConfig;
use spikefm::downstream::{self, MetricReport, TaskKind, TaskSpec};
use spikefm::objective::{self, CheckpointMeta};
use spikefm::spike_io::{self, CenterOutParams, KinematicsParams, SpikeRecording, SplitMode, SplitSpec};
use spikefm::tokenizer::{ContextEmbedder, FileEmbedder, StubEmbedder};
use spikefm::{Error, Result};

/// Environment variable that overrides the configured seed.
const SEED_ENV: &str = "UNI_SEED";

#[derive(Parser)]
#[command(name = "spikefm", version, about = "Spike-train foundation model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Gen(GenArgs),
    /// Masked-reconstruction pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on a labelled corpus.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Time attention kernels along one axis.
    Bench(BenchArgs),
    /// Embedding diagnostics.
    Diag {
        #[command(subcommand)]
        which: DiagCommand,
    },
    /// Finite-difference check of the full reconstruction pipeline.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    CenterOut,
    Kinematics,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    trials: usize,
    #[arg(long, default_value_t = 70)]
    units: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    t_raw: usize,
    #[arg(long, default_value_t = 1)]
    sessions: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON table of sentence embeddings; the hashed stub is used otherwise.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Reg,
}

#[derive(Args)]
struct SplitArgs {
    /// Train on one side of this split only; `eval` must use the same split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: String,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Directory for metrics.csv and confusion_<side>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    component: String,
    #[arg(long)]
    sweep: String,
    #[arg(long)]
    emit_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 31)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmups: usize,
}

#[derive(Subcommand)]
enum DiagCommand {
    /// Covariance spread of tokens with and without metadata.
    Expansion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    /// Token grid `N,A,t,d`.
    #[arg(long, default_value = "2,2,4,8")]
    shape: String,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flag, then `UNI_SEED`, then whatever was already configured.
fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Validation(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn load_run(args: &RunArgs) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(p) => RunConfig::from_text(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        run.set(k.trim(), v.trim())?;
    }
    run.seed = resolve_seed(args.seed, run.seed)?;
    run.validate()?;
    Ok(run)
}

fn embedder(path: &Option<PathBuf>, d_text: usize) -> Result<Box<dyn ContextEmbedder>> {
    match path {
        Some(p) => Ok(Box::new(FileEmbedder::load(p)?)),
        None => Ok(Box::new(StubEmbedder { d_text })),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_split(mode: &str, fraction: Option<f64>, seed: u64) -> Result<SplitSpec> {
    let mode = SplitMode::parse(mode).ok_or_else(|| Error::Validation(format!("unknown split mode `{mode}`")))?;
    let mut spec = SplitSpec::new(mode, seed);
    if let Some(f) = fraction {
        spec.train_fraction = f;
    }
    Ok(spec)
}

fn gen(a: &GenArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let corpus = match a.kind {
        Kind::CenterOut => spike_io::gen_center_out(&CenterOutParams {
            n_trials: a.trials,
            n_units: a.units,
            t_raw: a.t_raw,
            n_sessions: a.sessions,
            seed,
            ..CenterOutParams::default()
        })?,
        Kind::Kinematics => spike_io::gen_kinematics(&KinematicsParams {
            n_trials: a.trials,
            n_units: a.units,
            t_raw: a.t_raw,
            n_sessions: a.sessions,
            seed,
            ..KinematicsParams::default()
        })?,
    };
    spike_io::write_corpus(&a.out, &corpus)?;
    println!("wrote {} trials to {}", corpus.len(), a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let corpus = spike_io::read_corpus(&a.data)?;
    let emb = embedder(&a.run.embeddings, run.model.d_text)?;
    let out = objective::pretrain(&corpus, &run, emb.as_ref(), |e, l| eprintln!("epoch {e}: loss {l:.6}"))?;
    objective::write_checkpoint(&a.out, &CheckpointMeta { model: run.model.clone(), task: None }, &out.params)?;
    fs::write(sibling(&a.out, ".loss.csv"), objective::loss_csv(&out.loss_curve))?;
    fs::write(sibling(&a.out, ".config"), run.to_text())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut run = load_run(&a.run)?;
    let pretrained = match &a.ckpt {
        Some(p) => {
            let (meta, params) = objective::read_checkpoint(p)?;
            run.model = meta.model;
            Some(params)
        }
        None => None,
    };
    let mut corpus = spike_io::read_corpus(&a.data)?;
    if let Some(mode) = &a.split.split {
        corpus = spike_io::split(&corpus, &parse_split(mode, a.split.train_fraction, a.split.split_seed)?)?.0;
    }
    let (hidden, input) = (run.finetune.head_hidden, run.finetune.head_input);
    let task = TaskSpec::infer(&corpus, &run.model, hidden, input)?;
    match (a.task, task.kind) {
        (TaskArg::Cls, TaskKind::Classification { .. }) | (TaskArg::Reg, TaskKind::Regression { .. }) => {}
        _ => return Err(Error::Validation(format!("corpus labels give {:?}, not the requested task", task.kind))),
    }
    let emb = embedder(&a.run.embeddings, run.model.d_text)?;
    let out = downstream::finetune(pretrained.as_ref(), &corpus, &task, &run, emb.as_ref(), |e, l| {
        eprintln!("epoch {e}: loss {l:.6}")
    })?;
    objective::write_checkpoint(&a.out, &CheckpointMeta { model: run.model.clone(), task: Some(out.task) }, &out.params)?;
    fs::write(sibling(&a.out, ".loss.csv"), objective::loss_csv(&out.loss_curve))?;
    fs::write(sibling(&a.out, ".config"), run.to_text())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn score(
    params: &spikefm::numerics::ParamStore,
    meta: &CheckpointMeta,
    task: &TaskSpec,
    corpus: &[SpikeRecording],
    emb: &dyn ContextEmbedder,
) -> Result<MetricReport> {
    let outputs = downstream::predict(params, &meta.model, task, corpus, emb)?;
    downstream::evaluate(&outputs, corpus, task)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (meta, params) = objective::read_checkpoint(&a.ckpt)?;
    let task = meta.task.ok_or_else(|| Error::Validation("checkpoint has no task head; run finetune first".into()))?;
    let corpus = spike_io::read_corpus(&a.data)?;
    let spec = parse_split(&a.split, a.train_fraction, a.split_seed)?;
    let (train, test) = spike_io::split(&corpus, &spec)?;
    let emb = embedder(&a.embeddings, meta.model.d_text)?;
    let mut sides: Vec<(String, Vec<SpikeRecording>)> = vec![("train".into(), train)];
    if spec.mode == SplitMode::WithinSession {
        let mut sessions: Vec<String> = test.iter().map(|r| r.meta.session.clone()).collect();
        sessions.sort();
        sessions.dedup();
        for s in sessions {
            let part = test.iter().filter(|r| r.meta.session == s).cloned().collect();
            sides.push((format!("test:{s}"), part));
        }
    } else {
        sides.push(("test".into(), test));
    }
    let mut csv = String::from("split,metric,value\n");
    let mut confusions = Vec::new();
    for (name, part) in &sides {
        let report = score(&params, &meta, &task, part, emb.as_ref())?;
        csv.push_str(&report.csv_rows(name));
        if let MetricReport::Classification { confusion, .. } = &report {
            confusions.push((name.replace(':', "_"), confusion.to_csv()));
        }
    }
    print!("{csv}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), &csv)?;
        for (name, c) in confusions {
            fs::write(dir.join(format!("confusion_{name}.csv")), c)?;
        }
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let c = Component::parse(&a.component).ok_or_else(|| Error::Validation(format!("unknown component `{}`", a.component)))?;
    let grid = bench_diag::default_grid(c, &a.sweep)?;
    let sweep = bench_diag::sweep(c, &a.sweep, &grid, a.reps, a.warmups, 3)?;
    let csv = bench_diag::timing_csv(&sweep.rows);
    match &a.emit_csv {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    println!("slope,{},{},{:.4}", c, sweep.axis, sweep.slope);
    Ok(())
}

fn diag(which: &DiagCommand) -> Result<()> {
    let DiagCommand::Expansion { data, ckpt, out, eps, embeddings } = which;
    let (meta, params) = objective::read_checkpoint(ckpt)?;
    let corpus = spike_io::read_corpus(data)?;
    let emb = embedder(embeddings, meta.model.d_text)?;
    let report = bench_diag::expansion_diag(&corpus, &params, &meta.model, emb.as_ref(), *eps)?;
    if report.ill_conditioned {
        eprintln!("warning: {} samples for {} dimensions; log-determinants are dominated by eps", report.samples, report.dim);
    }
    fs::write(out, report.csv())?;
    print!("{}", report.csv());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let dims: Vec<usize> = a
        .shape
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Validation(format!("bad shape `{}`", a.shape))))
        .collect::<Result<_>>()?;
    let shape: [usize; 4] = dims.try_into().map_err(|_| Error::Validation(format!("shape `{}` needs four extents", a.shape)))?;
    let opts = objective::pipeline_gradcheck_options(a.coords, a.tol, a.seed);
    let report = objective::pipeline_gradcheck(shape, a.heads, &opts)?;
    if report.passed() {
        println!("pass: {} coordinates, max relative error {:.3e}", report.checked.len(), report.max_rel_error);
        Ok(())
    } else {
        Err(Error::NumericContract(format!(
            "gradcheck failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, a.tol
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Diag { which } => diag(which),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericContract(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
