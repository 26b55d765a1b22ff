//! Command-line front end: train, eval, benchmark sweeps, and dataset
//! inspection.
//!
//! Metric records stream to stdout as JSON lines and are mirrored to
//! `<run_dir>/metrics.jsonl`; progress notes go to stderr. The run
//! directory comes from `TPGNN_RUN_DIR` (default `runs`). Exit codes: 2
//! for usage and format problems, 1 for I/O failures.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tpgnn::bench::{bench_batch, bench_depth, BenchReport};
use tpgnn::checkpoint;
use tpgnn::config::{Config, TaskKind};
use tpgnn::ctdg::{load_events, EventLog};
use tpgnn::error::{Error, Result};
use tpgnn::model::Model;
use tpgnn::scalar::Scalar;
use tpgnn::synthetic::generate_synthetic;
use tpgnn::training::{Engine, RunMetrics, Task};

#[derive(Parser)]
#[command(name = "tpgnn", version, about = "Continuous-time dynamic graph learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on an event log and write <run_dir>/best.ckpt
    Train(RunArgs),
    /// Re-evaluate a checkpoint on its log's validation and test splits
    Eval(EvalArgs),
    /// Sweep propagation depth k under a fixed epoch budget
    BenchDepth(DepthArgs),
    /// Sweep training batch size under a fixed epoch budget
    BenchBatch(BatchArgs),
    /// Print summary statistics of an event CSV
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Event CSV; the built-in synthetic stream is used when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// The CSV has no header row
    #[arg(long)]
    no_header: bool,
    /// Flat key = value config file; command-line flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task to train and score: link or node
    #[arg(long)]
    task: Option<TaskKind>,
    /// Propagation depth (memory layers)
    #[arg(long)]
    k: Option<usize>,
    /// Temporal neighbors sampled per propagation step
    #[arg(long)]
    n_neighbors: Option<usize>,
    /// Node representation width
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Attention heads in the node-wise encoder
    #[arg(long)]
    heads: Option<usize>,
    /// Encoder blocks stacked in the node-wise encoder
    #[arg(long)]
    blocks: Option<usize>,
    /// Epochs without validation improvement before stopping
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch budget
    #[arg(long)]
    epochs: Option<usize>,
    /// Hidden width of the hop-score network
    #[arg(long)]
    bias_hidden: Option<usize>,
    /// Synthetic stream size (ignored with --data)
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    events: Option<usize>,
    /// Fixed evaluation batch size; defaults to the training batch size
    #[arg(long)]
    eval_batch: Option<usize>,
    /// Edge features attached to sampled negatives: reuse or zeros
    #[arg(long)]
    neg_features: Option<String>,
    /// Disable the learned hop-attention scores (ablation)
    #[arg(long)]
    no_layer_attention: bool,
    /// Float width: f32 or f64
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to load; defaults to <run_dir>/best.ckpt
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct DepthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Depths to sweep
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    k_values: Vec<usize>,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Batch sizes to sweep
    #[arg(long, value_delimiter = ',', default_value = "100,200,500,1000,2000")]
    b_values: Vec<usize>,
}

#[derive(Args)]
struct InspectArgs {
    /// Event CSV to summarize
    #[arg(long)]
    data: PathBuf,
    /// The CSV has no header row
    #[arg(long)]
    no_header: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Io(_) => 1,
            _ => 2,
        });
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => with_precision(
            a.common,
            |cfg, log, dir| run_train::<f32>(cfg, log, dir),
            |cfg, log, dir| run_train::<f64>(cfg, log, dir),
        ),
        Cmd::Eval(a) => {
            let ckpt = a.ckpt;
            with_precision(
                a.common,
                |cfg, log, dir| run_eval::<f32>(cfg, log, dir, ckpt.as_deref()),
                |cfg, log, dir| run_eval::<f64>(cfg, log, dir, ckpt.as_deref()),
            )
        }
        Cmd::BenchDepth(a) => {
            let values = a.k_values;
            with_precision(
                a.common,
                |cfg, log, dir| run_bench::<f32>(cfg, log, dir, true, &values),
                |cfg, log, dir| run_bench::<f64>(cfg, log, dir, true, &values),
            )
        }
        Cmd::BenchBatch(a) => {
            let values = a.b_values;
            with_precision(
                a.common,
                |cfg, log, dir| run_bench::<f32>(cfg, log, dir, false, &values),
                |cfg, log, dir| run_bench::<f64>(cfg, log, dir, false, &values),
            )
        }
        Cmd::Inspect(a) => run_inspect(&a),
    }
}

/// Builds the config, loads the log, prepares the run directory, and hands
/// off to the precision-specific closure.
fn with_precision<F32Run, F64Run>(common: CommonArgs, f32_run: F32Run, f64_run: F64Run) -> Result<()>
where
    F32Run: FnOnce(&Config, &EventLog, &Path) -> Result<()>,
    F64Run: FnOnce(&Config, &EventLog, &Path) -> Result<()>,
{
    let cfg = build_config(&common)?;
    let log = load_log(&cfg, common.no_header)?;
    let run_dir = run_dir();
    fs::create_dir_all(&run_dir)?;
    match common.precision.as_str() {
        "f32" => f32_run(&cfg, &log, &run_dir),
        "f64" => f64_run(&cfg, &log, &run_dir),
        other => Err(Error::usage(format!("unknown precision {other:?}; use f32 or f64"))),
    }
}

fn build_config(a: &CommonArgs) -> Result<Config> {
    let mut c = Config::default();
    if let Some(path) = &a.config {
        c.apply_file(path)?;
    }
    if let Some(v) = &a.data {
        c.data = Some(v.clone());
    }
    if let Some(v) = a.task {
        c.task = v;
    }
    if let Some(v) = a.k {
        c.k = v;
    }
    if let Some(v) = a.n_neighbors {
        c.n_neighbors = v;
    }
    if let Some(v) = a.dim {
        c.dim = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.dropout {
        c.dropout = v;
    }
    if let Some(v) = a.heads {
        c.heads = v;
    }
    if let Some(v) = a.blocks {
        c.blocks = v;
    }
    if let Some(v) = a.patience {
        c.patience = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.bias_hidden {
        c.bias_hidden = v;
    }
    if let Some(v) = a.nodes {
        c.nodes = v;
    }
    if let Some(v) = a.events {
        c.events = v;
    }
    if let Some(v) = a.eval_batch {
        c.eval_batch = Some(v);
    }
    if let Some(v) = &a.neg_features {
        c.set("neg_features", v)?;
    }
    if a.no_layer_attention {
        c.layer_attention = false;
    }
    c.validate()?;
    Ok(c)
}

fn load_log(cfg: &Config, no_header: bool) -> Result<EventLog> {
    match &cfg.data {
        Some(path) => load_events(path, !no_header),
        None => generate_synthetic(cfg.nodes, cfg.events, cfg.seed),
    }
}

fn run_dir() -> PathBuf {
    PathBuf::from(std::env::var("TPGNN_RUN_DIR").unwrap_or_else(|_| "runs".into()))
}

/// Streams metric records to stdout and mirrors them to a JSONL file.
struct MetricSink {
    file: BufWriter<File>,
}

impl MetricSink {
    fn create(run_dir: &Path) -> Result<Self> {
        let file = BufWriter::new(File::create(run_dir.join("metrics.jsonl"))?);
        Ok(MetricSink { file })
    }

    fn emit(&mut self, rec: &RunMetrics) -> Result<()> {
        let line = rec.to_json();
        println!("{line}");
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

fn run_train<T: Scalar>(cfg: &Config, log: &EventLog, run_dir: &Path) -> Result<()> {
    let dims = cfg.model_dims(log.feat_dim(), 2);
    let model = Model::<T>::init(dims, cfg.seed)?;
    let mut engine = Engine::new(model, log, cfg.train_settings())?;
    let mut sink = MetricSink::create(run_dir)?;

    let fit = engine.fit(log)?;
    for rec in &fit.history {
        sink.emit(rec)?;
    }
    eprintln!("link phase: best epoch {}, test ap {:.4}", fit.best_epoch, fit.test.ap);

    if cfg.task == TaskKind::Node {
        let fit = engine.fit_node(log)?;
        for rec in &fit.history {
            sink.emit(rec)?;
        }
        eprintln!("node phase: best epoch {}, test auc {:.4}", fit.best_epoch, fit.test.auc);
    }

    let saved = engine
        .saved_point()
        .ok_or_else(|| Error::usage("training finished without a best state"))?;
    let ckpt = run_dir.join("best.ckpt");
    checkpoint::save(&ckpt, &engine.model, &saved.memory, saved.cursor, saved.best_epoch, cfg.seed)?;
    eprintln!("checkpoint: {}", ckpt.display());
    sink.finish()
}

fn run_eval<T: Scalar>(
    cfg: &Config,
    log: &EventLog,
    run_dir: &Path,
    ckpt: Option<&Path>,
) -> Result<()> {
    let default_path = run_dir.join("best.ckpt");
    let path = ckpt.unwrap_or(&default_path);
    let loaded = checkpoint::load::<T>(path)?;
    let best_epoch = loaded.best_epoch;

    // negatives are drawn from the run seed stored in the checkpoint, so
    // the reported numbers match the training run's own evaluation
    let mut settings = cfg.train_settings();
    settings.seed = loaded.seed;
    let mut engine = checkpoint::resume_engine(loaded, log, settings)?;

    let task = match cfg.task {
        TaskKind::Link => Task::Link,
        TaskKind::Node => Task::Node,
    };
    let (_, va, te) = log.chronological_split();
    let mut sink = MetricSink::create(run_dir)?;
    let val = engine.evaluate(log, va, best_epoch, "val", task)?;
    sink.emit(&val)?;
    let test = engine.evaluate(log, te, best_epoch, "test", task)?;
    sink.emit(&test)?;
    eprintln!("eval: test ap {:.4}, acc {:.4}, auc {:.4}", test.ap, test.acc, test.auc);
    sink.finish()
}

fn run_bench<T: Scalar>(
    cfg: &Config,
    log: &EventLog,
    run_dir: &Path,
    depth: bool,
    values: &[usize],
) -> Result<()> {
    let report: BenchReport = if depth {
        bench_depth::<T>(log, cfg, values)?
    } else {
        bench_batch::<T>(log, cfg, values)?
    };
    let mut sink = MetricSink::create(run_dir)?;
    for point in &report.points {
        for rec in &point.history {
            sink.emit(rec)?;
        }
    }
    let table = report.table();
    print!("{table}");
    let name = if depth { "bench_k.csv" } else { "bench_B.csv" };
    fs::write(run_dir.join(name), &table)?;
    eprintln!("table: {}", run_dir.join(name).display());
    sink.finish()
}

fn run_inspect(a: &InspectArgs) -> Result<()> {
    let log = load_events(&a.data, !a.no_header)?;
    println!(
        "edges={}, src={}, dst={}, feat={}",
        log.len(),
        log.n_src(),
        log.n_dst(),
        log.feat_dim()
    );
    Ok(())
}
