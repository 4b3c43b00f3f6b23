//! `bpt`: command-line driver for the blockwise transformer engine.
//!
//! Five subcommands: `verify` runs the exactness suite, `plan` estimates the
//! largest trainable context per strategy under a memory budget, `trace`
//! measures peak live activations over a grid, `bench` times training steps,
//! and `train` fits a byte-level language model. Every run writes a manifest
//! next to its outputs; feeding a manifest back through `--config` replays
//! the run, bitwise for the deterministic subcommands.
//!
//! Exit codes: 0 success, 1 failed checks or a failed run, 2 usage or
//! configuration errors, 3 an infeasible plan.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bpt::layer::Strategy;
use bpt::memory::{self, MemorySpec, ModelConfig};
use bpt::trace::{self, TraceSpec};
use bpt::train::{self, TrainConfig};
use bpt::verify::{self, VerifyOptions};
use bpt::Error;

#[derive(Parser, Debug)]
#[command(
    name = "bpt",
    version,
    about = "Blockwise transformer toolkit: exact streaming attention with fused \
             feedforward, plus planning, tracing, benchmarking, and training",
    arg_required_else_help = true
)]
struct Cli {
    /// Base seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for reports, tables, and manifests (created if absent).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Config file: a bare config or a previously written manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Element type for engine arithmetic.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the exactness suite: equivalence grids, gradients, causality.
    Verify(VerifyArgs),
    /// Estimate the max trainable context per strategy under a budget.
    Plan(PlanArgs),
    /// Measure peak live activations over a sequence-length grid.
    Trace(TraceArgs),
    /// Time forward+backward steps and report tokens per second.
    Bench(BenchArgs),
    /// Train a byte-level language model and record per-step metrics.
    Train(TrainArgs),
}

struct Globals {
    seed: Option<u64>,
    config: Option<PathBuf>,
    precision: Option<Precision>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn bytes(self) -> u64 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Runs `$body` with `$t` bound to the selected element type.
macro_rules! with_precision {
    ($precision:expr, $t:ident, $body:block) => {
        match $precision {
            Precision::F32 => {
                type $t = f32;
                $body
            }
            Precision::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and exit 0; real usage errors
            // exit 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(classify(&e));
        }
    }
}

fn classify(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) | Some(Error::CorpusTooSmall { .. }) => 2,
        Some(Error::Infeasible { .. }) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let Cli {
        seed,
        out_dir,
        config,
        precision,
        command,
    } = cli;
    let globals = Globals {
        seed,
        config,
        precision,
    };
    let out_dir = out_dir.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating --out-dir {}", out_dir.display()))?;
    match command {
        Command::Verify(args) => cmd_verify(&globals, &args, &out_dir),
        Command::Plan(args) => cmd_plan(&globals, &args, &out_dir),
        Command::Trace(args) => cmd_trace(&globals, &args, &out_dir),
        Command::Bench(args) => cmd_bench(&globals, &args, &out_dir),
        Command::Train(args) => cmd_train(&globals, &args, &out_dir),
    }
}

fn load_or_default<C: serde::de::DeserializeOwned + Default>(
    config: Option<&Path>,
    subcommand: &str,
) -> anyhow::Result<C> {
    match config {
        Some(path) => manifest::load_config(path, subcommand),
        None => Ok(C::default()),
    }
}

fn parse_strategies(names: &[String]) -> anyhow::Result<Vec<Strategy>> {
    names
        .iter()
        .map(|name| Ok(Strategy::from_str(name)?))
        .collect()
}

/// Keeps free-text notes on one CSV line and clear of the delimiter.
fn csv_note(text: &str) -> String {
    text.replace('\n', "; ").replace(',', ";")
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

// ---------------------------------------------------------------------------
// verify

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Sequence lengths for the equivalence grids, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,

    /// Seeds per grid point.
    #[arg(long)]
    n_seeds: Option<u64>,

    /// Max-abs tolerance for the forward equivalence checks.
    #[arg(long)]
    attention_tol: Option<f64>,

    /// Relative tolerance between blockwise and reference gradients.
    #[arg(long)]
    grad_tol: Option<f64>,

    /// Relative tolerance against central finite differences.
    #[arg(long)]
    fd_tol: Option<f64>,

    /// Causality perturbation trials.
    #[arg(long)]
    causality_trials: Option<usize>,

    /// Self-test: negate the streaming-softmax correction factor. The suite
    /// must catch the fault and exit nonzero.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    inject_fault: Option<bool>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(default)]
struct VerifyConfig {
    precision: Precision,
    seed: u64,
    sizes: Vec<usize>,
    n_seeds: u64,
    attention_tol: f64,
    grad_tol: f64,
    fd_tol: f64,
    causality_trials: usize,
    inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let opts = VerifyOptions::default();
        VerifyConfig {
            precision: Precision::F64,
            seed: opts.seed,
            sizes: opts.sizes,
            n_seeds: opts.n_seeds,
            attention_tol: opts.attention_tol,
            grad_tol: opts.grad_tol,
            fd_tol: opts.fd_tol,
            causality_trials: opts.causality_trials,
            inject_fault: opts.inject_fault,
        }
    }
}

fn cmd_verify(globals: &Globals, args: &VerifyArgs, out_dir: &Path) -> anyhow::Result<i32> {
    let mut cfg: VerifyConfig = load_or_default(globals.config.as_deref(), "verify")?;
    if let Some(p) = globals.precision {
        cfg.precision = p;
    }
    if let Some(s) = globals.seed {
        cfg.seed = s;
    }
    if let Some(v) = &args.sizes {
        cfg.sizes = v.clone();
    }
    if let Some(v) = args.n_seeds {
        cfg.n_seeds = v;
    }
    if let Some(v) = args.attention_tol {
        cfg.attention_tol = v;
    }
    if let Some(v) = args.grad_tol {
        cfg.grad_tol = v;
    }
    if let Some(v) = args.fd_tol {
        cfg.fd_tol = v;
    }
    if let Some(v) = args.causality_trials {
        cfg.causality_trials = v;
    }
    if let Some(v) = args.inject_fault {
        cfg.inject_fault = v;
    }

    let opts = VerifyOptions {
        sizes: cfg.sizes.clone(),
        n_seeds: cfg.n_seeds,
        seed: cfg.seed,
        attention_tol: cfg.attention_tol,
        grad_tol: cfg.grad_tol,
        fd_tol: cfg.fd_tol,
        causality_trials: cfg.causality_trials,
        inject_fault: cfg.inject_fault,
    };
    let reports = with_precision!(cfg.precision, T, { verify::run_suite::<T>(&opts) });

    let mut text = String::new();
    let passed = reports.iter().filter(|r| r.passed).count();
    for r in &reports {
        writeln!(
            text,
            "check {}: {} (worst {:.3e}, tolerance {:.0e}) {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst,
            r.tolerance,
            r.detail
        )?;
    }
    writeln!(
        text,
        "verify: {passed}/{} checks passed at {}",
        reports.len(),
        cfg.precision.name()
    )?;
    print!("{text}");
    let report_path = out_dir.join("verify_report.txt");
    std::fs::write(&report_path, &text)?;
    manifest::seal(out_dir, "verify", cfg.seed, &[report_path], cfg.clone())?;
    Ok(if passed == reports.len() { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// plan

#[derive(Args, Debug)]
struct PlanArgs {
    /// Built-in model preset (gpt-1b, gpt-3b, gpt-7b, gpt-13b, gpt-30b,
    /// gpt-70b).
    #[arg(long)]
    preset: Option<String>,

    /// Budget in gigabytes (1 GB = 1e9 bytes).
    #[arg(long)]
    budget_gb: Option<f64>,

    /// Budget in bytes; wins over --budget-gb when both are given.
    #[arg(long)]
    budget_bytes: Option<u64>,

    /// Strategies to plan for, comma separated.
    #[arg(long = "strategy", value_delimiter = ',')]
    strategy: Option<Vec<String>>,

    /// Sequences per training step.
    #[arg(long)]
    batch: Option<u64>,

    /// Activation element width in bytes (half precision by default).
    #[arg(long)]
    bytes_per_element: Option<u64>,
}

/// Model dimensions as they appear in config files and manifests.
#[derive(Serialize, Deserialize, Clone, Debug)]
struct ModelTable {
    #[serde(default = "custom_model_name")]
    name: String,
    n_params: u64,
    n_layers: u64,
    d_model: u64,
    n_heads: u64,
    d_head: u64,
    #[serde(default = "default_vocab")]
    vocab: u64,
}

fn custom_model_name() -> String {
    "custom".to_string()
}

fn default_vocab() -> u64 {
    50257
}

impl ModelTable {
    fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            name: self.name.clone(),
            n_params: self.n_params as u128,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            vocab: self.vocab,
        }
    }

    fn from_model_config(config: &ModelConfig) -> ModelTable {
        ModelTable {
            name: config.name.clone(),
            n_params: config.n_params as u64,
            n_layers: config.n_layers,
            d_model: config.d_model,
            n_heads: config.n_heads,
            d_head: config.d_head,
            vocab: config.vocab,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(default)]
struct PlanConfig {
    preset: Option<String>,
    model: Option<ModelTable>,
    budget_bytes: Option<u64>,
    strategies: Vec<Strategy>,
    batch: u64,
    bytes_per_element: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            preset: None,
            model: None,
            budget_bytes: None,
            strategies: Strategy::ALL.to_vec(),
            batch: 1,
            bytes_per_element: 2,
        }
    }
}

fn cmd_plan(globals: &Globals, args: &PlanArgs, out_dir: &Path) -> anyhow::Result<i32> {
    let mut cfg: PlanConfig = load_or_default(globals.config.as_deref(), "plan")?;
    if let Some(p) = &args.preset {
        cfg.preset = Some(p.clone());
    }
    if let Some(gb) = args.budget_gb {
        cfg.budget_bytes = Some((gb * 1e9) as u64);
    }
    if let Some(b) = args.budget_bytes {
        cfg.budget_bytes = Some(b);
    }
    if let Some(names) = &args.strategy {
        cfg.strategies = parse_strategies(names)?;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    if let Some(b) = args.bytes_per_element {
        cfg.bytes_per_element = b;
    }

    // Schema problems are collected and reported together.
    let mut problems = Vec::new();
    let model = match (&cfg.preset, &cfg.model) {
        (Some(name), _) => match ModelConfig::preset(name) {
            Some(m) => Some(m),
            None => {
                let known: Vec<String> = ModelConfig::presets()
                    .iter()
                    .map(|m| m.name.clone())
                    .collect();
                problems.push(format!(
                    "unknown preset '{name}' (expected one of {})",
                    known.join(", ")
                ));
                None
            }
        },
        (None, Some(table)) => Some(table.to_model_config()),
        (None, None) => {
            problems
                .push("a model is required: --preset NAME or a [model] table in --config".into());
            None
        }
    };
    match cfg.budget_bytes {
        None => problems.push("a budget is required: --budget-gb or --budget-bytes".into()),
        Some(0) => problems.push("the budget must be positive".into()),
        Some(_) => {}
    }
    if cfg.strategies.is_empty() {
        problems.push("at least one strategy is required".into());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems).into());
    }
    let model = model.expect("checked above");
    let budget = cfg.budget_bytes.expect("checked above") as u128;
    cfg.model = Some(ModelTable::from_model_config(&model));

    println!(
        "model {}: n_layers={} d_model={} n_heads={} d_head={} params={}",
        model.name, model.n_layers, model.d_model, model.n_heads, model.d_head, model.n_params
    );
    println!(
        "budget {budget} bytes, batch {}, {} bytes per element",
        cfg.batch, cfg.bytes_per_element
    );
    println!("fixed state {} bytes", memory::fixed_state_bytes(&model));

    let mut csv = String::from(
        "strategy,status,max_context,chunk,activation_bytes,fixed_bytes,budget_bytes,saturated,floor_bytes\n",
    );
    let mut assumptions: Vec<String> = Vec::new();
    let mut feasible = 0usize;
    let mut first_infeasible: Option<Error> = None;
    for &strategy in &cfg.strategies {
        match memory::max_context_with_bytes(
            &model,
            budget,
            strategy,
            cfg.batch,
            cfg.bytes_per_element,
        ) {
            Ok(report) => {
                feasible += 1;
                println!(
                    "strategy {strategy}: max context {}{} (chunk {}, activations {} bytes)",
                    report.max_seq,
                    if report.saturated {
                        " (planner ceiling)"
                    } else {
                        ""
                    },
                    report.chunk,
                    report.activation_bytes
                );
                let spec = MemorySpec::new(cfg.batch, report.max_seq, report.chunk)?
                    .with_bytes(cfg.bytes_per_element)?;
                let estimate = memory::layer_bytes(strategy, &spec, &model)?;
                for (label, bytes) in &estimate.terms {
                    println!("  {label}: {bytes} bytes");
                }
                writeln!(
                    csv,
                    "{strategy},ok,{},{},{},{},{budget},{},na",
                    report.max_seq,
                    report.chunk,
                    report.activation_bytes,
                    report.fixed_bytes,
                    report.saturated
                )?;
                if assumptions.is_empty() {
                    assumptions = report.assumptions.clone();
                }
            }
            Err(Error::Infeasible {
                floor_bytes,
                budget_bytes,
            }) => {
                println!(
                    "strategy {strategy}: infeasible (floor {floor_bytes} bytes exceeds budget \
                     {budget_bytes} bytes)"
                );
                writeln!(
                    csv,
                    "{strategy},infeasible,na,na,na,{},{budget},na,{floor_bytes}",
                    memory::fixed_state_bytes(&model)
                )?;
                if first_infeasible.is_none() {
                    first_infeasible = Some(Error::Infeasible {
                        floor_bytes,
                        budget_bytes,
                    });
                }
            }
            Err(other) => return Err(other.into()),
        }
    }
    if !assumptions.is_empty() {
        println!("assumptions:");
        for line in &assumptions {
            println!("  - {line}");
        }
    }
    let csv_path = out_dir.join("plan.csv");
    std::fs::write(&csv_path, &csv)?;
    manifest::seal(
        out_dir,
        "plan",
        globals.seed.unwrap_or(0),
        &[csv_path],
        cfg.clone(),
    )?;
    match (feasible, first_infeasible) {
        (0, Some(e)) => Err(e.into()),
        _ => Ok(0),
    }
}

// ---------------------------------------------------------------------------
// trace

#[derive(Args, Debug)]
struct TraceArgs {
    /// Strategies to sweep, comma separated.
    #[arg(long = "strategy", value_delimiter = ',')]
    strategy: Option<Vec<String>>,

    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,

    /// Explicit block sizes, one per sequence length.
    #[arg(long, value_delimiter = ',')]
    chunks: Option<Vec<usize>>,

    /// Derive block sizes as seq_len / DIV when --chunks is not given.
    #[arg(long)]
    chunk_div: Option<usize>,

    #[arg(long)]
    d_model: Option<usize>,

    #[arg(long)]
    n_heads: Option<usize>,

    #[arg(long)]
    n_layers: Option<usize>,

    /// Apply the causal mask (on by default).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    causal: Option<bool>,

    /// Artificial cap on live elements; a cell that exceeds it is recorded
    /// as "oom".
    #[arg(long)]
    cap: Option<u64>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(default)]
struct TraceConfig {
    precision: Precision,
    seed: u64,
    strategies: Vec<Strategy>,
    sizes: Vec<usize>,
    chunks: Option<Vec<usize>>,
    chunk_div: usize,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    causal: bool,
    cap: Option<u64>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            precision: Precision::F64,
            seed: 0,
            strategies: Strategy::ALL.to_vec(),
            sizes: vec![256, 512, 1024, 2048],
            chunks: None,
            chunk_div: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 1,
            causal: true,
            cap: None,
        }
    }
}

fn derived_chunks(sizes: &[usize], div: usize) -> Vec<usize> {
    sizes.iter().map(|&s| (s / div).max(1)).collect()
}

fn cmd_trace(globals: &Globals, args: &TraceArgs, out_dir: &Path) -> anyhow::Result<i32> {
    let mut cfg: TraceConfig = load_or_default(globals.config.as_deref(), "trace")?;
    if let Some(p) = globals.precision {
        cfg.precision = p;
    }
    if let Some(s) = globals.seed {
        cfg.seed = s;
    }
    if let Some(names) = &args.strategy {
        cfg.strategies = parse_strategies(names)?;
    }
    if let Some(v) = &args.sizes {
        cfg.sizes = v.clone();
        cfg.chunks = None; // stale pairing would be meaningless
    }
    if let Some(v) = &args.chunks {
        cfg.chunks = Some(v.clone());
    }
    if let Some(v) = args.chunk_div {
        cfg.chunk_div = v;
    }
    if let Some(v) = args.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = args.n_heads {
        cfg.n_heads = v;
    }
    if let Some(v) = args.n_layers {
        cfg.n_layers = v;
    }
    if let Some(v) = args.causal {
        cfg.causal = v;
    }
    if let Some(v) = args.cap {
        cfg.cap = Some(v);
    }

    let mut problems = Vec::new();
    if cfg.sizes.is_empty() {
        problems.push("at least one size is required".to_string());
    }
    if cfg.strategies.is_empty() {
        problems.push("at least one strategy is required".to_string());
    }
    if cfg.chunk_div == 0 {
        problems.push("chunk_div must be at least 1".to_string());
    }
    if let Some(chunks) = &cfg.chunks {
        if chunks.len() != cfg.sizes.len() {
            problems.push(format!(
                "chunks lists {} values for {} sizes",
                chunks.len(),
                cfg.sizes.len()
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems).into());
    }
    let chunks = match &cfg.chunks {
        Some(c) => c.clone(),
        None => derived_chunks(&cfg.sizes, cfg.chunk_div),
    };

    let mut specs = Vec::new();
    for &strategy in &cfg.strategies {
        for (&seq_len, &chunk) in cfg.sizes.iter().zip(&chunks) {
            specs.push(TraceSpec {
                strategy,
                seq_len,
                c_q: chunk,
                c_kv: chunk,
                d_model: cfg.d_model,
                n_heads: cfg.n_heads,
                n_layers: cfg.n_layers,
                causal: cfg.causal,
                seed: cfg.seed,
                cap: cfg.cap,
            });
        }
    }
    let cells = with_precision!(cfg.precision, T, { trace::sweep::<T>(&specs) });

    let mut csv = String::from(
        "strategy,seq_len,c_q,c_kv,d_model,n_heads,n_layers,status,peak_live_elements,peak_bytes,persistent_elements,note\n",
    );
    let mut errors = 0usize;
    for cell in &cells {
        let spec = &cell.spec;
        let front = format!(
            "{},{},{},{},{},{},{}",
            spec.strategy, spec.seq_len, spec.c_q, spec.c_kv, spec.d_model, spec.n_heads,
            spec.n_layers
        );
        match &cell.outcome {
            Ok(r) => {
                let status = if r.completed { "ok" } else { "oom" };
                let note = r.failure.as_deref().map(csv_note).unwrap_or_default();
                writeln!(
                    csv,
                    "{front},{status},{},{},{},{note}",
                    r.peak_live_elements,
                    r.peak_live_elements * cfg.precision.bytes(),
                    r.persistent_elements
                )?;
            }
            Err(msg) => {
                errors += 1;
                writeln!(csv, "{front},error,na,na,na,{}", csv_note(msg))?;
            }
        }
    }
    let csv_path = out_dir.join("trace.csv");
    std::fs::write(&csv_path, &csv)?;
    println!(
        "trace: wrote {} ({} cells, {errors} errors)",
        csv_path.display(),
        cells.len()
    );
    for &strategy in &cfg.strategies {
        let points: Vec<(f64, f64)> = cells
            .iter()
            .filter(|cell| cell.spec.strategy == strategy)
            .filter_map(|cell| match &cell.outcome {
                Ok(r) if r.completed => {
                    Some((r.seq_len as f64, r.peak_live_elements as f64))
                }
                _ => None,
            })
            .collect();
        match trace::fit_loglog_slope(&points) {
            Some(slope) => println!(
                "strategy {strategy}: slope {slope:.3} over {} points",
                points.len()
            ),
            None => println!("strategy {strategy}: insufficient points for a slope fit"),
        }
    }
    manifest::seal(out_dir, "trace", cfg.seed, &[csv_path], cfg.clone())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// bench

#[derive(Args, Debug)]
struct BenchArgs {
    /// Strategies to time, comma separated.
    #[arg(long = "strategy", value_delimiter = ',')]
    strategy: Option<Vec<String>>,

    #[arg(long)]
    seq_len: Option<usize>,

    /// Query block size (seq_len / 8 when omitted).
    #[arg(long)]
    c_q: Option<usize>,

    /// Key-value block size (same as c_q when omitted).
    #[arg(long)]
    c_kv: Option<usize>,

    #[arg(long)]
    d_model: Option<usize>,

    #[arg(long)]
    n_heads: Option<usize>,

    #[arg(long)]
    n_layers: Option<usize>,

    /// Apply the causal mask (on by default).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    causal: Option<bool>,

    /// Timed repeats after warm-up.
    #[arg(long)]
    repeats: Option<usize>,

    /// Untimed warm-up iterations.
    #[arg(long)]
    warmup: Option<usize>,

    /// Artificial cap on live elements; a strategy that exceeds it gets an
    /// "oom" row instead of exhausting real memory.
    #[arg(long)]
    cap: Option<u64>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(default)]
struct BenchConfig {
    precision: Precision,
    seed: u64,
    strategies: Vec<Strategy>,
    seq_len: usize,
    c_q: Option<usize>,
    c_kv: Option<usize>,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    causal: bool,
    repeats: usize,
    warmup: usize,
    cap: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            precision: Precision::F64,
            seed: 0,
            strategies: vec![Strategy::Bpt],
            seq_len: 512,
            c_q: None,
            c_kv: None,
            d_model: 64,
            n_heads: 4,
            n_layers: 1,
            causal: true,
            repeats: 3,
            warmup: 1,
            cap: None,
        }
    }
}

fn cmd_bench(globals: &Globals, args: &BenchArgs, out_dir: &Path) -> anyhow::Result<i32> {
    let mut cfg: BenchConfig = load_or_default(globals.config.as_deref(), "bench")?;
    if let Some(p) = globals.precision {
        cfg.precision = p;
    }
    if let Some(s) = globals.seed {
        cfg.seed = s;
    }
    if let Some(names) = &args.strategy {
        cfg.strategies = parse_strategies(names)?;
    }
    if let Some(v) = args.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = args.c_q {
        cfg.c_q = Some(v);
    }
    if let Some(v) = args.c_kv {
        cfg.c_kv = Some(v);
    }
    if let Some(v) = args.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = args.n_heads {
        cfg.n_heads = v;
    }
    if let Some(v) = args.n_layers {
        cfg.n_layers = v;
    }
    if let Some(v) = args.causal {
        cfg.causal = v;
    }
    if let Some(v) = args.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = args.cap {
        cfg.cap = Some(v);
    }

    let mut problems = Vec::new();
    if cfg.repeats == 0 {
        problems.push("repeats must be at least 1".to_string());
    }
    if cfg.strategies.is_empty() {
        problems.push("at least one strategy is required".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems).into());
    }
    let c_q = cfg.c_q.unwrap_or((cfg.seq_len / 8).max(1));
    let c_kv = cfg.c_kv.unwrap_or(c_q);

    println!("bench: timings are machine-relative; compare rows only within one machine");
    let mut csv = String::from(
        "strategy,batch,seq_len,c_q,c_kv,d_model,n_heads,n_layers,repeats,tokens_per_step,\
         median_seconds,tokens_per_second_median,tokens_per_second_min,tokens_per_second_max,\
         spread,status,note\n",
    );
    for &strategy in &cfg.strategies {
        let spec = TraceSpec {
            strategy,
            seq_len: cfg.seq_len,
            c_q,
            c_kv,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_layers: cfg.n_layers,
            causal: cfg.causal,
            seed: cfg.seed,
            cap: cfg.cap,
        };
        let mut seconds = Vec::with_capacity(cfg.repeats);
        let mut oom: Option<String> = None;
        let mut run_err: Option<String> = None;
        let mut batch = 1usize;
        for i in 0..cfg.warmup + cfg.repeats {
            let started = Instant::now();
            let outcome =
                with_precision!(cfg.precision, T, { trace::trace_forward_backward::<T>(&spec) });
            let elapsed = started.elapsed().as_secs_f64();
            match outcome {
                Ok(report) => {
                    batch = report.batch;
                    if !report.completed {
                        oom = Some(
                            report
                                .failure
                                .unwrap_or_else(|| "aborted by the element cap".to_string()),
                        );
                        break;
                    }
                    if i >= cfg.warmup {
                        seconds.push(elapsed.max(1e-9));
                    }
                }
                Err(e) => {
                    run_err = Some(e.to_string());
                    break;
                }
            }
        }
        let front = format!(
            "{strategy},{batch},{},{c_q},{c_kv},{},{},{},{}",
            cfg.seq_len, cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.repeats
        );
        let tokens_per_step = (batch * cfg.seq_len) as f64;
        if let Some(msg) = oom {
            println!("strategy {strategy}: oom ({msg})");
            writeln!(csv, "{front},{tokens_per_step},na,na,na,na,na,oom,{}", csv_note(&msg))?;
            continue;
        }
        if let Some(msg) = run_err {
            println!("strategy {strategy}: error ({msg})");
            writeln!(csv, "{front},na,na,na,na,na,na,error,{}", csv_note(&msg))?;
            continue;
        }
        seconds.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median_seconds = median(&seconds);
        let tps_median = tokens_per_step / median_seconds;
        let tps_min = tokens_per_step / seconds.last().expect("at least one repeat");
        let tps_max = tokens_per_step / seconds[0];
        let spread = if cfg.repeats == 1 {
            "na".to_string()
        } else {
            format!("{}", tps_max - tps_min)
        };
        println!(
            "strategy {strategy}: {tps_median:.1} tokens/s median over {} repeats \
             (min {tps_min:.1}, max {tps_max:.1}, spread {})",
            cfg.repeats,
            if cfg.repeats == 1 {
                "na".to_string()
            } else {
                format!("{:.1}", tps_max - tps_min)
            }
        );
        writeln!(
            csv,
            "{front},{tokens_per_step},{median_seconds},{tps_median},{tps_min},{tps_max},{spread},ok,"
        )?;
    }
    let csv_path = out_dir.join("bench.csv");
    std::fs::write(&csv_path, &csv)?;
    println!("bench: wrote {}", csv_path.display());
    manifest::seal(out_dir, "bench", cfg.seed, &[csv_path], cfg.clone())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Debug)]
struct TrainArgs {
    /// Execution strategy override (vanilla, flash, bpt).
    #[arg(long)]
    strategy: Option<String>,

    /// Step-count override.
    #[arg(long)]
    steps: Option<usize>,

    /// Metrics output path override (default <out-dir>/metrics.csv).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

/// The training config plus the element type, as snapshotted in manifests.
/// Bare config files carry the trainer schema directly; precision rides on
/// the command line.
#[derive(Serialize, Deserialize, Clone, Debug)]
struct TrainCliConfig {
    #[serde(default = "default_train_precision")]
    precision: Precision,
    train: TrainConfig,
}

fn default_train_precision() -> Precision {
    Precision::F64
}

fn cmd_train(globals: &Globals, args: &TrainArgs, out_dir: &Path) -> anyhow::Result<i32> {
    let config_path = globals.config.as_deref().ok_or_else(|| {
        Error::InvalidConfig(vec![
            "train requires --config pointing at a training configuration or manifest".into(),
        ])
    })?;
    let (value, from_manifest) = manifest::load_value(config_path, "train")?;
    let mut cfg: TrainCliConfig = if from_manifest {
        manifest::decode(value, config_path)?
    } else {
        TrainCliConfig {
            precision: default_train_precision(),
            train: manifest::decode(value, config_path)?,
        }
    };
    if let Some(p) = globals.precision {
        cfg.precision = p;
    }
    if let Some(s) = globals.seed {
        cfg.train.seed = s;
    }
    if let Some(name) = &args.strategy {
        cfg.train.strategy = name.parse()?;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    // Paths in a config file are relative to the file; they are stored
    // absolute in the manifest so a replay works from any directory.
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    if cfg.train.corpus_path.is_relative() {
        cfg.train.corpus_path = std::path::absolute(base.join(&cfg.train.corpus_path))?;
    }
    let metrics_path = match (&args.metrics, &cfg.train.metrics_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if p.is_absolute() => p.clone(),
        (None, Some(p)) => out_dir.join(p),
        (None, None) => out_dir.join("metrics.csv"),
    };
    let metrics_path = std::path::absolute(metrics_path)?;
    cfg.train.metrics_path = Some(metrics_path.clone());

    let (first, last, steps) = with_precision!(cfg.precision, T, {
        let run = train::train::<T>(&cfg.train)?;
        (
            run.metrics.first().map(|r| r.loss),
            run.metrics.last().map(|r| r.loss),
            run.metrics.len(),
        )
    });
    match (first, last) {
        (Some(a), Some(b)) => println!(
            "train: {steps} steps with {}, loss {a:.4} -> {b:.4}; metrics at {}",
            cfg.train.strategy,
            metrics_path.display()
        ),
        _ => println!("train: 0 steps; metrics at {}", metrics_path.display()),
    }
    manifest::seal(out_dir, "train", cfg.train.seed, &[metrics_path], cfg.clone())?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even_counts() {
        assert!((median(&[1.0, 2.0, 9.0]) - 2.0).abs() < 1e-15);
        assert!((median(&[1.0, 2.0, 3.0, 9.0]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn csv_notes_stay_on_one_line_and_one_cell() {
        let note = csv_note("invalid config:\na, b");
        assert!(!note.contains('\n'));
        assert!(!note.contains(','));
    }

    #[test]
    fn derived_chunks_floor_at_one() {
        assert_eq!(derived_chunks(&[256, 512, 4], 8), vec![32, 64, 1]);
    }
}
