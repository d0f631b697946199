//! Command-line entry point: binds config files and flags to the
//! operator, the verifiers, the cost model, and the evaluation harness,
//! and emits JSON reports.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::attention::{full_attention, HeadSequence};
use crate::eval::{
    block_recall_eval, heatmap_export, needle_task_eval, toy_train, SyntheticTask, TaskKind,
    ToyModel,
};
use crate::io::write_atomic;
use crate::nsa::{
    gradcheck_instance, nsa_forward, project_branch, random_inputs, select_blocks, Branch,
    NsaConfig, NsaParams,
};
use crate::numeric::SeededRng;
use crate::sim::{
    decode_kv_tokens, decode_speedup, simulate_with_hardware, CountMode, HardwareSpec,
    ScheduleConfig,
};
use crate::{Error, Result};

const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "nsa-lab", version, about = "Trainable hierarchical sparse attention lab")]
#[command(after_help = "Environment:\n  NSA_LAB_THREADS  cap on bench parallelism (default: one thread per row)")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file with [model], [nsa], [hardware], [task] sections
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// RNG seed for parameters, inputs, and tasks
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report destination (stdout if omitted; heatmap: output base path)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the operator once and report gate and output statistics
    Forward(Common),
    /// Check analytic gradients against finite differences
    Gradcheck(Common),
    /// Decode-cost table: KV tokens and expected speedup per cache length
    Bench {
        #[command(flatten)]
        common: Common,
        /// Compression-token counting mode
        #[arg(long, default_value = "table")]
        mode: CountMode,
    },
    /// Simulate the group-centric kernel schedule's memory traffic
    Simulate(Common),
    /// Selection recall against the dense-attention oracle
    Recall {
        #[command(flatten)]
        common: Common,
        /// Top-k dense mass budget
        #[arg(long, default_value_t = 8)]
        budget: usize,
    },
    /// Structural needle-retrieval grid
    Needle(Common),
    /// Train the toy model on a synthetic task
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Export an attention heatmap as CSV + grayscale pixmap
    Heatmap(Common),
}

// ---------------------------------------------------------------------------
// config file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_in: usize,
    pub seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_in: 5, seq_len: 64 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub seq_len: Option<usize>,
    pub needle_position: Option<usize>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection { kind: TaskKind::Copy, seq_len: None, needle_position: None }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub nsa: Option<NsaConfig>,
    pub hardware: HardwareSpec,
    pub task: TaskSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Operator config, falling back to the small default when the file
    /// has no [nsa] section.
    fn nsa_or(&self, fallback: NsaConfig) -> Result<NsaConfig> {
        let cfg = self.nsa.clone().unwrap_or(fallback);
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Parse argv strictly; clap handles --help/--version and usage errors.
pub fn parse_args<I, T>(argv: I) -> clap::error::Result<Cli>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// Run a parsed command. Returns the process exit code: 0 success, 1 for
/// failed checks or runtime errors, 2 for bad configs and arguments.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) | Error::Parse(_) => 2,
                _ => 1,
            }
        }
    }
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn emit(common: &Common, command: &str, config: serde_json::Value, results: serde_json::Value) -> Result<()> {
    let report = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": common.seed,
        "timestamp": timestamp(),
        "config": config,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &common.out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Forward(common) => cmd_forward(common),
        Command::Gradcheck(common) => cmd_gradcheck(common),
        Command::Bench { common, mode } => cmd_bench(common, mode),
        Command::Simulate(common) => cmd_simulate(common),
        Command::Recall { common, budget } => cmd_recall(common, budget),
        Command::Needle(common) => cmd_needle(common),
        Command::Train { common, steps, lr } => cmd_train(common, steps, lr),
        Command::Heatmap(common) => cmd_heatmap(common),
    }
}

fn cmd_forward(common: Common) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::toy())?;
    let t = file.model.seq_len;
    let mut rng = SeededRng::new(common.seed);
    let params = NsaParams::init(&cfg, file.model.d_in, &mut rng)?;
    let inputs = random_inputs(&cfg, file.model.d_in, t, &mut rng);
    let out = nsa_forward(&inputs, &cfg, &params)?;

    let mut gate_means = [0.0; 3];
    for gv in &out.diag.gates {
        for (m, v) in gate_means.iter_mut().zip(gv.as_array()) {
            *m += v / t as f64;
        }
    }
    let head_norms: Vec<f64> = out
        .heads
        .iter()
        .map(|h| h.merged.data().iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    emit(
        &common,
        "forward",
        json!({"model": {"d_in": file.model.d_in, "seq_len": t}, "nsa": cfg}),
        json!({
            "gate_means": {"cmp": gate_means[0], "slc": gate_means[1], "win": gate_means[2]},
            "merged_output_norms": head_norms,
            "kv_tokens_at_final_position": cfg.sparsity_count(t),
        }),
    )?;
    Ok(0)
}

fn cmd_gradcheck(common: Common) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::toy())?;
    let t = file.model.seq_len.min(24);
    let report = gradcheck_instance(&cfg, file.model.d_in, t, common.seed, 1e-5)?;
    let pass = report.max_rel_err < GRADCHECK_TOL;
    emit(
        &common,
        "gradcheck",
        json!({"model": {"d_in": file.model.d_in, "seq_len": t}, "nsa": cfg}),
        json!({"report": report, "tolerance": GRADCHECK_TOL, "pass": pass}),
    )?;
    Ok(if pass { 0 } else { 1 })
}

fn bench_threads() -> usize {
    std::env::var("NSA_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(4)
}

fn cmd_bench(common: Common, mode: CountMode) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::default())?;
    let lengths = [8192usize, 16384, 32768, 65536];
    let threads = bench_threads().min(lengths.len());

    let mut rows = vec![serde_json::Value::Null; lengths.len()];
    std::thread::scope(|scope| {
        for chunk in lengths
            .iter()
            .enumerate()
            .collect::<Vec<_>>()
            .chunks(lengths.len().div_ceil(threads))
        {
            let cfg = &cfg;
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, &s)| {
                    scope.spawn(move || {
                        let (tokens, degenerate) = decode_kv_tokens(s, cfg, mode);
                        (
                            i,
                            json!({
                                "context_length": s,
                                "nsa_kv_tokens": tokens,
                                "full_kv_tokens": s,
                                "expected_speedup": decode_speedup(s, cfg),
                                "degenerate": degenerate,
                            }),
                        )
                    })
                })
                .collect();
            for h in handles {
                let (i, row) = h.join().expect("bench row");
                rows[i] = row;
            }
        }
    });
    emit(&common, "bench", json!({"nsa": cfg, "mode": mode}), json!({"rows": rows}))?;
    Ok(0)
}

fn cmd_simulate(common: Common) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::default())?;
    file.hardware.validate()?;
    let t = file.model.seq_len;
    let mut rng = SeededRng::new(common.seed);

    // random but group-consistent selections at every position
    let mut selections = Vec::with_capacity(t);
    for pos in 1..=t {
        let avail = cfg.num_sel_blocks(pos);
        let per_group: Vec<_> = (0..cfg.n_groups)
            .map(|_| {
                let scores: Vec<f64> = (0..avail).map(|_| rng.uniform(0.0, 1.0)).collect();
                select_blocks(&scores, &cfg, pos)
            })
            .collect();
        selections.push(per_group);
    }

    let kernel_block = cfg.sel_block_len.min(64);
    let sched = ScheduleConfig::new(kernel_block, 2, cfg.clone())?;
    let report = simulate_with_hardware(&selections, &sched, &file.hardware)?;
    let sharing = report.per_head_baseline_bytes as f64 / report.hbm_bytes_loaded.max(1) as f64;
    emit(
        &common,
        "simulate",
        json!({"nsa": cfg, "hardware": file.hardware, "kernel_block": kernel_block, "seq_len": t}),
        json!({"traffic": report, "sharing_factor": sharing}),
    )?;
    Ok(0)
}

fn cmd_recall(common: Common, budget: usize) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::toy())?;
    let t = file.model.seq_len;
    let mut rng = SeededRng::new(common.seed);
    let params = NsaParams::init(&cfg, file.model.d_in, &mut rng)?;
    let inputs = random_inputs(&cfg, file.model.d_in, t, &mut rng);
    let report = block_recall_eval(&inputs, &params, &cfg, budget)?;
    emit(
        &common,
        "recall",
        json!({"model": {"d_in": file.model.d_in, "seq_len": t}, "nsa": cfg, "budget": budget}),
        json!({"recall": report}),
    )?;
    Ok(0)
}

fn cmd_needle(common: Common) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::toy())?;
    let max_len = file.model.seq_len;
    let lengths: Vec<usize> =
        (1..=8).map(|i| (max_len * i / 8).max(cfg.sel_block_len)).collect();
    let mut rng = SeededRng::new(common.seed);
    let model = ToyModel::init(&cfg, file.model.d_in, &mut rng)?;
    let grid = needle_task_eval(&model, &cfg, file.model.d_in, &lengths, 8, common.seed)?;
    emit(
        &common,
        "needle",
        json!({"model": {"d_in": file.model.d_in, "seq_len": max_len}, "nsa": cfg}),
        json!({"grid": grid}),
    )?;
    Ok(0)
}

fn cmd_train(common: Common, steps: usize, lr: f64) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::toy())?;
    let task = SyntheticTask {
        kind: file.task.kind,
        seq_len: file.task.seq_len.unwrap_or(file.model.seq_len),
        feature_dim: file.model.d_in,
        seed: common.seed,
        needle_position: file.task.needle_position,
    };
    let (log, _model) = toy_train(&task, &cfg, steps, lr)?;
    let first = log.steps.first().map(|s| s.loss).unwrap_or(f64::NAN);
    let last = log.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    emit(
        &common,
        "train",
        json!({"nsa": cfg, "task": task, "steps": steps, "lr": lr}),
        json!({
            "initial_loss": first,
            "final_loss": last,
            "loss_ratio": last / first,
            "log": log,
        }),
    )?;
    Ok(0)
}

fn cmd_heatmap(common: Common) -> Result<i32> {
    let file = FileConfig::load(common.config.as_deref())?;
    let cfg = file.nsa_or(NsaConfig::toy())?;
    let t = file.model.seq_len;
    let mut rng = SeededRng::new(common.seed);
    let params = NsaParams::init(&cfg, file.model.d_in, &mut rng)?;
    let inputs = random_inputs(&cfg, file.model.d_in, t, &mut rng);

    // dense causal attention of head 0 over the selection branch's K/V:
    // the map the selection mechanism is trying to cover
    let (k, v) = project_branch(&params, &inputs.features, 0, Branch::Selection)?;
    let seq = HeadSequence::new(inputs.queries[0].clone(), k, v)?;
    let dense = full_attention(&seq, cfg.scale())?;

    let base = common.out.clone().unwrap_or_else(|| PathBuf::from("heatmap"));
    heatmap_export(&dense.weights, &base)?;
    println!("wrote {} and {}", base.with_extension("csv").display(), base.with_extension("pgm").display());
    Ok(0)
}
