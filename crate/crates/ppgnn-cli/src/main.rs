//! Command-line surface for the pre-propagation GNN training stack.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 invalid data, 3 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppgnn::config::{parse_train_config, update_config_keys};
use ppgnn::dataset::{discover_num_hops, load_run_data, preprocess, read_meta, write_dataset};
use ppgnn::loader::{bench_loaders, LoaderBenchConfig, TierKind};
use ppgnn::models::{save_checkpoint, ModelConfig};
use ppgnn::planner::{
    detect_bulk_memory, estimate_footprint, plan, probe_peak_memory, HardwareBudget,
};
use ppgnn::propagation::NormKind;
use ppgnn::sampler::Method;
use ppgnn::synth::{gen_synth, SynthSpec};
use ppgnn::trainer::{throughput, train_run_with_params};
use ppgnn::Error;

#[derive(Parser)]
#[command(
    name = "ppgnn",
    about = "Pre-propagation GNN training: hop-feature preprocessing, tiered loading, and dense model training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stochastic-block-model dataset
    GenSynth(GenSynthArgs),
    /// Propagate features over the graph and write chunked hop files
    Preprocess(PreprocessArgs),
    /// Train a model from a config file
    Train(TrainArgs),
    /// Choose data placement and shuffling method from hardware budgets
    Plan(PlanArgs),
    /// Compare the serial and double-buffered loaders under injected delays
    BenchLoader(BenchArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    /// Intra-class edge probability
    #[arg(long, default_value_t = 0.02)]
    p_intra: f64,
    /// Inter-class edge probability
    #[arg(long, default_value_t = 0.002)]
    q_inter: f64,
    /// Scale of the class-mean component of each feature
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    /// Standard deviation of the feature noise
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Number of propagation hops R (writes R+1 hop files)
    #[arg(long)]
    hops: usize,
    /// Adjacency normalization: symmetric | row
    #[arg(long, default_value = "symmetric")]
    norm: String,
    /// Drop the implicit self loop on every node
    #[arg(long, default_value_t = false)]
    no_self_loops: bool,
    /// Rows per stored chunk
    #[arg(long, default_value_t = 500)]
    chunk_rows: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Write final parameters as a checkpoint
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// NDJSON metrics destination (overrides the config's `log` key)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Training config supplying model shape and batch size for the probe
    #[arg(long)]
    config: PathBuf,
    /// Fast-tier capacity in bytes
    #[arg(long)]
    fast_bytes: u64,
    /// Bulk-tier capacity in bytes
    #[arg(long)]
    bulk_bytes: Option<u64>,
    /// Detect bulk capacity from the OS instead of --bulk-bytes
    #[arg(long, default_value_t = false)]
    auto_bulk: bool,
    /// Force the shuffling method on memory tiers: rr | cr
    #[arg(long)]
    method_override: Option<String>,
    /// Write the chosen tier and method back into the config file
    #[arg(long, default_value_t = false)]
    write: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    /// resident | staged
    #[arg(long, default_value = "resident")]
    tier: String,
    /// Per-batch assembly delay on the producer side, microseconds
    #[arg(long, default_value_t = 1000)]
    inject_assemble_us: u64,
    /// Per-batch compute delay on the consumer side, microseconds
    #[arg(long, default_value_t = 1000)]
    inject_compute_us: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Parse { .. } | Error::Data { .. } | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Runtime(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Plan(args) => cmd_plan(args),
        Command::BenchLoader(args) => cmd_bench(args),
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        num_nodes: args.nodes,
        num_classes: args.classes,
        feature_dim: args.feat_dim,
        p_intra: args.p_intra,
        q_inter: args.q_inter,
        signal: args.signal,
        noise: args.noise,
        seed: args.seed,
    };
    let data = gen_synth(&spec)?;
    let meta = write_dataset(&args.out, &data)?;
    println!(
        "{}",
        serde_json::json!({
            "dataset": args.out,
            "nodes": meta.num_nodes,
            "edges": data.graph.num_edges(),
            "classes": meta.num_classes,
            "feature_dim": meta.feature_dim,
            "train": meta.train_rows,
            "val": meta.val_rows,
            "test": meta.test_rows,
        })
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<(), Error> {
    let norm: NormKind = args.norm.parse()?;
    let report = preprocess(
        &args.dataset,
        args.hops,
        norm,
        !args.no_self_loops,
        args.chunk_rows,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "dataset": args.dataset,
            "hops": report.num_hops,
            "rows": report.rows_written,
            "chunk_rows": report.chunk_rows,
            "expansion_factor": report.expansion_factor,
            "wall_ms": report.wall_ms,
            "hop_files": report.hop_files,
        })
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = parse_train_config(&args.config)?;
    if let Some(log) = &args.log {
        cfg.log_path = Some(log.clone());
    }
    let data = load_run_data(&args.dataset, cfg.num_hops, cfg.tier)?;
    let (result, params) = train_run_with_params(&cfg, &data)?;

    if let Some(path) = &args.save_model {
        let model_cfg = ModelConfig {
            kind: cfg.model,
            feature_dim: data.meta.feature_dim,
            num_classes: data.meta.num_classes,
            num_hops: cfg.num_hops,
            hidden_dim: cfg.hidden_dim,
            heads: cfg.heads,
            dropout: cfg.dropout,
        };
        save_checkpoint(&params, &model_cfg, path)?;
    }

    println!(
        "{}",
        serde_json::json!({
            "model": cfg.model.to_string(),
            "tier": cfg.tier.to_string(),
            "method": cfg.method.to_string(),
            "epochs": result.epochs,
            "final_loss": result.train_loss.last(),
            "best_val": result.best_val,
            "best_val_epoch": result.best_val_epoch,
            "test_acc": result.test_acc_at_best,
            "convergence_epoch": result.convergence_epoch,
            "throughput_rows_per_s": throughput(&result)?,
            "total_seconds": result.total_seconds,
        })
    );
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<(), Error> {
    let cfg = parse_train_config(&args.config)?;
    let meta = read_meta(&args.dataset)?;
    let stored_hops = discover_num_hops(&args.dataset, 0)
        .ok_or_else(|| Error::Config("dataset has no hop files; run preprocess first".into()))?;
    if cfg.num_hops > stored_hops {
        return Err(Error::Config(format!(
            "config asks for {} hops but only {stored_hops} are preprocessed",
            cfg.num_hops
        )));
    }

    let bulk_bytes = match (args.bulk_bytes, args.auto_bulk) {
        (Some(b), false) => b,
        (None, true) => detect_bulk_memory().ok_or_else(|| {
            Error::Config("could not detect bulk memory; pass --bulk-bytes".into())
        })?,
        (Some(_), true) => {
            return Err(Error::Config(
                "--bulk-bytes and --auto-bulk are mutually exclusive".into(),
            ))
        }
        (None, false) => {
            return Err(Error::Config(
                "bulk capacity required: pass --bulk-bytes or --auto-bulk".into(),
            ))
        }
    };
    let budget = HardwareBudget {
        fast_tier_bytes: args.fast_bytes,
        bulk_tier_bytes: bulk_bytes,
    };

    let footprint = estimate_footprint(
        meta.train_rows as u64,
        meta.feature_dim as u64,
        cfg.num_hops as u64,
        1,
        4,
    );
    let probe = probe_peak_memory(&cfg, &args.dataset)?;
    let method_override = match &args.method_override {
        Some(m) => Some(m.parse::<Method>()?),
        None => None,
    };
    let chosen = plan(&budget, &footprint, &probe, method_override)?;

    if args.write {
        let mut updates = vec![
            ("tier", chosen.tier.clone()),
            ("method", chosen.method.clone()),
        ];
        if chosen.method_kind()? == Method::Cr {
            // keep the written config self-consistent: storage reads whole
            // stored chunks, and chunk reshuffling needs a chunk size at all
            let store_chunk = ppgnn::store::open_hop_set(&args.dataset, 0, 0)?[0].chunk_rows();
            let chunk = match chosen.tier_kind()? {
                TierKind::Storage => store_chunk,
                _ if cfg.chunk_rows >= 1 && cfg.chunk_rows <= cfg.batch_size => cfg.chunk_rows,
                _ => cfg.batch_size,
            };
            updates.push(("chunk_rows", chunk.to_string()));
        }
        update_config_keys(&args.config, &updates)?;
    }

    println!(
        "{}",
        serde_json::json!({
            "tier": chosen.tier,
            "method": chosen.method,
            "rationale": chosen.rationale,
            "footprint_bytes": footprint.total_bytes,
            "probe_peak_bytes": probe.peak_bytes,
            "fast_tier_bytes": budget.fast_tier_bytes,
            "bulk_tier_bytes": budget.bulk_tier_bytes,
            "written": args.write,
        })
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let tier: TierKind = args.tier.parse()?;
    if tier == TierKind::Storage {
        return Err(Error::Config(
            "bench-loader runs against resident or staged tiers".into(),
        ));
    }
    let cfg = LoaderBenchConfig {
        batches: args.batches,
        batch_size: args.batch_size,
        feature_dim: args.feat_dim,
        num_hops: args.hops,
        tier,
        inject_assemble_us: args.inject_assemble_us,
        inject_compute_us: args.inject_compute_us,
        seed: args.seed,
    };
    let report = bench_loaders(&cfg)?;
    if !report.sequences_match {
        return Err(Error::Runtime(
            "prefetch batch sequence diverged from serial sequence".into(),
        ));
    }
    eprintln!(
        "serial   {:8.1} ms  (assembly {:.1} ms, transfer {:.1} ms)",
        report.serial_wall_ms,
        report.serial_stats.assemble_micros as f64 / 1e3,
        report.serial_stats.transfer_micros as f64 / 1e3,
    );
    eprintln!(
        "prefetch {:8.1} ms  (assembly {:.1} ms, transfer {:.1} ms)",
        report.prefetch_wall_ms,
        report.prefetch_stats.assemble_micros as f64 / 1e3,
        report.prefetch_stats.transfer_micros as f64 / 1e3,
    );
    eprintln!(
        "speedup  {:8.2}x over {} batches",
        report.speedup, report.batches
    );
    println!(
        "{}",
        serde_json::json!({
            "batches": report.batches,
            "tier": tier.to_string(),
            "inject_assemble_us": args.inject_assemble_us,
            "inject_compute_us": args.inject_compute_us,
            "serial_wall_ms": report.serial_wall_ms,
            "prefetch_wall_ms": report.prefetch_wall_ms,
            "speedup": report.speedup,
            "sequences_match": report.sequences_match,
            "serial_bytes_assembled": report.serial_stats.bytes_assembled,
            "prefetch_bytes_assembled": report.prefetch_stats.bytes_assembled,
        })
    );
    Ok(())
}
