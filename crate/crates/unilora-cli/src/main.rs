//! Command-line driver around the unified runtime: generate workloads,
//! replay traces, run training- or serving-only passes, rehearse adapter
//! migration, and print per-bucket metric reports.
//!
//! Every parameter can come from a TOML config file; flags override file
//! values. Exit codes: 0 success, 2 config or run error, 3 trace parse
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unilora::harness::{
    generate_workload, load_trace, replay, run_migration, trace_to_jsonl, HarnessError,
    Precision, RunConfig, RunMode, RunSummary, TraceKind, TraceRecord,
};

#[derive(Parser)]
#[command(name = "unilora", version, about = "Unified LoRA fine-tuning and serving runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic workload trace file.
    Gen(CommonArgs),
    /// Replay a trace end to end and write metrics, verdicts, and a summary.
    Replay(CommonArgs),
    /// Replay a fine-tune-only trace.
    Train(CommonArgs),
    /// Replay an inference-only trace.
    Serve(CommonArgs),
    /// Run a training trace straight and split-by-migration; compare bit-exactness.
    Migrate(CommonArgs),
    /// Replay and print the summary plus the per-bucket metric table.
    Report(CommonArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    Infer,
    Finetune,
    Unified,
    Mutable,
}

impl From<CliMode> for RunMode {
    fn from(m: CliMode) -> RunMode {
        match m {
            CliMode::Infer => RunMode::Infer,
            CliMode::Finetune => RunMode::Finetune,
            CliMode::Unified => RunMode::Unified,
            CliMode::Mutable => RunMode::Mutable,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; omitted fields use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file (.jsonl, or .csv through the converter); omitted means
    /// generate the workload from the config.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Mean inference arrivals per second for generated workloads.
    #[arg(long)]
    rps: Option<f64>,
    /// Generated inference request count.
    #[arg(long)]
    requests: Option<usize>,
    /// Master seed for weights, workloads, and synthesized tokens.
    #[arg(long)]
    seed: Option<u64>,
    /// Scheduler row budget per step.
    #[arg(long)]
    budget: Option<usize>,
    /// Fine-tune rows are eligible every this many steps.
    #[arg(long)]
    interleave: Option<u64>,
    /// Max queueing wait in seconds before the SLO trips.
    #[arg(long = "slo-wait")]
    slo_wait: Option<f64>,
    /// Max per-request mean decode gap in milliseconds.
    #[arg(long = "slo-mean-ms")]
    slo_mean_ms: Option<f64>,
    /// Max single decode gap in milliseconds.
    #[arg(long = "slo-max-ms")]
    slo_max_ms: Option<u64>,
    /// Output directory (default `out`; `report` prints to stdout unless set).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run mode; also selects the generated workload shape.
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
}

impl CommonArgs {
    fn load_config(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode.into();
        }
        if let Some(rps) = self.rps {
            cfg.workload.rps = rps;
        }
        if let Some(n) = self.requests {
            cfg.workload.requests = n;
        }
        if let Some(b) = self.budget {
            cfg.scheduler.row_budget = b;
        }
        if let Some(k) = self.interleave {
            cfg.scheduler.ft_interleave = k;
        }
        if let Some(w) = self.slo_wait {
            cfg.slo.max_waiting_s = w;
        }
        if let Some(m) = self.slo_mean_ms {
            cfg.slo.mean_decoding_ms = m;
        }
        if let Some(x) = self.slo_max_ms {
            cfg.slo.max_decoding_ms = x;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_trace(&self, cfg: &RunConfig) -> Result<Vec<TraceRecord>, HarnessError> {
        match &self.trace {
            Some(path) => load_trace(path),
            None => generate_workload(cfg, cfg.workload.rps, cfg.workload.requests, None),
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn config_io(msg: String) -> HarnessError {
    HarnessError::Config(msg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents)
        .map_err(|e| config_io(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| config_io(format!("cannot create {}: {e}", dir.display())))
}

/// Replay under the configured precision; outputs are precision-agnostic.
fn run_any(
    cfg: &RunConfig,
    trace: &[TraceRecord],
) -> Result<(String, String, RunSummary), HarnessError> {
    Ok(match cfg.precision {
        Precision::F64 => {
            let r = replay::<f64>(cfg, trace)?;
            (r.metrics_csv, r.requests_csv, r.summary)
        }
        Precision::F32 => {
            let r = replay::<f32>(cfg, trace)?;
            (r.metrics_csv, r.requests_csv, r.summary)
        }
    })
}

fn print_summary(summary: &RunSummary) {
    println!("config_hash   {}", summary.config_hash);
    println!(
        "requests      {} finished / {} arrived, {} attained ({:.4} SLO attainment)",
        summary.finished_requests,
        summary.total_requests,
        summary.attained_requests,
        summary.slo_attainment
    );
    println!(
        "violations    waiting {}, mean_decode {}, max_decode {}",
        summary.violations.waiting, summary.violations.mean_decode, summary.violations.max_decode
    );
    println!(
        "tokens        decode {}, finetune {}, eval {}",
        summary.decode_tokens, summary.finetune_tokens, summary.eval_tokens
    );
    println!(
        "training      {} jobs, {} optimizer steps",
        summary.train_jobs, summary.optimizer_steps
    );
    println!(
        "virtual time  {} ms over {} steps",
        summary.final_clock_ms, summary.steps
    );
}

fn cmd_gen(args: &CommonArgs) -> Result<(), HarnessError> {
    let cfg = args.load_config()?;
    let records = generate_workload(&cfg, cfg.workload.rps, cfg.workload.requests, None)?;
    let out = args.out_dir();
    ensure_dir(&out)?;
    let path = out.join("trace.jsonl");
    let header = format!(
        "# unilora trace\n# config_hash={:016x} seed={} mode={} rps={} requests={}\n",
        cfg.content_hash(),
        cfg.seed,
        cfg.mode.name(),
        cfg.workload.rps,
        cfg.workload.requests
    );
    write_file(&path, &(header + &trace_to_jsonl(&records)))?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn write_replay_outputs(
    args: &CommonArgs,
    cfg: &RunConfig,
    trace: &[TraceRecord],
) -> Result<(), HarnessError> {
    let (metrics_csv, requests_csv, summary) = run_any(cfg, trace)?;
    let out = args.out_dir();
    ensure_dir(&out)?;
    write_file(&out.join("metrics.csv"), &metrics_csv)?;
    write_file(&out.join("requests.csv"), &requests_csv)?;
    write_file(&out.join("summary.json"), &(summary.to_json() + "\n"))?;
    print_summary(&summary);
    println!("wrote metrics.csv, requests.csv, summary.json to {}", out.display());
    Ok(())
}

fn cmd_replay(args: &CommonArgs) -> Result<(), HarnessError> {
    let cfg = args.load_config()?;
    let trace = args.resolve_trace(&cfg)?;
    write_replay_outputs(args, &cfg, &trace)
}

fn cmd_train(args: &CommonArgs) -> Result<(), HarnessError> {
    let mut cfg = args.load_config()?;
    if args.mode.is_none() {
        cfg.mode = RunMode::Finetune;
    }
    let trace = args.resolve_trace(&cfg)?;
    if let Some(bad) = trace.iter().find(|r| r.kind != TraceKind::Finetune) {
        return Err(HarnessError::Config(format!(
            "train needs a finetune-only trace; record {:?} is {:?} (use replay for mixed traces)",
            bad.id, bad.kind
        )));
    }
    write_replay_outputs(args, &cfg, &trace)
}

fn cmd_serve(args: &CommonArgs) -> Result<(), HarnessError> {
    let mut cfg = args.load_config()?;
    if args.mode.is_none() {
        cfg.mode = RunMode::Infer;
    }
    let trace = args.resolve_trace(&cfg)?;
    if let Some(bad) = trace.iter().find(|r| r.kind == TraceKind::Finetune) {
        return Err(HarnessError::Config(format!(
            "serve needs an inference-only trace; record {:?} is a finetune job (use replay)",
            bad.id
        )));
    }
    write_replay_outputs(args, &cfg, &trace)
}

fn cmd_migrate(args: &CommonArgs) -> Result<(), HarnessError> {
    let mut cfg = args.load_config()?;
    if args.mode.is_none() {
        cfg.mode = RunMode::Finetune;
    }
    let trace = args.resolve_trace(&cfg)?;
    let (report, bundles) = match cfg.precision {
        Precision::F64 => run_migration::<f64>(&cfg, &trace)?,
        Precision::F32 => run_migration::<f32>(&cfg, &trace)?,
    };
    let out = args.out_dir();
    ensure_dir(&out)?;
    for (job_id, bytes) in &bundles {
        let path = out.join(format!("{job_id}.bundle"));
        std::fs::write(&path, bytes)
            .map_err(|e| config_io(format!("cannot write {}: {e}", path.display())))?;
    }
    write_file(&out.join("migration.json"), &(report.to_json() + "\n"))?;
    for row in &report.rows {
        println!(
            "{}: {} (adapter {} -> {}, trainer {} -> {})",
            row.job_id,
            if row.matches { "match" } else { "MISMATCH" },
            row.adapter_hash_straight,
            row.adapter_hash_migrated,
            row.trainer_hash_straight,
            row.trainer_hash_migrated
        );
    }
    println!(
        "split at step {}, {} bundle bytes, report in {}",
        report.split_at_step,
        report.bundle_bytes,
        out.display()
    );
    if !report.all_match {
        return Err(HarnessError::Config(
            "migrated run diverged from the straight run".into(),
        ));
    }
    println!("all jobs resumed bit-exactly");
    Ok(())
}

fn cmd_report(args: &CommonArgs) -> Result<(), HarnessError> {
    let cfg = args.load_config()?;
    let trace = args.resolve_trace(&cfg)?;
    let (metrics_csv, requests_csv, summary) = run_any(&cfg, &trace)?;
    print_summary(&summary);
    println!();
    print!("{metrics_csv}");
    if args.out.is_some() {
        let out = args.out_dir();
        ensure_dir(&out)?;
        write_file(&out.join("metrics.csv"), &metrics_csv)?;
        write_file(&out.join("requests.csv"), &requests_csv)?;
        write_file(&out.join("summary.json"), &(summary.to_json() + "\n"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Train(a) => cmd_train(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Migrate(a) => cmd_migrate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Trace { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
