//! Command-line front door.
//!
//! Five subcommands wire one JSON config to dataset generation, training,
//! causal diagnosis, the eight-method ablation grid, and report merging.
//! Flags override config fields. Exit codes are a stable scripting
//! contract: 0 success, 1 runtime or I/O failure, 2 usage or validation
//! failure. Every command writes a manifest capturing the exact invocation,
//! config hash and seed next to its outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modlab_core::checkpoint;
use modlab_core::config::{RunManifest, TrainingConfig};
use modlab_core::diagnostics::{
    merge_reports_csv, run_diagnostic_suite, sha256_hex, DiagnosticReport, SuiteKind, SuiteOptions,
};
use modlab_core::model::Model;
use modlab_core::synth::{generate_dataset, read_dataset, write_dataset, GeneratorConfig, Split, TaskKind};
use modlab_core::trainer::{run_training, Method, TaskDatasets};

#[derive(Parser)]
#[command(name = "modlab", version, about = "Modality-interference laboratory: train, perturb, diagnose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic benchmark datasets.
    GenData(GenDataArgs),
    /// Train one method; writes checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the perturbation grid.
    Diagnose(DiagnoseArgs),
    /// Train and diagnose all eight methods from one base config.
    Ablate(AblateArgs),
    /// Merge diagnostic reports into one comparison CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// image-heavy | text-heavy | vqa | all
    #[arg(long)]
    task: String,
    /// Samples per dataset.
    #[arg(long)]
    n: usize,
    /// Generator seed; overrides the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// train | test
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla | fft-dvqa | fft-daug | fft-kl | fft-js | fft-rg | fft-adv | ours
    #[arg(long)]
    method: Option<String>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run seed; overrides the config's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// in-distribution | ood | both
    #[arg(long, default_value = "both")]
    suite: String,
    /// Method label for the report; same names as train --method.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Concurrent child training processes; 1 trains in-process.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files, or run directories containing report.json.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Exit-code carrier: usage and validation problems exit 2, everything that
/// went wrong at runtime exits 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn invocation() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn run_id(command: &str, cfg: &TrainingConfig) -> String {
    format!("{command}-{}-s{}", &cfg.hash()[..12], cfg.seed)
}

fn load_config(path: Option<&Path>) -> Result<TrainingConfig, Failure> {
    match path {
        None => Ok(TrainingConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Runtime(format!("cannot read config {}: {e}", p.display())))?;
            TrainingConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_method(name: &str) -> Result<Method, Failure> {
    Method::from_cli(name).ok_or_else(|| {
        let valid: Vec<&str> = Method::ALL.iter().map(|m| m.cli_name()).collect();
        usage(format!("unknown method {name:?}; valid methods: {}", valid.join(", ")))
    })
}

/// Reads pre-generated datasets when the config names a data directory,
/// otherwise generates them in memory.
fn load_datasets(cfg: &TrainingConfig) -> Result<TaskDatasets, Failure> {
    match &cfg.paths.data_dir {
        Some(dir) => {
            let read = |task: TaskKind| {
                read_dataset(&dir.join(format!("{}.jsonl", task.slug()))).map_err(runtime)
            };
            Ok(TaskDatasets {
                image_heavy: read(TaskKind::ImageHeavy)?,
                text_heavy: read(TaskKind::TextHeavy)?,
                vqa: read(TaskKind::Vqa)?,
            })
        }
        None => TaskDatasets::generate(&cfg.generator, cfg.train_size).map_err(runtime),
    }
}

fn load_checkpoint(path: &Path) -> Result<(Model, String), Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let model = checkpoint::load(path)
        .map_err(|e| Failure::Runtime(format!("checkpoint {}: {e}", path.display())))?;
    Ok((model, sha256_hex(&bytes)))
}

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let tasks: Vec<TaskKind> = match args.task.as_str() {
        "all" => TaskKind::ALL.to_vec(),
        other => vec![TaskKind::ALL
            .into_iter()
            .find(|t| t.slug() == other)
            .ok_or_else(|| {
                usage(format!("unknown task {other:?}; valid tasks: image-heavy, text-heavy, vqa, all"))
            })?],
    };
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(usage(format!("unknown split {other:?}; valid splits: train, test"))),
    };
    let mut cfg = load_config(args.config.as_deref())?;
    match (args.seed, &args.config) {
        // A bare seed defines the whole generator, prototypes included; with
        // a config file the seed only reroutes the sample streams.
        (Some(seed), None) => cfg.generator = GeneratorConfig::new(seed),
        (Some(seed), Some(_)) => cfg.generator.seed = seed,
        (None, _) => {}
    }
    cfg.generator.validate().map_err(|e| usage(e.to_string()))?;

    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let mut manifest =
        RunManifest::new(run_id("gen-data", &cfg), cfg.hash(), invocation(), cfg.generator.seed);
    for task in tasks {
        let samples = generate_dataset(&cfg.generator, task, split, args.n).map_err(runtime)?;
        let path = args.out.join(format!("{}.jsonl", task.slug()));
        write_dataset(&path, &samples).map_err(runtime)?;
        println!("wrote {} {} samples to {}", samples.len(), task.slug(), path.display());
        manifest.outputs.push(path.display().to_string());
    }
    manifest.write(&args.out.join("manifest.json")).map_err(runtime)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(name) = &args.method {
        cfg.method = parse_method(name)?;
    }
    if let Some(dir) = args.out_dir {
        cfg.paths.out_dir = dir;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let datasets = load_datasets(&cfg)?;
    let artifacts = run_training(&cfg, &datasets).map_err(runtime)?;

    let config_copy = cfg.paths.out_dir.join("config.json");
    cfg.save(&config_copy).map_err(runtime)?;
    let mut manifest = RunManifest::new(run_id("train", &cfg), cfg.hash(), invocation(), cfg.seed);
    if let Some(dir) = &cfg.paths.data_dir {
        manifest.inputs.push(dir.display().to_string());
    }
    manifest.outputs = vec![
        artifacts.checkpoint_path.display().to_string(),
        artifacts.metrics_path.display().to_string(),
        config_copy.display().to_string(),
    ];
    manifest.write(&cfg.paths.out_dir.join("manifest.json")).map_err(runtime)?;

    match artifacts.metrics.last() {
        Some(m) => println!(
            "{}: {} steps, final losses sft {:.4} adv {:.4} consistency {:.4}",
            cfg.method, m.step, m.sft, m.adv, m.consistency
        ),
        None => println!("{}: 0 steps, checkpoint is the initialization", cfg.method),
    }
    println!("checkpoint: {}", artifacts.checkpoint_path.display());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> CmdResult {
    let suite = SuiteKind::from_cli(&args.suite).ok_or_else(|| {
        usage(format!(
            "unknown suite {:?}; valid suites: in-distribution, ood, both",
            args.suite
        ))
    })?;
    let method = match &args.method {
        Some(name) => parse_method(name)?.label().to_string(),
        None => "unspecified".to_string(),
    };
    let cfg = load_config(args.config.as_deref())?;
    let (model, checkpoint_id) = load_checkpoint(&args.checkpoint)?;
    let report = run_diagnostic_suite(
        &model,
        &cfg.generator,
        &SuiteOptions {
            suite,
            n_per_task: cfg.test_size,
            method,
            checkpoint_id,
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
    )
    .map_err(runtime)?;

    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    let json_path = args.out.join("report.json");
    let csv_path = args.out.join("report.csv");
    report.write_json(&json_path).map_err(runtime)?;
    report.write_csv(&csv_path).map_err(runtime)?;
    let mut manifest = RunManifest::new(run_id("diagnose", &cfg), cfg.hash(), invocation(), cfg.seed);
    manifest.inputs.push(args.checkpoint.display().to_string());
    manifest.outputs =
        vec![json_path.display().to_string(), csv_path.display().to_string()];
    manifest.write(&args.out.join("manifest.json")).map_err(runtime)?;
    println!(
        "diagnosed {} cells ({} clean references) into {}",
        report.cells.len(),
        report.clean_reference.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let base = load_config(args.config.as_deref())?;
    std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;

    // Per-method configs go to disk first so child processes and the
    // in-process path train from identical documents.
    let mut runs = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let mut cfg = base.clone();
        cfg.method = method;
        cfg.paths.out_dir = args.out_dir.join(method.cli_name());
        std::fs::create_dir_all(&cfg.paths.out_dir).map_err(runtime)?;
        let cfg_path = cfg.paths.out_dir.join("config.json");
        cfg.save(&cfg_path).map_err(runtime)?;
        runs.push((method, cfg, cfg_path));
    }

    if args.parallel > 1 {
        train_in_children(&runs, args.parallel)?;
    } else {
        let datasets = load_datasets(&base)?;
        for (method, cfg, _) in &runs {
            run_training(cfg, &datasets).map_err(runtime)?;
            println!("trained {method}");
        }
    }

    let mut reports = Vec::with_capacity(runs.len());
    for (method, cfg, _) in &runs {
        let (model, checkpoint_id) = load_checkpoint(&cfg.paths.out_dir.join("model.bin"))?;
        let report = run_diagnostic_suite(
            &model,
            &cfg.generator,
            &SuiteOptions {
                suite: SuiteKind::Both,
                n_per_task: cfg.test_size,
                method: method.label().to_string(),
                checkpoint_id,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
        )
        .map_err(runtime)?;
        report.write_json(&cfg.paths.out_dir.join("report.json")).map_err(runtime)?;
        report.write_csv(&cfg.paths.out_dir.join("report.csv")).map_err(runtime)?;
        reports.push(report);
    }
    let comparison = args.out_dir.join("comparison.csv");
    std::fs::write(&comparison, merge_reports_csv(&reports)).map_err(runtime)?;

    let mut manifest = RunManifest::new(run_id("ablate", &base), base.hash(), invocation(), base.seed);
    manifest.outputs = runs
        .iter()
        .map(|(_, cfg, _)| cfg.paths.out_dir.display().to_string())
        .chain([comparison.display().to_string()])
        .collect();
    manifest.write(&args.out_dir.join("manifest.json")).map_err(runtime)?;
    println!("ablation grid complete: {} runs, comparison at {}", runs.len(), comparison.display());
    Ok(())
}

/// Runs the grid's training as child processes, `parallel` at a time in
/// waves. Diagnosis stays in the parent.
fn train_in_children(runs: &[(Method, TrainingConfig, PathBuf)], parallel: usize) -> CmdResult {
    let exe = std::env::current_exe().map_err(runtime)?;
    for wave in runs.chunks(parallel) {
        let mut children = Vec::with_capacity(wave.len());
        for (method, _, cfg_path) in wave {
            let child = std::process::Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(cfg_path)
                .spawn()
                .map_err(|e| Failure::Runtime(format!("cannot spawn trainer for {method}: {e}")))?;
            children.push((method, child));
        }
        for (method, mut child) in children {
            let status = child.wait().map_err(runtime)?;
            if !status.success() {
                return Err(Failure::Runtime(format!(
                    "child training run for {method} failed with {status}"
                )));
            }
            println!("trained {method}");
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let mut reports = Vec::with_capacity(args.runs.len());
    let mut inputs = Vec::with_capacity(args.runs.len());
    for run in &args.runs {
        let path = if run.is_dir() { run.join("report.json") } else { run.clone() };
        reports.push(
            DiagnosticReport::read_json(&path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        );
        inputs.push(path.display().to_string());
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    std::fs::write(&args.out, merge_reports_csv(&reports)).map_err(runtime)?;

    let mut manifest =
        RunManifest::new("report".to_string(), String::new(), invocation(), 0);
    manifest.inputs = inputs;
    manifest.outputs = vec![args.out.display().to_string()];
    manifest.write(&args.out.with_extension("manifest.json")).map_err(runtime)?;
    println!("merged {} reports into {}", reports.len(), args.out.display());
    Ok(())
}
