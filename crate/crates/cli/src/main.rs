//! `otfuse`: generate synthetic forms, train, ablate and inspect models.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use otfuse::autodiff::OpKind;
use otfuse::diagnostics::{check_gradients, diagnose};
use otfuse::fusion::AggregationMode;
use otfuse::model_io;
use otfuse::synthdoc::{file_checksum, generate, load_jsonl, save_jsonl, GeneratorConfig};
use otfuse::trainer::{
    ablation_seeds, metrics_jsonl, run_variants, split_fraction, train_with, TrainConfig, TrainError, Variant,
};

use crate::config::{load_generator_config, load_train_config, TrainSource};
use crate::manifest::{unix_now, RunManifest};

#[derive(Parser)]
#[command(name = "otfuse", version, about = "Transport-aligned fusion tagger on synthetic forms")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (generate, diagnose) or directory (train, ablate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic JSONL dataset and its manifest.
    Generate,
    /// Trains one model; writes metrics.jsonl, model.bin and manifest.json.
    Train(TrainArgs),
    /// Trains every ablation variant over several seeds.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Number of seeds per variant, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Reports KL profile, gates, alignment entropies and marginal errors.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full loss and every primitive.
    CheckGradients {
        /// Negates one primitive's derivative (mutation testing).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Dataset; may be omitted when --config is a run manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    disable_ot: bool,
    #[arg(long)]
    disable_vib: bool,
    #[arg(long)]
    disable_gate: bool,
    /// `modulated` or `plain`.
    #[arg(long)]
    aggregation: Option<String>,
}

/// Error plus the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        let numerical = matches!(err.downcast_ref::<TrainError>(), Some(TrainError::Diverged { .. }));
        Failure {
            code: if numerical { 2 } else { 1 },
            err,
        }
    }
}

fn numerical(err: anyhow::Error) -> Failure {
    Failure { code: 2, err }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate => cmd_generate(&cli),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Ablate { train, seeds } => cmd_ablate(&cli, train, *seeds),
        Command::Diagnose { model, data } => cmd_diagnose(&cli, model, data),
        Command::CheckGradients { inject_fault } => cmd_check_gradients(inject_fault.as_deref()),
    }
}

fn require_out(cli: &Cli) -> anyhow::Result<&Path> {
    cli.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
}

fn cmd_generate(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_generator_config(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = require_out(cli)?;
    let docs = generate(&cfg)?;
    save_jsonl(&docs, out)?;
    let checksum = file_checksum(out)?;
    let mut manifest = RunManifest::new("generate", cfg.seed, &cfg)?;
    manifest.data_path = Some(out.display().to_string());
    manifest.dataset_checksums.insert(file_name(out), checksum.clone());
    manifest.finished_unix = Some(unix_now());
    manifest.write(&sibling(out, "manifest.json"))?;
    println!("wrote {} documents to {}", docs.len(), out.display());
    println!("sha256 {checksum}");
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// `data.jsonl` → `data.jsonl.manifest.json`.
fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Resolves config, flags and dataset for `train` and `ablate`.
fn resolve_training(cli: &Cli, args: &TrainArgs) -> CliResult<(TrainConfig, PathBuf, Option<String>)> {
    let source = match &cli.config {
        Some(p) => load_train_config(p)?,
        None => TrainSource {
            config: TrainConfig::default(),
            data_path: None,
            checksum: None,
        },
    };
    let mut cfg = source.config;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.model.disable_ot |= args.disable_ot;
    cfg.model.disable_vib |= args.disable_vib;
    cfg.model.disable_gate |= args.disable_gate;
    if let Some(a) = &args.aggregation {
        cfg.model.aggregation = match a.as_str() {
            "modulated" => AggregationMode::Modulated,
            "plain" => AggregationMode::Plain,
            other => return Err(anyhow!("unknown aggregation mode `{other}` (modulated, plain)").into()),
        };
    }
    cfg.validate()?;
    let data = args
        .data
        .clone()
        .or(source.data_path.map(PathBuf::from))
        .ok_or_else(|| anyhow!("--data is required"))?;
    if !data.exists() {
        return Err(anyhow!("dataset {} does not exist (run `otfuse generate` first)", data.display()).into());
    }
    Ok((cfg, data, source.checksum))
}

fn load_dataset(path: &Path, expected: Option<&str>) -> anyhow::Result<(Vec<otfuse::synthdoc::SynthDocument>, String)> {
    let checksum = file_checksum(path)?;
    if let Some(e) = expected {
        if e != checksum {
            bail!(
                "dataset {} has checksum {checksum}, but the manifest recorded {e}",
                path.display()
            );
        }
    }
    let docs = load_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
    if docs.len() < 2 {
        bail!("dataset {} needs at least 2 documents, found {}", path.display(), docs.len());
    }
    Ok((docs, checksum))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let (cfg, data, expected) = resolve_training(cli, args)?;
    let out = require_out(cli)?;
    let (docs, checksum) = load_dataset(&data, expected.as_deref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest = RunManifest::new("train", cfg.seed, &cfg)?;
    manifest.data_path = Some(data.display().to_string());
    manifest.dataset_checksums.insert(file_name(&data), checksum);
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;

    let (train_docs, eval_docs) = split_fraction(&docs, cfg.eval_fraction);
    let metrics_path = out.join("metrics.jsonl");
    let mut lines = String::new();
    let result = train_with(&cfg, train_docs, eval_docs, |m| {
        lines += &(m.to_json_line() + "\n");
        eprintln!(
            "epoch {:>3}  loss {:.4}  kl {:.4}  f1 {:.4}",
            m.epoch, m.total_loss, m.kl_loss, m.eval_f1
        );
    });
    fs::write(&metrics_path, &lines).with_context(|| format!("writing {}", metrics_path.display()))?;
    let outcome = result?;
    debug_assert_eq!(lines, metrics_jsonl(&outcome.history));
    model_io::save(&outcome.model, &out.join("model.bin"))?;
    manifest.finished_unix = Some(unix_now());
    manifest.write(&manifest_path)?;
    println!("final eval span F1 {:.4}", outcome.final_f1());
    if let Some(c) = &outcome.collapse {
        println!("KL signal/noise ratio {:.2}", c.ratio);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(cli: &Cli, args: &TrainArgs, n_seeds: usize) -> CliResult<()> {
    if n_seeds == 0 {
        return Err(anyhow!("--seeds must be at least 1").into());
    }
    let (cfg, data, expected) = resolve_training(cli, args)?;
    let out = require_out(cli)?;
    let (docs, checksum) = load_dataset(&data, expected.as_deref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let seeds = ablation_seeds(cfg.seed, n_seeds);

    let mut manifest = RunManifest::new("ablate", cfg.seed, &cfg)?;
    manifest.data_path = Some(data.display().to_string());
    manifest.dataset_checksums.insert(file_name(&data), checksum);
    manifest.seeds = seeds.clone();
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;

    let (train_docs, eval_docs) = split_fraction(&docs, cfg.eval_fraction);
    let table = run_variants(&cfg, &Variant::ALL, &seeds, train_docs, eval_docs, |v, s, o| {
        eprintln!("{:<8} seed {s:<6} f1 {:.4}", v.name(), o.final_f1());
    })?;
    let json = serde_json::to_string_pretty(&table).map_err(anyhow::Error::from)? + "\n";
    fs::write(out.join("ablation.json"), json)?;
    let text = table.to_text();
    fs::write(out.join("ablation.txt"), &text)?;
    manifest.finished_unix = Some(unix_now());
    manifest.write(&manifest_path)?;
    print!("{text}");
    Ok(())
}

fn cmd_diagnose(cli: &Cli, model_path: &Path, data: &Path) -> CliResult<()> {
    let model = model_io::load(model_path)?;
    if !data.exists() {
        return Err(anyhow!("dataset {} does not exist", data.display()).into());
    }
    let docs = load_jsonl(data)?;
    let report = diagnose(&model, &docs)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n";
    match &cli.out {
        Some(p) => fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    eprintln!("span F1 {:.4}", report.span_f1);
    eprintln!(
        "max marginal violation {:.3e} ({} of {} solves above tol)",
        report.max_marginal_violation,
        report.unconverged_solves,
        report.marginal_violations.len()
    );
    eprintln!("gates in (0,1): {}", report.gates_in_open_unit_interval);
    if let Some(c) = &report.collapse {
        eprintln!(
            "KL signal/noise ratio {:.2} (signal mean {:.4}, noise mean {:.4})",
            c.ratio, c.signal_mean_kl, c.noise_mean_kl
        );
    }
    Ok(())
}

fn cmd_check_gradients(fault: Option<&str>) -> CliResult<()> {
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| anyhow!("unknown primitive `{name}`")))
        .transpose()?;
    let report = check_gradients(fault)?;
    print!("{}", report.to_text());
    if report.passed {
        Ok(())
    } else {
        Err(numerical(anyhow!("gradient check failed")))
    }
}
