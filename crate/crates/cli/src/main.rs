//! `fedseg`: build datasets, run experiments, attack checkpoints and
//! render reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedseg_core::data::{build_federation, load_federation, Scale};
use fedseg_core::experiment::{report_from_dir, run_experiment, ExperimentConfig};
use fedseg_core::fl::Method;
use fedseg_core::mia::attack_model;
use fedseg_core::model::{load_checkpoint, ModelConfig};
use fedseg_core::Error;

#[derive(Parser)]
#[command(name = "fedseg", version, about = "Privacy-aware federated tumor segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic federation and write it to disk.
    GenData(GenDataArgs),
    /// Run every configured (method, seed) pair.
    Run(RunArgs),
    /// Membership-inference attack against a stored checkpoint.
    Attack(AttackArgs),
    /// Aggregate a runs directory into a table and curve charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "desk")]
    scale: Scale,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Slice size as HxW (defaults to the scale's size).
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Overwrite an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<Scale>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    prox_mu: Option<f32>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attack evaluation cadence in rounds; 0 disables tracking.
    #[arg(long)]
    mia_cadence: Option<usize>,
    /// FedBN: reset local running statistics every round.
    #[arg(long)]
    bn_reset: bool,
    /// Aggregate in plain floating point instead of masked fixed point.
    #[arg(long)]
    no_secure_agg: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Optional experiment config supplying model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report destination; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW, e.g. 32x32")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(h)?, p(w)?))
}

/// A failure caused by how the tool was invoked (exit code 2).
fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    if args.out.exists() && !args.force {
        let non_empty = std::fs::read_dir(&args.out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
        if non_empty {
            return Err(usage(format!(
                "{} already exists; pass --force to overwrite",
                args.out.display()
            )));
        }
    }
    let size = args.size.unwrap_or(args.scale.default_size());
    let (_, path) = build_federation(args.seed, args.scale, size, &args.out)?;
    println!("{}", path.display());
    Ok(())
}

fn run_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let mut over = toml::Table::new();
    let mut train = toml::Table::new();
    let set = |t: &mut toml::Table, k: &str, v: toml::Value| {
        t.insert(k.to_string(), v);
    };
    if let Some(s) = args.scale {
        set(&mut over, "scale", s.to_string().into());
        if !table.contains_key("image_size") {
            let (h, w) = s.default_size();
            set(&mut over, "image_size", vec![h as i64, w as i64].into());
        }
    }
    if let Some(m) = &args.methods {
        let names: Vec<toml::Value> = m.iter().map(|m| m.name().into()).collect();
        set(&mut over, "methods", names.into());
    }
    if let Some(s) = &args.seeds {
        let v: Vec<toml::Value> = s.iter().map(|&x| (x as i64).into()).collect();
        set(&mut over, "seeds", v.into());
    }
    if let Some(m) = &args.manifest {
        set(&mut over, "manifest", m.display().to_string().into());
    }
    if let Some(s) = args.data_seed {
        set(&mut over, "data_seed", (s as i64).into());
    }
    if let Some(o) = &args.out {
        set(&mut over, "out_dir", o.display().to_string().into());
    }
    if let Some(c) = args.mia_cadence {
        set(&mut over, "mia_cadence", (c as i64).into());
    }
    if let Some(r) = args.rounds {
        set(&mut train, "rounds", (r as i64).into());
    }
    if let Some(mu) = args.prox_mu {
        set(&mut train, "prox_mu", (mu as f64).into());
    }
    if args.bn_reset {
        set(&mut train, "bn_reset", true.into());
    }
    if args.no_secure_agg {
        set(&mut train, "secure_agg", false.into());
    }
    if !train.is_empty() {
        over.insert("train".into(), train.into());
    }
    ExperimentConfig::merge_tables(&mut table, over);
    Ok(ExperimentConfig::from_table(table)?)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = run_config(&args)?;
    if let Some(m) = &cfg.manifest {
        if !m.exists() {
            return Err(usage(format!("manifest {} does not exist", m.display())));
        }
    }
    let histories = run_experiment(&cfg)?;
    for h in &histories {
        if let Some(r) = h.last() {
            println!(
                "{:<12} seed {:<4} dice {:.4} ce {:.4} auc {}",
                h.method.name(),
                h.seed,
                r.dice,
                r.ce_loss,
                h.final_auc().map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
    }
    println!("{}", cfg.out_dir.display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn attack(args: AttackArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.manifest, "manifest")?;
    let target = load_checkpoint(&args.checkpoint)?;
    let (manifest, federation) = load_federation(&args.manifest)?;
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::for_scale(manifest.scale),
    };
    let model: ModelConfig = cfg.model;
    let report = attack_model(&target, &federation, model, &cfg.train, cfg.mia_panel, args.seed)?;
    let text = toml::to_string(&report).context("encoding attack report")?;
    match &args.out {
        Some(p) => {
            std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            println!("auc {:.4}", report.auc);
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    if !args.runs.is_dir() {
        return Err(usage(format!("runs directory {} does not exist", args.runs.display())));
    }
    print!("{}", report_from_dir(&args.runs, &args.out)?);
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FEDSEG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| usage(format!("FEDSEG_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Attack(a) => attack(a),
        Command::Report(a) => report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
