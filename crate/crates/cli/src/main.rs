//! `discluster` experiment command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use discluster::checkpoint::Checkpoint;
use discluster::config::ExperimentConfig;
use discluster::data::{gen_gaussian_blobs_shift, gen_two_moons_shift, write_csv, BlobsShift, Dataset, TwoMoonsShift};
use discluster::gradcheck::{run_suite, SuiteOptions};
use discluster::metrics::JsonlWriter;
use discluster::trainer::{
    self, em_baseline, kmeans_pseudo_baseline, run_ablation, AblationRow, KMeansBaselineConfig, TrainState, Variant,
};

const OUT_ENV: &str = "DISCLUSTER_OUT_DIR";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "discluster", version, about = "Distilled discriminative clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics, checkpoint and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Train every variant for several seeds and tabulate final target accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.trials`.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated variant ids; all ten when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term on both classifier depths.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write a synthetic source/target pair and scatter data for plotting.
    Synth {
        #[arg(long, value_enum)]
        task: SynthTask,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adds a predicted-label column from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the k-means pseudo-labelling or entropy-minimisation baseline.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long, default_value_t = 20)]
        epochs_per_round: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SynthTask {
    TwoMoons,
    Blobs,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineKind {
    Kmeans,
    Em,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (tag, msg) = match self {
            Failure::Config(m) => ("config", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        // One line, so the prefix can be grepped.
        write!(f, "error[{tag}]: {}", msg.replace('\n', " "))
    }
}

fn classify(err: anyhow::Error) -> Failure {
    let msg = format!("{err:#}");
    let config = err.chain().any(|e| {
        e.downcast_ref::<discluster::Error>().is_some_and(discluster::Error::is_config)
            || e.downcast_ref::<ConfigError>().is_some()
    });
    if config {
        // The tag already says it; drop the library's own prefix.
        let msg = msg.strip_prefix("config error: ").map_or(msg.clone(), str::to_string);
        Failure::Config(msg)
    } else {
        Failure::Runtime(msg)
    }
}

/// Marks an error raised by the CLI itself as a configuration problem.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Failure::Config(format!("usage: {first}")));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let failure = classify(e);
            eprintln!("{failure}");
            ExitCode::from(failure.code())
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Ablate {
            config,
            trials,
            seed,
            variants,
            out,
        } => cmd_ablate(&config, trials, seed, variants, out),
        Command::Gradcheck { eps, seed, inject_fault } => cmd_gradcheck(eps, seed, inject_fault),
        Command::Synth {
            task,
            out,
            seed,
            checkpoint,
        } => cmd_synth(task, &out, seed, checkpoint.as_deref()),
        Command::Baseline {
            config,
            kind,
            rounds,
            epochs_per_round,
            seed,
            out,
        } => cmd_baseline(&config, kind, rounds, epochs_per_round, seed, out),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

/// `--out` (or the environment variable), then `run.out_dir`, then `runs`.
fn resolve_out(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli.or_else(|| cfg.run.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let path = dir.join("config.resolved.json");
    fs::write(&path, cfg.to_json_pretty()? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = load_config(config, seed)?;
    let dir = resolve_out(out, &cfg);
    cfg.run.out_dir = Some(dir.clone());
    let prepared = cfg.build_task()?;
    let tc = cfg.train_config(&prepared.task)?;
    create_dir(&dir)?;
    write_resolved(&cfg, &dir)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut writer = JsonlWriter::create(&metrics_path)?;
    let mut write_err = None;
    let state = trainer::train_with(&tc, &prepared.task, |rec| {
        log::info!("epoch {} target_acc {:?} overall {:.5}", rec.epoch, rec.target_acc, rec.losses.overall);
        if write_err.is_none() {
            write_err = writer.write(rec).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", metrics_path.display())));
    }
    save_checkpoint(&state, &prepared.standardizer, &dir.join("checkpoint.bin"))?;
    match state.history.last() {
        Some(last) => println!(
            "trained {} epochs; final target_acc {}; outputs in {}",
            state.history.len(),
            fmt_acc(last.target_acc),
            dir.display()
        ),
        None => println!("trained 0 epochs; outputs in {}", dir.display()),
    }
    Ok(())
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn save_checkpoint(state: &TrainState, standardizer: &discluster::Standardizer, path: &Path) -> anyhow::Result<()> {
    Checkpoint {
        model: state.model.clone(),
        banks: state.banks.clone(),
        standardizer: standardizer.clone(),
    }
    .save(path)
    .with_context(|| format!("writing {}", path.display()))
}

fn cmd_ablate(
    config: &Path,
    trials: Option<usize>,
    seed: Option<u64>,
    variants: Option<Vec<String>>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(t) = trials {
        cfg.run.trials = t;
    }
    cfg.validate()?;
    let variants: Vec<Variant> = match variants {
        Some(ids) => ids.iter().map(|id| Variant::from_id(id.trim())).collect::<Result<_, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let dir = resolve_out(out, &cfg);
    cfg.run.out_dir = Some(dir.clone());
    let prepared = cfg.build_task()?;
    let tc = cfg.train_config(&prepared.task)?;
    create_dir(&dir.join("trials"))?;
    write_resolved(&cfg, &dir)?;

    let rows = run_ablation(&tc, &prepared.task, &variants, cfg.run.trials, |variant, trial, state| {
        let path = dir.join("trials").join(format!("{}_trial{trial}.jsonl", variant.id()));
        let mut w = JsonlWriter::create(&path)?;
        for rec in &state.history {
            w.write(rec)?;
        }
        eprintln!("{:<20} trial {trial}: target_acc {}", variant.id(), fmt_acc(state.history.last().and_then(|r| r.target_acc)));
        Ok(())
    })?;
    write_ablation_csv(&rows, &dir.join("ablation.csv"))?;
    print!("{}", ablation_table(&rows));
    Ok(())
}

fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let trials = rows.first().map_or(0, |r| r.accuracies.len());
    let mut header = vec!["variant".to_string(), "label".into(), "mean".into(), "sd".into()];
    header.extend((0..trials).map(|i| format!("trial_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.id().to_string(), r.variant.label().to_string(), r.mean.to_string(), r.sd.to_string()];
        rec.extend(r.accuracies.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.label().len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>14}\n", "method", "target acc (%)");
    for r in rows {
        let cell = format!("{:.1} ± {:.1}", 100.0 * r.mean, 100.0 * r.sd);
        s.push_str(&format!("{:<width$}  {:>14}\n", r.variant.label(), cell));
    }
    s
}

fn cmd_gradcheck(eps: f64, seed: u64, inject_fault: bool) -> anyhow::Result<()> {
    if !(eps > 0.0) {
        return Err(ConfigError(format!("--eps must be positive, got {eps}")).into());
    }
    let entries = run_suite(&SuiteOptions { eps, seed, inject_fault })?;
    println!("eps = {eps:e}, tolerance = {GRADCHECK_TOLERANCE:e}");
    println!("{:<18} {:>6} {:>14}  status", "term", "layers", "max_rel_error");
    let mut failed = 0;
    for e in &entries {
        let ok = e.report.max_rel_error < GRADCHECK_TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{:<18} {:>6} {:>14.3e}  {}",
            e.term.id(),
            e.classifier_layers,
            e.report.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(anyhow!("gradient check failed for {failed} of {} terms", entries.len()));
    }
    Ok(())
}

fn cmd_synth(task: SynthTask, out: &Path, seed: u64, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let (source, target) = match task {
        SynthTask::TwoMoons => gen_two_moons_shift(&TwoMoonsShift {
            seed,
            ..TwoMoonsShift::default()
        })?,
        SynthTask::Blobs => gen_gaussian_blobs_shift(&BlobsShift {
            seed,
            ..BlobsShift::default()
        })?,
    };
    let ckpt = checkpoint.map(Checkpoint::load).transpose()?;
    create_dir(out)?;
    write_csv(&source, out.join("source.csv"))?;
    write_csv(&target, out.join("target.csv"))?;

    let mut tsv = String::from("x\ty\tlabel\tdomain");
    if ckpt.is_some() {
        tsv.push_str("\tpredicted");
    }
    tsv.push('\n');
    for ds in [&source, &target] {
        let predicted = match &ckpt {
            Some(c) => Some(predict_raw(c, ds)?),
            None => None,
        };
        let labels = ds.labels().unwrap_or(&[]);
        for (i, row) in ds.features().iter_rows().enumerate() {
            tsv.push_str(&format!("{}\t{}\t{}\t{}", row[0], row[1], labels[i], ds.domain_tag()));
            if let Some(p) = &predicted {
                tsv.push_str(&format!("\t{}", p[i]));
            }
            tsv.push('\n');
        }
    }
    let path = out.join("scatter.tsv");
    fs::write(&path, tsv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote source.csv, target.csv, scatter.tsv to {}", out.display());
    Ok(())
}

/// Predictions for raw (unstandardised) features.
fn predict_raw(ckpt: &Checkpoint, ds: &Dataset) -> anyhow::Result<Vec<usize>> {
    let x = ckpt.standardizer.apply(ds.features()).map_err(|e| {
        anyhow!(ConfigError(format!("checkpoint does not match the synthetic task: {e}")))
    })?;
    Ok(ckpt.model.predict(&x)?)
}

fn cmd_baseline(
    config: &Path,
    kind: BaselineKind,
    rounds: usize,
    epochs_per_round: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config, seed)?;
    let dir = resolve_out(out, &cfg);
    cfg.run.out_dir = Some(dir.clone());
    let prepared = cfg.build_task()?;
    let tc = cfg.train_config(&prepared.task)?;
    create_dir(&dir)?;
    write_resolved(&cfg, &dir)?;
    let summary = match kind {
        BaselineKind::Kmeans => {
            let km = KMeansBaselineConfig {
                rounds,
                epochs_per_round,
                ..KMeansBaselineConfig::default()
            };
            let outcome = kmeans_pseudo_baseline(&tc, &prepared.task, &km)?;
            for (i, (net, km)) in outcome.round_accuracy.iter().zip(&outcome.cluster_accuracy).enumerate() {
                println!("round {i}: kmeans partition acc {km:.4}, network target acc {net:.4}");
            }
            serde_json::json!({
                "kind": "kmeans",
                "source_only_accuracy": outcome.source_only_accuracy,
                "round_accuracy": outcome.round_accuracy,
                "cluster_accuracy": outcome.cluster_accuracy,
            })
        }
        BaselineKind::Em => {
            let state = em_baseline(&tc, &prepared.task)?;
            let mut w = JsonlWriter::create(dir.join("metrics.jsonl"))?;
            for rec in &state.history {
                w.write(rec)?;
            }
            let acc = trainer::final_accuracy(&state, &prepared.task)?;
            println!("em baseline: final target acc {acc:.4}");
            serde_json::json!({ "kind": "em", "final_accuracy": acc })
        }
    };
    let path = dir.join("baseline.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
