use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mhn::data::{generate_synthetic, load_checkpoint, SyntheticConfig};
use mhn::harness::{
    ablate, evaluate, gradcheck, load_splits, params_report, train, AblationAxis, EvalMetrics,
    RunConfig, TaskData, DEFAULT_SEEDS,
};
use mhn::tensor::Faults;
use mhn::{MhnError, Result};

#[derive(Parser)]
#[command(
    name = "mhn",
    version,
    about = "Multilevel hierarchical network for video question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory that receives `eval.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant along one ablation axis over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// single_scale, scale_order, no_recurrence, high_level_only_pvr, no_weight_sharing or n_scales.
        #[arg(long)]
        axis: String,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Shortcut for the single seed list `[seed]`.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive, module and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the GELU derivative to show the checker fails.
        #[arg(long, hide = true)]
        inject_gelu_fault: bool,
    },
    /// Parameter counts per module, shared and unshared PVR.
    Params {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    GenData {
        /// JSON generator settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.out = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| io(&p, e))
}

fn io(path: &Path, e: std::io::Error) -> MhnError {
    MhnError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn metrics_row(label: &str, m: &EvalMetrics) -> String {
    let mut s = format!("{label:<8} n={:<6} loss={:.4}", m.samples, m.loss);
    if let Some(a) = m.accuracy {
        s += &format!("  accuracy={a:.4}");
    }
    if let (Some(e), Some(b)) = (m.mse, m.baseline_mse) {
        s += &format!("  mse={e:.4}  median-baseline mse={b:.4}");
    }
    for (task, a) in &m.per_task {
        s += &format!("  {}={a:.4}", task.name());
    }
    s
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let outcome = train(&cfg)?;
            println!(
                "{:>5}  {:>10}  {:>10}  {:>8}  {:>9}  {:>8}",
                "epoch", "train", "val loss", "val acc", "val mse", "lr"
            );
            for e in &outcome.log {
                let acc = e.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
                let mse = e.val_mse.map_or("-".into(), |a| format!("{a:.4}"));
                println!(
                    "{:>5}  {:>10.4}  {:>10.4}  {acc:>8}  {mse:>9}  {:>8.2e}",
                    e.epoch, e.train_loss, e.val_loss, e.lr
                );
            }
            println!("best epoch {}", outcome.best_epoch);
            println!("{}", metrics_row("val", &outcome.best_val));
            if let Some(t) = &outcome.test {
                println!("{}", metrics_row("test", t));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed, out)?;
            let (model, store, _) = load_checkpoint(&checkpoint)?;
            let data = TaskData::load(&cfg.data.dir, &cfg.data.tasks)?;
            let expected = data.spec(&model.spec.model);
            if expected != model.spec {
                return Err(MhnError::Contract(format!(
                    "checkpoint {} does not fit the dataset (decoder {} vs {}, feature widths {}+{} vs {}+{}, vocabulary {} vs {})",
                    checkpoint.display(),
                    model.spec.answer.kind(),
                    expected.answer.kind(),
                    model.spec.app_dim,
                    model.spec.mot_dim,
                    expected.app_dim,
                    expected.mot_dim,
                    model.spec.vocab_size,
                    expected.vocab_size
                )));
            }
            let mut splits = load_splits(&model, &data, &cfg.data, &[split.as_str()])?;
            let s = splits.pop().expect("one split");
            let m = evaluate(&model, &store, &s)?;
            println!("{}", metrics_row(&split, &m));
            if let Some(dir) = &cfg.out {
                std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
                let p = dir.join("eval.jsonl");
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| io(&p, e))?;
                let mut line = serde_json::to_value(&m).expect("metrics serialize");
                line["split"] = split.clone().into();
                line["checkpoint"] = checkpoint.display().to_string().into();
                writeln!(f, "{line}").map_err(|e| io(&p, e))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            config,
            axis,
            seeds,
            seed,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_config(&config, None, out)?;
            let seeds = match (seeds, seed) {
                (Some(s), _) => s,
                (None, Some(s)) => vec![s],
                (None, None) => DEFAULT_SEEDS.to_vec(),
            };
            let report = ablate(&cfg, axis, &seeds, |variant, seed, m| {
                eprintln!("{variant} seed {seed}: {:.4}", m.primary());
            })?;
            print!("{}", report.table());
            if cfg.out.is_none() {
                println!(
                    "{}",
                    serde_json::to_string(&report).expect("report serializes")
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            seed,
            out,
            inject_gelu_fault,
        } => {
            let faults = Faults {
                gelu_grad: inject_gelu_fault,
            };
            let report = gradcheck(seed, faults)?;
            print!("{}", report.table());
            println!(
                "worst relative error {:.3e} (threshold {:.0e}), {:.1}s",
                report.worst(),
                report.threshold,
                report.seconds
            );
            if let Some(dir) = out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                write_out(&dir, "gradcheck.json", &text)?;
            }
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("gradient check failed");
                ExitCode::from(1)
            })
        }
        Command::Params { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let data = TaskData::load(&cfg.data.dir, &cfg.data.tasks)?;
            let report = params_report(&data.spec(&cfg.model))?;
            print!("{}", report.table());
            println!(
                "unshared - shared = {} = ({} - 1) x {}",
                report.sharing_delta(),
                report.pvr_levels,
                report.encoder
            );
            if let Some(dir) = &cfg.out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                write_out(dir, "params.json", &text)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData { config, seed, out } => {
            let mut syn: SyntheticConfig = match &config {
                Some(p) => mhn::data::qa::read_json(p)?,
                None => SyntheticConfig::default(),
            };
            if let Some(s) = seed {
                syn.seed = s;
            }
            let summary = generate_synthetic(&syn, &out)?;
            println!(
                "wrote {} videos and {} records to {}",
                summary.videos,
                summary.records,
                out.display()
            );
            println!(
                "majority-object probe: noiseless {:.4}, observed {:.4}",
                summary.probe.noiseless, summary.probe.observed
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
