use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use langseg::data::dataset::subset;
use langseg::data::scene::SceneConfig;
use langseg::data::{generate, load_dataset, write_dataset, GenConfig, Split};
use langseg::experiment::{ablation_rows, fit, run_row, Ablation, EpochLog, ReportRow};
use langseg::train::{evaluate, load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use langseg::verify::{component_names, gradcheck_suite};
use langseg::{ModelConfig, PromptMode};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "langseg", version, about = "Language-guided segmentation on synthetic scenes")]
struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, env = "LGS_SEED")]
    seed: Option<u64>,

    /// JSON file of training settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Size of the pool split 80/20 into train and val.
        #[arg(long, default_value_t = 512)]
        n_train: usize,
        #[arg(long, default_value_t = 128)]
        n_test: usize,
    },
    /// Train a model, keeping the checkpoint with the best validation Dice.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Best-validation checkpoint; the latest state goes to `<out>.last`.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON-lines training log; defaults to standard output.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Report accuracy, Dice and Jaccard of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Check analytic gradients of every layer type against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run one ablation study and emit a JSON-lines report.
    Ablate {
        #[arg(long)]
        kind: Ablation,
        #[arg(long)]
        data: PathBuf,
        /// Report file; defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    prompt_mode: Option<PromptMode>,
    /// Number of guide decoders, counted from the deepest stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
    decoders: Option<u8>,
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    zoom_prob: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { cfg.$field = v; })* };
        }
        set!(batch_size, epochs, lr_max, lr_min, weight_decay, prompt_mode, data_fraction, zoom_prob);
        if let Some(k) = self.decoders {
            cfg.guide_decoder_count = k as usize;
        }
        cfg
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<langseg::Error>() {
        Some(langseg::Error::Config(_)) => EXIT_USAGE,
        Some(_) => EXIT_RUNTIME,
        None if e.downcast_ref::<Usage>().is_some() => EXIT_USAGE,
        None => EXIT_RUNTIME,
    }
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run(cli: Cli) -> Result<ExitCode> {
    let base = base_config(&cli)?;
    match cli.command {
        Command::GenData { out, n_train, n_test } => {
            let cfg = GenConfig { n_train, n_test, seed: base.seed, scene: SceneConfig::default() };
            let data = generate(&cfg)?;
            write_dataset(&out, &data).with_context(|| format!("writing dataset to {}", out.display()))?;
            println!(
                "{}",
                serde_json::json!({"out": out, "seed": cfg.seed, "train": data.train.len(), "val": data.val.len(), "test": data.test.len()})
            );
        }
        Command::Train { data, out, resume, log, train } => {
            let cfg = train.apply(base);
            cmd_train(&data, &out, resume.as_deref(), log.as_deref(), cfg)?;
        }
        Command::Eval { ckpt, data, split } => {
            let trainer = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = load_dataset(&data)?;
            let report = evaluate(&trainer.model, data.split(split))?;
            let row = ReportRow::new(format!("eval-{split}"), report.metrics, &trainer.config);
            println!("{}", serde_json::to_string(&row)?);
        }
        Command::Gradcheck { inject_fault } => {
            if let Some(name) = &inject_fault {
                if !component_names().contains(&name.as_str()) {
                    return Err(Usage(format!("unknown component {name:?}")).into());
                }
            }
            let report = gradcheck_suite(base.seed, inject_fault.as_deref())?;
            for c in &report.components {
                let line = serde_json::json!({"component": c.component, "max_rel_error": c.max_rel_error, "passed": c.passed});
                println!("{line}");
            }
            let failed = report.components.iter().filter(|c| !c.passed).count();
            eprintln!("{} of {} components passed (eps {}, tol {})", report.components.len() - failed, report.components.len(), report.eps, report.tol);
            if failed > 0 {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
        Command::Ablate { kind, data, out, train } => {
            let cfg = train.apply(base);
            cfg.validate()?;
            let data = load_dataset(&data)?;
            let mut sink = output(out.as_deref())?;
            for (label, row_cfg) in ablation_rows(kind, &cfg) {
                eprintln!("{kind} {label}: {}", serde_json::to_string(&row_cfg)?);
                let row = run_row(&label, &row_cfg, &ModelConfig::default(), &data, |_, e, _| {
                    eprintln!("  epoch {} loss {:.4} val_dice {:.4}", e.epoch, e.loss, e.val_dice);
                    Ok(())
                })?;
                writeln!(sink, "{}", serde_json::to_string(&row)?)?;
                sink.flush()?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn base_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn last_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".last");
    out.with_file_name(name)
}

fn cmd_train(data: &Path, out: &Path, resume: Option<&Path>, log: Option<&Path>, cfg: TrainConfig) -> Result<()> {
    let data = load_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            cfg.validate()?;
            let n = subset(&data.train, cfg.data_fraction, cfg.seed)?.len();
            Trainer::new(cfg, &ModelConfig::default(), n)?
        }
    };
    let train = subset(&data.train, trainer.config.data_fraction, trainer.config.seed)?;
    if trainer.finished() {
        bail!(Usage(format!("checkpoint already completed {} epochs", trainer.epoch)));
    }
    eprintln!("config: {}", serde_json::to_string(&trainer.config)?);
    let mut sink = output(log)?;
    let last = last_path(out);
    let mut write_log = |t: &Trainer, entry: &EpochLog, improved: bool| -> langseg::Result<()> {
        if improved {
            save_checkpoint(t, out)?;
        }
        save_checkpoint(t, &last)?;
        writeln!(sink, "{}", serde_json::to_string(entry)?)?;
        sink.flush()?;
        Ok(())
    };
    let fit = fit(&mut trainer, &train, &data.val, &mut write_log)?;
    if let Some(epoch) = fit.best_epoch {
        eprintln!("best val dice {:.4} at epoch {epoch}", trainer.best_val_dice.unwrap_or_default());
    }
    Ok(())
}
