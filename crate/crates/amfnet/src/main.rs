use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amfnet::checkpoint::Checkpoint;
use amfnet::dataset::{Dataset, Split};
use amfnet::{config, report, run, Error, Result};
use amfnet_core::data::{SynthParams, DEFAULT_SPLIT};
use amfnet_core::network::AblationSpec;
use amfnet_core::train::{EpochRecord, TrainConfig};
use clap::{Args, Parser, Subcommand};

/// RGB-D road segmentation with adaptive-mask fusion.
#[derive(Parser)]
#[command(name = "amfnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with a split manifest.
    Synth(SynthArgs),
    /// Train a network; writes config.txt, log.jsonl and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint's epoch counter and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on one split and print the metrics table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write report.txt, report.json and config.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Settings the checkpoint must match.
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and validate every ablation row under one configuration.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row letters to run, e.g. "AJ"; all ten by default.
        #[arg(long)]
        rows: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment one image pair; writes labels.png and overlay.png.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render validity masks of a depth image, and optionally the fusion
    /// weights a checkpoint assigns to it.
    Maskvis {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "rgb")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        rgb: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    invalid_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long)]
    obstacles: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Seed of the train/val/test shuffle; defaults to --seed.
    #[arg(long)]
    split_seed: Option<u64>,
}

/// Layered on top of the defaults and the config file.
#[derive(Args, Default)]
struct Overrides {
    /// Plain-text `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Row letter (A-J) or five characters of '+'/'A', stage 1 first.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.variant.is_none()
            && self.width.is_none()
            && self.epochs.is_none()
            && self.batch_size.is_none()
            && self.lr.is_none()
            && self.seed.is_none()
            && self.set.is_empty()
    }

    fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = base;
        if let Some(path) = &self.config {
            config::apply_file(&mut c, path)?;
        }
        let mut pairs: Vec<(String, String)> = Vec::new();
        let flags = [
            ("variant", self.variant.clone()),
            ("width", self.width.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("initial_lr", self.lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, found `{kv}`")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        for (k, v) in pairs {
            config::apply(&mut c, &k, &v).map_err(Error::Usage)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_epoch(prefix: &str, r: &EpochRecord, best: bool) {
    println!(
        "{prefix}epoch {:>3}  lr {:.6}  loss {:.4}  val mIoU {:.2}%{}",
        r.epoch,
        r.lr,
        r.train_loss,
        100.0 * r.val.m_iou,
        if best { "  *" } else { "" }
    );
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let defaults = SynthParams::desk(a.seed);
            let params = SynthParams {
                height: a.height,
                width: a.width,
                invalid_fraction: a.invalid_fraction,
                obstacle_count: a.obstacles.unwrap_or(defaults.obstacle_count),
                noise_level: a.noise.unwrap_or(defaults.noise_level),
                ..defaults
            };
            let m = run::synth(&a.out, &params, a.count, a.split_seed.unwrap_or(a.seed), DEFAULT_SPLIT)?;
            println!(
                "wrote {} samples to {} (train {}, val {}, test {})",
                a.count,
                a.out.display(),
                m.train.len(),
                m.val.len(),
                m.test.len()
            );
        }
        Command::Train {
            data,
            out,
            resume,
            overrides,
        } => {
            let base = match &resume {
                Some(path) => Checkpoint::read(path)?.config,
                None => TrainConfig::desk(),
            };
            let cfg = overrides.apply(base)?;
            let dataset = Dataset::open(&data)?;
            let outcome = run::train(&dataset, &cfg, &out, resume.as_deref(), &mut |r, best| print_epoch("", r, best))?;
            if let Some((epoch, miou)) = outcome.best {
                println!("best epoch {epoch}: val mIoU {:.2}%", 100.0 * miou);
            }
            println!("checkpoint {}", outcome.best_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            overrides,
        } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            if !overrides.is_empty() {
                ckpt.verify_config(&overrides.apply(ckpt.config.clone())?)?;
            }
            let split: Split = split.parse()?;
            let report = run::eval(&ckpt, &Dataset::open(&data)?, split)?;
            let table = report::metrics_table(&[(ckpt.config.variant.to_string(), report)]);
            print!("{table}");
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
                write(&out.join("report.txt"), &table)?;
                let json = serde_json::to_string_pretty(&report::metrics_json(&report)).expect("plain values");
                write(&out.join("report.json"), &(json + "\n"))?;
                write(&out.join(run::CONFIG_ECHO), &config::render(&ckpt.config))?;
            }
        }
        Command::Ablate {
            data,
            out,
            rows,
            overrides,
        } => {
            let cfg = overrides.apply(TrainConfig::desk())?;
            let rows = match rows {
                None => run::all_rows(),
                Some(letters) => letters
                    .chars()
                    .map(|c| AblationSpec::from_row(c).map(|s| (c, s)))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            };
            let table = run::ablate(&Dataset::open(&data)?, &cfg, &out, &rows, &mut |label, r, best| {
                print_epoch(&format!("[{label}] "), r, best)
            })?;
            print!("{}", report::ablation_table(&table));
        }
        Command::Predict {
            checkpoint,
            rgb,
            depth,
            out,
        } => {
            let labels = run::predict(&Checkpoint::read(&checkpoint)?, &rgb, &depth, &out)?;
            println!("wrote {}x{} prediction to {}", labels.height(), labels.width(), out.display());
        }
        Command::Maskvis {
            depth,
            out,
            checkpoint,
            rgb,
        } => {
            let ckpt = checkpoint.as_deref().map(Checkpoint::read).transpose()?;
            let network = ckpt.as_ref().zip(rgb.as_deref());
            for w in run::maskvis(&depth, &out, network)? {
                println!(
                    "stage {} w_rgb {:.6} w_depth {:.6} sum {:.6}",
                    w.stage,
                    w.w_rgb,
                    w.w_depth,
                    w.w_rgb + w.w_depth
                );
            }
            println!("masks written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
