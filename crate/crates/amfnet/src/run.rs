//! Experiment runners behind the command-line subcommands. Every runner
//! writes only under the output directory it is given.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use amfnet_core::data::SynthParams;
use amfnet_core::maskgen::{build_pyramid, generate_mask, stage_shapes};
use amfnet_core::metrics::MetricsReport;
use amfnet_core::network::{AblationSpec, AmfNet, NetworkInput, ABLATION_ROWS};
use amfnet_core::nn::{Mode, Module};
use amfnet_core::train::{self, evaluate, EpochRecord, TrainConfig, TrainState};
use amfnet_core::types::{LabelMap, StageIndex};

use crate::checkpoint::{self, Checkpoint};
use crate::config;
use crate::dataset::{self, Dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::png;
use crate::report::{self, AblationRow, EpochLine};

pub const CONFIG_ECHO: &str = "config.txt";
pub const LOG: &str = "log.jsonl";
pub const BEST: &str = "best.safetensors";
pub const LAST: &str = "last.safetensors";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

pub fn synth(out: &Path, params: &SynthParams, count: usize, split_seed: u64, ratios: [f64; 3]) -> Result<Manifest> {
    create_dir(out)?;
    dataset::write_synth_corpus(out, params, count, split_seed, ratios)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best: Option<(usize, f64)>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on the dataset's train split, validating on its val split.
///
/// Writes the effective configuration, a JSON-lines epoch log, the latest
/// state and the best-validation state into `out`. With `resume`, training
/// continues from that checkpoint's epoch counter and the log is appended.
/// `progress` sees each epoch record and whether it is the new best.
pub fn train(
    data: &Dataset,
    config: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord, bool),
) -> Result<TrainOutcome> {
    create_dir(out)?;
    write_text(&out.join(CONFIG_ECHO), &config::render(config))?;
    let train_set = data.load(Split::Train)?;
    let val_set = data.load(Split::Val)?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            ckpt.verify_config(config)?;
            ckpt.state()?
        }
        None => TrainState::new(config, &train_set)?,
    };
    let log_path = out.join(LOG);
    let mut log: File = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let best_path = out.join(BEST);
    let last_path = out.join(LAST);
    let mut failure = None;
    let result = train::train(&mut state, &train_set, &val_set, config, |record, state, is_best| {
        progress(record, is_best);
        let line = serde_json::to_string(&EpochLine::from(record)).expect("plain numeric record");
        let written = writeln!(log, "{line}")
            .map_err(Error::io(&log_path))
            .and_then(|()| checkpoint::save(&last_path, state, config))
            .and_then(|()| if is_best { checkpoint::save(&best_path, state, config) } else { Ok(()) });
        written.map_err(|e| {
            failure = Some(e);
            amfnet_core::Error::InvalidArgument("could not write training outputs".into())
        })
    });
    let records = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    Ok(TrainOutcome {
        records,
        best: state.best,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
    })
}

/// Evaluates a checkpoint on one split.
pub fn eval(ckpt: &Checkpoint, data: &Dataset, split: Split) -> Result<MetricsReport> {
    let mut net = ckpt.network()?;
    let samples = data.load(split)?;
    Ok(evaluate(&mut net, &samples, ckpt.depth_divisor, ckpt.config.batch_size)?.compute()?)
}

/// Trains and validates every ablation row under one configuration.
/// Each row gets its own subdirectory of `out`; the combined table is
/// written as `ablation.txt` and `ablation.json`.
pub fn ablate(
    data: &Dataset,
    base: &TrainConfig,
    out: &Path,
    rows: &[(char, AblationSpec)],
    progress: &mut dyn FnMut(char, &EpochRecord, bool),
) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    write_text(&out.join(CONFIG_ECHO), &config::render(base))?;
    let mut table = Vec::new();
    for &(label, spec) in rows {
        let config = TrainConfig { variant: spec, ..base.clone() };
        let outcome = train(data, &config, &out.join(label.to_string()), None, &mut |r, best| progress(label, r, best))?;
        let (best_epoch, _) = outcome.best.expect("at least one epoch ran");
        let params = AmfNet::<f32>::build_variant(spec, &config.network())?.num_parameters();
        table.push(AblationRow {
            label,
            spec: spec.to_string(),
            params,
            best_epoch,
            report: outcome.records[best_epoch].val,
        });
    }
    write_text(&out.join("ablation.txt"), &report::ablation_table(&table))?;
    let json = serde_json::to_string_pretty(&report::ablation_json(&table)).expect("plain values");
    write_text(&out.join("ablation.json"), &(json + "\n"))?;
    Ok(table)
}

pub fn all_rows() -> Vec<(char, AblationSpec)> {
    ABLATION_ROWS.to_vec()
}

/// Segments one image pair and writes `labels.png` and `overlay.png`.
pub fn predict(ckpt: &Checkpoint, rgb: &Path, depth: &Path, out: &Path) -> Result<LabelMap> {
    let mut net = ckpt.network()?;
    let rgb_img = png::read_rgb(rgb)?;
    let depth_img = png::read_depth(depth)?;
    let labels = net
        .predict(&rgb_img, &depth_img, ckpt.depth_divisor)
        .map_err(|e| Error::file(rgb, e.to_string()))?
        .argmax();
    create_dir(out)?;
    png::write_labels(&out.join("labels.png"), &labels)?;
    png::write_overlay(&out.join("overlay.png"), &rgb_img, &labels, 0.6)?;
    Ok(labels)
}

/// Per-stage adaptive weights of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub stage: StageIndex,
    pub w_rgb: f64,
    pub w_depth: f64,
    pub m_depth_mean: f64,
}

/// Writes the validity mask of `depth` at full resolution and at every
/// stage resolution. With a checkpoint and RGB image, also runs the network
/// and writes the adaptive fusion weights to `weights.txt`.
pub fn maskvis(depth: &Path, out: &Path, network: Option<(&Checkpoint, &Path)>) -> Result<Vec<StageWeights>> {
    let depth_img = png::read_depth(depth)?;
    let mask = generate_mask(&depth_img).map_err(|e| Error::file(depth, e.to_string()))?;
    create_dir(out)?;
    png::write_mask(&out.join("mask.png"), &mask)?;
    let shapes = stage_shapes(mask.height(), mask.width()).map_err(|e| Error::file(depth, e.to_string()))?;
    let pyramid = build_pyramid(&mask, &shapes)?;
    for stage in StageIndex::all() {
        png::write_mask(&out.join(format!("mask_stage{stage}.png")), pyramid.level(stage))?;
    }
    let Some((ckpt, rgb)) = network else {
        return Ok(Vec::new());
    };
    let rgb_img = png::read_rgb(rgb)?;
    let mut net = ckpt.network()?;
    let input = NetworkInput::<f32>::from_images(&[(&rgb_img, &depth_img)], ckpt.depth_divisor).map_err(|e| Error::file(rgb, e.to_string()))?;
    net.forward(&input, Mode::Eval)?;
    let weights: Vec<StageWeights> = net
        .fusion_diagnostics()
        .into_iter()
        .map(|(stage, d)| StageWeights {
            stage,
            w_rgb: d.w_rgb[0],
            w_depth: d.w_depth[0],
            m_depth_mean: d.m_depth_mean,
        })
        .collect();
    let mut text = String::new();
    for w in &weights {
        text += &format!(
            "stage {} w_rgb {:.6} w_depth {:.6} m_depth_mean {:.6}\n",
            w.stage, w.w_rgb, w.w_depth, w.m_depth_mean
        );
    }
    write_text(&out.join("weights.txt"), &text)?;
    Ok(weights)
}
