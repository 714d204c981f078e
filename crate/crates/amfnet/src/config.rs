//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Values given later
//! override earlier ones, so defaults, a config file and command-line flags
//! are layered by applying them in that order.

use std::fmt::Write as _;
use std::path::Path;

use amfnet_core::network::AblationSpec;
use amfnet_core::train::TrainConfig;

use crate::error::{Error, Result};

/// Every key understood by [`apply`], in the order [`render`] writes them.
pub const KEYS: [&str; 13] = [
    "variant",
    "width",
    "height_px",
    "width_px",
    "initial_lr",
    "momentum",
    "decay",
    "epochs",
    "batch_size",
    "seed",
    "class_weights",
    "augment",
    "depth_divisor",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("`{value}` is not a valid value for {key}"))
}

/// Sets one field. Unknown keys are rejected.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let value = value.trim();
    match key.trim() {
        "variant" => config.variant = value.parse::<AblationSpec>().map_err(|e| e.to_string())?,
        "width" => config.width_multiplier = parse(key, value)?,
        "height_px" => config.input_hw.0 = parse(key, value)?,
        "width_px" => config.input_hw.1 = parse(key, value)?,
        "initial_lr" => config.initial_lr = parse(key, value)?,
        "momentum" => config.momentum = parse(key, value)?,
        "decay" => config.decay = parse(key, value)?,
        "epochs" => config.epochs = parse(key, value)?,
        "batch_size" => config.batch_size = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "class_weights" => {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!("class_weights needs three comma-separated values, found `{value}`"));
            }
            for (w, p) in config.class_weights.iter_mut().zip(parts) {
                *w = parse(key, p)?;
            }
        }
        "augment" => config.augment = parse(key, value)?,
        "depth_divisor" => {
            config.depth_divisor = match value {
                "auto" => None,
                v => Some(parse(key, v)?),
            }
        }
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

/// Applies every assignment in `text`.
pub fn apply_text(config: &mut TrainConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        apply(config, key, value).map_err(|message| Error::Config { line: i + 1, message })?;
    }
    Ok(())
}

pub fn apply_file(config: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    apply_text(config, &text).map_err(|e| match e {
        Error::Config { line, message } => Error::file(path, format!("line {line}: {message}")),
        e => e,
    })
}

/// Full configuration in the file format; `apply_text` on the result
/// reproduces `config` exactly.
pub fn render(config: &TrainConfig) -> String {
    let mut s = String::new();
    let [w0, w1, w2] = config.class_weights;
    let divisor = config.depth_divisor.map_or_else(|| "auto".to_string(), |d| d.to_string());
    let values = [
        config.variant.to_string(),
        config.width_multiplier.to_string(),
        config.input_hw.0.to_string(),
        config.input_hw.1.to_string(),
        config.initial_lr.to_string(),
        config.momentum.to_string(),
        config.decay.to_string(),
        config.epochs.to_string(),
        config.batch_size.to_string(),
        config.seed.to_string(),
        format!("{w0},{w1},{w2}"),
        config.augment.to_string(),
        divisor,
    ];
    for (k, v) in KEYS.iter().zip(values) {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn parse_text(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::desk();
    apply_text(&mut config, text)?;
    Ok(config)
}
