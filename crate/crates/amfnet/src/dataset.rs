//! On-disk corpus layout: `root/{rgb,depth,labels}/<id>.png` plus
//! `root/manifest.json` listing the ids of each split.

use std::fs;
use std::path::{Path, PathBuf};

use amfnet_core::data::{self, Sample, SynthParams};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::png;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// Generator settings recorded for synthetic corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub height: usize,
    pub width: usize,
    pub invalid_fraction: f64,
    pub road_fraction: f64,
    pub obstacle_count: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl From<&SynthParams> for SynthRecord {
    fn from(p: &SynthParams) -> Self {
        SynthRecord {
            height: p.height,
            width: p.width,
            invalid_fraction: p.invalid_fraction,
            road_fraction: p.road_fraction,
            obstacle_count: p.obstacle_count,
            noise_level: p.noise_level,
            seed: p.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split_seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthRecord>,
}

impl Manifest {
    /// Shuffled split of `ids`.
    pub fn split(ids: &[String], seed: u64, ratios: [f64; 3]) -> Result<Self> {
        let [train, val, test] = data::split(ids, seed, ratios)?;
        Ok(Manifest {
            split_seed: seed,
            ratios,
            train,
            val,
            test,
            synth: None,
        })
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

pub fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("rgb").join(format!("{id}.png"))
}

pub fn depth_path(root: &Path, id: &str) -> PathBuf {
    root.join("depth").join(format!("{id}.png"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.png"))
}

/// Reads and validates one sample.
pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let rgb_file = rgb_path(root, id);
    let rgb = png::read_rgb(&rgb_file)?;
    let depth = png::read_depth(&depth_path(root, id))?;
    let label = png::read_labels(&label_path(root, id))?;
    Sample::new(id, rgb, depth, label).map_err(|e| Error::file(rgb_file, e.to_string()))
}

pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    png::write_rgb(&rgb_path(root, &sample.id), &sample.rgb)?;
    png::write_depth(&depth_path(root, &sample.id), &sample.depth)?;
    png::write_labels(&label_path(root, &sample.id), &sample.label)
}

fn create_dirs(root: &Path) -> Result<()> {
    for sub in ["rgb", "depth", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(Error::io(dir))?;
    }
    Ok(())
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json { path: path.clone(), source })?;
    fs::write(&path, text + "\n").map_err(Error::io(path))
}

/// Writes a synthetic corpus and its manifest under `root`.
pub fn write_synth_corpus(root: &Path, params: &SynthParams, count: usize, split_seed: u64, ratios: [f64; 3]) -> Result<Manifest> {
    let samples = data::synth_corpus(params, count)?;
    create_dirs(root)?;
    for s in &samples {
        write_sample(root, s)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut manifest = Manifest::split(&ids, split_seed, ratios)?;
    manifest.synth = Some(params.into());
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

impl Dataset {
    /// Opens `root`. Without a manifest every id under `rgb/` is split with
    /// seed 0 and the default ratios.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
            serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?
        } else {
            let dir = root.join("rgb");
            let mut ids = Vec::new();
            for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
                let p = entry.map_err(Error::io(&dir))?.path();
                if p.extension().is_some_and(|e| e == "png") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
            ids.sort();
            if ids.is_empty() {
                return Err(Error::file(dir, "no PNG files"));
            }
            Manifest::split(&ids, 0, data::DEFAULT_SPLIT)?
        };
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Samples of `split` in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.ids(split).iter().map(|id| load_sample(&self.root, id)).collect()
    }
}
