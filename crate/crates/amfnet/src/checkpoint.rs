//! safetensors checkpoints of a training state.
//!
//! Every parameter and buffer is stored under its hierarchical name as a
//! four-dimensional `f32` array; optimizer velocities are stored under
//! `optim.<name>`. The string metadata carries the configuration, its
//! fingerprint, the epoch counter, the best validation result and the depth
//! divisor.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use amfnet_core::network::AmfNet;
use amfnet_core::nn::Module;
use amfnet_core::tensor::{Shape, Tensor};
use amfnet_core::train::{Sgd, TrainConfig, TrainState};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config;
use crate::error::{Error, Result};

const FORMAT: &str = "amfnet-checkpoint-1";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub fingerprint: String,
    /// Next epoch to run.
    pub epoch: usize,
    pub best: Option<(usize, f64)>,
    pub depth_divisor: f32,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    path: PathBuf,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `state` trained under `config` to `path`.
pub fn save(path: &Path, state: &TrainState<f32>, config: &TrainConfig) -> Result<()> {
    let mut named: Vec<(String, Shape, Vec<u8>)> = Vec::new();
    state.net.visit("", &mut |name, p| named.push((name.to_string(), p.value.shape(), le_bytes(&p.value))));
    for (name, v) in state.optimizer.velocities() {
        named.push((format!("{OPTIM_PREFIX}{name}"), v.shape(), le_bytes(v)));
    }
    let views = named
        .iter()
        .map(|(name, s, bytes)| {
            let view = TensorView::new(Dtype::F32, vec![s.n, s.c, s.h, s.w], bytes).expect("byte length matches shape");
            (name.clone(), view)
        })
        .collect::<Vec<_>>();

    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), config::render(config));
    meta.insert("spec".to_string(), state.net.spec().to_string());
    meta.insert("fingerprint".to_string(), state.net.fingerprint());
    meta.insert("epoch".to_string(), state.epoch.to_string());
    meta.insert("depth_divisor".to_string(), state.depth_divisor.to_string());
    if let Some((epoch, miou)) = state.best {
        meta.insert("best_epoch".to_string(), epoch.to_string());
        meta.insert("best_miou".to_string(), miou.to_string());
    }
    let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, sorted_header(&bytes)).map_err(Error::io(path))
}

/// Rewrites the JSON header with sorted keys so equal states give equal
/// files. Tensor offsets are relative to the data section and stay valid.
fn sorted_header(bytes: &[u8]) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).expect("serializer emits JSON");
    let mut text = serde_json::to_vec(&header).expect("JSON values serialize");
    text.resize(text.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - len);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + len..]);
    out
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| fail(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |key: &str| meta.get(key).ok_or_else(|| fail(format!("missing metadata `{key}`")));
        if get("format")? != FORMAT {
            return Err(fail(format!("unsupported format `{}`", get("format")?)));
        }
        let number = |key: &str| -> Result<f64> { get(key)?.parse::<f64>().map_err(|_| fail(format!("metadata `{key}` is not a number"))) };
        let config = config::parse_text(get("config")?).map_err(|e| fail(format!("stored config: {e}")))?;
        let best = match (meta.get("best_epoch"), meta.get("best_miou")) {
            (Some(_), Some(_)) => Some((number("best_epoch")? as usize, number("best_miou")?)),
            _ => None,
        };
        let depth_divisor = get("depth_divisor")?.parse::<f32>().map_err(|_| fail("bad depth divisor".into()))?;

        let archive = SafeTensors::deserialize(&bytes).map_err(|e| fail(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in archive.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(fail(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
            }
            let &[n, c, h, w] = view.shape() else {
                return Err(fail(format!("tensor `{name}` is not four-dimensional")));
            };
            let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(name, Tensor::from_vec(Shape::new(n, c, h, w), data)?);
        }
        Ok(Checkpoint {
            config,
            fingerprint: get("fingerprint")?.clone(),
            epoch: number("epoch")? as usize,
            best,
            depth_divisor,
            tensors,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Fails unless the checkpoint was trained with `expected` architecture.
    pub fn verify(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Fails unless `config` describes the stored architecture.
    pub fn verify_config(&self, config: &TrainConfig) -> Result<()> {
        self.verify(&config.network().fingerprint(config.variant))
    }

    /// Network with the stored parameters and buffers.
    pub fn network(&self) -> Result<AmfNet<f32>> {
        let mut net = AmfNet::build_variant(self.config.variant, &self.config.network())?;
        self.verify(&net.fingerprint())?;
        let mut problems = Vec::new();
        let mut seen = 0;
        net.visit_mut("", &mut |name, p| match self.tensors.get(name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.clone();
                seen += 1;
            }
            Some(t) => problems.push(format!("`{name}` has shape {}, network expects {}", t.shape(), p.value.shape())),
            None => problems.push(format!("`{name}` is missing")),
        });
        let extra = self.tensors.keys().filter(|k| !k.starts_with(OPTIM_PREFIX)).count().saturating_sub(seen);
        if extra > 0 && problems.is_empty() {
            problems.push(format!("{extra} stored tensors do not belong to the network"));
        }
        if let Some(first) = problems.first() {
            return Err(Error::Checkpoint {
                path: self.path.clone(),
                message: first.clone(),
            });
        }
        Ok(net)
    }

    /// Training state to resume from.
    pub fn state(&self) -> Result<TrainState<f32>> {
        let net = self.network()?;
        let mut optimizer = Sgd::new(self.config.momentum);
        let stored = self.tensors.keys().filter(|k| k.starts_with(OPTIM_PREFIX)).count();
        if stored > 0 {
            let mut velocities = Vec::with_capacity(stored);
            let mut missing = None;
            net.visit("", &mut |name, p| {
                if p.is_trainable() {
                    match self.tensors.get(&format!("{OPTIM_PREFIX}{name}")) {
                        Some(v) if v.shape() == p.value.shape() => velocities.push((name.to_string(), v.clone())),
                        _ => missing = missing.take().or(Some(name.to_string())),
                    }
                }
            });
            if let Some(name) = missing.or_else(|| (velocities.len() != stored).then(|| "extra entries".to_string())) {
                return Err(Error::Checkpoint {
                    path: self.path.clone(),
                    message: format!("optimizer state does not match the network ({name})"),
                });
            }
            optimizer.set_velocities(velocities);
        }
        Ok(TrainState {
            net,
            optimizer,
            epoch: self.epoch,
            best: self.best,
            depth_divisor: self.depth_divisor,
        })
    }
}
