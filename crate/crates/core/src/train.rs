//! SGD with momentum, exponential per-epoch learning-rate decay, and
//! per-epoch validation with best-epoch tracking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{depth_percentile, make_batch, Sample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::network::{argmax_labels, cross_entropy, AblationSpec, AmfNet, NetworkConfig};
use crate::nn::{Mode, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    /// Multiplier applied to the learning rate once per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub input_hw: (usize, usize),
    pub width_multiplier: f64,
    pub variant: AblationSpec,
    pub class_weights: [f64; NUM_CLASSES],
    /// Random horizontal flips of training samples.
    pub augment: bool,
    /// Depth normalization divisor; the 99th percentile of valid training
    /// depths when unset.
    pub depth_divisor: Option<f32>,
}

impl TrainConfig {
    /// 96×128 inputs, batch 4, 30 epochs, one-eighth width, variant J.
    pub fn desk() -> Self {
        TrainConfig {
            initial_lr: 0.01,
            momentum: 0.9,
            decay: 0.95,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            input_hw: (96, 128),
            width_multiplier: 0.125,
            variant: AblationSpec::all(),
            class_weights: [1.0; NUM_CLASSES],
            augment: true,
            depth_divisor: None,
        }
    }

    /// 288×512 inputs at full width.
    pub fn full() -> Self {
        TrainConfig {
            input_hw: (288, 512),
            width_multiplier: 1.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("initial_lr", self.initial_lr), ("momentum", self.momentum), ("decay", self.decay)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} = {v} must lie in (0,1]")));
            }
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!("input resolution {h}x{w} must be divisible by 32")));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("class weights must be finite and non-negative"));
        }
        if let Some(d) = self.depth_divisor {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid(format!("depth divisor {d} must be positive")));
            }
        }
        Ok(())
    }

    /// Network configuration implied by this training run.
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig::desk_scale(self.input_hw, self.seed).with_width(self.width_multiplier)
    }
}

/// `initial_lr · decay^epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * libm::pow(config.decay, epoch as f64)
}

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocities: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocities: Vec::new(),
        }
    }

    /// Velocities keyed by parameter name, in visit order.
    pub fn velocities(&self) -> &[(String, Tensor<T>)] {
        &self.velocities
    }

    pub fn set_velocities(&mut self, velocities: Vec<(String, Tensor<T>)>) {
        self.velocities = velocities;
    }

    pub fn step<M: Module<T>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        let fresh = self.velocities.is_empty();
        let mut idx = 0;
        let mut err = None;
        let velocities = &mut self.velocities;
        model.visit_mut("", &mut |name, p| {
            if !p.is_trainable() || err.is_some() {
                return;
            }
            if fresh {
                velocities.push((String::from(name), Tensor::zeros(p.value.shape())));
            }
            match velocities.get_mut(idx) {
                Some((n, v)) if n == name && v.shape() == p.value.shape() => {
                    for ((v, &g), w) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
                _ => err = Some(Error::invalid(format!("optimizer state does not match parameter '{name}'"))),
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None if idx != self.velocities.len() => Err(Error::invalid("optimizer state has extra entries")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-pixel loss over the epoch's training samples.
    pub train_loss: f64,
    pub batch_losses: Vec<f64>,
    pub val: MetricsReport,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub net: AmfNet<T>,
    pub optimizer: Sgd<T>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Best validation mIoU so far and its epoch.
    pub best: Option<(usize, f64)>,
    pub depth_divisor: f32,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh network from `config`; the depth divisor comes from `train`
    /// unless fixed in the config.
    pub fn new(config: &TrainConfig, train: &[Sample]) -> Result<Self> {
        config.validate()?;
        let depth_divisor = match config.depth_divisor {
            Some(d) => d,
            None => depth_percentile(train.iter().map(|s| &s.depth), 0.99)?,
        };
        Ok(TrainState {
            net: AmfNet::build_variant(config.variant, &config.network())?,
            optimizer: Sgd::new(config.momentum),
            epoch: 0,
            best: None,
            depth_divisor,
        })
    }
}

/// Accumulates predictions of `net` over `samples` in evaluation mode.
pub fn evaluate<T: Scalar>(net: &mut AmfNet<T>, samples: &[Sample], depth_divisor: f32, batch_size: usize) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut conf = ConfusionMatrix::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (input, labels) = make_batch::<T>(&refs, depth_divisor)?;
        let logits = net.forward(&input, Mode::Eval)?;
        for (pred, gt) in argmax_labels(&logits).iter().zip(&labels) {
            conf.accumulate(pred, gt)?;
        }
    }
    Ok(conf)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F))
}

/// One epoch of SGD. Returns the mean loss and the per-batch losses.
pub fn train_epoch<T: Scalar>(state: &mut TrainState<T>, train: &[Sample], config: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let epoch = state.epoch;
    let lr = lr_at(epoch, config);
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut losses = Vec::new();
    let mut total = 0.0;
    for (batch, idx) in order.chunks(config.batch_size).enumerate() {
        let flipped: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                let flip = config.augment && rng.random_bool(0.5);
                if flip {
                    train[i].flip_horizontal()
                } else {
                    train[i].clone()
                }
            })
            .collect();
        let refs: Vec<&Sample> = flipped.iter().collect();
        let (input, labels) = make_batch::<T>(&refs, state.depth_divisor)?;
        let logits = state.net.forward(&input, Mode::Train)?;
        let (loss, grad) = cross_entropy(&logits, &labels, config.class_weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch });
        }
        state.net.zero_grad();
        state.net.backward(&grad)?;
        state.optimizer.step(&mut state.net, lr)?;
        total += loss * idx.len() as f64;
        losses.push(loss);
    }
    Ok((total / train.len() as f64, losses))
}

/// Runs epochs `state.epoch .. config.epochs`, validating after each one.
/// `on_epoch` sees every record and whether it is the new best (highest
/// validation mIoU, earlier epoch on ties).
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState<T>, bool) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut records = Vec::new();
    while state.epoch < config.epochs {
        let (train_loss, batch_losses) = train_epoch(state, train, config)?;
        let val_report = evaluate(&mut state.net, val, state.depth_divisor, config.batch_size)?.compute()?;
        let record = EpochRecord {
            epoch: state.epoch,
            lr: lr_at(state.epoch, config),
            train_loss,
            batch_losses,
            val: val_report,
        };
        let is_best = state.best.is_none_or(|(_, m)| val_report.m_iou > m);
        if is_best {
            state.best = Some((state.epoch, val_report.m_iou));
        }
        state.epoch += 1;
        on_epoch(&record, state, is_best)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthParams};
    use crate::nn::{rng_from_seed, Linear, Param};
    use crate::tensor::Shape;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::desk();
        assert_eq!(lr_at(0, &c), 0.01);
        assert!((lr_at(1, &c) - 0.0095).abs() < 1e-15);
        assert!((lr_at(10, &c) - 0.01 * 0.95f64.powi(10)).abs() < 1e-15);
        assert!((lr_at(10, &c) - 0.0059874).abs() < 1e-7);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig { decay: 1.5, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { momentum: 0.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { input_hw: (100, 128), ..TrainConfig::desk() }.validate().is_err());
    }

    #[test]
    fn sgd_matches_hand_momentum() {
        let mut lin = Linear::<f64>::new(2, 1, false, &mut rng_from_seed(1));
        let w0 = lin.weight.value.clone();
        let mut opt = Sgd::new(0.9);
        lin.weight.grad = Tensor::from_vec(Shape::new(1, 2, 1, 1), alloc::vec![1.0, -2.0]).unwrap();
        opt.step(&mut lin, 0.1).unwrap();
        opt.step(&mut lin, 0.1).unwrap();
        // v1 = g, v2 = 0.9 g + g
        let want: Vec<f64> = w0.data().iter().zip([1.0, -2.0]).map(|(w, g)| w - 0.1 * g - 0.1 * 1.9 * g).collect();
        for (a, b) in lin.weight.value.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut other = Param::<f64>::new(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(opt.step(&mut other, 0.1).is_err());
    }

    #[test]
    fn short_run_is_reproducible_and_tracks_best() {
        let params = SynthParams { height: 32, width: 64, ..SynthParams::desk(3) };
        let data = synth_corpus(&params, 4).unwrap();
        let config = TrainConfig {
            input_hw: (32, 64),
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let run = || {
            let mut state = TrainState::<f32>::new(&config, &data).unwrap();
            let mut bests = Vec::new();
            let log = train(&mut state, &data, &data[..2], &config, |r, _, best| {
                bests.push((r.epoch, best));
                Ok(())
            })
            .unwrap();
            (log, bests, state.epoch)
        };
        let (a, bests, epoch) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert_eq!(epoch, 2);
        assert_eq!(bests[0], (0, true));
        assert_eq!(bests[1].1, a[1].val.m_iou > a[0].val.m_iou);
        for r in &a {
            assert_eq!(r.lr, lr_at(r.epoch, &config));
            assert_eq!(r.batch_losses.len(), 2);
            assert!(r.train_loss.is_finite());
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let params = SynthParams { height: 32, width: 32, ..SynthParams::desk(3) };
        let data = synth_corpus(&params, 2).unwrap();
        let config = TrainConfig {
            input_hw: (32, 32),
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::desk()
        };
        let mut state = TrainState::<f32>::new(&config, &data).unwrap();
        state.net.head.visit_mut("", &mut |_, p| p.value.fill(f32::NAN));
        let err = train(&mut state, &data, &data, &config, |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }));
    }
}
