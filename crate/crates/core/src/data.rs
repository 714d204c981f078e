//! Samples, splits, batching and the synthetic road-scene generator.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::NetworkInput;
use crate::scalar::Scalar;
use crate::types::{DepthImage, LabelMap, RgbImage};

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const NEGATIVE_OBSTACLE: u8 = 2;

/// An aligned RGB / depth / label triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, rgb: RgbImage, depth: DepthImage, label: LabelMap) -> Result<Self> {
        let hw = (rgb.height(), rgb.width());
        for (what, other) in [("depth", (depth.height(), depth.width())), ("label", (label.height(), label.width()))] {
            if other != hw {
                return Err(Error::invalid(format!(
                    "{what} is {}x{} but rgb is {}x{}",
                    other.0, other.1, hw.0, hw.1
                )));
            }
        }
        depth.validate()?;
        Ok(Sample {
            id: id.into(),
            rgb,
            depth,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    /// Mirrors all three grids together.
    pub fn flip_horizontal(&self) -> Self {
        Sample {
            id: self.id.clone(),
            rgb: self.rgb.flip_horizontal(),
            depth: self.depth.flip_horizontal(),
            label: self.label.flip_horizontal(),
        }
    }
}

/// Stacks samples into network input plus per-sample labels.
pub fn make_batch<T: Scalar>(samples: &[&Sample], depth_divisor: f32) -> Result<(NetworkInput<T>, Vec<LabelMap>)> {
    let pairs: Vec<_> = samples.iter().map(|s| (&s.rgb, &s.depth)).collect();
    let input = NetworkInput::from_images(&pairs, depth_divisor)?;
    Ok((input, samples.iter().map(|s| s.label.clone()).collect()))
}

/// Nearest-rank percentile of the non-zero depth readings.
pub fn depth_percentile<'a>(depths: impl IntoIterator<Item = &'a DepthImage>, q: f64) -> Result<f32> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("percentile {q} outside (0,1]")));
    }
    let mut values: Vec<f32> = depths
        .into_iter()
        .flat_map(|d| d.data().iter().copied())
        .filter(|&v| v > 0.0 && v.is_finite())
        .collect();
    if values.is_empty() {
        return Err(Error::Empty("valid depth readings"));
    }
    let rank = (libm::ceil(q * values.len() as f64) as usize).clamp(1, values.len()) - 1;
    let (_, v, _) = values.select_nth_unstable_by(rank, f32::total_cmp);
    Ok(*v)
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.5, 0.25, 0.25];

/// Seeded shuffle, then train / val / test of sizes `round(n·r₀)`,
/// `round(n·r₁)` and the remainder.
pub fn split<I: Clone>(ids: &[I], seed: u64, ratios: [f64; 3]) -> Result<[Vec<I>; 3]> {
    if ids.is_empty() {
        return Err(Error::Empty("id list"));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n0 = (libm::round(n as f64 * ratios[0]) as usize).min(n);
    let n1 = (libm::round(n as f64 * ratios[1]) as usize).min(n - n0);
    let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok([pick(&order[..n0]), pick(&order[n0..n0 + n1]), pick(&order[n0 + n1..])])
}

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    /// Fraction of pixels with zero depth, in `[0, 1]`.
    pub invalid_fraction: f64,
    /// Fraction of the image covered by road, in `(0, 1)`.
    pub road_fraction: f64,
    pub obstacle_count: usize,
    /// Standard deviation of RGB noise (in `[0, 1]` units); depth noise
    /// scales with it.
    pub noise_level: f64,
    pub seed: u64,
}

impl SynthParams {
    /// 96×128 scene with three obstacles and no invalid depth.
    pub fn desk(seed: u64) -> Self {
        SynthParams {
            height: 96,
            width: 128,
            invalid_fraction: 0.0,
            road_fraction: 0.35,
            obstacle_count: 3,
            noise_level: 0.03,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::invalid(format!(
                "synthetic resolution {}x{} must be positive and divisible by 32",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.invalid_fraction) {
            return Err(Error::invalid(format!("invalid_fraction {} outside [0,1]", self.invalid_fraction)));
        }
        if !(self.road_fraction > 0.0 && self.road_fraction < 1.0) {
            return Err(Error::invalid(format!("road_fraction {} outside (0,1)", self.road_fraction)));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::invalid(format!("noise_level {} must be non-negative", self.noise_level)));
        }
        Ok(())
    }

    /// Number of zero-depth pixels the scene will contain.
    pub fn invalid_count(&self) -> usize {
        let total = self.height * self.width;
        (libm::ceil(self.invalid_fraction * total as f64) as usize).min(total)
    }
}

const ROAD_TOP: f64 = 0.12;
const ROAD_BOTTOM: f64 = 0.95;
const NEAR_MM: f64 = 1500.0;
const FAR_MM: f64 = 8000.0;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Squared normalized radius; inside when < 1.
    fn r2(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        dy * dy + dx * dx
    }

    fn area(&self) -> f64 {
        core::f64::consts::PI * self.rx * self.ry
    }
}

fn random_ellipses(rng: &mut ChaCha8Rng, count: usize, road: &[usize], h: usize, w: usize) -> Vec<Ellipse> {
    let scale = h as f64 / 96.0;
    (0..count)
        .map(|_| {
            let i = road[rng.random_range(0..road.len())];
            let ry = rng.random_range(5.0..10.0) * scale;
            Ellipse {
                cy: (i / w) as f64,
                cx: (i % w) as f64,
                ry,
                rx: ry * rng.random_range(1.4..2.2),
            }
        })
        .collect()
}

/// Grows `count` zero pixels as random BFS blobs.
fn invalid_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<bool> {
    let total = h * w;
    let mut invalid = vec![false; total];
    let mut placed = 0;
    let blob_max = (total / 40).max(8);
    while placed < count {
        let mut seed = rng.random_range(0..total);
        while invalid[seed] {
            seed = (seed + 1) % total;
        }
        let target = (count - placed).min(rng.random_range(blob_max / 4..=blob_max));
        let mut frontier = VecDeque::from([seed]);
        let mut grown = 0;
        while grown < target {
            let Some(i) = frontier.pop_front() else { break };
            if invalid[i] {
                continue;
            }
            invalid[i] = true;
            grown += 1;
            let (y, x) = (i / w, i % w);
            let mut next = [None; 4];
            if y > 0 {
                next[0] = Some(i - w);
            }
            if y + 1 < h {
                next[1] = Some(i + w);
            }
            if x > 0 {
                next[2] = Some(i - 1);
            }
            if x + 1 < w {
                next[3] = Some(i + 1);
            }
            next.shuffle(rng);
            frontier.extend(next.into_iter().flatten().filter(|&j| !invalid[j]));
        }
        placed += grown;
    }
    invalid
}

/// Generates one scene: a trapezoid road, dark elliptical depressions
/// labeled as negative obstacles, look-alike shadows that leave depth
/// untouched, ground-plane depth in millimeters, and exactly
/// [`SynthParams::invalid_count`] zero-depth pixels in contiguous blobs.
pub fn synth_scene(params: &SynthParams) -> Result<Sample> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mean_width = (ROAD_TOP + ROAD_BOTTOM) / 2.0;
    let wanted_rows = 2.0 * params.road_fraction * h as f64 / (ROAD_TOP + ROAD_BOTTOM);
    let (rows, widen) = if wanted_rows <= h as f64 {
        (libm::round(wanted_rows).max(1.0) as usize, 1.0)
    } else {
        (h, params.road_fraction / mean_width)
    };
    let horizon = h - rows;
    let cx = w as f64 / 2.0 + rng.random_range(-0.08..0.08) * w as f64;
    let mut label = vec![BACKGROUND; h * w];
    for y in horizon..h {
        let t = if rows > 1 { (y - horizon) as f64 / (rows - 1) as f64 } else { 1.0 };
        let half = widen * (ROAD_TOP + (ROAD_BOTTOM - ROAD_TOP) * t) * w as f64 / 2.0;
        for x in 0..w {
            if (x as f64 + 0.5 - cx).abs() <= half {
                label[y * w + x] = ROAD;
            }
        }
    }
    let road: Vec<usize> = (0..h * w).filter(|&i| label[i] == ROAD).collect();
    if road.is_empty() && params.obstacle_count > 0 {
        return Err(Error::invalid("obstacles requested on an empty road"));
    }
    let obstacles = if road.is_empty() {
        Vec::new()
    } else {
        random_ellipses(&mut rng, params.obstacle_count, &road, h, w)
    };
    let obstacle_area: f64 = obstacles.iter().map(Ellipse::area).sum();
    if obstacle_area > road.len() as f64 {
        return Err(Error::invalid(format!(
            "obstacle area {obstacle_area:.0} exceeds road area {}",
            road.len()
        )));
    }
    let shadows = if road.is_empty() {
        Vec::new()
    } else {
        random_ellipses(&mut rng, params.obstacle_count, &road, h, w)
    };

    let vanish = horizon as f64 - (h as f64 / 24.0).max(2.0);
    let k = NEAR_MM * (h as f64 - 1.0 - vanish);
    let mut depth = vec![0.0f64; h * w];
    let mut rgb = vec![0.0f64; 3 * h * w];
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let grain: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    for y in 0..h {
        let ground = if y < horizon {
            FAR_MM
        } else {
            (k / (y as f64 - vanish)).min(FAR_MM)
        };
        for x in 0..w {
            let i = y * w + x;
            let (mut d, mut col) = match (label[i], y < horizon) {
                (ROAD, _) => (ground, [0.42, 0.42, 0.44]),
                (_, true) => (FAR_MM, [0.62, 0.72, 0.88]),
                _ => (ground * 0.97, [0.28, 0.44, 0.22]),
            };
            let texture = if label[i] == ROAD { 0.05 } else { 0.08 };
            for c in &mut col {
                *c += texture * grain[i];
            }
            if label[i] == ROAD {
                if let Some(r2) = shadows.iter().map(|e| e.r2(y, x)).find(|&r| r < 1.0) {
                    let shade = 0.62 + 0.2 * r2;
                    col = col.map(|c| c * shade);
                }
                if let Some(r2) = obstacles.iter().map(|e| e.r2(y, x)).find(|&r| r < 1.0) {
                    label[i] = NEGATIVE_OBSTACLE;
                    let shade = 0.4 + 0.25 * r2;
                    col = [col[0] * shade, col[1] * shade, col[2] * (shade + 0.08)];
                    d += (200.0 + 400.0 * (1.0 - r2)) * (h as f64 / 96.0);
                }
            }
            for (c, v) in col.iter().enumerate() {
                let noisy = v + params.noise_level * normal(&mut rng);
                rgb[c * h * w + i] = libm::round(noisy.clamp(0.0, 1.0) * 255.0) / 255.0;
            }
            d += params.noise_level * 500.0 * normal(&mut rng);
            depth[i] = libm::round(d.clamp(1.0, 65535.0));
        }
    }
    for (i, bad) in invalid_blobs(&mut rng, h, w, params.invalid_count()).into_iter().enumerate() {
        if bad {
            depth[i] = 0.0;
        }
    }
    Sample::new(
        format!("synth_{:08x}", params.seed),
        RgbImage::new(h, w, rgb.into_iter().map(|v| v as f32).collect())?,
        DepthImage::new(h, w, depth.into_iter().map(|v| v as f32).collect())?,
        LabelMap::new(h, w, label)?,
    )
}

/// Seed of the `index`-th scene of a corpus.
pub fn corpus_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// `count` scenes sharing `params` except for per-scene seeds; ids are
/// zero-padded indices.
pub fn synth_corpus(params: &SynthParams, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let mut s = synth_scene(&SynthParams {
                seed: corpus_seed(params.seed, i),
                ..params.clone()
            })?;
            s.id = format!("{i:05}");
            Ok(s)
        })
        .collect()
}
