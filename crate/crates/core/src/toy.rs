//! Synthetic dataset of noisy nested ellipsoids.
//!
//! Class 1 is an outer shell (intensity 1), class 2 an inner core
//! (intensity 2), class 0 background (intensity 0). Bright background
//! balls with core-like intensity make appearance alone ambiguous, which is
//! where an atlas prior earns its keep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, ScalarVolume};

pub const TOY_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Std of the additive Gaussian noise.
    pub noise: f64,
    /// Bright background balls per case.
    pub distractors: usize,
    /// Maximum centre offset per axis in voxels.
    pub jitter: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { size: 32, n_train: 10, n_val: 2, n_test: 6, seed: 7, noise: 0.45, distractors: 3, jitter: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCase {
    pub scan: ScalarVolume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<ToyCase>,
    pub val: Vec<ToyCase>,
    pub test: Vec<ToyCase>,
}

impl ToyDataset {
    pub fn splits(&self) -> [(&'static str, &[ToyCase]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

fn toy_case(size: usize, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<ToyCase> {
    let s = size as f64;
    let j = cfg.jitter as f64;
    let mid = (s - 1.0) / 2.0;
    let center: [f64; 3] = std::array::from_fn(|_| mid + rng.gen_range(-j..=j).round());
    let outer: [f64; 3] = std::array::from_fn(|a| s * [0.30, 0.27, 0.24][a] * rng.gen_range(0.92..1.08));
    let inner: [f64; 3] = std::array::from_fn(|a| outer[a] * rng.gen_range(0.45..0.55));

    // Distractors sit in the background, clear of the outer shell.
    let ball_r = (s * 0.09).max(1.0);
    let mut balls: Vec<[f64; 3]> = Vec::with_capacity(cfg.distractors);
    let mut tries = 0;
    while balls.len() < cfg.distractors {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::param(format!("cannot place {} distractors in a {size}³ volume", cfg.distractors)));
        }
        let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(ball_r..=s - 1.0 - ball_r).round());
        let grown: [f64; 3] = std::array::from_fn(|a| outer[a] + ball_r + 1.5);
        if !inside(p, center, grown) {
            balls.push(p);
        }
    }

    let dims = Dims::cube(size);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::param(e.to_string()))?;
    let mut labels = Vec::with_capacity(dims.len());
    let mut scan = Vec::with_capacity(dims.len());
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let p = [z as f64, y as f64, x as f64];
                let (label, base) = if inside(p, center, inner) {
                    (2, 2.0)
                } else if inside(p, center, outer) {
                    (1, 1.0)
                } else if balls.iter().any(|b| inside(p, *b, [ball_r; 3])) {
                    (0, 2.0)
                } else {
                    (0, 0.0)
                };
                labels.push(label);
                scan.push(base + noise.sample(rng));
            }
        }
    }
    Ok(ToyCase { scan: ScalarVolume::new(dims, scan)?, labels: LabelMap::new(TOY_CLASSES, dims, labels)? })
}

/// Generates the train/val/test splits from one seeded stream.
pub fn toygen(cfg: &ToyConfig) -> Result<ToyDataset> {
    if cfg.size < 8 {
        return Err(Error::param(format!("toy volumes need size >= 8, got {}", cfg.size)));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::param(format!("noise must be finite and non-negative, got {}", cfg.noise)));
    }
    if 2 * cfg.jitter >= cfg.size / 4 {
        return Err(Error::param(format!("jitter {} too large for size {}", cfg.jitter, cfg.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |n: usize| (0..n).map(|_| toy_case(cfg.size, cfg, &mut rng)).collect::<Result<Vec<_>>>();
    let train = make(cfg.n_train)?;
    let val = make(cfg.n_val)?;
    let test = make(cfg.n_test)?;
    Ok(ToyDataset { train, val, test })
}
