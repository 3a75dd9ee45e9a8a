//! Appearance (unary) scores: file-backed probabilities from an external
//! segmenter, or a small built-in 3D convolutional classifier.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vol1;
use crate::volume::{Dims, ProbVolume, ScalarVolume};

/// Hidden width of both convolution layers.
pub const HIDDEN: usize = 8;
const TAPS: usize = 27;
/// Added inside the logarithm when converting probabilities to logits.
pub const LOG_EPS: f64 = 1e-12;

/// Weights of the two-layer `3³` conv net with a `1³` classification head.
///
/// Flat layout: `w1[8][1][27]`, `b1[8]`, `w2[8][8][27]`, `b2[8]`, `w3[K][8]`, `b3[K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetParams {
    k: usize,
    flat: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn layout(k: usize) -> Layout {
    let w1 = 0;
    let b1 = w1 + HIDDEN * TAPS;
    let w2 = b1 + HIDDEN;
    let b2 = w2 + HIDDEN * HIDDEN * TAPS;
    let w3 = b2 + HIDDEN;
    let b3 = w3 + k * HIDDEN;
    Layout { w1, b1, w2, b2, w3, b3, end: b3 + k }
}

impl TinyNetParams {
    pub fn param_count(k: usize) -> usize {
        layout(k).end
    }

    pub fn zeros(k: usize) -> Self {
        TinyNetParams { k, flat: vec![0.0; Self::param_count(k)] }
    }

    /// He-normal weights, zero biases.
    pub fn init(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = layout(k);
        let mut flat = vec![0.0; lay.end];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in &mut flat[range] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(lay.w1..lay.b1, TAPS);
        fill(lay.w2..lay.b2, HIDDEN * TAPS);
        fill(lay.w3..lay.b3, HIDDEN);
        TinyNetParams { k, flat }
    }

    pub fn from_flat(k: usize, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != Self::param_count(k) {
            return Err(Error::shape(format!(
                "tiny net for {k} classes needs {} parameters, got {}",
                Self::param_count(k),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("tiny net parameters must be finite"));
        }
        Ok(TinyNetParams { k, flat })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetTrace {
    pub hidden1: Vec<f64>,
    pub hidden2: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TinyNetTrace {
    /// Active/inactive state of every hidden unit.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.hidden1.iter().chain(&self.hidden2).map(|&h| h > 0.0).collect()
    }
}

fn taps() -> [[isize; 3]; TAPS] {
    let mut t = [[0; 3]; TAPS];
    let mut j = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                t[j] = [dz, dy, dx];
                j += 1;
            }
        }
    }
    t
}

#[inline]
fn axis(len: usize, o: isize) -> (usize, usize) {
    let lo = if o < 0 { (-o) as usize } else { 0 }.min(len);
    let hi = if o > 0 { len.saturating_sub(o as usize) } else { len };
    (lo, hi.max(lo))
}

/// `out[co, i] = b[co] + Σ_ci Σ_t w[co, ci, t] · x[ci, i + t]`, zero padded.
fn conv3(dims: Dims, x: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize, relu: bool) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let taps = taps();
    let mut out = vec![0.0; cout * n];
    out.par_chunks_mut(plane).enumerate().for_each(|(job, dst)| {
        let co = job / dims.d;
        let z = job % dims.d;
        dst.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let xc = &x[ci * n..(ci + 1) * n];
            for (t, o) in taps.iter().enumerate() {
                let wt = w[(co * cin + ci) * TAPS + t];
                let zz = z as isize + o[0];
                if zz < 0 || zz >= dims.d as isize {
                    continue;
                }
                let (ylo, yhi) = axis(dims.h, o[1]);
                let (xlo, xhi) = axis(dims.w, o[2]);
                let src = &xc[zz as usize * plane..(zz as usize + 1) * plane];
                for y in ylo..yhi {
                    let row = y * dims.w;
                    let srow = (y as isize + o[1]) as usize * dims.w;
                    let sx = (xlo as isize + o[2]) as usize;
                    let len = xhi - xlo;
                    for (d, &s) in dst[row + xlo..row + xlo + len].iter_mut().zip(&src[srow + sx..srow + sx + len]) {
                        *d += wt * s;
                    }
                }
            }
        }
        if relu {
            dst.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    });
    out
}

/// Weight gradient of [`conv3`]: `gw[co, ci, t] = Σ_i g[co, i] · x[ci, i + t]`.
fn conv3_weight_grad(dims: Dims, x: &[f64], cin: usize, g: &[f64], cout: usize) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let taps = taps();
    (0..cout * cin * TAPS)
        .into_par_iter()
        .map(|j| {
            let t = j % TAPS;
            let ci = (j / TAPS) % cin;
            let co = j / (TAPS * cin);
            let o = taps[t];
            let (zlo, zhi) = axis(dims.d, o[0]);
            let (ylo, yhi) = axis(dims.h, o[1]);
            let (xlo, xhi) = axis(dims.w, o[2]);
            let mut acc = 0.0;
            for z in zlo..zhi {
                for y in ylo..yhi {
                    let row = co * n + z * plane + y * dims.w;
                    let srow = ci * n + (z as isize + o[0]) as usize * plane + (y as isize + o[1]) as usize * dims.w;
                    let sx = (xlo as isize + o[2]) as usize;
                    for q in 0..xhi.saturating_sub(xlo) {
                        acc += g[row + xlo + q] * x[srow + sx + q];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Input gradient of [`conv3`]: `gx[ci, j] = Σ_co Σ_t w[co, ci, t] · g[co, j - t]`.
fn conv3_input_grad(dims: Dims, g: &[f64], cout: usize, w: &[f64], cin: usize) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let taps = taps();
    let mut out = vec![0.0; cin * n];
    out.par_chunks_mut(plane).enumerate().for_each(|(job, dst)| {
        let ci = job / dims.d;
        let z = job % dims.d;
        for co in 0..cout {
            let gc = &g[co * n..(co + 1) * n];
            for (t, o) in taps.iter().enumerate() {
                let wt = w[(co * cin + ci) * TAPS + t];
                let zi = z as isize - o[0];
                if zi < 0 || zi >= dims.d as isize {
                    continue;
                }
                let (ylo, yhi) = axis(dims.h, -o[1]);
                let (xlo, xhi) = axis(dims.w, -o[2]);
                let src = &gc[zi as usize * plane..(zi as usize + 1) * plane];
                for y in ylo..yhi {
                    let row = y * dims.w;
                    let srow = (y as isize - o[1]) as usize * dims.w;
                    let sx = (xlo as isize - o[2]) as usize;
                    let len = xhi - xlo;
                    for (d, &s) in dst[row + xlo..row + xlo + len].iter_mut().zip(&src[srow + sx..srow + sx + len]) {
                        *d += wt * s;
                    }
                }
            }
        }
    });
    out
}

fn channel_sums(g: &[f64], c: usize, n: usize) -> Vec<f64> {
    (0..c).map(|j| g[j * n..(j + 1) * n].iter().sum()).collect()
}

/// Forward pass with saved activations.
pub fn tinynet_forward(params: &TinyNetParams, input: &ScalarVolume) -> TinyNetTrace {
    let dims = input.dims();
    let n = dims.len();
    let (k, lay, p) = (params.k, layout(params.k), &params.flat);
    let hidden1 = conv3(dims, input.data(), 1, &p[lay.w1..lay.b1], &p[lay.b1..lay.w2], HIDDEN, true);
    let hidden2 = conv3(dims, &hidden1, HIDDEN, &p[lay.w2..lay.b2], &p[lay.b2..lay.w3], HIDDEN, true);
    let w3 = &p[lay.w3..lay.b3];
    let b3 = &p[lay.b3..lay.end];
    let mut logits = vec![0.0; k * n];
    logits.par_chunks_mut(n.max(1)).enumerate().for_each(|(l, dst)| {
        dst.iter_mut().for_each(|v| *v = b3[l]);
        for c in 0..HIDDEN {
            let w = w3[l * HIDDEN + c];
            for (d, &h) in dst.iter_mut().zip(&hidden2[c * n..(c + 1) * n]) {
                *d += w * h;
            }
        }
    });
    TinyNetTrace { hidden1, hidden2, logits }
}

/// Gradient of a scalar objective with respect to the flat parameter vector,
/// given its gradient `g_logits` with respect to the logits.
pub fn tinynet_backward(
    params: &TinyNetParams,
    input: &ScalarVolume,
    trace: &TinyNetTrace,
    g_logits: &[f64],
) -> Result<Vec<f64>> {
    let dims = input.dims();
    let n = dims.len();
    let (k, lay, p) = (params.k, layout(params.k), &params.flat);
    if trace.logits.len() != k * n
        || trace.hidden1.len() != HIDDEN * n
        || trace.hidden2.len() != HIDDEN * n
        || g_logits.len() != k * n
    {
        return Err(Error::TapeIntegrity("tiny net trace does not match the input volume".into()));
    }
    let mut grad = vec![0.0; lay.end];

    // Head.
    let w3 = &p[lay.w3..lay.b3];
    for l in 0..k {
        let gl = &g_logits[l * n..(l + 1) * n];
        for c in 0..HIDDEN {
            grad[lay.w3 + l * HIDDEN + c] = gl.iter().zip(&trace.hidden2[c * n..(c + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
    grad[lay.b3..lay.end].copy_from_slice(&channel_sums(g_logits, k, n));
    let mut g2 = vec![0.0; HIDDEN * n];
    g2.par_chunks_mut(n.max(1)).enumerate().for_each(|(c, dst)| {
        for l in 0..k {
            let w = w3[l * HIDDEN + c];
            for (d, &g) in dst.iter_mut().zip(&g_logits[l * n..(l + 1) * n]) {
                *d += w * g;
            }
        }
        for (d, &h) in dst.iter_mut().zip(&trace.hidden2[c * n..(c + 1) * n]) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
    });

    // Layer 2.
    grad[lay.w2..lay.b2].copy_from_slice(&conv3_weight_grad(dims, &trace.hidden1, HIDDEN, &g2, HIDDEN));
    grad[lay.b2..lay.w3].copy_from_slice(&channel_sums(&g2, HIDDEN, n));
    let mut g1 = conv3_input_grad(dims, &g2, HIDDEN, &p[lay.w2..lay.b2], HIDDEN);
    for (d, &h) in g1.iter_mut().zip(&trace.hidden1) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }

    // Layer 1.
    grad[lay.w1..lay.b1].copy_from_slice(&conv3_weight_grad(dims, input.data(), 1, &g1, HIDDEN));
    grad[lay.b1..lay.w2].copy_from_slice(&channel_sums(&g1, HIDDEN, n));
    Ok(grad)
}

/// `ln(p + 1e-12)` per entry.
pub fn logits_from_probabilities(p: &ProbVolume) -> ProbVolume {
    let data = p.data().iter().map(|&v| (v + LOG_EPS).ln()).collect();
    ProbVolume::from_parts(p.k(), p.dims(), data, false)
}

#[derive(Debug, Clone)]
pub enum UnarySource {
    FileBacked(PathBuf),
    TinyNet(TinyNetParams),
}

/// Raw K-channel logits for `target`.
pub fn unary_logits(source: &UnarySource, target: &ScalarVolume, k: usize) -> Result<ProbVolume> {
    match source {
        UnarySource::FileBacked(path) => {
            let p = vol1::read_prob(path)?;
            if p.k() != k {
                return Err(Error::shape(format!("unary file has {} classes, expected {k}", p.k())));
            }
            if p.dims() != target.dims() {
                return Err(Error::shape(format!("unary file {} vs target {}", p.dims(), target.dims())));
            }
            Ok(if p.is_normalized() { logits_from_probabilities(&p) } else { p })
        }
        UnarySource::TinyNet(params) => {
            if params.k() != k {
                return Err(Error::shape(format!("tiny net has {} classes, expected {k}", params.k())));
            }
            let trace = tinynet_forward(params, target);
            Ok(ProbVolume::from_parts(k, target.dims(), trace.logits, false))
        }
    }
}
