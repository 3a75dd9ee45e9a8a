//! Unrolled mean-field inference for the atlas CRF.
//!
//! Each iteration passes messages, applies the label compatibility, subtracts
//! the resulting pairwise energy from the unary logits and renormalizes:
//!
//! ```text
//! Q⁰ = softmax(U)
//! Mᵗ = M_p + M_s(Qᵗ⁻¹)
//! Qᵗ = softmax(U - μ·Mᵗ)
//! ```
//!
//! The prior message depends only on observed atlas labels, so it is computed
//! once per call.

use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{Error, Result};
use crate::potentials::{
    self, compat_apply, Compatibility, Connectivity, KernelField, PriorWeights, SmoothWeights,
};
use crate::volume::{softmax_into, AtlasPair, Dims, ProbVolume, ScalarVolume};

pub const DEFAULT_ITERS: usize = 5;
pub const DEFAULT_OMEGA_P: f64 = 0.02;
pub const DEFAULT_OMEGA_S: f64 = 0.02;
pub const DEFAULT_THETA_P: f64 = 1.0;
pub const DEFAULT_THETA_S: f64 = 1.0;

/// Learnable CRF parameters plus structural constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CamParams {
    /// Shared compatibility, or the prior-term compatibility when
    /// `mu_smooth` is set.
    pub mu: Compatibility,
    /// Separate compatibility for the smoothness term.
    pub mu_smooth: Option<Compatibility>,
    pub prior: PriorWeights,
    pub smooth: SmoothWeights,
    pub conn_p: Connectivity,
    pub conn_s: Connectivity,
    pub iters: usize,
    pub enable_prior: bool,
    pub enable_smooth: bool,
}

impl CamParams {
    /// Potts compatibility and default weights over a grid of `dims`.
    pub fn new(k: usize, dims: Dims) -> Self {
        CamParams {
            mu: Compatibility::potts(k),
            mu_smooth: None,
            prior: PriorWeights { omega_p: ScalarVolume::filled(dims, DEFAULT_OMEGA_P), theta_p: DEFAULT_THETA_P },
            smooth: SmoothWeights { omega_s: vec![DEFAULT_OMEGA_S; k], theta_s: DEFAULT_THETA_S },
            conn_p: Connectivity::prior_default(),
            conn_s: Connectivity::smooth_default(),
            iters: DEFAULT_ITERS,
            enable_prior: true,
            enable_smooth: true,
        }
    }

    pub fn k(&self) -> usize {
        self.mu.k()
    }

    pub fn any_enabled(&self) -> bool {
        self.enable_prior || self.enable_smooth
    }

    pub fn validate(&self, k: usize, dims: Dims) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::param("iteration count must be at least 1"));
        }
        if self.mu.k() != k || self.mu_smooth.as_ref().is_some_and(|m| m.k() != k) {
            return Err(Error::shape(format!("compatibility is {}x{0}, problem has {k} classes", self.mu.k())));
        }
        if self.smooth.omega_s.len() != k {
            return Err(Error::shape(format!("omega_s has {} entries for {k} classes", self.smooth.omega_s.len())));
        }
        if self.prior.omega_p.dims() != dims {
            return Err(Error::shape(format!("omega_p {} vs target {dims}", self.prior.omega_p.dims())));
        }
        Connectivity::new(self.conn_p.size, self.conn_p.dilation)?;
        Connectivity::new(self.conn_s.size, self.conn_s.dilation)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Prior,
    Smooth,
    Both,
}

/// Disables the named potentials, leaving every learned value untouched.
pub fn ablate(params: &CamParams, drop: Ablation) -> CamParams {
    let mut p = params.clone();
    match drop {
        Ablation::Prior => p.enable_prior = false,
        Ablation::Smooth => p.enable_smooth = false,
        Ablation::Both => {
            p.enable_prior = false;
            p.enable_smooth = false;
        }
    }
    p
}

/// Target scan, unary logits and the aligned atlas.
#[derive(Debug, Clone)]
pub struct CamInput {
    pub target: ScalarVolume,
    /// Raw logits (negated appearance energies).
    pub unary: ProbVolume,
    pub atlas: AtlasPair,
}

impl CamInput {
    pub fn new(target: ScalarVolume, unary: ProbVolume, atlas: AtlasPair) -> Result<Self> {
        let input = CamInput { target, unary, atlas };
        input.validate()?;
        Ok(input)
    }

    pub fn dims(&self) -> Dims {
        self.target.dims()
    }

    pub fn k(&self) -> usize {
        self.unary.k()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.target.dims();
        if self.unary.dims() != d || self.atlas.dims() != d {
            return Err(Error::shape(format!(
                "target {d}, unary {}, atlas {}",
                self.unary.dims(),
                self.atlas.dims()
            )));
        }
        if self.atlas.k() != self.unary.k() {
            return Err(Error::shape(format!("unary has {} classes, atlas {}", self.unary.k(), self.atlas.k())));
        }
        Ok(())
    }
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn first_non_finite(v: &[f64], n: usize) -> Option<usize> {
    v.iter().position(|x| !x.is_finite()).map(|j| j % n.max(1))
}

/// Message buffers that stay fixed across iterations.
struct Precomputed {
    prior_message: Option<Vec<f64>>,
    smooth_kernel: Option<KernelField>,
}

fn precompute(input: &CamInput, params: &CamParams) -> Result<Precomputed> {
    let prior_message = if params.enable_prior {
        let kernel = potentials::prior_kernel(&input.target, input.atlas.scan(), &params.prior, params.conn_p)?;
        Some(potentials::prior_message(input.atlas.labels(), &kernel)?.into_data())
    } else {
        None
    };
    let smooth_kernel = if params.enable_smooth {
        Some(potentials::smoothness_kernel(&input.target, &params.smooth, params.conn_s)?)
    } else {
        None
    };
    Ok(Precomputed { prior_message, smooth_kernel })
}

/// Pairwise energy `μ·(M_p + M_s)` (or the per-term sum when `mu_smooth` is set).
fn pairwise_energy(params: &CamParams, k: usize, dims: Dims, pre: &Precomputed, q: &[f64]) -> Vec<f64> {
    let n = dims.len();
    let smooth = pre.smooth_kernel.as_ref().map(|kf| {
        conv::gather(dims, k, kf.offsets(), kf.data(), q, Some(&params.smooth.omega_s))
    });
    match &params.mu_smooth {
        None => {
            let m = match (&pre.prior_message, &smooth) {
                (Some(p), Some(s)) => add(p, s),
                (Some(p), None) => p.clone(),
                (None, Some(s)) => s.clone(),
                (None, None) => vec![0.0; k * n],
            };
            compat_apply(params.mu.values(), k, n, &m, false)
        }
        Some(mu_s) => {
            let zero = vec![0.0; k * n];
            let p = compat_apply(params.mu.values(), k, n, pre.prior_message.as_ref().unwrap_or(&zero), false);
            let s = compat_apply(mu_s.values(), k, n, smooth.as_ref().unwrap_or(&zero), false);
            add(&p, &s)
        }
    }
}

/// One message-passing stage: builds the prior message and smoothness
/// kernel, then returns the pairwise energy for the current marginals `q`.
pub fn message_passing(input: &CamInput, params: &CamParams, q: &ProbVolume) -> Result<ProbVolume> {
    input.validate()?;
    let (k, dims) = (input.k(), input.dims());
    params.validate(k, dims)?;
    if q.k() != k || q.dims() != dims {
        return Err(Error::shape(format!("marginals {}x{} vs input {k}x{dims}", q.k(), q.dims())));
    }
    let pre = precompute(input, params)?;
    ProbVolume::new(k, dims, pairwise_energy(params, k, dims, &pre, q.data()))
}

/// Runs inference and returns every iterate `Q⁰ … Q^iters`.
pub fn mean_field_iterates(input: &CamInput, params: &CamParams) -> Result<Vec<ProbVolume>> {
    input.validate()?;
    let (k, dims) = (input.k(), input.dims());
    params.validate(k, dims)?;
    let n = dims.len();
    let u = input.unary.data();
    if let Some(i) = first_non_finite(u, n) {
        return Err(Error::NonFinite { voxel: i, context: Some("unary logits".into()) });
    }
    let mut q = vec![0.0; k * n];
    softmax_into(k, n, u, &mut q);
    let mut out = vec![ProbVolume::from_parts(k, dims, q.clone(), true)];
    if !params.any_enabled() {
        return Ok(out);
    }
    let pre = precompute(input, params)?;
    for t in 1..=params.iters {
        let pairwise = pairwise_energy(params, k, dims, &pre, &q);
        let z = sub(u, &pairwise);
        if let Some(i) = first_non_finite(&z, n) {
            return Err(Error::NonFinite { voxel: i, context: Some(format!("iteration {t}")) });
        }
        softmax_into(k, n, &z, &mut q);
        out.push(ProbVolume::from_parts(k, dims, q.clone(), true));
    }
    Ok(out)
}

/// Mean-field inference; returns the final normalized `Q`.
pub fn mean_field_infer(input: &CamInput, params: &CamParams) -> Result<ProbVolume> {
    input.validate()?;
    let (k, dims) = (input.k(), input.dims());
    params.validate(k, dims)?;
    let n = dims.len();
    let u = input.unary.data();
    if let Some(i) = first_non_finite(u, n) {
        return Err(Error::NonFinite { voxel: i, context: Some("unary logits".into()) });
    }
    let mut q = vec![0.0; k * n];
    softmax_into(k, n, u, &mut q);
    if params.any_enabled() {
        let pre = precompute(input, params)?;
        for t in 1..=params.iters {
            let pairwise = pairwise_energy(params, k, dims, &pre, &q);
            let z = sub(u, &pairwise);
            if let Some(i) = first_non_finite(&z, n) {
                return Err(Error::NonFinite { voxel: i, context: Some(format!("iteration {t}")) });
            }
            softmax_into(k, n, &z, &mut q);
        }
    }
    Ok(ProbVolume::from_parts(k, dims, q, true))
}
