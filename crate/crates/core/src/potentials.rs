//! Pairwise potentials of the atlas CRF and their mean-field messages.
//!
//! The prior potential links target voxel `i` to atlas voxels `i + r·d` on a
//! dilated `S³` stencil; the smoothness potential links `i` to its undilated
//! `S³ - 1` neighbours. Both weight a connection by a Gaussian of the
//! intensity difference, so each message is a spatially-varying convolution.

use serde::{Deserialize, Serialize};

use crate::conv::{self, Offset};
use crate::error::{Error, Result};
use crate::volume::{Dims, ProbVolume, ScalarVolume};

/// Stencil size and dilation of a connection set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connectivity {
    pub size: usize,
    pub dilation: usize,
}

impl Connectivity {
    pub fn new(size: usize, dilation: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::param(format!("neighbourhood size must be odd and positive, got {size}")));
        }
        if dilation == 0 {
            return Err(Error::param("dilation must be positive"));
        }
        Ok(Connectivity { size, dilation })
    }

    /// `S = 5, r = 2`.
    pub const fn prior_default() -> Self {
        Connectivity { size: 5, dilation: 2 }
    }

    /// `S = 5` without dilation.
    pub const fn smooth_default() -> Self {
        Connectivity { size: 5, dilation: 1 }
    }

    /// Per-axis extent covered by the stencil.
    pub fn effective_field(&self) -> usize {
        self.dilation * (self.size - 1) + 1
    }

    /// All `S³` offsets in lexicographic `(dz, dy, dx)` order.
    pub fn offsets(&self) -> Vec<Offset> {
        let half = (self.size / 2) as isize;
        let r = self.dilation as isize;
        let mut v = Vec::with_capacity(self.size.pow(3));
        for dz in -half..=half {
            for dy in -half..=half {
                for dx in -half..=half {
                    v.push([dz * r, dy * r, dx * r]);
                }
            }
        }
        v
    }

    fn validate(&self) -> Result<()> {
        Connectivity::new(self.size, self.dilation).map(|_| ())
    }
}

/// Per-voxel weights on a fixed set of offsets, stored offset-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    dims: Dims,
    offsets: Vec<Offset>,
    data: Vec<f64>,
}

impl KernelField {
    pub(crate) fn from_parts(dims: Dims, offsets: Vec<Offset>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), offsets.len() * dims.len());
        KernelField { dims, offsets, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn offsets(&self) -> &[[isize; 3]] {
        &self.offsets
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Weight of the connection from `voxel` to `voxel + offset`; zero for
    /// offsets outside the stencil.
    pub fn weight(&self, voxel: usize, offset: [isize; 3]) -> f64 {
        match self.offsets.iter().position(|&o| o == offset) {
            Some(oi) => self.data[oi * self.dims.len() + voxel],
            None => 0.0,
        }
    }
}

/// Label compatibility matrix `μ[l, l']`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compatibility {
    k: usize,
    mu: Vec<f64>,
}

impl Compatibility {
    pub fn new(k: usize, mu: Vec<f64>) -> Result<Self> {
        if mu.len() != k * k {
            return Err(Error::shape(format!("compatibility for {k} classes needs {} entries", k * k)));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("compatibility entries must be finite"));
        }
        Ok(Compatibility { k, mu })
    }

    /// Zero on the diagonal, one elsewhere.
    pub fn potts(k: usize) -> Self {
        let mu = (0..k * k).map(|j| if j / k == j % k { 0.0 } else { 1.0 }).collect();
        Compatibility { k, mu }
    }

    pub fn identity(k: usize) -> Self {
        let mu = (0..k * k).map(|j| if j / k == j % k { 1.0 } else { 0.0 }).collect();
        Compatibility { k, mu }
    }

    pub fn zeros(k: usize) -> Self {
        Compatibility { k, mu: vec![0.0; k * k] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn get(&self, l: usize, lp: usize) -> f64 {
        self.mu[l * self.k + lp]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorWeights {
    pub omega_p: ScalarVolume,
    pub theta_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothWeights {
    pub omega_s: Vec<f64>,
    pub theta_s: f64,
}

fn check_theta(theta: f64, name: &str) -> Result<()> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::param(format!("{name} must be positive, got {theta}")));
    }
    Ok(())
}

/// Intensity similarity between target voxels and dilated atlas voxels,
/// without the spatial weight.
pub fn prior_similarity(
    target: &ScalarVolume,
    atlas_scan: &ScalarVolume,
    theta_p: f64,
    c: Connectivity,
) -> Result<KernelField> {
    check_theta(theta_p, "theta_p")?;
    c.validate()?;
    if target.dims() != atlas_scan.dims() {
        return Err(Error::shape(format!("target {} vs atlas scan {}", target.dims(), atlas_scan.dims())));
    }
    let dims = target.dims();
    let offsets = c.offsets();
    let data = conv::similarity_field(dims, &offsets, target.data(), atlas_scan.data(), theta_p);
    Ok(KernelField::from_parts(dims, offsets, data))
}

/// Applies the per-voxel prior weight to a similarity field.
pub(crate) fn scale_by_voxel(mut sim: KernelField, omega: &[f64]) -> KernelField {
    let n = sim.dims.len();
    for plane in sim.data.chunks_mut(n.max(1)) {
        for (e, &w) in plane.iter_mut().zip(omega) {
            *e *= w;
        }
    }
    sim
}

/// `K[i, r·d] = ω_p[i] · exp(-(T_i - A_{i+r·d})² / (2 θ_p²))`, zero off-grid.
pub fn prior_kernel(
    target: &ScalarVolume,
    atlas_scan: &ScalarVolume,
    w: &PriorWeights,
    c: Connectivity,
) -> Result<KernelField> {
    if w.omega_p.dims() != target.dims() {
        return Err(Error::shape(format!("omega_p {} vs target {}", w.omega_p.dims(), target.dims())));
    }
    let sim = prior_similarity(target, atlas_scan, w.theta_p, c)?;
    Ok(scale_by_voxel(sim, w.omega_p.data()))
}

/// `M_p[i, l] = Σ_d K[i, r·d] · S_A[i + r·d, l]`.
pub fn prior_message(atlas_labels: &ProbVolume, kernel: &KernelField) -> Result<ProbVolume> {
    if atlas_labels.dims() != kernel.dims() {
        return Err(Error::shape(format!("atlas labels {} vs kernel {}", atlas_labels.dims(), kernel.dims())));
    }
    let k = atlas_labels.k();
    let data = conv::gather(kernel.dims, k, &kernel.offsets, &kernel.data, atlas_labels.data(), None);
    Ok(ProbVolume::from_parts(k, kernel.dims, data, false))
}

/// Offsets of an undilated stencil with the centre removed.
pub(crate) fn smooth_offsets(c: Connectivity) -> Vec<Offset> {
    c.offsets().into_iter().filter(|o| *o != [0, 0, 0]).collect()
}

/// `K[i, d] = exp(-(T_i - T_{i+d})² / (2 θ_s²))` for `d ≠ 0`; the class weight
/// is applied by [`smoothness_message`].
pub fn smoothness_kernel(target: &ScalarVolume, w: &SmoothWeights, c: Connectivity) -> Result<KernelField> {
    check_theta(w.theta_s, "theta_s")?;
    c.validate()?;
    if c.dilation != 1 {
        return Err(Error::param(format!("smoothness connectivity must be undilated, got r={}", c.dilation)));
    }
    let dims = target.dims();
    let offsets = smooth_offsets(c);
    let data = conv::similarity_field(dims, &offsets, target.data(), target.data(), w.theta_s);
    Ok(KernelField::from_parts(dims, offsets, data))
}

/// `M_s[i, l] = ω_s[l] · Σ_d K[i, d] · Q[i + d, l]`.
pub fn smoothness_message(q: &ProbVolume, kernel: &KernelField, w: &SmoothWeights) -> Result<ProbVolume> {
    if q.dims() != kernel.dims() {
        return Err(Error::shape(format!("Q {} vs kernel {}", q.dims(), kernel.dims())));
    }
    if w.omega_s.len() != q.k() {
        return Err(Error::shape(format!("omega_s has {} entries for {} classes", w.omega_s.len(), q.k())));
    }
    let k = q.k();
    let data = conv::gather(kernel.dims, k, &kernel.offsets, &kernel.data, q.data(), Some(&w.omega_s));
    Ok(ProbVolume::from_parts(k, kernel.dims, data, false))
}

/// `out[l, i] = Σ_{l'} μ[l, l'] · m[l', i]` over a channel-major buffer.
pub(crate) fn compat_apply(mu: &[f64], k: usize, n: usize, m: &[f64], transpose: bool) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; k * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(l, dst)| {
        for lp in 0..k {
            let coef = if transpose { mu[lp * k + l] } else { mu[l * k + lp] };
            if coef == 0.0 {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(&m[lp * n..(lp + 1) * n]) {
                *d += coef * s;
            }
        }
    });
    out
}

pub fn compatibility_transform(message: &ProbVolume, mu: &Compatibility) -> Result<ProbVolume> {
    if message.k() != mu.k() {
        return Err(Error::shape(format!("message has {} classes, compatibility {}", message.k(), mu.k())));
    }
    let (k, dims) = (message.k(), message.dims());
    let data = compat_apply(&mu.mu, k, dims.len(), message.data(), false);
    Ok(ProbVolume::from_parts(k, dims, data, false))
}
