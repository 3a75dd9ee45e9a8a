//! Reference mean-field inference by explicit edge enumeration.
//!
//! Shares no message-passing code with [`crate::meanfield`]: connections are
//! enumerated voxel by voxel, weights are evaluated on the fly and the
//! normalization is written out longhand. Intended for tiny volumes only.

use crate::error::{Error, Result};
use crate::meanfield::{CamInput, CamParams};
use crate::volume::{Dims, ProbVolume};

/// Largest voxel count accepted by [`brute_force_infer`].
pub const MAX_BRUTE_FORCE_VOXELS: usize = 8 * 8 * 8;

fn neighbours(dims: Dims, i: usize, size: usize, dilation: usize, skip_self: bool) -> Vec<usize> {
    let (z, y, x) = dims.coords(i);
    let half = (size / 2) as i64;
    let r = dilation as i64;
    let mut out = Vec::new();
    for a in -half..=half {
        for b in -half..=half {
            for c in -half..=half {
                if skip_self && a == 0 && b == 0 && c == 0 {
                    continue;
                }
                let (zz, yy, xx) = (z as i64 + a * r, y as i64 + b * r, x as i64 + c * r);
                let inside = (0..dims.d as i64).contains(&zz)
                    && (0..dims.h as i64).contains(&yy)
                    && (0..dims.w as i64).contains(&xx);
                if inside {
                    out.push(((zz as usize * dims.h) + yy as usize) * dims.w + xx as usize);
                }
            }
        }
    }
    out
}

fn gaussian(a: f64, b: f64, theta: f64) -> f64 {
    (-((a - b).powi(2)) / (2.0 * theta.powi(2))).exp()
}

fn normalize(scores: &[f64]) -> Vec<f64> {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Same update schedule as [`crate::meanfield::mean_field_infer`].
pub fn brute_force_infer(input: &CamInput, params: &CamParams) -> Result<ProbVolume> {
    input.validate()?;
    let (k, dims) = (input.k(), input.dims());
    let n = dims.len();
    if n > MAX_BRUTE_FORCE_VOXELS {
        return Err(Error::param(format!("brute-force oracle limited to {MAX_BRUTE_FORCE_VOXELS} voxels, got {n}")));
    }
    params.validate(k, dims)?;
    let t = input.target.data();
    let a = input.atlas.scan().data();
    let unary = |i: usize, l: usize| input.unary.get(l, i);

    // q[i][l]
    let mut q: Vec<Vec<f64>> = (0..n).map(|i| normalize(&(0..k).map(|l| unary(i, l)).collect::<Vec<_>>())).collect();
    let any = params.enable_prior || params.enable_smooth;
    if any {
        let prior_msg: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut m = vec![0.0; k];
                if params.enable_prior {
                    let wi = params.prior.omega_p.data()[i];
                    for j in neighbours(dims, i, params.conn_p.size, params.conn_p.dilation, false) {
                        let w = wi * gaussian(t[i], a[j], params.prior.theta_p);
                        for (l, ml) in m.iter_mut().enumerate() {
                            *ml += w * input.atlas.labels().get(l, j);
                        }
                    }
                }
                m
            })
            .collect();
        for _ in 0..params.iters {
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let mut smooth = vec![0.0; k];
                if params.enable_smooth {
                    for j in neighbours(dims, i, params.conn_s.size, 1, true) {
                        let w = gaussian(t[i], t[j], params.smooth.theta_s);
                        for l in 0..k {
                            smooth[l] += w * q[j][l];
                        }
                    }
                    for l in 0..k {
                        smooth[l] *= params.smooth.omega_s[l];
                    }
                }
                let mut scores = vec![0.0; k];
                for l in 0..k {
                    let mut energy = 0.0;
                    for lp in 0..k {
                        match &params.mu_smooth {
                            None => energy += params.mu.get(l, lp) * (prior_msg[i][lp] + smooth[lp]),
                            Some(mus) => {
                                energy += params.mu.get(l, lp) * prior_msg[i][lp] + mus.get(l, lp) * smooth[lp]
                            }
                        }
                    }
                    scores[l] = unary(i, l) - energy;
                }
                if let Some(l) = scores.iter().position(|s| !s.is_finite()) {
                    return Err(Error::NonFinite { voxel: i, context: Some(format!("oracle class {l}")) });
                }
                next.push(normalize(&scores));
            }
            q = next;
        }
    }
    let mut data = vec![0.0; k * n];
    for (i, qi) in q.iter().enumerate() {
        for l in 0..k {
            data[l * n + i] = qi[l];
        }
    }
    Ok(ProbVolume::from_parts(k, dims, data, true))
}
