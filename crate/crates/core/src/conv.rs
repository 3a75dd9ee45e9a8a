//! Spatially-varying sparse convolutions over channel-major buffers.
//!
//! A kernel field stores one weight per (offset, voxel), offset-major. Every
//! routine here writes each output element from a fixed sequential loop, so
//! results do not depend on how rayon splits the work.

use rayon::prelude::*;

use crate::volume::Dims;

pub(crate) type Offset = [isize; 3];

/// Valid destination range `[lo, hi)` along one axis for a shift of `o`.
#[inline]
fn axis_range(len: usize, o: isize) -> (usize, usize) {
    let lo = if o < 0 { (-o) as usize } else { 0 };
    let hi = if o > 0 { len.saturating_sub(o as usize) } else { len };
    (lo.min(len), hi.max(lo.min(len)))
}

/// Message gather: `out[c, i] = scale[c] * Σ_o K[o, i] · src[c, i + o]`.
///
/// Out-of-grid neighbours contribute nothing (zero padding).
pub(crate) fn gather(
    dims: Dims,
    channels: usize,
    offsets: &[Offset],
    kernel: &[f64],
    src: &[f64],
    scale: Option<&[f64]>,
) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let mut out = vec![0.0; channels * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(plane).enumerate().for_each(|(job, dst)| {
        let c = job / dims.d;
        let z = job % dims.d;
        let src_c = &src[c * n..(c + 1) * n];
        for (oi, o) in offsets.iter().enumerate() {
            let zz = z as isize + o[0];
            if zz < 0 || zz >= dims.d as isize {
                continue;
            }
            let kplane = &kernel[oi * n + z * plane..oi * n + (z + 1) * plane];
            let splane = &src_c[zz as usize * plane..(zz as usize + 1) * plane];
            let (ylo, yhi) = axis_range(dims.h, o[1]);
            let (xlo, xhi) = axis_range(dims.w, o[2]);
            if yhi <= ylo || xhi <= xlo {
                continue;
            }
            for y in ylo..yhi {
                let row = y * dims.w;
                let srow = ((y as isize + o[1]) as usize) * dims.w;
                let sx = (xlo as isize + o[2]) as usize;
                let len = xhi - xlo;
                let d = &mut dst[row + xlo..row + xlo + len];
                let k = &kplane[row + xlo..row + xlo + len];
                let s = &splane[srow + sx..srow + sx + len];
                for ((d, &k), &s) in d.iter_mut().zip(k).zip(s) {
                    *d += k * s;
                }
            }
        }
        if let Some(scale) = scale {
            let f = scale[c];
            dst.iter_mut().for_each(|v| *v *= f);
        }
    });
    out
}

/// Adjoint of [`gather`] with respect to `src`:
/// `out[c, j] = scale[c] * Σ_o K[o, j - o] · g[c, j - o]`.
pub(crate) fn gather_transpose(
    dims: Dims,
    channels: usize,
    offsets: &[Offset],
    kernel: &[f64],
    g: &[f64],
    scale: Option<&[f64]>,
) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let mut out = vec![0.0; channels * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(plane).enumerate().for_each(|(job, dst)| {
        let c = job / dims.d;
        let z = job % dims.d;
        let g_c = &g[c * n..(c + 1) * n];
        for (oi, o) in offsets.iter().enumerate() {
            let zi = z as isize - o[0];
            if zi < 0 || zi >= dims.d as isize {
                continue;
            }
            let zi = zi as usize;
            let kplane = &kernel[oi * n + zi * plane..oi * n + (zi + 1) * plane];
            let gplane = &g_c[zi * plane..(zi + 1) * plane];
            let (ylo, yhi) = axis_range(dims.h, -o[1]);
            let (xlo, xhi) = axis_range(dims.w, -o[2]);
            if yhi <= ylo || xhi <= xlo {
                continue;
            }
            for y in ylo..yhi {
                let row = y * dims.w;
                let srow = ((y as isize - o[1]) as usize) * dims.w;
                let sx = (xlo as isize - o[2]) as usize;
                let len = xhi - xlo;
                let d = &mut dst[row + xlo..row + xlo + len];
                let k = &kplane[srow + sx..srow + sx + len];
                let s = &gplane[srow + sx..srow + sx + len];
                for ((d, &k), &s) in d.iter_mut().zip(k).zip(s) {
                    *d += k * s;
                }
            }
        }
        if let Some(scale) = scale {
            let f = scale[c];
            dst.iter_mut().for_each(|v| *v *= f);
        }
    });
    out
}

/// Adjoint of [`gather`] with respect to the kernel:
/// `out[o, i] = Σ_c scale[c] · g[c, i] · src[c, i + o]`.
pub(crate) fn gather_kernel_grad(
    dims: Dims,
    channels: usize,
    offsets: &[Offset],
    g: &[f64],
    src: &[f64],
    scale: Option<&[f64]>,
) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let mut out = vec![0.0; offsets.len() * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(plane).enumerate().for_each(|(job, dst)| {
        let oi = job / dims.d;
        let z = job % dims.d;
        let o = offsets[oi];
        let zz = z as isize + o[0];
        if zz < 0 || zz >= dims.d as isize {
            return;
        }
        let zz = zz as usize;
        let (ylo, yhi) = axis_range(dims.h, o[1]);
        let (xlo, xhi) = axis_range(dims.w, o[2]);
        if yhi <= ylo || xhi <= xlo {
            return;
        }
        for c in 0..channels {
            let f = scale.map_or(1.0, |s| s[c]);
            let gplane = &g[c * n + z * plane..c * n + (z + 1) * plane];
            let splane = &src[c * n + zz * plane..c * n + (zz + 1) * plane];
            for y in ylo..yhi {
                let row = y * dims.w;
                let srow = ((y as isize + o[1]) as usize) * dims.w;
                let sx = (xlo as isize + o[2]) as usize;
                let len = xhi - xlo;
                let d = &mut dst[row + xlo..row + xlo + len];
                let gg = &gplane[row + xlo..row + xlo + len];
                let s = &splane[srow + sx..srow + sx + len];
                for ((d, &gv), &s) in d.iter_mut().zip(gg).zip(s) {
                    *d += f * gv * s;
                }
            }
        }
    });
    out
}

/// Gaussian similarity field: `E[o, i] = exp(-(a_i - b_{i+o})^2 / (2 θ^2))`,
/// zero where `i + o` leaves the grid.
pub(crate) fn similarity_field(dims: Dims, offsets: &[Offset], a: &[f64], b: &[f64], theta: f64) -> Vec<f64> {
    let n = dims.len();
    let plane = dims.plane();
    let mut out = vec![0.0; offsets.len() * n];
    if n == 0 {
        return out;
    }
    let inv = 1.0 / (2.0 * theta * theta);
    out.par_chunks_mut(plane).enumerate().for_each(|(job, dst)| {
        let oi = job / dims.d;
        let z = job % dims.d;
        let o = offsets[oi];
        let zz = z as isize + o[0];
        if zz < 0 || zz >= dims.d as isize {
            return;
        }
        let zz = zz as usize;
        let (ylo, yhi) = axis_range(dims.h, o[1]);
        let (xlo, xhi) = axis_range(dims.w, o[2]);
        if yhi <= ylo || xhi <= xlo {
            return;
        }
        for y in ylo..yhi {
            let row = z * plane + y * dims.w;
            let srow = zz * plane + ((y as isize + o[1]) as usize) * dims.w;
            let sx = (xlo as isize + o[2]) as usize;
            let len = xhi - xlo;
            let d = &mut dst[y * dims.w + xlo..y * dims.w + xlo + len];
            let av = &a[row + xlo..row + xlo + len];
            let bv = &b[srow + sx..srow + sx + len];
            for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                let diff = x - y;
                *d = (-(diff * diff) * inv).exp();
            }
        }
    });
    out
}

/// `Σ_{o,i} w[o, i] · E[o, i] · (a_i - b_{i+o})^2`, summed per offset plane in a
/// fixed order. Used for bandwidth gradients.
pub(crate) fn weighted_sq_diff_sum(
    dims: Dims,
    offsets: &[Offset],
    a: &[f64],
    b: &[f64],
    weights: &[f64],
    sim: &[f64],
) -> f64 {
    let n = dims.len();
    let plane = dims.plane();
    if n == 0 {
        return 0.0;
    }
    let partials: Vec<f64> = (0..offsets.len() * dims.d)
        .into_par_iter()
        .map(|job| {
            let oi = job / dims.d;
            let z = job % dims.d;
            let o = offsets[oi];
            let zz = z as isize + o[0];
            if zz < 0 || zz >= dims.d as isize {
                return 0.0;
            }
            let zz = zz as usize;
            let (ylo, yhi) = axis_range(dims.h, o[1]);
            let (xlo, xhi) = axis_range(dims.w, o[2]);
            if yhi <= ylo || xhi <= xlo {
                return 0.0;
            }
            let mut acc = 0.0;
            for y in ylo..yhi {
                let row = z * plane + y * dims.w;
                let srow = zz * plane + ((y as isize + o[1]) as usize) * dims.w;
                let sx = (xlo as isize + o[2]) as usize;
                for t in 0..xhi - xlo {
                    let i = row + xlo + t;
                    let diff = a[i] - b[srow + sx + t];
                    acc += weights[oi * n + i] * sim[oi * n + i] * diff * diff;
                }
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn offsets3() -> Vec<Offset> {
        let mut v = Vec::new();
        for dz in -1..=1 {
            for dy in -2..=2 {
                for dx in -1..=1 {
                    v.push([dz, dy, dx]);
                }
            }
        }
        v
    }

    fn brute_gather(dims: Dims, ch: usize, offs: &[Offset], k: &[f64], src: &[f64]) -> Vec<f64> {
        let n = dims.len();
        let mut out = vec![0.0; ch * n];
        for c in 0..ch {
            for i in 0..n {
                let (z, y, x) = dims.coords(i);
                for (oi, &o) in offs.iter().enumerate() {
                    if let Some(j) = dims.offset_index(z, y, x, o) {
                        out[c * n + i] += k[oi * n + i] * src[c * n + j];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gather_matches_direct_loops() {
        let dims = Dims::new(3, 4, 5);
        let offs = offsets3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k: Vec<f64> = (0..offs.len() * dims.len()).map(|_| rng.gen()).collect();
        let src: Vec<f64> = (0..2 * dims.len()).map(|_| rng.gen()).collect();
        let a = gather(dims, 2, &offs, &k, &src, None);
        let b = brute_gather(dims, 2, &offs, &k, &src);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_and_kernel_grad_are_adjoints() {
        // <g, gather(K, s)> == <gather_transpose(K, g), s> == <gather_kernel_grad(g, s), K>
        let dims = Dims::new(4, 3, 5);
        let offs = offsets3();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = dims.len();
        let k: Vec<f64> = (0..offs.len() * n).map(|_| rng.gen()).collect();
        let s: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = [0.5, -2.0, 1.5];
        let fwd = gather(dims, 3, &offs, &k, &s, Some(&scale));
        let lhs: f64 = fwd.iter().zip(&g).map(|(a, b)| a * b).sum();
        let tr = gather_transpose(dims, 3, &offs, &k, &g, Some(&scale));
        let mid: f64 = tr.iter().zip(&s).map(|(a, b)| a * b).sum();
        let kg = gather_kernel_grad(dims, 3, &offs, &g, &s, Some(&scale));
        let rhs: f64 = kg.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
