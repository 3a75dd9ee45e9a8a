//! Synthetic pathology: random ellipsoid masks filled with intensity noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, ScalarVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionSpec {
    pub seed: u64,
    pub count: usize,
    /// Per-axis semi-axis range in voxels.
    pub radius: [f64; 2],
    /// Noise magnitude range as a fraction of the scan maximum.
    pub noise: [f64; 2],
}

impl Default for LesionSpec {
    fn default() -> Self {
        LesionSpec { seed: 0, count: 2, radius: [2.0, 4.0], noise: [0.2, 0.5] }
    }
}

impl LesionSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.noise;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::param(format!("noise range must satisfy 0 <= low <= high <= 1, got {:?}", self.noise)));
        }
        let [rlo, rhi] = self.radius;
        if !(rlo >= 1.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::param(format!("radius range must satisfy 1 <= low <= high, got {:?}", self.radius)));
        }
        Ok(())
    }
}

/// Lattice points `(dz, dy, dx)` with `Σ (d/r)² ≤ 1`.
pub fn ellipsoid_offsets(r: [f64; 3]) -> Vec<[isize; 3]> {
    let e = r.map(|v| v.floor() as isize);
    let mut out = Vec::new();
    for dz in -e[0]..=e[0] {
        for dy in -e[1]..=e[1] {
            for dx in -e[2]..=e[2] {
                let q = (dz as f64 / r[0]).powi(2) + (dy as f64 / r[1]).powi(2) + (dx as f64 / r[2]).powi(2);
                if q <= 1.0 {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// One sampled ellipsoid: integer centre and real semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [usize; 3],
    pub radii: [f64; 3],
}

/// Samples `spec.count` ellipsoids lying fully inside `dims`.
pub fn sample_blobs(dims: Dims, spec: &LesionSpec) -> Result<Vec<Blob>> {
    spec.validate()?;
    let size = dims.as_array();
    if spec.count > 0 {
        let need = 2 * spec.radius[1].floor() as usize + 1;
        if size.iter().any(|&s| s < need) {
            return Err(Error::param(format!("lesions of radius up to {} do not fit in {dims}", spec.radius[1])));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blobs = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.radius[0]..=spec.radius[1]));
        let center = std::array::from_fn(|a| {
            let e = radii[a].floor() as usize;
            rng.gen_range(e..=size[a] - 1 - e)
        });
        blobs.push(Blob { center, radii });
    }
    Ok(blobs)
}

/// Binary mask (classes {0, 1}) of the union of sampled ellipsoids.
pub fn gen_lesion_mask(dims: Dims, spec: &LesionSpec) -> Result<LabelMap> {
    let mut mask = vec![0u16; dims.len()];
    for b in sample_blobs(dims, spec)? {
        let [z, y, x] = b.center;
        for o in ellipsoid_offsets(b.radii) {
            let i = dims.offset_index(z, y, x, o).expect("blob lies inside the grid");
            mask[i] = 1;
        }
    }
    LabelMap::new(2, dims, mask)
}

/// 6-connected components of the nonzero mask voxels, each as a sorted index
/// list, ordered by their smallest index.
pub fn mask_components(mask: &LabelMap) -> Vec<Vec<usize>> {
    let dims = mask.dims();
    let data = mask.data();
    let mut seen = vec![false; dims.len()];
    let mut comps = Vec::new();
    const NB: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    for start in 0..dims.len() {
        if data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (z, y, x) = dims.coords(i);
            for o in NB {
                if let Some(j) = dims.offset_index(z, y, x, o) {
                    if data[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Adds uniform noise inside the mask. Each connected blob draws one
/// magnitude `m = U(noise range) · max(scan)`; each voxel then gets
/// `U(−m, m)`. The result is clamped to the input's range.
pub fn apply_pathology(scan: &ScalarVolume, mask: &LabelMap, spec: &LesionSpec, seed: u64) -> Result<ScalarVolume> {
    spec.validate()?;
    if mask.dims() != scan.dims() {
        return Err(Error::shape(format!("mask {} vs scan {}", mask.dims(), scan.dims())));
    }
    let (lo, hi) = scan.min_max();
    let mut out = scan.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for comp in mask_components(mask) {
        let m = rng.gen_range(spec.noise[0]..=spec.noise[1]) * hi;
        if m <= 0.0 {
            continue;
        }
        let data = out.data_mut();
        for i in comp {
            let v = data[i] + m * rng.gen_range(-1.0..=1.0);
            data[i] = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// One perturbed case: mask from `spec` reseeded with `case_seed`, noise
/// drawn from a seed derived from it.
pub fn perturb_case(scan: &ScalarVolume, spec: &LesionSpec, case_seed: u64) -> Result<(ScalarVolume, LabelMap)> {
    let spec = LesionSpec { seed: case_seed, ..spec.clone() };
    let mask = gen_lesion_mask(scan.dims(), &spec)?;
    let noisy = apply_pathology(scan, &mask, &spec, case_seed ^ 0x9e37_79b9_7f4a_7c15)?;
    Ok((noisy, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> ScalarVolume {
        ScalarVolume::from_fn(dims, |z, y, x| ((z * 7 + y * 3 + x) % 11) as f64 * 0.3 - 0.5)
    }

    #[test]
    fn zero_count_is_empty() {
        let spec = LesionSpec { count: 0, ..Default::default() };
        assert_eq!(gen_lesion_mask(Dims::cube(5), &spec).unwrap().count(1), 0);
    }

    #[test]
    fn single_sphere_cardinality() {
        let dims = Dims::cube(16);
        let spec = LesionSpec { seed: 11, count: 1, radius: [2.0, 2.0], ..Default::default() };
        let mask = gen_lesion_mask(dims, &spec).unwrap();
        let [b] = sample_blobs(dims, &spec).unwrap()[..] else { panic!() };
        let mut expect = 0;
        for z in 0..16i64 {
            for y in 0..16i64 {
                for x in 0..16i64 {
                    let d = (z - b.center[0] as i64).pow(2) + (y - b.center[1] as i64).pow(2) + (x - b.center[2] as i64).pow(2);
                    expect += (d <= 4) as usize;
                }
            }
        }
        assert_eq!(expect, 33);
        assert_eq!(mask.count(1), expect);
        assert_eq!(mask, gen_lesion_mask(dims, &spec).unwrap());
    }

    #[test]
    fn impossible_geometry() {
        let spec = LesionSpec { count: 1, radius: [3.0, 3.0], ..Default::default() };
        assert!(gen_lesion_mask(Dims::cube(6), &spec).is_err());
        assert!(gen_lesion_mask(Dims::cube(7), &spec).is_ok());
        assert!(LesionSpec { noise: [0.6, 0.5], ..Default::default() }.validate().is_err());
        assert!(LesionSpec { radius: [0.5, 2.0], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trivial_perturbations_leave_scan_alone() {
        let dims = Dims::cube(6);
        let scan = ramp(dims);
        let spec = LesionSpec::default();
        assert_eq!(apply_pathology(&scan, &LabelMap::zeros(2, dims), &spec, 1).unwrap(), scan);
        let full = LabelMap::new(2, dims, vec![1; dims.len()]).unwrap();
        let silent = LesionSpec { noise: [0.0, 0.0], ..spec };
        assert_eq!(apply_pathology(&scan, &full, &silent, 1).unwrap(), scan);
    }

    #[test]
    fn full_mask_statistics() {
        let dims = Dims::cube(6);
        let scan = ramp(dims);
        let (lo, hi) = scan.min_max();
        let full = LabelMap::new(2, dims, vec![1; dims.len()]).unwrap();
        for seed in 0..10 {
            let out = apply_pathology(&scan, &full, &LesionSpec::default(), seed).unwrap();
            let mac = out.data().iter().zip(scan.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / dims.len() as f64;
            assert!(mac > 0.0 && mac <= 0.5 * hi, "seed {seed}: {mac}");
            assert!(out.data().iter().all(|&v| (lo..=hi).contains(&v)));
        }
    }

    #[test]
    fn components_are_separate_blobs() {
        let dims = Dims::new(1, 1, 7);
        let mask = LabelMap::new(2, dims, vec![1, 1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(mask_components(&mask), vec![vec![0, 1], vec![3], vec![6]]);
    }

    proptest! {
        #[test]
        fn outside_mask_untouched_and_bounded(seed in 0u64..1000) {
            let dims = Dims::cube(10);
            let scan = ramp(dims);
            let spec = LesionSpec { seed, count: 3, radius: [1.0, 3.0], noise: [0.2, 0.5] };
            let mask = gen_lesion_mask(dims, &spec).unwrap();
            let out = apply_pathology(&scan, &mask, &spec, seed + 1).unwrap();
            let (lo, hi) = scan.min_max();
            for i in 0..dims.len() {
                if mask.data()[i] == 0 {
                    prop_assert_eq!(out.data()[i].to_bits(), scan.data()[i].to_bits());
                }
                prop_assert!(out.data()[i] >= lo && out.data()[i] <= hi);
            }
            prop_assert_eq!(out, apply_pathology(&scan, &mask, &spec, seed + 1).unwrap());
        }
    }
}
