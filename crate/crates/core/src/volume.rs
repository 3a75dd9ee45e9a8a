//! Volume containers and per-voxel channel operations.
//!
//! All grids use C order `(d, h, w)`; probability volumes are channel-major,
//! so each class occupies one contiguous `d*h*w` plane.

use crate::error::{Error, Result};

/// Spatial extent of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { d: n, h: n, w: n }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (z, y, x)
    }

    /// Index of `(z, y, x) + offset`, or `None` when it leaves the grid.
    #[inline]
    pub fn offset_index(&self, z: usize, y: usize, x: usize, o: [isize; 3]) -> Option<usize> {
        let zz = z as isize + o[0];
        let yy = y as isize + o[1];
        let xx = x as isize + o[2];
        if zz < 0 || yy < 0 || xx < 0 {
            return None;
        }
        let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
        if zz >= self.d || yy >= self.h || xx >= self.w {
            return None;
        }
        Some(self.index(zz, yy, xx))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

fn check_finite(data: &[f64], stride: usize) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { voxel: i % stride, context: None });
    }
    Ok(())
}

/// One-channel intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "scalar volume {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        check_finite(&data, dims.len().max(1))?;
        Ok(ScalarVolume { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        ScalarVolume { dims, data: vec![value; dims.len()] }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(z, y, x));
                }
            }
        }
        ScalarVolume { dims, data }
    }

    pub(crate) fn from_parts(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        ScalarVolume { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// K-channel per-voxel class scores.
///
/// The same container holds raw logits (`normalized == false`) and
/// per-voxel distributions (`normalized == true`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    k: usize,
    dims: Dims,
    data: Vec<f64>,
    normalized: bool,
}

/// Tolerance on per-voxel channel sums for a volume to count as normalized.
pub const NORMALIZED_TOL: f64 = 1e-6;

impl ProbVolume {
    /// Raw (unnormalized) scores.
    pub fn new(k: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::shape(format!("need at least 2 classes, got {k}")));
        }
        if data.len() != k * dims.len() {
            return Err(Error::shape(format!(
                "prob volume {k}x{dims} needs {} values, got {}",
                k * dims.len(),
                data.len()
            )));
        }
        check_finite(&data, dims.len().max(1))?;
        Ok(ProbVolume { k, dims, data, normalized: false })
    }

    /// Per-voxel distributions; fails if any voxel is not a distribution.
    pub fn new_normalized(k: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(k, dims, data)?;
        if let Some(i) = v.first_unnormalized_voxel(NORMALIZED_TOL) {
            return Err(Error::shape(format!("voxel {i} is not a probability distribution")));
        }
        v.normalized = true;
        Ok(v)
    }

    pub(crate) fn from_parts(k: usize, dims: Dims, data: Vec<f64>, normalized: bool) -> Self {
        debug_assert_eq!(data.len(), k * dims.len());
        ProbVolume { k, dims, data, normalized }
    }

    pub fn uniform(k: usize, dims: Dims) -> Self {
        ProbVolume { k, dims, data: vec![1.0 / k as f64; k * dims.len()], normalized: true }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[l * n..(l + 1) * n]
    }

    pub fn get(&self, l: usize, voxel: usize) -> f64 {
        self.data[l * self.dims.len() + voxel]
    }

    /// First voxel whose channels are negative or do not sum to one.
    pub fn first_unnormalized_voxel(&self, tol: f64) -> Option<usize> {
        let n = self.dims.len();
        (0..n).find(|&i| {
            let mut s = 0.0;
            for l in 0..self.k {
                let p = self.data[l * n + i];
                if p < 0.0 {
                    return true;
                }
                s += p;
            }
            (s - 1.0).abs() > tol
        })
    }

    /// Marks the volume normalized if every voxel is a distribution within `tol`.
    pub fn detect_normalized(mut self, tol: f64) -> Self {
        self.normalized = self.first_unnormalized_voxel(tol).is_none();
        self
    }
}

/// Per-voxel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    k: usize,
    dims: Dims,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(k: usize, dims: Dims, data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "label map {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if k == 0 || k > u16::MAX as usize + 1 {
            return Err(Error::shape(format!("invalid class count {k}")));
        }
        if let Some(i) = data.iter().position(|&l| l as usize >= k) {
            return Err(Error::LabelOutOfRange { voxel: i, label: data[i] as u32, classes: k as u32 });
        }
        Ok(LabelMap { k, dims, data })
    }

    pub fn zeros(k: usize, dims: Dims) -> Self {
        LabelMap { k, dims, data: vec![0; dims.len()] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Number of voxels carrying `class`.
    pub fn count(&self, class: usize) -> usize {
        self.data.iter().filter(|&&l| l as usize == class).count()
    }
}

/// Atlas intensity scan together with its probabilistic label map.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasPair {
    scan: ScalarVolume,
    labels: ProbVolume,
}

impl AtlasPair {
    pub fn new(scan: ScalarVolume, labels: ProbVolume) -> Result<Self> {
        if scan.dims() != labels.dims() {
            return Err(Error::shape(format!(
                "atlas scan {} vs atlas labels {}",
                scan.dims(),
                labels.dims()
            )));
        }
        if !labels.is_normalized() {
            return Err(Error::shape("atlas labels must be normalized"));
        }
        Ok(AtlasPair { scan, labels })
    }

    pub fn scan(&self) -> &ScalarVolume {
        &self.scan
    }

    pub fn labels(&self) -> &ProbVolume {
        &self.labels
    }

    pub fn dims(&self) -> Dims {
        self.scan.dims()
    }

    pub fn k(&self) -> usize {
        self.labels.k()
    }
}

/// Per-voxel softmax over channels of a `k x n` channel-major buffer.
pub(crate) fn softmax_into(k: usize, n: usize, logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), k * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for l in 0..k {
            m = m.max(logits[l * n + i]);
        }
        let mut s = 0.0;
        for l in 0..k {
            let e = (logits[l * n + i] - m).exp();
            out[l * n + i] = e;
            s += e;
        }
        let inv = 1.0 / s;
        for l in 0..k {
            out[l * n + i] *= inv;
        }
    }
}

/// Channel-wise softmax with max subtraction.
pub fn softmax_channels(logits: &ProbVolume) -> Result<ProbVolume> {
    let (k, dims) = (logits.k(), logits.dims());
    let n = dims.len();
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { voxel: i % n.max(1), context: Some("softmax input".into()) });
    }
    let mut out = vec![0.0; k * n];
    softmax_into(k, n, logits.data(), &mut out);
    Ok(ProbVolume::from_parts(k, dims, out, true))
}

pub fn one_hot(labels: &LabelMap, k: usize) -> Result<ProbVolume> {
    if k < 2 {
        return Err(Error::shape(format!("need at least 2 classes, got {k}")));
    }
    let n = labels.dims().len();
    let mut data = vec![0.0; k * n];
    for (i, &l) in labels.data().iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::LabelOutOfRange { voxel: i, label: l as u32, classes: k as u32 });
        }
        data[l * n + i] = 1.0;
    }
    Ok(ProbVolume::from_parts(k, labels.dims(), data, true))
}

/// Per-voxel argmax; ties resolve to the lowest class index.
pub fn argmax_labels(q: &ProbVolume) -> LabelMap {
    let (k, dims) = (q.k(), q.dims());
    let n = dims.len();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = q.data[i];
            for l in 1..k {
                let v = q.data[l * n + i];
                if v > best_v {
                    best = l;
                    best_v = v;
                }
            }
            best as u16
        })
        .collect();
    LabelMap { k, dims, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(k: usize, dims: Dims, seed: u64) -> ProbVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..k * dims.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        ProbVolume::new(k, dims, data).unwrap()
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let z = ProbVolume::new(4, Dims::cube(2), vec![0.0; 32]).unwrap();
        let q = softmax_channels(&z).unwrap();
        assert!(q.data().iter().all(|&p| p == 0.25));
        assert!(q.is_normalized());
    }

    #[test]
    fn softmax_two_class_analytic() {
        let z = ProbVolume::new(2, Dims::cube(1), vec![0.0, 2f64.ln()]).unwrap();
        let q = softmax_channels(&z).unwrap();
        assert!((q.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_channel_sums() {
        let q = softmax_channels(&random_logits(3, Dims::cube(2), 7)).unwrap();
        let n = 8;
        for i in 0..n {
            let s: f64 = (0..3).map(|l| q.data()[l * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_with_voxel_index() {
        let mut data = vec![0.0; 2 * 8];
        data[8 + 5] = f64::NAN;
        let v = ProbVolume::from_parts(2, Dims::cube(2), data, false);
        match softmax_channels(&v) {
            Err(Error::NonFinite { voxel, .. }) => assert_eq!(voxel, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_hot_basics() {
        let m = LabelMap::new(3, Dims::cube(1), vec![2]).unwrap();
        assert_eq!(one_hot(&m, 3).unwrap().data(), &[0.0, 0.0, 1.0]);
        let z = LabelMap::zeros(2, Dims::cube(2));
        let oh = one_hot(&z, 2).unwrap();
        assert!(oh.channel(0).iter().all(|&v| v == 1.0));
        assert!(oh.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_out_of_range() {
        let m = LabelMap { k: 5, dims: Dims::cube(2), data: vec![0, 1, 0, 4, 0, 0, 0, 0] };
        match one_hot(&m, 3) {
            Err(Error::LabelOutOfRange { voxel, label, .. }) => {
                assert_eq!((voxel, label), (3, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn argmax_ties_and_basic() {
        let q = ProbVolume::new(3, Dims::cube(1), vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(argmax_labels(&q).data(), &[1]);
        let t = ProbVolume::new(2, Dims::cube(1), vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_labels(&t).data(), &[0]);
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        assert!(matches!(
            LabelMap::new(2, Dims::cube(1), vec![2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn argmax_inverts_one_hot(seed in any::<u64>(), k in 2usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dims = Dims::new(2, 3, 4);
                let data = (0..dims.len()).map(|_| rng.gen_range(0..k as u16)).collect();
                let m = LabelMap::new(k, dims, data).unwrap();
                prop_assert_eq!(argmax_labels(&one_hot(&m, k).unwrap()), m);
            }

            #[test]
            fn softmax_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
                let dims = Dims::new(2, 2, 3);
                let z = random_logits(3, dims, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                let n = dims.len();
                let per_voxel: Vec<f64> = (0..n).map(|_| shift * rng.gen::<f64>()).collect();
                let shifted: Vec<f64> = z.data().iter().enumerate().map(|(j, v)| v + per_voxel[j % n]).collect();
                let a = softmax_channels(&z).unwrap();
                let b = softmax_channels(&ProbVolume::new(3, dims, shifted).unwrap()).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn argmax_invariant_under_monotone_map(seed in any::<u64>()) {
                let z = random_logits(4, Dims::cube(3), seed);
                let mapped: Vec<f64> = z.data().iter().map(|v| (0.5 * v).exp() * 3.0 + 1.0).collect();
                let m = ProbVolume::new(4, z.dims(), mapped).unwrap();
                prop_assert_eq!(argmax_labels(&z), argmax_labels(&m));
            }
        }
    }
}
