//! Probabilistic atlas construction and coarse alignment.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vol1;
use crate::volume::{AtlasPair, Dims, LabelMap, ProbVolume, ScalarVolume};

/// Voxelwise mean of the scans and of the one-hot label maps.
///
/// Per-voxel intensities are summed in sorted order, so the result does not
/// depend on the order of `pairs`.
pub fn build_atlas(pairs: &[(ScalarVolume, LabelMap)], k: usize) -> Result<AtlasPair> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::param("atlas needs at least one scan/label pair"));
    };
    let dims = first.dims();
    for (j, (scan, labels)) in pairs.iter().enumerate() {
        if scan.dims() != dims || labels.dims() != dims {
            return Err(Error::shape(format!(
                "pair {j}: scan {} and labels {} vs reference {dims}",
                scan.dims(),
                labels.dims()
            )));
        }
        if labels.k() != k {
            return Err(Error::shape(format!("pair {j} has {} classes, expected {k}", labels.k())));
        }
    }
    let n = dims.len();
    let count = pairs.len() as f64;
    let scan: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut v: Vec<f64> = pairs.iter().map(|(s, _)| s.data()[i]).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / count
        })
        .collect();
    let mut counts = vec![0u32; k * n];
    for (_, labels) in pairs {
        for (i, &l) in labels.data().iter().enumerate() {
            counts[l as usize * n + i] += 1;
        }
    }
    let probs = counts.into_iter().map(|c| c as f64 / count).collect();
    AtlasPair::new(ScalarVolume::new(dims, scan)?, ProbVolume::new_normalized(k, dims, probs)?)
}

/// `shifted[i] = v[i − s]`, `fill` where `i − s` leaves the grid.
fn shift_channel(dims: Dims, v: &[f64], s: [isize; 3], fill: f64) -> Vec<f64> {
    let mut out = vec![fill; dims.len()];
    let neg = [-s[0], -s[1], -s[2]];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                if let Some(j) = dims.offset_index(z, y, x, neg) {
                    out[dims.index(z, y, x)] = v[j];
                }
            }
        }
    }
    out
}

/// Translates both atlas volumes by `shift`; scan padding 0, label padding uniform.
pub fn translate_atlas(atlas: &AtlasPair, shift: [isize; 3]) -> Result<AtlasPair> {
    let dims = atlas.dims();
    let k = atlas.k();
    let scan = shift_channel(dims, atlas.scan().data(), shift, 0.0);
    let mut labels = Vec::with_capacity(k * dims.len());
    for l in 0..k {
        labels.extend(shift_channel(dims, atlas.labels().channel(l), shift, 1.0 / k as f64));
    }
    AtlasPair::new(ScalarVolume::new(dims, scan)?, ProbVolume::new_normalized(k, dims, labels)?)
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (x - ma, y - mb);
        sab += p * q;
        saa += p * p;
        sbb += q * q;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Integer translation in `[−max_shift, max_shift]³` maximizing the
/// normalized cross-correlation between the shifted atlas scan (zero padded)
/// and `target`. Ties go to the lexicographically smallest shift.
pub fn best_translation(atlas: &AtlasPair, target: &ScalarVolume, max_shift: usize) -> Result<[isize; 3]> {
    let dims = atlas.dims();
    if target.dims() != dims {
        return Err(Error::shape(format!("atlas {dims} vs target {}", target.dims())));
    }
    let m = max_shift as isize;
    let mut shifts = Vec::new();
    for dz in -m..=m {
        for dy in -m..=m {
            for dx in -m..=m {
                shifts.push([dz, dy, dx]);
            }
        }
    }
    let scores: Vec<f64> = shifts
        .par_iter()
        .map(|&s| ncc(&shift_channel(dims, atlas.scan().data(), s, 0.0), target.data()))
        .collect();
    let mut best = 0;
    for j in 1..shifts.len() {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    Ok(shifts[best])
}

/// Aligns the atlas pair to `target`; returns the shifted pair and the shift.
pub fn align_translation(atlas: &AtlasPair, target: &ScalarVolume, max_shift: usize) -> Result<(AtlasPair, [isize; 3])> {
    if max_shift == 0 {
        if target.dims() != atlas.dims() {
            return Err(Error::shape(format!("atlas {} vs target {}", atlas.dims(), target.dims())));
        }
        return Ok((atlas.clone(), [0; 3]));
    }
    let s = best_translation(atlas, target, max_shift)?;
    Ok((translate_atlas(atlas, s)?, s))
}

/// Zero mean, unit (population) variance; constant volumes map to zeros.
pub fn intensity_standardize(v: &ScalarVolume) -> ScalarVolume {
    let d = v.data();
    if d.iter().all(|&x| x == d[0]) {
        return ScalarVolume::zeros(v.dims());
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    ScalarVolume::from_parts(v.dims(), d.iter().map(|x| (x - mean) / sd).collect())
}

/// JSON sidecar written next to the two atlas volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasSidecar {
    pub k: usize,
    pub dims: Dims,
    pub scan: String,
    pub labels: String,
    /// Number of scan/label pairs averaged.
    pub pairs: usize,
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default)]
    pub shift: [isize; 3],
}

/// Writes `<stem>.scan.vol1`, `<stem>.labels.vol1` and `<stem>.json` into `dir`.
pub fn write_atlas(dir: &Path, stem: &str, atlas: &AtlasPair, pairs: usize, sources: Vec<String>, shift: [isize; 3]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scan = format!("{stem}.scan.vol1");
    let labels = format!("{stem}.labels.vol1");
    vol1::write_vol1(dir.join(&scan), &atlas.scan().clone().into())?;
    vol1::write_vol1(dir.join(&labels), &atlas.labels().clone().into())?;
    let side = AtlasSidecar { k: atlas.k(), dims: atlas.dims(), scan, labels, pairs, sources, shift };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads an atlas from its JSON sidecar.
pub fn read_atlas(sidecar: &Path) -> Result<(AtlasPair, AtlasSidecar)> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let side: AtlasSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: sidecar.to_path_buf(), source: e })?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let scan = vol1::read_scalar(dir.join(&side.scan))?;
    let labels = vol1::read_prob(dir.join(&side.labels))?;
    if labels.k() != side.k || scan.dims() != side.dims {
        return Err(Error::shape(format!("atlas files disagree with sidecar {}", sidecar.display())));
    }
    Ok((AtlasPair::new(scan, labels)?, side))
}
