//! Segmentation metrics: Dice, surface distances, local Dice decay.
//!
//! Conventions:
//! - A surface voxel belongs to the class and has at least one 6-neighbour
//!   outside it; voxels beyond the grid count as outside.
//! - HD95 is the linearly interpolated 95th percentile (index `0.95·(n−1)`)
//!   of both directed distance sets pooled together.
//! - Two empty sets have Dice 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap};

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("prediction {} vs ground truth {}", pred.dims(), gt.dims())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for one class.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64> {
    check_pair(pred, gt)?;
    let c = class as u16;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += (a == c) as usize;
        g += (b == c) as usize;
        inter += (a == c && b == c) as usize;
    }
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}

/// Boundary voxels of `class` under 6-connectivity.
pub fn surface_mask(labels: &LabelMap, class: usize) -> Vec<bool> {
    let dims = labels.dims();
    let c = class as u16;
    let data = labels.data();
    const NB: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    (0..dims.len())
        .map(|i| {
            if data[i] != c {
                return false;
            }
            let (z, y, x) = dims.coords(i);
            NB.iter().any(|&o| dims.offset_index(z, y, x, o).is_none_or(|j| data[j] != c))
        })
        .collect()
}

/// Squared distance transform of one line (lower envelope of parabolas).
/// `f` holds squared distances so far, `INFINITY` where unknown.
fn edt_line(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every voxel to the nearest member of `set`,
/// with per-axis voxel spacing `[dz, dy, dx]`. Infinite when `set` is empty.
pub fn distance_transform(dims: Dims, set: &[bool], spacing: [f64; 3]) -> Vec<f64> {
    let (d, h, w) = (dims.d, dims.h, dims.w);
    let mut g: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    // Axis passes: x (contiguous), y, z.
    let passes: [(usize, usize, f64); 3] = [(w, 1, spacing[2]), (h, w, spacing[1]), (d, h * w, spacing[0])];
    for (len, stride, step) in passes {
        if len == 0 {
            continue;
        }
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for start in 0..dims.len() {
            // Line starts are the voxels whose coordinate along this axis is 0.
            if (start / stride) % len != 0 {
                continue;
            }
            for t in 0..len {
                line[t] = g[start + t * stride];
            }
            edt_line(&line, step, &mut out);
            for t in 0..len {
                g[start + t * stride] = out[t];
            }
        }
    }
    g.into_iter().map(f64::sqrt).collect()
}

/// Linearly interpolated percentile `p ∈ [0, 1]` of sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub msd: f64,
    pub hd95: f64,
    /// Class present in only one map; both values are the volume diagonal.
    pub sentinel: bool,
}

pub fn volume_diagonal(dims: Dims, spacing: [f64; 3]) -> f64 {
    let e = [dims.d as f64 * spacing[0], dims.h as f64 * spacing[1], dims.w as f64 * spacing[2]];
    e.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetric mean surface distance and HD95 for one class.
pub fn surface_distances(pred: &LabelMap, gt: &LabelMap, class: usize, spacing: [f64; 3]) -> Result<SurfaceDistances> {
    check_pair(pred, gt)?;
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::param(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    let dims = pred.dims();
    let sp = surface_mask(pred, class);
    let sg = surface_mask(gt, class);
    let (has_p, has_g) = (sp.iter().any(|&v| v), sg.iter().any(|&v| v));
    match (has_p, has_g) {
        (false, false) => {
            return Err(Error::Undefined(format!("class {class} is absent from both maps; only DSC is defined")))
        }
        (true, false) | (false, true) => {
            let diag = volume_diagonal(dims, spacing);
            return Ok(SurfaceDistances { msd: diag, hd95: diag, sentinel: true });
        }
        _ => {}
    }
    let dt_p = distance_transform(dims, &sp, spacing);
    let dt_g = distance_transform(dims, &sg, spacing);
    let p_to_g: Vec<f64> = (0..dims.len()).filter(|&i| sp[i]).map(|i| dt_g[i]).collect();
    let g_to_p: Vec<f64> = (0..dims.len()).filter(|&i| sg[i]).map(|i| dt_p[i]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let msd = 0.5 * (mean(&p_to_g) + mean(&g_to_p));
    let mut pooled = p_to_g;
    pooled.extend(g_to_p);
    pooled.sort_by(f64::total_cmp);
    Ok(SurfaceDistances { msd, hd95: percentile_sorted(&pooled, 0.95), sentinel: false })
}

/// Mean DSC drop over the listed classes whose ground truth meets the mask.
///
/// `classes`, `clean` and `pathological` are parallel arrays.
pub fn ldd(classes: &[usize], clean: &[f64], pathological: &[f64], mask: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if clean.len() != classes.len() || pathological.len() != classes.len() {
        return Err(Error::shape("per-class score lists differ in length"));
    }
    check_pair(mask, gt)?;
    let mut total = 0.0;
    let mut count = 0;
    for (j, &c) in classes.iter().enumerate() {
        let hit = gt.data().iter().zip(mask.data()).any(|(&g, &m)| g as usize == c && m != 0);
        if hit {
            total += clean[j] - pathological[j];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Undefined("no evaluated class has voxels inside the mask".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    /// `None` when the class is absent from both maps.
    pub distances: Option<SurfaceDistances>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    pub mean_msd: Option<f64>,
    pub mean_hd95: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_dsc: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_delta_dsc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Classes to aggregate; `None` means every foreground class `1..K`.
    pub classes: Option<Vec<usize>>,
    pub spacing: [f64; 3],
    pub distances: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { classes: None, spacing: [1.0; 3], distances: true }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn evaluate(pred: &LabelMap, gt: &LabelMap, opts: &EvalOptions) -> Result<EvalReport> {
    check_pair(pred, gt)?;
    if pred.k() != gt.k() {
        return Err(Error::shape(format!("prediction has {} classes, ground truth {}", pred.k(), gt.k())));
    }
    let classes = match &opts.classes {
        Some(c) => c.clone(),
        None => (1..gt.k()).collect(),
    };
    if classes.is_empty() {
        return Err(Error::param("no classes to evaluate"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= gt.k()) {
        return Err(Error::param(format!("class {c} outside 0..{}", gt.k())));
    }
    let per_class = classes
        .par_iter()
        .map(|&c| {
            let d = dsc(pred, gt, c)?;
            let distances = if opts.distances {
                match surface_distances(pred, gt, c, opts.spacing) {
                    Ok(s) => Some(s),
                    Err(Error::Undefined(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            Ok(ClassMetrics { class: c, dsc: d, distances })
        })
        .collect::<Result<Vec<_>>>()?;
    let dscs: Vec<f64> = per_class.iter().map(|m| m.dsc).collect();
    let (mean_dsc, std_dsc) = mean_std(&dscs);
    let dist: Vec<SurfaceDistances> = per_class.iter().filter_map(|m| m.distances).collect();
    let avg = |f: fn(&SurfaceDistances) -> f64| {
        (!dist.is_empty()).then(|| dist.iter().map(f).sum::<f64>() / dist.len() as f64)
    };
    Ok(EvalReport {
        mean_msd: avg(|s| s.msd),
        mean_hd95: avg(|s| s.hd95),
        per_class,
        mean_dsc,
        std_dsc,
        ldd: None,
        delta_dsc: None,
        mean_delta_dsc: None,
    })
}

impl EvalReport {
    pub fn classes(&self) -> Vec<usize> {
        self.per_class.iter().map(|m| m.class).collect()
    }

    pub fn dscs(&self) -> Vec<f64> {
        self.per_class.iter().map(|m| m.dsc).collect()
    }

    /// Fills `ldd` relative to a report on the unperturbed scan.
    pub fn with_ldd(mut self, clean: &EvalReport, mask: &LabelMap, gt: &LabelMap) -> Result<Self> {
        if clean.classes() != self.classes() {
            return Err(Error::shape("reports cover different classes"));
        }
        self.ldd = Some(ldd(&self.classes(), &clean.dscs(), &self.dscs(), mask, gt)?);
        Ok(self)
    }

    /// Fills per-class and mean `DSC − DSC_baseline`.
    pub fn with_delta(mut self, baseline: &EvalReport) -> Result<Self> {
        if baseline.classes() != self.classes() {
            return Err(Error::shape("reports cover different classes"));
        }
        let d: Vec<f64> = self.dscs().iter().zip(baseline.dscs()).map(|(a, b)| a - b).collect();
        self.mean_delta_dsc = Some(d.iter().sum::<f64>() / d.len() as f64);
        self.delta_dsc = Some(d);
        Ok(self)
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut rows = vec![vec!["class".to_string(), "dsc".into(), "msd".into(), "hd95".into(), "note".into()]];
        for (j, m) in self.per_class.iter().enumerate() {
            let mut note = String::new();
            if m.distances.is_some_and(|d| d.sentinel) {
                note.push_str("sentinel");
            }
            if let Some(d) = &self.delta_dsc {
                note.push_str(&format!("{}Δdsc={:+.4}", if note.is_empty() { "" } else { " " }, d[j]));
            }
            rows.push(vec![
                m.class.to_string(),
                format!("{:.4}", m.dsc),
                fmt(m.distances.map(|d| d.msd)),
                fmt(m.distances.map(|d| d.hd95)),
                note,
            ]);
        }
        let mut summary = format!("mean dsc {:.4} ± {:.4}", self.mean_dsc, self.std_dsc);
        summary.push_str(&format!("; msd {}; hd95 {}", fmt(self.mean_msd), fmt(self.mean_hd95)));
        if let Some(l) = self.ldd {
            summary.push_str(&format!("; ldd {l:.4}"));
        }
        if let Some(d) = self.mean_delta_dsc {
            summary.push_str(&format!("; Δdsc {d:+.4}"));
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str(&summary);
        out.push('\n');
        out
    }
}
