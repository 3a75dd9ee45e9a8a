//! Adam over the flattened learnable parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, UnaryModel};
use crate::error::{Error, Result};
use crate::meanfield::CamParams;

/// Lower bound applied to both bandwidths after every update.
pub const THETA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr_default: f64,
    pub lr_omega_p: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr_default: 5e-4, lr_omega_p: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_default > 0.0
            && self.lr_omega_p > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::param(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Named parameter groups in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Mu,
    MuSmooth,
    OmegaP,
    OmegaS,
    ThetaP,
    ThetaS,
    Unary,
}

impl Group {
    pub fn is_cam(self) -> bool {
        self != Group::Unary
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub group: Group,
    pub start: usize,
    pub len: usize,
}

/// Group boundaries of the flat parameter vector.
pub fn layout(params: &CamParams, model: &UnaryModel) -> Vec<Segment> {
    let k = params.k();
    let mut sizes = vec![(Group::Mu, k * k)];
    if params.mu_smooth.is_some() {
        sizes.push((Group::MuSmooth, k * k));
    }
    sizes.extend([
        (Group::OmegaP, params.prior.omega_p.data().len()),
        (Group::OmegaS, k),
        (Group::ThetaP, 1),
        (Group::ThetaS, 1),
        (Group::Unary, model.param_count()),
    ]);
    let mut start = 0;
    sizes
        .into_iter()
        .map(|(group, len)| {
            let s = Segment { group, start, len };
            start += len;
            s
        })
        .collect()
}

pub fn flatten_params(params: &CamParams, model: &UnaryModel) -> Vec<f64> {
    let mut v = params.mu.values().to_vec();
    if let Some(m) = &params.mu_smooth {
        v.extend_from_slice(m.values());
    }
    v.extend_from_slice(params.prior.omega_p.data());
    v.extend_from_slice(&params.smooth.omega_s);
    v.push(params.prior.theta_p);
    v.push(params.smooth.theta_s);
    if let UnaryModel::TinyNet(p) = model {
        v.extend_from_slice(p.flat());
    }
    v
}

pub fn flatten_grads(g: &Gradients) -> Vec<f64> {
    let mut v = g.d_mu.clone();
    if let Some(m) = &g.d_mu_smooth {
        v.extend_from_slice(m);
    }
    v.extend_from_slice(g.d_omega_p.data());
    v.extend_from_slice(&g.d_omega_s);
    v.push(g.d_theta_p);
    v.push(g.d_theta_s);
    v.extend_from_slice(&g.d_unary_params);
    v
}

/// Writes a flat vector produced by [`flatten_params`] back into place.
pub fn unflatten_params(flat: &[f64], params: &mut CamParams, model: &mut UnaryModel) -> Result<()> {
    let segs = layout(params, model);
    let total = segs.last().map_or(0, |s| s.start + s.len);
    if flat.len() != total {
        return Err(Error::shape(format!("parameter vector has {} entries, expected {total}", flat.len())));
    }
    for s in segs {
        let src = &flat[s.start..s.start + s.len];
        match s.group {
            Group::Mu => params.mu.values_mut().copy_from_slice(src),
            Group::MuSmooth => params.mu_smooth.as_mut().expect("in layout").values_mut().copy_from_slice(src),
            Group::OmegaP => params.prior.omega_p.data_mut().copy_from_slice(src),
            Group::OmegaS => params.smooth.omega_s.copy_from_slice(src),
            Group::ThetaP => params.prior.theta_p = src[0],
            Group::ThetaS => params.smooth.theta_s = src[0],
            Group::Unary => {
                if let UnaryModel::TinyNet(p) = model {
                    p.flat_mut().copy_from_slice(src);
                }
            }
        }
    }
    Ok(())
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// One bias-corrected Adam step on `x`. Entries whose `lr` is `None` are
    /// frozen: neither they nor their moments change.
    pub fn update(&mut self, x: &mut [f64], g: &[f64], cfg: &AdamConfig, lr: impl Fn(usize) -> Option<f64>) -> Result<()> {
        if x.len() != g.len() || x.len() != self.m.len() || x.len() != self.v.len() {
            return Err(Error::shape(format!(
                "optimizer state for {} parameters, got {} values and {} gradients",
                self.m.len(),
                x.len(),
                g.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for j in 0..x.len() {
            let Some(rate) = lr(j) else { continue };
            self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * g[j];
            self.v[j] = cfg.beta2 * self.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = self.m[j] / c1;
            let vh = self.v[j] / c2;
            x[j] -= rate * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Which groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub cam: bool,
    pub unary: bool,
}

/// Adam step on the CRF parameters and the unary model. `ω_p` uses its own
/// rate; bandwidths are clamped to [`THETA_MIN`] afterwards.
pub fn adam_step(
    params: &mut CamParams,
    model: &mut UnaryModel,
    grads: &Gradients,
    cfg: &AdamConfig,
    state: &mut AdamState,
    trainable: Trainable,
) -> Result<()> {
    let segs = layout(params, model);
    let mut x = flatten_params(params, model);
    let g = flatten_grads(grads);
    if g.len() != x.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", g.len(), x.len())));
    }
    let mut rate = vec![None; x.len()];
    for s in &segs {
        let on = if s.group.is_cam() { trainable.cam } else { trainable.unary };
        if on {
            let r = if s.group == Group::OmegaP { cfg.lr_omega_p } else { cfg.lr_default };
            rate[s.start..s.start + s.len].iter_mut().for_each(|v| *v = Some(r));
        }
    }
    state.update(&mut x, &g, cfg, |j| rate[j])?;
    unflatten_params(&x, params, model)?;
    params.prior.theta_p = params.prior.theta_p.max(THETA_MIN);
    params.smooth.theta_s = params.smooth.theta_s.max(THETA_MIN);
    Ok(())
}
