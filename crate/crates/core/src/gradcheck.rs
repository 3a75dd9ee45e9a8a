//! Central finite-difference check of [`crate::autodiff::backward`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, forward_with_tape, Gradients, UnaryModel};
use crate::error::{Error, Result};
use crate::meanfield::CamParams;
use crate::potentials::{Compatibility, Connectivity};
use crate::unary::TinyNetParams;
use crate::volume::{argmax_labels, one_hot, softmax_channels, AtlasPair, Dims, ProbVolume, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Mu,
    MuSmooth,
    OmegaP,
    OmegaS,
    ThetaP,
    ThetaS,
    Unary,
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::param(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Coordinates per group beyond which a seeded random subset is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Restrict the check to these groups; all present groups when empty.
    pub only: Vec<ParamGroup>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-3, max_coords: 64, seed: 0, only: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    /// Unary coordinates whose perturbation flips a ReLU; the loss has a kink there.
    pub skipped: usize,
    /// `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)` over the checked coordinates.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }
}

struct Problem<'a> {
    target: &'a ScalarVolume,
    atlas: &'a AtlasPair,
    gt: &'a ProbVolume,
}

fn coord<'a>(params: &'a mut CamParams, model: &'a mut UnaryModel, group: ParamGroup, j: usize) -> &'a mut f64 {
    match group {
        ParamGroup::Mu => &mut params.mu.values_mut()[j],
        ParamGroup::MuSmooth => &mut params.mu_smooth.as_mut().expect("group present").values_mut()[j],
        ParamGroup::OmegaP => &mut params.prior.omega_p.data_mut()[j],
        ParamGroup::OmegaS => &mut params.smooth.omega_s[j],
        ParamGroup::ThetaP => &mut params.prior.theta_p,
        ParamGroup::ThetaS => &mut params.smooth.theta_s,
        ParamGroup::Unary => match model {
            UnaryModel::TinyNet(p) => &mut p.flat_mut()[j],
            UnaryModel::Fixed(_) => unreachable!("fixed unaries have no parameters"),
        },
    }
}

fn analytic(g: &Gradients, group: ParamGroup) -> &[f64] {
    match group {
        ParamGroup::Mu => &g.d_mu,
        ParamGroup::MuSmooth => g.d_mu_smooth.as_deref().unwrap_or(&[]),
        ParamGroup::OmegaP => g.d_omega_p.data(),
        ParamGroup::OmegaS => &g.d_omega_s,
        ParamGroup::ThetaP => std::slice::from_ref(&g.d_theta_p),
        ParamGroup::ThetaS => std::slice::from_ref(&g.d_theta_s),
        ParamGroup::Unary => &g.d_unary_params,
    }
}

/// Compares analytic gradients with central differences for every
/// parameter group present in `params` and `model`.
pub fn gradcheck(
    target: &ScalarVolume,
    atlas: &AtlasPair,
    gt: &ProbVolume,
    params: &CamParams,
    model: &UnaryModel,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let prob = Problem { target, atlas, gt };
    let (_, _, tape) = forward_with_tape(target, atlas, gt, params, model)?;
    let grads = backward(&tape)?;
    let base_pattern = tape.relu_pattern();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut groups = vec![ParamGroup::Mu];
    if params.mu_smooth.is_some() {
        groups.push(ParamGroup::MuSmooth);
    }
    groups.extend([ParamGroup::OmegaP, ParamGroup::OmegaS, ParamGroup::ThetaP, ParamGroup::ThetaS]);
    if model.param_count() > 0 {
        groups.push(ParamGroup::Unary);
    }
    if let Some(g) = cfg.only.iter().find(|g| !groups.contains(g)) {
        return Err(Error::param(format!("parameter group {g:?} is not present in this model")));
    }
    if !cfg.only.is_empty() {
        groups.retain(|g| cfg.only.contains(g));
    }

    let mut reports = Vec::new();
    for group in groups {
        let g = analytic(&grads, group);
        let coords: Vec<usize> = if g.len() > cfg.max_coords {
            let mut c = sample(&mut rng, g.len(), cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..g.len()).collect()
        };
        let (mut diff, mut fd_norm, mut an_norm) = (0.0f64, 0.0f64, 0.0f64);
        let (mut checked, mut skipped) = (0, 0);
        for j in coords {
            let eval = |delta: f64| -> Result<(f64, Option<Vec<bool>>)> {
                let (mut p, mut m) = (params.clone(), model.clone());
                *coord(&mut p, &mut m, group, j) += delta;
                let (_, loss, t) = forward_with_tape(prob.target, prob.atlas, prob.gt, &p, &m)?;
                Ok((loss, t.relu_pattern()))
            };
            let (lp, pp) = eval(cfg.step)?;
            let (lm, pm) = eval(-cfg.step)?;
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * cfg.step);
            diff += (fd - g[j]).powi(2);
            fd_norm += fd * fd;
            an_norm += g[j] * g[j];
            checked += 1;
        }
        let scale = fd_norm.max(an_norm).sqrt();
        // Below roundoff level the absolute difference is reported instead.
        let rel_error = if scale < 1e-10 { diff.sqrt() } else { diff.sqrt() / scale };
        reports.push(GroupReport { group, checked, skipped, rel_error });
    }
    Ok(GradcheckReport { groups: reports })
}

/// A small random problem with every parameter group active.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub target: ScalarVolume,
    pub atlas: AtlasPair,
    pub gt: ProbVolume,
    pub params: CamParams,
    pub model: UnaryModel,
}

impl GradcheckInstance {
    /// Random intensities, atlas, ground truth and parameters on `dims`,
    /// with `3³` stencils (prior dilation 2) and three iterations. The unary
    /// model is a freshly initialized TinyNet or fixed random logits.
    pub fn random(k: usize, dims: Dims, seed: u64, tinynet: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len();
        let mut rv = |m: usize, lo: f64, hi: f64| -> Vec<f64> { (0..m).map(|_| rng.gen_range(lo..hi)).collect() };
        let target = ScalarVolume::new(dims, rv(n, -1.0, 1.0))?;
        let scan = ScalarVolume::new(dims, rv(n, -1.0, 1.0))?;
        let labels = softmax_channels(&ProbVolume::new(k, dims, rv(k * n, -2.0, 2.0))?)?;
        let unary = ProbVolume::new(k, dims, rv(k * n, -2.0, 2.0))?;
        let gt = one_hot(&argmax_labels(&ProbVolume::new(k, dims, rv(k * n, 0.0, 1.0))?), k)?;
        let mut params = CamParams::new(k, dims);
        params.mu = Compatibility::new(k, rv(k * k, 0.0, 1.0))?;
        params.prior.omega_p = ScalarVolume::new(dims, rv(n, 0.05, 0.4))?;
        params.prior.theta_p = rv(1, 0.4, 1.2)[0];
        params.smooth.omega_s = rv(k, 0.05, 0.4);
        params.smooth.theta_s = rv(1, 0.4, 1.2)[0];
        params.conn_p = Connectivity::new(3, 2)?;
        params.conn_s = Connectivity::new(3, 1)?;
        params.iters = 3;
        let model = if tinynet { UnaryModel::TinyNet(TinyNetParams::init(k, seed)) } else { UnaryModel::Fixed(unary) };
        Ok(GradcheckInstance { target, atlas: AtlasPair::new(scan, labels)?, gt, params, model })
    }

    pub fn check(&self, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
        gradcheck(&self.target, &self.atlas, &self.gt, &self.params, &self.model, cfg)
    }
}
