//! Two-stage training: unary model first, then the CRF plugged in.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, forward_with_tape, Gradients, UnaryModel};
use crate::error::{Error, Result};
use crate::meanfield::{ablate, mean_field_infer, Ablation, CamInput, CamParams};
use crate::metrics::dsc;
use crate::optim::{adam_step, flatten_params, AdamConfig, AdamState, Trainable};
use crate::volume::{argmax_labels, one_hot, AtlasPair, Dims, LabelMap, ProbVolume, ScalarVolume};

/// One training or validation case with its aligned atlas.
#[derive(Debug, Clone)]
pub struct Sample {
    pub target: ScalarVolume,
    pub gt: LabelMap,
    pub atlas: AtlasPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Unary model alone; the CRF is bypassed.
    UnaryOnly,
    /// Unary model and CRF parameters together.
    Joint,
    /// CRF parameters only, unary model frozen.
    SeparateCam,
}

impl Stage {
    fn trainable(self) -> Trainable {
        match self {
            Stage::UnaryOnly => Trainable { cam: false, unary: true },
            Stage::Joint => Trainable { cam: true, unary: true },
            Stage::SeparateCam => Trainable { cam: true, unary: false },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_default: f64,
    pub lr_omega_p: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub stage: Stage,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Std of additive Gaussian noise as a fraction of each scan's range.
    pub noise_frac: f64,
    /// Random crop size `[d, h, w]`; whole volumes when absent.
    pub patch: Option<[usize; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            lr_default: a.lr_default,
            lr_omega_p: a.lr_omega_p,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            stage: Stage::Joint,
            batch_size: 1,
            noise_frac: 0.02,
            patch: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_default: self.lr_default,
            lr_omega_p: self.lr_omega_p,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::param("patience and batch size must be at least 1"));
        }
        if !(self.noise_frac >= 0.0) {
            return Err(Error::param(format!("noise fraction must be non-negative, got {}", self.noise_frac)));
        }
        if self.patch.is_some_and(|p| p.contains(&0)) {
            return Err(Error::param("patch dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean foreground Dice on the validation set; NaN without one.
    pub val_dsc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CamParams,
    pub model: UnaryModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub optimizer: AdamState,
}

/// History as CSV with a header row.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("stage,epoch,train_loss,val_dsc\n");
    for r in history {
        let stage = serde_json::to_value(r.stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        s.push_str(&format!("{stage},{},{:.17e},{:.17e}\n", r.epoch, r.train_loss, r.val_dsc));
    }
    s
}

/// CRF parameters as used by `stage` (potentials off for the unary stage).
pub fn stage_params(params: &CamParams, stage: Stage) -> CamParams {
    match stage {
        Stage::UnaryOnly => ablate(params, Ablation::Both),
        _ => params.clone(),
    }
}

/// Posterior `Q` for one scan.
pub fn predict(params: &CamParams, model: &UnaryModel, target: &ScalarVolume, atlas: &AtlasPair) -> Result<ProbVolume> {
    let input = CamInput::new(target.clone(), model.logits(target)?, atlas.clone())?;
    mean_field_infer(&input, params)
}

/// Mean Dice over classes `1..K`.
pub fn mean_foreground_dsc(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let k = gt.k();
    let mut total = 0.0;
    for c in 1..k {
        total += dsc(pred, gt, c)?;
    }
    Ok(total / (k - 1) as f64)
}

fn validation_dsc(params: &CamParams, model: &UnaryModel, val: &[Sample]) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in val {
        let q = predict(params, model, &s.target, &s.atlas)?;
        total += mean_foreground_dsc(&argmax_labels(&q), &s.gt)?;
    }
    Ok(total / val.len() as f64)
}

fn crop_channels(src: &[f64], channels: usize, dims: Dims, origin: [usize; 3], size: Dims) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * size.len());
    let n = dims.len();
    for c in 0..channels {
        for z in 0..size.d {
            for y in 0..size.h {
                let start = c * n + dims.index(origin[0] + z, origin[1] + y, origin[2]);
                out.extend_from_slice(&src[start..start + size.w]);
            }
        }
    }
    out
}

fn uncrop_add(dst: &mut [f64], dims: Dims, origin: [usize; 3], size: Dims, src: &[f64]) {
    for z in 0..size.d {
        for y in 0..size.h {
            let start = dims.index(origin[0] + z, origin[1] + y, origin[2]);
            let row = &src[size.index(z, y, 0)..size.index(z, y, 0) + size.w];
            dst[start..start + size.w].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
}

/// Crop of a sample and of the per-voxel prior weights at the same window.
struct Patch {
    sample: Sample,
    params: CamParams,
    origin: [usize; 3],
    size: Dims,
}

fn sample_patch(s: &Sample, params: &CamParams, size: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Patch> {
    let dims = s.target.dims();
    let full = dims.as_array();
    if (0..3).any(|a| size[a] > full[a]) {
        return Err(Error::param(format!("patch {size:?} larger than volume {dims}")));
    }
    let origin: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=full[a] - size[a]));
    let pd = Dims::new(size[0], size[1], size[2]);
    let k = s.atlas.k();
    let target = ScalarVolume::new(pd, crop_channels(s.target.data(), 1, dims, origin, pd))?;
    let gt_data: Vec<u16> = {
        let as_f: Vec<f64> = s.gt.data().iter().map(|&v| v as f64).collect();
        crop_channels(&as_f, 1, dims, origin, pd).into_iter().map(|v| v as u16).collect()
    };
    let gt = LabelMap::new(k, pd, gt_data)?;
    let atlas = AtlasPair::new(
        ScalarVolume::new(pd, crop_channels(s.atlas.scan().data(), 1, dims, origin, pd))?,
        ProbVolume::new_normalized(k, pd, crop_channels(s.atlas.labels().data(), k, dims, origin, pd))?,
    )?;
    let mut p = params.clone();
    p.prior.omega_p = ScalarVolume::new(pd, crop_channels(params.prior.omega_p.data(), 1, dims, origin, pd))?;
    Ok(Patch { sample: Sample { target, gt, atlas }, params: p, origin, size: pd })
}

fn add_noise(v: &ScalarVolume, frac: f64, rng: &mut ChaCha8Rng) -> Result<ScalarVolume> {
    let (lo, hi) = v.min_max();
    let sigma = frac * (hi - lo);
    if !(sigma > 0.0) {
        return Ok(v.clone());
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    ScalarVolume::new(v.dims(), v.data().iter().map(|x| x + dist.sample(rng)).collect())
}

fn check_dataset(train: &[Sample], val: &[Sample], params: &CamParams, model: &UnaryModel) -> Result<Dims> {
    let Some(first) = train.first() else {
        return Err(Error::param("training set is empty"));
    };
    let dims = first.target.dims();
    let k = model.k();
    for (j, s) in train.iter().chain(val).enumerate() {
        if s.target.dims() != dims || s.gt.dims() != dims || s.atlas.dims() != dims {
            return Err(Error::shape(format!("sample {j} is not {dims}")));
        }
        if s.gt.k() != k || s.atlas.k() != k {
            return Err(Error::shape(format!("sample {j} does not have {k} classes")));
        }
    }
    params.validate(k, dims)?;
    Ok(dims)
}

/// Trains one stage with early stopping on validation Dice; the returned
/// parameters are those of the best epoch.
pub fn train(train: &[Sample], val: &[Sample], params: &CamParams, model: &UnaryModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = check_dataset(train, val, params, model)?;
    if cfg.stage == Stage::UnaryOnly && model.param_count() == 0 {
        return Err(Error::param("unary-only training needs a trainable unary model"));
    }
    let adam = cfg.adam();
    let trainable = cfg.stage.trainable();
    let mut params = params.clone();
    let mut model = model.clone();
    let mut state = AdamState::new(flatten_params(&params, &model).len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gts: Vec<ProbVolume> = train.iter().map(|s| one_hot(&s.gt, s.gt.k())).collect::<Result<_>>()?;

    let mut history = Vec::new();
    let mut best = (params.clone(), model.clone(), state.clone());
    let (mut best_epoch, mut best_val, mut stale) = (0, f64::NEG_INFINITY, 0);
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(&params, dims, model.param_count());
            for &j in batch {
                let s = &train[j];
                let run_params = stage_params(&params, cfg.stage);
                let (loss, g) = match cfg.patch {
                    None => {
                        let target = add_noise(&s.target, cfg.noise_frac, &mut rng)?;
                        let (_, loss, tape) = forward_with_tape(&target, &s.atlas, &gts[j], &run_params, &model)?;
                        (loss, backward(&tape)?)
                    }
                    Some(size) => {
                        let p = sample_patch(s, &run_params, size, &mut rng)?;
                        let target = add_noise(&p.sample.target, cfg.noise_frac, &mut rng)?;
                        let gt = one_hot(&p.sample.gt, p.sample.gt.k())?;
                        let (_, loss, tape) = forward_with_tape(&target, &p.sample.atlas, &gt, &p.params, &model)?;
                        let g = backward(&tape)?;
                        let mut full = Gradients { d_omega_p: ScalarVolume::zeros(dims), ..g.clone() };
                        uncrop_add(full.d_omega_p.data_mut(), dims, p.origin, p.size, g.d_omega_p.data());
                        (loss, full)
                    }
                };
                loss_sum += loss;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &mut model, &grads, &adam, &mut state, trainable)?;
        }
        let val_dsc = validation_dsc(&stage_params(&params, cfg.stage), &model, val)?;
        history.push(EpochRecord { stage: cfg.stage, epoch, train_loss: loss_sum / train.len() as f64, val_dsc });
        if val.is_empty() || val_dsc > best_val {
            best = (params.clone(), model.clone(), state.clone());
            best_epoch = epoch;
            best_val = val_dsc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (params, model, optimizer) = best;
    Ok(TrainOutcome { params, model, history, best_epoch, best_val_dsc: best_val, optimizer })
}

/// Unary-only training followed by `second` (joint or separate CRF
/// training) starting from the stage-one result.
pub fn train_two_stage(
    train_set: &[Sample],
    val: &[Sample],
    params: &CamParams,
    model: &UnaryModel,
    first: &TrainConfig,
    second: &TrainConfig,
) -> Result<(TrainOutcome, TrainOutcome)> {
    if first.stage != Stage::UnaryOnly || second.stage == Stage::UnaryOnly {
        return Err(Error::param("two-stage training runs unary_only, then joint or separate_cam"));
    }
    let one = train(train_set, val, params, model, first)?;
    let two = train(train_set, val, params, &one.model, second)?;
    Ok((one, two))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unary::TinyNetParams;

    fn separable(dims: Dims, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u16> = (0..dims.len()).map(|_| rng.gen_range(0..2)).collect();
        let target = ScalarVolume::new(dims, labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        let gt = LabelMap::new(2, dims, labels).unwrap();
        let atlas = AtlasPair::new(target.clone(), ProbVolume::uniform(2, dims)).unwrap();
        Sample { target, gt, atlas }
    }

    fn quick(stage: Stage) -> TrainConfig {
        TrainConfig { stage, max_epochs: 4, lr_default: 1e-2, noise_frac: 0.0, ..Default::default() }
    }

    #[test]
    fn separable_volume_converges() {
        let dims = Dims::cube(6);
        let s = separable(dims, 1);
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 3));
        let cfg = TrainConfig { max_epochs: 150, lr_default: 2e-2, noise_frac: 0.0, stage: Stage::UnaryOnly, ..Default::default() };
        let out = train(std::slice::from_ref(&s), &[], &params, &model, &cfg).unwrap();
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn history_is_reproducible() {
        let dims = Dims::cube(5);
        let data: Vec<Sample> = (0..3).map(|j| separable(dims, j)).collect();
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 4));
        let cfg = TrainConfig { noise_frac: 0.05, batch_size: 2, ..quick(Stage::Joint) };
        let a = train(&data[..2], &data[2..], &params, &model, &cfg).unwrap();
        let b = train(&data[..2], &data[2..], &params, &model, &cfg).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.params, b.params);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn stages_touch_only_their_groups() {
        let dims = Dims::cube(5);
        let data: Vec<Sample> = (0..2).map(|j| separable(dims, j + 10)).collect();
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 5));
        let u = train(&data, &[], &params, &model, &quick(Stage::UnaryOnly)).unwrap();
        assert_eq!(u.params, params);
        assert_ne!(u.model, model);
        let s = train(&data, &[], &params, &model, &quick(Stage::SeparateCam)).unwrap();
        assert_eq!(s.model, model);
        assert_ne!(s.params, params);
        let j = train(&data, &[], &params, &model, &quick(Stage::Joint)).unwrap();
        assert_ne!(j.model, model);
        assert_ne!(j.params, params);
    }

    #[test]
    fn two_stage_sequencing() {
        let dims = Dims::cube(5);
        let data: Vec<Sample> = (0..3).map(|j| separable(dims, j + 20)).collect();
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 6));
        let (one, two) =
            train_two_stage(&data[..2], &data[2..], &params, &model, &quick(Stage::UnaryOnly), &quick(Stage::Joint)).unwrap();
        assert!(one.history.iter().all(|r| r.stage == Stage::UnaryOnly));
        assert!(two.history.iter().all(|r| r.stage == Stage::Joint));
        assert!(train_two_stage(&data, &[], &params, &model, &quick(Stage::Joint), &quick(Stage::Joint)).is_err());
    }

    #[test]
    fn early_stopping_restores_best() {
        let dims = Dims::cube(5);
        let data: Vec<Sample> = (0..3).map(|j| separable(dims, j + 30)).collect();
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 7));
        let cfg = TrainConfig { max_epochs: 30, patience: 2, lr_default: 0.5, ..quick(Stage::UnaryOnly) };
        let out = train(&data[..2], &data[2..], &params, &model, &cfg).unwrap();
        let best = out.history.iter().map(|r| r.val_dsc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_dsc, best);
        assert_eq!(out.history[out.best_epoch - 1].val_dsc, best);
        let again = validation_dsc(&stage_params(&out.params, Stage::UnaryOnly), &out.model, &data[2..]).unwrap();
        assert_eq!(again, best);
        if out.history.len() < cfg.max_epochs {
            assert_eq!(out.history.len(), out.best_epoch + cfg.patience);
        }
    }

    #[test]
    fn patches_train_and_scatter() {
        let dims = Dims::cube(6);
        let data: Vec<Sample> = (0..2).map(|j| separable(dims, j + 40)).collect();
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 8));
        let cfg = TrainConfig { patch: Some([4, 4, 3]), ..quick(Stage::Joint) };
        let out = train(&data, &[], &params, &model, &cfg).unwrap();
        assert_eq!(out.params.prior.omega_p.dims(), dims);
        let too_big = TrainConfig { patch: Some([7, 4, 4]), ..cfg };
        assert!(train(&data, &[], &params, &model, &too_big).is_err());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let dims = Dims::cube(4);
        let params = CamParams::new(2, dims);
        let model = UnaryModel::TinyNet(TinyNetParams::init(2, 9));
        assert!(train(&[], &[], &params, &model, &quick(Stage::Joint)).is_err());
        let data = vec![separable(dims, 1), separable(Dims::cube(5), 2)];
        assert!(train(&data, &[], &params, &model, &quick(Stage::Joint)).is_err());
    }
}
