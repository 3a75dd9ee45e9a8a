//! End-to-end toy experiment: atlas, two-stage training, ablations and
//! robustness under synthetic pathology.

use serde::{Deserialize, Serialize};

use crate::atlas::{align_translation, build_atlas};
use crate::autodiff::UnaryModel;
use crate::error::Result;
use crate::meanfield::{ablate, Ablation, CamParams};
use crate::metrics::{dsc, ldd};
use crate::perturb::{perturb_case, LesionSpec};
use crate::toy::{toygen, ToyCase, ToyConfig, TOY_CLASSES};
use crate::train::{predict, stage_params, train, Sample, Stage, TrainConfig, TrainOutcome};
use crate::unary::TinyNetParams;
use crate::volume::{argmax_labels, AtlasPair, LabelMap, ScalarVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub toy: ToyConfig,
    pub seed: u64,
    pub unary_epochs: usize,
    pub cam_epochs: usize,
    /// Number of perturbed test cases for the robustness measurement.
    pub perturbed_cases: usize,
    pub lesions: LesionSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            toy: ToyConfig::default(),
            seed: 0,
            unary_epochs: 20,
            cam_epochs: 10,
            perturbed_cases: 20,
            lesions: LesionSpec::default(),
        }
    }
}

/// Mean foreground test Dice of each variant, plus robustness figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub unary_dsc: f64,
    pub joint_dsc: f64,
    pub separate_dsc: f64,
    pub joint_no_prior_dsc: f64,
    pub joint_no_smooth_dsc: f64,
    pub unary_ldd: f64,
    pub joint_ldd: f64,
    /// Case seeds used for the perturbed set.
    pub perturb_seeds: Vec<u64>,
}

impl ExperimentReport {
    pub fn joint_gain(&self) -> f64 {
        self.joint_dsc - self.unary_dsc
    }

    pub fn separate_gain(&self) -> f64 {
        self.separate_dsc - self.unary_dsc
    }

    pub fn ldd_ratio(&self) -> f64 {
        self.joint_ldd / self.unary_ldd
    }
}

/// Trained models from one experiment, kept for further inspection.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub unary: TrainOutcome,
    pub joint: TrainOutcome,
    pub separate: TrainOutcome,
    pub atlas: AtlasPair,
    /// Test cases with their aligned atlases.
    pub test: Vec<Sample>,
}

/// Atlas from the training split, aligned to every case.
pub fn toy_samples(train: &[ToyCase], cases: &[&[ToyCase]], max_shift: usize) -> Result<(AtlasPair, Vec<Vec<Sample>>)> {
    let pairs: Vec<(ScalarVolume, LabelMap)> = train.iter().map(|c| (c.scan.clone(), c.labels.clone())).collect();
    let atlas = build_atlas(&pairs, TOY_CLASSES)?;
    let mut out = Vec::with_capacity(cases.len());
    for split in cases {
        let samples = split
            .iter()
            .map(|c| {
                let (aligned, _) = align_translation(&atlas, &c.scan, max_shift)?;
                Ok(Sample { target: c.scan.clone(), gt: c.labels.clone(), atlas: aligned })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(samples);
    }
    Ok((atlas, out))
}

fn per_class_dsc(pred: &LabelMap, gt: &LabelMap) -> Result<Vec<f64>> {
    (0..gt.k()).map(|c| dsc(pred, gt, c)).collect()
}

fn mean_fg(v: &[f64]) -> f64 {
    v[1..].iter().sum::<f64>() / (v.len() - 1) as f64
}

fn labels_for(params: &CamParams, model: &UnaryModel, target: &ScalarVolume, atlas: &AtlasPair) -> Result<LabelMap> {
    Ok(argmax_labels(&predict(params, model, target, atlas)?))
}

fn test_dsc(params: &CamParams, model: &UnaryModel, test: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in test {
        total += mean_fg(&per_class_dsc(&labels_for(params, model, &s.target, &s.atlas)?, &s.gt)?);
    }
    Ok(total / test.len() as f64)
}

/// Mean LDD of a baseline and a CRF model over perturbed test cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Robustness {
    pub unary_ldd: f64,
    pub joint_ldd: f64,
    pub seeds: Vec<u64>,
}

/// Uses the first `cases` lesion seeds (counting up from `lesions.seed`)
/// whose mask touches the foreground, cycling through the test scans.
pub fn robustness(
    lesions: &LesionSpec,
    cases: usize,
    test: &[Sample],
    baseline: (&CamParams, &UnaryModel),
    crf: (&CamParams, &UnaryModel),
) -> Result<Robustness> {
    if test.is_empty() {
        return Err(crate::error::Error::param("robustness needs at least one test case"));
    }
    let classes: Vec<usize> = (1..test[0].gt.k()).collect();
    let (mut unary_ldd, mut joint_ldd) = (0.0, 0.0);
    let mut seeds = Vec::with_capacity(cases);
    let mut seed = lesions.seed;
    while seeds.len() < cases {
        let s = &test[seeds.len() % test.len()];
        let (scan, mask) = perturb_case(&s.target, lesions, seed)?;
        let touches = mask.data().iter().zip(s.gt.data()).any(|(&m, &g)| m != 0 && g != 0);
        if touches {
            let eval = |(p, m): (&CamParams, &UnaryModel)| -> Result<f64> {
                let clean = per_class_dsc(&labels_for(p, m, &s.target, &s.atlas)?, &s.gt)?;
                let path = per_class_dsc(&labels_for(p, m, &scan, &s.atlas)?, &s.gt)?;
                ldd(&classes, &clean[1..], &path[1..], &mask, &s.gt)
            };
            unary_ldd += eval(baseline)?;
            joint_ldd += eval(crf)?;
            seeds.push(seed);
        }
        seed += 1;
    }
    let n = seeds.len().max(1) as f64;
    Ok(Robustness { unary_ldd: unary_ldd / n, joint_ldd: joint_ldd / n, seeds })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, TrainedModels)> {
    let ds = toygen(&cfg.toy)?;
    let (atlas, mut splits) = toy_samples(&ds.train, &[&ds.train, &ds.val, &ds.test], cfg.toy.jitter)?;
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train_set = splits.pop().expect("three splits");
    let dims = train_set[0].target.dims();

    let params = CamParams::new(TOY_CLASSES, dims);
    let model = UnaryModel::TinyNet(TinyNetParams::init(TOY_CLASSES, cfg.seed));
    let base = TrainConfig { seed: cfg.seed, ..Default::default() };
    let stage = |stage, max_epochs| TrainConfig { stage, max_epochs, ..base.clone() };

    let unary = train(&train_set, &val, &params, &model, &stage(Stage::UnaryOnly, cfg.unary_epochs))?;
    let joint = train(&train_set, &val, &params, &unary.model, &stage(Stage::Joint, cfg.cam_epochs))?;
    let separate = train(&train_set, &val, &params, &unary.model, &stage(Stage::SeparateCam, cfg.cam_epochs))?;

    let unary_params = stage_params(&unary.params, Stage::UnaryOnly);
    let unary_dsc = test_dsc(&unary_params, &unary.model, &test)?;
    let joint_dsc = test_dsc(&joint.params, &joint.model, &test)?;
    let separate_dsc = test_dsc(&separate.params, &separate.model, &test)?;
    let joint_no_prior_dsc = test_dsc(&ablate(&joint.params, Ablation::Prior), &joint.model, &test)?;
    let joint_no_smooth_dsc = test_dsc(&ablate(&joint.params, Ablation::Smooth), &joint.model, &test)?;

    let rob = robustness(&cfg.lesions, cfg.perturbed_cases, &test, (&unary_params, &unary.model), (&joint.params, &joint.model))?;
    let report = ExperimentReport {
        unary_dsc,
        joint_dsc,
        separate_dsc,
        joint_no_prior_dsc,
        joint_no_smooth_dsc,
        unary_ldd: rob.unary_ldd,
        joint_ldd: rob.joint_ldd,
        perturb_seeds: rob.seeds,
    };
    Ok((report, TrainedModels { unary, joint, separate, atlas, test }))
}
