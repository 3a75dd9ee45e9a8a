//! Command-line driver. Every command reads an optional JSON run config and
//! lets explicit flags override it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::atlas::{align_translation, build_atlas, read_atlas, write_atlas};
use crate::autodiff::UnaryModel;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gradcheck::{GradcheckConfig, GradcheckInstance, ParamGroup};
use crate::meanfield::{ablate, Ablation, CamParams};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::perturb::{perturb_case, LesionSpec};
use crate::potentials::{Compatibility, Connectivity};
use crate::toy::{toygen, ToyConfig};
use crate::train::{history_csv, predict, stage_params, train, Sample, Stage, TrainConfig};
use crate::unary::{unary_logits, TinyNetParams, UnarySource};
use crate::vol1::{read_labels, read_prob, read_scalar, write_vol1, Volume};
use crate::volume::{argmax_labels, AtlasPair, Dims, LabelMap, ScalarVolume};

#[derive(Debug, Parser)]
#[command(name = "atlascrf", version, about = "Atlas-prior CRF segmentation toolkit")]
pub struct Cli {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel loops.
    #[arg(long, global = true, env = "ATLASCRF_THREADS")]
    pub threads: Option<usize>,
    /// Accepted for reproducible scripts; all reductions already use a fixed order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Average co-registered scans and label maps into an atlas pair.
    AtlasBuild(AtlasBuildArgs),
    /// Train the unary model and/or CRF parameters.
    Train(TrainArgs),
    /// Run mean-field inference on one scan.
    Infer(InferArgs),
    /// Write scans with synthetic lesions and their masks.
    Perturb(PerturbArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic nested-ellipsoid dataset.
    Toygen(ToygenArgs),
}

#[derive(Debug, Args)]
pub struct AtlasBuildArgs {
    /// Scan volumes, in the same order as `--labels`.
    #[arg(long = "scan")]
    pub scans: Vec<PathBuf>,
    #[arg(long = "labels")]
    pub labels: Vec<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "atlas")]
    pub stem: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Unary,
    Joint,
    Separate,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Unary => Stage::UnaryOnly,
            StageArg::Joint => Stage::Joint,
            StageArg::Separate => Stage::SeparateCam,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest written by `toygen`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Atlas sidecar; built from the training split when absent.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Allow CRF stages without a stage-one checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub align_translation: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Unary probabilities or logits as a `VOL1` prob volume.
    #[arg(long)]
    pub unary: Option<PathBuf>,
    /// Trained checkpoint supplying the unary model and CRF parameters.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Atlas sidecar JSON.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Ground truth; adds a report comparing against unary-only output.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Search translations up to N voxels per axis before inference.
    #[arg(long, value_name = "N")]
    pub align_translation: Option<usize>,
    #[arg(long)]
    pub disable_prior: bool,
    #[arg(long)]
    pub disable_smooth: bool,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Number of perturbed cases.
    #[arg(long)]
    pub cases: Option<usize>,
    /// Lesions per case.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub radius: Option<Vec<f64>>,
    /// Noise magnitude range as a fraction of the scan maximum.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub noise: Option<Vec<f64>>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Comma-separated class subset.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub spacing: Option<Vec<f64>>,
    /// Skip surface distances.
    #[arg(long)]
    pub no_distances: bool,
    /// Lesion mask; requires `--clean`.
    #[arg(long)]
    pub ldd: Option<PathBuf>,
    /// Prediction on the unperturbed scan, for `--ldd`.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Baseline report JSON to subtract.
    #[arg(long)]
    pub delta: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Take CRF parameters and the unary model from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Restrict to these groups (repeatable).
    #[arg(long = "param")]
    pub params: Vec<ParamGroup>,
    /// Edge length of the random cubic instance.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_coords: Option<usize>,
    /// Central-difference step. Trained parameters can sit in high-curvature
    /// regions where the default step's truncation error exceeds the tolerance.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToygenArgs {
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Maximum centre offset per axis in voxels.
    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Input and output locations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub target: Option<PathBuf>,
    pub unary: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub scans: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// CRF structure used when no checkpoint supplies one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamConfig {
    pub prior_size: usize,
    pub prior_dilation: usize,
    pub smooth_size: usize,
    pub smooth_dilation: usize,
    pub iters: usize,
    pub enable_prior: bool,
    pub enable_smooth: bool,
    /// Separate compatibility matrices for the two potentials.
    pub separate_compatibility: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        let (p, s) = (Connectivity::prior_default(), Connectivity::smooth_default());
        CamConfig {
            prior_size: p.size,
            prior_dilation: p.dilation,
            smooth_size: s.size,
            smooth_dilation: s.dilation,
            iters: crate::meanfield::DEFAULT_ITERS,
            enable_prior: true,
            enable_smooth: true,
            separate_compatibility: false,
        }
    }
}

impl CamConfig {
    pub fn params(&self, k: usize, dims: Dims) -> Result<CamParams> {
        let mut p = CamParams::new(k, dims);
        p.conn_p = Connectivity::new(self.prior_size, self.prior_dilation)?;
        p.conn_s = Connectivity::new(self.smooth_size, self.smooth_dilation)?;
        p.iters = self.iters;
        p.enable_prior = self.enable_prior;
        p.enable_smooth = self.enable_smooth;
        if self.separate_compatibility {
            p.mu_smooth = Some(Compatibility::potts(k));
        }
        p.validate(k, dims)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub classes: Option<Vec<usize>>,
    pub spacing: [f64; 3],
    pub distances: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { classes: None, spacing: [1.0; 3], distances: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub size: usize,
    pub k: usize,
    pub step: f64,
    pub max_coords: usize,
    pub tolerance: f64,
    pub params: Vec<ParamGroup>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        GradcheckSettings { size: 4, k: 3, step: d.step, max_coords: d.max_coords, tolerance: 1e-4, params: Vec::new() }
    }
}

/// JSON run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub align_translation: Option<usize>,
    pub paths: PathsConfig,
    pub cam: CamConfig,
    pub train: TrainConfig,
    pub lesions: LesionSpec,
    pub perturb_cases: Option<usize>,
    pub toy: ToyConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// One case of a dataset manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub scan: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub k: usize,
    pub dims: Dims,
    pub train: Vec<CaseEntry>,
    pub val: Vec<CaseEntry>,
    pub test: Vec<CaseEntry>,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = require(flag.or_else(|| cfg.paths.out_dir.clone()), "--out-dir")?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Resolved global settings shared by all commands.
struct Ctx {
    cfg: RunConfig,
    seed: u64,
}

/// Parses `args` and runs the selected command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            Error::Config(String::new())
        }
        _ => Error::Config(e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()),
    })?;
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads.or(cfg.threads) {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ctx = Ctx { cfg, seed };
    match cli.command {
        Command::AtlasBuild(a) => cmd_atlas_build(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Infer(a) => cmd_infer(&ctx, a),
        Command::Perturb(a) => cmd_perturb(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Toygen(a) => cmd_toygen(&ctx, a),
    }
}

fn cmd_atlas_build(ctx: &Ctx, a: AtlasBuildArgs) -> Result<()> {
    let p = &ctx.cfg.paths;
    let scans = if a.scans.is_empty() { p.scans.clone() } else { a.scans };
    let labels = if a.labels.is_empty() { p.labels.clone() } else { a.labels };
    if scans.len() != labels.len() {
        return Err(Error::Config(format!("{} scans but {} label maps", scans.len(), labels.len())));
    }
    let mut pairs = Vec::with_capacity(scans.len());
    for (s, l) in scans.iter().zip(&labels) {
        pairs.push((read_scalar(s)?, read_labels(l)?));
    }
    let k = match a.k.or(ctx.cfg.k) {
        Some(k) => k,
        None => require(pairs.first().map(|(_, l)| l.k()), "at least one --scan/--labels pair")?,
    };
    let atlas = build_atlas(&pairs, k)?;
    let dir = out_dir(a.out_dir, &ctx.cfg)?;
    let sources = scans.iter().map(|s| s.display().to_string()).collect();
    let side = write_atlas(&dir, &a.stem, &atlas, pairs.len(), sources, [0; 3])?;
    println!("{}", side.display());
    Ok(())
}

/// Scan and label pairs of one split.
type Split = Vec<(ScalarVolume, LabelMap)>;

fn load_dataset(path: &Path) -> Result<(DatasetManifest, [Split; 3])> {
    let m: DatasetManifest = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let load = |cases: &[CaseEntry]| -> Result<Split> {
        cases.iter().map(|c| Ok((read_scalar(dir.join(&c.scan))?, read_labels(dir.join(&c.labels))?))).collect()
    };
    let splits = [load(&m.train)?, load(&m.val)?, load(&m.test)?];
    Ok((m, splits))
}

fn samples(cases: &[(ScalarVolume, LabelMap)], atlas: &AtlasPair, max_shift: usize) -> Result<Vec<Sample>> {
    cases
        .iter()
        .map(|(scan, gt)| {
            let (aligned, _) = align_translation(atlas, scan, max_shift)?;
            Ok(Sample { target: scan.clone(), gt: gt.clone(), atlas: aligned })
        })
        .collect()
}

/// Per-run summary written next to the checkpoint.
#[derive(Debug, Serialize)]
struct TrainSummary {
    stage: Stage,
    epochs_run: usize,
    best_epoch: usize,
    best_val_dsc: f64,
    seed: u64,
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut tc = cfg.train.clone();
    tc.seed = ctx.seed;
    if let Some(s) = a.stage {
        tc.stage = s.into();
    }
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    if let Some(p) = a.patience {
        tc.patience = p;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    tc.validate()?;
    let init_path = a.init.or_else(|| cfg.paths.init.clone());
    if tc.stage != Stage::UnaryOnly && init_path.is_none() && !a.from_scratch {
        return Err(Error::Config("CRF training needs a stage-one checkpoint (--init) or --from-scratch".into()));
    }

    let dataset = require(a.dataset.or_else(|| cfg.paths.dataset.clone()), "--dataset")?;
    let (manifest, [train_cases, val_cases, _]) = load_dataset(&dataset)?;
    let k = manifest.k;
    let atlas = match a.atlas.or_else(|| cfg.paths.atlas.clone()) {
        Some(side) => read_atlas(&side)?.0,
        None => build_atlas(&train_cases, k)?,
    };
    let shift = a.align_translation.or(cfg.align_translation).unwrap_or(0);
    let train_set = samples(&train_cases, &atlas, shift)?;
    let val_set = samples(&val_cases, &atlas, shift)?;

    let (params, model) = match &init_path {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.params, ck.model)
        }
        None => (cfg.cam.params(k, manifest.dims)?, UnaryModel::TinyNet(TinyNetParams::init(k, ctx.seed))),
    };
    let out = train(&train_set, &val_set, &params, &model, &tc)?;

    let dir = out_dir(a.out_dir, cfg)?;
    let ck = Checkpoint {
        params: out.params,
        model: out.model,
        optimizer: out.optimizer,
        stage: tc.stage,
        epoch: out.best_epoch,
        seed: ctx.seed,
    };
    ck.save(&dir.join("checkpoint"))?;
    let hist = dir.join("history.csv");
    fs::write(&hist, history_csv(&out.history)).map_err(|e| Error::io(&hist, e))?;
    let summary = TrainSummary {
        stage: tc.stage,
        epochs_run: out.history.len(),
        best_epoch: out.best_epoch,
        best_val_dsc: out.best_val_dsc,
        seed: ctx.seed,
    };
    write_json(&dir.join("train.json"), &summary)?;
    print!("{}", history_csv(&out.history));
    Ok(())
}

/// Report written by `infer` when ground truth is given.
#[derive(Debug, Serialize, Deserialize)]
pub struct InferReport {
    /// CRF output, with per-class Dice deltas relative to `unary_only`.
    pub cam: EvalReport,
    pub unary_only: EvalReport,
}

fn cmd_infer(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let p = &cfg.paths;
    let target = read_scalar(require(a.target.or_else(|| p.target.clone()), "--target")?)?;
    let dims = target.dims();
    let (mut params, model) = match a.checkpoint.or_else(|| p.checkpoint.clone()) {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            (ck.params, ck.model)
        }
        None => {
            let path = require(a.unary.or_else(|| p.unary.clone()), "--unary or --checkpoint")?;
            let k = read_prob(&path)?.k();
            let logits = unary_logits(&UnarySource::FileBacked(path), &target, k)?;
            (cfg.cam.params(k, dims)?, UnaryModel::Fixed(logits))
        }
    };
    let k = model.k();
    if let Some(i) = a.iters {
        params.iters = i;
    }
    if a.disable_prior {
        params = ablate(&params, Ablation::Prior);
    }
    if a.disable_smooth {
        params = ablate(&params, Ablation::Smooth);
    }
    let atlas = match a.atlas.or_else(|| p.atlas.clone()) {
        Some(side) => read_atlas(&side)?.0,
        None if !params.enable_prior => AtlasPair::new(target.clone(), crate::volume::ProbVolume::uniform(k, dims))?,
        None => return Err(Error::Config("missing --atlas (required unless the prior is disabled)".into())),
    };
    let shift = a.align_translation.or(cfg.align_translation).unwrap_or(0);
    let (atlas, _) = align_translation(&atlas, &target, shift)?;
    let q = predict(&params, &model, &target, &atlas)?;
    let labels = argmax_labels(&q);
    let dir = out_dir(a.out_dir, cfg)?;
    write_vol1(dir.join("q.vol1"), &Volume::Prob(q))?;
    write_vol1(dir.join("labels.vol1"), &Volume::Label(labels.clone()))?;
    if let Some(gt_path) = a.gt.or_else(|| p.gt.clone()) {
        let gt = read_labels(gt_path)?;
        let opts = eval_options(cfg, None, None, false);
        let base = argmax_labels(&predict(&stage_params(&params, Stage::UnaryOnly), &model, &target, &atlas)?);
        let unary_only = evaluate(&base, &gt, &opts)?;
        let cam = evaluate(&labels, &gt, &opts)?.with_delta(&unary_only)?;
        print!("{}", cam.to_table());
        write_json(&dir.join("report.json"), &InferReport { cam, unary_only })?;
    }
    Ok(())
}

/// Manifest written by `perturb`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PerturbManifest {
    pub spec: LesionSpec,
    pub cases: Vec<PerturbEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PerturbEntry {
    pub seed: u64,
    pub scan: String,
    pub mask: String,
}

fn cmd_perturb(ctx: &Ctx, a: PerturbArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut spec = cfg.lesions.clone();
    spec.seed = ctx.seed;
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(r) = a.radius {
        spec.radius = [r[0], r[1]];
    }
    if let Some(n) = a.noise {
        spec.noise = [n[0], n[1]];
    }
    spec.validate()?;
    let cases = a.cases.or(cfg.perturb_cases).unwrap_or(0);
    let target_path = require(a.target.or_else(|| cfg.paths.target.clone()), "--target")?;
    if cases == 0 {
        return Ok(());
    }
    let scan = read_scalar(&target_path)?;
    let dir = out_dir(a.out_dir, cfg)?;
    let mut entries = Vec::with_capacity(cases);
    for i in 0..cases {
        let case_seed = spec.seed.wrapping_add(i as u64);
        let (noisy, mask) = perturb_case(&scan, &spec, case_seed)?;
        let entry = PerturbEntry { seed: case_seed, scan: format!("case_{i:03}.scan.vol1"), mask: format!("case_{i:03}.mask.vol1") };
        write_vol1(dir.join(&entry.scan), &Volume::Scalar(noisy))?;
        write_vol1(dir.join(&entry.mask), &Volume::Label(mask))?;
        entries.push(entry);
    }
    write_json(&dir.join("perturb.json"), &PerturbManifest { spec, cases: entries })
}

fn eval_options(cfg: &RunConfig, classes: Option<Vec<usize>>, spacing: Option<Vec<f64>>, no_distances: bool) -> EvalOptions {
    EvalOptions {
        classes: classes.or_else(|| cfg.eval.classes.clone()),
        spacing: spacing.map_or(cfg.eval.spacing, |s| [s[0], s[1], s[2]]),
        distances: cfg.eval.distances && !no_distances,
    }
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let pred = read_labels(require(a.pred.or_else(|| cfg.paths.pred.clone()), "--pred")?)?;
    let gt = read_labels(require(a.gt.or_else(|| cfg.paths.gt.clone()), "--gt")?)?;
    let opts = eval_options(cfg, a.classes, a.spacing, a.no_distances);
    let mut report = evaluate(&pred, &gt, &opts)?;
    match (a.ldd, a.clean) {
        (Some(mask), Some(clean)) => {
            let clean_report = evaluate(&read_labels(clean)?, &gt, &opts)?;
            report = report.with_ldd(&clean_report, &read_labels(mask)?, &gt)?;
        }
        (None, None) => {}
        _ => return Err(Error::Config("--ldd and --clean must be given together".into())),
    }
    if let Some(base) = a.delta {
        report = report.with_delta(&read_json::<EvalReport>(&base)?)?;
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    match a.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Json { path: "-".into(), source: e })?)
        }
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<()> {
    let s = &ctx.cfg.gradcheck;
    let size = a.size.unwrap_or(s.size);
    let mut k = a.k.or(ctx.cfg.k).unwrap_or(s.k);
    let checkpoint = match a.checkpoint.or_else(|| ctx.cfg.paths.checkpoint.clone()) {
        Some(p) => Some(Checkpoint::load(&p)?),
        None => None,
    };
    if let Some(ck) = &checkpoint {
        k = ck.model.k();
    }
    let mut inst = GradcheckInstance::random(k, Dims::cube(size), ctx.seed, true)?;
    if let Some(ck) = checkpoint {
        // The checkpoint's per-voxel prior weights only apply on its own grid.
        let omega_p = inst.params.prior.omega_p.clone();
        inst.params = ck.params;
        if inst.params.prior.omega_p.dims() != omega_p.dims() {
            inst.params.prior.omega_p = omega_p;
        }
        inst.model = ck.model;
        if let UnaryModel::Fixed(_) = inst.model {
            inst.model = UnaryModel::Fixed(unary_logits(
                &UnarySource::TinyNet(TinyNetParams::init(k, ctx.seed)),
                &inst.target,
                k,
            )?);
        }
    }
    let cfg = GradcheckConfig {
        step: a.step.unwrap_or(s.step),
        max_coords: a.max_coords.unwrap_or(s.max_coords),
        seed: ctx.seed,
        only: if a.params.is_empty() { s.params.clone() } else { a.params },
    };
    let tol = a.tolerance.unwrap_or(s.tolerance);
    let report = inst.check(&cfg)?;
    let mut table = String::from("group      checked  skipped  rel_error  result\n");
    for g in &report.groups {
        let name = serde_json::to_value(g.group).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let verdict = if g.rel_error < tol { "pass" } else { "FAIL" };
        table.push_str(&format!("{name:<10} {:>7}  {:>7}  {:>9.2e}  {verdict}\n", g.checked, g.skipped, g.rel_error));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    let failed: Vec<String> = report.groups.iter().filter(|g| !(g.rel_error < tol)).map(|g| format!("{:?}", g.group)).collect();
    if !failed.is_empty() {
        return Err(Error::GradcheckFailed(format!("groups above tolerance {tol:e}: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_toygen(ctx: &Ctx, a: ToygenArgs) -> Result<()> {
    let mut tc = ctx.cfg.toy.clone();
    tc.seed = ctx.seed;
    tc.size = a.size.unwrap_or(tc.size);
    tc.n_train = a.n_train.unwrap_or(tc.n_train);
    tc.n_val = a.n_val.unwrap_or(tc.n_val);
    tc.n_test = a.n_test.unwrap_or(tc.n_test);
    tc.noise = a.noise.unwrap_or(tc.noise);
    tc.distractors = a.distractors.unwrap_or(tc.distractors);
    tc.jitter = a.jitter.unwrap_or(tc.jitter);
    let ds = toygen(&tc)?;
    let dir = out_dir(a.out_dir, &ctx.cfg)?;
    let mut entries: [Vec<CaseEntry>; 3] = Default::default();
    for (j, (name, cases)) in ds.splits().into_iter().enumerate() {
        for (i, c) in cases.iter().enumerate() {
            let e = CaseEntry { scan: format!("{name}_{i:03}.scan.vol1"), labels: format!("{name}_{i:03}.labels.vol1") };
            write_vol1(dir.join(&e.scan), &Volume::Scalar(c.scan.clone()))?;
            write_vol1(dir.join(&e.labels), &Volume::Label(c.labels.clone()))?;
            entries[j].push(e);
        }
    }
    let [train, val, test] = entries;
    let manifest = DatasetManifest { k: crate::toy::TOY_CLASSES, dims: Dims::cube(tc.size), train, val, test };
    let path = dir.join(DATASET_MANIFEST);
    write_json(&path, &manifest)?;
    println!("{}", path.display());
    Ok(())
}

/// Single-line JSON error record for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"cam": {"iters": 3}, "bogus": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, r#"{"cam": {"iters": 3}, "train": {"patience": 2}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.cam.iters, 3);
        assert_eq!(c.cam.prior_size, 5);
        assert_eq!(c.cam.prior_dilation, 2);
        assert_eq!(c.train.patience, 2);
        assert_eq!(c.train.lr_default, 5e-4);
        assert_eq!(c.train.lr_omega_p, 1e-2);
    }

    #[test]
    fn usage_errors_map_to_exit_two() {
        let e = run(["atlascrf", "infer", "--no-such-flag"]).unwrap_err();
        assert_eq!(e.exit_code() as i32, 2);
        let e = run(["atlascrf", "train", "--stage", "joint", "--dataset", "x.json"]).unwrap_err();
        assert!(e.to_string().contains("--from-scratch"));
        assert_eq!(e.exit_code() as i32, 2);
    }

    #[test]
    fn error_json_is_one_line() {
        let s = error_json(&Error::CheckpointIntegrity("a\nb".into()));
        assert!(!s.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["error"], "checkpoint_integrity");
    }
}
