//! Acceptance suite. Each test prints one `criterion N ...: PASS|FAIL` line.
//!
//! Tests take a shared lock so timing-sensitive criteria never compete for
//! cores with each other.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlascrf::gradcheck::{GradcheckConfig, GradcheckInstance, ParamGroup};
use atlascrf::metrics::{dsc, ldd, surface_distances, volume_diagonal};
use atlascrf::perturb::LesionSpec;
use atlascrf::pipeline::{robustness, run_experiment, ExperimentConfig, ExperimentReport, TrainedModels};
use atlascrf::train::{stage_params, Stage};
use atlascrf::vol1::{decode, encode, Volume};
use atlascrf::{
    ablate, brute_force_infer, mean_field_infer, mean_field_iterates, message_passing, softmax_channels, Ablation, AtlasPair,
    CamInput, CamParams, Compatibility, Connectivity, Dims, LabelMap, ProbVolume, ScalarVolume,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {n} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

fn random_instance(rng: &mut ChaCha8Rng, k: usize, dims: Dims) -> (CamInput, CamParams) {
    let n = dims.len();
    let mut rv = |m: usize, lo: f64, hi: f64| -> Vec<f64> { (0..m).map(|_| rng.gen_range(lo..hi)).collect() };
    let target = ScalarVolume::new(dims, rv(n, -1.0, 1.0)).unwrap();
    let scan = ScalarVolume::new(dims, rv(n, -1.0, 1.0)).unwrap();
    let unary = ProbVolume::new(k, dims, rv(k * n, -2.0, 2.0)).unwrap();
    let labels = softmax_channels(&ProbVolume::new(k, dims, rv(k * n, -2.0, 2.0)).unwrap()).unwrap();
    let mut params = CamParams::new(k, dims);
    params.mu = Compatibility::new(k, rv(k * k, 0.0, 1.0)).unwrap();
    params.prior.omega_p = ScalarVolume::new(dims, rv(n, 0.0, 0.3)).unwrap();
    params.prior.theta_p = rv(1, 0.3, 1.5)[0];
    params.smooth.omega_s = rv(k, 0.0, 0.3);
    params.smooth.theta_s = rv(1, 0.3, 1.5)[0];
    let input = CamInput::new(target, unary, AtlasPair::new(scan, labels).unwrap()).unwrap();
    (input, params)
}

/// Randomized instances within the oracle's size limits.
fn oracle_instances(count: usize, seed: u64) -> Vec<(CamInput, CamParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let k = rng.gen_range(2..=4);
            let dims = Dims::new(rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(2..=6));
            let (input, mut params) = random_instance(&mut rng, k, dims);
            // Dilation applies to the prior stencil; smoothness stays local.
            let mut size = || if rng.gen_bool(0.5) { 3 } else { 5 };
            let (sp, ss) = (size(), size());
            params.conn_p = Connectivity::new(sp, rng.gen_range(1..=2)).unwrap();
            params.conn_s = Connectivity::new(ss, 1).unwrap();
            params.iters = rng.gen_range(1..=3);
            if rng.gen_bool(0.25) {
                params.mu_smooth = Some(Compatibility::new(k, (0..k * k).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap());
            }
            (input, params)
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_normalization_error(q: &ProbVolume) -> f64 {
    let n = q.dims().len();
    (0..n)
        .map(|i| ((0..q.k()).map(|l| q.get(l, i)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let instances = oracle_instances(60, 1);
    let mut worst: f64 = 0.0;
    for (input, params) in &instances {
        let fast = mean_field_infer(input, params).unwrap();
        let slow = brute_force_infer(input, params).unwrap();
        worst = worst.max(max_abs_diff(fast.data(), slow.data()));
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "oracle equivalence",
        instances.len() >= 50 && worst < 1e-6 && elapsed < Duration::from_secs(30),
        format!("{} instances, max |diff| {worst:.2e}, {:.2}s", instances.len(), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let required = [ParamGroup::Mu, ParamGroup::OmegaP, ParamGroup::OmegaS, ParamGroup::ThetaP, ParamGroup::ThetaS, ParamGroup::Unary];
    let cfg = GradcheckConfig { step: 1e-3, max_coords: usize::MAX, ..Default::default() };
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut all_present = true;
    let seeds = 20;
    for seed in 0..seeds {
        let inst = GradcheckInstance::random(3, Dims::cube(4), seed, true).unwrap();
        let report = inst.check(&GradcheckConfig { seed, ..cfg.clone() }).unwrap();
        for g in required {
            match report.groups.iter().find(|r| r.group == g) {
                Some(r) if r.checked > 0 => {
                    let e = worst.entry(format!("{g:?}")).or_insert(0.0);
                    *e = e.max(r.rel_error);
                }
                _ => all_present = false,
            }
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let per_group: Vec<String> = worst.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
    verdict(
        2,
        "gradient correctness",
        all_present && max < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{seeds} instances, worst rel error per group: {}; {:.2}s", per_group.join(", "), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_3_degeneracy() {
    let _g = serial();
    let mut exact = true;
    let mut worst_norm: f64 = 0.0;
    let mut instances = oracle_instances(40, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    instances.push(random_instance(&mut rng, 5, Dims::new(12, 10, 9)));
    for (input, params) in &instances {
        let expect = softmax_channels(&input.unary).unwrap();
        if mean_field_infer(input, &ablate(params, Ablation::Both)).unwrap() != expect {
            exact = false;
        }
        let mut zeroed = params.clone();
        zeroed.prior.omega_p = ScalarVolume::zeros(input.dims());
        zeroed.smooth.omega_s = vec![0.0; input.k()];
        if mean_field_infer(input, &zeroed).unwrap() != expect {
            exact = false;
        }
        for p in [params, &zeroed, &ablate(params, Ablation::Prior), &ablate(params, Ablation::Smooth)] {
            for q in mean_field_iterates(input, p).unwrap() {
                worst_norm = worst_norm.max(max_normalization_error(&q));
            }
        }
    }
    verdict(
        3,
        "degeneracy",
        exact && worst_norm < 1e-6,
        format!("{} instances, softmax(unary) reproduced exactly: {exact}, max |sum Q - 1| {worst_norm:.1e}", instances.len()),
    );
}

struct Experiment {
    report: ExperimentReport,
    models: TrainedModels,
    elapsed: Duration,
}

fn experiment() -> &'static Experiment {
    static RUN: OnceLock<Experiment> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let (report, models) = run_experiment(&ExperimentConfig::default()).unwrap();
        Experiment { report, models, elapsed: start.elapsed() }
    })
}

fn reference() -> ExperimentReport {
    serde_json::from_str(include_str!("data/toy_reference.json")).unwrap()
}

#[test]
fn criterion_4_toy_accuracy_gain() {
    let _g = serial();
    let e = experiment();
    let cfg = ExperimentConfig::default();
    let shape_ok = cfg.toy.size == 32 && (cfg.toy.n_train, cfg.toy.n_val, cfg.toy.n_test) == (10, 2, 6);
    let (gain, want) = (e.report.joint_gain(), reference().joint_gain());
    let within = (gain - want).abs() <= 0.2 * want;
    verdict(
        4,
        "toy accuracy gain",
        shape_ok && gain > 0.0 && within && e.elapsed < Duration::from_secs(600),
        format!(
            "unary {:.4}, joint {:.4}, gain {gain:.4} vs reference {want:.4} (+-20%), experiment {:.0}s",
            e.report.unary_dsc,
            e.report.joint_dsc,
            e.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_toy_robustness() {
    let _g = serial();
    let e = experiment();
    let cfg = ExperimentConfig::default();
    let m = &e.models;
    let start = Instant::now();
    let unary_params = stage_params(&m.unary.params, Stage::UnaryOnly);
    let rob = robustness(
        &cfg.lesions,
        cfg.perturbed_cases,
        &m.test,
        (&unary_params, &m.unary.model),
        (&m.joint.params, &m.joint.model),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let spec_ok = cfg.perturbed_cases == 20 && cfg.lesions.noise == [0.2, 0.5] && cfg.lesions == LesionSpec::default();
    let consistent = rob.unary_ldd == e.report.unary_ldd && rob.joint_ldd == e.report.joint_ldd;
    let (ratio, want) = (e.report.ldd_ratio(), reference().ldd_ratio());
    verdict(
        5,
        "toy robustness",
        spec_ok && consistent && ratio < 1.0 && (ratio - want).abs() <= 0.15 && elapsed < Duration::from_secs(300),
        format!(
            "{} cases, LDD unary {:.5}, joint {:.5}, ratio {ratio:.3} vs reference {want:.3} (+-0.15), {:.1}s",
            rob.seeds.len(),
            rob.unary_ldd,
            rob.joint_ldd,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_ablation_structure() {
    let _g = serial();
    let r = &experiment().report;
    let drop_prior = r.joint_dsc - r.joint_no_prior_dsc;
    let drop_smooth = r.joint_dsc - r.joint_no_smooth_dsc;
    verdict(
        6,
        "ablation structure",
        drop_prior > drop_smooth && r.separate_gain() < r.joint_gain(),
        format!(
            "drop without prior {drop_prior:.4} vs without smoothness {drop_smooth:.4}; gain separate {:.4} vs joint {:.4}",
            r.separate_gain(),
            r.joint_gain()
        ),
    );
}

// Independent metric oracles: 6-neighbour boundary test and all-pairs distances.

fn brute_surface(l: &LabelMap, c: u16) -> Vec<[usize; 3]> {
    let d = l.dims();
    let mut out = Vec::new();
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                if l.get(z, y, x) != c {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d.d || y + 1 == d.h || x + 1 == d.w;
                let nb = [(z.wrapping_sub(1), y, x), (z + 1, y, x), (z, y.wrapping_sub(1), x), (z, y + 1, x), (z, y, x.wrapping_sub(1)), (z, y, x + 1)];
                if edge || nb.iter().any(|&(a, b, e)| l.get(a, b, e) != c) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_distances(pred: &LabelMap, gt: &LabelMap, c: u16, sp: [f64; 3]) -> (f64, f64) {
    let (a, b) = (brute_surface(pred, c), brute_surface(gt, c));
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * sp[i]).powi(2)).sum::<f64>().sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let ab: Vec<f64> = a.iter().map(|p| nearest(p, &b)).collect();
    let ba: Vec<f64> = b.iter().map(|p| nearest(p, &a)).collect();
    let msd = 0.5 * (ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64);
    let mut all = [ab, ba].concat();
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    (msd, all[lo] + (all[hi] - all[lo]) * (pos - lo as f64))
}

fn brute_dsc(pred: &LabelMap, gt: &LabelMap, c: u16) -> f64 {
    let (p, g) = (pred.count(c as usize), gt.count(c as usize));
    let both = pred.data().iter().zip(gt.data()).filter(|(&a, &b)| a == c && b == c).count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

fn line(k: usize, w: usize, on: std::ops::RangeInclusive<usize>) -> LabelMap {
    LabelMap::new(k, Dims::new(1, 1, w), (0..w).map(|x| on.contains(&x) as u16).collect()).unwrap()
}

fn blob_map(rng: &mut ChaCha8Rng, dims: Dims) -> LabelMap {
    let c = [rng.gen_range(0.0..dims.d as f64), rng.gen_range(0.0..dims.h as f64), rng.gen_range(0.0..dims.w as f64)];
    let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(1.0..3.5));
    let mut data = Vec::with_capacity(dims.len());
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [z as f64, y as f64, x as f64];
                let e: f64 = (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum();
                data.push(if e <= 0.3 { 2 } else if e <= 1.0 { 1 } else { 0 });
            }
        }
    }
    LabelMap::new(3, dims, data).unwrap()
}

#[test]
fn criterion_7_metrics_validation() {
    let _g = serial();
    let mut cases = 0;
    let (mut dsc_err, mut dist_err): (f64, f64) = (0.0, 0.0);
    let mut check = |got: f64, want: f64, is_dsc: bool| {
        let e = (got - want).abs();
        if is_dsc {
            dsc_err = dsc_err.max(e);
        } else {
            dist_err = dist_err.max(e);
        }
    };

    // Hand-computed: overlapping segments [2,5] and [3,6] on a 1x1x10 line.
    // Every voxel of a line is a boundary voxel, so the one-voxel offsets at
    // each end give MSD 0.25 and HD95 1.
    let (p, g) = (line(2, 10, 2..=5), line(2, 10, 3..=6));
    check(dsc(&p, &g, 1).unwrap(), 0.75, true);
    let s = surface_distances(&p, &g, 1, [1.0; 3]).unwrap();
    check(s.msd, 0.25, false);
    check(s.hd95, 1.0, false);
    cases += 1;
    let s = surface_distances(&p, &g, 1, [1.0, 1.0, 2.0]).unwrap();
    check(s.msd, 0.5, false);
    check(s.hd95, 2.0, false);
    cases += 1;
    // Disjoint segments [0,2] and [6,8]: distances 6, 5, 4 each way.
    let (p, g) = (line(2, 12, 0..=2), line(2, 12, 6..=8));
    check(dsc(&p, &g, 1).unwrap(), 0.0, true);
    let s = surface_distances(&p, &g, 1, [1.0; 3]).unwrap();
    check(s.msd, 5.0, false);
    check(s.hd95, 6.0, false);
    cases += 1;
    // Class present only in the ground truth: volume-diagonal sentinel.
    let empty = line(2, 12, 20..=20);
    let s = surface_distances(&empty, &g, 1, [1.0, 2.0, 3.0]).unwrap();
    let diag = (1.0f64 + 4.0 + 36.0 * 36.0).sqrt();
    assert_eq!(volume_diagonal(Dims::new(1, 1, 12), [1.0, 2.0, 3.0]), diag);
    check(s.msd, diag, false);
    check(s.hd95, diag, false);
    assert!(s.sentinel);
    cases += 1;
    // LDD: the mask meets class 1 only, so only its drop counts.
    let gt = LabelMap::new(3, Dims::new(1, 1, 6), vec![1, 1, 2, 2, 0, 0]).unwrap();
    let mask = LabelMap::new(2, Dims::new(1, 1, 6), vec![0, 1, 0, 0, 1, 0]).unwrap();
    check(ldd(&[1, 2], &[0.9, 0.8], &[0.7, 0.8], &mask, &gt).unwrap(), 0.2, true);
    let mask_both = LabelMap::new(2, Dims::new(1, 1, 6), vec![0, 1, 1, 0, 0, 0]).unwrap();
    check(ldd(&[1, 2], &[0.9, 0.8], &[0.7, 0.5], &mask_both, &gt).unwrap(), 0.25, true);
    cases += 1;

    // Randomized blobs against the all-pairs oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    while cases < 16 {
        let dims = Dims::new(rng.gen_range(3..=7), rng.gen_range(3..=7), rng.gen_range(3..=7));
        let (p, g) = (blob_map(&mut rng, dims), blob_map(&mut rng, dims));
        let sp = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        let mut compared = false;
        for c in 1..3u16 {
            check(dsc(&p, &g, c as usize).unwrap(), brute_dsc(&p, &g, c), true);
            if p.count(c as usize) > 0 && g.count(c as usize) > 0 {
                let s = surface_distances(&p, &g, c as usize, sp).unwrap();
                let (msd, hd95) = brute_distances(&p, &g, c, sp);
                check(s.msd, msd, false);
                check(s.hd95, hd95, false);
                compared = true;
            }
        }
        if compared {
            cases += 1;
        }
    }
    verdict(
        7,
        "metrics validation",
        cases >= 10 && dsc_err <= 1e-9 && dist_err <= 1e-6,
        format!("{cases} cases, max DSC/LDD error {dsc_err:.1e}, max distance error {dist_err:.1e}"),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every subcommand once, each with `--deterministic --seed`.
fn cli_run(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 7] = [
        &["toygen", "--size", "16", "--jitter", "1", "--n-train", "3", "--n-val", "1", "--n-test", "1", "--out-dir", "ds"],
        &["atlas-build", "--scan", "ds/train_000.scan.vol1", "--labels", "ds/train_000.labels.vol1", "--scan",
            "ds/train_001.scan.vol1", "--labels", "ds/train_001.labels.vol1", "--out-dir", "at"],
        &["train", "--dataset", "ds/dataset.json", "--atlas", "at/atlas.json", "--stage", "joint", "--from-scratch",
            "--epochs", "2", "--out-dir", "tr"],
        &["infer", "--target", "ds/test_000.scan.vol1", "--checkpoint", "tr/checkpoint", "--atlas", "at/atlas.json",
            "--gt", "ds/test_000.labels.vol1", "--align-translation", "1", "--out-dir", "inf"],
        &["perturb", "--target", "ds/test_000.scan.vol1", "--cases", "3", "--out-dir", "pt"],
        &["eval", "--pred", "inf/labels.vol1", "--gt", "ds/test_000.labels.vol1", "--ldd", "pt/case_000.mask.vol1",
            "--clean", "inf/labels.vol1", "--out", "eval.json"],
        &["gradcheck", "--out", "gc.json"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_atlascrf"))
            .current_dir(dir)
            .args(["--deterministic", "--seed", "17"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

#[test]
fn criterion_8_format_and_determinism() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut round_trips = 0;
    let mut exact = true;
    for _ in 0..20 {
        let dims = Dims::new(rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let k = rng.gen_range(2..5);
        let n = dims.len();
        // f32-representable values, which is what the payload stores.
        let mut f = |m: usize| -> Vec<f64> { (0..m).map(|_| rng.gen_range(-50.0f32..50.0) as f64).collect() };
        let vols = [
            Volume::Scalar(ScalarVolume::new(dims, f(n)).unwrap()),
            Volume::Prob(ProbVolume::new(k, dims, f(k * n)).unwrap()),
            Volume::Label(LabelMap::new(k, dims, (0..n).map(|i| (i * 7 % k) as u16).collect()).unwrap()),
        ];
        for v in vols {
            let bytes = encode(&v).unwrap();
            let back = decode(&bytes).unwrap();
            exact &= back == v && encode(&back).unwrap() == bytes;
            round_trips += 1;
        }
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let runs = cli_run(a.path()).and_then(|_| cli_run(b.path()));
    let (identical, files) = match &runs {
        Ok(()) => {
            let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
            (sa == sb, sa.len())
        }
        Err(_) => (false, 0),
    };
    verdict(
        8,
        "format and determinism",
        exact && runs.is_ok() && identical && files > 0,
        format!(
            "{round_trips} VOL1 round trips bit-exact: {exact}; 7 commands twice, {files} files identical: {identical}{}",
            runs.err().map(|e| format!("; {e}")).unwrap_or_default()
        ),
    );
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn best_of(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn criterion_9_desk_scale_performance() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (input, mut params) = random_instance(&mut rng, 8, Dims::cube(64));
    params.conn_p = Connectivity::new(5, 2).unwrap();
    params.conn_s = Connectivity::new(5, 1).unwrap();
    params.iters = 5;

    let single = pool(1);
    let full = best_of(2, || {
        single.install(|| mean_field_infer(&input, &params).unwrap());
    });
    let q = softmax_channels(&input.unary).unwrap();
    let stage = |p: &rayon::ThreadPool| {
        best_of(3, || {
            p.install(|| message_passing(&input, &params, &q).unwrap());
        })
    };
    let t1 = stage(&single);
    let t4 = stage(&pool(4));
    let speedup = t1.as_secs_f64() / t4.as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        9,
        "desk-scale performance",
        full < Duration::from_secs(5) && speedup >= 2.0,
        format!(
            "64^3 K=8 S=5 (prior r=2) 5 iters single-threaded {:.2}s (< 5s); message passing 1 thread {:.3}s, 4 threads {:.3}s, speedup {speedup:.2}x (>= 2x) on {cores} available core(s)",
            full.as_secs_f64(),
            t1.as_secs_f64(),
            t4.as_secs_f64()
        ),
    );
}
