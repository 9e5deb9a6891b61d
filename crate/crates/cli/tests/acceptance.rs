//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p mrcal-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use mrcal::container::read_container;
use mrcal::dataset::{load_dataset, Split};
use mrcal::fusion::{fuse_soft_gaussian, simple, staple, FusionConfig, FusionMethod};
use mrcal::metrics::{auc, bootstrap_eval, ece_single, mr_ece, EceMode, EvalConfig};
use mrcal::model::{predict, train, Architecture, Head, TinyNet, TrainConfig, TrainLoss};
use mrcal::ordinal::{aggregate_foreground, bce_loss, hybrid_loss, orc_encode, rps_loss, rps_voxel, LossConfig, OrcMap, OrdinalProbMap};
use mrcal::synth::{generate_samples, true_consensus_probability, SynthConfig};
use mrcal::{BinaryMask, ForegroundProbMap, Grid2D, RaterStack, Sample};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn random_stack(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, density: f64) -> RaterStack {
    let masks = (0..k)
        .map(|_| {
            let v = (0..h * w).map(|_| rng.random_bool(density) as u8).collect();
            BinaryMask::new(Grid2D::new(h, w, v).unwrap()).unwrap()
        })
        .collect();
    RaterStack::new(masks).unwrap()
}

fn mask_from(h: usize, w: usize, v: Vec<u8>) -> BinaryMask {
    BinaryMask::new(Grid2D::new(h, w, v).unwrap()).unwrap()
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Outcome {
    let start = Instant::now();
    // Some gradients are below 1e-6; at h = 1e-3 the O(h^2) truncation of the
    // difference quotient alone exceeds 1e-3 of their magnitude.
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut skipped_max = 0.0f64;
    let mut checked = 0;
    for seed in [1u64, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Grid2D::from_fn(8, 8, |_, _| rng.random::<f64>());
        let stack = random_stack(&mut rng, 8, 8, 3, 0.5);
        let orc = orc_encode(&stack);
        for alpha in [0.0, 0.8] {
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            let net = TinyNet::new(Architecture::new(Head::Ordinal { num_raters: 3 }), seed);
            let loss = |n: &TinyNet| {
                let cache = n.forward_cached(&image);
                let probs = OrdinalProbMap::from_logits(8, 8, 3, &cache.logits);
                hybrid_loss(&probs, &orc, &cfg).unwrap()
            };
            let cache = net.forward_cached(&image);
            let pattern = cache.relu_pattern();
            let analytic = net.backward(&cache, &loss(&net).grad_logits);
            let mut skipped = 0;
            for i in 0..net.params().len() {
                let mut plus = net.clone();
                plus.params_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[i] -= h;
                if plus.forward_cached(&image).relu_pattern() != pattern
                    || minus.forward_cached(&image).relu_pattern() != pattern
                {
                    skipped += 1;
                    continue;
                }
                let numeric = (loss(&plus).total - loss(&minus).total) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic[i] - numeric).abs() / denom);
                checked += 1;
            }
            skipped_max = skipped_max.max(skipped as f64 / net.params().len() as f64);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-3 && skipped_max < 0.1 && within(elapsed, Duration::from_secs(10)),
        format!(
            "h {h:e}, max rel err {worst:.2e} over {checked} params, kink-skipped <= {:.1}%, {elapsed:.2?}",
            skipped_max * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 2

fn rps_properness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let steps = 50;
    let step = 1.0 / steps as f64;
    let grid: Vec<[f64; 3]> = (0..=steps)
        .flat_map(|i| (0..=steps - i).map(move |j| [i as f64 * step, j as f64 * step, (steps - i - j) as f64 * step]))
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let raw: [f64; 3] = std::array::from_fn(|_| -rng.random::<f64>().ln());
        let total: f64 = raw.iter().sum();
        let target = raw.map(|x| x / total);
        let expected = |p: &[f64; 3]| (0..3).map(|y| target[y] * rps_voxel(p, y)).sum::<f64>();
        let best = grid
            .iter()
            .min_by(|a, b| expected(a).total_cmp(&expected(b)))
            .unwrap();
        let dist = (0..3).map(|k| (best[k] - target[k]).abs()).fold(0.0, f64::max);
        worst = worst.max(dist);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= step + 1e-12 && within(elapsed, Duration::from_secs(30)),
        format!("max-norm distance of argmin to target {worst:.4} (step {step}), {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------- 3

fn gradedness() -> Outcome {
    let mut checks = 0;
    let mut violations = 0;
    for k in 1..=7usize {
        for truth in 0..=k {
            let rps_at = |level: usize| {
                let mut p = vec![0.0; k + 1];
                p[level] = 1.0;
                rps_voxel(&p, truth)
            };
            for dir in [-1isize, 1] {
                let mut prev = rps_at(truth);
                let mut l = truth as isize + dir;
                while (0..=k as isize).contains(&l) {
                    let cur = rps_at(l as usize);
                    checks += 1;
                    if cur < prev {
                        violations += 1;
                    }
                    prev = cur;
                    l += dir;
                }
            }
        }
    }
    outcome(violations == 0, format!("{checks} ordered pairs over K = 1..7, {violations} violations"))
}

// ---------------------------------------------------------------- 4

/// Equal-width binned ECE over (confidence, label) pairs, written independently
/// of the library.
fn brute_force_ece(pairs: &[(f64, u8)], bins: usize) -> f64 {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for &(p, y) in pairs {
        let m = ((p * bins as f64) as usize).min(bins - 1);
        count[m] += 1;
        conf[m] += p;
        acc[m] += y as f64;
    }
    let n = pairs.len() as f64;
    (0..bins)
        .filter(|&m| count[m] > 0)
        .map(|m| count[m] as f64 / n * ((conf[m] - acc[m]) / count[m] as f64).abs())
        .sum()
}

fn mr_ece_reduction() -> Outcome {
    let cfg = EvalConfig { ece_mode: EceMode::Frequency, ..EvalConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_single: f64 = 0.0;
    let mut worst_brute: f64 = 0.0;
    let mut worst_copies: f64 = 0.0;
    for _ in 0..50 {
        let images = rng.random_range(1..4);
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let mut preds = Vec::new();
        let mut masks = Vec::new();
        let mut pairs = Vec::new();
        for _ in 0..images {
            let p: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
            let y: Vec<u8> = p.iter().map(|&q| rng.random_bool(q) as u8).collect();
            pairs.extend(p.iter().copied().zip(y.iter().copied()));
            preds.push(ForegroundProbMap::new(Grid2D::new(h, w, p).unwrap()).unwrap());
            masks.push(mask_from(h, w, y));
        }
        let single_stacks: Vec<RaterStack> = masks.iter().map(|m| RaterStack::new(vec![m.clone()]).unwrap()).collect();
        let k1 = mr_ece(&preds, &single_stacks, &cfg).unwrap().0;
        worst_single = worst_single.max((k1 - ece_single(&preds, &masks, &cfg).unwrap()).abs());
        worst_brute = worst_brute.max((k1 - brute_force_ece(&pairs, cfg.num_bins)).abs());
        let copies = rng.random_range(2..6);
        let dup: Vec<RaterStack> = masks.iter().map(|m| RaterStack::new(vec![m.clone(); copies]).unwrap()).collect();
        worst_copies = worst_copies.max((mr_ece(&preds, &dup, &cfg).unwrap().0 - k1).abs());
    }
    outcome(
        worst_single <= 1e-12 && worst_brute <= 1e-12 && worst_copies <= 1e-12,
        format!("K=1 vs ECE {worst_single:.1e}, vs brute force {worst_brute:.1e}, K copies {worst_copies:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn oracle_calibration() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig { num_samples: 40, image_size: 64, num_raters: 3, ambiguity: 0.5, ..SynthConfig::default() };
    let samples = generate_samples(&cfg).unwrap();
    let preds: Vec<_> = samples.iter().map(|s| true_consensus_probability(&s.latent, &cfg)).collect();
    let stacks: Vec<_> = samples.iter().map(|s| s.raters.clone()).collect();
    let eval = EvalConfig { num_bins: 15, ..EvalConfig::default() };
    let value = mr_ece(&preds, &stacks, &eval).unwrap().0;
    let elapsed = start.elapsed();
    outcome(
        value < 0.01 && within(elapsed, Duration::from_secs(60)),
        format!("oracle MR-ECE {value:.5} on {} images, {elapsed:.2?}", samples.len()),
    )
}

// ---------------------------------------------------------------- 6

fn fusion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = FusionConfig::with_method(FusionMethod::Staple);

    let mut agree_dev: f64 = 0.0;
    for k in 2..=5 {
        let common: Vec<u8> = (0..144).map(|_| rng.random_bool(0.4) as u8).collect();
        let stack = RaterStack::new(vec![mask_from(12, 12, common.clone()); k]).unwrap();
        let w = staple(&stack, &cfg).unwrap().weights;
        let dev = w.as_slice().iter().zip(&common).map(|(&a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
        agree_dev = agree_dev.max(dev);
    }

    let mut ll_drops = 0;
    let mut ll_steps = 0;
    for _ in 0..10 {
        let truth: Vec<u8> = (0..256).map(|_| rng.random_bool(0.35) as u8).collect();
        let masks = (0..4)
            .map(|_| {
                let flip = rng.random_range(0.05..0.3);
                mask_from(16, 16, truth.iter().map(|&t| t ^ rng.random_bool(flip) as u8).collect())
            })
            .collect();
        let ll = staple(&RaterStack::new(masks).unwrap(), &cfg).unwrap().log_likelihood;
        for pair in ll.windows(2) {
            ll_steps += 1;
            if pair[1] < pair[0] - 1e-9 * pair[0].abs().max(1.0) {
                ll_drops += 1;
            }
        }
    }

    let mut simple_ok = 0;
    for _ in 0..10 {
        let truth: Vec<u8> = (0..256).map(|_| rng.random_bool(0.4) as u8).collect();
        let mut masks: Vec<BinaryMask> = (0..4)
            .map(|_| mask_from(16, 16, truth.iter().map(|&t| t ^ rng.random_bool(0.05) as u8).collect()))
            .collect();
        let outlier = rng.random_range(0..5);
        masks.insert(outlier, mask_from(16, 16, vec![0; 256]));
        let result = simple(&RaterStack::new(masks).unwrap(), &FusionConfig::with_method(FusionMethod::Simple)).unwrap();
        if !result.included.contains(&outlier) {
            simple_ok += 1;
        }
    }

    let mut auc_dev: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 10.0).floor() / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
        auc_dev = auc_dev.max((auc(&scores, &labels).unwrap() - wins / pairs).abs());
    }

    outcome(
        agree_dev < 1e-3 && ll_drops == 0 && simple_ok == 10 && auc_dev <= 1e-12,
        format!(
            "STAPLE agreement dev {agree_dev:.1e}, LL drops {ll_drops}/{ll_steps}, SIMPLE excluded outlier {simple_ok}/10, AUC dev {auc_dev:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 7

struct Scores {
    mr_ece: f64,
    auc: f64,
}

fn fit_and_score(train_set: &[Sample], test_set: &[Sample], loss: TrainLoss, method: FusionMethod, seed: u64) -> Scores {
    let cfg = TrainConfig { loss, seed, fusion: FusionConfig::with_method(method), ..TrainConfig::default() };
    let ckpt = train(train_set, &cfg).unwrap();
    let preds: Vec<_> = test_set.iter().map(|s| predict(&ckpt, &s.image).unwrap()).collect();
    let stacks: Vec<_> = test_set.iter().map(|s| s.annotations.clone()).collect();
    let report = bootstrap_eval(&preds, &stacks, &EvalConfig { seed, ..EvalConfig::default() }).unwrap();
    Scores { mr_ece: report.mr_ece.boot_mean.unwrap(), auc: report.auc.boot_mean.unwrap() }
}

fn directional_benchmark() -> Outcome {
    let start = Instant::now();
    let mut held = 0;
    for seed in 0..3u64 {
        let cfg = SynthConfig { num_samples: 240, image_size: 64, num_raters: 3, ambiguity: 0.5, seed, ..SynthConfig::default() };
        let samples: Vec<Sample> = generate_samples(&cfg).unwrap().iter().map(|s| s.to_sample()).collect();
        let (train_set, test_set) = samples.split_at(200);
        let rps = fit_and_score(train_set, test_set, TrainLoss::HybridRps, FusionMethod::Mc, seed);
        let mc = fit_and_score(train_set, test_set, TrainLoss::BceVsFused, FusionMethod::Mc, seed);
        let sc = fit_and_score(train_set, test_set, TrainLoss::BceVsFused, FusionMethod::Sc, seed);
        let best_auc = mc.auc.max(sc.auc);
        let ok = rps.mr_ece < mc.mr_ece && rps.mr_ece < sc.mr_ece && rps.auc >= best_auc - 0.02;
        held += ok as usize;
        let line = format!(
            "seed {seed}: MR-ECE rps {:.5} mc {:.5} sc {:.5}; AUC rps {:.4} best baseline {:.4} -> {}",
            rps.mr_ece,
            mc.mr_ece,
            sc.mr_ece,
            rps.auc,
            best_auc,
            if ok { "holds" } else { "fails" }
        );
        eprintln!("  criterion 7 {line}");
    }
    let elapsed = start.elapsed();
    outcome(
        held >= 2 && within(elapsed, Duration::from_secs(15 * 60)),
        format!("ordering held on {held}/3 seeds, {elapsed:.0?}"),
    )
}

// ---------------------------------------------------------------- 8

fn spot_values() -> Outcome {
    let probs = OrdinalProbMap::new(1, 1, 3, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let agg = aggregate_foreground(&probs).as_slice()[0];

    let uniform = OrdinalProbMap::uniform(1, 1, 2);
    let level0 = OrcMap::new(Grid2D::new(1, 1, vec![0u16]).unwrap(), 2).unwrap();
    let rps = rps_loss(&uniform, &level0).unwrap();

    let half = OrdinalProbMap::uniform(2, 2, 3);
    let target = OrcMap::new(Grid2D::new(2, 2, vec![0u16, 1, 2, 3]).unwrap(), 3).unwrap();
    let bce = bce_loss(&half, &target).unwrap();

    #[allow(clippy::float_cmp)]
    let exact = agg == 0.7;
    outcome(
        exact && (rps - 5.0 / 27.0).abs() <= 1e-9 && (bce - std::f64::consts::LN_2).abs() <= 1e-9,
        format!("aggregate {agg:?}, RPS {rps:.12} (5/27), BCE {bce:.12} (ln 2)"),
    )
}

// ---------------------------------------------------------------- 9

fn run_cli(dir: &Path, args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mrcal"));
    cmd.current_dir(dir).args(args).env_remove("MRCAL_THREADS");
    if let Some(t) = threads {
        cmd.env("MRCAL_THREADS", t);
    }
    let out = cmd.output().expect("spawn mrcal");
    assert!(out.status.success(), "mrcal {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                pending.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let digest = Sha256::digest(fs::read(&path).unwrap());
                out.insert(rel, format!("{digest:x}"));
            }
        }
    }
    out
}

fn pipeline_run(threads: Option<&str>) -> BTreeMap<String, String> {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    let mut stdout = Vec::new();
    for args in [
        &["synth", "--out", "data", "--n", "16", "--size", "32", "--seed", "9"][..],
        &["train", "--data", "data", "--epochs", "3", "--seed", "9", "--out", "model/rps.mrc"][..],
        &["eval", "--model", "model/rps.mrc", "--data", "data", "--seed", "9", "--report", "report.json", "--reliability", "reliability.csv"][..],
    ] {
        stdout.extend(run_cli(dir, args, threads).stdout);
    }
    let mut hashes = hash_tree(dir);
    hashes.insert("<stdout>".into(), format!("{:x}", Sha256::digest(&stdout)));
    hashes
}

fn reproducibility() -> Outcome {
    let runs = [
        ("default", pipeline_run(None)),
        ("default again", pipeline_run(None)),
        ("MRCAL_THREADS=1", pipeline_run(Some("1"))),
        ("MRCAL_THREADS=4", pipeline_run(Some("4"))),
    ];
    let reference = &runs[0].1;
    let differing: Vec<&str> = runs.iter().filter(|(_, h)| h != reference).map(|(n, _)| *n).collect();
    outcome(
        differing.is_empty() && reference.len() > 10,
        format!("{} artifacts plus stdout compared over {} runs, differing: {differing:?}", reference.len() - 1, runs.len()),
    )
}

// ---------------------------------------------------------------- 10

fn protocol_fidelity() -> Outcome {
    let mut failures = Vec::new();
    let defaults = EvalConfig::default();
    if (defaults.num_bins, defaults.bootstrap_n, defaults.bootstrap_frac) != (15, 10, 0.6) {
        failures.push("EvalConfig defaults".to_string());
    }
    if FusionConfig::default().sigma != 1.0 {
        failures.push("FusionConfig sigma default".to_string());
    }

    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    run_cli(dir, &["synth", "--out", "data", "--n", "12", "--size", "16", "--seed", "1"], None);
    run_cli(dir, &["eval", "--model", "oracle", "--data", "data", "--report", "oracle.json"], None);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("oracle.json")).unwrap()).unwrap();
    let echo = &report["metrics"]["config"];
    if (echo["num_bins"].as_u64(), echo["bootstrap_n"].as_u64(), echo["bootstrap_frac"].as_f64()) != (Some(15), Some(10), Some(0.6)) {
        failures.push(format!("cli eval defaults {echo}"));
    }

    let sweep = run_cli(dir, &["sweep", "--data", "data", "--values", "0.5:1.0:0.1", "--epochs", "1"], None);
    let lines: Vec<serde_json::Value> = String::from_utf8(sweep.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let rows = lines.iter().filter(|v| v.get("param").is_some()).count();
    let runs = lines.last().and_then(|v| v["runs"].as_u64());
    if rows != 6 || runs != Some(6) {
        failures.push(format!("sweep executed {rows} rows, summary runs {runs:?}"));
    }

    run_cli(dir, &["fuse", "--data", "data", "--method", "scg", "--out", "scg"], None);
    let ds = load_dataset(dir.join("data")).unwrap();
    let mut scg_dev: f64 = 0.0;
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in ds.split(split) {
            let cli = read_container(dir.join("scg").join(format!("{}.mrc", s.id))).unwrap().into_real_grid().unwrap();
            let lib = fuse_soft_gaussian(&s.annotations, 1.0);
            let dev = cli.as_slice().iter().zip(lib.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            scg_dev = scg_dev.max(dev);
        }
    }
    if scg_dev > 1e-6 {
        failures.push(format!("cli scg differs from sigma=1 by {scg_dev:.1e}"));
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("bins 15, bootstrap 10, fraction 0.6; sweep ran {rows} runs; scg default sigma 1 (dev {scg_dev:.1e})")
        } else {
            failures.join("; ")
        },
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_check),
        ("RPS properness", rps_properness),
        ("ordinal gradedness", gradedness),
        ("MR-ECE reduction", mr_ece_reduction),
        ("oracle calibration", oracle_calibration),
        ("fusion and AUC oracles", fusion_oracles),
        ("directional benchmark", directional_benchmark),
        ("spot values", spot_values),
        ("reproducibility", reproducibility),
        ("protocol fidelity", protocol_fidelity),
    ];
    let only: Option<usize> = std::env::var("MRCAL_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} {name}: {} [{:.2?}]", result.detail, start.elapsed());
        failed += !result.pass as usize;
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
