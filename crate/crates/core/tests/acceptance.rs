//! Release gate for the workbench. Each test checks one contract end to end
//! and prints a single `PASS [n/10]` line with the measured numbers; a
//! failure panics with the matching `FAIL [n/10]` message. Run with
//! `--nocapture` (and ideally `--test-threads=1`) to see the lines in order.
//!
//! Tests 3, 4, 8, 9, and 10 share one desk-scale training run built from
//! `configs/desk.toml` and the model it names. The run directory defaults to
//! a fresh temp dir; set `ENCODENET_ACCEPTANCE_DIR` to reuse artifacts across
//! invocations while iterating.

use encodenet_core::check::{op_gradient_reports, FD_STEP, GRAD_TOL};
use encodenet_core::cluster::{elbow_select, kmeans, FeatureMatrix};
use encodenet_core::entropy::{entropy_upper_bound, prediction_entropy};
use encodenet_core::exec::ModelParams;
use encodenet_core::model::ModelSpec;
use encodenet_core::pipeline::{
    assemble_encodenet, validate_conversion_pairs, AblationTable, HeadInit, Pipeline,
    PipelineConfig, Representative, TargetMode,
};
use encodenet_core::rng::{derive_seed, seed_rng, shuffle, uniform_range};
use encodenet_core::train::RunRecord;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

const REP_MODES: [TargetMode; 2] = [
    TargetMode::RepresentativeUnclustered,
    TargetMode::RepresentativeClustered,
];

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("repository root")
}

struct Desk {
    pipeline: Mutex<Pipeline>,
    table: AblationTable,
    seeds: Vec<u64>,
    ablation_seconds: f64,
}

static DESK: OnceLock<Desk> = OnceLock::new();

fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let root = repo_root();
        let config_path = root.join("configs/desk.toml");
        let text = std::fs::read_to_string(&config_path)
            .unwrap_or_else(|e| panic!("cannot read {}: {e}", config_path.display()));
        let config: PipelineConfig = toml::from_str(&text).expect("desk config parses");
        let config_dir = config_path.parent().unwrap().to_path_buf();
        let model_text = std::fs::read_to_string(config_dir.join(&config.model))
            .expect("desk model file");
        let run_dir = std::env::var("ENCODENET_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| {
                std::env::temp_dir().join(format!("acceptance-{}", std::process::id()))
            });
        let seeds = config.seeds.clone();
        let mut pipeline =
            Pipeline::new(config, &model_text, &config_dir, run_dir).expect("desk pipeline");
        let start = Instant::now();
        let table = pipeline.run_ablation().expect("desk ablation");
        Desk {
            pipeline: Mutex::new(pipeline),
            table,
            seeds,
            ablation_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn pipeline() -> MutexGuard<'static, Pipeline> {
    desk().pipeline.lock().unwrap()
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Everything in a run record except wall time, which legitimately varies.
fn same_metrics(a: &RunRecord, b: &RunRecord) -> bool {
    a.epochs == b.epochs
        && a.final_loss == b.final_loss
        && a.test_accuracy == b.test_accuracy
        && a.holdout_loss == b.holdout_loss
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    assert_eq!(FD_STEP, 1e-4, "FAIL [1/10] probe step drifted from 1e-4");
    assert_eq!(GRAD_TOL, 1e-5, "FAIL [1/10] tolerance drifted from 1e-5");

    let expected_ops = [
        "conv2d_same_s1",
        "conv2d_same_s2",
        "conv2d_valid_s1",
        "upsample_nearest2x",
        "relu",
        "sigmoid",
        "batchnorm_train",
        "batchnorm_eval",
        "max_pool2x2",
        "global_avg_pool",
        "flatten_dense",
        "add",
        "softmax",
        "mse",
        "softmax_cross_entropy",
    ];
    let cases_per_op = 20usize;
    let mut worst: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for case in 0..cases_per_op {
        for report in op_gradient_reports(1000 + case as u64).expect("gradient suite runs") {
            let slot = worst.entry(report.op).or_insert((0.0, 0));
            slot.0 = slot.0.max(report.max_rel_err);
            slot.1 += 1;
        }
    }
    for op in expected_ops {
        let (err, count) = worst
            .get(op)
            .unwrap_or_else(|| panic!("FAIL [1/10] op {op} missing from the gradient suite"));
        assert_eq!(
            *count, cases_per_op,
            "FAIL [1/10] op {op} ran {count} cases, wanted {cases_per_op}"
        );
        assert!(
            *err < GRAD_TOL,
            "FAIL [1/10] op {op} max relative error {err:.3e} is not under {GRAD_TOL:.0e}"
        );
    }
    assert_eq!(
        worst.len(),
        expected_ops.len(),
        "FAIL [1/10] suite covers ops not in the pinned list: {:?}",
        worst.keys().collect::<Vec<_>>()
    );
    let overall = worst.values().fold(0.0f64, |m, (e, _)| m.max(*e));
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "FAIL [1/10] suite took {secs:.0}s, budget is 120s");
    println!(
        "PASS [1/10] gradient check: {} ops x {cases_per_op} cases, max relative error {overall:.2e} < 1e-5, {secs:.1}s",
        expected_ops.len()
    );
}

#[test]
fn parameter_parity_holds_for_every_model() {
    let models_dir = repo_root().join("models");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&models_dir)
        .expect("models directory")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "model"))
        .collect();
    paths.sort();
    assert!(!paths.is_empty(), "FAIL [2/10] no .model files to check");

    let mut summaries = Vec::new();
    for path in &paths {
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(path).unwrap();
        let spec = ModelSpec::parse(&text)
            .unwrap_or_else(|e| panic!("FAIL [2/10] {name} does not parse: {e}"));
        let baseline = ModelParams::<f32>::init(spec, 13).unwrap();
        let split = baseline.spec.split().unwrap();
        let boundary = split.encoder.layers.len();
        let mut cae = ModelParams::<f32>::init(split.autoencoder().unwrap(), 17).unwrap();
        cae.copy_prefix_from(&baseline, boundary).unwrap();
        for head_init in [HeadInit::Scratch, HeadInit::FromBaseline] {
            let assembled = assemble_encodenet(&baseline, &cae, head_init, 19, name.clone())
                .unwrap_or_else(|e| panic!("FAIL [2/10] {name} does not assemble: {e}"));
            assert_eq!(
                assembled.params.parameter_count(),
                baseline.parameter_count(),
                "FAIL [2/10] {name} changes parameter count under {head_init:?}"
            );
        }
        summaries.push(format!("{name}={}", baseline.parameter_count()));
    }
    println!(
        "PASS [2/10] parameter parity: assembled == baseline for {} ({})",
        paths.len(),
        summaries.join(", ")
    );
}

#[test]
fn clustered_targets_cut_cae_holdout_loss() {
    let desk = desk();
    let mut k1 = Vec::new();
    let mut k3 = Vec::new();
    let mut stage_seconds = 0.0f64;
    {
        let mut p = pipeline();
        for &seed in &desk.seeds {
            let (_, base) = p.baseline(seed).unwrap();
            let (_, rec1, _, _) = p.cae(seed, TargetMode::RepresentativeUnclustered).unwrap();
            let (_, rec3, _, _) = p.cae(seed, TargetMode::RepresentativeClustered).unwrap();
            stage_seconds += base.wall_seconds + rec1.wall_seconds + rec3.wall_seconds;
            k1.push(rec1.holdout_loss.expect("k1 run holds out pairs"));
            k3.push(rec3.holdout_loss.expect("k3 run holds out pairs"));
        }
    }
    let (m1, m3) = (median(&mut k1), median(&mut k3));
    let drop = 100.0 * (m1 - m3) / m1;
    assert!(
        m3 <= 0.8 * m1,
        "FAIL [3/10] clustered targets cut median holdout loss by {drop:.1}% (k3 {m3:.5} vs k1 {m1:.5}), need >= 20%"
    );
    assert!(
        stage_seconds <= 1800.0,
        "FAIL [3/10] stages took {stage_seconds:.0}s of recorded wall time, budget is 30 min"
    );
    println!(
        "PASS [3/10] clustered targets cut median holdout loss by {drop:.1}% (k3 {m3:.5} vs k1 {m1:.5}, {} seeds, {stage_seconds:.0}s recorded)",
        desk.seeds.len()
    );
}

#[test]
fn ablation_ranks_the_four_variants() {
    let desk = desk();
    let table = &desk.table;
    assert!(
        table.failures.is_empty(),
        "FAIL [4/10] ablation cells failed: {:?}",
        table.failures
    );
    let med = |label: &str| -> f64 {
        table
            .row(label)
            .and_then(|r| r.median)
            .unwrap_or_else(|| panic!("FAIL [4/10] no median for {label}"))
    };
    let baseline = med("baseline");
    let same_image = med("same_image");
    let unclustered = med("representative_unclustered");
    let clustered = med("representative_clustered");
    assert!(
        same_image < baseline,
        "FAIL [4/10] same-image median {same_image:.4} is not below baseline {baseline:.4}"
    );
    assert!(
        clustered >= baseline + 0.005,
        "FAIL [4/10] clustered median {clustered:.4} does not beat baseline {baseline:.4} by 0.5pp"
    );
    let order_note = if table.expected_order_held {
        "full ordering held".to_string()
    } else {
        format!(
            "flagged: full ordering violated (same_image {same_image:.4}, baseline {baseline:.4}, unclustered {unclustered:.4}, clustered {clustered:.4})"
        )
    };
    assert!(
        desk.ablation_seconds <= 5400.0,
        "FAIL [4/10] ablation took {:.0}s, budget is 90 min",
        desk.ablation_seconds
    );
    println!(
        "PASS [4/10] ablation medians: same_image {same_image:.4} < baseline {baseline:.4}, clustered {clustered:.4} >= baseline + 0.5pp; {order_note}; {:.0}s",
        desk.ablation_seconds
    );
}

#[test]
fn kmeans_runs_satisfy_invariants() {
    let start = Instant::now();
    let mut checked = 0usize;
    for case in 0..25u64 {
        let mut rng = seed_rng(derive_seed(4242, &format!("case{case}")));
        let rows = 5 + (case as usize * 7) % 96;
        let dim = 2 + case as usize % 7;
        let k = 1 + case as usize % 6;
        let k = k.min(rows);
        let data: Vec<f64> = (0..rows * dim)
            .map(|_| uniform_range(&mut rng, -3.0, 3.0))
            .collect();
        let features = FeatureMatrix::new(rows, dim, data).unwrap();
        let fit = kmeans(&features, k, 900 + case, 200).unwrap();

        assert!(
            fit.converged,
            "FAIL [5/10] case {case} ({rows} pts, k={k}) did not converge in 200 iterations"
        );
        for w in fit.sse_trace.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                "FAIL [5/10] case {case} SSE rose from {} to {}",
                w[0],
                w[1]
            );
        }

        // nearest-centroid reassignment, recomputed from scratch
        for i in 0..rows {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in fit.centroids.iter().enumerate() {
                let d: f64 = features
                    .row(i)
                    .iter()
                    .zip(centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(
                best, fit.assignments[i],
                "FAIL [5/10] case {case} point {i} is not assigned to its nearest centroid"
            );
        }

        // centroids against independently recomputed member means
        for c in 0..k {
            let members: Vec<usize> = (0..rows).filter(|&i| fit.assignments[i] == c).collect();
            assert!(
                !members.is_empty(),
                "FAIL [5/10] case {case} cluster {c} is empty"
            );
            for d in 0..dim {
                let mean: f64 = members.iter().map(|&i| features.row(i)[d]).sum::<f64>()
                    / members.len() as f64;
                assert!(
                    (mean - fit.centroids[c][d]).abs() < 1e-5,
                    "FAIL [5/10] case {case} centroid {c}[{d}] = {} but member mean = {mean}",
                    fit.centroids[c][d]
                );
            }
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "FAIL [5/10] suite took {secs:.1}s, budget is 60s");
    println!(
        "PASS [5/10] k-means: {checked} runs converged with monotone SSE, fixed-point assignments, centroids = member means within 1e-5, {secs:.2}s"
    );
}

#[test]
fn elbow_picks_the_knee_and_flags_degenerate_curves() {
    let curve: Vec<(usize, f64)> = [100.0, 40.0, 15.0, 13.0, 12.0, 11.0]
        .into_iter()
        .enumerate()
        .map(|(i, sse)| (i + 1, sse))
        .collect();

    // chord-distance oracle, recomputed from the raw points
    let (k0, s0) = curve[0];
    let (kn, sn) = *curve.last().unwrap();
    let mut oracle_best = (0usize, -1.0f64);
    let mut distances = Vec::new();
    for &(k, sse) in &curve {
        let x = (k - k0) as f64 / (kn - k0) as f64;
        let y = (sse - sn) / (s0 - sn);
        let d = (x + y - 1.0).abs() / 2.0f64.sqrt();
        distances.push(d);
        if d > oracle_best.1 {
            oracle_best = (k, d);
        }
    }
    assert_eq!(oracle_best.0, 3, "FAIL [6/10] oracle arithmetic drifted");
    // hand values: |x + y - 1| at k=2 is 0.47416, at k=3 is 0.55506
    assert!((distances[1] * 2.0f64.sqrt() - 0.47416).abs() < 1e-4);
    assert!((distances[2] * 2.0f64.sqrt() - 0.55506).abs() < 1e-4);

    let choice = elbow_select(&curve).unwrap();
    assert_eq!(
        choice.k, 3,
        "FAIL [6/10] elbow picked k={} on the reference curve, oracle says 3",
        choice.k
    );
    assert!(!choice.degenerate, "FAIL [6/10] reference curve flagged degenerate");

    let linear: Vec<(usize, f64)> = (1..=5).map(|k| (k, 120.0 - 20.0 * k as f64)).collect();
    let flat = elbow_select(&linear).unwrap();
    assert!(
        flat.degenerate && flat.k == 1,
        "FAIL [6/10] linear curve returned k={} degenerate={}, wanted smallest k with flag",
        flat.k,
        flat.degenerate
    );
    println!(
        "PASS [6/10] elbow: reference curve picks k=3 (chord distance {:.4} beats {:.4} at k=2), linear curve returns k=1 flagged degenerate",
        distances[2], distances[1]
    );
}

#[test]
fn entropy_matches_closed_forms() {
    for classes in 2..=12usize {
        let mut one_hot = vec![0.0f64; classes];
        one_hot[classes / 2] = 1.0;
        assert_eq!(
            prediction_entropy(&one_hot).unwrap(),
            0.0,
            "FAIL [7/10] one-hot over {classes} classes is not exactly zero"
        );
        let uniform = vec![1.0 / classes as f64; classes];
        let h = prediction_entropy(&uniform).unwrap();
        assert!(
            (h - (classes as f64).ln()).abs() < 1e-12,
            "FAIL [7/10] uniform over {classes} gave {h}, want ln {classes}"
        );
        assert_eq!(entropy_upper_bound(classes), (classes as f64).ln());
    }

    let mut rng = seed_rng(derive_seed(777, "entropy-cases"));
    for case in 0..1000usize {
        let classes = 2 + case % 9;
        let raw: Vec<f64> = (0..classes)
            .map(|_| uniform_range(&mut rng, 1e-6, 1.0))
            .collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = prediction_entropy(&probs).unwrap();
        assert!(
            (0.0..=entropy_upper_bound(classes) + 1e-12).contains(&h),
            "FAIL [7/10] case {case}: entropy {h} outside [0, ln {classes}]"
        );
        shuffle(&mut rng, &mut probs);
        let permuted = prediction_entropy(&probs).unwrap();
        assert!(
            (h - permuted).abs() < 1e-12,
            "FAIL [7/10] case {case}: permutation changed entropy from {h} to {permuted}"
        );
    }
    println!(
        "PASS [7/10] entropy: one-hot = 0 and uniform = ln C for C in 2..=12, bounds and permutation invariance on 1000 random distributions"
    );
}

#[test]
fn encoder_stays_bit_frozen_through_head_training() {
    let desk = desk();
    let mut p = pipeline();
    let mut compared = 0usize;
    for mode in [
        TargetMode::SameImage,
        TargetMode::RepresentativeUnclustered,
        TargetMode::RepresentativeClustered,
    ] {
        for &seed in &desk.seeds {
            let assembled = p.assemble(seed, mode).unwrap();
            let (trained, _) = p.encodenet(seed, mode).unwrap();
            assert_eq!(assembled.boundary, trained.boundary);
            for idx in assembled.encoder_tensors() {
                assert!(
                    assembled.params.tensors[idx].bit_eq(&trained.params.tensors[idx]),
                    "FAIL [8/10] {mode} seed {seed}: encoder tensor {idx} changed during head training"
                );
                compared += 1;
            }
            for idx in assembled.params.bn_in_layers(0..assembled.boundary) {
                let same = assembled.params.bn_mean[idx]
                    .iter()
                    .zip(&trained.params.bn_mean[idx])
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                    && assembled.params.bn_var[idx]
                        .iter()
                        .zip(&trained.params.bn_var[idx])
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(
                    same,
                    "FAIL [8/10] {mode} seed {seed}: batchnorm statistics {idx} changed during head training"
                );
            }
        }
    }
    println!(
        "PASS [8/10] frozen encoder: {compared} tensors bit-identical before and after head training across 3 modes x {} seeds",
        desk.seeds.len()
    );
}

#[test]
fn stages_replay_deterministically() {
    let desk = desk();
    let seed = desk.seeds[0];
    let mode = TargetMode::RepresentativeClustered;
    let mut p = pipeline();
    let k_mode = p.config().effective_k_mode(mode).unwrap();

    let (mut params, base_a) = p.baseline(seed).unwrap();
    let (clusters_a, key_a) = p.clusters(seed, &k_mode, &mut params).unwrap();
    let (pairs_a, _) = p.rank(seed, &key_a, &clusters_a, &mut params).unwrap();
    let (_, cae_a, _, _) = p.cae(seed, mode).unwrap();
    let (_, head_a) = p.encodenet(seed, mode).unwrap();

    p.force = true;
    let (mut params, base_b) = p.baseline(seed).unwrap();
    let (clusters_b, key_b) = p.clusters(seed, &k_mode, &mut params).unwrap();
    let (pairs_b, _) = p.rank(seed, &key_b, &clusters_b, &mut params).unwrap();
    let (_, cae_b, _, _) = p.cae(seed, mode).unwrap();
    let (_, head_b) = p.encodenet(seed, mode).unwrap();
    p.force = false;

    assert!(
        same_metrics(&base_a, &base_b),
        "FAIL [9/10] baseline replay produced a different metric series"
    );
    assert_eq!(key_a, key_b, "FAIL [9/10] clustering key changed on replay");
    assert_eq!(
        serde_json::to_string(&clusters_a).unwrap(),
        serde_json::to_string(&clusters_b).unwrap(),
        "FAIL [9/10] clustering replay produced different assignments"
    );
    assert_eq!(pairs_a, pairs_b, "FAIL [9/10] pair replay diverged");
    assert!(
        same_metrics(&cae_a, &cae_b),
        "FAIL [9/10] autoencoder replay produced a different metric series"
    );
    assert!(
        same_metrics(&head_a, &head_b),
        "FAIL [9/10] head replay produced a different metric series"
    );
    println!(
        "PASS [9/10] determinism: baseline, clustering, ranking, autoencoder, and head replays reproduce their records exactly (seed {seed})"
    );
}

#[test]
fn conversion_pairs_preserve_class_and_minimize_entropy() {
    let desk = desk();
    let mut total_pairs = 0usize;
    let p = pipeline();
    for mode in REP_MODES {
        for &seed in &desk.seeds {
            let (entropy_file, reps_file, pairs_file) = p.rank_file_names(seed, mode).unwrap();
            let pairs: Vec<(usize, usize)> = serde_json::from_str(
                &std::fs::read_to_string(p.store().abs(&pairs_file)).unwrap(),
            )
            .unwrap();
            let reps: Vec<Representative> = serde_json::from_str(
                &std::fs::read_to_string(p.store().abs(&reps_file)).unwrap(),
            )
            .unwrap();
            let csv = std::fs::read_to_string(p.store().abs(&entropy_file)).unwrap();

            // per image: (class, cluster, entropy) straight from the stage output
            let mut cells = Vec::new();
            for line in csv.lines().skip(1) {
                let fields: Vec<&str> = line.split(',').collect();
                cells.push((
                    fields[1].parse::<usize>().unwrap(),
                    fields[2].parse::<usize>().unwrap(),
                    fields[3].parse::<f64>().unwrap(),
                ));
            }
            assert_eq!(cells.len(), p.train_set().len());
            let mut min_by_cell: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for &(class, cluster, entropy) in &cells {
                min_by_cell
                    .entry((class, cluster))
                    .and_modify(|m| *m = m.min(entropy))
                    .or_insert(entropy);
            }

            validate_conversion_pairs(p.train_set(), &pairs)
                .unwrap_or_else(|e| panic!("FAIL [10/10] {mode} seed {seed}: {e}"));
            let rep_set: BTreeMap<usize, &Representative> =
                reps.iter().map(|r| (r.image_index, r)).collect();
            for &(input, target) in &pairs {
                let (ic, icl, _) = cells[input];
                let (tc, tcl, te) = cells[target];
                assert_eq!(
                    (ic, icl),
                    (tc, tcl),
                    "FAIL [10/10] {mode} seed {seed}: pair ({input}, {target}) leaves its cell"
                );
                let cell_min = min_by_cell[&(ic, icl)];
                assert!(
                    te <= cell_min,
                    "FAIL [10/10] {mode} seed {seed}: target {target} has entropy {te} but its cell bottoms out at {cell_min}"
                );
                let rep = rep_set.get(&target).unwrap_or_else(|| {
                    panic!("FAIL [10/10] {mode} seed {seed}: target {target} is not a listed representative")
                });
                assert_eq!((rep.class, rep.cluster), (ic, icl));
            }
            total_pairs += pairs.len();
        }
    }
    println!(
        "PASS [10/10] conversion pairs: {total_pairs} pairs across {} runs keep their class and map to the lowest-entropy member of their cell",
        REP_MODES.len() * desk.seeds.len()
    );
}
