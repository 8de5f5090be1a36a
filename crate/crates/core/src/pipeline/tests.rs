use super::*;
use crate::exec::ModelParams;
use crate::tensor::Tensor;
use tempfile::TempDir;

const TINY_MODEL: &str = "\
input 1 8 8
conv 4 3 2 same
batchnorm
relu
flatten
dense 2
softmax
";

fn tiny_dataset() -> DatasetConfig {
    DatasetConfig::Synthetic {
        seed: 11,
        config: SyntheticConfig {
            classes: 2,
            modes_per_class: 2,
            train_per_class: 12,
            test_per_class: 6,
            height: 8,
            width: 8,
            noise: 0.05,
            max_shift: 1,
            mode_strength: 0.5,
            class_split: 1.0,
        },
    }
}

fn tiny_config(seeds: Vec<u64>) -> PipelineConfig {
    PipelineConfig {
        version: 1,
        model: "tiny.model".into(),
        dataset: tiny_dataset(),
        cluster: KMode::Fixed { k: 2 },
        target_mode: TargetMode::RepresentativeClustered,
        head_init: HeadInit::Scratch,
        baseline_train: StageTrain::new(2, 8, OptimizerConfig::adam(5e-3, 1e-4)),
        cae_train: StageTrain::new(2, 8, OptimizerConfig::adam(5e-3, 0.0)),
        head_train: StageTrain::new(2, 8, OptimizerConfig::adam(5e-3, 1e-4)),
        seeds,
    }
}

fn tiny_train_set() -> LabeledImageSet {
    let (train, _) = tiny_dataset().load(Path::new(".")).unwrap();
    train
}

fn tiny_model(seed: u64) -> ModelParams<f32> {
    ModelParams::init(ModelSpec::parse(TINY_MODEL).unwrap(), seed).unwrap()
}

#[test]
fn config_validation_catches_bad_values() {
    let mut config = tiny_config(vec![]);
    assert!(config.validate().is_err());
    config.seeds = vec![1];
    config.validate().unwrap();
    config.cluster = KMode::Elbow { k_max: 2 };
    assert!(config.validate().is_err());
    config.cluster = KMode::Fixed { k: 0 };
    assert!(config.validate().is_err());
    config.cluster = KMode::Fixed { k: 3 };
    config.head_train.epochs = 0;
    assert!(config.validate().is_err());
}

#[test]
fn target_modes_pick_their_k() {
    let config = tiny_config(vec![1]);
    assert_eq!(config.effective_k_mode(TargetMode::SameImage), None);
    assert_eq!(
        config.effective_k_mode(TargetMode::RepresentativeUnclustered),
        Some(KMode::Fixed { k: 1 })
    );
    assert_eq!(
        config.effective_k_mode(TargetMode::RepresentativeClustered),
        Some(KMode::Fixed { k: 2 })
    );
}

#[test]
fn embed_features_pools_each_channel() {
    let mut params = tiny_model(5);
    let image: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
    let mut pixels = image.clone();
    pixels.extend_from_slice(&image);
    let set = LabeledImageSet::new(
        Tensor::new(vec![2, 1, 8, 8], pixels).unwrap(),
        vec![0, 1],
        2,
    )
    .unwrap();
    let features = embed_features(&mut params, &set, 64).unwrap();
    assert_eq!(features.rows(), 2);
    assert_eq!(features.dim(), 4);
    assert_eq!(features.row(0), features.row(1));
    assert!(features.source().contains("average"));
}

#[test]
fn small_classes_cap_the_cluster_count() {
    let mut pixels = Vec::new();
    for i in 0..7 {
        pixels.extend((0..64).map(|p| ((i * 13 + p) % 64) as f32 / 64.0));
    }
    let set = LabeledImageSet::new(
        Tensor::new(vec![7, 1, 8, 8], pixels).unwrap(),
        vec![0, 0, 1, 1, 1, 1, 1],
        2,
    )
    .unwrap();
    let mut params = tiny_model(5);
    let clusters =
        cluster_all_classes(&mut params, &set, &KMode::Fixed { k: 3 }, 99).unwrap();
    assert_eq!(clusters.assignments.len(), 7);
    assert_eq!(clusters.classes[0].k, 2);
    assert!(clusters.classes[0].capped);
    assert_eq!(clusters.classes[1].k, 3);
    assert!(!clusters.classes[1].capped);
    for (i, &a) in clusters.assignments.iter().enumerate() {
        let info = &clusters.classes[set.label(i)];
        assert!(a < info.k);
    }
}

#[test]
fn representatives_take_each_cells_entropy_minimum() {
    let train = tiny_train_set();
    let mut params = tiny_model(5);
    let clusters =
        cluster_all_classes(&mut params, &train, &KMode::Fixed { k: 2 }, 77).unwrap();
    let records = score_dataset(&mut params, &train, &clusters).unwrap();
    assert_eq!(records.len(), train.len());
    let reps = select_cell_representatives(&records);
    for rep in &reps {
        for r in &records {
            if r.class == rep.class && r.cluster == rep.cluster {
                assert!(rep.entropy <= r.entropy);
                if r.entropy == rep.entropy {
                    assert!(rep.image_index <= r.image_index);
                }
            }
        }
    }
    let pairs = build_conversion_pairs(&records, &reps).unwrap();
    validate_conversion_pairs(&train, &pairs).unwrap();
    for rep in &reps {
        assert_eq!(pairs[rep.image_index], (rep.image_index, rep.image_index));
    }
}

#[test]
fn cross_class_pairs_are_rejected() {
    let train = tiny_train_set();
    let mut pairs: Vec<(usize, usize)> = (0..train.len()).map(|i| (i, i)).collect();
    validate_conversion_pairs(&train, &pairs).unwrap();
    let other = train
        .labels()
        .iter()
        .position(|&l| l != train.label(0))
        .unwrap();
    pairs[0].1 = other;
    assert!(validate_conversion_pairs(&train, &pairs).is_err());
}

#[test]
fn same_image_targets_are_the_identity() {
    let dir = TempDir::new().unwrap();
    let mut pipeline = Pipeline::new(
        tiny_config(vec![7]),
        TINY_MODEL,
        Path::new("."),
        dir.path().join("run"),
    )
    .unwrap();
    let (mut baseline, _) = pipeline.baseline(7).unwrap();
    let (targets, _) = pipeline
        .conversion_targets(7, TargetMode::SameImage, &mut baseline)
        .unwrap();
    let expected: Vec<usize> = (0..pipeline.train_set().len()).collect();
    assert_eq!(targets, expected);
}

#[test]
fn assembled_model_keeps_the_baseline_parameter_count() {
    let dir = TempDir::new().unwrap();
    let mut pipeline = Pipeline::new(
        tiny_config(vec![7]),
        TINY_MODEL,
        Path::new("."),
        dir.path().join("run"),
    )
    .unwrap();
    let (baseline, _) = pipeline.baseline(7).unwrap();
    let (cae, _, boundary, key) = pipeline.cae(7, TargetMode::RepresentativeClustered).unwrap();
    let model = assemble_encodenet(&baseline, &cae, HeadInit::Scratch, 7, key).unwrap();
    assert_eq!(model.boundary, boundary);
    assert_eq!(
        model.params.parameter_count(),
        baseline.parameter_count()
    );
    let encoder = model.encoder_tensors();
    for i in encoder {
        assert!(model.params.tensors[i].bit_eq(&cae.tensors[i]));
    }
}

#[test]
fn head_training_leaves_the_encoder_bit_frozen() {
    let dir = TempDir::new().unwrap();
    let mut pipeline = Pipeline::new(
        tiny_config(vec![7]),
        TINY_MODEL,
        Path::new("."),
        dir.path().join("run"),
    )
    .unwrap();
    let (model, record) = pipeline
        .encodenet(7, TargetMode::RepresentativeClustered)
        .unwrap();
    assert!(record.test_accuracy.is_some());
    let (cae, _, _, _) = pipeline.cae(7, TargetMode::RepresentativeClustered).unwrap();
    for i in model.encoder_tensors() {
        assert!(model.params.tensors[i].bit_eq(&cae.tensors[i]));
    }
}

#[test]
fn from_baseline_head_starts_from_the_trained_head() {
    let dir = TempDir::new().unwrap();
    let mut pipeline = Pipeline::new(
        tiny_config(vec![7]),
        TINY_MODEL,
        Path::new("."),
        dir.path().join("run"),
    )
    .unwrap();
    let (baseline, _) = pipeline.baseline(7).unwrap();
    let (cae, _, boundary, key) = pipeline.cae(7, TargetMode::RepresentativeClustered).unwrap();
    let model =
        assemble_encodenet(&baseline, &cae, HeadInit::FromBaseline, 7, key).unwrap();
    let head = model.params.params_in_layers(boundary..model.params.spec.layers.len());
    for i in head {
        assert!(model.params.tensors[i].bit_eq(&baseline.tensors[i]));
    }
}

#[test]
fn finished_stages_are_reused_and_reruns_match() {
    let dir = TempDir::new().unwrap();
    let run_dir = dir.path().join("run");
    let config = tiny_config(vec![7]);

    let mut first = Pipeline::new(config.clone(), TINY_MODEL, Path::new("."), &run_dir).unwrap();
    let (_, record_a) = first
        .encodenet(7, TargetMode::RepresentativeClustered)
        .unwrap();
    let manifest_len = first.store().manifest_len().unwrap();

    let mut second = Pipeline::new(config.clone(), TINY_MODEL, Path::new("."), &run_dir).unwrap();
    let (_, record_b) = second
        .encodenet(7, TargetMode::RepresentativeClustered)
        .unwrap();
    assert_eq!(second.store().manifest_len().unwrap(), manifest_len);
    assert_eq!(record_a.epochs, record_b.epochs);
    assert_eq!(record_a.final_loss, record_b.final_loss);
    assert_eq!(record_a.test_accuracy, record_b.test_accuracy);

    let mut forced = Pipeline::new(config, TINY_MODEL, Path::new("."), &run_dir).unwrap();
    forced.force = true;
    let (_, record_c) = forced
        .encodenet(7, TargetMode::RepresentativeClustered)
        .unwrap();
    assert_eq!(record_a.epochs, record_c.epochs);
    assert_eq!(record_a.final_loss, record_c.final_loss);
    assert_eq!(record_a.test_accuracy, record_c.test_accuracy);
}

#[test]
fn changed_settings_miss_the_cache() {
    let dir = TempDir::new().unwrap();
    let run_dir = dir.path().join("run");
    let config = tiny_config(vec![7]);
    let mut pipeline = Pipeline::new(config.clone(), TINY_MODEL, Path::new("."), &run_dir).unwrap();
    pipeline.baseline(7).unwrap();
    let manifest_len = pipeline.store().manifest_len().unwrap();

    let mut changed = config;
    changed.baseline_train.epochs = 3;
    let mut pipeline = Pipeline::new(changed, TINY_MODEL, Path::new("."), &run_dir).unwrap();
    let (_, record) = pipeline.baseline(7).unwrap();
    assert_eq!(record.epochs.len(), 3);
    assert_eq!(pipeline.store().manifest_len().unwrap(), manifest_len + 1);
}

#[test]
fn ablation_covers_the_grid_in_order() {
    let dir = TempDir::new().unwrap();
    let mut pipeline = Pipeline::new(
        tiny_config(vec![3, 5]),
        TINY_MODEL,
        Path::new("."),
        dir.path().join("run"),
    )
    .unwrap();
    let table = pipeline.run_ablation().unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "baseline",
            "same_image",
            "representative_unclustered",
            "representative_clustered"
        ]
    );
    for row in &table.rows {
        assert_eq!(row.accuracies.len(), 2);
        assert!(row.median.is_some());
    }
    assert!(table.failures.is_empty());
    assert!(pipeline.store().abs("ablation.json").exists());
    let csv = std::fs::read_to_string(pipeline.store().abs("ablation.csv")).unwrap();
    assert!(csv.lines().count() >= 1 + 4 * 3);
}

#[test]
fn medians_split_even_counts() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[0.5]), Some(0.5));
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
}
