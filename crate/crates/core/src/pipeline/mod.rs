//! End-to-end run orchestration.
//!
//! A run walks the full chain: train the baseline classifier, embed the
//! training images with its encoder, cluster each class, pick the
//! lowest-entropy representative per (class, cluster) cell, train the
//! converting autoencoder against those targets, then transplant its frozen
//! encoder under a fresh head and retrain only the head. The ablation grid
//! repeats the chain per target mode and seed and reports medians.
//!
//! Stage outputs are cached in a run directory keyed by a hash of their
//! config, seed, and upstream artifacts, so reruns skip finished work
//! unless forced.

mod artifacts;

pub use artifacts::{content_key, ArtifactStore, FileRef, ManifestEntry};

use crate::cluster::{elbow_select, kmeans, sweep_k, FeatureMatrix, KMEANS_MAX_ITERS};
use crate::data::{generate_synthetic, load_cifar, load_idx, CifarVariant, LabeledImageSet, SyntheticConfig};
use crate::entropy::{prediction_entropy, select_representatives, ScoredExample};
use crate::error::{Error, Result};
use crate::exec::ModelParams;
use crate::model::ModelSpec;
use crate::optim::OptimizerConfig;
use crate::rng::derive_seed;
use crate::train::{
    argmax, load_checkpoint, predict_probabilities, save_checkpoint, train_autoencoder,
    train_classifier, RunRecord, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DEFAULT_K: usize = 3;
const EVAL_BATCH: usize = 64;

/// Where the training and test splits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        seed: u64,
        #[serde(flatten)]
        config: SyntheticConfig,
    },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        #[serde(default)]
        subsample_per_class: Option<usize>,
        #[serde(default)]
        subsample_seed: u64,
    },
    Cifar {
        variant: CifarVariant,
        train_files: Vec<String>,
        test_files: Vec<String>,
        #[serde(default)]
        subsample_per_class: Option<usize>,
        #[serde(default)]
        subsample_seed: u64,
    },
}

impl DatasetConfig {
    /// Loads both splits. Relative paths resolve against `root`.
    pub fn load(&self, root: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
        match self {
            DatasetConfig::Synthetic { seed, config } => generate_synthetic(config, *seed),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                subsample_per_class,
                subsample_seed,
            } => {
                let train = load_idx(&root.join(train_images), &root.join(train_labels))?;
                let test = load_idx(&root.join(test_images), &root.join(test_labels))?;
                let train = maybe_subsample(train, *subsample_per_class, *subsample_seed)?;
                Ok((train, test))
            }
            DatasetConfig::Cifar {
                variant,
                train_files,
                test_files,
                subsample_per_class,
                subsample_seed,
            } => {
                let trains: Vec<PathBuf> = train_files.iter().map(|f| root.join(f)).collect();
                let tests: Vec<PathBuf> = test_files.iter().map(|f| root.join(f)).collect();
                let train = load_cifar(&trains, *variant)?;
                let test = load_cifar(&tests, *variant)?;
                let train = maybe_subsample(train, *subsample_per_class, *subsample_seed)?;
                Ok((train, test))
            }
        }
    }
}

fn maybe_subsample(
    set: LabeledImageSet,
    per_class: Option<usize>,
    seed: u64,
) -> Result<LabeledImageSet> {
    match per_class {
        Some(n) => set.subsample_per_class(n, seed),
        None => Ok(set),
    }
}

/// How many clusters to form within each class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KMode {
    Fixed { k: usize },
    /// Sweep k = 1..=k_max per class and take the elbow of the SSE curve.
    Elbow { k_max: usize },
}

impl Default for KMode {
    fn default() -> Self {
        KMode::Fixed { k: DEFAULT_K }
    }
}

impl KMode {
    fn validate(&self) -> Result<()> {
        match self {
            KMode::Fixed { k } if *k == 0 => {
                Err(Error::Config("cluster count must be at least 1".into()))
            }
            KMode::Elbow { k_max } if *k_max < 3 => Err(Error::Config(
                "elbow selection needs a sweep of at least 3 candidates".into(),
            )),
            _ => Ok(()),
        }
    }

    fn label(&self) -> String {
        match self {
            KMode::Fixed { k } => format!("k{k}"),
            KMode::Elbow { k_max } => format!("elbow{k_max}"),
        }
    }
}

/// What the autoencoder is trained to reconstruct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Each image maps to its own cell's lowest-entropy image.
    RepresentativeClustered,
    /// One cluster per class, so one representative per class.
    RepresentativeUnclustered,
    /// Plain autoencoding; each image reconstructs itself.
    SameImage,
}

impl TargetMode {
    pub fn label(self) -> &'static str {
        match self {
            TargetMode::RepresentativeClustered => "representative_clustered",
            TargetMode::RepresentativeUnclustered => "representative_unclustered",
            TargetMode::SameImage => "same_image",
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// How the classifier head starts before retraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Scratch,
    FromBaseline,
}

/// Per-stage training settings; the run seed and frozen prefix are filled
/// in by the stage itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_true")]
    pub cosine_schedule: bool,
}

fn default_true() -> bool {
    true
}

impl StageTrain {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerConfig) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer,
            cosine_schedule: true,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("{what}: epochs must be at least 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}: batch size must be at least 1")));
        }
        Ok(())
    }

    fn to_train_config(&self, seed: u64, frozen_prefix: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer.clone(),
            cosine_schedule: self.cosine_schedule,
            seed,
            frozen_prefix,
        }
    }
}

/// The whole experiment in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Path of the baseline layer listing, relative to the config file.
    pub model: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub cluster: KMode,
    #[serde(default = "default_target_mode")]
    pub target_mode: TargetMode,
    #[serde(default)]
    pub head_init: HeadInit,
    pub baseline_train: StageTrain,
    pub cae_train: StageTrain,
    pub head_train: StageTrain,
    pub seeds: Vec<u64>,
}

fn default_version() -> u32 {
    1
}

fn default_target_mode() -> TargetMode {
    TargetMode::RepresentativeClustered
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.cluster.validate()?;
        self.baseline_train.validate("baseline_train")?;
        self.cae_train.validate("cae_train")?;
        self.head_train.validate("head_train")?;
        Ok(())
    }

    /// The k-mode a target mode actually clusters with, if it clusters.
    pub fn effective_k_mode(&self, mode: TargetMode) -> Option<KMode> {
        match mode {
            TargetMode::SameImage => None,
            TargetMode::RepresentativeUnclustered => Some(KMode::Fixed { k: 1 }),
            TargetMode::RepresentativeClustered => Some(self.cluster.clone()),
        }
    }
}

fn stage_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config types serialize")
}

/// Encoder features for every image: eval-mode forward through the layers
/// before the split, then a global average over each channel plane.
pub fn embed_features(
    params: &mut ModelParams<f32>,
    set: &LabeledImageSet,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let split = params.spec.split()?;
    let boundary = split.encoder.layers.len();
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut data: Vec<f64> = Vec::new();
    let mut channels = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = crate::tape::Tape::new();
        let x = tape.constant(set.gather_images(chunk)?);
        let fwd = params.forward_range(&mut tape, x, crate::exec::Mode::Eval, 0..boundary, boundary)?;
        let out = tape.value(fwd.output);
        let (b, c, h, w) = out.dims4()?;
        channels = c;
        let plane = h * w;
        for img in 0..b {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let sum: f64 = out.data()[base..base + plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                data.push(sum / plane as f64);
            }
        }
    }
    Ok(FeatureMatrix::new(set.len(), channels, data)?
        .with_source(format!("encoder layers 0..{boundary}, global average pool")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassClusterInfo {
    pub class: usize,
    /// Clusters actually formed.
    pub k: usize,
    /// Set when the class had fewer images than the requested k.
    pub capped: bool,
    /// Set when the elbow sweep had no usable bend.
    pub degenerate_elbow: bool,
    /// (k, SSE) curve from the elbow sweep; single entry under fixed k.
    pub sse_by_k: Vec<(usize, f64)>,
}

/// Cluster membership for one dataset, all classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassClusters {
    /// Cluster index per image, local to that image's class.
    pub assignments: Vec<usize>,
    pub classes: Vec<ClassClusterInfo>,
    pub feature_source: String,
}

impl ClassClusters {
    pub fn cells(&self, set: &LabeledImageSet) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for i in 0..self.assignments.len() {
            cells
                .entry((set.label(i), self.assignments[i]))
                .or_default()
                .push(i);
        }
        cells
    }

    pub fn assignments_csv(&self, set: &LabeledImageSet) -> String {
        let mut out = String::from("image_index,class,cluster\n");
        for (i, &cluster) in self.assignments.iter().enumerate() {
            out.push_str(&format!("{i},{},{cluster}\n", set.label(i)));
        }
        out
    }

    pub fn elbow_csv(&self) -> String {
        let mut out = String::from("class,k,sse\n");
        for info in &self.classes {
            for &(k, sse) in &info.sse_by_k {
                out.push_str(&format!("{},{k},{sse}\n", info.class));
            }
        }
        out
    }
}

/// Groups each class's images in encoder-feature space.
///
/// Classes smaller than the requested k fall back to one cluster per image
/// and are flagged. Per-class jobs draw independent derived seeds.
pub fn cluster_all_classes(
    params: &mut ModelParams<f32>,
    set: &LabeledImageSet,
    k_mode: &KMode,
    seed: u64,
) -> Result<ClassClusters> {
    k_mode.validate()?;
    let features = embed_features(params, set, EVAL_BATCH)?;
    let mut assignments = vec![0usize; set.len()];
    let mut classes = Vec::with_capacity(set.num_classes());
    for class in 0..set.num_classes() {
        let members = set.class_indices(class);
        if members.is_empty() {
            return Err(Error::Clustering(format!("class {class} has no examples")));
        }
        let class_features = features.select(&members)?;
        let class_seed = derive_seed(seed, &format!("class{class}"));
        let (k, capped, degenerate_elbow, sse_by_k) = match k_mode {
            KMode::Fixed { k } => {
                let actual = (*k).min(members.len());
                (actual, actual < *k, false, Vec::new())
            }
            KMode::Elbow { k_max } => {
                let cap = (*k_max).min(members.len());
                let ks: Vec<usize> = (1..=cap).collect();
                let curve = sweep_k(&class_features, &ks, class_seed, KMEANS_MAX_ITERS)?;
                let choice = elbow_select(&curve)?;
                (choice.k, cap < *k_max, choice.degenerate, curve)
            }
        };
        let fit = kmeans(
            &class_features,
            k,
            derive_seed(class_seed, "fit"),
            KMEANS_MAX_ITERS,
        )?;
        for (local, &image) in members.iter().enumerate() {
            assignments[image] = fit.assignments[local];
        }
        classes.push(ClassClusterInfo {
            class,
            k,
            capped,
            degenerate_elbow,
            sse_by_k,
        });
    }
    Ok(ClassClusters {
        assignments,
        classes,
        feature_source: features.source().to_string(),
    })
}

/// One image's entropy under the trained classifier, with its cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyRecord {
    pub image_index: usize,
    pub class: usize,
    pub cluster: usize,
    pub entropy: f64,
    pub predicted_class: usize,
}

/// Scores every image with the classifier's softmax entropy, eval mode.
pub fn score_dataset(
    params: &mut ModelParams<f32>,
    set: &LabeledImageSet,
    clusters: &ClassClusters,
) -> Result<Vec<EntropyRecord>> {
    if clusters.assignments.len() != set.len() {
        return Err(Error::Prerequisite(format!(
            "{} cluster assignments for {} images",
            clusters.assignments.len(),
            set.len()
        )));
    }
    let probs = predict_probabilities(params, set, EVAL_BATCH)?;
    let (n, c) = probs.dims2()?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let row = &probs.data()[i * c..(i + 1) * c];
        records.push(EntropyRecord {
            image_index: i,
            class: set.label(i),
            cluster: clusters.assignments[i],
            entropy: prediction_entropy(row)?,
            predicted_class: argmax(row),
        });
    }
    Ok(records)
}

pub fn entropy_csv(records: &[EntropyRecord]) -> String {
    let mut out = String::from("image_index,class,cluster,entropy,predicted_class\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.image_index, r.class, r.cluster, r.entropy, r.predicted_class
        ));
    }
    out
}

/// The chosen target for one (class, cluster) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub class: usize,
    pub cluster: usize,
    pub image_index: usize,
    pub entropy: f64,
}

/// Lowest-entropy image per cell; ties go to the lowest image index.
pub fn select_cell_representatives(records: &[EntropyRecord]) -> Vec<Representative> {
    let scored: Vec<ScoredExample> = records
        .iter()
        .map(|r| ScoredExample {
            class: r.class,
            cluster: r.cluster,
            entropy: r.entropy,
        })
        .collect();
    select_representatives(&scored)
        .into_iter()
        .map(|((class, cluster), slot)| Representative {
            class,
            cluster,
            image_index: records[slot].image_index,
            entropy: records[slot].entropy,
        })
        .collect()
}

/// (input, target) image pairs: every image maps to its cell's
/// representative; a representative maps to itself.
pub fn build_conversion_pairs(
    records: &[EntropyRecord],
    representatives: &[Representative],
) -> Result<Vec<(usize, usize)>> {
    let by_cell: BTreeMap<(usize, usize), usize> = representatives
        .iter()
        .map(|r| ((r.class, r.cluster), r.image_index))
        .collect();
    records
        .iter()
        .map(|r| {
            by_cell
                .get(&(r.class, r.cluster))
                .map(|&target| (r.image_index, target))
                .ok_or_else(|| {
                    Error::Prerequisite(format!(
                        "no representative for class {} cluster {}",
                        r.class, r.cluster
                    ))
                })
        })
        .collect()
}

/// Every pair must stay within one class; checked before any training run
/// consumes the pairs.
pub fn validate_conversion_pairs(set: &LabeledImageSet, pairs: &[(usize, usize)]) -> Result<()> {
    if pairs.len() != set.len() {
        return Err(Error::Prerequisite(format!(
            "{} pairs for {} images",
            pairs.len(),
            set.len()
        )));
    }
    for &(input, target) in pairs {
        if input >= set.len() || target >= set.len() {
            return Err(Error::Prerequisite(format!(
                "pair ({input}, {target}) out of range"
            )));
        }
        if set.label(input) != set.label(target) {
            return Err(Error::Prerequisite(format!(
                "pair ({input}, {target}) crosses classes {} and {}",
                set.label(input),
                set.label(target)
            )));
        }
    }
    Ok(())
}

/// Trains the baseline classifier from a fresh seeded init.
pub fn run_baseline_stage(
    spec: &ModelSpec,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    stage: &StageTrain,
    seed: u64,
) -> Result<(ModelParams<f32>, RunRecord)> {
    let mut params = ModelParams::init(spec.clone(), derive_seed(seed, "baseline-init"))?;
    let config = stage.to_train_config(derive_seed(seed, "baseline-shuffle"), 0);
    let record = train_classifier(&mut params, train, Some(test), &config)?;
    Ok((params, record))
}

/// Builds the autoencoder around the baseline's encoder and trains it to
/// map each image to its target. Returns the trained model, its record,
/// and the encoder depth in layers.
pub fn run_cae_stage(
    baseline: &ModelParams<f32>,
    train: &LabeledImageSet,
    targets: &[usize],
    stage: &StageTrain,
    seed: u64,
) -> Result<(ModelParams<f32>, RunRecord, usize)> {
    for (input, &target) in targets.iter().enumerate() {
        if target >= train.len() || train.label(input) != train.label(target) {
            return Err(Error::Prerequisite(format!(
                "conversion target {target} for image {input} breaks class preservation"
            )));
        }
    }
    let split = baseline.spec.split()?;
    let boundary = split.encoder.layers.len();
    let spec = split.autoencoder()?;
    let mut cae = ModelParams::init(spec, derive_seed(seed, "decoder-init"))?;
    cae.copy_prefix_from(baseline, boundary)?;
    let config = stage.to_train_config(derive_seed(seed, "cae-shuffle"), 0);
    let record = train_autoencoder(&mut cae, train, targets, &config)?;
    Ok((cae, record, boundary))
}

/// A classifier whose encoder came from a trained autoencoder and stays
/// frozen while the head retrains.
pub struct EncodeNetModel {
    pub params: ModelParams<f32>,
    /// Layers `0..boundary` are the frozen encoder.
    pub boundary: usize,
    /// Artifact key of the autoencoder the encoder came from.
    pub provenance: String,
}

impl EncodeNetModel {
    pub fn encoder_tensors(&self) -> std::ops::Range<usize> {
        self.params.params_in_layers(0..self.boundary)
    }
}

/// Grafts the trained autoencoder's encoder onto the baseline architecture.
/// The head starts fresh or from the baseline's trained head, per
/// `head_init`. Total parameter count must equal the baseline's exactly.
pub fn assemble_encodenet(
    baseline: &ModelParams<f32>,
    cae: &ModelParams<f32>,
    head_init: HeadInit,
    seed: u64,
    provenance: String,
) -> Result<EncodeNetModel> {
    let split = baseline.spec.split()?;
    let boundary = split.encoder.layers.len();
    if cae.spec.input != baseline.spec.input
        || cae.spec.layers.len() < boundary
        || cae.spec.layers[..boundary] != baseline.spec.layers[..boundary]
    {
        return Err(Error::SpecMismatch(
            "autoencoder and baseline disagree on the encoder layers".into(),
        ));
    }
    let mut params = match head_init {
        HeadInit::Scratch => {
            ModelParams::init(baseline.spec.clone(), derive_seed(seed, "head-init"))?
        }
        HeadInit::FromBaseline => baseline.clone(),
    };
    params.copy_prefix_from(cae, boundary)?;
    if params.parameter_count() != baseline.parameter_count() {
        return Err(Error::SpecMismatch(format!(
            "assembled model has {} parameters, baseline has {}",
            params.parameter_count(),
            baseline.parameter_count()
        )));
    }
    Ok(EncodeNetModel {
        params,
        boundary,
        provenance,
    })
}

/// Trains only the head, then proves the encoder never moved: every frozen
/// tensor and running buffer must be bit-identical to its pre-training
/// state.
pub fn run_head_stage(
    model: &mut EncodeNetModel,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    stage: &StageTrain,
    seed: u64,
) -> Result<RunRecord> {
    let frozen = model.encoder_tensors();
    let before: Vec<_> = frozen.clone().map(|i| model.params.tensors[i].clone()).collect();
    let bn_range = model.params.bn_in_layers(0..model.boundary);
    let bn_before: Vec<_> = bn_range
        .clone()
        .map(|i| (model.params.bn_mean[i].clone(), model.params.bn_var[i].clone()))
        .collect();

    let mut config = stage.to_train_config(derive_seed(seed, "head-shuffle"), model.boundary);
    config.frozen_prefix = model.boundary;
    let record = train_classifier(&mut model.params, train, Some(test), &config)?;

    for (tensor, snapshot) in frozen.clone().map(|i| &model.params.tensors[i]).zip(&before) {
        if !tensor.bit_eq(snapshot) {
            return Err(Error::State(
                "frozen encoder parameters drifted during head training".into(),
            ));
        }
    }
    for (i, (mean, var)) in bn_range.zip(&bn_before) {
        let same = model.params.bn_mean[i]
            .iter()
            .zip(mean)
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && model.params.bn_var[i]
                .iter()
                .zip(var)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::State(
                "frozen encoder statistics drifted during head training".into(),
            ));
        }
    }
    Ok(record)
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("accuracies are finite"));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub accuracies: Vec<SeedAccuracy>,
    pub median: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationFailure {
    pub label: String,
    pub seed: u64,
    pub error: String,
}

/// Median accuracy per target mode plus the baseline, over the config's
/// seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    /// baseline, same_image, representative_unclustered,
    /// representative_clustered, in that order.
    pub rows: Vec<AblationRow>,
    /// Whether the medians satisfy same_image < baseline <
    /// representative_unclustered < representative_clustered.
    pub expected_order_held: bool,
    pub failures: Vec<AblationFailure>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("row,seed,test_accuracy\n");
        for row in &self.rows {
            for acc in &row.accuracies {
                out.push_str(&format!("{},{},{}\n", row.label, acc.seed, acc.accuracy));
            }
            if let Some(m) = row.median {
                out.push_str(&format!("{},median,{m}\n", row.label));
            }
        }
        out
    }
}

/// Orchestrates stages over one run directory, caching by content key.
pub struct Pipeline {
    config: PipelineConfig,
    model_text: String,
    spec: ModelSpec,
    train: LabeledImageSet,
    test: LabeledImageSet,
    store: ArtifactStore,
    pub force: bool,
}

impl Pipeline {
    /// Loads the dataset and opens (or creates) the run directory. File
    /// paths in the dataset config resolve against `data_root`.
    pub fn new(
        config: PipelineConfig,
        model_text: &str,
        data_root: &Path,
        run_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec::parse(model_text)?;
        spec.split()?;
        let (train, test) = config.dataset.load(data_root)?;
        let store = ArtifactStore::open(run_dir)?;
        std::fs::write(
            store.abs("config.json"),
            serde_json::to_string_pretty(&config)?,
        )?;
        std::fs::write(store.abs("model.txt"), spec.to_text())?;
        Ok(Self {
            config,
            model_text: spec.to_text(),
            spec,
            train,
            test,
            store,
            force: false,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn train_set(&self) -> &LabeledImageSet {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledImageSet {
        &self.test
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    fn dataset_key(&self) -> String {
        content_key(&["dataset", &stage_json(&self.config.dataset)])
    }

    pub fn baseline_key(&self, seed: u64) -> String {
        content_key(&[
            "baseline",
            &self.model_text,
            &self.dataset_key(),
            &stage_json(&self.config.baseline_train),
            &seed.to_string(),
        ])
    }

    pub fn clusters_key(&self, seed: u64, k_mode: &KMode) -> String {
        content_key(&["clusters", &self.baseline_key(seed), &stage_json(k_mode)])
    }

    pub fn rank_key(&self, seed: u64, k_mode: &KMode) -> String {
        content_key(&["rank", &self.clusters_key(seed, k_mode)])
    }

    /// Key of whatever produced this mode's conversion pairs.
    pub fn pairs_key(&self, seed: u64, mode: TargetMode) -> String {
        match self.config.effective_k_mode(mode) {
            None => content_key(&["pairs", &self.dataset_key(), mode.label()]),
            Some(k_mode) => self.rank_key(seed, &k_mode),
        }
    }

    pub fn cae_key(&self, seed: u64, mode: TargetMode) -> String {
        content_key(&[
            "cae",
            &self.baseline_key(seed),
            &self.pairs_key(seed, mode),
            &stage_json(&self.config.cae_train),
            &seed.to_string(),
        ])
    }

    pub fn assembled_key(&self, seed: u64, mode: TargetMode) -> String {
        content_key(&[
            "assembled",
            &self.cae_key(seed, mode),
            &stage_json(&self.config.head_init),
            &seed.to_string(),
        ])
    }

    pub fn head_key(&self, seed: u64, mode: TargetMode) -> String {
        content_key(&[
            "head",
            &self.cae_key(seed, mode),
            &stage_json(&self.config.head_train),
            &stage_json(&self.config.head_init),
            &seed.to_string(),
        ])
    }

    /// Errors unless `key` is already recorded with intact files.
    pub fn require(&self, key: &str, what: &str) -> Result<()> {
        if self.store.lookup(key)?.is_none() {
            return Err(Error::Prerequisite(format!(
                "{what} artifact is missing from this run directory; run the upstream stage first"
            )));
        }
        Ok(())
    }

    /// File name of the clustering JSON for a mode, when the mode clusters.
    pub fn clusters_file_name(&self, seed: u64, mode: TargetMode) -> Option<String> {
        self.config
            .effective_k_mode(mode)
            .map(|k| format!("clusters-{}-s{seed}.json", k.label()))
    }

    /// File names of the (entropy CSV, representatives JSON, pairs JSON)
    /// rank artifacts for a mode, when the mode ranks.
    pub fn rank_file_names(&self, seed: u64, mode: TargetMode) -> Option<(String, String, String)> {
        self.config.effective_k_mode(mode).map(|k_mode| {
            let key = self.rank_key(seed, &k_mode);
            (
                format!("entropy-s{seed}-{}.csv", &key[..8]),
                format!("representatives-s{seed}-{}.json", &key[..8]),
                format!("pairs-s{seed}-{}.json", &key[..8]),
            )
        })
    }

    fn write_artifact(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        std::fs::write(self.store.abs(rel), bytes)?;
        Ok(rel.to_string())
    }

    /// Trained baseline for one seed, from cache when possible.
    pub fn baseline(&mut self, seed: u64) -> Result<(ModelParams<f32>, RunRecord)> {
        let key = self.baseline_key(seed);
        let ckpt = format!("baseline-s{seed}.ckpt");
        let record_file = format!("baseline-s{seed}.json");
        if !self.force {
            if let Some(_entry) = self.store.lookup(&key)? {
                let params = load_checkpoint(&self.store.abs(&ckpt))?;
                let record: RunRecord =
                    serde_json::from_str(&std::fs::read_to_string(self.store.abs(&record_file))?)?;
                return Ok((params, record));
            }
        }
        let (params, record) = run_baseline_stage(
            &self.spec,
            &self.train,
            &self.test,
            &self.config.baseline_train.clone(),
            seed,
        )?;
        save_checkpoint(&params, &self.store.abs(&ckpt))?;
        let files = vec![
            self.write_artifact(&record_file, serde_json::to_string_pretty(&record)?.as_bytes())?,
            self.write_artifact(
                &format!("baseline-s{seed}-loss.csv"),
                record.loss_curve_csv().as_bytes(),
            )?,
            ckpt,
        ];
        self.store.record(&key, "baseline", seed, &files)?;
        Ok((params, record))
    }

    /// Cluster assignments for one seed and k-mode, cached.
    pub fn clusters(
        &mut self,
        seed: u64,
        k_mode: &KMode,
        baseline: &mut ModelParams<f32>,
    ) -> Result<(ClassClusters, String)> {
        let key = self.clusters_key(seed, k_mode);
        let label = k_mode.label();
        let json_file = format!("clusters-{label}-s{seed}.json");
        if !self.force {
            if let Some(_entry) = self.store.lookup(&key)? {
                let clusters: ClassClusters =
                    serde_json::from_str(&std::fs::read_to_string(self.store.abs(&json_file))?)?;
                return Ok((clusters, key));
            }
        }
        let clusters =
            cluster_all_classes(baseline, &self.train, k_mode, derive_seed(seed, "clusters"))?;
        let mut files = vec![
            self.write_artifact(&json_file, serde_json::to_string_pretty(&clusters)?.as_bytes())?,
            self.write_artifact(
                &format!("clusters-{label}-s{seed}.csv"),
                clusters.assignments_csv(&self.train).as_bytes(),
            )?,
        ];
        if matches!(k_mode, KMode::Elbow { .. }) {
            files.push(self.write_artifact(
                &format!("clusters-{label}-s{seed}-elbow.csv"),
                clusters.elbow_csv().as_bytes(),
            )?);
        }
        self.store.record(&key, "clusters", seed, &files)?;
        Ok((clusters, key))
    }

    /// Entropy ranking and conversion pairs for one clustering, cached.
    pub fn rank(
        &mut self,
        seed: u64,
        clusters_key: &str,
        clusters: &ClassClusters,
        baseline: &mut ModelParams<f32>,
    ) -> Result<(Vec<(usize, usize)>, String)> {
        let key = content_key(&["rank", clusters_key]);
        let pairs_file = format!("pairs-s{seed}-{}.json", &key[..8]);
        if !self.force {
            if let Some(_entry) = self.store.lookup(&key)? {
                let pairs: Vec<(usize, usize)> =
                    serde_json::from_str(&std::fs::read_to_string(self.store.abs(&pairs_file))?)?;
                return Ok((pairs, key));
            }
        }
        let records = score_dataset(baseline, &self.train, clusters)?;
        let representatives = select_cell_representatives(&records);
        let pairs = build_conversion_pairs(&records, &representatives)?;
        validate_conversion_pairs(&self.train, &pairs)?;
        let files = vec![
            self.write_artifact(
                &format!("entropy-s{seed}-{}.csv", &key[..8]),
                entropy_csv(&records).as_bytes(),
            )?,
            self.write_artifact(
                &format!("representatives-s{seed}-{}.json", &key[..8]),
                serde_json::to_string_pretty(&representatives)?.as_bytes(),
            )?,
            self.write_artifact(&pairs_file, serde_json::to_string(&pairs)?.as_bytes())?,
        ];
        self.store.record(&key, "rank", seed, &files)?;
        Ok((pairs, key))
    }

    /// Conversion targets (one per training image) for a target mode.
    pub fn conversion_targets(
        &mut self,
        seed: u64,
        mode: TargetMode,
        baseline: &mut ModelParams<f32>,
    ) -> Result<(Vec<usize>, String)> {
        match self.config.effective_k_mode(mode) {
            None => Ok((
                (0..self.train.len()).collect(),
                self.pairs_key(seed, mode),
            )),
            Some(k_mode) => {
                let (clusters, clusters_key) = self.clusters(seed, &k_mode, baseline)?;
                let (pairs, rank_key) = self.rank(seed, &clusters_key, &clusters, baseline)?;
                let mut targets = vec![0usize; self.train.len()];
                for (input, target) in pairs {
                    targets[input] = target;
                }
                Ok((targets, rank_key))
            }
        }
    }

    /// Trained autoencoder for one seed and target mode, cached.
    pub fn cae(
        &mut self,
        seed: u64,
        mode: TargetMode,
    ) -> Result<(ModelParams<f32>, RunRecord, usize, String)> {
        let key = self.cae_key(seed, mode);
        let label = mode.label();
        let ckpt = format!("cae-{label}-s{seed}.ckpt");
        let record_file = format!("cae-{label}-s{seed}.json");
        let boundary = self.spec.split()?.encoder.layers.len();
        if !self.force {
            if let Some(_entry) = self.store.lookup(&key)? {
                let params = load_checkpoint(&self.store.abs(&ckpt))?;
                let record: RunRecord =
                    serde_json::from_str(&std::fs::read_to_string(self.store.abs(&record_file))?)?;
                return Ok((params, record, boundary, key));
            }
        }
        let (mut baseline, _) = self.baseline(seed)?;
        let (targets, _) = self.conversion_targets(seed, mode, &mut baseline)?;
        let (params, record, boundary) = run_cae_stage(
            &baseline,
            &self.train,
            &targets,
            &self.config.cae_train.clone(),
            seed,
        )?;
        save_checkpoint(&params, &self.store.abs(&ckpt))?;
        let files = vec![
            self.write_artifact(&record_file, serde_json::to_string_pretty(&record)?.as_bytes())?,
            self.write_artifact(
                &format!("cae-{label}-s{seed}-loss.csv"),
                record.loss_curve_csv().as_bytes(),
            )?,
            ckpt,
        ];
        self.store.record(&key, "cae", seed, &files)?;
        Ok((params, record, boundary, key))
    }

    /// Assembles the frozen-encoder model without training its head and
    /// saves the checkpoint as its own artifact.
    pub fn assemble(&mut self, seed: u64, mode: TargetMode) -> Result<EncodeNetModel> {
        let key = self.assembled_key(seed, mode);
        let label = mode.label();
        let ckpt = format!("assembled-{label}-s{seed}.ckpt");
        let boundary = self.spec.split()?.encoder.layers.len();
        if !self.force {
            if let Some(_entry) = self.store.lookup(&key)? {
                let params = load_checkpoint(&self.store.abs(&ckpt))?;
                return Ok(EncodeNetModel {
                    params,
                    boundary,
                    provenance: self.cae_key(seed, mode),
                });
            }
        }
        let (baseline, _) = self.baseline(seed)?;
        let (cae, _, _, cae_key) = self.cae(seed, mode)?;
        let model = assemble_encodenet(&baseline, &cae, self.config.head_init, seed, cae_key)?;
        save_checkpoint(&model.params, &self.store.abs(&ckpt))?;
        self.store.record(&key, "assembled", seed, &[ckpt])?;
        Ok(model)
    }

    /// Full chain for one seed and mode: frozen-encoder model plus its
    /// head-training record.
    pub fn encodenet(&mut self, seed: u64, mode: TargetMode) -> Result<(EncodeNetModel, RunRecord)> {
        let key = self.head_key(seed, mode);
        let cae_key = self.cae_key(seed, mode);
        let boundary = self.spec.split()?.encoder.layers.len();
        let label = mode.label();
        let ckpt = format!("encodenet-{label}-s{seed}.ckpt");
        let record_file = format!("head-{label}-s{seed}.json");
        if !self.force {
            if let Some(_entry) = self.store.lookup(&key)? {
                let params = load_checkpoint(&self.store.abs(&ckpt))?;
                let record: RunRecord =
                    serde_json::from_str(&std::fs::read_to_string(self.store.abs(&record_file))?)?;
                let model = EncodeNetModel {
                    params,
                    boundary,
                    provenance: cae_key,
                };
                return Ok((model, record));
            }
        }
        let (baseline, _) = self.baseline(seed)?;
        let (cae, _, _, _) = self.cae(seed, mode)?;
        let mut model =
            assemble_encodenet(&baseline, &cae, self.config.head_init, seed, cae_key)?;
        let record = run_head_stage(
            &mut model,
            &self.train,
            &self.test,
            &self.config.head_train.clone(),
            seed,
        )?;
        save_checkpoint(&model.params, &self.store.abs(&ckpt))?;
        let files = vec![
            self.write_artifact(&record_file, serde_json::to_string_pretty(&record)?.as_bytes())?,
            self.write_artifact(
                &format!("head-{label}-s{seed}-loss.csv"),
                record.loss_curve_csv().as_bytes(),
            )?,
            ckpt,
        ];
        self.store.record(&key, "encodenet", seed, &files)?;
        Ok((model, record))
    }

    /// Runs every row of the ablation grid over the config's seeds and
    /// writes `ablation.json` and `ablation.csv` into the run directory.
    /// A failed stage records a failure entry and skips that seed's cell.
    pub fn run_ablation(&mut self) -> Result<AblationTable> {
        let seeds = self.config.seeds.clone();
        let mut failures = Vec::new();

        let mut baseline_row = AblationRow {
            label: "baseline".into(),
            accuracies: Vec::new(),
            median: None,
        };
        for &seed in &seeds {
            match self.baseline(seed) {
                Ok((_, record)) => {
                    let accuracy = record.test_accuracy.ok_or_else(|| {
                        Error::Evaluation("baseline record lacks a test accuracy".into())
                    })?;
                    baseline_row.accuracies.push(SeedAccuracy { seed, accuracy });
                }
                Err(e) => failures.push(AblationFailure {
                    label: "baseline".into(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }

        let modes = [
            TargetMode::SameImage,
            TargetMode::RepresentativeUnclustered,
            TargetMode::RepresentativeClustered,
        ];
        let mut mode_rows = Vec::new();
        for mode in modes {
            let mut row = AblationRow {
                label: mode.label().into(),
                accuracies: Vec::new(),
                median: None,
            };
            for &seed in &seeds {
                match self.encodenet(seed, mode) {
                    Ok((_, record)) => {
                        let accuracy = record.test_accuracy.ok_or_else(|| {
                            Error::Evaluation("head record lacks a test accuracy".into())
                        })?;
                        row.accuracies.push(SeedAccuracy { seed, accuracy });
                    }
                    Err(e) => failures.push(AblationFailure {
                        label: mode.label().into(),
                        seed,
                        error: e.to_string(),
                    }),
                }
            }
            mode_rows.push(row);
        }

        let mut rows = Vec::with_capacity(4);
        rows.push(baseline_row);
        rows.extend(mode_rows);
        for row in &mut rows {
            let values: Vec<f64> = row.accuracies.iter().map(|a| a.accuracy).collect();
            row.median = median(&values);
        }

        let medians: Vec<Option<f64>> = rows.iter().map(|r| r.median).collect();
        let expected_order_held = match (medians[0], medians[1], medians[2], medians[3]) {
            (Some(base), Some(same), Some(unclustered), Some(clustered)) => {
                same < base && base < unclustered && unclustered < clustered
            }
            _ => false,
        };

        let table = AblationTable {
            rows,
            expected_order_held,
            failures,
        };
        std::fs::write(
            self.store.abs("ablation.json"),
            serde_json::to_string_pretty(&table)?,
        )?;
        std::fs::write(self.store.abs("ablation.csv"), table.csv())?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests;
