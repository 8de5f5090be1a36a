//! Scratch harness for sizing the desk-scale experiment. Not shipped.

use encodenet_core::data::SyntheticConfig;
use encodenet_core::optim::OptimizerConfig;
use encodenet_core::pipeline::{
    DatasetConfig, KMode, Pipeline, PipelineConfig, StageTrain, TargetMode,
};

const MODEL: &str = "\
input 1 16 16
conv 24 3 1 same
batchnorm
relu
conv 24 3 2 same
batchnorm
relu
conv 48 3 1 same
batchnorm
relu
conv 48 3 2 same
batchnorm
relu
conv 96 3 1 same
batchnorm
relu
conv 96 3 2 same
batchnorm
relu
flatten
dense 6
softmax
";

const MODEL_SHALLOW: &str = "\
input 1 16 16
conv 32 3 1 same
batchnorm
relu
conv 32 3 1 same
batchnorm
relu
conv 48 3 2 same
batchnorm
relu
conv 48 3 1 same
batchnorm
relu
conv 64 3 1 same
batchnorm
relu
conv 64 3 1 same
batchnorm
relu
flatten
dense 6
softmax
";

#[derive(Clone)]
struct Knobs {
    noise: f64,
    strength: f64,
    baseline_epochs: usize,
    cae_epochs: usize,
    head_epochs: usize,
    max_shift: usize,
    cae_lr: f64,
    model: usize,
    modes: usize,
    split: f64,
}

impl Knobs {
    fn model_text(&self) -> &'static str {
        if self.model == 2 {
            MODEL_SHALLOW
        } else {
            MODEL
        }
    }
}

const TRAIN_PER_CLASS: usize = 120;

fn config(k: &Knobs) -> PipelineConfig {
    let mut synth = SyntheticConfig::default();
    synth.classes = 6;
    synth.modes_per_class = k.modes;
    synth.train_per_class = TRAIN_PER_CLASS;
    synth.test_per_class = 48;
    synth.height = 16;
    synth.width = 16;
    synth.noise = k.noise;
    synth.max_shift = k.max_shift;
    synth.mode_strength = k.strength;
    synth.class_split = k.split;
    PipelineConfig {
        version: 1,
        model: "model.txt".into(),
        dataset: DatasetConfig::Synthetic {
            seed: 11,
            config: synth,
        },
        cluster: KMode::Fixed { k: 3 },
        target_mode: TargetMode::RepresentativeClustered,
        head_init: Default::default(),
        baseline_train: StageTrain::new(k.baseline_epochs, 32, OptimizerConfig::adam(3e-3, 1e-4)),
        cae_train: StageTrain::new(k.cae_epochs, 32, OptimizerConfig::adam(k.cae_lr, 0.0)),
        head_train: StageTrain::new(k.head_epochs, 64, OptimizerConfig::adam(5e-3, 1e-4)),
        seeds: vec![1, 2, 3],
    }
}

fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Fraction of images whose cluster's majority true mode matches their own.
fn purity(assignments: &[usize], modes: usize) -> f64 {
    let per_mode = TRAIN_PER_CLASS / modes;
    let classes = assignments.len() / TRAIN_PER_CLASS;
    let clusters = assignments.iter().max().map_or(1, |m| m + 1);
    let mut agree = 0usize;
    for class in 0..classes {
        // counts[cluster][true mode]
        let mut counts = vec![vec![0usize; modes]; clusters];
        for j in 0..TRAIN_PER_CLASS {
            let i = class * TRAIN_PER_CLASS + j;
            counts[assignments[i]][j / per_mode] += 1;
        }
        for row in counts {
            agree += row.iter().max().copied().unwrap_or(0);
        }
    }
    agree as f64 / assignments.len() as f64
}

fn describe(k: &Knobs) -> String {
    format!(
        "noise={} strength={} shift={} base={}ep cae={}ep@lr{} model={} modes={} split={}",
        k.noise, k.strength, k.max_shift, k.baseline_epochs, k.cae_epochs, k.cae_lr, k.model,
        k.modes, k.split
    )
}

fn phase_a(k: &Knobs) -> encodenet_core::Result<()> {
    let dir = std::env::temp_dir().join(format!("desk-a-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    let mut p = Pipeline::new(config(k), k.model_text(), &dir, dir.clone())?;
    println!("== {}", describe(k));
    let mut drops = Vec::new();
    for seed in [1u64, 2, 3] {
        let (mut baseline, base) = p.baseline(seed)?;
        let (clusters, _) = p.clusters(seed, &KMode::Fixed { k: 3 }, &mut baseline)?;
        let (_, rec1, _, _) = p.cae(seed, TargetMode::RepresentativeUnclustered)?;
        let (_, rec3, _, _) = p.cae(seed, TargetMode::RepresentativeClustered)?;
        let (h1, h3) = (rec1.holdout_loss.unwrap(), rec3.holdout_loss.unwrap());
        let drop = 100.0 * (h1 - h3) / h1;
        drops.push(drop);
        println!(
            "  seed {seed}: acc {:.4}  purity {:.3}  k1 {h1:.5}  k3 {h3:.5}  drop {drop:+.1}%",
            base.test_accuracy.unwrap_or(0.0),
            purity(&clusters.assignments, k.modes),
        );
        let traj = |rec: &encodenet_core::train::RunRecord| {
            rec.epochs
                .iter()
                .filter(|s| [0, 1, 2, 4, 7, 11, 17, 24, 34, 44, 59].contains(&s.epoch))
                .map(|s| format!("{}:{:.4}", s.epoch, s.holdout_loss.unwrap_or(f64::NAN)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("    k1 {}", traj(&rec1));
        println!("    k3 {}", traj(&rec3));
    }
    println!("  median drop {:+.1}%", median(&mut drops));
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn phase_b(k: &Knobs) -> encodenet_core::Result<()> {
    let dir = std::env::temp_dir().join(format!("desk-b-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    let mut p = Pipeline::new(config(k), k.model_text(), &dir, dir.clone())?;
    println!("== FULL {} head={}ep", describe(k), k.head_epochs);
    let t0 = std::time::Instant::now();
    let table = p.run_ablation()?;
    println!("  ablation in {:.1}s", t0.elapsed().as_secs_f64());
    for row in &table.rows {
        let accs: Vec<String> = row
            .accuracies
            .iter()
            .map(|a| format!("s{}={:.4}", a.seed, a.accuracy))
            .collect();
        println!(
            "  {:<28} {}  median={:.4}",
            row.label,
            accs.join(" "),
            row.median.unwrap_or(f64::NAN)
        );
    }
    println!("  order held: {}", table.expected_order_held);
    let mut drops = Vec::new();
    for seed in [1u64, 2, 3] {
        let (_, rec1, _, _) = p.cae(seed, TargetMode::RepresentativeUnclustered)?;
        let (_, rec3, _, _) = p.cae(seed, TargetMode::RepresentativeClustered)?;
        let (h1, h3) = (rec1.holdout_loss.unwrap(), rec3.holdout_loss.unwrap());
        drops.push(100.0 * (h1 - h3) / h1);
    }
    println!("  median recon drop {:+.1}%", median(&mut drops));
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn main() -> encodenet_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let phase = args.get(1).cloned().unwrap_or_else(|| "a".into());
    let get = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let k = Knobs {
        noise: get(2, 0.15),
        strength: get(3, 0.8),
        baseline_epochs: get(4, 20.0) as usize,
        cae_epochs: get(5, 4.0) as usize,
        max_shift: get(6, 0.0) as usize,
        cae_lr: get(7, 3e-3),
        head_epochs: get(8, 30.0) as usize,
        model: get(9, 1.0) as usize,
        modes: get(10, 3.0) as usize,
        split: get(11, 1.0),
    };
    match phase.as_str() {
        "a" => phase_a(&k),
        _ => phase_b(&k),
    }
}
