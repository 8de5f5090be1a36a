//! Procedurally generated image classes with controlled intraclass modes.
//!
//! Modes are smooth fields drawn from a pool, the way real garment classes
//! share silhouettes. Classes come in pairs (0-1, 2-3, ...): partners take
//! their modes from pool windows offset by one, so they share all but one
//! mode, and their class fields sit around a common base field whose pull
//! is set by `class_split`. A low split reproduces the shirt/pullover
//! situation: most classes are easy to tell apart, pair partners are
//! genuinely confusable in their shared modes and separable in the mode
//! each keeps to itself. Samples are cyclic shifts of the prototype plus
//! pixel noise, so examples of one mode stay much closer to each other
//! than to the other modes of the same class, while class membership is
//! the subtler signal. That structure is what intraclass clustering is
//! supposed to find.

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_f64, seed_rng, uniform_range, uniform_usize, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub modes_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Std dev of the additive pixel noise.
    pub noise: f64,
    /// Largest cyclic shift applied on each axis, in pixels.
    pub max_shift: usize,
    /// Blend weight of the mode field against the class field.
    pub mode_strength: f64,
    /// How far a class's field strays from its pair's common field, in
    /// [0, 1]. Classes come in pairs (0-1, 2-3, ...) sharing a base field;
    /// at 1.0 every class field is fully its own and no pairing exists.
    #[serde(default = "default_class_split")]
    pub class_split: f64,
}

fn default_class_split() -> f64 {
    1.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            modes_per_class: 3,
            train_per_class: 120,
            test_per_class: 30,
            height: 16,
            width: 16,
            noise: 0.06,
            max_shift: 2,
            mode_strength: 0.45,
            class_split: 1.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.modes_per_class == 0 {
            return Err(Error::Dataset("need at least one class and one mode".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Dataset("per-class example counts must be positive".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Dataset("images must be at least 4x4".into()));
        }
        if self.train_per_class % self.modes_per_class != 0 {
            return Err(Error::Dataset(
                "train_per_class must divide evenly across modes".into(),
            ));
        }
        if self.test_per_class % self.modes_per_class != 0 {
            return Err(Error::Dataset(
                "test_per_class must divide evenly across modes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mode_strength) {
            return Err(Error::Dataset("mode_strength must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.class_split) {
            return Err(Error::Dataset("class_split must lie in [0, 1]".into()));
        }
        if self.noise < 0.0 || self.max_shift >= self.height.min(self.width) {
            return Err(Error::Dataset("noise or shift out of range".into()));
        }
        Ok(())
    }
}

/// A smooth periodic field in `[0, 1]`: a few low-frequency sinusoids,
/// min-max normalized.
fn smooth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed_rng(seed);
    let mut field = vec![0.0f64; h * w];
    let waves = 4;
    for _ in 0..waves {
        let fy = uniform_usize(&mut rng, 3) as f64; // 0, 1, or 2 cycles
        let fx = (uniform_usize(&mut rng, 2) + if fy == 0.0 { 1 } else { 0 }) as f64;
        let amp = uniform_range(&mut rng, 0.5, 1.0);
        let phase = uniform_range(&mut rng, 0.0, std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                    + phase;
                field[y * w + x] += amp * arg.sin();
            }
        }
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-9 {
        return vec![0.5; h * w];
    }
    for v in &mut field {
        *v = (*v - min) / (max - min);
    }
    field
}

fn prototype(config: &SyntheticConfig, seed: u64, class: usize, mode: usize) -> Vec<f64> {
    let (h, w) = (config.height, config.width);
    let own_field = smooth_field(h, w, derive_seed(seed, &format!("class{class}")));
    let pair_field = smooth_field(h, w, derive_seed(seed, &format!("pair{}", class / 2)));
    // pair partners read the pool through windows offset by one
    let pool = (config.modes_per_class + 1) * (class / 2) + class % 2 + mode;
    let mode_field = smooth_field(h, w, derive_seed(seed, &format!("mode{pool}")));
    let s = config.mode_strength;
    let d = config.class_split;
    own_field
        .iter()
        .zip(&pair_field)
        .zip(&mode_field)
        .map(|((&c, &p), &m)| {
            let class_part = (1.0 - d) * p + d * c;
            let mix = (1.0 - s) * class_part + s * m;
            // keep headroom for noise on both sides
            0.15 + 0.7 * mix
        })
        .collect()
}

fn sample(
    proto: &[f64],
    h: usize,
    w: usize,
    max_shift: usize,
    noise: f64,
    rng: &mut Rng,
) -> Vec<f32> {
    let span = 2 * max_shift + 1;
    let dy = uniform_usize(rng, span);
    let dx = uniform_usize(rng, span);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            // cyclic shift keeps the periodic fields seamless
            let sy = (y + dy) % h;
            let sx = (x + dx) % w;
            let v = proto[sy * w + sx] + noise * normal_f64(rng);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn build_split(
    config: &SyntheticConfig,
    seed: u64,
    per_class: usize,
    tag: &str,
) -> Result<LabeledImageSet> {
    let (h, w) = (config.height, config.width);
    let per_mode = per_class / config.modes_per_class;
    let n = config.classes * per_class;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..config.classes {
        for mode in 0..config.modes_per_class {
            let proto = prototype(config, seed, class, mode);
            let mut rng = seed_rng(derive_seed(
                seed,
                &format!("{tag}.class{class}.mode{mode}"),
            ));
            for _ in 0..per_mode {
                data.extend(sample(&proto, h, w, config.max_shift, config.noise, &mut rng));
                labels.push(class);
            }
        }
    }
    LabeledImageSet::new(Tensor::new(vec![n, 1, h, w], data)?, labels, config.classes)
}

/// Generates a train/test pair. Prototypes are shared between the splits;
/// the sampled shifts and noise are not.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    config.validate()?;
    let train = build_split(config, seed, config.train_per_class, "train")?;
    let test = build_split(config, seed, config.test_per_class, "test")?;
    Ok((train, test))
}
