//! Synthetic scale-discriminative datasets.
//!
//! Every class draws local descriptors from the same `G` content patterns
//! (`G` = number of scale partitions), in the same overall proportions.
//! What differs between classes is *where* each pattern appears: class `c`
//! assigns patterns to scale partitions by the `c`-th permutation of
//! `0..G`. Pooling over all scales therefore sees identical content for
//! every class, while partition-wise pooling separates them.
//!
//! - [`ScaleSignal::Absolute`]: partitions are taken on the grid factor
//!   itself; every scale carries the same number of descriptors.
//! - [`ScaleSignal::Relative`]: partitions are taken on the box-relative
//!   scale `(B_w + B_h) / (w̄ + h̄) · s`; descriptor counts are balanced so
//!   each partition holds the same total regardless of box size.
//! - [`ScaleSignal::Off`]: every descriptor picks a pattern uniformly at
//!   random, so classes are indistinguishable.
//!
//! With more than `G!` classes, permutations repeat and the extra classes
//! cannot be separated.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::fs;
use std::path::Path;

use super::{DescriptorBlock, DescriptorDir, InstanceDescriptors, MemoryStore, ScaleGrid};
use crate::dataset::{compute_mean_box, save_manifest, BoundingBox, DatasetManifest, ImageInfo, Instance, MeanBox};
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::scale_coding::{group_index, relative_scale, validate_thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleSignal {
    Off,
    Absolute,
    Relative,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// Instances per class; the first two thirds go to train.
    pub n_per_class: usize,
    pub seed: u64,
    pub signal: ScaleSignal,
    pub dim: usize,
    pub descriptors_per_scale: usize,
    pub grid: ScaleGrid,
    /// Partition cutoffs the signal is planted along.
    pub thresholds: Vec<f64>,
    /// Std-dev of the pattern sub-cluster centers.
    pub pattern_spread: f64,
    /// Std-dev of descriptor noise around a sub-cluster center.
    pub noise: f64,
    /// Range of the box size multiplier, sampled log-uniformly.
    pub size_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(n_classes: usize, n_per_class: usize, seed: u64, signal: ScaleSignal) -> Self {
        SynthConfig {
            n_classes,
            n_per_class,
            seed,
            signal,
            dim: super::toy::TOY_DIM,
            descriptors_per_scale: 6,
            grid: ScaleGrid::default(),
            thresholds: vec![1.1, 1.8],
            pattern_spread: 1.5,
            noise: 1.0,
            size_range: (0.8, 1.25),
        }
    }

    pub fn train_per_class(&self) -> usize {
        self.n_per_class - self.n_per_class / 3
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Train instances first, then test, in manifest order.
    pub descriptors: Vec<InstanceDescriptors>,
}

impl SynthDataset {
    pub fn store(&self) -> MemoryStore {
        self.descriptors.iter().cloned().collect()
    }

    /// Writes the manifest as JSON and one `.scdf` file per instance.
    pub fn write(&self, manifest_path: impl AsRef<Path>, descriptor_dir: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        if let Some(parent) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_manifest(&self.manifest, manifest_path)?;
        let dir = DescriptorDir::new(descriptor_dir.as_ref());
        for desc in &self.descriptors {
            dir.store(desc)?;
        }
        Ok(())
    }
}

const IMAGE_W: f64 = 640.0;
const IMAGE_H: f64 = 480.0;
const SUBCLUSTERS: usize = 2;

/// `index`-th permutation of `0..n` in lexicographic order (wrapping).
fn nth_permutation(n: usize, index: usize) -> Vec<usize> {
    let factorial: usize = (1..=n).product();
    let mut index = index % factorial;
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for k in (1..=n).rev() {
        let f: usize = (1..k).product();
        out.push(pool.remove(index / f));
        index %= f;
    }
    out
}

struct Patterns {
    /// `[pattern][subcluster]` → center.
    centers: Vec<Vec<Vec<f64>>>,
    noise: Normal<f64>,
}

impl Patterns {
    fn draw(&self, pattern: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
        let center = &self.centers[pattern][rng.random_range(0..SUBCLUSTERS)];
        out.extend(center.iter().map(|c| (c + self.noise.sample(rng)) as f32));
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least two classes".into()));
    }
    if cfg.n_per_class < 3 {
        return Err(Error::Config("synthetic dataset needs at least three instances per class".into()));
    }
    if cfg.dim == 0 || cfg.descriptors_per_scale == 0 {
        return Err(Error::Config("descriptor dimension and count must be positive".into()));
    }
    if !(cfg.pattern_spread.is_finite() && cfg.pattern_spread >= 0.0 && cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(Error::Config("pattern spread and noise must be finite and non-negative".into()));
    }
    validate_thresholds(&cfg.thresholds)?;
    let groups = cfg.thresholds.len() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spread = Normal::new(0.0, cfg.pattern_spread).expect("finite spread");
    let patterns = Patterns {
        centers: (0..groups)
            .map(|_| {
                (0..SUBCLUSTERS)
                    .map(|_| (0..cfg.dim).map(|_| spread.sample(&mut rng)).collect())
                    .collect()
            })
            .collect(),
        noise: Normal::new(0.0, cfg.noise).expect("finite noise"),
    };

    let n_train = cfg.train_per_class();
    let mut images = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let (lo, hi) = (cfg.size_range.0.ln(), cfg.size_range.1.ln());
    for class in 0..cfg.n_classes {
        for i in 0..cfg.n_per_class {
            let is_train = i < n_train;
            let instance_id = format!("{}_c{class}_{i:04}", if is_train { "train" } else { "test" });
            let image_id = format!("img_{instance_id}");
            let size = rng.random_range(lo..=hi).exp();
            let aspect = rng.random_range(0.9..=1.1);
            let (w, h) = (100.0 * size * aspect, 200.0 * size / aspect);
            let x = rng.random_range(0.0..=IMAGE_W - w);
            let y = rng.random_range(0.0..=IMAGE_H - h);
            images.push(ImageInfo {
                id: image_id.clone(),
                width: IMAGE_W,
                height: IMAGE_H,
            });
            let inst = Instance {
                instance_id,
                image_id,
                image_w: IMAGE_W,
                image_h: IMAGE_H,
                bbox: BoundingBox::new(x, y, w, h),
                labels: vec![class],
            };
            if is_train {
                train.push(inst);
            } else {
                test.push(inst);
            }
        }
    }
    let categories = (0..cfg.n_classes).map(|c| format!("class{c}")).collect();
    let mean_box = compute_mean_box(&train)?;
    let manifest = DatasetManifest::new(categories, images, train, test)?;

    let all: Vec<&Instance> = manifest.instances().collect();
    let descriptors = parallel::map_range(Parallelism::Parallel, all.len(), |idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64 + 1);
        instance_descriptors(cfg, &patterns, all[idx], mean_box, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { manifest, descriptors })
}

fn instance_descriptors(
    cfg: &SynthConfig,
    patterns: &Patterns,
    inst: &Instance,
    mean_box: MeanBox,
    rng: &mut ChaCha8Rng,
) -> Result<InstanceDescriptors> {
    let groups = cfg.thresholds.len() + 1;
    let factors = cfg.grid.factors();
    let class_perm = nth_permutation(groups, inst.labels[0]);
    let scale_group: Vec<usize> = factors
        .iter()
        .map(|&s| match cfg.signal {
            ScaleSignal::Relative => group_index(relative_scale(s, &inst.bbox, mean_box), &cfg.thresholds),
            _ => group_index(s, &cfg.thresholds),
        })
        .collect();

    let counts: Vec<usize> = match cfg.signal {
        ScaleSignal::Relative => {
            // Each partition gets the same total, spread over its scales.
            let per_group = cfg.descriptors_per_scale * factors.len() / groups;
            let mut seen = vec![0usize; groups];
            let sizes: Vec<usize> = (0..groups)
                .map(|g| scale_group.iter().filter(|&&t| t == g).count())
                .collect();
            scale_group
                .iter()
                .map(|&g| {
                    let k = seen[g];
                    seen[g] += 1;
                    per_group / sizes[g] + usize::from(k < per_group % sizes[g])
                })
                .collect()
        }
        _ => vec![cfg.descriptors_per_scale; factors.len()],
    };

    let mut order: Vec<usize> = (0..groups).collect();
    let blocks = factors
        .iter()
        .zip(&scale_group)
        .zip(&counts)
        .map(|((&f, &g), &n)| {
            let mut block = DescriptorBlock::empty(f as f32);
            for k in 0..n {
                let pattern = match cfg.signal {
                    ScaleSignal::Off => {
                        order.shuffle(rng);
                        order[0]
                    }
                    _ => class_perm[g],
                };
                let side = (n as f64).sqrt().ceil() as usize;
                let px = inst.bbox.w * ((k % side) as f64 + 0.5) / side as f64;
                let py = inst.bbox.h * ((k / side) as f64 + 0.5) / side as f64;
                block.positions.push([px as f32, py as f32]);
                patterns.draw(pattern, rng, &mut block.descriptors);
            }
            block
        })
        .collect();
    InstanceDescriptors::new(inst.instance_id.clone(), cfg.dim, blocks)
}
