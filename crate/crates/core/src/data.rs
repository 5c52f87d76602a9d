//! Datasets, stratified labeled/unlabeled splits, the synthetic shapes
//! generator and labeled:unlabeled batch composition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::augment::{Geometry, StrongAugment, WeakAugment};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{normal, RngStreams, Stream};
use crate::tensor::Images;

/// Images with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Images,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Images, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.n != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.n,
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            c: self.images.c,
            h: self.images.h,
            w: self.images.w,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Disjoint labeled and unlabeled index sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

/// Stratified split: each class contributes `floor(n_c * fraction + 0.5)`
/// labeled samples (round half up), chosen by a seeded shuffle.
///
/// Fails when a class is absent or would receive no labeled sample.
pub fn make_split(
    dataset_size: usize,
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if labels.len() != dataset_size {
        return Err(Error::Split(format!(
            "{} labels for a dataset of {dataset_size}",
            labels.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!(
            "labeled fraction {fraction} outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Label {
                label: l,
                num_classes,
            });
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Split(format!("class {class} has no samples")));
        }
        let take = libm::floor(members.len() as f64 * fraction + 0.5) as usize;
        if take == 0 {
            return Err(Error::Split(format!(
                "class {class} gets no labeled sample ({} samples at fraction {fraction})",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..take]);
        unlabeled.extend_from_slice(&members[take..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitManifest {
        labeled,
        unlabeled,
        fraction,
        seed,
    })
}

/// Number of distinct shape templates the generator can draw.
pub const SYNTHETIC_MAX_CLASSES: usize = 10;

/// Class-structured synthetic images: each class is a shape template
/// (disk, square, ring, plus, diamond, triangle, horizontal bars, vertical
/// bars, checker, X) drawn in a random bright tint at a random position
/// and size over a random dark background, plus Gaussian pixel noise. Every template is
/// symmetric under horizontal flips.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapes {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub noise: f64,
}

impl SyntheticShapes {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let s = Self {
            image_size: cfg.model.image_size,
            channels: cfg.model.channels,
            num_classes: cfg.model.num_classes,
            noise: cfg.data.synthetic_noise,
        };
        if s.num_classes > SYNTHETIC_MAX_CLASSES {
            return Err(Error::Data(format!(
                "synthetic data supports at most {SYNTHETIC_MAX_CLASSES} classes, got {}",
                s.num_classes
            )));
        }
        Ok(s)
    }

    fn inside(class: usize, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        let r = libm::sqrt(u * u + v * v);
        let boxed = au < 1.0 && av < 1.0;
        match class {
            0 => r < 1.0,
            1 => au < 0.8 && av < 0.8,
            2 => r > 0.55 && r < 1.0,
            3 => (au < 0.3 && av < 1.0) || (av < 0.3 && au < 1.0),
            4 => au + av < 1.0,
            5 => v > -0.9 && v < 0.8 && au < (v + 0.9) * 0.6,
            6 => boxed && (libm::floor((v + 1.0) * 2.5) as i64) % 2 == 0,
            7 => boxed && (libm::floor((u + 1.0) * 2.5) as i64) % 2 == 0,
            8 => {
                boxed
                    && ((libm::floor((u + 1.0) * 2.0) + libm::floor((v + 1.0) * 2.0)) as i64) % 2
                        == 0
            }
            _ => boxed && (au - av).abs() < 0.3,
        }
    }

    /// `n` samples with balanced labels (`i % num_classes`).
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.image_size;
        let mut images = Images::zeros(0, self.channels, s, s);
        let mut labels = Vec::with_capacity(n);
        let mut img = vec![0.0; self.channels * s * s];
        for i in 0..n {
            let class = i % self.num_classes;
            // Bright shape on a dark background, random tints.
            let fg: Vec<f64> = (0..self.channels)
                .map(|_| rng.gen_range(0.6..1.0))
                .collect();
            let bg: Vec<f64> = (0..self.channels)
                .map(|_| rng.gen_range(0.0..0.4))
                .collect();
            let half = s as f64 / 2.0;
            let radius = s as f64 * rng.gen_range(0.28..0.42);
            let cx = half + rng.gen_range(-0.15..0.15) * s as f64;
            let cy = half + rng.gen_range(-0.15..0.15) * s as f64;
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 + 0.5 - cx) / radius;
                    let v = (y as f64 + 0.5 - cy) / radius;
                    let src = if Self::inside(class, u, v) { &fg } else { &bg };
                    for c in 0..self.channels {
                        let val = src[c] + self.noise * normal(&mut rng);
                        img[(c * s + y) * s + x] = val.clamp(0.0, 1.0);
                    }
                }
            }
            images.push(&img);
            labels.push(class);
        }
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// Weakly augmented images.
    pub images: Images,
    pub labels: Vec<usize>,
    /// Dataset indices of the source images.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub weak: Images,
    pub strong: Images,
    /// Dataset indices; `weak[i]` and `strong[i]` both come from
    /// `indices[i]`.
    pub indices: Vec<usize>,
}

/// Position in the labeled and unlabeled index orders.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataCursor {
    pub unlabeled_order: Vec<usize>,
    pub unlabeled_pos: usize,
    pub labeled_order: Vec<usize>,
    pub labeled_pos: usize,
}

impl DataCursor {
    /// Forces a fresh unlabeled shuffle at the next batch.
    pub fn start_epoch(&mut self) {
        self.unlabeled_order.clear();
        self.unlabeled_pos = 0;
    }
}

/// Takes `k` indices from a cycling order, reshuffling `pool` when it runs
/// out.
fn take_cycling(
    pool: &[usize],
    order: &mut Vec<usize>,
    pos: &mut usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        if *pos >= order.len() {
            order.clear();
            order.extend_from_slice(pool);
            order.shuffle(rng);
            *pos = 0;
        }
        let n = (k - out.len()).min(order.len() - *pos);
        out.extend_from_slice(&order[*pos..*pos + n]);
        *pos += n;
    }
    out
}

/// Draws labeled and unlabeled batches in a fixed composition.
///
/// Index orders come only from the data-order stream and augmentations only
/// from the augmentation stream. An epoch is one pass over the unlabeled
/// partition; the labeled partition cycles independently.
#[derive(Clone, Debug)]
pub struct DataPipeline<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a SplitManifest,
    pub weak: WeakAugment,
    pub strong: StrongAugment,
    pub labeled_per_batch: usize,
    pub unlabeled_ratio: usize,
}

impl<'a> DataPipeline<'a> {
    pub fn new(dataset: &'a Dataset, split: &'a SplitManifest, cfg: &TrainConfig) -> Result<Self> {
        if split.labeled.is_empty() {
            return Err(Error::Data("labeled partition is empty".into()));
        }
        if split.unlabeled.is_empty() {
            return Err(Error::Data("unlabeled partition is empty".into()));
        }
        if let Some(&i) = split
            .labeled
            .iter()
            .chain(&split.unlabeled)
            .find(|&&i| i >= dataset.len())
        {
            return Err(Error::Data(format!(
                "split index {i} outside dataset of {}",
                dataset.len()
            )));
        }
        Ok(Self {
            dataset,
            split,
            weak: WeakAugment::from_config(&cfg.augment),
            strong: StrongAugment::from_config(&cfg.augment),
            labeled_per_batch: cfg.trainer.labeled_per_batch,
            unlabeled_ratio: cfg.trainer.unlabeled_ratio,
        })
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.labeled_per_batch * self.unlabeled_ratio
    }

    /// Full batches per pass over the unlabeled partition (at least one).
    pub fn steps_per_epoch(&self) -> usize {
        (self.split.unlabeled.len() / self.unlabeled_per_batch()).max(1)
    }

    pub fn next_batch(
        &self,
        cursor: &mut DataCursor,
        streams: &mut RngStreams,
    ) -> Result<(LabeledBatch, UnlabeledBatch)> {
        let order_rng = streams.get(Stream::DataOrder);
        let l_idx = take_cycling(
            &self.split.labeled,
            &mut cursor.labeled_order,
            &mut cursor.labeled_pos,
            self.labeled_per_batch,
            order_rng,
        );
        let u_idx = take_cycling(
            &self.split.unlabeled,
            &mut cursor.unlabeled_order,
            &mut cursor.unlabeled_pos,
            self.unlabeled_per_batch(),
            order_rng,
        );
        let g = self.dataset.geometry();
        let src = &self.dataset.images;
        let aug_rng = streams.get(Stream::Augmentation);
        let mut images = Images::zeros(0, g.c, g.h, g.w);
        for &i in &l_idx {
            images.push(&self.weak.apply(src.image(i), g, aug_rng));
        }
        let mut weak = Images::zeros(0, g.c, g.h, g.w);
        let mut strong = Images::zeros(0, g.c, g.h, g.w);
        for &i in &u_idx {
            weak.push(&self.weak.apply(src.image(i), g, aug_rng));
            strong.push(&self.strong.apply(src.image(i), g, aug_rng));
        }
        let labels = l_idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Ok((
            LabeledBatch {
                images,
                labels,
                indices: l_idx,
            },
            UnlabeledBatch {
                weak,
                strong,
                indices: u_idx,
            },
        ))
    }
}
