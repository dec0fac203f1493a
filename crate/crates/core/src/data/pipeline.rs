//! Epoch iteration with per-sample augmentation.
//!
//! Every sample of an epoch draws from its own random stream keyed by
//! `(seed, epoch, position)`, so the batch stream does not depend on how many
//! worker threads produce it.

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{flip, gaussian_blur3, mixup, mosaic, resize_sample, scale_jitter, Axis};
use super::{clahe, image_to_tensor, Sample, Split};
use crate::error::{Error, Result};
use crate::geometry::GroundTruthObject;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Master switch for the train split.
    pub enabled: bool,
    pub mosaic: f64,
    /// Mosaic is switched off for this many final epochs.
    pub close_mosaic: usize,
    pub mixup: f64,
    pub mixup_beta: f64,
    /// Zoom factor drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
    pub fliplr: f64,
    pub flipud: f64,
    pub blur: f64,
    pub clahe: bool,
    pub clahe_clip: f64,
    pub clahe_tiles: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mosaic: 1.0,
            close_mosaic: 15,
            mixup: 0.15,
            mixup_beta: 32.0,
            scale: 0.9,
            fliplr: 0.5,
            flipud: 0.1,
            blur: 0.01,
            clahe: true,
            clahe_clip: 2.0,
            clahe_tiles: 8,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mosaic", self.mosaic),
            ("mixup", self.mixup),
            ("fliplr", self.fliplr),
            ("flipud", self.flipud),
            ("blur", self.blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("augment", format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.scale) {
            return Err(Error::config("augment", format!("scale {} must lie in [0, 1)", self.scale)));
        }
        if self.mixup_beta <= 0.0 || self.clahe_clip <= 0.0 || self.clahe_tiles == 0 {
            return Err(Error::config("augment", "mixup_beta, clahe_clip and clahe_tiles must be positive"));
        }
        Ok(())
    }
}

/// Random stream of one sample position in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `(B, 3, S, S)`, values in `[0, 1]`.
    pub images: Array4<T>,
    pub targets: Vec<Vec<GroundTruthObject>>,
    pub sources: Vec<String>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub struct Pipeline {
    samples: Vec<Sample>,
    split: Split,
    input_size: u32,
    batch_size: usize,
    aug: AugmentConfig,
    seed: u64,
    total_epochs: Option<usize>,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(
        samples: Vec<Sample>,
        split: Split,
        input_size: usize,
        batch_size: usize,
        aug: AugmentConfig,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset(format!("{} split has no images", split.name())));
        }
        if batch_size == 0 {
            return Err(Error::config("train", "batch size must be at least 1"));
        }
        aug.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::config("data", format!("cannot start {workers} workers: {e}")))?;
        Ok(Self {
            samples,
            split,
            input_size: input_size as u32,
            batch_size,
            aug,
            seed,
            total_epochs: None,
            pool,
        })
    }

    /// Length of the run, used to close mosaic for the final epochs. Without
    /// it mosaic never closes.
    pub fn with_total_epochs(mut self, epochs: usize) -> Self {
        self.total_epochs = Some(epochs);
        self
    }

    pub fn mosaic_open(&self, epoch: usize) -> bool {
        self.total_epochs.is_none_or(|t| epoch + self.aug.close_mosaic < t)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Sample order of an epoch; shuffled for the train split.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        if self.split == Split::Train {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(u64::MAX - epoch as u64);
            idx.shuffle(&mut rng);
        }
        idx
    }

    fn augment(&self, index: usize, epoch: usize, position: usize) -> Result<Sample> {
        let base = &self.samples[index];
        let size = self.input_size;
        if self.split != Split::Train || !self.aug.enabled {
            return Ok(resize_sample(base, size));
        }
        let a = &self.aug;
        let mut rng = sample_rng(self.seed, epoch, position);
        let n = self.samples.len();
        let mut s = if self.mosaic_open(epoch) && rng.random::<f64>() < a.mosaic {
            let others: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..n));
            let quad = [
                base.clone(),
                self.samples[others[0]].clone(),
                self.samples[others[1]].clone(),
                self.samples[others[2]].clone(),
            ];
            let pivot = (rng.random_range(size / 4..=3 * size / 4), rng.random_range(size / 4..=3 * size / 4));
            mosaic(&quad, size, pivot)
        } else {
            resize_sample(base, size)
        };
        if a.scale > 0.0 {
            s = scale_jitter(&s, rng.random_range(1.0 - a.scale..=1.0 + a.scale))?;
        }
        if rng.random::<f64>() < a.fliplr {
            s = flip(&s, Axis::Horizontal);
        }
        if rng.random::<f64>() < a.flipud {
            s = flip(&s, Axis::Vertical);
        }
        if rng.random::<f64>() < a.mixup {
            let other = resize_sample(&self.samples[rng.random_range(0..n)], size);
            let beta = Beta::new(a.mixup_beta, a.mixup_beta)
                .map_err(|e| Error::config("augment", format!("mixup beta: {e}")))?;
            s = mixup(&s, &other, beta.sample(&mut rng))?;
        }
        if rng.random::<f64>() < a.blur {
            s.image = gaussian_blur3(&s.image);
        }
        if a.clahe {
            s.image = clahe(&s.image, a.clahe_clip, a.clahe_tiles)?;
        }
        Ok(s)
    }

    /// Build one batch of an epoch.
    pub fn batch<T: Scalar>(&self, epoch: usize, batch_index: usize, order: &[usize]) -> Result<Batch<T>> {
        let start = batch_index * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        if start >= end {
            return Err(Error::Contract(format!("batch {batch_index} past the end of the epoch")));
        }
        let samples: Vec<Sample> = self.pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|pos| self.augment(order[pos], epoch, pos))
                .collect::<Result<Vec<_>>>()
        })?;
        let s = self.input_size as usize;
        let mut images = Array4::zeros((samples.len(), 3, s, s));
        for (i, smp) in samples.iter().enumerate() {
            images.slice_mut(s![i..i + 1, .., .., ..]).assign(&image_to_tensor::<T>(&smp.image));
        }
        Ok(Batch {
            images,
            targets: samples.iter().map(|x| x.objects.clone()).collect(),
            sources: samples.into_iter().map(|x| x.source).collect(),
        })
    }

    /// Lazily produced batches of one epoch.
    pub fn epoch<T: Scalar>(&self, epoch: usize) -> impl Iterator<Item = Result<Batch<T>>> + '_ {
        let order = self.order(epoch);
        (0..self.batches_per_epoch()).map(move |b| self.batch(epoch, b, &order))
    }
}
