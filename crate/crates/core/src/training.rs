//! Variational auto-decoder training: one Gaussian latent per image,
//! optimised jointly with the decoder.

use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::equivariance::LatentCode;
use crate::error::{Error, Result};
use crate::field::{direction_rows, FieldConfig, FieldModel};
use crate::hdr_io::{sample_training_batch_with, Augmentation, EnvironmentImage};
use crate::losses::{train_loss, LossWeights};
use crate::optim::{Adam, WarmupCosine};
use crate::rng::{seeded, substream};
use crate::tape::{Real, Tape};

/// Per-image Gaussian latents, one row per image (column-major codes).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBank {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl LatentBank {
    /// `mu ~ N(0, 1)`, `logvar ~ N(-5, 1)`.
    pub fn init<R: Rng>(rng: &mut R, images: usize, dim: usize) -> Self {
        let mu =
            Array2::from_shape_simple_fn((images, dim), || rng.sample::<f64, _>(StandardNormal));
        let logvar = Array2::from_shape_simple_fn((images, dim), || {
            rng.sample::<f64, _>(StandardNormal) - 5.0
        });
        LatentBank { mu, logvar }
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    /// Mean code of image `i`.
    pub fn code(&self, i: usize) -> Result<LatentCode> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "image {i} of a bank of {}",
                self.len()
            )));
        }
        LatentCode::from_vec(self.mu.row(i).as_slice().expect("standard layout"))
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert_array("bank.mu", &self.mu);
        ck.insert_array("bank.logvar", &self.logvar);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mu: Array2<f64> = ck.array("bank.mu")?;
        let logvar: Array2<f64> = ck.array("bank.logvar")?;
        if mu.dim() != logvar.dim() {
            return Err(Error::Checkpoint(
                "bank mean and log-variance shapes differ".into(),
            ));
        }
        Ok(LatentBank { mu, logvar })
    }
}

/// `mu + exp(logvar / 2) * eps`, returned as a `3 x N` code.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<LatentCode> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::Shape(format!(
            "reparameterize lengths {}, {}, {}",
            mu.len(),
            logvar.len(),
            eps.len()
        )));
    }
    let v: Vec<f64> = (0..mu.len())
        .map(|i| mu[i] + (0.5 * logvar[i]).exp() * eps[i])
        .collect();
    LatentCode::from_vec(&v)
}

/// Dataset expansion applied before training; every copy gets its own latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentConfig {
    /// Add a horizontally mirrored copy of every image.
    pub hflip: bool,
    /// Number of extra copies per image, each rotated about the vertical axis
    /// by a random whole number of pixel columns.
    pub az_rotations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: WarmupCosine,
    /// Samples per step `P`.
    pub batch_size: usize,
    /// Images (codes) per step `K`; clamped to the dataset size.
    pub codes_per_batch: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: WarmupCosine::default(),
            batch_size: 4096,
            codes_per_batch: 64,
            weights: LossWeights::TRAIN,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default recipe with the step count changed, keeping the warm-up
    /// below it.
    pub fn with_steps(steps: usize) -> Self {
        let mut cfg = TrainConfig::default();
        cfg.schedule.max_steps = steps;
        cfg.schedule.warmup = cfg.schedule.warmup.min(steps / 10).max(1);
        cfg
    }

    pub fn steps(&self) -> usize {
        self.schedule.max_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0
            || self.codes_per_batch == 0
            || self.codes_per_batch > self.batch_size
        {
            return Err(Error::InvalidArgument(format!(
                "need batch size >= codes per batch >= 1, got {} and {}",
                self.batch_size, self.codes_per_batch
            )));
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.set("train.steps", self.schedule.max_steps);
        ck.set("train.warmup", self.schedule.warmup);
        ck.set("train.lr0", self.schedule.lr0);
        ck.set("train.alpha", self.schedule.alpha);
        ck.set("train.batch_size", self.batch_size);
        ck.set("train.codes_per_batch", self.codes_per_batch);
        ck.set("train.rho", self.weights.rho);
        ck.set("train.gamma", self.weights.gamma);
        ck.set("train.beta", self.weights.beta);
        ck.set("train.seed", self.seed);
        ck.set("train.hflip", self.augment.hflip);
        ck.set("train.az_rotations", self.augment.az_rotations);
    }
}

/// Loss components of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub scale_invariant: f64,
    pub cosine: f64,
    pub kld: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<StepRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,total,scale_invariant,cosine,kld\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.step, r.lr, r.total, r.scale_invariant, r.cosine, r.kld
            );
        }
        out
    }

    /// Mean of `f` over records with `from <= step <= to`.
    pub fn window_mean(&self, from: usize, to: usize, f: impl Fn(&StepRecord) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.step >= from && r.step <= to)
            .map(f)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

pub struct TrainOutput<T: Real> {
    pub model: FieldModel<T>,
    pub bank: LatentBank,
    pub history: LossHistory,
    /// The training set after augmentation, aligned with the bank rows.
    pub images: Vec<EnvironmentImage>,
}

/// Applies `augment` to `images`; originals come first, in order.
pub fn augment_dataset(
    images: &[EnvironmentImage],
    augment: &AugmentConfig,
    seed: u64,
) -> Vec<EnvironmentImage> {
    let mut out = images.to_vec();
    if augment.hflip {
        out.extend(images.iter().map(|im| im.augment(Augmentation::HFlip)));
    }
    let mut rng = substream(seed, 1);
    for _ in 0..augment.az_rotations {
        for im in images {
            let k = rng.random_range(1..im.width());
            out.push(im.augment(Augmentation::AzRotate(k)));
        }
    }
    out
}

/// Trains a fresh model on `images`.
pub fn train<T: Real>(
    images: &[EnvironmentImage],
    field: FieldConfig,
    config: &TrainConfig,
) -> Result<TrainOutput<T>> {
    train_with_progress(images, field, config, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with_progress<T: Real>(
    images: &[EnvironmentImage],
    field: FieldConfig,
    config: &TrainConfig,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutput<T>> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one image".into(),
        ));
    }
    let images = augment_dataset(images, &config.augment, config.seed);
    let mut model = FieldModel::<T>::new(field.clone(), config.seed)?;
    let dim = 3 * field.n;
    let mut init_rng = substream(config.seed, 2);
    let bank = LatentBank::init(&mut init_rng, images.len(), dim);
    let mut mu = bank.mu.mapv(T::lit);
    let mut logvar = bank.logvar.mapv(T::lit);

    let mut rng = seeded(config.seed);
    let mut shapes: Vec<Array2<T>> = model.tensors().to_vec();
    shapes.push(mu.clone());
    shapes.push(logvar.clone());
    let mut adam = Adam::new(&shapes);
    drop(shapes);

    let k = config.codes_per_batch.min(images.len());
    let mut history = LossHistory::default();
    for step in 1..=config.steps() {
        let selected: Vec<usize> = if k == images.len() {
            (0..k).collect()
        } else {
            let mut s = sample_indices(&mut rng, images.len(), k).into_vec();
            s.sort_unstable();
            s
        };
        let subset: Vec<EnvironmentImage> = selected.iter().map(|&i| images[i].clone()).collect();
        let batch = sample_training_batch_with(&subset, config.batch_size, &mut rng)?;
        let eps =
            Array2::from_shape_simple_fn((k, dim), || T::lit(rng.sample::<f64, _>(StandardNormal)));

        let mut tape = Tape::<T>::new();
        let bound = model.bind(&mut tape, true)?;
        let mu_v = tape.leaf(mu.clone());
        let lv_v = tape.leaf(logvar.clone());
        let rows: Rc<[usize]> = selected.clone().into();
        let mu_sel = tape.gather_rows(mu_v, rows.clone())?;
        let lv_sel = tape.gather_rows(lv_v, rows)?;
        let half = tape.scale(lv_sel, T::lit(0.5));
        let std = tape.exp(half);
        let eps_v = tape.constant(eps);
        let noise = tape.mul(std, eps_v)?;
        let z = tape.add(mu_sel, noise)?;

        let dirs = direction_rows::<T>(&batch.directions);
        let groups: Rc<[usize]> = batch.image_index.clone().into();
        let pred = model.forward(&mut tape, &bound, &dirs, z, &groups)?;
        let target = tape.constant(batch.log_color_matrix().mapv(T::lit));
        let parts = train_loss(&mut tape, pred, target, mu_sel, lv_sel, &config.weights)?;

        let total = tape.scalar(parts.total).as_f64();
        if !total.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let lr = config.schedule.lr(step);
        let record = StepRecord {
            step,
            lr,
            total,
            scale_invariant: tape.scalar(parts.reconstruction).as_f64(),
            cosine: tape.scalar(parts.cosine).as_f64(),
            kld: parts
                .regulariser
                .map(|v| tape.scalar(v).as_f64())
                .unwrap_or(0.0),
        };

        let mut grads = tape.backward(parts.total)?;
        let mut g: Vec<Array2<T>> = bound
            .vars()
            .iter()
            .map(|&v| grads.take(v))
            .collect::<Result<_>>()?;
        g.push(grads.take(mu_v)?);
        g.push(grads.take(lv_v)?);
        drop(tape);

        let trainable = model.tensors_mut().iter_mut().chain([&mut mu, &mut logvar]);
        adam.step(trainable, &g, lr)?;

        progress(&record);
        history.records.push(record);
    }

    let bank = LatentBank {
        mu: mu.mapv(|v| v.as_f64()),
        logvar: logvar.mapv(|v| v.as_f64()),
    };
    Ok(TrainOutput {
        model,
        bank,
        history,
        images,
    })
}
