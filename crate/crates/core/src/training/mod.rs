//! Supervised training with softmax loss and Nesterov momentum.

mod gradcheck;
pub mod noise;
mod optim;

pub use gradcheck::{grad_check, rel_err, GradCheckOptions, GradCheckReport, GroupCheck};
pub use noise::{apply_multiplicative_noise, noise_factors, sample_seed};
pub use optim::{nesterov_step, nesterov_update, softmax_loss, OptimizerState};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{argmax, network_forward, Mode, NetworkGrads, NetworkSpec, Tape};
use crate::tensor::Tensor3;

/// Images with class labels, all of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    images: Vec<Tensor3>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Vec<Tensor3>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|im| im.dims() != first.dims()) {
                return Err(Error::Shape(format!(
                    "image {bad} is {:?}, image 0 is {:?}",
                    images[bad].dims(),
                    first.dims()
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor3] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&Tensor3, usize) {
        (&self.images[i], self.labels[i])
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> Result<(LabeledSet, LabeledSet)> {
        if n > self.len() {
            return Err(Error::Shape(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let at = self.len() - n;
        let images = self.images.split_off(at);
        let labels = self.labels.split_off(at);
        Ok((self, LabeledSet { images, labels }))
    }

    /// The first `n` samples (or all of them).
    pub fn truncated(mut self, n: usize) -> LabeledSet {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Horizontal flip with probability 1/2.
    Hflip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    /// `(epoch, multiplier)`: from that 0-based epoch on, the rate is scaled.
    pub lr_steps: Vec<(usize, f64)>,
    pub epochs: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr: 0.01,
            lr_steps: vec![(200, 0.1), (250, 0.1)],
            epochs: 300,
            noise_std: 0.1,
            seed: 0,
            augmentation: Augmentation::Hflip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if let Some((e, m)) = self.lr_steps.iter().find(|(_, m)| !(*m > 0.0 && m.is_finite())) {
            return bad(format!("rate multiplier at epoch {e} must be positive, got {m}"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_steps
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's updates.
    pub train_loss: f64,
    /// Accuracy on the training set after the epoch, without noise or flips.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\ttrain_acc\tval_acc\tlr\twall_seconds";

    pub fn tsv_line(&self) -> String {
        let val = self.val_acc.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{:.3}",
            self.epoch, self.train_loss, self.train_acc, val, self.lr, self.wall_seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: NetworkSpec,
    pub metrics: Vec<EpochMetrics>,
}

/// Predicted class of one image; ties break to the lowest index.
pub fn predict(spec: &NetworkSpec, image: &Tensor3) -> Result<usize> {
    Ok(argmax(&network_forward(image, spec)?))
}

/// Fraction of correctly classified samples.
pub fn evaluate(spec: &NetworkSpec, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut correct = 0usize;
    for (image, &label) in set.images.iter().zip(&set.labels) {
        if predict(spec, image)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains `spec` by mini-batch SGD with Nesterov momentum. `on_epoch` sees
/// each epoch's metrics as soon as they are known.
pub fn train(
    mut spec: NetworkSpec,
    train_set: &LabeledSet,
    val_set: Option<&LabeledSet>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &NetworkSpec),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let k = spec.n_classes();
    if let Some(bad) = train_set.labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParameter(format!("label {bad} but the network has {k} classes")));
    }
    let mut state = OptimizerState::new(&spec, config.lr);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let start = Instant::now();

    for epoch in 0..config.epochs {
        state.lr = config.lr_at(epoch);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch, usize::MAX));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = NetworkGrads::zeros_like(&spec);
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let (image, label) = train_set.get(idx);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch, idx));
                let flipped;
                let input = if config.augmentation == Augmentation::Hflip && rng.random_bool(0.5) {
                    flipped = image.flip_horizontal();
                    &flipped
                } else {
                    image
                };
                let mode = Mode::Train {
                    noise_std: config.noise_std,
                    seed: rng.random(),
                };
                let scores = tape
                    .forward(&spec, input, mode)
                    .map_err(|e| Error::Training(format!("epoch {}, sample {idx}: {e}", epoch + 1)))?;
                let (loss, upstream) = softmax_loss(&scores, label)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!("epoch {}, sample {idx}: loss is {loss}", epoch + 1)));
                }
                loss_sum += loss;
                let g = tape.backward(&spec, &upstream)?;
                grads.accumulate(&g, scale);
            }
            if let Some((id, _)) = grads.blocks().iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Training(format!("epoch {}: non-finite gradient in {id}", epoch + 1)));
            }
            nesterov_step(&mut spec, &grads, &mut state, config.momentum, config.weight_decay)?;
            if let Some((id, _, _)) = spec.params().iter().find(|(_, _, v)| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Training(format!("epoch {}: parameter {id} became non-finite", epoch + 1)));
            }
        }
        tape.clear();

        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: evaluate(&spec, train_set)?,
            val_acc: match val_set {
                Some(v) if !v.is_empty() => Some(evaluate(&spec, v)?),
                _ => None,
            },
            lr: state.lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m, &spec);
        metrics.push(m);
    }
    Ok(TrainOutcome { spec, metrics })
}
