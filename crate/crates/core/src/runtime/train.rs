use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::runtime::{evaluate_accuracy, sample_gradients, Batch};

/// Mini-batch SGD with classical momentum and a constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Keep training past `epochs` while validation accuracy improves, up to
    /// three times `epochs`. Needs a validation split.
    pub extend_while_improving: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            extend_while_improving: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    /// Mean training loss of every epoch that ran.
    pub epoch_losses: Vec<f64>,
    /// Set when the last epoch ended above the first and the best-seen
    /// weights were returned instead.
    pub reverted_to_best: bool,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.epoch_losses.len()
    }
}

struct Sgd {
    velocity: Vec<Vec<Vec<f64>>>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    fn new(model: &ModelGraph, cfg: &TrainConfig) -> Self {
        Sgd {
            velocity: model
                .layers()
                .iter()
                .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
        }
    }

    fn step(&mut self, model: &mut ModelGraph, grads: &[Vec<Vec<f64>>]) {
        for (i, layer) in model.layers_mut_unchecked().iter_mut().enumerate() {
            for ((param, vel), grad) in layer
                .params_mut()
                .into_iter()
                .zip(&mut self.velocity[i])
                .zip(&grads[i])
            {
                for ((w, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = self.momentum * *v + g;
                    *w -= self.lr * *v;
                }
            }
        }
    }
}

/// One epoch over `train` in a seeded shuffled order. Returns mean loss.
fn run_epoch(
    model: &mut ModelGraph,
    sgd: &mut Sgd,
    train: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
) -> f64 {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Streams below 2^32 belong to initialization and dataset generation.
    rng.set_stream((1 << 32) + epoch as u64);
    order.shuffle(&mut rng);

    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let m: &ModelGraph = model;
        let per_sample: Vec<(f64, Vec<Vec<Vec<f64>>>)> = chunk
            .par_iter()
            .map(|&i| sample_gradients(m, train.sample_hwc(i), train.labels[i]))
            .collect();
        let mut iter = per_sample.into_iter();
        let (mut loss, mut acc) = iter.next().expect("chunks are non-empty");
        for (l, g) in iter {
            loss += l;
            for (a_layer, g_layer) in acc.iter_mut().zip(&g) {
                for (a, b) in a_layer.iter_mut().zip(g_layer) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
        let scale = 1.0 / chunk.len() as f64;
        acc.iter_mut()
            .flatten()
            .flatten()
            .for_each(|x| *x *= scale);
        total += loss;
        if !loss.is_finite() {
            return f64::NAN;
        }
        sgd.step(model, &acc);
        let finite = model
            .layers()
            .iter()
            .all(|l| l.params().iter().all(|p| p.iter().all(|w| w.is_finite())));
        if !finite {
            return f64::NAN;
        }
    }
    total / train.len() as f64
}

/// Trains for `cfg.epochs` (possibly more, see
/// [`TrainConfig::extend_while_improving`]) and reports per-epoch losses.
pub fn train_epochs(
    model: &ModelGraph,
    train: &Batch,
    validation: Option<&Batch>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.sample_shape() != model.input_shape {
        return Err(Error::invalid("training inputs do not match the model input shape"));
    }
    let mut current = model.clone();
    let mut sgd = Sgd::new(&current, cfg);
    let mut losses = Vec::new();
    let mut best: Option<(f64, ModelGraph)> = None;

    for epoch in 0..cfg.epochs {
        let before = current.clone();
        let loss = run_epoch(&mut current, &mut sgd, train, cfg, epoch);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                last_finite: Box::new(before),
            });
        }
        info!("epoch {epoch}: loss {loss:.5}");
        losses.push(loss);
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, current.clone()));
        }
    }

    if cfg.extend_while_improving {
        if let Some(val) = validation {
            let mut best_acc = evaluate_accuracy(&current, val)?;
            let mut best_model = current.clone();
            for epoch in cfg.epochs..3 * cfg.epochs {
                let before = current.clone();
                let loss = run_epoch(&mut current, &mut sgd, train, cfg, epoch);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        last_finite: Box::new(before),
                    });
                }
                losses.push(loss);
                let acc = evaluate_accuracy(&current, val)?;
                if acc <= best_acc {
                    break;
                }
                best_acc = acc;
                best_model = current.clone();
            }
            current = best_model;
        }
    }

    let mut reverted = false;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        if last > first {
            warn!("final epoch loss {last:.5} exceeds first epoch loss {first:.5}; keeping best-seen weights");
            current = best.expect("at least one epoch ran").1;
            reverted = true;
        }
    }
    Ok(TrainOutcome {
        model: current,
        epoch_losses: losses,
        reverted_to_best: reverted,
    })
}

/// Fine-tunes a (compressed) model on the training split.
pub fn fine_tune(model: &ModelGraph, train: &Batch, cfg: &TrainConfig) -> Result<ModelGraph> {
    Ok(train_epochs(model, train, None, cfg)?.model)
}

/// As [`fine_tune`], with a validation split for the optional extension.
pub fn fine_tune_with_validation(
    model: &ModelGraph,
    train: &Batch,
    validation: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_epochs(model, train, Some(validation), cfg)
}
