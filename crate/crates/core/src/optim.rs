//! Minibatch SGD with geometric learning-rate decay, per-epoch dev-set
//! monitoring, and early stopping on the development loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};

/// Optimization hyperparameters. Momentum is carried for completeness but
/// pinned to zero; configuring it away from zero is a config error.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub initial_lr: f32,
    pub decay: f32,
    pub lr_floor: f32,
    pub minibatch: usize,
    pub momentum: f32,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            decay: 0.5,
            lr_floor: 1e-5,
            minibatch: 128,
            momentum: 0.0,
            patience: 1,
            max_epochs: 15,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!(
                "decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.lr_floor > 0.0) {
            return Err(Error::Config(format!(
                "lr_floor must be positive, got {}",
                self.lr_floor
            )));
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be at least 1".to_string()));
        }
        if self.momentum != 0.0 {
            return Err(Error::Config(
                "momentum is pinned to 0; nonzero momentum is not supported".to_string(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Training progress carried across epochs and through checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    /// last completed epoch, 0 before training starts
    pub epoch: u32,
    pub lr: f32,
    pub best_dev_loss: f32,
    pub epochs_since_improvement: u32,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn fresh(rng_seed: u64) -> Self {
        Self {
            epoch: 0,
            lr: 0.0,
            best_dev_loss: f32::INFINITY,
            epochs_since_improvement: 0,
            rng_seed,
        }
    }
}

/// Learning rate of a 1-based epoch: max(initial_lr * decay^(epoch-1),
/// lr_floor). Epoch 1 uses the initial rate.
pub fn lr_at(config: &OptimConfig, epoch: u32) -> Result<f32> {
    if epoch == 0 {
        return Err(Error::Config("epochs are 1-based; epoch 0 has no learning rate".to_string()));
    }
    Ok((config.initial_lr * config.decay.powi(epoch as i32 - 1)).max(config.lr_floor))
}

/// Plain SGD update: every weight w <- w - lr * g.
pub fn sgd_step(params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("lr must be positive, got {lr}")));
    }
    params.add_assign_scaled(grads, -lr)
}

/// One log line per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f32,
    pub train_loss: f32,
    pub dev_loss: f32,
    pub dev_acc: f32,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// parameters of the best dev-loss epoch seen in this run
    pub best_params: ModelParams<f32>,
    /// parameters as of the last completed epoch, for resuming
    pub last_params: ModelParams<f32>,
    pub state: TrainState,
    pub log: Vec<EpochRecord>,
}

/// The canonical minibatch order of one epoch: a seeded shuffle of the given
/// index list. Both the serial trainer (worker 0) and every ASGD shard use
/// this, so a single shard reproduces serial SGD exactly.
pub fn shuffle_indices(indices: &mut [usize], seed: u64, epoch: u32, worker: usize) {
    let mixed = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        ^ (epoch as u64).wrapping_mul(0xd1b54a32d192ed03)
        ^ (worker as u64).wrapping_mul(0x8cb92ba72f3d8dd7);
    let mut rng = ChaCha20Rng::seed_from_u64(mixed);
    indices.shuffle(&mut rng);
}

/// Unweighted mean of per-batch losses, accumulated in f64; shared by the
/// serial and parameter-server paths so their logs agree.
pub fn mean_batch_loss(losses: &[f32]) -> f32 {
    if losses.is_empty() {
        return f32::NAN;
    }
    (losses.iter().map(|&v| v as f64).sum::<f64>() / losses.len() as f64) as f32
}

/// Mean cross-entropy and frame accuracy over a dataset, evaluated in
/// fixed-size batches against read-only parameters.
pub fn evaluate(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    dataset: &WindowDataset,
    batch_size: usize,
) -> Result<(f32, f32)> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".to_string()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, targets) = dataset.gather(chunk);
        let (posteriors, _) = model::forward(params, config, &x, false)?;
        let (loss, _) = crate::tensor::cross_entropy(&posteriors, &targets)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        let predicted = crate::tensor::argmax_rows(&posteriors);
        for (p, &target) in predicted.iter().zip(targets.iter()) {
            correct += usize::from(*p == target);
        }
    }
    let n = dataset.len() as f64;
    Ok(((loss_sum / n) as f32, (correct as f64 / n) as f32))
}

/// Epoch loop: seeded reshuffle each epoch, minibatch SGD with the decayed
/// rate, dev evaluation after every epoch, early stop once the dev loss
/// fails to improve for `patience` consecutive epochs. Returns the
/// best-dev parameters. Resuming from a checkpointed state continues the
/// uninterrupted run exactly.
pub fn train(
    config: &ModelConfig,
    params: ModelParams<f32>,
    train_set: &WindowDataset,
    dev_set: &WindowDataset,
    optim: &OptimConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    optim.validate()?;
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Input(
            "training requires nonempty train and dev sets".to_string(),
        ));
    }

    let mut state = resume.unwrap_or_else(|| TrainState::fresh(config.seed));
    let mut params = params;
    let mut best_params = params.clone();
    let mut log = Vec::new();

    for epoch in (state.epoch + 1)..=(optim.max_epochs as u32) {
        let started = Instant::now();
        let lr = lr_at(optim, epoch)?;

        // fresh identity order every epoch so the permutation depends only
        // on (seed, epoch), which resuming and the shard path both rely on
        let mut indices: Vec<usize> = (0..train_set.len()).collect();
        shuffle_indices(&mut indices, state.rng_seed, epoch, 0);
        let mut batch_losses = Vec::new();
        for chunk in indices.chunks(optim.minibatch) {
            let (x, targets) = train_set.gather(chunk);
            let (_, cache) = model::forward(&params, config, &x, true)?;
            let (loss, grads) = model::backward(&params, config, &cache, &targets)?;
            sgd_step(&mut params, &grads, lr)?;
            batch_losses.push(loss);
        }

        let (dev_loss, dev_acc) = evaluate(&params, config, dev_set, optim.minibatch)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: mean_batch_loss(&batch_losses),
            dev_loss,
            dev_acc,
            seconds: started.elapsed().as_secs_f64(),
        };

        if dev_loss < state.best_dev_loss {
            state.best_dev_loss = dev_loss;
            state.epochs_since_improvement = 0;
            best_params = params.clone();
        } else {
            state.epochs_since_improvement += 1;
        }
        state.epoch = epoch;
        state.lr = lr;

        on_epoch(&record);
        log.push(record);

        if state.epochs_since_improvement >= optim.patience as u32 {
            break;
        }
    }

    Ok(TrainOutcome {
        best_params,
        last_params: params,
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn lr_schedule_matches_quoted_values() {
        let config = OptimConfig::default();
        assert_eq!(lr_at(&config, 1).unwrap(), 0.1);
        assert_eq!(lr_at(&config, 2).unwrap(), 0.05);
        assert_eq!(lr_at(&config, 3).unwrap(), 0.025);
        assert_eq!(lr_at(&config, 20).unwrap(), 1e-5);
        assert!(lr_at(&config, 0).is_err());
    }

    #[test]
    fn lr_is_nonincreasing_and_floored() {
        let config = OptimConfig::default();
        let mut prev = f32::INFINITY;
        for epoch in 1..=60 {
            let lr = lr_at(&config, epoch).unwrap();
            assert!(lr <= prev);
            assert!(lr >= config.lr_floor);
            prev = lr;
        }
    }

    #[test]
    fn momentum_must_be_zero() {
        let config = OptimConfig {
            momentum: 0.9,
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }

    fn tiny_setup() -> (ModelConfig, ModelParams<f32>) {
        let config = ModelConfig::tiny_for_checks(Variant::Dnn);
        let params = model::init_params(&config).unwrap();
        (config, params)
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let (_, mut params) = tiny_setup();
        let before = params.clone();
        let zeros = params.zeros_like();
        sgd_step(&mut params, &zeros, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn unit_lr_with_grads_equal_params_zeroes_them() {
        let (_, mut params) = tiny_setup();
        let grads = params.clone();
        sgd_step(&mut params, &grads, 1.0).unwrap();
        assert_eq!(params, params.zeros_like());
    }

    #[test]
    fn two_steps_equal_one_summed_step_on_linear_model() {
        // closed form on a single parameter: w - lr*(g1 + g2)
        let (_, params) = tiny_setup();
        let mut a = params.clone();
        let mut g1 = params.zeros_like();
        let mut g2 = params.zeros_like();
        // deterministic fake gradients
        let flat_len = params.total_parameter_count();
        let mk = |k: usize| -> Vec<f32> {
            (0..flat_len).map(|i| ((i + k) % 7) as f32 * 0.01).collect()
        };
        g1 = g1.unflatten(&mk(1)).unwrap();
        g2 = g2.unflatten(&mk(3)).unwrap();

        sgd_step(&mut a, &g1, 0.5).unwrap();
        sgd_step(&mut a, &g2, 0.5).unwrap();

        let mut b = params.clone();
        let mut summed = g1.clone();
        summed.add_assign_scaled(&g2, 1.0).unwrap();
        sgd_step(&mut b, &summed, 0.5).unwrap();

        for ((_, ma), (_, mb)) in a.named_matrices().into_iter().zip(b.named_matrices()) {
            for (x, y) in ma.data().iter().zip(mb.data().iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn descent_on_quadratic_bowl() {
        // loss = 0.5 * sum(w^2); gradient = w; small step must reduce it
        let (_, params) = tiny_setup();
        let loss = |p: &ModelParams<f32>| -> f64 {
            p.flatten().iter().map(|&v| 0.5 * (v as f64) * (v as f64)).sum()
        };
        let before = loss(&params);
        let grads = params.clone();
        let mut stepped = params.clone();
        sgd_step(&mut stepped, &grads, 1e-3).unwrap();
        assert!(loss(&stepped) < before);
    }

    #[test]
    fn shuffle_is_deterministic_and_worker_dependent() {
        let mut a: Vec<usize> = (0..50).collect();
        let mut b: Vec<usize> = (0..50).collect();
        let mut c: Vec<usize> = (0..50).collect();
        shuffle_indices(&mut a, 9, 1, 0);
        shuffle_indices(&mut b, 9, 1, 0);
        shuffle_indices(&mut c, 9, 1, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
