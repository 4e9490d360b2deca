//! AdamW optimization, the epoch loop and the evaluation pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::data::Encoded;
use crate::encoder::Batch;
use crate::error::{Error, Result};
use crate::metrics::{self, EceConfig, PredictionRecord};
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub seed: u64,
    /// Global gradient-norm clipping threshold; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("train.weight_decay", "must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid(
                "train.betas",
                "each beta must lie in [0, 1)",
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("train.epsilon", "must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("train.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// Biases and layer-norm parameters (rank 1) are not decayed.
pub fn decays(rank: usize) -> bool {
    rank >= 2
}

/// One AdamW update using the gradients currently held in `store`.
///
/// Weight decay is decoupled: `w ← w (1 − lr·wd)` before the bias-corrected
/// Adam step `w ← w − lr · m̂ / (√v̂ + ε)`. A non-finite gradient aborts the
/// step before any parameter is touched.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if let Some(bad) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: bad.name.clone(),
        });
    }
    if state.first_moment.len() != store.len() {
        return Err(Error::invalid(
            "optimizer",
            "state does not match the parameter store",
        ));
    }
    let clip_scale = match config.grad_clip {
        Some(max_norm) => {
            let norm = store
                .iter()
                .flat_map(|p| p.grad.data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let (b1, b2) = config.betas;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    for (i, p) in store.iter_mut().enumerate() {
        let decay = if decays(p.value.rank()) {
            1.0 - lr * config.weight_decay
        } else {
            1.0
        };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (k, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g * clip_scale;
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w *= decay;
            *w -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_ece: Option<f64>,
}

/// Trains `model` in place with mini-batch AdamW on cross-entropy.
///
/// Examples are reshuffled every epoch from a generator seeded by
/// `config.seed`; the same generator drives dropout. When `eval_set` is
/// given, accuracy and ECE on it are logged after each epoch.
pub fn train(
    model: &mut Model,
    train_set: &[Encoded],
    eval_set: Option<&[Encoded]>,
    config: &TrainConfig,
    ece: &EceConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::from_examples(chunk.iter().map(|&i| &train_set[i]))?;
            let mut g = Graph::new();
            let mut store = std::mem::take(&mut model.params);
            let step = model
                .loss_with(&mut g, &store, &batch, Some(&mut rng))
                .and_then(|loss| {
                    total_loss += g.value(loss).data()[0] * batch.size as f64;
                    g.backward(loss, &mut store)
                })
                .and_then(|()| adamw_step(&mut store, &mut state, config));
            model.params = store;
            step?;
        }
        let (eval_accuracy, eval_ece) = match eval_set {
            Some(set) if !set.is_empty() => {
                let records = evaluate(model, set, config.batch_size.max(64))?;
                let acc = metrics::threshold_metrics(&records)?.accuracy;
                let (e, _) = metrics::ece(&records, ece)?;
                (Some(acc), Some(e))
            }
            _ => (None, None),
        };
        log.push(EpochLog {
            epoch,
            train_loss: total_loss / train_set.len() as f64,
            eval_accuracy,
            eval_ece,
        });
    }
    Ok(log)
}

/// Class-1 probability and label for every example, in order. Parameters are not modified.
pub fn evaluate(
    model: &Model,
    examples: &[Encoded],
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk)?;
        for (pred, &y) in model.predict(&batch)?.iter().zip(&batch.labels) {
            records.push(PredictionRecord::new(pred.p1(), y as u8));
        }
    }
    Ok(records)
}

/// Writes the log as one JSON object per line.
pub fn write_log<W: std::io::Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64, g: f64) -> ParamStore {
        let mut store = ParamStore::new();
        // rank 2 so that weight decay applies
        let id = store
            .insert("w", Tensor::new(vec![1, 1], vec![w]).unwrap())
            .unwrap();
        store.get_mut(id).grad = Tensor::new(vec![1, 1], vec![g]).unwrap();
        store
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0, 1.0);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, &cfg(0.1, 0.0)).unwrap();
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w - 0.9).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_only_decays() {
        let mut store = scalar_store(2.0, 0.0);
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(store.iter().next().unwrap().value.data()[0], 2.0);
        adamw_step(&mut store, &mut state, &cfg(0.1, 0.01)).unwrap();
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn bias_is_not_decayed() {
        let mut store = ParamStore::new();
        store
            .insert("x.b", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &mut state, &cfg(0.1, 0.5)).unwrap();
        assert_eq!(store.iter().next().unwrap().value.data()[0], 3.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = scalar_store(1.0, f64::NAN);
        let mut state = OptimizerState::new(&store);
        let err = adamw_step(&mut store, &mut state, &cfg(0.1, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(state.step, 0);
        assert_eq!(store.iter().next().unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn clipping_scales_gradient() {
        // With a single step the Adam update is sign-like, so clipping shows
        // up only in the moments.
        let mut store = scalar_store(0.0, 10.0);
        let mut state = OptimizerState::new(&store);
        let config = TrainConfig {
            grad_clip: Some(1.0),
            ..cfg(0.1, 0.0)
        };
        adamw_step(&mut store, &mut state, &config).unwrap();
        assert!((state.first_moment[0][0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.0, 0.0).validate().is_err());
        assert!(cfg(1e-3, -1.0).validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
