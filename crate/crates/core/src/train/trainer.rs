use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss_grad, mix_seed, FrozenBases, ModelConfig, ModelParams, StudyFeatures};
use super::optim::{clip_global_norm, AdamW};
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-2,
            batch_size: 8,
            max_epochs: 10,
            patience: 3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement;
/// ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if val_loss >= b || val_loss.is_nan() => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::NoImprovement
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    /// Epoch 0 is the untrained baseline.
    pub history: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

/// Size-weighted mean loss over consecutive batches, evaluation mode.
pub fn evaluate_loss(
    params: &ModelParams,
    bases: &FrozenBases,
    data: &[StudyFeatures],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(batch_size) {
        let refs: Vec<&StudyFeatures> = chunk.iter().collect();
        let (l, _) = batch_loss_grad(params, bases, &refs, None, false)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

pub fn train(
    train_set: &[StudyFeatures],
    val_set: &[StudyFeatures],
    bases: &FrozenBases,
    model: &ModelConfig,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation".into()));
    }
    let mut log = match log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut emit = |m: &EpochMetrics| -> Result<(), TrainError> {
        log::info!(
            "epoch {} train {:.5} val {:.5} tau {:.4}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.tau
        );
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, m).map_err(|e| TrainError::Io(e.to_string()))?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        Ok(())
    };

    let mut params = ModelParams::init(model, mix_seed(cfg.seed, 0))?;
    let mut history = vec![EpochMetrics {
        epoch: 0,
        train_loss: evaluate_loss(&params, bases, train_set, cfg.batch_size)?,
        val_loss: evaluate_loss(&params, bases, val_set, cfg.batch_size)?,
        tau: params.tau(),
    }];
    emit(&history[0])?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&StudyFeatures> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_loss_grad(&params, bases, &batch, Some(rng.next_u64()), true)?;
            let mut grads = grads.expect("gradients requested");
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut params, &grads);
            total += loss * batch.len() as f64;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: evaluate_loss(&params, bases, val_set, cfg.batch_size)?,
            tau: params.tau(),
        };
        emit(&metrics)?;
        let decision = stopper.observe(epoch, metrics.val_loss);
        history.push(metrics);
        match decision {
            StopDecision::Improved => best = params.clone(),
            StopDecision::NoImprovement => {}
            StopDecision::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_trace() {
        let mut s = EarlyStopping::new(3);
        let d: Vec<StopDecision> = [1.0, 1.1, 1.2, 1.3]
            .iter()
            .enumerate()
            .map(|(i, &v)| s.observe(i + 1, v))
            .collect();
        assert_eq!(
            d,
            vec![
                StopDecision::Improved,
                StopDecision::NoImprovement,
                StopDecision::NoImprovement,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn ties_keep_earlier_epoch() {
        let mut s = EarlyStopping::new(2);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), StopDecision::NoImprovement);
        assert_eq!(s.observe(3, 0.4), StopDecision::Improved);
        assert_eq!(s.best_epoch(), Some(3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
