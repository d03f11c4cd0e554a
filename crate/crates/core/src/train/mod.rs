//! Multi-positive contrastive training of adapters, aggregator, projector and
//! temperature.

pub mod checkpoint;
mod loss;
mod model;
mod optim;
mod trainer;

use thiserror::Error;

use crate::repr::ReprError;

pub use checkpoint::{load_checkpoint, module_versions, save_checkpoint, CheckpointHeader};
pub use loss::{build_positive_sets, multipositive_loss, multipositive_loss_grad, LossGrad, PositiveSets};
pub use model::{batch_loss_grad, mix_seed, FrozenBases, ModelConfig, ModelParams, StudyFeatures};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use trainer::{evaluate_loss, train, EarlyStopping, EpochMetrics, StopDecision, TrainConfig, TrainOutcome};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("similarity matrix {rows}x{cols} does not match {positives} positive sets")]
    BatchShape { rows: usize, cols: usize, positives: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("empty {0} split")]
    EmptySplit(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::nn::{gaussian_matrix, gaussian_vector};
    use crate::repr::AggregatorKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: AggregatorKind) -> (ModelParams, FrozenBases, Vec<StudyFeatures>) {
        let d = 8;
        let cfg = ModelConfig {
            dim: d,
            vision_in: d,
            text_in: d,
            vision_rank: 2,
            text_rank: 2,
            aggregator: kind,
            max_slices: 4,
            projector_hidden: d,
            text_projector: true,
            ..Default::default()
        };
        let mut p = ModelParams::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.3 * gaussian_vector(1, 1.0, &mut rng)[0];
            }
        }
        p.log_tau = 0.2f64.ln();
        let bases = FrozenBases {
            vision: gaussian_matrix(d, d, 0.5, &mut rng),
            text: gaussian_matrix(d, d, 0.5, &mut rng),
        };
        let texts = ["a", "b", "a", "c"];
        let data = (0..4)
            .map(|i| StudyFeatures {
                study_id: format!("s{i}"),
                slices: gaussian_matrix(3, d, 1.0, &mut rng),
                text: gaussian_vector(d, 1.0, &mut rng),
                impression: texts[i].into(),
            })
            .collect();
        (p, bases, data)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for kind in [AggregatorKind::Mean, AggregatorKind::Attention, AggregatorKind::LiteTransformer] {
            let (p, bases, data) = tiny(kind);
            let batch: Vec<&StudyFeatures> = data.iter().collect();
            let seed = Some(17);
            let (_, g) = batch_loss_grad(&p, &bases, &batch, seed, true).unwrap();
            let g = g.unwrap();
            let grads: Vec<Vec<f64>> = g.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
            let h = 1e-4;
            let mut worst = 0.0f64;
            for (k, slot) in grads.iter().enumerate() {
                for (i, &analytic) in slot.iter().enumerate() {
                    let eval = |delta: f64| {
                        let mut q = p.clone();
                        q.tensors_mut()[k].1[i] += delta;
                        batch_loss_grad(&q, &bases, &batch, seed, false).unwrap().0
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let rel = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
            assert!(worst <= 1e-4, "{kind:?}: worst relative error {worst:e}");
        }
    }
}
