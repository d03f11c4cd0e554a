use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::labeler::ActivityLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    /// Indexed by label ordinal.
    pub per_class: [ClassScores; 3],
    pub macro_f1: f64,
    /// `confusion[true][pred]`, row-major.
    pub confusion: [[usize; 3]; 3],
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn classify_metrics(pred: &[ActivityLabel], truth: &[ActivityLabel]) -> Result<ClassifyReport, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, t) in pred.iter().zip(truth) {
        confusion[t.ordinal()][p.ordinal()] += 1;
    }
    let per_class = std::array::from_fn(|c| {
        let tp = confusion[c][c];
        let predicted: usize = (0..3).map(|t| confusion[t][c]).sum();
        let support: usize = confusion[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
            support,
        }
    });
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    Ok(ClassifyReport {
        accuracy: ratio(correct, pred.len()),
        macro_f1: per_class.iter().map(|s: &ClassScores| s.f1).sum::<f64>() / 3.0,
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActivityLabel::*;

    #[test]
    fn perfect() {
        let y = [Normal, PossiblyAbnormal, Abnormal, Abnormal];
        let r = classify_metrics(&y, &y).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.confusion, [[1, 0, 0], [0, 1, 0], [0, 0, 2]]);
    }

    #[test]
    fn all_normal_on_balanced() {
        let r = classify_metrics(&[Normal; 3], &[Normal, PossiblyAbnormal, Abnormal]).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        // precision 1/3, recall 1 -> 2 * (1/3) / (4/3)
        assert!((r.per_class[0].f1 - 0.5).abs() < 1e-15);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!((r.macro_f1 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(classify_metrics(&[], &[]), Err(EvalError::EmptyInput));
        assert!(matches!(classify_metrics(&[Normal], &[]), Err(EvalError::LengthMismatch { .. })));
    }
}
