use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classify::{classify_metrics, ClassifyReport};
use super::EvalError;
use crate::labeler::{rule_classify, ActivityLabel, ReportDoc, RuleLexicon};
use crate::train::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalReport {
    pub exact: f64,
    pub mae: f64,
    pub within1: f64,
    /// Predictions drawn from the label prevalence: `1 - 2 p0 p2`.
    pub chance_prevalence: f64,
    /// Uniform predictions: `1 - (p0 + p2) / 3`.
    pub chance_uniform: f64,
}

pub fn prevalence(labels: &[ActivityLabel]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for l in labels {
        c[l.ordinal()] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    c.map(|v| v / n)
}

pub fn chance_within1_prevalence(p: [f64; 3]) -> f64 {
    1.0 - 2.0 * p[0] * p[2]
}

pub fn chance_within1_uniform(p: [f64; 3]) -> f64 {
    1.0 - (p[0] + p[2]) / 3.0
}

/// `distribution` defaults to the prevalence of `truth`.
pub fn ordinal_eval(
    pred: &[ActivityLabel],
    truth: &[ActivityLabel],
    distribution: Option<[f64; 3]>,
) -> Result<OrdinalReport, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = pred.len() as f64;
    let dist: Vec<usize> = pred.iter().zip(truth).map(|(p, t)| p.ordinal().abs_diff(t.ordinal())).collect();
    let p = distribution.unwrap_or_else(|| prevalence(truth));
    Ok(OrdinalReport {
        exact: dist.iter().filter(|&&d| d == 0).count() as f64 / n,
        mae: dist.iter().sum::<usize>() as f64 / n,
        within1: dist.iter().filter(|&&d| d <= 1).count() as f64 / n,
        chance_prevalence: chance_within1_prevalence(p),
        chance_uniform: chance_within1_uniform(p),
    })
}

fn draw(rng: &mut ChaCha8Rng, p: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    if u < p[0] {
        0
    } else if u < p[0] + p[1] {
        1
    } else {
        2
    }
}

const CHUNK: usize = 1 << 16;

/// Simulated within-1 rate of predictions drawn from `pred_dist` against
/// labels drawn from `true_dist`. Chunks are seeded independently, so the
/// result does not depend on the thread count.
pub fn monte_carlo_within1(true_dist: [f64; 3], pred_dist: [f64; 3], draws: usize, seed: u64) -> f64 {
    let chunks = draws.div_ceil(CHUNK);
    let hits: usize = crate::parallel::map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64));
        let len = CHUNK.min(draws - c * CHUNK);
        (0..len)
            .filter(|_| draw(&mut rng, &true_dist).abs_diff(draw(&mut rng, &pred_dist)) <= 1)
            .count()
    })
    .into_iter()
    .sum();
    hits as f64 / draws as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub ordinal: OrdinalReport,
    pub classification: ClassifyReport,
    pub predicted: Vec<ActivityLabel>,
}

/// Labels each generated impression with the rule engine and scores it
/// against the reference labels.
pub fn label_consistency(
    generated: &[String],
    truth: &[ActivityLabel],
    lex: &RuleLexicon,
) -> Result<ConsistencyReport, EvalError> {
    let predicted: Vec<ActivityLabel> = generated
        .iter()
        .map(|g| rule_classify(&ReportDoc::new("generated", "", g.as_str()), lex).0)
        .collect();
    Ok(ConsistencyReport {
        ordinal: ordinal_eval(&predicted, truth, None)?,
        classification: classify_metrics(&predicted, truth)?,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ActivityLabel::*;

    #[test]
    fn examples() {
        let y = [Normal, PossiblyAbnormal, Abnormal];
        let r = ordinal_eval(&y, &y, None).unwrap();
        assert_eq!((r.mae, r.within1, r.exact), (0.0, 1.0, 1.0));
        let r = ordinal_eval(&[Normal], &[Abnormal], None).unwrap();
        assert_eq!((r.mae, r.within1), (2.0, 0.0));
        assert!(ordinal_eval(&[Normal], &[], None).is_err());
    }

    #[test]
    fn paper_chance_levels() {
        let p = [39.0 / 125.0, 28.0 / 125.0, 58.0 / 125.0];
        assert!((chance_within1_prevalence(p) - 0.7105).abs() < 5e-4);
        assert!((chance_within1_uniform(p) - 0.7413).abs() < 5e-4);
    }

    #[test]
    fn monte_carlo_tracks_closed_form() {
        let p = [0.312, 0.224, 0.464];
        let mc = monte_carlo_within1(p, p, 200_000, 7);
        assert!((mc - chance_within1_prevalence(p)).abs() < 0.005);
        assert_eq!(mc, monte_carlo_within1(p, p, 200_000, 7));
    }

    #[test]
    fn consistency() {
        let lex = RuleLexicon::bundled();
        let gen = vec!["No evidence of active inflammatory bowel disease.".to_string(); 4];
        let r = label_consistency(&gen, &[Abnormal; 4], lex).unwrap();
        assert_eq!((r.ordinal.within1, r.ordinal.mae), (0.0, 2.0));
        let hedged = vec!["Cannot exclude active disease.".to_string(); 3];
        let r = label_consistency(&hedged, &[Normal, Abnormal, PossiblyAbnormal], lex).unwrap();
        assert_eq!(r.ordinal.within1, 1.0);
    }

    fn label() -> impl Strategy<Value = ActivityLabel> {
        (0usize..3).prop_map(|o| ActivityLabel::ALL[o])
    }

    proptest! {
        #[test]
        fn within1_dominates_exact(pairs in proptest::collection::vec((label(), label()), 1..40)) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = ordinal_eval(&p, &t, None).unwrap();
            prop_assert!(r.within1 >= r.exact);
            prop_assert!((0.0..=2.0).contains(&r.mae));
            prop_assert_eq!(r.mae == 0.0, r.exact == 1.0);
        }
    }
}
