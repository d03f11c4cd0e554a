use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labeler::ActivityLabel;
use crate::synth::class_counts;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Patient-level split stratified by each patient's most severe label.
/// Items are `(study_id, patient_id, label)`; every study of a patient lands
/// in the same part. Study order inside each part follows the input order.
pub fn patient_split(items: &[(String, String, ActivityLabel)], fractions: [f64; 3], seed: u64) -> Split {
    let mut patients: BTreeMap<&str, ActivityLabel> = BTreeMap::new();
    for (_, p, l) in items {
        let e = patients.entry(p.as_str()).or_insert(*l);
        *e = (*e).max(*l);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part_of: BTreeMap<&str, usize> = BTreeMap::new();
    for label in ActivityLabel::ALL {
        let mut stratum: Vec<&str> = patients.iter().filter(|(_, &l)| l == label).map(|(&p, _)| p).collect();
        stratum.shuffle(&mut rng);
        let counts = class_counts(stratum.len(), fractions);
        let mut it = stratum.into_iter();
        for (part, &c) in counts.iter().enumerate() {
            for p in it.by_ref().take(c) {
                part_of.insert(p, part);
            }
        }
    }
    let mut split = Split::default();
    for (s, p, _) in items {
        match part_of[p.as_str()] {
            0 => split.train.push(s.clone()),
            1 => split.val.push(s.clone()),
            _ => split.test.push(s.clone()),
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    proptest! {
        #[test]
        fn patients_never_straddle(raw in proptest::collection::vec((0usize..15, 0usize..3), 1..80), seed in 0u64..100) {
            let items: Vec<(String, String, ActivityLabel)> = raw
                .iter()
                .enumerate()
                .map(|(i, &(p, l))| (format!("s{i}"), format!("p{p}"), ActivityLabel::ALL[l]))
                .collect();
            let split = patient_split(&items, [0.7, 0.15, 0.15], seed);
            prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), items.len());
            let patient = |ids: &[String]| -> HashSet<String> {
                ids.iter().map(|s| items.iter().find(|it| &it.0 == s).unwrap().1.clone()).collect()
            };
            let (a, b, c) = (patient(&split.train), patient(&split.val), patient(&split.test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            prop_assert_eq!(&split, &patient_split(&items, [0.7, 0.15, 0.15], seed));
        }
    }

    #[test]
    fn stratified_proportions() {
        let items: Vec<_> = (0..100)
            .map(|i| (format!("s{i}"), format!("p{i}"), ActivityLabel::ALL[i % 2 * 2]))
            .collect();
        let split = patient_split(&items, [0.7, 0.15, 0.15], 1);
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (70, 16, 14));
        let abnormal_test = split.test.iter().filter(|s| s[1..].parse::<usize>().unwrap() % 2 == 1).count();
        assert_eq!(abnormal_test, 7);
    }
}
