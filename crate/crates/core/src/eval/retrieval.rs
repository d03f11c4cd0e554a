use std::collections::{BTreeMap, HashMap};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::labeler::normalize_impression;

/// Duplicate-class id per sample; samples sharing a normalized impression
/// share a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceClasses {
    ids: Vec<usize>,
}

impl EquivalenceClasses {
    pub fn from_ids(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn singletons(n: usize) -> Self {
        Self { ids: (0..n).collect() }
    }

    pub fn from_impressions<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let ids = texts
            .iter()
            .map(|t| {
                let next = seen.len();
                *seen.entry(normalize_impression(t.as_ref())).or_insert(next)
            })
            .collect();
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> usize {
        self.ids[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    /// 1-based rank of the first equivalent gallery item, per query.
    pub first_ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: RetrievalMetrics,
    pub text_to_image: RetrievalMetrics,
}

/// Rank of the first gallery item equivalent to each query. Gallery order is
/// descending similarity, ties by ascending index.
pub fn first_equivalent_ranks(
    sim: ArrayView2<'_, f64>,
    query: &EquivalenceClasses,
    gallery: &EquivalenceClasses,
) -> Result<Vec<usize>, EvalError> {
    let (nq, ng) = sim.dim();
    if nq != query.len() || ng != gallery.len() {
        return Err(EvalError::LengthMismatch {
            left: nq * ng,
            right: query.len() * gallery.len(),
        });
    }
    if nq == 0 || ng == 0 {
        return Err(EvalError::EmptyInput);
    }
    crate::parallel::map_range(nq, |q| {
        let row = sim.row(q);
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
            .iter()
            .position(|&g| gallery.id(g) == query.id(q))
            .map(|p| p + 1)
            .ok_or(EvalError::NoPositiveInGallery(q))
    })
    .into_iter()
    .collect()
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> RetrievalMetrics {
    let n = ranks.len().max(1) as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    RetrievalMetrics {
        recall_at,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        first_ranks: ranks.to_vec(),
    }
}

/// One retrieval direction: rows of `sim` are queries, columns gallery items.
pub fn retrieval_eval(
    sim: ArrayView2<'_, f64>,
    query: &EquivalenceClasses,
    gallery: &EquivalenceClasses,
    ks: &[usize],
) -> Result<RetrievalMetrics, EvalError> {
    Ok(metrics_from_ranks(&first_equivalent_ranks(sim, query, gallery)?, ks))
}

/// Both directions for paired samples; `sim[i][j]` = volume i vs text j.
pub fn bidirectional_retrieval(
    sim: ArrayView2<'_, f64>,
    classes: &EquivalenceClasses,
    ks: &[usize],
) -> Result<RetrievalReport, EvalError> {
    Ok(RetrievalReport {
        image_to_text: retrieval_eval(sim, classes, classes, ks)?,
        text_to_image: retrieval_eval(sim.t(), classes, classes, ks)?,
    })
}

/// Expected reciprocal rank of the first of `m` relevant items among `n`
/// under a uniformly random ordering.
pub fn random_reciprocal_rank(n: usize, m: usize) -> f64 {
    assert!(m >= 1 && m <= n);
    // P(first relevant at rank r) = C(n-r, m-1) / C(n, m)
    let mut p = m as f64 / n as f64;
    let mut e = 0.0;
    for r in 1..=n - m + 1 {
        e += p / r as f64;
        // ratio P(r+1)/P(r) = (n-r-m+1)/(n-r)
        if r < n {
            p *= (n - r + 1 - m) as f64 / (n - r) as f64;
        }
    }
    e
}

/// Probability that at least one of `m` relevant items among `n` lands in
/// the top `k` of a uniformly random ordering.
pub fn random_hit_probability(n: usize, m: usize, k: usize) -> f64 {
    assert!(m >= 1 && m <= n);
    let mut miss = 1.0;
    for i in 0..k.min(n) {
        if n - m < i + 1 {
            return 1.0;
        }
        miss *= (n - m - i) as f64 / (n - i) as f64;
    }
    1.0 - miss
}

fn class_sizes(classes: &EquivalenceClasses) -> HashMap<usize, usize> {
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for i in 0..classes.len() {
        *sizes.entry(classes.id(i)).or_default() += 1;
    }
    sizes
}

/// Random-ranking recall@k expectation for paired samples with duplicate classes.
pub fn random_recall(classes: &EquivalenceClasses, k: usize) -> f64 {
    let n = classes.len();
    let sizes = class_sizes(classes);
    (0..n).map(|i| random_hit_probability(n, sizes[&classes.id(i)], k)).sum::<f64>() / n as f64
}

/// Random-ranking MRR expectation for paired samples with duplicate classes.
pub fn random_mrr(classes: &EquivalenceClasses) -> f64 {
    let n = classes.len();
    let sizes = class_sizes(classes);
    (0..n)
        .map(|i| random_reciprocal_rank(n, sizes[&classes.id(i)]))
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn hand_ranks() {
        // Query 0 first at rank 1, query 1 at rank 3, query 2 at rank 7.
        let n = 8;
        let mut sim = Array2::<f64>::zeros((3, n));
        for (q, target) in [(0, 0), (1, 1), (2, 2)] {
            let rank = [1, 3, 7][q];
            let mut others = (0..n).filter(|&g| g != target);
            for pos in 1..=n {
                let g = if pos == rank { target } else { others.next().unwrap() };
                sim[[q, g]] = -(pos as f64);
            }
        }
        let gallery = EquivalenceClasses::singletons(n);
        let m = retrieval_eval(sim.view(), &EquivalenceClasses::from_ids(vec![0, 1, 2]), &gallery, &[1, 5, 10]).unwrap();
        assert_eq!(m.first_ranks, vec![1, 3, 7]);
        assert_eq!(m.recall_at[&1], 1.0 / 3.0);
        assert_eq!(m.recall_at[&5], 2.0 / 3.0);
        assert_eq!(m.recall_at[&10], 1.0);
        assert!((m.mrr - (1.0 + 1.0 / 3.0 + 1.0 / 7.0) / 3.0).abs() < 1e-15);
        assert!((m.mrr - 0.49206).abs() < 1e-5);
    }

    #[test]
    fn identity_is_perfect() {
        let sim = Array2::<f64>::eye(5);
        let r = bidirectional_retrieval(sim.view(), &EquivalenceClasses::singletons(5), &[1]).unwrap();
        assert_eq!(r.image_to_text.recall_at[&1], 1.0);
        assert_eq!(r.text_to_image.mrr, 1.0);
    }

    #[test]
    fn classmate_counts_as_hit() {
        let sim = array![[0.5, 0.9, 0.1], [0.2, 0.8, 0.3], [0.0, 0.1, 0.7]];
        let classes = EquivalenceClasses::from_impressions(&["No acute findings.", "no acute findings", "abscess"]);
        let m = retrieval_eval(sim.view(), &classes, &classes, &[1]).unwrap();
        assert_eq!(m.recall_at[&1], 1.0);
        let strict = retrieval_eval(sim.view(), &EquivalenceClasses::singletons(3), &EquivalenceClasses::singletons(3), &[1]).unwrap();
        assert_eq!(strict.first_ranks[0], 2);
    }

    #[test]
    fn ties_broken_by_index_and_missing_positive() {
        let sim = array![[0.5, 0.5, 0.5]];
        let m = retrieval_eval(sim.view(), &EquivalenceClasses::from_ids(vec![7]), &EquivalenceClasses::from_ids(vec![1, 7, 7]), &[1]).unwrap();
        assert_eq!(m.first_ranks, vec![2]);
        assert_eq!(
            retrieval_eval(sim.view(), &EquivalenceClasses::from_ids(vec![9]), &EquivalenceClasses::from_ids(vec![1, 7, 7]), &[1]),
            Err(EvalError::NoPositiveInGallery(0))
        );
    }

    #[test]
    fn random_expectation() {
        // n = 3, m = 1: (1 + 1/2 + 1/3) / 3
        assert!((random_reciprocal_rank(3, 1) - 11.0 / 18.0).abs() < 1e-15);
        // n = 4, m = 2: P(1) = 1/2, P(2) = 1/3, P(3) = 1/6
        assert!((random_reciprocal_rank(4, 2) - (0.5 + 1.0 / 6.0 + 1.0 / 18.0)).abs() < 1e-15);
        assert_eq!(random_reciprocal_rank(5, 5), 1.0);
        // n = 4, m = 2, k = 1: 1/2; k = 2: 1 - (2/4)(1/3) = 5/6
        assert!((random_hit_probability(4, 2, 1) - 0.5).abs() < 1e-15);
        assert!((random_hit_probability(4, 2, 2) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(random_hit_probability(4, 2, 3), 1.0);
        assert!((random_recall(&EquivalenceClasses::singletons(10), 3) - 0.3).abs() < 1e-15);
    }

    fn permutations(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn permutation_matrix_brute_force(perm in (1usize..9).prop_flat_map(permutations)) {
            let n = perm.len();
            // Query q ranks gallery item g at position perm[..] order.
            let sim = Array2::from_shape_fn((n, n), |(q, g)| -(((perm[g] + n - q) % n) as f64));
            let m = retrieval_eval(sim.view(), &EquivalenceClasses::singletons(n), &EquivalenceClasses::singletons(n), &[1, 3]).unwrap();
            let mut brute = 0.0;
            for q in 0..n {
                let better = (0..n).filter(|&g| sim[[q, g]] > sim[[q, q]] || (sim[[q, g]] == sim[[q, q]] && g < q)).count();
                brute += 1.0 / (better + 1) as f64;
            }
            prop_assert!((m.mrr - brute / n as f64).abs() < 1e-12);
            prop_assert!(m.recall_at[&1] <= m.recall_at[&3]);
            prop_assert!(m.mrr <= m.recall_at[&1] + (1.0 - m.recall_at[&1]) / 2.0 + 1e-12);
        }
    }
}
