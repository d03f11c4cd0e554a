use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::TrainError;
use crate::labeler::normalize_impression;
use crate::repr::nn::log_sum_exp;

/// Equivalence classes over a batch: `P_i = { j : group[j] == group[i] }`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    groups: Vec<usize>,
}

impl PositiveSets {
    /// Group ids are renumbered by first occurrence.
    pub fn from_groups(groups: &[usize]) -> Self {
        let mut ids = HashMap::new();
        let groups = groups
            .iter()
            .map(|g| {
                let next = ids.len();
                *ids.entry(*g).or_insert(next)
            })
            .collect();
        Self { groups }
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            groups: (0..n).collect(),
        }
    }

    pub fn all(n: usize) -> Self {
        Self { groups: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.groups[i] == self.groups[j]
    }

    pub fn members(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.contains(i, j)).collect()
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }
}

/// Exact equality on normalized impression text.
pub fn build_positive_sets<S: AsRef<str>>(impressions: &[S]) -> PositiveSets {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let groups: Vec<usize> = impressions
        .iter()
        .map(|t| {
            let next = ids.len();
            *ids.entry(normalize_impression(t.as_ref())).or_insert(next)
        })
        .collect();
    PositiveSets { groups }
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// dL/ds
    pub grad_s: Array2<f64>,
    /// dL/d(log tau)
    pub grad_log_tau: f64,
}

fn check(s: ArrayView2<'_, f64>, p: &PositiveSets, tau: f64) -> Result<(), TrainError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TrainError::InvalidTemperature(tau));
    }
    let (n, m) = s.dim();
    if n != m || n != p.len() || n == 0 {
        return Err(TrainError::BatchShape {
            rows: n,
            cols: m,
            positives: p.len(),
        });
    }
    Ok(())
}

/// `lse_k z_k - lse_{j in P} z_j` and its gradient with respect to `z`.
fn term(z: ArrayView1<'_, f64>, pos: impl Fn(usize) -> bool) -> (f64, Vec<f64>) {
    let all = log_sum_exp(z.iter().copied());
    let on_pos = log_sum_exp(z.iter().enumerate().filter(|(j, _)| pos(*j)).map(|(_, v)| *v));
    let grad = z
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let full = (v - all).exp();
            if pos(j) {
                full - (v - on_pos).exp()
            } else {
                full
            }
        })
        .collect();
    (all - on_pos, grad)
}

/// Symmetric multi-positive contrastive loss: a row-wise (volume to text)
/// and a column-wise (text to volume) term per sample, averaged over `2N`.
pub fn multipositive_loss(s: ArrayView2<'_, f64>, p: &PositiveSets, tau: f64) -> Result<f64, TrainError> {
    Ok(multipositive_loss_grad(s, p, tau.ln())?.loss)
}

pub fn multipositive_loss_grad(s: ArrayView2<'_, f64>, p: &PositiveSets, log_tau: f64) -> Result<LossGrad, TrainError> {
    let tau = log_tau.exp();
    check(s, p, tau)?;
    let n = s.nrows();
    let z = s.mapv(|v| v / tau);
    let scale = 1.0 / (2.0 * n as f64);
    let mut loss = 0.0;
    let mut gz = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (row, grow) = term(z.row(i), |j| p.contains(i, j));
        let (col, gcol) = term(z.column(i), |j| p.contains(i, j));
        loss += row + col;
        for k in 0..n {
            gz[[i, k]] += scale * grow[k];
            gz[[k, i]] += scale * gcol[k];
        }
    }
    let grad_log_tau = -(&gz * &z).sum();
    Ok(LossGrad {
        loss: (loss * scale).max(0.0),
        grad_s: gz / tau,
        grad_log_tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Straightforward symmetric InfoNCE with the diagonal as the only positive.
    fn info_nce(s: &Array2<f64>, tau: f64) -> f64 {
        let n = s.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|k| (s[[i, k]] / tau).exp()).sum();
            let col: f64 = (0..n).map(|k| (s[[k, i]] / tau).exp()).sum();
            let pos = (s[[i, i]] / tau).exp();
            total += -(pos / row).ln() - (pos / col).ln();
        }
        total / (2.0 * n as f64)
    }

    fn sim(n: usize, vals: Vec<f64>) -> Array2<f64> {
        Array2::from_shape_vec((n, n), vals).unwrap()
    }

    #[test]
    fn positive_set_examples() {
        let p = build_positive_sets(&["a", "b", "c"]);
        assert_eq!(p, PositiveSets::singletons(3));
        let p = build_positive_sets(&["a", "a", "b"]);
        assert_eq!(p.members(0), vec![0, 1]);
        assert_eq!(p.members(1), vec![0, 1]);
        assert_eq!(p.members(2), vec![2]);
        let p = build_positive_sets(&["No acute findings.", "no acute findings"]);
        assert!(p.contains(0, 1));
    }

    #[test]
    fn loss_examples() {
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let l = multipositive_loss(s.view(), &PositiveSets::singletons(2), 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
        let l = multipositive_loss(s.view(), &PositiveSets::all(2), 0.07).unwrap();
        assert!(l.abs() <= 1e-12);
        assert!(matches!(
            multipositive_loss(s.view(), &PositiveSets::all(2), 0.0),
            Err(TrainError::InvalidTemperature(_))
        ));
        assert!(multipositive_loss(s.view(), &PositiveSets::all(3), 1.0).is_err());
    }

    #[test]
    fn flat_in_tau_at_zero_loss() {
        let s = Array2::from_elem((3, 3), 0.4);
        let g = multipositive_loss_grad(s.view(), &PositiveSets::all(3), 0.07f64.ln()).unwrap();
        assert_eq!(g.grad_log_tau, 0.0);
        assert!(g.grad_s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let s = array![[0.9, 0.1, -0.3], [0.2, 0.5, 0.4], [-0.7, 0.3, 0.8]];
        let p = PositiveSets::from_groups(&[0, 1, 0]);
        let lt = 0.3f64.ln();
        let g = multipositive_loss_grad(s.view(), &p, lt).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut a = s.clone();
                a[[i, j]] += h;
                let mut b = s.clone();
                b[[i, j]] -= h;
                let num = (multipositive_loss_grad(a.view(), &p, lt).unwrap().loss
                    - multipositive_loss_grad(b.view(), &p, lt).unwrap().loss)
                    / (2.0 * h);
                assert!((num - g.grad_s[[i, j]]).abs() < 1e-8);
            }
        }
        let num = (multipositive_loss_grad(s.view(), &p, lt + h).unwrap().loss
            - multipositive_loss_grad(s.view(), &p, lt - h).unwrap().loss)
            / (2.0 * h);
        assert!((num - g.grad_log_tau).abs() < 1e-8);
    }

    fn batch() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(-1.0f64..1.0, n * n),
                proptest::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn singleton_equals_info_nce((n, vals, _) in batch(), tau in 0.02f64..2.0) {
            let s = sim(n, vals);
            let l = multipositive_loss(s.view(), &PositiveSets::singletons(n), tau).unwrap();
            prop_assert!((l - info_nce(&s, tau)).abs() <= 1e-9);
        }

        #[test]
        fn nonnegative_and_scale_invariant((n, vals, groups) in batch(), tau in 0.05f64..1.0, c in 0.1f64..10.0) {
            let s = sim(n, vals);
            let p = PositiveSets::from_groups(&groups);
            let l = multipositive_loss(s.view(), &p, tau).unwrap();
            prop_assert!(l >= 0.0);
            let scaled = s.mapv(|v| v * c);
            let l2 = multipositive_loss(scaled.view(), &p, tau * c).unwrap();
            prop_assert!((l - l2).abs() <= 1e-9 * (1.0 + l.abs()));
        }

        #[test]
        fn relabeling_invariant((n, vals, groups) in batch(), rot in 0usize..8) {
            let s = sim(n, vals);
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let ps = Array2::from_shape_fn((n, n), |(i, j)| s[[perm[i], perm[j]]]);
            let pg: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
            let a = multipositive_loss(s.view(), &PositiveSets::from_groups(&groups), 0.1).unwrap();
            let b = multipositive_loss(ps.view(), &PositiveSets::from_groups(&pg), 0.1).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn merging_groups_never_increases((n, vals, groups) in batch(), tau in 0.05f64..1.0) {
            let s = sim(n, vals);
            let p = PositiveSets::from_groups(&groups);
            let merged: Vec<usize> = groups.iter().map(|&g| if g == 1 { 0 } else { g }).collect();
            let a = multipositive_loss(s.view(), &p, tau).unwrap();
            let b = multipositive_loss(s.view(), &PositiveSets::from_groups(&merged), tau).unwrap();
            prop_assert!(b <= a + 1e-12);
        }
    }
}
