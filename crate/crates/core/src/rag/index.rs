use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::RagError;

const NORM_TOLERANCE: f64 = 1e-6;

/// Unit-normalized training volume embeddings with aligned study ids,
/// impressions and unit impression-text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    volumes: Array2<f64>,
    texts: Array2<f64>,
    study_ids: Vec<String>,
    impressions: Vec<String>,
}

fn check_rows(m: &Array2<f64>) -> Result<(), RagError> {
    for (i, r) in m.rows().into_iter().enumerate() {
        if (r.dot(&r).sqrt() - 1.0).abs() > NORM_TOLERANCE {
            return Err(RagError::NotNormalized(i));
        }
    }
    Ok(())
}

impl EmbeddingIndex {
    pub fn new(
        volumes: Array2<f64>,
        texts: Array2<f64>,
        study_ids: Vec<String>,
        impressions: Vec<String>,
    ) -> Result<Self, RagError> {
        let n = volumes.nrows();
        if texts.nrows() != n || study_ids.len() != n || impressions.len() != n {
            return Err(RagError::LengthMismatch(format!(
                "{n} volumes, {} texts, {} ids, {} impressions",
                texts.nrows(),
                study_ids.len(),
                impressions.len()
            )));
        }
        check_rows(&volumes)?;
        check_rows(&texts)?;
        Ok(Self {
            volumes,
            texts,
            study_ids,
            impressions,
        })
    }

    pub fn len(&self) -> usize {
        self.volumes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn study_id(&self, row: usize) -> &str {
        &self.study_ids[row]
    }

    pub fn impression(&self, row: usize) -> &str {
        &self.impressions[row]
    }

    pub fn text_embeddings(&self) -> ArrayView2<'_, f64> {
        self.texts.view()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub row: usize,
    pub study_id: String,
    pub impression: String,
    pub similarity: f64,
}

/// Descending cosine similarity, ties by index order.
pub fn index_topk(index: &EmbeddingIndex, query: ArrayView1<'_, f64>, k: usize) -> Result<Vec<Retrieved>, RagError> {
    if index.is_empty() {
        return Err(RagError::EmptyIndex);
    }
    if k == 0 || k > index.len() {
        return Err(RagError::InvalidK {
            k,
            available: index.len(),
        });
    }
    let sims = index.volumes.dot(&query);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|row| Retrieved {
            row,
            study_id: index.study_ids[row].clone(),
            impression: index.impressions[row].clone(),
            similarity: sims[row],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmrConfig {
    pub enabled: bool,
    pub pool_size: usize,
    pub k: usize,
    pub lambda: f64,
}

impl Default for MmrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pool_size: 50,
            k: 5,
            lambda: 0.7,
        }
    }
}

impl MmrConfig {
    pub fn validate(&self) -> Result<(), RagError> {
        if self.k == 0 || self.k > self.pool_size || !(0.0..=1.0).contains(&self.lambda) {
            return Err(RagError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Greedy maximal marginal relevance. `pool_texts` holds the unit text
/// embedding of each pool entry; relevance is each entry's `similarity`.
pub fn mmr_select(
    pool: &[Retrieved],
    pool_texts: ArrayView2<'_, f64>,
    lambda: f64,
    k: usize,
) -> Result<Vec<Retrieved>, RagError> {
    if pool.is_empty() {
        return Err(RagError::EmptyPool);
    }
    if pool_texts.nrows() != pool.len() {
        return Err(RagError::LengthMismatch(format!(
            "{} pool entries, {} text embeddings",
            pool.len(),
            pool_texts.nrows()
        )));
    }
    let cand_sim = pool_texts.dot(&pool_texts.t());
    let mut chosen: Vec<usize> = Vec::new();
    let mut redundancy = vec![f64::NEG_INFINITY; pool.len()];
    while chosen.len() < k.min(pool.len()) {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..pool.len() {
            if chosen.contains(&c) {
                continue;
            }
            let score = if chosen.is_empty() {
                pool[c].similarity
            } else {
                lambda * pool[c].similarity - (1.0 - lambda) * redundancy[c]
            };
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((c, score));
            }
        }
        let (pick, _) = best.expect("unchosen candidate exists");
        chosen.push(pick);
        for c in 0..pool.len() {
            redundancy[c] = redundancy[c].max(cand_sim[[c, pick]]);
        }
    }
    Ok(chosen.into_iter().map(|i| pool[i].clone()).collect())
}

/// Top-k, or MMR over a top-`pool_size` pool when enabled.
pub fn retrieve(index: &EmbeddingIndex, query: ArrayView1<'_, f64>, cfg: &MmrConfig) -> Result<Vec<Retrieved>, RagError> {
    cfg.validate()?;
    if index.is_empty() {
        return Err(RagError::EmptyIndex);
    }
    let k = cfg.k.min(index.len());
    if !cfg.enabled {
        return index_topk(index, query, k);
    }
    let pool = index_topk(index, query, cfg.pool_size.min(index.len()))?;
    let rows: Vec<usize> = pool.iter().map(|r| r.row).collect();
    let texts = index.texts.select(ndarray::Axis(0), &rows);
    mmr_select(&pool, texts.view(), cfg.lambda, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::nn::gaussian_matrix;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    fn index(volumes: Array2<f64>, texts: Array2<f64>) -> EmbeddingIndex {
        let n = volumes.nrows();
        EmbeddingIndex::new(
            volumes,
            texts,
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| format!("impression {i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn topk_examples() {
        // Rows at known cosines (0.9, 0.5, 0.1) to the query e1.
        let c = [0.9f64, 0.5, 0.1];
        let vols = Array2::from_shape_fn((3, 2), |(i, j)| if j == 0 { c[i] } else { (1.0 - c[i] * c[i]).sqrt() });
        let idx = index(vols.clone(), vols.clone());
        let q = array![1.0, 0.0];
        let top = index_topk(&idx, q.view(), 2).unwrap();
        assert_eq!(top.iter().map(|r| r.row).collect::<Vec<_>>(), vec![0, 1]);
        assert!((top[0].similarity - 0.9).abs() < 1e-12);
        let own = index_topk(&idx, vols.row(2), 3).unwrap();
        assert_eq!(own[0].row, 2);
        assert!((own[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(own.len(), 3);
        assert!(matches!(index_topk(&idx, q.view(), 4), Err(RagError::InvalidK { .. })));
    }

    #[test]
    fn validation() {
        assert!(matches!(
            EmbeddingIndex::new(array![[2.0, 0.0]], array![[1.0, 0.0]], vec!["a".into()], vec!["x".into()]),
            Err(RagError::NotNormalized(0))
        ));
        let empty = EmbeddingIndex::new(Array2::zeros((0, 2)), Array2::zeros((0, 2)), vec![], vec![]).unwrap();
        assert!(matches!(index_topk(&empty, array![1.0, 0.0].view(), 1), Err(RagError::EmptyIndex)));
        assert!(matches!(mmr_select(&[], Array2::zeros((0, 2)).view(), 0.7, 1), Err(RagError::EmptyPool)));
    }

    #[test]
    fn near_duplicates_are_split() {
        let pool: Vec<Retrieved> = [0.95, 0.94, 0.80]
            .iter()
            .enumerate()
            .map(|(i, &s)| Retrieved {
                row: i,
                study_id: format!("s{i}"),
                impression: String::new(),
                similarity: s,
            })
            .collect();
        // Items 0 and 1 share a text embedding; item 2 is orthogonal.
        let texts = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        // Second pick: item 1 scores 0.7*0.94 - 0.3*1 = 0.358, item 2 scores 0.7*0.80 - 0 = 0.56.
        let picked = mmr_select(&pool, texts.view(), 0.7, 2).unwrap();
        assert_eq!(picked.iter().map(|r| r.row).collect::<Vec<_>>(), vec![0, 2]);
        let plain = mmr_select(&pool, texts.view(), 1.0, 2).unwrap();
        assert_eq!(plain.iter().map(|r| r.row).collect::<Vec<_>>(), vec![0, 1]);
        let one = mmr_select(&pool, texts.view(), 0.0, 1).unwrap();
        assert_eq!(one[0].row, 0);
    }

    proptest! {
        #[test]
        fn lambda_one_is_topk(seed in 0u64..10_000, n in 1usize..60, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = index(unit_rows(gaussian_matrix(n, 6, 1.0, &mut rng)), unit_rows(gaussian_matrix(n, 6, 1.0, &mut rng)));
            let q: Array1<f64> = unit_rows(gaussian_matrix(1, 6, 1.0, &mut rng)).row(0).to_owned();
            let cfg = MmrConfig { enabled: true, pool_size: 50, k, lambda: 1.0 };
            let got = retrieve(&idx, q.view(), &cfg).unwrap();
            let want = index_topk(&idx, q.view(), k.min(n)).unwrap();
            prop_assert_eq!(&got, &want);
            prop_assert!(want.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            let div = retrieve(&idx, q.view(), &MmrConfig { lambda: 0.7, ..cfg }).unwrap();
            let mut rows: Vec<usize> = div.iter().map(|r| r.row).collect();
            rows.sort();
            rows.dedup();
            prop_assert_eq!(rows.len(), div.len());
            let pool = index_topk(&idx, q.view(), 50.min(n)).unwrap();
            prop_assert!(div.iter().all(|r| pool.contains(r)));
        }
    }
}
