use std::collections::HashMap;

use crate::repr::text_tokens;

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over lowercase whitespace tokens.
pub fn rouge_l_f1(candidate: &str, reference: &str) -> f64 {
    let c = text_tokens(candidate);
    let r = text_tokens(reference);
    let l = lcs(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU on a 0-100 scale: orders 1-4, clipped counts, brevity
/// penalty, and the k-th zero-match order replaced by `1 / 2^k`.
pub fn bleu_sentence(candidate: &str, reference: &str) -> f64 {
    let c = text_tokens(candidate);
    let r = text_tokens(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut zeros = 0;
    for n in 1..=4 {
        let total = c.len().saturating_sub(n - 1);
        let cand = ngrams(&c, n);
        let refs = ngrams(&r, n);
        let matched: usize = cand.iter().map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 {
            zeros += 1;
            0.5f64.powi(zeros)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - r.len() as f64 / c.len() as f64).exp().min(1.0);
    100.0 * bp * (log_sum / 4.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f1("the cat", "the cat sat"), 0.8);
        assert_eq!(rouge_l_f1("Active ileitis.", "active ileitis"), 1.0);
        assert_eq!(rouge_l_f1("a b", "c d"), 0.0);
        assert_eq!(rouge_l_f1("", ""), 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu_sentence("no acute findings today", "no acute findings today") - 100.0).abs() < 1e-12);
        assert_eq!(bleu_sentence("", "a b c d"), 0.0);
        // p1 = 3/4, p2 = 1/3, p3 -> 1/2, p4 -> 1/4; product 1/32; BP = 1.
        let golden = 100.0 * 2f64.powf(-5.0 / 4.0);
        assert!((bleu_sentence("a b c d", "a b x d") - golden).abs() < 1e-12);
        assert!((bleu_sentence("a b c d", "a b x d") - 42.044820762685725).abs() < 1e-9);
        // Short candidate: p1 = p2 = 1, p3 -> 1/2, p4 -> 1/4; BP = e^{1 - 4/2}.
        let short = 100.0 * (-1.0f64).exp() * (1.0f64 / 8.0).powf(0.25);
        assert!((bleu_sentence("a b", "a b c d") - short).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bounded(a in "[abc ]{0,20}", b in "[abc ]{0,20}") {
            let r = rouge_l_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            let s = bleu_sentence(&a, &b);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
            prop_assert_eq!(rouge_l_f1(&a, &b), rouge_l_f1(&b, &a));
        }
    }
}
