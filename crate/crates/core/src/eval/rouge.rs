//! ROUGE-N recall and ROUGE-L F-measure over lowercase whitespace tokens.

use std::collections::HashMap;

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// N-gram recall over token sequences: clipped matches divided by the
/// number of reference n-grams; 0 when the reference has none (or n = 0).
pub fn rouge_n_tokens<T: Eq + std::hash::Hash>(reference: &[T], candidate: &[T], n: usize) -> f64 {
    let r = ngram_counts(reference, n);
    let total: usize = r.values().sum();
    if total == 0 {
        return 0.0;
    }
    let c = ngram_counts(candidate, n);
    let matched: usize = r.iter().map(|(g, &cnt)| cnt.min(c.get(g).copied().unwrap_or(0))).sum();
    matched as f64 / total as f64
}

pub fn rouge_n(reference: &str, candidate: &str, n: usize) -> f64 {
    rouge_n_tokens(&tokenize(reference), &tokenize(candidate), n)
}

/// Length of the longest common subsequence.
pub fn lcs_length<T: PartialEq>(xs: &[T], ys: &[T]) -> usize {
    if xs.is_empty() || ys.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; ys.len() + 1];
    let mut cur = vec![0usize; ys.len() + 1];
    for x in xs {
        for (j, y) in ys.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[ys.len()]
}

/// LCS-based F-measure; `beta` weights recall against precision.
pub fn rouge_l_tokens<T: PartialEq>(reference: &[T], candidate: &[T], beta: f64) -> f64 {
    let lcs = lcs_length(reference, candidate);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / candidate.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

pub fn rouge_l(reference: &str, candidate: &str, beta: f64) -> f64 {
    rouge_l_tokens(&tokenize(reference), &tokenize(candidate), beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_n_cases() {
        assert_eq!(rouge_n("a b c d", "a b x d", 1), 0.75);
        assert_eq!(rouge_n("a b c", "A  B\tc", 2), 1.0);
        assert_eq!(rouge_n("a b", "c d", 2), 0.0);
        assert_eq!(rouge_n("a", "a", 2), 0.0);
        assert_eq!(rouge_n("", "a", 1), 0.0);
        // clipping: candidate repeats a reference unigram
        assert_eq!(rouge_n("a b", "a a a", 1), 0.5);
    }

    #[test]
    fn lcs_cases() {
        let t = |s: &str| tokenize(s);
        assert_eq!(lcs_length(&t("a b c"), &t("a b c")), 3);
        assert_eq!(lcs_length(&t("a b c d e"), &t("a c e")), 3);
        assert_eq!(lcs_length(&t("a b"), &t("")), 0);
    }

    #[test]
    fn rouge_l_cases() {
        assert_eq!(rouge_l("a b c", "a b c", 1.0), 1.0);
        assert!((rouge_l("a b c d", "a c b d", 1.0) - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l("a b", "c d", 1.0), 0.0);
        assert_eq!(rouge_l("", "", 1.0), 0.0);
    }
}
