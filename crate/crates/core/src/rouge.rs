//! ROUGE-N, ROUGE-L and ROUGE-SU4 over token sequences, plus the checker
//! that compares summary-level ROUGE-N recall with its importance-minus-
//! pairwise-redundancy decomposition.
//!
//! Everything is generic over the token type so the metrics work on
//! [`Token`](crate::corpus::Token) slices as well as plain `&str` slices.

use std::collections::HashMap;
use std::hash::Hash;

/// Precision / recall / F1 for one metric variant.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self::from_precision_recall(
            ratio(overlap, candidate_total),
            ratio(overlap, reference_total),
        )
    }
}

/// Occurrence counts of n-grams in one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramCounts<'a, T: Eq + Hash> {
    counts: HashMap<&'a [T], usize>,
    total: usize,
}

impl<'a, T: Eq + Hash> NGramCounts<'a, T> {
    pub fn new(seq: &'a [T], n: usize) -> Self {
        assert!(n >= 1, "n-gram order must be at least 1");
        let mut counts = HashMap::new();
        let mut total = 0;
        if seq.len() >= n {
            for gram in seq.windows(n) {
                *counts.entry(gram).or_insert(0) += 1;
                total += 1;
            }
        }
        Self { counts, total }
    }

    /// Counts summed over several sequences; n-grams never span two sequences.
    pub fn over<S: AsRef<[T]>>(seqs: &'a [S], n: usize) -> Self {
        let mut acc = Self {
            counts: HashMap::new(),
            total: 0,
        };
        for s in seqs {
            let c = Self::new(s.as_ref(), n);
            acc.total += c.total;
            for (g, k) in c.counts {
                *acc.counts.entry(g).or_insert(0) += k;
            }
        }
        acc
    }

    pub fn get(&self, gram: &[T]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    /// Total number of n-gram tokens.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [T], usize)> + '_ {
        self.counts.iter().map(|(g, c)| (*g, *c))
    }

    /// Σ_g min(self(g), other(g)).
    pub fn clipped_overlap(&self, other: &Self) -> usize {
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .map(|(g, &c)| c.min(large.get(g)))
            .sum()
    }
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = NGramCounts::new(candidate, n);
    let refc = NGramCounts::new(reference, n);
    RougeScore::from_counts(cand.clipped_overlap(&refc), cand.total(), refc.total())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L. Multi-sentence summaries are scored on their
/// concatenated token streams.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    let lcs = lcs_len(candidate, reference);
    RougeScore::from_counts(lcs, candidate.len(), reference.len())
}

/// Mean ROUGE-L F1 over unordered sentence pairs; 0 with fewer than two
/// sentences.
pub fn pairwise_redundancy<T: Eq, S: AsRef<[T]>>(sentences: &[S]) -> f64 {
    let n = sentences.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            total += rouge_l(sentences[a].as_ref(), sentences[b].as_ref()).f1;
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Maximum index distance of a skip bigram in ROUGE-SU4.
pub const SU4_MAX_DISTANCE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SuUnit<'a, T> {
    Unigram(&'a T),
    Skip(&'a T, &'a T),
}

fn su_units<T: Eq + Hash>(seq: &[T], max_distance: usize) -> (HashMap<SuUnit<'_, T>, usize>, usize) {
    let mut counts = HashMap::new();
    let mut total = 0;
    for (i, a) in seq.iter().enumerate() {
        *counts.entry(SuUnit::Unigram(a)).or_insert(0) += 1;
        total += 1;
        for b in seq.iter().skip(i + 1).take(max_distance) {
            *counts.entry(SuUnit::Skip(a, b)).or_insert(0) += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// ROUGE-SU4: unigrams plus skip bigrams `(x_i, x_j)` with `j − i ≤ 4`.
pub fn rouge_su4<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    let (cand, cand_total) = su_units(candidate, SU4_MAX_DISTANCE);
    let (refc, ref_total) = su_units(reference, SU4_MAX_DISTANCE);
    let overlap = cand
        .iter()
        .map(|(u, &c)| c.min(refc.get(u).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, cand_total, ref_total)
}

/// Result of [`decoupling_check`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Decoupling {
    /// Summary-level ROUGE-N recall ρ(S).
    pub exact: f64,
    /// Σ_i ρ({s_i}) − Σ_{a<b} ε(a ∧ b).
    pub approx: f64,
    pub gap: f64,
}

/// Compares ROUGE-N recall of a multi-sentence summary against the
/// first-order inclusion–exclusion expansion (per-sentence importance minus
/// pairwise clipped-overlap redundancy). For at most two sentences the
/// expansion is exact and `gap` is exactly zero: both sides are accumulated
/// as integer counts and divided once.
pub fn decoupling_check<T, S>(summary: &[S], gold: &[T], n: usize) -> Decoupling
where
    T: Eq + Hash,
    S: AsRef<[T]>,
{
    let gold_counts = NGramCounts::new(gold, n);
    let r_n = gold_counts.total();
    if r_n == 0 {
        return Decoupling {
            exact: 0.0,
            approx: 0.0,
            gap: 0.0,
        };
    }
    let exact_count = NGramCounts::over(summary, n).clipped_overlap(&gold_counts) as i64;

    let per_sentence: Vec<NGramCounts<'_, T>> =
        summary.iter().map(|s| NGramCounts::new(s.as_ref(), n)).collect();
    // C_{Y,S*}(g) = min(F_Y(g), F_{S*}(g)) for each gold n-gram g.
    let contribution =
        |y: &NGramCounts<'_, T>, g: &[T], f_gold: usize| -> i64 { y.get(g).min(f_gold) as i64 };

    let importance: i64 = per_sentence
        .iter()
        .map(|s| s.clipped_overlap(&gold_counts) as i64)
        .sum();
    let mut redundancy: i64 = 0;
    for a in 0..per_sentence.len() {
        for b in (a + 1)..per_sentence.len() {
            for (g, f_gold) in gold_counts.iter() {
                let c = contribution(&per_sentence[a], g, f_gold)
                    + contribution(&per_sentence[b], g, f_gold)
                    - f_gold as i64;
                redundancy += c.max(0);
            }
        }
    }
    let exact = exact_count as f64 / r_n as f64;
    let approx = (importance - redundancy) as f64 / r_n as f64;
    Decoupling {
        exact,
        approx,
        gap: (exact - approx).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_redundancy_by_hand() {
        let t = |x: &str| x.split(' ').map(str::to_owned).collect::<Vec<_>>();
        assert_eq!(pairwise_redundancy::<String, Vec<String>>(&[t("a b")]), 0.0);
        assert!((pairwise_redundancy(&[t("a b c"), t("a c")]) - 0.8).abs() < 1e-12);
        // duplicated pair scores 1, the two disjoint pairs 0
        assert!((pairwise_redundancy(&[t("a b"), t("a b"), t("x y")]) - 1.0 / 3.0).abs() < 1e-12);
    }
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_n_hand_counts() {
        let s = rouge_n(&w("the cat sat"), &w("the cat"), 1);
        assert_relative_eq!(s.precision, 2.0 / 3.0);
        assert_relative_eq!(s.recall, 1.0);
        assert_relative_eq!(s.f1, 0.8);
        let s = rouge_n(&w("a b c"), &w("a b c"), 2);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n(&w("a b"), &w("c d"), 1), RougeScore::default());
        // clipping: candidate repeats "the"
        let s = rouge_n(&w("the the the"), &w("the cat"), 1);
        assert_relative_eq!(s.precision, 1.0 / 3.0);
        assert_relative_eq!(s.recall, 0.5);
        // n longer than either side
        assert_eq!(rouge_n(&w("a"), &w("a"), 2), RougeScore::default());
    }

    #[test]
    fn rouge_l_hand_lcs() {
        let s = rouge_l(&w("a b c d"), &w("a c d"));
        assert_relative_eq!(s.precision, 0.75);
        assert_relative_eq!(s.recall, 1.0);
        assert_relative_eq!(s.f1, 6.0 / 7.0);
        assert_eq!(rouge_l(&w("a b"), &w("a b")).f1, 1.0);
        assert_eq!(rouge_l(&w(""), &w("a b")), RougeScore::default());
        assert_eq!(rouge_l(&w("a"), &w("")), RougeScore::default());
    }

    #[test]
    fn su4_units_respect_distance() {
        assert_eq!(rouge_su4(&w("a b"), &w("a b")).f1, 1.0);
        assert_eq!(rouge_su4(&w("a b"), &w("c d")).f1, 0.0);
        let far = w("a x x x x b");
        let (units, total) = su_units(&far, SU4_MAX_DISTANCE);
        assert!(!units.contains_key(&SuUnit::Skip(&"a", &"b")));
        let near = w("a x x x b");
        let (units, _) = su_units(&near, SU4_MAX_DISTANCE);
        assert!(units.contains_key(&SuUnit::Skip(&"a", &"b")));
        // 6 unigrams + skip pairs: positions 0..4 each pair with up to 4 followers.
        assert_eq!(total, 6 + 4 + 4 + 3 + 2 + 1);
    }

    #[test]
    fn decoupling_hand_cases() {
        let gold = w("a b c");
        let single = vec![w("a b")];
        let d = decoupling_check(&single, &gold, 1);
        assert_eq!(d.gap, 0.0);
        assert_relative_eq!(d.exact, 2.0 / 3.0);

        let disjoint = vec![w("a"), w("b")];
        let d = decoupling_check(&disjoint, &gold, 1);
        assert_eq!(d.gap, 0.0);
        assert_relative_eq!(d.exact, 2.0 / 3.0);

        // Three sentences each holding the single gold unigram: ρ(S) = 1 but
        // Σ imp = 3 and three pairwise ε terms of 1 each → approx 0.
        let three = vec![w("a"), w("a x"), w("y a")];
        let d = decoupling_check(&three, &w("a"), 1);
        assert_eq!(d.exact, 1.0);
        assert_eq!(d.approx, 0.0);
        assert_eq!(d.gap, 1.0);
    }

    fn brute_force_lcs(a: &[u8], b: &[u8]) -> usize {
        // Enumerate every subsequence of `a` and test whether it embeds in `b`.
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    proptest! {
        #[test]
        fn precision_recall_swap(a in proptest::collection::vec(0u8..4, 0..10),
                                 b in proptest::collection::vec(0u8..4, 0..10),
                                 n in 1usize..4) {
            prop_assert_eq!(rouge_n(&a, &b, n).precision, rouge_n(&b, &a, n).recall);
            prop_assert_eq!(rouge_l(&a, &b).precision, rouge_l(&b, &a).recall);
            prop_assert_eq!(rouge_su4(&a, &b).precision, rouge_su4(&b, &a).recall);
        }

        #[test]
        fn appending_reference_never_lowers_recall(a in proptest::collection::vec(0u8..4, 0..10),
                                                    b in proptest::collection::vec(0u8..4, 1..10),
                                                    n in 1usize..3) {
            let mut extended = a.clone();
            extended.extend_from_slice(&b);
            prop_assert!(rouge_n(&extended, &b, n).recall >= rouge_n(&a, &b, n).recall);
            prop_assert!(rouge_l(&extended, &b).recall >= rouge_l(&a, &b).recall);
        }

        #[test]
        fn lcs_matches_enumeration(a in proptest::collection::vec(0u8..3, 0..7),
                                   b in proptest::collection::vec(0u8..3, 0..7)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_force_lcs(&a, &b));
        }

        #[test]
        fn scores_lie_in_unit_interval(a in proptest::collection::vec(0u8..4, 0..12),
                                       b in proptest::collection::vec(0u8..4, 0..12)) {
            for s in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b), rouge_su4(&a, &b)] {
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn decoupling_exact_for_two_sentences(
            s1 in proptest::collection::vec(0u8..4, 0..8),
            s2 in proptest::collection::vec(0u8..4, 0..8),
            gold in proptest::collection::vec(0u8..4, 1..10),
            n in 1usize..3,
            two in proptest::bool::ANY,
        ) {
            let summary = if two { vec![s1, s2] } else { vec![s1] };
            let d = decoupling_check(&summary, &gold, n);
            prop_assert_eq!(d.gap, 0.0);
        }
    }
}
