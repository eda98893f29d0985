//! Seeded synthetic corpora for tests, examples and desk-scale experiments.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{Cluster, Token};
use crate::seed::SeedTree;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u"];

/// A deterministic pseudo-word vocabulary of `size` distinct words.
pub fn vocabulary(size: usize) -> Vec<Token> {
    let mut words = Vec::with_capacity(size);
    'outer: for syllables in 2.. {
        let mut idx = vec![0usize; syllables * 2];
        loop {
            let mut w = String::new();
            for s in 0..syllables {
                w.push_str(ONSETS[idx[2 * s] % ONSETS.len()]);
                w.push_str(NUCLEI[idx[2 * s + 1] % NUCLEI.len()]);
            }
            words.push(Token::new(&w).expect("pseudo-word is a valid token"));
            if words.len() == size {
                break 'outer;
            }
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == idx.len() {
                    continue 'outer;
                }
                idx[pos] += 1;
                let radix = if pos % 2 == 0 { ONSETS.len() } else { NUCLEI.len() };
                if idx[pos] < radix {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }
    words
}

/// Parameters of [`duplicated_article_corpus`].
#[derive(Debug, Clone)]
pub struct DuplicatedCorpusSpec {
    pub clusters: usize,
    /// Noisy copies of the base article per cluster.
    pub copies: usize,
    pub sentences_per_article: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub vocab_size: usize,
    /// Per-token replacement probability applied independently to each copy.
    pub noise: f64,
    /// The gold summary is the first `gold_sentences` sentences of the base article.
    pub gold_sentences: usize,
}

impl Default for DuplicatedCorpusSpec {
    fn default() -> Self {
        Self {
            clusters: 50,
            copies: 3,
            sentences_per_article: 5,
            min_sentence_len: 6,
            max_sentence_len: 10,
            vocab_size: 300,
            noise: 0.1,
            gold_sentences: 2,
        }
    }
}

/// Clusters made of one base article duplicated `copies` times with token
/// noise. Every source sentence appears once per copy, so an extractor that
/// ignores what it already picked produces redundant summaries.
pub fn duplicated_article_corpus(spec: &DuplicatedCorpusSpec, seed: u64) -> Vec<Cluster> {
    let vocab = vocabulary(spec.vocab_size);
    let root = SeedTree::new(seed).split("duplicated-corpus");
    (0..spec.clusters)
        .map(|c| {
            let mut rng = root.split_index("cluster", c as u64).rng("text");
            let base: Vec<Vec<Token>> = (0..spec.sentences_per_article)
                .map(|_| {
                    let len = rng.random_range(spec.min_sentence_len..=spec.max_sentence_len);
                    (0..len)
                        .map(|_| vocab.choose(&mut rng).unwrap().clone())
                        .collect()
                })
                .collect();
            let articles = (0..spec.copies)
                .map(|_| {
                    base.iter()
                        .map(|sentence| {
                            sentence
                                .iter()
                                .map(|tok| {
                                    if rng.random_bool(spec.noise) {
                                        vocab.choose(&mut rng).unwrap().clone()
                                    } else {
                                        tok.clone()
                                    }
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let gold = base.iter().take(spec.gold_sentences).cloned().collect();
            Cluster::new(format!("dup-{c:03}"), articles, gold).expect("generated cluster is valid")
        })
        .collect()
}

/// Small clusters of distinct articles whose gold summary is the lead
/// sentence of each of the first two articles.
pub fn toy_corpus(clusters: usize, seed: u64) -> Vec<Cluster> {
    let vocab = vocabulary(120);
    let root = SeedTree::new(seed).split("toy-corpus");
    (0..clusters)
        .map(|c| {
            let mut rng = root.split_index("cluster", c as u64).rng("text");
            let articles: Vec<Vec<Vec<Token>>> = (0..2)
                .map(|_| {
                    (0..3)
                        .map(|_| {
                            let len = rng.random_range(4..=7);
                            (0..len)
                                .map(|_| vocab.choose(&mut rng).unwrap().clone())
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let gold = vec![articles[0][0].clone(), articles[1][0].clone()];
            Cluster::new(format!("toy-{c:03}"), articles, gold).expect("generated cluster is valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_distinct() {
        let v = vocabulary(500);
        let set: std::collections::HashSet<_> = v.iter().collect();
        assert_eq!(set.len(), 500);
    }

    #[test]
    fn duplicated_corpus_shape() {
        let spec = DuplicatedCorpusSpec {
            clusters: 4,
            ..Default::default()
        };
        let corpus = duplicated_article_corpus(&spec, 3);
        assert_eq!(corpus.len(), 4);
        for c in &corpus {
            assert_eq!(c.num_articles(), 3);
            assert_eq!(c.num_sentences(), 15);
            assert_eq!(c.gold().len(), 2);
        }
        assert_eq!(corpus, duplicated_article_corpus(&spec, 3));
        assert_ne!(corpus, duplicated_article_corpus(&spec, 4));
    }
}
