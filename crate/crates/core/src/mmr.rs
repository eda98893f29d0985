//! Greedy iterative MMR baseline with pluggable importance and redundancy
//! scorers.

use std::collections::HashMap;

use crate::corpus::{Cluster, Sentence, Token};
use crate::rouge;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmrConfig {
    pub lambda: f64,
    /// Token budget.
    pub max_len: usize,
}

impl MmrConfig {
    pub fn new(lambda: f64, max_len: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("mmr lambda {lambda} outside [0, 1]")));
        }
        if max_len == 0 {
            return Err(Error::Config("mmr max_len must be at least 1".into()));
        }
        Ok(Self { lambda, max_len })
    }
}

/// Importance and redundancy scorers.
pub struct ScorerPair<I, R> {
    pub importance: I,
    pub redundancy: R,
}

impl<I, R> ScorerPair<I, R>
where
    I: Fn(&Sentence) -> f64,
    R: Fn(&Sentence, &Sentence) -> f64,
{
    pub fn new(importance: I, redundancy: R) -> Self {
        Self {
            importance,
            redundancy,
        }
    }
}

/// Greedy MMR selection. Returns global sentence indices in extraction order.
///
/// Each round picks the pool sentence maximizing
/// `λ·imp(s) − (1−λ)·max_{t∈S} red(s, t)` (the max over an empty summary is
/// 0), ties to the lowest index. Rounds continue while the summary holds
/// fewer than `max_len` tokens and the pool is non-empty.
pub fn greedy_mmr_indices<I, R>(cluster: &Cluster, config: MmrConfig, scorers: &ScorerPair<I, R>) -> Vec<usize>
where
    I: Fn(&Sentence) -> f64,
    R: Fn(&Sentence, &Sentence) -> f64,
{
    let sentences = cluster.sentences();
    let importance: Vec<f64> = sentences.iter().map(|s| (scorers.importance)(s)).collect();
    // running max redundancy against the summary, per candidate
    let mut max_red = vec![0.0f64; sentences.len()];
    let mut in_pool = vec![true; sentences.len()];
    let mut picked = Vec::new();
    let mut len = 0;
    while len < config.max_len {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..sentences.len() {
            if !in_pool[i] {
                continue;
            }
            let score = config.lambda * importance[i] - (1.0 - config.lambda) * max_red[i];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let Some((pick, _)) = best else { break };
        in_pool[pick] = false;
        picked.push(pick);
        len += sentences[pick].len();
        for (i, s) in sentences.iter().enumerate() {
            if in_pool[i] {
                max_red[i] = max_red[i].max((scorers.redundancy)(s, &sentences[pick]));
            }
        }
    }
    picked
}

/// Greedy MMR selection returning the sentences themselves.
pub fn greedy_mmr<'c, I, R>(cluster: &'c Cluster, config: MmrConfig, scorers: &ScorerPair<I, R>) -> Vec<&'c Sentence>
where
    I: Fn(&Sentence) -> f64,
    R: Fn(&Sentence, &Sentence) -> f64,
{
    greedy_mmr_indices(cluster, config, scorers)
        .into_iter()
        .map(|i| cluster.sentence(i))
        .collect()
}

/// Mean tf-idf of a sentence's tokens, with term frequency counted over the
/// whole cluster and `idf = ln(n_articles / article_frequency)`. Tokens that
/// never occur in the cluster contribute 0.
pub fn tfidf_importance(cluster: &Cluster) -> impl Fn(&Sentence) -> f64 + Send + Sync + 'static {
    let mut tf: HashMap<Token, f64> = HashMap::new();
    let mut df: HashMap<Token, usize> = HashMap::new();
    for a in 0..cluster.num_articles() {
        let mut seen = std::collections::HashSet::new();
        for s in cluster.article(a) {
            for t in &s.tokens {
                *tf.entry(t.clone()).or_insert(0.0) += 1.0;
                if seen.insert(t) {
                    *df.entry(t.clone()).or_insert(0) += 1;
                }
            }
        }
    }
    let n_articles = cluster.num_articles() as f64;
    let weight: HashMap<Token, f64> = tf
        .into_iter()
        .map(|(t, count)| {
            let idf = (n_articles / df[&t] as f64).ln();
            (t, count * idf)
        })
        .collect();
    move |s: &Sentence| {
        if s.tokens.is_empty() {
            return 0.0;
        }
        s.tokens.iter().map(|t| weight.get(t).copied().unwrap_or(0.0)).sum::<f64>() / s.tokens.len() as f64
    }
}

/// Sentence-level ROUGE-L F1 between two sentences.
pub fn rouge_l_redundancy() -> impl Fn(&Sentence, &Sentence) -> f64 + Send + Sync + Copy + 'static {
    |a: &Sentence, b: &Sentence| rouge::rouge_l(&a.tokens, &b.tokens).f1
}
