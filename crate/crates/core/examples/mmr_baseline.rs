//! Greedy MMR on a duplicated-article cluster at several λ values.

use pobrl_core::corpus::synthetic::{duplicated_article_corpus, DuplicatedCorpusSpec};
use pobrl_core::mmr::{greedy_mmr_indices, rouge_l_redundancy, tfidf_importance, MmrConfig, ScorerPair};
use pobrl_core::rouge::pairwise_redundancy;

fn main() -> pobrl_core::Result<()> {
    let cluster = duplicated_article_corpus(&DuplicatedCorpusSpec { clusters: 1, ..Default::default() }, 3).remove(0);
    let scorers = ScorerPair::new(tfidf_importance(&cluster), rouge_l_redundancy());
    for lambda in [1.0, 0.7, 0.3] {
        let picked = greedy_mmr_indices(&cluster, MmrConfig::new(lambda, 30)?, &scorers);
        let sentences: Vec<_> = picked.iter().map(|&i| cluster.sentence(i).tokens.clone()).collect();
        println!("λ={lambda}: {picked:?} redundancy {:.3}", pairwise_redundancy(&sentences));
    }
    Ok(())
}
