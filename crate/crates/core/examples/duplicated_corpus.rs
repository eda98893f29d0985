//! Trains both policies on clusters built from one article copied three times
//! and compares summary redundancy and ROUGE-1 across blending settings and
//! the tf-idf MMR baseline.
//!
//! cargo run --release --example duplicated_corpus [warm_epochs] [rl_epochs] [rl_lr]

use pobrl_core::corpus::synthetic::{duplicated_article_corpus, DuplicatedCorpusSpec};
use pobrl_core::corpus::Cluster;
use pobrl_core::extractor::{Extractor, ExtractorConfig, Vocab};
use pobrl_core::mmr::{greedy_mmr_indices, rouge_l_redundancy, tfidf_importance, MmrConfig, ScorerPair};
use pobrl_core::pobrl::{pobrl_summarize, BlendConfig, LambdaMode};
use pobrl_core::rl::{
    train_policy, warm_start, ActorCriticConfig, Decoding, Objective, RlConfig, WarmStartConfig, Workers,
};
use pobrl_core::rouge::{pairwise_redundancy, rouge_n};
use pobrl_core::seed::SeedTree;
use std::time::Instant;

fn score(corpus: &[Cluster], summaries: &[Vec<usize>]) -> (f64, f64, f64) {
    let (mut red, mut r1, mut len) = (0.0, 0.0, 0.0);
    for (c, s) in corpus.iter().zip(summaries) {
        let sents: Vec<_> = s.iter().map(|&i| c.sentence(i).tokens.clone()).collect();
        red += pairwise_redundancy(&sents);
        r1 += rouge_n(&sents.concat(), &c.gold_tokens(), 1).f1;
        len += s.len() as f64;
    }
    let n = corpus.len() as f64;
    (red / n, r1 / n, len / n)
}

fn main() -> pobrl_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (warm_epochs, rl_epochs, rl_lr) = (arg(1, 200.0) as usize, arg(2, 40.0) as usize, arg(3, 1e-3));
    let corpus = duplicated_article_corpus(&DuplicatedCorpusSpec::default(), 7);
    let seeds = SeedTree::new(7);
    let workers = Workers::from_env(1)?;
    let start = Instant::now();

    let vocab = Vocab::build(&corpus, 2);
    let mut warm = Extractor::new(ExtractorConfig::small(), vocab, &mut seeds.rng("init"))?;
    let curve = warm_start(
        &mut warm,
        &corpus,
        &WarmStartConfig { epochs: warm_epochs, batch: 10, ..WarmStartConfig::default() },
        &seeds.split("warm"),
        &workers,
    )?;
    println!("warm start loss {:.3} -> {:.3} ({:.0?})", curve[0], curve[curve.len() - 1], start.elapsed());

    let rl = RlConfig {
        epochs: rl_epochs,
        batch: 10,
        max_steps: 12,
        update: ActorCriticConfig { lr: rl_lr, ..ActorCriticConfig::default() },
    };
    let log = |o: Objective| move |l: &pobrl_core::rl::EpochLog| {
        println!("{} epoch {} reward {:.3} len {:.2}", o.name(), l.epoch, l.mean_reward, l.mean_summary_len)
    };
    let imp = train_policy(Objective::Importance, &warm, &corpus, &rl, &seeds, &workers, log(Objective::Importance))?;
    let red = train_policy(Objective::Redundancy, &warm, &corpus, &rl, &seeds, &workers, log(Objective::Redundancy))?;
    println!("trained in {:.0?}", start.elapsed());

    let mut rng = seeds.rng("decode");
    for lambda in [LambdaMode::Fixed(1.0), LambdaMode::Fixed(0.5), LambdaMode::Adaptive] {
        let config = BlendConfig { lambda, max_steps: 12, decoding: Decoding::Greedy };
        let summaries = corpus
            .iter()
            .map(|c| Ok(pobrl_summarize(c, &imp, &red, &config, &mut rng)?.summary))
            .collect::<pobrl_core::Result<Vec<_>>>()?;
        let (r, r1, len) = score(&corpus, &summaries);
        println!("{lambda:<10} redundancy {r:.4}  rouge-1 {:.2}  len {len:.2}", 100.0 * r1);
    }
    let mmr = MmrConfig::new(0.7, 16)?;
    let summaries: Vec<Vec<usize>> = corpus
        .iter()
        .map(|c| greedy_mmr_indices(c, mmr, &ScorerPair::new(tfidf_importance(c), rouge_l_redundancy())))
        .collect();
    let (r, r1, len) = score(&corpus, &summaries);
    println!("mmr        redundancy {r:.4}  rouge-1 {:.2}  len {len:.2}", 100.0 * r1);
    Ok(())
}
