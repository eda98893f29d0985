//! Teacher-forced training on oracle labels, then greedy decoding of one cluster.

use pobrl_core::corpus::oracle_labels;
use pobrl_core::corpus::synthetic::toy_corpus;
use pobrl_core::extractor::{Extractor, ExtractorConfig, Vocab};
use pobrl_core::rl::{rollout, warm_start, Decoding, Objective, RewardConfig, WarmStartConfig, Workers};
use pobrl_core::seed::SeedTree;

fn main() -> pobrl_core::Result<()> {
    let corpus = toy_corpus(10, 1);
    let seeds = SeedTree::new(1);
    let mut ex = Extractor::new(ExtractorConfig::small(), Vocab::build(&corpus, 1), &mut seeds.rng("init"))?;
    let config = WarmStartConfig { epochs: 150, batch: 5, ..Default::default() };
    let curve = warm_start(&mut ex, &corpus, &config, &seeds.split("warm"), &Workers::new(1)?)?;
    for (e, loss) in curve.iter().enumerate().step_by(25) {
        println!("epoch {e:>3} loss {loss:.4}");
    }
    let cluster = &corpus[0];
    let reward = Objective::Importance.reward_config(RewardConfig::DEFAULT_GAMMA)?;
    let traj = rollout(&ex, cluster, &reward, Decoding::Greedy, 12, &mut seeds.rng("decode"))?;
    println!("oracle {:?}", oracle_labels(cluster)?.labels);
    println!("greedy {:?}", traj.summary());
    Ok(())
}
