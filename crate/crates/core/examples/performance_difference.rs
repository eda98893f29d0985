//! Performance-difference identity on random tabular MDPs.

use pobrl_core::rl::{performance_difference_check, TabularMdp};
use pobrl_core::seed::SeedTree;

fn main() -> pobrl_core::Result<()> {
    let mut rng = SeedTree::new(5).rng("mdp");
    for states in [2, 4, 8] {
        let mdp = TabularMdp::random(states, 3, 0.9, &mut rng)?;
        let (mix, imp) = (mdp.random_policy(&mut rng), mdp.random_policy(&mut rng));
        let pd = performance_difference_check(&mdp, &mix, &imp)?;
        println!("{states} states: lhs {:.6} rhs {:.6} gap {:.2e}", pd.lhs, pd.rhs, pd.gap);
    }
    Ok(())
}
