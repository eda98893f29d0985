//! Blending two extraction distributions at fixed and adaptive weights.

use pobrl_core::pobrl::{adaptive_lambda, blend_distributions};

fn main() -> pobrl_core::Result<()> {
    let p_imp = [0.5, 0.3, 0.2];
    let p_red = [0.1, 0.6, 0.3];
    let mask = [true; 3];
    for lambda in [1.0, 0.8, 0.5, 0.0] {
        let b = blend_distributions(&p_imp, &p_red, lambda, &mask)?;
        println!("λ={lambda:<4} raw {:?} probs {:?}", b.raw_scores, b.probs);
    }
    for (a_imp, a_red) in [(0.0, 0.0), (1.0, -1.0), (-2.0, 0.5)] {
        println!("A_imp={a_imp:<5} A_red={a_red:<5} λ={:.4}", adaptive_lambda(a_imp, a_red)?);
    }
    Ok(())
}
