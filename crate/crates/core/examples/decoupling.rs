//! Exact ROUGE-1 recall of a summary against the pairwise decoupled expansion.

use pobrl_core::corpus::tokenize;
use pobrl_core::rouge::decoupling_check;

fn main() {
    let gold = tokenize("police arrested two men after the robbery on main street");
    let summaries = [
        vec!["police arrested two men", "the robbery happened on main street"],
        vec!["police arrested two men", "two men were arrested by police", "on main street"],
    ];
    for s in summaries {
        let sentences: Vec<_> = s.iter().map(|x| tokenize(x)).collect();
        let d = decoupling_check(&sentences, &gold, 1);
        println!("{} sentences: exact {:.4} approx {:.4} gap {:.4}", s.len(), d.exact, d.approx, d.gap);
    }
}
