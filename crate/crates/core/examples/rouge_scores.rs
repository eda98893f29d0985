//! ROUGE-1/2/L/SU4 between two sentences given on the command line.
//!
//! cargo run --example rouge_scores -- "the cat sat on the mat" "a cat sat on a mat"

use pobrl_core::corpus::tokenize;
use pobrl_core::rouge::{rouge_l, rouge_n, rouge_su4, RougeScore};

fn show(name: &str, s: RougeScore) {
    println!("{name:<9} P {:.4}  R {:.4}  F1 {:.4}", s.precision, s.recall, s.f1);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let candidate = tokenize(args.get(1).map_or("the cat sat on the mat", String::as_str));
    let reference = tokenize(args.get(2).map_or("the cat was on the mat", String::as_str));
    show("ROUGE-1", rouge_n(&candidate, &reference, 1));
    show("ROUGE-2", rouge_n(&candidate, &reference, 2));
    show("ROUGE-L", rouge_l(&candidate, &reference));
    show("ROUGE-SU4", rouge_su4(&candidate, &reference));
}
