//! Writes a synthetic JSONL corpus usable with the `pobrl` binary.
//!
//! cargo run --example make_corpus -- <toy|duplicated> <out.jsonl> [clusters] [seed]

use pobrl_core::corpus::synthetic::{duplicated_article_corpus, toy_corpus, DuplicatedCorpusSpec};
use pobrl_core::corpus::write_corpus;

fn main() -> pobrl_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: make_corpus <toy|duplicated> <out.jsonl> [clusters] [seed]");
        std::process::exit(1);
    }
    let clusters = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let corpus = match args[1].as_str() {
        "toy" => toy_corpus(clusters, seed),
        "duplicated" => duplicated_article_corpus(&DuplicatedCorpusSpec { clusters, ..Default::default() }, seed),
        other => {
            eprintln!("unknown corpus kind {other}");
            std::process::exit(1);
        }
    };
    write_corpus(&args[2], &corpus)?;
    println!("wrote {} clusters to {}", corpus.len(), args[2]);
    Ok(())
}
