use std::fs;
use std::path::{Path, PathBuf};

use approx::assert_abs_diff_eq;
use pobrl_core::autodiff::{testing::inject_backward_fault, Primitive};
use pobrl_core::cli::{
    cmd_eval, cmd_gradcheck, cmd_redundancy, cmd_summarize, cmd_train, main_with_args, read_summaries, GradcheckArgs,
    Outcome, RunConfig, SummarizeArgs, SummaryRecord,
};
use pobrl_core::corpus::synthetic::toy_corpus;
use pobrl_core::corpus::write_corpus;
use pobrl_core::Error;
use serde_json::Value;
use tempfile::TempDir;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const HAND_CORPUS: &str = r#"{"id":"a","articles":[["a b x d"]],"gold":["a b c d"]}
{"id":"b","articles":[["p q r s"]],"gold":["p q"]}
{"id":"c","articles":[["z"],["y"]],"gold":["m n"]}
"#;

const HAND_SUMMARIES: &str = r#"{"id":"a","summary":["a b x d"]}
{"id":"b","summary":["p q r s"]}
{"id":"c","summary":["z"]}
"#;

#[test]
fn eval_matches_hand_counts() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "corpus.jsonl", HAND_CORPUS);
    let summaries = write(dir.path(), "summaries.jsonl", HAND_SUMMARIES);
    let report = cmd_eval(&RunConfig::default(), &summaries, &corpus, true).unwrap();
    assert_eq!(report.clusters, 3);
    // a: unigrams a,b,d of 4/4; bigrams ab of 3/3; LCS abd; SU4 3 skip-bigrams + 3 unigrams of 10/10.
    // b: unigrams 2 of 4/2; bigram pq of 3/1; SU4 pq + p,q of 10/3.
    // c: nothing shared.
    let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
    let m = report.mean;
    assert_abs_diff_eq!(m.rouge_1, (0.75 + f(0.5, 1.0)) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.rouge_2, (1.0 / 3.0 + f(1.0 / 3.0, 1.0)) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.rouge_l, (0.75 + f(0.5, 1.0)) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.rouge_su4, (0.6 + f(0.3, 1.0)) / 3.0, epsilon = 1e-12);
    let groups = report.by_doc_count.unwrap();
    assert_eq!(groups[&1].clusters, 2);
    assert_abs_diff_eq!(groups[&1].rouge_1, (0.75 + f(0.5, 1.0)) / 2.0, epsilon = 1e-12);
    assert_eq!(groups[&2].rouge_1, 0.0);
}

#[test]
fn eval_lists_mismatched_ids() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "corpus.jsonl", HAND_CORPUS);
    let summaries = write(
        dir.path(),
        "summaries.jsonl",
        "{\"id\":\"a\",\"summary\":[\"a\"]}\n{\"id\":\"q\",\"summary\":[\"a\"]}\n",
    );
    match cmd_eval(&RunConfig::default(), &summaries, &corpus, false) {
        Err(Error::IdMismatch(ids)) => assert_eq!(ids, ["q", "b", "c"]),
        other => panic!("expected id mismatch, got {other:?}"),
    }
}

#[test]
fn redundancy_report() {
    let dir = TempDir::new().unwrap();
    let summaries = write(
        dir.path(),
        "s.jsonl",
        "{\"id\":\"one\",\"summary\":[\"a b c\"]}\n{\"id\":\"dup\",\"summary\":[\"a b c\",\"a b c\"]}\n",
    );
    let report = cmd_redundancy(&RunConfig::default(), &summaries).unwrap();
    assert_eq!(report.summaries[0].redundancy, 0.0);
    assert_eq!(report.summaries[1].redundancy, 1.0);
    assert_eq!(report.mean, 0.5);
    assert_eq!(report.mean_x100, 50.0);
}

#[test]
fn gradcheck_detects_injected_faults() {
    let args = GradcheckArgs {
        trials: 2,
        ..GradcheckArgs::default()
    };
    let clean = cmd_gradcheck(&RunConfig::default(), &args).unwrap();
    assert_eq!(clean.outcome(), Outcome::Success);
    for primitive in [Primitive::Tanh, Primitive::LstmCell, Primitive::Conv1d] {
        let _guard = inject_backward_fault(primitive);
        let report = cmd_gradcheck(&RunConfig::default(), &args).unwrap();
        assert_eq!(report.outcome(), Outcome::CheckFailed, "{primitive:?}");
        let line = report.checks.iter().find(|c| c.name == primitive.name()).unwrap();
        assert!(!line.passed);
        assert!(!report.checks.iter().find(|c| c.name == "extractor_nll").unwrap().passed);
    }
    let _guard = inject_backward_fault(Primitive::Tanh);
    assert_eq!(main_with_args(["pobrl", "gradcheck", "--trials", "1"]), 2);
}

#[test]
fn exit_codes_for_validation_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let missing = missing.to_str().unwrap();
    let out = dir.path().join("out.jsonl");
    let out = out.to_str().unwrap();
    assert_eq!(main_with_args(["pobrl", "mdpcheck", "--mdps", "5"]), 0);
    assert_eq!(main_with_args(["pobrl", "--set", "gamma=2", "mdpcheck"]), 1);
    assert_eq!(main_with_args(["pobrl", "--set", "nope=1", "mdpcheck"]), 1);
    assert_eq!(main_with_args(["pobrl", "oracle", "--corpus", missing, "--out", out]), 1);
    assert_eq!(main_with_args(["pobrl", "summarize", "--corpus", missing, "--out", out]), 1);
    assert_eq!(main_with_args(["pobrl", "not-a-command"]), 1);
    let corpus = write(dir.path(), "c.jsonl", "{\"id\":\"a\",\"articles\":[[\"x\"]]}\n{broken\n");
    assert_eq!(
        main_with_args(["pobrl", "oracle", "--corpus", corpus.to_str().unwrap(), "--out", out]),
        1
    );
}

fn small_config() -> RunConfig {
    let mut config = RunConfig::default();
    for (k, v) in [
        ("model", "small"),
        ("min_count", "1"),
        ("warm_epochs", "3"),
        ("warm_batch", "4"),
        ("rl_epochs", "2"),
        ("rl_batch", "4"),
        ("rl_lr", "1e-3"),
    ] {
        config.set(k, v).unwrap();
    }
    config
}

#[test]
fn oracle_train_summarize_pipeline() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("toy.jsonl");
    write_corpus(&corpus, &toy_corpus(6, 1)).unwrap();
    let config = small_config();

    let oracle = dir.path().join("oracle.jsonl");
    assert_eq!(
        main_with_args([
            "pobrl",
            "oracle",
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            oracle.to_str().unwrap()
        ]),
        0
    );
    let lines: Vec<Value> = fs::read_to_string(&oracle)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["labels"], serde_json::json!([0, 3]));
    assert!(lines[0]["provenance"]["config_hash"].is_string());

    let trained = cmd_train(&config, &corpus, &dir.path().join("run")).unwrap();
    let log = fs::read_to_string(&trained.log).unwrap();
    assert_eq!(log.lines().count(), 3 + 2 + 2);
    assert!(log.lines().all(|l| l.contains("\"seed\":0")));

    let out = dir.path().join("s.jsonl");
    let args = SummarizeArgs {
        corpus: corpus.clone(),
        out: out.clone(),
        importance: Some(trained.importance.clone()),
        redundancy: Some(trained.redundancy.clone()),
        lambda: "adaptive".into(),
        decoding: "greedy".into(),
        mmr_baseline: false,
        single_policy: false,
    };
    cmd_summarize(&config, &args).unwrap();
    let records: Vec<SummaryRecord> = read_summaries(&out).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert_eq!(r.trace.len(), r.summary.len() + usize::from(r.summary.len() < 6));
        assert!(r.trace.iter().all(|t| t.lambda > 0.0 && t.lambda < 1.0));
        assert!(r.provenance["checkpoint_hash"].is_string());
    }

    let single = SummarizeArgs {
        redundancy: None,
        single_policy: true,
        out: dir.path().join("single.jsonl"),
        ..args.clone()
    };
    cmd_summarize(&config, &single).unwrap();
    assert!(read_summaries(&single.out)
        .unwrap()
        .iter()
        .all(|r| r.trace.iter().all(|t| t.lambda == 1.0)));

    let mmr = SummarizeArgs {
        importance: None,
        redundancy: None,
        mmr_baseline: true,
        out: dir.path().join("mmr.jsonl"),
        ..args.clone()
    };
    cmd_summarize(&config, &mmr).unwrap();
    assert!(read_summaries(&mmr.out).unwrap().iter().all(|r| !r.summary.is_empty()));

    let bad = SummarizeArgs {
        lambda: "fixed:1.5".into(),
        ..args.clone()
    };
    assert!(cmd_summarize(&config, &bad).is_err());
}

#[test]
fn summarize_rejects_mixed_vocabularies() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first.jsonl");
    let second = dir.path().join("second.jsonl");
    write_corpus(&first, &toy_corpus(4, 1)).unwrap();
    write_corpus(&second, &toy_corpus(4, 2)).unwrap();
    let config = small_config();
    let a = cmd_train(&config, &first, &dir.path().join("a")).unwrap();
    let b = cmd_train(&config, &second, &dir.path().join("b")).unwrap();
    let args = SummarizeArgs {
        corpus: first,
        out: dir.path().join("s.jsonl"),
        importance: Some(a.importance),
        redundancy: Some(b.redundancy),
        lambda: "fixed:0.5".into(),
        decoding: "greedy".into(),
        mmr_baseline: false,
        single_policy: false,
    };
    match cmd_summarize(&config, &args) {
        Err(Error::VocabMismatch { checkpoint, vocab }) => assert_ne!(checkpoint, vocab),
        other => panic!("expected vocab mismatch, got {other:?}"),
    }
}

#[test]
fn decouple_reports_each_summary() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "corpus.jsonl", HAND_CORPUS);
    let summaries = write(dir.path(), "summaries.jsonl", HAND_SUMMARIES);
    let report_path = dir.path().join("report.json");
    let code = main_with_args([
        "pobrl",
        "decouple",
        "--summaries",
        summaries.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 3);
    assert_eq!(report["entries"][0]["exact"], 0.75);
}

#[test]
fn eval_extremes() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "corpus.jsonl", HAND_CORPUS);
    let gold = write(
        dir.path(),
        "gold.jsonl",
        "{\"id\":\"a\",\"summary\":[\"a b c d\"]}\n{\"id\":\"b\",\"summary\":[\"p q\"]}\n{\"id\":\"c\",\"summary\":[\"m n\"]}\n",
    );
    let empty = write(
        dir.path(),
        "empty.jsonl",
        "{\"id\":\"a\",\"summary\":[]}\n{\"id\":\"b\",\"summary\":[]}\n{\"id\":\"c\",\"summary\":[]}\n",
    );
    let m = cmd_eval(&RunConfig::default(), &gold, &corpus, false).unwrap().mean;
    assert_eq!([m.rouge_1, m.rouge_2, m.rouge_l, m.rouge_su4], [1.0; 4]);
    let m = cmd_eval(&RunConfig::default(), &empty, &corpus, false).unwrap().mean;
    assert_eq!([m.rouge_1, m.rouge_2, m.rouge_l, m.rouge_su4], [0.0; 4]);
}

#[test]
fn redundancy_of_partial_overlap() {
    let dir = TempDir::new().unwrap();
    let summaries = write(dir.path(), "s.jsonl", "{\"id\":\"x\",\"summary\":[\"a b c\",\"a c\"]}\n");
    let report = cmd_redundancy(&RunConfig::default(), &summaries).unwrap();
    assert_abs_diff_eq!(report.mean, 0.8, epsilon = 1e-12);
}

#[test]
fn train_validates_paths_first() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let err = cmd_train(&small_config(), &dir.path().join("missing.jsonl"), &out).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
    assert!(!out.exists());
}

#[test]
fn summarize_modes_agree_and_repeat() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("toy.jsonl");
    write_corpus(&corpus, &toy_corpus(5, 3)).unwrap();
    let config = small_config();
    let trained = cmd_train(&config, &corpus, &dir.path().join("run")).unwrap();
    let run = |name: &str, lambda: &str, single: bool| {
        let args = SummarizeArgs {
            corpus: corpus.clone(),
            out: dir.path().join(name),
            importance: Some(trained.importance.clone()),
            redundancy: (!single).then(|| trained.redundancy.clone()),
            lambda: lambda.into(),
            decoding: "greedy".into(),
            mmr_baseline: false,
            single_policy: single,
        };
        cmd_summarize(&config, &args).unwrap();
        read_summaries(&args.out)
            .unwrap()
            .into_iter()
            .map(|r| r.summary)
            .collect::<Vec<_>>()
    };
    assert_eq!(run("fixed1.jsonl", "fixed:1.0", false), run("single.jsonl", "fixed:0.5", true));
    assert_eq!(run("g1.jsonl", "adaptive", false), run("g2.jsonl", "adaptive", false));
}

#[test]
fn default_model_trains_toy_corpus_within_budget() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("toy.jsonl");
    write_corpus(&corpus, &toy_corpus(10, 0)).unwrap();
    let mut config = RunConfig::default();
    config.min_count = 1;
    let start = std::time::Instant::now();
    cmd_train(&config, &corpus, &dir.path().join("run")).unwrap();
    assert!(start.elapsed().as_secs() < 600, "{:?}", start.elapsed());
}
