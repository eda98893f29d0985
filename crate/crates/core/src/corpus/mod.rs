//! Text data model: tokens, sentences, clusters, the extraction pool, JSONL
//! ingestion and extractive oracle labels.

pub mod synthetic;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rouge;
use crate::{Error, Result};

/// A lowercase token with no interior whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(String);

impl Token {
    /// Lowercases `text`; `None` if the result is empty or contains whitespace.
    pub fn new(text: &str) -> Option<Token> {
        let lower = text.to_lowercase();
        if lower.is_empty() || lower.chars().any(char::is_whitespace) {
            None
        } else {
            Some(Token(lower))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl std::borrow::Borrow<str> for Token {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Convenience for tests and examples: tokens from whitespace-separated words.
pub fn tokens(text: &str) -> Vec<Token> {
    text.split_whitespace().filter_map(Token::new).collect()
}

/// One input sentence and its position inside the cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub article_index: usize,
    pub sentence_index: usize,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
        )
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Tokenizes one span of text without sentence segmentation: lowercase,
/// whitespace-separated, every punctuation character its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<Token>| {
        if let Some(tok) = Token::new(word) {
            out.push(tok);
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if is_punctuation(c) {
            flush(&mut word, &mut out);
            out.push(Token(c.to_string()));
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Splits raw text into sentences at `.`, `!` or `?` followed by whitespace
/// (or end of input) and tokenizes each one. Empty sentences are dropped.
pub fn segment_and_tokenize(raw: &str) -> Vec<Vec<Token>> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = raw.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_terminal(c) {
            continue;
        }
        let boundary = match chars.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if boundary {
            let end = i + c.len_utf8();
            sentences.push(tokenize(&raw[start..end]));
            start = end;
        }
    }
    if start < raw.len() {
        sentences.push(tokenize(&raw[start..]));
    }
    sentences.retain(|s| !s.is_empty());
    sentences
}

/// Joins tokens with single spaces.
pub fn detokenize<T: AsRef<str>>(tokens: &[T]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// One multi-document example.
///
/// Input sentences carry a global index obtained by concatenating the
/// articles in order: article 0's sentences first, then article 1's, and so on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    id: String,
    sentences: Vec<Sentence>,
    article_offsets: Vec<usize>,
    gold: Vec<Vec<Token>>,
}

impl Cluster {
    /// Builds a cluster from per-article token lists. Every article and every
    /// sentence must be non-empty; `gold` may be empty for inference-only data.
    pub fn new(
        id: impl Into<String>,
        articles: Vec<Vec<Vec<Token>>>,
        gold: Vec<Vec<Token>>,
    ) -> Result<Cluster> {
        let id = id.into();
        if articles.is_empty() {
            return Err(Error::Config(format!("cluster {id} has no articles")));
        }
        let mut sentences = Vec::new();
        let mut article_offsets = Vec::with_capacity(articles.len());
        for (a, article) in articles.into_iter().enumerate() {
            if article.is_empty() {
                return Err(Error::Config(format!("cluster {id}: article {a} is empty")));
            }
            article_offsets.push(sentences.len());
            for (s, tokens) in article.into_iter().enumerate() {
                if tokens.is_empty() {
                    return Err(Error::Config(format!(
                        "cluster {id}: sentence {s} of article {a} is empty"
                    )));
                }
                sentences.push(Sentence {
                    tokens,
                    article_index: a,
                    sentence_index: s,
                });
            }
        }
        let gold = gold.into_iter().filter(|g| !g.is_empty()).collect();
        Ok(Cluster {
            id,
            sentences,
            article_offsets,
            gold,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// All input sentences in global order.
    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn sentence(&self, global: usize) -> &Sentence {
        &self.sentences[global]
    }

    /// Total number of input sentences (`nm`).
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_articles(&self) -> usize {
        self.article_offsets.len()
    }

    /// Global index range of article `article`.
    pub fn article_range(&self, article: usize) -> std::ops::Range<usize> {
        let start = self.article_offsets[article];
        let end = self
            .article_offsets
            .get(article + 1)
            .copied()
            .unwrap_or(self.sentences.len());
        start..end
    }

    pub fn article(&self, article: usize) -> &[Sentence] {
        &self.sentences[self.article_range(article)]
    }

    pub fn global_index(&self, article: usize, sentence: usize) -> Option<usize> {
        let range = self.article_range(article);
        let idx = range.start + sentence;
        (idx < range.end).then_some(idx)
    }

    pub fn gold(&self) -> &[Vec<Token>] {
        &self.gold
    }

    /// Gold summary as one token stream.
    pub fn gold_tokens(&self) -> Vec<Token> {
        self.gold.iter().flatten().cloned().collect()
    }
}

/// The MDP state: which sentences have been extracted (in order) and which
/// remain in the pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    extracted: Vec<usize>,
    available: Vec<bool>,
}

impl PoolState {
    pub fn new(num_sentences: usize) -> Self {
        Self {
            extracted: Vec::new(),
            available: vec![true; num_sentences],
        }
    }

    pub fn for_cluster(cluster: &Cluster) -> Self {
        Self::new(cluster.num_sentences())
    }

    pub fn num_sentences(&self) -> usize {
        self.available.len()
    }

    pub fn extracted(&self) -> &[usize] {
        &self.extracted
    }

    /// Availability mask; `true` means still in the pool.
    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn is_available(&self, index: usize) -> bool {
        self.available.get(index).copied().unwrap_or(false)
    }

    pub fn remaining(&self) -> usize {
        self.available.len() - self.extracted.len()
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    /// Moves `index` from the pool into the summary.
    pub fn extract(&mut self, index: usize) -> Result<()> {
        if !self.is_available(index) {
            return Err(Error::MaskMismatch(format!(
                "sentence {index} is not in the pool"
            )));
        }
        self.available[index] = false;
        self.extracted.push(index);
        Ok(())
    }
}

/// Warm-start supervision for one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabels {
    /// Per gold sentence, the global index of its best-matching input sentence.
    pub labels: Vec<usize>,
    /// Decoding step at which STOP is the target (number of gold sentences).
    pub stop_position: usize,
}

/// For each gold sentence, the input sentence with the highest sentence-level
/// ROUGE-L F1 against it. Ties go to the lowest global index; two gold
/// sentences may map to the same input sentence.
pub fn oracle_labels(cluster: &Cluster) -> Result<OracleLabels> {
    if cluster.gold().is_empty() {
        return Err(Error::EmptyGold(cluster.id().to_string()));
    }
    let labels = cluster
        .gold()
        .iter()
        .map(|gold| {
            let mut best = 0;
            let mut best_f1 = f64::NEG_INFINITY;
            for (i, s) in cluster.sentences().iter().enumerate() {
                let f1 = rouge::rouge_l(&s.tokens, gold).f1;
                if f1 > best_f1 {
                    best_f1 = f1;
                    best = i;
                }
            }
            best
        })
        .collect::<Vec<_>>();
    let stop_position = labels.len();
    Ok(OracleLabels {
        labels,
        stop_position,
    })
}

/// On-disk form of one cluster (one JSONL line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: String,
    pub articles: Vec<Vec<String>>,
    #[serde(default)]
    pub gold: Vec<String>,
}

impl ClusterRecord {
    pub fn from_cluster(cluster: &Cluster) -> Self {
        ClusterRecord {
            id: cluster.id().to_string(),
            articles: (0..cluster.num_articles())
                .map(|a| cluster.article(a).iter().map(Sentence::text).collect())
                .collect(),
            gold: cluster.gold().iter().map(|g| detokenize(g)).collect(),
        }
    }

    pub fn into_cluster(self) -> Result<Cluster> {
        let articles = self
            .articles
            .iter()
            .map(|article| article.iter().flat_map(|s| segment_and_tokenize(s)).collect())
            .collect();
        let gold = self.gold.iter().flat_map(|s| segment_and_tokenize(s)).collect();
        Cluster::new(self.id, articles, gold)
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<Cluster> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line: lineno,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
        line: lineno,
        message: "expected a JSON object".into(),
    })?;
    let id = match obj.get("id") {
        None => return Err(Error::MissingField { field: "id", line: lineno }),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            return Err(Error::InvalidField {
                field: "id",
                line: lineno,
                message: "expected a string".into(),
            })
        }
    };
    let invalid = |field: &'static str, message: &str| Error::InvalidField {
        field,
        line: lineno,
        message: message.into(),
    };
    let articles_value = obj.get("articles").ok_or(Error::MissingField {
        field: "articles",
        line: lineno,
    })?;
    let articles: Vec<Vec<String>> = serde_json::from_value(articles_value.clone())
        .map_err(|_| invalid("articles", "expected an array of arrays of strings"))?;
    let gold: Vec<String> = match obj.get("gold") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| invalid("gold", "expected an array of strings"))?,
    };
    ClusterRecord { id, articles, gold }
        .into_cluster()
        .map_err(|e| invalid("articles", &e.to_string()))
}

/// Parses JSONL text, one cluster per non-blank line. Line numbers in
/// errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<Cluster>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Cluster>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut clusters = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        clusters.push(parse_line(&line, i + 1)?);
    }
    Ok(clusters)
}

pub fn write_corpus(path: impl AsRef<Path>, clusters: &[Cluster]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for c in clusters {
        out.push_str(&serde_json::to_string(&ClusterRecord::from_cluster(c)).expect("record serializes"));
        out.push('\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(sentences: &[Vec<Token>]) -> Vec<Vec<&str>> {
        sentences
            .iter()
            .map(|s| s.iter().map(Token::as_str).collect())
            .collect()
    }

    #[test]
    fn segments_on_terminal_punctuation() {
        let out = segment_and_tokenize("The cat sat. It slept!");
        assert_eq!(
            strs(&out),
            vec![vec!["the", "cat", "sat", "."], vec!["it", "slept", "!"]]
        );
        assert!(segment_and_tokenize("").is_empty());
        let one = segment_and_tokenize("No terminal punctuation here");
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 4);
    }

    #[test]
    fn punctuation_not_followed_by_space_does_not_split() {
        let out = segment_and_tokenize("Pi is 3.14 roughly. Done");
        assert_eq!(out.len(), 2);
        assert_eq!(
            strs(&out)[0],
            vec!["pi", "is", "3", ".", "14", "roughly", "."]
        );
    }

    #[test]
    fn token_rejects_whitespace_and_empty() {
        assert!(Token::new("").is_none());
        assert!(Token::new("a b").is_none());
        assert_eq!(Token::new("ABC").unwrap().as_str(), "abc");
    }

    #[test]
    fn load_assigns_global_indices_in_article_order() {
        let text = r#"{"id":"c1","articles":[["One.","Two.","Three."],["Four.","Five."]],"gold":["One."]}
{"id":"c2","articles":[["Solo."]],"gold":[]}"#;
        let clusters = parse_corpus(text).unwrap();
        assert_eq!(clusters.len(), 2);
        let c = &clusters[0];
        assert_eq!(c.num_sentences(), 5);
        assert_eq!(c.global_index(1, 0), Some(3));
        assert_eq!(c.sentence(3).article_index, 1);
        assert_eq!(c.sentence(3).sentence_index, 0);
        assert!(clusters[1].gold().is_empty());
    }

    #[test]
    fn load_reports_missing_field_with_line() {
        let err = parse_corpus(r#"{"id":"x","gold":[]}"#).unwrap_err();
        assert_eq!(err.to_string(), "missing field: articles @ line 1");
        let err = parse_corpus("{\"id\":\"a\",\"articles\":[[\"x.\"]]}\nnot json").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn load_corpus_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"articles\":[[\"x y.\"]],\"gold\":[\"x.\"]}\n{\"id\":\"b\",\"articles\":[[\"z.\"]],\"gold\":[\"z.\"]}\n",
        )
        .unwrap();
        let clusters = load_corpus(&path).unwrap();
        assert_eq!(clusters.len(), 2);
        let out = dir.path().join("out.jsonl");
        write_corpus(&out, &clusters).unwrap();
        assert_eq!(load_corpus(&out).unwrap(), clusters);
        assert!(matches!(load_corpus(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    fn cluster(inputs: &[&str], gold: &[&str]) -> Cluster {
        Cluster::new(
            "t",
            vec![inputs.iter().map(|s| tokens(s)).collect()],
            gold.iter().map(|s| tokens(s)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn oracle_picks_exact_match() {
        let mut inputs: Vec<String> = (0..10).map(|i| format!("w{i} v{i}")).collect();
        inputs[7] = "gold sentence here".into();
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let labels = oracle_labels(&cluster(&refs, &["gold sentence here"])).unwrap();
        assert_eq!(labels.labels, vec![7]);
        assert_eq!(labels.stop_position, 1);
    }

    #[test]
    fn oracle_prefers_higher_f1_and_lowest_index_on_ties() {
        // F1 6/7 beats 4/5.
        let labels = oracle_labels(&cluster(&["a b", "a b c d"], &["a b c"])).unwrap();
        assert_eq!(labels.labels, vec![1]);
        let labels = oracle_labels(&cluster(&["x", "a q", "a r"], &["a b"])).unwrap();
        assert_eq!(labels.labels, vec![1]);
    }

    #[test]
    fn oracle_allows_collisions_and_rejects_empty_gold() {
        let labels = oracle_labels(&cluster(&["a b", "c d"], &["a b", "a b"])).unwrap();
        assert_eq!(labels.labels, vec![0, 0]);
        assert!(matches!(
            oracle_labels(&cluster(&["a"], &[])),
            Err(Error::EmptyGold(_))
        ));
    }

    #[test]
    fn pool_state_tracks_extraction() {
        let mut pool = PoolState::new(3);
        pool.extract(2).unwrap();
        assert_eq!(pool.extracted(), &[2]);
        assert_eq!(pool.available(), &[true, true, false]);
        assert!(pool.extract(2).is_err());
        assert!(pool.extract(5).is_err());
        assert_eq!(pool.remaining(), 2);
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent_on_detokenized_stream(raw in "[a-zA-Z .!?,']{0,60}") {
            let first: Vec<Token> = segment_and_tokenize(&raw).into_iter().flatten().collect();
            let again: Vec<Token> = segment_and_tokenize(&detokenize(&first)).into_iter().flatten().collect();
            prop_assert_eq!(first, again);
        }

        #[test]
        fn global_indexing_is_a_bijection(sizes in proptest::collection::vec(1usize..5, 1..5)) {
            let articles: Vec<Vec<Vec<Token>>> = sizes
                .iter()
                .map(|&m| (0..m).map(|_| tokens("w")).collect())
                .collect();
            let c = Cluster::new("p", articles, vec![]).unwrap();
            prop_assert_eq!(c.num_sentences(), sizes.iter().sum::<usize>());
            let mut seen = vec![false; c.num_sentences()];
            for (a, &m) in sizes.iter().enumerate() {
                for s in 0..m {
                    let g = c.global_index(a, s).unwrap();
                    prop_assert!(!seen[g]);
                    seen[g] = true;
                    prop_assert_eq!(c.sentence(g).article_index, a);
                    prop_assert_eq!(c.sentence(g).sentence_index, s);
                }
            }
            prop_assert!(seen.iter().all(|&x| x));
        }

        #[test]
        fn oracle_label_depends_only_on_scores(perm_seed in 0u64..1000) {
            // Swapping two sentences that tie with each other below the maximum
            // leaves the label untouched.
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            let mut others = vec!["p q", "r s", "t u", "v w"];
            others.shuffle(&mut rng);
            let mut inputs = vec!["a b c"];
            inputs.extend(others);
            let labels = oracle_labels(&cluster(&inputs, &["a b c"])).unwrap();
            prop_assert_eq!(labels.labels, vec![0]);
        }
    }
}
