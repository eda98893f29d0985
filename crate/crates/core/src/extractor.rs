//! Hierarchical sentence extractor: a temporal-CNN sentence encoder, a
//! per-article bidirectional LSTM, a pointer network over all sentences with
//! dot-product attention, a STOP pseudo-candidate and a linear value head.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{
    bilstm_sequence, lstm_sequence, masked_softmax, read_checkpoint, write_checkpoint, LstmWeights, ParamId, ParamStore, Tape,
    Tensor, Var,
};
use crate::corpus::{Cluster, PoolState, Token};
use crate::seed::sha256_hex;
use crate::{Error, Result};

/// Network sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub embedding_dim: usize,
    pub windows: Vec<usize>,
    pub filters_per_window: usize,
    pub hidden: usize,
    pub article_layers: usize,
    /// Weights are drawn from `U(-init_bound, init_bound)`; biases start at 0.
    pub init_bound: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            windows: vec![3, 4, 5],
            filters_per_window: 100,
            hidden: 256,
            article_layers: 2,
            init_bound: 0.08,
        }
    }
}

impl ExtractorConfig {
    /// A narrow network for tests, examples and synthetic corpora.
    pub fn small() -> Self {
        Self {
            embedding_dim: 16,
            windows: vec![3, 4, 5],
            filters_per_window: 8,
            hidden: 16,
            article_layers: 2,
            init_bound: 0.08,
        }
    }

    pub fn sentence_dim(&self) -> usize {
        self.windows.len() * self.filters_per_window
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("filters_per_window", self.filters_per_window),
            ("hidden", self.hidden),
            ("article_layers", self.article_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(format!("invalid windows {:?}", self.windows)));
        }
        if !(self.init_bound.is_finite() && self.init_bound >= 0.0) {
            return Err(Error::Config(format!("invalid init_bound {}", self.init_bound)));
        }
        Ok(())
    }
}

/// Word vocabulary. Id 0 is UNK; the remaining ids follow sorted token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: usize = 0;

    pub fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        Self { tokens, index }
    }

    /// Tokens occurring at least `min_count` times in the input sentences.
    pub fn build(clusters: &[Cluster], min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for cluster in clusters {
            for sentence in cluster.sentences() {
                for token in &sentence.tokens {
                    *counts.entry(token.as_str()).or_default() += 1;
                }
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|&(_, c)| c >= min_count)
                .map(|(t, _)| t.to_owned())
                .collect(),
        )
    }

    /// Number of embedding rows, UNK included.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &Token) -> usize {
        self.index.get(token.as_str()).copied().unwrap_or(Self::UNK)
    }

    fn file_contents(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.file_contents().as_bytes())
    }

    /// One token per line, sorted.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.file_contents()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect()))
    }
}

/// Path of the vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: impl AsRef<Path>) -> PathBuf {
    let mut p = checkpoint.as_ref().as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}

#[derive(Debug, Clone)]
struct Ids {
    embedding: ParamId,
    conv: Vec<(ParamId, ParamId)>,
    article: Vec<(LstmWeights, LstmWeights)>,
    pointer: LstmWeights,
    decoder: LstmWeights,
    start: ParamId,
    stop: ParamId,
    attn_proj: ParamId,
    w_sent: ParamId,
    w_art: ParamId,
    v: ParamId,
    value_w: ParamId,
    value_b: ParamId,
}

/// Per-cluster encoder outputs, recorded on one tape.
#[derive(Debug, Clone)]
pub struct EncodedCluster {
    /// CNN sentence encodings in global order.
    pub sentences: Vec<Var>,
    /// Article-level BiLSTM states, one per sentence.
    pub article_states: Vec<Var>,
    /// Pointer-encoder states `e_k`.
    pub pointer_states: Vec<Var>,
    article_matrix: Var,
    candidate_keys: Var,
    initial: DecoderState,
}

impl EncodedCluster {
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn initial_state(&self) -> DecoderState {
        self.initial
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

/// Probabilities over every sentence plus STOP (last slot).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionDistribution {
    pub probs: Vec<f64>,
    /// Availability per slot; the STOP slot is always `true`.
    pub mask: Vec<bool>,
}

impl ExtractionDistribution {
    pub fn stop_index(&self) -> usize {
        self.probs.len() - 1
    }

    /// Highest-probability slot, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = self.stop_index();
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Slot mask for a pool: sentence availability followed by an open STOP slot.
pub fn slot_mask(state: &PoolState) -> Vec<bool> {
    let mut mask = state.available().to_vec();
    mask.push(true);
    mask
}

/// Output of one decoder step.
#[derive(Debug, Clone)]
pub struct DecodeStep {
    /// Raw pointer scores over `nm + 1` slots.
    pub scores: Var,
    /// Masked log-probabilities over `nm + 1` slots (0 at masked slots).
    pub log_probs: Var,
    pub distribution: ExtractionDistribution,
    pub state: DecoderState,
    /// Critic estimate `V(X_t)`.
    pub value: Var,
}

/// One extractor: configuration, vocabulary and parameters.
#[derive(Debug, Clone)]
pub struct Extractor {
    config: ExtractorConfig,
    vocab: Vocab,
    params: ParamStore,
    ids: Ids,
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let b = config.init_bound;
        let (e, h, s) = (config.embedding_dim, config.hidden, config.sentence_dim());
        let mut p = ParamStore::new();
        let embedding = p.add("embedding", Tensor::uniform(&[vocab.len(), e], b, rng))?;
        let mut conv = Vec::new();
        for &w in &config.windows {
            let weight = p.add(
                format!("conv{w}.weight"),
                Tensor::uniform(&[config.filters_per_window, w * e], b, rng),
            )?;
            let bias = p.add(format!("conv{w}.bias"), Tensor::zeros(&[config.filters_per_window]))?;
            conv.push((weight, bias));
        }
        let mut article = Vec::new();
        for layer in 0..config.article_layers {
            let input = if layer == 0 { s } else { 2 * h };
            let fw = LstmWeights::init(&mut p, &format!("article{layer}.fw"), input, h, b, rng)?;
            let bw = LstmWeights::init(&mut p, &format!("article{layer}.bw"), input, h, b, rng)?;
            article.push((fw, bw));
        }
        let pointer = LstmWeights::init(&mut p, "pointer", s, h, b, rng)?;
        let decoder = LstmWeights::init(&mut p, "decoder", s, h, b, rng)?;
        let ids = Ids {
            embedding,
            conv,
            article,
            pointer,
            decoder,
            start: p.add("start", Tensor::uniform(&[s], b, rng))?,
            stop: p.add("stop", Tensor::uniform(&[h], b, rng))?,
            attn_proj: p.add("attn_proj", Tensor::uniform(&[2 * h, h], b, rng))?,
            w_sent: p.add("w_sent", Tensor::uniform(&[h, h], b, rng))?,
            w_art: p.add("w_art", Tensor::uniform(&[h, 2 * h], b, rng))?,
            v: p.add("v", Tensor::uniform(&[h], b, rng))?,
            value_w: p.add("value.weight", Tensor::uniform(&[h], b, rng))?,
            value_b: p.add("value.bias", Tensor::zeros(&[1]))?,
        };
        Ok(Self {
            config,
            vocab,
            params: p,
            ids,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Handle of a named parameter (`"v"`, `"value.weight"`, ...).
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// CNN encoding of one sentence: per window, ReLU convolution followed by
    /// max-over-time; windows concatenated. Short sentences are zero-padded.
    pub fn encode_sentence(&self, tape: &mut Tape<'_>, tokens: &[Token]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::shape("encode_sentence", "empty sentence".to_owned()));
        }
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let table = tape.param(self.ids.embedding);
        let embedded = tape.gather_rows(table, &ids)?;
        let mut pooled = Vec::with_capacity(self.ids.conv.len());
        for (&window, &(w, b)) in self.config.windows.iter().zip(&self.ids.conv) {
            let (w, b) = (tape.param(w), tape.param(b));
            let feature = tape.conv1d(embedded, w, b, window)?;
            let feature = tape.relu(feature)?;
            pooled.push(tape.max_over_time(feature)?);
        }
        tape.concat(&pooled)
    }

    /// Runs the stacked BiLSTM separately over each article's sentence
    /// encodings; returns one `2H` state per sentence in global order.
    pub fn encode_article_level(&self, tape: &mut Tape<'_>, cluster: &Cluster, sentences: &[Var]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(sentences.len());
        for a in 0..cluster.num_articles() {
            let mut layer: Vec<Var> = sentences[cluster.article_range(a)].to_vec();
            for (fw, bw) in &self.ids.article {
                layer = bilstm_sequence(tape, &layer, fw, bw)?;
            }
            out.extend(layer);
        }
        Ok(out)
    }

    pub fn encode(&self, tape: &mut Tape<'_>, cluster: &Cluster) -> Result<EncodedCluster> {
        let sentences = cluster
            .sentences()
            .iter()
            .map(|s| self.encode_sentence(tape, &s.tokens))
            .collect::<Result<Vec<_>>>()?;
        let article_states = self.encode_article_level(tape, cluster, &sentences)?;
        let (pointer_states, (h, c)) = lstm_sequence(tape, &sentences, &self.ids.pointer, None)?;
        let article_matrix = tape.stack_rows(&article_states)?;
        let mut keys = pointer_states.clone();
        keys.push(tape.param(self.ids.stop));
        let keys = tape.stack_rows(&keys)?;
        let w_sent = tape.param(self.ids.w_sent);
        let w_sent_t = tape.transpose(w_sent)?;
        let candidate_keys = tape.matmul(keys, w_sent_t)?;
        Ok(EncodedCluster {
            sentences,
            article_states,
            pointer_states,
            article_matrix,
            candidate_keys,
            initial: DecoderState { h, c },
        })
    }

    /// Dot-product attention of the projected decoder state over all
    /// article-level states. Returns `(alpha, c_t)`.
    pub fn attention_context(&self, tape: &mut Tape<'_>, decoder: Var, article_matrix: Var) -> Result<(Var, Var)> {
        let proj = tape.param(self.ids.attn_proj);
        let query = tape.matmul(proj, decoder)?;
        let scores = tape.matmul(article_matrix, query)?;
        let alpha = tape.softmax(scores, None)?;
        let context = tape.matmul(alpha, article_matrix)?;
        Ok((alpha, context))
    }

    /// `u_k = vᵀ tanh(W_sent e_k + W_art c_t)` for every sentence, then STOP.
    pub fn pointer_scores(&self, tape: &mut Tape<'_>, encoded: &EncodedCluster, decoder: Var) -> Result<Var> {
        let (_, context) = self.attention_context(tape, decoder, encoded.article_matrix)?;
        let w_art = tape.param(self.ids.w_art);
        let art = tape.matmul(w_art, context)?;
        let pre = tape.add_row(encoded.candidate_keys, art)?;
        let act = tape.tanh(pre);
        let v = tape.param(self.ids.v);
        tape.matmul(act, v)
    }

    /// Masked softmax over the scores; extracted sentences get exactly 0.
    pub fn extraction_distribution(&self, tape: &Tape<'_>, scores: Var, state: &PoolState) -> ExtractionDistribution {
        let mask = slot_mask(state);
        let probs = masked_softmax(tape.value(scores).data(), Some(&mask));
        ExtractionDistribution { probs, mask }
    }

    /// Feeds the previous selection (the learned start vector when `None`)
    /// through the decoder cell.
    pub fn advance(
        &self,
        tape: &mut Tape<'_>,
        encoded: &EncodedCluster,
        previous: Option<usize>,
        decoder: DecoderState,
    ) -> Result<DecoderState> {
        let input = match previous {
            Some(i) => *encoded
                .sentences
                .get(i)
                .ok_or_else(|| Error::MaskMismatch(format!("previous selection {i} out of range")))?,
            None => tape.param(self.ids.start),
        };
        let (h, c) = tape.lstm_cell(input, decoder.h, decoder.c, &self.ids.decoder)?;
        Ok(DecoderState { h, c })
    }

    /// Linear value head on a decoder state.
    pub fn value(&self, tape: &mut Tape<'_>, decoder: DecoderState) -> Result<Var> {
        let w = tape.param(self.ids.value_w);
        let b = tape.param(self.ids.value_b);
        let wh = tape.dot(w, decoder.h)?;
        let b = tape.sum(b);
        tape.add(wh, b)
    }

    /// Advances the decoder on the previous selection and scores the pool.
    pub fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        encoded: &EncodedCluster,
        state: &PoolState,
        previous: Option<usize>,
        decoder: DecoderState,
    ) -> Result<DecodeStep> {
        if state.num_sentences() != encoded.num_sentences() {
            return Err(Error::MaskMismatch(format!(
                "pool of {} sentences for a cluster of {}",
                state.num_sentences(),
                encoded.num_sentences()
            )));
        }
        let next = self.advance(tape, encoded, previous, decoder)?;
        let scores = self.pointer_scores(tape, encoded, next.h)?;
        let distribution = self.extraction_distribution(tape, scores, state);
        let log_probs = tape.log_softmax(scores, Some(&distribution.mask))?;
        let value = self.value(tape, next)?;
        Ok(DecodeStep {
            scores,
            log_probs,
            distribution,
            state: next,
            value,
        })
    }

    /// Writes the checkpoint and its vocabulary file; returns the checkpoint hash.
    pub fn save(&self, path: impl AsRef<Path>, meta: Value) -> Result<String> {
        let path = path.as_ref();
        let meta = json!({
            "config": self.config,
            "vocab_hash": self.vocab.hash(),
            "run": meta,
        });
        self.vocab.save(vocab_path(path))?;
        write_checkpoint(path, &self.params, &meta)
    }

    /// Loads a checkpoint written by [`Extractor::save`], checking that the
    /// vocabulary file matches and that every parameter has the expected shape.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Value)> {
        let path = path.as_ref();
        let checkpoint = read_checkpoint(path)?;
        let vocab = Vocab::load(vocab_path(path))?;
        let expected = checkpoint.meta["vocab_hash"].as_str().unwrap_or_default().to_owned();
        let actual = vocab.hash();
        if expected != actual {
            return Err(Error::VocabMismatch {
                checkpoint: expected,
                vocab: actual,
            });
        }
        let config: ExtractorConfig = serde_json::from_value(checkpoint.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config in manifest: {e}")))?;
        let mut extractor = Self::new(config, vocab, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if extractor.params.len() != checkpoint.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                extractor.params.len(),
                checkpoint.store.len()
            )));
        }
        for id in extractor.params.ids().collect::<Vec<_>>() {
            let name = extractor.params.name(id).to_owned();
            let src = checkpoint
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let value = checkpoint.store.value(src);
            if value.shape() != extractor.params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    extractor.params.value(id).shape()
                )));
            }
            *extractor.params.value_mut(id) = value.clone();
        }
        let run = checkpoint.meta["run"].clone();
        Ok((extractor, run))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::corpus::{oracle_labels, synthetic, tokens};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Cluster, Extractor) {
        let cluster = synthetic::toy_corpus(1, 7).remove(0);
        let vocab = Vocab::build(std::slice::from_ref(&cluster), 1);
        let ex = Extractor::new(ExtractorConfig::small(), vocab, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cluster, ex)
    }

    fn zero(ex: &mut Extractor, name: &str) {
        let id = ex.param_id(name).unwrap();
        ex.params_mut().value_mut(id).data_mut().fill(0.0);
    }

    fn check_distribution(d: &ExtractionDistribution) {
        let sum: f64 = d.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (p, m) in d.probs.iter().zip(&d.mask) {
            assert!(*p >= 0.0);
            if !m {
                assert_eq!(*p, 0.0);
            }
        }
        assert!(*d.mask.last().unwrap());
    }

    #[test]
    fn vocab_min_count_and_unk() {
        let c = Cluster::new(
            "c",
            vec![vec![tokens("a b a"), tokens("c a b")]],
            vec![tokens("z")],
        )
        .unwrap();
        let v = Vocab::build(&[c], 2);
        assert_eq!(v.tokens(), ["a", "b"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id(&Token::new("c").unwrap()), Vocab::UNK);
        assert_eq!(v.id(&Token::new("a").unwrap()), 1);
    }

    #[test]
    fn sentence_encoding_shape_and_purity() {
        let (_, ex) = toy();
        let mut tape = Tape::new(ex.params());
        let one = ex.encode_sentence(&mut tape, &tokens("word")).unwrap();
        let long = ex.encode_sentence(&mut tape, &tokens("a b c d e f g h")).unwrap();
        let again = ex.encode_sentence(&mut tape, &tokens("a b c d e f g h")).unwrap();
        assert_eq!(tape.shape(one), [ex.config().sentence_dim()]);
        assert_eq!(tape.shape(long), [ex.config().sentence_dim()]);
        assert_eq!(tape.value(long), tape.value(again));
    }

    #[test]
    fn default_sizes() {
        let c = ExtractorConfig::default();
        assert_eq!(c.sentence_dim(), 300);
        let vocab = Vocab::from_tokens(vec!["a".into()]);
        let ex = Extractor::new(c, vocab, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cluster = Cluster::new("c", vec![vec![tokens("a")]], vec![]).unwrap();
        let mut tape = Tape::new(ex.params());
        let enc = ex.encode(&mut tape, &cluster).unwrap();
        assert_eq!(tape.shape(enc.article_states[0]), [512]);
        let again = Extractor::new(ExtractorConfig::default(), ex.vocab().clone(), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(ex.num_parameters(), again.num_parameters());
    }

    #[test]
    fn articles_are_encoded_independently() {
        let (_, ex) = toy();
        let a = vec![tokens("a b c ."), tokens("d e .")];
        let b = vec![tokens("x y z ."), tokens("a c ."), tokens("e .")];
        let c1 = Cluster::new("1", vec![a.clone(), b.clone()], vec![]).unwrap();
        let c2 = Cluster::new("2", vec![b, a], vec![]).unwrap();
        let mut t1 = Tape::new(ex.params());
        let e1 = ex.encode(&mut t1, &c1).unwrap();
        let mut t2 = Tape::new(ex.params());
        let e2 = ex.encode(&mut t2, &c2).unwrap();
        for (i, j) in [(0, 3), (1, 4), (2, 0), (3, 1), (4, 2)] {
            assert_eq!(t1.value(e1.article_states[i]), t2.value(e2.article_states[j]));
        }
    }

    #[test]
    fn attention_is_convex() {
        let (_, ex) = toy();
        let h = 2 * ex.config().hidden;
        let mut tape = Tape::new(ex.params());
        let row: Vec<f64> = (0..h).map(|i| i as f64 * 0.1).collect();
        let m = tape.constant(Tensor::matrix(3, h, row.repeat(3)).unwrap());
        let d = tape.constant(Tensor::uniform(&[ex.config().hidden], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let (alpha, c) = ex.attention_context(&mut tape, d, m).unwrap();
        assert_relative_eq!(tape.value(alpha).data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (a, b) in tape.value(c).data().iter().zip(&row) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        // one key dominating by a wide margin
        let mut rows = vec![0.0; 3 * h];
        rows[h..2 * h].copy_from_slice(&row);
        let mut sharp = ex.clone();
        let proj = sharp.param_id("attn_proj").unwrap();
        let hidden = ex.config().hidden;
        let p = sharp.params_mut().value_mut(proj);
        p.data_mut().fill(0.0);
        for i in 0..hidden {
            p.data_mut()[i * hidden + i] = 1.0;
        }
        let mut query = vec![0.0; hidden];
        query[1] = 1e4;
        let mut tape = Tape::new(sharp.params());
        let m = tape.constant(Tensor::matrix(3, h, rows).unwrap());
        let d = tape.constant(Tensor::vector(query));
        let (alpha, c) = sharp.attention_context(&mut tape, d, m).unwrap();
        assert!(tape.value(alpha).data()[1] > 1.0 - 1e-9);
        for (a, b) in tape.value(c).data().iter().zip(&row) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_v_gives_uniform_and_zero_value_head_gives_zero() {
        let (cluster, mut ex) = toy();
        zero(&mut ex, "v");
        zero(&mut ex, "value.weight");
        let mut tape = Tape::new(ex.params());
        let enc = ex.encode(&mut tape, &cluster).unwrap();
        let mut pool = PoolState::for_cluster(&cluster);
        let step = ex.decode_step(&mut tape, &enc, &pool, None, enc.initial_state()).unwrap();
        let n = cluster.num_sentences() + 1;
        for p in &step.distribution.probs {
            assert_relative_eq!(*p, 1.0 / n as f64, epsilon = 1e-12);
        }
        assert_eq!(tape.item(step.value), 0.0);
        pool.extract(2).unwrap();
        let step = ex.decode_step(&mut tape, &enc, &pool, Some(2), step.state).unwrap();
        assert_eq!(step.distribution.probs[2], 0.0);
        assert_relative_eq!(step.distribution.probs[0], 1.0 / (n - 1) as f64, epsilon = 1e-12);
        check_distribution(&step.distribution);
    }

    #[test]
    fn empty_pool_stops() {
        let (cluster, ex) = toy();
        let mut tape = Tape::new(ex.params());
        let enc = ex.encode(&mut tape, &cluster).unwrap();
        let mut pool = PoolState::for_cluster(&cluster);
        let mut state = enc.initial_state();
        let mut prev = None;
        for i in 0..cluster.num_sentences() {
            let step = ex.decode_step(&mut tape, &enc, &pool, prev, state).unwrap();
            check_distribution(&step.distribution);
            state = step.state;
            pool.extract(i).unwrap();
            prev = Some(i);
        }
        let step = ex.decode_step(&mut tape, &enc, &pool, prev, state).unwrap();
        assert_eq!(*step.distribution.probs.last().unwrap(), 1.0);
        assert_eq!(step.distribution.argmax(), cluster.num_sentences());
    }

    #[test]
    fn scaling_v_scales_scores() {
        let (cluster, ex) = toy();
        let mut doubled = ex.clone();
        let v = ex.param_id("v").unwrap();
        doubled.params_mut().value_mut(v).data_mut().iter_mut().for_each(|x| *x *= 2.0);
        let run = |e: &Extractor| {
            let mut tape = Tape::new(e.params());
            let enc = e.encode(&mut tape, &cluster).unwrap();
            let start = tape.param(e.ids.start);
            let (h, _) = tape
                .lstm_cell(start, enc.initial.h, enc.initial.c, &e.ids.decoder)
                .unwrap();
            let s = e.pointer_scores(&mut tape, &enc, h).unwrap();
            tape.value(s).data().to_vec()
        };
        let (a, b) = (run(&ex), run(&doubled));
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(2.0 * x, *y, epsilon = 1e-14);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn decoder_depends_on_previous_selection() {
        let (cluster, ex) = toy();
        let mut tape = Tape::new(ex.params());
        let enc = ex.encode(&mut tape, &cluster).unwrap();
        let pool = PoolState::for_cluster(&cluster);
        let a = ex.decode_step(&mut tape, &enc, &pool, Some(0), enc.initial_state()).unwrap();
        let b = ex.decode_step(&mut tape, &enc, &pool, Some(4), enc.initial_state()).unwrap();
        let a2 = ex.decode_step(&mut tape, &enc, &pool, Some(0), enc.initial_state()).unwrap();
        assert_ne!(tape.value(a.state.h), tape.value(b.state.h));
        assert_eq!(tape.value(a.state.h), tape.value(a2.state.h));
        assert_eq!(a.distribution, a2.distribution);
    }

    /// Teacher-forced NLL of the oracle sequence followed by STOP.
    fn nll(ex: &Extractor, tape: &mut Tape<'_>, cluster: &Cluster) -> Result<Var> {
        let labels = oracle_labels(cluster)?;
        let enc = ex.encode(tape, cluster)?;
        let mut pool = PoolState::for_cluster(cluster);
        let mut state = enc.initial_state();
        let mut prev = None;
        let mut terms = Vec::new();
        for &l in labels.labels.iter().chain(std::iter::once(&cluster.num_sentences())) {
            let step = ex.decode_step(tape, &enc, &pool, prev, state)?;
            state = step.state;
            if l == cluster.num_sentences() || pool.is_available(l) {
                terms.push(tape.pick(step.log_probs, l)?);
            }
            if l < cluster.num_sentences() && pool.is_available(l) {
                pool.extract(l)?;
            }
            prev = Some(l);
        }
        let total = tape.add_all(&terms)?;
        Ok(tape.scale(total, -1.0))
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let (cluster, mut ex) = toy();
        // larger weights so that the check is not dominated by near-zero gradients
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in ex.params().ids().collect::<Vec<_>>() {
            let shape = ex.params().value(id).shape().to_vec();
            *ex.params_mut().value_mut(id) = Tensor::uniform(&shape, 0.5, &mut rng);
        }
        let err = grad_check(ex.params(), |t: &mut Tape<'_>| nll(&ex, t, &cluster), 1e-4, &mut rng).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_vocab_mismatch() {
        let (cluster, ex) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let hash = ex.save(&path, json!({"seed": 1})).unwrap();
        assert_eq!(hash.len(), 64);
        let (loaded, meta) = Extractor::load(&path).unwrap();
        assert_eq!(meta["seed"], 1);
        let dist = |e: &Extractor| {
            let mut tape = Tape::new(e.params());
            let enc = e.encode(&mut tape, &cluster).unwrap();
            let pool = PoolState::for_cluster(&cluster);
            e.decode_step(&mut tape, &enc, &pool, None, enc.initial_state()).unwrap().distribution
        };
        for (a, b) in dist(&ex).probs.iter().zip(&dist(&loaded).probs) {
            assert_relative_eq!(*a, *b, epsilon = 1e-5);
        }
        fs::write(vocab_path(&path), "other\n").unwrap();
        match Extractor::load(&path) {
            Err(Error::VocabMismatch { checkpoint, vocab }) => {
                assert_eq!(checkpoint, ex.vocab().hash());
                assert_ne!(vocab, checkpoint);
            }
            other => panic!("{other:?}"),
        }
    }
}
