//! Policy blending: the importance and redundancy policies' extraction
//! distributions combined as `λ·P_imp − (1−λ)·P_red`, with a fixed or
//! advantage-driven λ, and the joint extraction loop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Cluster, PoolState};
use crate::extractor::{argmax, slot_mask, DecodeStep, DecoderState, EncodedCluster, Extractor};
use crate::rl::Decoding;
use crate::{Error, Result};

/// Floor applied to non-positive blended scores before renormalizing.
pub const CLAMP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Fixed(f64),
    Adaptive,
}

impl FromStr for LambdaMode {
    type Err = Error;

    /// `fixed:<x>` or `adaptive`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(LambdaMode::Adaptive);
        }
        let value = s
            .strip_prefix("fixed:")
            .ok_or_else(|| Error::Config(format!("unknown lambda mode {s:?} (expected fixed:<x> or adaptive)")))?;
        let lambda: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("lambda {value:?} is not a number")))?;
        check_lambda(lambda)?;
        Ok(LambdaMode::Fixed(lambda))
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaMode::Fixed(x) => write!(f, "fixed:{x}"),
            LambdaMode::Adaptive => f.write_str("adaptive"),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    pub lambda: LambdaMode,
    pub max_steps: usize,
    pub decoding: Decoding,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaMode::Fixed(0.5),
            max_steps: 12,
            decoding: Decoding::Greedy,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if let LambdaMode::Fixed(x) = self.lambda {
            check_lambda(x)?;
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedDistribution {
    pub probs: Vec<f64>,
    pub lambda_used: f64,
    /// `λ·P_imp − (1−λ)·P_red` before clamping.
    pub raw_scores: Vec<f64>,
}

fn check_input(p: &[f64], mask: &[bool], name: &str) -> Result<()> {
    if p.len() != mask.len() {
        return Err(Error::MaskMismatch(format!(
            "{name} has {} slots, mask has {}",
            p.len(),
            mask.len()
        )));
    }
    if let Some(i) = (0..p.len()).find(|&i| !mask[i] && p[i] != 0.0) {
        return Err(Error::MaskMismatch(format!("{name} puts mass on masked slot {i}")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NonFinite(format!("{name} is not a probability vector")));
    }
    Ok(())
}

/// Blends two masked distributions. Scores at or below zero are floored at
/// [`CLAMP_FLOOR`] before renormalizing. When no unmasked score is positive
/// the scores are shifted so the smallest becomes the floor, which keeps
/// their order (uniform when they are all equal). `λ = 1` returns `p_imp`
/// unchanged.
pub fn blend_distributions(p_imp: &[f64], p_red: &[f64], lambda: f64, mask: &[bool]) -> Result<BlendedDistribution> {
    check_lambda(lambda)?;
    check_input(p_imp, mask, "importance distribution")?;
    check_input(p_red, mask, "redundancy distribution")?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::MaskMismatch("every slot is masked".into()));
    }
    let raw_scores: Vec<f64> = p_imp
        .iter()
        .zip(p_red)
        .map(|(i, r)| lambda * i - (1.0 - lambda) * r)
        .collect();
    if lambda == 1.0 {
        return Ok(BlendedDistribution {
            probs: p_imp.to_vec(),
            lambda_used: lambda,
            raw_scores,
        });
    }
    Ok(BlendedDistribution {
        probs: clamp_and_normalize(&raw_scores, mask),
        lambda_used: lambda,
        raw_scores,
    })
}

/// Turns blended scores into a distribution over the unmasked slots; see
/// [`blend_distributions`]. `mask` must have at least one open slot.
pub fn clamp_and_normalize(raw_scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let unmasked = || (0..mask.len()).filter(|&i| mask[i]);
    let mut probs = vec![0.0; mask.len()];
    if unmasked().any(|i| raw_scores[i] > 0.0) {
        for i in unmasked() {
            probs[i] = raw_scores[i].max(CLAMP_FLOOR);
        }
    } else {
        let min = unmasked().map(|i| raw_scores[i]).fold(f64::INFINITY, f64::min);
        for i in unmasked() {
            probs[i] = raw_scores[i] - min + CLAMP_FLOOR;
        }
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    probs
}

/// `logistic(a_imp − a_red)`, kept strictly inside (0, 1). Saturates in f64
/// once the difference exceeds about 37.
pub fn adaptive_lambda(a_imp: f64, a_red: f64) -> Result<f64> {
    if !a_imp.is_finite() || !a_red.is_finite() {
        return Err(Error::NonFinite(format!("advantages ({a_imp}, {a_red})")));
    }
    let x = a_imp - a_red;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    Ok(y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// One policy's view of a shared episode.
struct Track<'a, 'p> {
    extractor: &'a Extractor,
    tape: Tape<'p>,
    encoded: EncodedCluster,
    decoder: DecoderState,
}

impl<'a> Track<'a, 'a> {
    fn new(extractor: &'a Extractor, cluster: &Cluster) -> Result<Self> {
        let mut tape = Tape::new(extractor.params());
        let encoded = extractor.encode(&mut tape, cluster)?;
        let decoder = encoded.initial_state();
        Ok(Self {
            extractor,
            tape,
            encoded,
            decoder,
        })
    }

    fn step(&mut self, pool: &PoolState, previous: Option<usize>) -> Result<DecodeStep> {
        let step = self
            .extractor
            .decode_step(&mut self.tape, &self.encoded, pool, previous, self.decoder)?;
        self.decoder = step.state;
        Ok(step)
    }

    /// `γ·V(X_{t+1}) − V(X_t)` for this policy's greedy candidate; the
    /// successor of STOP is terminal with value 0.
    fn greedy_advantage(&mut self, step: &DecodeStep, gamma: f64) -> Result<f64> {
        let v_now = self.tape.item(step.value);
        let a = step.distribution.argmax();
        if a == step.distribution.stop_index() {
            return Ok(-v_now);
        }
        let next = self.extractor.advance(&mut self.tape, &self.encoded, Some(a), step.state)?;
        let v_next = self.extractor.value(&mut self.tape, next)?;
        Ok(gamma * self.tape.item(v_next) - v_now)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub lambda: f64,
    pub index: usize,
    #[serde(skip)]
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedSummary {
    /// Extracted global sentence indices in order.
    pub summary: Vec<usize>,
    pub trace: Vec<TraceStep>,
}

/// Discount used for the one-step advantage lookahead in adaptive mode.
pub const ADAPTIVE_GAMMA: f64 = 0.99;

/// Extracts a summary with the blended policy. Both policies advance their
/// own decoders on every jointly chosen sentence. STOP is forced once
/// `max_steps` sentences have been extracted.
pub fn pobrl_summarize<R: Rng + ?Sized>(
    cluster: &Cluster,
    importance: &Extractor,
    redundancy: &Extractor,
    config: &BlendConfig,
    rng: &mut R,
) -> Result<BlendedSummary> {
    config.validate()?;
    let stop = cluster.num_sentences();
    let mut imp = Track::new(importance, cluster)?;
    let mut red = Track::new(redundancy, cluster)?;
    let mut pool = PoolState::for_cluster(cluster);
    let mut previous = None;
    let mut trace = Vec::new();
    for t in 0..=config.max_steps {
        let si = imp.step(&pool, previous)?;
        let sr = red.step(&pool, previous)?;
        let lambda = match config.lambda {
            LambdaMode::Fixed(x) => x,
            LambdaMode::Adaptive => {
                let a_imp = imp.greedy_advantage(&si, ADAPTIVE_GAMMA)?;
                let a_red = red.greedy_advantage(&sr, ADAPTIVE_GAMMA)?;
                adaptive_lambda(a_imp, a_red)?
            }
        };
        let mask = slot_mask(&pool);
        let blended = blend_distributions(&si.distribution.probs, &sr.distribution.probs, lambda, &mask)?;
        let index = if t == config.max_steps {
            stop
        } else {
            match config.decoding {
                Decoding::Greedy => argmax(&blended.probs),
                Decoding::Sample => sample(&blended.probs, rng),
            }
        };
        trace.push(TraceStep {
            step: t,
            lambda,
            index,
            probs: blended.probs,
        });
        if index == stop {
            break;
        }
        pool.extract(index)?;
        previous = Some(index);
    }
    Ok(BlendedSummary {
        summary: pool.extracted().to_vec(),
        trace,
    })
}

fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, tokens};
    use crate::extractor::{ExtractorConfig, Vocab};
    use crate::rl::{rollout, Objective};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_blend() {
        let (p, q) = ([0.5, 0.3, 0.2], [0.1, 0.6, 0.3]);
        let b = blend_distributions(&p, &q, 0.8, &[true; 3]).unwrap();
        // independent arithmetic: every raw score is positive here, so no floor applies
        let raw: Vec<f64> = (0..3).map(|i| 0.8 * p[i] - 0.2 * q[i]).collect();
        assert_relative_eq!(raw[1], 0.12, epsilon = 1e-15);
        let z: f64 = raw.iter().sum();
        for (x, r) in b.probs.iter().zip(&raw) {
            assert_relative_eq!(*x, r / z, epsilon = 1e-15);
        }
        // the floor-and-renormalize step on a vector with a negative entry
        let c = clamp_and_normalize(&[0.38, -0.12, 0.01], &[true; 3]);
        assert_relative_eq!(c[0], 0.38 / (0.39 + 1e-8), epsilon = 1e-15);
        assert_relative_eq!(c[0], 0.9744, epsilon = 1e-4);
        assert_relative_eq!(c[1], 2.56e-8, epsilon = 1e-10);
        assert_relative_eq!(c[2], 0.0256, epsilon = 1e-4);
    }

    #[test]
    fn mask_mismatch_is_rejected() {
        let r = blend_distributions(&[0.5, 0.5], &[1.0, 0.0], 0.5, &[false, true]);
        assert!(matches!(r, Err(Error::MaskMismatch(_))));
        let r = blend_distributions(&[0.5, 0.5], &[1.0], 0.5, &[true, true]);
        assert!(matches!(r, Err(Error::MaskMismatch(_))));
    }

    #[test]
    fn lambda_parsing() {
        assert_eq!("fixed:0.25".parse::<LambdaMode>().unwrap(), LambdaMode::Fixed(0.25));
        assert_eq!("adaptive".parse::<LambdaMode>().unwrap(), LambdaMode::Adaptive);
        assert!("fixed:1.5".parse::<LambdaMode>().is_err());
        assert!("greedy".parse::<LambdaMode>().is_err());
    }

    #[test]
    fn adaptive_lambda_values() {
        assert_eq!(adaptive_lambda(0.3, 0.3).unwrap(), 0.5);
        assert!(adaptive_lambda(10.0, 0.0).unwrap() > 0.9999);
        assert!(adaptive_lambda(2.0, 0.0).unwrap() > adaptive_lambda(1.0, 0.0).unwrap());
        assert!(adaptive_lambda(f64::NAN, 0.0).is_err());
        let hi = adaptive_lambda(1e300, -1e300).unwrap();
        let lo = adaptive_lambda(-1e300, 1e300).unwrap();
        assert!(hi < 1.0 && lo > 0.0);
    }

    fn distribution(raw: &[f64], mask: &[bool]) -> Vec<f64> {
        let w: Vec<f64> = raw.iter().zip(mask).map(|(x, m)| if *m { *x } else { 0.0 }).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.01f64..1.0, n + 1),
                proptest::collection::vec(0.01f64..1.0, n + 1),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(a, b, mut m)| {
                    m.push(true);
                    (distribution(&a, &m), distribution(&b, &m), m)
                })
        })
    }

    proptest! {
        #[test]
        fn blend_is_a_valid_distribution((p, q, mask) in arb_case(), lambda in 0.0f64..=1.0) {
            let b = blend_distributions(&p, &q, lambda, &mask).unwrap();
            prop_assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (x, m) in b.probs.iter().zip(&mask) {
                prop_assert!(*x >= 0.0);
                if !m { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn lambda_one_is_identity((p, q, mask) in arb_case()) {
            prop_assert_eq!(blend_distributions(&p, &q, 1.0, &mask).unwrap().probs, p);
        }

        #[test]
        fn lambda_zero_avoids_redundancy((p, q, mask) in arb_case()) {
            let b = blend_distributions(&p, &q, 0.0, &mask).unwrap();
            let mut best = None;
            for i in 0..q.len() {
                if mask[i] && best.is_none_or(|j: usize| q[i] < q[j]) {
                    best = Some(i);
                }
            }
            prop_assert_eq!(argmax(&b.probs), best.unwrap());
        }

        #[test]
        fn rescaling_scores_keeps_the_pick(raw in proptest::collection::vec(-1.0f64..1.0, 2..10), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = raw.iter().map(|x| x * c).collect();
            prop_assert_eq!(argmax(&raw), argmax(&scaled));
        }

        #[test]
        fn adaptive_lambda_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, d in 0.01f64..5.0) {
            let l = adaptive_lambda(a, b).unwrap();
            prop_assert!(l > 0.0 && l < 1.0);
            prop_assert!(adaptive_lambda(a + d, b).unwrap() > l);
            prop_assert!(adaptive_lambda(a, b + d).unwrap() < l);
        }
    }

    fn policies(corpus: &[Cluster]) -> (Extractor, Extractor) {
        let vocab = Vocab::build(corpus, 1);
        let a = Extractor::new(ExtractorConfig::small(), vocab.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Extractor::new(ExtractorConfig::small(), vocab, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (a, b)
    }

    #[test]
    fn lambda_one_matches_greedy_importance_policy() {
        let corpus = synthetic::toy_corpus(5, 3);
        let (imp, red) = policies(&corpus);
        let config = BlendConfig {
            lambda: LambdaMode::Fixed(1.0),
            max_steps: 4,
            decoding: Decoding::Greedy,
        };
        let reward = Objective::Importance.reward_config(0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in &corpus {
            let blended = pobrl_summarize(c, &imp, &red, &config, &mut rng).unwrap();
            let alone = rollout(&imp, c, &reward, Decoding::Greedy, 4, &mut rng).unwrap();
            assert_eq!(blended.summary, alone.summary());
        }
    }

    #[test]
    fn summaries_never_repeat_and_terminate() {
        let corpus = synthetic::toy_corpus(4, 4);
        let (imp, red) = policies(&corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for lambda in [LambdaMode::Fixed(0.0), LambdaMode::Fixed(0.5), LambdaMode::Adaptive] {
            for decoding in [Decoding::Greedy, Decoding::Sample] {
                let config = BlendConfig {
                    lambda,
                    max_steps: 5,
                    decoding,
                };
                for c in &corpus {
                    let s = pobrl_summarize(c, &imp, &red, &config, &mut rng).unwrap();
                    assert!(s.trace.len() <= config.max_steps + 1);
                    let mut seen = s.summary.clone();
                    seen.sort();
                    seen.dedup();
                    assert_eq!(seen.len(), s.summary.len());
                    assert_eq!(s.trace.last().unwrap().index, c.num_sentences());
                    for step in &s.trace {
                        assert!(step.lambda > 0.0 || lambda == LambdaMode::Fixed(0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn single_sentence_cluster() {
        let c = Cluster::new("one", vec![vec![tokens("only sentence .")]], vec![]).unwrap();
        let (imp, red) = policies(std::slice::from_ref(&c));
        let s = pobrl_summarize(&c, &imp, &red, &BlendConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.summary.len() <= 1);
    }
}
