//! Warm-start supervision, rollouts with per-sentence ROUGE rewards,
//! advantage estimation, actor-critic updates and the tabular
//! performance-difference verifier.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{oracle_labels, Cluster, OracleLabels, PoolState, Token};
use crate::extractor::{DecodeStep, Extractor};
use crate::rouge::{rouge_l, rouge_n};
use crate::seed::SeedTree;
use crate::{Error, Result};

/// Per-extraction reward against the aligned gold sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentenceMetric {
    RougeLF1,
    RougeLPrecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub sentence_metric: SentenceMetric,
    pub gamma: f64,
}

impl RewardConfig {
    pub const DEFAULT_GAMMA: f64 = 0.99;

    pub fn new(sentence_metric: SentenceMetric, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(Self { sentence_metric, gamma })
    }
}

/// Which of the two sub-policies is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Importance,
    Redundancy,
}

impl Objective {
    pub fn sentence_metric(self) -> SentenceMetric {
        match self {
            Objective::Importance => SentenceMetric::RougeLF1,
            Objective::Redundancy => SentenceMetric::RougeLPrecision,
        }
    }

    pub fn reward_config(self, gamma: f64) -> Result<RewardConfig> {
        RewardConfig::new(self.sentence_metric(), gamma)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Importance => "importance",
            Objective::Redundancy => "redundancy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Sample,
    Greedy,
}

impl FromStr for Decoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Decoding::Sample),
            "greedy" => Ok(Decoding::Greedy),
            _ => Err(Error::Config(format!("unknown decoding {s:?} (expected sample|greedy)"))),
        }
    }
}

/// Reward for extracting `sentence` as the `k`-th summary sentence; 0 past
/// the end of the gold summary.
pub fn sentence_reward(cluster: &Cluster, k: usize, sentence: usize, metric: SentenceMetric) -> f64 {
    let Some(gold) = cluster.gold().get(k) else {
        return 0.0;
    };
    let score = rouge_l(&cluster.sentence(sentence).tokens, gold);
    match metric {
        SentenceMetric::RougeLF1 => score.f1,
        SentenceMetric::RougeLPrecision => score.precision,
    }
}

/// Terminal reward: ROUGE-1 F1 of the extracted summary against the gold.
pub fn stop_reward(cluster: &Cluster, extracted: &[usize]) -> f64 {
    let summary: Vec<&Token> = extracted.iter().flat_map(|&i| &cluster.sentence(i).tokens).collect();
    let gold: Vec<&Token> = cluster.gold().iter().flatten().collect();
    rouge_n(&summary, &gold, 1).f1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    /// State before the action.
    pub state: S,
    pub action: usize,
    pub reward: f64,
    /// Critic estimate at `state` when the step was taken.
    pub value: f64,
    /// The action was imposed by the step cap rather than chosen by the policy.
    pub forced: bool,
}

/// One episode; the last step is terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S = PoolState> {
    pub steps: Vec<Step<S>>,
}

impl<S> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

impl Trajectory<PoolState> {
    /// Extracted sentences in order (every action except the final STOP).
    pub fn summary(&self) -> Vec<usize> {
        self.steps[..self.steps.len().saturating_sub(1)]
            .iter()
            .map(|s| s.action)
            .collect()
    }
}

/// Episode with the extractor: decode until STOP, forcing STOP after
/// `max_steps` extractions.
pub fn rollout<R: Rng + ?Sized>(
    extractor: &Extractor,
    cluster: &Cluster,
    reward: &RewardConfig,
    decoding: Decoding,
    max_steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if cluster.gold().is_empty() {
        return Err(Error::EmptyGold(cluster.id().to_owned()));
    }
    if max_steps == 0 {
        return Err(Error::Config("max_steps must be at least 1".into()));
    }
    let stop = cluster.num_sentences();
    let mut tape = Tape::new(extractor.params());
    let encoded = extractor.encode(&mut tape, cluster)?;
    let mut pool = PoolState::for_cluster(cluster);
    let mut decoder = encoded.initial_state();
    let mut previous = None;
    let mut steps = Vec::new();
    for t in 0..=max_steps {
        let step = extractor.decode_step(&mut tape, &encoded, &pool, previous, decoder)?;
        let forced = t == max_steps;
        let action = if forced {
            stop
        } else {
            match decoding {
                Decoding::Greedy => step.distribution.argmax(),
                Decoding::Sample => step.distribution.sample(rng),
            }
        };
        let r = if action == stop {
            stop_reward(cluster, pool.extracted())
        } else {
            sentence_reward(cluster, t, action, reward.sentence_metric)
        };
        steps.push(Step {
            state: pool.clone(),
            action,
            reward: r,
            value: tape.item(step.value),
            forced,
        });
        if action == stop {
            break;
        }
        pool.extract(action)?;
        previous = Some(action);
        decoder = step.state;
    }
    Ok(Trajectory { steps })
}

/// Per-step returns and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    /// Discounted return-to-go `Q_t`.
    pub returns: Vec<f64>,
    /// `A_t = Q_t − V_t`.
    pub advantages: Vec<f64>,
}

/// `Q_t = r_t + γ Q_{t+1}`, computed backwards.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn advantage<S>(trajectory: &Trajectory<S>, gamma: f64) -> AdvantageEstimate {
    let returns = returns_to_go(&trajectory.rewards(), gamma);
    let advantages = returns.iter().zip(&trajectory.steps).map(|(q, s)| q - s.value).collect();
    AdvantageEstimate { returns, advantages }
}

/// Settings shared by every actor-critic update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorCriticConfig {
    pub lr: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_norm: f64,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            lr: 1e-7,
            gamma: RewardConfig::DEFAULT_GAMMA,
            entropy_coef: 0.01,
            value_coef: 1.0,
            clip_norm: 2.0,
        }
    }
}

/// Differentiable quantities for one replayed step.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub scores: Var,
    pub log_probs: Var,
    pub mask: Vec<bool>,
    pub value: Var,
}

impl From<DecodeStep> for StepVars {
    fn from(step: DecodeStep) -> Self {
        Self {
            scores: step.scores,
            log_probs: step.log_probs,
            mask: step.distribution.mask,
            value: step.value,
        }
    }
}

/// `Σ_t [−A_t log π(a_t) − β H(π_t)] + c Σ_t (V_t − Q_t)²` with `A_t` taken
/// from the replayed critic and held constant. Forced steps contribute only
/// to the critic term.
pub fn actor_critic_loss<S>(
    tape: &mut Tape<'_>,
    vars: &[StepVars],
    trajectory: &Trajectory<S>,
    config: &ActorCriticConfig,
) -> Result<Var> {
    if vars.len() != trajectory.len() {
        return Err(Error::shape(
            "actor_critic_loss",
            format!("{} replayed steps for a trajectory of {}", vars.len(), trajectory.len()),
        ));
    }
    let returns = returns_to_go(&trajectory.rewards(), config.gamma);
    let mut terms = Vec::with_capacity(3 * vars.len());
    for ((v, step), q) in vars.iter().zip(&trajectory.steps).zip(&returns) {
        let value = tape.item(v.value);
        if !step.forced {
            let a = q - value;
            let lp = tape.pick(v.log_probs, step.action)?;
            terms.push(tape.scale(lp, -a));
            if config.entropy_coef != 0.0 {
                let p = tape.softmax(v.scores, Some(&v.mask))?;
                let neg_entropy = tape.dot(p, v.log_probs)?;
                terms.push(tape.scale(neg_entropy, config.entropy_coef));
            }
        }
        if config.value_coef != 0.0 {
            let target = tape.constant(Tensor::scalar(*q));
            let diff = tape.sub(v.value, target)?;
            let sq = tape.mul(diff, diff)?;
            terms.push(tape.scale(sq, config.value_coef));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.add_all(&terms)
}

/// Replays a trajectory through the extractor on `tape`.
pub fn replay(extractor: &Extractor, tape: &mut Tape<'_>, cluster: &Cluster, trajectory: &Trajectory) -> Result<Vec<StepVars>> {
    let encoded = extractor.encode(tape, cluster)?;
    let mut decoder = encoded.initial_state();
    let mut previous = None;
    let mut out = Vec::with_capacity(trajectory.len());
    for step in &trajectory.steps {
        let s = extractor.decode_step(tape, &encoded, &step.state, previous, decoder)?;
        decoder = s.state;
        previous = Some(step.action);
        out.push(s.into());
    }
    Ok(out)
}

/// Worker pool for per-cluster parallelism. Results are always combined in
/// input order, so the worker count never changes numerical results.
#[derive(Debug)]
pub struct Workers {
    pool: rayon::ThreadPool,
}

impl Workers {
    pub const ENV: &'static str = "POBRL_WORKERS";

    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    /// `POBRL_WORKERS` if set, otherwise `default`.
    pub fn from_env(default: usize) -> Result<Self> {
        match std::env::var(Self::ENV) {
            Ok(v) => {
                let n = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{} must be a positive integer, got {v:?}", Self::ENV)))?;
                Self::new(n)
            }
            Err(_) => Self::new(default),
        }
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Ordered parallel map.
    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Result<Vec<U>>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> Result<U> + Sync + Send,
    {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }
}

/// Sums per-item gradients of `loss` in input order. Returns the summed
/// gradients and the per-item losses.
pub fn batch_gradients<T, F>(store: &ParamStore, items: &[T], workers: &Workers, loss: F) -> Result<(Gradients, Vec<f64>)>
where
    T: Sync,
    F: Fn(&mut Tape<'_>, &T) -> Result<Var> + Sync + Send,
{
    let parts = workers.map(items, |_, item| {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape, item)?;
        let value = tape.item(l);
        Ok((tape.backward(l)?, value))
    })?;
    let mut total = Gradients::default();
    let mut losses = Vec::with_capacity(parts.len());
    for (g, l) in &parts {
        total.merge(g);
        losses.push(*l);
    }
    Ok((total, losses))
}

/// Averages `grads` over `count` items, clips and takes one Adam step.
/// Returns the gradient norm before clipping.
pub fn apply_gradients(store: &mut ParamStore, adam: &mut Adam, grads: &Gradients, count: usize, clip_norm: f64) -> f64 {
    store.zero_grad();
    store.accumulate(grads, 1.0 / count.max(1) as f64);
    let norm = store.clip_grad_norm(clip_norm);
    adam.step(store);
    norm
}

/// One actor-critic step on a batch of extractor episodes.
pub fn actor_critic_update(
    extractor: &mut Extractor,
    adam: &mut Adam,
    episodes: &[(&Cluster, Trajectory)],
    config: &ActorCriticConfig,
    workers: &Workers,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Config("actor-critic update needs at least one trajectory".into()));
    }
    let (grads, losses) = {
        let ex = &*extractor;
        batch_gradients(ex.params(), episodes, workers, |tape, (cluster, traj)| {
            let vars = replay(ex, tape, cluster, traj)?;
            actor_critic_loss(tape, &vars, traj, config)
        })?
    };
    apply_gradients(extractor.params_mut(), adam, &grads, episodes.len(), config.clip_norm);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean NLL of the oracle actions followed by STOP, teacher-forced. A label
/// already extracted by an earlier step is still fed to the decoder but
/// carries no loss term, since the pool mask gives it probability 0.
pub fn warm_start_loss(extractor: &Extractor, tape: &mut Tape<'_>, cluster: &Cluster, labels: &OracleLabels) -> Result<Var> {
    let stop = cluster.num_sentences();
    let encoded = extractor.encode(tape, cluster)?;
    let mut pool = PoolState::for_cluster(cluster);
    let mut decoder = encoded.initial_state();
    let mut previous = None;
    let mut terms = Vec::with_capacity(labels.labels.len() + 1);
    for &label in labels.labels.iter().chain(std::iter::once(&stop)) {
        let step = extractor.decode_step(tape, &encoded, &pool, previous, decoder)?;
        decoder = step.state;
        if label == stop || pool.is_available(label) {
            terms.push(tape.pick(step.log_probs, label)?);
        }
        if label != stop && pool.is_available(label) {
            pool.extract(label)?;
        }
        previous = Some(label);
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, -1.0 / terms.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip_norm: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch: 64,
            clip_norm: 2.0,
        }
    }
}

/// Supervised pre-training on oracle labels. Returns the mean loss of each
/// epoch.
pub fn warm_start(
    extractor: &mut Extractor,
    corpus: &[Cluster],
    config: &WarmStartConfig,
    seeds: &SeedTree,
    workers: &Workers,
) -> Result<Vec<f64>> {
    let labeled: Vec<(&Cluster, OracleLabels)> = corpus
        .iter()
        .filter(|c| !c.gold().is_empty())
        .map(|c| Ok((c, oracle_labels(c)?)))
        .collect::<Result<_>>()?;
    if labeled.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), extractor.params());
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut seeds.split_index("epoch", epoch as u64).rng("shuffle"));
        let mut total = 0.0;
        for batch in order.chunks(config.batch) {
            let items: Vec<&(&Cluster, OracleLabels)> = batch.iter().map(|&i| &labeled[i]).collect();
            let (grads, losses) = {
                let ex = &*extractor;
                batch_gradients(ex.params(), &items, workers, |tape, (c, l)| warm_start_loss(ex, tape, c, l))?
            };
            total += losses.iter().sum::<f64>();
            apply_gradients(extractor.params_mut(), &mut adam, &grads, items.len(), config.clip_norm);
        }
        let mean = total / labeled.len() as f64;
        log::debug!("warm start epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub epochs: usize,
    pub batch: usize,
    pub max_steps: usize,
    pub update: ActorCriticConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            max_steps: 12,
            update: ActorCriticConfig::default(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_loss: f64,
    pub mean_summary_len: f64,
}

/// Fine-tunes a copy of `initial` with sampled rollouts under the objective's
/// reward. Calls `on_epoch` after every epoch.
pub fn train_policy(
    objective: Objective,
    initial: &Extractor,
    corpus: &[Cluster],
    config: &RlConfig,
    seeds: &SeedTree,
    workers: &Workers,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Extractor> {
    let reward = objective.reward_config(config.update.gamma)?;
    let train: Vec<&Cluster> = corpus.iter().filter(|c| !c.gold().is_empty()).collect();
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let seeds = seeds.split(objective.name());
    let mut extractor = initial.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(config.update.lr), extractor.params());
    for epoch in 0..config.epochs {
        let epoch_seeds = seeds.split_index("epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_seeds.rng("shuffle"));
        let (mut reward_sum, mut loss_sum, mut len_sum, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(config.batch).enumerate() {
            let batch_seeds = epoch_seeds.split_index("batch", b as u64);
            let episodes = {
                let ex = &extractor;
                workers.map(batch, |_, &i| {
                    let mut rng = batch_seeds.split_index("cluster", i as u64).rng("rollout");
                    let traj = rollout(ex, train[i], &reward, Decoding::Sample, config.max_steps, &mut rng)?;
                    Ok((train[i], traj))
                })?
            };
            reward_sum += episodes.iter().map(|(_, t)| t.total_reward()).sum::<f64>();
            len_sum += episodes.iter().map(|(_, t)| t.len() - 1).sum::<usize>();
            loss_sum += actor_critic_update(&mut extractor, &mut adam, &episodes, &config.update, workers)?;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            mean_reward: reward_sum / train.len() as f64,
            mean_loss: loss_sum / batches as f64,
            mean_summary_len: len_sum as f64 / train.len() as f64,
        };
        on_epoch(&log);
    }
    Ok(extractor)
}

/// Mean undiscounted greedy-rollout reward over the clusters with gold.
pub fn mean_greedy_reward(
    extractor: &Extractor,
    corpus: &[Cluster],
    reward: &RewardConfig,
    max_steps: usize,
    workers: &Workers,
) -> Result<f64> {
    let train: Vec<&Cluster> = corpus.iter().filter(|c| !c.gold().is_empty()).collect();
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rewards = workers.map(&train, |_, c| {
        // greedy decoding draws no randomness
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(rollout(extractor, c, reward, Decoding::Greedy, max_steps, &mut unused)?.total_reward())
    })?;
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Softmax policy with a value table over a finite state space.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    store: ParamStore,
    logits: ParamId,
    values: ParamId,
    actions: usize,
}

impl TabularPolicy {
    /// Uniform policy, zero values.
    pub fn new(states: usize, actions: usize) -> Result<Self> {
        if states == 0 || actions == 0 {
            return Err(Error::Config("tabular policy needs states and actions".into()));
        }
        let mut store = ParamStore::new();
        let logits = store.add("logits", Tensor::zeros(&[states, actions]))?;
        let values = store.add("values", Tensor::zeros(&[states]))?;
        Ok(Self {
            store,
            logits,
            values,
            actions,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_value(&mut self, state: usize, v: f64) {
        self.store.value_mut(self.values).data_mut()[state] = v;
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        crate::autodiff::masked_softmax(self.store.value(self.logits).row(state), None)
    }

    pub fn value(&self, state: usize) -> f64 {
        self.store.value(self.values).data()[state]
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.probs(state)[action].ln()
    }

    fn step_vars(&self, tape: &mut Tape<'_>, state: usize) -> Result<StepVars> {
        let table = tape.param(self.logits);
        let scores = tape.row(table, state)?;
        let log_probs = tape.log_softmax(scores, None)?;
        let values = tape.param(self.values);
        let value = tape.pick(values, state)?;
        Ok(StepVars {
            scores,
            log_probs,
            mask: vec![true; self.actions],
            value,
        })
    }

    /// Episode whose steps carry the current critic values.
    pub fn record(&self, steps: &[(usize, usize, f64)]) -> Trajectory<usize> {
        Trajectory {
            steps: steps
                .iter()
                .map(|&(state, action, reward)| Step {
                    state,
                    action,
                    reward,
                    value: self.value(state),
                    forced: false,
                })
                .collect(),
        }
    }

    pub fn update(&mut self, adam: &mut Adam, episodes: &[Trajectory<usize>], config: &ActorCriticConfig) -> Result<f64> {
        if episodes.is_empty() {
            return Err(Error::Config("actor-critic update needs at least one trajectory".into()));
        }
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for traj in episodes {
            let mut tape = Tape::new(&self.store);
            let vars = traj
                .steps
                .iter()
                .map(|s| self.step_vars(&mut tape, s.state))
                .collect::<Result<Vec<_>>>()?;
            let l = actor_critic_loss(&mut tape, &vars, traj, config)?;
            loss += tape.item(l);
            grads.merge(&tape.backward(l)?);
        }
        apply_gradients(&mut self.store, adam, &grads, episodes.len(), config.clip_norm);
        Ok(loss / episodes.len() as f64)
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let probs = self.probs(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }
}

/// Finite MDP for exact policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    states: usize,
    actions: usize,
    /// `transitions[(s * actions + a) * states + s']`.
    transitions: Vec<f64>,
    /// `rewards[s * actions + a]`.
    rewards: Vec<f64>,
    initial: Vec<f64>,
    gamma: f64,
}

/// A stochastic policy table, `policy[s][a]`.
pub type PolicyTable = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub v: Vec<f64>,
    /// `q[s][a]`.
    pub q: Vec<Vec<f64>>,
    /// `η = μᵀ V`.
    pub eta: f64,
}

impl Evaluation {
    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.q[s][a] - self.v[s]
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} is not a probability distribution")));
    }
    Ok(())
}

impl TabularMdp {
    pub const MAX_STATES: usize = 16;

    pub fn new(
        states: usize,
        actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if states == 0 || actions == 0 || states > Self::MAX_STATES {
            return Err(Error::Config(format!(
                "tabular MDP needs 1..={} states and at least one action",
                Self::MAX_STATES
            )));
        }
        if transitions.len() != states * actions * states || rewards.len() != states * actions || initial.len() != states {
            return Err(Error::shape(
                "TabularMdp::new",
                format!(
                    "transitions {}, rewards {}, initial {} for {states} states x {actions} actions",
                    transitions.len(),
                    rewards.len(),
                    initial.len()
                ),
            ));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        for (i, row) in transitions.chunks(states).enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        check_distribution(&initial, "initial distribution")?;
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("MDP reward".into()));
        }
        Ok(Self {
            states,
            actions,
            transitions,
            rewards,
            initial,
            gamma,
        })
    }

    /// Dense random MDP with rewards in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(states: usize, actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let simplex = |n: usize, rng: &mut R| {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let transitions = (0..states * actions).flat_map(|_| simplex(states, rng)).collect();
        let rewards = (0..states * actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        let initial = simplex(states, rng);
        Self::new(states, actions, transitions, rewards, initial, gamma)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.actions + a) * self.states + next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.actions + a]
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Random stochastic policy with full support.
    pub fn random_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> PolicyTable {
        (0..self.states)
            .map(|_| {
                let w: Vec<f64> = (0..self.actions).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect()
    }

    fn check_policy(&self, pi: &PolicyTable) -> Result<()> {
        if pi.len() != self.states || pi.iter().any(|r| r.len() != self.actions) {
            return Err(Error::shape("policy", format!("expected {} x {}", self.states, self.actions)));
        }
        for (s, row) in pi.iter().enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(())
    }

    /// `P_π` and `r_π`.
    fn induced(&self, pi: &PolicyTable) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.states;
        let p = DMatrix::from_fn(n, n, |s, next| {
            (0..self.actions).map(|a| pi[s][a] * self.transition(s, a, next)).sum()
        });
        let r = DVector::from_fn(n, |s, _| (0..self.actions).map(|a| pi[s][a] * self.reward(s, a)).sum());
        (p, r)
    }

    fn resolvent(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.states, self.states) - p * self.gamma
    }

    /// Exact `V = (I − γ P_π)⁻¹ r_π`, `Q = R + γ P V`.
    pub fn evaluate(&self, pi: &PolicyTable) -> Result<Evaluation> {
        self.check_policy(pi)?;
        let (p, r) = self.induced(pi);
        let v = self
            .resolvent(&p)
            .lu()
            .solve(&r)
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::Singular(format!("I - {} P is not invertible", self.gamma)))?;
        let q = (0..self.states)
            .map(|s| {
                (0..self.actions)
                    .map(|a| {
                        self.reward(s, a)
                            + self.gamma * (0..self.states).map(|n| self.transition(s, a, n) * v[n]).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let eta = self.initial.iter().zip(v.iter()).map(|(m, x)| m * x).sum();
        Ok(Evaluation {
            v: v.iter().copied().collect(),
            q,
            eta,
        })
    }

    /// Unnormalized discounted occupancy `dᵀ = μᵀ (I − γ P_π)⁻¹`.
    pub fn occupancy(&self, pi: &PolicyTable) -> Result<Vec<f64>> {
        self.check_policy(pi)?;
        let (p, _) = self.induced(pi);
        let mu = DVector::from_column_slice(&self.initial);
        let d = self
            .resolvent(&p)
            .transpose()
            .lu()
            .solve(&mu)
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::Singular(format!("I - {} P is not invertible", self.gamma)))?;
        Ok(d.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDifference {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Compares `η(π_mix) − η(π_imp)` with `Σ_x d_mix(x) Σ_a π_mix(a|x) A_imp(x, a)`.
pub fn performance_difference_check(mdp: &TabularMdp, pi_mix: &PolicyTable, pi_imp: &PolicyTable) -> Result<PerformanceDifference> {
    let mix = mdp.evaluate(pi_mix)?;
    let imp = mdp.evaluate(pi_imp)?;
    let d = mdp.occupancy(pi_mix)?;
    let lhs = mix.eta - imp.eta;
    let rhs = (0..mdp.states())
        .map(|x| d[x] * (0..mdp.actions()).map(|a| pi_mix[x][a] * imp.advantage(x, a)).sum::<f64>())
        .sum();
    Ok(PerformanceDifference {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}
