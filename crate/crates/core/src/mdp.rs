//! Token-level MDP with deterministic transitions, tabular softmax policies,
//! trajectory sampling and exact enumeration.
//!
//! A state is the prompt plus the tokens generated so far, so a prefix of
//! length `t - 1` fully determines `s_t`. Everything that needs a ground
//! truth (expected reward, the on-policy gradient) is computed here by
//! walking the prefix tree, which is feasible while `V^H` stays below the
//! enumeration budget of the MDP.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{stream_rng, CompensatedSum, VecAccumulator};

/// Default cap on the number of sequences any exact routine may visit.
pub const DEFAULT_ENUMERATION_LIMIT: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("unknown state: prefix {prefix:?} has no logit row")]
    UnknownState { prefix: Vec<usize> },
    #[error("enumeration of {requested} items refused: budget is {limit}")]
    EnumerationBudget { requested: u128, limit: u64 },
    #[error("policy does not match the MDP: {0}")]
    LayoutMismatch(String),
    #[error("invalid reward: {0}")]
    InvalidReward(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("advantage is not finite at prefix {prefix:?}")]
    NonFiniteAdvantage { prefix: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, MdpError>;

fn checked_pow(base: usize, exp: usize) -> u128 {
    (base as u128).saturating_pow(exp as u32)
}

/// Terminal reward on complete action sequences.
#[derive(Clone)]
pub enum Reward {
    /// Number of occurrences of `token`.
    CountToken { token: usize },
    /// 1 if the sequence ends with `suffix`, else 0.
    SuffixIndicator { suffix: Vec<usize> },
    /// Seeded uniform `[0, 1)` value per sequence, materialized up front.
    RandomTable { seed: u64, table: Arc<Vec<f64>> },
    Constant(f64),
    Custom(SequenceFn),
}

/// Shared closure over a token sequence.
pub type SequenceFn = Arc<dyn Fn(&[usize]) -> f64 + Send + Sync>;

type Visitor<'a> = dyn FnMut(&[usize], f64, usize, usize) -> Result<()> + 'a;

impl fmt::Debug for Reward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reward::CountToken { token } => write!(f, "CountToken({token})"),
            Reward::SuffixIndicator { suffix } => write!(f, "SuffixIndicator({suffix:?})"),
            Reward::RandomTable { seed, table } => {
                write!(f, "RandomTable(seed={seed}, len={})", table.len())
            }
            Reward::Constant(c) => write!(f, "Constant({c})"),
            Reward::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Reward {
    pub fn custom(f: impl Fn(&[usize]) -> f64 + Send + Sync + 'static) -> Self {
        Reward::Custom(Arc::new(f))
    }

    /// Seeded random reward table over all `V^H` sequences.
    pub fn random_table(seed: u64, vocab_size: usize, horizon: usize, limit: u64) -> Result<Self> {
        let count = checked_pow(vocab_size, horizon);
        if count > limit as u128 {
            return Err(MdpError::EnumerationBudget {
                requested: count,
                limit,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..count).map(|_| rng.random::<f64>()).collect();
        Ok(Reward::RandomTable {
            seed,
            table: Arc::new(table),
        })
    }

    fn evaluate(&self, vocab_size: usize, actions: &[usize]) -> f64 {
        match self {
            Reward::CountToken { token } => actions.iter().filter(|&&a| a == *token).count() as f64,
            Reward::SuffixIndicator { suffix } => {
                if actions.ends_with(suffix) {
                    1.0
                } else {
                    0.0
                }
            }
            Reward::RandomTable { table, .. } => table[sequence_index(vocab_size, actions)],
            Reward::Constant(c) => *c,
            Reward::Custom(f) => f(actions),
        }
    }

    fn validate(&self, vocab_size: usize, horizon: usize) -> Result<()> {
        match self {
            Reward::CountToken { token } if *token >= vocab_size => Err(MdpError::InvalidReward(
                format!("token {token} outside vocabulary of size {vocab_size}"),
            )),
            Reward::SuffixIndicator { suffix } => {
                if suffix.len() > horizon || suffix.iter().any(|&a| a >= vocab_size) {
                    Err(MdpError::InvalidReward(format!(
                        "suffix {suffix:?} does not fit V={vocab_size}, H={horizon}"
                    )))
                } else {
                    Ok(())
                }
            }
            Reward::RandomTable { table, .. } => {
                if table.len() as u128 != checked_pow(vocab_size, horizon) {
                    Err(MdpError::InvalidReward("random table size is not V^H".into()))
                } else {
                    Ok(())
                }
            }
            Reward::Constant(c) if !c.is_finite() => {
                Err(MdpError::InvalidReward("constant reward must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Base-`V` index of a token sequence.
pub fn sequence_index(vocab_size: usize, actions: &[usize]) -> usize {
    actions.iter().fold(0, |acc, &a| acc * vocab_size + a)
}

/// Finite-horizon token MDP with a terminal reward.
#[derive(Debug, Clone)]
pub struct TokenMdp {
    vocab_size: usize,
    horizon: usize,
    reward: Reward,
    prompt_id: String,
    enumeration_limit: u64,
}

impl TokenMdp {
    pub fn new(vocab_size: usize, horizon: usize, reward: Reward) -> Result<Self> {
        if vocab_size < 2 {
            return Err(MdpError::VocabTooSmall(vocab_size));
        }
        if horizon == 0 {
            return Err(MdpError::ZeroHorizon);
        }
        reward.validate(vocab_size, horizon)?;
        Ok(Self {
            vocab_size,
            horizon,
            reward,
            prompt_id: "x".to_string(),
            enumeration_limit: DEFAULT_ENUMERATION_LIMIT,
        })
    }

    pub fn with_prompt_id(mut self, prompt_id: impl Into<String>) -> Self {
        self.prompt_id = prompt_id.into();
        self
    }

    pub fn with_enumeration_limit(mut self, limit: u64) -> Self {
        self.enumeration_limit = limit;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn enumeration_limit(&self) -> u64 {
        self.enumeration_limit
    }

    pub fn reward_spec(&self) -> &Reward {
        &self.reward
    }

    /// Reward of a complete sequence. Panics if `actions` is not length `H`.
    pub fn reward(&self, actions: &[usize]) -> f64 {
        assert_eq!(actions.len(), self.horizon, "reward needs a full sequence");
        self.reward.evaluate(self.vocab_size, actions)
    }

    pub fn num_sequences(&self) -> u128 {
        checked_pow(self.vocab_size, self.horizon)
    }

    /// Number of sequences, or a refusal if it exceeds the budget.
    pub fn check_enumerable(&self) -> Result<usize> {
        let n = self.num_sequences();
        if n > self.enumeration_limit as u128 {
            Err(MdpError::EnumerationBudget {
                requested: n,
                limit: self.enumeration_limit,
            })
        } else {
            Ok(n as usize)
        }
    }
}

/// Generated tokens so far; together with the prompt this is the state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PrefixState(pub Vec<usize>);

impl PrefixState {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn root() -> Self {
        Self(Vec::new())
    }
}

impl Deref for PrefixState {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Dense index over all prefixes of length `0..=max_len`.
///
/// Prefixes are ordered by length, then lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixIndexer {
    vocab_size: usize,
    offsets: Vec<usize>,
}

impl PrefixIndexer {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        let mut offsets = Vec::with_capacity(max_len + 2);
        let mut acc = 0usize;
        let mut level = 1usize;
        for _ in 0..=max_len {
            offsets.push(acc);
            acc += level;
            level = level.saturating_mul(vocab_size);
        }
        offsets.push(acc);
        Self { vocab_size, offsets }
    }

    pub fn max_len(&self) -> usize {
        self.offsets.len() - 2
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, prefix: &[usize]) -> usize {
        self.offsets[prefix.len()] + sequence_index(self.vocab_size, prefix)
    }

    /// Inverse of [`index`](Self::index).
    pub fn prefix(&self, index: usize) -> Vec<usize> {
        let len = self.offsets.partition_point(|&o| o <= index) - 1;
        let mut rest = index - self.offsets[len];
        let mut out = vec![0; len];
        for slot in out.iter_mut().rev() {
            *slot = rest % self.vocab_size;
            rest /= self.vocab_size;
        }
        out
    }
}

/// How prefixes map onto logit rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    /// One row per distinct prefix.
    #[default]
    Prefix,
    /// One row per position shared by all prefixes of that length. The next
    /// token distribution then depends only on `t`, which makes per-token
    /// ratios independent across positions.
    Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLayout {
    vocab_size: usize,
    horizon: usize,
    parametrization: Parametrization,
    indexer: PrefixIndexer,
}

impl PolicyLayout {
    pub fn new(vocab_size: usize, horizon: usize, parametrization: Parametrization) -> Result<Self> {
        Self::with_limit(vocab_size, horizon, parametrization, DEFAULT_ENUMERATION_LIMIT)
    }

    pub fn for_mdp(mdp: &TokenMdp, parametrization: Parametrization) -> Result<Self> {
        Self::with_limit(
            mdp.vocab_size,
            mdp.horizon,
            parametrization,
            mdp.enumeration_limit,
        )
    }

    fn with_limit(
        vocab_size: usize,
        horizon: usize,
        parametrization: Parametrization,
        limit: u64,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(MdpError::VocabTooSmall(vocab_size));
        }
        if horizon == 0 {
            return Err(MdpError::ZeroHorizon);
        }
        let indexer = match parametrization {
            Parametrization::Prefix => {
                let rows: u128 = (0..horizon).map(|k| checked_pow(vocab_size, k)).sum();
                if rows > limit as u128 {
                    return Err(MdpError::EnumerationBudget {
                        requested: rows,
                        limit,
                    });
                }
                PrefixIndexer::new(vocab_size, horizon - 1)
            }
            Parametrization::Position => PrefixIndexer::new(vocab_size, 0),
        };
        Ok(Self {
            vocab_size,
            horizon,
            parametrization,
            indexer,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn parametrization(&self) -> Parametrization {
        self.parametrization
    }

    pub fn num_rows(&self) -> usize {
        match self.parametrization {
            Parametrization::Prefix => self.indexer.len(),
            Parametrization::Position => self.horizon,
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_rows() * self.vocab_size
    }

    /// Logit row serving the state reached by `prefix`.
    pub fn row(&self, prefix: &[usize]) -> Result<usize> {
        if prefix.len() >= self.horizon || prefix.iter().any(|&a| a >= self.vocab_size) {
            return Err(MdpError::UnknownState {
                prefix: prefix.to_vec(),
            });
        }
        Ok(match self.parametrization {
            Parametrization::Prefix => self.indexer.index(prefix),
            Parametrization::Position => prefix.len(),
        })
    }

    fn check_mdp(&self, mdp: &TokenMdp) -> Result<()> {
        if self.vocab_size != mdp.vocab_size || self.horizon != mdp.horizon {
            return Err(MdpError::LayoutMismatch(format!(
                "policy is V={}, H={} but MDP is V={}, H={}",
                self.vocab_size, self.horizon, mdp.vocab_size, mdp.horizon
            )));
        }
        Ok(())
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Softmax policy with one logit row per state (or per position).
///
/// Immutable: updates build a new policy via [`with_logits`](Self::with_logits).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    layout: PolicyLayout,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(layout: PolicyLayout, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != layout.num_params() {
            return Err(MdpError::InvalidPolicy(format!(
                "expected {} logits, got {}",
                layout.num_params(),
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(MdpError::InvalidPolicy(format!("logit {i} is not finite")));
        }
        let log_probs = logits
            .chunks(layout.vocab_size)
            .flat_map(log_softmax)
            .collect();
        Ok(Self {
            layout,
            logits,
            log_probs,
        })
    }

    /// Uniform policy.
    pub fn zeros(layout: PolicyLayout) -> Self {
        let n = layout.num_params();
        Self::new(layout, vec![0.0; n]).expect("zero logits are valid")
    }

    /// Logits drawn i.i.d. from `N(0, std^2)`.
    pub fn gaussian(layout: PolicyLayout, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| MdpError::InvalidPolicy(format!("bad gaussian std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..layout.num_params())
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::new(layout, logits)
    }

    /// Builds logits `ln p` from probability rows. A single row is broadcast
    /// to every state.
    pub fn from_probabilities(layout: PolicyLayout, rows: &[Vec<f64>]) -> Result<Self> {
        let v = layout.vocab_size;
        let n_rows = layout.num_rows();
        if rows.len() != 1 && rows.len() != n_rows {
            return Err(MdpError::InvalidPolicy(format!(
                "expected 1 or {n_rows} probability rows, got {}",
                rows.len()
            )));
        }
        for row in rows {
            if row.len() != v || row.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(MdpError::InvalidPolicy(format!(
                    "probability row {row:?} must have {v} strictly positive entries"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(MdpError::InvalidPolicy(format!(
                    "probability row sums to {total}, not 1"
                )));
            }
        }
        let logits = (0..n_rows)
            .flat_map(|r| rows[if rows.len() == 1 { 0 } else { r }].iter().map(|p| p.ln()))
            .collect();
        Self::new(layout, logits)
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), logits)
    }

    pub fn row_log_probs(&self, row: usize) -> &[f64] {
        let v = self.layout.vocab_size;
        &self.log_probs[row * v..(row + 1) * v]
    }

    pub fn state_log_probs(&self, prefix: &[usize]) -> Result<&[f64]> {
        Ok(self.row_log_probs(self.layout.row(prefix)?))
    }

    /// Next-token distribution at the state reached by `prefix`.
    pub fn distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.state_log_probs(prefix)?.iter().map(|l| l.exp()).collect())
    }

    pub fn log_prob(&self, prefix: &[usize], action: usize) -> Result<f64> {
        self.state_log_probs(prefix)?
            .get(action)
            .copied()
            .ok_or_else(|| MdpError::UnknownState {
                prefix: [prefix, &[action]].concat(),
            })
    }

    /// Per-step `log pi(a_t | s_t)` along `actions`.
    pub fn step_log_probs(&self, actions: &[usize]) -> Result<Vec<f64>> {
        (0..actions.len())
            .map(|t| self.log_prob(&actions[..t], actions[t]))
            .collect()
    }

    /// `log pi(a_{1:n} | x)`.
    pub fn trajectory_logprob(&self, actions: &[usize]) -> Result<f64> {
        Ok(self.step_log_probs(actions)?.iter().sum())
    }

    /// Adds `d log pi(a|s) / d logits[row, :]` into `out`, scaled by `scale`.
    pub fn add_score(&self, prefix: &[usize], action: usize, scale: f64, out: &mut [f64]) -> Result<()> {
        let row = self.layout.row(prefix)?;
        self.add_row_score(row, action, scale, out);
        Ok(())
    }

    pub(crate) fn add_row_score(&self, row: usize, action: usize, scale: f64, out: &mut [f64]) {
        let v = self.layout.vocab_size;
        let base = row * v;
        for (a, lp) in self.row_log_probs(row).iter().enumerate() {
            let indicator = if a == action { 1.0 } else { 0.0 };
            out[base + a] += scale * (indicator - lp.exp());
        }
    }

    pub fn check_mdp(&self, mdp: &TokenMdp) -> Result<()> {
        self.layout.check_mdp(mdp)
    }
}

/// Free-function form of [`TabularPolicy::distribution`].
pub fn policy_distribution(policy: &TabularPolicy, state: &PrefixState) -> Result<Vec<f64>> {
    policy.distribution(state)
}

/// A complete response with log-probabilities under both policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub logp_target: Vec<f64>,
    pub logp_behavior: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    /// Scores `actions` under both policies.
    pub fn score(
        mdp: &TokenMdp,
        behavior: &TabularPolicy,
        target: &TabularPolicy,
        actions: Vec<usize>,
    ) -> Result<Self> {
        let logp_behavior = behavior.step_log_probs(&actions)?;
        let logp_target = target.step_log_probs(&actions)?;
        let reward = mdp.reward(&actions);
        Ok(Self {
            actions,
            logp_target,
            logp_behavior,
            reward,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Same actions, target log-probs recomputed under `target`.
    pub fn rescored(&self, target: &TabularPolicy) -> Result<Self> {
        Ok(Self {
            logp_target: target.step_log_probs(&self.actions)?,
            ..self.clone()
        })
    }
}

/// Trajectories sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }
}

fn check_pair(mdp: &TokenMdp, behavior: &TabularPolicy, target: &TabularPolicy) -> Result<()> {
    behavior.check_mdp(mdp)?;
    target.check_mdp(mdp)
}

fn sample_action(rng: &mut impl Rng, log_probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return a;
        }
    }
    log_probs.len() - 1
}

/// Draws one trajectory from `behavior` using the given RNG.
pub fn sample_trajectory_with(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    check_pair(mdp, behavior, target)?;
    let h = mdp.horizon;
    let mut actions = Vec::with_capacity(h);
    let mut logp_behavior = Vec::with_capacity(h);
    let mut logp_target = Vec::with_capacity(h);
    for _ in 0..h {
        let lb = behavior.state_log_probs(&actions)?;
        let a = sample_action(rng, lb);
        logp_behavior.push(lb[a]);
        logp_target.push(target.state_log_probs(&actions)?[a]);
        actions.push(a);
    }
    let reward = mdp.reward(&actions);
    Ok(Trajectory {
        actions,
        logp_target,
        logp_behavior,
        reward,
    })
}

/// Draws one trajectory ancestrally from `behavior`; deterministic in `rng_seed`.
pub fn sample_trajectory(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    rng_seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_trajectory_with(mdp, behavior, target, &mut rng)
}

/// Draws `n` trajectories, the `i`-th from RNG stream `i` of `seed`.
///
/// Runs on the current rayon pool; the result does not depend on its size.
pub fn sample_batch(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    check_pair(mdp, behavior, target)?;
    let trajectories = (0..n)
        .into_par_iter()
        .map(|i| sample_trajectory_with(mdp, behavior, target, &mut stream_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch { trajectories })
}

/// One enumerated sequence with its exact probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedTrajectory {
    pub trajectory: Trajectory,
    pub prob_behavior: f64,
    pub prob_target: f64,
}

/// Calls `visit` for every one of the `V^H` sequences in lexicographic order.
pub fn for_each_trajectory(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    mut visit: impl FnMut(&Trajectory),
) -> Result<()> {
    check_pair(mdp, behavior, target)?;
    let count = mdp.check_enumerable()?;
    let (v, h) = (mdp.vocab_size, mdp.horizon);
    let mut actions = vec![0usize; h];
    for _ in 0..count {
        let traj = Trajectory::score(mdp, behavior, target, actions.clone())?;
        visit(&traj);
        // odometer increment, last position fastest
        for slot in actions.iter_mut().rev() {
            *slot += 1;
            if *slot < v {
                break;
            }
            *slot = 0;
        }
    }
    Ok(())
}

/// All `V^H` trajectories with their probabilities under both policies.
pub fn enumerate_trajectories(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
) -> Result<Vec<EnumeratedTrajectory>> {
    let mut out = Vec::with_capacity(mdp.check_enumerable()?);
    for_each_trajectory(mdp, behavior, target, |traj| {
        let prob_behavior = traj.logp_behavior.iter().sum::<f64>().exp();
        let prob_target = traj.logp_target.iter().sum::<f64>().exp();
        out.push(EnumeratedTrajectory {
            trajectory: traj.clone(),
            prob_behavior,
            prob_target,
        });
    })?;
    Ok(out)
}

/// Depth-first walk over every prefix of length `1..=H`.
///
/// `visit(prefix, logp_prefix, row, action)` receives the prefix including
/// its last action, the log-probability of the whole prefix under `policy`,
/// and the logit row of the state that emitted the last action.
pub(crate) fn walk_prefixes(
    mdp: &TokenMdp,
    policy: &TabularPolicy,
    mut visit: impl FnMut(&[usize], f64, usize, usize) -> Result<()>,
) -> Result<()> {
    policy.check_mdp(mdp)?;
    mdp.check_enumerable()?;
    fn recurse(
        policy: &TabularPolicy,
        horizon: usize,
        prefix: &mut Vec<usize>,
        logp: f64,
        visit: &mut Visitor<'_>,
    ) -> Result<()> {
        if prefix.len() == horizon {
            return Ok(());
        }
        let row = policy.layout.row(prefix)?;
        let lps = policy.row_log_probs(row).to_vec();
        for (a, lp) in lps.into_iter().enumerate() {
            prefix.push(a);
            let next = logp + lp;
            visit(prefix, next, row, a)?;
            recurse(policy, horizon, prefix, next, visit)?;
            prefix.pop();
        }
        Ok(())
    }
    let mut prefix = Vec::with_capacity(mdp.horizon);
    recurse(policy, mdp.horizon, &mut prefix, 0.0, &mut visit)
}

/// `J = sum_tau pi(tau) R(tau)` by enumeration.
pub fn exact_expected_reward(mdp: &TokenMdp, policy: &TabularPolicy) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    walk_prefixes(mdp, policy, |prefix, logp, _, _| {
        if prefix.len() == mdp.horizon {
            acc.add(logp.exp() * mdp.reward(prefix));
        }
        Ok(())
    })?;
    Ok(acc.value())
}

/// Token-level advantage `A_t` as a function of the prefix `a_{1:t}`.
pub trait Advantage: Sync {
    fn value(&self, prefix: &[usize]) -> f64;
}

impl<F> Advantage for F
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn value(&self, prefix: &[usize]) -> f64 {
        self(prefix)
    }
}

pub(crate) fn checked_advantage(advantage: &(impl Advantage + ?Sized), prefix: &[usize]) -> Result<f64> {
    let a = advantage.value(prefix);
    if a.is_finite() {
        Ok(a)
    } else {
        Err(MdpError::NonFiniteAdvantage {
            prefix: prefix.to_vec(),
        })
    }
}

/// On-policy gradient `E_pi[sum_t A_t grad log pi(a_t|s_t)]` w.r.t. the logits.
///
/// Sums over prefixes rather than full sequences: the suffix marginalizes
/// out because `A_t` and the score depend only on `a_{1:t}`.
pub fn exact_policy_gradient(
    mdp: &TokenMdp,
    policy: &TabularPolicy,
    advantage: &(impl Advantage + ?Sized),
) -> Result<Vec<f64>> {
    let v = mdp.vocab_size;
    let mut acc = VecAccumulator::zeros(policy.num_params());
    walk_prefixes(mdp, policy, |prefix, logp, row, action| {
        let weight = logp.exp() * checked_advantage(advantage, prefix)?;
        if weight != 0.0 {
            for (a, lp) in policy.row_log_probs(row).iter().enumerate() {
                let indicator = if a == action { 1.0 } else { 0.0 };
                acc.add_at(row * v + a, weight * (indicator - lp.exp()));
            }
        }
        Ok(())
    })?;
    Ok(acc.values())
}

/// `E_pi[R | a_{1:k}]` for every prefix of length `0..=H`, indexed by a
/// [`PrefixIndexer`] of max length `H`.
pub fn conditional_values(mdp: &TokenMdp, policy: &TabularPolicy) -> Result<(PrefixIndexer, Vec<f64>)> {
    policy.check_mdp(mdp)?;
    mdp.check_enumerable()?;
    let (v, h) = (mdp.vocab_size, mdp.horizon);
    let indexer = PrefixIndexer::new(v, h);
    let mut values = vec![0.0; indexer.len()];
    // Backward sweep by length.
    let mut prefix = vec![0usize; h];
    for idx in (0..indexer.len()).rev() {
        let p = indexer.prefix(idx);
        if p.len() == h {
            values[idx] = mdp.reward(&p);
        } else {
            let lps = policy.state_log_probs(&p)?;
            prefix.clear();
            prefix.extend_from_slice(&p);
            let mut acc = 0.0;
            for (a, lp) in lps.iter().enumerate() {
                prefix.push(a);
                acc += lp.exp() * values[indexer.index(&prefix)];
                prefix.pop();
            }
            values[idx] = acc;
        }
    }
    Ok((indexer, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn layout(v: usize, h: usize) -> PolicyLayout {
        PolicyLayout::new(v, h, Parametrization::Prefix).unwrap()
    }

    fn binary(p0: f64, h: usize) -> TabularPolicy {
        TabularPolicy::from_probabilities(layout(2, h), &[vec![p0, 1.0 - p0]]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let l = PolicyLayout::new(2, 1, Parametrization::Prefix).unwrap();
        let p = TabularPolicy::zeros(l.clone());
        assert_eq!(p.distribution(&[]).unwrap(), vec![0.5, 0.5]);
        let p = TabularPolicy::new(l, vec![3f64.ln(), 0.0]).unwrap();
        let d = p.distribution(&[]).unwrap();
        assert_abs_diff_eq!(d[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.25, epsilon = 1e-15);

        let l3 = PolicyLayout::new(3, 1, Parametrization::Prefix).unwrap();
        let p = TabularPolicy::new(l3, vec![1.0, 2.0, 3.0]).unwrap();
        let d = policy_distribution(&p, &PrefixState::root()).unwrap();
        // exp-normalize by hand: e^k / (e + e^2 + e^3)
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, x) in d.iter().enumerate() {
            assert_abs_diff_eq!(*x, ((k + 1) as f64).exp() / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(d[0], 0.0900, epsilon = 1e-4);
        assert_abs_diff_eq!(d[1], 0.2447, epsilon = 1e-4);
        assert_abs_diff_eq!(d[2], 0.6652, epsilon = 1e-4);
    }

    #[test]
    fn unknown_state_is_structured() {
        let p = TabularPolicy::zeros(layout(2, 2));
        assert!(matches!(
            p.distribution(&[0, 1]),
            Err(MdpError::UnknownState { .. })
        ));
        assert!(matches!(
            p.distribution(&[5]),
            Err(MdpError::UnknownState { .. })
        ));
    }

    #[test]
    fn invalid_mdps_rejected() {
        assert_eq!(
            TokenMdp::new(1, 2, Reward::Constant(0.0)).unwrap_err(),
            MdpError::VocabTooSmall(1)
        );
        assert_eq!(
            TokenMdp::new(2, 0, Reward::Constant(0.0)).unwrap_err(),
            MdpError::ZeroHorizon
        );
        assert!(TokenMdp::new(2, 2, Reward::CountToken { token: 2 }).is_err());
    }

    #[test]
    fn prefix_indexer_roundtrip() {
        let ix = PrefixIndexer::new(3, 3);
        assert_eq!(ix.len(), 1 + 3 + 9 + 27);
        for i in 0..ix.len() {
            assert_eq!(ix.index(&ix.prefix(i)), i);
        }
        assert_eq!(ix.index(&[]), 0);
        assert_eq!(ix.index(&[2]), 3);
    }

    #[test]
    fn sampling_examples() {
        let mdp = TokenMdp::new(3, 4, Reward::CountToken { token: 1 }).unwrap();
        let pol = TabularPolicy::gaussian(layout(3, 4), 1.0, 5).unwrap();
        let t = sample_trajectory(&mdp, &pol, &pol, 11).unwrap();
        assert_eq!(t.logp_target, t.logp_behavior);
        assert_eq!(t, sample_trajectory(&mdp, &pol, &pol, 11).unwrap());
        assert_eq!(t.len(), 4);
        assert_abs_diff_eq!(
            t.logp_behavior.iter().sum::<f64>(),
            pol.trajectory_logprob(&t.actions).unwrap(),
            epsilon = 1e-12
        );

        let mdp1 = TokenMdp::new(2, 1, Reward::CountToken { token: 1 }).unwrap();
        let near = binary(1.0 - 1e-15, 1);
        for seed in 0..200 {
            assert_eq!(sample_trajectory(&mdp1, &near, &near, seed).unwrap().actions, vec![0]);
        }
    }

    #[test]
    fn enumeration_examples() {
        let mdp = TokenMdp::new(2, 2, Reward::Constant(0.0)).unwrap();
        let uniform = TabularPolicy::zeros(layout(2, 2));
        let all = enumerate_trajectories(&mdp, &uniform, &binary(0.6, 2)).unwrap();
        assert_eq!(all.len(), 4);
        for e in &all {
            assert_abs_diff_eq!(e.prob_behavior, 0.25, epsilon = 1e-15);
        }
        assert_eq!(all[0].trajectory.actions, vec![0, 0]);
        assert_abs_diff_eq!(all[0].prob_target, 0.36, epsilon = 1e-15);
        let total: f64 = all.iter().map(|e| e.prob_target).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn enumeration_budget_refused() {
        let mdp = TokenMdp::new(4, 6, Reward::Constant(0.0))
            .unwrap()
            .with_enumeration_limit(100);
        let p = TabularPolicy::zeros(PolicyLayout::new(4, 6, Parametrization::Position).unwrap());
        let err = enumerate_trajectories(&mdp, &p, &p).unwrap_err();
        assert_eq!(
            err,
            MdpError::EnumerationBudget {
                requested: 4096,
                limit: 100
            }
        );
        assert!(err.to_string().contains("100"));
        assert!(exact_expected_reward(&mdp, &p).is_err());
    }

    #[test]
    fn expected_reward_examples() {
        let mdp = TokenMdp::new(3, 3, Reward::Constant(2.5)).unwrap();
        let p = TabularPolicy::gaussian(layout(3, 3), 1.0, 1).unwrap();
        assert_abs_diff_eq!(exact_expected_reward(&mdp, &p).unwrap(), 2.5, epsilon = 1e-12);

        let mdp = TokenMdp::new(2, 1, Reward::CountToken { token: 1 }).unwrap();
        assert_abs_diff_eq!(
            exact_expected_reward(&mdp, &binary(0.7, 1)).unwrap(),
            0.3,
            epsilon = 1e-12
        );

        // Enumerated by hand: 0.16*0 + 0.24*1 + 0.24*1 + 0.36*2 = 1.2
        let mdp = TokenMdp::new(2, 2, Reward::CountToken { token: 1 }).unwrap();
        assert_abs_diff_eq!(
            exact_expected_reward(&mdp, &binary(0.4, 2)).unwrap(),
            1.2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn uniform_all_zeros_indicator() {
        let mdp = TokenMdp::new(2, 3, Reward::SuffixIndicator { suffix: vec![0, 0, 0] }).unwrap();
        let p = TabularPolicy::zeros(layout(2, 3));
        assert_abs_diff_eq!(exact_expected_reward(&mdp, &p).unwrap(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let mdp = TokenMdp::new(3, 3, Reward::Constant(0.0)).unwrap();
        let p = TabularPolicy::gaussian(layout(3, 3), 1.0, 2).unwrap();
        let g = exact_policy_gradient(&mdp, &p, &|_: &[usize]| 0.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mdp = TokenMdp::new(3, 3, Reward::Constant(0.0)).unwrap();
        let p = TabularPolicy::gaussian(layout(3, 3), 1.0, 3).unwrap();
        let adv = |prefix: &[usize]| (prefix.iter().sum::<usize>() as f64).sin();
        let g = exact_policy_gradient(&mdp, &p, &adv).unwrap();
        for row in g.chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn gradient_is_baseline_invariant() {
        let mdp = TokenMdp::new(2, 3, Reward::random_table(4, 2, 3, 1000).unwrap()).unwrap();
        let p = TabularPolicy::gaussian(layout(2, 3), 0.8, 4).unwrap();
        // A_t = E[R | a_{1:t}] - b; the constant b must wash out.
        let (ix, q) = conditional_values(&mdp, &p).unwrap();
        let g0 = exact_policy_gradient(&mdp, &p, &|pre: &[usize]| q[ix.index(pre)]).unwrap();
        let g1 = exact_policy_gradient(&mdp, &p, &|pre: &[usize]| q[ix.index(pre)] - 0.73).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn conditional_values_root_is_expected_reward() {
        let mdp = TokenMdp::new(3, 3, Reward::random_table(8, 3, 3, 1000).unwrap()).unwrap();
        let p = TabularPolicy::gaussian(layout(3, 3), 1.0, 8).unwrap();
        let (ix, q) = conditional_values(&mdp, &p).unwrap();
        assert_abs_diff_eq!(
            q[ix.index(&[])],
            exact_expected_reward(&mdp, &p).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn position_parametrization_shares_rows() {
        let l = PolicyLayout::new(3, 4, Parametrization::Position).unwrap();
        assert_eq!(l.num_rows(), 4);
        assert_eq!(l.row(&[0, 1]).unwrap(), l.row(&[2, 2]).unwrap());
        assert_ne!(l.row(&[0]).unwrap(), l.row(&[0, 0]).unwrap());
    }

    #[test]
    fn batch_sampling_is_thread_count_independent() {
        let mdp = TokenMdp::new(3, 5, Reward::CountToken { token: 0 }).unwrap();
        let b = TabularPolicy::gaussian(layout(3, 5), 1.0, 1).unwrap();
        let t = TabularPolicy::gaussian(layout(3, 5), 1.0, 2).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_batch(&mdp, &b, &t, 257, 42).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
