//! Importance-weighted policy-gradient estimators and their exact bias and
//! variance, measured against enumeration oracles.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{
    self, checked_advantage, conditional_values, exact_policy_gradient, for_each_trajectory,
    sample_trajectory_with, Advantage, MdpError, Parametrization, PolicyLayout, PrefixIndexer,
    TabularPolicy, TokenMdp, Trajectory,
};
use crate::numeric::{l2_distance, stream_rng, VecAccumulator};
use crate::ratios::{RatioError, RatioProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Ratio(#[from] RatioError),
    #[error("profile has {profile} positions but trajectory has {trajectory}")]
    ProfileMismatch { profile: usize, trajectory: usize },
    #[error("position {position} outside 1..={horizon}")]
    PositionOutOfRange { position: usize, horizon: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Which importance weight multiplies the token-level gradient term at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// `r_t` alone.
    Token,
    /// `rho_t^cum`, the prefix product up to `t`.
    Cumulative,
    /// `rho^seq` at every position.
    Sequence,
    /// The geometric-mean ratio, applied uniformly to the sequence.
    Gspo,
}

impl RatioMode {
    pub const ALL: [RatioMode; 4] = [
        RatioMode::Token,
        RatioMode::Cumulative,
        RatioMode::Sequence,
        RatioMode::Gspo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RatioMode::Token => "token",
            RatioMode::Cumulative => "cumulative",
            RatioMode::Sequence => "sequence",
            RatioMode::Gspo => "gspo",
        }
    }

    /// Weight at 1-indexed position `t`.
    pub fn weight(self, profile: &RatioProfile, t: usize) -> f64 {
        match self {
            RatioMode::Token => profile.token_ratios[t - 1],
            RatioMode::Cumulative => profile.cumulative[t - 1],
            RatioMode::Sequence => profile.sequence,
            RatioMode::Gspo => profile.gspo,
        }
    }
}

impl fmt::Display for RatioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    /// `Q(s_t, a_t) - V(s_t)` under the target policy.
    TrueAdvantage,
    /// Seeded random value per prefix.
    FixedTable,
    /// One value per trajectory, shared by all positions. It may only depend
    /// on `a_1`, the one token every prefix contains.
    GroupUniform,
}

#[derive(Clone)]
enum AdvantageRepr {
    /// Indexed by a [`PrefixIndexer`] over lengths `0..=H`.
    Prefix(PrefixIndexer, Arc<Vec<f64>>),
    /// Indexed by the first token.
    FirstToken(Arc<Vec<f64>>),
    Custom(crate::mdp::SequenceFn),
}

/// Tagged token-level advantage `A_t(a_{1:t})`.
#[derive(Clone)]
pub struct AdvantageFn {
    kind: AdvantageKind,
    repr: AdvantageRepr,
}

impl fmt::Debug for AdvantageFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdvantageFn").field("kind", &self.kind).finish()
    }
}

impl AdvantageFn {
    pub fn kind(&self) -> AdvantageKind {
        self.kind
    }

    /// Exact `Q - V` under `policy`, computed by enumeration.
    pub fn true_advantage(mdp: &TokenMdp, policy: &TabularPolicy) -> Result<Self> {
        let (indexer, values) = conditional_values(mdp, policy)?;
        let mut adv = vec![0.0; values.len()];
        for (idx, slot) in adv.iter_mut().enumerate().skip(1) {
            let prefix = indexer.prefix(idx);
            let parent = indexer.index(&prefix[..prefix.len() - 1]);
            *slot = values[idx] - values[parent];
        }
        Ok(Self {
            kind: AdvantageKind::TrueAdvantage,
            repr: AdvantageRepr::Prefix(indexer, Arc::new(adv)),
        })
    }

    /// Uniform `[-scale, scale]` value per prefix.
    pub fn fixed_table(vocab_size: usize, horizon: usize, seed: u64, scale: f64) -> Self {
        let indexer = PrefixIndexer::new(vocab_size, horizon);
        let mut rng = stream_rng(seed, 0);
        let table = (0..indexer.len())
            .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            kind: AdvantageKind::FixedTable,
            repr: AdvantageRepr::Prefix(indexer, Arc::new(table)),
        }
    }

    /// Uniform `[-scale, scale]` value per first token, repeated at every position.
    pub fn group_uniform(vocab_size: usize, seed: u64, scale: f64) -> Self {
        let mut rng = stream_rng(seed, 1);
        let values = (0..vocab_size)
            .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            kind: AdvantageKind::GroupUniform,
            repr: AdvantageRepr::FirstToken(Arc::new(values)),
        }
    }

    pub fn constant(vocab_size: usize, value: f64) -> Self {
        Self {
            kind: AdvantageKind::GroupUniform,
            repr: AdvantageRepr::FirstToken(Arc::new(vec![value; vocab_size])),
        }
    }

    pub fn from_fn(kind: AdvantageKind, f: impl Fn(&[usize]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            kind,
            repr: AdvantageRepr::Custom(Arc::new(f)),
        }
    }

    /// One instance of each kind for a given MDP and target policy.
    pub fn battery(mdp: &TokenMdp, target: &TabularPolicy, seed: u64) -> Result<Vec<Self>> {
        Ok(vec![
            Self::true_advantage(mdp, target)?,
            Self::fixed_table(mdp.vocab_size(), mdp.horizon(), seed, 1.0),
            Self::group_uniform(mdp.vocab_size(), seed, 1.0),
        ])
    }
}

impl Advantage for AdvantageFn {
    fn value(&self, prefix: &[usize]) -> f64 {
        match &self.repr {
            AdvantageRepr::Prefix(ix, table) => table[ix.index(prefix)],
            AdvantageRepr::FirstToken(values) => values[prefix[0]],
            AdvantageRepr::Custom(f) => f(prefix),
        }
    }
}

/// `sum_t w_t(mode) A_t grad log pi_theta(a_t | s_t)` for one trajectory.
pub fn is_gradient_term(
    target: &TabularPolicy,
    traj: &Trajectory,
    profile: &RatioProfile,
    mode: RatioMode,
    advantage: &(impl Advantage + ?Sized),
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; target.num_params()];
    add_is_gradient_term(target, traj, profile, mode, advantage, 1.0, &mut out)?;
    Ok(out)
}

fn add_is_gradient_term(
    target: &TabularPolicy,
    traj: &Trajectory,
    profile: &RatioProfile,
    mode: RatioMode,
    advantage: &(impl Advantage + ?Sized),
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    if profile.horizon() != traj.len() {
        return Err(EstimatorError::ProfileMismatch {
            profile: profile.horizon(),
            trajectory: traj.len(),
        });
    }
    for t in 1..=traj.len() {
        let prefix = &traj.actions[..t];
        let a = checked_advantage(advantage, prefix)?;
        let w = mode.weight(profile, t);
        target.add_score(&prefix[..t - 1], prefix[t - 1], scale * w * a, out)?;
    }
    Ok(())
}

/// `sum_tau pi_b(tau) * is_gradient_term(tau, mode)` by enumeration.
pub fn exact_is_expectation(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    mode: RatioMode,
    advantage: &(impl Advantage + ?Sized),
) -> Result<Vec<f64>> {
    let n = target.num_params();
    let mut acc = VecAccumulator::zeros(n);
    let mut term = vec![0.0; n];
    let mut failure = None;
    for_each_trajectory(mdp, behavior, target, |traj| {
        if failure.is_some() {
            return;
        }
        let outcome = RatioProfile::from_trajectory(traj)
            .map_err(EstimatorError::from)
            .and_then(|profile| {
                term.iter_mut().for_each(|x| *x = 0.0);
                let pb = traj.logp_behavior.iter().sum::<f64>().exp();
                add_is_gradient_term(target, traj, &profile, mode, advantage, pb, &mut term)
            });
        match outcome {
            Ok(()) => acc.add_scaled(&term, 1.0),
            Err(e) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(acc.values()),
    }
}

/// Result of comparing an estimator against the on-policy oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub mode: RatioMode,
    pub mean_gradient: Vec<f64>,
    pub oracle_gradient: Vec<f64>,
    /// L2 distance between `mean_gradient` and `oracle_gradient`.
    pub bias_norm: f64,
    /// Variance of the mode's weight at positions `1..=H` under the behavior policy.
    pub ratio_variance_by_position: Vec<f64>,
    /// Number of sampled (or enumerated) trajectories.
    pub sample_count: u64,
    /// Per-component standard error of `mean_gradient`; zeros for exact reports.
    pub standard_errors: Vec<f64>,
}

impl EstimatorReport {
    /// Largest `|mean - oracle| / se` over components with positive standard error,
    /// and the largest raw error on the rest.
    pub fn max_standardized_error(&self) -> (f64, f64) {
        let mut z: f64 = 0.0;
        let mut raw: f64 = 0.0;
        for ((m, o), se) in self
            .mean_gradient
            .iter()
            .zip(&self.oracle_gradient)
            .zip(&self.standard_errors)
        {
            if *se > 0.0 {
                z = z.max((m - o).abs() / se);
            } else {
                raw = raw.max((m - o).abs());
            }
        }
        (z, raw)
    }
}

/// Exact expectation for `mode` with its bias against the oracle.
pub fn exact_estimator_report(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    mode: RatioMode,
    advantage: &(impl Advantage + ?Sized),
) -> Result<EstimatorReport> {
    let mean_gradient = exact_is_expectation(mdp, behavior, target, mode, advantage)?;
    let oracle_gradient = exact_policy_gradient(mdp, target, advantage)?;
    let bias_norm = l2_distance(&mean_gradient, &oracle_gradient);
    let n = mean_gradient.len();
    Ok(EstimatorReport {
        mode,
        mean_gradient,
        oracle_gradient,
        bias_norm,
        ratio_variance_by_position: exact_weight_variance(mdp, behavior, target, mode)?,
        sample_count: mdp.check_enumerable()? as u64,
        standard_errors: vec![0.0; n],
    })
}

/// Exact variance under `pi_b` of the mode's weight at every position.
pub fn exact_weight_variance(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    mode: RatioMode,
) -> Result<Vec<f64>> {
    let h = mdp.horizon();
    // Moments of (w - 1): the mean of every unbiased weight is 1, so the
    // shifted form avoids cancellation.
    let mut first = VecAccumulator::zeros(h);
    let mut second = VecAccumulator::zeros(h);
    let mut failure = None;
    for_each_trajectory(mdp, behavior, target, |traj| {
        match RatioProfile::from_trajectory(traj) {
            Ok(profile) => {
                let pb = traj.logp_behavior.iter().sum::<f64>().exp();
                for t in 1..=h {
                    let d = mode.weight(&profile, t) - 1.0;
                    first.add_at(t - 1, pb * d);
                    second.add_at(t - 1, pb * d * d);
                }
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(first
        .values()
        .iter()
        .zip(second.values())
        .map(|(m1, m2)| m2 - m1 * m1)
        .collect())
}

/// Exact `Var(rho_t^cum)` at every position and `Var(rho^seq)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioVarianceProfile {
    /// Index `t - 1` holds `Var(rho_t^cum)`.
    pub var_cumulative: Vec<f64>,
    pub var_sequence: f64,
}

impl RatioVarianceProfile {
    /// `Var(rho^seq) / Var(rho_t^cum)` for `t = 1..=H`.
    pub fn variance_ratios(&self) -> Vec<f64> {
        self.var_cumulative
            .iter()
            .map(|v| self.var_sequence / v)
            .collect()
    }
}

pub fn exact_ratio_variance_profile(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
) -> Result<RatioVarianceProfile> {
    let var_cumulative = exact_weight_variance(mdp, behavior, target, RatioMode::Cumulative)?;
    let var_sequence = exact_weight_variance(mdp, behavior, target, RatioMode::Sequence)?[0];
    Ok(RatioVarianceProfile {
        var_cumulative,
        var_sequence,
    })
}

/// `(Var(rho_t^cum), Var(rho^seq))` for 1-indexed `t`.
pub fn exact_ratio_variance(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    t: usize,
) -> Result<(f64, f64)> {
    let h = mdp.horizon();
    if t == 0 || t > h {
        return Err(EstimatorError::PositionOutOfRange {
            position: t,
            horizon: h,
        });
    }
    let profile = exact_ratio_variance_profile(mdp, behavior, target)?;
    Ok((profile.var_cumulative[t - 1], profile.var_sequence))
}

/// `chi^2(target || behavior)` of a single next-token distribution pair.
pub fn local_chi2(target_log_probs: &[f64], behavior_log_probs: &[f64]) -> f64 {
    target_log_probs
        .iter()
        .zip(behavior_log_probs)
        .map(|(lt, lb)| (2.0 * lt - lb).exp())
        .sum::<f64>()
        - 1.0
}

/// `chi2_t = E_{pi_b}[chi^2(pi_theta(.|s_t) || pi_b(.|s_t))]` for `t = 1..=H`.
pub fn chi2_divergence_profile(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
) -> Result<Vec<f64>> {
    target.check_mdp(mdp)?;
    let h = mdp.horizon();
    let mut acc = VecAccumulator::zeros(h);
    acc.add_at(
        0,
        local_chi2(target.state_log_probs(&[])?, behavior.state_log_probs(&[])?),
    );
    let mut failure = None;
    mdp::walk_prefixes(mdp, behavior, |prefix, logp, _, _| {
        let t = prefix.len();
        if t < h {
            match (target.state_log_probs(prefix), behavior.state_log_probs(prefix)) {
                (Ok(lt), Ok(lb)) => acc.add_at(t, logp.exp() * local_chi2(lt, lb)),
                (Err(e), _) | (_, Err(e)) => failure = Some(e),
            }
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(acc.values())
}

/// `prod_{t' <= t} (1 + chi2_t') - 1` for every `t`.
pub fn chi2_product_variances(chi2: &[f64]) -> Vec<f64> {
    chi2.iter()
        .scan(0.0, |log_prod: &mut f64, c| {
            *log_prod += c.ln_1p();
            Some(log_prod.exp_m1())
        })
        .collect()
}

/// `((1+delta)^H - 1) / ((1+delta)^t - 1)` for `t = 1..=H`; `H / t` at `delta = 0`.
pub fn variance_ratio_curve(delta: f64, horizon: usize) -> Vec<f64> {
    (1..=horizon)
        .map(|t| {
            if delta == 0.0 {
                horizon as f64 / t as f64
            } else {
                let lp = delta.ln_1p();
                (horizon as f64 * lp).exp_m1() / (t as f64 * lp).exp_m1()
            }
        })
        .collect()
}

/// Result of the likelihood-ratio identity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatioCheck {
    /// `E_{pi_b}[rho_t^cum]` for `t = 1..=H`.
    pub cumulative_means: Vec<f64>,
    /// `max |E_{pi_b}[eps_t | a_{1:t}] - 1|` over all prefixes with `t < H`.
    pub max_suffix_deviation: f64,
    pub prefixes_checked: usize,
}

/// Checks `E[rho_t^cum] = 1` and `E[eps_t | a_{1:t}] = 1` by grouping full
/// enumerated trajectories under their prefixes.
pub fn likelihood_ratio_identities(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
) -> Result<LikelihoodRatioCheck> {
    let (v, h) = (mdp.vocab_size(), mdp.horizon());
    let indexer = PrefixIndexer::new(v, h);
    let mut weighted = VecAccumulator::zeros(indexer.len());
    let mut mass = VecAccumulator::zeros(indexer.len());
    let mut means = VecAccumulator::zeros(h);
    let mut failure = None;
    for_each_trajectory(mdp, behavior, target, |traj| {
        let profile = match RatioProfile::from_trajectory(traj) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let pb = traj.logp_behavior.iter().sum::<f64>().exp();
        for t in 1..=h {
            means.add_at(t - 1, pb * profile.cumulative[t - 1]);
            if t < h {
                let idx = indexer.index(&traj.actions[..t]);
                let eps = profile.suffix_ratio(t).expect("t within horizon");
                weighted.add_at(idx, pb * eps);
                mass.add_at(idx, pb);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let (weighted, mass) = (weighted.values(), mass.values());
    let mut max_dev: f64 = 0.0;
    let mut checked = 0;
    for (w, m) in weighted.iter().zip(&mass) {
        if *m > 0.0 {
            max_dev = max_dev.max((w / m - 1.0).abs());
            checked += 1;
        }
    }
    Ok(LikelihoodRatioCheck {
        cumulative_means: means.values(),
        max_suffix_deviation: max_dev,
        prefixes_checked: checked,
    })
}

/// Empirical std of `log rho_t^cum` per position with a `sigma * sqrt(t)` fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStdProfile {
    /// Index `t - 1` holds the std at position `t`.
    pub stds: Vec<f64>,
    /// Least-squares `sigma` of `std_t = sigma * sqrt(t)` through the origin.
    pub sigma_hat: f64,
    /// `1 - SS_res / SS_tot` of the fit (1 when both vanish).
    pub r_squared: f64,
    pub fitted: Vec<f64>,
    pub sample_count: usize,
}

pub fn log_ratio_std_profile(profiles: &[RatioProfile]) -> Result<LogStdProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| EstimatorError::InvalidArgument("no profiles".into()))?;
    let h = first.horizon();
    if let Some(p) = profiles.iter().find(|p| p.horizon() != h) {
        return Err(EstimatorError::ProfileMismatch {
            profile: p.horizon(),
            trajectory: h,
        });
    }
    let n = profiles.len() as f64;
    let stds: Vec<f64> = (0..h)
        .map(|t| {
            let mean = profiles.iter().map(|p| p.log_cumulative[t]).sum::<f64>() / n;
            let var = profiles
                .iter()
                .map(|p| (p.log_cumulative[t] - mean).powi(2))
                .sum::<f64>()
                / n;
            var.sqrt()
        })
        .collect();
    let sqrt_t: Vec<f64> = (1..=h).map(|t| (t as f64).sqrt()).collect();
    let denom: f64 = (1..=h).map(|t| t as f64).sum();
    let sigma_hat = stds.iter().zip(&sqrt_t).map(|(s, r)| s * r).sum::<f64>() / denom;
    let fitted: Vec<f64> = sqrt_t.iter().map(|r| sigma_hat * r).collect();
    let mean_std = stds.iter().sum::<f64>() / h as f64;
    let ss_res: f64 = stds.iter().zip(&fitted).map(|(s, f)| (s - f).powi(2)).sum();
    let ss_tot: f64 = stds.iter().map(|s| (s - mean_std).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(LogStdProfile {
        stds,
        sigma_hat,
        r_squared,
        fitted,
        sample_count: profiles.len(),
    })
}

/// Profiles whose per-step log-ratios are i.i.d. `N(mean, std^2)`.
pub fn sample_iid_log_ratio_profiles(
    n: usize,
    horizon: usize,
    mean: f64,
    std: f64,
    seed: u64,
) -> Result<Vec<RatioProfile>> {
    let normal = Normal::new(mean, std)
        .map_err(|e| EstimatorError::InvalidArgument(format!("bad normal({mean}, {std}): {e}")))?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let logs = (0..horizon).map(|_| normal.sample(&mut rng)).collect();
            Ok(RatioProfile::from_log_ratios(logs)?)
        })
        .collect()
}

/// Behavior/target pair whose next-token distribution depends only on the
/// position, which makes per-token ratios independent across positions.
#[derive(Debug, Clone)]
pub struct IndependenceConstruct {
    pub behavior: TabularPolicy,
    pub target: TabularPolicy,
}

impl IndependenceConstruct {
    /// `behavior_rows` / `target_rows` hold one probability row per position,
    /// or a single row shared by all positions.
    pub fn new(
        vocab_size: usize,
        horizon: usize,
        behavior_rows: &[Vec<f64>],
        target_rows: &[Vec<f64>],
    ) -> Result<Self> {
        let layout = PolicyLayout::new(vocab_size, horizon, Parametrization::Position)?;
        Ok(Self {
            behavior: TabularPolicy::from_probabilities(layout.clone(), behavior_rows)?,
            target: TabularPolicy::from_probabilities(layout, target_rows)?,
        })
    }

    /// Binary construct with `chi^2 = delta` at every position: uniform
    /// behavior against target `(1/2 + x, 1/2 - x)` with `4x^2 = delta`.
    pub fn binary_with_chi2(horizon: usize, delta: f64) -> Result<Self> {
        let x = (delta / 4.0).sqrt();
        if !(0.0..0.5).contains(&x) {
            return Err(EstimatorError::InvalidArgument(format!(
                "chi2 {delta} not reachable by a binary construct"
            )));
        }
        Self::new(2, horizon, &[vec![0.5, 0.5]], &[vec![0.5 + x, 0.5 - x]])
    }

    /// Per-step `Var_{pi_b}(log r_t)` at each position.
    pub fn log_ratio_variances(&self) -> Vec<f64> {
        let h = self.behavior.layout().horizon();
        (0..h)
            .map(|row| {
                let lb = self.behavior.row_log_probs(row);
                let lt = self.target.row_log_probs(row);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for (b, t) in lb.iter().zip(lt) {
                    let p = b.exp();
                    m1 += p * (t - b);
                    m2 += p * (t - b) * (t - b);
                }
                m2 - m1 * m1
            })
            .collect()
    }
}

const MC_BLOCK: usize = 1024;

struct McBlock {
    sum: VecAccumulator,
    sum_sq: VecAccumulator,
    w_sum: VecAccumulator,
    w_sq: VecAccumulator,
}

/// Monte Carlo mean of `is_gradient_term` over `n_samples` trajectories from
/// `behavior`, compared against the exact on-policy gradient.
///
/// Trajectory `i` uses RNG stream `i`; partial sums are formed in fixed
/// blocks and merged in block order, so the report is bit-identical for any
/// rayon pool size.
pub fn mc_gradient_estimate(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    mode: RatioMode,
    advantage: &(impl Advantage + ?Sized),
    n_samples: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    if n_samples < 2 {
        return Err(EstimatorError::InvalidArgument(
            "need at least two samples".into(),
        ));
    }
    let oracle_gradient = exact_policy_gradient(mdp, target, advantage)?;
    let p = target.num_params();
    let h = mdp.horizon();
    let n_blocks = n_samples.div_ceil(MC_BLOCK);
    let blocks: Vec<McBlock> = (0..n_blocks)
        .into_par_iter()
        .map(|b| -> Result<McBlock> {
            let mut block = McBlock {
                sum: VecAccumulator::zeros(p),
                sum_sq: VecAccumulator::zeros(p),
                w_sum: VecAccumulator::zeros(h),
                w_sq: VecAccumulator::zeros(h),
            };
            let mut term = vec![0.0; p];
            for i in b * MC_BLOCK..((b + 1) * MC_BLOCK).min(n_samples) {
                let mut rng = stream_rng(seed, i as u64);
                let traj = sample_trajectory_with(mdp, behavior, target, &mut rng)?;
                let profile = RatioProfile::from_trajectory(&traj)?;
                term.iter_mut().for_each(|x| *x = 0.0);
                add_is_gradient_term(target, &traj, &profile, mode, advantage, 1.0, &mut term)?;
                for (k, x) in term.iter().enumerate() {
                    if *x != 0.0 {
                        block.sum.add_at(k, *x);
                        block.sum_sq.add_at(k, x * x);
                    }
                }
                for t in 1..=h {
                    let w = mode.weight(&profile, t);
                    block.w_sum.add_at(t - 1, w);
                    block.w_sq.add_at(t - 1, w * w);
                }
            }
            Ok(block)
        })
        .collect::<Result<_>>()?;
    let mut total = McBlock {
        sum: VecAccumulator::zeros(p),
        sum_sq: VecAccumulator::zeros(p),
        w_sum: VecAccumulator::zeros(h),
        w_sq: VecAccumulator::zeros(h),
    };
    for b in &blocks {
        total.sum.merge(&b.sum);
        total.sum_sq.merge(&b.sum_sq);
        total.w_sum.merge(&b.w_sum);
        total.w_sq.merge(&b.w_sq);
    }
    let n = n_samples as f64;
    let sample_var = |s: f64, s2: f64| ((s2 - s * s / n) / (n - 1.0)).max(0.0);
    let sums = total.sum.values();
    let mean_gradient: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let standard_errors = sums
        .iter()
        .zip(total.sum_sq.values())
        .map(|(s, s2)| (sample_var(*s, s2) / n).sqrt())
        .collect();
    let ratio_variance_by_position = total
        .w_sum
        .values()
        .iter()
        .zip(total.w_sq.values())
        .map(|(s, s2)| sample_var(*s, s2))
        .collect();
    let bias_norm = l2_distance(&mean_gradient, &oracle_gradient);
    Ok(EstimatorReport {
        mode,
        mean_gradient,
        oracle_gradient,
        bias_norm,
        ratio_variance_by_position,
        sample_count: n_samples as u64,
        standard_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{sample_trajectory, Reward};
    use approx::assert_abs_diff_eq;

    fn prefix_layout(v: usize, h: usize) -> PolicyLayout {
        PolicyLayout::new(v, h, Parametrization::Prefix).unwrap()
    }

    fn binary(p0: f64, h: usize) -> TabularPolicy {
        TabularPolicy::from_probabilities(prefix_layout(2, h), &[vec![p0, 1.0 - p0]]).unwrap()
    }

    #[test]
    fn zero_advantage_zero_term_all_modes() {
        let mdp = TokenMdp::new(3, 3, Reward::Constant(0.0)).unwrap();
        let b = TabularPolicy::gaussian(prefix_layout(3, 3), 1.0, 1).unwrap();
        let t = TabularPolicy::gaussian(prefix_layout(3, 3), 1.0, 2).unwrap();
        let traj = sample_trajectory(&mdp, &b, &t, 3).unwrap();
        let prof = RatioProfile::from_trajectory(&traj).unwrap();
        for mode in RatioMode::ALL {
            let g = is_gradient_term(&t, &traj, &prof, mode, &|_: &[usize]| 0.0).unwrap();
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn on_policy_and_single_step_modes_agree() {
        let mdp = TokenMdp::new(3, 4, Reward::Constant(0.0)).unwrap();
        let pol = TabularPolicy::gaussian(prefix_layout(3, 4), 1.0, 1).unwrap();
        let adv = AdvantageFn::fixed_table(3, 4, 9, 1.0);
        let traj = sample_trajectory(&mdp, &pol, &pol, 5).unwrap();
        let prof = RatioProfile::from_trajectory(&traj).unwrap();
        let base = is_gradient_term(&pol, &traj, &prof, RatioMode::Token, &adv).unwrap();
        for mode in RatioMode::ALL {
            assert_eq!(is_gradient_term(&pol, &traj, &prof, mode, &adv).unwrap(), base);
        }

        let mdp1 = TokenMdp::new(3, 1, Reward::Constant(0.0)).unwrap();
        let b = TabularPolicy::gaussian(prefix_layout(3, 1), 1.0, 1).unwrap();
        let t = TabularPolicy::gaussian(prefix_layout(3, 1), 1.0, 2).unwrap();
        let traj = sample_trajectory(&mdp1, &b, &t, 5).unwrap();
        let prof = RatioProfile::from_trajectory(&traj).unwrap();
        let adv = AdvantageFn::fixed_table(3, 1, 9, 1.0);
        let base = is_gradient_term(&t, &traj, &prof, RatioMode::Token, &adv).unwrap();
        for mode in RatioMode::ALL {
            let g = is_gradient_term(&t, &traj, &prof, mode, &adv).unwrap();
            for (x, y) in g.iter().zip(&base) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn profile_mismatch_rejected() {
        let mdp = TokenMdp::new(2, 2, Reward::Constant(0.0)).unwrap();
        let pol = binary(0.5, 2);
        let traj = sample_trajectory(&mdp, &pol, &pol, 0).unwrap();
        let prof = RatioProfile::from_log_ratios(vec![0.0]).unwrap();
        assert!(matches!(
            is_gradient_term(&pol, &traj, &prof, RatioMode::Token, &|_: &[usize]| 1.0),
            Err(EstimatorError::ProfileMismatch { .. })
        ));
    }

    #[test]
    fn variance_examples() {
        let mdp = TokenMdp::new(2, 2, Reward::Constant(0.0)).unwrap();
        let (vc, vs) = exact_ratio_variance(&mdp, &binary(0.5, 2), &binary(0.5, 2), 1).unwrap();
        assert_eq!((vc, vs), (0.0, 0.0));
        let (vc, vs) = exact_ratio_variance(&mdp, &binary(0.5, 2), &binary(0.6, 2), 1).unwrap();
        assert_abs_diff_eq!(vc, 0.04, epsilon = 1e-14);
        assert_abs_diff_eq!(vs, 1.04f64.powi(2) - 1.0, epsilon = 1e-14);
        assert!(exact_ratio_variance(&mdp, &binary(0.5, 2), &binary(0.6, 2), 3).is_err());
    }

    #[test]
    fn chi2_examples() {
        let mdp = TokenMdp::new(2, 3, Reward::Constant(0.0)).unwrap();
        assert_eq!(
            chi2_divergence_profile(&mdp, &binary(0.5, 3), &binary(0.5, 3)).unwrap(),
            vec![0.0; 3]
        );
        for c in chi2_divergence_profile(&mdp, &binary(0.5, 3), &binary(0.6, 3)).unwrap() {
            assert_abs_diff_eq!(c, 0.04, epsilon = 1e-14);
        }
    }

    #[test]
    fn variance_ratio_curve_examples() {
        assert_abs_diff_eq!(variance_ratio_curve(1.0, 4)[1], 5.0, epsilon = 1e-12);
        let at_zero = variance_ratio_curve(0.0, 6);
        for (t, r) in at_zero.iter().enumerate() {
            assert_eq!(*r, 6.0 / (t + 1) as f64);
        }
        let tiny = variance_ratio_curve(1e-12, 6);
        for (a, b) in tiny.iter().zip(&at_zero) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(*variance_ratio_curve(0.3, 7).last().unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn chi2_product_variances_matches_closed_form() {
        let v = chi2_product_variances(&[0.04, 0.04]);
        assert_abs_diff_eq!(v[0], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.0816, epsilon = 1e-15);
    }

    #[test]
    fn log_std_on_policy_is_zero() {
        let profiles: Vec<_> = (0..10)
            .map(|_| RatioProfile::from_log_ratios(vec![0.0; 5]).unwrap())
            .collect();
        let s = log_ratio_std_profile(&profiles).unwrap();
        assert!(s.stds.iter().all(|&x| x == 0.0));
        assert_eq!(s.sigma_hat, 0.0);
        assert_eq!(s.r_squared, 1.0);
    }

    #[test]
    fn log_std_grows_like_sqrt_t_for_iid_gaussian() {
        let sigma = 0.3;
        let profiles = sample_iid_log_ratio_profiles(100_000, 8, 0.0, sigma, 17).unwrap();
        let s = log_ratio_std_profile(&profiles).unwrap();
        assert!(s.r_squared > 0.99, "r2 = {}", s.r_squared);
        assert!((s.sigma_hat - sigma).abs() / sigma < 0.05);
        let ratio = s.stds[3] / s.stds[0];
        assert!((ratio - 2.0).abs() / 2.0 < 0.05, "ratio = {ratio}");
    }

    #[test]
    fn binary_construct_has_requested_chi2() {
        let c = IndependenceConstruct::binary_with_chi2(4, 0.01).unwrap();
        let mdp = TokenMdp::new(2, 4, Reward::Constant(0.0)).unwrap();
        for x in chi2_divergence_profile(&mdp, &c.behavior, &c.target).unwrap() {
            assert_abs_diff_eq!(x, 0.01, epsilon = 1e-14);
        }
        assert!(IndependenceConstruct::binary_with_chi2(4, 2.0).is_err());
    }

    #[test]
    fn group_uniform_is_constant_along_trajectory() {
        let adv = AdvantageFn::group_uniform(3, 4, 1.0);
        assert_eq!(adv.value(&[2]), adv.value(&[2, 0, 1]));
        assert_eq!(adv.kind(), AdvantageKind::GroupUniform);
    }

    #[test]
    fn mc_estimate_is_deterministic() {
        let mdp = TokenMdp::new(2, 2, Reward::Constant(0.0)).unwrap();
        let adv = AdvantageFn::fixed_table(2, 2, 3, 1.0);
        let run = || {
            mc_gradient_estimate(&mdp, &binary(0.5, 2), &binary(0.8, 2), RatioMode::Cumulative, &adv, 3000, 5)
                .unwrap()
        };
        assert_eq!(run(), run());
        assert!(mc_gradient_estimate(&mdp, &binary(0.5, 2), &binary(0.8, 2), RatioMode::Token, &adv, 1, 5).is_err());
    }
}
