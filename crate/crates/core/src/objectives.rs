//! GRPO, GSPO and CTPO clipped surrogates with group-relative advantages.
//!
//! Every surrogate term has the form `min(w A, clip(w, lo, hi) A)`. The
//! selected branch defines the gradient: a clipped branch is constant in the
//! parameters, and exact ties resolve to the unclipped branch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{MdpError, TabularPolicy, Trajectory};
use crate::ratios::{RatioError, RatioProfile};

/// Floor on the group reward std before dividing.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid clip settings: {0}")]
    InvalidClip(String),
    #[error("{profiles} ratio profiles for {trajectories} trajectories")]
    ProfileCount { profiles: usize, trajectories: usize },
    #[error("profile of length {profile} for trajectory of length {trajectory}")]
    ProfileLength { profile: usize, trajectory: usize },
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Ratio(#[from] RatioError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Clip range applied to an importance ratio, possibly position dependent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClipSchedule {
    /// Ratio bounds `[lower, upper]` at every position.
    FixedRatio { lower: f64, upper: f64 },
    /// `[exp(-eps_low t^p), exp(eps_high t^p)]` at position `t`.
    AdaptiveLog { eps_low: f64, eps_high: f64, p: f64 },
}

impl ClipSchedule {
    pub fn fixed(lower: f64, upper: f64) -> Result<Self> {
        let s = ClipSchedule::FixedRatio { lower, upper };
        s.validate()?;
        Ok(s)
    }

    pub fn adaptive(eps_low: f64, eps_high: f64, p: f64) -> Result<Self> {
        let s = ClipSchedule::AdaptiveLog {
            eps_low,
            eps_high,
            p,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ClipSchedule::FixedRatio { lower, upper } => {
                if !(lower > 0.0 && lower <= 1.0 && upper >= 1.0 && upper.is_finite()) {
                    return Err(ObjectiveError::InvalidClip(format!(
                        "fixed bounds need 0 < lower <= 1 <= upper, got [{lower}, {upper}]"
                    )));
                }
            }
            ClipSchedule::AdaptiveLog {
                eps_low,
                eps_high,
                p,
            } => {
                if !(eps_low > 0.0 && eps_high > 0.0 && p >= 0.0)
                    || !(eps_low.is_finite() && eps_high.is_finite() && p.is_finite())
                {
                    return Err(ObjectiveError::InvalidClip(format!(
                        "adaptive clip needs eps_low, eps_high > 0 and p >= 0, got ({eps_low}, {eps_high}, {p})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ratio bounds at 1-indexed position `t`.
    pub fn bounds(&self, t: usize) -> (f64, f64) {
        match *self {
            ClipSchedule::FixedRatio { lower, upper } => (lower, upper),
            ClipSchedule::AdaptiveLog {
                eps_low,
                eps_high,
                p,
            } => {
                let scale = (t as f64).powf(p);
                ((-eps_low * scale).exp(), (eps_high * scale).exp())
            }
        }
    }
}

/// Bounds of `schedule` at position `t >= 1`.
pub fn clip_bounds(schedule: &ClipSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.validate()?;
    if t == 0 {
        return Err(ObjectiveError::InvalidClip("positions start at 1".into()));
    }
    Ok(schedule.bounds(t))
}

/// `(R_i - mean) / max(std, SIGMA_FLOOR)` with the population std.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(rewards.len()));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(ObjectiveError::NonFiniteReward(*r));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = std.max(SIGMA_FLOOR);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `G` responses to one prompt with their group-relative advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn new(prompt_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = group_advantages(&rewards)?;
        Ok(Self {
            prompt_id: prompt_id.into(),
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    /// All rewards equal, so every advantage is zero.
    pub fn is_degenerate(&self) -> bool {
        self.rewards.iter().all(|r| *r == self.rewards[0])
    }

    /// Ratio profiles of the stored log-probabilities.
    pub fn profiles(&self) -> Result<Vec<RatioProfile>> {
        self.trajectories
            .iter()
            .map(|t| Ok(RatioProfile::from_trajectory(t)?))
            .collect()
    }
}

/// Surrogate objective family with its clip parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Objective {
    /// Token ratios clipped to `[1 - eps, 1 + eps]`.
    Grpo { eps: f64 },
    /// Geometric-mean sequence ratio clipped to `[1 - eps, 1 + eps]`.
    Gspo { eps: f64 },
    /// Cumulative ratios clipped by a schedule.
    Ctpo { schedule: ClipSchedule },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Grpo { .. } => "grpo",
            Objective::Gspo { .. } => "gspo",
            Objective::Ctpo { .. } => "ctpo",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Grpo { eps } | Objective::Gspo { eps } => {
                if !(*eps > 0.0 && *eps < 1.0) {
                    return Err(ObjectiveError::InvalidClip(format!(
                        "eps must lie in (0, 1), got {eps}"
                    )));
                }
                Ok(())
            }
            Objective::Ctpo { schedule } => schedule.validate(),
        }
    }

    /// The ratio this objective clips at position `t`, and its bounds.
    fn ratio_and_bounds(&self, profile: &RatioProfile, t: usize) -> (f64, (f64, f64)) {
        match self {
            Objective::Grpo { eps } => (profile.token_ratios[t - 1], (1.0 - eps, 1.0 + eps)),
            Objective::Gspo { eps } => (profile.gspo, (1.0 - eps, 1.0 + eps)),
            Objective::Ctpo { schedule } => (profile.cumulative[t - 1], schedule.bounds(t)),
        }
    }
}

/// `min(w A, clip(w, lo, hi) A)` and whether the unclipped branch was taken.
fn clipped_term(w: f64, advantage: f64, lo: f64, hi: f64) -> (f64, bool) {
    let unclipped = w * advantage;
    let clipped = w.clamp(lo, hi) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

fn check_profiles(batch: &GroupBatch, profiles: &[RatioProfile]) -> Result<()> {
    if profiles.len() != batch.trajectories.len() {
        return Err(ObjectiveError::ProfileCount {
            profiles: profiles.len(),
            trajectories: batch.trajectories.len(),
        });
    }
    for (p, t) in profiles.iter().zip(&batch.trajectories) {
        if p.horizon() != t.len() {
            return Err(ObjectiveError::ProfileLength {
                profile: p.horizon(),
                trajectory: t.len(),
            });
        }
    }
    Ok(())
}

/// Per-response contribution `(1/|o_i|) sum_t term` (or the single sequence
/// term for GSPO) before the `1/G` average.
fn response_value(objective: &Objective, profile: &RatioProfile, advantage: f64) -> f64 {
    match objective {
        Objective::Gspo { .. } => {
            let (w, (lo, hi)) = objective.ratio_and_bounds(profile, 1);
            clipped_term(w, advantage, lo, hi).0
        }
        _ => {
            let h = profile.horizon();
            let total: f64 = (1..=h)
                .map(|t| {
                    let (w, (lo, hi)) = objective.ratio_and_bounds(profile, t);
                    clipped_term(w, advantage, lo, hi).0
                })
                .sum();
            total / h as f64
        }
    }
}

/// Surrogate value of one group given precomputed ratio profiles.
pub fn objective_value(
    objective: &Objective,
    batch: &GroupBatch,
    profiles: &[RatioProfile],
) -> Result<f64> {
    objective.validate()?;
    check_profiles(batch, profiles)?;
    let g = batch.group_size() as f64;
    Ok(profiles
        .iter()
        .zip(&batch.advantages)
        .map(|(p, a)| response_value(objective, p, *a))
        .sum::<f64>()
        / g)
}

pub fn ctpo_objective(
    batch: &GroupBatch,
    profiles: &[RatioProfile],
    schedule: &ClipSchedule,
) -> Result<f64> {
    objective_value(
        &Objective::Ctpo {
            schedule: *schedule,
        },
        batch,
        profiles,
    )
}

pub fn grpo_objective(batch: &GroupBatch, profiles: &[RatioProfile], eps: f64) -> Result<f64> {
    objective_value(&Objective::Grpo { eps }, batch, profiles)
}

pub fn gspo_objective(batch: &GroupBatch, profiles: &[RatioProfile], eps: f64) -> Result<f64> {
    objective_value(&Objective::Gspo { eps }, batch, profiles)
}

/// Ratio profile of `traj` with target log-probs taken from `target` and
/// behavior log-probs from `behavior`.
pub fn rescored_profile(
    traj: &Trajectory,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<RatioProfile> {
    let lt = target.step_log_probs(&traj.actions)?;
    let lb = behavior.step_log_probs(&traj.actions)?;
    Ok(RatioProfile::from_log_ratios(
        lt.iter().zip(&lb).map(|(a, b)| a - b).collect(),
    )?)
}

/// Surrogate value with ratios recomputed from the two policies.
pub fn objective_value_at(
    objective: &Objective,
    batch: &GroupBatch,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<f64> {
    let profiles = batch
        .trajectories
        .iter()
        .map(|t| rescored_profile(t, target, behavior))
        .collect::<Result<Vec<_>>>()?;
    objective_value(objective, batch, &profiles)
}

/// Gradient of the surrogate w.r.t. the target logits; behavior is constant.
pub fn objective_gradient(
    batch: &GroupBatch,
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    objective: &Objective,
) -> Result<Vec<f64>> {
    objective.validate()?;
    let mut grad = vec![0.0; target.num_params()];
    let g = batch.group_size() as f64;
    for (traj, &adv) in batch.trajectories.iter().zip(&batch.advantages) {
        if adv == 0.0 {
            continue;
        }
        let profile = rescored_profile(traj, target, behavior)?;
        let h = traj.len();
        // coeffs[t-1] multiplies grad log pi(a_t | s_t)
        let mut coeffs = vec![0.0; h];
        match objective {
            Objective::Grpo { .. } => {
                for t in 1..=h {
                    let (w, (lo, hi)) = objective.ratio_and_bounds(&profile, t);
                    if clipped_term(w, adv, lo, hi).1 {
                        coeffs[t - 1] = adv * w / (g * h as f64);
                    }
                }
            }
            Objective::Gspo { .. } => {
                let (w, (lo, hi)) = objective.ratio_and_bounds(&profile, 1);
                if clipped_term(w, adv, lo, hi).1 {
                    coeffs.fill(adv * w / (g * h as f64));
                }
            }
            Objective::Ctpo { .. } => {
                // d rho_t / d theta = rho_t * sum_{t' <= t} score_t', so score_t'
                // collects the suffix sum of the active coefficients.
                let mut running = 0.0;
                for t in (1..=h).rev() {
                    let (w, (lo, hi)) = objective.ratio_and_bounds(&profile, t);
                    if clipped_term(w, adv, lo, hi).1 {
                        running += adv * w / (g * h as f64);
                    }
                    coeffs[t - 1] = running;
                }
            }
        }
        for (t, c) in coeffs.iter().enumerate() {
            if *c != 0.0 {
                target.add_score(&traj.actions[..t], traj.actions[t], *c, &mut grad)?;
            }
        }
    }
    Ok(grad)
}

/// Fraction of tokens whose method-specific ratio lies outside its clip range.
/// GSPO's sequence ratio counts once per token of its response.
pub fn clip_fraction(objective: &Objective, profiles: &[RatioProfile]) -> f64 {
    let mut clipped = 0usize;
    let mut total = 0usize;
    for p in profiles {
        for t in 1..=p.horizon() {
            let (w, (lo, hi)) = objective.ratio_and_bounds(p, t);
            total += 1;
            if w < lo || w > hi {
                clipped += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        clipped as f64 / total as f64
    }
}

/// Per-position fraction of `rho_t^cum` outside the schedule's bounds.
/// Positions that no profile reaches are `None`.
pub fn clip_rate_profile(profiles: &[RatioProfile], schedule: &ClipSchedule) -> Vec<Option<f64>> {
    let h = profiles.iter().map(RatioProfile::horizon).max().unwrap_or(0);
    let mut clipped = vec![0usize; h];
    let mut total = vec![0usize; h];
    for p in profiles {
        for (t, rho) in p.cumulative.iter().enumerate() {
            let (lo, hi) = schedule.bounds(t + 1);
            total[t] += 1;
            if *rho < lo || *rho > hi {
                clipped[t] += 1;
            }
        }
    }
    clipped
        .iter()
        .zip(&total)
        .map(|(c, n)| (*n > 0).then(|| *c as f64 / *n as f64))
        .collect()
}
