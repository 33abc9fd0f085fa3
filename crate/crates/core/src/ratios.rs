//! Importance-sampling ratio formulations for a single trajectory.
//!
//! Positions are 1-indexed in every public API and serialized record: `t`
//! runs from 1 to `H`, and `cumulative[t - 1]` holds the product of the
//! first `t` token ratios. All products are formed as sums of log-ratios
//! with one exponentiation per reported value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::Trajectory;

/// Largest log value whose exponential is finite in `f64`.
const MAX_LOG: f64 = 709.782712893384;
/// Smallest log value whose exponential is a normal `f64`.
const MIN_LOG: f64 = -708.3964185322641;
/// `ln(1e-300)`: behavior log-probs below this cannot come from a softmax row.
const MIN_BEHAVIOR_LOGP: f64 = -690.7755278982137;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatioError {
    #[error("log-probability at position {position} is not finite")]
    NonFiniteLogProb { position: usize },
    #[error("log-prob vectors have lengths {target} (target) and {behavior} (behavior)")]
    LengthMismatch { target: usize, behavior: usize },
    #[error("position {position} outside 1..={horizon}")]
    PositionOutOfRange { position: usize, horizon: usize },
    #[error("trajectory has no tokens")]
    Empty,
}

pub type Result<T> = std::result::Result<T, RatioError>;

/// Exponentiates, saturating to the representable range instead of
/// producing `inf` or `0`. Returns whether saturation happened.
fn saturating_exp(x: f64) -> (f64, bool) {
    if x > MAX_LOG {
        (f64::MAX, true)
    } else if x < MIN_LOG {
        (f64::MIN_POSITIVE, true)
    } else {
        (x.exp(), false)
    }
}

fn log_token_ratios(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.logp_target.len() != traj.logp_behavior.len() {
        return Err(RatioError::LengthMismatch {
            target: traj.logp_target.len(),
            behavior: traj.logp_behavior.len(),
        });
    }
    traj.logp_target
        .iter()
        .zip(&traj.logp_behavior)
        .enumerate()
        .map(|(i, (lt, lb))| {
            if !lt.is_finite() || !lb.is_finite() {
                return Err(RatioError::NonFiniteLogProb { position: i + 1 });
            }
            assert!(
                *lb > MIN_BEHAVIOR_LOGP,
                "behavior probability below 1e-300 at position {}",
                i + 1
            );
            Ok(lt - lb)
        })
        .collect()
}

/// All ratio formulations for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioProfile {
    /// `log r_t`.
    pub log_token_ratios: Vec<f64>,
    /// `r_t`.
    pub token_ratios: Vec<f64>,
    /// Prefix sums of `log r_t`.
    pub log_cumulative: Vec<f64>,
    /// `rho_t^cum`.
    pub cumulative: Vec<f64>,
    /// `rho^seq`, the product over the whole response.
    pub sequence: f64,
    /// Geometric mean of the token ratios.
    pub gspo: f64,
    /// Set when some reported value had to be clamped to stay finite.
    pub saturated: bool,
}

impl RatioProfile {
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        Self::from_log_ratios(log_token_ratios(traj)?)
    }

    /// Builds a profile directly from per-step log-ratios.
    pub fn from_log_ratios(log_token_ratios: Vec<f64>) -> Result<Self> {
        if log_token_ratios.is_empty() {
            return Err(RatioError::Empty);
        }
        if let Some(i) = log_token_ratios.iter().position(|x| !x.is_finite()) {
            return Err(RatioError::NonFiniteLogProb { position: i + 1 });
        }
        let mut saturated = false;
        let mut exp = |x: f64| {
            let (v, s) = saturating_exp(x);
            saturated |= s;
            v
        };
        let token_ratios = log_token_ratios.iter().map(|&x| exp(x)).collect();
        let log_cumulative: Vec<f64> = log_token_ratios
            .iter()
            .scan(0.0, |acc, x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        let cumulative = log_cumulative.iter().map(|&x| exp(x)).collect();
        let log_seq = *log_cumulative.last().unwrap();
        let sequence = exp(log_seq);
        let gspo = exp(log_seq / log_token_ratios.len() as f64);
        Ok(Self {
            log_token_ratios,
            token_ratios,
            log_cumulative,
            cumulative,
            sequence,
            gspo,
            saturated,
        })
    }

    pub fn horizon(&self) -> usize {
        self.token_ratios.len()
    }

    pub fn log_sequence(&self) -> f64 {
        *self.log_cumulative.last().unwrap()
    }

    /// `epsilon_t = prod_{t' > t} r_t'` for 1-indexed `t`; 1 at `t = H`.
    pub fn suffix_ratio(&self, t: usize) -> Result<f64> {
        let h = self.horizon();
        if t == 0 || t > h {
            return Err(RatioError::PositionOutOfRange {
                position: t,
                horizon: h,
            });
        }
        Ok(saturating_exp(self.log_sequence() - self.log_cumulative[t - 1]).0)
    }

    /// Serializable record with explicit 1-based positions.
    pub fn record(&self) -> RatioRecord<'_> {
        RatioRecord {
            position_base: 1,
            token_ratios: &self.token_ratios,
            cumulative: &self.cumulative,
            log_cumulative: &self.log_cumulative,
            sequence: self.sequence,
            gspo: self.gspo,
            saturated: self.saturated,
        }
    }
}

/// JSON shape of a [`RatioProfile`] for the harness.
#[derive(Debug, Serialize)]
pub struct RatioRecord<'a> {
    pub position_base: u8,
    pub token_ratios: &'a [f64],
    pub cumulative: &'a [f64],
    pub log_cumulative: &'a [f64],
    pub sequence: f64,
    pub gspo: f64,
    pub saturated: bool,
}

pub fn token_ratios(traj: &Trajectory) -> Result<Vec<f64>> {
    Ok(RatioProfile::from_trajectory(traj)?.token_ratios)
}

pub fn cumulative_ratios(traj: &Trajectory) -> Result<Vec<f64>> {
    Ok(RatioProfile::from_trajectory(traj)?.cumulative)
}

pub fn sequence_ratio(traj: &Trajectory) -> Result<f64> {
    Ok(RatioProfile::from_trajectory(traj)?.sequence)
}

pub fn gspo_ratio(traj: &Trajectory) -> Result<f64> {
    Ok(RatioProfile::from_trajectory(traj)?.gspo)
}

pub fn suffix_ratio(traj: &Trajectory, t: usize) -> Result<f64> {
    RatioProfile::from_trajectory(traj)?.suffix_ratio(t)
}
