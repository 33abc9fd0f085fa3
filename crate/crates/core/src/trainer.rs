//! Off-policy training loop on toy MDPs.
//!
//! Each outer step snapshots the behavior policy, samples `prompts_per_step`
//! groups of `group_size` responses from it, and then takes `inner_epochs`
//! plain gradient-ascent steps on the chosen surrogate, reusing the same
//! batch. Every inner step after the first is genuinely off-policy.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{MdpSpec, PolicySpec};
use crate::mdp::{
    exact_expected_reward, sample_batch, sample_trajectory_with, MdpError, TabularPolicy, TokenMdp,
};
use crate::numeric::{stream_rng, CompensatedSum};
use crate::objectives::{
    clip_fraction, objective_gradient, objective_value, rescored_profile, GroupBatch, Objective,
    ObjectiveError,
};

/// Largest `V^H` evaluated exactly under automatic evaluation.
pub const EXACT_EVAL_LIMIT: u128 = 100_000;
/// Sample count used when automatic evaluation falls back to Monte Carlo.
pub const DEFAULT_MC_EVAL_SAMPLES: usize = 20_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite gradient at step {step}, inner epoch {epoch}")]
    NonFiniteGradient {
        step: usize,
        epoch: usize,
        partial: Box<TrainReport>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Evaluation choice in a config; `auto` is exact up to `V^H = 1e5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalSpec {
    #[default]
    Auto,
    Exact,
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

impl EvalSpec {
    pub fn resolve(&self, mdp: &TokenMdp, seed: u64) -> EvalMethod {
        match *self {
            EvalSpec::Auto if mdp.num_sequences() <= EXACT_EVAL_LIMIT => EvalMethod::Exact,
            EvalSpec::Auto => EvalMethod::MonteCarlo {
                samples: DEFAULT_MC_EVAL_SAMPLES,
                seed,
            },
            EvalSpec::Exact => EvalMethod::Exact,
            EvalSpec::MonteCarlo { samples, seed } => EvalMethod::MonteCarlo { samples, seed },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub value: f64,
    /// `None` for exact evaluation.
    pub standard_error: Option<f64>,
}

/// `J(theta)` exactly or by Monte Carlo with its standard error.
pub fn evaluate_policy(
    mdp: &TokenMdp,
    policy: &TabularPolicy,
    method: EvalMethod,
) -> std::result::Result<Evaluation, MdpError> {
    match method {
        EvalMethod::Exact => Ok(Evaluation {
            value: exact_expected_reward(mdp, policy)?,
            standard_error: None,
        }),
        EvalMethod::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(MdpError::InvalidPolicy(
                    "Monte Carlo evaluation needs at least 2 samples".into(),
                ));
            }
            const BLOCK: usize = 1024;
            let partials = (0..samples.div_ceil(BLOCK))
                .into_par_iter()
                .map(|b| {
                    let mut s = CompensatedSum::new();
                    let mut s2 = CompensatedSum::new();
                    for i in b * BLOCK..((b + 1) * BLOCK).min(samples) {
                        let t = sample_trajectory_with(mdp, policy, policy, &mut stream_rng(seed, i as u64))?;
                        s.add(t.reward);
                        s2.add(t.reward * t.reward);
                    }
                    Ok((s, s2))
                })
                .collect::<std::result::Result<Vec<_>, MdpError>>()?;
            let mut s = CompensatedSum::new();
            let mut s2 = CompensatedSum::new();
            for (a, b) in &partials {
                s.merge(a);
                s2.merge(b);
            }
            let n = samples as f64;
            let mean = s.value() / n;
            let var = ((s2.value() - n * mean * mean) / (n - 1.0)).max(0.0);
            Ok(Evaluation {
                value: mean,
                standard_error: Some((var / n).sqrt()),
            })
        }
    }
}

fn default_prompts() -> usize {
    1
}

fn default_inner_epochs() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub group_size: usize,
    #[serde(default = "default_prompts")]
    pub prompts_per_step: usize,
    /// Gradient steps taken on each collected batch.
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub mdp: MdpSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_epochs == 0 {
            return Err(TrainError::Config("inner_epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.group_size < 2 {
            return Err(TrainError::Config("group_size must be >= 2".into()));
        }
        if self.prompts_per_step == 0 {
            return Err(TrainError::Config("prompts_per_step must be >= 1".into()));
        }
        self.objective.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `J` of the policy after this step's updates.
    pub expected_reward: f64,
    pub expected_reward_se: Option<f64>,
    /// Surrogate value averaged over inner epochs.
    pub surrogate_value: f64,
    /// Clip fraction averaged over inner epochs.
    pub clip_fraction: f64,
    /// Clip fraction at each inner epoch.
    pub clip_fraction_by_epoch: Vec<f64>,
    /// Mean `|log rho^cum_H|` over responses and inner epochs.
    pub mean_abs_log_ratio: f64,
    pub degenerate_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: String,
    pub evaluation: EvalMethod,
    pub initial_expected_reward: f64,
    pub final_expected_reward: f64,
    pub records: Vec<StepRecord>,
    pub degenerate_groups: usize,
    pub final_logits: Vec<f64>,
}

/// Mean of per-group gradients; all groups share one parameter layout.
fn mean_gradient(
    groups: &[GroupBatch],
    target: &TabularPolicy,
    behavior: &TabularPolicy,
    objective: &Objective,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; target.num_params()];
    for g in groups {
        for (acc, x) in total
            .iter_mut()
            .zip(objective_gradient(g, target, behavior, objective)?)
        {
            *acc += x;
        }
    }
    let n = groups.len() as f64;
    total.iter_mut().for_each(|x| *x /= n);
    Ok(total)
}

pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    train_streaming(config, |_| {})
}

/// Runs training, calling `on_record` after every outer step.
pub fn train_streaming(
    config: &TrainConfig,
    mut on_record: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    config.validate()?;
    let mdp = config.mdp.build()?;
    let mut policy = config.policy.build(&mdp)?;
    let eval_method = config.evaluation.resolve(&mdp, config.seed ^ 0x5eed);
    let initial = evaluate_policy(&mdp, &policy, eval_method)?;
    let mut report = TrainReport {
        objective: config.objective.name().to_string(),
        evaluation: eval_method,
        initial_expected_reward: initial.value,
        final_expected_reward: initial.value,
        records: Vec::with_capacity(config.total_steps),
        degenerate_groups: 0,
        final_logits: policy.logits().to_vec(),
    };

    for step in 0..config.total_steps {
        let behavior = policy.clone();
        let mut groups = Vec::with_capacity(config.prompts_per_step);
        let mut degenerate = 0;
        for k in 0..config.prompts_per_step {
            let batch_seed: u64 = stream_rng(config.seed, (step * config.prompts_per_step + k) as u64).random();
            let batch = sample_batch(&mdp, &behavior, &behavior, config.group_size, batch_seed)?;
            let group = GroupBatch::new(mdp.prompt_id(), batch.trajectories)?;
            if group.is_degenerate() {
                degenerate += 1;
            }
            groups.push(group);
        }

        let mut surrogate = 0.0;
        let mut clip_by_epoch = Vec::with_capacity(config.inner_epochs);
        let mut abs_log = 0.0;
        for epoch in 0..config.inner_epochs {
            let mut value = 0.0;
            let mut profiles_all = Vec::new();
            for g in &groups {
                let profiles = g
                    .trajectories
                    .iter()
                    .map(|t| rescored_profile(t, &policy, &behavior))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                value += objective_value(&config.objective, g, &profiles)?;
                profiles_all.extend(profiles);
            }
            surrogate += value / groups.len() as f64;
            clip_by_epoch.push(clip_fraction(&config.objective, &profiles_all));
            abs_log += profiles_all
                .iter()
                .map(|p| p.log_sequence().abs())
                .sum::<f64>()
                / profiles_all.len() as f64;

            let grad = mean_gradient(&groups, &policy, &behavior, &config.objective)?;
            if grad.iter().any(|g| !g.is_finite()) {
                report.final_logits = policy.logits().to_vec();
                return Err(TrainError::NonFiniteGradient {
                    step,
                    epoch,
                    partial: Box::new(report),
                });
            }
            let logits = policy
                .logits()
                .iter()
                .zip(&grad)
                .map(|(l, g)| l + config.learning_rate * g)
                .collect();
            policy = policy.with_logits(logits)?;
        }

        let eval = evaluate_policy(&mdp, &policy, eval_method)?;
        let epochs = config.inner_epochs as f64;
        let record = StepRecord {
            step,
            expected_reward: eval.value,
            expected_reward_se: eval.standard_error,
            surrogate_value: surrogate / epochs,
            clip_fraction: clip_by_epoch.iter().sum::<f64>() / epochs,
            clip_fraction_by_epoch: clip_by_epoch,
            mean_abs_log_ratio: abs_log / epochs,
            degenerate_groups: degenerate,
        };
        on_record(&record);
        report.degenerate_groups += degenerate;
        report.final_expected_reward = eval.value;
        report.records.push(record);
    }
    report.final_logits = policy.logits().to_vec();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RewardSpec;
    use crate::mdp::{Parametrization, PolicyLayout};
    use crate::objectives::ClipSchedule;

    fn config(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            group_size: 8,
            prompts_per_step: 1,
            inner_epochs: 2,
            learning_rate: 0.1,
            total_steps: 5,
            seed: 3,
            mdp: MdpSpec {
                vocab_size: 3,
                horizon: 3,
                reward: RewardSpec::CountToken { token: 1 },
                prompt_id: "x".into(),
                enumeration_limit: 1_000_000,
            },
            policy: PolicySpec::default(),
            evaluation: EvalSpec::Auto,
        }
    }

    fn ctpo() -> Objective {
        Objective::Ctpo {
            schedule: ClipSchedule::adaptive(0.025, 0.05, 0.5).unwrap(),
        }
    }

    #[test]
    fn zero_learning_rate_keeps_reward_constant() {
        let mut c = config(ctpo());
        c.learning_rate = 0.0;
        let r = train(&c).unwrap();
        assert_eq!(r.records.len(), 5);
        for rec in &r.records {
            assert_eq!(rec.expected_reward, r.initial_expected_reward);
        }
    }

    #[test]
    fn single_inner_epoch_is_on_policy() {
        for objective in [Objective::Grpo { eps: 0.2 }, Objective::Gspo { eps: 0.2 }, ctpo()] {
            let mut c = config(objective);
            c.inner_epochs = 1;
            let r = train(&c).unwrap();
            for rec in &r.records {
                assert_eq!(rec.clip_fraction, 0.0);
                assert_eq!(rec.mean_abs_log_ratio, 0.0);
            }
        }
    }

    #[test]
    fn first_inner_epoch_always_unclipped() {
        let r = train(&config(ctpo())).unwrap();
        for rec in &r.records {
            assert_eq!(rec.clip_fraction_by_epoch[0], 0.0);
            assert!((0.0..=1.0).contains(&rec.clip_fraction));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let c = config(ctpo());
        assert_eq!(train(&c).unwrap(), train(&c).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = config(ctpo());
        c.inner_epochs = 0;
        assert!(matches!(train(&c), Err(TrainError::Config(_))));
        let mut c = config(ctpo());
        c.group_size = 1;
        assert!(matches!(train(&c), Err(TrainError::Config(_))));
        let mut c = config(Objective::Grpo { eps: 1.5 });
        c.total_steps = 1;
        assert!(train(&c).is_err());
    }

    #[test]
    fn constant_reward_groups_are_degenerate() {
        let mut c = config(ctpo());
        c.mdp.reward = RewardSpec::Constant { value: 1.0 };
        let r = train(&c).unwrap();
        assert_eq!(r.degenerate_groups, 5);
        assert!(r.final_logits.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn evaluation_examples() {
        let mdp = TokenMdp::new(2, 3, crate::mdp::Reward::SuffixIndicator { suffix: vec![0, 0, 0] })
            .unwrap();
        let p = TabularPolicy::zeros(PolicyLayout::new(2, 3, Parametrization::Prefix).unwrap());
        let exact = evaluate_policy(&mdp, &p, EvalMethod::Exact).unwrap();
        assert!((exact.value - 0.125).abs() < 1e-15);
        let method = EvalMethod::MonteCarlo {
            samples: 100_000,
            seed: 4,
        };
        let mc = evaluate_policy(&mdp, &p, method).unwrap();
        let se = mc.standard_error.unwrap();
        assert!((mc.value - 0.125).abs() < 3.0 * se, "{} +- {se}", mc.value);
        assert_eq!(mc, evaluate_policy(&mdp, &p, method).unwrap());
    }
}
