//! JSON descriptions for building MDPs and policies.
//!
//! ```json
//! {
//!   "mdp": {"vocab_size": 4, "horizon": 6, "reward": {"kind": "count_token", "token": 1}},
//!   "policy": {"parametrization": "position", "init": {"kind": "zeros"}}
//! }
//! ```

use serde::{Deserialize, Serialize};

use crate::mdp::{
    self, Parametrization, PolicyLayout, Reward, TabularPolicy, TokenMdp, DEFAULT_ENUMERATION_LIMIT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    CountToken { token: usize },
    SuffixIndicator { suffix: Vec<usize> },
    RandomTable { seed: u64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub vocab_size: usize,
    pub horizon: usize,
    pub reward: RewardSpec,
    #[serde(default = "default_prompt_id")]
    pub prompt_id: String,
    #[serde(default = "default_limit")]
    pub enumeration_limit: u64,
}

fn default_prompt_id() -> String {
    "x".to_string()
}

fn default_limit() -> u64 {
    DEFAULT_ENUMERATION_LIMIT
}

impl MdpSpec {
    pub fn build(&self) -> mdp::Result<TokenMdp> {
        let reward = match &self.reward {
            RewardSpec::CountToken { token } => Reward::CountToken { token: *token },
            RewardSpec::SuffixIndicator { suffix } => Reward::SuffixIndicator {
                suffix: suffix.clone(),
            },
            RewardSpec::RandomTable { seed } => Reward::random_table(
                *seed,
                self.vocab_size,
                self.horizon,
                self.enumeration_limit,
            )?,
            RewardSpec::Constant { value } => Reward::Constant(*value),
        };
        Ok(TokenMdp::new(self.vocab_size, self.horizon, reward)?
            .with_prompt_id(self.prompt_id.clone())
            .with_enumeration_limit(self.enumeration_limit))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    Zeros {},
    Gaussian {
        std: f64,
        seed: u64,
    },
    /// Flattened logits, row-major over the layout's rows.
    Logits {
        logits: Vec<f64>,
    },
    /// One probability row per logit row, or a single row for all.
    Probabilities {
        rows: Vec<Vec<f64>>,
    },
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit::Zeros {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default)]
    pub parametrization: Parametrization,
    #[serde(default)]
    pub init: PolicyInit,
}

impl PolicySpec {
    pub fn build(&self, mdp: &TokenMdp) -> mdp::Result<TabularPolicy> {
        let layout = PolicyLayout::for_mdp(mdp, self.parametrization)?;
        match &self.init {
            PolicyInit::Zeros {} => Ok(TabularPolicy::zeros(layout)),
            PolicyInit::Gaussian { std, seed } => TabularPolicy::gaussian(layout, *std, *seed),
            PolicyInit::Logits { logits } => TabularPolicy::new(layout, logits.clone()),
            PolicyInit::Probabilities { rows } => TabularPolicy::from_probabilities(layout, rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_from_json() {
        let spec: MdpSpec = serde_json::from_str(
            r#"{"vocab_size": 2, "horizon": 3, "reward": {"kind": "suffix_indicator", "suffix": [0, 0, 0]}}"#,
        )
        .unwrap();
        let mdp = spec.build().unwrap();
        assert_eq!(mdp.reward(&[0, 0, 0]), 1.0);
        let pol: PolicySpec = serde_json::from_str(
            r#"{"parametrization": "position", "init": {"kind": "probabilities", "rows": [[0.25, 0.75]]}}"#,
        )
        .unwrap();
        let p = pol.build(&mdp).unwrap();
        assert!((p.distribution(&[1, 0]).unwrap()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<MdpSpec>(
            r#"{"vocab_size": 2, "horizon": 3, "reward": {"kind": "constant", "value": 1}, "gamma": 0.9}"#,
        );
        assert!(err.is_err());
        let err = serde_json::from_str::<PolicySpec>(r#"{"init": {"kind": "zeros", "std": 1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn random_table_reward_is_deterministic() {
        let spec = MdpSpec {
            vocab_size: 3,
            horizon: 3,
            reward: RewardSpec::RandomTable { seed: 5 },
            prompt_id: "p".into(),
            enumeration_limit: 1000,
        };
        let a = spec.build().unwrap();
        let b = spec.build().unwrap();
        assert_eq!(a.reward(&[2, 1, 0]), b.reward(&[2, 1, 0]));
        assert_eq!(a.prompt_id(), "p");
    }
}
