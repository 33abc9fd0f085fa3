//! Parameter schemas and runners for each experiment kind.

use std::collections::HashMap;
use std::fmt::Display;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::artifacts::{Cell, CsvTable};
use super::{Check, ExperimentKind, HarnessError, Outcome, Result};
use crate::config::{MdpSpec, PolicySpec};
use crate::estimators::{
    chi2_divergence_profile, chi2_product_variances, exact_is_expectation,
    exact_ratio_variance_profile, log_ratio_std_profile, sample_iid_log_ratio_profiles,
    variance_ratio_curve, AdvantageFn, IndependenceConstruct, RatioMode,
};
use crate::mdp::{
    exact_policy_gradient, sample_batch, Parametrization, PolicyLayout, Reward, TabularPolicy,
    TokenMdp, DEFAULT_ENUMERATION_LIMIT,
};
use crate::numeric::{l2_distance, max_abs_difference, spearman, stream_rng};
use crate::objectives::{clip_rate_profile, ClipSchedule, Objective};
use crate::ratios::RatioProfile;
use crate::trainer::{train, EvalSpec, TrainConfig, TrainError, TrainReport};

fn schema(msg: impl Into<String>) -> HarnessError {
    HarnessError::Schema(msg.into())
}

fn failed(e: impl Display) -> HarnessError {
    HarnessError::Failed(e.to_string())
}

fn parse<T: for<'de> Deserialize<'de>>(params: Value) -> Result<T> {
    let params = if params.is_null() { json!({}) } else { params };
    serde_json::from_value(params).map_err(|e| schema(format!("params: {e}")))
}

fn require(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(schema(msg))
    }
}

fn check_grid(vocab_sizes: &[usize], horizons: &[usize]) -> Result<()> {
    require(!vocab_sizes.is_empty(), "vocab_sizes must not be empty")?;
    require(!horizons.is_empty(), "horizons must not be empty")?;
    require(vocab_sizes.iter().all(|&v| v >= 2), "vocab sizes must be >= 2")?;
    require(horizons.iter().all(|&h| h >= 1), "horizons must be >= 1")?;
    let v = *vocab_sizes.iter().max().unwrap() as u128;
    let h = *horizons.iter().max().unwrap() as u32;
    require(
        v.checked_pow(h)
            .is_some_and(|n| n <= DEFAULT_ENUMERATION_LIMIT as u128),
        format!("{v}^{h} sequences exceed the enumeration limit {DEFAULT_ENUMERATION_LIMIT}"),
    )
}

fn grid(vocab_sizes: &[usize], horizons: &[usize]) -> Vec<(usize, usize)> {
    vocab_sizes
        .iter()
        .flat_map(|&v| horizons.iter().map(move |&h| (v, h)))
        .collect()
}

fn finite(x: f64, what: &str) -> Result<()> {
    require(x.is_finite(), format!("{what} must be finite"))
}

fn mode_name(mode: RatioMode) -> &'static str {
    mode.name()
}

/// Largest reward over all sequences, when enumeration is feasible.
fn max_reward(mdp: &TokenMdp) -> Option<f64> {
    let n = mdp.check_enumerable().ok()?;
    let (v, h) = (mdp.vocab_size(), mdp.horizon());
    let mut seq = vec![0usize; h];
    let mut best = f64::NEG_INFINITY;
    for idx in 0..n {
        let mut rest = idx;
        for slot in seq.iter_mut().rev() {
            *slot = rest % v;
            rest /= v;
        }
        best = best.max(mdp.reward(&seq));
    }
    Some(best)
}

// ---------------------------------------------------------------------------
// verify-unbiasedness

fn default_vocab_sizes() -> Vec<usize> {
    vec![2, 3, 4]
}

fn default_horizons() -> Vec<usize> {
    vec![2, 3, 4, 5, 6]
}

fn default_policy_std() -> f64 {
    1.0
}

fn default_unbiased_tol() -> f64 {
    1e-10
}

fn default_bias_threshold() -> f64 {
    1e-3
}

/// Seeded random instances: random-table reward, Gaussian-logit policies,
/// and one advantage of each kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    pub instances: usize,
    #[serde(default = "default_vocab_sizes")]
    pub vocab_sizes: Vec<usize>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_policy_std")]
    pub policy_std: f64,
    #[serde(default)]
    pub parametrization: Parametrization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdvantageSpec {
    TrueAdvantage {},
    FixedTable { seed: u64, scale: f64 },
    GroupUniform { seed: u64, scale: f64 },
    Constant { value: f64 },
}

impl AdvantageSpec {
    pub fn build(&self, mdp: &TokenMdp, target: &TabularPolicy) -> Result<AdvantageFn> {
        Ok(match *self {
            AdvantageSpec::TrueAdvantage {} => {
                AdvantageFn::true_advantage(mdp, target).map_err(failed)?
            }
            AdvantageSpec::FixedTable { seed, scale } => {
                AdvantageFn::fixed_table(mdp.vocab_size(), mdp.horizon(), seed, scale)
            }
            AdvantageSpec::GroupUniform { seed, scale } => {
                AdvantageFn::group_uniform(mdp.vocab_size(), seed, scale)
            }
            AdvantageSpec::Constant { value } => AdvantageFn::constant(mdp.vocab_size(), value),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            AdvantageSpec::TrueAdvantage {} => "true_advantage",
            AdvantageSpec::FixedTable { .. } => "fixed_table",
            AdvantageSpec::GroupUniform { .. } => "group_uniform",
            AdvantageSpec::Constant { .. } => "constant",
        }
    }
}

/// One hand-specified instance, with modes expected to be biased on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureParams {
    pub name: String,
    pub mdp: MdpSpec,
    pub behavior: PolicySpec,
    pub target: PolicySpec,
    pub advantage: AdvantageSpec,
    #[serde(default)]
    pub expect_biased: Vec<RatioMode>,
    #[serde(default = "default_bias_threshold")]
    pub bias_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyParams {
    #[serde(default)]
    pub battery: Option<BatteryParams>,
    #[serde(default)]
    pub fixtures: Vec<FixtureParams>,
    /// Bound on the error of the cumulative and sequence estimators.
    #[serde(default = "default_unbiased_tol")]
    pub tolerance: f64,
}

impl VerifyParams {
    fn validate(&self) -> Result<()> {
        require(
            self.battery.is_some() || !self.fixtures.is_empty(),
            "verify-unbiasedness needs a battery or at least one fixture",
        )?;
        require(self.tolerance > 0.0, "tolerance must be positive")?;
        if let Some(b) = &self.battery {
            require(b.instances > 0, "battery.instances must be >= 1")?;
            require(b.policy_std >= 0.0 && b.policy_std.is_finite(), "policy_std must be >= 0")?;
            check_grid(&b.vocab_sizes, &b.horizons)?;
        }
        for f in &self.fixtures {
            let mdp = f.mdp.build().map_err(|e| schema(format!("fixture {}: {e}", f.name)))?;
            mdp.check_enumerable()
                .map_err(|e| schema(format!("fixture {}: {e}", f.name)))?;
            f.behavior
                .build(&mdp)
                .map_err(|e| schema(format!("fixture {} behavior: {e}", f.name)))?;
            f.target
                .build(&mdp)
                .map_err(|e| schema(format!("fixture {} target: {e}", f.name)))?;
        }
        Ok(())
    }
}

struct ModeError {
    mode: RatioMode,
    max_abs_error: f64,
    bias_norm: f64,
}

fn mode_errors(
    mdp: &TokenMdp,
    behavior: &TabularPolicy,
    target: &TabularPolicy,
    advantage: &AdvantageFn,
) -> Result<(f64, Vec<ModeError>)> {
    let oracle = exact_policy_gradient(mdp, target, advantage).map_err(failed)?;
    let oracle_norm = oracle.iter().map(|x| x * x).sum::<f64>().sqrt();
    let errors = RatioMode::ALL
        .iter()
        .map(|&mode| {
            let est = exact_is_expectation(mdp, behavior, target, mode, advantage).map_err(failed)?;
            Ok(ModeError {
                mode,
                max_abs_error: max_abs_difference(&est, &oracle),
                bias_norm: l2_distance(&est, &oracle),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((oracle_norm, errors))
}

const VERIFY_HEADER: &[&str] = &[
    "source",
    "instance",
    "vocab_size",
    "horizon",
    "advantage",
    "mode",
    "max_abs_error",
    "bias_norm",
    "oracle_norm",
];

fn run_verify(p: &VerifyParams, seed: u64) -> Result<Outcome> {
    let mut table = CsvTable::new("unbiasedness.csv", VERIFY_HEADER);
    let mut checks = Vec::new();
    let mut results = serde_json::Map::new();

    if let Some(b) = &p.battery {
        let cells = grid(&b.vocab_sizes, &b.horizons);
        let rows: Vec<Vec<Vec<Cell>>> = (0..b.instances)
            .into_par_iter()
            .map(|i| {
                let (v, h) = cells[i % cells.len()];
                let mut rng = stream_rng(seed, i as u64);
                let reward = Reward::random_table(rng.random(), v, h, DEFAULT_ENUMERATION_LIMIT)
                    .map_err(failed)?;
                let mdp = TokenMdp::new(v, h, reward).map_err(failed)?;
                let layout = PolicyLayout::for_mdp(&mdp, b.parametrization).map_err(failed)?;
                let behavior = TabularPolicy::gaussian(layout.clone(), b.policy_std, rng.random())
                    .map_err(failed)?;
                let target =
                    TabularPolicy::gaussian(layout, b.policy_std, rng.random()).map_err(failed)?;
                let mut rows = Vec::new();
                for adv in AdvantageFn::battery(&mdp, &target, rng.random()).map_err(failed)? {
                    let (oracle_norm, errs) = mode_errors(&mdp, &behavior, &target, &adv)?;
                    let kind = serde_json::to_value(adv.kind())
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default();
                    for e in errs {
                        rows.push(vec![
                            "battery".into(),
                            i.into(),
                            v.into(),
                            h.into(),
                            kind.as_str().into(),
                            mode_name(e.mode).into(),
                            e.max_abs_error.into(),
                            e.bias_norm.into(),
                            oracle_norm.into(),
                        ]);
                    }
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        let mut worst: HashMap<&str, f64> = HashMap::new();
        for row in rows.into_iter().flatten() {
            if let (Cell::Text(mode), Cell::Float(err)) = (&row[5], &row[6]) {
                let name = RatioMode::ALL
                    .iter()
                    .map(|m| m.name())
                    .find(|n| n == mode)
                    .unwrap_or("unknown");
                let w = worst.entry(name).or_insert(0.0);
                *w = w.max(*err);
            }
            table.push(row);
        }
        let mut by_mode = serde_json::Map::new();
        for mode in RatioMode::ALL {
            let w = worst.get(mode.name()).copied().unwrap_or(f64::NAN);
            by_mode.insert(mode.name().into(), json!(w));
            if matches!(mode, RatioMode::Cumulative | RatioMode::Sequence) {
                checks.push(Check::below(
                    format!("battery {} max component error", mode.name()),
                    w,
                    p.tolerance,
                ));
            }
        }
        results.insert(
            "battery".into(),
            json!({"instances": b.instances, "max_abs_error_by_mode": by_mode}),
        );
    }

    let mut fixtures = Vec::new();
    for f in &p.fixtures {
        let mdp = f.mdp.build().map_err(failed)?;
        let behavior = f.behavior.build(&mdp).map_err(failed)?;
        let target = f.target.build(&mdp).map_err(failed)?;
        let adv = f.advantage.build(&mdp, &target)?;
        let (oracle_norm, errs) = mode_errors(&mdp, &behavior, &target, &adv)?;
        let mut modes = serde_json::Map::new();
        for e in &errs {
            table.push(vec![
                Cell::Text(format!("fixture:{}", f.name)),
                0usize.into(),
                mdp.vocab_size().into(),
                mdp.horizon().into(),
                f.advantage.name().into(),
                mode_name(e.mode).into(),
                e.max_abs_error.into(),
                e.bias_norm.into(),
                oracle_norm.into(),
            ]);
            modes.insert(
                e.mode.name().into(),
                json!({"bias_norm": e.bias_norm, "max_abs_error": e.max_abs_error}),
            );
            if matches!(e.mode, RatioMode::Cumulative | RatioMode::Sequence) {
                checks.push(Check::below(
                    format!("{} {} bias norm", f.name, e.mode.name()),
                    e.bias_norm,
                    p.tolerance,
                ));
            } else if f.expect_biased.contains(&e.mode) {
                checks.push(Check::above(
                    format!("{} {} bias norm", f.name, e.mode.name()),
                    e.bias_norm,
                    f.bias_threshold,
                ));
            }
        }
        fixtures.push(json!({"name": f.name, "oracle_norm": oracle_norm, "modes": modes}));
    }
    if !fixtures.is_empty() {
        results.insert("fixtures".into(), Value::Array(fixtures));
    }
    Ok(Outcome {
        checks,
        results: Value::Object(results),
        tables: vec![table],
        streams: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// variance-scan

/// Binary position-independent construct with per-step chi-square `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructScan {
    pub horizons: Vec<usize>,
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub asymptotic: Option<AsymptoticCheck>,
}

/// Bound on `|enumerated ratio / (H/t) - 1|` for scans with `delta <= max_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticCheck {
    pub max_delta: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomVarianceParams {
    pub instances: usize,
    #[serde(default = "default_vocab_sizes")]
    pub vocab_sizes: Vec<usize>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_policy_std")]
    pub policy_std: f64,
    #[serde(default)]
    pub parametrization: Parametrization,
}

fn default_ratio_tol() -> f64 {
    1e-8
}

fn default_equality_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceScanParams {
    #[serde(default)]
    pub construct: Option<ConstructScan>,
    #[serde(default)]
    pub random: Option<RandomVarianceParams>,
    /// Bound on `|enumerated ratio - closed form|` in the construct.
    #[serde(default = "default_ratio_tol")]
    pub tolerance: f64,
    /// Bound on `|Var(rho^seq) - Var(rho_H^cum)|` for random instances.
    #[serde(default = "default_equality_tol")]
    pub equality_tolerance: f64,
}

impl VarianceScanParams {
    fn validate(&self) -> Result<()> {
        require(
            self.construct.is_some() || self.random.is_some(),
            "variance-scan needs a construct or random section",
        )?;
        require(self.tolerance > 0.0, "tolerance must be positive")?;
        require(self.equality_tolerance > 0.0, "equality_tolerance must be positive")?;
        if let Some(c) = &self.construct {
            check_grid(&[2], &c.horizons)?;
            require(!c.deltas.is_empty(), "construct.deltas must not be empty")?;
            for &d in &c.deltas {
                require(d > 0.0 && d < 1.0, "construct deltas must lie in (0, 1)")?;
            }
        }
        if let Some(r) = &self.random {
            require(r.instances > 0, "random.instances must be >= 1")?;
            require(r.horizons.iter().all(|&h| h >= 2), "random horizons must be >= 2")?;
            require(r.policy_std > 0.0 && r.policy_std.is_finite(), "policy_std must be > 0")?;
            check_grid(&r.vocab_sizes, &r.horizons)?;
        }
        Ok(())
    }
}

const CONSTRUCT_HEADER: &[&str] = &[
    "horizon",
    "delta",
    "position",
    "var_cumulative",
    "var_sequence",
    "product_variance",
    "enumerated_ratio",
    "closed_form_ratio",
    "asymptotic_ratio",
];

const RANDOM_VARIANCE_HEADER: &[&str] = &[
    "instance",
    "vocab_size",
    "horizon",
    "position",
    "var_cumulative",
    "var_sequence",
];

fn run_variance_scan(p: &VarianceScanParams, seed: u64) -> Result<Outcome> {
    let mut checks = Vec::new();
    let mut tables = Vec::new();
    let mut results = serde_json::Map::new();

    if let Some(c) = &p.construct {
        let mut table = CsvTable::new("variance_scan.csv", CONSTRUCT_HEADER);
        let mut max_closed: f64 = 0.0;
        let mut max_asym: f64 = 0.0;
        for &h in &c.horizons {
            for &delta in &c.deltas {
                let construct = IndependenceConstruct::binary_with_chi2(h, delta).map_err(failed)?;
                let mdp = TokenMdp::new(2, h, Reward::Constant(0.0)).map_err(failed)?;
                let prof = exact_ratio_variance_profile(&mdp, &construct.behavior, &construct.target)
                    .map_err(failed)?;
                let closed = variance_ratio_curve(delta, h);
                let product = chi2_product_variances(&vec![delta; h]);
                for (t, ratio) in prof.variance_ratios().iter().enumerate() {
                    let asym = h as f64 / (t + 1) as f64;
                    max_closed = max_closed.max((ratio - closed[t]).abs());
                    if c.asymptotic.is_some_and(|a| delta <= a.max_delta) {
                        max_asym = max_asym.max((ratio / asym - 1.0).abs());
                    }
                    table.push(vec![
                        h.into(),
                        delta.into(),
                        (t + 1).into(),
                        prof.var_cumulative[t].into(),
                        prof.var_sequence.into(),
                        product[t].into(),
                        (*ratio).into(),
                        closed[t].into(),
                        asym.into(),
                    ]);
                }
            }
        }
        checks.push(Check::at_most(
            "enumerated vs closed-form variance ratio",
            max_closed,
            p.tolerance,
        ));
        if let Some(a) = c.asymptotic {
            checks.push(Check::at_most(
                "variance ratio relative deviation from H/t",
                max_asym,
                a.tolerance,
            ));
        }
        results.insert(
            "construct".into(),
            json!({
                "max_closed_form_error": max_closed,
                "max_relative_asymptotic_deviation": c.asymptotic.map(|_| max_asym),
            }),
        );
        tables.push(table);
    }

    if let Some(r) = &p.random {
        let cells = grid(&r.vocab_sizes, &r.horizons);
        let per_instance: Vec<(usize, usize, Vec<f64>, f64)> = (0..r.instances)
            .into_par_iter()
            .map(|i| {
                let (v, h) = cells[i % cells.len()];
                let mut rng = stream_rng(seed, i as u64);
                let mdp = TokenMdp::new(v, h, Reward::Constant(0.0)).map_err(failed)?;
                let layout = PolicyLayout::for_mdp(&mdp, r.parametrization).map_err(failed)?;
                let behavior = TabularPolicy::gaussian(layout.clone(), r.policy_std, rng.random())
                    .map_err(failed)?;
                let target =
                    TabularPolicy::gaussian(layout, r.policy_std, rng.random()).map_err(failed)?;
                let prof = exact_ratio_variance_profile(&mdp, &behavior, &target).map_err(failed)?;
                Ok((v, h, prof.var_cumulative, prof.var_sequence))
            })
            .collect::<Result<_>>()?;
        let mut table = CsvTable::new("random_variance.csv", RANDOM_VARIANCE_HEADER);
        let mut min_gap = f64::INFINITY;
        let mut max_eq: f64 = 0.0;
        for (i, (v, h, cum, seq)) in per_instance.iter().enumerate() {
            for (t, var) in cum.iter().enumerate() {
                if t + 1 < *h {
                    min_gap = min_gap.min(seq - var);
                } else {
                    max_eq = max_eq.max((seq - var).abs());
                }
                table.push(vec![
                    i.into(),
                    (*v).into(),
                    (*h).into(),
                    (t + 1).into(),
                    (*var).into(),
                    (*seq).into(),
                ]);
            }
        }
        checks.push(Check::above(
            "min Var(rho^seq) - Var(rho_t^cum) over t < H",
            min_gap,
            0.0,
        ));
        checks.push(Check::at_most(
            "max |Var(rho^seq) - Var(rho_H^cum)|",
            max_eq,
            p.equality_tolerance,
        ));
        results.insert(
            "random".into(),
            json!({"instances": r.instances, "min_gap": min_gap, "max_equality_error": max_eq}),
        );
        tables.push(table);
    }
    Ok(Outcome {
        checks,
        results: Value::Object(results),
        tables,
        streams: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// chi2-factorization

fn default_chi_vocab() -> usize {
    3
}

fn default_chi_std() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChiSquareParams {
    pub instances: usize,
    #[serde(default = "default_chi_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_chi_std")]
    pub policy_std: f64,
    /// Bound on `|enumerated - product| / max(1, product)`.
    #[serde(default = "default_unbiased_tol")]
    pub tolerance: f64,
}

const CHI_HEADER: &[&str] = &[
    "instance",
    "horizon",
    "position",
    "chi2",
    "enumerated_variance",
    "product_variance",
    "scaled_error",
];

/// Horizon, enumerated variances, product-formula variances, scaled errors.
type Chi2Row = (usize, Vec<f64>, Vec<f64>, Vec<f64>);

fn run_chi2(p: &ChiSquareParams, seed: u64) -> Result<Outcome> {
    let rows: Vec<Chi2Row> = (0..p.instances)
        .into_par_iter()
        .map(|i| {
            let h = p.horizons[i % p.horizons.len()];
            let mut rng = stream_rng(seed, i as u64);
            let mdp = TokenMdp::new(p.vocab_size, h, Reward::Constant(0.0)).map_err(failed)?;
            let layout = PolicyLayout::for_mdp(&mdp, Parametrization::Position).map_err(failed)?;
            let behavior =
                TabularPolicy::gaussian(layout.clone(), p.policy_std, rng.random()).map_err(failed)?;
            let target = TabularPolicy::gaussian(layout, p.policy_std, rng.random()).map_err(failed)?;
            let chi2 = chi2_divergence_profile(&mdp, &behavior, &target).map_err(failed)?;
            let enumerated = exact_ratio_variance_profile(&mdp, &behavior, &target)
                .map_err(failed)?
                .var_cumulative;
            let product = chi2_product_variances(&chi2);
            Ok((h, chi2, enumerated, product))
        })
        .collect::<Result<_>>()?;
    let mut table = CsvTable::new("chi2_factorization.csv", CHI_HEADER);
    let mut worst: f64 = 0.0;
    for (i, (h, chi2, enumerated, product)) in rows.iter().enumerate() {
        for t in 0..*h {
            let err = (enumerated[t] - product[t]).abs() / product[t].abs().max(1.0);
            worst = worst.max(err);
            table.push(vec![
                i.into(),
                (*h).into(),
                (t + 1).into(),
                chi2[t].into(),
                enumerated[t].into(),
                product[t].into(),
                err.into(),
            ]);
        }
    }
    Ok(Outcome {
        checks: vec![Check::at_most(
            "enumerated vs product-formula variance",
            worst,
            p.tolerance,
        )],
        results: json!({"instances": p.instances, "max_scaled_error": worst}),
        tables: vec![table],
        streams: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// log-std-profile

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogStdSource {
    /// Per-step log-ratios drawn i.i.d. from `N(mean, std^2)`.
    IidGaussian { mean: f64, std: f64 },
    /// Trajectories sampled from a position-independent behavior policy
    /// with the same next-token distribution at every position.
    StationaryPolicies {
        behavior: Vec<f64>,
        target: Vec<f64>,
    },
}

fn default_r2_min() -> f64 {
    0.99
}

fn default_sigma_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogStdParams {
    pub horizon: usize,
    pub samples: usize,
    pub source: LogStdSource,
    #[serde(default = "default_r2_min")]
    pub r_squared_min: f64,
    #[serde(default = "default_sigma_tol")]
    pub sigma_relative_tolerance: f64,
}

const LOG_STD_HEADER: &[&str] = &["position", "std", "fitted", "reference"];

fn run_log_std(p: &LogStdParams, seed: u64) -> Result<Outcome> {
    let (profiles, sigma) = match &p.source {
        LogStdSource::IidGaussian { mean, std } => (
            sample_iid_log_ratio_profiles(p.samples, p.horizon, *mean, *std, seed)
                .map_err(failed)?,
            *std,
        ),
        LogStdSource::StationaryPolicies { behavior, target } => {
            let v = behavior.len();
            let c = IndependenceConstruct::new(
                v,
                p.horizon,
                std::slice::from_ref(behavior),
                std::slice::from_ref(target),
            )
            .map_err(failed)?;
            let mdp = TokenMdp::new(v, p.horizon, Reward::Constant(0.0)).map_err(failed)?;
            let batch = sample_batch(&mdp, &c.behavior, &c.target, p.samples, seed).map_err(failed)?;
            let profiles = batch
                .trajectories
                .par_iter()
                .map(RatioProfile::from_trajectory)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(failed)?;
            (profiles, c.log_ratio_variances()[0].sqrt())
        }
    };
    let prof = log_ratio_std_profile(&profiles).map_err(failed)?;
    let mut table = CsvTable::new("log_std_profile.csv", LOG_STD_HEADER);
    for t in 0..p.horizon {
        table.push(vec![
            (t + 1).into(),
            prof.stds[t].into(),
            prof.fitted[t].into(),
            (sigma * ((t + 1) as f64).sqrt()).into(),
        ]);
    }
    let rel = (prof.sigma_hat - sigma).abs() / sigma;
    Ok(Outcome {
        checks: vec![
            Check::above("r_squared of sigma*sqrt(t) fit", prof.r_squared, p.r_squared_min),
            Check::below("relative error of sigma_hat", rel, p.sigma_relative_tolerance),
        ],
        results: json!({
            "sigma": sigma,
            "sigma_hat": prof.sigma_hat,
            "r_squared": prof.r_squared,
            "samples": prof.sample_count,
        }),
        tables: vec![table],
        streams: Vec::new(),
    })
}

impl LogStdParams {
    fn validate(&self) -> Result<()> {
        require(self.horizon >= 2, "horizon must be >= 2")?;
        require(self.samples >= 2, "samples must be >= 2")?;
        match &self.source {
            LogStdSource::IidGaussian { mean, std } => {
                finite(*mean, "mean")?;
                require(*std > 0.0 && std.is_finite(), "std must be > 0")
            }
            LogStdSource::StationaryPolicies { behavior, target } => {
                require(behavior.len() >= 2, "behavior needs >= 2 tokens")?;
                require(behavior.len() == target.len(), "behavior and target lengths differ")?;
                IndependenceConstruct::new(
                    behavior.len(),
                    self.horizon,
                    std::slice::from_ref(behavior),
                    std::slice::from_ref(target),
                )
                .map_err(|e| schema(e.to_string()))?;
                require(behavior != target, "behavior and target must differ")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// clip-rate

fn default_fixed_schedule() -> ClipSchedule {
    ClipSchedule::FixedRatio {
        lower: 0.5,
        upper: 5.0,
    }
}

fn default_spearman_min() -> f64 {
    0.9
}

fn default_spread_ratio_max() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRateParams {
    pub horizon: usize,
    pub samples: usize,
    #[serde(default)]
    pub log_ratio_mean: f64,
    pub log_ratio_std: f64,
    #[serde(default = "default_fixed_schedule")]
    pub fixed: ClipSchedule,
    pub adaptive: ClipSchedule,
    #[serde(default = "default_spearman_min")]
    pub spearman_min: f64,
    #[serde(default = "default_spread_ratio_max")]
    pub spread_ratio_max: f64,
}

const CLIP_HEADER: &[&str] = &[
    "position",
    "fixed_clip_rate",
    "adaptive_clip_rate",
    "fixed_lower",
    "fixed_upper",
    "adaptive_lower",
    "adaptive_upper",
];

fn spread(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn run_clip_rate(p: &ClipRateParams, seed: u64) -> Result<Outcome> {
    let profiles =
        sample_iid_log_ratio_profiles(p.samples, p.horizon, p.log_ratio_mean, p.log_ratio_std, seed)
            .map_err(failed)?;
    let rates = |s: &ClipSchedule| -> Vec<f64> {
        clip_rate_profile(&profiles, s)
            .into_iter()
            .map(|r| r.unwrap_or(f64::NAN))
            .collect()
    };
    let fixed = rates(&p.fixed);
    let adaptive = rates(&p.adaptive);
    let mut table = CsvTable::new("clip_rate.csv", CLIP_HEADER);
    for t in 0..p.horizon {
        let (fl, fu) = p.fixed.bounds(t + 1);
        let (al, au) = p.adaptive.bounds(t + 1);
        table.push(vec![
            (t + 1).into(),
            fixed[t].into(),
            adaptive[t].into(),
            fl.into(),
            fu.into(),
            al.into(),
            au.into(),
        ]);
    }
    let positions: Vec<f64> = (1..=p.horizon).map(|t| t as f64).collect();
    let rank = spearman(&positions, &fixed).unwrap_or(f64::NAN);
    let (fs, as_) = (spread(&fixed), spread(&adaptive));
    let ratio = as_ / fs;
    Ok(Outcome {
        checks: vec![
            Check::above("spearman(position, fixed clip rate)", rank, p.spearman_min),
            Check::at_most("adaptive / fixed clip-rate spread", ratio, p.spread_ratio_max),
        ],
        results: json!({
            "spearman_fixed": rank,
            "fixed_spread": fs,
            "adaptive_spread": as_,
            "spread_ratio": ratio,
        }),
        tables: vec![table],
        streams: Vec::new(),
    })
}

impl ClipRateParams {
    fn validate(&self) -> Result<()> {
        require(self.horizon >= 2, "horizon must be >= 2")?;
        require(self.samples >= 1, "samples must be >= 1")?;
        finite(self.log_ratio_mean, "log_ratio_mean")?;
        require(
            self.log_ratio_std > 0.0 && self.log_ratio_std.is_finite(),
            "log_ratio_std must be > 0",
        )?;
        self.fixed.validate().map_err(|e| schema(e.to_string()))?;
        self.adaptive.validate().map_err(|e| schema(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// train and compare-objectives

fn default_prompts() -> usize {
    1
}

fn default_inner_epochs() -> usize {
    4
}

fn default_max_clip() -> f64 {
    1.0
}

/// Training config without the seed, which comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub objective: Objective,
    pub group_size: usize,
    #[serde(default = "default_prompts")]
    pub prompts_per_step: usize,
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub mdp: MdpSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
    /// Required `(final - initial) / (max reward - initial)`, if set.
    #[serde(default)]
    pub min_improvement_fraction: Option<f64>,
    /// Upper bound on the clip fraction at every step.
    #[serde(default = "default_max_clip")]
    pub max_clip_fraction: f64,
}

impl TrainParams {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            group_size: self.group_size,
            prompts_per_step: self.prompts_per_step,
            inner_epochs: self.inner_epochs,
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            seed,
            mdp: self.mdp.clone(),
            policy: self.policy.clone(),
            evaluation: self.evaluation,
        }
    }

    fn validate(&self) -> Result<()> {
        let cfg = self.train_config(0);
        cfg.validate().map_err(|e| schema(e.to_string()))?;
        require(self.total_steps >= 1, "total_steps must be >= 1")?;
        let mdp = self.mdp.build().map_err(|e| schema(e.to_string()))?;
        self.policy.build(&mdp).map_err(|e| schema(e.to_string()))?;
        if self.min_improvement_fraction.is_some() {
            require(
                max_reward(&mdp).is_some(),
                "min_improvement_fraction needs an enumerable MDP",
            )?;
        }
        require(
            (0.0..=1.0).contains(&self.max_clip_fraction),
            "max_clip_fraction must lie in [0, 1]",
        )
    }
}

const TRAIN_HEADER: &[&str] = &[
    "step",
    "expected_reward",
    "expected_reward_se",
    "surrogate_value",
    "clip_fraction",
    "mean_abs_log_ratio",
    "degenerate_groups",
];

fn run_training(cfg: &TrainConfig) -> Result<TrainReport> {
    match train(cfg) {
        Ok(r) => Ok(r),
        Err(TrainError::NonFiniteGradient { step, epoch, .. }) => Err(failed(format!(
            "non-finite gradient at step {step}, inner epoch {epoch}"
        ))),
        Err(e) => Err(failed(e)),
    }
}

struct TrainSummary {
    improvement_fraction: Option<f64>,
    max_clip: f64,
    min_clip: f64,
    all_finite: bool,
}

fn summarize(report: &TrainReport, max_reward: Option<f64>) -> TrainSummary {
    let gap = max_reward.map(|m| m - report.initial_expected_reward);
    let improvement_fraction = gap
        .filter(|g| *g > 0.0)
        .map(|g| (report.final_expected_reward - report.initial_expected_reward) / g);
    let clips = report.records.iter().map(|r| r.clip_fraction);
    let all_finite = report.records.iter().all(|r| {
        r.expected_reward.is_finite()
            && r.surrogate_value.is_finite()
            && r.clip_fraction.is_finite()
            && r.mean_abs_log_ratio.is_finite()
    }) && report.final_logits.iter().all(|x| x.is_finite());
    TrainSummary {
        improvement_fraction,
        max_clip: clips.clone().fold(0.0, f64::max),
        min_clip: clips.fold(f64::INFINITY, f64::min),
        all_finite,
    }
}

fn train_checks(
    label: &str,
    report: &TrainReport,
    summary: &TrainSummary,
    max_clip_fraction: f64,
) -> Vec<Check> {
    let prefix = if label.is_empty() {
        String::new()
    } else {
        format!("{label} ")
    };
    vec![
        Check::at_least(
            format!("{prefix}final - initial expected reward"),
            report.final_expected_reward - report.initial_expected_reward,
            0.0,
        ),
        Check::at_least(format!("{prefix}min clip fraction"), summary.min_clip, 0.0),
        Check::at_most(
            format!("{prefix}max clip fraction"),
            summary.max_clip,
            max_clip_fraction,
        ),
        Check::at_least(
            format!("{prefix}all step values finite"),
            if summary.all_finite { 1.0 } else { 0.0 },
            1.0,
        ),
    ]
}

fn step_row(prefix: Option<&str>, r: &crate::trainer::StepRecord) -> Vec<Cell> {
    let mut row: Vec<Cell> = prefix.map(|p| vec![p.into()]).unwrap_or_default();
    row.extend([
        r.step.into(),
        r.expected_reward.into(),
        r.expected_reward_se.into(),
        r.surrogate_value.into(),
        r.clip_fraction.into(),
        r.mean_abs_log_ratio.into(),
        r.degenerate_groups.into(),
    ]);
    row
}

fn run_train(p: &TrainParams, seed: u64) -> Result<Outcome> {
    let cfg = p.train_config(seed);
    let mdp = p.mdp.build().map_err(failed)?;
    let best = max_reward(&mdp);
    let report = run_training(&cfg)?;
    let summary = summarize(&report, best);
    let mut checks = train_checks("", &report, &summary, p.max_clip_fraction);
    if let Some(min) = p.min_improvement_fraction {
        checks.push(Check::at_least(
            "improvement fraction of reward gap",
            summary.improvement_fraction.unwrap_or(f64::NAN),
            min,
        ));
    }
    let mut table = CsvTable::new("train_steps.csv", TRAIN_HEADER);
    let mut stream = Vec::with_capacity(report.records.len());
    for r in &report.records {
        table.push(step_row(None, r));
        stream.push(serde_json::to_value(r).map_err(failed)?);
    }
    Ok(Outcome {
        checks,
        results: json!({
            "objective": report.objective,
            "evaluation": report.evaluation,
            "initial_expected_reward": report.initial_expected_reward,
            "final_expected_reward": report.final_expected_reward,
            "max_reward": best,
            "improvement_fraction": summary.improvement_fraction,
            "max_clip_fraction": summary.max_clip,
            "degenerate_groups": report.degenerate_groups,
            "final_logits": report.final_logits,
        }),
        tables: vec![table],
        streams: vec![("train_steps.jsonl".into(), stream)],
    })
}

/// Several objectives trained from the same seed and initial policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareParams {
    pub objectives: Vec<Objective>,
    pub group_size: usize,
    #[serde(default = "default_prompts")]
    pub prompts_per_step: usize,
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub mdp: MdpSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
    #[serde(default = "default_max_clip")]
    pub max_clip_fraction: f64,
}

impl CompareParams {
    fn for_objective(&self, objective: Objective) -> TrainParams {
        TrainParams {
            objective,
            group_size: self.group_size,
            prompts_per_step: self.prompts_per_step,
            inner_epochs: self.inner_epochs,
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            mdp: self.mdp.clone(),
            policy: self.policy.clone(),
            evaluation: self.evaluation,
            min_improvement_fraction: None,
            max_clip_fraction: self.max_clip_fraction,
        }
    }

    fn labels(&self) -> Vec<String> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for o in &self.objectives {
            *counts.entry(o.name()).or_default() += 1;
        }
        self.objectives
            .iter()
            .enumerate()
            .map(|(i, o)| {
                if counts[o.name()] > 1 {
                    format!("{}-{}", o.name(), i + 1)
                } else {
                    o.name().to_string()
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        require(!self.objectives.is_empty(), "objectives must not be empty")?;
        for o in &self.objectives {
            self.for_objective(*o).validate()?;
        }
        Ok(())
    }
}

const COMPARE_HEADER: &[&str] = &[
    "objective",
    "step",
    "expected_reward",
    "expected_reward_se",
    "surrogate_value",
    "clip_fraction",
    "mean_abs_log_ratio",
    "degenerate_groups",
];

const COMPARE_SUMMARY_HEADER: &[&str] = &[
    "objective",
    "initial_expected_reward",
    "final_expected_reward",
    "improvement_fraction",
    "max_clip_fraction",
];

fn run_compare(p: &CompareParams, seed: u64) -> Result<Outcome> {
    let mdp = p.mdp.build().map_err(failed)?;
    let best = max_reward(&mdp);
    let mut steps = CsvTable::new("compare_steps.csv", COMPARE_HEADER);
    let mut summary_table = CsvTable::new("compare_summary.csv", COMPARE_SUMMARY_HEADER);
    let mut checks = Vec::new();
    let mut results = Vec::new();
    for (label, objective) in p.labels().iter().zip(&p.objectives) {
        let report = run_training(&p.for_objective(*objective).train_config(seed))?;
        let summary = summarize(&report, best);
        checks.extend(train_checks(label, &report, &summary, p.max_clip_fraction));
        for r in &report.records {
            steps.push(step_row(Some(label), r));
        }
        summary_table.push(vec![
            label.as_str().into(),
            report.initial_expected_reward.into(),
            report.final_expected_reward.into(),
            summary.improvement_fraction.into(),
            summary.max_clip.into(),
        ]);
        results.push(json!({
            "label": label,
            "objective": objective,
            "initial_expected_reward": report.initial_expected_reward,
            "final_expected_reward": report.final_expected_reward,
            "improvement_fraction": summary.improvement_fraction,
            "max_clip_fraction": summary.max_clip,
        }));
    }
    Ok(Outcome {
        checks,
        results: json!({"max_reward": best, "runs": results}),
        tables: vec![steps, summary_table],
        streams: Vec::new(),
    })
}

// ---------------------------------------------------------------------------

/// Typed parameters of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentParams {
    VerifyUnbiasedness(VerifyParams),
    VarianceScan(VarianceScanParams),
    Chi2Factorization(ChiSquareParams),
    LogStdProfile(LogStdParams),
    ClipRate(ClipRateParams),
    Train(Box<TrainParams>),
    CompareObjectives(Box<CompareParams>),
}

impl ExperimentParams {
    pub fn parse(kind: ExperimentKind, params: Value) -> Result<Self> {
        let parsed = match kind {
            ExperimentKind::VerifyUnbiasedness => {
                let p: VerifyParams = parse(params)?;
                p.validate()?;
                ExperimentParams::VerifyUnbiasedness(p)
            }
            ExperimentKind::VarianceScan => {
                let p: VarianceScanParams = parse(params)?;
                p.validate()?;
                ExperimentParams::VarianceScan(p)
            }
            ExperimentKind::Chi2Factorization => {
                let p: ChiSquareParams = parse(params)?;
                require(p.instances > 0, "instances must be >= 1")?;
                require(p.policy_std > 0.0 && p.policy_std.is_finite(), "policy_std must be > 0")?;
                require(p.tolerance > 0.0, "tolerance must be positive")?;
                check_grid(&[p.vocab_size], &p.horizons)?;
                ExperimentParams::Chi2Factorization(p)
            }
            ExperimentKind::LogStdProfile => {
                let p: LogStdParams = parse(params)?;
                p.validate()?;
                ExperimentParams::LogStdProfile(p)
            }
            ExperimentKind::ClipRate => {
                let p: ClipRateParams = parse(params)?;
                p.validate()?;
                ExperimentParams::ClipRate(p)
            }
            ExperimentKind::Train => {
                let p: TrainParams = parse(params)?;
                p.validate()?;
                ExperimentParams::Train(Box::new(p))
            }
            ExperimentKind::CompareObjectives => {
                let p: CompareParams = parse(params)?;
                p.validate()?;
                ExperimentParams::CompareObjectives(Box::new(p))
            }
        };
        Ok(parsed)
    }

    pub fn to_json(&self) -> Value {
        let v = match self {
            ExperimentParams::VerifyUnbiasedness(p) => serde_json::to_value(p),
            ExperimentParams::VarianceScan(p) => serde_json::to_value(p),
            ExperimentParams::Chi2Factorization(p) => serde_json::to_value(p),
            ExperimentParams::LogStdProfile(p) => serde_json::to_value(p),
            ExperimentParams::ClipRate(p) => serde_json::to_value(p),
            ExperimentParams::Train(p) => serde_json::to_value(p),
            ExperimentParams::CompareObjectives(p) => serde_json::to_value(p),
        };
        v.expect("params serialize to JSON")
    }

    pub fn run(&self, seed: u64) -> Result<Outcome> {
        match self {
            ExperimentParams::VerifyUnbiasedness(p) => run_verify(p, seed),
            ExperimentParams::VarianceScan(p) => run_variance_scan(p, seed),
            ExperimentParams::Chi2Factorization(p) => run_chi2(p, seed),
            ExperimentParams::LogStdProfile(p) => run_log_std(p, seed),
            ExperimentParams::ClipRate(p) => run_clip_rate(p, seed),
            ExperimentParams::Train(p) => run_train(p, seed),
            ExperimentParams::CompareObjectives(p) => run_compare(p, seed),
        }
    }
}
