//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ctpo_lab::mdp::{
    sample_batch, Parametrization, PolicyLayout, Reward, TabularPolicy, TokenMdp,
    DEFAULT_ENUMERATION_LIMIT,
};
use ctpo_lab::objectives::{
    objective_gradient, objective_value_at, rescored_profile, ClipSchedule, GroupBatch, Objective,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every length-`h` sequence over `v` tokens, in lexicographic order.
pub fn all_sequences(v: usize, h: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..h {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..v).map(move |a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

/// `pi(a_{1:H})` as a plain product of softmax probabilities.
pub fn seq_prob(policy: &TabularPolicy, seq: &[usize]) -> f64 {
    (0..seq.len())
        .map(|t| policy.distribution(&seq[..t]).unwrap()[seq[t]])
        .product()
}

pub fn perturbed(policy: &TabularPolicy, i: usize, delta: f64) -> TabularPolicy {
    let mut l = policy.logits().to_vec();
    l[i] += delta;
    policy.with_logits(l).unwrap()
}

/// Central differences of `f` over every logit of `policy`.
pub fn central_difference(
    policy: &TabularPolicy,
    h: f64,
    f: impl Fn(&TabularPolicy) -> f64,
) -> Vec<f64> {
    (0..policy.num_params())
        .map(|i| (f(&perturbed(policy, i, h)) - f(&perturbed(policy, i, -h))) / (2.0 * h))
        .collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / max_abs(b).max(floor)
}

pub fn random_table_mdp(v: usize, h: usize, seed: u64) -> TokenMdp {
    TokenMdp::new(
        v,
        h,
        Reward::random_table(seed, v, h, DEFAULT_ENUMERATION_LIMIT).unwrap(),
    )
    .unwrap()
}

/// Target logits are the behavior logits plus Gaussian noise of std `shift`.
pub fn nearby_pair(
    layout: PolicyLayout,
    std: f64,
    shift: f64,
    rng: &mut impl Rng,
) -> (TabularPolicy, TabularPolicy) {
    let behavior = TabularPolicy::gaussian(layout, std, rng.random()).unwrap();
    let noise = TabularPolicy::gaussian(behavior.layout().clone(), shift, rng.random()).unwrap();
    let logits = behavior
        .logits()
        .iter()
        .zip(noise.logits())
        .map(|(a, b)| a + b)
        .collect();
    let target = behavior.with_logits(logits).unwrap();
    (behavior, target)
}

pub fn random_objective(kind: usize, rng: &mut impl Rng) -> Objective {
    match kind {
        0 => Objective::Grpo {
            eps: rng.random_range(0.05..0.3),
        },
        1 => Objective::Gspo {
            eps: rng.random_range(0.02..0.2),
        },
        _ => {
            let schedule = if rng.random_bool(0.7) {
                ClipSchedule::adaptive(
                    rng.random_range(0.02..0.3),
                    rng.random_range(0.02..0.3),
                    [0.0, 0.5, 1.0][rng.random_range(0..3)],
                )
                .unwrap()
            } else {
                ClipSchedule::fixed(rng.random_range(0.6..0.95), rng.random_range(1.05..1.6)).unwrap()
            };
            Objective::Ctpo { schedule }
        }
    }
}

pub struct GradientCase {
    pub objective: Objective,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Tokens whose ratio sits outside its clip range.
    pub clipped_tokens: usize,
}

fn near_boundary(objective: &Objective, batch: &GroupBatch, t: &TabularPolicy, b: &TabularPolicy) -> (bool, usize) {
    const MARGIN: f64 = 1e-4;
    let mut near = false;
    let mut clipped = 0;
    for traj in &batch.trajectories {
        let p = rescored_profile(traj, t, b).unwrap();
        for pos in 1..=p.horizon() {
            let (w, (lo, hi)) = match objective {
                Objective::Grpo { eps } => (p.token_ratios[pos - 1], (1.0 - eps, 1.0 + eps)),
                Objective::Gspo { eps } => (p.gspo, (1.0 - eps, 1.0 + eps)),
                Objective::Ctpo { schedule } => (p.cumulative[pos - 1], schedule.bounds(pos)),
            };
            near |= (w - lo).abs() < MARGIN || (w - hi).abs() < MARGIN;
            if w < lo || w > hi {
                clipped += 1;
            }
        }
    }
    (near, clipped)
}

/// A random surrogate-gradient instance of objective family `kind`
/// (0 GRPO, 1 GSPO, 2 CTPO), or `None` when it lies within 1e-4 of a clip
/// boundary or its group is degenerate.
pub fn gradient_case(seed: u64, kind: usize) -> Option<GradientCase> {
    let mut r = rng(seed);
    let v = r.random_range(2..=4);
    let h = r.random_range(1..=5);
    let mdp = random_table_mdp(v, h, r.random());
    let param = if r.random_bool(0.5) {
        Parametrization::Prefix
    } else {
        Parametrization::Position
    };
    let layout = PolicyLayout::for_mdp(&mdp, param).unwrap();
    let shift = [0.05, 0.2, 0.5][r.random_range(0..3)];
    let (behavior, target) = nearby_pair(layout, 1.0, shift, &mut r);
    let g = r.random_range(2..=8);
    let batch = sample_batch(&mdp, &behavior, &behavior, g, r.random()).unwrap();
    let group = GroupBatch::new("x", batch.trajectories).ok()?;
    if group.is_degenerate() {
        return None;
    }
    let objective = random_objective(kind, &mut r);
    let (near, clipped_tokens) = near_boundary(&objective, &group, &target, &behavior);
    if near {
        return None;
    }
    let analytic = objective_gradient(&group, &target, &behavior, &objective).unwrap();
    let numeric = central_difference(&target, 1e-6, |p| {
        objective_value_at(&objective, &group, p, &behavior).unwrap()
    });
    Some(GradientCase {
        objective,
        analytic,
        numeric,
        clipped_tokens,
    })
}
