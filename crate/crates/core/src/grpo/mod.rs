//! Group-relative policy optimization.
//!
//! The objective for one rollout group of K trajectories is
//!
//! ```text
//! J = (1/K) Σ_k (1/|y_k|) Σ_i min(z_ki·A_ki, clip(z_ki, 1-ε, 1+ε)·A_ki)
//!   - β · (1/K) Σ_k (1/|y_k|) Σ_i KL_ki
//! ```
//!
//! with `z = exp(logp_current - logp_old)`, group-normalized advantages `A`
//! and the k3 estimator `KL = exp(δ) - δ - 1`, `δ = logp_ref - logp_current`.
//! [`toy`] provides a small tabular policy with an analytic gradient and a
//! finite-difference checker.

pub mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use toy::{
    build_group, check_gradient, curve_to_csv, finite_diff_check, parse_curve_csv, toy_gradient, toy_objective,
    train_toy, uniform_stream, Episode, Logits, SyntheticCoordinationEnv, ToyAction, ToyPolicy, ToyState, TrainingRun,
};

/// Ratios are clamped here to keep the surrogate finite.
pub const RATIO_CLAMP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<u32>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub outcome_reward: f64,
    pub token_rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub trajectories: Vec<Trajectory>,
}

/// Population the reward mean and std are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScope {
    /// Every token reward of every trajectory in the group.
    #[default]
    #[serde(alias = "token_multiset")]
    Token,
    /// The K outcome rewards.
    #[serde(alias = "per_trajectory")]
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    #[default]
    ZeroAdvantages,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub group_size: usize,
    pub std_floor: f64,
    pub reward_stat_scope: RewardScope,
    pub degenerate_policy: DegeneratePolicy,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.0,
            group_size: 8,
            std_floor: 1e-8,
            reward_stat_scope: RewardScope::Token,
            degenerate_policy: DegeneratePolicy::ZeroAdvantages,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if self.group_size == 0 {
            return bad("group_size must be at least 1");
        }
        if !(self.std_floor > 0.0) {
            return bad("std_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("reward std {std} is below the floor {floor}")]
    DegenerateGroup { std: f64, floor: f64 },
    #[error("rollout group is empty")]
    EmptyGroup,
    #[error("trajectory {index}: {reason}")]
    InvalidTrajectory { index: usize, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("ratio {ratio} of token {token} in trajectory {trajectory} is within {margin} of a clip boundary")]
    KinkProximity { trajectory: usize, token: usize, ratio: f64, margin: f64 },
}

fn check_group(group: &RolloutGroup, need_rewards: bool) -> Result<(), GrpoError> {
    if group.trajectories.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    for (index, t) in group.trajectories.iter().enumerate() {
        let fail = |reason: &str| Err(GrpoError::InvalidTrajectory { index, reason: reason.to_string() });
        let n = t.tokens.len();
        if n == 0 {
            return fail("no tokens");
        }
        if t.logp_current.len() != n || t.logp_old.len() != n || t.logp_ref.len() != n {
            return fail("log-probability sequences differ in length from tokens");
        }
        if need_rewards && t.token_rewards.len() != n {
            return fail("token_rewards not assigned");
        }
        let lps = t.logp_current.iter().chain(&t.logp_old).chain(&t.logp_ref);
        if lps.clone().any(|v| v.is_nan() || *v > 0.0) {
            return fail("log-probabilities must be <= 0");
        }
    }
    Ok(())
}

/// Broadcast each trajectory's outcome reward to all of its tokens.
pub fn assign_token_rewards(group: &mut RolloutGroup) {
    for t in &mut group.trajectories {
        t.token_rewards = vec![t.outcome_reward; t.tokens.len()];
    }
}

/// Population-normalized values: `(v - mean) / max(std, floor)`.
///
/// Deviations are formed as `n·v - Σv` and divided by `n` only at the end,
/// so a constant shift of every value cancels exactly whenever `n·v` and the
/// sum are exact, and a power-of-two scale cancels exactly.
fn normalize(values: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let dev: Vec<f64> = values.iter().map(|v| n * v - sum).collect();
    let sq: f64 = dev.iter().map(|d| d * d).sum();
    let std = (sq / n).sqrt() / n;
    if std < cfg.std_floor || std.is_nan() {
        return match cfg.degenerate_policy {
            DegeneratePolicy::ZeroAdvantages => Ok(vec![0.0; values.len()]),
            DegeneratePolicy::Error => Err(GrpoError::DegenerateGroup { std, floor: cfg.std_floor }),
        };
    }
    let denom = std.max(cfg.std_floor);
    Ok(dev.iter().map(|d| (d / n) / denom).collect())
}

/// Per-token advantages, one sequence per trajectory.
pub fn compute_advantages(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>, GrpoError> {
    check_group(group, cfg.reward_stat_scope == RewardScope::Token)?;
    match cfg.reward_stat_scope {
        RewardScope::Token => {
            let pooled: Vec<f64> = group.trajectories.iter().flat_map(|t| t.token_rewards.iter().copied()).collect();
            let mut flat = normalize(&pooled, cfg)?.into_iter();
            Ok(group.trajectories.iter().map(|t| flat.by_ref().take(t.len()).collect()).collect())
        }
        RewardScope::Trajectory => {
            let outcomes: Vec<f64> = group.trajectories.iter().map(|t| t.outcome_reward).collect();
            let adv = normalize(&outcomes, cfg)?;
            Ok(group.trajectories.iter().zip(adv).map(|(t, a)| vec![a; t.len()]).collect())
        }
    }
}

/// `exp(logp_current - logp_old)`, clamped to [`RATIO_CLAMP`].
pub fn importance_ratio(logp_current: f64, logp_old: f64) -> f64 {
    let z = (logp_current - logp_old).exp();
    if z > RATIO_CLAMP {
        tracing::warn!(ratio = z, "importance ratio clamped");
        RATIO_CLAMP
    } else {
        z
    }
}

pub fn clipped_term(z: f64, a: f64, epsilon: f64) -> f64 {
    (z * a).min(z.clamp(1.0 - epsilon, 1.0 + epsilon) * a)
}

/// k3 estimator with `δ = logp_ref - logp_current`.
pub fn kl_estimate(logp_current: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_current;
    (delta.exp_m1() - delta).max(0.0)
}

/// Clipped surrogate minus the β-weighted KL, both as a mean over
/// trajectories of per-trajectory token means.
pub fn grpo_objective(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    cfg.validate()?;
    let adv = compute_advantages(group, cfg)?;
    let k = group.trajectories.len() as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for (t, a) in group.trajectories.iter().zip(&adv) {
        let len = t.len() as f64;
        let mut s = 0.0;
        let mut d = 0.0;
        for i in 0..t.len() {
            let z = importance_ratio(t.logp_current[i], t.logp_old[i]);
            s += clipped_term(z, a[i], cfg.epsilon);
            if cfg.beta != 0.0 {
                d += kl_estimate(t.logp_current[i], t.logp_ref[i]);
            }
        }
        surrogate += s / len;
        kl += d / len;
    }
    Ok(surrogate / k - cfg.beta * (kl / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(len: usize, reward: f64) -> Trajectory {
        Trajectory {
            tokens: vec![0; len],
            logp_current: vec![-1.0; len],
            logp_old: vec![-1.0; len],
            logp_ref: vec![-1.0; len],
            outcome_reward: reward,
            token_rewards: Vec::new(),
        }
    }

    fn group(parts: &[(usize, f64)]) -> RolloutGroup {
        let mut g =
            RolloutGroup { query_id: "q".into(), trajectories: parts.iter().map(|&(l, r)| traj(l, r)).collect() };
        assign_token_rewards(&mut g);
        g
    }

    #[test]
    fn broadcast_rewards() {
        let g = group(&[(3, 1.0), (2, -0.5), (1, 0.0)]);
        assert_eq!(g.trajectories[0].token_rewards, [1.0, 1.0, 1.0]);
        assert_eq!(g.trajectories[1].token_rewards, [-0.5, -0.5]);
        assert_eq!(g.trajectories[2].token_rewards, [0.0]);
    }

    #[test]
    fn advantages_by_hand() {
        let g = group(&[(2, 1.0), (2, 0.0)]);
        let a = compute_advantages(&g, &GrpoConfig::default()).unwrap();
        assert_eq!(a, vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);
    }

    #[test]
    fn degenerate_groups() {
        let cfg = GrpoConfig::default();
        let g = group(&[(2, 0.7), (3, 0.7)]);
        assert_eq!(compute_advantages(&g, &cfg).unwrap(), vec![vec![0.0; 2], vec![0.0; 3]]);
        let single = group(&[(4, 1.0)]);
        assert_eq!(compute_advantages(&single, &cfg).unwrap(), vec![vec![0.0; 4]]);
        let strict = GrpoConfig { degenerate_policy: DegeneratePolicy::Error, ..cfg };
        assert!(matches!(compute_advantages(&single, &strict), Err(GrpoError::DegenerateGroup { .. })));
    }

    #[test]
    fn trajectory_scope_uses_outcomes() {
        // Token scope would weight the length-3 trajectory more.
        let g = group(&[(3, 1.0), (1, 0.0)]);
        let cfg = GrpoConfig { reward_stat_scope: RewardScope::Trajectory, ..GrpoConfig::default() };
        let a = compute_advantages(&g, &cfg).unwrap();
        assert_eq!(a, vec![vec![1.0; 3], vec![-1.0]]);
        let tok = compute_advantages(&g, &GrpoConfig::default()).unwrap();
        assert!((tok[0][0] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(-0.3, -0.3), 1.0);
        assert!((importance_ratio(2f64.ln() - 1.0, -1.0) - 2.0).abs() < 1e-15);
        assert!((importance_ratio(-1.0 - 4f64.ln(), -1.0) - 0.25).abs() < 1e-15);
        assert_eq!(importance_ratio(0.0, -100.0), RATIO_CLAMP);
    }

    #[test]
    fn clipped_examples() {
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_term(1.0, -3.25, 0.2), -3.25);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(-0.4, -0.4), 0.0);
        let ln2 = 2f64.ln();
        assert!((kl_estimate(-ln2, 0.0) - (2.0 - ln2 - 1.0)).abs() < 1e-15);
        assert!((kl_estimate(0.0, -ln2) - (0.5 + ln2 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let g = group(&[(2, 1.0), (2, 0.0)]);
        assert_eq!(grpo_objective(&g, &GrpoConfig::default()).unwrap(), 0.0);
        let with_kl = GrpoConfig { beta: 0.5, ..GrpoConfig::default() };
        assert_eq!(grpo_objective(&g, &with_kl).unwrap(), 0.0);
        let g = group(&[(1, 1.0), (3, 0.0)]);
        // R = {1, 0, 0, 0}: mean 1/4, std sqrt(3)/4.
        let expected = (3f64.sqrt() + (-1.0 / 3f64.sqrt())) / 2.0;
        assert!((grpo_objective(&g, &GrpoConfig::default()).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs() {
        let cfg = GrpoConfig::default();
        let empty = RolloutGroup { query_id: "q".into(), trajectories: vec![] };
        assert_eq!(compute_advantages(&empty, &cfg), Err(GrpoError::EmptyGroup));
        let mut g = group(&[(2, 1.0)]);
        g.trajectories[0].logp_old.pop();
        assert!(matches!(compute_advantages(&g, &cfg), Err(GrpoError::InvalidTrajectory { .. })));
        let mut g = group(&[(2, 1.0)]);
        g.trajectories[0].logp_ref[0] = 0.5;
        assert!(matches!(compute_advantages(&g, &cfg), Err(GrpoError::InvalidTrajectory { .. })));
        assert!(GrpoConfig { epsilon: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(GrpoConfig { std_floor: 0.0, ..cfg }.validate().is_err());
    }

    proptest! {
        #[test]
        fn clipped_never_exceeds_unclipped(z in 0.0f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
            let c = clipped_term(z, a, eps);
            prop_assert!(c <= z * a);
            if (1.0 - eps..=1.0 + eps).contains(&z) {
                prop_assert_eq!(c, z * a);
            }
        }

        #[test]
        fn kl_nonnegative(cur in -20.0f64..0.0, reference in -20.0f64..0.0) {
            let v = kl_estimate(cur, reference);
            prop_assert!(v >= 0.0);
            if cur == reference {
                prop_assert_eq!(v, 0.0);
            }
        }

        #[test]
        fn unit_ratio_objective_is_mean_advantage(
            parts in proptest::collection::vec((1usize..6, -4i32..5), 2..6)
        ) {
            let g = group(&parts.iter().map(|&(l, r)| (l, f64::from(r) / 2.0)).collect::<Vec<_>>());
            let cfg = GrpoConfig::default();
            let adv = compute_advantages(&g, &cfg).unwrap();
            let brute = adv.iter().map(|a| a.iter().sum::<f64>() / a.len() as f64).sum::<f64>() / adv.len() as f64;
            prop_assert!((grpo_objective(&g, &cfg).unwrap() - brute).abs() < 1e-12);
        }
    }
}
