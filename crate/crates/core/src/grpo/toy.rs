//! A three-state coordination environment and a tabular softmax policy.
//!
//! States: `NeedInfo` (start), `InfoHeld`, `MemoryBloated`. Actions: `Plan`,
//! `Delegate`, `Summarize`, `Finish`. Termination is strict: any action other
//! than the ones listed below ends the episode with reward 0.
//!
//! | state         | action    | result                                    |
//! |---------------|-----------|-------------------------------------------|
//! | NeedInfo      | Delegate  | MemoryBloated with prob `p_bloat`, else InfoHeld |
//! | MemoryBloated | Summarize | InfoHeld                                  |
//! | InfoHeld      | Finish    | done, reward 1                            |
//!
//! A token encodes one decision as `state * 4 + action`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_token_rewards, compute_advantages, grpo_objective, importance_ratio, DegeneratePolicy, GrpoConfig,
    GrpoError, RolloutGroup, Trajectory, RATIO_CLAMP,
};

pub const N_STATES: usize = 3;
pub const N_ACTIONS: usize = 4;

/// Gradient ascent step size used by [`train_toy`].
pub const LEARNING_RATE: f64 = 0.5;
/// The reference policy is reset to the current policy at the start of every
/// iteration whose index is a multiple of this.
pub const REF_REFRESH: usize = 50;

pub type Logits = [[f64; N_ACTIONS]; N_STATES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyState {
    NeedInfo = 0,
    InfoHeld = 1,
    MemoryBloated = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyAction {
    Plan = 0,
    Delegate = 1,
    Summarize = 2,
    Finish = 3,
}

impl ToyAction {
    pub const ALL: [ToyAction; N_ACTIONS] =
        [ToyAction::Plan, ToyAction::Delegate, ToyAction::Summarize, ToyAction::Finish];
}

pub fn encode(state: ToyState, action: ToyAction) -> u32 {
    (state as u32) * N_ACTIONS as u32 + action as u32
}

pub fn decode(token: u32) -> (usize, usize) {
    let t = token as usize;
    (t / N_ACTIONS, t % N_ACTIONS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCoordinationEnv {
    pub p_bloat: f64,
}

impl Default for SyntheticCoordinationEnv {
    fn default() -> Self {
        Self { p_bloat: 0.5 }
    }
}

enum Step {
    Continue(ToyState),
    Done(f64),
}

impl SyntheticCoordinationEnv {
    fn step(&self, state: ToyState, action: ToyAction, rng: &mut impl Rng) -> Step {
        use ToyAction::*;
        use ToyState::*;
        match (state, action) {
            (NeedInfo, Delegate) => {
                if rng.random::<f64>() < self.p_bloat {
                    Step::Continue(MemoryBloated)
                } else {
                    Step::Continue(InfoHeld)
                }
            }
            (MemoryBloated, Summarize) => Step::Continue(InfoHeld),
            (InfoHeld, Finish) => Step::Done(1.0),
            _ => Step::Done(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub tokens: Vec<u32>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub logits: Logits,
    pub env: SyntheticCoordinationEnv,
}

impl ToyPolicy {
    pub fn uniform(env: SyntheticCoordinationEnv) -> Self {
        Self { logits: [[0.0; N_ACTIONS]; N_STATES], env }
    }

    pub fn probs(&self, state: usize) -> [f64; N_ACTIONS] {
        let row = &self.logits[state];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = row.map(|v| (v - max).exp());
        let sum: f64 = exps.iter().sum();
        exps.map(|e| e / sum)
    }

    pub fn log_prob(&self, token: u32) -> f64 {
        let (s, a) = decode(token);
        let row = &self.logits[s];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        (row[a] - lse).min(0.0)
    }

    fn sample_action(&self, state: ToyState, rng: &mut impl Rng) -> ToyAction {
        let p = self.probs(state as usize);
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return ToyAction::ALL[i];
            }
        }
        ToyAction::ALL[N_ACTIONS - 1]
    }

    pub fn sample_episode(&self, rng: &mut impl Rng) -> Episode {
        let mut state = ToyState::NeedInfo;
        let mut tokens = Vec::new();
        loop {
            let action = self.sample_action(state, rng);
            tokens.push(encode(state, action));
            match self.env.step(state, action, rng) {
                Step::Continue(next) => state = next,
                Step::Done(reward) => return Episode { tokens, reward },
            }
        }
    }

    /// Exact probability of reaching reward 1.
    pub fn expected_reward(&self) -> f64 {
        let need = self.probs(ToyState::NeedInfo as usize)[ToyAction::Delegate as usize];
        let finish = self.probs(ToyState::InfoHeld as usize)[ToyAction::Finish as usize];
        let summarize = self.probs(ToyState::MemoryBloated as usize)[ToyAction::Summarize as usize];
        let p = self.env.p_bloat;
        need * ((1.0 - p) * finish + p * summarize * finish)
    }

    /// Largest per-state total-variation distance.
    pub fn total_variation(&self, other: &ToyPolicy) -> f64 {
        (0..N_STATES)
            .map(|s| {
                let (a, b) = (self.probs(s), other.probs(s));
                0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// Build a rollout group from sampled episodes, filling the three
/// log-probability sequences and broadcasting rewards.
pub fn build_group(
    query_id: &str,
    episodes: &[Episode],
    current: &ToyPolicy,
    old: &ToyPolicy,
    reference: &ToyPolicy,
) -> RolloutGroup {
    let mut group = RolloutGroup {
        query_id: query_id.to_string(),
        trajectories: episodes
            .iter()
            .map(|e| Trajectory {
                tokens: e.tokens.clone(),
                logp_current: e.tokens.iter().map(|&t| current.log_prob(t)).collect(),
                logp_old: e.tokens.iter().map(|&t| old.log_prob(t)).collect(),
                logp_ref: e.tokens.iter().map(|&t| reference.log_prob(t)).collect(),
                outcome_reward: e.reward,
                token_rewards: Vec::new(),
            })
            .collect(),
    };
    assign_token_rewards(&mut group);
    group
}

fn with_current(policy: &ToyPolicy, group: &RolloutGroup) -> RolloutGroup {
    let mut g = group.clone();
    for t in &mut g.trajectories {
        t.logp_current = t.tokens.iter().map(|&tok| policy.log_prob(tok)).collect();
    }
    g
}

/// Objective with `logp_current` recomputed from `policy`.
pub fn toy_objective(policy: &ToyPolicy, group: &RolloutGroup, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    grpo_objective(&with_current(policy, group), cfg)
}

/// Analytic gradient of [`toy_objective`] with respect to the logits.
///
/// The clipped branch contributes nothing where the min selects a clipped
/// ratio outside `[1-ε, 1+ε]`; the KL term contributes `-β(1 - e^δ)∇logπ`.
pub fn toy_gradient(policy: &ToyPolicy, group: &RolloutGroup, cfg: &GrpoConfig) -> Result<Logits, GrpoError> {
    cfg.validate()?;
    let g = with_current(policy, group);
    let adv = compute_advantages(&g, cfg)?;
    let k = g.trajectories.len() as f64;
    let probs: Vec<[f64; N_ACTIONS]> = (0..N_STATES).map(|s| policy.probs(s)).collect();
    let mut grad = [[0.0; N_ACTIONS]; N_STATES];
    for (t, a) in g.trajectories.iter().zip(&adv) {
        let scale = 1.0 / (k * t.len() as f64);
        for i in 0..t.len() {
            let (lc, lo) = (t.logp_current[i], t.logp_old[i]);
            let z = importance_ratio(lc, lo);
            let unclamped = (lc - lo).exp() <= RATIO_CLAMP;
            let lo_b = 1.0 - cfg.epsilon;
            let hi_b = 1.0 + cfg.epsilon;
            let surrogate = if unclamped && ((lo_b..=hi_b).contains(&z) || z * a[i] < z.clamp(lo_b, hi_b) * a[i]) {
                a[i] * z
            } else {
                0.0
            };
            let kl = if cfg.beta != 0.0 { cfg.beta * (1.0 - (t.logp_ref[i] - lc).exp()) } else { 0.0 };
            let coef = (surrogate - kl) * scale;
            if coef == 0.0 {
                continue;
            }
            let (s, act) = decode(t.tokens[i]);
            for b in 0..N_ACTIONS {
                let indicator = if b == act { 1.0 } else { 0.0 };
                grad[s][b] += coef * (indicator - probs[s][b]);
            }
        }
    }
    Ok(grad)
}

/// Central-difference check of `analytic` against [`toy_objective`].
/// Returns the largest relative error `|fd - an| / max(|an|, 1e-8)`.
pub fn check_gradient(
    policy: &ToyPolicy,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    h: f64,
    analytic: &Logits,
) -> Result<f64, GrpoError> {
    let mut worst: f64 = 0.0;
    for s in 0..N_STATES {
        for a in 0..N_ACTIONS {
            let mut plus = policy.clone();
            plus.logits[s][a] += h;
            let mut minus = policy.clone();
            minus.logits[s][a] -= h;
            let fd = (toy_objective(&plus, group, cfg)? - toy_objective(&minus, group, cfg)?) / (2.0 * h);
            let an = analytic[s][a];
            worst = worst.max((fd - an).abs() / an.abs().max(1e-8));
        }
    }
    Ok(worst)
}

/// Verify [`toy_gradient`] by central differences with step `h`. Refuses
/// configurations where any ratio is within `10h` of a clip boundary.
pub fn finite_diff_check(policy: &ToyPolicy, group: &RolloutGroup, cfg: &GrpoConfig, h: f64) -> Result<f64, GrpoError> {
    let margin = 10.0 * h;
    let g = with_current(policy, group);
    for (ti, t) in g.trajectories.iter().enumerate() {
        for i in 0..t.len() {
            let z = importance_ratio(t.logp_current[i], t.logp_old[i]);
            if (z - (1.0 - cfg.epsilon)).abs() <= margin || (z - (1.0 + cfg.epsilon)).abs() <= margin {
                return Err(GrpoError::KinkProximity { trajectory: ti, token: i, ratio: z, margin });
            }
        }
    }
    let analytic = toy_gradient(policy, group, cfg)?;
    check_gradient(policy, group, cfg, h, &analytic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    /// Mean outcome reward of the sampled group, per iteration.
    pub curve: Vec<f64>,
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
}

impl TrainingRun {
    /// Mean of the last `n` curve points (all of them if fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(n)..];
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

/// Seeded on-policy training loop: sample K episodes, one gradient ascent
/// step, then `θ_old ← θ`. Groups with no reward spread contribute only the
/// KL term, whatever `cfg.degenerate_policy` says.
pub fn train_toy(
    env: SyntheticCoordinationEnv,
    cfg: &GrpoConfig,
    seed: u64,
    iterations: usize,
) -> Result<TrainingRun, GrpoError> {
    cfg.validate()?;
    let cfg = GrpoConfig { degenerate_policy: DegeneratePolicy::ZeroAdvantages, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = ToyPolicy::uniform(env);
    let mut reference = policy.clone();
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        if it % REF_REFRESH == 0 {
            reference = policy.clone();
        }
        let old = policy.clone();
        let episodes: Vec<Episode> = (0..cfg.group_size).map(|_| old.sample_episode(&mut rng)).collect();
        curve.push(episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64);
        let group = build_group(&format!("toy-{it}"), &episodes, &policy, &old, &reference);
        let grad = toy_gradient(&policy, &group, &cfg)?;
        for s in 0..N_STATES {
            for a in 0..N_ACTIONS {
                policy.logits[s][a] += LEARNING_RATE * grad[s][a];
            }
        }
    }
    Ok(TrainingRun { curve, policy, reference })
}

/// `iteration,mean_reward` CSV with shortest round-trip float formatting.
pub fn curve_to_csv(curve: &[f64]) -> String {
    let mut out = String::from("iteration,mean_reward\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Inverse of [`curve_to_csv`]. Rows must be numbered 0, 1, 2, ...
pub fn parse_curve_csv(text: &str) -> Result<Vec<f64>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "iteration,mean_reward" => {}
        other => return Err(format!("bad header {other:?}")),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (it, v) = l.split_once(',').ok_or_else(|| format!("row {}: expected two columns", i + 1))?;
            if it.trim().parse::<usize>() != Ok(i) {
                return Err(format!("row {}: expected iteration {i}", i + 1));
            }
            v.trim().parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1))
        })
        .collect()
}

/// The first `n` uniform draws of the trainer's random stream for `seed`.
pub fn uniform_stream(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_config(rng: &mut ChaCha8Rng) -> (ToyPolicy, RolloutGroup) {
        let env = SyntheticCoordinationEnv::default();
        let mut jitter = |scale: f64, base: &Logits| -> ToyPolicy {
            let mut p = ToyPolicy { logits: *base, env };
            for row in &mut p.logits {
                for v in row {
                    *v += scale * (rng.random::<f64>() * 2.0 - 1.0);
                }
            }
            p
        };
        let current = jitter(1.0, &[[0.0; N_ACTIONS]; N_STATES]);
        let old = jitter(0.3, &current.logits);
        let reference = jitter(0.3, &current.logits);
        let k = rng.random_range(2..6);
        let episodes: Vec<Episode> = (0..k)
            .map(|_| Episode {
                tokens: (0..rng.random_range(1..5)).map(|_| rng.random_range(0..12)).collect(),
                reward: rng.random::<f64>(),
            })
            .collect();
        let group = build_group("fd", &episodes, &current, &old, &reference);
        (current, group)
    }

    #[test]
    fn encoding_round_trip() {
        assert_eq!(encode(ToyState::MemoryBloated, ToyAction::Summarize), 10);
        assert_eq!(decode(10), (2, 2));
    }

    #[test]
    fn uniform_baseline() {
        let p = ToyPolicy::uniform(SyntheticCoordinationEnv::default());
        assert_eq!(p.expected_reward(), 0.0390625);
        assert!((p.log_prob(0) - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let (policy, group) = random_config(&mut rng);
            for beta in [0.0, 0.1] {
                let cfg = GrpoConfig { beta, ..GrpoConfig::default() };
                match finite_diff_check(&policy, &group, &cfg, 1e-5) {
                    Ok(err) => {
                        assert!(err < 1e-5, "rel err {err}");
                        checked += 1;
                    }
                    Err(GrpoError::KinkProximity { .. }) => {}
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn corrupted_gradient_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (policy, group) = random_config(&mut rng);
        let cfg = GrpoConfig::default();
        let mut g = toy_gradient(&policy, &group, &cfg).unwrap();
        g[0][0] += 0.1;
        assert!(check_gradient(&policy, &group, &cfg, 1e-5, &g).unwrap() > 0.01);
    }

    #[test]
    fn zero_advantage_group_has_zero_gradient() {
        let p = ToyPolicy::uniform(SyntheticCoordinationEnv::default());
        let eps = vec![Episode { tokens: vec![1, 7], reward: 1.0 }, Episode { tokens: vec![0], reward: 1.0 }];
        let g = build_group("z", &eps, &p, &p, &p);
        let cfg = GrpoConfig::default();
        assert_eq!(toy_gradient(&p, &g, &cfg).unwrap(), [[0.0; N_ACTIONS]; N_STATES]);
        assert_eq!(finite_diff_check(&p, &g, &cfg, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn kink_refused() {
        let env = SyntheticCoordinationEnv::default();
        let current = ToyPolicy::uniform(env);
        let mut old = current.clone();
        // Ratio of token 0 becomes exactly 1.2.
        old.logits[0][0] = (0.25f64 / 1.2 / (1.0 - 0.25 / 1.2) * 3.0).ln();
        let eps = vec![Episode { tokens: vec![0], reward: 1.0 }, Episode { tokens: vec![5], reward: 0.0 }];
        let g = build_group("k", &eps, &current, &old, &current);
        assert!(matches!(
            finite_diff_check(&current, &g, &GrpoConfig::default(), 1e-5),
            Err(GrpoError::KinkProximity { .. })
        ));
    }

    #[test]
    fn zero_iterations() {
        let run = train_toy(SyntheticCoordinationEnv::default(), &GrpoConfig::default(), 7, 0).unwrap();
        assert!(run.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = GrpoConfig::default();
        let a = train_toy(SyntheticCoordinationEnv::default(), &cfg, 3, 40).unwrap();
        let b = train_toy(SyntheticCoordinationEnv::default(), &cfg, 3, 40).unwrap();
        assert_eq!(a, b);
    }
}
