//! Toy continuous-control tasks with scripted expert and uniform random
//! reference policies.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{DatasetMeta, OfflineDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::finite_mdp::FiniteMdp;
use crate::operators::{fixed_point, UnderestimateConfig};
use crate::rng::{self, StreamRng};

/// Number of episodes behind each reference score.
pub const REFERENCE_EPISODES: usize = 500;
const REFERENCE_SEED: u64 = 0x7265_6673;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Mean undiscounted episode returns of the scripted reference policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct References {
    pub random: f64,
    pub expert: f64,
}

impl References {
    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.expert - self.random)
    }
}

/// Episodic task with states and actions as real vectors; actions live in
/// `[-1, 1]^action_dim`. Dynamics are pure functions of the passed state, so
/// rollouts may start from any recorded state.
pub trait Environment {
    fn name(&self) -> String;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut StreamRng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut StreamRng) -> Step;
    fn expert_action(&self, state: &[f64], rng: &mut StreamRng) -> Vec<f64>;
    fn references(&self) -> References;

    fn random_action(&self, rng: &mut StreamRng) -> Vec<f64> {
        (0..self.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

/// Which scripted policy drives an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Expert,
    Random,
}

/// Mean undiscounted return of `policy` over `n_episodes`.
///
/// Episode `i` draws its start state and dynamics noise from stream
/// `(seed, i)`, and the policy from a separate stream, so different policies
/// evaluated with one seed face the same start states.
pub fn evaluate_returns<E, P>(env: &E, mut policy: P, n_episodes: usize, seed: u64) -> Result<Vec<f64>>
where
    E: Environment + ?Sized,
    P: FnMut(&[f64], &mut StreamRng) -> Result<Vec<f64>>,
{
    if n_episodes == 0 {
        return Err(Error::param("evaluation needs at least one episode"));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes as u64 {
        let mut env_rng = rng::stream(seed, &[0x0065_6e76, ep]);
        let mut pol_rng = rng::stream(seed, &[0x0070_6f6c, ep]);
        let mut s = env.reset(&mut env_rng);
        let mut ret = 0.0;
        for _ in 0..env.horizon() {
            let a = policy(&s, &mut pol_rng)?;
            let step = env.step(&s, &a, &mut env_rng);
            ret += step.reward;
            s = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(ret);
    }
    Ok(returns)
}

fn behavior_action<E: Environment + ?Sized>(env: &E, b: Behavior, s: &[f64], rng: &mut StreamRng) -> Vec<f64> {
    match b {
        Behavior::Expert => env.expert_action(s, rng),
        Behavior::Random => env.random_action(rng),
    }
}

/// Reference returns computed from a fixed seed.
pub fn compute_references<E: Environment + ?Sized>(env: &E) -> References {
    let mean = |b: Behavior| {
        let r = evaluate_returns(env, |s, rng| Ok(behavior_action(env, b, s, rng)), REFERENCE_EPISODES, REFERENCE_SEED)
            .expect("reference rollouts are infallible");
        r.iter().sum::<f64>() / r.len() as f64
    };
    References { random: mean(Behavior::Random), expert: mean(Behavior::Expert) }
}

/// Offline dataset from scripted behaviour: episode `i` follows
/// `Expert` when `i < round(expert_fraction * n_episodes)`, else `Random`.
/// Horizon truncation does not set `done`.
pub fn generate_dataset<E: Environment + ?Sized>(
    env: &E,
    n_episodes: usize,
    expert_fraction: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(Error::param("dataset needs at least one episode"));
    }
    if !(0.0..=1.0).contains(&expert_fraction) {
        return Err(Error::param(format!("expert fraction must lie in [0, 1], got {expert_fraction}")));
    }
    let n_expert = (expert_fraction * n_episodes as f64).round() as usize;
    let mut records = Vec::new();
    let mut lengths = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let behavior = if ep < n_expert { Behavior::Expert } else { Behavior::Random };
        let mut r = rng::stream(seed, &[0x6461_7461, ep as u64]);
        let mut s = env.reset(&mut r);
        let mut len = 0;
        for _ in 0..env.horizon() {
            let a = behavior_action(env, behavior, &s, &mut r);
            let step = env.step(&s, &a, &mut r);
            records.push(TransitionRecord {
                state: s,
                action: a,
                reward: step.reward,
                next_state: step.next_state.clone(),
                done: step.done,
            });
            len += 1;
            s = step.next_state;
            if step.done {
                break;
            }
        }
        lengths.push(len);
    }
    let meta = DatasetMeta {
        description: format!("{} expert_fraction={expert_fraction} episodes={n_episodes}", env.name()),
        seed,
        episode_lengths: lengths,
    };
    OfflineDataset::new(env.state_dim(), env.action_dim(), false, records, meta)
}

fn reward_noise(sigma: f64, rng: &mut StreamRng) -> f64 {
    if sigma > 0.0 {
        sigma * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    }
}

fn check_common(horizon: usize, reward_noise: f64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::param("horizon must be >= 1"));
    }
    if !(reward_noise >= 0.0) || !reward_noise.is_finite() {
        return Err(Error::param(format!("reward noise must be finite and >= 0, got {reward_noise}")));
    }
    Ok(())
}

/// Point on a segment pushed toward a target.
///
/// `x' = clip(x + 0.2 a, -1, 1)`, reward `max(0, 1 - |x' - 0.5| / 0.5)` plus
/// optional Gaussian noise. Episodes start uniformly in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Push1d {
    horizon: usize,
    reward_noise: f64,
    refs: References,
}

pub const PUSH_TARGET: f64 = 0.5;
pub const PUSH_SPEED: f64 = 0.2;
const PUSH_WIDTH: f64 = 0.5;

impl Push1d {
    pub fn new(horizon: usize, reward_noise: f64) -> Result<Self> {
        check_common(horizon, reward_noise)?;
        let mut env = Self { horizon, reward_noise, refs: References { random: 0.0, expert: 1.0 } };
        env.refs = compute_references(&env);
        Ok(env)
    }

    pub fn clean_reward(x: f64) -> f64 {
        (1.0 - (x - PUSH_TARGET).abs() / PUSH_WIDTH).max(0.0)
    }
}

impl Environment for Push1d {
    fn name(&self) -> String {
        format!("push1d(h={}, noise={})", self.horizon, self.reward_noise)
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&self, rng: &mut StreamRng) -> Vec<f64> {
        vec![rng.random_range(-1.0..=1.0)]
    }
    fn step(&self, state: &[f64], action: &[f64], rng: &mut StreamRng) -> Step {
        let a = action[0].clamp(-1.0, 1.0);
        let x = (state[0] + PUSH_SPEED * a).clamp(-1.0, 1.0);
        Step { next_state: vec![x], reward: Self::clean_reward(x) + reward_noise(self.reward_noise, rng), done: false }
    }
    fn expert_action(&self, state: &[f64], _rng: &mut StreamRng) -> Vec<f64> {
        vec![((PUSH_TARGET - state[0]) / PUSH_SPEED).clamp(-1.0, 1.0)]
    }
    fn references(&self) -> References {
        self.refs
    }
}

/// Point in the square moved toward `(0.5, 0.5)`; the two-dimensional
/// analogue of [`Push1d`] with reward `max(0, 1 - ||x' - g|| / 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reach2d {
    horizon: usize,
    reward_noise: f64,
    refs: References,
}

impl Reach2d {
    pub fn new(horizon: usize, reward_noise: f64) -> Result<Self> {
        check_common(horizon, reward_noise)?;
        let mut env = Self { horizon, reward_noise, refs: References { random: 0.0, expert: 1.0 } };
        env.refs = compute_references(&env);
        Ok(env)
    }
}

impl Environment for Reach2d {
    fn name(&self) -> String {
        format!("reach2d(h={}, noise={})", self.horizon, self.reward_noise)
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&self, rng: &mut StreamRng) -> Vec<f64> {
        vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
    }
    fn step(&self, state: &[f64], action: &[f64], rng: &mut StreamRng) -> Step {
        let next: Vec<f64> =
            state.iter().zip(action).map(|(x, a)| (x + PUSH_SPEED * a.clamp(-1.0, 1.0)).clamp(-1.0, 1.0)).collect();
        let dist = next.iter().map(|x| (x - PUSH_TARGET).powi(2)).sum::<f64>().sqrt();
        let reward = (1.0 - dist / PUSH_WIDTH).max(0.0) + reward_noise(self.reward_noise, rng);
        Step { next_state: next, reward, done: false }
    }
    fn expert_action(&self, state: &[f64], _rng: &mut StreamRng) -> Vec<f64> {
        state.iter().map(|x| ((PUSH_TARGET - x) / PUSH_SPEED).clamp(-1.0, 1.0)).collect()
    }
    fn references(&self) -> References {
        self.refs
    }
}

/// Finite MDP seen through one-hot states and a scalar action in `[-1, 1]`
/// split into `n_actions` equal bins.
#[derive(Debug, Clone)]
pub struct VectorizedMdp {
    mdp: FiniteMdp,
    horizon: usize,
    expert: Vec<usize>,
    refs: References,
}

impl VectorizedMdp {
    pub fn new(mdp: FiniteMdp, horizon: usize) -> Result<Self> {
        check_common(horizon, 0.0)?;
        let q_star = fixed_point(&mdp, &UnderestimateConfig::scaling(1.0), 1e-10, 100_000)?.q;
        let expert = (0..mdp.n_states())
            .map(|s| {
                let row = q_star.row(s);
                // lowest index among ties
                (0..row.len()).fold(0, |best, a| if row[a] > row[best] { a } else { best })
            })
            .collect();
        let mut env = Self { mdp, horizon, expert, refs: References { random: 0.0, expert: 1.0 } };
        env.refs = compute_references(&env);
        Ok(env)
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn action_index(&self, a: f64) -> usize {
        let n = self.mdp.n_actions();
        (((a.clamp(-1.0, 1.0) + 1.0) / 2.0 * n as f64) as usize).min(n - 1)
    }

    /// Centre of the bin of action `index`.
    pub fn action_value(&self, index: usize) -> f64 {
        let n = self.mdp.n_actions() as f64;
        -1.0 + (2.0 * index as f64 + 1.0) / n
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[s] = 1.0;
        v
    }

    pub fn state_index(&self, state: &[f64]) -> usize {
        (0..state.len()).fold(0, |best, i| if state[i] > state[best] { i } else { best })
    }
}

fn sample_index(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Environment for VectorizedMdp {
    fn name(&self) -> String {
        format!("mdp({}x{}, h={})", self.mdp.n_states(), self.mdp.n_actions(), self.horizon)
    }
    fn state_dim(&self) -> usize {
        self.mdp.n_states()
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn reset(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.one_hot(sample_index(self.mdp.initial_distribution(), rng))
    }
    fn step(&self, state: &[f64], action: &[f64], rng: &mut StreamRng) -> Step {
        let s = self.state_index(state);
        let a = self.action_index(action[0]);
        let next = sample_index(self.mdp.transition_row(s, a), rng);
        Step { next_state: self.one_hot(next), reward: self.mdp.reward(s, a), done: self.mdp.is_terminal(next) }
    }
    fn expert_action(&self, state: &[f64], _rng: &mut StreamRng) -> Vec<f64> {
        vec![self.action_value(self.expert[self.state_index(state)])]
    }
    fn references(&self) -> References {
        self.refs
    }
}

/// Shipped task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Push1d,
    Reach2d,
    Mdp,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "push1d" => Ok(EnvKind::Push1d),
            "reach2d" => Ok(EnvKind::Reach2d),
            "mdp" => Ok(EnvKind::Mdp),
            other => Err(Error::param(format!("unknown environment `{other}` (push1d, reach2d, mdp)"))),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Push1d => "push1d",
            EnvKind::Reach2d => "reach2d",
            EnvKind::Mdp => "mdp",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_mdp::random_mdp;

    #[test]
    fn push_expert_reaches_target() {
        let env = Push1d::new(20, 0.0).unwrap();
        let mut r = rng::stream(0, &[]);
        let mut s = vec![-1.0];
        for _ in 0..8 {
            let a = env.expert_action(&s, &mut r);
            s = env.step(&s, &a, &mut r).next_state;
        }
        assert!((s[0] - PUSH_TARGET).abs() < 1e-12);
        let refs = env.references();
        assert!(refs.expert > refs.random + 5.0, "{refs:?}");
    }

    #[test]
    fn references_normalize_to_0_and_100() {
        let env = Push1d::new(20, 0.0).unwrap();
        let refs = env.references();
        assert!((refs.normalize(refs.random)).abs() < 1e-12);
        assert!((refs.normalize(refs.expert) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_split_and_truncation() {
        let env = Push1d::new(5, 0.0).unwrap();
        let d = generate_dataset(&env, 4, 0.5, 3).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.meta.episode_lengths, vec![5; 4]);
        assert!(d.records().iter().all(|r| !r.done));
        assert_eq!(d, generate_dataset(&env, 4, 0.5, 3).unwrap());
        assert!(generate_dataset(&env, 0, 0.5, 3).is_err());
        assert!(generate_dataset(&env, 2, 1.5, 3).is_err());
    }

    #[test]
    fn vectorized_mdp_bins() {
        let env = VectorizedMdp::new(random_mdp(3, 4, 1, 1.0).unwrap(), 10).unwrap();
        for a in 0..4 {
            assert_eq!(env.action_index(env.action_value(a)), a);
        }
        assert_eq!(env.action_index(1.0), 3);
        assert_eq!(env.action_index(-1.0), 0);
        assert_eq!(env.state_index(&env.one_hot(2)), 2);
    }

    #[test]
    fn reach_expert_beats_random() {
        let env = Reach2d::new(20, 0.0).unwrap();
        let refs = env.references();
        assert!(refs.expert > refs.random + 5.0, "{refs:?}");
    }
}
