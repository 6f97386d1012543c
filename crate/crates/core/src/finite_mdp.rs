//! Tabular MDPs, value tables, behaviour policies and offline rollouts.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::Exp1;

use crate::dataset::{DatasetMeta, OfflineDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::rng;

const ROW_TOL: f64 = 1e-9;

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::param(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::param(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// A finite MDP `<S, A, P, r, rho0, gamma>` with an optional terminal mask.
///
/// Transitions into a terminal state end the episode: its value is never
/// bootstrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
    initial: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        discount: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::param("an MDP needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || initial.len() != n_states
            || terminal.len() != n_states
        {
            return Err(Error::Shape("MDP arrays do not match (n_states, n_actions)".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::param(format!("discount must lie in (0, 1), got {discount}")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::param("rewards must be finite"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        check_distribution(&initial, "initial distribution")?;
        Ok(Self { n_states, n_actions, transition, reward, initial, discount, terminal })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Largest absolute reward.
    pub fn reward_bound(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::param(format!("discount must lie in (0, 1), got {discount}")));
        }
        self.discount = discount;
        Ok(self)
    }

    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != self.n_states {
            return Err(Error::Shape("terminal mask length".into()));
        }
        self.terminal = terminal;
        Ok(self)
    }

    /// Expected bootstrap value `sum_{s'} P(s'|s,a) (1 - term(s')) v(s')`.
    pub fn expected_next(&self, s: usize, a: usize, next_values: &[f64]) -> f64 {
        self.transition_row(s, a)
            .iter()
            .zip(next_values)
            .zip(&self.terminal)
            .filter(|(_, &term)| !term)
            .map(|((p, v), _)| p * v)
            .sum()
    }
}

/// Random MDP with `ceil(sparsity * n_states)` reachable successors per
/// `(s, a)`, Dirichlet(1) transition weights and rewards uniform in `[0, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, seed: u64, sparsity: f64) -> Result<FiniteMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::param("random_mdp needs n_states, n_actions >= 1"));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::param(format!("sparsity must lie in (0, 1], got {sparsity}")));
    }
    let mut rng = rng::stream(seed, &[0x006d_6470]);
    let support = ((sparsity * n_states as f64).ceil() as usize).clamp(1, n_states);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states) {
        let idx = sample_indices(&mut rng, n_states, support);
        let draws: Vec<f64> = idx.iter().map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = draws.iter().sum();
        for (i, d) in idx.iter().zip(&draws) {
            row[i] = d / total;
        }
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    let initial = vec![1.0 / n_states as f64; n_states];
    FiniteMdp::new(n_states, n_actions, transition, reward, initial, 0.9, vec![false; n_states])
}

/// A one-state, one-action MDP paying `reward` forever.
pub fn single_state_mdp(reward: f64, discount: f64) -> Result<FiniteMdp> {
    FiniteMdp::new(1, 1, vec![1.0], vec![reward], vec![1.0], discount, vec![false])
}

/// Deterministic chain: action 1 advances one state, action 0 returns to the
/// start; advancing in the last state pays 1 and stays there.
pub fn chain_mdp(n_states: usize, discount: f64) -> Result<FiniteMdp> {
    if n_states < 2 {
        return Err(Error::param("chain needs at least two states"));
    }
    let mut transition = vec![0.0; n_states * 2 * n_states];
    let mut reward = vec![0.0; n_states * 2];
    for s in 0..n_states {
        transition[(s * 2) * n_states] = 1.0;
        let next = (s + 1).min(n_states - 1);
        transition[(s * 2 + 1) * n_states + next] = 1.0;
        if s == n_states - 1 {
            reward[s * 2 + 1] = 1.0;
        }
    }
    let mut initial = vec![0.0; n_states];
    initial[0] = 1.0;
    FiniteMdp::new(n_states, 2, transition, reward, initial, discount, vec![false; n_states])
}

/// Dense action-value table indexed by `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::filled(n_states, n_actions, 0.0)
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        Self { n_states, n_actions, values: vec![value; n_states * n_actions] }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::Shape(format!("{} values for a {n_states}x{n_actions} table", values.len())));
        }
        Ok(Self { n_states, n_actions, values })
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = (0..n_states * n_actions).map(|i| f(i / n_actions, i % n_actions)).collect();
        Self { n_states, n_actions, values }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn greedy_values(&self) -> VTable {
        VTable((0..self.n_states).map(|s| self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
    }

    /// Sup-norm distance; tables must share a shape.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> QTable {
        QTable { values: self.values.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn zip_map(&self, other: &QTable, f: impl Fn(f64, f64) -> f64) -> QTable {
        QTable { values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(), ..*self }
    }
}

/// State-value table.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable(pub Vec<f64>);

/// Row-stochastic tabular policy `pi(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::Shape("policy table shape".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// Greedy in `q`, ties broken towards the lowest action index.
    pub fn greedy(q: &QTable) -> Self {
        let (ns, na) = (q.n_states(), q.n_actions());
        let mut probs = vec![0.0; ns * na];
        for s in 0..ns {
            let best = (0..na).fold(0, |b, a| if q.get(s, a) > q.get(s, b) { a } else { b });
            probs[s * na + best] = 1.0;
        }
        Self { n_states: ns, n_actions: na, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    fn check_fits(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Shape("policy does not match the MDP".into()));
        }
        Ok(())
    }
}

/// Rolls out `policy` for `n_episodes` episodes of at most `horizon` steps.
///
/// Every episode draws from its own seeded stream, so episodes are
/// reproducible independently of each other.
pub fn rollout(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    horizon: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    policy.check_fits(mdp)?;
    if horizon == 0 || n_episodes == 0 {
        return Err(Error::param("rollout needs horizon >= 1 and n_episodes >= 1"));
    }
    let n = mdp.n_states();
    let initial = WeightedIndex::new(mdp.initial_distribution()).map_err(|e| Error::param(e.to_string()))?;
    let mut records = Vec::new();
    let mut lengths = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let mut rng = rng::stream(seed, &[ep as u64]);
        let mut s = initial.sample(&mut rng);
        let mut len = 0;
        for _ in 0..horizon {
            let a = sample_row(policy.row(s), &mut rng);
            let s_next = sample_row(mdp.transition_row(s, a), &mut rng);
            let done = mdp.is_terminal(s_next);
            records.push(TransitionRecord::discrete(s, a, mdp.reward(s, a), s_next, done));
            len += 1;
            if done {
                break;
            }
            s = s_next;
        }
        lengths.push(len);
    }
    let meta = DatasetMeta {
        description: format!("finite-mdp rollout: {n} states, horizon {horizon}, {n_episodes} episodes"),
        seed,
        episode_lengths: lengths,
    };
    OfflineDataset::new(1, 1, true, records, meta)
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Iterates `Q <- r + gamma E_{s'} E_{a' ~ pi} Q(s', a')` until successive
/// iterates differ by less than `tol` in sup-norm.
pub fn policy_evaluation(mdp: &FiniteMdp, policy: &TabularPolicy, tol: f64) -> Result<QTable> {
    policy.check_fits(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::param("tolerance must be > 0"));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = QTable::zeros(ns, na);
    let max_iters = 1_000_000;
    for _ in 0..max_iters {
        let v: Vec<f64> = (0..ns).map(|s| policy.row(s).iter().zip(q.row(s)).map(|(p, q)| p * q).sum()).collect();
        let next = QTable::from_fn(ns, na, |s, a| mdp.reward(s, a) + mdp.discount() * mdp.expected_next(s, a, &v));
        let diff = next.sup_distance(&q);
        q = next;
        if diff < tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence { iterations: max_iters, residual: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_random_mdp_is_a_self_loop() {
        let m = random_mdp(1, 1, 3, 1.0).unwrap();
        assert_eq!(m.transition_row(0, 0), &[1.0]);
    }

    #[test]
    fn random_mdp_is_seed_deterministic() {
        assert_eq!(random_mdp(5, 3, 7, 0.5).unwrap(), random_mdp(5, 3, 7, 0.5).unwrap());
        assert_ne!(random_mdp(5, 3, 7, 0.5).unwrap(), random_mdp(5, 3, 8, 0.5).unwrap());
    }

    #[test]
    fn random_mdp_rows_are_distributions() {
        let m = random_mdp(50, 4, 123, 1.0).unwrap();
        for s in 0..50 {
            for a in 0..4 {
                let row = m.transition_row(s, a);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((0.0..=1.0).contains(&m.reward(s, a)));
            }
        }
        let sparse = random_mdp(10, 2, 1, 0.3).unwrap();
        assert!(sparse.transition_row(0, 0).iter().filter(|&&p| p > 0.0).count() <= 3);
    }

    #[test]
    fn random_mdp_rejects_degenerate_sizes() {
        assert!(random_mdp(0, 2, 1, 1.0).is_err());
        assert!(random_mdp(2, 0, 1, 1.0).is_err());
        assert!(random_mdp(2, 2, 1, 0.0).is_err());
    }

    #[test]
    fn mdp_validation() {
        assert!(FiniteMdp::new(1, 1, vec![0.5], vec![0.0], vec![1.0], 0.9, vec![false]).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 1.0, vec![false]).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![f64::NAN], vec![1.0], 0.5, vec![false]).is_err());
    }

    #[test]
    fn rollout_on_single_state() {
        let m = single_state_mdp(1.0, 0.5).unwrap();
        let ds = rollout(&m, &TabularPolicy::uniform(1, 1), 3, 2, 0).unwrap();
        assert_eq!(ds.len(), 6);
        assert!(ds.records().iter().all(|r| r.state_index() == 0 && r.next_state_index() == 0 && !r.done));
        assert_eq!(ds.meta.episode_lengths, vec![3, 3]);
    }

    #[test]
    fn rollout_stops_at_terminal() {
        let m = chain_mdp(3, 0.9).unwrap().with_terminal(vec![false, false, true]).unwrap();
        let always_advance = TabularPolicy::new(3, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let ds = rollout(&m, &always_advance, 10, 1, 0).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.records()[1].done);
    }

    #[test]
    fn rollout_rejects_bad_policy() {
        let m = chain_mdp(3, 0.9).unwrap();
        assert!(TabularPolicy::new(3, 2, vec![0.5; 6]).is_ok());
        assert!(TabularPolicy::new(3, 2, vec![0.6; 6]).is_err());
        assert!(rollout(&m, &TabularPolicy::uniform(2, 2), 3, 1, 0).is_err());
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let m = random_mdp(6, 3, 2, 0.5).unwrap();
        let p = TabularPolicy::uniform(6, 3);
        let a = rollout(&m, &p, 20, 5, 11).unwrap().to_text();
        let b = rollout(&m, &p, 20, 5, 11).unwrap().to_text();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn geometric_series() {
        let m = single_state_mdp(1.0, 0.5).unwrap();
        let q = policy_evaluation(&m, &TabularPolicy::uniform(1, 1), 1e-12).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-11);
    }

    #[test]
    fn evaluation_tolerances_are_consistent() {
        let m = random_mdp(5, 3, 4, 1.0).unwrap();
        let p = TabularPolicy::uniform(5, 3);
        let fine = policy_evaluation(&m, &p, 1e-10).unwrap();
        let coarse = policy_evaluation(&m, &p, 1e-8).unwrap();
        assert!(fine.sup_distance(&coarse) < 1e-7);
    }

    #[test]
    fn greedy_policy_breaks_ties_low() {
        let q = QTable::from_vec(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let p = TabularPolicy::greedy(&q);
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 1.0, 0.0]);
    }
}
