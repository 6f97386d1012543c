//! Agent and task configuration, named presets and the flat `key=value`
//! representation used by configuration files and run snapshots.

use super::env::EnvKind;
use crate::diffusion::{ActorLossWeights, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::expectile::TdConvention;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Expectile levels of the two critics, read under `tau_convention`.
    pub tau_q1: f64,
    pub tau_q2: f64,
    pub tau_convention: TdConvention,
    pub lr: f64,
    pub eta: f64,
    pub zeta: f64,
    /// Global gradient-norm limit; `<= 0` disables clipping.
    pub grad_norm: f64,
    pub n_epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub max_q_backup: bool,
    pub k_backup_samples: usize,
    pub rho: f64,
    pub gamma: f64,
    pub eval_interval_epochs: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            tau_q1: 0.9,
            tau_q2: 0.8,
            tau_convention: TdConvention::Literal,
            lr: 3e-4,
            eta: 1.0,
            zeta: 1.0,
            grad_norm: 100.0,
            n_epochs: 50,
            iters_per_epoch: 200,
            batch_size: 256,
            max_q_backup: false,
            k_backup_samples: 10,
            rho: 0.995,
            gamma: 0.99,
            eval_interval_epochs: 10,
            eval_episodes: 10,
            seed: 0,
            hidden: vec![64, 64, 64],
            diffusion_steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl AgentConfig {
    /// Over-prediction weights `(q1, q2)` used by the critic losses.
    pub fn literal_taus(&self) -> (f64, f64) {
        (self.tau_convention.to_literal(self.tau_q1), self.tau_convention.to_literal(self.tau_q2))
    }

    pub fn actor_weights(&self) -> Result<ActorLossWeights> {
        ActorLossWeights::new(self.eta, self.zeta)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_q1", self.tau_q1), ("tau_q2", self.tau_q2)] {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::param(format!("{name} must lie in (0, 1), got {tau}")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param(format!("lr must be positive, got {}", self.lr)));
        }
        self.actor_weights()?;
        if self.n_epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::param("n_epochs, iters_per_epoch and batch_size must be >= 1"));
        }
        if self.max_q_backup && self.k_backup_samples == 0 {
            return Err(Error::param("k_backup_samples must be >= 1 with max_q_backup"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::param(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.eval_interval_epochs == 0 || self.eval_episodes == 0 {
            return Err(Error::param("eval_interval_epochs and eval_episodes must be >= 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("hidden layer widths must be >= 1"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::param("diffusion_steps must be >= 1"));
        }
        crate::diffusion::make_schedule(self.diffusion_steps, self.beta_min, self.beta_max)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub env: EnvKind,
    pub horizon: usize,
    pub reward_noise: f64,
    pub dataset_episodes: usize,
    pub expert_fraction: f64,
    pub dataset_seed: u64,
    pub mdp_states: usize,
    pub mdp_actions: usize,
    pub mdp_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Push1d,
            horizon: 20,
            reward_noise: 0.0,
            dataset_episodes: 200,
            expert_fraction: 0.5,
            dataset_seed: 0,
            mdp_states: 2,
            mdp_actions: 1,
            mdp_seed: 0,
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub agent: AgentConfig,
    pub task: TaskConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::param(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::param(format!("cannot parse `{value}` for key `{key}` as a boolean"))),
    }
}

fn convention_name(c: TdConvention) -> &'static str {
    match c {
        TdConvention::Literal => "literal",
        TdConvention::UnderestimateIql => "iql",
    }
}

impl ExperimentConfig {
    /// Every recognised key, in snapshot order.
    pub const KEYS: &'static [&'static str] = &[
        "env",
        "horizon",
        "reward_noise",
        "dataset_episodes",
        "expert_fraction",
        "dataset_seed",
        "mdp_states",
        "mdp_actions",
        "mdp_seed",
        "tau_q1",
        "tau_q2",
        "tau_convention",
        "lr",
        "eta",
        "zeta",
        "grad_norm",
        "n_epochs",
        "iters_per_epoch",
        "batch_size",
        "max_q_backup",
        "k_backup_samples",
        "rho",
        "gamma",
        "eval_interval_epochs",
        "eval_episodes",
        "seed",
        "hidden",
        "diffusion_steps",
        "beta_min",
        "beta_max",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (a, t) = (&mut self.agent, &mut self.task);
        match key {
            "env" => t.env = value.trim().parse()?,
            "horizon" => t.horizon = parse(key, value)?,
            "reward_noise" => t.reward_noise = parse(key, value)?,
            "dataset_episodes" => t.dataset_episodes = parse(key, value)?,
            "expert_fraction" => t.expert_fraction = parse(key, value)?,
            "dataset_seed" => t.dataset_seed = parse(key, value)?,
            "mdp_states" => t.mdp_states = parse(key, value)?,
            "mdp_actions" => t.mdp_actions = parse(key, value)?,
            "mdp_seed" => t.mdp_seed = parse(key, value)?,
            "tau_q1" => a.tau_q1 = parse(key, value)?,
            "tau_q2" => a.tau_q2 = parse(key, value)?,
            "tau_convention" => {
                a.tau_convention = match value.trim() {
                    "literal" => TdConvention::Literal,
                    "iql" => TdConvention::UnderestimateIql,
                    other => {
                        return Err(Error::param(format!("tau_convention must be `literal` or `iql`, got `{other}`")))
                    }
                }
            }
            "lr" => a.lr = parse(key, value)?,
            "eta" => a.eta = parse(key, value)?,
            "zeta" => a.zeta = parse(key, value)?,
            "grad_norm" => a.grad_norm = parse(key, value)?,
            "n_epochs" => a.n_epochs = parse(key, value)?,
            "iters_per_epoch" => a.iters_per_epoch = parse(key, value)?,
            "batch_size" => a.batch_size = parse(key, value)?,
            "max_q_backup" => a.max_q_backup = parse_bool(key, value)?,
            "k_backup_samples" => a.k_backup_samples = parse(key, value)?,
            "rho" => a.rho = parse(key, value)?,
            "gamma" => a.gamma = parse(key, value)?,
            "eval_interval_epochs" => a.eval_interval_epochs = parse(key, value)?,
            "eval_episodes" => a.eval_episodes = parse(key, value)?,
            "seed" => a.seed = parse(key, value)?,
            "hidden" => a.hidden = value.split(',').map(|w| parse::<usize>(key, w)).collect::<Result<Vec<_>>>()?,
            "diffusion_steps" => a.diffusion_steps = parse(key, value)?,
            "beta_min" => a.beta_min = parse(key, value)?,
            "beta_max" => a.beta_max = parse(key, value)?,
            other => return Err(Error::param(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (a, t) = (&self.agent, &self.task);
        Ok(match key {
            "env" => t.env.to_string(),
            "horizon" => t.horizon.to_string(),
            "reward_noise" => t.reward_noise.to_string(),
            "dataset_episodes" => t.dataset_episodes.to_string(),
            "expert_fraction" => t.expert_fraction.to_string(),
            "dataset_seed" => t.dataset_seed.to_string(),
            "mdp_states" => t.mdp_states.to_string(),
            "mdp_actions" => t.mdp_actions.to_string(),
            "mdp_seed" => t.mdp_seed.to_string(),
            "tau_q1" => a.tau_q1.to_string(),
            "tau_q2" => a.tau_q2.to_string(),
            "tau_convention" => convention_name(a.tau_convention).to_string(),
            "lr" => a.lr.to_string(),
            "eta" => a.eta.to_string(),
            "zeta" => a.zeta.to_string(),
            "grad_norm" => a.grad_norm.to_string(),
            "n_epochs" => a.n_epochs.to_string(),
            "iters_per_epoch" => a.iters_per_epoch.to_string(),
            "batch_size" => a.batch_size.to_string(),
            "max_q_backup" => a.max_q_backup.to_string(),
            "k_backup_samples" => a.k_backup_samples.to_string(),
            "rho" => a.rho.to_string(),
            "gamma" => a.gamma.to_string(),
            "eval_interval_epochs" => a.eval_interval_epochs.to_string(),
            "eval_episodes" => a.eval_episodes.to_string(),
            "seed" => a.seed.to_string(),
            "hidden" => a.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "diffusion_steps" => a.diffusion_steps.to_string(),
            "beta_min" => a.beta_min.to_string(),
            "beta_max" => a.beta_max.to_string(),
            other => return Err(Error::param(format!("unknown configuration key `{other}`"))),
        })
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got `{line}`") })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    /// Resolved configuration as `key=value` lines, followed by the
    /// over-prediction weights the critics actually use.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.preset {
            out.push_str(&format!("# preset {p}\n"));
        }
        for k in Self::KEYS {
            out.push_str(&format!("{k}={}\n", self.get(k).expect("listed keys resolve")));
        }
        let (l1, l2) = self.agent.literal_taus();
        out.push_str(&format!("# over-prediction weights: q1={l1} q2={l2}\n"));
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        let t = &self.task;
        if t.horizon == 0 || t.dataset_episodes == 0 {
            return Err(Error::param("horizon and dataset_episodes must be >= 1"));
        }
        if !(0.0..=1.0).contains(&t.expert_fraction) {
            return Err(Error::param("expert_fraction must lie in [0, 1]"));
        }
        if !(t.reward_noise >= 0.0) {
            return Err(Error::param("reward_noise must be >= 0"));
        }
        if t.env == EnvKind::Mdp && (t.mdp_states == 0 || t.mdp_actions == 0) {
            return Err(Error::param("mdp_states and mdp_actions must be >= 1"));
        }
        Ok(())
    }
}

/// Published hyperparameters for one D4RL task. The expectile levels are in
/// the IQL reading, where values below one half underestimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkRow {
    pub name: &'static str,
    pub tau_q1: f64,
    pub tau_q2: f64,
    pub lr: f64,
    pub eta: f64,
    pub zeta: f64,
    pub grad_norm: f64,
    pub n_epochs: usize,
    pub max_q_backup: bool,
    pub batch_size: usize,
}

const fn row(
    name: &'static str,
    tau_q1: f64,
    tau_q2: f64,
    lr: f64,
    eta: f64,
    zeta: f64,
    grad_norm: f64,
    n_epochs: usize,
    max_q_backup: bool,
) -> BenchmarkRow {
    BenchmarkRow { name, tau_q1, tau_q2, lr, eta, zeta, grad_norm, n_epochs, max_q_backup, batch_size: 256 }
}

pub const BENCHMARK_ROWS: &[BenchmarkRow] = &[
    row("halfcheetah-medium-v2", 0.1, 0.2, 3e-4, 1.0, 0.005, 100.0, 2000, false),
    row("hopper-medium-v2", 0.1, 0.2, 3e-4, 1.0, 0.5, 100.0, 2000, false),
    row("walker2d-medium-v2", 0.1, 0.2, 3e-4, 1.0, 0.2, 100.0, 2000, false),
    row("halfcheetah-medium-replay-v2", 0.1, 0.2, 3e-4, 1.0, 0.005, 2.0, 2000, false),
    row("hopper-medium-replay-v2", 0.1, 0.2, 3e-4, 1.0, 0.1, 10.0, 2000, false),
    row("walker2d-medium-replay-v2", 0.1, 0.2, 3e-4, 1.0, 0.1, 4.0, 2000, false),
    row("halfcheetah-medium-expert-v2", 0.1, 0.2, 3e-4, 1.0, 1.0, 7.0, 2000, false),
    row("hopper-medium-expert-v2", 0.1, 0.2, 3e-4, 1.0, 1.0, 100.0, 2000, false),
    row("walker2d-medium-expert-v2", 0.1, 0.2, 3e-4, 1.0, 1.0, 5.0, 2000, false),
    row("antmaze-umaze-v0", 0.2, 0.3, 3e-4, 0.5, 1.0, 10.0, 1000, true),
    row("antmaze-umaze-diverse-v0", 0.2, 0.3, 3e-4, 2.0, 1.0, 3.0, 1000, true),
    row("pen-human-v1", 0.2, 0.3, 6e-5, 0.1, 1.0, 50.0, 1000, true),
    row("pen-cloned-v1", 0.2, 0.3, 3e-5, 0.01, 1.0, 0.0, 1000, true),
    row("kitchen-complete-v0", 0.2, 0.3, 3e-4, 0.005, 1.0, 9.0, 1000, false),
    row("kitchen-partial-v0", 0.2, 0.3, 3e-4, 0.005, 1.0, 100.0, 1000, false),
    row("kitchen-mixed-v0", 0.2, 0.3, 3e-4, 0.005, 1.0, 100.0, 1000, false),
];

/// Names of the small presets that run on the shipped toy tasks.
pub const DESK_PRESETS: &[&str] =
    &["push1d-mixed", "push1d-probe-mse", "push1d-probe-expectile", "reach2d-mixed", "mdp-vector"];

fn desk_push() -> ExperimentConfig {
    let agent = AgentConfig {
        tau_q1: 0.1,
        tau_q2: 0.2,
        tau_convention: TdConvention::UnderestimateIql,
        lr: 1e-3,
        eta: 3.0,
        zeta: 1.0,
        grad_norm: 10.0,
        n_epochs: 50,
        iters_per_epoch: 200,
        batch_size: 128,
        gamma: 0.9,
        rho: 0.99,
        eval_interval_epochs: 2,
        eval_episodes: 20,
        hidden: vec![32, 32, 32],
        ..AgentConfig::default()
    };
    let task = TaskConfig { env: EnvKind::Push1d, horizon: 20, dataset_episodes: 200, ..TaskConfig::default() };
    ExperimentConfig { preset: None, agent, task }
}

/// Looks up a benchmark row or a desk preset by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    if let Some(r) = BENCHMARK_ROWS.iter().find(|r| r.name == name) {
        let agent = AgentConfig {
            tau_q1: r.tau_q1,
            tau_q2: r.tau_q2,
            tau_convention: TdConvention::UnderestimateIql,
            lr: r.lr,
            eta: r.eta,
            zeta: r.zeta,
            grad_norm: r.grad_norm,
            n_epochs: r.n_epochs,
            iters_per_epoch: 1000,
            batch_size: r.batch_size,
            max_q_backup: r.max_q_backup,
            eval_interval_epochs: 50,
            hidden: vec![256, 256, 256],
            ..AgentConfig::default()
        };
        return Ok(ExperimentConfig { preset: Some(name.to_string()), agent, task: TaskConfig::default() });
    }
    let mut cfg = match name {
        "push1d-mixed" => desk_push(),
        "push1d-probe-mse" | "push1d-probe-expectile" => {
            let mut c = desk_push();
            c.task.reward_noise = 1.0;
            c.task.dataset_episodes = 50;
            c.agent.max_q_backup = true;
            c.agent.eta = 0.3;
            c.agent.rho = 0.95;
            c.agent.n_epochs = 15;
            let tau = if name == "push1d-probe-mse" { 0.5 } else { 0.47 };
            c.agent.tau_q1 = tau;
            c.agent.tau_q2 = tau;
            c
        }
        "reach2d-mixed" => {
            let mut c = desk_push();
            c.task.env = EnvKind::Reach2d;
            c
        }
        "mdp-vector" => {
            let mut c = desk_push();
            c.task.env = EnvKind::Mdp;
            c.task.mdp_states = 2;
            c.task.mdp_actions = 1;
            c.task.horizon = 20;
            c
        }
        other => return Err(Error::param(format!("unknown preset `{other}`"))),
    };
    cfg.preset = Some(name.to_string());
    Ok(cfg)
}

pub fn preset_names() -> Vec<&'static str> {
    BENCHMARK_ROWS.iter().map(|r| r.name).chain(DESK_PRESETS.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_values_load() {
        let c = preset("halfcheetah-medium-v2").unwrap();
        assert_eq!(c.agent.lr, 3e-4);
        assert_eq!(c.agent.zeta, 0.005);
        assert_eq!(c.agent.grad_norm, 100.0);
        assert_eq!((c.agent.tau_q1, c.agent.tau_q2), (0.1, 0.2));
        let (l1, l2) = c.agent.literal_taus();
        assert!((l1 - 0.9).abs() < 1e-12 && (l2 - 0.8).abs() < 1e-12);
        assert_eq!(preset("antmaze-umaze-diverse-v0").unwrap().agent.eta, 2.0);
        assert!(preset("antmaze-umaze-v0").unwrap().agent.max_q_backup);
        for name in preset_names() {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn key_value_round_trip() {
        let mut c = preset("push1d-mixed").unwrap();
        c.apply_text("# comment\nseed = 5\nhidden=8,8\nmax_q_backup=true\ntau_convention=iql\n").unwrap();
        assert_eq!(c.agent.seed, 5);
        assert_eq!(c.agent.hidden, vec![8, 8]);
        let mut back = ExperimentConfig { preset: c.preset.clone(), ..ExperimentConfig::default() };
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("learning_rate", "1").is_err());
        assert!(c.apply_text("lr 3").is_err());
        assert!(c.set("lr", "fast").is_err());
        assert!(preset("nope").is_err());
    }

    #[test]
    fn both_actor_weights_zero_rejected() {
        let mut c = AgentConfig::default();
        c.eta = 0.0;
        c.zeta = 0.0;
        assert!(c.validate().is_err());
    }
}
