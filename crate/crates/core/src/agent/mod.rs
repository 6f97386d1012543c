//! Offline actor-critic training: two expectile critics with Polyak target
//! copies, a diffusion actor with its own target copy, periodic evaluation
//! with best-checkpoint retention, and an overestimation probe.

pub mod config;
pub mod env;

use rand::seq::index;
use rand::Rng;

pub use config::{
    preset, preset_names, AgentConfig, BenchmarkRow, ExperimentConfig, TaskConfig, BENCHMARK_ROWS, DESK_PRESETS,
};
pub use env::{
    compute_references, evaluate_returns, generate_dataset, Behavior, EnvKind, Environment, Push1d, Reach2d,
    References, Step, VectorizedMdp,
};

use crate::approx::{
    opt_step, polyak_update, Activation, AdamConfig, Batch, Checkpoint, GradClip, Mlp, MlpSpec, OptimState,
};
use crate::dataset::{OfflineDataset, TransitionRecord};
use crate::diffusion::{
    actor_loss, make_schedule, sample_action, sample_actions, ActionCritic, ChainNoise, DenoiseNoise,
    DiffusionSchedule, PolicyNet,
};
use crate::error::{Error, Result};
use crate::expectile::td_expectile_residual;
use crate::finite_mdp::random_mdp;
use crate::rng::{self, StreamRng};

/// Builds the environment a task configuration describes.
pub fn make_env(task: &TaskConfig) -> Result<Box<dyn Environment>> {
    Ok(match task.env {
        EnvKind::Push1d => Box::new(Push1d::new(task.horizon, task.reward_noise)?),
        EnvKind::Reach2d => Box::new(Reach2d::new(task.horizon, task.reward_noise)?),
        EnvKind::Mdp => {
            let mdp = random_mdp(task.mdp_states, task.mdp_actions, task.mdp_seed, 1.0)?;
            Box::new(VectorizedMdp::new(mdp, task.horizon)?)
        }
    })
}

/// Columns of a sampled minibatch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub states: Batch,
    pub actions: Batch,
    pub rewards: Vec<f64>,
    pub next_states: Batch,
    pub dones: Vec<bool>,
}

impl TrainBatch {
    pub fn from_records(records: &[&TransitionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let rows =
            |f: fn(&TransitionRecord) -> &[f64]| Batch::from_rows(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
        Ok(Self {
            states: rows(|r| &r.state)?,
            actions: rows(|r| &r.action)?,
            rewards: records.iter().map(|r| r.reward).collect(),
            next_states: rows(|r| &r.next_state)?,
            dones: records.iter().map(|r| r.done).collect(),
        })
    }

    pub fn sample(dataset: &OfflineDataset, size: usize, rng: &mut StreamRng) -> Result<Self> {
        let recs = dataset.records();
        let picked: Vec<&TransitionRecord> = (0..size).map(|_| &recs[rng.random_range(0..recs.len())]).collect();
        Self::from_records(&picked)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn critic_values(q: &Mlp, states: &Batch, actions: &Batch) -> Result<Vec<f64>> {
    let x = Batch::hconcat(&[states, actions])?;
    Ok(q.forward(&x)?.data().to_vec())
}

/// Elementwise minimum of two critics, as seen by the actor.
pub struct CriticMin<'a> {
    pub q1: &'a Mlp,
    pub q2: &'a Mlp,
}

impl CriticMin<'_> {
    pub fn values(&self, states: &Batch, actions: &Batch) -> Result<Vec<f64>> {
        let v1 = critic_values(self.q1, states, actions)?;
        let v2 = critic_values(self.q2, states, actions)?;
        Ok(v1.iter().zip(&v2).map(|(a, b)| a.min(*b)).collect())
    }
}

impl ActionCritic for CriticMin<'_> {
    fn value_and_action_grad(&self, states: &Batch, actions: &Batch) -> Result<(Vec<f64>, Batch)> {
        let x = Batch::hconcat(&[states, actions])?;
        let t1 = self.q1.forward_trace(&x)?;
        let t2 = self.q2.forward_trace(&x)?;
        let rows = x.rows();
        let (mut up1, mut up2) = (Batch::zeros(rows, 1), Batch::zeros(rows, 1));
        let mut values = Vec::with_capacity(rows);
        for r in 0..rows {
            let (a, b) = (t1.output().get(r, 0), t2.output().get(r, 0));
            if a <= b {
                up1.set(r, 0, 1.0);
                values.push(a);
            } else {
                up2.set(r, 0, 1.0);
                values.push(b);
            }
        }
        let g1 = self.q1.backward(&t1, &up1)?;
        let g2 = self.q2.backward(&t2, &up2)?;
        let sd = states.cols();
        let mut grad = Batch::zeros(rows, actions.cols());
        for r in 0..rows {
            for (c, out) in grad.row_mut(r).iter_mut().enumerate() {
                *out = g1.input.get(r, sd + c) + g2.input.get(r, sd + c);
            }
        }
        Ok((values, grad))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CriticStats {
    pub loss_q1: f64,
    pub loss_q2: f64,
    pub mean_q: f64,
    pub mean_target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub q_mean: f64,
    pub denoise: f64,
}

/// One record per evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub epoch: usize,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub mean_q_estimate: f64,
    pub selected_best: bool,
    pub best_score: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_return,normalized_score,mean_q_estimate,selected_best,best_score,critic_loss,actor_loss";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_return,
            self.normalized_score,
            self.mean_q_estimate,
            self.selected_best as u8,
            self.best_score,
            self.critic_loss,
            self.actor_loss
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub normalized_score: f64,
}

/// Actor and critics restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub actor: PolicyNet,
    pub q1: Mlp,
    pub q2: Mlp,
    pub schedule: DiffusionSchedule,
    pub gamma: f64,
}

fn meta_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::param(format!("checkpoint metadata lacks a valid `{key}`")))
}

impl PolicyBundle {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let state_dim: usize = meta_parse(ck, "state_dim")?;
        let action_dim: usize = meta_parse(ck, "action_dim")?;
        let steps: usize = meta_parse(ck, "diffusion_steps")?;
        let schedule = make_schedule(steps, meta_parse(ck, "beta_min")?, meta_parse(ck, "beta_max")?)?;
        let net = |name: &str| -> Result<Mlp> {
            let n = ck.network(name)?;
            Ok(Mlp { spec: n.spec.clone(), params: n.params.clone() })
        };
        let actor = PolicyNet::from_parts(net("actor")?, state_dim, action_dim, steps)?;
        Ok(Self { actor, q1: net("critic1")?, q2: net("critic2")?, schedule, gamma: meta_parse(ck, "gamma")? })
    }

    pub fn critic_min(&self) -> CriticMin<'_> {
        CriticMin { q1: &self.q1, q2: &self.q2 }
    }

    pub fn evaluate(&self, env: &dyn Environment, n_episodes: usize, seed: u64) -> Result<EvalOutcome> {
        evaluate_actor(&self.actor, &self.schedule, env, n_episodes, seed)
    }

    pub fn probe(
        &self,
        dataset: &OfflineDataset,
        env: &dyn Environment,
        n_pairs: usize,
        rollouts_per_pair: usize,
        seed: u64,
    ) -> Result<ProbeReport> {
        let critic = self.critic_min();
        overestimation_probe(
            |s, a| critic.values(s, a),
            |s, rng| {
                let noise = ChainNoise::sample(s.rows(), self.actor.action_dim, self.schedule.n_steps(), rng);
                Ok(sample_actions(&self.actor, &self.schedule, s, &noise, false)?.actions)
            },
            dataset,
            env,
            self.gamma,
            n_pairs,
            rollouts_per_pair,
            seed,
        )
    }
}

/// Rolls the actor out in `env`; the chain noise of every decision comes
/// from the evaluation stream, so results are a function of `seed`.
pub fn evaluate_actor(
    actor: &PolicyNet,
    schedule: &DiffusionSchedule,
    env: &dyn Environment,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    if env.state_dim() != actor.state_dim || env.action_dim() != actor.action_dim {
        return Err(Error::Shape("actor does not match the environment".into()));
    }
    let returns = evaluate_returns(
        env,
        |s, rng| Ok(sample_action(actor, schedule, s, rng.random(), false)?.actions.data().to_vec()),
        n_episodes,
        seed,
    )?;
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok(EvalOutcome { normalized_score: env.references().normalize(mean_return), mean_return, returns })
}

/// Critic values on dataset pairs against fresh Monte-Carlo returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub mean_q: f64,
    pub mc_return: f64,
    pub gap: f64,
    /// Standard error of `mc_return` from within-pair rollout variance.
    pub mc_se: f64,
    pub n_pairs: usize,
    pub rollouts_per_pair: usize,
    pub rollout_length: usize,
}

/// Steps after which `gamma^L < 1e-4`.
pub fn mc_rollout_length(gamma: f64) -> usize {
    ((1e-4f64).ln() / gamma.ln()).ceil() as usize
}

/// Compares `q_fn` on `n_pairs` dataset `(s, a)` pairs with discounted
/// returns of rollouts that take `a` in `s` and then follow `policy`.
///
/// Rollouts ignore the episode horizon and run until the discount falls
/// below `1e-4`, matching the infinite-horizon values the critics learn.
#[allow(clippy::too_many_arguments)]
pub fn overestimation_probe<Q, P>(
    q_fn: Q,
    mut policy: P,
    dataset: &OfflineDataset,
    env: &dyn Environment,
    gamma: f64,
    n_pairs: usize,
    rollouts_per_pair: usize,
    seed: u64,
) -> Result<ProbeReport>
where
    Q: FnOnce(&Batch, &Batch) -> Result<Vec<f64>>,
    P: FnMut(&Batch, &mut StreamRng) -> Result<Batch>,
{
    if n_pairs == 0 || rollouts_per_pair < 2 {
        return Err(Error::param("probe needs n_pairs >= 1 and rollouts_per_pair >= 2"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if dataset.state_dim() != env.state_dim() || dataset.action_dim() != env.action_dim() {
        return Err(Error::Shape("dataset does not match the environment".into()));
    }
    let mut rng = rng::stream(seed, &[0x7072_6f62]);
    let n_pairs = n_pairs.min(dataset.len());
    let picked: Vec<&TransitionRecord> =
        index::sample(&mut rng, dataset.len(), n_pairs).into_iter().map(|i| &dataset.records()[i]).collect();
    let batch = TrainBatch::from_records(&picked)?;
    let q = q_fn(&batch.states, &batch.actions)?;
    let mean_q = q.iter().sum::<f64>() / q.len() as f64;

    let m = rollouts_per_pair;
    let rows = n_pairs * m;
    let length = mc_rollout_length(gamma);
    let mut states = Batch::zeros(rows, env.state_dim());
    let mut actions = Batch::zeros(rows, env.action_dim());
    for (i, rec) in picked.iter().enumerate() {
        for j in 0..m {
            states.row_mut(i * m + j).copy_from_slice(&rec.state);
            actions.row_mut(i * m + j).copy_from_slice(&rec.action);
        }
    }
    let mut returns = vec![0.0; rows];
    let mut alive = vec![true; rows];
    let mut discount = 1.0;
    for t in 0..length {
        if t > 0 {
            actions = policy(&states, &mut rng)?;
        }
        for r in 0..rows {
            if !alive[r] {
                continue;
            }
            let step = env.step(states.row(r), actions.row(r), &mut rng);
            returns[r] += discount * step.reward;
            states.row_mut(r).copy_from_slice(&step.next_state);
            alive[r] = !step.done;
        }
        discount *= gamma;
        if !alive.iter().any(|&a| a) {
            break;
        }
    }
    let mut mc_sum = 0.0;
    let mut var_sum = 0.0;
    for i in 0..n_pairs {
        let g = &returns[i * m..(i + 1) * m];
        let mean = g.iter().sum::<f64>() / m as f64;
        let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        mc_sum += mean;
        var_sum += var / m as f64;
    }
    let mc_return = mc_sum / n_pairs as f64;
    let mc_se = var_sum.sqrt() / n_pairs as f64;
    Ok(ProbeReport {
        mean_q,
        mc_return,
        gap: mean_q - mc_return,
        mc_se,
        n_pairs,
        rollouts_per_pair: m,
        rollout_length: length,
    })
}

/// Online networks, target copies and optimiser state.
#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    schedule: DiffusionSchedule,
    pub actor: PolicyNet,
    pub actor_target: PolicyNet,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    actor_opt: OptimState,
    q1_opt: OptimState,
    q2_opt: OptimState,
    rng: StreamRng,
    iterations: u64,
}

impl Agent {
    pub fn new(cfg: &AgentConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let schedule = make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?;
        let actor = PolicyNet::new(
            state_dim,
            action_dim,
            cfg.diffusion_steps,
            cfg.hidden.clone(),
            rng::derive_seed(cfg.seed, &[1]),
        )?;
        let critic_spec = MlpSpec::new(state_dim + action_dim, 1, cfg.hidden.clone(), Activation::Mish)?;
        let q1 = Mlp::new(critic_spec.clone(), rng::derive_seed(cfg.seed, &[2]))?;
        let q2 = Mlp::new(critic_spec, rng::derive_seed(cfg.seed, &[3]))?;
        let adam = AdamConfig::with_lr(cfg.lr);
        Ok(Self {
            cfg: cfg.clone(),
            schedule,
            actor_target: actor.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor_opt: OptimState::new(actor.params().len(), adam)?,
            q1_opt: OptimState::new(q1.params.len(), adam)?,
            q2_opt: OptimState::new(q2.params.len(), adam)?,
            actor,
            q1,
            q2,
            rng: rng::stream(cfg.seed, &[4]),
            iterations: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn clip(&self) -> GradClip {
        GradClip::from_norm(self.cfg.grad_norm)
    }

    pub fn critic_min(&self) -> CriticMin<'_> {
        CriticMin { q1: &self.q1, q2: &self.q2 }
    }

    /// Bootstrap values `min(Q1', Q2')(s', a')` with `a'` from the target
    /// actor; with max-q backup each critic first takes the max over
    /// `k_backup_samples` actions.
    pub fn next_values(&mut self, next_states: &Batch) -> Result<Vec<f64>> {
        let k = if self.cfg.max_q_backup { self.cfg.k_backup_samples } else { 1 };
        let rows = next_states.rows();
        let mut rep = Batch::zeros(rows * k, next_states.cols());
        for r in 0..rows {
            for j in 0..k {
                rep.row_mut(r * k + j).copy_from_slice(next_states.row(r));
            }
        }
        let noise = ChainNoise::sample(rows * k, self.actor.action_dim, self.schedule.n_steps(), &mut self.rng);
        let a = sample_actions(&self.actor_target, &self.schedule, &rep, &noise, false)?.actions;
        let v1 = critic_values(&self.q1_target, &rep, &a)?;
        let v2 = critic_values(&self.q2_target, &rep, &a)?;
        Ok((0..rows)
            .map(|r| {
                let m1 = v1[r * k..(r + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m2 = v2[r * k..(r + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m1.min(m2)
            })
            .collect())
    }

    /// One expectile regression step of both critics towards a shared target.
    pub fn critic_update(&mut self, batch: &TrainBatch) -> Result<CriticStats> {
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let next = self.next_values(&batch.next_states)?;
        self.critic_update_with_targets(batch, &next)
    }

    /// Critic step with given bootstrap values `next` (before done masking).
    pub fn critic_update_with_targets(&mut self, batch: &TrainBatch, next: &[f64]) -> Result<CriticStats> {
        let rows = batch.len();
        if next.len() != rows {
            return Err(Error::Shape("bootstrap values do not match the batch".into()));
        }
        let x = Batch::hconcat(&[&batch.states, &batch.actions])?;
        let masked: Vec<f64> = next.iter().zip(&batch.dones).map(|(v, &d)| if d { 0.0 } else { *v }).collect();
        let mean_target =
            batch.rewards.iter().zip(&masked).map(|(r, v)| r + self.cfg.gamma * v).sum::<f64>() / rows as f64;
        let clip = self.clip();
        let mut losses = [0.0; 2];
        let mut mean_q = 0.0;
        let taus = [self.cfg.tau_q1, self.cfg.tau_q2];
        let (gamma, convention) = (self.cfg.gamma, self.cfg.tau_convention);
        for (i, (q, opt)) in
            [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)].into_iter().enumerate()
        {
            let trace = q.forward_trace(&x)?;
            let mut upstream = Batch::zeros(rows, 1);
            let mut loss = 0.0;
            for r in 0..rows {
                let qv = trace.output().get(r, 0);
                if i == 0 {
                    mean_q += qv / rows as f64;
                }
                let (l, g) = td_expectile_residual(qv, batch.rewards[r], masked[r], gamma, taus[i], convention)?;
                loss += l;
                upstream.set(r, 0, g / rows as f64);
            }
            let mut grads = q.backward(&trace, &upstream)?.params;
            opt_step(&mut q.params, &mut grads, opt, clip)?;
            losses[i] = loss / rows as f64;
        }
        Ok(CriticStats { loss_q1: losses[0], loss_q2: losses[1], mean_q, mean_target })
    }

    /// One step of the combined critic-guided and denoising actor objective.
    pub fn actor_update(&mut self, batch: &TrainBatch) -> Result<ActorStats> {
        let weights = self.cfg.actor_weights()?;
        let rows = batch.len();
        let chain = ChainNoise::sample(rows, self.actor.action_dim, self.schedule.n_steps(), &mut self.rng);
        let denoise = DenoiseNoise::sample(rows, self.actor.action_dim, self.schedule.n_steps(), &mut self.rng);
        let critic = CriticMin { q1: &self.q1, q2: &self.q2 };
        let out =
            actor_loss(&self.actor, &self.schedule, &critic, &batch.states, &batch.actions, weights, &chain, &denoise)?;
        let mut grads = out.grad;
        let clip = self.clip();
        opt_step(self.actor.params_mut(), &mut grads, &mut self.actor_opt, clip)?;
        Ok(ActorStats { loss: out.total, q_mean: out.q_mean, denoise: out.denoise })
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let rho = self.cfg.rho;
        polyak_update(&mut self.q1_target.params, &self.q1.params, rho)?;
        polyak_update(&mut self.q2_target.params, &self.q2.params, rho)?;
        polyak_update(self.actor_target.params_mut(), self.actor.params(), rho)
    }

    /// Critic update, actor update and target tracking on one minibatch.
    pub fn train_iteration(&mut self, dataset: &OfflineDataset) -> Result<(CriticStats, ActorStats)> {
        let batch = TrainBatch::sample(dataset, self.cfg.batch_size, &mut self.rng)?;
        let c = self.critic_update(&batch)?;
        let a = self.actor_update(&batch)?;
        self.update_targets()?;
        self.iterations += 1;
        Ok((c, a))
    }

    pub fn evaluate(&self, env: &dyn Environment, n_episodes: usize, seed: u64) -> Result<EvalOutcome> {
        evaluate_actor(&self.actor, &self.schedule, env, n_episodes, seed)
    }

    pub fn bundle(&self) -> PolicyBundle {
        PolicyBundle {
            actor: self.actor.clone(),
            q1: self.q1.clone(),
            q2: self.q2.clone(),
            schedule: self.schedule.clone(),
            gamma: self.cfg.gamma,
        }
    }

    pub fn probe(
        &self,
        dataset: &OfflineDataset,
        env: &dyn Environment,
        n_pairs: usize,
        rollouts_per_pair: usize,
        seed: u64,
    ) -> Result<ProbeReport> {
        self.bundle().probe(dataset, env, n_pairs, rollouts_per_pair, seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.seed, self.iterations);
        for (k, v) in [
            ("state_dim", self.actor.state_dim.to_string()),
            ("action_dim", self.actor.action_dim.to_string()),
            ("diffusion_steps", self.schedule.n_steps().to_string()),
            ("beta_min", self.cfg.beta_min.to_string()),
            ("beta_max", self.cfg.beta_max.to_string()),
            ("gamma", self.cfg.gamma.to_string()),
        ] {
            ck.meta.insert(k.to_string(), v);
        }
        ck.push("actor", &self.actor.net.spec, self.actor.params());
        ck.push("critic1", &self.q1.spec, &self.q1.params);
        ck.push("critic2", &self.q2.spec, &self.q2.params);
        ck
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<EvalReport>,
    pub best: Checkpoint,
    pub best_score: f64,
    pub last: Checkpoint,
}

/// Records every evaluation of a run; see [`train_with`].
pub trait TrainObserver {
    fn on_eval(&mut self, report: &EvalReport) -> Result<()>;
}

impl TrainObserver for () {
    fn on_eval(&mut self, _: &EvalReport) -> Result<()> {
        Ok(())
    }
}

/// Fixed dataset pairs on which the mean Q estimate is reported.
fn q_probe_batch(dataset: &OfflineDataset) -> Result<TrainBatch> {
    let n = dataset.len().min(256);
    let stride = dataset.len() / n;
    let picked: Vec<&TransitionRecord> = (0..n).map(|i| &dataset.records()[i * stride]).collect();
    TrainBatch::from_records(&picked)
}

pub fn train(dataset: &OfflineDataset, env: &dyn Environment, cfg: &AgentConfig) -> Result<TrainOutcome> {
    train_with(dataset, env, cfg, &mut ())
}

/// Runs `n_epochs * iters_per_epoch` iterations, evaluating every
/// `eval_interval_epochs` epochs and after the last one. The checkpoint with
/// the best normalised score is kept.
pub fn train_with(
    dataset: &OfflineDataset,
    env: &dyn Environment,
    cfg: &AgentConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if dataset.is_discrete() {
        return Err(Error::param("training needs a continuous dataset"));
    }
    if dataset.state_dim() != env.state_dim() || dataset.action_dim() != env.action_dim() {
        return Err(Error::Shape(format!(
            "dataset is ({}, {}) but the environment is ({}, {})",
            dataset.state_dim(),
            dataset.action_dim(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let mut agent = Agent::new(cfg, env.state_dim(), env.action_dim())?;
    let eval_seed = rng::derive_seed(cfg.seed, &[0x6576_616c]);
    let q_batch = q_probe_batch(dataset)?;
    let mut reports = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=cfg.n_epochs {
        let (mut closs, mut aloss) = (0.0, 0.0);
        for _ in 0..cfg.iters_per_epoch {
            let (c, a) = agent.train_iteration(dataset)?;
            closs += 0.5 * (c.loss_q1 + c.loss_q2);
            aloss += a.loss;
        }
        if !closs.is_finite() || !aloss.is_finite() {
            return Err(Error::NoConvergence { iterations: agent.iterations() as usize, residual: closs });
        }
        if epoch % cfg.eval_interval_epochs != 0 && epoch != cfg.n_epochs {
            continue;
        }
        let eval = agent.evaluate(env, cfg.eval_episodes, eval_seed)?;
        let q = agent.critic_min().values(&q_batch.states, &q_batch.actions)?;
        let improved = best.as_ref().is_none_or(|(s, _)| eval.normalized_score > *s);
        if improved {
            best = Some((eval.normalized_score, agent.checkpoint()));
        }
        let report = EvalReport {
            epoch,
            mean_return: eval.mean_return,
            normalized_score: eval.normalized_score,
            mean_q_estimate: q.iter().sum::<f64>() / q.len() as f64,
            selected_best: improved,
            best_score: best.as_ref().map(|(s, _)| *s).unwrap_or(f64::NAN),
            critic_loss: closs / cfg.iters_per_epoch as f64,
            actor_loss: aloss / cfg.iters_per_epoch as f64,
        };
        observer.on_eval(&report)?;
        reports.push(report);
    }
    let (best_score, best) = best.expect("the last epoch is always evaluated");
    Ok(TrainOutcome { reports, best, best_score, last: agent.checkpoint() })
}
