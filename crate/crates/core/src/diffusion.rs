//! Conditional denoising diffusion policy over bounded continuous actions.
//!
//! The ε-network sees `[noisy action, state, one_hot(n)]`. Sampling runs the
//! ancestral chain with a clipped x0-prediction posterior mean and the fixed
//! posterior variance; the last step adds no noise. Every Gaussian draw of the
//! chain is an explicit input ([`ChainNoise`]), so a sampled action is a pure
//! function of `(params, state, noise)` and can be differentiated through.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::approx::{Batch, ForwardTrace, Mlp, MlpSpec, ParamSet};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

pub const DEFAULT_STEPS: usize = 5;
pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 0.7;
pub const ACTION_BOUND: f64 = 1.0;

/// Per-step noise variances and their cumulative signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    /// `alpha_bar[n]` for `n = 0..=N`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

/// Builds an `n_steps` schedule. `-ln(1 - beta)` is interpolated linearly
/// between the endpoints, which spreads the signal decay evenly for small
/// step counts. A single step uses `beta_max`.
pub fn make_schedule(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if n_steps == 0 {
        return Err(Error::param("diffusion needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(format!(
            "schedule endpoints must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let (g0, g1) = (-(-beta_min).ln_1p(), -(-beta_max).ln_1p());
    let betas: Vec<f64> = if n_steps == 1 {
        vec![beta_max]
    } else {
        (0..n_steps)
            .map(|k| {
                let g = g0 + (g1 - g0) * k as f64 / (n_steps - 1) as f64;
                -(-g).exp_m1()
            })
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(n_steps + 1);
    alpha_bar.push(1.0);
    for b in &betas {
        let last = *alpha_bar.last().unwrap();
        alpha_bar.push(last * (1.0 - b));
    }
    Ok(DiffusionSchedule { betas, alpha_bar })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_n`, `n` in `1..=N`.
    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_n`, `n` in `0..=N`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Variance of `q(a^{n-1} | a^n, a^0)`.
    pub fn posterior_variance(&self, n: usize) -> f64 {
        self.beta(n) * (1.0 - self.alpha_bar[n - 1]) / (1.0 - self.alpha_bar[n])
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean `c_x0 * a^0 + c_xt * a^n`.
    pub fn posterior_mean_coefs(&self, n: usize) -> (f64, f64) {
        let ab = self.alpha_bar[n];
        let ab_prev = self.alpha_bar[n - 1];
        let beta = self.beta(n);
        (beta * ab_prev.sqrt() / (1.0 - ab), (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab))
    }
}

/// `a^n = sqrt(alpha_bar_n) a^0 + sqrt(1 - alpha_bar_n) eps`.
pub fn forward_noise(schedule: &DiffusionSchedule, action: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if n > schedule.n_steps() {
        return Err(Error::param(format!("step {n} beyond a {}-step schedule", schedule.n_steps())));
    }
    if action.len() != eps.len() {
        return Err(Error::Shape("action and noise lengths differ".into()));
    }
    let ab = schedule.alpha_bar(n);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(action.iter().zip(eps).map(|(a, e)| s0 * a + s1 * e).collect())
}

/// Anything that predicts the noise of a batch of noisy actions.
pub trait EpsilonModel {
    fn action_dim(&self) -> usize;

    /// `steps[i]` in `1..=N` is the diffusion step of row `i`.
    fn predict(&self, noisy: &Batch, states: &Batch, steps: &[usize]) -> Result<Batch>;
}

/// ε-network with a one-hot step embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_steps: usize,
}

impl PolicyNet {
    pub fn new(state_dim: usize, action_dim: usize, n_steps: usize, hidden: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(action_dim + state_dim + n_steps, action_dim, hidden, crate::approx::Activation::Mish)?;
        Ok(Self { net: Mlp::new(spec, seed)?, state_dim, action_dim, n_steps })
    }

    pub fn from_parts(net: Mlp, state_dim: usize, action_dim: usize, n_steps: usize) -> Result<Self> {
        if net.spec.input_dim != action_dim + state_dim + n_steps || net.spec.output_dim != action_dim {
            return Err(Error::Shape("network does not match policy dimensions".into()));
        }
        Ok(Self { net, state_dim, action_dim, n_steps })
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    fn input(&self, noisy: &Batch, states: &Batch, steps: &[usize]) -> Result<Batch> {
        if noisy.cols() != self.action_dim || states.cols() != self.state_dim {
            return Err(Error::Shape(format!(
                "policy expects {}-d actions and {}-d states, got {} and {}",
                self.action_dim,
                self.state_dim,
                noisy.cols(),
                states.cols()
            )));
        }
        if noisy.rows() != states.rows() || steps.len() != noisy.rows() {
            return Err(Error::Shape("batch sizes differ".into()));
        }
        let mut x = Batch::zeros(noisy.rows(), self.action_dim + self.state_dim + self.n_steps);
        for r in 0..noisy.rows() {
            let n = steps[r];
            if n == 0 || n > self.n_steps {
                return Err(Error::param(format!("diffusion step {n} outside 1..={}", self.n_steps)));
            }
            let row = x.row_mut(r);
            row[..self.action_dim].copy_from_slice(noisy.row(r));
            row[self.action_dim..self.action_dim + self.state_dim].copy_from_slice(states.row(r));
            row[self.action_dim + self.state_dim + n - 1] = 1.0;
        }
        Ok(x)
    }

    fn predict_trace(&self, noisy: &Batch, states: &Batch, steps: &[usize]) -> Result<ForwardTrace> {
        let x = self.input(noisy, states, steps)?;
        self.net.forward_trace(&x)
    }
}

impl EpsilonModel for PolicyNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict(&self, noisy: &Batch, states: &Batch, steps: &[usize]) -> Result<Batch> {
        let x = self.input(noisy, states, steps)?;
        self.net.forward(&x)
    }
}

/// Step indices and Gaussian noise for one evaluation of the ε-loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseNoise {
    pub steps: Vec<usize>,
    pub eps: Batch,
}

impl DenoiseNoise {
    pub fn sample(rows: usize, action_dim: usize, n_steps: usize, rng: &mut StreamRng) -> Self {
        let steps = (0..rows).map(|_| rng.random_range(1..=n_steps)).collect();
        let mut eps = Batch::zeros(rows, action_dim);
        eps.data_mut().iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        Self { steps, eps }
    }
}

fn noisy_actions(schedule: &DiffusionSchedule, actions: &Batch, noise: &DenoiseNoise) -> Result<Batch> {
    if noise.eps.rows() != actions.rows() || noise.eps.cols() != actions.cols() || noise.steps.len() != actions.rows() {
        return Err(Error::Shape("noise does not match the action batch".into()));
    }
    let mut out = Batch::zeros(actions.rows(), actions.cols());
    for r in 0..actions.rows() {
        let noisy = forward_noise(schedule, actions.row(r), noise.steps[r], noise.eps.row(r))?;
        out.row_mut(r).copy_from_slice(&noisy);
    }
    Ok(out)
}

/// Mean over the batch of `||eps - eps_hat||^2` for any noise model.
pub fn denoise_loss_value<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    states: &Batch,
    actions: &Batch,
    noise: &DenoiseNoise,
) -> Result<f64> {
    if actions.rows() == 0 {
        return Err(Error::Empty("denoising batch"));
    }
    let noisy = noisy_actions(schedule, actions, noise)?;
    let pred = model.predict(&noisy, states, &noise.steps)?;
    let sq: f64 = pred.data().iter().zip(noise.eps.data()).map(|(p, e)| (p - e) * (p - e)).sum();
    Ok(sq / actions.rows() as f64)
}

/// ε-prediction loss and its gradient in the policy parameters.
pub fn denoise_loss(
    policy: &PolicyNet,
    schedule: &DiffusionSchedule,
    states: &Batch,
    actions: &Batch,
    noise: &DenoiseNoise,
) -> Result<(f64, Vec<f64>)> {
    if actions.rows() == 0 {
        return Err(Error::Empty("denoising batch"));
    }
    let noisy = noisy_actions(schedule, actions, noise)?;
    let trace = policy.predict_trace(&noisy, states, &noise.steps)?;
    let pred = trace.output();
    let scale = 1.0 / actions.rows() as f64;
    let mut upstream = Batch::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((u, &p), &e) in upstream.data_mut().iter_mut().zip(pred.data()).zip(noise.eps.data()) {
        let d = p - e;
        loss += d * d;
        *u = 2.0 * d * scale;
    }
    let grads = policy.net.backward(&trace, &upstream)?;
    Ok((loss * scale, grads.params))
}

/// Gaussian draws of one reverse chain for a batch: the initial `a^N` and
/// the injected noise of steps `N..=2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub initial: Batch,
    /// `steps[k]` is the noise added when leaving step `N - k`.
    pub steps: Vec<Batch>,
}

impl ChainNoise {
    pub fn sample(rows: usize, action_dim: usize, n_steps: usize, rng: &mut StreamRng) -> Self {
        let mut draw = || {
            let mut b = Batch::zeros(rows, action_dim);
            b.data_mut().iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            b
        };
        let initial = draw();
        let steps = (0..n_steps.saturating_sub(1)).map(|_| draw()).collect();
        Self { initial, steps }
    }

    pub fn zeros(rows: usize, action_dim: usize, n_steps: usize) -> Self {
        Self {
            initial: Batch::zeros(rows, action_dim),
            steps: vec![Batch::zeros(rows, action_dim); n_steps.saturating_sub(1)],
        }
    }
}

struct StepRecord {
    trace: ForwardTrace,
    /// 1 where the x0 prediction was inside the action bounds.
    x0_mask: Vec<f64>,
}

/// Intermediate values of a reverse chain, kept for differentiation.
pub struct ChainTrace {
    /// Records for steps `N..=1`, in that order.
    records: Vec<StepRecord>,
    final_mask: Vec<f64>,
    states: Batch,
}

/// Actions drawn by the reverse chain, with the trace when requested.
pub struct ActionSample {
    pub actions: Batch,
    pub trace: Option<ChainTrace>,
}

fn check_chain(policy: &PolicyNet, schedule: &DiffusionSchedule, states: &Batch, noise: &ChainNoise) -> Result<()> {
    if schedule.n_steps() != policy.n_steps {
        return Err(Error::Shape(format!(
            "policy embeds {} steps, schedule has {}",
            policy.n_steps,
            schedule.n_steps()
        )));
    }
    if noise.initial.rows() != states.rows()
        || noise.initial.cols() != policy.action_dim
        || noise.steps.len() + 1 != schedule.n_steps()
        || noise.steps.iter().any(|b| b.rows() != states.rows() || b.cols() != policy.action_dim)
    {
        return Err(Error::Shape("chain noise does not match batch, action size or step count".into()));
    }
    Ok(())
}

/// Runs the reverse chain for every state of the batch.
pub fn sample_actions(
    policy: &PolicyNet,
    schedule: &DiffusionSchedule,
    states: &Batch,
    noise: &ChainNoise,
    keep_trace: bool,
) -> Result<ActionSample> {
    check_chain(policy, schedule, states, noise)?;
    let rows = states.rows();
    let n_steps = schedule.n_steps();
    let mut a = noise.initial.clone();
    let mut records = Vec::new();
    for n in (1..=n_steps).rev() {
        let steps = vec![n; rows];
        let trace = policy.predict_trace(&a, states, &steps)?;
        let eps_hat = trace.output();
        let ab = schedule.alpha_bar(n);
        let (sqrt_ab, sqrt_1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (c0, ct) = schedule.posterior_mean_coefs(n);
        let sigma = if n > 1 { schedule.posterior_variance(n).sqrt() } else { 0.0 };
        let mut next = Batch::zeros(rows, policy.action_dim);
        let mut x0_mask = vec![0.0; rows * policy.action_dim];
        for i in 0..rows * policy.action_dim {
            let an = a.data()[i];
            let x0 = (an - sqrt_1mab * eps_hat.data()[i]) / sqrt_ab;
            let x0c = x0.clamp(-ACTION_BOUND, ACTION_BOUND);
            if x0c == x0 {
                x0_mask[i] = 1.0;
            }
            let z = if n > 1 { noise.steps[n_steps - n].data()[i] } else { 0.0 };
            next.data_mut()[i] = c0 * x0c + ct * an + sigma * z;
        }
        if keep_trace {
            records.push(StepRecord { trace, x0_mask });
        }
        a = next;
    }
    let mut final_mask = vec![0.0; a.data().len()];
    for (v, m) in a.data_mut().iter_mut().zip(&mut final_mask) {
        let c = v.clamp(-ACTION_BOUND, ACTION_BOUND);
        if c == *v {
            *m = 1.0;
        }
        *v = c;
    }
    let trace = keep_trace.then(|| ChainTrace { records, final_mask, states: states.clone() });
    Ok(ActionSample { actions: a, trace })
}

/// Draws one action for `state` from a seeded chain.
pub fn sample_action(
    policy: &PolicyNet,
    schedule: &DiffusionSchedule,
    state: &[f64],
    seed: u64,
    reparameterized: bool,
) -> Result<ActionSample> {
    let states = Batch::from_vec(1, state.len(), state.to_vec())?;
    let mut rng = rng::stream(seed, &[0x0063_6861_696e]);
    let noise = ChainNoise::sample(1, policy.action_dim, schedule.n_steps(), &mut rng);
    sample_actions(policy, schedule, &states, &noise, reparameterized)
}

/// Pulls `d loss / d actions` back through a traced chain into the policy
/// parameters.
pub fn chain_backward(
    policy: &PolicyNet,
    schedule: &DiffusionSchedule,
    trace: &ChainTrace,
    action_grad: &Batch,
) -> Result<Vec<f64>> {
    let ad = policy.action_dim;
    let rows = trace.states.rows();
    if action_grad.rows() != rows || action_grad.cols() != ad {
        return Err(Error::Shape("action gradient does not match the sampled batch".into()));
    }
    let n_steps = schedule.n_steps();
    let mut grad = vec![0.0; policy.params().len()];
    // g holds d loss / d a^{n-1} while processing step n
    let mut g = action_grad.clone();
    for (v, m) in g.data_mut().iter_mut().zip(&trace.final_mask) {
        *v *= m;
    }
    for n in 1..=n_steps {
        let rec = &trace.records[n_steps - n];
        let ab = schedule.alpha_bar(n);
        let (sqrt_ab, sqrt_1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (c0, ct) = schedule.posterior_mean_coefs(n);
        // d loss / d x0 through the clamp
        let mut d_eps = Batch::zeros(rows, ad);
        let mut g_prev = Batch::zeros(rows, ad);
        for i in 0..rows * ad {
            let dx0 = g.data()[i] * c0 * rec.x0_mask[i];
            d_eps.data_mut()[i] = -dx0 * sqrt_1mab / sqrt_ab;
            g_prev.data_mut()[i] = g.data()[i] * ct + dx0 / sqrt_ab;
        }
        let back = policy.net.backward(&rec.trace, &d_eps)?;
        for (a, b) in grad.iter_mut().zip(&back.params) {
            *a += b;
        }
        for r in 0..rows {
            let gi = back.input.row(r);
            for (dst, src) in g_prev.row_mut(r).iter_mut().zip(&gi[..ad]) {
                *dst += src;
            }
        }
        g = g_prev;
    }
    Ok(grad)
}

/// Critic seen by the actor: values and their gradient in the action.
pub trait ActionCritic {
    fn value_and_action_grad(&self, states: &Batch, actions: &Batch) -> Result<(Vec<f64>, Batch)>;
}

/// Weights `eta` of the critic term and `zeta` of the denoising term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorLossWeights {
    pub eta: f64,
    pub zeta: f64,
}

impl ActorLossWeights {
    pub fn new(eta: f64, zeta: f64) -> Result<Self> {
        if !(eta >= 0.0 && zeta >= 0.0) || !eta.is_finite() || !zeta.is_finite() {
            return Err(Error::param(format!("actor loss weights must be finite and >= 0, got {eta}, {zeta}")));
        }
        if eta == 0.0 && zeta == 0.0 {
            return Err(Error::param("actor loss weights eta and zeta cannot both be zero"));
        }
        Ok(Self { eta, zeta })
    }
}

/// Components of the actor objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorLoss {
    pub total: f64,
    pub q_mean: f64,
    pub denoise: f64,
    pub grad: Vec<f64>,
}

/// `-eta * mean Q(s, pi(s)) + zeta * denoise_loss` with its gradient.
///
/// The critic's own parameters are not touched; its action gradient is
/// carried back through the reparameterized chain.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<C: ActionCritic + ?Sized>(
    policy: &PolicyNet,
    schedule: &DiffusionSchedule,
    critic: &C,
    states: &Batch,
    actions: &Batch,
    weights: ActorLossWeights,
    chain_noise: &ChainNoise,
    denoise_noise: &DenoiseNoise,
) -> Result<ActorLoss> {
    if states.rows() == 0 {
        return Err(Error::Empty("actor batch"));
    }
    let mut grad = vec![0.0; policy.params().len()];
    let mut q_mean = 0.0;
    let mut denoise = 0.0;
    if weights.eta > 0.0 {
        let sample = sample_actions(policy, schedule, states, chain_noise, true)?;
        let (q, dq) = critic.value_and_action_grad(states, &sample.actions)?;
        if q.len() != states.rows() || dq.rows() != states.rows() || dq.cols() != policy.action_dim {
            return Err(Error::Shape("critic output does not match the actor batch".into()));
        }
        q_mean = q.iter().sum::<f64>() / q.len() as f64;
        let scale = -weights.eta / states.rows() as f64;
        let mut upstream = dq;
        upstream.data_mut().iter_mut().for_each(|v| *v *= scale);
        let trace = sample.trace.expect("trace requested");
        let g = chain_backward(policy, schedule, &trace, &upstream)?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    if weights.zeta > 0.0 {
        let (l, g) = denoise_loss(policy, schedule, states, actions, denoise_noise)?;
        denoise = l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += weights.zeta * b);
    }
    Ok(ActorLoss { total: -weights.eta * q_mean + weights.zeta * denoise, q_mean, denoise, grad })
}
