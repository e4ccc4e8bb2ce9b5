//! DDPG agents: a linear-gain actor with a quadratic critic (`Ddpg1`) and an
//! end-to-end MLP actor-critic (`Ddpg2`), sharing replay, target networks and
//! the training loop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqi::CostWeights;
use crate::neural::{adam_update, AdamState, DenseNet, LayerSpec, QuadraticCritic};

pub const OBS_DIM: usize = 3;
pub type Obs = [f64; OBS_DIM];

/// Output bound of the MLP actor.
pub const ACTION_SCALE: f64 = 4.0;
const HIDDEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Obs,
    pub a: f64,
    pub r: f64,
    pub s2: Obs,
    /// True terminal state; time-limit truncation does not set it.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            data: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            inserted: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        let slot = (self.inserted % self.capacity as u64) as usize;
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[slot] = t;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.data
    }

    /// Restores a buffer from its stored slots and insertion count.
    pub fn from_parts(capacity: usize, data: Vec<Transition>, inserted: u64) -> Result<Self> {
        if capacity == 0 || data.len() > capacity || (data.len() as u64) > inserted {
            return Err(Error::InvalidArgument("inconsistent replay buffer state".into()));
        }
        Ok(Self {
            data,
            capacity,
            inserted,
        })
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        if self.data.len() < n || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {n} transitions from a buffer holding {}",
                self.data.len()
            )));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.data.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Transition>> {
        Ok(self.sample_indices(rng, n)?.into_iter().map(|i| self.data[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub noise_variance: f64,
    pub noise_variance_decay: f64,
    pub integral_gain: f64,
    pub dt: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_episodes: usize,
    pub tau: f64,
    pub buffer_capacity: usize,
    pub critic_bias_lr_factor: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            critic_lr: 1e-3,
            actor_lr: 1e-4,
            noise_variance: 0.1,
            noise_variance_decay: 1e-6,
            integral_gain: 0.1,
            dt: 0.1,
            batch_size: 256,
            max_steps: 200,
            max_episodes: 850,
            tau: 1e-3,
            buffer_capacity: 100_000,
            critic_bias_lr_factor: 4.0,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("critic_lr", self.critic_lr),
            ("actor_lr", self.actor_lr),
            ("integral_gain", self.integral_gain),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("hyperparams.{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "hyperparams.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "hyperparams.tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if !(self.noise_variance >= 0.0) || !(0.0..=1.0).contains(&self.noise_variance_decay) {
            return Err(Error::Config(
                "hyperparams.noise_variance must be >= 0 and decay in [0, 1]".into(),
            ));
        }
        if !(self.critic_bias_lr_factor >= 0.0) {
            return Err(Error::Config("hyperparams.critic_bias_lr_factor must be >= 0".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("buffer_capacity", self.buffer_capacity),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("hyperparams.{name} must be positive")));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::Config("hyperparams.batch_size exceeds buffer_capacity".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ddpg1,
    Ddpg2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ddpg1 => "ddpg1",
            Variant::Ddpg2 => "ddpg2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpg1" => Ok(Variant::Ddpg1),
            "ddpg2" => Ok(Variant::Ddpg2),
            other => Err(Error::InvalidArgument(format!(
                "unknown agent variant `{other}` (expected ddpg1 or ddpg2)"
            ))),
        }
    }
}

/// Two-path critic: the observation and action paths are summed, passed
/// through a ReLU, then through the head.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeCritic {
    pub obs: DenseNet,
    pub act: DenseNet,
    pub head: DenseNet,
}

impl MergeCritic {
    fn new() -> Result<Self> {
        Ok(Self {
            obs: DenseNet::new(vec![
                LayerSpec::Dense {
                    input: OBS_DIM,
                    output: HIDDEN,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: HIDDEN,
                    output: HIDDEN,
                },
            ])?,
            act: DenseNet::new(vec![LayerSpec::Dense {
                input: 1,
                output: HIDDEN,
            }])?,
            head: DenseNet::new(vec![
                LayerSpec::Dense {
                    input: HIDDEN,
                    output: HIDDEN,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: HIDDEN,
                    output: 1,
                },
            ])?,
        })
    }

    pub fn parts(&self) -> [&DenseNet; 3] {
        [&self.obs, &self.act, &self.head]
    }

    pub fn parts_mut(&mut self) -> [&mut DenseNet; 3] {
        [&mut self.obs, &mut self.act, &mut self.head]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Critic {
    Quadratic(QuadraticCritic),
    Merge(MergeCritic),
}

/// Intermediate state of a batched critic evaluation.
pub struct CriticTape {
    batch: usize,
    inner: CriticTapeInner,
}

enum CriticTapeInner {
    Quadratic {
        s: Vec<f64>,
        a: Vec<f64>,
    },
    Merge {
        obs: crate::neural::Tape,
        act: crate::neural::Tape,
        merged_pre: Vec<f64>,
        head: crate::neural::Tape,
    },
}

impl Critic {
    pub fn param_count(&self) -> usize {
        match self {
            Critic::Quadratic(_) => 11,
            Critic::Merge(m) => m.parts().iter().map(|n| n.param_count()).sum(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Critic::Quadratic(q) => q.params().to_vec(),
            Critic::Merge(m) => m.parts().iter().flat_map(|n| n.params().iter().copied()).collect(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "critic has {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        match self {
            Critic::Quadratic(q) => q.set_params(p),
            Critic::Merge(m) => {
                let mut off = 0;
                for net in m.parts_mut() {
                    let n = net.param_count();
                    net.set_params(&p[off..off + n])?;
                    off += n;
                }
                Ok(())
            }
        }
    }

    /// Batched `Q(s, a)` over row-major observations.
    pub fn forward(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, CriticTape)> {
        let batch = a.len();
        if s.len() != batch * OBS_DIM {
            return Err(Error::Dimension("critic batch shapes differ".into()));
        }
        match self {
            Critic::Quadratic(q) => {
                let values = s
                    .chunks_exact(OBS_DIM)
                    .zip(a)
                    .map(|(x, &u)| {
                        let x: Obs = [x[0], x[1], x[2]];
                        crate::neural::quad_critic_value(q, &x, u) + q.bias
                    })
                    .collect();
                let inner = CriticTapeInner::Quadratic {
                    s: s.to_vec(),
                    a: a.to_vec(),
                };
                Ok((values, CriticTape { batch, inner }))
            }
            Critic::Merge(m) => {
                let obs = m.obs.forward(s, batch)?;
                let act = m.act.forward(a, batch)?;
                let merged_pre: Vec<f64> = obs.output().iter().zip(act.output()).map(|(x, y)| x + y).collect();
                let merged: Vec<f64> = merged_pre.iter().map(|v| v.max(0.0)).collect();
                let head = m.head.forward(&merged, batch)?;
                let values = head.output().to_vec();
                let inner = CriticTapeInner::Merge {
                    obs,
                    act,
                    merged_pre,
                    head,
                };
                Ok((values, CriticTape { batch, inner }))
            }
        }
    }

    /// Reverse pass returning `dQ/da` per sample; parameter gradients are
    /// accumulated into `grads` when given.
    pub fn backward(&self, tape: &CriticTape, upstream: &[f64], grads: Option<&mut [f64]>) -> Result<Vec<f64>> {
        if upstream.len() != tape.batch {
            return Err(Error::Dimension("critic upstream length differs from batch".into()));
        }
        match (self, &tape.inner) {
            (Critic::Quadratic(q), CriticTapeInner::Quadratic { s, a }) => {
                let mut grads = grads;
                let mut da = Vec::with_capacity(tape.batch);
                for ((x, &u), &up) in s.chunks_exact(OBS_DIM).zip(a).zip(upstream) {
                    let x: Obs = [x[0], x[1], x[2]];
                    if let Some(g) = grads.as_deref_mut() {
                        for (gi, f) in g.iter_mut().zip(QuadraticCritic::features(&x, u)) {
                            *gi += up * f;
                        }
                        g[10] += up;
                    }
                    da.push(up * q.action_gradient(&x, u));
                }
                Ok(da)
            }
            (
                Critic::Merge(m),
                CriticTapeInner::Merge {
                    obs,
                    act,
                    merged_pre,
                    head,
                },
            ) => {
                let (n_obs, n_act) = (m.obs.param_count(), m.act.param_count());
                let (g_obs, g_act, g_head) = match grads {
                    Some(g) => {
                        let (a, rest) = g.split_at_mut(n_obs);
                        let (b, c) = rest.split_at_mut(n_act);
                        (Some(a), Some(b), Some(c))
                    }
                    None => (None, None, None),
                };
                let d_merged = m.head.backward(head, upstream, g_head)?;
                let d_pre: Vec<f64> = d_merged
                    .iter()
                    .zip(merged_pre)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                if let Some(g) = g_obs {
                    m.obs.backward(obs, &d_pre, Some(g))?;
                }
                m.act.backward(act, &d_pre, g_act)
            }
            _ => Err(Error::InvalidArgument(
                "critic tape belongs to a different critic".into(),
            )),
        }
    }

    fn lr_factors(&self, bias_factor: f64) -> Vec<f64> {
        match self {
            Critic::Quadratic(_) => {
                let mut f = vec![1.0; 11];
                f[10] = bias_factor;
                f
            }
            Critic::Merge(m) => m.parts().iter().flat_map(|n| n.lr_factors().iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub variant: Variant,
    pub actor: DenseNet,
    pub actor_target: DenseNet,
    pub critic: Critic,
    pub critic_target: Critic,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub noise_variance: f64,
    pub hp: Hyperparams,
}

pub fn actor_layers(variant: Variant) -> Vec<LayerSpec> {
    match variant {
        Variant::Ddpg1 => vec![LayerSpec::Dense {
            input: OBS_DIM,
            output: 1,
        }],
        Variant::Ddpg2 => vec![
            LayerSpec::Dense {
                input: OBS_DIM,
                output: HIDDEN,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: HIDDEN,
                output: HIDDEN,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: HIDDEN,
                output: HIDDEN,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: HIDDEN,
                output: 1,
            },
            LayerSpec::Tanh,
            LayerSpec::Scale { factor: ACTION_SCALE },
        ],
    }
}

impl Agent {
    /// Fresh agent with targets equal to the online networks.
    pub fn new<R: Rng + ?Sized>(variant: Variant, hp: Hyperparams, rng: &mut R) -> Result<Self> {
        hp.validate()?;
        let mut actor = DenseNet::new(actor_layers(variant))?;
        actor.init_uniform(rng);
        let critic = match variant {
            Variant::Ddpg1 => {
                actor.set_bias_lr_factor(0.0);
                let bound = 1.0 / 10f64.sqrt();
                let w: [f64; 10] = std::array::from_fn(|_| rng.random_range(-bound..=bound));
                Critic::Quadratic(QuadraticCritic::new(w))
            }
            Variant::Ddpg2 => {
                let mut m = MergeCritic::new()?;
                for net in m.parts_mut() {
                    net.init_uniform(rng);
                }
                Critic::Merge(m)
            }
        };
        let actor_opt = AdamState::new(actor.param_count(), hp.actor_lr);
        let critic_opt = AdamState::new(critic.param_count(), hp.critic_lr);
        Ok(Self {
            variant,
            actor_target: actor.clone(),
            actor,
            critic_target: critic.clone(),
            critic,
            actor_opt,
            critic_opt,
            noise_variance: hp.noise_variance,
            hp,
        })
    }

    pub fn policy(&self) -> ActorPolicy {
        ActorPolicy {
            net: self.actor.clone(),
            variant: self.variant,
        }
    }

    fn clamp(&self, a: f64) -> f64 {
        clamp_action(self.variant, a)
    }
}

fn clamp_action(variant: Variant, a: f64) -> f64 {
    match variant {
        Variant::Ddpg1 => a,
        Variant::Ddpg2 => a.clamp(-ACTION_SCALE, ACTION_SCALE),
    }
}

/// Read-only deterministic actor, safe to share across evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorPolicy {
    pub net: DenseNet,
    pub variant: Variant,
}

impl ActorPolicy {
    pub fn action(&self, s: &Obs) -> f64 {
        let out = self.net.forward(s, 1).expect("actor input is always three-dimensional");
        clamp_action(self.variant, out.output()[0])
    }
}

/// `-(x^T Q x + R u^2)`.
pub fn compute_reward(x: &Obs, u: f64, weights: &CostWeights) -> f64 {
    let q = &weights.q;
    let mut xqx = 0.0;
    for i in 0..OBS_DIM {
        for j in 0..OBS_DIM {
            xqx += x[i] * q[(i, j)] * x[j];
        }
    }
    -(xqx + weights.r * u * u)
}

/// Actor output, plus decaying Gaussian exploration noise when `explore` is set.
pub fn act<R: Rng + ?Sized>(agent: &mut Agent, s: &Obs, explore: bool, rng: &mut R) -> f64 {
    let out = agent
        .actor
        .forward(s, 1)
        .expect("actor input is always three-dimensional");
    let mut a = out.output()[0];
    if explore {
        let z: f64 = rng.sample(StandardNormal);
        a += agent.noise_variance.sqrt() * z;
        agent.noise_variance = (agent.noise_variance * (1.0 - agent.hp.noise_variance_decay)).max(0.0);
    }
    agent.clamp(a)
}

fn flatten_obs(batch: &[Transition], next: bool) -> Vec<f64> {
    batch.iter().flat_map(|t| if next { t.s2 } else { t.s }).collect()
}

fn batch_actions(net: &DenseNet, variant: Variant, s: &[f64], batch: usize) -> Result<(Vec<f64>, crate::neural::Tape)> {
    let tape = net.forward(s, batch)?;
    let a = tape.output().iter().map(|&a| clamp_action(variant, a)).collect();
    Ok((a, tape))
}

/// `r + gamma * Q'(s', pi'(s'))`, with the bootstrap dropped on terminal transitions.
pub fn critic_target(agent: &Agent, batch: &[Transition]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let s2 = flatten_obs(batch, true);
    let (a2, _) = batch_actions(&agent.actor_target, agent.variant, &s2, batch.len())?;
    let (q2, _) = agent.critic_target.forward(&s2, &a2)?;
    Ok(batch
        .iter()
        .zip(q2)
        .map(|(t, q)| if t.done { t.r } else { t.r + agent.hp.gamma * q })
        .collect())
}

/// Mean squared TD error and its gradient with respect to the critic parameters.
pub fn critic_loss_and_grad(agent: &Agent, batch: &[Transition], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = batch.len() as f64;
    let s = flatten_obs(batch, false);
    let a: Vec<f64> = batch.iter().map(|t| t.a).collect();
    let (q, tape) = agent.critic.forward(&s, &a)?;
    let resid: Vec<f64> = q.iter().zip(targets).map(|(q, y)| q - y).collect();
    let loss = resid.iter().map(|e| e * e).sum::<f64>() / n;
    let upstream: Vec<f64> = resid.iter().map(|e| 2.0 * e / n).collect();
    let mut grads = vec![0.0; agent.critic.param_count()];
    agent.critic.backward(&tape, &upstream, Some(&mut grads))?;
    Ok((loss, grads))
}

/// One Adam step on the TD regression; returns the pre-step loss.
pub fn update_critic(agent: &mut Agent, batch: &[Transition]) -> Result<f64> {
    let targets = critic_target(agent, batch)?;
    let (loss, grads) = critic_loss_and_grad(agent, batch, &targets)?;
    let mut params = agent.critic.params();
    let factors = agent.critic.lr_factors(agent.hp.critic_bias_lr_factor);
    adam_update(&mut agent.critic_opt, &mut params, &grads, &factors)?;
    agent.critic.set_params(&params)?;
    Ok(loss)
}

/// Mean `Q(s, pi(s))` over the batch and its gradient with respect to the actor parameters.
pub fn actor_objective_and_grad(agent: &Agent, batch: &[Transition]) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    let s = flatten_obs(batch, false);
    let tape = agent.actor.forward(&s, n)?;
    let a: Vec<f64> = tape.output().to_vec();
    let (q, ctape) = agent.critic.forward(&s, &a)?;
    let objective = q.iter().sum::<f64>() / n as f64;
    let upstream = vec![1.0 / n as f64; n];
    let dq_da = agent.critic.backward(&ctape, &upstream, None)?;
    let mut grads = vec![0.0; agent.actor.param_count()];
    agent.actor.backward(&tape, &dq_da, Some(&mut grads))?;
    Ok((objective, grads))
}

/// One Adam ascent step along the deterministic policy gradient; the critic is untouched.
pub fn update_actor(agent: &mut Agent, batch: &[Transition]) -> Result<f64> {
    let (objective, grads) = actor_objective_and_grad(agent, batch)?;
    let descent: Vec<f64> = grads.iter().map(|g| -g).collect();
    let factors = agent.actor.lr_factors().to_vec();
    adam_update(&mut agent.actor_opt, agent.actor.params_mut(), &descent, &factors)?;
    Ok(objective)
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(online: &[f64], target: &mut [f64], tau: f64) -> Result<()> {
    if online.len() != target.len() {
        return Err(Error::Dimension("online and target parameter counts differ".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

fn soft_update_targets(agent: &mut Agent) -> Result<()> {
    let tau = agent.hp.tau;
    let online = agent.actor.params().to_vec();
    soft_update(&online, agent.actor_target.params_mut(), tau)?;
    let online = agent.critic.params();
    let mut target = agent.critic_target.params();
    soft_update(&online, &mut target, tau)?;
    agent.critic_target.set_params(&target)
}

/// Linear gain of a `Ddpg1` actor.
pub fn extract_gains(agent: &Agent) -> Result<[f64; 3]> {
    if agent.variant != Variant::Ddpg1 {
        return Err(Error::InvalidArgument(
            "only the linear-gain agent has a state-feedback gain".into(),
        ));
    }
    let p = agent.actor.params();
    if p[3] != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "linear actor bias is {} instead of zero",
            p[3]
        )));
    }
    Ok([p[0], p[1], p[2]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub obs: Obs,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

pub trait Environment {
    fn reset(&mut self) -> Obs;
    fn step(&mut self, action: f64) -> Result<EnvStep>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub rewards: Vec<f64>,
}

impl LearningCurve {
    pub fn mean(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let s = self.rewards.get(range)?;
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    pub fn first_mean(&self, n: usize) -> Option<f64> {
        self.mean(0..n.min(self.rewards.len()))
    }

    pub fn last_mean(&self, n: usize) -> Option<f64> {
        let len = self.rewards.len();
        self.mean(len.saturating_sub(n)..len)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,cumulative_reward\n");
        for (i, r) in self.rewards.iter().enumerate() {
            out.push_str(&format!("{},{:.16e}\n", i + 1, r));
        }
        out
    }
}

/// Complete mutable training state: agent, replay, random stream and curve.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub curve: LearningCurve,
}

impl Trainer {
    /// Seeds the random stream from `hp.seed` and initializes a fresh agent.
    pub fn new(variant: Variant, hp: Hyperparams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let buffer = ReplayBuffer::new(hp.buffer_capacity)?;
        let agent = Agent::new(variant, hp, &mut rng)?;
        Ok(Self {
            agent,
            buffer,
            rng,
            curve: LearningCurve::default(),
        })
    }

    pub fn episodes_done(&self) -> usize {
        self.curve.rewards.len()
    }

    /// Runs episodes until `max_episodes` have been completed in total,
    /// calling `on_episode` after each one.
    pub fn run<E: Environment>(
        &mut self,
        env: &mut E,
        max_episodes: usize,
        mut on_episode: impl FnMut(&Trainer),
    ) -> Result<()> {
        while self.episodes_done() < max_episodes {
            let episode = self.episodes_done();
            let total = self.run_episode(env, episode)?;
            self.curve.rewards.push(total);
            on_episode(self);
        }
        Ok(())
    }

    fn run_episode<E: Environment>(&mut self, env: &mut E, episode: usize) -> Result<f64> {
        let diverged = |step: usize, reason: String| Error::Divergence { episode, step, reason };
        let mut s = env.reset();
        let mut total = 0.0;
        for step in 0..self.agent.hp.max_steps {
            let a = act(&mut self.agent, &s, true, &mut self.rng);
            let out = env.step(a)?;
            if !out.reward.is_finite() || out.obs.iter().any(|v| !v.is_finite()) {
                return Err(diverged(
                    step,
                    format!("non-finite reward or observation (reward {})", out.reward),
                ));
            }
            total += out.reward;
            self.buffer.push(Transition {
                s,
                a,
                r: out.reward,
                s2: out.obs,
                done: out.terminal,
            });
            if self.buffer.len() >= self.agent.hp.batch_size {
                let batch = self.buffer.sample(&mut self.rng, self.agent.hp.batch_size)?;
                let loss = update_critic(&mut self.agent, &batch)?;
                let obj = update_actor(&mut self.agent, &batch)?;
                soft_update_targets(&mut self.agent)?;
                if !loss.is_finite() || !obj.is_finite() {
                    return Err(diverged(
                        step,
                        format!("non-finite critic loss {loss} or actor objective {obj}"),
                    ));
                }
                let finite = self.agent.actor.params().iter().all(|p| p.is_finite())
                    && self.agent.critic.params().iter().all(|p| p.is_finite());
                if !finite {
                    return Err(diverged(step, "non-finite network parameter".into()));
                }
            }
            s = out.obs;
            if out.terminal || out.truncated {
                break;
            }
        }
        Ok(total)
    }
}

/// Trains a fresh agent for `hp.max_episodes` episodes.
pub fn train<E: Environment>(variant: Variant, env: &mut E, hp: Hyperparams) -> Result<(Agent, LearningCurve)> {
    let episodes = hp.max_episodes;
    let mut trainer = Trainer::new(variant, hp)?;
    trainer.run(env, episodes, |_| {})?;
    Ok((trainer.agent, trainer.curve))
}
