//! DDPG actor-critic search over the six bit-ratio actions.
//!
//! The episodic environment walks bits 2..=7 along the sorted channel list
//! under the hard size budget; the terminal reward is the top-1 accuracy of
//! the fine-tuned candidate policy (or an injected scoring function in tests).
//! Rewards are terminal-only with gamma = 1, so the critic bootstraps the
//! final accuracy back through the episode.

use crate::alloc::{AllocationRun, QuantPolicy, SortedChannelList, RATIO_STEPS};
use crate::data::Dataset;
use crate::engine::{dense_backward_input, dense_forward, dense_grad_weights};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::quant::{apply_policy, SawbCoefficients};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::train::train_epoch;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const OBS_DIM: usize = 5;
pub const REPLAY_CAPACITY: usize = 600;
pub const UPDATE_BATCH: usize = 64;
pub const HIDDEN: usize = 300;

/// Normalized observation: [k, n_remains, s_i, e_i, a_prev], all in [0, 1].
pub type Observation = [f64; OBS_DIM];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: f64,
    pub reward: f64,
    pub next_obs: Observation,
    pub terminal: bool,
}

/// Bounded FIFO store of transitions.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            buf: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.buf[i]
    }
}

// ---------------------------------------------------------------------------
// Agent networks: small MLPs on the engine's dense kernels.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub sigmoid_out: bool,
}

pub struct MlpCache {
    /// acts[0] = input, acts[i+1] = output of layer i (post-activation).
    acts: Vec<Vec<f64>>,
    n: usize,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, sigmoid_out: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let last = sizes.len() - 2;
        for (li, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let data: Vec<f64> = if li == last {
                // near-zero final layer: the sigmoid actor starts at 0.5
                (0..fan_in * fan_out)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * 3e-3)
                    .collect()
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect()
            };
            weights.push(Tensor::new(vec![fan_out, fan_in], data).unwrap());
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp {
            sizes,
            weights,
            biases,
            sigmoid_out,
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> MlpCache {
        let mut acts = vec![x.to_vec()];
        for (li, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (in_dim, out_dim) = (self.sizes[li], self.sizes[li + 1]);
            let mut y = vec![0.0; n * out_dim];
            dense_forward(acts[li].as_slice(), n, in_dim, out_dim, w.data(), Some(b.data()), &mut y, None);
            let last = li == self.weights.len() - 1;
            if !last {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            } else if self.sigmoid_out {
                for v in &mut y {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            acts.push(y);
        }
        MlpCache { acts, n }
    }

    pub fn output(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward(x, n).acts.last().unwrap().clone()
    }

    /// Backward from an output-space gradient; returns per-layer (gw, gb) and
    /// the input gradient.
    pub fn backward(&self, cache: &MlpCache, gout: &[f64]) -> (Vec<(Vec<f64>, Vec<f64>)>, Vec<f64>) {
        let n = cache.n;
        let layers = self.weights.len();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (vec![0.0; w.numel()], vec![0.0; b.numel()]))
            .collect();

        let mut gy = gout.to_vec();
        if self.sigmoid_out {
            let y = cache.acts.last().unwrap();
            for (g, &yv) in gy.iter_mut().zip(y) {
                *g *= yv * (1.0 - yv);
            }
        }
        for li in (0..layers).rev() {
            let (in_dim, out_dim) = (self.sizes[li], self.sizes[li + 1]);
            let x = &cache.acts[li];
            {
                let (gw, gb) = &mut grads[li];
                dense_grad_weights(x, &gy, n, in_dim, out_dim, gw, Some(gb), None);
            }
            let mut gx = vec![0.0; n * in_dim];
            dense_backward_input(&gy, n, in_dim, out_dim, self.weights[li].data(), &mut gx);
            if li > 0 {
                // relu mask of the hidden activation
                for (g, &xv) in gx.iter_mut().zip(x) {
                    if xv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            gy = gx;
        }
        (grads, gy)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            out.push(t.data_mut());
        }
        out
    }
}

/// Adam optimizer state for one Mlp.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let shapes: Vec<usize> = net
            .weights
            .iter()
            .chain(net.biases.iter())
            .map(Tensor::numel)
            .collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[(Vec<f64>, Vec<f64>)]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let flat_grads: Vec<&[f64]> = grads
            .iter()
            .map(|(gw, _)| gw.as_slice())
            .chain(grads.iter().map(|(_, gb)| gb.as_slice()))
            .collect();
        let params = net.param_slices_mut();
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(flat_grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// Actor + critic with target copies and soft updates.
#[derive(Debug, Clone)]
pub struct AgentNets {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub tau: f64,
    pub gamma: f64,
}

impl AgentNets {
    pub fn new(seed: u64, tau: f64, gamma: f64, actor_lr: f64, critic_lr: f64) -> Self {
        let mut rng = substream(seed, "agent-init", &[]);
        let actor = Mlp::new(vec![OBS_DIM, HIDDEN, HIDDEN, 1], true, &mut rng);
        let critic = Mlp::new(vec![OBS_DIM + 1, HIDDEN, HIDDEN, 1], false, &mut rng);
        let actor_opt = Adam::new(&actor, actor_lr);
        let critic_opt = Adam::new(&critic, critic_lr);
        AgentNets {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            tau,
            gamma,
        }
    }

    /// target <- (1 - tau) * target + tau * online
    pub fn soft_update(&mut self) {
        for (t, o) in [
            (&mut self.actor_target, &self.actor),
            (&mut self.critic_target, &self.critic),
        ] {
            for (tt, ot) in t
                .weights
                .iter_mut()
                .chain(t.biases.iter_mut())
                .zip(o.weights.iter().chain(o.biases.iter()))
            {
                for (a, b) in tt.data_mut().iter_mut().zip(ot.data()) {
                    *a = (1.0 - self.tau) * *a + self.tau * b;
                }
            }
        }
    }
}

/// Actor forward plus additive Gaussian exploration noise, clipped to [0, 1].
pub fn act(actor: &Mlp, obs: &Observation, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let a = actor.output(obs, 1)[0];
    let z: f64 = StandardNormal.sample(rng);
    (a + sigma * z).clamp(0.0, 1.0)
}

/// Exploration schedule: constant sigma0 for the first `explore` episodes,
/// then exponential decay hitting `sigma_final` at the last episode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub episodes: usize,
    pub explore: usize,
    pub sigma0: f64,
    pub sigma_final: f64,
}

impl NoiseSchedule {
    /// 800 episodes: 100 at 0.5, then decay to 0.01.
    pub fn paper() -> Self {
        NoiseSchedule {
            episodes: 800,
            explore: 100,
            sigma0: 0.5,
            sigma_final: 0.01,
        }
    }

    /// Same 1/8 explore split, scaled to a different episode count.
    pub fn scaled(episodes: usize) -> Self {
        NoiseSchedule {
            episodes,
            explore: (episodes / 8).max(1),
            sigma0: 0.5,
            sigma_final: 0.01,
        }
    }

    pub fn sigma(&self, episode: usize) -> Result<f64> {
        if episode >= self.episodes {
            return Err(Error::Invalid(format!(
                "episode {episode} outside schedule of {} episodes",
                self.episodes
            )));
        }
        if episode < self.explore || self.episodes - 1 <= self.explore {
            return Ok(self.sigma0);
        }
        let span = (self.episodes - 1 - self.explore) as f64;
        let delta = (self.sigma_final / self.sigma0).powf(1.0 / span);
        Ok(self.sigma0 * delta.powi((episode - self.explore) as i32))
    }
}

// ---------------------------------------------------------------------------
// Environment.
// ---------------------------------------------------------------------------

pub struct RatioEnv<'a> {
    run: AllocationRun<'a>,
    budget_bits: f64,
    total_channels: usize,
    total_elements: usize,
    prev_action: f64,
}

pub struct StepOutcome {
    pub clamped_action: f64,
    pub was_clamped: bool,
    pub next_obs: Observation,
    /// The finished policy once the bit-7 step ran (remainder goes to 8 bits).
    pub policy: Option<QuantPolicy>,
}

impl<'a> RatioEnv<'a> {
    /// Fresh episode at bit-step 0 (bit 2). Errors if the budget cannot be met
    /// even by an all-2-bit assignment.
    pub fn reset(sorted: &'a SortedChannelList, budget_bits: f64) -> Result<(Self, Observation)> {
        let floor = sorted.total_elements as u64 * 2;
        if (floor as f64) > budget_bits {
            return Err(Error::Budget(format!(
                "budget {budget_bits} bits below the all-2-bit floor {floor}"
            )));
        }
        let env = RatioEnv {
            run: AllocationRun::new(sorted),
            budget_bits,
            total_channels: sorted.entries.len(),
            total_elements: sorted.total_elements,
            prev_action: 0.0,
        };
        let obs = env.observation();
        Ok((env, obs))
    }

    pub fn observation(&self) -> Observation {
        let (s, e) = self.run.last_segment();
        [
            // the terminal observation (after the 6th step) saturates at 1
            self.run.steps_done().min(RATIO_STEPS - 1) as f64 / (RATIO_STEPS - 1) as f64,
            self.run.remaining_elements() as f64 / self.total_elements as f64,
            s as f64 / self.total_channels as f64,
            e as f64 / self.total_channels as f64,
            self.prev_action,
        ]
    }

    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        let res = self.run.resolve_step(action, Some(self.budget_bits))?;
        self.run.apply_step(res);
        self.prev_action = res.action;
        let policy = if self.run.is_complete() {
            Some(self.run.finish()?)
        } else {
            None
        };
        Ok(StepOutcome {
            clamped_action: res.action,
            was_clamped: res.clamped,
            next_obs: self.observation(),
            policy,
        })
    }
}

// ---------------------------------------------------------------------------
// Updates and the search loop.
// ---------------------------------------------------------------------------

/// One DDPG update from a uniform replay minibatch: critic regresses to
/// r + gamma * (1 - done) * Q'(s', mu'(s')), the actor ascends the critic, and
/// both targets are soft-updated. No-op (false) while the buffer holds fewer
/// than `batch` transitions.
pub fn update(nets: &mut AgentNets, buffer: &ReplayBuffer, batch: usize, rng: &mut ChaCha8Rng) -> bool {
    if buffer.len() < batch {
        return false;
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..buffer.len())).collect();

    // critic targets
    let mut next_in = vec![0.0; batch * OBS_DIM];
    for (k, &i) in idx.iter().enumerate() {
        next_in[k * OBS_DIM..(k + 1) * OBS_DIM].copy_from_slice(&buffer.get(i).next_obs);
    }
    let next_actions = nets.actor_target.output(&next_in, batch);
    let mut next_sa = vec![0.0; batch * (OBS_DIM + 1)];
    for k in 0..batch {
        next_sa[k * (OBS_DIM + 1)..k * (OBS_DIM + 1) + OBS_DIM]
            .copy_from_slice(&next_in[k * OBS_DIM..(k + 1) * OBS_DIM]);
        next_sa[k * (OBS_DIM + 1) + OBS_DIM] = next_actions[k];
    }
    let q_next = nets.critic_target.output(&next_sa, batch);
    let targets: Vec<f64> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let t = buffer.get(i);
            t.reward + nets.gamma * if t.terminal { 0.0 } else { q_next[k] }
        })
        .collect();

    // critic regression step
    let mut sa = vec![0.0; batch * (OBS_DIM + 1)];
    for (k, &i) in idx.iter().enumerate() {
        let t = buffer.get(i);
        sa[k * (OBS_DIM + 1)..k * (OBS_DIM + 1) + OBS_DIM].copy_from_slice(&t.obs);
        sa[k * (OBS_DIM + 1) + OBS_DIM] = t.action;
    }
    let cache = nets.critic.forward(&sa, batch);
    let q = cache.acts.last().unwrap().clone();
    let gout: Vec<f64> = q
        .iter()
        .zip(&targets)
        .map(|(qi, ti)| 2.0 * (qi - ti) / batch as f64)
        .collect();
    let (cgrads, _) = nets.critic.backward(&cache, &gout);
    nets.critic_opt.step(&mut nets.critic, &cgrads);

    // actor ascent through the (fresh) critic
    let mut obs_in = vec![0.0; batch * OBS_DIM];
    for (k, &i) in idx.iter().enumerate() {
        obs_in[k * OBS_DIM..(k + 1) * OBS_DIM].copy_from_slice(&buffer.get(i).obs);
    }
    let acache = nets.actor.forward(&obs_in, batch);
    let actions = acache.acts.last().unwrap().clone();
    let mut sa2 = vec![0.0; batch * (OBS_DIM + 1)];
    for k in 0..batch {
        sa2[k * (OBS_DIM + 1)..k * (OBS_DIM + 1) + OBS_DIM]
            .copy_from_slice(&obs_in[k * OBS_DIM..(k + 1) * OBS_DIM]);
        sa2[k * (OBS_DIM + 1) + OBS_DIM] = actions[k];
    }
    let ccache = nets.critic.forward(&sa2, batch);
    let neg_mean: Vec<f64> = vec![-1.0 / batch as f64; batch];
    let (_, ginput) = nets.critic.backward(&ccache, &neg_mean);
    let ga: Vec<f64> = (0..batch)
        .map(|k| ginput[k * (OBS_DIM + 1) + OBS_DIM])
        .collect();
    let (agrads, _) = nets.actor.backward(&acache, &ga);
    nets.actor_opt.step(&mut nets.actor, &agrads);

    nets.soft_update();
    true
}

/// Reward of a candidate policy: apply it, fine-tune for one epoch with
/// straight-through gradients, return held-out top-1. The fine-tuned model is
/// discarded; only the score flows back to the agent.
#[allow(clippy::too_many_arguments)]
pub fn reward_of(
    policy: &QuantPolicy,
    model: &Model,
    data: &Dataset,
    coeffs: &SawbCoefficients,
    pact_alphas: Option<&[(String, Vec<f64>)]>,
    finetune_lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let quantized = apply_policy(model, policy, coeffs, pact_alphas)?;
    let (_, top1) = train_epoch(&quantized, data, finetune_lr, seed, batch_size)?;
    Ok(top1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub actions: [f64; RATIO_STEPS],
    pub clamped_actions: [f64; RATIO_STEPS],
    pub avg_bits: f64,
    pub compression: f64,
    pub reward: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_policy: QuantPolicy,
    pub best_reward: f64,
    pub best_episode: usize,
    pub log: Vec<EpisodeLog>,
    /// Total environment transitions recorded (episodes x 6).
    pub transitions: usize,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub episodes: usize,
    pub seed: u64,
    pub noise: NoiseSchedule,
    pub tau: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub update_batch: usize,
    pub replay_capacity: usize,
}

impl SearchConfig {
    pub fn new(episodes: usize, seed: u64) -> Self {
        SearchConfig {
            episodes,
            seed,
            noise: NoiseSchedule::scaled(episodes),
            tau: 0.01,
            gamma: 1.0,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            update_batch: UPDATE_BATCH,
            replay_capacity: REPLAY_CAPACITY,
        }
    }
}

/// Full episode loop: reset -> 6 steps -> terminal reward -> replay insert ->
/// one update per environment step once the buffer holds a minibatch. Tracks
/// the best-reward policy. Deterministic given (config, reward function).
pub fn run_search(
    sorted: &SortedChannelList,
    budget_bits: f64,
    cfg: &SearchConfig,
    reward_fn: &mut dyn FnMut(&QuantPolicy) -> Result<f64>,
) -> Result<SearchResult> {
    let mut nets = AgentNets::new(cfg.seed, cfg.tau, cfg.gamma, cfg.actor_lr, cfg.critic_lr);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut noise_rng = substream(cfg.seed, "noise", &[]);
    let mut replay_rng = substream(cfg.seed, "replay", &[]);

    let mut best: Option<(f64, QuantPolicy, usize)> = None;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut transitions = 0usize;

    for episode in 0..cfg.episodes {
        let sigma = cfg.noise.sigma(episode)?;
        let (mut env, mut obs) = RatioEnv::reset(sorted, budget_bits)?;
        let mut actions = [0.0; RATIO_STEPS];
        let mut clamped = [0.0; RATIO_STEPS];
        let mut pending: Option<(Observation, f64, Observation)> = None;
        let mut policy = None;

        for k in 0..RATIO_STEPS {
            let a = act(&nets.actor, &obs, sigma, &mut noise_rng);
            let out = env.step(a)?;
            actions[k] = a;
            clamped[k] = out.clamped_action;

            // the transition completed by the PREVIOUS step has reward 0
            if let Some((pobs, pact, pnext)) = pending.take() {
                buffer.push(Transition {
                    obs: pobs,
                    action: pact,
                    reward: 0.0,
                    next_obs: pnext,
                    terminal: false,
                });
                transitions += 1;
                update(&mut nets, &buffer, cfg.update_batch, &mut replay_rng);
            }
            pending = Some((obs, out.clamped_action, out.next_obs));
            obs = out.next_obs;
            policy = out.policy;
        }

        let policy = policy.expect("six steps complete the assignment");
        let reward = reward_fn(&policy)?;
        let (pobs, pact, pnext) = pending.take().expect("terminal step recorded");
        buffer.push(Transition {
            obs: pobs,
            action: pact,
            reward,
            next_obs: pnext,
            terminal: true,
        });
        transitions += 1;
        update(&mut nets, &buffer, cfg.update_batch, &mut replay_rng);

        if best.as_ref().map_or(true, |(r, _, _)| reward > *r) {
            best = Some((reward, policy.clone(), episode));
        }
        log.push(EpisodeLog {
            episode,
            actions,
            clamped_actions: clamped,
            avg_bits: policy.avg_bits,
            compression: policy.compression,
            reward,
            sigma,
        });
    }

    let (best_reward, best_policy, best_episode) = best.expect("at least one episode");
    Ok(SearchResult {
        best_policy,
        best_reward,
        best_episode,
        log,
        transitions,
    })
}
