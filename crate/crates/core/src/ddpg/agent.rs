//! Actor-critic training of the sell quantity from `(t/T, s/Q̄)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Adam, Layer, Mlp};
use super::replay::{ReplayBuffer, Transition};
use crate::allocation::{periodic_revenue, rank, RankedProfile};
use crate::market::{MarketConfig, MarketSpec};
use crate::rng::{self, StreamRng};
use crate::sell_policy::SellPolicy;
use crate::{Error, Result};

pub const FILE_VERSION: u32 = 1;
pub const FILE_KIND: &str = "ddpg-actor";

/// Output-layer initialisation half-width for both networks.
const FINAL_INIT: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub soft_tau: f64,
    pub minibatch: usize,
    /// Share of episodes acting uniformly at random before any training.
    pub random_fraction: f64,
    pub episodes: usize,
    /// Exploration noise standard deviation as a fraction of `Q̄`, at the start and the end
    /// of the trained phase (linear in between).
    pub noise_start: f64,
    pub noise_end: f64,
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    /// Training aborts once a minibatch critic loss exceeds this.
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            soft_tau: 1e-4,
            minibatch: 64,
            random_fraction: 0.1,
            episodes: 10_000,
            noise_start: 0.1,
            noise_end: 0.01,
            hidden: vec![64, 64, 64],
            replay_capacity: 100_000,
            divergence_limit: 1e6,
            seed: 1,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("ddpg: {what}")));
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            return bad("soft update rate must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return bad("random fraction must lie in [0, 1]");
        }
        if self.minibatch == 0 || self.episodes == 0 || self.replay_capacity == 0 {
            return bad("minibatch, episodes and replay capacity must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.noise_start >= 0.0 && self.noise_end >= 0.0) {
            return bad("noise scales must be nonnegative");
        }
        Ok(())
    }

    pub fn random_episodes(&self) -> usize {
        (self.random_fraction * self.episodes as f64).round() as usize
    }
}

/// Deterministic actor: sells `μ(t/T, s/Q̄) · s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorPolicy {
    pub net: Mlp,
    pub horizon: usize,
    pub stock_cap: f64,
}

impl ActorPolicy {
    pub fn state(&self, period: usize, stock: f64) -> [f64; 2] {
        [period as f64 / self.horizon as f64, stock / self.stock_cap]
    }

    /// Fraction of the remaining stock to sell.
    pub fn fraction(&self, period: usize, stock: f64) -> f64 {
        self.net.forward_one(&self.state(period, stock))[0]
    }

    pub fn to_json(&self, market: Option<&MarketConfig>, seed: u64, episodes: usize) -> Result<String> {
        let file = ActorFile {
            version: FILE_VERSION,
            kind: FILE_KIND.into(),
            horizon: self.horizon,
            stock_cap: self.stock_cap,
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                    activation: l.activation,
                })
                .collect(),
            seed,
            episodes,
            market: market.cloned(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<MarketConfig>)> {
        let file: ActorFile = serde_json::from_str(text)?;
        if file.version != FILE_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: FILE_VERSION,
            });
        }
        if file.kind != FILE_KIND {
            return Err(Error::InvalidInput(format!(
                "expected a {FILE_KIND} file, found {}",
                file.kind
            )));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for l in file.layers {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::InvalidInput("layer shape mismatch".into()));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                bias: l.bias.into(),
                activation: l.activation,
            });
        }
        let shapes_chain = layers
            .windows(2)
            .all(|w| w[0].weights.nrows() == w[1].weights.ncols());
        if layers.is_empty()
            || !shapes_chain
            || layers[0].weights.ncols() != 2
            || layers.last().unwrap().weights.nrows() != 1
        {
            return Err(Error::InvalidInput("actor must map 2 inputs to 1 output".into()));
        }
        Ok((
            Self {
                net: Mlp { layers },
                horizon: file.horizon,
                stock_cap: file.stock_cap,
            },
            file.market,
        ))
    }
}

impl SellPolicy for ActorPolicy {
    fn sell_quantity(&self, _ranked: &RankedProfile, period: usize, stock: f64) -> f64 {
        self.fraction(period, stock) * stock
    }
}

/// On-disk actor: shapes plus row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorFile {
    pub version: u32,
    pub kind: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "Q_bar")]
    pub stock_cap: f64,
    pub layers: Vec<LayerFile>,
    pub seed: u64,
    pub episodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    /// Discounted reward of each training episode (with exploration).
    pub episode_rewards: Vec<f64>,
    /// Mean minibatch critic loss of each trained episode.
    pub critic_losses: Vec<f64>,
}

/// Online and target networks plus their optimisers and the replay memory.
pub struct DdpgTrainer<'a> {
    spec: &'a MarketSpec,
    cfg: DdpgConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub buffer: ReplayBuffer,
    rng: StreamRng,
    env_seed: u64,
    episode: usize,
    pub history: TrainingHistory,
}

impl<'a> DdpgTrainer<'a> {
    pub fn new(spec: &'a MarketSpec, cfg: DdpgConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(cfg.seed, 0);
        let mut widths = vec![2];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let actor = Mlp::new(&widths, Activation::Tanh, Activation::Sigmoid, FINAL_INIT, &mut init)?;
        widths[0] = 3;
        let critic = Mlp::new(&widths, Activation::Tanh, Activation::Identity, FINAL_INIT, &mut init)?;
        Ok(Self {
            spec,
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            rng: rng::stream(cfg.seed, 1),
            env_seed: rng::derive_seed(cfg.seed, 2),
            episode: 0,
            history: TrainingHistory::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.cfg
    }

    pub fn episodes_done(&self) -> usize {
        self.episode
    }

    pub fn actor_policy(&self) -> ActorPolicy {
        ActorPolicy {
            net: self.actor.clone(),
            horizon: self.spec.horizon(),
            stock_cap: self.spec.stock(),
        }
    }

    /// Plays the random-action episodes.
    pub fn run_random_phase(&mut self) -> Result<()> {
        while self.episode < self.cfg.random_episodes().min(self.cfg.episodes) {
            self.run_episode()?;
        }
        Ok(())
    }

    pub fn train(&mut self) -> Result<()> {
        while self.episode < self.cfg.episodes {
            self.run_episode()?;
        }
        Ok(())
    }

    fn noise_scale(&self) -> f64 {
        let random = self.cfg.random_episodes();
        let trained = self.cfg.episodes.saturating_sub(random);
        let progress = if trained > 1 {
            (self.episode - random) as f64 / (trained - 1) as f64
        } else {
            0.0
        };
        self.spec.stock() * (self.cfg.noise_start + (self.cfg.noise_end - self.cfg.noise_start) * progress)
    }

    /// One episode; random actions during the random phase, noisy actor actions with one
    /// update per step afterwards.
    pub fn run_episode(&mut self) -> Result<()> {
        let horizon = self.spec.horizon();
        let cap = self.spec.stock();
        let delta = self.spec.discount();
        let random = self.episode < self.cfg.random_episodes();
        let sigma = if random { 0.0 } else { self.noise_scale() };
        let policy = self.actor_policy();
        let mut stock = cap;
        let mut total = 0.0;
        let mut losses = Vec::new();
        for t in 1..=horizon {
            let mut g = rng::stream(self.env_seed, (self.episode * horizon + t - 1) as u64);
            let ranked = rank(&self.spec.sample_profile(&mut g), self.spec)?;
            let x = if random {
                self.rng.random::<f64>() * stock
            } else {
                let z: f64 = self.rng.sample(StandardNormal);
                (policy.fraction(t, stock) * stock + sigma * z).clamp(0.0, stock)
            };
            let reward = periodic_revenue(&ranked, x);
            let next = (stock - x.min(ranked.total_demand())).max(0.0);
            total += delta.powi(t as i32 - 1) * reward;
            self.buffer.push(Transition {
                state: [t as f64 / horizon as f64, stock / cap],
                action: x / cap,
                reward,
                next_state: [(t + 1) as f64 / horizon as f64, next / cap],
                terminal: t == horizon,
            });
            stock = next;
            if !random {
                let loss = self.update()?;
                losses.push(loss);
            }
        }
        self.history.episode_rewards.push(total);
        if !losses.is_empty() {
            self.history
                .critic_losses
                .push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        self.episode += 1;
        Ok(())
    }

    /// One minibatch step on critic, then actor, then both targets. Returns the critic loss.
    pub fn update(&mut self) -> Result<f64> {
        let batch = self.buffer.sample(&mut self.rng, self.cfg.minibatch);
        let b = batch.len();
        if b == 0 {
            return Ok(0.0);
        }
        let delta = self.spec.discount();
        let states = DMatrix::from_fn(2, b, |r, c| batch[c].state[r]);
        let next_states = DMatrix::from_fn(2, b, |r, c| batch[c].next_state[r]);

        // TD target r + δ Q'(s', μ'(s') s')
        let next_frac = self.target_actor.forward(&next_states);
        let next_in = DMatrix::from_fn(3, b, |r, c| match r {
            2 => next_frac[(0, c)] * next_states[(1, c)],
            _ => next_states[(r, c)],
        });
        let next_q = self.target_critic.forward(&next_in);
        let targets: Vec<f64> = (0..b)
            .map(|c| {
                let boot = if batch[c].terminal { 0.0 } else { delta * next_q[(0, c)] };
                batch[c].reward + boot
            })
            .collect();

        let critic_in = DMatrix::from_fn(3, b, |r, c| match r {
            2 => batch[c].action,
            _ => states[(r, c)],
        });
        let tape = self.critic.forward_tape(&critic_in);
        let q = tape.output();
        let mut loss = 0.0;
        let upstream = DMatrix::from_fn(1, b, |_, c| {
            let e = q[(0, c)] - targets[c];
            loss += e * e;
            2.0 * e / b as f64
        });
        let loss = loss / b as f64;
        if !loss.is_finite() || loss > self.cfg.divergence_limit {
            return Err(Error::Divergence { loss });
        }
        let (grad, _) = self.critic.backward(&tape, &upstream);
        self.critic_opt.step(&mut self.critic, &grad);

        // deterministic policy gradient through the updated critic
        let actor_tape = self.actor.forward_tape(&states);
        let frac = actor_tape.output();
        let policy_in = DMatrix::from_fn(3, b, |r, c| match r {
            2 => frac[(0, c)] * states[(1, c)],
            _ => states[(r, c)],
        });
        let ctape = self.critic.forward_tape(&policy_in);
        let (_, dq_din) = self
            .critic
            .backward(&ctape, &DMatrix::from_element(1, b, -1.0 / b as f64));
        let actor_up = DMatrix::from_fn(1, b, |_, c| dq_din[(2, c)] * states[(1, c)]);
        let (agrad, _) = self.actor.backward(&actor_tape, &actor_up);
        self.actor_opt.step(&mut self.actor, &agrad);

        self.target_critic.soft_update(&self.critic, self.cfg.soft_tau);
        self.target_actor.soft_update(&self.actor, self.cfg.soft_tau);
        Ok(loss)
    }
}

/// Trained actor and critic with their targets.
#[derive(Clone, Debug)]
pub struct TrainedDdpg {
    pub actor: ActorPolicy,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub history: TrainingHistory,
}

pub fn train_ddpg(spec: &MarketSpec, cfg: &DdpgConfig) -> Result<TrainedDdpg> {
    let mut trainer = DdpgTrainer::new(spec, cfg.clone())?;
    trainer.train()?;
    Ok(TrainedDdpg {
        actor: trainer.actor_policy(),
        critic: trainer.critic,
        target_actor: trainer.target_actor,
        target_critic: trainer.target_critic,
        history: trainer.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(episodes: usize, random_fraction: f64) -> DdpgConfig {
        DdpgConfig {
            episodes,
            random_fraction,
            hidden: vec![8, 8],
            minibatch: 16,
            ..Default::default()
        }
    }

    #[test]
    fn random_phase_fills_buffer() {
        let spec = MarketSpec::table1(10, 10.0);
        let mut tr = DdpgTrainer::new(&spec, small(20, 0.1)).unwrap();
        tr.run_random_phase().unwrap();
        assert_eq!(tr.buffer.len(), 2 * 10);
        assert!(tr.history.critic_losses.is_empty());
    }

    #[test]
    fn actions_stay_within_stock() {
        let spec = MarketSpec::table1(5, 3.0);
        let mut tr = DdpgTrainer::new(&spec, small(30, 0.2)).unwrap();
        tr.train().unwrap();
        for t in tr.buffer.iter() {
            assert!(t.action >= 0.0 && t.action <= t.state[1] + 1e-12);
            assert!(t.next_state[1] >= 0.0 && t.next_state[1] <= t.state[1] + 1e-12);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let spec = MarketSpec::table1(4, 4.0);
        let a = train_ddpg(&spec, &small(12, 0.25)).unwrap();
        let b = train_ddpg(&spec, &small(12, 0.25)).unwrap();
        assert_eq!(a.actor, b.actor);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn actor_json_round_trip() {
        let spec = MarketSpec::table1(4, 4.0);
        let a = train_ddpg(&spec, &small(4, 0.5)).unwrap().actor;
        let text = a.to_json(Some(spec.config()), 1, 4).unwrap();
        let (back, market) = ActorPolicy::from_json(&text).unwrap();
        assert_eq!(back, a);
        assert_eq!(market.as_ref(), Some(spec.config()));
    }

    #[test]
    fn invalid_config_rejected() {
        let spec = MarketSpec::table1(4, 4.0);
        for cfg in [
            DdpgConfig { actor_lr: 0.0, ..small(4, 0.1) },
            DdpgConfig { random_fraction: 1.5, ..small(4, 0.1) },
            DdpgConfig { soft_tau: 0.0, ..small(4, 0.1) },
        ] {
            assert!(DdpgTrainer::new(&spec, cfg).is_err());
        }
    }
}
