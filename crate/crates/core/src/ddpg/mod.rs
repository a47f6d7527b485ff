//! Deep deterministic policy gradient learner for the per-period sell quantity.
//!
//! The actor sees only the normalised period and remaining stock, not the bids, and
//! outputs the fraction of the stock to sell.

pub mod agent;
pub mod mlp;
pub mod replay;

pub use agent::{train_ddpg, ActorPolicy, DdpgConfig, DdpgTrainer, TrainedDdpg, TrainingHistory};
pub use mlp::{gradient_check, Activation, Adam, Gradients, Mlp};
pub use replay::{ReplayBuffer, Transition};

use crate::harness::{evaluate, EvalSummary};
use crate::market::MarketSpec;
use crate::Result;

/// Mean discounted reward of the noiseless actor over `episodes` sampled horizons.
pub fn evaluate_policy(actor: &ActorPolicy, spec: &MarketSpec, episodes: usize, seed: u64) -> Result<EvalSummary> {
    evaluate(spec, actor, episodes, seed)
}
