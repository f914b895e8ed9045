//! Desk-scale pipeline that post-trains a flow-matching trajectory generator
//! against an executability reward.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] / [`graph`] / [`optim`]: dense f64 tensors, a tape-based
//!   reverse-mode gradient engine, and the AdamW optimizer shared by every
//!   training loop.
//! - [`env`]: a synthetic planar arm — kinematics, frame rendering, scripted
//!   expert demonstrations, visual artifact injection, and safety-limited
//!   execution of action sequences.
//! - [`idm`]: the inverse dynamics model (conv stack + spatial softmax + MLP)
//!   that decodes a window of frames into the action at the window center.
//! - [`flow`]: the flow-matching generator over action-trajectory latents,
//!   with deterministic ODE sampling and a marginal-preserving SDE sampler
//!   whose Gaussian transitions carry per-step log-densities.
//! - [`reward`]: finite-difference kinematics of decoded actions, Huber
//!   smoothness penalties, limit-violation penalties, and the bounded reward.
//! - [`grpo`]: group-relative policy optimization of the generator against
//!   the frozen-IDM reward, with a reward-hacking monitor.
//! - [`pipeline`]: stage orchestration behind the `eva` CLI.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod flow;
pub mod graph;
pub mod grpo;
pub mod idm;
pub mod optim;
pub mod pipeline;
pub mod reward;
pub mod rng;
pub mod tensor;

pub use error::{EvaError, Result};
