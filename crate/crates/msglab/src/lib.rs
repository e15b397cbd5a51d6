//! A laboratory for information design between reinforcement-learning agents.
//!
//! The crate is organized around Markov signaling games: a sender with an
//! informational advantage emits a signal each step, a receiver acts on its
//! observation plus the signal, and both collect rewards that depend only on
//! the state and the action. The `learn` module implements the signaling
//! gradient, extended obedience constraints with Lagrangian training, and the
//! baseline algorithms; `oracle` holds exact ground-truth machinery used to
//! cross-check every learned quantity at desk scale.

pub mod agents;
pub mod autodiff;
pub mod env;
pub mod harness;
pub mod learn;
pub mod oracle;
