//! Toy-scale laboratory for KV-cache reuse in LLM serving.
//!
//! The crate wires together a seeded attention-only transformer
//! ([`model`]), first-order deviation analysis ([`deviation`]), deviation-aware
//! token selection for recomputation ([`selector`]), rolling-hash token
//! matching ([`matcher`]), a persistent KV pool ([`store`]), hit-rate-aware
//! batch scheduling ([`scheduler`]) and a deterministic serving simulator
//! ([`sim`]).

pub mod decode;
pub mod deviation;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod matcher;
pub mod model;
pub mod reuse;
pub mod scheduler;
pub mod selector;
pub mod sim;
pub mod store;

pub use error::{Error, Result};
