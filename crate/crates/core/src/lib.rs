//! Core of the Hermes BFT protocol: message types with a canonical wire
//! encoding, the per-node deterministic state machine (normal mode,
//! synchronization, view change with block recovery), deterministic
//! committee selection with exact failure-probability analysis, and a
//! leader-broadcast baseline protocol used for bandwidth comparisons.
//!
//! Everything in this crate is a pure state machine or a pure function:
//! nodes consume inputs one at a time and return the messages they want
//! sent. Transport, timers and clients live in `hermes-sim`.

pub mod baseline;
pub mod committee;
pub mod crypto;
pub mod encoding;
pub mod msg;
pub mod prob;
pub mod state;
pub mod types;

pub use committee::CommitteeAssignment;
pub use crypto::{AggregateSignature, Keyring, NodeSecret, Signature, SignerId};
pub use state::{Config, Destination, HarnessEvent, Input, NodeState, Output, StepOutput};
pub use types::{Block, BlockHeader, Digest32, Transaction};
