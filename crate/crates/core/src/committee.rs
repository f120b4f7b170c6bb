//! Deterministic committee and primary selection.
//!
//! Every node derives the same assignment for an epoch trial from the run
//! seed alone, so no extra agreement round is needed. The randomness stream
//! is SHA-256 of (seed || trial || counter) consumed as big-endian 64-bit
//! words; uniform draws use rejection sampling so there is no modulo bias
//! and the output is identical across implementations.

use std::collections::BTreeSet;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::crypto::SignerId;

/// The committee and primary in force for one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitteeAssignment {
    pub trial: u64,
    pub members: BTreeSet<SignerId>,
    pub primary: SignerId,
}

impl CommitteeAssignment {
    pub fn is_member(&self, id: SignerId) -> bool {
        self.members.contains(&id)
    }

    pub fn is_primary(&self, id: SignerId) -> bool {
        self.primary == id
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectError {
    #[error("bad parameters: n={n}, c={c} (need 1 <= c <= n-1)")]
    BadParams { n: u32, c: u32 },
}

/// Deterministic word stream: SHA-256(seed || label || counter) yielding
/// four u64 words per hash.
pub struct HashRng {
    seed: [u8; 32],
    label: u64,
    counter: u64,
    buf: [u8; 32],
    used: usize,
}

impl HashRng {
    pub fn new(seed: [u8; 32], label: u64) -> Self {
        HashRng { seed, label, counter: 0, buf: [0; 32], used: 32 }
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.used >= 32 {
            let mut h = Sha256::new();
            h.update(self.seed);
            h.update(self.label.to_be_bytes());
            h.update(self.counter.to_be_bytes());
            self.buf = h.finalize().into();
            self.counter += 1;
            self.used = 0;
        }
        let w = u64::from_be_bytes(self.buf[self.used..self.used + 8].try_into().unwrap());
        self.used += 8;
        w
    }

    /// Uniform draw in `[0, bound)` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let w = self.next_u64();
            if w < zone {
                return w % bound;
            }
        }
    }

    /// Uniform draw in `[0, bound)` as f64-free probability test helper.
    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.below(den) < num
    }
}

/// Sample `c` committee members without replacement from `[0, n)`, then the
/// primary uniformly from the remaining `n - c` ids.
pub fn select_committee(
    run_seed: &[u8; 32],
    trial: u64,
    n: u32,
    c: u32,
) -> Result<CommitteeAssignment, SelectError> {
    if c == 0 || c > n.saturating_sub(1) {
        return Err(SelectError::BadParams { n, c });
    }
    let mut rng = HashRng::new(*run_seed, trial);
    let mut pool: Vec<u32> = (0..n).collect();
    let mut members = BTreeSet::new();
    for _ in 0..c {
        let idx = rng.below(pool.len() as u64) as usize;
        members.insert(SignerId(pool.swap_remove(idx)));
    }
    let idx = rng.below(pool.len() as u64) as usize;
    let primary = SignerId(pool[idx]);
    Ok(CommitteeAssignment { trial, members, primary })
}
