//! Signature provider for the simulation.
//!
//! Signatures here are deterministic authenticators, not public-key
//! cryptography: a node's secret is derived by hashing the run seed with the
//! node id, and a signature over a digest is the hash of (secret || digest).
//! Within the simulation's trust model this is unforgeable because adversary
//! code only ever gets to sign with the secrets of the nodes it controls.
//! The [`Keyring`] owns the run seed and can therefore verify any node's
//! signature, playing the role of the public-key directory of a permissioned
//! deployment. A real asymmetric scheme can replace this module behind the
//! same surface; nothing outside names the scheme.

use std::collections::BTreeSet;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::encoding::{put_digest, put_u64, CanonicalEncode};
use crate::types::Digest32;

/// Index of a node, unique and stable for a run. Nodes are numbered `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignerId(pub u32);

impl SignerId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for SignerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-node signing key, derived from the run seed. Handing a `NodeSecret`
/// to a node is the only way to produce signatures in its name.
#[derive(Debug, Clone)]
pub struct NodeSecret {
    id: SignerId,
    key: [u8; 32],
}

impl NodeSecret {
    pub fn derive(run_seed: &[u8; 32], id: SignerId) -> Self {
        let mut h = Sha256::new();
        h.update(b"hermes/secret");
        h.update(run_seed);
        h.update(u64::from(id.0).to_be_bytes());
        NodeSecret { id, key: h.finalize().into() }
    }

    pub fn id(&self) -> SignerId {
        self.id
    }

    pub fn sign(&self, digest: &Digest32) -> Signature {
        let mut h = Sha256::new();
        h.update(b"hermes/sig");
        h.update(self.key);
        h.update(digest);
        Signature { signer: self.id, tag: h.finalize().into() }
    }
}

/// A single node's signature over a 32-byte digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub signer: SignerId,
    pub tag: [u8; 32],
}

impl CanonicalEncode for Signature {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, u64::from(self.signer.0));
        put_digest(out, &self.tag);
    }
}

/// A quorum certificate: distinct signers' authenticators over one digest.
///
/// Parts are kept sorted by signer id; the signer set plays the role of the
/// bitmap of a compact aggregate scheme. Certificate size therefore grows
/// with the quorum, which the network model counts deliberately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateSignature {
    parts: Vec<Signature>,
}

impl AggregateSignature {
    pub fn signers(&self) -> impl Iterator<Item = SignerId> + '_ {
        self.parts.iter().map(|p| p.signer)
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn parts(&self) -> &[Signature] {
        &self.parts
    }

    /// Assemble without verifying; used by test fixtures and decode paths.
    /// `Keyring::verify_aggregate` remains the authority on validity.
    pub fn from_parts_unchecked(mut parts: Vec<Signature>) -> Self {
        parts.sort_by_key(|p| p.signer);
        AggregateSignature { parts }
    }
}

impl CanonicalEncode for AggregateSignature {
    fn encode_into(&self, out: &mut Vec<u8>) {
        crate::encoding::put_list(out, &self.parts);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("duplicate signer {0} in aggregate")]
    DuplicateSigner(SignerId),
    #[error("part from signer {0} does not verify")]
    BadPart(SignerId),
    #[error("quorum short: {got} parts, need {need}")]
    QuorumShort { got: usize, need: usize },
}

/// Verifier and aggregator for the simulation scheme.
///
/// Holds the run seed, from which every node's verification data is derived.
#[derive(Debug, Clone)]
pub struct Keyring {
    run_seed: [u8; 32],
}

impl Keyring {
    pub fn new(run_seed: [u8; 32]) -> Self {
        Keyring { run_seed }
    }

    pub fn secret(&self, id: SignerId) -> NodeSecret {
        NodeSecret::derive(&self.run_seed, id)
    }

    /// True iff `sig` was produced by `sig.signer`'s secret over `digest`.
    pub fn verify(&self, sig: &Signature, digest: &Digest32) -> bool {
        self.secret(sig.signer).sign(digest).tag == sig.tag
    }

    /// Combine individual signatures over one digest into a certificate.
    pub fn aggregate(
        &self,
        parts: &[Signature],
        digest: &Digest32,
        quorum: usize,
    ) -> Result<AggregateSignature, CryptoError> {
        let mut seen = BTreeSet::new();
        for p in parts {
            if !seen.insert(p.signer) {
                return Err(CryptoError::DuplicateSigner(p.signer));
            }
            if !self.verify(p, digest) {
                return Err(CryptoError::BadPart(p.signer));
            }
        }
        if parts.len() < quorum {
            return Err(CryptoError::QuorumShort { got: parts.len(), need: quorum });
        }
        Ok(AggregateSignature::from_parts_unchecked(parts.to_vec()))
    }

    /// True iff all parts verify over `digest`, signers are distinct members
    /// of `eligible`, and at least `quorum` of them signed.
    pub fn verify_aggregate(
        &self,
        agg: &AggregateSignature,
        digest: &Digest32,
        quorum: usize,
        eligible: &BTreeSet<SignerId>,
    ) -> bool {
        let mut seen = BTreeSet::new();
        for p in &agg.parts {
            if !seen.insert(p.signer) || !eligible.contains(&p.signer) || !self.verify(p, digest) {
                return false;
            }
        }
        seen.len() >= quorum
    }
}
