//! Block, certificate and evidence types.

use sha2::{Digest as _, Sha256};

use crate::crypto::{AggregateSignature, Signature};
use crate::encoding::{
    put_bytes, put_digest, put_list, put_option, put_u64, put_u8, CanonicalEncode,
};

pub type Digest32 = [u8; 32];

pub fn digest_of(bytes: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn digest_encoded<T: CanonicalEncode>(v: &T) -> Digest32 {
    digest_of(&v.encoded())
}

/// Domain tags prefixed to every signed digest so signatures over different
/// message kinds can never be confused for one another.
pub mod domain {
    pub const HEADER: u8 = 1;
    pub const PRE_PROPOSAL: u8 = 2;
    pub const CONFIRM: u8 = 3;
    pub const RESPONSE: u8 = 4;
    pub const TIMEOUT: u8 = 5;
    pub const PRIMARY_TIMEOUT: u8 = 6;
    pub const EXPLICIT: u8 = 7;
    pub const CONF_V: u8 = 8;
    pub const APPROVE_V: u8 = 9;
    pub const VIEW_CHANGE: u8 = 10;
    pub const READY: u8 = 11;
    pub const NEGATIVE: u8 = 12;
    pub const BLOCK_ID: u8 = 13;
}

fn tagged_digest(tag: u8, body: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update([tag]);
    h.update(body);
    h.finalize().into()
}

/// A client request: who sent it, their logical submission tick, and an
/// opaque operation. `id` is the digest of the other three fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub client: u64,
    pub t: u64,
    pub op: Vec<u8>,
    pub id: Digest32,
}

impl Transaction {
    pub fn new(client: u64, t: u64, op: Vec<u8>) -> Self {
        let id = Self::compute_id(client, t, &op);
        Transaction { client, t, op, id }
    }

    pub fn compute_id(client: u64, t: u64, op: &[u8]) -> Digest32 {
        let mut body = Vec::with_capacity(20 + op.len());
        put_u64(&mut body, client);
        put_u64(&mut body, t);
        put_bytes(&mut body, op);
        digest_of(&body)
    }

    pub const MAX_OP_BYTES: usize = 512;

    pub fn well_formed(&self) -> bool {
        self.op.len() <= Self::MAX_OP_BYTES && self.id == Self::compute_id(self.client, self.t, &self.op)
    }
}

impl CanonicalEncode for Transaction {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.client);
        put_u64(out, self.t);
        put_bytes(out, &self.op);
        put_digest(out, &self.id);
    }
}

pub fn payload_digest(txs: &[Transaction]) -> Digest32 {
    let mut body = Vec::new();
    put_list(&mut body, txs);
    digest_of(&body)
}

/// The signed proposal header ρ: view, height, payload digest, parent id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub v: u64,
    pub s: u64,
    pub h: Digest32,
    pub d: Digest32,
    pub proposer_sig: Signature,
}

impl BlockHeader {
    /// Digest the primary signs, and that Pre-Proposal votes endorse.
    pub fn sign_digest(v: u64, s: u64, h: &Digest32, d: &Digest32) -> Digest32 {
        let mut body = Vec::with_capacity(80);
        put_u64(&mut body, v);
        put_u64(&mut body, s);
        put_digest(&mut body, h);
        put_digest(&mut body, d);
        tagged_digest(domain::HEADER, &body)
    }

    pub fn own_sign_digest(&self) -> Digest32 {
        Self::sign_digest(self.v, self.s, &self.h, &self.d)
    }

    /// Chain identity of the block this header describes.
    ///
    /// Deliberately excludes the view and the proposer signature: a block
    /// re-proposed after a view change at the same height, with the same
    /// payload and parent, is the same block, so chains that committed it
    /// before and after the change still link up.
    pub fn block_id(&self) -> Digest32 {
        let mut body = Vec::with_capacity(72);
        put_u64(&mut body, self.s);
        put_digest(&mut body, &self.h);
        put_digest(&mut body, &self.d);
        tagged_digest(domain::BLOCK_ID, &body)
    }

    /// Same (height, payload, parent) content, ignoring view and signature.
    pub fn same_content(&self, other: &BlockHeader) -> bool {
        self.s == other.s && self.h == other.h && self.d == other.d
    }
}

impl CanonicalEncode for BlockHeader {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        put_u64(out, self.s);
        put_digest(out, &self.h);
        put_digest(out, &self.d);
        self.proposer_sig.encode_into(out);
    }
}

/// Proof that a pending β could not be recovered: 2f+1 signed negative
/// responses over ⟨β, false⟩, attached to the first block of a new view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbsenceProof {
    pub beta: ProposalCert,
    pub responses: AggregateSignature,
}

impl AbsenceProof {
    /// Digest every negative response F = ⟨β, false⟩ is signed over.
    pub fn response_digest(beta: &ProposalCert) -> Digest32 {
        let mut body = beta.encoded();
        put_u8(&mut body, 0);
        tagged_digest(domain::NEGATIVE, &body)
    }
}

impl CanonicalEncode for AbsenceProof {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.beta.encode_into(out);
        self.responses.encode_into(out);
    }
}

/// A proposal with its payload and, in the first block of a view, an
/// optional absence proof discharging the recovery obligation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub absence: Option<AbsenceProof>,
    pub txs: Vec<Transaction>,
}

impl Block {
    pub fn payload_matches(&self) -> bool {
        self.header.h == payload_digest(&self.txs)
    }
}

impl CanonicalEncode for Block {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.header.encode_into(out);
        put_option(out, &self.absence);
        put_list(out, &self.txs);
    }
}

/// β: a header plus ⌊c/2⌋+1 aggregated committee endorsements, proving the
/// committee pre-agreed on a unique block for this height.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalCert {
    pub rho: BlockHeader,
    pub sigma_r: AggregateSignature,
}

impl ProposalCert {
    /// Digest the committee's Pre-Proposal votes sign; `sigma_r` aggregates
    /// signatures over exactly this.
    pub fn vote_digest(v: u64, s: u64, h: &Digest32) -> Digest32 {
        let mut body = Vec::with_capacity(48);
        put_u64(&mut body, v);
        put_u64(&mut body, s);
        put_digest(&mut body, h);
        tagged_digest(domain::PRE_PROPOSAL, &body)
    }

    pub fn own_vote_digest(&self) -> Digest32 {
        Self::vote_digest(self.rho.v, self.rho.s, &self.rho.h)
    }
}

impl CanonicalEncode for ProposalCert {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.rho.encode_into(out);
        self.sigma_r.encode_into(out);
    }
}

/// 2f+1 aggregated Confirm signatures: the network's approval of a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApprovalCert {
    pub v: u64,
    pub s: u64,
    pub h: Digest32,
    pub sigma: AggregateSignature,
}

impl ApprovalCert {
    /// Digest Confirm messages sign; `sigma` aggregates signatures over it.
    pub fn confirm_digest(v: u64, s: u64, h: &Digest32) -> Digest32 {
        let mut body = Vec::with_capacity(48);
        put_u64(&mut body, v);
        put_u64(&mut body, s);
        put_digest(&mut body, h);
        tagged_digest(domain::CONFIRM, &body)
    }

    pub fn own_confirm_digest(&self) -> Digest32 {
        Self::confirm_digest(self.v, self.s, &self.h)
    }
}

impl CanonicalEncode for ApprovalCert {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        put_u64(out, self.s);
        put_digest(out, &self.h);
        self.sigma.encode_into(out);
    }
}

/// Self-certifying misbehavior evidence carried in an E complaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Evidence {
    /// Two certified proposals (or signed headers) for the same height in
    /// the same view with different payloads.
    Equivocation { a: ProposalCert, b: ProposalCert },
    /// A signed block whose payload digest does not match its transactions
    /// or whose transactions are malformed; verifiable without local state.
    InvalidProposal { block: Block },
}

impl CanonicalEncode for Evidence {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Evidence::Equivocation { a, b } => {
                put_u8(out, 0);
                a.encode_into(out);
                b.encode_into(out);
            }
            Evidence::InvalidProposal { block } => {
                put_u8(out, 1);
                block.encode_into(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Keyring, SignerId};

    fn sig() -> Signature {
        Keyring::new([1; 32]).secret(SignerId(0)).sign(&[0; 32])
    }

    fn header(v: u64, s: u64, h: Digest32, d: Digest32) -> BlockHeader {
        BlockHeader { v, s, h, d, proposer_sig: sig() }
    }

    #[test]
    fn payload_digest_changes_with_one_byte() {
        let a = vec![Transaction::new(1, 1, vec![0u8; 8])];
        let mut op = vec![0u8; 8];
        op[3] = 1;
        let b = vec![Transaction::new(1, 1, op)];
        assert_ne!(payload_digest(&a), payload_digest(&b));
    }

    #[test]
    fn block_id_ignores_view_and_signature() {
        let h1 = header(0, 1, [1; 32], [2; 32]);
        let mut h2 = header(3, 1, [1; 32], [2; 32]);
        h2.proposer_sig = Keyring::new([9; 32]).secret(SignerId(2)).sign(&[4; 32]);
        assert_eq!(h1.block_id(), h2.block_id());
        let h3 = header(0, 1, [5; 32], [2; 32]);
        assert_ne!(h1.block_id(), h3.block_id());
    }

    #[test]
    fn digest_stable_across_reencoding() {
        let b = Block {
            header: header(0, 1, [1; 32], [2; 32]),
            absence: None,
            txs: vec![Transaction::new(3, 4, b"op".to_vec())],
        };
        assert_eq!(digest_encoded(&b), digest_of(&b.encoded()));
        assert_eq!(b.encoded(), b.clone().encoded());
    }

    #[test]
    fn transaction_well_formed_checks_id_and_size() {
        let good = Transaction::new(1, 2, vec![0; 16]);
        assert!(good.well_formed());
        let mut bad = good.clone();
        bad.id[0] ^= 1;
        assert!(!bad.well_formed());
        let huge = Transaction::new(1, 2, vec![0; Transaction::MAX_OP_BYTES + 1]);
        assert!(!huge.well_formed());
    }
}
