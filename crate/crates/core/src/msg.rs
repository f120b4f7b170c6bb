//! Protocol messages and their signing digests.
//!
//! Quorum-certified messages (Pre-Proposal votes, Confirms, ConfV votes,
//! negative responses) sign a digest that contains no sender field, so the
//! individual signatures aggregate over one common digest; the sender rides
//! alongside in the message. Everything else signs its full content.

use crate::crypto::{AggregateSignature, Signature, SignerId};
use crate::encoding::{
    put_digest, put_list, put_option, put_u64, put_u8, CanonicalEncode,
};
use crate::types::{
    digest_of, domain, AbsenceProof, ApprovalCert, Block, Digest32, Evidence, ProposalCert,
    Transaction,
};

/// What kind of message a timeout complaint says is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MsgKind {
    Block,
    Q,
    P,
    Approval,
}

impl MsgKind {
    fn tag(self) -> u8 {
        match self {
            MsgKind::Block => 0,
            MsgKind::Q => 1,
            MsgKind::P => 2,
            MsgKind::Approval => 3,
        }
    }
}

impl CanonicalEncode for MsgKind {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, self.tag());
    }
}

/// Γ: a node's complaint that it timed out waiting at height `s1` (tip id
/// `h1`), optionally reporting a gap up to a cached block at `s2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeoutComplaint {
    pub v: u64,
    pub s1: u64,
    pub h1: Digest32,
    pub gap: Option<GapEnd>,
    pub kind: MsgKind,
    pub from: SignerId,
    pub sig: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapEnd {
    pub s2: u64,
    pub h2: Digest32,
}

impl CanonicalEncode for GapEnd {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.s2);
        put_digest(out, &self.h2);
    }
}

impl TimeoutComplaint {
    pub fn sign_digest(
        v: u64,
        s1: u64,
        h1: &Digest32,
        gap: &Option<GapEnd>,
        kind: MsgKind,
        from: SignerId,
    ) -> Digest32 {
        let mut body = vec![domain::TIMEOUT];
        put_u64(&mut body, v);
        put_u64(&mut body, s1);
        put_digest(&mut body, h1);
        put_option(&mut body, gap);
        kind.encode_into(&mut body);
        put_u64(&mut body, u64::from(from.0));
        digest_of(&body)
    }

    pub fn own_sign_digest(&self) -> Digest32 {
        Self::sign_digest(self.v, self.s1, &self.h1, &self.gap, self.kind, self.from)
    }
}

impl CanonicalEncode for TimeoutComplaint {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        put_u64(out, self.s1);
        put_digest(out, &self.h1);
        put_option(out, &self.gap);
        self.kind.encode_into(out);
        put_u64(out, u64::from(self.from.0));
        self.sig.encode_into(out);
    }
}

/// Γ_p: the new primary's request for the payload of a pending β.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimaryTimeout {
    pub v: u64,
    pub beta: ProposalCert,
    pub sig: Signature,
}

impl PrimaryTimeout {
    pub fn sign_digest(v: u64, beta: &ProposalCert) -> Digest32 {
        let mut body = vec![domain::PRIMARY_TIMEOUT];
        put_u64(&mut body, v);
        beta.encode_into(&mut body);
        digest_of(&body)
    }
}

impl CanonicalEncode for PrimaryTimeout {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        self.beta.encode_into(out);
        self.sig.encode_into(out);
    }
}

/// E: explicit complaint with self-certifying evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplicitComplaint {
    pub v: u64,
    pub evidence: Evidence,
    pub from: SignerId,
    pub sig: Signature,
}

impl ExplicitComplaint {
    pub fn sign_digest(v: u64, evidence: &Evidence, from: SignerId) -> Digest32 {
        let mut body = vec![domain::EXPLICIT];
        put_u64(&mut body, v);
        evidence.encode_into(&mut body);
        put_u64(&mut body, u64::from(from.0));
        digest_of(&body)
    }
}

impl CanonicalEncode for ExplicitComplaint {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        self.evidence.encode_into(out);
        put_u64(out, u64::from(self.from.0));
        self.sig.encode_into(out);
    }
}

/// A view-change trigger: f+1 distinct timeout complaints for one view, or
/// a single explicit complaint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Proof {
    Timeouts(Vec<TimeoutComplaint>),
    Explicit(ExplicitComplaint),
}

impl Proof {
    /// The view this proof complains about.
    pub fn view(&self) -> Option<u64> {
        match self {
            Proof::Timeouts(ts) => ts.first().map(|t| t.v),
            Proof::Explicit(e) => Some(e.v),
        }
    }
}

impl CanonicalEncode for Proof {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Proof::Timeouts(ts) => {
                put_u8(out, 0);
                put_list(out, ts);
            }
            Proof::Explicit(e) => {
                put_u8(out, 1);
                e.encode_into(out);
            }
        }
    }
}

/// ConfV: a node's countersignature that view `v` must change. The inner
/// signature covers only the view so 2f+1 of them aggregate into ApproveV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfV {
    pub v: u64,
    pub from: SignerId,
    pub sig: Signature,
    pub proof: Proof,
}

impl ConfV {
    pub fn vote_digest(v: u64) -> Digest32 {
        let mut body = vec![domain::CONF_V];
        put_u64(&mut body, v);
        digest_of(&body)
    }
}

impl CanonicalEncode for ConfV {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        put_u64(out, u64::from(self.from.0));
        self.sig.encode_into(out);
        self.proof.encode_into(out);
    }
}

/// ApproveV: a committee member's broadcast that 2f+1 nodes confirmed the
/// view change; `sigma` aggregates their ConfV votes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApproveV {
    pub v: u64,
    pub sigma: AggregateSignature,
    pub proof: Proof,
    pub from: SignerId,
    pub sig: Signature,
}

impl ApproveV {
    pub fn sign_digest(v: u64, from: SignerId) -> Digest32 {
        let mut body = vec![domain::APPROVE_V];
        put_u64(&mut body, v);
        put_u64(&mut body, u64::from(from.0));
        digest_of(&body)
    }
}

impl CanonicalEncode for ApproveV {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.v);
        self.sigma.encode_into(out);
        self.proof.encode_into(out);
        put_u64(out, u64::from(self.from.0));
        self.sig.encode_into(out);
    }
}

/// V: a node's report of its committed tip (with certificate) and pending
/// proposal certificates, sent to the new primary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChange {
    pub new_v: u64,
    pub tip_s: u64,
    pub tip_id: Digest32,
    pub from: SignerId,
    pub commit_sigma: Option<ApprovalCert>,
    pub betas: Vec<ProposalCert>,
    pub sig: Signature,
}

impl ViewChange {
    pub fn sign_digest(
        new_v: u64,
        tip_s: u64,
        tip_id: &Digest32,
        from: SignerId,
        commit_sigma: &Option<ApprovalCert>,
        betas: &[ProposalCert],
    ) -> Digest32 {
        let mut body = vec![domain::VIEW_CHANGE];
        put_u64(&mut body, new_v);
        put_u64(&mut body, tip_s);
        put_digest(&mut body, tip_id);
        put_u64(&mut body, u64::from(from.0));
        put_option(&mut body, commit_sigma);
        put_list(&mut body, betas);
        digest_of(&body)
    }

    pub fn own_sign_digest(&self) -> Digest32 {
        Self::sign_digest(
            self.new_v,
            self.tip_s,
            &self.tip_id,
            self.from,
            &self.commit_sigma,
            &self.betas,
        )
    }
}

impl CanonicalEncode for ViewChange {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.new_v);
        put_u64(out, self.tip_s);
        put_digest(out, &self.tip_id);
        put_u64(out, u64::from(self.from.0));
        put_option(out, &self.commit_sigma);
        put_list(out, &self.betas);
        self.sig.encode_into(out);
    }
}

/// R: acknowledgment that the sender's history matches the bundle Q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ready {
    pub new_v: u64,
    pub tip_s: u64,
    pub tip_id: Digest32,
    pub from: SignerId,
    pub sig: Signature,
}

impl Ready {
    pub fn sign_digest(new_v: u64, tip_s: u64, tip_id: &Digest32, from: SignerId) -> Digest32 {
        let mut body = vec![domain::READY];
        put_u64(&mut body, new_v);
        put_u64(&mut body, tip_s);
        put_digest(&mut body, tip_id);
        put_u64(&mut body, u64::from(from.0));
        digest_of(&body)
    }

    pub fn own_sign_digest(&self) -> Digest32 {
        Self::sign_digest(self.new_v, self.tip_s, &self.tip_id, self.from)
    }
}

impl CanonicalEncode for Ready {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.new_v);
        put_u64(out, self.tip_s);
        put_digest(out, &self.tip_id);
        put_u64(out, u64::from(self.from.0));
        self.sig.encode_into(out);
    }
}

/// F: signed statement that the sender does not hold the payload for β.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeResponse {
    pub beta: ProposalCert,
    pub from: SignerId,
    pub sig: Signature,
}

impl CanonicalEncode for NegativeResponse {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.beta.encode_into(out);
        put_u64(out, u64::from(self.from.0));
        self.sig.encode_into(out);
    }
}

/// A committed block travelling in a sync response, with its certificate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedBlock {
    pub block: Block,
    pub cert: ApprovalCert,
}

impl CanonicalEncode for CommittedBlock {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.block.encode_into(out);
        self.cert.encode_into(out);
    }
}

/// Every message nodes exchange. Wire size is the canonical encoded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMsg {
    PrePrepare(Block),
    PreProposal { v: u64, s: u64, h: Digest32, from: SignerId, sig: Signature },
    Proposal { beta: ProposalCert, txs: Vec<Transaction>, absence: Option<AbsenceProof> },
    Confirm { v: u64, s: u64, h: Digest32, from: SignerId, sig: Signature },
    Approval(ApprovalCert),
    ClientResponse { s: u64, v: u64, r: Digest32, t: u64, from: SignerId, sig: Signature },
    Timeout(TimeoutComplaint),
    PrimaryTimeout(PrimaryTimeout),
    Explicit(ExplicitComplaint),
    Proof(Proof),
    ConfV(ConfV),
    ApproveV(ApproveV),
    ViewChange(ViewChange),
    HistoryBundle(Vec<ViewChange>),
    Ready(Ready),
    ReadyBundle(Vec<Ready>),
    Negative(NegativeResponse),
    SyncBlocks(Vec<CommittedBlock>),
}

impl ProtocolMsg {
    pub fn response_sign_digest(s: u64, v: u64, r: &Digest32, t: u64) -> Digest32 {
        let mut body = vec![domain::RESPONSE];
        put_u64(&mut body, s);
        put_u64(&mut body, v);
        put_digest(&mut body, r);
        put_u64(&mut body, t);
        digest_of(&body)
    }

    pub fn tag(&self) -> u8 {
        match self {
            ProtocolMsg::PrePrepare(_) => 0,
            ProtocolMsg::PreProposal { .. } => 1,
            ProtocolMsg::Proposal { .. } => 2,
            ProtocolMsg::Confirm { .. } => 3,
            ProtocolMsg::Approval(_) => 4,
            ProtocolMsg::ClientResponse { .. } => 5,
            ProtocolMsg::Timeout(_) => 6,
            ProtocolMsg::PrimaryTimeout(_) => 7,
            ProtocolMsg::Explicit(_) => 8,
            ProtocolMsg::Proof(_) => 9,
            ProtocolMsg::ConfV(_) => 10,
            ProtocolMsg::ApproveV(_) => 11,
            ProtocolMsg::ViewChange(_) => 12,
            ProtocolMsg::HistoryBundle(_) => 13,
            ProtocolMsg::Ready(_) => 14,
            ProtocolMsg::ReadyBundle(_) => 15,
            ProtocolMsg::Negative(_) => 16,
            ProtocolMsg::SyncBlocks(_) => 17,
        }
    }

    pub const KIND_NAMES: [&'static str; 18] = [
        "PrePrepare",
        "PreProposal",
        "Proposal",
        "Confirm",
        "Approval",
        "ClientResponse",
        "Timeout",
        "PrimaryTimeout",
        "Explicit",
        "Proof",
        "ConfV",
        "ApproveV",
        "ViewChange",
        "HistoryBundle",
        "Ready",
        "ReadyBundle",
        "Negative",
        "SyncBlocks",
    ];

    pub fn kind_name(&self) -> &'static str {
        Self::KIND_NAMES[self.tag() as usize]
    }

    /// Digest over the canonical encoding; used for de-duplication.
    pub fn digest(&self) -> Digest32 {
        digest_of(&self.encoded())
    }
}

impl CanonicalEncode for ProtocolMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u8(out, self.tag());
        match self {
            ProtocolMsg::PrePrepare(b) => b.encode_into(out),
            ProtocolMsg::PreProposal { v, s, h, from, sig } => {
                put_u64(out, *v);
                put_u64(out, *s);
                put_digest(out, h);
                put_u64(out, u64::from(from.0));
                sig.encode_into(out);
            }
            ProtocolMsg::Proposal { beta, txs, absence } => {
                beta.encode_into(out);
                put_list(out, txs);
                put_option(out, absence);
            }
            ProtocolMsg::Confirm { v, s, h, from, sig } => {
                put_u64(out, *v);
                put_u64(out, *s);
                put_digest(out, h);
                put_u64(out, u64::from(from.0));
                sig.encode_into(out);
            }
            ProtocolMsg::Approval(cert) => cert.encode_into(out),
            ProtocolMsg::ClientResponse { s, v, r, t, from, sig } => {
                put_u64(out, *s);
                put_u64(out, *v);
                put_digest(out, r);
                put_u64(out, *t);
                put_u64(out, u64::from(from.0));
                sig.encode_into(out);
            }
            ProtocolMsg::Timeout(t) => t.encode_into(out),
            ProtocolMsg::PrimaryTimeout(t) => t.encode_into(out),
            ProtocolMsg::Explicit(e) => e.encode_into(out),
            ProtocolMsg::Proof(p) => p.encode_into(out),
            ProtocolMsg::ConfV(c) => c.encode_into(out),
            ProtocolMsg::ApproveV(a) => a.encode_into(out),
            ProtocolMsg::ViewChange(v) => v.encode_into(out),
            ProtocolMsg::HistoryBundle(q) => put_list(out, q),
            ProtocolMsg::Ready(r) => r.encode_into(out),
            ProtocolMsg::ReadyBundle(p) => put_list(out, p),
            ProtocolMsg::Negative(n) => n.encode_into(out),
            ProtocolMsg::SyncBlocks(bs) => put_list(out, bs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Keyring;

    #[test]
    fn confirm_encoding_starts_with_its_tag() {
        let ring = Keyring::new([3; 32]);
        let sig = ring.secret(SignerId(3)).sign(&ApprovalCert::confirm_digest(0, 1, &[9; 32]));
        let msg = ProtocolMsg::Confirm { v: 0, s: 1, h: [9; 32], from: SignerId(3), sig };
        assert_eq!(msg.encoded()[0], 3);
    }

    #[test]
    fn distinct_messages_have_distinct_digests() {
        let ring = Keyring::new([3; 32]);
        let sig = |i: u32, d: &Digest32| ring.secret(SignerId(i)).sign(d);
        let d = ApprovalCert::confirm_digest(0, 1, &[9; 32]);
        let a = ProtocolMsg::Confirm { v: 0, s: 1, h: [9; 32], from: SignerId(3), sig: sig(3, &d) };
        let b = ProtocolMsg::Confirm { v: 0, s: 1, h: [9; 32], from: SignerId(2), sig: sig(2, &d) };
        assert_ne!(a.digest(), b.digest());
    }
}
