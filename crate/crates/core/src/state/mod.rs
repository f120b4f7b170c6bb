//! The per-node deterministic state machine.
//!
//! A node consumes one [`Input`] at a time through [`NodeState::step`] and
//! returns the messages to send plus events for the harness. Identical
//! (state, input) always produce identical outputs, byte for byte; all
//! collections are ordered and no wall clock or thread state is consulted.
//!
//! Normal mode follows the Pre-Prepare / Pre-Proposal / Proposal / Confirm /
//! Approval pipeline; `sync` covers timeout complaints and history repair;
//! `viewchange` covers the Proof → ConfV → ApproveV escalation, the V/Q/
//! Ready/P installation handshake and the new primary's block recovery.

mod normal;
mod sync;
mod viewchange;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::committee::{select_committee, CommitteeAssignment};
use crate::crypto::{Keyring, NodeSecret, Signature, SignerId};
use crate::msg::{
    CommittedBlock, MsgKind, PrimaryTimeout, Proof, ProtocolMsg, Ready, TimeoutComplaint,
    ViewChange,
};
use crate::types::{digest_encoded, BlockHeader, Digest32, ProposalCert, Transaction};

/// Static per-run protocol parameters.
#[derive(Debug, Clone)]
pub struct Config {
    pub n: u32,
    pub f: u32,
    pub c: u32,
    pub timeout_base: u64,
    pub backoff: u32,
    pub pipelined: bool,
    pub genesis: Digest32,
    pub seed: [u8; 32],
    /// Optional fixed assignment for view 0 (otherwise selected from seed).
    pub initial_assignment: Option<(SignerId, BTreeSet<SignerId>)>,
    /// Stop proposing above this height; harness run length.
    pub max_height: Option<u64>,
    /// Out-of-order cache bound in heights.
    pub cache_heights: u64,
    /// Payload bytes per block the primary packs up to.
    pub block_size: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n must equal 3f+1 (n={n}, f={f})")]
    BadN { n: u32, f: u32 },
    #[error("committee size must satisfy 1 <= c <= n-1 (c={c}, n={n})")]
    BadC { c: u32, n: u32 },
    #[error("timeout_base must be positive")]
    BadTimeout,
    #[error("backoff must be at least 1")]
    BadBackoff,
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n != 3 * self.f + 1 {
            return Err(ConfigError::BadN { n: self.n, f: self.f });
        }
        if self.c == 0 || self.c > self.n - 1 {
            return Err(ConfigError::BadC { c: self.c, n: self.n });
        }
        if self.timeout_base == 0 {
            return Err(ConfigError::BadTimeout);
        }
        if self.backoff == 0 {
            return Err(ConfigError::BadBackoff);
        }
        Ok(())
    }

    /// ⌊c/2⌋+1 — committee pre-agreement quorum.
    pub fn committee_quorum(&self) -> usize {
        (self.c / 2 + 1) as usize
    }

    /// 2f+1 — network confirmation quorum.
    pub fn regular_quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    /// f+1 — complaints needed for a view-change proof.
    pub fn proof_quorum(&self) -> usize {
        (self.f + 1) as usize
    }

    pub fn genesis_default() -> Digest32 {
        crate::types::digest_of(b"hermes/genesis")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Impetus,
    Regular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Normal,
    ViewChange,
}

/// Symbolic recipient sets, resolved against the sender's assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    /// Current committee, minus the sender.
    ToCommittee,
    /// Nodes outside the committee that are not the primary, minus sender.
    ToRegulars,
    ToPrimary,
    ToNode(SignerId),
    /// Virtual clients; consumed by the harness, not the node network.
    ToClients,
    /// Every node except the sender.
    Broadcast,
}

impl Destination {
    pub fn resolve(
        self,
        me: SignerId,
        n: u32,
        assignment: &CommitteeAssignment,
    ) -> Vec<SignerId> {
        let everyone = (0..n).map(SignerId);
        let targets: Vec<SignerId> = match self {
            Destination::ToCommittee => {
                assignment.members.iter().copied().filter(|&i| i != me).collect()
            }
            Destination::ToRegulars => everyone
                .filter(|i| !assignment.members.contains(i) && *i != assignment.primary && *i != me)
                .collect(),
            Destination::ToPrimary => {
                if assignment.primary == me {
                    Vec::new()
                } else {
                    vec![assignment.primary]
                }
            }
            Destination::ToNode(i) => {
                if i == me {
                    Vec::new()
                } else {
                    vec![i]
                }
            }
            Destination::ToClients => Vec::new(),
            Destination::Broadcast => everyone.filter(|&i| i != me).collect(),
        };
        targets
    }
}

/// One message the node wants delivered. Targets are resolved when the
/// message is emitted, against the assignment in force at that instant (a
/// single step can change the assignment, e.g. when entering a view change).
#[derive(Debug, Clone)]
pub struct Output {
    pub dest: Destination,
    pub targets: Vec<SignerId>,
    pub msg: ProtocolMsg,
}

/// Side events for the harness: commits, timer requests, evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HarnessEvent {
    Committed { s: u64, v: u64, h: Digest32, block_id: Digest32, tx_count: u64 },
    Revoked { s: u64, h: Digest32 },
    BlacklistEvidence { nodes: Vec<SignerId> },
    TimerSet { gen: u64, after: u64 },
    EnteredView { v: u64 },
}

#[derive(Debug, Default)]
pub struct StepOutput {
    pub msgs: Vec<Output>,
    pub events: Vec<HarnessEvent>,
}

impl StepOutput {
    pub fn event(&mut self, ev: HarnessEvent) {
        self.events.push(ev);
    }
}

/// Everything a node can react to.
#[derive(Debug, Clone)]
pub enum Input {
    Message { from: SignerId, msg: ProtocolMsg },
    TimerFired { gen: u64 },
    ClientTx(Transaction),
}

/// Why a Pre-Prepare (or Proposal body) was rejected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidateError {
    #[error("wrong view")]
    WrongView,
    #[error("wrong sequence: got {got}, expected {expected}")]
    WrongSequence { got: u64, expected: u64 },
    #[error("parent digest mismatch")]
    BadParent,
    #[error("payload digest mismatch")]
    BadPayloadDigest,
    #[error("bad proposer signature")]
    BadSignature,
    #[error("invalid transaction")]
    InvalidTx,
    #[error("recovery obligation not discharged")]
    MissingRecovery,
}

/// Per-height bookkeeping within the current view. Vote tallies are keyed
/// by payload digest first: votes for different blocks at one height (an
/// equivocating primary) must never pool into one quorum.
#[derive(Debug, Default)]
pub(crate) struct EpochState {
    pub header: Option<BlockHeader>,
    pub payload: Option<Vec<Transaction>>,
    pub absence_ok: bool,
    pub preproposals: BTreeMap<Digest32, BTreeMap<SignerId, Signature>>,
    pub sent_preproposal: bool,
    pub built_beta: bool,
    pub beta: Option<ProposalCert>,
    pub confirms: BTreeMap<Digest32, BTreeMap<SignerId, Signature>>,
    pub sent_confirm: bool,
    pub approval: Option<crate::types::ApprovalCert>,
    /// Proposal accepted but waiting for a lower height (out of order).
    pub deferred_proposal: Option<(ProposalCert, Vec<Transaction>, Option<crate::types::AbsenceProof>)>,
}

/// Active view-change toward `target`.
#[derive(Debug)]
pub(crate) struct VcState {
    pub target: u64,
    pub sent_v: bool,
    pub v_tally: BTreeMap<SignerId, ViewChange>,
    pub sent_q: bool,
    pub q: Option<Vec<ViewChange>>,
    pub q_tip: Option<(u64, Digest32)>,
    pub q_betas: Vec<ProposalCert>,
    pub q_forwarded: bool,
    pub ready_sent: bool,
    pub awaiting_sync: bool,
    pub ready_tally: BTreeMap<SignerId, Ready>,
    pub sent_p: bool,
    pub p: Option<Vec<Ready>>,
    pub p_forwarded: bool,
}

impl VcState {
    fn new(target: u64) -> Self {
        VcState {
            target,
            sent_v: false,
            v_tally: BTreeMap::new(),
            sent_q: false,
            q: None,
            q_tip: None,
            q_betas: Vec::new(),
            q_forwarded: false,
            ready_sent: false,
            awaiting_sync: false,
            ready_tally: BTreeMap::new(),
            sent_p: false,
            p: None,
            p_forwarded: false,
        }
    }
}

/// The new primary's pending-β recovery work.
#[derive(Debug, Default)]
pub(crate) struct RecoveryState {
    /// β being recovered via Γ_p, with its negative-response tally.
    pub current: Option<ProposalCert>,
    pub negatives: BTreeMap<SignerId, Signature>,
    pub resolved: bool,
}

pub struct NodeState {
    pub(crate) id: SignerId,
    pub(crate) cfg: Config,
    pub(crate) keyring: Keyring,
    pub(crate) secret: NodeSecret,

    pub(crate) view: u64,
    pub(crate) mode: Mode,
    pub(crate) assignment: CommitteeAssignment,
    /// View whose normal-mode traffic is suppressed after 2f+1 ConfV.
    pub(crate) halted_view: Option<u64>,

    pub(crate) chain: Vec<CommittedBlock>,
    pub(crate) committed_tx_ids: BTreeSet<Digest32>,

    pub(crate) epochs: BTreeMap<u64, EpochState>,
    /// Confirm locks η for the current view: height -> payload digest.
    pub(crate) eta: BTreeMap<u64, Digest32>,
    /// All proposal certificates seen, keyed by (height, header digest);
    /// entries above the committed tip are the pending set A_β.
    pub(crate) betas: BTreeMap<(u64, Digest32), ProposalCert>,
    /// Known payloads by payload digest.
    pub(crate) payloads: BTreeMap<Digest32, Vec<Transaction>>,
    /// Absence proofs attached to blocks, by height.
    pub(crate) absence_store: BTreeMap<u64, crate::types::AbsenceProof>,

    /// Highest committed height already sent to each peer (sync dedup).
    pub(crate) served: BTreeMap<SignerId, u64>,

    pub(crate) timer_gen: u64,
    /// View changes since the last commit; drives the exponential backoff.
    pub(crate) consecutive_vc: u32,
    /// Timer expiries since the last progress, also backed off.
    pub(crate) timeouts_since_progress: u32,

    pub(crate) seen_msgs: BTreeSet<Digest32>,

    pub(crate) gamma_tally: BTreeMap<u64, BTreeMap<SignerId, TimeoutComplaint>>,
    pub(crate) proof_seen: BTreeMap<u64, Proof>,
    pub(crate) sent_confv: BTreeSet<u64>,
    pub(crate) confv_relayed: BTreeSet<u64>,
    pub(crate) confv_tally: BTreeMap<u64, BTreeMap<SignerId, Signature>>,
    pub(crate) sent_approvev: BTreeSet<u64>,

    pub(crate) vc: Option<VcState>,
    /// V reports for future rounds, kept in case we turn out to lead them.
    pub(crate) early_v: Vec<ViewChange>,
    /// Last installed bundles, kept to answer Γ(Q)/Γ(P) re-requests.
    pub(crate) last_q: Option<(u64, Vec<ViewChange>)>,
    pub(crate) last_p: Option<(u64, Vec<Ready>)>,

    /// Recovery obligations for the current view: height -> certified βs
    /// extracted from Q that the first block there must honor.
    pub(crate) obligations: BTreeMap<u64, Vec<ProposalCert>>,
    pub(crate) recovery: RecoveryState,
    /// Γ_p requests seen, so Proposal replies can be relayed to the primary.
    pub(crate) gamma_p_seen: BTreeMap<(u64, Digest32), PrimaryTimeout>,
    pub(crate) gamma_p_relayed: BTreeSet<(u64, Digest32)>,

    pub(crate) last_proposed: u64,
    pub(crate) mempool: BTreeMap<u64, Transaction>,
    pub(crate) blacklist_reported: BTreeSet<Digest32>,
}

impl NodeState {
    pub fn new(id: SignerId, cfg: Config) -> Self {
        cfg.validate().expect("invalid config");
        let keyring = Keyring::new(cfg.seed);
        let secret = keyring.secret(id);
        let assignment = assignment_for_view(&cfg, 0);
        NodeState {
            id,
            cfg,
            keyring,
            secret,
            view: 0,
            mode: Mode::Normal,
            assignment,
            halted_view: None,
            chain: Vec::new(),
            committed_tx_ids: BTreeSet::new(),
            epochs: BTreeMap::new(),
            eta: BTreeMap::new(),
            betas: BTreeMap::new(),
            payloads: BTreeMap::new(),
            absence_store: BTreeMap::new(),
            served: BTreeMap::new(),
            timer_gen: 0,
            consecutive_vc: 0,
            timeouts_since_progress: 0,
            seen_msgs: BTreeSet::new(),
            gamma_tally: BTreeMap::new(),
            proof_seen: BTreeMap::new(),
            sent_confv: BTreeSet::new(),
            confv_relayed: BTreeSet::new(),
            confv_tally: BTreeMap::new(),
            sent_approvev: BTreeSet::new(),
            vc: None,
            early_v: Vec::new(),
            last_q: None,
            last_p: None,
            obligations: BTreeMap::new(),
            recovery: RecoveryState::default(),
            gamma_p_seen: BTreeMap::new(),
            gamma_p_relayed: BTreeSet::new(),
            last_proposed: 0,
            mempool: BTreeMap::new(),
            blacklist_reported: BTreeSet::new(),
        }
    }

    // --- public observers -------------------------------------------------

    pub fn id(&self) -> SignerId {
        self.id
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn assignment(&self) -> &CommitteeAssignment {
        &self.assignment
    }

    pub fn role(&self) -> Role {
        if self.assignment.primary == self.id {
            Role::Primary
        } else if self.assignment.members.contains(&self.id) {
            Role::Impetus
        } else {
            Role::Regular
        }
    }

    pub fn tip_height(&self) -> u64 {
        self.chain.len() as u64
    }

    pub fn tip_id(&self) -> Digest32 {
        self.chain.last().map(|cb| cb.block.header.block_id()).unwrap_or(self.cfg.genesis)
    }

    pub fn chain(&self) -> &[CommittedBlock] {
        &self.chain
    }

    pub fn committed_at(&self, s: u64) -> Option<&CommittedBlock> {
        if s == 0 || s > self.tip_height() {
            None
        } else {
            self.chain.get((s - 1) as usize)
        }
    }

    /// Pending proposal certificates above the committed tip, in recovery
    /// order: ascending height, then ascending header digest.
    pub fn pending_betas(&self) -> Vec<ProposalCert> {
        let tip = self.tip_height();
        self.betas.range((tip + 1, [0u8; 32])..).map(|(_, b)| b.clone()).collect()
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn keyring(&self) -> &Keyring {
        &self.keyring
    }

    pub fn last_proposed(&self) -> u64 {
        self.last_proposed
    }

    /// The view this node is currently operating or trying to establish.
    pub fn current_round(&self) -> u64 {
        self.vc.as_ref().map(|vc| vc.target).unwrap_or(self.view)
    }

    // --- lifecycle ---------------------------------------------------------

    /// Kick the node off at run start: arm the block timer and, on the
    /// primary, propose the first block.
    pub fn start(&mut self) -> StepOutput {
        let mut out = StepOutput::default();
        self.arm_timer(&mut out);
        if self.role() == Role::Primary {
            self.maybe_propose(&mut out);
        }
        out
    }

    pub fn step(&mut self, input: Input) -> StepOutput {
        let mut out = StepOutput::default();
        match input {
            Input::TimerFired { gen } => {
                if gen == self.timer_gen {
                    self.on_timeout(&mut out);
                }
            }
            Input::ClientTx(tx) => {
                if tx.well_formed() && !self.committed_tx_ids.contains(&tx.id) {
                    self.mempool.insert(tx.t, tx);
                }
            }
            Input::Message { from, msg } => {
                if self.seen_msgs.insert(msg.digest()) {
                    self.on_message(&mut out, from, msg);
                }
            }
        }
        out
    }

    fn on_message(&mut self, out: &mut StepOutput, from: SignerId, msg: ProtocolMsg) {
        match msg {
            ProtocolMsg::PrePrepare(block) => self.on_pre_prepare(out, from, block),
            ProtocolMsg::PreProposal { v, s, h, from: sender, sig } => {
                self.on_pre_proposal(out, from, v, s, h, sender, sig)
            }
            ProtocolMsg::Proposal { beta, txs, absence } => {
                self.on_proposal(out, from, beta, txs, absence)
            }
            ProtocolMsg::Confirm { v, s, h, from: sender, sig } => {
                self.on_confirm(out, v, s, h, sender, sig)
            }
            ProtocolMsg::Approval(cert) => self.on_approval(out, cert),
            ProtocolMsg::ClientResponse { .. } => {}
            ProtocolMsg::Timeout(gamma) => self.on_gamma(out, from, gamma),
            ProtocolMsg::PrimaryTimeout(gp) => self.on_gamma_p(out, gp),
            ProtocolMsg::Explicit(e) => self.on_explicit(out, e),
            ProtocolMsg::Proof(p) => self.on_proof(out, p),
            ProtocolMsg::ConfV(cv) => self.on_confv(out, cv),
            ProtocolMsg::ApproveV(av) => self.on_approvev(out, av),
            ProtocolMsg::ViewChange(v) => self.on_viewchange(out, v),
            ProtocolMsg::HistoryBundle(q) => self.on_history_bundle(out, q),
            ProtocolMsg::Ready(r) => self.on_ready(out, r),
            ProtocolMsg::ReadyBundle(p) => self.on_ready_bundle(out, p),
            ProtocolMsg::Negative(f) => self.on_negative(out, f),
            ProtocolMsg::SyncBlocks(blocks) => self.on_sync_blocks(out, blocks),
        }
    }

    // --- shared helpers ----------------------------------------------------

    /// Queue a message, resolving its recipients against the assignment in
    /// force right now.
    pub(crate) fn emit(&self, out: &mut StepOutput, dest: Destination, msg: ProtocolMsg) {
        let targets = dest.resolve(self.id, self.cfg.n, &self.assignment);
        out.msgs.push(Output { dest, targets, msg });
    }

    /// Queue a message for an explicit recipient set (cross-view routing).
    pub(crate) fn emit_to(
        &self,
        out: &mut StepOutput,
        dest: Destination,
        targets: Vec<SignerId>,
        msg: ProtocolMsg,
    ) {
        let targets = targets.into_iter().filter(|&t| t != self.id).collect();
        out.msgs.push(Output { dest, targets, msg });
    }

    pub(crate) fn everyone(&self) -> BTreeSet<SignerId> {
        (0..self.cfg.n).map(SignerId).collect()
    }

    /// Assignment in force for a given view; pure function of the config.
    pub(crate) fn assignment_for(&self, view: u64) -> CommitteeAssignment {
        assignment_for_view(&self.cfg, view)
    }

    pub(crate) fn is_impetus(&self) -> bool {
        self.assignment.members.contains(&self.id)
    }

    pub(crate) fn is_primary(&self) -> bool {
        self.assignment.primary == self.id
    }

    /// Normal-mode traffic allowed for the current view?
    pub(crate) fn normal_active(&self) -> bool {
        self.mode == Mode::Normal && self.halted_view != Some(self.view)
    }

    /// Effective timeout with exponential backoff.
    pub(crate) fn arm_timer(&mut self, out: &mut StepOutput) {
        let exp = (self.consecutive_vc + self.timeouts_since_progress).min(16);
        let after = self
            .cfg
            .timeout_base
            .saturating_mul(u64::from(self.cfg.backoff).saturating_pow(exp));
        self.timer_gen += 1;
        out.event(HarnessEvent::TimerSet { gen: self.timer_gen, after });
    }

    /// Something moved: reset the in-view backoff and re-arm.
    pub(crate) fn progress(&mut self, out: &mut StepOutput) {
        self.timeouts_since_progress = 0;
        self.arm_timer(out);
    }

    /// Height of the next block this node would accept a Pre-Prepare for.
    pub(crate) fn next_unproposed_height(&self) -> u64 {
        let highest_known = self
            .epochs
            .iter()
            .filter(|(_, e)| e.header.is_some())
            .map(|(&s, _)| s)
            .max()
            .unwrap_or(0);
        highest_known.max(self.tip_height()) + 1
    }

    /// Height of the next proposal this node would confirm (serial η).
    pub(crate) fn next_confirm_height(&self) -> u64 {
        let highest_eta = self.eta.keys().max().copied().unwrap_or(0);
        highest_eta.max(self.tip_height()) + 1
    }

    /// Chain digest of the block preceding height `s`, if known.
    pub(crate) fn parent_id_for(&self, s: u64) -> Option<Digest32> {
        let tip = self.tip_height();
        if s == tip + 1 {
            Some(self.tip_id())
        } else if s > tip + 1 {
            self.epochs.get(&(s - 1)).and_then(|e| e.header.as_ref()).map(|h| h.block_id())
        } else {
            self.committed_at(s - 1).map(|cb| cb.block.header.block_id()).or_else(|| {
                if s == 1 {
                    Some(self.cfg.genesis)
                } else {
                    None
                }
            })
        }
    }

    pub(crate) fn record_beta(&mut self, beta: ProposalCert) {
        let key = (beta.rho.s, digest_encoded(&beta.rho));
        self.betas.entry(key).or_insert(beta);
    }

    /// Betas pending at a specific height (normally one; two under
    /// equivocation).
    pub(crate) fn betas_at(&self, s: u64) -> Vec<ProposalCert> {
        self.betas
            .range((s, [0u8; 32])..=(s, [0xffu8; 32]))
            .map(|(_, b)| b.clone())
            .collect()
    }

    /// Emit the blacklist event for misbehavior evidence exactly once.
    pub(crate) fn report_blacklist(
        &mut self,
        out: &mut StepOutput,
        key: Digest32,
        nodes: Vec<SignerId>,
    ) {
        if self.blacklist_reported.insert(key) {
            out.event(HarnessEvent::BlacklistEvidence { nodes });
        }
    }

    /// The Γ complaint describing what this node is currently missing.
    pub(crate) fn build_gamma(&self) -> TimeoutComplaint {
        let v = self.current_round();
        let kind = match (self.mode, &self.vc) {
            (Mode::ViewChange, Some(vc)) if vc.q.is_none() => MsgKind::Q,
            (Mode::ViewChange, _) => MsgKind::P,
            (Mode::Normal, _) => {
                if self.eta.contains_key(&(self.tip_height() + 1)) {
                    MsgKind::Approval
                } else {
                    MsgKind::Block
                }
            }
        };
        let s1 = self.tip_height();
        let h1 = self.tip_id();
        let gap = self
            .epochs
            .iter()
            .filter(|(&s, e)| s > s1 + 1 && e.header.is_some())
            .map(|(&s, e)| crate::msg::GapEnd { s2: s, h2: e.header.as_ref().unwrap().h })
            .next_back();
        let digest = TimeoutComplaint::sign_digest(v, s1, &h1, &gap, kind, self.id);
        TimeoutComplaint { v, s1, h1, gap, kind, from: self.id, sig: self.secret.sign(&digest) }
    }
}

/// Assignment for a view: the scenario override for view 0, otherwise the
/// seeded selection with the view number as the epoch-trial input.
pub fn assignment_for_view(cfg: &Config, view: u64) -> CommitteeAssignment {
    if view == 0 {
        if let Some((primary, members)) = &cfg.initial_assignment {
            return CommitteeAssignment { trial: 0, members: members.clone(), primary: *primary };
        }
    }
    select_committee(&cfg.seed, view, cfg.n, cfg.c).expect("valid config")
}

#[cfg(test)]
pub(crate) mod testutil;

#[cfg(test)]
mod tests;
