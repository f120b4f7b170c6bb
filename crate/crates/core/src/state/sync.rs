//! Timeout complaints and history synchronization.
//!
//! A node that misses an expected message complains with Γ; holders of the
//! missing blocks answer with `SyncBlocks` (committed blocks plus their
//! approval certificates), subject to a dedup validity condition so repeat
//! complaints don't flood the network. Complaints that cannot be served
//! count toward the f+1 proof that triggers a view change.

use crate::crypto::SignerId;
use crate::msg::{CommittedBlock, MsgKind, PrimaryTimeout, ProtocolMsg, TimeoutComplaint};
use crate::types::digest_encoded;

use super::{Destination, Mode, NodeState, Role, StepOutput};

impl NodeState {
    /// Block (or view-change stage) timer expired.
    pub(crate) fn on_timeout(&mut self, out: &mut StepOutput) {
        self.timeouts_since_progress = self.timeouts_since_progress.saturating_add(1);
        let gamma = self.build_gamma();
        match self.mode {
            Mode::Normal => match self.role() {
                Role::Impetus => {
                    // Γ_i: ask the regular nodes to fill us in.
                    self.emit(out, Destination::ToRegulars, ProtocolMsg::Timeout(gamma.clone()));
                    // Our own complaint counts toward a proof we might form.
                    self.tally_gamma(out, gamma);
                }
                Role::Regular | Role::Primary => {
                    self.emit(out, Destination::ToCommittee, ProtocolMsg::Timeout(gamma));
                }
            },
            Mode::ViewChange => {
                // Missing Q or P: ask the new committee and primary; the
                // complaint also counts toward escalating past a dead view.
                self.emit(out, Destination::ToCommittee, ProtocolMsg::Timeout(gamma.clone()));
                self.emit(out, Destination::ToPrimary, ProtocolMsg::Timeout(gamma.clone()));
                self.tally_gamma(out, gamma);
            }
        }
        self.arm_timer(out);
    }

    /// A Γ complaint arrived: serve it if we can, tally it if we cannot.
    pub(crate) fn on_gamma(&mut self, out: &mut StepOutput, _from: SignerId, gamma: TimeoutComplaint) {
        if gamma.sig.signer != gamma.from
            || !self.keyring.verify(&gamma.sig, &gamma.own_sign_digest())
        {
            return;
        }
        match gamma.kind {
            MsgKind::Block | MsgKind::Approval => {
                if self.serve_blocks(out, &gamma) {
                    return;
                }
                self.tally_gamma(out, gamma);
            }
            MsgKind::Q => {
                if let Some((round, q)) = &self.last_q {
                    if *round == gamma.v + 1 || *round == gamma.v {
                        self.emit(out, 
                            Destination::ToNode(gamma.from),
                            ProtocolMsg::HistoryBundle(q.clone()),
                        );
                        return;
                    }
                }
                if let Some(vc) = &self.vc {
                    if let Some(q) = &vc.q {
                        self.emit(out, 
                            Destination::ToNode(gamma.from),
                            ProtocolMsg::HistoryBundle(q.clone()),
                        );
                        return;
                    }
                }
                self.tally_gamma(out, gamma);
            }
            MsgKind::P => {
                if let Some((round, p)) = &self.last_p {
                    if *round == gamma.v + 1 || *round == gamma.v {
                        self.emit(out, 
                            Destination::ToNode(gamma.from),
                            ProtocolMsg::ReadyBundle(p.clone()),
                        );
                        return;
                    }
                }
                if let Some(vc) = &self.vc {
                    if let Some(p) = &vc.p {
                        self.emit(out, Destination::ToNode(gamma.from), ProtocolMsg::ReadyBundle(p.clone()));
                        return;
                    }
                }
                self.tally_gamma(out, gamma);
            }
        }
    }

    /// Send committed blocks above the complainer's tip, unless we already
    /// sent that range (the validity condition for Γ).
    fn serve_blocks(&mut self, out: &mut StepOutput, gamma: &TimeoutComplaint) -> bool {
        let their_tip = gamma.s1;
        let my_tip = self.tip_height();
        if my_tip <= their_tip {
            return false;
        }
        let limit = match &gamma.gap {
            Some(gap) => gap.s2.saturating_sub(1).min(my_tip),
            None => my_tip,
        };
        let already = self.served.get(&gamma.from).copied().unwrap_or(0);
        if already >= limit {
            // Already served this range; stale request.
            return true;
        }
        let from_s = their_tip + 1;
        let blocks: Vec<CommittedBlock> = (from_s..=limit)
            .filter_map(|s| self.committed_at(s).cloned())
            .collect();
        if blocks.is_empty() {
            return false;
        }
        self.served.insert(gamma.from, limit);
        self.emit(out, Destination::ToNode(gamma.from), ProtocolMsg::SyncBlocks(blocks));
        true
    }

    /// Count a complaint toward the f+1 proof for its view.
    pub(crate) fn tally_gamma(&mut self, out: &mut StepOutput, gamma: TimeoutComplaint) {
        let round = gamma.v;
        if round < self.current_round() {
            return;
        }
        let tally = self.gamma_tally.entry(round).or_default();
        tally.insert(gamma.from, gamma);
        let have = self.gamma_tally[&round].len();
        if have >= self.cfg.proof_quorum() && !self.proof_seen.contains_key(&round) {
            let complaints: Vec<TimeoutComplaint> =
                self.gamma_tally[&round].values().cloned().collect();
            let proof = crate::msg::Proof::Timeouts(complaints);
            // Only committee members broadcast proofs (Alg. 2); everyone
            // still records it and counterssigns the view change.
            if self.is_impetus() {
                self.emit(out, Destination::Broadcast, ProtocolMsg::Proof(proof.clone()));
            }
            self.on_proof_internal(out, proof);
        }
    }

    /// Committed blocks with certificates arrived; adopt them in order.
    pub(crate) fn on_sync_blocks(&mut self, out: &mut StepOutput, blocks: Vec<CommittedBlock>) {
        let mut advanced = false;
        for cb in blocks {
            let s = cb.block.header.s;
            if s != self.tip_height() + 1 {
                continue;
            }
            if !self.committed_block_valid(&cb) {
                continue;
            }
            self.commit_block(out, cb);
            advanced = true;
        }
        if advanced {
            self.after_sync_progress(out);
        }
    }

    /// A synced block needs a valid certificate and to link onto our chain.
    pub(crate) fn committed_block_valid(&self, cb: &CommittedBlock) -> bool {
        let hdr = &cb.block.header;
        if cb.cert.s != hdr.s || cb.cert.h != hdr.h {
            return false;
        }
        if hdr.d != self.tip_id() {
            return false;
        }
        if !cb.block.payload_matches() {
            return false;
        }
        let digest = cb.cert.own_confirm_digest();
        self.keyring.verify_aggregate(
            &cb.cert.sigma,
            &digest,
            self.cfg.regular_quorum(),
            &self.everyone(),
        )
    }

    /// After catching up: deferred proposals may now confirm, a view-change
    /// Ready may now be due.
    fn after_sync_progress(&mut self, out: &mut StepOutput) {
        match self.mode {
            Mode::Normal => {
                self.flush_deferred(out);
                let next = self.tip_height() + 1;
                self.try_commit_height(out, next);
            }
            Mode::ViewChange => self.maybe_ready(out),
        }
    }

    // --- Γ_p: the new primary's payload recovery request -------------------

    pub(crate) fn on_gamma_p(&mut self, out: &mut StepOutput, gp: PrimaryTimeout) {
        // Signed by the primary of the view it names, which must be current.
        if gp.v != self.view || self.mode != Mode::Normal {
            return;
        }
        let expected_primary = self.assignment.primary;
        let digest = PrimaryTimeout::sign_digest(gp.v, &gp.beta);
        if gp.sig.signer != expected_primary || !self.keyring.verify(&gp.sig, &digest) {
            return;
        }
        let beta = gp.beta.clone();
        let key = (beta.rho.s, digest_encoded(&beta.rho));
        self.gamma_p_seen.insert(key, gp.clone());

        if let Some(payload) = self.payloads.get(&beta.rho.h).cloned() {
            // We can hand the payload straight back.
            self.emit(out, 
                Destination::ToPrimary,
                ProtocolMsg::Proposal { beta, txs: payload, absence: None },
            );
            return;
        }
        // Negative response; committee members also spread the request.
        let neg_digest = crate::types::AbsenceProof::response_digest(&beta);
        let neg = crate::msg::NegativeResponse {
            beta: beta.clone(),
            from: self.id,
            sig: self.secret.sign(&neg_digest),
        };
        self.emit(out, Destination::ToPrimary, ProtocolMsg::Negative(neg));
        if self.is_impetus() {
            self.emit(out, Destination::ToRegulars, ProtocolMsg::PrimaryTimeout(gp));
        }
    }

    /// Committee members relay Γ_p payload replies from regulars up to the
    /// primary (the primary is not in the regulars' Proposal fan-in path).
    pub(crate) fn maybe_recovery_reply(
        &mut self,
        out: &mut StepOutput,
        from: SignerId,
        beta: &crate::types::ProposalCert,
        txs: &[crate::types::Transaction],
    ) {
        if txs.is_empty() {
            return;
        }
        let key = (beta.rho.s, digest_encoded(&beta.rho));
        if self.is_impetus()
            && !self.assignment.members.contains(&from)
            && self.gamma_p_seen.contains_key(&key)
            && self.gamma_p_relayed.insert(key)
        {
            self.emit(out, 
                Destination::ToPrimary,
                ProtocolMsg::Proposal {
                    beta: beta.clone(),
                    txs: txs.to_vec(),
                    absence: None,
                },
            );
        }
        // The primary's own consumption of a matching payload reply.
        if self.is_primary() {
            self.primary_take_recovery_payload(out, beta, txs);
        }
    }
}
