//! Normal-mode handlers: block proposal, committee pre-agreement,
//! confirmation, approval and commit.

use crate::crypto::{Signature, SignerId};
use crate::msg::{CommittedBlock, ProtocolMsg};
use crate::types::{
    digest_encoded, payload_digest, AbsenceProof, ApprovalCert, Block, BlockHeader, Digest32,
    Evidence, ProposalCert, Transaction,
};

use super::{Destination, HarnessEvent, Mode, NodeState, Role, StepOutput, ValidateError};

impl NodeState {
    /// Full validity check an impetus member runs on a Pre-Prepare.
    pub fn validate_pre_prepare(&self, block: &Block) -> Result<(), ValidateError> {
        let hdr = &block.header;
        if hdr.v != self.view || self.mode != Mode::Normal {
            return Err(ValidateError::WrongView);
        }
        let sig_digest = hdr.own_sign_digest();
        if hdr.proposer_sig.signer != self.assignment.primary
            || !self.keyring.verify(&hdr.proposer_sig, &sig_digest)
        {
            return Err(ValidateError::BadSignature);
        }
        let expected = self.next_unproposed_height();
        if hdr.s != expected {
            return Err(ValidateError::WrongSequence { got: hdr.s, expected });
        }
        match self.parent_id_for(hdr.s) {
            Some(parent) if parent == hdr.d => {}
            _ => return Err(ValidateError::BadParent),
        }
        if !block.payload_matches() {
            return Err(ValidateError::BadPayloadDigest);
        }
        self.validate_txs(&block.txs)?;
        self.validate_recovery(block)?;
        Ok(())
    }

    pub(crate) fn validate_txs(&self, txs: &[Transaction]) -> Result<(), ValidateError> {
        let mut in_block = std::collections::BTreeSet::new();
        for tx in txs {
            if !tx.well_formed()
                || self.committed_tx_ids.contains(&tx.id)
                || !in_block.insert(tx.id)
            {
                return Err(ValidateError::InvalidTx);
            }
        }
        Ok(())
    }

    /// First block of a view at an obligated height must either re-propose a
    /// pending β or carry a valid absence proof for one.
    pub(crate) fn validate_recovery(&self, block: &Block) -> Result<(), ValidateError> {
        let Some(pending) = self.obligations.get(&block.header.s) else {
            return Ok(());
        };
        if pending.is_empty() {
            return Ok(());
        }
        if pending.iter().any(|b| b.rho.same_content(&block.header)) {
            return Ok(());
        }
        if let Some(absence) = &block.absence {
            let matches_obligation =
                pending.iter().any(|b| b.rho.same_content(&absence.beta.rho));
            if matches_obligation && self.verify_absence(absence) {
                return Ok(());
            }
        }
        Err(ValidateError::MissingRecovery)
    }

    pub(crate) fn verify_absence(&self, absence: &AbsenceProof) -> bool {
        let digest = AbsenceProof::response_digest(&absence.beta);
        self.keyring.verify_aggregate(
            &absence.responses,
            &digest,
            self.cfg.regular_quorum(),
            &self.everyone(),
        )
    }

    /// Impetus member receives the primary's block.
    pub(crate) fn on_pre_prepare(&mut self, out: &mut StepOutput, _from: SignerId, block: Block) {
        if self.role() != Role::Impetus || !self.normal_active() {
            return;
        }
        // Equivocation check against the header already accepted at this
        // height, before ordinary validation.
        let hdr = &block.header;
        if hdr.v == self.view && self.keyring.verify(&hdr.proposer_sig, &hdr.own_sign_digest()) {
            if let Some(prev) = self.epochs.get(&hdr.s).and_then(|e| e.header.clone()) {
                if prev.v == hdr.v && prev.h != hdr.h {
                    self.emit_equivocation_complaint(out, prev, hdr.clone());
                    return;
                }
            }
        }
        match self.validate_pre_prepare(&block) {
            Ok(()) => {}
            Err(ValidateError::BadPayloadDigest) | Err(ValidateError::InvalidTx) => {
                // Self-certifying misbehavior: a validly signed bad block.
                if self.keyring.verify(&hdr.proposer_sig, &hdr.own_sign_digest()) {
                    self.emit_invalid_proposal_complaint(out, block);
                }
                return;
            }
            Err(_) => return,
        }

        let (v, s, h) = (hdr.v, hdr.s, hdr.h);
        if let Some(a) = &block.absence {
            self.absence_store.insert(s, a.clone());
        }
        let epoch = self.epochs.entry(s).or_default();
        epoch.header = Some(block.header.clone());
        epoch.absence_ok = block.absence.is_some();
        epoch.payload = Some(block.txs.clone());
        self.payloads.insert(h, block.txs.clone());

        let vote_digest = ProposalCert::vote_digest(v, s, &h);
        let own_sig = self.secret.sign(&vote_digest);
        let epoch = self.epochs.get_mut(&s).unwrap();
        epoch.preproposals.entry(h).or_default().insert(self.id, own_sig.clone());
        epoch.sent_preproposal = true;
        self.emit(out,
            Destination::ToCommittee,
            ProtocolMsg::PreProposal { v, s, h, from: self.id, sig: own_sig },
        );
        self.progress(out);
        self.try_build_beta(out, s);
    }

    /// Impetus member tallies a committee vote for (v, s, h).
    pub(crate) fn on_pre_proposal(
        &mut self,
        out: &mut StepOutput,
        _from: SignerId,
        v: u64,
        s: u64,
        h: Digest32,
        sender: SignerId,
        sig: Signature,
    ) {
        if self.role() != Role::Impetus || !self.normal_active() {
            return;
        }
        if v != self.view || s <= self.tip_height() {
            return;
        }
        if !self.assignment.members.contains(&sender) || sig.signer != sender {
            return;
        }
        if !self.keyring.verify(&sig, &ProposalCert::vote_digest(v, s, &h)) {
            return;
        }
        let epoch = self.epochs.entry(s).or_default();
        // Votes for an unknown block are cached; they only count toward β
        // once the block itself arrives and matches their digest.
        epoch.preproposals.entry(h).or_default().insert(sender, sig);
        self.try_build_beta(out, s);
    }

    /// Build β once ⌊c/2⌋+1 committee votes cover the accepted block.
    pub(crate) fn try_build_beta(&mut self, out: &mut StepOutput, s: u64) {
        let quorum = self.cfg.committee_quorum();
        let Some(epoch) = self.epochs.get(&s) else { return };
        if epoch.built_beta || !epoch.sent_preproposal {
            return;
        }
        let Some(header) = epoch.header.clone() else { return };
        let votes: Vec<Signature> = epoch
            .preproposals
            .get(&header.h)
            .map(|tally| tally.values().cloned().collect())
            .unwrap_or_default();
        if votes.len() < quorum {
            return;
        }
        let vote_digest = ProposalCert::vote_digest(header.v, s, &header.h);
        let Ok(sigma_r) = self.keyring.aggregate(&votes, &vote_digest, quorum) else {
            return;
        };
        let beta = ProposalCert { rho: header.clone(), sigma_r };
        let txs = epoch.payload.clone().unwrap_or_default();
        let absence = if epoch.absence_ok {
            // Re-attach the absence proof so regulars can validate recovery.
            self.stored_absence(&header)
        } else {
            None
        };

        let epoch = self.epochs.get_mut(&s).unwrap();
        epoch.built_beta = true;
        epoch.beta = Some(beta.clone());
        self.record_beta(beta.clone());

        self.emit(out, 
            Destination::ToRegulars,
            ProtocolMsg::Proposal { beta: beta.clone(), txs, absence: absence.clone() },
        );
        // The primary already has the payload; it gets β alone.
        self.emit(out, 
            Destination::ToPrimary,
            ProtocolMsg::Proposal { beta: beta.clone(), txs: Vec::new(), absence },
        );
        // Acting as a regular node, the builder confirms its own proposal.
        self.accept_proposal(out, beta);
    }

    fn stored_absence(&self, header: &BlockHeader) -> Option<AbsenceProof> {
        self.absence_store.get(&header.s).cloned()
    }

    /// Any node receives a certified proposal (full, or β-only when it is
    /// the primary, which already holds the payload).
    pub(crate) fn on_proposal(
        &mut self,
        out: &mut StepOutput,
        from: SignerId,
        beta: ProposalCert,
        txs: Vec<Transaction>,
        absence: Option<AbsenceProof>,
    ) {
        // A Proposal carrying the payload of a Γ_p recovery target is also
        // the reply path for the new primary; handle that before the normal
        // gating so recovery works regardless of roles.
        self.maybe_recovery_reply(out, from, &beta, &txs);

        if !self.normal_active() {
            return;
        }
        let s = beta.rho.s;
        if s <= self.tip_height() {
            return;
        }
        if beta.rho.v != self.view {
            return;
        }
        if !self.verify_beta(&beta) {
            return;
        }
        // Conflicting certified proposal at a locked height: equivocation.
        if let Some(locked) = self.eta.get(&s) {
            if *locked != beta.rho.h {
                if let Some(prev) = self.betas_at(s).into_iter().find(|b| b.rho.h == *locked) {
                    self.emit_beta_equivocation(out, prev, beta);
                }
                return;
            }
        }
        self.record_beta(beta.clone());

        // β alone: only meaningful if we already hold the payload.
        let payload = if txs.is_empty() && beta.rho.h != payload_digest(&[]) {
            match self.payloads.get(&beta.rho.h) {
                Some(p) => p.clone(),
                None => return,
            }
        } else {
            if payload_digest(&txs) != beta.rho.h {
                return;
            }
            txs
        };

        let epoch = self.epochs.entry(s).or_default();
        if epoch.sent_confirm {
            // Pipelined primary: a later β may still trigger the next block.
            self.maybe_pipeline_next(out, &beta);
            return;
        }
        epoch.header = Some(beta.rho.clone());
        epoch.payload = Some(payload.clone());
        self.payloads.insert(beta.rho.h, payload.clone());
        if let Some(a) = &absence {
            self.absence_store.insert(s, a.clone());
        }

        if s != self.next_confirm_height() {
            // Out of order: store and wait to fill the gap.
            let epoch = self.epochs.get_mut(&s).unwrap();
            epoch.deferred_proposal = Some((beta, payload, absence));
            return;
        }

        // Validate against local history before confirming.
        if !self.proposal_valid_here(&beta, &payload, &absence) {
            return;
        }
        self.accept_proposal(out, beta.clone());
        self.flush_deferred(out);
        self.maybe_pipeline_next(out, &beta);
    }

    pub(crate) fn verify_beta(&self, beta: &ProposalCert) -> bool {
        let committee = self.assignment_for(beta.rho.v).members;
        let digest = beta.own_vote_digest();
        if !self.keyring.verify_aggregate(
            &beta.sigma_r,
            &digest,
            self.cfg.committee_quorum(),
            &committee,
        ) {
            return false;
        }
        let hdr_digest = beta.rho.own_sign_digest();
        beta.rho.proposer_sig.signer == self.assignment_for(beta.rho.v).primary
            && self.keyring.verify(&beta.rho.proposer_sig, &hdr_digest)
    }

    fn proposal_valid_here(
        &self,
        beta: &ProposalCert,
        payload: &[Transaction],
        absence: &Option<AbsenceProof>,
    ) -> bool {
        let s = beta.rho.s;
        match self.parent_id_for(s) {
            Some(parent) if parent == beta.rho.d => {}
            _ => return false,
        }
        if self.validate_txs(payload).is_err() {
            return false;
        }
        // Recovery obligation applies to everyone accepting the first block
        // of a view at an obligated height.
        let block = Block {
            header: beta.rho.clone(),
            absence: absence.clone(),
            txs: payload.to_vec(),
        };
        self.validate_recovery(&block).is_ok()
    }

    /// Set the confirm lock η and send Confirm to the committee and primary.
    pub(crate) fn accept_proposal(&mut self, out: &mut StepOutput, beta: ProposalCert) {
        let (v, s, h) = (beta.rho.v, beta.rho.s, beta.rho.h);
        if self.eta.contains_key(&s) {
            return;
        }
        self.eta.insert(s, h);
        self.obligations.remove(&s);
        self.record_beta(beta);
        let epoch = self.epochs.entry(s).or_default();
        epoch.sent_confirm = true;
        let digest = ApprovalCert::confirm_digest(v, s, &h);
        let sig = self.secret.sign(&digest);
        epoch.confirms.entry(h).or_default().insert(self.id, sig.clone());
        self.emit(out, 
            Destination::ToCommittee,
            ProtocolMsg::Confirm { v, s, h, from: self.id, sig: sig.clone() },
        );
        self.emit(out, Destination::ToPrimary, ProtocolMsg::Confirm { v, s, h, from: self.id, sig });
        self.progress(out);
        self.try_commit_height(out, s);
    }

    /// Confirm proposals cached out of order once their gap is filled.
    pub(crate) fn flush_deferred(&mut self, out: &mut StepOutput) {
        loop {
            let next = self.next_confirm_height();
            let Some((beta, payload, absence)) =
                self.epochs.get_mut(&next).and_then(|e| e.deferred_proposal.take())
            else {
                return;
            };
            if !self.proposal_valid_here(&beta, &payload, &absence) {
                return;
            }
            self.accept_proposal(out, beta);
        }
    }

    /// Pipelined primary proposes the next block as soon as β for its own
    /// latest proposal arrives.
    fn maybe_pipeline_next(&mut self, out: &mut StepOutput, beta: &ProposalCert) {
        if self.cfg.pipelined
            && self.is_primary()
            && self.mode == Mode::Normal
            && beta.rho.s == self.last_proposed
        {
            self.maybe_propose(out);
        }
    }

    /// Impetus member or primary tallies a Confirm.
    pub(crate) fn on_confirm(
        &mut self,
        out: &mut StepOutput,
        v: u64,
        s: u64,
        h: Digest32,
        sender: SignerId,
        sig: Signature,
    ) {
        if !(self.is_impetus() || self.is_primary()) || !self.normal_active() {
            return;
        }
        if v != self.view || s <= self.tip_height() {
            return;
        }
        if sig.signer != sender
            || !self.keyring.verify(&sig, &ApprovalCert::confirm_digest(v, s, &h))
        {
            return;
        }
        let epoch = self.epochs.entry(s).or_default();
        epoch.confirms.entry(h).or_default().insert(sender, sig);
        self.try_commit_height(out, s);
    }

    /// Commit when 2f+1 Confirms cover the locked block, in height order.
    pub(crate) fn try_commit_height(&mut self, out: &mut StepOutput, s: u64) {
        loop {
            let next = self.tip_height() + 1;
            if s < next {
                return;
            }
            let quorum = self.cfg.regular_quorum();
            let Some(epoch) = self.epochs.get(&next) else { return };
            let Some(h) = self.eta.get(&next).copied() else { return };
            let locked_votes = epoch.confirms.get(&h);
            let cert = if let Some(cert) = &epoch.approval {
                cert.clone()
            } else if locked_votes.is_some_and(|t| t.len() >= quorum) {
                let votes: Vec<Signature> = locked_votes.unwrap().values().cloned().collect();
                let digest = ApprovalCert::confirm_digest(self.view, next, &h);
                match self.keyring.aggregate(&votes, &digest, quorum) {
                    Ok(sigma) => ApprovalCert { v: self.view, s: next, h, sigma },
                    Err(_) => return,
                }
            } else {
                return;
            };
            let Some(header) = self.epochs.get(&next).and_then(|e| e.header.clone()) else {
                return;
            };
            let Some(payload) = self.payloads.get(&h).cloned() else { return };
            let block = Block {
                header,
                absence: self.absence_store.get(&next).cloned(),
                txs: payload,
            };
            let broadcast_approval = self.is_impetus();
            self.commit_block(out, CommittedBlock { block, cert: cert.clone() });
            if broadcast_approval {
                self.emit(out, Destination::ToRegulars, ProtocolMsg::Approval(cert));
            }
            if !self.cfg.pipelined && self.is_primary() && self.mode == Mode::Normal {
                self.maybe_propose(out);
            }
        }
    }

    /// Regular node applies a 2f+1 approval certificate.
    pub(crate) fn on_approval(&mut self, out: &mut StepOutput, cert: ApprovalCert) {
        if self.is_impetus() || self.is_primary() {
            return;
        }
        if !self.normal_active() || cert.s <= self.tip_height() {
            return;
        }
        let digest = cert.own_confirm_digest();
        if !self.keyring.verify_aggregate(
            &cert.sigma,
            &digest,
            self.cfg.regular_quorum(),
            &self.everyone(),
        ) {
            return;
        }
        let s = cert.s;
        self.epochs.entry(s).or_default().approval = Some(cert);
        if s > self.tip_height() + 1 || self.eta.get(&s).is_none() {
            // Held until the gap fills; complain so someone syncs us.
            let gamma = self.build_gamma();
            self.emit(out, Destination::ToCommittee, ProtocolMsg::Timeout(gamma));
            return;
        }
        self.try_commit_height(out, s);
    }

    /// Append a committed block, emit responses, clean per-height state.
    pub(crate) fn commit_block(&mut self, out: &mut StepOutput, cb: CommittedBlock) {
        let s = cb.block.header.s;
        debug_assert_eq!(s, self.tip_height() + 1, "commits are serial");
        let h = cb.block.header.h;
        let v = cb.block.header.v;
        let block_id = cb.block.header.block_id();
        for tx in &cb.block.txs {
            self.committed_tx_ids.insert(tx.id);
            self.mempool.remove(&tx.t);
            let digest = ProtocolMsg::response_sign_digest(s, v, &h, tx.t);
            self.emit(out, 
                Destination::ToClients,
                ProtocolMsg::ClientResponse {
                    s,
                    v,
                    r: h,
                    t: tx.t,
                    from: self.id,
                    sig: self.secret.sign(&digest),
                },
            );
        }
        self.payloads.insert(h, cb.block.txs.clone());
        out.event(HarnessEvent::Committed {
            s,
            v,
            h,
            block_id,
            tx_count: cb.block.txs.len() as u64,
        });
        self.chain.push(cb);
        self.eta.remove(&s);
        self.epochs.remove(&s);
        self.obligations.remove(&s);
        // Pending βs at or below the committed height are settled.
        let settled: Vec<_> = self.betas.range(..(s + 1, [0u8; 32])).map(|(k, _)| *k).collect();
        for k in settled {
            self.betas.remove(&k);
        }
        self.consecutive_vc = 0;
        self.progress(out);
    }

    /// Primary proposes the next block: recovery targets first, then a fresh
    /// block from the mempool (empty if the mempool is empty).
    pub(crate) fn maybe_propose(&mut self, out: &mut StepOutput) {
        if !self.is_primary() || self.mode != Mode::Normal {
            return;
        }
        let next = self.last_proposed.max(self.tip_height()) + 1;
        if let Some(max) = self.cfg.max_height {
            if next > max {
                return;
            }
        }
        if self.recovery.current.is_some() {
            return; // waiting on Γ_p replies
        }
        if next > self.tip_height() + self.cfg.cache_heights {
            return; // don't outrun the network's cache bound
        }
        // Recovery obligations at this height take precedence.
        if let Some(pending) = self.obligations.get(&next).cloned() {
            if let Some(beta) = pending.first().cloned() {
                self.start_recovery(out, beta);
                return;
            }
        }
        let Some(parent) = self.parent_id_for(next) else { return };
        let txs = self.take_mempool_batch();
        self.propose_block(out, next, parent, txs, None);
    }

    /// Pack transactions up to the configured block size, skipping ones
    /// already riding in an uncommitted proposal.
    pub(crate) fn take_mempool_batch(&mut self) -> Vec<Transaction> {
        use crate::encoding::CanonicalEncode;
        let in_flight: std::collections::BTreeSet<Digest32> = self
            .epochs
            .values()
            .filter_map(|e| e.payload.as_ref())
            .flat_map(|txs| txs.iter().map(|t| t.id))
            .collect();
        let mut batch = Vec::new();
        let mut bytes = 0u64;
        for tx in self.mempool.values() {
            if in_flight.contains(&tx.id) {
                continue;
            }
            let len = tx.encoded_len() as u64;
            if bytes + len > self.cfg.block_size && !batch.is_empty() {
                break;
            }
            if bytes + len > self.cfg.block_size {
                break;
            }
            bytes += len;
            batch.push(tx.clone());
        }
        batch
    }

    pub(crate) fn propose_block(
        &mut self,
        out: &mut StepOutput,
        s: u64,
        parent: Digest32,
        txs: Vec<Transaction>,
        absence: Option<AbsenceProof>,
    ) {
        let h = payload_digest(&txs);
        let sig_digest = BlockHeader::sign_digest(self.view, s, &h, &parent);
        let header = BlockHeader {
            v: self.view,
            s,
            h,
            d: parent,
            proposer_sig: self.secret.sign(&sig_digest),
        };
        let block = Block { header: header.clone(), absence: absence.clone(), txs: txs.clone() };
        self.last_proposed = s;
        let epoch = self.epochs.entry(s).or_default();
        epoch.header = Some(header);
        epoch.payload = Some(txs.clone());
        self.payloads.insert(h, txs);
        if let Some(a) = absence {
            self.absence_store.insert(s, a);
        }
        self.emit(out, Destination::ToCommittee, ProtocolMsg::PrePrepare(block));
        self.progress(out);
    }

    // --- misbehavior complaints ---------------------------------------------

    pub(crate) fn emit_equivocation_complaint(
        &mut self,
        out: &mut StepOutput,
        a: BlockHeader,
        b: BlockHeader,
    ) {
        let evidence = Evidence::Equivocation {
            a: ProposalCert { rho: a, sigma_r: crate::crypto::AggregateSignature::from_parts_unchecked(Vec::new()) },
            b: ProposalCert { rho: b, sigma_r: crate::crypto::AggregateSignature::from_parts_unchecked(Vec::new()) },
        };
        self.broadcast_explicit(out, evidence);
    }

    pub(crate) fn emit_beta_equivocation(
        &mut self,
        out: &mut StepOutput,
        a: ProposalCert,
        b: ProposalCert,
    ) {
        let evidence = Evidence::Equivocation { a, b };
        self.broadcast_explicit(out, evidence);
    }

    pub(crate) fn emit_invalid_proposal_complaint(&mut self, out: &mut StepOutput, block: Block) {
        self.broadcast_explicit(out, Evidence::InvalidProposal { block });
    }

    fn broadcast_explicit(&mut self, out: &mut StepOutput, evidence: Evidence) {
        let v = self.view;
        let digest = crate::msg::ExplicitComplaint::sign_digest(v, &evidence, self.id);
        let complaint = crate::msg::ExplicitComplaint {
            v,
            evidence,
            from: self.id,
            sig: self.secret.sign(&digest),
        };
        // Blacklist locally and treat our own complaint as a proof.
        self.apply_evidence_blacklist(out, &complaint.evidence);
        self.emit(out, Destination::Broadcast, ProtocolMsg::Explicit(complaint.clone()));
        self.on_proof_internal(out, crate::msg::Proof::Explicit(complaint));
    }

    /// Who the evidence incriminates: the proposer, plus committee members
    /// that certified both sides of an equivocation.
    pub(crate) fn apply_evidence_blacklist(&mut self, out: &mut StepOutput, ev: &Evidence) {
        let key = digest_encoded(ev);
        match ev {
            Evidence::Equivocation { a, b } => {
                let mut nodes = vec![a.rho.proposer_sig.signer];
                let in_both: Vec<SignerId> = a
                    .sigma_r
                    .signers()
                    .filter(|s| b.sigma_r.signers().any(|t| t == *s))
                    .collect();
                nodes.extend(in_both);
                nodes.sort();
                nodes.dedup();
                self.report_blacklist(out, key, nodes);
            }
            Evidence::InvalidProposal { block } => {
                let nodes = vec![block.header.proposer_sig.signer];
                self.report_blacklist(out, key, nodes);
            }
        }
    }
}
