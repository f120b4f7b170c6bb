//! View change: proof of failure, the ConfV/ApproveV escalation, committee
//! re-selection, the V/Q/Ready/P installation handshake, and the new
//! primary's recovery of pending proposals.

use std::collections::BTreeMap;

use crate::crypto::Signature;
use crate::msg::{
    ApproveV, ConfV, ExplicitComplaint, NegativeResponse, PrimaryTimeout, Proof, ProtocolMsg,
    Ready, TimeoutComplaint, ViewChange,
};
use crate::types::{
    digest_encoded, payload_digest, AbsenceProof, Digest32, Evidence, ProposalCert, Transaction,
};

use super::{Destination, HarnessEvent, Mode, NodeState, StepOutput, VcState};

impl NodeState {
    // --- evidence and proofs -------------------------------------------------

    /// Evidence must verify with no local state beyond the (recomputable)
    /// assignment of the view it concerns.
    pub(crate) fn verify_evidence(&self, ev: &Evidence) -> bool {
        match ev {
            Evidence::Equivocation { a, b } => {
                if a.rho.s != b.rho.s || a.rho.v != b.rho.v || a.rho.h == b.rho.h {
                    return false;
                }
                self.verify_equiv_half(a) && self.verify_equiv_half(b)
            }
            Evidence::InvalidProposal { block } => {
                let hdr = &block.header;
                let assignment = self.assignment_for(hdr.v);
                if hdr.proposer_sig.signer != assignment.primary
                    || !self.keyring.verify(&hdr.proposer_sig, &hdr.own_sign_digest())
                {
                    return false;
                }
                let bad_payload = !block.payload_matches();
                let bad_txs = {
                    let mut ids = std::collections::BTreeSet::new();
                    block.txs.iter().any(|t| !t.well_formed() || !ids.insert(t.id))
                };
                bad_payload || bad_txs
            }
        }
    }

    /// One side of an equivocation: a certified β, or a bare signed header.
    fn verify_equiv_half(&self, half: &ProposalCert) -> bool {
        let assignment = self.assignment_for(half.rho.v);
        let sig_ok = half.rho.proposer_sig.signer == assignment.primary
            && self.keyring.verify(&half.rho.proposer_sig, &half.rho.own_sign_digest());
        if !sig_ok {
            return false;
        }
        if half.sigma_r.is_empty() {
            return true;
        }
        self.keyring.verify_aggregate(
            &half.sigma_r,
            &half.own_vote_digest(),
            self.cfg.committee_quorum(),
            &assignment.members,
        )
    }

    /// Validate a proof and return the view it complains about.
    pub(crate) fn validate_proof(&self, proof: &Proof) -> Option<u64> {
        match proof {
            Proof::Timeouts(ts) => {
                if ts.len() < self.cfg.proof_quorum() {
                    return None;
                }
                let v = ts.first()?.v;
                let mut senders = std::collections::BTreeSet::new();
                for t in ts {
                    if t.v != v
                        || t.sig.signer != t.from
                        || !senders.insert(t.from)
                        || !self.keyring.verify(&t.sig, &t.own_sign_digest())
                    {
                        return None;
                    }
                }
                Some(v)
            }
            Proof::Explicit(e) => {
                let digest = ExplicitComplaint::sign_digest(e.v, &e.evidence, e.from);
                if e.sig.signer != e.from || !self.keyring.verify(&e.sig, &digest) {
                    return None;
                }
                if !self.verify_evidence(&e.evidence) {
                    return None;
                }
                Some(e.v)
            }
        }
    }

    pub(crate) fn on_explicit(&mut self, out: &mut StepOutput, e: ExplicitComplaint) {
        let digest = ExplicitComplaint::sign_digest(e.v, &e.evidence, e.from);
        if e.sig.signer != e.from || !self.keyring.verify(&e.sig, &digest) {
            return;
        }
        if !self.verify_evidence(&e.evidence) {
            return;
        }
        self.apply_evidence_blacklist(out, &e.evidence);
        self.on_proof_internal(out, Proof::Explicit(e));
    }

    pub(crate) fn on_proof(&mut self, out: &mut StepOutput, proof: Proof) {
        self.on_proof_internal(out, proof);
    }

    /// A valid proof makes this node countersign the view change once. The
    /// complained-about view's own committee aggregates the ConfV votes, so
    /// routing follows that round's assignment even if we lag behind.
    pub(crate) fn on_proof_internal(&mut self, out: &mut StepOutput, proof: Proof) {
        let Some(round) = self.validate_proof(&proof) else { return };
        if round < self.current_round() {
            return;
        }
        if let Proof::Explicit(e) = &proof {
            let ev = e.evidence.clone();
            self.apply_evidence_blacklist(out, &ev);
        }
        self.proof_seen.entry(round).or_insert_with(|| proof.clone());
        if self.sent_confv.insert(round) {
            let digest = ConfV::vote_digest(round);
            let cv = ConfV {
                v: round,
                from: self.id,
                sig: self.secret.sign(&digest),
                proof,
            };
            let committee = self.assignment_for(round).members;
            self.emit_to(
                out,
                Destination::ToCommittee,
                committee.iter().copied().collect(),
                ProtocolMsg::ConfV(cv.clone()),
            );
            if committee.contains(&self.id) {
                self.tally_confv(out, cv);
            }
        }
    }

    pub(crate) fn on_confv(&mut self, out: &mut StepOutput, cv: ConfV) {
        if cv.sig.signer != cv.from
            || !self.keyring.verify(&cv.sig, &ConfV::vote_digest(cv.v))
        {
            return;
        }
        if self.validate_proof(&cv.proof) != Some(cv.v) {
            return;
        }
        if cv.v < self.current_round() {
            return;
        }
        // A committee member that sees a ConfV before any proof spreads it,
        // so a Byzantine member cannot split the view change.
        let round_assignment = self.assignment_for(cv.v);
        if round_assignment.members.contains(&self.id)
            && !self.proof_seen.contains_key(&cv.v)
            && self.confv_relayed.insert(cv.v)
        {
            let regulars: Vec<_> = (0..self.cfg.n)
                .map(crate::crypto::SignerId)
                .filter(|i| !round_assignment.members.contains(i) && *i != round_assignment.primary)
                .collect();
            self.emit_to(out, Destination::ToRegulars, regulars, ProtocolMsg::ConfV(cv.clone()));
        }
        self.on_proof_internal(out, cv.proof.clone());
        self.tally_confv(out, cv);
    }

    pub(crate) fn tally_confv(&mut self, out: &mut StepOutput, cv: ConfV) {
        let round = cv.v;
        self.confv_tally.entry(round).or_default().insert(cv.from, cv.sig);
        let round_assignment = self.assignment_for(round);
        if !round_assignment.members.contains(&self.id) || round < self.current_round() {
            return;
        }
        let quorum = self.cfg.regular_quorum();
        if self.confv_tally[&round].len() < quorum || !self.sent_approvev.insert(round) {
            return;
        }
        // Stop normal-mode traffic for the condemned view.
        if round == self.view {
            self.halted_view = Some(round);
        }
        let votes: Vec<Signature> = self.confv_tally[&round].values().cloned().collect();
        let digest = ConfV::vote_digest(round);
        let Ok(sigma) = self.keyring.aggregate(&votes, &digest, quorum) else { return };
        let Some(proof) = self.proof_seen.get(&round).cloned() else { return };
        let sign = ApproveV::sign_digest(round, self.id);
        let av = ApproveV { v: round, sigma, proof, from: self.id, sig: self.secret.sign(&sign) };
        let regulars: Vec<_> = (0..self.cfg.n)
            .map(crate::crypto::SignerId)
            .filter(|i| !round_assignment.members.contains(i) && *i != round_assignment.primary)
            .collect();
        self.emit_to(out, Destination::ToRegulars, regulars, ProtocolMsg::ApproveV(av.clone()));
        self.apply_approvev(out, av);
    }

    pub(crate) fn on_approvev(&mut self, out: &mut StepOutput, av: ApproveV) {
        if av.sig.signer != av.from
            || !self.keyring.verify(&av.sig, &ApproveV::sign_digest(av.v, av.from))
        {
            return;
        }
        if !self.keyring.verify_aggregate(
            &av.sigma,
            &ConfV::vote_digest(av.v),
            self.cfg.regular_quorum(),
            &self.everyone(),
        ) {
            return;
        }
        if self.validate_proof(&av.proof) != Some(av.v) {
            return;
        }
        self.apply_approvev(out, av);
    }

    fn apply_approvev(&mut self, out: &mut StepOutput, av: ApproveV) {
        if av.v < self.current_round() {
            return;
        }
        self.enter_viewchange(out, av.v + 1);
    }

    /// Select the new assignment and report our history to the new primary.
    pub(crate) fn enter_viewchange(&mut self, out: &mut StepOutput, target: u64) {
        if let Some(vc) = &self.vc {
            if vc.target >= target {
                return;
            }
        }
        if target <= self.view {
            return;
        }
        self.mode = Mode::ViewChange;
        self.assignment = self.assignment_for(target);
        self.halted_view = None;
        self.epochs.clear();
        self.eta.clear();
        self.obligations.clear();
        self.gamma_p_seen.clear();
        self.gamma_p_relayed.clear();
        self.recovery = super::RecoveryState::default();
        self.consecutive_vc = self.consecutive_vc.saturating_add(1);
        self.timeouts_since_progress = 0;
        self.gamma_tally.retain(|&r, _| r >= target);
        self.confv_tally.retain(|&r, _| r + 1 >= target);
        out.event(HarnessEvent::EnteredView { v: target });

        let mut vc = VcState::new(target);
        let tip_s = self.tip_height();
        let tip_id = self.tip_id();
        let commit_sigma = self.chain.last().map(|cb| cb.cert.clone());
        let betas = self.pending_betas();
        let digest =
            ViewChange::sign_digest(target, tip_s, &tip_id, self.id, &commit_sigma, &betas);
        let v = ViewChange {
            new_v: target,
            tip_s,
            tip_id,
            from: self.id,
            commit_sigma,
            betas,
            sig: self.secret.sign(&digest),
        };
        vc.sent_v = true;
        self.vc = Some(vc);
        if self.assignment.primary == self.id {
            self.collect_viewchange(out, v);
            let early: Vec<ViewChange> = std::mem::take(&mut self.early_v);
            for stashed in early {
                if stashed.new_v == target {
                    self.on_viewchange(out, stashed);
                }
            }
        } else {
            self.emit(out, Destination::ToPrimary, ProtocolMsg::ViewChange(v));
        }
        self.early_v.retain(|v| v.new_v > target);
        self.arm_timer(out);
    }

    /// Adopt a view change we only learned about from its artifacts (Q/P).
    fn enter_viewchange_silent(&mut self, target: u64) {
        self.mode = Mode::ViewChange;
        self.assignment = self.assignment_for(target);
        self.halted_view = None;
        self.epochs.clear();
        self.eta.clear();
        self.obligations.clear();
        self.gamma_p_seen.clear();
        self.gamma_p_relayed.clear();
        self.recovery = super::RecoveryState::default();
        self.consecutive_vc = self.consecutive_vc.saturating_add(1);
        self.timeouts_since_progress = 0;
        self.vc = Some(VcState::new(target));
    }

    /// A V message is acceptable if its signature, tip certificate and β
    /// certificates all verify.
    pub(crate) fn viewchange_valid(&self, v: &ViewChange) -> bool {
        if v.sig.signer != v.from || !self.keyring.verify(&v.sig, &v.own_sign_digest()) {
            return false;
        }
        match (&v.commit_sigma, v.tip_s) {
            (None, 0) => {
                if v.tip_id != self.cfg.genesis {
                    return false;
                }
            }
            (Some(cert), s) if s > 0 => {
                if cert.s != s || cert.v >= v.new_v {
                    return false;
                }
                if !self.keyring.verify_aggregate(
                    &cert.sigma,
                    &cert.own_confirm_digest(),
                    self.cfg.regular_quorum(),
                    &self.everyone(),
                ) {
                    return false;
                }
            }
            _ => return false,
        }
        v.betas.iter().all(|b| b.rho.v < v.new_v && self.verify_beta(b))
    }

    pub(crate) fn on_viewchange(&mut self, out: &mut StepOutput, v: ViewChange) {
        if !self.viewchange_valid(&v) {
            return;
        }
        match &self.vc {
            Some(vc) if vc.target == v.new_v => {
                if self.assignment.primary != self.id || vc.sent_q {
                    return;
                }
                self.collect_viewchange(out, v);
            }
            _ => {
                // We may be elected primary of a view change we have not
                // heard of yet; keep the report until we catch up.
                if v.new_v > self.current_round() && self.early_v.len() < 4 * self.cfg.n as usize {
                    self.early_v.push(v);
                }
            }
        }
    }

    fn collect_viewchange(&mut self, out: &mut StepOutput, v: ViewChange) {
        let quorum = self.cfg.regular_quorum();
        let vc = self.vc.as_mut().expect("collector has active view change");
        vc.v_tally.insert(v.from, v);
        if vc.v_tally.len() < quorum || vc.sent_q {
            return;
        }
        vc.sent_q = true;
        let q: Vec<ViewChange> = vc.v_tally.values().cloned().collect();
        self.emit(out, Destination::ToCommittee, ProtocolMsg::HistoryBundle(q.clone()));
        self.adopt_history_bundle(out, q);
    }

    pub(crate) fn on_history_bundle(&mut self, out: &mut StepOutput, q: Vec<ViewChange>) {
        let Some(first) = q.first() else { return };
        let target = first.new_v;
        if target < self.current_round() || target <= self.view {
            return;
        }
        let mut senders = std::collections::BTreeSet::new();
        for v in &q {
            if v.new_v != target || !senders.insert(v.from) || !self.viewchange_valid(v) {
                return;
            }
        }
        if senders.len() < self.cfg.regular_quorum() {
            return;
        }
        if target > self.current_round() {
            self.enter_viewchange_silent(target);
            out.event(HarnessEvent::EnteredView { v: target });
        }
        if self.vc.as_ref().is_some_and(|vc| vc.q.is_some()) {
            return;
        }
        self.adopt_history_bundle(out, q);
    }

    /// Record Q, derive the certified tip and recovery set, spread it if we
    /// sit on the new committee, then line our history up with it.
    fn adopt_history_bundle(&mut self, out: &mut StepOutput, q: Vec<ViewChange>) {
        // Most recent valid history: highest certified height; between two
        // certificates for one height (possible across a re-proposal) the
        // later view's decision wins.
        let (mut tip_s, mut tip_id, mut tip_cert_v) = (0u64, self.cfg.genesis, 0u64);
        for v in &q {
            let cert_v = v.commit_sigma.as_ref().map(|c| c.v).unwrap_or(0);
            if (v.tip_s, cert_v) > (tip_s, tip_cert_v) {
                tip_s = v.tip_s;
                tip_id = v.tip_id;
                tip_cert_v = cert_v;
            }
        }
        let mut betas: BTreeMap<(u64, Digest32), ProposalCert> = BTreeMap::new();
        for v in &q {
            for b in &v.betas {
                if b.rho.s > tip_s {
                    betas.insert((b.rho.s, digest_encoded(&b.rho)), b.clone());
                }
            }
        }
        for b in betas.values() {
            self.record_beta(b.clone());
        }
        let forward = self.is_impetus();
        let vc = self.vc.as_mut().expect("active view change");
        vc.q = Some(q.clone());
        vc.q_tip = Some((tip_s, tip_id));
        vc.q_betas = betas.into_values().collect();
        if forward && !vc.q_forwarded {
            vc.q_forwarded = true;
            self.emit(out, Destination::ToRegulars, ProtocolMsg::HistoryBundle(q));
        }
        self.progress(out);
        self.maybe_ready(out);
        self.try_install(out);
    }

    /// Send Ready once local history matches the certified tip in Q,
    /// truncating a minority commit or syncing missing blocks first.
    pub(crate) fn maybe_ready(&mut self, out: &mut StepOutput) {
        let Some(vc) = &self.vc else { return };
        if vc.ready_sent || vc.q_tip.is_none() {
            return;
        }
        let (q_s, q_id) = vc.q_tip.unwrap();
        let target = vc.target;

        // A commit of ours at the certified height that is not the certified
        // block was a minority commit; it yields to the quorum history.
        if self.tip_height() >= q_s && q_s > 0 {
            let ours = self.committed_at(q_s).map(|cb| cb.block.header.block_id());
            if ours != Some(q_id) {
                self.truncate_chain_to(out, q_s - 1);
            }
        }
        if self.tip_height() > q_s {
            self.truncate_chain_to(out, q_s);
        }
        if self.tip_height() < q_s {
            let vc = self.vc.as_mut().unwrap();
            if !vc.awaiting_sync {
                vc.awaiting_sync = true;
                let gamma = TimeoutComplaint {
                    v: target,
                    s1: self.tip_height(),
                    h1: self.tip_id(),
                    gap: Some(crate::msg::GapEnd { s2: q_s + 1, h2: q_id }),
                    kind: crate::msg::MsgKind::Block,
                    from: self.id,
                    sig: self.secret.sign(&TimeoutComplaint::sign_digest(
                        target,
                        self.tip_height(),
                        &self.tip_id(),
                        &Some(crate::msg::GapEnd { s2: q_s + 1, h2: q_id }),
                        crate::msg::MsgKind::Block,
                        self.id,
                    )),
                };
                // During a view change anyone holding the blocks may serve.
                self.emit(out, Destination::Broadcast, ProtocolMsg::Timeout(gamma));
            }
            return;
        }

        let vc = self.vc.as_mut().unwrap();
        vc.ready_sent = true;
        let digest = Ready::sign_digest(target, q_s, &q_id, self.id);
        let ready = Ready {
            new_v: target,
            tip_s: q_s,
            tip_id: q_id,
            from: self.id,
            sig: self.secret.sign(&digest),
        };
        if self.assignment.primary == self.id {
            self.collect_ready(out, ready);
        } else {
            self.emit(out, Destination::ToPrimary, ProtocolMsg::Ready(ready));
        }
    }

    /// Drop committed blocks above `new_tip`, reporting each revocation.
    pub(crate) fn truncate_chain_to(&mut self, out: &mut StepOutput, new_tip: u64) {
        while self.tip_height() > new_tip {
            let cb = self.chain.pop().expect("nonempty chain");
            for tx in &cb.block.txs {
                self.committed_tx_ids.remove(&tx.id);
            }
            out.event(HarnessEvent::Revoked { s: cb.block.header.s, h: cb.block.header.h });
            // Keep the payload around: recovery may re-propose it.
            self.payloads.insert(cb.block.header.h, cb.block.txs.clone());
        }
        // The replaced heights may be re-filled with different blocks, so
        // the sync dedup must allow re-serving them.
        for sent in self.served.values_mut() {
            *sent = (*sent).min(new_tip);
        }
    }

    pub(crate) fn on_ready(&mut self, out: &mut StepOutput, r: Ready) {
        if r.sig.signer != r.from || !self.keyring.verify(&r.sig, &r.own_sign_digest()) {
            return;
        }
        let Some(vc) = &self.vc else { return };
        if vc.target != r.new_v || self.assignment.primary != self.id || vc.sent_p {
            return;
        }
        if vc.q_tip != Some((r.tip_s, r.tip_id)) {
            return;
        }
        self.collect_ready(out, r);
    }

    fn collect_ready(&mut self, out: &mut StepOutput, r: Ready) {
        let quorum = self.cfg.regular_quorum();
        let vc = self.vc.as_mut().expect("collector has active view change");
        vc.ready_tally.insert(r.from, r);
        if vc.ready_tally.len() < quorum || vc.sent_p {
            return;
        }
        vc.sent_p = true;
        let p: Vec<Ready> = vc.ready_tally.values().cloned().collect();
        vc.p = Some(p.clone());
        self.emit(out, Destination::ToCommittee, ProtocolMsg::ReadyBundle(p));
        self.try_install(out);
    }

    pub(crate) fn on_ready_bundle(&mut self, out: &mut StepOutput, p: Vec<Ready>) {
        let Some(first) = p.first() else { return };
        let target = first.new_v;
        let (tip_s, tip_id) = (first.tip_s, first.tip_id);
        if target <= self.view {
            return;
        }
        let mut senders = std::collections::BTreeSet::new();
        for r in &p {
            if r.new_v != target
                || r.tip_s != tip_s
                || r.tip_id != tip_id
                || !senders.insert(r.from)
                || r.sig.signer != r.from
                || !self.keyring.verify(&r.sig, &r.own_sign_digest())
            {
                return;
            }
        }
        if senders.len() < self.cfg.regular_quorum() {
            return;
        }
        if target > self.current_round() {
            self.enter_viewchange_silent(target);
            out.event(HarnessEvent::EnteredView { v: target });
        }
        let forward = self.is_impetus();
        let Some(vc) = self.vc.as_mut() else { return };
        if vc.target != target {
            return;
        }
        if vc.p.is_none() {
            vc.p = Some(p.clone());
            if forward && !vc.p_forwarded {
                vc.p_forwarded = true;
                self.emit(out, Destination::ToRegulars, ProtocolMsg::ReadyBundle(p));
            }
        }
        // Installing needs Q too (for the certified tip and obligations).
        if self.vc.as_ref().is_some_and(|vc| vc.q.is_none()) {
            let gamma = self.build_gamma();
            self.emit(out, Destination::ToCommittee, ProtocolMsg::Timeout(gamma));
            return;
        }
        self.try_install(out);
    }

    /// Enter the new view once both Q and P are held.
    fn try_install(&mut self, out: &mut StepOutput) {
        let ready = self
            .vc
            .as_ref()
            .is_some_and(|vc| vc.q.is_some() && vc.p.is_some());
        if !ready {
            return;
        }
        let vc = self.vc.take().unwrap();
        self.view = vc.target;
        self.mode = Mode::Normal;
        self.halted_view = None;
        self.epochs.clear();
        self.eta.clear();
        self.last_proposed = self.tip_height();
        self.obligations.clear();
        let (q_tip_s, _) = vc.q_tip.unwrap_or((0, self.cfg.genesis));
        for beta in &vc.q_betas {
            if beta.rho.s > q_tip_s {
                self.obligations.entry(beta.rho.s).or_default().push(beta.clone());
            }
        }
        for pending in self.obligations.values_mut() {
            pending.sort_by_key(|b| digest_encoded(&b.rho));
            pending.dedup_by(|a, b| digest_encoded(&a.rho) == digest_encoded(&b.rho));
        }
        self.last_q = Some((vc.target, vc.q.clone().unwrap()));
        self.last_p = Some((vc.target, vc.p.clone().unwrap()));
        self.sent_confv.retain(|&r| r >= self.view);
        self.confv_relayed.retain(|&r| r >= self.view);
        self.sent_approvev.retain(|&r| r >= self.view);
        self.proof_seen.retain(|&r, _| r >= self.view);
        self.gamma_tally.retain(|&r, _| r >= self.view);
        self.confv_tally.retain(|&r, _| r >= self.view);
        out.event(HarnessEvent::EnteredView { v: self.view });
        self.progress(out);
        if self.is_primary() {
            self.maybe_propose(out);
        }
    }

    // --- the new primary's recovery ------------------------------------------

    /// Recover the lowest obligated β: re-propose if the payload is at hand,
    /// otherwise ask the committee with Γ_p.
    pub(crate) fn start_recovery(&mut self, out: &mut StepOutput, beta: ProposalCert) {
        let s = beta.rho.s;
        // A β whose parent lost its slot can never commit; drop it.
        if self.parent_id_for(s) != Some(beta.rho.d) {
            self.obligations.remove(&s);
            self.maybe_propose(out);
            return;
        }
        if let Some(payload) = self.payloads.get(&beta.rho.h).cloned() {
            let parent = beta.rho.d;
            self.propose_block(out, s, parent, payload, None);
            return;
        }
        self.recovery.current = Some(beta.clone());
        self.recovery.negatives.clear();
        self.recovery.resolved = false;
        let digest = PrimaryTimeout::sign_digest(self.view, &beta);
        let gp = PrimaryTimeout { v: self.view, beta, sig: self.secret.sign(&digest) };
        self.emit(out, Destination::ToCommittee, ProtocolMsg::PrimaryTimeout(gp));
        self.arm_timer(out);
    }

    /// A Proposal carrying the payload we asked for with Γ_p.
    pub(crate) fn primary_take_recovery_payload(
        &mut self,
        out: &mut StepOutput,
        beta: &ProposalCert,
        txs: &[Transaction],
    ) {
        let Some(current) = &self.recovery.current else { return };
        if !current.rho.same_content(&beta.rho) || self.recovery.resolved {
            return;
        }
        if payload_digest(txs) != current.rho.h {
            return;
        }
        self.payloads.insert(current.rho.h, txs.to_vec());
        let beta = self.recovery.current.take().unwrap();
        self.recovery.resolved = true;
        self.propose_block(out, beta.rho.s, beta.rho.d, txs.to_vec(), None);
    }

    /// A negative response; 2f+1 of them prove the payload is unrecoverable
    /// and license a fresh block carrying the absence proof.
    pub(crate) fn on_negative(&mut self, out: &mut StepOutput, f: NegativeResponse) {
        let Some(current) = self.recovery.current.clone() else { return };
        if self.recovery.resolved || !current.rho.same_content(&f.beta.rho) {
            return;
        }
        let digest = AbsenceProof::response_digest(&current);
        if f.sig.signer != f.from || !self.keyring.verify(&f.sig, &digest) {
            return;
        }
        self.recovery.negatives.insert(f.from, f.sig);
        let quorum = self.cfg.regular_quorum();
        if self.recovery.negatives.len() < quorum {
            return;
        }
        let votes: Vec<Signature> = self.recovery.negatives.values().cloned().collect();
        let Ok(responses) = self.keyring.aggregate(&votes, &digest, quorum) else { return };
        let absence = AbsenceProof { beta: current.clone(), responses };
        self.recovery.current = None;
        self.recovery.resolved = true;
        let txs = self.take_mempool_batch();
        self.propose_block(out, current.rho.s, current.rho.d, txs, Some(absence));
    }
}
