//! State-machine tests on the T4 fixture: n=4, f=1, c=2, primary 0,
//! committee {1,2}, regular 3.

use super::testutil::*;
use super::*;
use crate::msg::{MsgKind, ProtocolMsg};
use crate::types::{payload_digest, ApprovalCert, Block, BlockHeader, ProposalCert};

fn first_block(pump: &mut Pump) -> Block {
    // Prime the mempool on the primary and kick it off.
    let tx0 = tx(0);
    pump.feed(0, Input::ClientTx(tx0));
    let out = pump.nodes[0].start();
    let blocks: Vec<Block> = msgs_of(&out, "PrePrepare")
        .iter()
        .map(|m| match m {
            ProtocolMsg::PrePrepare(b) => b.clone(),
            _ => unreachable!(),
        })
        .collect();
    pump.absorb(SignerId(0), out);
    blocks[0].clone()
}

#[test]
fn primary_proposes_to_committee_on_start() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let tx0 = tx(0);
    pump.feed(0, Input::ClientTx(tx0));
    let out = pump.nodes[0].start();
    let targets = targets_of(&out, "PrePrepare");
    assert_eq!(targets.len(), 1);
    assert_eq!(targets[0].1, vec![SignerId(1), SignerId(2)]);
    match &out.msgs[0].msg {
        ProtocolMsg::PrePrepare(b) => {
            assert_eq!(b.header.v, 0);
            assert_eq!(b.header.s, 1);
            assert_eq!(b.header.d, t4_config().genesis);
            assert_eq!(b.txs.len(), 1);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn impetus_sends_pre_proposal_and_regular_ignores() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let block = first_block(&mut pump);
    let out = pump.nodes[1].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block.clone()),
    });
    let pp = targets_of(&out, "PreProposal");
    assert_eq!(pp.len(), 1);
    assert_eq!(pp[0].1, vec![SignerId(2)]);

    // Role gate: a regular node produces nothing.
    let out3 = pump.nodes[3].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block),
    });
    assert!(out3.msgs.is_empty());
}

#[test]
fn validate_pre_prepare_error_table() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let block = first_block(&mut pump);
    let node1 = &pump.nodes[1];
    assert_eq!(node1.validate_pre_prepare(&block), Ok(()));

    let mut wrong_seq = block.clone();
    wrong_seq.header.s = 2;
    assert_eq!(
        node1.validate_pre_prepare(&wrong_seq),
        Err(ValidateError::BadSignature),
        "changing s invalidates the signature first"
    );

    // Re-sign to reach the sequence check itself.
    let ring = node1.keyring();
    let resign = |hdr: &mut BlockHeader| {
        let digest = BlockHeader::sign_digest(hdr.v, hdr.s, &hdr.h, &hdr.d);
        hdr.proposer_sig = ring.secret(SignerId(0)).sign(&digest);
    };
    let mut wrong_seq = block.clone();
    wrong_seq.header.s = 2;
    resign(&mut wrong_seq.header);
    assert_eq!(
        node1.validate_pre_prepare(&wrong_seq),
        Err(ValidateError::WrongSequence { got: 2, expected: 1 })
    );

    let mut wrong_view = block.clone();
    wrong_view.header.v = 1;
    resign(&mut wrong_view.header);
    assert_eq!(node1.validate_pre_prepare(&wrong_view), Err(ValidateError::WrongView));

    let mut bad_parent = block.clone();
    bad_parent.header.d = [9u8; 32];
    resign(&mut bad_parent.header);
    assert_eq!(node1.validate_pre_prepare(&bad_parent), Err(ValidateError::BadParent));

    let mut bad_payload = block.clone();
    bad_payload.header.h = [9u8; 32];
    resign(&mut bad_payload.header);
    assert_eq!(node1.validate_pre_prepare(&bad_payload), Err(ValidateError::BadPayloadDigest));

    let mut bad_sig = block.clone();
    bad_sig.header.proposer_sig = ring.secret(SignerId(3)).sign(&[0u8; 32]);
    assert_eq!(node1.validate_pre_prepare(&bad_sig), Err(ValidateError::BadSignature));

    let mut dup_tx = block.clone();
    let dup = dup_tx.txs[0].clone();
    dup_tx.txs.push(dup);
    dup_tx.header.h = payload_digest(&dup_tx.txs);
    resign(&mut dup_tx.header);
    assert_eq!(node1.validate_pre_prepare(&dup_tx), Err(ValidateError::InvalidTx));
}

#[test]
fn equivocating_pre_prepare_triggers_explicit_complaint() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let block = first_block(&mut pump);
    let _ = pump.nodes[1].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block.clone()),
    });

    // Second valid-signed block, same (v, s), different payload.
    let txs2 = vec![tx(77)];
    let h2 = payload_digest(&txs2);
    let digest = BlockHeader::sign_digest(0, 1, &h2, &block.header.d);
    let ring = pump.nodes[1].keyring().clone();
    let header2 = BlockHeader {
        v: 0,
        s: 1,
        h: h2,
        d: block.header.d,
        proposer_sig: ring.secret(SignerId(0)).sign(&digest),
    };
    let block2 = Block { header: header2, absence: None, txs: txs2 };
    let out = pump.nodes[1].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block2),
    });
    let explicit = msgs_of(&out, "Explicit");
    assert_eq!(explicit.len(), 1);
    assert!(out.events.iter().any(|e| matches!(
        e,
        HarnessEvent::BlacklistEvidence { nodes } if nodes.contains(&SignerId(0))
    )));
}

#[test]
fn pre_proposal_quorum_builds_beta_and_routes_it() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let block = first_block(&mut pump);
    let out1 = pump.nodes[1].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block.clone()),
    });
    // Quorum is 2: node 1 holds its own vote; nothing yet.
    assert!(msgs_of(&out1, "Proposal").is_empty());

    // Node 2's vote arrives: β forms.
    let out2 = pump.nodes[2].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block.clone()),
    });
    let vote2 = msgs_of(&out2, "PreProposal")[0].clone();
    let out = pump.nodes[1].step(Input::Message { from: SignerId(2), msg: vote2.clone() });

    let proposals = targets_of(&out, "Proposal");
    // Full proposal to the lone non-committee non-primary node, β to primary.
    assert_eq!(proposals.len(), 2);
    assert_eq!(proposals[0].1, vec![SignerId(3)]);
    assert_eq!(proposals[1].1, vec![SignerId(0)]);
    match &out.msgs[0].msg {
        ProtocolMsg::Proposal { beta, txs, .. } => {
            assert_eq!(beta.rho.s, 1);
            assert_eq!(beta.sigma_r.len(), 2);
            assert!(!txs.is_empty());
        }
        other => panic!("unexpected {other:?}"),
    }
    // β-only copy for the primary.
    match &out.msgs[1].msg {
        ProtocolMsg::Proposal { txs, .. } => assert!(txs.is_empty()),
        other => panic!("unexpected {other:?}"),
    }
    // The builder also confirms its own proposal.
    assert_eq!(msgs_of(&out, "Confirm").len(), 2);

    // Duplicate vote is idempotent.
    let before = pump.nodes[1].pending_betas();
    let out_dup = pump.nodes[1].step(Input::Message { from: SignerId(2), msg: vote2 });
    assert!(out_dup.msgs.is_empty());
    assert_eq!(pump.nodes[1].pending_betas(), before);
}

/// Run one full epoch by hand and return β plus the proposal payload.
fn run_to_proposal(pump: &mut Pump) -> (ProposalCert, Vec<crate::types::Transaction>) {
    let block = first_block(pump);
    pump.run();
    let beta = pump.nodes[3].pending_betas().first().cloned();
    let beta = beta.unwrap_or_else(|| {
        // If node 3 already committed, rebuild β from the chain.
        let cb = pump.nodes[3].committed_at(1).unwrap();
        ProposalCert {
            rho: cb.block.header.clone(),
            sigma_r: crate::crypto::AggregateSignature::from_parts_unchecked(Vec::new()),
        }
    });
    (beta, block.txs)
}

#[test]
fn fault_free_epoch_commits_everywhere() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let _ = run_to_proposal(&mut pump);
    for node in &pump.nodes {
        assert_eq!(node.tip_height(), 1, "node {} did not commit", node.id());
    }
    assert!(pump.chains_identical());
    // ψ implies a certificate: every chain entry carries a 2f+1 cert.
    for node in &pump.nodes {
        let cb = node.committed_at(1).unwrap();
        assert!(cb.cert.sigma.len() >= 3);
    }
}

#[test]
fn fault_free_message_count_matches_closed_form() {
    // M(n,c) = 3cn + n - c^2 - 2c - 1 per epoch.
    let mut cfg = t4_config();
    cfg.max_height = Some(3);
    let mut pump = Pump::new(t4_nodes(&cfg));
    pump.submit_txs(6);
    pump.start_all();
    for node in &pump.nodes {
        assert_eq!(node.tip_height(), 3);
    }
    let (n, c) = (4usize, 2usize);
    let m = 3 * c * n + n - c * c - 2 * c - 1;
    assert_eq!(pump.sent, 3 * m, "per-epoch count should be M(n,c) = {m}");
    let pre_prepares = pump.log.iter().filter(|(_, _, k)| *k == "PrePrepare").count();
    assert_eq!(pre_prepares, 3 * c);
}

#[test]
fn out_of_order_proposal_is_cached_until_gap_fills() {
    let mut cfg = t4_config();
    cfg.max_height = Some(2);
    let mut pump = Pump::new(t4_nodes(&cfg));
    // Withhold everything to node 3 while two blocks commit elsewhere.
    pump.dropped = Box::new(|_, to, _| to == SignerId(3));
    pump.submit_txs(4);
    pump.start_all();
    assert_eq!(pump.nodes[3].tip_height(), 0);
    assert_eq!(pump.nodes[1].tip_height(), 2);

    // Now deliver the height-2 proposal only: cached, no Confirm.
    pump.dropped = Box::new(|_, _, _| false);
    let cb2 = pump.nodes[1].committed_at(2).unwrap().clone();
    let beta2 = ProposalCert {
        rho: cb2.block.header.clone(),
        sigma_r: cb2.cert.sigma.clone(),
    };
    // Rebuild a plausible β: reuse the stored pending β from node 1 is not
    // possible (committed), so send the block via sync instead.
    let _ = beta2;
    let out = pump.nodes[3].step(Input::Message {
        from: SignerId(1),
        msg: ProtocolMsg::SyncBlocks(vec![cb2]),
    });
    // Height 2 cannot commit before height 1.
    assert!(out.events.iter().all(|e| !matches!(e, HarnessEvent::Committed { .. })));
    assert_eq!(pump.nodes[3].tip_height(), 0);

    let cb1 = pump.nodes[1].committed_at(1).unwrap().clone();
    let cb2 = pump.nodes[1].committed_at(2).unwrap().clone();
    let out = pump.nodes[3].step(Input::Message {
        from: SignerId(1),
        msg: ProtocolMsg::SyncBlocks(vec![cb1, cb2]),
    });
    let commits: Vec<u64> = out
        .events
        .iter()
        .filter_map(|e| match e {
            HarnessEvent::Committed { s, .. } => Some(*s),
            _ => None,
        })
        .collect();
    assert_eq!(commits, vec![1, 2], "contiguous commit in order");
}

#[test]
fn confirm_quorum_commits_with_approval_fanout() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let block = first_block(&mut pump);
    // Deliver PrePrepare to both committee members, cross their votes.
    let out1 = pump.nodes[1].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block.clone()),
    });
    let out2 = pump.nodes[2].step(Input::Message {
        from: SignerId(0),
        msg: ProtocolMsg::PrePrepare(block.clone()),
    });
    let v1 = msgs_of(&out1, "PreProposal")[0].clone();
    let v2 = msgs_of(&out2, "PreProposal")[0].clone();
    let out1b = pump.nodes[1].step(Input::Message { from: SignerId(2), msg: v2 });
    let _ = pump.nodes[2].step(Input::Message { from: SignerId(1), msg: v1 });

    // Node 1 now holds its own Confirm; count quorum arrivals.
    let proposal = msgs_of(&out1b, "Proposal")[0].clone();
    let out3 = pump.nodes[3].step(Input::Message { from: SignerId(1), msg: proposal });
    let confirm3 = msgs_of(&out3, "Confirm")[0].clone();
    let confirm3_targets = targets_of(&out3, "Confirm");
    assert_eq!(confirm3_targets[0].1, vec![SignerId(1), SignerId(2)]);
    assert_eq!(confirm3_targets[1].1, vec![SignerId(0)]);

    // One more confirm (node 2's own) reaches node 1: 2 distinct, no commit.
    let out = pump.nodes[1].step(Input::Message { from: SignerId(3), msg: confirm3.clone() });
    assert!(
        out.events.iter().all(|e| !matches!(e, HarnessEvent::Committed { .. })),
        "2 confirms must not commit"
    );

    // Node 2's confirm arrives: 3 distinct = 2f+1; commit plus Approval.
    let confirm2 = ProtocolMsg::Confirm {
        v: 0,
        s: 1,
        h: block.header.h,
        from: SignerId(2),
        sig: pump.nodes[1]
            .keyring()
            .secret(SignerId(2))
            .sign(&ApprovalCert::confirm_digest(0, 1, &block.header.h)),
    };
    let out = pump.nodes[1].step(Input::Message { from: SignerId(2), msg: confirm2 });
    assert!(out.events.iter().any(|e| matches!(e, HarnessEvent::Committed { s: 1, .. })));
    let approvals = targets_of(&out, "Approval");
    assert_eq!(approvals.len(), 1);
    assert_eq!(approvals[0].1, vec![SignerId(3)]);
    // Client responses for the committed transaction.
    assert_eq!(msgs_of(&out, "ClientResponse").len(), 1);

    // Stale confirm for a committed height is ignored.
    let stale = ProtocolMsg::Confirm {
        v: 0,
        s: 1,
        h: block.header.h,
        from: SignerId(0),
        sig: pump.nodes[1]
            .keyring()
            .secret(SignerId(0))
            .sign(&ApprovalCert::confirm_digest(0, 1, &block.header.h)),
    };
    let out = pump.nodes[1].step(Input::Message { from: SignerId(0), msg: stale });
    assert!(out.msgs.is_empty() && out.events.is_empty());
}

#[test]
fn approval_with_short_quorum_is_rejected() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let block = first_block(&mut pump);
    pump.run();
    let cert = pump.nodes[3].committed_at(1).unwrap().cert.clone();
    assert_eq!(block.header.h, cert.h);

    // Fresh node 3 instance that has not committed yet.
    let mut node3 = NodeState::new(SignerId(3), t4_config());
    let short = ApprovalCert {
        v: cert.v,
        s: cert.s,
        h: cert.h,
        sigma: crate::crypto::AggregateSignature::from_parts_unchecked(
            cert.sigma.parts()[..2].to_vec(),
        ),
    };
    let out = node3.step(Input::Message { from: SignerId(1), msg: ProtocolMsg::Approval(short) });
    assert!(out.msgs.is_empty() && out.events.is_empty());
}

#[test]
fn approval_ahead_of_chain_emits_gap_complaint() {
    let mut cfg = t4_config();
    cfg.max_height = Some(2);
    let mut pump = Pump::new(t4_nodes(&cfg));
    pump.dropped = Box::new(|_, to, _| to == SignerId(3));
    pump.submit_txs(4);
    pump.start_all();
    let cert2 = pump.nodes[1].committed_at(2).unwrap().cert.clone();
    pump.dropped = Box::new(|_, _, _| false);
    let out = pump.nodes[3].step(Input::Message {
        from: SignerId(1),
        msg: ProtocolMsg::Approval(cert2),
    });
    let gammas = msgs_of(&out, "Timeout");
    assert_eq!(gammas.len(), 1, "gap must raise a complaint");
}

#[test]
fn regular_timeout_sends_gamma_to_committee() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    for i in 0..4 {
        let out = pump.nodes[i].start();
        // Swallow outputs: we only want timers armed.
        drop(out);
    }
    let out = pump.nodes[3].step(Input::TimerFired { gen: 1 });
    let gammas = targets_of(&out, "Timeout");
    assert_eq!(gammas.len(), 1);
    assert_eq!(gammas[0].1, vec![SignerId(1), SignerId(2)]);
    match &out.msgs[0].msg {
        ProtocolMsg::Timeout(t) => {
            assert_eq!(t.v, 0);
            assert_eq!(t.s1, 0);
            assert_eq!(t.kind, MsgKind::Block);
            assert!(t.gap.is_none());
        }
        other => panic!("unexpected {other:?}"),
    }

    // Impetus timeout goes to the regular nodes instead.
    let out = pump.nodes[1].step(Input::TimerFired { gen: 1 });
    let gammas = targets_of(&out, "Timeout");
    assert_eq!(gammas[0].1, vec![SignerId(3)]);
}

#[test]
fn sync_serves_missing_blocks_once() {
    let mut cfg = t4_config();
    cfg.max_height = Some(2);
    let mut pump = Pump::new(t4_nodes(&cfg));
    pump.dropped = Box::new(|_, to, _| to == SignerId(3));
    pump.submit_txs(4);
    pump.start_all();
    pump.dropped = Box::new(|_, _, _| false);

    // Node 3 times out and complains; node 1 serves blocks 1..=2.
    let gen = pump_timer_gen(&pump, 3);
    let out3 = pump.nodes[3].step(Input::TimerFired { gen });
    let gamma = msgs_of(&out3, "Timeout")[0].clone();
    let out1 = pump.nodes[1].step(Input::Message { from: SignerId(3), msg: gamma.clone() });
    match &out1.msgs[0].msg {
        ProtocolMsg::SyncBlocks(blocks) => assert_eq!(blocks.len(), 2),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(out1.msgs[0].targets, vec![SignerId(3)]);

    // Repeat complaint for the served range: validity condition, no reply.
    let mut gamma2 = match gamma {
        ProtocolMsg::Timeout(t) => t,
        _ => unreachable!(),
    };
    gamma2.kind = MsgKind::Approval; // different bytes, same range
    let digest = gamma2.own_sign_digest();
    gamma2.sig = pump.nodes[3].keyring().secret(SignerId(3)).sign(&digest);
    let out1 = pump.nodes[1].step(Input::Message {
        from: SignerId(3),
        msg: ProtocolMsg::Timeout(gamma2),
    });
    assert!(msgs_of(&out1, "SyncBlocks").is_empty());
}

fn pump_timer_gen(pump: &Pump, node: u32) -> u64 {
    pump.events
        .iter()
        .filter_map(|(id, ev)| match ev {
            HarnessEvent::TimerSet { gen, .. } if id.0 == node => Some(*gen),
            _ => None,
        })
        .last()
        .unwrap_or(1)
}

/// Drive the full silent-primary view change by firing timers.
fn run_silent_primary_viewchange(seed: [u8; 32]) -> Pump {
    let mut cfg = t4_config();
    cfg.seed = seed;
    cfg.max_height = Some(1);
    let mut pump = Pump::new(t4_nodes(&cfg));
    // Primary 0 is silent: everything it sends is dropped.
    pump.dropped = Box::new(|from, _, _| from == SignerId(0));
    for i in 0..4u32 {
        let out = pump.nodes[i as usize].start();
        if i != 0 {
            pump.absorb(SignerId(i), out);
        }
    }
    pump.run();
    // Impetus members and the regular node time out.
    pump.fire_timer(1);
    pump.fire_timer(2);
    pump.fire_timer(3);
    pump.run();
    pump
}

fn seed_with_live_view1(exclude: u32) -> [u8; 32] {
    let cfg = t4_config();
    for b in 1u8..64 {
        let mut seed = [0u8; 32];
        seed[0] = b;
        let mut c = cfg.clone();
        c.seed = seed;
        let a = assignment_for_view(&c, 1);
        if a.primary != SignerId(exclude) && !a.members.contains(&SignerId(exclude)) {
            return seed;
        }
    }
    panic!("no suitable seed found");
}

#[test]
fn silent_primary_full_view_change_pipeline() {
    let seed = seed_with_live_view1(0);
    let pump = run_silent_primary_viewchange(seed);
    for i in 1..4usize {
        assert_eq!(pump.nodes[i].view(), 1, "node {i} must install view 1");
        assert_eq!(pump.nodes[i].mode(), Mode::Normal);
        assert_eq!(
            pump.nodes[i].tip_height(),
            1,
            "the new view commits its first (empty) block"
        );
    }
    // The view-change attempt was recorded.
    assert!(pump
        .events
        .iter()
        .any(|(_, e)| matches!(e, HarnessEvent::EnteredView { v: 1 })));
}

#[test]
fn view_change_carries_pending_beta_and_recovers_it() {
    // Commit nothing, but let β form; the next view must re-propose it.
    let seed = seed_with_live_view1(0);
    let mut cfg = t4_config();
    cfg.seed = seed;
    cfg.max_height = Some(1);
    let mut pump = Pump::new(t4_nodes(&cfg));
    // Drop all Confirms: β exists but nothing commits; primary 0 then stalls.
    pump.dropped = Box::new(|_, _, msg| msg.kind_name() == "Confirm");
    pump.submit_txs(2);
    pump.start_all();
    let beta = pump.nodes[3].pending_betas();
    assert_eq!(beta.len(), 1, "β should be pending at the regular node");
    let want_h = beta[0].rho.h;

    // Release the network and run the view change.
    pump.dropped = Box::new(|_, _, _| false);
    pump.fire_timer(1);
    pump.fire_timer(2);
    pump.fire_timer(3);
    pump.run();

    for i in 1..4usize {
        assert_eq!(pump.nodes[i].view(), 1);
        assert_eq!(pump.nodes[i].tip_height(), 1, "node {i}");
        let cb = pump.nodes[i].committed_at(1).unwrap();
        assert_eq!(cb.block.header.h, want_h, "recovered block keeps its payload");
        assert_eq!(cb.block.header.v, 1, "re-proposed in the new view");
    }
}

#[test]
fn absence_proof_block_validates_and_plain_block_does_not() {
    // Hand-craft the obligation state to exercise MissingRecovery directly.
    let cfg = t4_config();
    let ring = crate::crypto::Keyring::new(cfg.seed);
    let txs = vec![tx(42)];
    let h = payload_digest(&txs);
    let d = cfg.genesis;
    let hdr_digest = BlockHeader::sign_digest(0, 1, &h, &d);
    let rho = BlockHeader {
        v: 0,
        s: 1,
        h,
        d,
        proposer_sig: ring.secret(SignerId(0)).sign(&hdr_digest),
    };
    let vote_digest = ProposalCert::vote_digest(0, 1, &h);
    let votes: Vec<_> = [1u32, 2].iter().map(|&i| ring.secret(SignerId(i)).sign(&vote_digest)).collect();
    let sigma_r = ring.aggregate(&votes, &vote_digest, 2).unwrap();
    let beta = ProposalCert { rho, sigma_r };

    // Node in view 1 with that β as its obligation at height 1.
    let mut node = NodeState::new(SignerId(1), cfg.clone());
    node.view = 1;
    node.assignment = node.assignment_for(1);
    node.obligations.insert(1, vec![beta.clone()]);
    if !node.assignment.members.contains(&SignerId(1)) {
        // Make the node an impetus member of view 1 for the validation path.
        node.assignment.members.insert(SignerId(1));
    }
    let new_primary = node.assignment.primary;

    // A fresh block ignoring the obligation must be rejected.
    let fresh_txs = vec![tx(100)];
    let fh = payload_digest(&fresh_txs);
    let fd = BlockHeader::sign_digest(1, 1, &fh, &d);
    let fresh = Block {
        header: BlockHeader { v: 1, s: 1, h: fh, d, proposer_sig: ring.secret(new_primary).sign(&fd) },
        absence: None,
        txs: fresh_txs.clone(),
    };
    assert_eq!(node.validate_pre_prepare(&fresh), Err(ValidateError::MissingRecovery));

    // Re-proposing β's content is accepted.
    let rd = BlockHeader::sign_digest(1, 1, &h, &d);
    let re = Block {
        header: BlockHeader { v: 1, s: 1, h, d, proposer_sig: ring.secret(new_primary).sign(&rd) },
        absence: None,
        txs,
    };
    assert_eq!(node.validate_pre_prepare(&re), Ok(()));

    // A fresh block with a valid 2f+1 absence proof is accepted too.
    let neg_digest = crate::types::AbsenceProof::response_digest(&beta);
    let negs: Vec<_> = [1u32, 2, 3]
        .iter()
        .map(|&i| ring.secret(SignerId(i)).sign(&neg_digest))
        .collect();
    let responses = ring.aggregate(&negs, &neg_digest, 3).unwrap();
    let absence = crate::types::AbsenceProof { beta: beta.clone(), responses };
    let with_proof = Block { absence: Some(absence), ..fresh.clone() };
    assert_eq!(node.validate_pre_prepare(&with_proof), Ok(()));

    // An absence proof with a short quorum fails.
    let short = crate::crypto::AggregateSignature::from_parts_unchecked(negs[..2].to_vec());
    let bad = Block {
        absence: Some(crate::types::AbsenceProof { beta, responses: short }),
        ..fresh
    };
    assert_eq!(node.validate_pre_prepare(&bad), Err(ValidateError::MissingRecovery));
}

#[test]
fn negative_quorum_yields_absence_proof_block() {
    // A new primary that lacks the payload collects 2f+1 F responses and
    // proposes a fresh block carrying the absence proof.
    let cfg = t4_config();
    let ring = crate::crypto::Keyring::new(cfg.seed);
    let missing_txs = vec![tx(55)];
    let h = payload_digest(&missing_txs);
    let d = cfg.genesis;
    let hdr_digest = BlockHeader::sign_digest(0, 1, &h, &d);
    let rho = BlockHeader { v: 0, s: 1, h, d, proposer_sig: ring.secret(SignerId(0)).sign(&hdr_digest) };
    let vote_digest = ProposalCert::vote_digest(0, 1, &h);
    let votes: Vec<_> = [1u32, 2].iter().map(|&i| ring.secret(SignerId(i)).sign(&vote_digest)).collect();
    let beta = ProposalCert { rho, sigma_r: ring.aggregate(&votes, &vote_digest, 2).unwrap() };

    let mut node = NodeState::new(SignerId(3), cfg.clone());
    node.view = 1;
    node.assignment = node.assignment_for(1);
    node.assignment.primary = SignerId(3); // force primaryship for the test
    node.obligations.insert(1, vec![beta.clone()]);

    let mut out = StepOutput::default();
    node.maybe_propose(&mut out);
    let gps = msgs_of(&out, "PrimaryTimeout");
    assert_eq!(gps.len(), 1, "Γ_p must be issued for the unknown payload");

    // 2f+1 negative responses arrive.
    let neg_digest = crate::types::AbsenceProof::response_digest(&beta);
    for &i in &[0u32, 1, 2] {
        let f = crate::msg::NegativeResponse {
            beta: beta.clone(),
            from: SignerId(i),
            sig: ring.secret(SignerId(i)).sign(&neg_digest),
        };
        let out = node.step(Input::Message { from: SignerId(i), msg: ProtocolMsg::Negative(f) });
        if i == 2 {
            let pre = msgs_of(&out, "PrePrepare");
            assert_eq!(pre.len(), 1);
            match pre[0] {
                ProtocolMsg::PrePrepare(b) => {
                    assert!(b.absence.is_some(), "fresh block carries the absence proof");
                    assert_eq!(b.header.s, 1);
                    assert_eq!(b.header.v, 1);
                }
                _ => unreachable!(),
            }
        } else {
            assert!(msgs_of(&out, "PrePrepare").is_empty());
        }
    }
}

#[test]
fn pipelined_primary_proposes_ahead_of_commits() {
    let mut cfg = t4_config();
    cfg.pipelined = true;
    cfg.max_height = Some(4);
    let mut pump = Pump::new(t4_nodes(&cfg));
    // No Confirms ever: commits stall, but β still forms per height.
    pump.dropped = Box::new(|_, _, msg| msg.kind_name() == "Confirm");
    pump.submit_txs(8);
    pump.start_all();
    assert_eq!(pump.nodes[0].tip_height(), 0);
    assert!(
        pump.nodes[0].last_proposed() >= 2,
        "pipelined primary must advance on β alone, proposed up to {}",
        pump.nodes[0].last_proposed()
    );
}

#[test]
fn pipelined_fault_free_run_commits_identically() {
    let mut cfg = t4_config();
    cfg.pipelined = true;
    cfg.max_height = Some(4);
    let mut pump = Pump::new(t4_nodes(&cfg));
    pump.submit_txs(8);
    pump.start_all();
    for node in &pump.nodes {
        assert_eq!(node.tip_height(), 4);
    }
    assert!(pump.chains_identical());
}

#[test]
fn step_is_deterministic() {
    let run = || {
        let mut cfg = t4_config();
        cfg.max_height = Some(3);
        let mut pump = Pump::new(t4_nodes(&cfg));
        pump.submit_txs(6);
        pump.start_all();
        let chains: Vec<Vec<u8>> = pump
            .nodes
            .iter()
            .map(|nd| {
                use crate::encoding::CanonicalEncode;
                let mut bytes = Vec::new();
                for cb in nd.chain() {
                    cb.encode_into(&mut bytes);
                }
                bytes
            })
            .collect();
        (chains, pump.sent, format!("{:?}", pump.events))
    };
    assert_eq!(run(), run());
}

#[test]
fn conflicting_certified_proposal_raises_equivocation() {
    let mut pump = Pump::new(t4_nodes(&t4_config()));
    let (beta, _) = {
        let block = first_block(&mut pump);
        // Committee certifies normally.
        let _ = pump.nodes[1].step(Input::Message {
            from: SignerId(0),
            msg: ProtocolMsg::PrePrepare(block.clone()),
        });
        let out2 = pump.nodes[2].step(Input::Message {
            from: SignerId(0),
            msg: ProtocolMsg::PrePrepare(block.clone()),
        });
        let vote2 = msgs_of(&out2, "PreProposal")[0].clone();
        let out = pump.nodes[1].step(Input::Message { from: SignerId(2), msg: vote2 });
        let prop = msgs_of(&out, "Proposal")[0].clone();
        let out3 = pump.nodes[3].step(Input::Message { from: SignerId(1), msg: prop.clone() });
        assert!(!msgs_of(&out3, "Confirm").is_empty());
        match prop {
            ProtocolMsg::Proposal { beta, txs, .. } => (beta, txs),
            _ => unreachable!(),
        }
    };

    // Forge a conflicting certified proposal at the same height (test-side
    // keyring access stands in for a Byzantine committee).
    let ring = pump.nodes[3].keyring().clone();
    let txs2 = vec![tx(99)];
    let h2 = payload_digest(&txs2);
    let hd = BlockHeader::sign_digest(0, 1, &h2, &beta.rho.d);
    let rho2 = BlockHeader { v: 0, s: 1, h: h2, d: beta.rho.d, proposer_sig: ring.secret(SignerId(0)).sign(&hd) };
    let vd = ProposalCert::vote_digest(0, 1, &h2);
    let votes: Vec<_> = [1u32, 2].iter().map(|&i| ring.secret(SignerId(i)).sign(&vd)).collect();
    let beta2 = ProposalCert { rho: rho2, sigma_r: ring.aggregate(&votes, &vd, 2).unwrap() };

    let out = pump.nodes[3].step(Input::Message {
        from: SignerId(2),
        msg: ProtocolMsg::Proposal { beta: beta2, txs: txs2, absence: None },
    });
    assert_eq!(msgs_of(&out, "Explicit").len(), 1, "conflicting β must raise E");
    assert!(msgs_of(&out, "Confirm").is_empty(), "no second confirm at the height");
}
