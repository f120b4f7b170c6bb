//! Leader-broadcast chained-BFT comparator.
//!
//! A bandwidth-faithful skeleton of a HotStuff-style protocol: the fixed
//! leader broadcasts full blocks to all peers, collects two rounds of 2f+1
//! votes, and broadcasts the certificate after each round; a block commits
//! on the second certificate, and the next block is proposed as soon as the
//! first-round certificate forms. Leader rotation, fork resolution and the
//! pacemaker are deliberately absent: the comparison of interest is the
//! leader's egress fan-out under the same network model.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{Keyring, NodeSecret, Signature, SignerId};
use crate::encoding::{put_digest, put_list, put_u64, put_u8, CanonicalEncode};
use crate::state::HarnessEvent;
use crate::types::{digest_of, payload_digest, Digest32, Transaction};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineHeader {
    pub s: u64,
    pub h: Digest32,
    pub d: Digest32,
    pub leader_sig: Signature,
}

impl BaselineHeader {
    pub fn sign_digest(s: u64, h: &Digest32, d: &Digest32) -> Digest32 {
        let mut body = vec![0xB0];
        put_u64(&mut body, s);
        put_digest(&mut body, h);
        put_digest(&mut body, d);
        digest_of(&body)
    }

    pub fn block_id(&self) -> Digest32 {
        let mut body = vec![0xB1];
        put_u64(&mut body, self.s);
        put_digest(&mut body, &self.h);
        put_digest(&mut body, &self.d);
        digest_of(&body)
    }
}

impl CanonicalEncode for BaselineHeader {
    fn encode_into(&self, out: &mut Vec<u8>) {
        put_u64(out, self.s);
        put_digest(out, &self.h);
        put_digest(out, &self.d);
        self.leader_sig.encode_into(out);
    }
}

/// Vote round within a height: two 2f+1 rounds before commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VoteRound {
    First,
    Second,
}

impl VoteRound {
    fn tag(self) -> u8 {
        match self {
            VoteRound::First => 1,
            VoteRound::Second => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaselineMsg {
    Block { header: BaselineHeader, txs: Vec<Transaction> },
    Vote { round: VoteRound, s: u64, h: Digest32, from: SignerId, sig: Signature },
    Cert { round: VoteRound, s: u64, h: Digest32, sigma: crate::crypto::AggregateSignature },
}

impl BaselineMsg {
    pub fn vote_digest(round: VoteRound, s: u64, h: &Digest32) -> Digest32 {
        let mut body = vec![0xB2, round.tag()];
        put_u64(&mut body, s);
        put_digest(&mut body, h);
        digest_of(&body)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BaselineMsg::Block { .. } => "Block",
            BaselineMsg::Vote { .. } => "Vote",
            BaselineMsg::Cert { .. } => "Cert",
        }
    }
}

impl CanonicalEncode for BaselineMsg {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            BaselineMsg::Block { header, txs } => {
                put_u8(out, 0);
                header.encode_into(out);
                put_list(out, txs);
            }
            BaselineMsg::Vote { round, s, h, from, sig } => {
                put_u8(out, 1);
                put_u8(out, round.tag());
                put_u64(out, *s);
                put_digest(out, h);
                put_u64(out, u64::from(from.0));
                sig.encode_into(out);
            }
            BaselineMsg::Cert { round, s, h, sigma } => {
                put_u8(out, 2);
                put_u8(out, round.tag());
                put_u64(out, *s);
                put_digest(out, h);
                sigma.encode_into(out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BaselineDest {
    /// Leader's star fan-out to every other node.
    All,
    Leader,
    Clients,
}

#[derive(Debug)]
pub struct BaselineOutput {
    pub msgs: Vec<(BaselineDest, BaselineMsg)>,
    pub events: Vec<HarnessEvent>,
}

impl Default for BaselineOutput {
    fn default() -> Self {
        BaselineOutput { msgs: Vec::new(), events: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub enum BaselineInput {
    Message { from: SignerId, msg: BaselineMsg },
    ClientTx(Transaction),
}

#[derive(Debug, Default)]
struct HeightState {
    header: Option<BaselineHeader>,
    txs: Option<Vec<Transaction>>,
    votes1: BTreeMap<SignerId, Signature>,
    votes2: BTreeMap<SignerId, Signature>,
    cert1: bool,
    cert1_sent: bool,
    cert2_sent: bool,
    voted1: bool,
    voted2: bool,
    committable: bool,
}

pub struct BaselineState {
    id: SignerId,
    n: u32,
    f: u32,
    leader: SignerId,
    secret: NodeSecret,
    keyring: Keyring,
    genesis: Digest32,
    block_size: u64,
    max_height: Option<u64>,
    chain: Vec<(BaselineHeader, u64)>,
    committed_tx_ids: BTreeSet<Digest32>,
    heights: BTreeMap<u64, HeightState>,
    last_proposed: u64,
    mempool: BTreeMap<u64, Transaction>,
}

impl BaselineState {
    pub fn new(
        id: SignerId,
        n: u32,
        f: u32,
        leader: SignerId,
        seed: [u8; 32],
        genesis: Digest32,
        block_size: u64,
        max_height: Option<u64>,
    ) -> Self {
        let keyring = Keyring::new(seed);
        let secret = keyring.secret(id);
        BaselineState {
            id,
            n,
            f,
            leader,
            secret,
            keyring,
            genesis,
            block_size,
            max_height,
            chain: Vec::new(),
            committed_tx_ids: BTreeSet::new(),
            heights: BTreeMap::new(),
            last_proposed: 0,
            mempool: BTreeMap::new(),
        }
    }

    pub fn tip_height(&self) -> u64 {
        self.chain.len() as u64
    }

    pub fn tip_id(&self) -> Digest32 {
        self.chain.last().map(|(h, _)| h.block_id()).unwrap_or(self.genesis)
    }

    pub fn is_leader(&self) -> bool {
        self.id == self.leader
    }

    fn quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    pub fn start(&mut self) -> BaselineOutput {
        let mut out = BaselineOutput::default();
        if self.is_leader() {
            self.propose_next(&mut out);
        }
        out
    }

    pub fn step(&mut self, input: BaselineInput) -> BaselineOutput {
        let mut out = BaselineOutput::default();
        match input {
            BaselineInput::ClientTx(tx) => {
                if tx.well_formed() && !self.committed_tx_ids.contains(&tx.id) {
                    self.mempool.insert(tx.t, tx);
                }
            }
            BaselineInput::Message { from, msg } => self.on_message(&mut out, from, msg),
        }
        out
    }

    fn on_message(&mut self, out: &mut BaselineOutput, from: SignerId, msg: BaselineMsg) {
        match msg {
            BaselineMsg::Block { header, txs } => self.on_block(out, from, header, txs),
            BaselineMsg::Vote { round, s, h, from: sender, sig } => {
                self.on_vote(out, round, s, h, sender, sig)
            }
            BaselineMsg::Cert { round, s, h, sigma } => self.on_cert(out, round, s, h, sigma),
        }
    }

    fn on_block(
        &mut self,
        out: &mut BaselineOutput,
        from: SignerId,
        header: BaselineHeader,
        txs: Vec<Transaction>,
    ) {
        if from != self.leader || self.is_leader() {
            return;
        }
        let s = header.s;
        if s <= self.tip_height() {
            return;
        }
        let sig_digest = BaselineHeader::sign_digest(s, &header.h, &header.d);
        if header.leader_sig.signer != self.leader
            || !self.keyring.verify(&header.leader_sig, &sig_digest)
        {
            return;
        }
        if payload_digest(&txs) != header.h {
            return;
        }
        let parent = if s == self.tip_height() + 1 {
            self.tip_id()
        } else {
            match self.heights.get(&(s - 1)).and_then(|st| st.header.as_ref()) {
                Some(prev) => prev.block_id(),
                None => return,
            }
        };
        if parent != header.d {
            return;
        }
        let hs = self.heights.entry(s).or_default();
        if hs.voted1 {
            return;
        }
        hs.header = Some(header.clone());
        hs.txs = Some(txs);
        hs.voted1 = true;
        let digest = BaselineMsg::vote_digest(VoteRound::First, s, &header.h);
        out.msgs.push((
            BaselineDest::Leader,
            BaselineMsg::Vote {
                round: VoteRound::First,
                s,
                h: header.h,
                from: self.id,
                sig: self.secret.sign(&digest),
            },
        ));
    }

    fn on_vote(
        &mut self,
        out: &mut BaselineOutput,
        round: VoteRound,
        s: u64,
        h: Digest32,
        sender: SignerId,
        sig: Signature,
    ) {
        if !self.is_leader() || s <= self.tip_height() {
            return;
        }
        if sig.signer != sender
            || !self.keyring.verify(&sig, &BaselineMsg::vote_digest(round, s, &h))
        {
            return;
        }
        let Some(hs) = self.heights.get_mut(&s) else { return };
        let Some(header) = hs.header.clone() else { return };
        if header.h != h {
            return;
        }
        match round {
            VoteRound::First => {
                hs.votes1.insert(sender, sig);
            }
            VoteRound::Second => {
                hs.votes2.insert(sender, sig);
            }
        }
        self.try_advance(out, s);
    }

    fn try_advance(&mut self, out: &mut BaselineOutput, s: u64) {
        let quorum = self.quorum();
        let Some(hs) = self.heights.get(&s) else { return };
        let Some(header) = hs.header.clone() else { return };

        if !hs.cert1_sent && hs.votes1.len() >= quorum {
            let digest = BaselineMsg::vote_digest(VoteRound::First, s, &header.h);
            let votes: Vec<Signature> = hs.votes1.values().cloned().collect();
            if let Ok(sigma) = self.keyring.aggregate(&votes, &digest, quorum) {
                let hs = self.heights.get_mut(&s).unwrap();
                hs.cert1_sent = true;
                hs.cert1 = true;
                hs.voted2 = true;
                out.msgs.push((
                    BaselineDest::All,
                    BaselineMsg::Cert { round: VoteRound::First, s, h: header.h, sigma },
                ));
                // Leader's own second-round vote.
                let d2 = BaselineMsg::vote_digest(VoteRound::Second, s, &header.h);
                let own = self.secret.sign(&d2);
                self.heights.get_mut(&s).unwrap().votes2.insert(self.id, own);
                // Pipeline: next proposal rides on the first certificate.
                self.propose_next(out);
            }
        }

        let Some(hs) = self.heights.get(&s) else { return };
        if hs.cert1_sent && !hs.cert2_sent && hs.votes2.len() >= quorum {
            let header = hs.header.clone().unwrap();
            let digest = BaselineMsg::vote_digest(VoteRound::Second, s, &header.h);
            let votes: Vec<Signature> = hs.votes2.values().cloned().collect();
            if let Ok(sigma) = self.keyring.aggregate(&votes, &digest, quorum) {
                let hs = self.heights.get_mut(&s).unwrap();
                hs.cert2_sent = true;
                hs.committable = true;
                out.msgs.push((
                    BaselineDest::All,
                    BaselineMsg::Cert { round: VoteRound::Second, s, h: header.h, sigma },
                ));
                self.commit_contiguous(out);
            }
        }
    }

    fn on_cert(
        &mut self,
        out: &mut BaselineOutput,
        round: VoteRound,
        s: u64,
        h: Digest32,
        sigma: crate::crypto::AggregateSignature,
    ) {
        if self.is_leader() || s <= self.tip_height() {
            return;
        }
        let digest = BaselineMsg::vote_digest(round, s, &h);
        let everyone: BTreeSet<SignerId> = (0..self.n).map(SignerId).collect();
        if !self.keyring.verify_aggregate(&sigma, &digest, self.quorum(), &everyone) {
            return;
        }
        let Some(hs) = self.heights.get_mut(&s) else { return };
        let Some(header) = hs.header.clone() else { return };
        if header.h != h {
            return;
        }
        match round {
            VoteRound::First => {
                hs.cert1 = true;
                if !hs.voted2 {
                    hs.voted2 = true;
                    let d2 = BaselineMsg::vote_digest(VoteRound::Second, s, &h);
                    out.msgs.push((
                        BaselineDest::Leader,
                        BaselineMsg::Vote {
                            round: VoteRound::Second,
                            s,
                            h,
                            from: self.id,
                            sig: self.secret.sign(&d2),
                        },
                    ));
                }
            }
            VoteRound::Second => {
                if hs.cert1 {
                    hs.committable = true;
                    self.commit_contiguous(out);
                }
            }
        }
    }

    /// Commit heights in order once their second certificates are in.
    fn commit_contiguous(&mut self, out: &mut BaselineOutput) {
        loop {
            let next = self.tip_height() + 1;
            let Some(hs) = self.heights.get(&next) else { return };
            if !hs.committable {
                return;
            }
            let (Some(header), Some(txs)) = (hs.header.clone(), hs.txs.clone()) else { return };
            for tx in &txs {
                self.committed_tx_ids.insert(tx.id);
                self.mempool.remove(&tx.t);
            }
            out.events.push(HarnessEvent::Committed {
                s: next,
                v: 0,
                h: header.h,
                block_id: header.block_id(),
                tx_count: txs.len() as u64,
            });
            self.chain.push((header, txs.len() as u64));
            self.heights.remove(&next);
        }
    }

    fn propose_next(&mut self, out: &mut BaselineOutput) {
        if !self.is_leader() {
            return;
        }
        let next = self.last_proposed.max(self.tip_height()) + 1;
        if let Some(max) = self.max_height {
            if next > max {
                return;
            }
        }
        let parent = if next == self.tip_height() + 1 {
            self.tip_id()
        } else {
            match self.heights.get(&(next - 1)).and_then(|st| st.header.as_ref()) {
                Some(prev) => prev.block_id(),
                None => return,
            }
        };
        let txs = self.take_mempool_batch();
        let h = payload_digest(&txs);
        let sig_digest = BaselineHeader::sign_digest(next, &h, &parent);
        let header =
            BaselineHeader { s: next, h, d: parent, leader_sig: self.secret.sign(&sig_digest) };
        self.last_proposed = next;
        let hs = self.heights.entry(next).or_default();
        hs.header = Some(header.clone());
        hs.txs = Some(txs.clone());
        hs.voted1 = true;
        let d1 = BaselineMsg::vote_digest(VoteRound::First, next, &h);
        let own = self.secret.sign(&d1);
        self.heights.get_mut(&next).unwrap().votes1.insert(self.id, own);
        out.msgs.push((BaselineDest::All, BaselineMsg::Block { header, txs }));
    }

    fn take_mempool_batch(&mut self) -> Vec<Transaction> {
        let in_flight: BTreeSet<Digest32> = self
            .heights
            .values()
            .filter_map(|hs| hs.txs.as_ref())
            .flat_map(|txs| txs.iter().map(|t| t.id))
            .collect();
        let mut batch = Vec::new();
        let mut bytes = 0u64;
        for tx in self.mempool.values() {
            if in_flight.contains(&tx.id) {
                continue;
            }
            let len = tx.encoded_len() as u64;
            if bytes + len > self.block_size {
                break;
            }
            bytes += len;
            batch.push(tx.clone());
        }
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_fault_free(n: u32, f: u32, heights: u64) -> Vec<BaselineState> {
        let seed = [3u8; 32];
        let genesis = crate::state::Config::genesis_default();
        let leader = SignerId(0);
        let mut nodes: Vec<BaselineState> = (0..n)
            .map(|i| {
                BaselineState::new(SignerId(i), n, f, leader, seed, genesis, 4096, Some(heights))
            })
            .collect();
        // Feed a few transactions to the leader.
        for t in 0..(heights * 2) {
            let tx = Transaction::new(1, t, vec![7u8; 32]);
            nodes[0].step(BaselineInput::ClientTx(tx));
        }
        let mut queue: std::collections::VecDeque<(usize, BaselineInput)> = std::collections::VecDeque::new();
        let out = nodes[0].start();
        push_outputs(&mut queue, 0, out, n);
        while let Some((target, input)) = queue.pop_front() {
            let out = nodes[target].step(input);
            push_outputs(&mut queue, target, out, n);
        }
        nodes
    }

    fn push_outputs(
        queue: &mut std::collections::VecDeque<(usize, BaselineInput)>,
        sender: usize,
        out: BaselineOutput,
        n: u32,
    ) {
        for (dest, msg) in out.msgs {
            let targets: Vec<usize> = match dest {
                BaselineDest::All => (0..n as usize).filter(|&i| i != sender).collect(),
                BaselineDest::Leader => vec![0],
                BaselineDest::Clients => Vec::new(),
            };
            for t in targets {
                queue.push_back((t, BaselineInput::Message {
                    from: SignerId(sender as u32),
                    msg: msg.clone(),
                }));
            }
        }
    }

    #[test]
    fn fault_free_commit_after_two_vote_rounds() {
        let nodes = run_fault_free(4, 1, 3);
        for node in &nodes {
            assert_eq!(node.tip_height(), 3);
        }
        let ids: Vec<Digest32> = nodes.iter().map(|nd| nd.tip_id()).collect();
        assert!(ids.windows(2).all(|w| w[0] == w[1]), "chains diverged");
    }

    #[test]
    fn message_count_is_theta_n_per_epoch() {
        // 5(n-1) messages per committed block: block, votes, certs.
        let n = 7u32;
        let seed = [3u8; 32];
        let genesis = crate::state::Config::genesis_default();
        let mut nodes: Vec<BaselineState> = (0..n)
            .map(|i| BaselineState::new(SignerId(i), n, 2, SignerId(0), seed, genesis, 4096, Some(2)))
            .collect();
        let mut sent = 0usize;
        let mut queue: std::collections::VecDeque<(usize, BaselineInput)> = std::collections::VecDeque::new();
        let out = nodes[0].start();
        let count_and_push = |queue: &mut std::collections::VecDeque<(usize, BaselineInput)>,
                                  sender: usize,
                                  out: BaselineOutput,
                                  sent: &mut usize| {
            for (dest, msg) in out.msgs {
                let targets: Vec<usize> = match dest {
                    BaselineDest::All => (0..n as usize).filter(|&i| i != sender).collect(),
                    BaselineDest::Leader => vec![0],
                    BaselineDest::Clients => Vec::new(),
                };
                *sent += targets.len();
                for t in targets {
                    queue.push_back((t, BaselineInput::Message {
                        from: SignerId(sender as u32),
                        msg: msg.clone(),
                    }));
                }
            }
        };
        count_and_push(&mut queue, 0, out, &mut sent);
        while let Some((target, input)) = queue.pop_front() {
            let out = nodes[target].step(input);
            count_and_push(&mut queue, target, out, &mut sent);
        }
        assert_eq!(sent, 2 * 5 * (n as usize - 1));
    }
}
