//! In-crate test fixture: the T4 network (n=4, f=1, c=2, primary 0,
//! committee {1,2}) and a zero-latency message pump.

use std::collections::BTreeSet;
use std::collections::VecDeque;

use crate::crypto::SignerId;
use crate::msg::ProtocolMsg;
use crate::types::Transaction;

use super::{Config, Destination, HarnessEvent, Input, NodeState, Output, StepOutput};

pub fn t4_config() -> Config {
    Config {
        n: 4,
        f: 1,
        c: 2,
        timeout_base: 1_000,
        backoff: 2,
        pipelined: false,
        genesis: Config::genesis_default(),
        seed: [7u8; 32],
        initial_assignment: Some((SignerId(0), [SignerId(1), SignerId(2)].into())),
        // The pump drains to quiescence, so runs must stop proposing.
        max_height: Some(1),
        cache_heights: 64,
        block_size: 4096,
    }
}

pub fn t4_nodes(cfg: &Config) -> Vec<NodeState> {
    (0..cfg.n).map(|i| NodeState::new(SignerId(i), cfg.clone())).collect()
}

pub fn tx(t: u64) -> Transaction {
    Transaction::new(1, t, vec![0xAA; 16])
}

/// Zero-latency pump: delivers every message immediately, in deterministic
/// order. Timers never fire unless `fire_timer` is called explicitly.
pub struct Pump {
    pub nodes: Vec<NodeState>,
    pub events: Vec<(SignerId, HarnessEvent)>,
    pub dropped: Box<dyn Fn(SignerId, SignerId, &ProtocolMsg) -> bool>,
    /// Node-to-node messages actually delivered (client fan-out excluded).
    pub sent: usize,
    pub log: Vec<(SignerId, SignerId, &'static str)>,
    queue: VecDeque<(SignerId, SignerId, ProtocolMsg)>,
    timer_gens: Vec<u64>,
}

impl Pump {
    pub fn new(nodes: Vec<NodeState>) -> Self {
        let n = nodes.len();
        Pump {
            nodes,
            events: Vec::new(),
            dropped: Box::new(|_, _, _| false),
            sent: 0,
            log: Vec::new(),
            queue: VecDeque::new(),
            timer_gens: vec![0; n],
        }
    }

    pub fn node(&self, id: u32) -> &NodeState {
        &self.nodes[id as usize]
    }

    pub fn start_all(&mut self) {
        for i in 0..self.nodes.len() {
            let out = self.nodes[i].start();
            self.absorb(SignerId(i as u32), out);
        }
        self.run();
    }

    pub fn absorb(&mut self, sender: SignerId, out: StepOutput) {
        for Output { targets, msg, .. } in out.msgs {
            for target in targets {
                self.sent += 1;
                self.log.push((sender, target, msg.kind_name()));
                if !(self.dropped)(sender, target, &msg) {
                    self.queue.push_back((sender, target, msg.clone()));
                }
            }
        }
        for ev in out.events {
            if let HarnessEvent::TimerSet { gen, .. } = ev {
                self.timer_gens[sender.idx()] = gen;
            }
            self.events.push((sender, ev));
        }
    }

    /// Drain the queue to quiescence.
    pub fn run(&mut self) {
        while let Some((from, to, msg)) = self.queue.pop_front() {
            let out = self.nodes[to.idx()].step(Input::Message { from, msg });
            self.absorb(to, out);
        }
    }

    /// Deliver one input to one node and drain.
    pub fn feed(&mut self, node: u32, input: Input) {
        let out = self.nodes[node as usize].step(input);
        self.absorb(SignerId(node), out);
        self.run();
    }

    pub fn fire_timer(&mut self, node: u32) {
        let gen = self.timer_gens[node as usize];
        self.feed(node, Input::TimerFired { gen });
    }

    pub fn submit_txs(&mut self, count: u64) {
        for t in 0..count {
            let tx = tx(t);
            for i in 0..self.nodes.len() {
                self.feed(i as u32, Input::ClientTx(tx.clone()));
            }
        }
    }

    pub fn commits_of(&self, node: u32) -> Vec<u64> {
        self.events
            .iter()
            .filter_map(|(id, ev)| match ev {
                HarnessEvent::Committed { s, .. } if id.0 == node => Some(*s),
                _ => None,
            })
            .collect()
    }

    pub fn chains_identical(&self) -> bool {
        let tips: BTreeSet<(u64, [u8; 32])> = self
            .nodes
            .iter()
            .map(|nd| (nd.tip_height(), nd.tip_id()))
            .collect();
        tips.len() == 1
    }
}

/// Collect the resolved targets of all messages of one kind in the output.
pub fn targets_of(out: &StepOutput, kind: &str) -> Vec<(Destination, Vec<SignerId>)> {
    out.msgs
        .iter()
        .filter(|o| o.msg.kind_name() == kind)
        .map(|o| (o.dest, o.targets.clone()))
        .collect()
}

pub fn msgs_of<'a>(out: &'a StepOutput, kind: &str) -> Vec<&'a ProtocolMsg> {
    out.msgs.iter().filter(|o| o.msg.kind_name() == kind).map(|o| &o.msg).collect()
}
