//! Bounded exhaustive search over message delivery orders.
//!
//! One frame, one adversarial leader, everyone else protocol-following. The
//! first `depth` steps branch over every pending delivery and over a timer
//! tick; after that the schedule is completed FIFO with ticks whenever the
//! network is quiet. States are deduplicated by fingerprint.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::auth::{KeyRegistry, ModuleId};
use crate::consensus::{Actor, Adversary, Outbound, Replica, ReplicaConfig};
use crate::harness::Production;
use crate::message::{ModuleOutput, SignedMessage};
use crate::quorum::QuorumConfig;
use crate::simnet::Destination;
use crate::space::DecisionValue;

#[derive(Debug, Clone)]
pub struct EquivocationCase {
    pub quorum: QuorumConfig,
    /// Output of every module; the leader's entry is ignored.
    pub outputs: Vec<DecisionValue>,
    pub value_a: DecisionValue,
    pub value_b: DecisionValue,
    pub partition_a: BTreeSet<ModuleId>,
    pub timeout_rounds: u64,
    pub equivocation_fast_path: bool,
    /// Branching steps before the schedule is completed deterministically.
    pub depth: usize,
    /// Round limit for the deterministic completion.
    pub max_rounds: u64,
}

impl EquivocationCase {
    /// The frame-0 leader equivocates between `a` and `b`; every other module outputs `honest`.
    pub fn new(
        quorum: QuorumConfig,
        honest: DecisionValue,
        a: DecisionValue,
        b: DecisionValue,
        partition_a: BTreeSet<ModuleId>,
    ) -> Self {
        let timeout_rounds = 3;
        Self {
            quorum,
            outputs: vec![honest; quorum.n()],
            value_a: a,
            value_b: b,
            partition_a,
            timeout_rounds,
            equivocation_fast_path: true,
            depth: 4,
            max_rounds: (quorum.f() as u64 + 2) * timeout_rounds + 10,
        }
    }

    pub fn leader(&self) -> ModuleId {
        self.quorum.leader_of(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExploreReport {
    /// Distinct states visited in the branching phase.
    pub states: u64,
    /// Completed schedules.
    pub terminals: u64,
    /// States where two honest replicas had committed different values.
    pub safety_violations: u64,
    /// Completed schedules that left an honest replica undecided.
    pub undecided: u64,
    /// Completed schedules in which some honest replica decided in the leader's view.
    pub decided_in_first_view: u64,
    pub min_decision_view: Option<u64>,
    pub max_decision_view: Option<u64>,
    pub values: BTreeSet<DecisionValue>,
}

impl ExploreReport {
    pub fn safe(&self) -> bool {
        self.safety_violations == 0
    }

    /// Every completed schedule decided, and only after the leader lost its view.
    pub fn leader_deposed(&self) -> bool {
        self.terminals > 0 && self.undecided == 0 && self.decided_in_first_view == 0
    }
}

#[derive(Clone)]
struct State {
    actors: Vec<Actor>,
    pending: Vec<(ModuleId, ModuleId, SignedMessage)>,
    round: u64,
}

impl State {
    fn route(&mut self, from: ModuleId, out: Vec<Outbound>) {
        let n = self.actors.len();
        for ob in out {
            let to: Vec<ModuleId> = match ob.to {
                Destination::Module(m) => vec![m],
                Destination::Observer => Vec::new(),
                Destination::Peers | Destination::Broadcast => (0..n).filter(|m| *m != from).collect(),
            };
            for m in to {
                // Redelivery of an identical message is a no-op for every actor.
                if !self
                    .pending
                    .iter()
                    .any(|(_, t, msg)| *t == m && **msg == *ob.msg)
                {
                    self.pending.push((from, m, Arc::clone(&ob.msg)));
                }
            }
        }
    }

    fn deliver(&mut self, index: usize) {
        let (_, to, msg) = self.pending.remove(index);
        let out = self.actors[to].handle_message(&msg, self.round);
        self.route(to, out);
    }

    fn tick(&mut self) {
        self.round += 1;
        for i in 0..self.actors.len() {
            let out = self.actors[i].tick(self.round);
            self.route(i, out);
        }
    }

    fn honest(&self) -> impl Iterator<Item = &Replica> {
        self.actors.iter().filter_map(Actor::as_replica)
    }

    fn agreement_holds(&self) -> bool {
        let mut seen: Option<&DecisionValue> = None;
        for d in self.honest().filter_map(Replica::decision) {
            match seen {
                Some(v) if *v != d.value => return false,
                _ => seen = Some(&d.value),
            }
        }
        true
    }

    fn all_decided(&self) -> bool {
        self.honest().all(|r| r.decision().is_some())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.round.hash(&mut h);
        for a in &self.actors {
            match a {
                Actor::Replica(r) => r.fingerprint(&mut h),
                Actor::Adversary(a) => a.fingerprint(&mut h),
            }
        }
        let mut msgs: Vec<u64> = self
            .pending
            .iter()
            .map(|(from, to, msg)| {
                let mut mh = DefaultHasher::new();
                (from, to, &**msg).hash(&mut mh);
                mh.finish()
            })
            .collect();
        msgs.sort_unstable();
        msgs.hash(&mut h);
        h.finish()
    }
}

fn initial(case: &EquivocationCase) -> State {
    let n = case.quorum.n();
    let reg = Arc::new(KeyRegistry::generate(n, 0x5eed));
    let mut cfg = ReplicaConfig::new(case.quorum, case.timeout_rounds);
    cfg.equivocation_fast_path = case.equivocation_fast_path;
    let leader = case.leader();
    let mut state = State {
        actors: Vec::with_capacity(n),
        pending: Vec::new(),
        round: 0,
    };
    let mut productions = Vec::with_capacity(n);
    for id in 0..n {
        let signer = reg.signer(id).expect("registered");
        if id == leader {
            productions.push(Production::Equivocation {
                for_a: ModuleOutput::new(&signer, 0, case.value_a.clone(), 1.0),
                for_b: ModuleOutput::new(&signer, 0, case.value_b.clone(), 1.0),
                partition_a: case.partition_a.clone(),
            });
            state.actors.push(Actor::Adversary(Adversary::new(cfg, signer)));
        } else {
            productions.push(Production::Output(ModuleOutput::new(
                &signer,
                0,
                case.outputs[id].clone(),
                0.9,
            )));
            state.actors.push(Actor::Replica(Replica::new(cfg, signer)));
        }
    }
    for (id, production) in productions.iter().enumerate() {
        let out = state.actors[id].begin_frame(0, production, 0);
        state.route(id, out);
    }
    state
}

struct Search<'a> {
    case: &'a EquivocationCase,
    seen: HashSet<u64>,
    report: ExploreReport,
}

impl Search<'_> {
    fn visit(&mut self, state: State, depth: usize) {
        if !self.seen.insert(state.fingerprint()) {
            return;
        }
        self.report.states += 1;
        if !state.agreement_holds() {
            self.report.safety_violations += 1;
            return;
        }
        if depth == self.case.depth || (state.pending.is_empty() && state.all_decided()) {
            self.complete(state);
            return;
        }
        for i in 0..state.pending.len() {
            let mut next = state.clone();
            next.deliver(i);
            self.visit(next, depth + 1);
        }
        if state.round < self.case.max_rounds {
            let mut next = state;
            next.tick();
            self.visit(next, depth + 1);
        }
    }

    fn complete(&mut self, mut state: State) {
        loop {
            if !state.agreement_holds() {
                self.report.safety_violations += 1;
                return;
            }
            if !state.pending.is_empty() {
                state.deliver(0);
            } else if state.all_decided() || state.round >= self.case.max_rounds {
                break;
            } else {
                state.tick();
            }
        }
        let r = &mut self.report;
        r.terminals += 1;
        if !state.all_decided() {
            r.undecided += 1;
        }
        let mut first_view = false;
        for d in state.honest().filter_map(Replica::decision) {
            first_view |= d.view == 0;
            r.min_decision_view = Some(r.min_decision_view.map_or(d.view, |v| v.min(d.view)));
            r.max_decision_view = Some(r.max_decision_view.map_or(d.view, |v| v.max(d.view)));
            r.values.insert(d.value.clone());
        }
        if first_view {
            r.decided_in_first_view += 1;
        }
    }
}

/// Explores every delivery order of `case` up to its depth bound.
pub fn explore_equivocation(case: &EquivocationCase) -> ExploreReport {
    let mut search = Search {
        case,
        seen: HashSet::new(),
        report: ExploreReport::default(),
    };
    search.visit(initial(case), 0);
    search.report
}
