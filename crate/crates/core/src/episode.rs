//! The lock-step episode runner.
//!
//! Every frame goes through the same steps: supervisor maintenance
//! (restarts and state transfer), output production, agreement (pbft or a
//! vote-only tally), the observer's matching-replies rule, one
//! [`DecisionRecord`] and finally the supervisor's look at who disagreed.
//! Frame `t + 1` starts only once frame `t` is resolved.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::auth::{KeyRegistry, ModuleId, Signed, Signer};
use crate::canonical::{digest, Canonical, Digest};
use crate::consensus::{Actor, Adversary, Observer, Outbound, Replica, ReplicaConfig};
use crate::harness::{FaultProfile, ModuleState, Production};
use crate::message::{ModuleOutput, Payload, ProtocolMessage};
use crate::quorum::QuorumConfig;
use crate::report::{DecisionLog, LogHeader, LogRecord, ModuleRow, SafetyFlags, VerdictKind};
use crate::scenario::{ConsensusMode, Scenario};
use crate::simnet::{Destination, EventLog, Network, Recipient};
use crate::space::DecisionValue;
use crate::supervisor::{EventKind, Mark, Seen, Supervisor, SupervisorEvent};
use crate::voter::{fast_path_check, tally, FastPathStep, NoQuorumReason, Verdict, VoteStrategy};

/// Rounds within which every frame of an in-model episode must commit.
pub fn liveness_bound(sc: &Scenario) -> u64 {
    (sc.quorum.f() as u64 + 1) * sc.timeout_rounds + 3
}

/// Rounds a frame may run before it is given up as undecided.
fn frame_budget(sc: &Scenario) -> u64 {
    (sc.quorum.f() as u64 + 2) * sc.timeout_rounds + 3
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub frame: u64,
    pub verdict: Verdict,
    pub rounds: u64,
    pub view_changes: u64,
    pub flags: SafetyFlags,
}

impl DecisionRecord {
    pub fn value(&self) -> Option<&DecisionValue> {
        match &self.verdict {
            Verdict::Decided { value, .. } | Verdict::SafeMode { value, .. } => Some(value),
            Verdict::NoQuorum { .. } => None,
        }
    }

    pub fn supporters(&self) -> BTreeSet<ModuleId> {
        match &self.verdict {
            Verdict::Decided { supporters, .. } => supporters.clone(),
            _ => BTreeSet::new(),
        }
    }

    pub fn to_log(&self) -> LogRecord {
        LogRecord {
            frame: self.frame,
            verdict: match &self.verdict {
                Verdict::Decided { .. } => VerdictKind::Decided,
                Verdict::NoQuorum { reason, .. } => VerdictKind::NoQuorum(*reason),
                Verdict::SafeMode { cause, .. } => VerdictKind::SafeMode(*cause),
            },
            value: self.value().map(|v| v.label().to_string()),
            supporters: self.supporters(),
            rounds: self.rounds,
            view_changes: self.view_changes,
            flags: self.flags,
        }
    }
}

/// What happened inside one frame beyond its decision record.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrace {
    pub frame: u64,
    pub start_round: u64,
    pub end_round: u64,
    /// Signers inside the prepare certificates correct replicas formed.
    pub prepare_voters: BTreeSet<ModuleId>,
    /// Decisions of correct replicas: value and the view it was reached in.
    pub decisions: BTreeMap<ModuleId, (DecisionValue, u64)>,
    pub seen: BTreeMap<ModuleId, Seen>,
    pub excluded: BTreeSet<ModuleId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metrics {
    pub frames: u64,
    pub decided: u64,
    pub no_quorum: u64,
    pub safe_mode: u64,
    pub agreement_violations: u64,
    pub ground_truth_mismatches: u64,
    pub view_changes: u64,
    pub max_view_changes: u64,
    pub max_rounds: u64,
    /// Frames that missed the liveness bound, made more than `f + 1` view
    /// changes, or did not decide.
    pub liveness_failures: u64,
    pub total_rounds: u64,
    pub messages: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the event log text, not just its digest.
    pub keep_event_text: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            keep_event_text: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub header: LogHeader,
    pub records: Vec<DecisionRecord>,
    pub supervisor_events: Vec<SupervisorEvent>,
    pub traces: Vec<FrameTrace>,
    pub module_rows: Vec<ModuleRow>,
    pub event_log: EventLog,
    pub metrics: Metrics,
    decision_lines: Vec<String>,
}

impl Episode {
    /// The decision log text: header, frame rows and supervisor rows in
    /// the order they happened.
    pub fn decision_log(&self) -> String {
        let mut s = self.header.line();
        s.push('\n');
        for l in &self.decision_lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn parsed_log(&self) -> DecisionLog {
        DecisionLog::parse(&self.decision_log()).expect("own log parses")
    }

    pub fn event_log_text(&self) -> Option<&str> {
        self.event_log.text()
    }

    pub fn module_log(&self) -> String {
        self.module_rows.iter().map(|r| r.line() + "\n").collect()
    }

    /// Digest over both logs, used to compare runs.
    pub fn digest(&self) -> Digest {
        let mut bytes = self.decision_log().into_bytes();
        bytes.extend_from_slice(self.event_log.digest().as_bytes());
        digest(&bytes)
    }
}

pub fn run_episode(sc: &Scenario) -> Episode {
    run_episode_with(sc, &RunOptions::default())
}

pub fn run_episode_with(sc: &Scenario, opts: &RunOptions) -> Episode {
    let mut world = World::new(sc, opts);
    for t in 0..sc.frames() {
        world.maintenance(t);
        match sc.mode {
            ConsensusMode::Pbft => world.pbft_frame(t),
            ConsensusMode::VoteOnly => world.vote_frame(t),
        }
    }
    world.finish()
}

fn send_all(net: &mut Network, from: ModuleId, outs: Vec<Outbound>) {
    for ob in outs {
        net.send(from, ob.to, Payload::Protocol(ob.msg));
    }
}

/// Per-frame result handed from the agreement step to bookkeeping.
struct Resolution {
    verdict: Verdict,
    rounds: u64,
    view_changes: u64,
    decisions: BTreeMap<ModuleId, (DecisionValue, u64)>,
    prepare_voters: BTreeSet<ModuleId>,
}

struct World<'a> {
    sc: &'a Scenario,
    registry: Arc<KeyRegistry>,
    signers: Vec<Signer>,
    rcfg: ReplicaConfig,
    net: Network,
    states: Vec<ModuleState>,
    actors: Vec<Actor>,
    observer: Observer,
    supervisor: Supervisor,
    records: Vec<DecisionRecord>,
    events: Vec<SupervisorEvent>,
    traces: Vec<FrameTrace>,
    module_rows: Vec<ModuleRow>,
    lines: Vec<String>,
    metrics: Metrics,
}

impl<'a> World<'a> {
    fn new(sc: &'a Scenario, opts: &RunOptions) -> Self {
        let n = sc.quorum.n();
        let registry = Arc::new(KeyRegistry::generate(n, sc.seed));
        let signers: Vec<Signer> = (0..n)
            .map(|m| registry.signer(m).expect("module id in range"))
            .collect();
        let rcfg = ReplicaConfig {
            quorum: sc.quorum,
            timeout_rounds: sc.timeout_rounds,
            checkpoint_interval: sc.options.checkpoint_interval,
            equivocation_fast_path: sc.options.equivocation_fast_path,
            retransmit_interval: sc.options.retransmit_interval,
        };
        let mut net = Network::new(sc.network.clone(), n, opts.keep_event_text);
        let states: Vec<ModuleState> = sc
            .modules
            .iter()
            .enumerate()
            .map(|(m, spec)| ModuleState::new(m, spec, sc.seed))
            .collect();
        for (m, spec) in sc.modules.iter().enumerate() {
            if let FaultProfile::Slow { delay_rounds } = spec.profile {
                net.set_extra_delay(m, delay_rounds);
            }
        }
        let actors = (0..n)
            .map(|m| make_actor(&states[m], rcfg, &signers[m]))
            .collect();
        Self {
            observer: Observer::new(Arc::clone(&registry), sc.observer_threshold()),
            supervisor: Supervisor::new(sc.supervisor, sc.quorum),
            sc,
            registry,
            signers,
            rcfg,
            net,
            states,
            actors,
            records: Vec::new(),
            events: Vec::new(),
            traces: Vec::new(),
            module_rows: Vec::new(),
            lines: Vec::new(),
            metrics: Metrics::default(),
        }
    }

    fn n(&self) -> usize {
        self.sc.quorum.n()
    }

    fn emit(&mut self, ev: SupervisorEvent) {
        let line = ev.log_line();
        self.net.annotate(&line);
        self.lines.push(line);
        self.events.push(ev);
    }

    fn set_excluded(&mut self, excluded: &BTreeSet<ModuleId>) {
        for a in &mut self.actors {
            if let Some(r) = a.as_replica_mut() {
                r.set_excluded(excluded.clone());
            }
        }
        self.observer.set_excluded(excluded.clone());
    }

    /// Modules that do not follow the protocol. Everyone else counts as
    /// correct for agreement checks, including crashed and slow ones.
    fn is_correct(&self, m: ModuleId) -> bool {
        !self.states[m].profile().is_byzantine()
    }

    /// Restarts isolated modules whose delay has passed and runs state
    /// transfer for every module that is restarting.
    fn maintenance(&mut self, t: u64) {
        for m in self.supervisor.due_restarts(t) {
            let round = self.net.round();
            let ev = self.supervisor.mark_restarting(t, round, m);
            self.states[m]
                .restart_module(self.sc.modules[m].on_restart)
                .expect("only isolated modules are due for restart");
            if !matches!(self.states[m].profile(), FaultProfile::Slow { .. }) {
                self.net.set_extra_delay(m, 0);
            }
            self.actors[m] = make_actor(&self.states[m], self.rcfg, &self.signers[m]);
            self.emit(ev);
        }
        let restarting = self.supervisor.restarting();
        if restarting.is_empty() {
            return;
        }
        let excluded: BTreeSet<ModuleId> = self
            .supervisor
            .out_of_service()
            .into_iter()
            .filter(|m| !restarting.contains(m))
            .collect();
        self.set_excluded(&excluded);

        let mut waiting = BTreeSet::new();
        for &m in &restarting {
            match &mut self.actors[m] {
                Actor::Replica(r) => {
                    let outs = r.begin_rejoin();
                    send_all(&mut self.net, m, outs);
                    waiting.insert(m);
                }
                // An adversary has no state worth transferring.
                Actor::Adversary(_) => self.recover(t, m, None),
            }
        }
        let start = self.net.round();
        let budget = 2 * self.sc.timeout_rounds + 4;
        while !waiting.is_empty() && self.net.round() - start < budget {
            let envs = self.net.advance_round();
            let round = self.net.round();
            for env in envs {
                let Recipient::Module(to) = env.to else { continue };
                let online = self.states[to].is_running(t) || waiting.contains(&to);
                if let (true, Payload::Protocol(msg)) = (online, &env.payload) {
                    let outs = self.actors[to].handle_message(msg, round);
                    send_all(&mut self.net, to, outs);
                }
            }
            for m in waiting.clone() {
                let outs = self.actors[m].tick(round);
                send_all(&mut self.net, m, outs);
                let done = self.actors[m]
                    .as_replica_mut()
                    .and_then(|r| r.take_rejoined());
                if let Some(last) = done {
                    waiting.remove(&m);
                    self.recover(t, m, last);
                }
            }
        }
    }

    fn recover(&mut self, t: u64, m: ModuleId, last: Option<u64>) {
        self.states[m]
            .apply_snapshot(last)
            .expect("module is restarting");
        let ev = self.supervisor.mark_recovered(t, self.net.round(), m);
        self.emit(ev);
    }

    fn produce(&mut self, t: u64) -> Vec<Production> {
        let obs = self.sc.observations.frame(t);
        (0..self.n())
            .map(|m| {
                if !self.states[m].is_running(t) {
                    return Production::NoOutput;
                }
                self.states[m]
                    .produce_output(
                        t,
                        &obs.observed[m],
                        &self.sc.space,
                        &self.signers[m],
                        self.sc.modules[m].equivocation_partition.as_ref(),
                    )
                    .expect("validated scenario")
            })
            .collect()
    }

    fn begin(&mut self, t: u64) -> (u64, BTreeSet<ModuleId>, Vec<Production>) {
        let r0 = self.net.round();
        self.net.annotate(&format!("{r0}|FRAME|{t}|BEGIN"));
        let excluded = self.supervisor.out_of_service();
        self.set_excluded(&excluded);
        self.observer.begin_frame(t);
        let prods = self.produce(t);
        (r0, excluded, prods)
    }

    fn output_to_observer(&mut self, m: ModuleId, prod: &Production) {
        match prod {
            Production::Output(o) => {
                self.net
                    .send(m, Destination::Observer, Payload::Output(Arc::new(o.clone())));
            }
            Production::Equivocation { for_a, for_b, .. } => {
                for o in [for_a, for_b] {
                    self.net
                        .send(m, Destination::Observer, Payload::Output(Arc::new(o.clone())));
                }
            }
            Production::NoOutput => {}
        }
    }

    fn pbft_frame(&mut self, t: u64) {
        let (r0, excluded, prods) = self.begin(t);
        let n = self.n();
        let live: Vec<bool> = prods
            .iter()
            .map(|p| !matches!(p, Production::NoOutput))
            .collect();
        for m in 0..n {
            if !live[m] {
                continue;
            }
            self.output_to_observer(m, &prods[m]);
            let outs = self.actors[m].begin_frame(t, &prods[m], r0);
            send_all(&mut self.net, m, outs);
        }
        let correct_live: Vec<ModuleId> = (0..n)
            .filter(|m| live[*m] && self.is_correct(*m))
            .collect();
        let budget = frame_budget(self.sc);
        let timeout = self.sc.timeout_rounds;
        loop {
            let envs = self.net.advance_round();
            let round = self.net.round();
            for env in envs {
                match env.to {
                    Recipient::Observer => self.observer.handle(&env.payload, round),
                    Recipient::Module(to) => {
                        if let (true, Payload::Protocol(msg)) = (live[to], &env.payload) {
                            let outs = self.actors[to].handle_message(msg, round);
                            send_all(&mut self.net, to, outs);
                        }
                    }
                }
            }
            for m in 0..n {
                if live[m] {
                    let outs = self.actors[m].tick(round);
                    send_all(&mut self.net, m, outs);
                }
            }
            let all_decided = correct_live.iter().all(|m| {
                self.actors[*m]
                    .as_replica()
                    .is_some_and(|r| r.decision().is_some())
            });
            let settled = match self.observer.finalized() {
                Some((_, fin)) => all_decided || round - fin >= timeout,
                None => false,
            };
            if settled || round - r0 >= budget {
                break;
            }
        }
        let end = self.net.round();

        let mut decisions = BTreeMap::new();
        let mut prepare_voters = BTreeSet::new();
        let mut view_changes = 0;
        for &m in &correct_live {
            let Some(r) = self.actors[m].as_replica() else { continue };
            view_changes = view_changes.max(r.view_changes());
            if let Some(d) = r.decision() {
                decisions.insert(m, (d.value.clone(), d.view));
            }
            if let Some(c) = r.prepared_certificate() {
                prepare_voters.extend(c.votes.iter().map(|v| v.signer()));
            }
        }
        let (verdict, rounds) = match self.observer.finalized() {
            Some((value, fin)) => (
                Verdict::Decided {
                    value: value.clone(),
                    supporters: self.observer.supporters(value),
                },
                fin - r0,
            ),
            None => (
                Verdict::NoQuorum {
                    tallies: self.observer.reply_tallies(),
                    reason: NoQuorumReason::Timeout,
                },
                end - r0,
            ),
        };
        let res = Resolution {
            verdict,
            rounds,
            view_changes,
            decisions,
            prepare_voters,
        };
        self.conclude(t, r0, excluded, res);
    }

    fn vote_frame(&mut self, t: u64) {
        let (r0, excluded, prods) = self.begin(t);
        let n = self.n();
        let fast = self.sc.strategy == VoteStrategy::FastPathThenMajority;
        let mut parts: BTreeMap<ModuleId, Participant> = BTreeMap::new();
        for m in 0..n {
            let prod = &prods[m];
            if matches!(prod, Production::NoOutput) {
                continue;
            }
            self.output_to_observer(m, prod);
            if self.is_correct(m) {
                let own = prod.primary().expect("running module").clone();
                if fast {
                    let msg = sign(
                        &self.signers[m],
                        ProtocolMessage::Announce {
                            frame: t,
                            digest: own.value_digest(),
                        },
                    );
                    self.net.send(m, Destination::Peers, msg);
                } else {
                    self.net
                        .send(m, Destination::Peers, Payload::Output(Arc::new(own.clone())));
                }
                parts.insert(m, Participant::new(own, fast));
            } else {
                self.byzantine_vote(t, m, prod, fast);
            }
        }
        let expected = n - excluded.len();
        let timeout = self.sc.timeout_rounds;
        let budget = 3 * timeout + 3;
        loop {
            let envs = self.net.advance_round();
            let round = self.net.round();
            for env in envs {
                let to = match env.to {
                    Recipient::Observer => {
                        self.observer.handle(&env.payload, round);
                        continue;
                    }
                    Recipient::Module(to) => to,
                };
                if excluded.contains(&env.from) || !env.payload.verify(&self.registry) {
                    continue;
                }
                match &env.payload {
                    Payload::Output(o) if o.frame == t => {
                        if let Some(p) = parts.get_mut(&to) {
                            if p.on_output(o) {
                                let full = Payload::Output(Arc::new(p.own.clone()));
                                self.net.send(to, Destination::Peers, full);
                            }
                        }
                    }
                    Payload::Protocol(msg) => match &msg.body {
                        ProtocolMessage::Announce { frame, digest } if *frame == t => {
                            if let Some(p) = parts.get_mut(&to) {
                                p.announced.entry(msg.signer()).or_insert(*digest);
                            }
                        }
                        ProtocolMessage::StateRequest { .. } | ProtocolMessage::StateSnapshot(_)
                            if self.states[to].is_running(t) => {
                                let outs = self.actors[to].handle_message(msg, round);
                                send_all(&mut self.net, to, outs);
                            }
                        _ => {}
                    },
                    _ => {}
                }
            }
            for (m, p) in parts.iter_mut() {
                match p.step(round, r0, timeout, expected, &self.sc.quorum, self.sc) {
                    Step::Wait => {}
                    Step::SendFull => {
                        let full = Payload::Output(Arc::new(p.own.clone()));
                        self.net.send(*m, Destination::Peers, full);
                    }
                    Step::Decided => {
                        if let Some(Verdict::Decided { value, .. }) = &p.verdict {
                            let reply = sign(
                                &self.signers[*m],
                                ProtocolMessage::Reply {
                                    frame: t,
                                    view: 0,
                                    digest: value.digest(),
                                    value: value.clone(),
                                },
                            );
                            self.net.send(*m, Destination::Observer, reply);
                        }
                    }
                }
            }
            let all_done = parts.values().all(|p| p.verdict.is_some());
            let last = parts.values().filter_map(|p| p.decided_at).max().unwrap_or(r0);
            let any_value = parts
                .values()
                .any(|p| matches!(p.verdict, Some(Verdict::Decided { .. })));
            let settled = all_done
                && (!any_value || self.observer.finalized().is_some() || round - last >= timeout);
            if settled || round - r0 >= budget {
                break;
            }
        }
        let end = self.net.round();

        let decisions: BTreeMap<ModuleId, (DecisionValue, u64)> = parts
            .iter()
            .filter_map(|(m, p)| match &p.verdict {
                Some(Verdict::Decided { value, .. }) => Some((*m, (value.clone(), 0))),
                _ => None,
            })
            .collect();
        let (verdict, rounds) = match self.observer.finalized() {
            Some((value, _)) => {
                let backing: Vec<&Participant> = parts
                    .values()
                    .filter(|p| p.verdict.as_ref().and_then(|v| v.decided_value()) == Some(value))
                    .collect();
                let supporters = match backing.first().and_then(|p| p.verdict.as_ref()) {
                    Some(Verdict::Decided { supporters, .. }) => supporters.clone(),
                    _ => self.observer.supporters(value),
                };
                let mut at: Vec<u64> = backing
                    .iter()
                    .filter_map(|p| p.decided_at)
                    .map(|r| r - r0)
                    .collect();
                at.sort_unstable();
                let k = self.sc.observer_threshold().clamp(1, at.len().max(1));
                let rounds = at.get(k - 1).or(at.last()).copied().unwrap_or(end - r0);
                (
                    Verdict::Decided {
                        value: value.clone(),
                        supporters,
                    },
                    rounds,
                )
            }
            None => {
                let local = parts
                    .values()
                    .filter_map(|p| p.verdict.clone())
                    .find(|v| matches!(v, Verdict::NoQuorum { .. }));
                let verdict = local.unwrap_or_else(|| Verdict::NoQuorum {
                    tallies: self.observer.reply_tallies(),
                    reason: NoQuorumReason::Timeout,
                });
                (verdict, end - r0)
            }
        };
        for (m, (v, _)) in &decisions {
            if let Some(r) = self.actors[*m].as_replica_mut() {
                r.adopt_decision(t, v.clone());
            }
        }
        let res = Resolution {
            verdict,
            rounds,
            view_changes: 0,
            decisions,
            prepare_voters: BTreeSet::new(),
        };
        self.conclude(t, r0, excluded, res);
    }

    /// Vote-only behavior of a Byzantine module: per-recipient outputs (and
    /// announcements) plus premature replies to the observer.
    fn byzantine_vote(&mut self, t: u64, m: ModuleId, prod: &Production, fast: bool) {
        for to in (0..self.n()).filter(|x| *x != m) {
            let Some(o) = prod.for_recipient(to) else { continue };
            if fast {
                let ann = sign(
                    &self.signers[m],
                    ProtocolMessage::Announce {
                        frame: t,
                        digest: o.value_digest(),
                    },
                );
                self.net.send(m, Destination::Module(to), ann);
            }
            self.net
                .send(m, Destination::Module(to), Payload::Output(Arc::new(o.clone())));
        }
        let values: Vec<DecisionValue> = match prod {
            Production::Output(o) => vec![o.value.clone()],
            Production::Equivocation { for_a, for_b, .. } => {
                vec![for_a.value.clone(), for_b.value.clone()]
            }
            Production::NoOutput => Vec::new(),
        };
        for value in values {
            let reply = sign(
                &self.signers[m],
                ProtocolMessage::Reply {
                    frame: t,
                    view: 0,
                    digest: value.digest(),
                    value,
                },
            );
            self.net.send(m, Destination::Observer, reply);
        }
    }

    fn conclude(&mut self, t: u64, r0: u64, excluded: BTreeSet<ModuleId>, res: Resolution) {
        let n = self.n();
        let obs = self.sc.observations.frame(t);
        let distinct: BTreeSet<&DecisionValue> = res.decisions.values().map(|(v, _)| v).collect();
        let decided = res.verdict.decided_value().cloned();
        let verdict = res.verdict.escalate(obs.critical, &self.sc.space);
        let flags = SafetyFlags {
            agreement_violation: distinct.len() > 1,
            safe_mode: matches!(verdict, Verdict::SafeMode { .. }),
            ground_truth_mismatch: decided.as_ref().is_some_and(|v| *v != obs.truth),
        };
        for m in res.decisions.keys() {
            self.states[*m].note_committed(t);
        }
        let record = DecisionRecord {
            frame: t,
            verdict,
            rounds: res.rounds,
            view_changes: res.view_changes,
            flags,
        };
        self.lines.push(record.to_log().line());

        let mut seen = BTreeMap::new();
        for m in 0..n {
            let s = if self.observer.equivocations().iter().any(|e| e.signer == m) {
                Seen::Equivocated
            } else if let Some(o) = self.observer.outputs().get(&m) {
                Seen::Output(o.value.clone())
            } else {
                Seen::NoOutput
            };
            seen.insert(m, s);
        }
        let round = self.net.round();
        for (m, s) in &seen {
            let mark = if excluded.contains(m) {
                "excluded"
            } else {
                match (&decided, s) {
                    (None, _) => "uncommitted",
                    (Some(v), Seen::Output(o)) if o == v => mark_name(Mark::Agreed),
                    (Some(_), Seen::NoOutput) => mark_name(Mark::Absent),
                    (Some(_), _) => mark_name(Mark::Disagreed),
                }
            };
            self.module_rows.push(ModuleRow {
                frame: t,
                module: *m,
                value: match s {
                    Seen::Output(v) => Some(v.label().to_string()),
                    Seen::Equivocated => Some("equivocated".to_string()),
                    Seen::NoOutput => None,
                },
                mark: mark.to_string(),
            });
        }
        if let Some(v) = &decided {
            for ev in self.supervisor.observe_frame(t, round, v, &seen) {
                if ev.kind == EventKind::Isolated {
                    let _ = self.states[ev.module].isolate();
                }
                self.emit(ev);
            }
        }
        self.net.annotate(&format!("{round}|FRAME|{t}|END"));

        let m = &mut self.metrics;
        m.frames += 1;
        match &record.verdict {
            Verdict::Decided { .. } => m.decided += 1,
            Verdict::NoQuorum { .. } => m.no_quorum += 1,
            Verdict::SafeMode { .. } => m.safe_mode += 1,
        }
        m.agreement_violations += flags.agreement_violation as u64;
        m.ground_truth_mismatches += flags.ground_truth_mismatch as u64;
        m.view_changes += record.view_changes;
        m.max_view_changes = m.max_view_changes.max(record.view_changes);
        m.max_rounds = m.max_rounds.max(record.rounds);
        let f = self.sc.quorum.f() as u64;
        if !record.verdict.is_decided()
            || record.rounds > liveness_bound(self.sc)
            || record.view_changes > f + 1
        {
            m.liveness_failures += 1;
        }
        self.traces.push(FrameTrace {
            frame: t,
            start_round: r0,
            end_round: round,
            prepare_voters: res.prepare_voters,
            decisions: res.decisions,
            seen,
            excluded,
        });
        self.records.push(record);
    }

    fn finish(mut self) -> Episode {
        self.metrics.total_rounds = self.net.round();
        self.metrics.dropped = self.net.dropped();
        self.metrics.messages = self.net.log().lines();
        let sc = self.sc;
        Episode {
            header: LogHeader {
                scenario: sc.name.clone(),
                seed: sc.seed,
                mode: sc.mode.as_str().to_string(),
                n: sc.quorum.n(),
                f: sc.quorum.f(),
                expects_violation: sc.expects_violation,
            },
            records: self.records,
            supervisor_events: self.events,
            traces: self.traces,
            module_rows: self.module_rows,
            event_log: self.net.into_log(),
            metrics: self.metrics,
            decision_lines: self.lines,
        }
    }
}

fn mark_name(m: Mark) -> &'static str {
    match m {
        Mark::Agreed => "agreed",
        Mark::Disagreed => "disagreed",
        Mark::Absent => "absent",
    }
}

fn make_actor(state: &ModuleState, cfg: ReplicaConfig, signer: &Signer) -> Actor {
    if state.profile().is_byzantine() {
        Actor::Adversary(Adversary::new(cfg, signer.clone()))
    } else {
        Actor::Replica(Replica::new(cfg, signer.clone()))
    }
}

fn sign(signer: &Signer, body: ProtocolMessage) -> Payload {
    Payload::Protocol(Arc::new(Signed::new(body, signer)))
}

enum Step {
    Wait,
    SendFull,
    Decided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Collect,
    /// Fast path fell back; collecting full outputs since the given round.
    Full(u64),
}

/// A correct module's side of the vote-only exchange.
struct Participant {
    own: ModuleOutput,
    fast: bool,
    stage: Stage,
    outputs: BTreeMap<ModuleId, ModuleOutput>,
    announced: BTreeMap<ModuleId, Digest>,
    full_sent: bool,
    verdict: Option<Verdict>,
    decided_at: Option<u64>,
}

impl Participant {
    fn new(own: ModuleOutput, fast: bool) -> Self {
        let id = own.module_id;
        Self {
            outputs: BTreeMap::from([(id, own.clone())]),
            announced: BTreeMap::from([(id, own.value_digest())]),
            own,
            fast,
            stage: Stage::Collect,
            full_sent: false,
            verdict: None,
            decided_at: None,
        }
    }

    /// Records a full output. Returns true if the module should answer with
    /// its own full output: a peer fell back after this module already
    /// decided on the digests alone.
    fn on_output(&mut self, o: &ModuleOutput) -> bool {
        self.outputs.entry(o.module_id).or_insert_with(|| o.clone());
        if self.fast && !self.full_sent && o.module_id != self.own.module_id {
            self.full_sent = true;
            return true;
        }
        false
    }

    fn step(
        &mut self,
        round: u64,
        r0: u64,
        timeout: u64,
        expected: usize,
        quorum: &QuorumConfig,
        sc: &Scenario,
    ) -> Step {
        if self.verdict.is_some() {
            return Step::Wait;
        }
        let verdict = match (self.fast, self.stage) {
            (true, Stage::Collect) => {
                if self.announced.len() < expected && round - r0 < timeout {
                    return Step::Wait;
                }
                match fast_path_check(&self.announced, quorum, &sc.space) {
                    FastPathStep::Decided(v) | FastPathStep::NoQuorum(v) => v,
                    FastPathStep::NeedFullOutputs => {
                        self.stage = Stage::Full(round);
                        if self.full_sent {
                            return Step::Wait;
                        }
                        self.full_sent = true;
                        return Step::SendFull;
                    }
                }
            }
            (true, Stage::Full(since)) => {
                if self.outputs.len() < expected && round - since < timeout {
                    return Step::Wait;
                }
                self.tally(VoteStrategy::Majority, quorum)
            }
            (false, _) => {
                if self.outputs.len() < expected && round - r0 < timeout {
                    return Step::Wait;
                }
                self.tally(sc.strategy, quorum)
            }
        };
        self.verdict = Some(verdict);
        self.decided_at = Some(round);
        Step::Decided
    }

    fn tally(&self, strategy: VoteStrategy, quorum: &QuorumConfig) -> Verdict {
        let outs: Vec<ModuleOutput> = self.outputs.values().cloned().collect();
        tally(&outs, strategy, quorum).unwrap_or_else(|_| Verdict::NoQuorum {
            tallies: BTreeMap::new(),
            reason: NoQuorumReason::BelowThreshold,
        })
    }
}
