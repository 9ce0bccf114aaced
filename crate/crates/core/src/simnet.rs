//! Deterministic discrete-round network.
//!
//! Every send is expanded into per-recipient envelopes whose fate (drop or
//! delivery round) is a pure function of the policy seed and the envelope's
//! global index. Delivery order within a round is fixed by the sort key
//! `(deliver_round, send_round, from, to, seq)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use crate::auth::ModuleId;
use crate::canonical::{Canonical, Digest};
use crate::message::Payload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Destination {
    Module(ModuleId),
    Observer,
    /// Every other module plus the observer.
    Broadcast,
    /// Every other module, not the observer.
    Peers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Recipient {
    Module(ModuleId),
    Observer,
}

impl Recipient {
    fn sort_key(&self) -> usize {
        match self {
            Recipient::Module(m) => *m,
            Recipient::Observer => usize::MAX,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Recipient::Module(m) => m.to_string(),
            Recipient::Observer => "obs".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub from: ModuleId,
    pub to: Recipient,
    pub payload: Payload,
    pub digest: Digest,
    pub send_round: u64,
    pub deliver_round: u64,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub from_round: u64,
    pub to_round: u64,
    pub side_a: BTreeSet<ModuleId>,
    pub side_b: BTreeSet<ModuleId>,
}

impl Partition {
    fn active(&self, round: u64) -> bool {
        (self.from_round..=self.to_round).contains(&round)
    }

    fn separates(&self, a: ModuleId, b: ModuleId) -> bool {
        (self.side_a.contains(&a) && self.side_b.contains(&b))
            || (self.side_b.contains(&a) && self.side_a.contains(&b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPolicy {
    pub base_delay_rounds: u64,
    /// Extra delay drawn uniformly from `0..=jitter_rounds`.
    pub jitter_rounds: u64,
    pub drop_rate: f64,
    pub partitions: Vec<Partition>,
    pub seed: u64,
}

impl Default for NetworkPolicy {
    fn default() -> Self {
        Self {
            base_delay_rounds: 1,
            jitter_rounds: 0,
            drop_rate: 0.0,
            partitions: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Dropped,
    Deliver { round: u64 },
}

impl NetworkPolicy {
    /// Fate of the envelope with global index `index`.
    pub fn fate(&self, index: u64, from: ModuleId, to: Recipient, send_round: u64) -> Fate {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let drop_roll: f64 = rng.gen();
        let jitter = if self.jitter_rounds > 0 {
            rng.gen_range(0..=self.jitter_rounds)
        } else {
            0
        };
        if drop_roll < self.drop_rate {
            return Fate::Dropped;
        }
        let round = send_round + self.base_delay_rounds + jitter;
        if let Recipient::Module(to) = to {
            let cut = self
                .partitions
                .iter()
                .any(|p| p.separates(from, to) && (p.active(send_round) || p.active(round)));
            if cut {
                return Fate::Dropped;
            }
        }
        Fate::Deliver { round }
    }
}

/// Line-oriented `round|from|to|kind|digest` log. The text is kept only when
/// requested; the running digest is always maintained so campaigns can
/// compare runs without holding every line.
#[derive(Debug, Clone)]
pub struct EventLog {
    text: Option<String>,
    hasher: Sha256,
    lines: u64,
}

impl EventLog {
    pub fn new(keep_text: bool) -> Self {
        Self {
            text: keep_text.then(String::new),
            hasher: Sha256::new(),
            lines: 0,
        }
    }

    pub fn record(&mut self, line: &str) {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.lines += 1;
        if let Some(t) = &mut self.text {
            t.push_str(line);
            t.push('\n');
        }
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn digest(&self) -> Digest {
        Digest::from_bytes(self.hasher.clone().finalize().into())
    }
}

type QueueKey = (u64, u64, ModuleId, usize, u64);

#[derive(Debug)]
pub struct Network {
    policy: NetworkPolicy,
    modules: usize,
    round: u64,
    next_index: u64,
    extra_delay: BTreeMap<ModuleId, u64>,
    pending: BTreeMap<QueueKey, Envelope>,
    log: EventLog,
    dropped: u64,
}

impl Network {
    pub fn new(policy: NetworkPolicy, modules: usize, keep_log_text: bool) -> Self {
        Self {
            policy,
            modules,
            round: 0,
            next_index: 0,
            extra_delay: BTreeMap::new(),
            pending: BTreeMap::new(),
            log: EventLog::new(keep_log_text),
            dropped: 0,
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn policy(&self) -> &NetworkPolicy {
        &self.policy
    }

    /// Slow senders: every envelope from `module` arrives `rounds` later.
    pub fn set_extra_delay(&mut self, module: ModuleId, rounds: u64) {
        self.extra_delay.insert(module, rounds);
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    fn recipients(&self, from: ModuleId, to: Destination) -> Vec<Recipient> {
        match to {
            Destination::Module(m) => vec![Recipient::Module(m)],
            Destination::Observer => vec![Recipient::Observer],
            Destination::Peers | Destination::Broadcast => {
                let mut r: Vec<Recipient> = (0..self.modules)
                    .filter(|&m| m != from)
                    .map(Recipient::Module)
                    .collect();
                if to == Destination::Broadcast {
                    r.push(Recipient::Observer);
                }
                r
            }
        }
    }

    /// Queues `payload` from `from` at the current round.
    pub fn send(&mut self, from: ModuleId, to: Destination, payload: Payload) {
        let digest = payload.digest();
        let extra = self.extra_delay.get(&from).copied().unwrap_or(0);
        for recipient in self.recipients(from, to) {
            let seq = self.next_index;
            self.next_index += 1;
            match self.policy.fate(seq, from, recipient, self.round) {
                Fate::Dropped => self.dropped += 1,
                Fate::Deliver { round } => {
                    // A message can never arrive in the round it was sent.
                    let deliver_round = (round + extra).max(self.round + 1);
                    let env = Envelope {
                        from,
                        to: recipient,
                        payload: payload.clone(),
                        digest,
                        send_round: self.round,
                        deliver_round,
                        seq,
                    };
                    self.pending.insert(
                        (deliver_round, self.round, from, recipient.sort_key(), seq),
                        env,
                    );
                }
            }
        }
    }

    /// Moves to the next round and returns everything due by then.
    pub fn advance_round(&mut self) -> Vec<Envelope> {
        self.round += 1;
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if entry.key().0 > self.round {
                break;
            }
            out.push(entry.remove());
        }
        for env in &out {
            let line = format!(
                "{}|{}|{}|{}|{}",
                self.round,
                env.from,
                env.to.label(),
                env.payload.kind_name(),
                env.digest
            );
            self.log.record(&line);
        }
        out
    }

    /// Appends a non-network line (frame markers, supervisor actions).
    pub fn annotate(&mut self, line: &str) {
        self.log.record(line);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutStatus {
    Fired,
    Quiet,
}

/// Fires once `timeout_rounds` have elapsed since `start_round` on an
/// undecided instance.
pub fn timeout_check(start_round: u64, decided: bool, now: u64, timeout_rounds: u64) -> TimeoutStatus {
    if !decided && now.saturating_sub(start_round) >= timeout_rounds {
        TimeoutStatus::Fired
    } else {
        TimeoutStatus::Quiet
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::KeyRegistry;
    use crate::message::ProtocolMessage;
    use crate::auth::Signed;
    use std::sync::Arc;

    fn payload(reg: &Arc<KeyRegistry>, from: ModuleId, n: u64) -> Payload {
        Payload::Protocol(Arc::new(Signed::new(
            ProtocolMessage::StateRequest { from_frame: n },
            &reg.signer(from).unwrap(),
        )))
    }

    #[test]
    fn base_delay_without_jitter() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let mut net = Network::new(NetworkPolicy::default(), 4, true);
        net.advance_round();
        net.send(0, Destination::Module(1), payload(&reg, 0, 0));
        let got = net.advance_round();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].send_round, 1);
        assert_eq!(got[0].deliver_round, 2);
    }

    #[test]
    fn full_drop_rate_delivers_nothing() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let policy = NetworkPolicy {
            drop_rate: 1.0,
            ..NetworkPolicy::default()
        };
        let mut net = Network::new(policy, 4, false);
        net.send(0, Destination::Broadcast, payload(&reg, 0, 0));
        assert_eq!(net.pending(), 0);
        assert_eq!(net.dropped(), 4);
        assert!(net.advance_round().is_empty());
    }

    #[test]
    fn partition_blocks_cross_traffic() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let policy = NetworkPolicy {
            partitions: vec![Partition {
                from_round: 5,
                to_round: 10,
                side_a: [0, 1].into(),
                side_b: [2, 3].into(),
            }],
            ..NetworkPolicy::default()
        };
        let mut net = Network::new(policy, 4, false);
        for _ in 0..6 {
            net.advance_round();
        }
        net.send(0, Destination::Module(2), payload(&reg, 0, 0));
        net.send(0, Destination::Module(1), payload(&reg, 0, 0));
        let got = net.advance_round();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].to, Recipient::Module(1));
    }

    #[test]
    fn same_round_delivery_is_sorted_by_sender() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let mut net = Network::new(NetworkPolicy::default(), 4, false);
        net.send(3, Destination::Module(0), payload(&reg, 3, 0));
        net.send(1, Destination::Module(0), payload(&reg, 1, 0));
        let got = net.advance_round();
        assert_eq!(got.iter().map(|e| e.from).collect::<Vec<_>>(), vec![1, 3]);
        assert!(net.advance_round().is_empty());
    }

    #[test]
    fn broadcast_expands_per_recipient() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let mut net = Network::new(NetworkPolicy::default(), 4, false);
        net.send(2, Destination::Broadcast, payload(&reg, 2, 0));
        let to: Vec<Recipient> = net.advance_round().iter().map(|e| e.to).collect();
        assert_eq!(
            to,
            vec![
                Recipient::Module(0),
                Recipient::Module(1),
                Recipient::Module(3),
                Recipient::Observer
            ]
        );
    }

    #[test]
    fn slow_sender_arrives_late() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let mut net = Network::new(NetworkPolicy::default(), 4, false);
        net.set_extra_delay(1, 3);
        net.send(1, Destination::Module(0), payload(&reg, 1, 0));
        for _ in 0..3 {
            assert!(net.advance_round().is_empty());
        }
        assert_eq!(net.advance_round().len(), 1);
    }

    #[test]
    fn identical_seeds_give_identical_schedules() {
        let reg = Arc::new(KeyRegistry::generate(4, 0));
        let run = |seed| {
            let policy = NetworkPolicy {
                jitter_rounds: 3,
                drop_rate: 0.2,
                seed,
                ..NetworkPolicy::default()
            };
            let mut net = Network::new(policy, 4, true);
            for r in 0..20u64 {
                net.send((r % 4) as usize, Destination::Broadcast, payload(&reg, (r % 4) as usize, r));
                net.advance_round();
            }
            for _ in 0..5 {
                net.advance_round();
            }
            net.log().text().unwrap().to_string()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn timeout_threshold() {
        assert_eq!(timeout_check(2, false, 12, 10), TimeoutStatus::Fired);
        assert_eq!(timeout_check(2, true, 12, 10), TimeoutStatus::Quiet);
        assert_eq!(timeout_check(2, false, 11, 10), TimeoutStatus::Quiet);
    }
}
