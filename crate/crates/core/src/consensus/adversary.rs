//! Protocol-level behavior of Byzantine modules.
//!
//! An adversary pushes its own (bad) value in every view it sees, never
//! endorses anyone else's proposal, never asks for a view change, and feeds
//! bogus state to rejoining replicas. It can only sign as itself.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::auth::{AuthTag, ModuleId, Signed, Signer};
use crate::canonical::{Canonical, Digest};
use crate::harness::Production;
use crate::message::{LogEntry, ProtocolMessage, SignedMessage, StateSnapshot};
use crate::simnet::Destination;
use crate::space::DecisionValue;

use super::{Outbound, ReplicaConfig};

#[derive(Debug, Clone)]
enum Stance {
    /// Nothing to push this frame.
    Idle,
    One(DecisionValue),
    /// `a` towards `partition_a`, `b` towards everyone else.
    Split {
        a: DecisionValue,
        b: DecisionValue,
        partition_a: BTreeSet<ModuleId>,
    },
}

#[derive(Debug, Clone)]
pub struct Adversary {
    id: ModuleId,
    cfg: ReplicaConfig,
    signer: Signer,
    frame: u64,
    stance: Stance,
    voted_views: BTreeSet<u64>,
    view_changes: BTreeMap<u64, BTreeMap<ModuleId, SignedMessage>>,
    new_view_sent: BTreeSet<u64>,
    attested: BTreeSet<u64>,
}

impl Adversary {
    pub fn new(cfg: ReplicaConfig, signer: Signer) -> Self {
        Self {
            id: signer.id(),
            cfg,
            signer,
            frame: 0,
            stance: Stance::Idle,
            voted_views: BTreeSet::new(),
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            attested: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> ModuleId {
        self.id
    }

    fn sign(&self, body: ProtocolMessage) -> SignedMessage {
        Arc::new(Signed::new(body, &self.signer))
    }

    fn n(&self) -> usize {
        self.cfg.quorum.n()
    }

    /// One `(destination, value)` pair per recipient group.
    fn targets(&self) -> Vec<(Destination, DecisionValue)> {
        match &self.stance {
            Stance::Idle => Vec::new(),
            Stance::One(v) => vec![(Destination::Peers, v.clone())],
            Stance::Split { a, b, partition_a } => (0..self.n())
                .filter(|m| *m != self.id)
                .map(|m| {
                    let v = if partition_a.contains(&m) { a } else { b };
                    (Destination::Module(m), v.clone())
                })
                .collect(),
        }
    }

    fn primary(&self) -> Option<&DecisionValue> {
        match &self.stance {
            Stance::Idle => None,
            Stance::One(v) => Some(v),
            Stance::Split { a, .. } => Some(a),
        }
    }

    pub fn begin_frame(&mut self, frame: u64, production: &Production, _round: u64) -> Vec<Outbound> {
        self.frame = frame;
        self.voted_views.clear();
        self.view_changes.clear();
        self.new_view_sent.clear();
        self.stance = match production {
            Production::Output(o) => Stance::One(o.value.clone()),
            Production::Equivocation {
                for_a,
                for_b,
                partition_a,
            } => Stance::Split {
                a: for_a.value.clone(),
                b: for_b.value.clone(),
                partition_a: partition_a.clone(),
            },
            Production::NoOutput => Stance::Idle,
        };
        let mut out = Vec::new();
        if self.cfg.quorum.leader_of(frame) == self.id {
            for (to, v) in self.targets() {
                out.push(Outbound {
                    to,
                    msg: self.sign(ProtocolMessage::PrePrepare {
                        frame,
                        view: frame,
                        digest: v.digest(),
                        value: v,
                    }),
                });
            }
        }
        out.extend(self.vote(frame));
        // Premature replies: an honest observer needs f + 1 of them.
        match &self.stance {
            Stance::Idle => {}
            Stance::One(v) => out.push(self.reply(v, Destination::Broadcast)),
            Stance::Split { a, b, .. } => {
                for (to, v) in self.targets() {
                    out.push(self.reply(&v, to));
                }
                out.push(self.reply(a, Destination::Observer));
                out.push(self.reply(b, Destination::Observer));
            }
        }
        out.extend(self.forgery());
        out
    }

    fn reply(&self, v: &DecisionValue, to: Destination) -> Outbound {
        Outbound {
            to,
            msg: self.sign(ProtocolMessage::Reply {
                frame: self.frame,
                view: self.frame,
                digest: v.digest(),
                value: v.clone(),
            }),
        }
    }

    /// A commit that claims to come from the next module but carries our own tag.
    fn forgery(&self) -> Option<Outbound> {
        let v = self.primary()?;
        let victim = (self.id + 1) % self.n();
        let real = self.sign(ProtocolMessage::Commit {
            frame: self.frame,
            view: self.frame,
            digest: v.digest(),
        });
        let forged = Signed {
            body: real.body.clone(),
            tag: AuthTag {
                signer: victim,
                ..real.tag
            },
        };
        Some(Outbound {
            to: Destination::Peers,
            msg: Arc::new(forged),
        })
    }

    /// Prepare and commit our own value in `view`, once per view.
    fn vote(&mut self, view: u64) -> Vec<Outbound> {
        if !self.voted_views.insert(view) {
            return Vec::new();
        }
        let frame = self.frame;
        let mut out = Vec::new();
        for (to, v) in self.targets() {
            let digest = v.digest();
            out.push(Outbound {
                to,
                msg: self.sign(ProtocolMessage::Prepare { frame, view, digest }),
            });
            out.push(Outbound {
                to,
                msg: self.sign(ProtocolMessage::Commit { frame, view, digest }),
            });
        }
        out
    }

    pub fn handle_message(&mut self, msg: &SignedMessage, _round: u64) -> Vec<Outbound> {
        let signer = msg.signer();
        if !msg.verify(self.signer.registry()) {
            return Vec::new();
        }
        match &msg.body {
            ProtocolMessage::StateRequest { .. } => self.bogus_snapshot(signer),
            ProtocolMessage::CheckpointAttest { up_to_frame, .. } => {
                if !self.attested.insert(*up_to_frame) {
                    return Vec::new();
                }
                vec![Outbound {
                    to: Destination::Peers,
                    msg: self.sign(ProtocolMessage::CheckpointAttest {
                        up_to_frame: *up_to_frame,
                        log_digest: Digest::from_bytes([self.id as u8; 32]),
                    }),
                }]
            }
            ProtocolMessage::PrePrepare { frame, view, .. }
            | ProtocolMessage::NewView { frame, view, .. }
                if *frame == self.frame =>
            {
                self.vote(*view)
            }
            ProtocolMessage::ViewChange {
                frame, new_view, ..
            } if *frame == self.frame => {
                let mut out = self.vote(*new_view);
                self.view_changes
                    .entry(*new_view)
                    .or_default()
                    .insert(signer, Arc::clone(msg));
                out.extend(self.maybe_new_view(*new_view));
                out
            }
            _ => Vec::new(),
        }
    }

    /// As leader of a later view, propose our own value and ignore any
    /// carried certificate.
    fn maybe_new_view(&mut self, view: u64) -> Vec<Outbound> {
        if self.cfg.quorum.leader_of(view) != self.id || self.new_view_sent.contains(&view) {
            return Vec::new();
        }
        let Some(vcs) = self.view_changes.get(&view) else {
            return Vec::new();
        };
        if vcs.len() < self.cfg.quorum.quorum() {
            return Vec::new();
        }
        let vcs: Vec<SignedMessage> = vcs.values().cloned().collect();
        self.new_view_sent.insert(view);
        let frame = self.frame;
        self.targets()
            .into_iter()
            .map(|(to, v)| Outbound {
                to,
                msg: self.sign(ProtocolMessage::NewView {
                    frame,
                    view,
                    view_changes: vcs.clone(),
                    digest: v.digest(),
                    value: v,
                }),
            })
            .collect()
    }

    /// A log claiming every frame so far decided our value, with no proof.
    fn bogus_snapshot(&self, to: ModuleId) -> Vec<Outbound> {
        let Some(v) = self.primary() else {
            return Vec::new();
        };
        let log = (0..self.frame)
            .map(|frame| LogEntry {
                frame,
                value: Some(v.clone()),
            })
            .collect();
        vec![Outbound {
            to: Destination::Module(to),
            msg: self.sign(ProtocolMessage::StateSnapshot(StateSnapshot {
                checkpoint: None,
                log,
            })),
        }]
    }

    pub fn fingerprint<H: std::hash::Hasher>(&self, h: &mut H) {
        use std::hash::Hash;
        self.frame.hash(h);
        self.voted_views.hash(h);
        self.new_view_sent.hash(h);
        for (v, m) in &self.view_changes {
            v.hash(h);
            for s in m.keys() {
                s.hash(h);
            }
        }
    }
}
