//! PBFT-style agreement on one decision per frame.
//!
//! The sequence number of an instance is the frame index. The first view of
//! frame `t` is view `t`, so view-0 leadership rotates across frames; each
//! view change within a frame advances the view by one.

mod adversary;
mod observer;
mod replica;

pub use adversary::Adversary;
pub use observer::{Observer, ReplyCollector};
pub use replica::{Decision, DecisionSource, Replica, SnapshotError};

use crate::auth::ModuleId;
use crate::harness::Production;
use crate::message::SignedMessage;
use crate::quorum::QuorumConfig;
use crate::simnet::Destination;
use crate::space::DecisionValue;

pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 5;
pub const DEFAULT_RETRANSMIT_INTERVAL: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct View(pub u64);

impl View {
    pub fn leader(&self, cfg: &QuorumConfig) -> ModuleId {
        cfg.leader_of(self.0)
    }

    pub fn next(&self) -> View {
        View(self.0 + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Idle,
    PrePrepared,
    Prepared,
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaConfig {
    pub quorum: QuorumConfig,
    pub timeout_rounds: u64,
    pub checkpoint_interval: u64,
    /// Start a view change as soon as leader equivocation is proven instead
    /// of waiting for the timeout.
    pub equivocation_fast_path: bool,
    /// Resend the current protocol messages every this many rounds; 0 disables.
    pub retransmit_interval: u64,
}

impl ReplicaConfig {
    pub fn new(quorum: QuorumConfig, timeout_rounds: u64) -> Self {
        Self {
            quorum,
            timeout_rounds,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            equivocation_fast_path: true,
            retransmit_interval: DEFAULT_RETRANSMIT_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Outbound {
    pub to: Destination,
    pub msg: SignedMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewChangeReason {
    Timeout,
    EquivocationEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Evidence {
    InvalidTag { claimed: ModuleId },
    /// Two leader-signed proposals for one `(frame, view)` with different digests.
    LeaderEquivocation {
        leader: ModuleId,
        frame: u64,
        view: u64,
        first: SignedMessage,
        second: SignedMessage,
    },
    ConflictingVote { signer: ModuleId, frame: u64, view: u64, kind: u8 },
    NotLeader { signer: ModuleId, view: u64 },
    InvalidNewView { signer: ModuleId, view: u64 },
    InvalidCertificate { signer: ModuleId },
    ConflictingReply { signer: ModuleId, frame: u64 },
    Malformed { signer: ModuleId },
}

impl Evidence {
    pub fn culprit(&self) -> ModuleId {
        match self {
            Evidence::InvalidTag { claimed } => *claimed,
            Evidence::LeaderEquivocation { leader, .. } => *leader,
            Evidence::ConflictingVote { signer, .. }
            | Evidence::NotLeader { signer, .. }
            | Evidence::InvalidNewView { signer, .. }
            | Evidence::InvalidCertificate { signer }
            | Evidence::ConflictingReply { signer, .. }
            | Evidence::Malformed { signer } => *signer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolViolation {
    #[error("replica {replica} is not the leader of view {view}")]
    NotLeader { replica: ModuleId, view: u64 },
    #[error("instance for frame {0} already has a proposal")]
    NotIdle(u64),
    #[error("no instance open for frame {0}")]
    NoInstance(u64),
}

/// Exact-match endorsement: a replica only backs a proposal equal to its own output.
pub fn validate_proposal(own_output: &DecisionValue, proposed: &DecisionValue) -> bool {
    own_output == proposed
}

/// A participant in the replica protocol: either protocol-following or adversarial.
#[derive(Debug, Clone)]
pub enum Actor {
    Replica(Replica),
    Adversary(Adversary),
}

impl Actor {
    pub fn id(&self) -> ModuleId {
        match self {
            Actor::Replica(r) => r.id(),
            Actor::Adversary(a) => a.id(),
        }
    }

    pub fn begin_frame(&mut self, frame: u64, production: &Production, round: u64) -> Vec<Outbound> {
        match self {
            Actor::Replica(r) => r.begin_frame(frame, production.primary().map(|o| o.value.clone()), round),
            Actor::Adversary(a) => a.begin_frame(frame, production, round),
        }
    }

    pub fn handle_message(&mut self, msg: &SignedMessage, round: u64) -> Vec<Outbound> {
        match self {
            Actor::Replica(r) => r.handle_message(msg, round),
            Actor::Adversary(a) => a.handle_message(msg, round),
        }
    }

    pub fn tick(&mut self, round: u64) -> Vec<Outbound> {
        match self {
            Actor::Replica(r) => r.tick(round),
            Actor::Adversary(_) => Vec::new(),
        }
    }

    pub fn as_replica(&self) -> Option<&Replica> {
        match self {
            Actor::Replica(r) => Some(r),
            Actor::Adversary(_) => None,
        }
    }

    pub fn as_replica_mut(&mut self) -> Option<&mut Replica> {
        match self {
            Actor::Replica(r) => Some(r),
            Actor::Adversary(_) => None,
        }
    }
}
