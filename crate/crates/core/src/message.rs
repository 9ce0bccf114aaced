//! Wire types exchanged between modules, replicas and the observer.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::auth::{AuthTag, KeyRegistry, ModuleId, Signed, Signer};
use crate::canonical::{digest, Canonical, CanonicalWriter, Digest};
use crate::space::DecisionValue;

/// Kind tags of the canonical layout.
pub mod kind {
    pub const PRE_PREPARE: u8 = 1;
    pub const PREPARE: u8 = 2;
    pub const COMMIT: u8 = 3;
    pub const VIEW_CHANGE: u8 = 4;
    pub const NEW_VIEW: u8 = 5;
    pub const REPLY: u8 = 6;
    pub const STATE_REQUEST: u8 = 7;
    pub const STATE_SNAPSHOT: u8 = 8;
    pub const CHECKPOINT_ATTEST: u8 = 9;
    pub const MODULE_OUTPUT: u8 = 10;
    pub const ANNOUNCE: u8 = 11;
}

/// One module's signed proposal for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleOutput {
    pub module_id: ModuleId,
    pub frame: u64,
    pub value: DecisionValue,
    pub confidence: f64,
    pub sig: AuthTag,
}

fn output_body(module_id: ModuleId, frame: u64, value: &DecisionValue, confidence: f64) -> Vec<u8> {
    let mut w = CanonicalWriter::new();
    w.u8(kind::MODULE_OUTPUT)
        .u32(module_id as u32)
        .u64(frame)
        .str(value.label())
        .f64(confidence);
    w.finish()
}

impl ModuleOutput {
    pub fn new(signer: &Signer, frame: u64, value: DecisionValue, confidence: f64) -> Self {
        let confidence = confidence.clamp(0.0, 1.0);
        let sig = signer.sign(&output_body(signer.id(), frame, &value, confidence));
        Self {
            module_id: signer.id(),
            frame,
            value,
            confidence,
            sig,
        }
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        output_body(self.module_id, self.frame, &self.value, self.confidence)
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        (0.0..=1.0).contains(&self.confidence)
            && registry.verify(&self.sig, self.module_id, &self.body_bytes())
    }

    pub fn value_digest(&self) -> Digest {
        self.value.digest()
    }
}

impl Canonical for ModuleOutput {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u8(kind::MODULE_OUTPUT)
            .u32(self.module_id as u32)
            .u64(self.frame)
            .str(self.value.label())
            .f64(self.confidence);
        self.sig.write_canonical(w);
    }
}

pub type SignedMessage = Arc<Signed<ProtocolMessage>>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LogEntry {
    pub frame: u64,
    pub value: Option<DecisionValue>,
}

impl Canonical for LogEntry {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u64(self.frame);
        match &self.value {
            Some(v) => w.u8(1).str(v.label()),
            None => w.u8(0),
        };
    }
}

/// Digest over a committed log prefix, as attested by checkpoints.
pub fn log_digest(entries: &[LogEntry]) -> Digest {
    let mut w = CanonicalWriter::new();
    w.u32(entries.len() as u32);
    for e in entries {
        e.write_canonical(&mut w);
    }
    digest(&w.finish())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertificateError {
    #[error("certificate carries {got} votes, quorum is {need}")]
    TooFewVotes { got: usize, need: usize },
    #[error("vote from module {0} has an invalid tag")]
    BadTag(ModuleId),
    #[error("module {0} voted twice")]
    DuplicateSigner(ModuleId),
    #[error("vote does not match the certified slot")]
    Mismatch,
}

/// Proof that a quorum prepared `value` in `view` for `frame`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrepareCertificate {
    pub frame: u64,
    pub view: u64,
    pub digest: Digest,
    pub value: DecisionValue,
    pub votes: Vec<SignedMessage>,
}

impl PrepareCertificate {
    pub fn validate(&self, registry: &KeyRegistry, quorum: usize) -> Result<(), CertificateError> {
        if self.value.digest() != self.digest {
            return Err(CertificateError::Mismatch);
        }
        validate_votes(&self.votes, registry, quorum, |m| {
            matches!(m, ProtocolMessage::Prepare { frame, view, digest }
                if *frame == self.frame && *view == self.view && *digest == self.digest)
        })
    }
}

impl Canonical for PrepareCertificate {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u64(self.frame).u64(self.view).digest(&self.digest);
        w.str(self.value.label());
        write_votes(w, &self.votes);
    }
}

/// A stable checkpoint: a quorum of matching attestations over a log prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Checkpoint {
    pub up_to_frame: u64,
    pub log_digest: Digest,
    pub votes: Vec<SignedMessage>,
}

impl Checkpoint {
    pub fn validate(&self, registry: &KeyRegistry, quorum: usize) -> Result<(), CertificateError> {
        validate_votes(&self.votes, registry, quorum, |m| {
            matches!(m, ProtocolMessage::CheckpointAttest { up_to_frame, log_digest }
                if *up_to_frame == self.up_to_frame && *log_digest == self.log_digest)
        })
    }
}

impl Canonical for Checkpoint {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u64(self.up_to_frame).digest(&self.log_digest);
        write_votes(w, &self.votes);
    }
}

fn validate_votes(
    votes: &[SignedMessage],
    registry: &KeyRegistry,
    quorum: usize,
    matches: impl Fn(&ProtocolMessage) -> bool,
) -> Result<(), CertificateError> {
    let mut signers = BTreeSet::new();
    for v in votes {
        if !matches(&v.body) {
            return Err(CertificateError::Mismatch);
        }
        if !v.verify(registry) {
            return Err(CertificateError::BadTag(v.signer()));
        }
        if !signers.insert(v.signer()) {
            return Err(CertificateError::DuplicateSigner(v.signer()));
        }
    }
    if signers.len() < quorum {
        return Err(CertificateError::TooFewVotes {
            got: signers.len(),
            need: quorum,
        });
    }
    Ok(())
}

fn write_votes(w: &mut CanonicalWriter, votes: &[SignedMessage]) {
    w.u32(votes.len() as u32);
    for v in votes {
        v.write_canonical(w);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateSnapshot {
    pub checkpoint: Option<Checkpoint>,
    pub log: Vec<LogEntry>,
}

impl Canonical for StateSnapshot {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        match &self.checkpoint {
            Some(c) => {
                w.u8(1);
                c.write_canonical(w);
            }
            None => {
                w.u8(0);
            }
        }
        w.u32(self.log.len() as u32);
        for e in &self.log {
            e.write_canonical(w);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProtocolMessage {
    PrePrepare {
        frame: u64,
        view: u64,
        digest: Digest,
        value: DecisionValue,
    },
    Prepare {
        frame: u64,
        view: u64,
        digest: Digest,
    },
    Commit {
        frame: u64,
        view: u64,
        digest: Digest,
    },
    ViewChange {
        frame: u64,
        new_view: u64,
        certificate: Option<PrepareCertificate>,
    },
    NewView {
        frame: u64,
        view: u64,
        view_changes: Vec<SignedMessage>,
        digest: Digest,
        value: DecisionValue,
    },
    Reply {
        frame: u64,
        view: u64,
        digest: Digest,
        value: DecisionValue,
    },
    StateRequest {
        from_frame: u64,
    },
    StateSnapshot(StateSnapshot),
    CheckpointAttest {
        up_to_frame: u64,
        log_digest: Digest,
    },
    /// Digest-only announcement used by the hash fast path.
    Announce {
        frame: u64,
        digest: Digest,
    },
}

impl ProtocolMessage {
    pub fn kind(&self) -> u8 {
        match self {
            ProtocolMessage::PrePrepare { .. } => kind::PRE_PREPARE,
            ProtocolMessage::Prepare { .. } => kind::PREPARE,
            ProtocolMessage::Commit { .. } => kind::COMMIT,
            ProtocolMessage::ViewChange { .. } => kind::VIEW_CHANGE,
            ProtocolMessage::NewView { .. } => kind::NEW_VIEW,
            ProtocolMessage::Reply { .. } => kind::REPLY,
            ProtocolMessage::StateRequest { .. } => kind::STATE_REQUEST,
            ProtocolMessage::StateSnapshot(_) => kind::STATE_SNAPSHOT,
            ProtocolMessage::CheckpointAttest { .. } => kind::CHECKPOINT_ATTEST,
            ProtocolMessage::Announce { .. } => kind::ANNOUNCE,
        }
    }

    /// The frame this message belongs to, for frame-scoped messages.
    pub fn frame(&self) -> Option<u64> {
        match self {
            ProtocolMessage::PrePrepare { frame, .. }
            | ProtocolMessage::Prepare { frame, .. }
            | ProtocolMessage::Commit { frame, .. }
            | ProtocolMessage::ViewChange { frame, .. }
            | ProtocolMessage::NewView { frame, .. }
            | ProtocolMessage::Reply { frame, .. }
            | ProtocolMessage::Announce { frame, .. } => Some(*frame),
            _ => None,
        }
    }
}

impl Canonical for ProtocolMessage {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u8(self.kind());
        match self {
            ProtocolMessage::PrePrepare {
                frame,
                view,
                digest,
                value,
            } => {
                w.u64(*frame).u64(*view).digest(digest).str(value.label());
            }
            ProtocolMessage::Prepare {
                frame,
                view,
                digest,
            }
            | ProtocolMessage::Commit {
                frame,
                view,
                digest,
            } => {
                w.u64(*frame).u64(*view).digest(digest);
            }
            ProtocolMessage::ViewChange {
                frame,
                new_view,
                certificate,
            } => {
                w.u64(*frame).u64(*new_view);
                match certificate {
                    Some(c) => {
                        w.u8(1);
                        c.write_canonical(w);
                    }
                    None => {
                        w.u8(0);
                    }
                }
            }
            ProtocolMessage::NewView {
                frame,
                view,
                view_changes,
                digest,
                value,
            } => {
                w.u64(*frame).u64(*view);
                write_votes(w, view_changes);
                w.digest(digest).str(value.label());
            }
            ProtocolMessage::Reply {
                frame,
                view,
                digest,
                value,
            } => {
                w.u64(*frame).u64(*view).digest(digest).str(value.label());
            }
            ProtocolMessage::StateRequest { from_frame } => {
                w.u64(*from_frame);
            }
            ProtocolMessage::StateSnapshot(s) => s.write_canonical(w),
            ProtocolMessage::CheckpointAttest {
                up_to_frame,
                log_digest,
            } => {
                w.u64(*up_to_frame).digest(log_digest);
            }
            ProtocolMessage::Announce { frame, digest } => {
                w.u64(*frame).digest(digest);
            }
        }
    }
}

/// Anything that travels through the simulated network.
#[derive(Debug, Clone)]
pub enum Payload {
    Protocol(SignedMessage),
    Output(Arc<ModuleOutput>),
}

impl Payload {
    pub fn kind(&self) -> u8 {
        match self {
            Payload::Protocol(m) => m.body.kind(),
            Payload::Output(_) => kind::MODULE_OUTPUT,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind() {
            kind::PRE_PREPARE => "PRE_PREPARE",
            kind::PREPARE => "PREPARE",
            kind::COMMIT => "COMMIT",
            kind::VIEW_CHANGE => "VIEW_CHANGE",
            kind::NEW_VIEW => "NEW_VIEW",
            kind::REPLY => "REPLY",
            kind::STATE_REQUEST => "STATE_REQUEST",
            kind::STATE_SNAPSHOT => "STATE_SNAPSHOT",
            kind::CHECKPOINT_ATTEST => "CHECKPOINT_ATTEST",
            kind::MODULE_OUTPUT => "OUTPUT",
            kind::ANNOUNCE => "ANNOUNCE",
            _ => unreachable!("unknown kind tag"),
        }
    }

    pub fn signer(&self) -> ModuleId {
        match self {
            Payload::Protocol(m) => m.signer(),
            Payload::Output(o) => o.module_id,
        }
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        match self {
            Payload::Protocol(m) => m.verify(registry),
            Payload::Output(o) => o.verify(registry),
        }
    }
}

impl Canonical for Payload {
    fn write_canonical(&self, w: &mut CanonicalWriter) {
        match self {
            Payload::Protocol(m) => m.write_canonical(w),
            Payload::Output(o) => o.write_canonical(w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::DecisionSpace;

    fn setup() -> (Arc<KeyRegistry>, DecisionSpace) {
        (
            Arc::new(KeyRegistry::generate(4, 7)),
            DecisionSpace::new(&["continue", "brake"], "brake").unwrap(),
        )
    }

    #[test]
    fn module_output_signature_covers_every_field() {
        let (reg, space) = setup();
        let s = reg.signer(1).unwrap();
        let out = ModuleOutput::new(&s, 3, space.value("continue").unwrap(), 0.9);
        assert!(out.verify(&reg));

        let mut v = out.clone();
        v.value = space.value("brake").unwrap();
        assert!(!v.verify(&reg));
        let mut c = out.clone();
        c.confidence = 0.5;
        assert!(!c.verify(&reg));
        let mut fr = out.clone();
        fr.frame = 4;
        assert!(!fr.verify(&reg));
        let mut id = out;
        id.module_id = 2;
        assert!(!id.verify(&reg));
    }

    #[test]
    fn certificate_needs_quorum_of_distinct_signers() {
        let (reg, space) = setup();
        let value = space.value("continue").unwrap();
        let d = value.digest();
        let vote = |i| {
            Arc::new(Signed::new(
                ProtocolMessage::Prepare {
                    frame: 0,
                    view: 0,
                    digest: d,
                },
                &reg.signer(i).unwrap(),
            ))
        };
        let mut cert = PrepareCertificate {
            frame: 0,
            view: 0,
            digest: d,
            value,
            votes: vec![vote(0), vote(1)],
        };
        assert_eq!(
            cert.validate(&reg, 3),
            Err(CertificateError::TooFewVotes { got: 2, need: 3 })
        );
        cert.votes.push(vote(1));
        assert_eq!(cert.validate(&reg, 3), Err(CertificateError::DuplicateSigner(1)));
        cert.votes.pop();
        cert.votes.push(vote(3));
        assert_eq!(cert.validate(&reg, 3), Ok(()));
        cert.value = space.value("brake").unwrap();
        assert_eq!(cert.validate(&reg, 3), Err(CertificateError::Mismatch));
    }

    #[test]
    fn kind_tags_lead_the_layout() {
        let (_, space) = setup();
        let v = space.value("brake").unwrap();
        let msgs = [
            ProtocolMessage::PrePrepare {
                frame: 0,
                view: 0,
                digest: v.digest(),
                value: v.clone(),
            },
            ProtocolMessage::Prepare {
                frame: 0,
                view: 0,
                digest: v.digest(),
            },
            ProtocolMessage::StateRequest { from_frame: 0 },
        ];
        for m in msgs {
            assert_eq!(m.canonical_bytes()[0], m.kind());
        }
    }
}
