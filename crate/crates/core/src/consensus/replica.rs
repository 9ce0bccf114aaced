//! The protocol-following replica.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::auth::{KeyRegistry, ModuleId, Signed, Signer};
use crate::canonical::{Canonical, Digest};
use crate::message::{
    kind, log_digest, CertificateError, Checkpoint, LogEntry, ModuleOutput, PrepareCertificate,
    ProtocolMessage, SignedMessage, StateSnapshot,
};
use crate::simnet::{timeout_check, Destination, TimeoutStatus};
use crate::space::DecisionValue;

use super::observer::ReplyCollector;
use super::{
    validate_proposal, Evidence, Outbound, Phase, ProtocolViolation, ReplicaConfig,
    ViewChangeReason,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionSource {
    /// Collected a quorum of matching commits.
    Quorum,
    /// Learned from `f + 1` matching replies of peers that committed.
    Replies,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decision {
    pub value: DecisionValue,
    pub digest: Digest,
    pub view: u64,
    pub round: u64,
    pub source: DecisionSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("checkpoint rejected: {0}")]
    Certificate(#[from] CertificateError),
    #[error("checkpoint digest does not match the snapshot log")]
    DigestMismatch,
    #[error("snapshot log is not a contiguous prefix starting at frame 0")]
    Malformed,
}

/// Checks a snapshot's checkpoint proof against its log prefix.
pub fn validate_snapshot(
    snapshot: &StateSnapshot,
    registry: &KeyRegistry,
    quorum: usize,
) -> Result<(), SnapshotError> {
    if snapshot
        .log
        .iter()
        .enumerate()
        .any(|(i, e)| e.frame != i as u64)
    {
        return Err(SnapshotError::Malformed);
    }
    if let Some(cp) = &snapshot.checkpoint {
        cp.validate(registry, quorum)?;
        let end = cp.up_to_frame as usize + 1;
        if snapshot.log.len() < end || log_digest(&snapshot.log[..end]) != cp.log_digest {
            return Err(SnapshotError::DigestMismatch);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Proposal {
    digest: Digest,
    value: DecisionValue,
    /// Carried over by a prepare certificate, so it binds regardless of the
    /// replica's own output.
    forced: bool,
    msg: SignedMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Instance {
    frame: u64,
    base_view: u64,
    view: u64,
    in_view_change: bool,
    frame_start: u64,
    start_round: u64,
    phase: Phase,
    own: Option<DecisionValue>,
    proposals: BTreeMap<u64, Proposal>,
    accepted: BTreeSet<u64>,
    prepares: BTreeMap<u64, BTreeMap<ModuleId, SignedMessage>>,
    commits: BTreeMap<u64, BTreeMap<ModuleId, Digest>>,
    commit_sent: BTreeSet<u64>,
    prepared: Option<PrepareCertificate>,
    view_changes: BTreeMap<u64, BTreeMap<ModuleId, SignedMessage>>,
    new_view_sent: BTreeSet<u64>,
    replies: ReplyCollector,
    decided: Option<Decision>,
    resend: BTreeMap<u8, Outbound>,
}

impl Instance {
    fn new(frame: u64, own: Option<DecisionValue>, round: u64, reply_threshold: usize) -> Self {
        Self {
            frame,
            base_view: frame,
            view: frame,
            in_view_change: false,
            frame_start: round,
            start_round: round,
            phase: Phase::Idle,
            own,
            proposals: BTreeMap::new(),
            accepted: BTreeSet::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            commit_sent: BTreeSet::new(),
            prepared: None,
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            replies: ReplyCollector::new(reply_threshold, frame),
            decided: None,
            resend: BTreeMap::new(),
        }
    }

    fn forget_view_messages(&mut self) {
        for k in [kind::PRE_PREPARE, kind::PREPARE, kind::COMMIT, kind::NEW_VIEW] {
            self.resend.remove(&k);
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Rejoin {
    snapshots: BTreeMap<ModuleId, StateSnapshot>,
    rejected: BTreeSet<ModuleId>,
}

#[derive(Debug, Clone)]
pub struct Replica {
    id: ModuleId,
    cfg: ReplicaConfig,
    signer: Signer,
    excluded: BTreeSet<ModuleId>,
    inst: Option<Instance>,
    log: BTreeMap<u64, DecisionValue>,
    attests: BTreeMap<u64, BTreeMap<ModuleId, SignedMessage>>,
    own_attest: Option<Outbound>,
    stable: Option<Checkpoint>,
    evidence: Vec<Evidence>,
    rejoin: Option<Rejoin>,
    rejoined: Option<Option<u64>>,
}

impl Replica {
    pub fn new(cfg: ReplicaConfig, signer: Signer) -> Self {
        Self {
            id: signer.id(),
            cfg,
            signer,
            excluded: BTreeSet::new(),
            inst: None,
            log: BTreeMap::new(),
            attests: BTreeMap::new(),
            own_attest: None,
            stable: None,
            evidence: Vec::new(),
            rejoin: None,
            rejoined: None,
        }
    }

    pub fn id(&self) -> ModuleId {
        self.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    fn registry(&self) -> &Arc<KeyRegistry> {
        self.signer.registry()
    }

    fn quorum(&self) -> usize {
        self.cfg.quorum.quorum()
    }

    fn leader_of(&self, view: u64) -> ModuleId {
        self.cfg.quorum.leader_of(view)
    }

    fn sign(&self, body: ProtocolMessage) -> SignedMessage {
        Arc::new(Signed::new(body, &self.signer))
    }

    pub fn set_excluded(&mut self, excluded: BTreeSet<ModuleId>) {
        self.excluded = excluded;
    }

    pub fn frame(&self) -> Option<u64> {
        self.inst.as_ref().map(|i| i.frame)
    }

    pub fn view(&self) -> Option<u64> {
        self.inst.as_ref().map(|i| i.view)
    }

    pub fn in_view_change(&self) -> bool {
        self.inst.as_ref().is_some_and(|i| i.in_view_change)
    }

    /// View changes this frame's instance has gone through.
    pub fn view_changes(&self) -> u64 {
        self.inst.as_ref().map_or(0, |i| i.view - i.base_view)
    }

    pub fn phase(&self) -> Phase {
        self.inst.as_ref().map_or(Phase::Idle, |i| i.phase)
    }

    pub fn decision(&self) -> Option<&Decision> {
        self.inst.as_ref().and_then(|i| i.decided.as_ref())
    }

    pub fn prepared_certificate(&self) -> Option<&PrepareCertificate> {
        self.inst.as_ref().and_then(|i| i.prepared.as_ref())
    }

    /// Signers whose prepare for `(view, digest)` this replica has counted.
    pub fn prepare_signers(&self, view: u64, digest: &Digest) -> BTreeSet<ModuleId> {
        self.inst
            .as_ref()
            .and_then(|i| i.prepares.get(&view))
            .map(|votes| {
                votes
                    .iter()
                    .filter(|(_, m)| matches!(&m.body, ProtocolMessage::Prepare { digest: d, .. } if d == digest))
                    .map(|(s, _)| *s)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Signers of prepares this replica sent or counted for `frame`, across views.
    pub fn own_prepare_sent(&self, view: u64) -> bool {
        self.inst.as_ref().is_some_and(|i| i.accepted.contains(&view))
    }

    pub fn log(&self) -> &BTreeMap<u64, DecisionValue> {
        &self.log
    }

    pub fn last_committed_frame(&self) -> Option<u64> {
        self.log.keys().next_back().copied()
    }

    pub fn stable_checkpoint(&self) -> Option<&Checkpoint> {
        self.stable.as_ref()
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    /// Opens the instance for `frame`; the view-0 leader proposes right away.
    pub fn begin_frame(&mut self, frame: u64, own: Option<DecisionValue>, round: u64) -> Vec<Outbound> {
        let threshold = self.cfg.quorum.client_match();
        self.inst = Some(Instance::new(frame, own.clone(), round, threshold));
        match own {
            Some(value) if self.leader_of(frame) == self.id => self.send_pre_prepare(value, round),
            _ => Vec::new(),
        }
    }

    /// Leader-only: broadcast a pre-prepare for the replica's own output.
    pub fn propose(
        &mut self,
        frame: u64,
        own_output: &ModuleOutput,
        round: u64,
    ) -> Result<Vec<Outbound>, ProtocolViolation> {
        let inst = self
            .inst
            .as_mut()
            .filter(|i| i.frame == frame)
            .ok_or(ProtocolViolation::NoInstance(frame))?;
        let view = inst.view;
        if self.cfg.quorum.leader_of(view) != self.id || inst.in_view_change {
            return Err(ProtocolViolation::NotLeader {
                replica: self.id,
                view,
            });
        }
        if inst.proposals.contains_key(&view) {
            return Err(ProtocolViolation::NotIdle(frame));
        }
        inst.own = Some(own_output.value.clone());
        Ok(self.send_pre_prepare(own_output.value.clone(), round))
    }

    fn send_pre_prepare(&mut self, value: DecisionValue, round: u64) -> Vec<Outbound> {
        let Some(mut inst) = self.inst.take() else {
            return Vec::new();
        };
        let digest = value.digest();
        let msg = self.sign(ProtocolMessage::PrePrepare {
            frame: inst.frame,
            view: inst.view,
            digest,
            value: value.clone(),
        });
        inst.proposals.insert(
            inst.view,
            Proposal {
                digest,
                value,
                forced: false,
                msg: Arc::clone(&msg),
            },
        );
        let pp = Outbound {
            to: Destination::Peers,
            msg,
        };
        inst.resend.insert(kind::PRE_PREPARE, pp.clone());
        let mut out = vec![pp];
        let view = inst.view;
        out.extend(self.accept(&mut inst, view, round));
        out.extend(self.progress(&mut inst, round));
        self.inst = Some(inst);
        out
    }

    /// Sends our prepare for the proposal of `view` if it passes validation.
    fn accept(&mut self, inst: &mut Instance, view: u64, _round: u64) -> Vec<Outbound> {
        if inst.accepted.contains(&view) {
            return Vec::new();
        }
        let Some(p) = inst.proposals.get(&view) else {
            return Vec::new();
        };
        let endorsed = p.forced
            || inst
                .own
                .as_ref()
                .is_some_and(|own| validate_proposal(own, &p.value));
        if !endorsed {
            // Dissent is silence: no prepare, the timeout does the rest.
            return Vec::new();
        }
        let digest = p.digest;
        inst.accepted.insert(view);
        if inst.phase == Phase::Idle {
            inst.phase = Phase::PrePrepared;
        }
        let msg = self.sign(ProtocolMessage::Prepare {
            frame: inst.frame,
            view,
            digest,
        });
        inst.prepares
            .entry(view)
            .or_default()
            .insert(self.id, Arc::clone(&msg));
        let ob = Outbound {
            to: Destination::Peers,
            msg,
        };
        inst.resend.insert(kind::PREPARE, ob.clone());
        vec![ob]
    }

    fn progress(&mut self, inst: &mut Instance, round: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let q = self.quorum();
        let view = inst.view;

        if !inst.in_view_change
            && inst.accepted.contains(&view)
            && !inst.commit_sent.contains(&view)
        {
            let p = &inst.proposals[&view];
            let votes: Vec<SignedMessage> = inst
                .prepares
                .get(&view)
                .map(|m| {
                    m.values()
                        .filter(|v| matches!(&v.body, ProtocolMessage::Prepare { digest, .. } if *digest == p.digest))
                        .cloned()
                        .collect()
                })
                .unwrap_or_default();
            if votes.len() >= q {
                let digest = p.digest;
                inst.prepared = Some(PrepareCertificate {
                    frame: inst.frame,
                    view,
                    digest,
                    value: p.value.clone(),
                    votes,
                });
                if inst.phase != Phase::Committed {
                    inst.phase = Phase::Prepared;
                }
                inst.commit_sent.insert(view);
                inst.commits.entry(view).or_default().insert(self.id, digest);
                let msg = self.sign(ProtocolMessage::Commit {
                    frame: inst.frame,
                    view,
                    digest,
                });
                let ob = Outbound {
                    to: Destination::Peers,
                    msg,
                };
                inst.resend.insert(kind::COMMIT, ob.clone());
                out.push(ob);
            }
        }

        if inst.decided.is_none() {
            let mut found = None;
            for (w, votes) in &inst.commits {
                let mut per_digest: BTreeMap<Digest, usize> = BTreeMap::new();
                for d in votes.values() {
                    *per_digest.entry(*d).or_default() += 1;
                }
                for (d, count) in per_digest {
                    if count < q {
                        continue;
                    }
                    if let Some(p) = inst.proposals.get(w).filter(|p| p.digest == d) {
                        found = Some((p.value.clone(), d, *w, DecisionSource::Quorum));
                    }
                }
                if found.is_some() {
                    break;
                }
            }
            if found.is_none() {
                if let Some(v) = inst.replies.finalized() {
                    found = Some((v.clone(), v.digest(), inst.view, DecisionSource::Replies));
                }
            }
            if let Some((value, digest, view, source)) = found {
                out.extend(self.decide(inst, value, digest, view, source, round));
            }
        }
        out
    }

    fn decide(
        &mut self,
        inst: &mut Instance,
        value: DecisionValue,
        digest: Digest,
        view: u64,
        source: DecisionSource,
        round: u64,
    ) -> Vec<Outbound> {
        inst.decided = Some(Decision {
            value: value.clone(),
            digest,
            view,
            round,
            source,
        });
        inst.phase = Phase::Committed;
        self.log.insert(inst.frame, value.clone());
        let reply = Outbound {
            to: Destination::Broadcast,
            msg: self.sign(ProtocolMessage::Reply {
                frame: inst.frame,
                view,
                digest,
                value,
            }),
        };
        inst.resend.insert(kind::REPLY, reply.clone());
        let mut out = vec![reply];
        let interval = self.cfg.checkpoint_interval;
        if interval > 0 && (inst.frame + 1).is_multiple_of(interval) {
            out.extend(self.make_checkpoint(inst.frame));
        }
        out
    }

    pub fn handle_message(&mut self, msg: &SignedMessage, round: u64) -> Vec<Outbound> {
        let signer = msg.signer();
        if self.excluded.contains(&signer) {
            return Vec::new();
        }
        if !msg.verify(self.registry()) {
            self.evidence.push(Evidence::InvalidTag { claimed: signer });
            return Vec::new();
        }
        match &msg.body {
            ProtocolMessage::StateRequest { .. } => return self.answer_state_request(signer),
            ProtocolMessage::StateSnapshot(s) => {
                self.on_snapshot(signer, s);
                return Vec::new();
            }
            ProtocolMessage::CheckpointAttest {
                up_to_frame,
                log_digest,
            } => {
                self.on_attest(signer, msg, *up_to_frame, *log_digest);
                return Vec::new();
            }
            ProtocolMessage::Announce { .. } => return Vec::new(),
            _ => {}
        }
        let Some(mut inst) = self.inst.take() else {
            return Vec::new();
        };
        let out = if msg.body.frame() == Some(inst.frame) {
            self.on_frame_message(&mut inst, signer, msg, round)
        } else {
            Vec::new()
        };
        self.inst = Some(inst);
        out
    }

    fn on_frame_message(
        &mut self,
        inst: &mut Instance,
        signer: ModuleId,
        msg: &SignedMessage,
        round: u64,
    ) -> Vec<Outbound> {
        let mut out = Vec::new();
        match &msg.body {
            ProtocolMessage::PrePrepare {
                view,
                digest,
                value,
                ..
            } => {
                let view = *view;
                if view < inst.view || view != inst.base_view {
                    // Proposals for later views only arrive inside a new-view.
                    return out;
                }
                if signer != self.leader_of(view) {
                    self.evidence.push(Evidence::NotLeader { signer, view });
                    return out;
                }
                if value.digest() != *digest {
                    self.evidence.push(Evidence::Malformed { signer });
                    return out;
                }
                if let Some(p) = inst.proposals.get(&view) {
                    if p.digest != *digest {
                        self.evidence.push(Evidence::LeaderEquivocation {
                            leader: signer,
                            frame: inst.frame,
                            view,
                            first: Arc::clone(&p.msg),
                            second: Arc::clone(msg),
                        });
                        if self.cfg.equivocation_fast_path
                            && inst.decided.is_none()
                            && !inst.in_view_change
                            && view == inst.view
                        {
                            out.extend(self.move_to_view(inst, view + 1, round));
                        }
                    }
                    return out;
                }
                inst.proposals.insert(
                    view,
                    Proposal {
                        digest: *digest,
                        value: value.clone(),
                        forced: false,
                        msg: Arc::clone(msg),
                    },
                );
                if view == inst.view && !inst.in_view_change {
                    out.extend(self.accept(inst, view, round));
                }
            }
            ProtocolMessage::Prepare { view, digest, .. } => {
                if *view < inst.view {
                    return out;
                }
                let votes = inst.prepares.entry(*view).or_default();
                match votes.get(&signer) {
                    Some(prev) => {
                        if !matches!(&prev.body, ProtocolMessage::Prepare { digest: d, .. } if d == digest) {
                            self.evidence.push(Evidence::ConflictingVote {
                                signer,
                                frame: inst.frame,
                                view: *view,
                                kind: kind::PREPARE,
                            });
                        }
                        return out;
                    }
                    None => {
                        votes.insert(signer, Arc::clone(msg));
                    }
                }
            }
            ProtocolMessage::Commit { view, digest, .. } => {
                // Commits from earlier views still count: a commit quorum in
                // any view fixes the value.
                let votes = inst.commits.entry(*view).or_default();
                match votes.get(&signer) {
                    Some(prev) => {
                        if prev != digest {
                            self.evidence.push(Evidence::ConflictingVote {
                                signer,
                                frame: inst.frame,
                                view: *view,
                                kind: kind::COMMIT,
                            });
                        }
                        return out;
                    }
                    None => {
                        votes.insert(signer, *digest);
                    }
                }
            }
            ProtocolMessage::Reply { .. } => {
                if let Some(e) = inst.replies.add(signer, &msg.body) {
                    self.evidence.push(e);
                }
            }
            ProtocolMessage::ViewChange {
                new_view,
                certificate,
                ..
            } => {
                out.extend(self.on_view_change(inst, signer, msg, *new_view, certificate.as_ref(), round));
            }
            ProtocolMessage::NewView { view, .. } => {
                out.extend(self.on_new_view(inst, signer, msg, *view, round));
            }
            _ => {}
        }
        out.extend(self.progress(inst, round));
        out
    }

    fn certificate_ok(&self, frame: u64, before_view: u64, cert: &PrepareCertificate) -> bool {
        cert.frame == frame
            && cert.view < before_view
            && cert.validate(self.registry(), self.quorum()).is_ok()
    }

    fn on_view_change(
        &mut self,
        inst: &mut Instance,
        signer: ModuleId,
        msg: &SignedMessage,
        new_view: u64,
        cert: Option<&PrepareCertificate>,
        round: u64,
    ) -> Vec<Outbound> {
        let mut out = Vec::new();
        if new_view < inst.view || new_view <= inst.base_view {
            return out;
        }
        if let Some(c) = cert {
            if !self.certificate_ok(inst.frame, new_view, c) {
                self.evidence.push(Evidence::InvalidCertificate { signer });
                return out;
            }
        }
        inst.view_changes
            .entry(new_view)
            .or_default()
            .entry(signer)
            .or_insert_with(|| Arc::clone(msg));

        // Join a view change once f + 1 peers ask for views beyond ours.
        let mut highest: BTreeMap<ModuleId, u64> = BTreeMap::new();
        for (w, senders) in inst.view_changes.range(inst.view + 1..) {
            for s in senders.keys() {
                if *s != self.id {
                    highest.insert(*s, *w);
                }
            }
        }
        if highest.len() > self.cfg.quorum.f() {
            let target = *highest.values().min().expect("non-empty");
            out.extend(self.move_to_view(inst, target, round));
        }
        out.extend(self.maybe_form_new_view(inst, round));
        out
    }

    fn move_to_view(&mut self, inst: &mut Instance, target: u64, round: u64) -> Vec<Outbound> {
        if target <= inst.view && inst.in_view_change {
            return Vec::new();
        }
        if target <= inst.view && !inst.in_view_change && target != inst.view + 1 {
            return Vec::new();
        }
        inst.view = target;
        inst.in_view_change = true;
        inst.start_round = round;
        if inst.phase == Phase::PrePrepared {
            inst.phase = Phase::Idle;
        }
        let msg = self.sign(ProtocolMessage::ViewChange {
            frame: inst.frame,
            new_view: target,
            certificate: inst.prepared.clone(),
        });
        inst.view_changes
            .entry(target)
            .or_default()
            .insert(self.id, Arc::clone(&msg));
        inst.forget_view_messages();
        let ob = Outbound {
            to: Destination::Peers,
            msg,
        };
        inst.resend.insert(kind::VIEW_CHANGE, ob.clone());
        let mut out = vec![ob];
        out.extend(self.maybe_form_new_view(inst, round));
        out
    }

    /// Starts a view change for this frame's instance, unless already decided.
    pub fn trigger_view_change(&mut self, reason: ViewChangeReason, round: u64) -> Vec<Outbound> {
        let _ = reason;
        let Some(mut inst) = self.inst.take() else {
            return Vec::new();
        };
        let out = if inst.decided.is_none() {
            let target = inst.view + 1;
            self.move_to_view(&mut inst, target, round)
        } else {
            Vec::new()
        };
        self.inst = Some(inst);
        out
    }

    fn maybe_form_new_view(&mut self, inst: &mut Instance, round: u64) -> Vec<Outbound> {
        let view = inst.view;
        if !inst.in_view_change
            || self.leader_of(view) != self.id
            || inst.new_view_sent.contains(&view)
        {
            return Vec::new();
        }
        let Some(vcs) = inst.view_changes.get(&view) else {
            return Vec::new();
        };
        if vcs.len() < self.quorum() {
            return Vec::new();
        }
        let vcs: Vec<SignedMessage> = vcs.values().cloned().collect();
        let carried = highest_certificate(&vcs);
        let (value, forced) = match carried {
            Some(c) => (c.value.clone(), true),
            None => match &inst.own {
                Some(v) => (v.clone(), false),
                None => return Vec::new(),
            },
        };
        self.form_new_view(inst, vcs, value, forced, round)
    }

    fn form_new_view(
        &mut self,
        inst: &mut Instance,
        view_changes: Vec<SignedMessage>,
        value: DecisionValue,
        forced: bool,
        round: u64,
    ) -> Vec<Outbound> {
        let view = inst.view;
        let digest = value.digest();
        let msg = self.sign(ProtocolMessage::NewView {
            frame: inst.frame,
            view,
            view_changes,
            digest,
            value: value.clone(),
        });
        inst.new_view_sent.insert(view);
        inst.in_view_change = false;
        inst.resend.remove(&kind::VIEW_CHANGE);
        inst.proposals.insert(
            view,
            Proposal {
                digest,
                value,
                forced,
                msg: Arc::clone(&msg),
            },
        );
        let ob = Outbound {
            to: Destination::Peers,
            msg,
        };
        inst.resend.insert(kind::NEW_VIEW, ob.clone());
        let mut out = vec![ob];
        out.extend(self.accept(inst, view, round));
        out
    }

    fn on_new_view(
        &mut self,
        inst: &mut Instance,
        signer: ModuleId,
        msg: &SignedMessage,
        view: u64,
        round: u64,
    ) -> Vec<Outbound> {
        let ProtocolMessage::NewView {
            view_changes,
            digest,
            value,
            ..
        } = &msg.body
        else {
            return Vec::new();
        };
        if view < inst.view || view <= inst.base_view {
            return Vec::new();
        }
        if view == inst.view && !inst.in_view_change {
            if let Some(p) = inst.proposals.get(&view) {
                if p.digest != *digest {
                    self.evidence.push(Evidence::LeaderEquivocation {
                        leader: signer,
                        frame: inst.frame,
                        view,
                        first: Arc::clone(&p.msg),
                        second: Arc::clone(msg),
                    });
                }
            }
            return Vec::new();
        }
        if signer != self.leader_of(view) {
            self.evidence.push(Evidence::NotLeader { signer, view });
            return Vec::new();
        }
        let Some(forced) = self.check_new_view(inst.frame, view, view_changes, digest, value) else {
            self.evidence.push(Evidence::InvalidNewView { signer, view });
            return Vec::new();
        };
        // The view's timer runs from the moment this replica asked for it, so
        // a slow view change does not push later timeouts back.
        if !(inst.in_view_change && inst.view == view) {
            inst.start_round = round;
        }
        inst.view = view;
        inst.in_view_change = false;
        inst.forget_view_messages();
        inst.resend.remove(&kind::VIEW_CHANGE);
        inst.proposals.insert(
            view,
            Proposal {
                digest: *digest,
                value: value.clone(),
                forced,
                msg: Arc::clone(msg),
            },
        );
        self.accept(inst, view, round)
    }

    /// Validates a new-view against the view changes it carries. Returns
    /// whether the proposal is pinned by a carried certificate.
    fn check_new_view(
        &self,
        frame: u64,
        view: u64,
        view_changes: &[SignedMessage],
        digest: &Digest,
        value: &DecisionValue,
    ) -> Option<bool> {
        if value.digest() != *digest {
            return None;
        }
        let mut signers = BTreeSet::new();
        for vc in view_changes {
            let ProtocolMessage::ViewChange {
                frame: f,
                new_view,
                certificate,
            } = &vc.body
            else {
                return None;
            };
            if *f != frame || *new_view != view || !vc.verify(self.registry()) {
                return None;
            }
            if let Some(c) = certificate {
                if !self.certificate_ok(frame, view, c) {
                    return None;
                }
            }
            signers.insert(vc.signer());
        }
        if signers.len() < self.quorum() || signers.len() != view_changes.len() {
            return None;
        }
        match highest_certificate(view_changes) {
            Some(c) if c.digest != *digest => None,
            Some(_) => Some(true),
            None => Some(false),
        }
    }

    /// Timeouts and retransmission. Call once per round after deliveries.
    pub fn tick(&mut self, round: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let interval = self.cfg.retransmit_interval;
        if self.rejoin.is_some() && interval > 0 && round.is_multiple_of(interval) {
            out.push(self.state_request());
        }
        let Some(mut inst) = self.inst.take() else {
            return out;
        };
        let fired = inst.decided.is_none()
            && timeout_check(inst.start_round, false, round, self.cfg.timeout_rounds)
                == TimeoutStatus::Fired;
        if fired {
            let target = inst.view + 1;
            out.extend(self.move_to_view(&mut inst, target, round));
        }
        if !fired
            && interval > 0
            && round > inst.frame_start
            && (round - inst.frame_start).is_multiple_of(interval)
        {
            out.extend(inst.resend.values().cloned());
            out.extend(self.own_attest.iter().cloned());
        }
        self.inst = Some(inst);
        out
    }

    fn log_entries(&self, up_to: u64) -> Vec<LogEntry> {
        (0..=up_to)
            .map(|frame| LogEntry {
                frame,
                value: self.log.get(&frame).cloned(),
            })
            .collect()
    }

    /// Attests to the committed log prefix up to `up_to_frame`.
    pub fn make_checkpoint(&mut self, up_to_frame: u64) -> Option<Outbound> {
        let entries = self.log_entries(up_to_frame);
        let log_digest = log_digest(&entries);
        let msg = self.sign(ProtocolMessage::CheckpointAttest {
            up_to_frame,
            log_digest,
        });
        self.on_attest(self.id, &msg, up_to_frame, log_digest);
        let ob = Outbound {
            to: Destination::Peers,
            msg,
        };
        let already_stable = self
            .stable
            .as_ref()
            .is_some_and(|s| s.up_to_frame >= up_to_frame);
        self.own_attest = (!already_stable).then(|| ob.clone());
        Some(ob)
    }

    fn on_attest(&mut self, signer: ModuleId, msg: &SignedMessage, up_to: u64, digest: Digest) {
        if self.stable.as_ref().is_some_and(|s| s.up_to_frame >= up_to) {
            return;
        }
        let votes = self.attests.entry(up_to).or_default();
        if let Some(prev) = votes.get(&signer) {
            if !matches!(&prev.body, ProtocolMessage::CheckpointAttest { log_digest, .. } if *log_digest == digest)
            {
                self.evidence.push(Evidence::ConflictingVote {
                    signer,
                    frame: up_to,
                    view: 0,
                    kind: kind::CHECKPOINT_ATTEST,
                });
            }
            return;
        }
        votes.insert(signer, Arc::clone(msg));
        let matching: Vec<SignedMessage> = votes
            .values()
            .filter(|m| matches!(&m.body, ProtocolMessage::CheckpointAttest { log_digest, .. } if *log_digest == digest))
            .cloned()
            .collect();
        if matching.len() >= self.quorum() {
            self.stable = Some(Checkpoint {
                up_to_frame: up_to,
                log_digest: digest,
                votes: matching,
            });
            self.attests = self.attests.split_off(&(up_to + 1));
            if self
                .own_attest
                .as_ref()
                .is_some_and(|o| matches!(&o.msg.body, ProtocolMessage::CheckpointAttest { up_to_frame, .. } if *up_to_frame <= up_to))
            {
                self.own_attest = None;
            }
        }
    }

    fn answer_state_request(&self, to: ModuleId) -> Vec<Outbound> {
        if self.rejoin.is_some() {
            return Vec::new();
        }
        let log = match self.last_committed_frame() {
            Some(last) => self.log_entries(last),
            None => Vec::new(),
        };
        let snapshot = StateSnapshot {
            checkpoint: self.stable.clone(),
            log,
        };
        vec![Outbound {
            to: Destination::Module(to),
            msg: self.sign(ProtocolMessage::StateSnapshot(snapshot)),
        }]
    }

    fn state_request(&self) -> Outbound {
        Outbound {
            to: Destination::Peers,
            msg: self.sign(ProtocolMessage::StateRequest { from_frame: 0 }),
        }
    }

    /// Starts state transfer for a restarted replica.
    pub fn begin_rejoin(&mut self) -> Vec<Outbound> {
        self.rejoin = Some(Rejoin::default());
        self.rejoined = None;
        vec![self.state_request()]
    }

    pub fn is_rejoining(&self) -> bool {
        self.rejoin.is_some()
    }

    /// Result of a finished state transfer: the last adopted frame.
    pub fn take_rejoined(&mut self) -> Option<Option<u64>> {
        self.rejoined.take()
    }

    fn on_snapshot(&mut self, signer: ModuleId, snapshot: &StateSnapshot) {
        let valid = validate_snapshot(snapshot, self.registry(), self.quorum()).is_ok();
        let need = self.cfg.quorum.client_match();
        let Some(rejoin) = self.rejoin.as_mut() else {
            return;
        };
        if !valid {
            rejoin.rejected.insert(signer);
            return;
        }
        rejoin.snapshots.insert(signer, snapshot.clone());
        // The suffix past the checkpoint is unproven, so require f + 1
        // identical logs: at least one comes from a correct replica.
        let mut groups: BTreeMap<&[LogEntry], usize> = BTreeMap::new();
        for s in rejoin.snapshots.values() {
            *groups.entry(s.log.as_slice()).or_default() += 1;
        }
        let chosen = groups
            .iter()
            .filter(|(_, c)| **c >= need)
            .max_by_key(|(log, _)| log.len())
            .map(|(log, _)| log.to_vec());
        if let Some(log) = chosen {
            let checkpoint = rejoin
                .snapshots
                .values()
                .filter(|s| s.log == log)
                .filter_map(|s| s.checkpoint.clone())
                .max_by_key(|c| c.up_to_frame);
            let snap = StateSnapshot { checkpoint, log };
            self.install(&snap);
            self.rejoin = None;
            self.rejoined = Some(self.last_committed_frame());
        }
    }

    fn install(&mut self, snapshot: &StateSnapshot) {
        self.log = snapshot
            .log
            .iter()
            .filter_map(|e| e.value.clone().map(|v| (e.frame, v)))
            .collect();
        self.stable = snapshot.checkpoint.clone();
        self.attests.clear();
        self.own_attest = None;
    }

    /// Records a decision reached outside the replica protocol (vote-only
    /// mode) so the log can still be served to rejoining replicas.
    pub fn adopt_decision(&mut self, frame: u64, value: DecisionValue) {
        self.log.insert(frame, value);
    }

    /// Verifies and installs a snapshot directly. Returns the last committed
    /// frame of the adopted log.
    pub fn apply_snapshot(&mut self, snapshot: &StateSnapshot) -> Result<Option<u64>, SnapshotError> {
        validate_snapshot(snapshot, self.registry(), self.quorum())?;
        self.install(snapshot);
        self.rejoin = None;
        Ok(self.last_committed_frame())
    }

    /// Folds every protocol-relevant field into `h`, for state-space search.
    pub fn fingerprint<H: Hasher>(&self, h: &mut H) {
        self.inst.hash(h);
        self.log.hash(h);
        self.stable.hash(h);
        self.evidence.len().hash(h);
    }
}

fn highest_certificate(view_changes: &[SignedMessage]) -> Option<&PrepareCertificate> {
    view_changes
        .iter()
        .filter_map(|vc| match &vc.body {
            ProtocolMessage::ViewChange {
                certificate: Some(c),
                ..
            } => Some(c),
            _ => None,
        })
        .max_by_key(|c| c.view)
}
