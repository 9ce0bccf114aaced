use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::auth::{KeyRegistry, ModuleId};
use crate::canonical::Digest;
use crate::harness::EquivocationProof;
use crate::message::{ModuleOutput, Payload, ProtocolMessage, SignedMessage};
use crate::space::DecisionValue;

use super::Evidence;

/// Applies the matching-replies rule: a value is final once `threshold`
/// distinct replicas have replied with it. Only a signer's first reply counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplyCollector {
    threshold: usize,
    frame: u64,
    replies: BTreeMap<ModuleId, (Digest, DecisionValue)>,
    finalized: Option<DecisionValue>,
}

impl ReplyCollector {
    pub fn new(threshold: usize, frame: u64) -> Self {
        Self {
            threshold,
            frame,
            replies: BTreeMap::new(),
            finalized: None,
        }
    }

    /// Records an already-verified reply. Returns evidence if the signer
    /// contradicts an earlier reply.
    pub fn add(&mut self, signer: ModuleId, msg: &ProtocolMessage) -> Option<Evidence> {
        let ProtocolMessage::Reply {
            frame, digest, value, ..
        } = msg
        else {
            return None;
        };
        if *frame != self.frame {
            return None;
        }
        if let Some((d, _)) = self.replies.get(&signer) {
            return (d != digest).then_some(Evidence::ConflictingReply {
                signer,
                frame: *frame,
            });
        }
        self.replies.insert(signer, (*digest, value.clone()));
        if self.finalized.is_none() && self.supporters(value).len() >= self.threshold {
            self.finalized = Some(value.clone());
        }
        None
    }

    pub fn finalized(&self) -> Option<&DecisionValue> {
        self.finalized.as_ref()
    }

    pub fn supporters(&self, value: &DecisionValue) -> BTreeSet<ModuleId> {
        self.replies
            .iter()
            .filter(|(_, (_, v))| v == value)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn tallies(&self) -> BTreeMap<DecisionValue, usize> {
        let mut t = BTreeMap::new();
        for (_, v) in self.replies.values() {
            *t.entry(v.clone()).or_default() += 1;
        }
        t
    }
}

/// The external client of the ensemble. It collects module outputs for the
/// supervisor and finalizes a frame's decision from replica replies.
#[derive(Debug, Clone)]
pub struct Observer {
    registry: Arc<KeyRegistry>,
    threshold: usize,
    frame: u64,
    replies: ReplyCollector,
    finalized_round: Option<u64>,
    outputs: BTreeMap<ModuleId, ModuleOutput>,
    equivocations: Vec<EquivocationProof>,
    evidence: Vec<Evidence>,
    excluded: BTreeSet<ModuleId>,
    rejected: u64,
}

impl Observer {
    pub fn new(registry: Arc<KeyRegistry>, threshold: usize) -> Self {
        Self {
            registry,
            threshold,
            frame: 0,
            replies: ReplyCollector::new(threshold, 0),
            finalized_round: None,
            outputs: BTreeMap::new(),
            equivocations: Vec::new(),
            evidence: Vec::new(),
            excluded: BTreeSet::new(),
            rejected: 0,
        }
    }

    pub fn begin_frame(&mut self, frame: u64) {
        self.frame = frame;
        self.replies = ReplyCollector::new(self.threshold, frame);
        self.finalized_round = None;
        self.outputs.clear();
        self.equivocations.clear();
    }

    pub fn set_excluded(&mut self, excluded: BTreeSet<ModuleId>) {
        self.excluded = excluded;
    }

    pub fn handle(&mut self, payload: &Payload, round: u64) {
        if self.excluded.contains(&payload.signer()) {
            return;
        }
        if !payload.verify(&self.registry) {
            self.rejected += 1;
            self.evidence.push(Evidence::InvalidTag {
                claimed: payload.signer(),
            });
            return;
        }
        match payload {
            Payload::Output(o) => self.record_output(o),
            Payload::Protocol(m) => self.record_reply(m, round),
        }
    }

    fn record_output(&mut self, o: &ModuleOutput) {
        if o.frame != self.frame {
            return;
        }
        match self.outputs.get(&o.module_id) {
            None => {
                self.outputs.insert(o.module_id, o.clone());
            }
            Some(first) => {
                if let Some(p) = EquivocationProof::from_outputs(first, o, &self.registry) {
                    if !self.equivocations.iter().any(|e| e.signer == p.signer) {
                        self.equivocations.push(p);
                    }
                }
            }
        }
    }

    fn record_reply(&mut self, m: &SignedMessage, round: u64) {
        if let Some(e) = self.replies.add(m.signer(), &m.body) {
            self.evidence.push(e);
        }
        if self.replies.finalized().is_some() && self.finalized_round.is_none() {
            self.finalized_round = Some(round);
        }
    }

    pub fn finalized(&self) -> Option<(&DecisionValue, u64)> {
        self.replies.finalized().zip(self.finalized_round)
    }

    pub fn supporters(&self, value: &DecisionValue) -> BTreeSet<ModuleId> {
        self.replies.supporters(value)
    }

    pub fn reply_tallies(&self) -> BTreeMap<DecisionValue, usize> {
        self.replies.tallies()
    }

    pub fn outputs(&self) -> &BTreeMap<ModuleId, ModuleOutput> {
        &self.outputs
    }

    pub fn equivocations(&self) -> &[EquivocationProof] {
        &self.equivocations
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }
}
