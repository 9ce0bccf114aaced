//! Simulated decision modules.
//!
//! Each module is a stand-in for an AI model: it observes the frame input
//! through its own column of the [`ObservationTable`] and turns it into a
//! signed [`ModuleOutput`] according to its [`FaultProfile`]. A module's
//! state is private to it; the only way it can influence anything else is
//! through what it signs.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::auth::{KeyRegistry, ModuleId, Signer};
use crate::canonical::Canonical;
use crate::message::ModuleOutput;
use crate::space::{DecisionSpace, DecisionValue};

pub const DEFAULT_HONEST_CONFIDENCE: f64 = 0.9;
pub const DEFAULT_ADVERSARY_CONFIDENCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("observation {0:?} is outside the decision space")]
    UnknownObservation(String),
    #[error("module {0} is {1:?}; only isolated or restarting modules can be restarted")]
    RestartActive(ModuleId, Status),
    #[error("module {0} is not active")]
    NotActive(ModuleId),
    #[error("invalid fault profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultProfile {
    Honest,
    DiverseHonest { perturb_seed: u64, error_rate: f64 },
    Crash { at_frame: u64 },
    Silent,
    Slow { delay_rounds: u64 },
    ByzantineFixed { label: DecisionValue },
    ByzantineRandom { seed: u64 },
    ByzantineEquivocate { label_a: DecisionValue, label_b: DecisionValue },
}

impl FaultProfile {
    pub fn validate(&self, space: &DecisionSpace) -> Result<(), HarnessError> {
        match self {
            FaultProfile::DiverseHonest { error_rate, .. } if !(0.0..=1.0).contains(error_rate) => {
                Err(HarnessError::InvalidProfile(format!(
                    "error_rate {error_rate} outside [0,1]"
                )))
            }
            FaultProfile::Slow { delay_rounds: 0 } => Err(HarnessError::InvalidProfile(
                "delay_rounds must be at least 1".into(),
            )),
            FaultProfile::ByzantineFixed { label } if !space.contains(label) => {
                Err(HarnessError::UnknownObservation(label.to_string()))
            }
            FaultProfile::ByzantineEquivocate { label_a, label_b } => {
                if label_a == label_b {
                    return Err(HarnessError::InvalidProfile(
                        "equivocation labels must differ".into(),
                    ));
                }
                for l in [label_a, label_b] {
                    if !space.contains(l) {
                        return Err(HarnessError::UnknownObservation(l.to_string()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Profiles that deviate from the protocol itself, not only from the truth.
    pub fn is_byzantine(&self) -> bool {
        matches!(
            self,
            FaultProfile::ByzantineFixed { .. }
                | FaultProfile::ByzantineRandom { .. }
                | FaultProfile::ByzantineEquivocate { .. }
        )
    }

    /// Anything other than a plain honest module uses up part of the `f` budget.
    pub fn is_faulty(&self) -> bool {
        !matches!(self, FaultProfile::Honest)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FaultProfile::Honest => "honest",
            FaultProfile::DiverseHonest { .. } => "diverse",
            FaultProfile::Crash { .. } => "crash",
            FaultProfile::Silent => "silent",
            FaultProfile::Slow { .. } => "slow",
            FaultProfile::ByzantineFixed { .. } => "byzantine_fixed",
            FaultProfile::ByzantineRandom { .. } => "byzantine_random",
            FaultProfile::ByzantineEquivocate { .. } => "byzantine_equivocate",
        }
    }
}

/// What a replaced module comes back as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RestartPolicy {
    #[default]
    Same,
    Honest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSpec {
    pub profile: FaultProfile,
    pub base_confidence: Option<f64>,
    pub on_restart: RestartPolicy,
    /// Recipients that see `label_a` from an equivocating module. Defaults to
    /// the lower half of the module ids.
    pub equivocation_partition: Option<BTreeSet<ModuleId>>,
}

impl ModuleSpec {
    pub fn new(profile: FaultProfile) -> Self {
        Self {
            profile,
            base_confidence: None,
            on_restart: RestartPolicy::Same,
            equivocation_partition: None,
        }
    }
}

impl From<FaultProfile> for ModuleSpec {
    fn from(p: FaultProfile) -> Self {
        Self::new(p)
    }
}

/// Per-frame ground truth plus what each module perceives.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub truth: DecisionValue,
    pub observed: Vec<DecisionValue>,
    pub critical: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationTable {
    frames: Vec<FrameObservation>,
}

impl ObservationTable {
    pub fn new(frames: Vec<FrameObservation>) -> Self {
        Self { frames }
    }

    /// Every module sees the truth on every frame.
    pub fn uniform(truths: &[DecisionValue], modules: usize) -> Self {
        Self::new(
            truths
                .iter()
                .map(|t| FrameObservation {
                    truth: t.clone(),
                    observed: vec![t.clone(); modules],
                    critical: false,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, frame: u64) -> &FrameObservation {
        &self.frames[frame as usize]
    }

    pub fn frames(&self) -> &[FrameObservation] {
        &self.frames
    }

    pub fn observed(&self, frame: u64, module: ModuleId) -> &DecisionValue {
        &self.frames[frame as usize].observed[module]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Active,
    Isolated,
    Restarting,
}

#[derive(Debug, Clone)]
pub struct ModuleState {
    module_id: ModuleId,
    profile: FaultProfile,
    base_confidence: Option<f64>,
    last_committed_frame: Option<u64>,
    status: Status,
    rng: ChaCha8Rng,
}

/// Private randomness of one module. Streams are keyed by module id so that
/// adding a module never shifts the draws of another.
pub fn module_rng(seed: u64, module_id: ModuleId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(module_id as u64 + 1);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum Production {
    Output(ModuleOutput),
    /// Two differently valued outputs, both validly signed. `for_a` goes to
    /// `partition_a`, `for_b` to everyone else.
    Equivocation {
        for_a: ModuleOutput,
        for_b: ModuleOutput,
        partition_a: BTreeSet<ModuleId>,
    },
    NoOutput,
}

impl Production {
    /// The output a given recipient gets to see.
    pub fn for_recipient(&self, recipient: ModuleId) -> Option<&ModuleOutput> {
        match self {
            Production::Output(o) => Some(o),
            Production::Equivocation {
                for_a,
                for_b,
                partition_a,
            } => Some(if partition_a.contains(&recipient) {
                for_a
            } else {
                for_b
            }),
            Production::NoOutput => None,
        }
    }

    /// The value this module would stand behind as a replica.
    pub fn primary(&self) -> Option<&ModuleOutput> {
        match self {
            Production::Output(o) => Some(o),
            Production::Equivocation { for_a, .. } => Some(for_a),
            Production::NoOutput => None,
        }
    }
}

pub fn confidence_of(profile: &FaultProfile, base_override: Option<f64>) -> f64 {
    let default = if profile.is_byzantine() {
        DEFAULT_ADVERSARY_CONFIDENCE
    } else {
        DEFAULT_HONEST_CONFIDENCE
    };
    base_override.unwrap_or(default).clamp(0.0, 1.0)
}

/// Default equivocation split: the lower half of the ids sees `label_a`.
pub fn default_partition(n: usize) -> BTreeSet<ModuleId> {
    (0..n / 2).collect()
}

impl ModuleState {
    pub fn new(module_id: ModuleId, spec: &ModuleSpec, scenario_seed: u64) -> Self {
        let seed = match spec.profile {
            FaultProfile::DiverseHonest { perturb_seed, .. } => perturb_seed,
            FaultProfile::ByzantineRandom { seed } => seed,
            _ => scenario_seed,
        };
        Self {
            module_id,
            profile: spec.profile.clone(),
            base_confidence: spec.base_confidence,
            last_committed_frame: None,
            status: Status::Active,
            rng: module_rng(seed, module_id),
        }
    }

    pub fn module_id(&self) -> ModuleId {
        self.module_id
    }

    pub fn profile(&self) -> &FaultProfile {
        &self.profile
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn last_committed_frame(&self) -> Option<u64> {
        self.last_committed_frame
    }

    pub fn confidence(&self) -> f64 {
        confidence_of(&self.profile, self.base_confidence)
    }

    /// Whether the module emits anything at all for `frame`.
    pub fn is_running(&self, frame: u64) -> bool {
        if self.status != Status::Active {
            return false;
        }
        match self.profile {
            FaultProfile::Silent => false,
            FaultProfile::Crash { at_frame } => frame < at_frame,
            _ => true,
        }
    }

    pub fn produce_output(
        &mut self,
        frame: u64,
        observation: &DecisionValue,
        space: &DecisionSpace,
        signer: &Signer,
        partition: Option<&BTreeSet<ModuleId>>,
    ) -> Result<Production, HarnessError> {
        if !space.contains(observation) {
            return Err(HarnessError::UnknownObservation(observation.to_string()));
        }
        if self.status != Status::Active {
            return Err(HarnessError::NotActive(self.module_id));
        }
        if !self.is_running(frame) {
            return Ok(Production::NoOutput);
        }
        let conf = self.confidence();
        let out = |v: DecisionValue| ModuleOutput::new(signer, frame, v, conf);
        let value = match &self.profile {
            FaultProfile::Honest | FaultProfile::Slow { .. } | FaultProfile::Crash { .. } => {
                observation.clone()
            }
            FaultProfile::DiverseHonest { error_rate, .. } => {
                // Always draw so the stream position does not depend on the
                // observation sequence.
                let roll: f64 = self.rng.gen();
                let wrong: Vec<&DecisionValue> =
                    space.labels().iter().filter(|v| *v != observation).collect();
                let pick = wrong.choose(&mut self.rng).cloned();
                match pick {
                    Some(w) if roll < *error_rate => w.clone(),
                    _ => observation.clone(),
                }
            }
            FaultProfile::ByzantineFixed { label } => label.clone(),
            FaultProfile::ByzantineRandom { .. } => space
                .labels()
                .choose(&mut self.rng)
                .expect("decision space is non-empty")
                .clone(),
            FaultProfile::ByzantineEquivocate { label_a, label_b } => {
                return Ok(Production::Equivocation {
                    for_a: out(label_a.clone()),
                    for_b: out(label_b.clone()),
                    partition_a: partition
                        .cloned()
                        .unwrap_or_else(|| default_partition(signer.registry().len())),
                });
            }
            FaultProfile::Silent => unreachable!("silent modules are not running"),
        };
        Ok(Production::Output(out(value)))
    }

    pub fn isolate(&mut self) -> Result<(), HarnessError> {
        if self.status != Status::Active {
            return Err(HarnessError::NotActive(self.module_id));
        }
        self.status = Status::Isolated;
        Ok(())
    }

    /// Moves an isolated module to `Restarting`; it becomes active again once
    /// a verified state snapshot is applied.
    pub fn restart_module(&mut self, policy: RestartPolicy) -> Result<(), HarnessError> {
        match self.status {
            Status::Active => Err(HarnessError::RestartActive(self.module_id, self.status)),
            Status::Isolated | Status::Restarting => {
                if policy == RestartPolicy::Honest {
                    self.profile = FaultProfile::Honest;
                }
                self.status = Status::Restarting;
                Ok(())
            }
        }
    }

    pub fn apply_snapshot(&mut self, last_committed_frame: Option<u64>) -> Result<(), HarnessError> {
        if self.status != Status::Restarting {
            return Err(HarnessError::InvalidProfile(format!(
                "module {} is not restarting",
                self.module_id
            )));
        }
        self.status = Status::Active;
        self.last_committed_frame = last_committed_frame;
        Ok(())
    }

    pub fn note_committed(&mut self, frame: u64) {
        self.last_committed_frame = Some(frame);
    }
}

/// Two verified outputs from one signer for one frame with different values.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivocationProof {
    pub signer: ModuleId,
    pub frame: u64,
    pub first: ModuleOutput,
    pub second: ModuleOutput,
}

impl EquivocationProof {
    pub fn from_outputs(
        first: &ModuleOutput,
        second: &ModuleOutput,
        registry: &KeyRegistry,
    ) -> Option<Self> {
        let same_slot = first.module_id == second.module_id && first.frame == second.frame;
        if same_slot
            && first.value.digest() != second.value.digest()
            && first.verify(registry)
            && second.verify(registry)
        {
            Some(Self {
                signer: first.module_id,
                frame: first.frame,
                first: first.clone(),
                second: second.clone(),
            })
        } else {
            None
        }
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        Self::from_outputs(&self.first, &self.second, registry).is_some()
    }
}
