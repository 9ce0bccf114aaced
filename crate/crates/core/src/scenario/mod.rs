//! Episode descriptions: who is in the ensemble, how each member fails,
//! what they observe, and how the run is wired.

mod file;
pub mod library;

use std::fmt;

use thiserror::Error;

use crate::consensus::{DEFAULT_CHECKPOINT_INTERVAL, DEFAULT_RETRANSMIT_INTERVAL};
use crate::harness::{FaultProfile, ModuleSpec, ObservationTable};
use crate::quorum::{min_replicas, QuorumConfig};
use crate::simnet::NetworkPolicy;
use crate::space::DecisionSpace;
use crate::supervisor::SupervisorConfig;
use crate::voter::VoteStrategy;

pub use file::{parse_scenario, parse_scenario_str, to_toml};

pub const DEFAULT_TIMEOUT_ROUNDS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusMode {
    Pbft,
    VoteOnly,
}

impl ConsensusMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConsensusMode::Pbft => "pbft",
            ConsensusMode::VoteOnly => "vote-only",
        }
    }
}

impl fmt::Display for ConsensusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsensusOptions {
    pub checkpoint_interval: u64,
    pub equivocation_fast_path: bool,
    pub retransmit_interval: u64,
}

impl Default for ConsensusOptions {
    fn default() -> Self {
        Self {
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            equivocation_fast_path: true,
            retransmit_interval: DEFAULT_RETRANSMIT_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub quorum: QuorumConfig,
    pub space: DecisionSpace,
    pub modules: Vec<ModuleSpec>,
    pub observations: ObservationTable,
    pub strategy: VoteStrategy,
    pub mode: ConsensusMode,
    /// The policy seed is kept equal to the scenario seed.
    pub network: NetworkPolicy,
    pub timeout_rounds: u64,
    /// Matching replies the observer needs before it acts; defaults to `f + 1`.
    pub execution_threshold: Option<usize>,
    pub seed: u64,
    pub expects_violation: bool,
    /// Allows pbft with more than `3f + 1` replicas.
    pub n_override: bool,
    pub supervisor: SupervisorConfig,
    pub options: ConsensusOptions,
}

/// Every problem found in a scenario, not just the first.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ScenarioError {
    pub errors: Vec<String>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid scenario ({} problem", self.errors.len())?;
        if self.errors.len() != 1 {
            f.write_str("s")?;
        }
        f.write_str(")")?;
        for e in &self.errors {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

impl From<String> for ScenarioError {
    fn from(e: String) -> Self {
        Self { errors: vec![e] }
    }
}

impl Scenario {
    /// An all-honest pbft scenario with defaults everywhere else.
    pub fn honest(name: &str, quorum: QuorumConfig, space: DecisionSpace, observations: ObservationTable) -> Self {
        Self {
            name: name.to_string(),
            modules: vec![ModuleSpec::new(FaultProfile::Honest); quorum.n()],
            quorum,
            space,
            observations,
            strategy: VoteStrategy::Majority,
            mode: ConsensusMode::Pbft,
            network: NetworkPolicy::default(),
            timeout_rounds: DEFAULT_TIMEOUT_ROUNDS,
            execution_threshold: None,
            seed: 0,
            expects_violation: false,
            n_override: false,
            supervisor: SupervisorConfig::default(),
            options: ConsensusOptions::default(),
        }
    }

    pub fn frames(&self) -> u64 {
        self.observations.len() as u64
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.network.seed = seed;
        self
    }

    pub fn byzantine_count(&self) -> usize {
        self.modules.iter().filter(|m| m.profile.is_byzantine()).count()
    }

    /// Matching replies the observer waits for.
    pub fn observer_threshold(&self) -> usize {
        self.execution_threshold.unwrap_or(self.quorum.client_match())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let errors = self.problems();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError { errors })
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.quorum.n();
        let f = self.quorum.f();
        if self.mode == ConsensusMode::Pbft && n != min_replicas(f) && !self.n_override {
            errs.push(format!(
                "pbft needs n = 3f+1 = {} replicas for f={f}, got n={n} (set n_override to run larger ensembles)",
                min_replicas(f)
            ));
        }
        if self.modules.len() != n {
            errs.push(format!("{} modules configured but n={n}", self.modules.len()));
        }
        for (i, m) in self.modules.iter().enumerate() {
            if let Err(e) = m.profile.validate(&self.space) {
                errs.push(format!("module {i}: {e}"));
            }
            if let Some(c) = m.base_confidence {
                if !(0.0..=1.0).contains(&c) {
                    errs.push(format!("module {i}: base_confidence {c} outside [0,1]"));
                }
            }
            if let Some(p) = &m.equivocation_partition {
                if let Some(bad) = p.iter().find(|id| **id >= n) {
                    errs.push(format!("module {i}: partition_a names module {bad}, n={n}"));
                }
            }
        }
        if self.observations.is_empty() {
            errs.push("no observation frames".to_string());
        }
        for (t, row) in self.observations.frames().iter().enumerate() {
            if row.observed.len() != n {
                errs.push(format!(
                    "frame {t}: {} observed labels for {n} modules",
                    row.observed.len()
                ));
            }
            for v in std::iter::once(&row.truth).chain(&row.observed) {
                if !self.space.contains(v) {
                    errs.push(format!("frame {t}: label {:?} is not in the decision space", v.label()));
                }
            }
        }
        if let Err(e) = self.strategy.validate(n) {
            errs.push(format!("strategy {}: {e}", self.strategy));
        }
        if let Some(x) = self.execution_threshold {
            if x < self.quorum.quorum() || x > n {
                errs.push(format!(
                    "execution_threshold {x} must lie in {}..={n}",
                    self.quorum.quorum()
                ));
            }
        }
        let byz = self.byzantine_count();
        if byz > f && !self.expects_violation {
            errs.push(format!(
                "{byz} Byzantine modules exceed f={f}; declare expects_violation = true to run outside the fault model"
            ));
        }
        if self.timeout_rounds == 0 {
            errs.push("timeout_rounds must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.network.drop_rate) {
            errs.push(format!("drop_rate {} outside [0,1)", self.network.drop_rate));
        }
        for (i, p) in self.network.partitions.iter().enumerate() {
            if p.from_round > p.to_round {
                errs.push(format!("partition {i}: from_round after to_round"));
            }
            if !p.side_a.is_disjoint(&p.side_b) {
                errs.push(format!("partition {i}: sides overlap"));
            }
            if p.side_a.iter().chain(&p.side_b).any(|m| *m >= n) {
                errs.push(format!("partition {i}: module id out of range"));
            }
        }
        if self.supervisor.window == 0 {
            errs.push("supervisor window must be at least 1".to_string());
        }
        let th = self.supervisor.flag_threshold;
        if !(th > 0.0 && th <= 1.0) {
            errs.push(format!("supervisor flag_threshold {th} outside (0,1]"));
        }
        errs
    }
}
