//! TOML scenario files. The grammar is described in `docs/scenario-format.md`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::harness::{FaultProfile, FrameObservation, ModuleSpec, ObservationTable, RestartPolicy};
use crate::quorum::{min_replicas, QuorumConfig};
use crate::simnet::{NetworkPolicy, Partition};
use crate::space::{DecisionSpace, DecisionValue};
use crate::supervisor::SupervisorConfig;
use crate::voter::VoteStrategy;

use super::{ConsensusMode, ConsensusOptions, Scenario, ScenarioError, DEFAULT_TIMEOUT_ROUNDS};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<u64>,
    #[serde(default = "default_consensus")]
    consensus: String,
    #[serde(default = "default_strategy")]
    strategy: String,
    #[serde(default = "default_timeout")]
    timeout_rounds: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    execution_threshold: Option<usize>,
    #[serde(default)]
    expects_violation: bool,
    #[serde(default)]
    n_override: bool,
    quorum: QuorumSection,
    decision_space: SpaceSection,
    #[serde(default)]
    network: NetworkSection,
    #[serde(default)]
    supervisor: SupervisorSection,
    #[serde(default)]
    consensus_options: OptionsSection,
    #[serde(rename = "module", default)]
    modules: Vec<ModuleSection>,
    #[serde(rename = "observation", default)]
    observations: Vec<ObservationSection>,
}

fn default_consensus() -> String {
    "pbft".into()
}

fn default_strategy() -> String {
    "majority".into()
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_ROUNDS
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuorumSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    f: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceSection {
    labels: Vec<String>,
    safe_default: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkSection {
    #[serde(default = "one")]
    base_delay_rounds: u64,
    #[serde(default)]
    jitter_rounds: u64,
    #[serde(default)]
    drop_rate: f64,
    #[serde(rename = "partition", default, skip_serializing_if = "Vec::is_empty")]
    partitions: Vec<PartitionSection>,
}

fn one() -> u64 {
    1
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            base_delay_rounds: 1,
            jitter_rounds: 0,
            drop_rate: 0.0,
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionSection {
    from_round: u64,
    to_round: u64,
    side_a: Vec<usize>,
    side_b: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupervisorSection {
    #[serde(default = "yes")]
    enabled: bool,
    #[serde(default = "default_window")]
    window: usize,
    #[serde(default = "default_threshold")]
    flag_threshold: f64,
    #[serde(default = "default_restart_delay")]
    restart_delay: u64,
}

fn yes() -> bool {
    true
}

fn default_window() -> usize {
    SupervisorConfig::default().window
}

fn default_threshold() -> f64 {
    SupervisorConfig::default().flag_threshold
}

fn default_restart_delay() -> u64 {
    SupervisorConfig::default().restart_delay
}

impl Default for SupervisorSection {
    fn default() -> Self {
        let d = SupervisorConfig::default();
        Self {
            enabled: d.enabled,
            window: d.window,
            flag_threshold: d.flag_threshold,
            restart_delay: d.restart_delay,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionsSection {
    #[serde(default = "default_checkpoint")]
    checkpoint_interval: u64,
    #[serde(default = "yes")]
    equivocation_fast_path: bool,
    #[serde(default = "default_retransmit")]
    retransmit_interval: u64,
}

fn default_checkpoint() -> u64 {
    ConsensusOptions::default().checkpoint_interval
}

fn default_retransmit() -> u64 {
    ConsensusOptions::default().retransmit_interval
}

impl Default for OptionsSection {
    fn default() -> Self {
        let d = ConsensusOptions::default();
        Self {
            checkpoint_interval: d.checkpoint_interval,
            equivocation_fast_path: d.equivocation_fast_path,
            retransmit_interval: d.retransmit_interval,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModuleSection {
    profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    on_restart: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_a: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label_b: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    partition_a: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturb_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    at_frame: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delay_rounds: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationSection {
    #[serde(default = "one", skip_serializing_if = "is_one")]
    repeat: u64,
    truth: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    observed: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "is_false")]
    critical: bool,
}

fn is_one(x: &u64) -> bool {
    *x == 1
}

fn is_false(b: &bool) -> bool {
    !*b
}

pub fn parse_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::from(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| ScenarioError::from(e.to_string().trim().to_string()))?;
    build(file)
}

/// Collects errors while converting; `None` results mean "already reported".
struct Errors(Vec<String>);

impl Errors {
    fn push(&mut self, e: impl Into<String>) {
        self.0.push(e.into());
    }
}

fn label(space: Option<&DecisionSpace>, l: &str, what: &str, errs: &mut Errors) -> Option<DecisionValue> {
    let space = space?;
    match space.value(l) {
        Ok(v) => Some(v),
        Err(_) => {
            errs.push(format!("{what}: label {l:?} is not in the decision space"));
            None
        }
    }
}

fn build(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    let mut errs = Errors(Vec::new());
    let f = file.quorum.f;
    let n = file.quorum.n.unwrap_or(min_replicas(f));
    let quorum = QuorumConfig::new(n, f)
        .map_err(|e| errs.push(format!("quorum: {e}")))
        .ok();
    let space = DecisionSpace::new(&file.decision_space.labels, &file.decision_space.safe_default)
        .map_err(|e| errs.push(format!("decision_space: {e}")))
        .ok();

    let mode = match file.consensus.as_str() {
        "pbft" => Some(ConsensusMode::Pbft),
        "vote-only" => Some(ConsensusMode::VoteOnly),
        other => {
            errs.push(format!("consensus: unknown mode {other:?} (pbft | vote-only)"));
            None
        }
    };
    let strategy = file
        .strategy
        .parse::<VoteStrategy>()
        .map_err(|e| errs.push(format!("strategy: {e}")))
        .ok();

    let mut modules = Vec::new();
    for (i, m) in file.modules.iter().enumerate() {
        if let Some(spec) = module_spec(i, m, space.as_ref(), &mut errs) {
            for _ in 0..m.count.unwrap_or(1) {
                modules.push(spec.clone());
            }
        }
    }
    if file.modules.iter().map(|m| m.count.unwrap_or(1)).sum::<usize>() != n {
        errs.push(format!(
            "{} modules configured but n={n}",
            file.modules.iter().map(|m| m.count.unwrap_or(1)).sum::<usize>()
        ));
    }

    let mut rows = Vec::new();
    let mut frame = 0u64;
    for o in &file.observations {
        let what = format!("frame {frame}");
        let truth = label(space.as_ref(), &o.truth, &what, &mut errs);
        let observed: Option<Vec<DecisionValue>> = match &o.observed {
            None => truth.clone().map(|t| vec![t; n]),
            Some(cols) => {
                if cols.len() != n {
                    errs.push(format!("{what}: {} observed labels for {n} modules", cols.len()));
                }
                cols.iter()
                    .enumerate()
                    .map(|(m, l)| label(space.as_ref(), l, &format!("{what}, module {m}"), &mut errs))
                    .collect::<Vec<_>>()
                    .into_iter()
                    .collect()
            }
        };
        if o.repeat == 0 {
            errs.push(format!("{what}: repeat must be at least 1"));
        }
        if let (Some(truth), Some(observed)) = (truth, observed) {
            for _ in 0..o.repeat {
                rows.push(FrameObservation {
                    truth: truth.clone(),
                    observed: observed.clone(),
                    critical: o.critical,
                });
            }
        }
        frame += o.repeat;
    }
    if let Some(frames) = file.frames {
        if frames != frame {
            errs.push(format!("frames = {frames} but the observation rows cover {frame} frames"));
        }
    }

    let network = NetworkPolicy {
        base_delay_rounds: file.network.base_delay_rounds,
        jitter_rounds: file.network.jitter_rounds,
        drop_rate: file.network.drop_rate,
        partitions: file
            .network
            .partitions
            .iter()
            .map(|p| Partition {
                from_round: p.from_round,
                to_round: p.to_round,
                side_a: p.side_a.iter().copied().collect(),
                side_b: p.side_b.iter().copied().collect(),
            })
            .collect(),
        seed: file.seed,
    };

    let (Some(quorum), Some(space), Some(mode), Some(strategy)) = (quorum, space, mode, strategy)
    else {
        return Err(ScenarioError { errors: errs.0 });
    };
    let scenario = Scenario {
        name: file.name,
        quorum,
        space,
        modules,
        observations: ObservationTable::new(rows),
        strategy,
        mode,
        network,
        timeout_rounds: file.timeout_rounds,
        execution_threshold: file.execution_threshold,
        seed: file.seed,
        expects_violation: file.expects_violation,
        n_override: file.n_override,
        supervisor: SupervisorConfig {
            enabled: file.supervisor.enabled,
            window: file.supervisor.window,
            flag_threshold: file.supervisor.flag_threshold,
            restart_delay: file.supervisor.restart_delay,
        },
        options: ConsensusOptions {
            checkpoint_interval: file.consensus_options.checkpoint_interval,
            equivocation_fast_path: file.consensus_options.equivocation_fast_path,
            retransmit_interval: file.consensus_options.retransmit_interval,
        },
    };
    // Structural errors first, then whatever the semantic check adds.
    if let Err(e) = scenario.validate() {
        for msg in e.errors {
            if !errs.0.contains(&msg) {
                errs.push(msg);
            }
        }
    }
    if errs.0.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError { errors: errs.0 })
    }
}

fn module_spec(
    i: usize,
    m: &ModuleSection,
    space: Option<&DecisionSpace>,
    errs: &mut Errors,
) -> Option<ModuleSpec> {
    let what = format!("module entry {i} ({})", m.profile);
    let allowed: &[&str] = match m.profile.as_str() {
        "honest" | "silent" => &[],
        "diverse" => &["perturb_seed", "error_rate"],
        "crash" => &["at_frame"],
        "slow" => &["delay_rounds"],
        "byzantine_fixed" => &["label"],
        "byzantine_random" => &["seed"],
        "byzantine_equivocate" => &["label_a", "label_b", "partition_a"],
        other => {
            errs.push(format!("module entry {i}: unknown profile {other:?}"));
            return None;
        }
    };
    let given = [
        ("label", m.label.is_some()),
        ("label_a", m.label_a.is_some()),
        ("label_b", m.label_b.is_some()),
        ("partition_a", m.partition_a.is_some()),
        ("perturb_seed", m.perturb_seed.is_some()),
        ("error_rate", m.error_rate.is_some()),
        ("at_frame", m.at_frame.is_some()),
        ("delay_rounds", m.delay_rounds.is_some()),
        ("seed", m.seed.is_some()),
    ];
    let mut ok = true;
    for (key, present) in given {
        if present && !allowed.contains(&key) {
            errs.push(format!("{what}: parameter {key} does not apply"));
            ok = false;
        }
    }
    let mut lbl = |l: &Option<String>, key: &str| -> Option<DecisionValue> {
        let l = l.as_ref()?;
        label(space, l, &format!("{what}, {key}"), errs)
    };
    let profile = match m.profile.as_str() {
        "honest" => Some(FaultProfile::Honest),
        "silent" => Some(FaultProfile::Silent),
        "diverse" => Some(FaultProfile::DiverseHonest {
            perturb_seed: m.perturb_seed.unwrap_or(0),
            error_rate: m.error_rate.unwrap_or(0.0),
        }),
        "crash" => m.at_frame.map(|at_frame| FaultProfile::Crash { at_frame }),
        "slow" => m.delay_rounds.map(|delay_rounds| FaultProfile::Slow { delay_rounds }),
        "byzantine_fixed" => lbl(&m.label, "label").map(|label| FaultProfile::ByzantineFixed { label }),
        "byzantine_random" => Some(FaultProfile::ByzantineRandom {
            seed: m.seed.unwrap_or(0),
        }),
        "byzantine_equivocate" => {
            let a = lbl(&m.label_a, "label_a");
            let b = lbl(&m.label_b, "label_b");
            a.zip(b)
                .map(|(label_a, label_b)| FaultProfile::ByzantineEquivocate { label_a, label_b })
        }
        _ => unreachable!(),
    };
    let required: &[(&str, bool)] = match m.profile.as_str() {
        "crash" => &[("at_frame", m.at_frame.is_some())],
        "slow" => &[("delay_rounds", m.delay_rounds.is_some())],
        "byzantine_fixed" => &[("label", m.label.is_some())],
        "byzantine_equivocate" => &[("label_a", m.label_a.is_some()), ("label_b", m.label_b.is_some())],
        _ => &[],
    };
    for (key, present) in required {
        if !present {
            errs.push(format!("{what}: missing parameter {key}"));
            ok = false;
        }
    }
    let on_restart = match m.on_restart.as_deref() {
        None | Some("same") => RestartPolicy::Same,
        Some("honest") => RestartPolicy::Honest,
        Some(other) => {
            errs.push(format!("{what}: on_restart must be same | honest, got {other:?}"));
            ok = false;
            RestartPolicy::Same
        }
    };
    if m.count == Some(0) {
        errs.push(format!("{what}: count must be at least 1"));
    }
    let profile = profile.filter(|_| ok)?;
    Some(ModuleSpec {
        profile,
        base_confidence: m.base_confidence,
        on_restart,
        equivocation_partition: m.partition_a.as_ref().map(|p| p.iter().copied().collect::<BTreeSet<_>>()),
    })
}

/// Renders a scenario back to the file format. Consecutive identical
/// observation rows are folded with `repeat`.
pub fn to_toml(s: &Scenario) -> String {
    let modules = s.modules.iter().map(module_section).collect();
    let mut observations: Vec<ObservationSection> = Vec::new();
    for row in s.observations.frames() {
        let observed = (!row.observed.iter().all(|v| *v == row.truth))
            .then(|| row.observed.iter().map(|v| v.label().to_string()).collect());
        if let Some(last) = observations.last_mut() {
            if last.truth == row.truth.label() && last.observed == observed && last.critical == row.critical {
                last.repeat += 1;
                continue;
            }
        }
        observations.push(ObservationSection {
            repeat: 1,
            truth: row.truth.label().to_string(),
            observed,
            critical: row.critical,
        });
    }
    let file = ScenarioFile {
        name: s.name.clone(),
        seed: s.seed,
        frames: None,
        consensus: s.mode.as_str().to_string(),
        strategy: s.strategy.to_string(),
        timeout_rounds: s.timeout_rounds,
        execution_threshold: s.execution_threshold,
        expects_violation: s.expects_violation,
        n_override: s.n_override,
        quorum: QuorumSection {
            n: Some(s.quorum.n()),
            f: s.quorum.f(),
        },
        decision_space: SpaceSection {
            labels: s.space.labels().iter().map(|v| v.label().to_string()).collect(),
            safe_default: s.space.safe_default().label().to_string(),
        },
        network: NetworkSection {
            base_delay_rounds: s.network.base_delay_rounds,
            jitter_rounds: s.network.jitter_rounds,
            drop_rate: s.network.drop_rate,
            partitions: s
                .network
                .partitions
                .iter()
                .map(|p| PartitionSection {
                    from_round: p.from_round,
                    to_round: p.to_round,
                    side_a: p.side_a.iter().copied().collect(),
                    side_b: p.side_b.iter().copied().collect(),
                })
                .collect(),
        },
        supervisor: SupervisorSection {
            enabled: s.supervisor.enabled,
            window: s.supervisor.window,
            flag_threshold: s.supervisor.flag_threshold,
            restart_delay: s.supervisor.restart_delay,
        },
        consensus_options: OptionsSection {
            checkpoint_interval: s.options.checkpoint_interval,
            equivocation_fast_path: s.options.equivocation_fast_path,
            retransmit_interval: s.options.retransmit_interval,
        },
        modules,
        observations,
    };
    toml::to_string(&file).expect("scenario files always serialize")
}

fn module_section(m: &ModuleSpec) -> ModuleSection {
    let mut sec = ModuleSection {
        profile: m.profile.name().to_string(),
        base_confidence: m.base_confidence,
        on_restart: (m.on_restart == RestartPolicy::Honest).then(|| "honest".to_string()),
        partition_a: m.equivocation_partition.as_ref().map(|p| p.iter().copied().collect()),
        ..ModuleSection::default()
    };
    match &m.profile {
        FaultProfile::Honest | FaultProfile::Silent => {}
        FaultProfile::DiverseHonest {
            perturb_seed,
            error_rate,
        } => {
            sec.perturb_seed = Some(*perturb_seed);
            sec.error_rate = Some(*error_rate);
        }
        FaultProfile::Crash { at_frame } => sec.at_frame = Some(*at_frame),
        FaultProfile::Slow { delay_rounds } => sec.delay_rounds = Some(*delay_rounds),
        FaultProfile::ByzantineFixed { label } => sec.label = Some(label.label().to_string()),
        FaultProfile::ByzantineRandom { seed } => sec.seed = Some(*seed),
        FaultProfile::ByzantineEquivocate { label_a, label_b } => {
            sec.label_a = Some(label_a.label().to_string());
            sec.label_b = Some(label_b.label().to_string());
        }
    }
    sec
}
