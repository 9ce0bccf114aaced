//! Randomized campaigns: many episodes of one base scenario with faults
//! placed at random in at most `f` slots and a random lossy, jittery network.
//! Episodes run in parallel; every variant is a pure function of
//! `(campaign seed, episode index)` so reports are reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::auth::ModuleId;
use crate::canonical::{digest, Digest};
use crate::episode::{liveness_bound, run_episode_with, Metrics, RunOptions};
use crate::harness::{FaultProfile, ModuleSpec, ObservationTable};
use crate::scenario::{Scenario, ScenarioError};
use crate::simnet::NetworkPolicy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzConfig {
    pub episodes: u64,
    pub seed: u64,
    pub max_jitter_rounds: u64,
    pub max_drop_rate: f64,
}

impl FuzzConfig {
    pub fn new(episodes: u64, seed: u64) -> Self {
        Self {
            episodes,
            seed,
            max_jitter_rounds: 1,
            max_drop_rate: 0.05,
        }
    }
}

/// Reproduction handle for a failing frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Failure {
    pub campaign_seed: u64,
    pub episode: u64,
    pub frame: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub index: u64,
    pub placement: Vec<(ModuleId, &'static str)>,
    pub metrics: Metrics,
    pub rounds: Vec<u64>,
    pub view_changes: Vec<u64>,
    pub violation_frames: Vec<u64>,
    pub liveness_frames: Vec<u64>,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub scenario: String,
    pub seed: u64,
    pub episodes: u64,
    pub frames: u64,
    pub liveness_bound: u64,
    pub max_view_changes_allowed: u64,
    pub agreement_violations: Vec<Failure>,
    pub liveness_failures: Vec<Failure>,
    pub rounds_histogram: BTreeMap<u64, u64>,
    pub view_change_histogram: BTreeMap<u64, u64>,
    pub profile_counts: BTreeMap<&'static str, u64>,
    pub digest: Digest,
}

impl CampaignReport {
    pub fn passed(&self) -> bool {
        self.agreement_violations.is_empty() && self.liveness_failures.is_empty()
    }

    pub fn max_rounds(&self) -> u64 {
        self.rounds_histogram.keys().next_back().copied().unwrap_or(0)
    }

    pub fn max_view_changes(&self) -> u64 {
        self.view_change_histogram.keys().next_back().copied().unwrap_or(0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "campaign {}  seed {}  episodes {}  frames {}",
            self.scenario, self.seed, self.episodes, self.frames
        );
        let _ = writeln!(
            s,
            "agreement violations {}  liveness failures {}  (bound {} rounds, {} view changes)",
            self.agreement_violations.len(),
            self.liveness_failures.len(),
            self.liveness_bound,
            self.max_view_changes_allowed
        );
        for f in self.agreement_violations.iter().take(10) {
            let _ = writeln!(
                s,
                "  agreement violation: seed {} episode {} frame {}",
                f.campaign_seed, f.episode, f.frame
            );
        }
        for f in self.liveness_failures.iter().take(10) {
            let _ = writeln!(
                s,
                "  liveness failure: seed {} episode {} frame {}",
                f.campaign_seed, f.episode, f.frame
            );
        }
        s.push_str("rounds to commit\n");
        for (r, c) in &self.rounds_histogram {
            let _ = writeln!(s, "  {r:>4}  {c}");
        }
        s.push_str("view changes per frame\n");
        for (v, c) in &self.view_change_histogram {
            let _ = writeln!(s, "  {v:>4}  {c}");
        }
        s.push_str("faults placed\n");
        for (p, c) in &self.profile_counts {
            let _ = writeln!(s, "  {p:<22} {c}");
        }
        let _ = writeln!(s, "report digest {}", self.digest);
        s
    }
}

fn variant_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_profile(rng: &mut ChaCha8Rng, sc: &Scenario) -> FaultProfile {
    let labels = sc.space.labels();
    let frames = sc.frames().max(1);
    let pick = |rng: &mut ChaCha8Rng| labels.choose(rng).expect("non-empty space").clone();
    match rng.gen_range(0..7) {
        0 => FaultProfile::DiverseHonest {
            perturb_seed: rng.gen(),
            error_rate: rng.gen_range(0.0..0.5),
        },
        1 => FaultProfile::Crash {
            at_frame: rng.gen_range(0..frames),
        },
        2 => FaultProfile::Silent,
        3 => FaultProfile::Slow {
            delay_rounds: rng.gen_range(1..=2),
        },
        4 => FaultProfile::ByzantineFixed { label: pick(rng) },
        5 => FaultProfile::ByzantineRandom { seed: rng.gen() },
        _ if labels.len() >= 2 => {
            let mut two = labels.choose_multiple(rng, 2);
            let a = two.next().expect("two labels").clone();
            let b = two.next().expect("two labels").clone();
            FaultProfile::ByzantineEquivocate { label_a: a, label_b: b }
        }
        _ => FaultProfile::ByzantineFixed { label: pick(rng) },
    }
}

/// The scenario run as episode `index` of a campaign.
pub fn variant(base: &Scenario, cfg: &FuzzConfig, index: u64) -> Scenario {
    let mut rng = variant_rng(cfg.seed, index);
    let n = base.quorum.n();
    let f = base.quorum.f();
    let mut sc = base.clone();
    let truths: Vec<_> = base.observations.frames().iter().map(|o| o.truth.clone()).collect();
    sc.observations = ObservationTable::uniform(&truths, n);
    sc.modules = vec![ModuleSpec::new(FaultProfile::Honest); n];
    let k = rng.gen_range(0..=f);
    for slot in (0..n).choose_multiple(&mut rng, k) {
        let profile = random_profile(&mut rng, base);
        let mut spec = ModuleSpec::new(profile);
        if matches!(spec.profile, FaultProfile::ByzantineEquivocate { .. }) {
            let part: BTreeSet<ModuleId> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
            spec.equivocation_partition = Some(part);
        }
        sc.modules[slot] = spec;
    }
    let seed: u64 = rng.gen();
    sc.network = NetworkPolicy {
        base_delay_rounds: 1,
        jitter_rounds: rng.gen_range(0..=cfg.max_jitter_rounds),
        drop_rate: rng.gen::<f64>() * cfg.max_drop_rate,
        partitions: Vec::new(),
        seed,
    };
    sc.seed = seed;
    sc
}

pub fn run_variant(sc: &Scenario, index: u64) -> EpisodeSummary {
    let ep = run_episode_with(
        sc,
        &RunOptions {
            keep_event_text: false,
        },
    );
    let bound = liveness_bound(sc);
    let max_vc = sc.quorum.f() as u64 + 1;
    EpisodeSummary {
        index,
        placement: sc
            .modules
            .iter()
            .enumerate()
            .filter(|(_, m)| m.profile.is_faulty())
            .map(|(i, m)| (i, m.profile.name()))
            .collect(),
        rounds: ep.records.iter().map(|r| r.rounds).collect(),
        view_changes: ep.records.iter().map(|r| r.view_changes).collect(),
        violation_frames: ep
            .records
            .iter()
            .filter(|r| r.flags.agreement_violation)
            .map(|r| r.frame)
            .collect(),
        liveness_frames: ep
            .records
            .iter()
            .filter(|r| !r.verdict.is_decided() || r.rounds > bound || r.view_changes > max_vc)
            .map(|r| r.frame)
            .collect(),
        digest: ep.digest(),
        metrics: ep.metrics,
    }
}

/// Runs a campaign. Refuses base scenarios outside the fault model: a
/// campaign asserts safety, which only holds with at most `f` faults.
pub fn fuzz_campaign(base: &Scenario, cfg: &FuzzConfig) -> Result<CampaignReport, ScenarioError> {
    base.validate()?;
    if base.byzantine_count() > base.quorum.f() {
        return Err(format!(
            "{} Byzantine modules exceed f={}; fuzz campaigns only run inside the fault model",
            base.byzantine_count(),
            base.quorum.f()
        )
        .into());
    }
    let summaries: Vec<EpisodeSummary> = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| run_variant(&variant(base, cfg, i), i))
        .collect();
    Ok(merge(base, cfg, &summaries))
}

fn merge(base: &Scenario, cfg: &FuzzConfig, summaries: &[EpisodeSummary]) -> CampaignReport {
    let mut report = CampaignReport {
        scenario: base.name.clone(),
        seed: cfg.seed,
        episodes: cfg.episodes,
        frames: 0,
        liveness_bound: liveness_bound(base),
        max_view_changes_allowed: base.quorum.f() as u64 + 1,
        agreement_violations: Vec::new(),
        liveness_failures: Vec::new(),
        rounds_histogram: BTreeMap::new(),
        view_change_histogram: BTreeMap::new(),
        profile_counts: BTreeMap::new(),
        digest: Digest::ZERO,
    };
    let mut bytes = Vec::new();
    for s in summaries {
        report.frames += s.rounds.len() as u64;
        let fail = |frame| Failure {
            campaign_seed: cfg.seed,
            episode: s.index,
            frame,
        };
        report
            .agreement_violations
            .extend(s.violation_frames.iter().map(|f| fail(*f)));
        report
            .liveness_failures
            .extend(s.liveness_frames.iter().map(|f| fail(*f)));
        for r in &s.rounds {
            *report.rounds_histogram.entry(*r).or_default() += 1;
        }
        for v in &s.view_changes {
            *report.view_change_histogram.entry(*v).or_default() += 1;
        }
        for (_, p) in &s.placement {
            *report.profile_counts.entry(p).or_default() += 1;
        }
        bytes.extend_from_slice(s.digest.as_bytes());
    }
    report.digest = digest(&bytes);
    report
}
