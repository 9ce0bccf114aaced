//! Exit criteria. Each prints one PASS/FAIL line; the test fails if any does.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bft_ensemble::episode::{liveness_bound, run_episode};
use bft_ensemble::explore::{explore_equivocation, EquivocationCase};
use bft_ensemble::fuzz::{fuzz_campaign, CampaignReport, FuzzConfig};
use bft_ensemble::harness::{FaultProfile, ModuleSpec, ObservationTable, RestartPolicy};
use bft_ensemble::quorum::{client_match, min_replicas, quorum_size, QuorumConfig};
use bft_ensemble::scenario::{library, ConsensusMode, Scenario};
use bft_ensemble::space::DecisionSpace;
use bft_ensemble::supervisor::EventKind;
use bft_ensemble::voter::VoteStrategy;

mod common;

/// Extra frames, beyond one full deviation window, allowed before a
/// persistently deviant module must be flagged.
const FLAG_GRACE_FRAMES: u64 = 1;
const FUZZ_EPISODES: u64 = 1000;
const FUZZ_SEED: u64 = 20;
const FUZZ_BUDGET: Duration = Duration::from_secs(60);
const QUORUM_BUDGET: Duration = Duration::from_secs(1);
const VOTER_BUDGET: Duration = Duration::from_secs(5);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn space() -> DecisionSpace {
    DecisionSpace::new(&["continue", "brake", "swerve"], "brake").unwrap()
}

fn fuzz_base(f: usize) -> Scenario {
    let s = space();
    let truths: Vec<_> = ["continue", "brake", "continue", "swerve", "continue"]
        .iter()
        .map(|l| s.value(l).unwrap())
        .collect();
    let q = QuorumConfig::for_faults(f);
    Scenario::honest(&format!("fuzz_n{}", q.n()), q, s, ObservationTable::uniform(&truths, q.n()))
}

/// Smallest n for which any two sets of n - f replicas share at least
/// f + 1 members, found by search.
fn smallest_safe_ensemble(f: usize) -> (usize, usize, usize) {
    let n = (1..)
        .find(|&n: &usize| n > f && 2 * (n - f) >= n + f + 1)
        .unwrap();
    (n, n - f, f + 1)
}

fn quorum_arithmetic() -> Outcome {
    let start = Instant::now();
    for f in 0..=3 {
        let (n, q, m) = smallest_safe_ensemble(f);
        let got = (min_replicas(f), quorum_size(f), client_match(f));
        check(got == (n, q, m), format!("f={f}: got {got:?}, search says {:?}", (n, q, m)))?;
        let cfg = QuorumConfig::for_faults(f);
        check((cfg.n(), cfg.quorum(), cfg.client_match()) == (n, q, m), format!("f={f}: config"))?;
        check(QuorumConfig::new(n - 1, f).is_err() || f == 0, format!("f={f}: n-1 accepted"))?;
    }
    check(
        (min_replicas(1), quorum_size(1), client_match(1)) == (4, 3, 2),
        "f=1 is not 4/3/2",
    )?;
    let t = start.elapsed();
    check(t < QUORUM_BUDGET, format!("took {t:?}"))?;
    Ok("f=0..3 match the intersection search; f=1 -> 4/3/2".into())
}

struct Campaigns {
    reports: Vec<CampaignReport>,
    elapsed: Duration,
}

fn campaigns() -> Result<Campaigns, String> {
    let start = Instant::now();
    let mut reports = Vec::new();
    for f in [1, 2] {
        let r = fuzz_campaign(&fuzz_base(f), &FuzzConfig::new(FUZZ_EPISODES, FUZZ_SEED))
            .map_err(|e| e.to_string())?;
        reports.push(r);
    }
    Ok(Campaigns {
        reports,
        elapsed: start.elapsed(),
    })
}

fn agreement(c: &Campaigns) -> Outcome {
    for r in &c.reports {
        check(r.episodes == FUZZ_EPISODES, "episode count")?;
        if let Some(v) = r.agreement_violations.first() {
            return Err(format!(
                "{}: {} violations, first at seed {} episode {} frame {}",
                r.scenario,
                r.agreement_violations.len(),
                v.campaign_seed,
                v.episode,
                v.frame
            ));
        }
    }
    check(
        c.elapsed < FUZZ_BUDGET,
        format!("campaigns took {:.1?}, budget {FUZZ_BUDGET:?}", c.elapsed),
    )?;
    let frames: u64 = c.reports.iter().map(|r| r.frames).sum();
    Ok(format!(
        "0 violations over {frames} frames (N=4 and N=7, {FUZZ_EPISODES} episodes each) in {:.1?}",
        c.elapsed
    ))
}

fn liveness(c: &Campaigns) -> Outcome {
    let mut detail = Vec::new();
    for r in &c.reports {
        let f = r.max_view_changes_allowed - 1;
        let bound = liveness_bound(&fuzz_base(f as usize));
        check(r.liveness_bound == bound, "bound mismatch")?;
        if let Some(x) = r.liveness_failures.first() {
            return Err(format!(
                "{}: {} frames missed the bound, first at seed {} episode {} frame {}",
                r.scenario,
                r.liveness_failures.len(),
                x.campaign_seed,
                x.episode,
                x.frame
            ));
        }
        check(r.max_rounds() <= bound, format!("{}: {} rounds > {bound}", r.scenario, r.max_rounds()))?;
        check(
            r.max_view_changes() <= f + 1,
            format!("{}: {} view changes", r.scenario, r.max_view_changes()),
        )?;
        detail.push(format!(
            "{} max {} rounds (bound {bound}), max {} view changes",
            r.scenario,
            r.max_rounds(),
            r.max_view_changes()
        ));
    }
    Ok(detail.join("; "))
}

fn voter_oracle() -> Outcome {
    let start = Instant::now();
    let cases = common::exhaustive_check()?;
    let t = start.elapsed();
    check(t < VOTER_BUDGET, format!("took {t:?}"))?;
    Ok(format!("{cases} cases equal the counting oracle in {t:.1?}"))
}

const PLASTIC_BAG_LOG: &str = "\
# scenario=av_plastic_bag seed=7 mode=vote-only n=5 f=1 expects_violation=false
0|decided|continue|0,1,2,3|1|0|-
1|decided|continue|0,1,2,3|1|0|-
2|decided|continue|0,1,2,3|1|0|-
";

const MISSED_OBSTACLE_LOG: &str = "\
# scenario=av_missed_obstacle seed=11 mode=vote-only n=5 f=1 expects_violation=false
0|decided|stop|0,2,3,4|1|0|-
1|decided|stop|0,2,3,4|1|0|-
2|decided|stop|0,2,3,4|1|0|-
";

const TWO_OF_THREE_LOG: &str = "\
# scenario=voter_thresholds_2oo3 seed=1 mode=vote-only n=3 f=0 expects_violation=false
0|decided|alarm|0,1|1|0|-
1|decided|quiet|1,2|1|0|-
2|decided|alarm|0,1,2|1|0|-
3|decided|quiet|0,1|1|0|-
";

fn scenario_reproduction() -> Outcome {
    for (name, want) in [
        ("av_plastic_bag", PLASTIC_BAG_LOG),
        ("av_missed_obstacle", MISSED_OBSTACLE_LOG),
        ("voter_thresholds_2oo3", TWO_OF_THREE_LOG),
    ] {
        let got = run_episode(&library::load(name).unwrap()).decision_log();
        check(got == want, format!("{name} log differs:\n{got}"))?;
    }
    let bag = run_episode(&library::load("av_plastic_bag").unwrap());
    check(
        bag.records.iter().all(|r| r.supporters().len() == 4),
        "plastic bag supporters are not 4 of 5",
    )?;
    // The 2oo3 table alternates two alarms and one alarm.
    let sc = library::load("voter_thresholds_2oo3").unwrap();
    for (row, rec) in sc.observations.frames().iter().zip(run_episode(&sc).records) {
        let alarms = row.observed.iter().filter(|v| v.label() == "alarm").count();
        let fired = rec.value().map(|v| v.label()) == Some("alarm");
        check(fired == (alarms >= 2), format!("frame {}: {alarms} alarms, fired={fired}", rec.frame))?;
    }
    Ok("plastic bag -> continue by {0,1,2,3}; missed obstacle -> stop; 2oo3 fires on 2, not on 1".into())
}

fn equivocation_safety() -> Outcome {
    let s = space();
    let v = |l: &str| s.value(l).unwrap();
    let mut states = 0;
    let mut deposed_cases = 0;
    for fast_path in [true, false] {
        for bits in 0u8..8 {
            let partition: BTreeSet<usize> = (1..4).filter(|m| bits & (1 << (m - 1)) != 0).collect();
            let mut c = EquivocationCase::new(
                QuorumConfig::for_faults(1),
                v("continue"),
                v("continue"),
                v("brake"),
                partition.clone(),
            );
            c.equivocation_fast_path = fast_path;
            let r = explore_equivocation(&c);
            states += r.states;
            check(
                r.safe(),
                format!("{partition:?} fast_path={fast_path}: {} unsafe states", r.safety_violations),
            )?;
            check(r.undecided == 0, format!("{partition:?}: {} schedules undecided", r.undecided))?;
            // At most f honest replicas hear the honest value from the leader:
            // its view cannot reach a quorum and must be abandoned.
            if partition.len() <= 1 {
                check(
                    r.leader_deposed(),
                    format!("{partition:?} fast_path={fast_path}: leader kept its view"),
                )?;
                deposed_cases += 1;
            }
        }
    }
    Ok(format!(
        "{states} states across 16 schedule families, all safe; leader deposed in all {deposed_cases} split cases"
    ))
}

fn common_mode() -> Outcome {
    let sc = library::load("common_mode_breach").unwrap();
    check(sc.byzantine_count() > sc.quorum.f(), "scenario is inside the fault model")?;
    let ep = run_episode(&sc);
    let wrong: Vec<u64> = ep
        .records
        .iter()
        .zip(sc.observations.frames())
        .filter(|(r, row)| r.value().is_some_and(|v| *v != row.truth))
        .map(|(r, _)| r.frame)
        .collect();
    check(!wrong.is_empty(), "every frame committed the truth")?;
    for r in &ep.records {
        check(
            r.flags.ground_truth_mismatch == wrong.contains(&r.frame),
            format!("frame {}: flag disagrees with the truth column", r.frame),
        )?;
    }
    Ok(format!("{} of {} frames committed the colluders' value, all flagged", wrong.len(), ep.records.len()))
}

fn supervisor_cycle() -> Outcome {
    let s = space();
    let q = QuorumConfig::for_faults(1);
    let truths = vec![s.value("continue").unwrap(); 20];
    let mut sc = Scenario::honest("supervised", q, s.clone(), ObservationTable::uniform(&truths, q.n()));
    let mut liar = ModuleSpec::new(FaultProfile::ByzantineFixed {
        label: s.value("brake").unwrap(),
    });
    liar.on_restart = RestartPolicy::Honest;
    sc.modules[3] = liar;
    let ep = run_episode(&sc);
    let find = |kind: EventKind| {
        ep.supervisor_events
            .iter()
            .find(|e| e.module == 3 && e.kind == kind)
            .cloned()
            .ok_or(format!("no {kind} event"))
    };
    let flagged = find(EventKind::Flagged)?;
    let isolated = find(EventKind::Isolated)?;
    let restarted = find(EventKind::Restarted)?;
    let recovered = find(EventKind::Recovered)?;
    let window = sc.supervisor.window as u64;
    check(
        flagged.frame + 1 <= window + FLAG_GRACE_FRAMES,
        format!("flagged after {} frames", flagged.frame + 1),
    )?;
    check(isolated.frame == flagged.frame, "not isolated when flagged")?;
    check(restarted.frame > isolated.frame, "restart before isolation")?;
    check(recovered.round >= restarted.round, "recovered before restart")?;
    let after: Vec<_> = ep.traces.iter().filter(|t| t.frame >= restarted.frame).collect();
    let counted = after.iter().filter(|t| t.prepare_voters.contains(&3)).count();
    check(counted > 0, "module 3 never appears in a prepare certificate after recovery")?;
    check(
        ep.traces[..restarted.frame as usize]
            .iter()
            .all(|t| !t.prepare_voters.contains(&3)),
        "module 3 prepared for the honest value while lying",
    )?;
    Ok(format!(
        "flagged at frame {} (window {window}), restarted at frame {}, recovered at round {}, counted in {counted}/{} later certificates",
        flagged.frame,
        restarted.frame,
        recovered.round,
        after.len()
    ))
}

fn determinism() -> Outcome {
    for name in library::NAMES {
        let sc = library::load(name).unwrap();
        let (a, b) = (run_episode(&sc), run_episode(&sc));
        check(a.decision_log() == b.decision_log(), format!("{name}: decision logs differ"))?;
        check(a.event_log_text() == b.event_log_text(), format!("{name}: event logs differ"))?;
    }
    let cfg = FuzzConfig::new(50, 4);
    let a = fuzz_campaign(&fuzz_base(1), &cfg).map_err(|e| e.to_string())?;
    let b = fuzz_campaign(&fuzz_base(1), &cfg).map_err(|e| e.to_string())?;
    check(a.digest == b.digest, "campaign digests differ")?;
    Ok(format!("{} bundled episodes and a 50-episode campaign replay byte for byte", library::NAMES.len()))
}

fn fast_path() -> Outcome {
    let s = space();
    let q = QuorumConfig::for_faults(1);
    let run = |observed: [&str; 4]| {
        let mut rows = ObservationTable::uniform(&[s.value("continue").unwrap()], 4).frames().to_vec();
        rows[0].observed = observed.iter().map(|l| s.value(l).unwrap()).collect();
        let mut sc = Scenario::honest("fast", q, s.clone(), ObservationTable::new(rows));
        sc.mode = ConsensusMode::VoteOnly;
        sc.strategy = VoteStrategy::FastPathThenMajority;
        run_episode(&sc).records.remove(0)
    };
    let r = run(["continue"; 4]);
    check(r.rounds == 1, format!("all honest took {} rounds", r.rounds))?;
    check(r.value().map(|v| v.label()) == Some("continue"), "all honest decided wrong value")?;
    for dissenter in 0..4 {
        let mut obs = ["continue"; 4];
        obs[dissenter] = "swerve";
        let r = run(obs);
        check(r.rounds == 2, format!("dissent at {dissenter} took {} rounds", r.rounds))?;
        check(
            r.value().map(|v| v.label()) == Some("continue"),
            format!("dissent at {dissenter} decided {:?}", r.value()),
        )?;
    }
    Ok("agreement in 1 round; any single dissent falls back and decides the majority in 2".into())
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let campaigns = campaigns();
    let with_campaigns = |f: fn(&Campaigns) -> Outcome| match &campaigns {
        Ok(c) => guarded(|| f(c)),
        Err(e) => Err(format!("campaign refused: {e}")),
    };
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "quorum arithmetic", guarded(quorum_arithmetic)),
        (2, "agreement under fuzz", with_campaigns(agreement)),
        (3, "liveness bound", with_campaigns(liveness)),
        (4, "voter oracle equivalence", guarded(voter_oracle)),
        (5, "scenario reproduction", guarded(scenario_reproduction)),
        (6, "equivocation safety", guarded(equivocation_safety)),
        (7, "common-mode breach", guarded(common_mode)),
        (8, "supervisor cycle", guarded(supervisor_cycle)),
        (9, "determinism", guarded(determinism)),
        (10, "fast path", guarded(fast_path)),
    ];
    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                println!("criterion {n:>2} FAIL  {name}: {why}");
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
