use bft_ensemble::harness::{FaultProfile, FrameObservation, ObservationTable};
use bft_ensemble::scenario::{library, parse_scenario, parse_scenario_str, to_toml, ConsensusMode};
use bft_ensemble::space::DecisionSpace;
use bft_ensemble::voter::VoteStrategy;
use proptest::prelude::*;

const FOUR_MODULES: &str = r#"
name = "four"
seed = 9
consensus = "pbft"

[quorum]
f = 1

[decision_space]
labels = ["continue", "brake", "swerve"]
safe_default = "brake"

[[module]]
profile = "honest"
count = 3

[[module]]
profile = "silent"

[[observation]]
repeat = 2
truth = "continue"

[[observation]]
truth = "brake"
observed = ["brake", "brake", "continue", "brake"]
critical = true
"#;

#[test]
fn four_module_file_parses() {
    let sc = parse_scenario_str(FOUR_MODULES).unwrap();
    assert_eq!(sc.name, "four");
    assert_eq!((sc.quorum.n(), sc.quorum.f()), (4, 1));
    assert_eq!(sc.mode, ConsensusMode::Pbft);
    assert_eq!(sc.frames(), 3);
    assert_eq!(sc.modules[3].profile, FaultProfile::Silent);
    let last = &sc.observations.frames()[2];
    assert!(last.critical);
    assert_eq!(last.observed[2].label(), "continue");
    assert_eq!(sc.strategy, VoteStrategy::Majority);
}

#[test]
fn three_modules_for_one_fault_is_rejected_in_pbft() {
    let text = FOUR_MODULES
        .replace("[quorum]\nf = 1", "[quorum]\nn = 3\nf = 1")
        .replace("count = 3", "count = 2")
        .replace("[\"brake\", \"brake\", \"continue\", \"brake\"]", "[\"brake\", \"brake\", \"continue\"]");
    let err = parse_scenario_str(&text).unwrap_err();
    assert!(err.to_string().contains("n < 3f+1"), "{err}");
}

#[test]
fn larger_pbft_ensemble_needs_override() {
    let text = FOUR_MODULES
        .replace("[quorum]\nf = 1", "[quorum]\nn = 5\nf = 1")
        .replace("count = 3", "count = 4")
        .replace("[\"brake\", \"brake\", \"continue\", \"brake\"]", "[\"brake\", \"brake\", \"continue\", \"brake\", \"brake\"]");
    let err = parse_scenario_str(&text).unwrap_err();
    assert!(err.to_string().contains("n_override"), "{err}");
    let ok = text.replace("consensus = \"pbft\"", "consensus = \"pbft\"\nn_override = true");
    assert_eq!(parse_scenario_str(&ok).unwrap().quorum.n(), 5);
}

#[test]
fn unknown_label_names_the_frame() {
    let text = FOUR_MODULES.replace("truth = \"brake\"", "truth = \"accelerate\"");
    let err = parse_scenario_str(&text).unwrap_err();
    assert!(err.errors.iter().any(|e| e.contains("frame 2") && e.contains("accelerate")), "{err}");
}

#[test]
fn all_problems_are_reported_together() {
    let text = FOUR_MODULES
        .replace("truth = \"brake\"", "truth = \"accelerate\"")
        .replace("count = 3", "count = 2")
        .replace("[[module]]\nprofile = \"silent\"", "[[module]]\nprofile = \"sleepy\"");
    let err = parse_scenario_str(&text).unwrap_err();
    let all = err.to_string();
    assert!(err.errors.len() >= 3, "{all}");
    assert!(all.contains("accelerate"), "{all}");
    assert!(all.contains("sleepy"), "{all}");
    assert!(all.contains("n=4"), "{all}");
}

#[test]
fn module_count_must_match_n() {
    let text = FOUR_MODULES.replace("count = 3", "count = 4");
    let err = parse_scenario_str(&text).unwrap_err();
    assert!(err.to_string().contains("5 modules configured but n=4"), "{err}");
}

#[test]
fn parameters_are_checked_per_profile() {
    let text = FOUR_MODULES.replace("profile = \"silent\"", "profile = \"silent\"\nlabel = \"brake\"");
    assert!(parse_scenario_str(&text).unwrap_err().to_string().contains("does not apply"));
    let text = FOUR_MODULES.replace("profile = \"silent\"", "profile = \"byzantine_fixed\"");
    assert!(parse_scenario_str(&text).unwrap_err().to_string().contains("missing parameter label"));
}

#[test]
fn too_many_byzantine_modules_need_the_violation_flag() {
    let text = FOUR_MODULES.replace(
        "count = 3\n",
        "count = 2\n\n[[module]]\nprofile = \"byzantine_fixed\"\nlabel = \"brake\"\n",
    );
    let text = text.replace("profile = \"silent\"", "profile = \"byzantine_fixed\"\nlabel = \"brake\"");
    let err = parse_scenario_str(&text).unwrap_err();
    assert!(err.to_string().contains("expects_violation"), "{err}");
    let ok = text.replace("seed = 9", "seed = 9\nexpects_violation = true");
    assert_eq!(parse_scenario_str(&ok).unwrap().byzantine_count(), 2);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = FOUR_MODULES.replace("seed = 9", "seed = 9\nspeed = 3");
    assert!(parse_scenario_str(&text).is_err());
}

#[test]
fn missing_file_is_an_error() {
    assert!(parse_scenario("/nonexistent/scenario.toml").is_err());
}

#[test]
fn bundled_scenarios_parse_and_round_trip() {
    for name in library::NAMES {
        let sc = library::load(name).unwrap();
        assert_eq!(sc.name, *name);
        let again = parse_scenario_str(&to_toml(&sc)).unwrap();
        assert_eq!(again, sc, "{name}");
    }
    assert!(library::load("no_such").is_none());
}

#[test]
fn bundled_scenarios_load_from_disk() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for name in library::NAMES {
        let sc = parse_scenario(dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(sc, library::load(name).unwrap());
    }
}

fn profile() -> impl Strategy<Value = FaultProfile> {
    let space = DecisionSpace::new(&["continue", "brake", "swerve"], "brake").unwrap();
    let label = prop::sample::select(space.labels().to_vec());
    prop_oneof![
        Just(FaultProfile::Honest),
        Just(FaultProfile::Silent),
        (0u64..5).prop_map(|at_frame| FaultProfile::Crash { at_frame }),
        (1u64..4).prop_map(|delay_rounds| FaultProfile::Slow { delay_rounds }),
        (any::<u64>(), 0.0f64..0.5).prop_map(|(perturb_seed, error_rate)| FaultProfile::DiverseHonest {
            perturb_seed,
            error_rate
        }),
        label.clone().prop_map(|label| FaultProfile::ByzantineFixed { label }),
        any::<u64>().prop_map(|seed| FaultProfile::ByzantineRandom { seed }),
        (label.clone(), label).prop_map(|(label_a, label_b)| FaultProfile::ByzantineEquivocate {
            label_a,
            label_b
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_scenarios_round_trip(
        profiles in prop::collection::vec(profile(), 4),
        seed in any::<u64>(),
        timeout in 1u64..20,
        rows in prop::collection::vec((0usize..3, prop::collection::vec(0usize..3, 4), any::<bool>()), 1..6),
    ) {
        let labels = ["continue", "brake", "swerve"];
        let mut sc = parse_scenario_str(FOUR_MODULES).unwrap().with_seed(seed);
        sc.timeout_rounds = timeout;
        for (m, p) in sc.modules.iter_mut().zip(profiles) {
            m.profile = p;
        }
        sc.expects_violation = sc.byzantine_count() > 1;
        let mut table = Vec::new();
        for (truth, observed, critical) in &rows {
            table.push(FrameObservation {
                truth: sc.space.value(labels[*truth]).unwrap(),
                observed: observed.iter().map(|l| sc.space.value(labels[*l]).unwrap()).collect(),
                critical: *critical,
            });
        }
        sc.observations = ObservationTable::new(table);
        prop_assume!(sc.validate().is_ok());
        let again = parse_scenario_str(&to_toml(&sc)).unwrap();
        prop_assert_eq!(again, sc);
    }
}
