use std::collections::BTreeMap;

use bft_ensemble::canonical::Canonical;
use bft_ensemble::quorum::QuorumConfig;
use bft_ensemble::voter::{
    fast_path_agree, tally, weighted_tally, NoQuorumReason, Verdict, VoteStrategy,
    DEFAULT_ABSTAIN_BELOW,
};
use proptest::prelude::*;

mod common;
use common::{strategies, Bench, LABELS};

#[test]
fn tally_matches_counting_oracle_exhaustively() {
    let cases = common::exhaustive_check().unwrap();
    // 4^5 assignments alone at n=5 with three labels.
    assert!(cases > 1024 * 6);
}

#[test]
fn duplicate_voter_is_rejected() {
    let bench = Bench::new(2);
    let cfg = QuorumConfig::new(4, 1).unwrap();
    let mut outputs = bench.outputs(&[Some(0), Some(1)]);
    outputs.push(outputs[0].clone());
    assert!(tally(&outputs, VoteStrategy::Majority, &cfg).is_err());
}

#[test]
fn kofn_threshold_out_of_range_is_rejected() {
    let bench = Bench::new(2);
    let cfg = QuorumConfig::new(3, 0).unwrap();
    let outputs = bench.outputs(&[Some(0), Some(0), Some(1)]);
    assert!(tally(&outputs, VoteStrategy::KofN(0), &cfg).is_err());
    assert!(tally(&outputs, VoteStrategy::KofN(4), &cfg).is_err());
}

#[test]
fn no_quorum_escalates_only_on_critical_frames() {
    let bench = Bench::new(3);
    let cfg = QuorumConfig::new(5, 1).unwrap();
    let outputs = bench.outputs(&[Some(0), Some(0), Some(1), Some(1), Some(2)]);
    let v = tally(&outputs, VoteStrategy::Majority, &cfg).unwrap();
    assert!(matches!(v.clone().escalate(false, &bench.space), Verdict::NoQuorum { .. }));
    match v.escalate(true, &bench.space) {
        Verdict::SafeMode { value, cause } => {
            assert_eq!(value.label(), "a");
            assert_eq!(cause, NoQuorumReason::BelowThreshold);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn fast_path_rounds() {
    let bench = Bench::new(2);
    let cfg = QuorumConfig::new(4, 1).unwrap();
    let agree = bench.outputs(&[Some(0), Some(0), Some(0), Some(0)]);
    let ann: BTreeMap<_, _> = agree.iter().map(|o| (o.module_id, o.value.digest())).collect();
    let (v, rounds) = fast_path_agree(&ann, || unreachable!(), &cfg, &bench.space).unwrap();
    assert_eq!((v.decided_value().unwrap().label(), rounds), ("a", 1));

    let dissent = bench.outputs(&[Some(0), Some(1), Some(0), Some(0)]);
    let ann: BTreeMap<_, _> = dissent.iter().map(|o| (o.module_id, o.value.digest())).collect();
    let (v, rounds) = fast_path_agree(&ann, || dissent.clone(), &cfg, &bench.space).unwrap();
    assert_eq!((v.decided_value().unwrap().label(), rounds), ("a", 2));
}

fn votes_strategy(max_n: usize) -> impl Strategy<Value = Vec<Option<usize>>> {
    (1..=max_n).prop_flat_map(|n| prop::collection::vec(prop::option::weighted(0.85, 0..3usize), n))
}

proptest! {
    #[test]
    fn decided_supporters_all_voted_for_the_value(votes in votes_strategy(5), k in 1usize..=5) {
        let n = votes.len();
        let bench = Bench::new(3);
        let cfg = QuorumConfig::new(n, (n - 1) / 3).unwrap();
        let outputs = bench.outputs(&votes);
        let mut all = strategies(n);
        if k <= n {
            all.push(VoteStrategy::KofN(k));
        }
        for s in all {
            if let Verdict::Decided { value, supporters } = tally(&outputs, s, &cfg).unwrap() {
                for m in &supporters {
                    prop_assert_eq!(votes[*m].map(|l| LABELS[l]), Some(value.label()));
                }
                let backers = votes.iter().filter(|l| l.map(|l| LABELS[l]) == Some(value.label())).count();
                prop_assert_eq!(supporters.len(), backers);
            }
        }
    }

    #[test]
    fn verdict_ignores_output_order(votes in votes_strategy(5), seed in any::<u64>()) {
        let n = votes.len();
        let bench = Bench::new(3);
        let cfg = QuorumConfig::new(n, (n - 1) / 3).unwrap();
        let outputs = bench.outputs(&votes);
        let mut shuffled = outputs.clone();
        let len = shuffled.len();
        if len > 1 {
            shuffled.rotate_left((seed % len as u64) as usize);
            shuffled.reverse();
        }
        for s in strategies(n) {
            prop_assert_eq!(tally(&outputs, s, &cfg).unwrap(), tally(&shuffled, s, &cfg).unwrap());
        }
    }

    #[test]
    fn strict_majority_threshold_is_majority(votes in votes_strategy(5)) {
        let n = votes.len();
        let bench = Bench::new(3);
        let cfg = QuorumConfig::new(n, (n - 1) / 3).unwrap();
        let outputs = bench.outputs(&votes);
        prop_assert_eq!(
            tally(&outputs, VoteStrategy::KofN(n / 2 + 1), &cfg).unwrap().decided_value().cloned(),
            tally(&outputs, VoteStrategy::Majority, &cfg).unwrap().decided_value().cloned()
        );
    }

    #[test]
    fn equal_confidence_weighting_is_majority_on_full_participation(
        votes in (1..=5usize).prop_flat_map(|n| prop::collection::vec(0..3usize, n)),
        conf in 0.1f64..=1.0,
    ) {
        let n = votes.len();
        let bench = Bench::new(3);
        let cfg = QuorumConfig::new(n, (n - 1) / 3).unwrap();
        let some: Vec<Option<usize>> = votes.iter().copied().map(Some).collect();
        let mut outputs = bench.outputs(&some);
        for o in &mut outputs {
            o.confidence = conf;
        }
        let weighted = weighted_tally(&outputs, 0.5, DEFAULT_ABSTAIN_BELOW, &cfg).unwrap();
        let majority = tally(&outputs, VoteStrategy::Majority, &cfg).unwrap();
        prop_assert_eq!(weighted.decided_value(), majority.decided_value());
    }
}
