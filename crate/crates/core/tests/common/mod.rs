//! Counting oracle for the voter, shared by the voter and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use bft_ensemble::auth::KeyRegistry;
use bft_ensemble::message::ModuleOutput;
use bft_ensemble::quorum::QuorumConfig;
use bft_ensemble::space::DecisionSpace;
use bft_ensemble::voter::{tally, NoQuorumReason, Verdict, VoteStrategy};

pub const LABELS: [&str; 3] = ["a", "b", "c"];

#[derive(Debug, PartialEq)]
pub enum Expected {
    Decided(usize, BTreeSet<usize>),
    Tie,
    Below,
    NotUnanimous,
}

/// Independent counting oracle over raw label indices. `votes[m]` is
/// `None` for an absent module.
pub fn oracle(votes: &[Option<usize>], strategy: VoteStrategy) -> Expected {
    let n = votes.len();
    let mut count = [0usize; LABELS.len()];
    for l in votes.iter().flatten() {
        count[*l] += 1;
    }
    let voters = |l: usize| -> BTreeSet<usize> {
        (0..n).filter(|m| votes[*m] == Some(l)).collect()
    };
    match strategy {
        VoteStrategy::Majority => {
            for l in 0..LABELS.len() {
                if count[l] * 2 > n {
                    return Expected::Decided(l, voters(l));
                }
            }
            Expected::Below
        }
        VoteStrategy::KofN(k) => {
            let mut winners = Vec::new();
            for l in 0..LABELS.len() {
                if count[l] >= k {
                    winners.push(l);
                }
            }
            match winners.len() {
                0 => Expected::Below,
                1 => Expected::Decided(winners[0], voters(winners[0])),
                _ => Expected::Tie,
            }
        }
        VoteStrategy::Unanimity => {
            for l in 0..LABELS.len() {
                if count[l] == n {
                    return Expected::Decided(l, voters(l));
                }
            }
            Expected::NotUnanimous
        }
        _ => unreachable!("oracle covers counting strategies"),
    }
}

pub fn observed(v: &Verdict, space: &DecisionSpace) -> Expected {
    match v {
        Verdict::Decided { value, supporters } => {
            let idx = space.labels().iter().position(|l| l == value).unwrap();
            Expected::Decided(idx, supporters.clone())
        }
        Verdict::NoQuorum { reason, .. } => match reason {
            NoQuorumReason::Tie => Expected::Tie,
            NoQuorumReason::BelowThreshold => Expected::Below,
            NoQuorumReason::NotUnanimous => Expected::NotUnanimous,
            other => panic!("unexpected reason {other:?}"),
        },
        Verdict::SafeMode { .. } => panic!("tally never escalates on its own"),
    }
}

pub struct Bench {
    pub reg: Arc<KeyRegistry>,
    pub space: DecisionSpace,
}

impl Bench {
    pub fn new(labels: usize) -> Self {
        Self {
            reg: Arc::new(KeyRegistry::generate(5, 77)),
            space: DecisionSpace::new(&LABELS[..labels], LABELS[0]).unwrap(),
        }
    }

    pub fn outputs(&self, votes: &[Option<usize>]) -> Vec<ModuleOutput> {
        votes
            .iter()
            .enumerate()
            .filter_map(|(m, l)| {
                l.map(|l| {
                    ModuleOutput::new(
                        &self.reg.signer(m).unwrap(),
                        0,
                        self.space.value(LABELS[l]).unwrap(),
                        0.9,
                    )
                })
            })
            .collect()
    }
}

pub fn assignments(n: usize, labels: usize) -> Vec<Vec<Option<usize>>> {
    let choices: Vec<Option<usize>> = std::iter::once(None).chain((0..labels).map(Some)).collect();
    let mut all = vec![Vec::new()];
    for _ in 0..n {
        all = all
            .into_iter()
            .flat_map(|prefix| {
                choices.iter().map(move |c| {
                    let mut p = prefix.clone();
                    p.push(*c);
                    p
                })
            })
            .collect();
    }
    all
}


pub fn strategies(n: usize) -> Vec<VoteStrategy> {
    let mut s = vec![VoteStrategy::Majority, VoteStrategy::Unanimity];
    s.extend((2..=n).map(VoteStrategy::KofN));
    s
}

/// Every assignment (absent or one of up to three labels) for n in 1..=5,
/// every counting strategy. Returns the number of cases checked.
pub fn exhaustive_check() -> Result<u64, String> {
    let mut cases = 0u64;
    for n in 1..=5 {
        let cfg = QuorumConfig::new(n, (n - 1) / 3).unwrap();
        for labels in 1..=3 {
            let bench = Bench::new(labels);
            for votes in assignments(n, labels) {
                let outputs = bench.outputs(&votes);
                for strategy in strategies(n) {
                    let got = tally(&outputs, strategy, &cfg).map_err(|e| e.to_string())?;
                    let want = oracle(&votes, strategy);
                    let got = observed(&got, &bench.space);
                    if got != want {
                        return Err(format!("n={n} votes={votes:?} {strategy:?}: got {got:?}, oracle {want:?}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(cases)
}
