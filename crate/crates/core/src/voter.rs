//! Output-combination strategies that work with or without the replica protocol.
//!
//! Ties never produce a decision; absent modules count as a vote for nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::auth::ModuleId;
use crate::canonical::Digest;
use crate::message::ModuleOutput;
use crate::quorum::QuorumConfig;
use crate::space::{DecisionSpace, DecisionValue};

/// Confidence below which a weighted vote is treated as an abstention.
pub const DEFAULT_ABSTAIN_BELOW: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VoteStrategy {
    Majority,
    KofN(usize),
    Unanimity,
    Weighted(f64),
    FastPathThenMajority,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("module {0} voted more than once")]
    DuplicateVoter(ModuleId),
    #[error("outputs span several frames")]
    MixedFrames,
    #[error("module id {0} is outside the ensemble")]
    UnknownVoter(ModuleId),
    #[error("k={k} must lie in 1..={n}")]
    BadThreshold { k: usize, n: usize },
    #[error("weighted fraction {0} must lie in (0.5, 1]")]
    BadFraction(String),
    #[error("unknown strategy {0:?}")]
    Unknown(String),
}

impl VoteStrategy {
    pub fn validate(&self, n: usize) -> Result<(), VoteError> {
        match *self {
            VoteStrategy::KofN(k) if k == 0 || k > n => Err(VoteError::BadThreshold { k, n }),
            VoteStrategy::Weighted(x) if !(x > 0.5 && x <= 1.0) => {
                Err(VoteError::BadFraction(x.to_string()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for VoteStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VoteStrategy::Majority => f.write_str("majority"),
            VoteStrategy::KofN(k) => write!(f, "k_of_n:{k}"),
            VoteStrategy::Unanimity => f.write_str("unanimity"),
            VoteStrategy::Weighted(x) => write!(f, "weighted:{x}"),
            VoteStrategy::FastPathThenMajority => f.write_str("fastpath"),
        }
    }
}

impl FromStr for VoteStrategy {
    type Err = VoteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VoteError::Unknown(s.to_string());
        match s {
            "majority" => Ok(VoteStrategy::Majority),
            "unanimity" => Ok(VoteStrategy::Unanimity),
            "fastpath" => Ok(VoteStrategy::FastPathThenMajority),
            _ => {
                if let Some(k) = s.strip_prefix("k_of_n:") {
                    k.parse().map(VoteStrategy::KofN).map_err(|_| bad())
                } else if let Some(x) = s.strip_prefix("weighted:") {
                    let x: f64 = x.parse().map_err(|_| bad())?;
                    if x > 0.5 && x <= 1.0 {
                        Ok(VoteStrategy::Weighted(x))
                    } else {
                        Err(VoteError::BadFraction(x.to_string()))
                    }
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoQuorumReason {
    BelowThreshold,
    Tie,
    NotUnanimous,
    AllAbstained,
    MissingAnnouncements,
    Timeout,
}

impl NoQuorumReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoQuorumReason::BelowThreshold => "below_threshold",
            NoQuorumReason::Tie => "tie",
            NoQuorumReason::NotUnanimous => "not_unanimous",
            NoQuorumReason::AllAbstained => "all_abstained",
            NoQuorumReason::MissingAnnouncements => "missing_announcements",
            NoQuorumReason::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            NoQuorumReason::BelowThreshold,
            NoQuorumReason::Tie,
            NoQuorumReason::NotUnanimous,
            NoQuorumReason::AllAbstained,
            NoQuorumReason::MissingAnnouncements,
            NoQuorumReason::Timeout,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Decided {
        value: DecisionValue,
        supporters: BTreeSet<ModuleId>,
    },
    NoQuorum {
        tallies: BTreeMap<DecisionValue, usize>,
        reason: NoQuorumReason,
    },
    SafeMode {
        value: DecisionValue,
        cause: NoQuorumReason,
    },
}

impl Verdict {
    pub fn decided_value(&self) -> Option<&DecisionValue> {
        match self {
            Verdict::Decided { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn is_decided(&self) -> bool {
        matches!(self, Verdict::Decided { .. })
    }

    /// Escalates a missing quorum to the safe default on action-critical frames.
    pub fn escalate(self, critical: bool, space: &DecisionSpace) -> Verdict {
        match self {
            Verdict::NoQuorum { reason, .. } if critical => Verdict::SafeMode {
                value: space.safe_default().clone(),
                cause: reason,
            },
            v => v,
        }
    }
}

fn check_inputs(outputs: &[ModuleOutput], cfg: &QuorumConfig) -> Result<(), VoteError> {
    let mut seen = BTreeSet::new();
    for o in outputs {
        if o.module_id >= cfg.n() {
            return Err(VoteError::UnknownVoter(o.module_id));
        }
        if !seen.insert(o.module_id) {
            return Err(VoteError::DuplicateVoter(o.module_id));
        }
    }
    if outputs.windows(2).any(|w| w[0].frame != w[1].frame) {
        return Err(VoteError::MixedFrames);
    }
    Ok(())
}

fn counts(outputs: &[ModuleOutput]) -> BTreeMap<DecisionValue, BTreeSet<ModuleId>> {
    let mut by_value: BTreeMap<DecisionValue, BTreeSet<ModuleId>> = BTreeMap::new();
    for o in outputs {
        by_value.entry(o.value.clone()).or_default().insert(o.module_id);
    }
    by_value
}

fn tallies(by_value: &BTreeMap<DecisionValue, BTreeSet<ModuleId>>) -> BTreeMap<DecisionValue, usize> {
    by_value.iter().map(|(v, s)| (v.clone(), s.len())).collect()
}

/// Combines one frame's verified outputs.
pub fn tally(
    outputs: &[ModuleOutput],
    strategy: VoteStrategy,
    cfg: &QuorumConfig,
) -> Result<Verdict, VoteError> {
    check_inputs(outputs, cfg)?;
    strategy.validate(cfg.n())?;
    let by_value = counts(outputs);
    let n = cfg.n();
    let no = |reason| Verdict::NoQuorum {
        tallies: tallies(&by_value),
        reason,
    };
    let verdict = match strategy {
        VoteStrategy::Majority | VoteStrategy::FastPathThenMajority => {
            match by_value.iter().find(|(_, s)| 2 * s.len() > n) {
                Some((v, s)) => Verdict::Decided {
                    value: v.clone(),
                    supporters: s.clone(),
                },
                None => no(NoQuorumReason::BelowThreshold),
            }
        }
        VoteStrategy::KofN(k) => {
            let reached: Vec<_> = by_value.iter().filter(|(_, s)| s.len() >= k).collect();
            match reached.as_slice() {
                [(v, s)] => Verdict::Decided {
                    value: (*v).clone(),
                    supporters: (*s).clone(),
                },
                [] => no(NoQuorumReason::BelowThreshold),
                _ => no(NoQuorumReason::Tie),
            }
        }
        VoteStrategy::Unanimity => match by_value.iter().next() {
            Some((v, s)) if by_value.len() == 1 && s.len() == n => Verdict::Decided {
                value: v.clone(),
                supporters: s.clone(),
            },
            _ => no(NoQuorumReason::NotUnanimous),
        },
        VoteStrategy::Weighted(fraction) => {
            return weighted_tally(outputs, fraction, DEFAULT_ABSTAIN_BELOW, cfg)
        }
    };
    Ok(verdict)
}

/// Confidence-weighted vote: `value` wins iff its share of the non-abstaining
/// weight strictly exceeds `min_weight_fraction`.
pub fn weighted_tally(
    outputs: &[ModuleOutput],
    min_weight_fraction: f64,
    abstain_below: f64,
    cfg: &QuorumConfig,
) -> Result<Verdict, VoteError> {
    check_inputs(outputs, cfg)?;
    let voting: Vec<ModuleOutput> = outputs
        .iter()
        .filter(|o| o.confidence >= abstain_below)
        .cloned()
        .collect();
    let by_value = counts(&voting);
    let mut weights: BTreeMap<&DecisionValue, f64> = BTreeMap::new();
    for o in &voting {
        *weights.entry(&o.value).or_default() += o.confidence;
    }
    let total: f64 = weights.values().sum();
    if voting.is_empty() || total <= 0.0 {
        return Ok(Verdict::NoQuorum {
            tallies: tallies(&by_value),
            reason: NoQuorumReason::AllAbstained,
        });
    }
    let winner = weights
        .iter()
        .find(|(_, w)| **w / total > min_weight_fraction)
        .map(|(v, _)| (*v).clone());
    Ok(match winner {
        Some(value) => Verdict::Decided {
            supporters: by_value[&value].clone(),
            value,
        },
        None => Verdict::NoQuorum {
            tallies: tallies(&by_value),
            reason: NoQuorumReason::BelowThreshold,
        },
    })
}

/// Result of the digest round of the hash fast path.
#[derive(Debug, Clone, PartialEq)]
pub enum FastPathStep {
    Decided(Verdict),
    /// Digests disagree or some are missing: fetch full outputs.
    NeedFullOutputs,
    /// More than `f` announcements never arrived.
    NoQuorum(Verdict),
}

/// First round of the fast path: decides iff every module announced the
/// same digest.
pub fn fast_path_check(
    announcements: &BTreeMap<ModuleId, Digest>,
    cfg: &QuorumConfig,
    space: &DecisionSpace,
) -> FastPathStep {
    let missing = cfg.n().saturating_sub(announcements.len());
    if missing > cfg.f() {
        return FastPathStep::NoQuorum(Verdict::NoQuorum {
            tallies: BTreeMap::new(),
            reason: NoQuorumReason::MissingAnnouncements,
        });
    }
    let distinct: BTreeSet<&Digest> = announcements.values().collect();
    if missing == 0 && distinct.len() == 1 {
        let d = distinct.into_iter().next().expect("one digest");
        if let Some(value) = space.value_for_digest(d) {
            return FastPathStep::Decided(Verdict::Decided {
                value: value.clone(),
                supporters: announcements.keys().copied().collect(),
            });
        }
    }
    FastPathStep::NeedFullOutputs
}

/// The full two-round fast path: digests first, full outputs and a majority
/// tally only on mismatch. Returns the verdict and the rounds used.
///
/// The fast path has no equivocation protection of its own: a sender that
/// announces different digests to different peers is only caught because
/// every peer then falls back to comparing full outputs.
pub fn fast_path_agree(
    announcements: &BTreeMap<ModuleId, Digest>,
    fetch_full_outputs: impl FnOnce() -> Vec<ModuleOutput>,
    cfg: &QuorumConfig,
    space: &DecisionSpace,
) -> Result<(Verdict, u32), VoteError> {
    match fast_path_check(announcements, cfg, space) {
        FastPathStep::Decided(v) => Ok((v, 1)),
        FastPathStep::NoQuorum(v) => Ok((v, 1)),
        FastPathStep::NeedFullOutputs => {
            let outputs = fetch_full_outputs();
            Ok((tally(&outputs, VoteStrategy::Majority, cfg)?, 2))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::KeyRegistry;
    use crate::canonical::Canonical;
    use std::sync::Arc;

    struct Fixture {
        reg: Arc<KeyRegistry>,
        space: DecisionSpace,
    }

    impl Fixture {
        fn new(labels: &[&str]) -> Self {
            Self {
                reg: Arc::new(KeyRegistry::generate(8, 3)),
                space: DecisionSpace::new(labels, labels[0]).unwrap(),
            }
        }

        fn outputs(&self, votes: &[&str]) -> Vec<ModuleOutput> {
            self.weighted(&votes.iter().map(|v| (*v, 0.9)).collect::<Vec<_>>())
        }

        fn weighted(&self, votes: &[(&str, f64)]) -> Vec<ModuleOutput> {
            votes
                .iter()
                .enumerate()
                .map(|(i, (v, c))| {
                    ModuleOutput::new(&self.reg.signer(i).unwrap(), 0, self.space.value(v).unwrap(), *c)
                })
                .collect()
        }
    }

    fn decided(v: &Verdict) -> Option<&str> {
        v.decided_value().map(|v| v.label())
    }

    #[test]
    fn majority_examples() {
        let fx = Fixture::new(&["continue", "brake", "stop"]);
        let cfg = QuorumConfig::new(5, 1).unwrap();
        let v = tally(
            &fx.outputs(&["continue", "continue", "continue", "continue", "brake"]),
            VoteStrategy::Majority,
            &cfg,
        )
        .unwrap();
        assert_eq!(decided(&v), Some("continue"));
        match v {
            Verdict::Decided { supporters, .. } => {
                assert_eq!(supporters, [0, 1, 2, 3].into())
            }
            _ => unreachable!(),
        }
        let v = tally(
            &fx.outputs(&["stop", "stop", "stop", "stop", "continue"]),
            VoteStrategy::Majority,
            &cfg,
        )
        .unwrap();
        assert_eq!(decided(&v), Some("stop"));
    }

    #[test]
    fn two_out_of_three_triggers_only_on_two() {
        let fx = Fixture::new(&["alarm", "quiet"]);
        let cfg = QuorumConfig::new(3, 0).unwrap();
        let v = tally(&fx.outputs(&["alarm", "alarm", "quiet"]), VoteStrategy::KofN(2), &cfg).unwrap();
        assert_eq!(decided(&v), Some("alarm"));
        let v = tally(&fx.outputs(&["alarm", "quiet", "quiet"]), VoteStrategy::KofN(2), &cfg).unwrap();
        assert_eq!(decided(&v), Some("quiet"));
    }

    #[test]
    fn split_vote_has_no_majority() {
        let fx = Fixture::new(&["A", "B", "C"]);
        let cfg = QuorumConfig::new(5, 1).unwrap();
        let v = tally(&fx.outputs(&["A", "A", "B", "B", "C"]), VoteStrategy::Majority, &cfg).unwrap();
        assert!(matches!(v, Verdict::NoQuorum { reason: NoQuorumReason::BelowThreshold, .. }));
        let v = tally(&fx.outputs(&["A", "A", "B", "B", "C"]), VoteStrategy::KofN(2), &cfg).unwrap();
        assert!(matches!(v, Verdict::NoQuorum { reason: NoQuorumReason::Tie, .. }));
    }

    #[test]
    fn one_dissent_defeats_unanimity() {
        let fx = Fixture::new(&["X", "Y"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let v = tally(&fx.outputs(&["X", "X", "X", "Y"]), VoteStrategy::Unanimity, &cfg).unwrap();
        assert!(!v.is_decided());
        let v = tally(&fx.outputs(&["X", "X", "X"]), VoteStrategy::Unanimity, &cfg).unwrap();
        assert!(!v.is_decided(), "an absentee blocks unanimity");
        let v = tally(&fx.outputs(&["X", "X", "X", "X"]), VoteStrategy::Unanimity, &cfg).unwrap();
        assert_eq!(decided(&v), Some("X"));
    }

    #[test]
    fn duplicate_voter_is_an_input_error() {
        let fx = Fixture::new(&["A", "B"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let mut outs = fx.outputs(&["A", "B"]);
        outs.push(outs[0].clone());
        assert_eq!(
            tally(&outs, VoteStrategy::Majority, &cfg),
            Err(VoteError::DuplicateVoter(0))
        );
    }

    #[test]
    fn weighted_example_by_direct_summation() {
        let fx = Fixture::new(&["A", "B"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let outs = fx.weighted(&[("A", 0.9), ("B", 0.3), ("B", 0.3)]);
        // weight(A) = 0.9, weight(B) = 0.6, total 1.5, share(A) = 0.6 > 0.5.
        let v = weighted_tally(&outs, 0.5, DEFAULT_ABSTAIN_BELOW, &cfg).unwrap();
        assert_eq!(decided(&v), Some("A"));
        let v = weighted_tally(&outs, 0.65, DEFAULT_ABSTAIN_BELOW, &cfg).unwrap();
        assert!(!v.is_decided());
    }

    #[test]
    fn weighted_all_abstain() {
        let fx = Fixture::new(&["A", "B"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let outs = fx.weighted(&[("A", 0.0), ("B", 0.0)]);
        let v = weighted_tally(&outs, 0.5, DEFAULT_ABSTAIN_BELOW, &cfg).unwrap();
        assert!(matches!(v, Verdict::NoQuorum { reason: NoQuorumReason::AllAbstained, .. }));
        let outs = fx.weighted(&[("A", 0.04), ("B", 0.9)]);
        let v = weighted_tally(&outs, 0.5, DEFAULT_ABSTAIN_BELOW, &cfg).unwrap();
        assert_eq!(decided(&v), Some("B"));
    }

    #[test]
    fn fast_path_decides_in_one_round_when_all_digests_match() {
        let fx = Fixture::new(&["continue", "brake"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let d = fx.space.value("continue").unwrap().digest();
        let ann: BTreeMap<_, _> = (0..4).map(|i| (i, d)).collect();
        let (v, rounds) = fast_path_agree(&ann, || unreachable!(), &cfg, &fx.space).unwrap();
        assert_eq!((decided(&v), rounds), (Some("continue"), 1));
    }

    #[test]
    fn fast_path_falls_back_to_majority() {
        let fx = Fixture::new(&["continue", "brake"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let outs = fx.outputs(&["continue", "continue", "continue", "brake"]);
        let ann: BTreeMap<_, _> = outs.iter().map(|o| (o.module_id, o.value.digest())).collect();
        let (v, rounds) = fast_path_agree(&ann, || outs.clone(), &cfg, &fx.space).unwrap();
        assert_eq!((decided(&v), rounds), (Some("continue"), 2));
    }

    #[test]
    fn fast_path_gives_up_when_too_many_are_missing() {
        let fx = Fixture::new(&["continue", "brake"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let d = fx.space.value("continue").unwrap().digest();
        let ann: BTreeMap<_, _> = (0..2).map(|i| (i, d)).collect();
        let (v, _) = fast_path_agree(&ann, Vec::new, &cfg, &fx.space).unwrap();
        assert!(matches!(v, Verdict::NoQuorum { reason: NoQuorumReason::MissingAnnouncements, .. }));
    }

    #[test]
    fn equivocated_announcements_still_give_uniform_verdicts() {
        // Module 3 announces digest(brake) to modules {0, 1} and
        // digest(stop) to {2}; everyone falls back and sees the honest
        // majority, whichever copy of module 3's full output it receives.
        let fx = Fixture::new(&["continue", "brake", "stop"]);
        let cfg = QuorumConfig::new(4, 1).unwrap();
        let honest = fx.outputs(&["continue", "continue", "continue"]);
        let s3 = fx.reg.signer(3).unwrap();
        let evil = |label: &str| ModuleOutput::new(&s3, 0, fx.space.value(label).unwrap(), 1.0);
        let mut verdicts = Vec::new();
        for (receiver, lie) in [(0, "brake"), (1, "brake"), (2, "stop")] {
            let mut ann: BTreeMap<_, _> =
                honest.iter().map(|o| (o.module_id, o.value.digest())).collect();
            ann.insert(3, fx.space.value(lie).unwrap().digest());
            let mut full = honest.clone();
            full.push(evil(lie));
            let (v, rounds) = fast_path_agree(&ann, || full, &cfg, &fx.space).unwrap();
            assert_eq!(rounds, 2, "receiver {receiver} must fall back");
            verdicts.push(decided(&v).map(str::to_string));
        }
        assert!(verdicts.iter().all(|v| v.as_deref() == Some("continue")));
    }

    #[test]
    fn strategy_strings() {
        for s in ["majority", "k_of_n:2", "unanimity", "weighted:0.6", "fastpath"] {
            assert_eq!(s.parse::<VoteStrategy>().unwrap().to_string(), s);
        }
        assert!("weighted:0.5".parse::<VoteStrategy>().is_err());
        assert!("k_of_n:x".parse::<VoteStrategy>().is_err());
        assert!("plurality".parse::<VoteStrategy>().is_err());
        assert_eq!(
            VoteStrategy::KofN(5).validate(4),
            Err(VoteError::BadThreshold { k: 5, n: 4 })
        );
    }
}
