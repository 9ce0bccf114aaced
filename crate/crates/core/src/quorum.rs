//! Replica-count arithmetic for an ensemble tolerating `f` Byzantine members.

use thiserror::Error;

/// Smallest ensemble that tolerates `f` arbitrary faults: `3f + 1`.
pub const fn min_replicas(f: usize) -> usize {
    3 * f + 1
}

/// Votes needed to prepare or commit: `2f + 1`.
pub const fn quorum_size(f: usize) -> usize {
    2 * f + 1
}

/// Matching replies an external observer waits for before trusting a decision: `f + 1`.
pub const fn client_match(f: usize) -> usize {
    f + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuorumError {
    #[error("n < 3f+1: {n} replicas cannot tolerate f={f} faults (need at least {required})")]
    TooFewReplicas { n: usize, f: usize, required: usize },
    #[error("replica count must be positive")]
    Empty,
}

/// The `(n, f)` pair an ensemble runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuorumConfig {
    n: usize,
    f: usize,
}

impl QuorumConfig {
    pub fn new(n: usize, f: usize) -> Result<Self, QuorumError> {
        if n == 0 {
            return Err(QuorumError::Empty);
        }
        let required = min_replicas(f);
        if n < required {
            return Err(QuorumError::TooFewReplicas { n, f, required });
        }
        Ok(Self { n, f })
    }

    /// The tightest configuration for `f`: `n = 3f + 1`.
    pub fn for_faults(f: usize) -> Self {
        Self {
            n: min_replicas(f),
            f,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn quorum(&self) -> usize {
        quorum_size(self.f)
    }

    pub fn client_match(&self) -> usize {
        client_match(self.f)
    }

    /// How many members may be taken out of service while a quorum stays reachable.
    pub fn isolation_budget(&self) -> usize {
        self.n - self.quorum()
    }

    /// Replica that leads `view`.
    pub fn leader_of(&self, view: u64) -> usize {
        (view % self.n as u64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formulas_at_small_f() {
        assert_eq!(min_replicas(0), 1);
        assert_eq!(min_replicas(1), 4);
        assert_eq!(min_replicas(2), 7);
        assert_eq!(quorum_size(0), 1);
        assert_eq!(quorum_size(1), 3);
        assert_eq!(quorum_size(2), 5);
        assert_eq!(client_match(0), 1);
        assert_eq!(client_match(1), 2);
        assert_eq!(client_match(3), 4);
    }

    #[test]
    fn silent_slack_equals_f() {
        for f in 0..50 {
            assert_eq!(min_replicas(f) - quorum_size(f), f);
            assert!(client_match(f) <= quorum_size(f));
        }
    }

    #[test]
    fn rejects_undersized_ensembles() {
        assert_eq!(
            QuorumConfig::new(3, 1),
            Err(QuorumError::TooFewReplicas {
                n: 3,
                f: 1,
                required: 4
            })
        );
        assert_eq!(QuorumConfig::new(0, 0), Err(QuorumError::Empty));
        let cfg = QuorumConfig::new(5, 1).unwrap();
        assert_eq!(cfg.quorum(), 3);
        assert_eq!(cfg.isolation_budget(), 2);
        assert_eq!(QuorumConfig::for_faults(1).isolation_budget(), 1);
    }

    fn subsets(n: usize, k: usize) -> Vec<u32> {
        (0u32..(1 << n)).filter(|m| m.count_ones() as usize == k).collect()
    }

    #[test]
    fn any_two_quorums_share_f_plus_one() {
        for f in 1..=2 {
            let n = min_replicas(f);
            let quorums = subsets(n, quorum_size(f));
            for a in &quorums {
                for b in &quorums {
                    assert!((a & b).count_ones() as usize >= f + 1, "f={f} {a:b} {b:b}");
                }
            }
        }
    }
}
