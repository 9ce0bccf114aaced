//! Health monitoring: flags modules that keep disagreeing with committed
//! outcomes, isolates them within the availability budget, and tracks their
//! restart and recovery.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::auth::ModuleId;
use crate::quorum::QuorumConfig;
use crate::space::DecisionValue;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.3;
pub const DEFAULT_RESTART_DELAY: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mark {
    Agreed,
    Disagreed,
    Absent,
}

/// What the supervisor saw from one module in one committed frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Seen {
    Output(DecisionValue),
    NoOutput,
    /// Two conflicting signed outputs.
    Equivocated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationLedger {
    window: usize,
    threshold: f64,
    marks: Vec<VecDeque<Mark>>,
}

impl DeviationLedger {
    pub fn new(modules: usize, window: usize, threshold: f64) -> Self {
        Self {
            window: window.max(1),
            threshold,
            marks: vec![VecDeque::new(); modules],
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn mark(&mut self, module: ModuleId, mark: Mark) {
        let buf = &mut self.marks[module];
        if buf.len() == self.window {
            buf.pop_front();
        }
        buf.push_back(mark);
    }

    /// Marks every module in `seen` against the committed value.
    pub fn record_round(&mut self, committed: &DecisionValue, seen: &BTreeMap<ModuleId, Seen>) {
        for (m, s) in seen {
            let mark = match s {
                Seen::Output(v) if v == committed => Mark::Agreed,
                Seen::Output(_) | Seen::Equivocated => Mark::Disagreed,
                Seen::NoOutput => Mark::Absent,
            };
            self.mark(*m, mark);
        }
    }

    pub fn marks(&self, module: ModuleId) -> impl Iterator<Item = Mark> + '_ {
        self.marks[module].iter().copied()
    }

    /// Deviation rate over a full window, or `None` while the window is incomplete.
    pub fn deviation(&self, module: ModuleId) -> Option<f64> {
        let buf = &self.marks[module];
        if buf.len() < self.window {
            return None;
        }
        let bad = buf.iter().filter(|m| **m != Mark::Agreed).count();
        Some(bad as f64 / self.window as f64)
    }

    pub fn detect_deviants(&self) -> BTreeSet<ModuleId> {
        (0..self.marks.len())
            .filter(|m| self.deviation(*m).is_some_and(|d| d >= self.threshold))
            .collect()
    }

    pub fn reset(&mut self, module: ModuleId) {
        self.marks[module].clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Flagged,
    Isolated,
    /// Isolation would leave fewer than a quorum of modules in service.
    IsolationRefused,
    Restarted,
    Recovered,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Flagged => "flagged",
            EventKind::Isolated => "isolated",
            EventKind::IsolationRefused => "isolation_refused",
            EventKind::Restarted => "restarted",
            EventKind::Recovered => "recovered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EventKind::Flagged,
            EventKind::Isolated,
            EventKind::IsolationRefused,
            EventKind::Restarted,
            EventKind::Recovered,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SupervisorEvent {
    pub frame: u64,
    pub round: u64,
    pub module: ModuleId,
    pub kind: EventKind,
}

impl SupervisorEvent {
    pub fn log_line(&self) -> String {
        format!("{}|SUPERVISOR|{}|{}", self.round, self.module, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisorConfig {
    pub enabled: bool,
    pub window: usize,
    pub flag_threshold: f64,
    pub restart_delay: u64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: DEFAULT_WINDOW,
            flag_threshold: DEFAULT_FLAG_THRESHOLD,
            restart_delay: DEFAULT_RESTART_DELAY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Custody {
    Isolated { since_frame: u64 },
    Restarting,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    cfg: SupervisorConfig,
    quorum: QuorumConfig,
    ledger: DeviationLedger,
    flagged: BTreeSet<ModuleId>,
    custody: BTreeMap<ModuleId, Custody>,
}

impl Supervisor {
    pub fn new(cfg: SupervisorConfig, quorum: QuorumConfig) -> Self {
        Self {
            cfg,
            quorum,
            ledger: DeviationLedger::new(quorum.n(), cfg.window, cfg.flag_threshold),
            flagged: BTreeSet::new(),
            custody: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &DeviationLedger {
        &self.ledger
    }

    /// Modules whose messages everyone must ignore right now.
    pub fn out_of_service(&self) -> BTreeSet<ModuleId> {
        self.custody.keys().copied().collect()
    }

    pub fn is_isolated(&self, module: ModuleId) -> bool {
        self.custody.contains_key(&module)
    }

    /// Feeds one committed frame. Modules out of service are not judged.
    /// Returns flag and isolation events, in module order.
    pub fn observe_frame(
        &mut self,
        frame: u64,
        round: u64,
        committed: &DecisionValue,
        seen: &BTreeMap<ModuleId, Seen>,
    ) -> Vec<SupervisorEvent> {
        let judged: BTreeMap<ModuleId, Seen> = seen
            .iter()
            .filter(|(m, _)| !self.custody.contains_key(m))
            .map(|(m, s)| (*m, s.clone()))
            .collect();
        self.ledger.record_round(committed, &judged);
        if !self.cfg.enabled {
            return Vec::new();
        }
        let mut events = Vec::new();
        let ev = |module, kind| SupervisorEvent {
            frame,
            round,
            module,
            kind,
        };
        for m in self.ledger.detect_deviants() {
            if self.custody.contains_key(&m) {
                continue;
            }
            let newly = self.flagged.insert(m);
            if newly {
                events.push(ev(m, EventKind::Flagged));
            }
            if self.custody.len() < self.quorum.isolation_budget() {
                self.custody.insert(m, Custody::Isolated { since_frame: frame });
                events.push(ev(m, EventKind::Isolated));
            } else if newly {
                events.push(ev(m, EventKind::IsolationRefused));
            }
        }
        events
    }

    /// Isolated modules whose restart delay has elapsed before `frame` starts.
    pub fn due_restarts(&self, frame: u64) -> Vec<ModuleId> {
        self.custody
            .iter()
            .filter(|(_, c)| {
                matches!(c, Custody::Isolated { since_frame } if frame >= since_frame + 1 + self.cfg.restart_delay)
            })
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn restarting(&self) -> Vec<ModuleId> {
        self.custody
            .iter()
            .filter(|(_, c)| **c == Custody::Restarting)
            .map(|(m, _)| *m)
            .collect()
    }

    pub fn mark_restarting(&mut self, frame: u64, round: u64, module: ModuleId) -> SupervisorEvent {
        self.custody.insert(module, Custody::Restarting);
        SupervisorEvent {
            frame,
            round,
            module,
            kind: EventKind::Restarted,
        }
    }

    /// Puts a module back in service with a clean history.
    pub fn mark_recovered(&mut self, frame: u64, round: u64, module: ModuleId) -> SupervisorEvent {
        self.custody.remove(&module);
        self.flagged.remove(&module);
        self.ledger.reset(module);
        SupervisorEvent {
            frame,
            round,
            module,
            kind: EventKind::Recovered,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::DecisionSpace;

    fn space() -> DecisionSpace {
        DecisionSpace::new(&["continue", "brake"], "brake").unwrap()
    }

    fn ledger_with(bad: usize) -> DeviationLedger {
        let mut l = DeviationLedger::new(1, 10, 0.3);
        for i in 0..10 {
            l.mark(0, if i < bad { Mark::Disagreed } else { Mark::Agreed });
        }
        l
    }

    #[test]
    fn flag_threshold_is_inclusive() {
        assert_eq!(ledger_with(3).detect_deviants(), [0].into());
        assert!(ledger_with(2).detect_deviants().is_empty());
    }

    #[test]
    fn incomplete_window_never_flags() {
        let mut l = DeviationLedger::new(1, 10, 0.3);
        for _ in 0..9 {
            l.mark(0, Mark::Disagreed);
        }
        assert_eq!(l.deviation(0), None);
        l.mark(0, Mark::Absent);
        assert_eq!(l.deviation(0), Some(1.0));
    }

    #[test]
    fn window_keeps_only_recent_marks() {
        let mut l = DeviationLedger::new(1, 3, 0.5);
        for m in [Mark::Disagreed, Mark::Disagreed, Mark::Agreed, Mark::Agreed, Mark::Agreed] {
            l.mark(0, m);
        }
        assert_eq!(l.marks(0).count(), 3);
        assert_eq!(l.deviation(0), Some(0.0));
    }

    #[test]
    fn record_round_marks() {
        let s = space();
        let go = s.value("continue").unwrap();
        let stop = s.value("brake").unwrap();
        let mut l = DeviationLedger::new(4, 1, 1.0);
        let seen = BTreeMap::from([
            (0, Seen::Output(go.clone())),
            (1, Seen::Output(stop)),
            (2, Seen::NoOutput),
            (3, Seen::Equivocated),
        ]);
        l.record_round(&go, &seen);
        let marks: Vec<Mark> = (0..4).map(|m| l.marks(m).next().unwrap()).collect();
        assert_eq!(
            marks,
            [Mark::Agreed, Mark::Disagreed, Mark::Absent, Mark::Disagreed]
        );
    }

    #[test]
    fn isolation_respects_the_budget() {
        let s = space();
        let go = s.value("continue").unwrap();
        let stop = s.value("brake").unwrap();
        let cfg = SupervisorConfig {
            window: 2,
            ..SupervisorConfig::default()
        };
        let mut sup = Supervisor::new(cfg, QuorumConfig::new(4, 1).unwrap());
        let seen = BTreeMap::from([
            (0, Seen::Output(go.clone())),
            (1, Seen::Output(go.clone())),
            (2, Seen::Output(stop.clone())),
            (3, Seen::Output(stop)),
        ]);
        assert!(sup.observe_frame(0, 3, &go, &seen).is_empty());
        let events = sup.observe_frame(1, 6, &go, &seen);
        let kinds: Vec<(ModuleId, EventKind)> = events.iter().map(|e| (e.module, e.kind)).collect();
        assert_eq!(
            kinds,
            [
                (2, EventKind::Flagged),
                (2, EventKind::Isolated),
                (3, EventKind::Flagged),
                (3, EventKind::IsolationRefused),
            ]
        );
        assert_eq!(sup.out_of_service(), [2].into());
        assert_eq!(events[0].log_line(), "6|SUPERVISOR|2|flagged");

        assert!(sup.due_restarts(3).is_empty());
        assert_eq!(sup.due_restarts(4), [2]);
        sup.mark_restarting(4, 7, 2);
        assert!(sup.due_restarts(5).is_empty());
        assert_eq!(sup.restarting(), [2]);
        sup.mark_recovered(4, 8, 2);
        assert!(sup.out_of_service().is_empty());
        assert_eq!(sup.ledger().marks(2).count(), 0);
    }
}
