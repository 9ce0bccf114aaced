//! Decision-log records, their line format, offline verification and the
//! human-readable summary.
//!
//! A decision log is line-delimited:
//!
//! ```text
//! # scenario=av_plastic_bag seed=7 mode=vote-only n=5 f=1 expects_violation=false
//! 0|decided|continue|0,1,2,3|1|0|-
//! 12|SUPERVISOR|3|flagged
//! ```
//!
//! Frame rows are `frame|verdict|value|supporters|rounds|view_changes|flags`.
//! Supervisor rows are `round|SUPERVISOR|module|event`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::auth::ModuleId;
use crate::supervisor::EventKind;
use crate::voter::NoQuorumReason;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct SafetyFlags {
    pub agreement_violation: bool,
    pub safe_mode: bool,
    pub ground_truth_mismatch: bool,
}

impl SafetyFlags {
    pub fn any(&self) -> bool {
        self.agreement_violation || self.safe_mode || self.ground_truth_mismatch
    }
}

impl fmt::Display for SafetyFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.agreement_violation, "agreement_violation"),
            (self.safe_mode, "safe_mode"),
            (self.ground_truth_mismatch, "ground_truth_mismatch"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .collect();
        if names.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerdictKind {
    Decided,
    NoQuorum(NoQuorumReason),
    SafeMode(NoQuorumReason),
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerdictKind::Decided => f.write_str("decided"),
            VerdictKind::NoQuorum(r) => write!(f, "no_quorum:{}", r.as_str()),
            VerdictKind::SafeMode(r) => write!(f, "safe_mode:{}", r.as_str()),
        }
    }
}

/// One frame row of a decision log.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogRecord {
    pub frame: u64,
    pub verdict: VerdictKind,
    pub value: Option<String>,
    pub supporters: BTreeSet<ModuleId>,
    pub rounds: u64,
    pub view_changes: u64,
    pub flags: SafetyFlags,
}

fn join_ids(ids: &BTreeSet<ModuleId>) -> String {
    if ids.is_empty() {
        "-".to_string()
    } else {
        ids.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl LogRecord {
    pub fn line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.frame,
            self.verdict,
            self.value.as_deref().unwrap_or("-"),
            join_ids(&self.supporters),
            self.rounds,
            self.view_changes,
            self.flags
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogHeader {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub n: usize,
    pub f: usize,
    pub expects_violation: bool,
}

impl LogHeader {
    pub fn line(&self) -> String {
        format!(
            "# scenario={} seed={} mode={} n={} f={} expects_violation={}",
            self.scenario, self.seed, self.mode, self.n, self.f, self.expects_violation
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervisorRow {
    pub round: u64,
    pub module: ModuleId,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecisionLog {
    pub header: Option<LogHeader>,
    pub records: Vec<LogRecord>,
    pub supervisor: Vec<SupervisorRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct LogParseError {
    pub line: usize,
    pub msg: String,
}

fn parse_header(body: &str) -> Result<LogHeader, String> {
    let mut kv = BTreeMap::new();
    for part in body.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("header field {part:?} is not key=value"))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("header lacks {k}"));
    let num = |k: &str| -> Result<u64, String> {
        get(k)?.parse().map_err(|_| format!("header {k} is not a number"))
    };
    Ok(LogHeader {
        scenario: get("scenario")?.to_string(),
        seed: num("seed")?,
        mode: get("mode")?.to_string(),
        n: num("n")? as usize,
        f: num("f")? as usize,
        expects_violation: match get("expects_violation")? {
            "true" => true,
            "false" => false,
            other => return Err(format!("expects_violation {other:?} is not a bool")),
        },
    })
}

fn parse_ids(s: &str) -> Result<BTreeSet<ModuleId>, String> {
    if s == "-" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(|p| p.parse().map_err(|_| format!("bad module id {p:?}")))
        .collect()
}

fn parse_flags(s: &str) -> Result<SafetyFlags, String> {
    let mut flags = SafetyFlags::default();
    if s == "-" {
        return Ok(flags);
    }
    for name in s.split(',') {
        match name {
            "agreement_violation" => flags.agreement_violation = true,
            "safe_mode" => flags.safe_mode = true,
            "ground_truth_mismatch" => flags.ground_truth_mismatch = true,
            other => return Err(format!("unknown flag {other:?}")),
        }
    }
    Ok(flags)
}

fn parse_verdict(s: &str) -> Result<VerdictKind, String> {
    if s == "decided" {
        return Ok(VerdictKind::Decided);
    }
    let (kind, reason) = s
        .split_once(':')
        .ok_or_else(|| format!("unknown verdict {s:?}"))?;
    let reason = NoQuorumReason::parse(reason).ok_or_else(|| format!("unknown reason {reason:?}"))?;
    match kind {
        "no_quorum" => Ok(VerdictKind::NoQuorum(reason)),
        "safe_mode" => Ok(VerdictKind::SafeMode(reason)),
        _ => Err(format!("unknown verdict {s:?}")),
    }
}

fn parse_record(fields: &[&str]) -> Result<LogRecord, String> {
    let [frame, verdict, value, supporters, rounds, vc, flags] = fields else {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    };
    let num = |s: &str, what: &str| -> Result<u64, String> {
        s.parse().map_err(|_| format!("{what} {s:?} is not a number"))
    };
    Ok(LogRecord {
        frame: num(frame, "frame")?,
        verdict: parse_verdict(verdict)?,
        value: (*value != "-").then(|| value.to_string()),
        supporters: parse_ids(supporters)?,
        rounds: num(rounds, "rounds")?,
        view_changes: num(vc, "view_changes")?,
        flags: parse_flags(flags)?,
    })
}

impl DecisionLog {
    pub fn parse(text: &str) -> Result<Self, LogParseError> {
        let mut log = DecisionLog::default();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| LogParseError { line: i + 1, msg };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(body) = line.strip_prefix('#') {
                if log.header.is_none() && body.contains("scenario=") {
                    log.header = Some(parse_header(body).map_err(err)?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            if fields.get(1) == Some(&"SUPERVISOR") {
                let [round, _, module, kind] = fields.as_slice() else {
                    return Err(err("supervisor row needs 4 fields".into()));
                };
                log.supervisor.push(SupervisorRow {
                    round: round.parse().map_err(|_| err(format!("bad round {round:?}")))?,
                    module: module.parse().map_err(|_| err(format!("bad module {module:?}")))?,
                    kind: EventKind::parse(kind).ok_or_else(|| err(format!("unknown event {kind:?}")))?,
                });
            } else {
                log.records.push(parse_record(&fields).map_err(err)?);
            }
        }
        Ok(log)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(h) = &self.header {
            s.push_str(&h.line());
            s.push('\n');
        }
        for r in &self.records {
            s.push_str(&r.line());
            s.push('\n');
        }
        for e in &self.supervisor {
            let _ = writeln!(s, "{}|SUPERVISOR|{}|{}", e.round, e.module, e.kind);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Verification {
    /// Structural problems: the log is not a well-formed episode log.
    pub malformed: Vec<String>,
    /// Safety invariants that do not hold.
    pub violations: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.malformed.is_empty() && self.violations.is_empty()
    }
}

/// Recomputes the per-record invariants of a stored decision log.
pub fn verify(log: &DecisionLog) -> Verification {
    let mut v = Verification::default();
    let Some(h) = &log.header else {
        v.malformed.push("missing header line".into());
        return v;
    };
    for (i, r) in log.records.iter().enumerate() {
        if r.frame != i as u64 {
            v.malformed.push(format!(
                "record {i} is for frame {}; frames must appear once each, in order",
                r.frame
            ));
        }
        let t = r.frame;
        match r.verdict {
            VerdictKind::Decided | VerdictKind::SafeMode(_) if r.value.is_none() => {
                v.malformed.push(format!("frame {t}: {} without a value", r.verdict))
            }
            VerdictKind::NoQuorum(_) if r.value.is_some() => {
                v.malformed.push(format!("frame {t}: no_quorum with a value"))
            }
            _ => {}
        }
        if r.flags.safe_mode != matches!(r.verdict, VerdictKind::SafeMode(_)) {
            v.malformed.push(format!("frame {t}: safe_mode flag disagrees with the verdict"));
        }
        if let Some(bad) = r.supporters.iter().find(|m| **m >= h.n) {
            v.malformed.push(format!("frame {t}: supporter {bad} out of range for n={}", h.n));
        }
        if h.mode == "pbft" && r.verdict == VerdictKind::Decided && r.supporters.len() < h.f + 1 {
            v.violations.push(format!(
                "frame {t}: decided on {} replies, the observer needs {}",
                r.supporters.len(),
                h.f + 1
            ));
        }
        if r.flags.agreement_violation && !h.expects_violation {
            v.violations.push(format!("frame {t}: correct replicas committed different values"));
        }
    }
    v
}

/// One module's contribution to one frame, as written to `outputs.log`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleRow {
    pub frame: u64,
    pub module: ModuleId,
    pub value: Option<String>,
    pub mark: String,
}

impl ModuleRow {
    pub fn line(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.frame,
            self.module,
            self.value.as_deref().unwrap_or("-"),
            self.mark
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let [frame, module, value, mark] = line.trim().split('|').collect::<Vec<_>>()[..] else {
            return None;
        };
        Some(Self {
            frame: frame.parse().ok()?,
            module: module.parse().ok()?,
            value: (value != "-").then(|| value.to_string()),
            mark: mark.to_string(),
        })
    }
}

/// Agreement rate per module over the frames it was judged in.
pub fn agreement_rates(rows: &[ModuleRow]) -> BTreeMap<ModuleId, (usize, usize)> {
    let mut rates: BTreeMap<ModuleId, (usize, usize)> = BTreeMap::new();
    for r in rows {
        if r.mark == "excluded" || r.mark == "uncommitted" {
            continue;
        }
        let e = rates.entry(r.module).or_default();
        e.1 += 1;
        if r.mark == "agreed" {
            e.0 += 1;
        }
    }
    rates
}

/// Per-frame table, module agreement and supervisor activity.
pub fn emit_report(log: &DecisionLog, modules: &[ModuleRow]) -> String {
    let mut s = String::new();
    if let Some(h) = &log.header {
        let _ = writeln!(
            s,
            "scenario {}  seed {}  mode {}  n={} f={}{}",
            h.scenario,
            h.seed,
            h.mode,
            h.n,
            h.f,
            if h.expects_violation { "  (expects violation)" } else { "" }
        );
    }
    let _ = writeln!(
        s,
        "{:>5}  {:<26} {:<14} {:>6} {:>3}  {:<14} flags",
        "frame", "verdict", "value", "rounds", "vc", "supporters"
    );
    for r in &log.records {
        let _ = writeln!(
            s,
            "{:>5}  {:<26} {:<14} {:>6} {:>3}  {:<14} {}",
            r.frame,
            r.verdict.to_string(),
            r.value.as_deref().unwrap_or("-"),
            r.rounds,
            r.view_changes,
            join_ids(&r.supporters),
            r.flags
        );
    }
    let rates = agreement_rates(modules);
    if !rates.is_empty() {
        s.push_str("\nmodule agreement\n");
        for (m, (agreed, judged)) in &rates {
            let pct = 100.0 * *agreed as f64 / (*judged).max(1) as f64;
            let _ = writeln!(s, "  module {m:>2}  {agreed:>4}/{judged:<4} {pct:5.1}%");
        }
    }
    if !log.supervisor.is_empty() {
        s.push_str("\nsupervisor\n");
        for e in &log.supervisor {
            let _ = writeln!(s, "  round {:>5}  module {:>2}  {}", e.round, e.module, e.kind);
        }
    }
    let count = |p: &dyn Fn(&LogRecord) -> bool| log.records.iter().filter(|r| p(r)).count();
    let _ = writeln!(
        s,
        "\nframes {}  decided {}  no_quorum {}  safe_mode {}  agreement_violations {}  ground_truth_mismatches {}  view_changes {}",
        log.records.len(),
        count(&|r| r.verdict == VerdictKind::Decided),
        count(&|r| matches!(r.verdict, VerdictKind::NoQuorum(_))),
        count(&|r| matches!(r.verdict, VerdictKind::SafeMode(_))),
        count(&|r| r.flags.agreement_violation),
        count(&|r| r.flags.ground_truth_mismatch),
        log.records.iter().map(|r| r.view_changes).sum::<u64>(),
    );
    s
}
