//! Line-oriented scenario scripts.
//!
//! Header lines (before the first step) configure the world:
//!
//! ```text
//! name ops-forward-jump
//! params toy4            # toy4 | h10 | h16
//! servers 3              # simulated time servers ntp-a, ntp-b, ...; 0 trusts the local clock
//! seed 7
//! start 1751720001       # POSIX seconds
//! validity 240
//! overlap 2
//! ```
//!
//! Every other line is one step. Durations take a unit: `ms`, `s`, `m`,
//! `h`, `d` or `slot` (one issuance interval), e.g. `90s`, `3slot`, `-1d`.
//! Times are `now` (CA clock), `ref` (true time), `nb` (the verified leaf's
//! not_before) or POSIX seconds, optionally followed by `+dur` / `-dur`.

use std::collections::HashSet;
use std::fmt;

use schedca::engine::Phase;
use schedca::timeauth::{ServerBehavior, VerdictStatus};
use schedca::xmss::XmssParams;
use thiserror::Error;

pub const DEFAULT_START: u64 = 1_751_720_001;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeBase {
    Now,
    Reference,
    NotBefore,
    Posix(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeExpr {
    pub base: TimeBase,
    pub offset_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerRef {
    All,
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdminStep {
    CorrectTime(TimeExpr),
    AcceptTime(TimeExpr),
    ExecutePlan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldMatch {
    Equals(String, String),
    Contains(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    /// Next matching event at or after the cursor; the cursor moves past it.
    Event {
        kind: String,
        fields: Vec<FieldMatch>,
    },
    /// No such event from the cursor on.
    NoEvent {
        kind: String,
    },
    Phase(Phase),
    Verdict(VerdictStatus),
    /// Pending recovery plan, as `dummy_sign(3)`, `schedule_update`, ...
    Plan(String),
    /// Some alert at or after the cursor contains the text.
    Alert(String),
    /// Peer verification of a captured leaf (`current` is the CA's leaf).
    Verify {
        leaf: String,
        at: TimeExpr,
        outcome: String,
    },
    NextIndex(u32),
    SignedCount(usize),
    ClockErrorWithin(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Setup,
    Advance(u64),
    Jump(i64),
    SetClock(u64),
    /// Sets the CA clock to true time.
    FixClock,
    Slew {
        offset_ms: i64,
        rate_us_per_s: u64,
    },
    Drift(i64),
    Crash,
    Restart,
    CrashRestart(u64),
    CrashDuringIssue,
    Snapshot(String),
    RollbackStateFile(String),
    NtpFault {
        server: ServerRef,
        behavior: ServerBehavior,
    },
    Admin(AdminStep),
    DeliverSchedule,
    CaptureLeaf(String),
    Expect(Expectation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub params: XmssParams,
    pub servers: usize,
    pub seed: u64,
    pub start: u64,
    pub validity_minutes: u16,
    pub overlap_minutes: u16,
    pub steps: Vec<(usize, Step)>,
}

impl Scenario {
    pub fn server_names(count: usize) -> Vec<String> {
        (0..count).map(|i| format!("ntp-{}", (b'a' + i as u8) as char)).collect()
    }

    pub fn slot_ms(&self) -> u64 {
        u64::from(self.validity_minutes - self.overlap_minutes) * 60_000
    }
}

impl fmt::Display for TimeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.base {
            TimeBase::Now => f.write_str("now")?,
            TimeBase::Reference => f.write_str("ref")?,
            TimeBase::NotBefore => f.write_str("nb")?,
            TimeBase::Posix(t) => write!(f, "{t}")?,
        }
        if self.offset_ms != 0 {
            write!(f, "{:+}ms", self.offset_ms)?;
        }
        Ok(())
    }
}

/// Splits on whitespace, keeping double-quoted runs together.
fn tokens(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut any = false;
    for c in line.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                any = true;
            }
            c if c.is_whitespace() && !quoted => {
                if any {
                    out.push(std::mem::take(&mut cur));
                    any = false;
                }
            }
            c => {
                cur.push(c);
                any = true;
            }
        }
    }
    if any {
        out.push(cur);
    }
    out
}

/// `<n><unit>` with unit ms, s, m, h, d or slot, optionally signed.
pub fn parse_duration(s: &str, slot_ms: u64) -> Result<i64, String> {
    let (sign, body) = match s.as_bytes().first() {
        Some(b'-') => (-1, &s[1..]),
        Some(b'+') => (1, &s[1..]),
        _ => (1, s),
    };
    let split = body.find(|c: char| !c.is_ascii_digit()).unwrap_or(body.len());
    let (num, unit) = body.split_at(split);
    let n: i64 = if num.is_empty() { 1 } else { num.parse().map_err(|_| format!("bad duration {s:?}"))? };
    let unit_ms: i64 = match unit {
        "ms" => 1,
        "s" => 1000,
        "m" => 60_000,
        "h" => 3_600_000,
        "d" => 86_400_000,
        "slot" => slot_ms as i64,
        _ => return Err(format!("bad duration unit in {s:?}")),
    };
    if num.is_empty() && unit != "slot" {
        return Err(format!("duration {s:?} needs a number"));
    }
    Ok(sign * n * unit_ms)
}

fn parse_time(s: &str, slot_ms: u64) -> Result<TimeExpr, String> {
    let split = s.find(['+', '-']).unwrap_or(s.len());
    let (base, rest) = s.split_at(split);
    let base = match base {
        "now" => TimeBase::Now,
        "ref" => TimeBase::Reference,
        "nb" => TimeBase::NotBefore,
        n => TimeBase::Posix(n.parse().map_err(|_| format!("bad time {s:?}"))?),
    };
    let offset_ms = if rest.is_empty() { 0 } else { parse_duration(rest, slot_ms)? };
    Ok(TimeExpr { base, offset_ms })
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    match s {
        "running" => Ok(Phase::Running),
        "halted" | "halted_awaiting_admin" => Ok(Phase::HaltedAwaitingAdmin),
        "exhausted" => Ok(Phase::Exhausted),
        _ => Err(format!("unknown phase {s:?}")),
    }
}

fn parse_verdict(s: &str) -> Result<VerdictStatus, String> {
    match s {
        "trusted" => Ok(VerdictStatus::Trusted),
        "adjusted" => Ok(VerdictStatus::Adjusted),
        "no-consensus" => Ok(VerdictStatus::NoConsensus),
        "unavailable" => Ok(VerdictStatus::Unavailable),
        _ => Err(format!("unknown verdict {s:?}")),
    }
}

const EVENT_KINDS: &[&str] = &[
    "setup_complete",
    "issued",
    "halted",
    "admin_alert",
    "admin_decision",
    "dummy_signed",
    "schedule_updated",
    "resumed",
    "restarted",
    "exhausted",
];

const VERIFY_OUTCOMES: &[&str] = &[
    "accept",
    "malformed",
    "not-a-leaf",
    "unknown-issuer",
    "bad-ca-signature",
    "no-schedule",
    "schedule-mismatch",
    "not-yet-valid",
    "expired",
    "bad-signature",
];

fn event_kind(s: &str) -> Result<String, String> {
    if EVENT_KINDS.contains(&s) {
        Ok(s.to_owned())
    } else {
        Err(format!("unknown event kind {s:?}"))
    }
}

/// Parses and validates a script. Unknown steps, servers, labels and
/// out-of-order references are rejected before anything runs.
pub fn parse(text: &str) -> Result<Scenario, ScriptError> {
    let mut sc = Scenario {
        name: String::new(),
        params: XmssParams::TOY_4,
        servers: 3,
        seed: 1,
        start: DEFAULT_START,
        validity_minutes: 240,
        overlap_minutes: 2,
        steps: Vec::new(),
    };
    let mut body = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let t = tokens(content);
        let err = |message: String| ScriptError { line, message };
        let arg = |k: usize| t.get(k).cloned().ok_or_else(|| err(format!("{} needs an argument", t[0])));
        if body.is_empty() {
            let header = match t[0].as_str() {
                "name" => {
                    sc.name = arg(1)?;
                    true
                }
                "params" => {
                    sc.params = match arg(1)?.as_str() {
                        "toy4" => XmssParams::TOY_4,
                        "h10" => XmssParams::SHA2_10_256,
                        "h16" => XmssParams::SHA2_16_256,
                        p => return Err(err(format!("unknown params {p:?}"))),
                    };
                    true
                }
                "servers" | "seed" | "start" | "validity" | "overlap" => {
                    let v: u64 = arg(1)?.parse().map_err(|_| err(format!("bad number for {}", t[0])))?;
                    match t[0].as_str() {
                        "servers" if v <= 26 => sc.servers = v as usize,
                        "seed" => sc.seed = v,
                        "start" => sc.start = v,
                        "validity" if v <= u64::from(u16::MAX) => sc.validity_minutes = v as u16,
                        "overlap" if v <= u64::from(u16::MAX) => sc.overlap_minutes = v as u16,
                        k => return Err(err(format!("{k} out of range"))),
                    }
                    true
                }
                _ => false,
            };
            if header {
                continue;
            }
        }
        body.push((line, t));
    }
    if sc.name.is_empty() {
        return Err(ScriptError { line: 0, message: "missing name".into() });
    }
    if sc.validity_minutes <= sc.overlap_minutes {
        return Err(ScriptError { line: 0, message: "validity must exceed overlap".into() });
    }
    let slot = sc.slot_ms();
    let servers: HashSet<String> = Scenario::server_names(sc.servers).into_iter().collect();
    let mut snapshots = HashSet::new();
    let mut leaves: HashSet<String> = ["current".to_owned()].into_iter().collect();
    let mut set_up = false;
    for (line, t) in body {
        let err = |message: String| ScriptError { line, message };
        let arg = |k: usize| t.get(k).map(String::as_str).ok_or_else(|| err(format!("{} needs more arguments", t[0])));
        let dur = |s: &str| parse_duration(s, slot).map_err(err);
        let pos_dur = |s: &str| {
            let d = parse_duration(s, slot).map_err(err)?;
            u64::try_from(d).map_err(|_| err(format!("duration {s:?} must not be negative")))
        };
        let time = |s: &str| parse_time(s, slot).map_err(err);
        let step = match t[0].as_str() {
            "setup" => {
                if set_up {
                    return Err(err("setup appears twice".into()));
                }
                set_up = true;
                Step::Setup
            }
            "advance" => Step::Advance(pos_dur(arg(1)?)?),
            "jump" => Step::Jump(dur(arg(1)?)?),
            "set_clock" => Step::SetClock(arg(1)?.parse().map_err(|_| err("set_clock takes POSIX seconds".into()))?),
            "fix_clock" => Step::FixClock,
            "slew" => Step::Slew {
                offset_ms: dur(arg(1)?)?,
                rate_us_per_s: match t.get(2) {
                    Some(r) => r.parse().map_err(|_| err("slew rate is in microseconds per second".into()))?,
                    None => schedca::timeauth::DEFAULT_SLEW_US_PER_S,
                },
            },
            "drift" => Step::Drift(arg(1)?.parse().map_err(|_| err("drift is in microseconds per second".into()))?),
            "crash" => Step::Crash,
            "restart" => Step::Restart,
            "crash_restart" => Step::CrashRestart(pos_dur(arg(1)?)?),
            "crash_during_issue" => Step::CrashDuringIssue,
            "snapshot" => {
                snapshots.insert(arg(1)?.to_owned());
                Step::Snapshot(arg(1)?.to_owned())
            }
            "rollback_state_file" => {
                let label = arg(1)?;
                if !snapshots.contains(label) {
                    return Err(err(format!("no earlier snapshot {label:?}")));
                }
                Step::RollbackStateFile(label.to_owned())
            }
            "ntp_fault" => {
                let server = match arg(1)? {
                    "all" => ServerRef::All,
                    s if servers.contains(s) => ServerRef::Named(s.to_owned()),
                    s => return Err(err(format!("unknown server {s:?}"))),
                };
                let behavior = match arg(2)? {
                    "honest" => ServerBehavior::Honest,
                    "silent" => ServerBehavior::Silent,
                    "garbage" => ServerBehavior::Garbage,
                    "offset" => ServerBehavior::Offset(dur(arg(3)?)?),
                    b => return Err(err(format!("unknown server behavior {b:?}"))),
                };
                Step::NtpFault { server, behavior }
            }
            "admin" => Step::Admin(match arg(1)? {
                "correct_time" => AdminStep::CorrectTime(time(t.get(2).map_or("now", String::as_str))?),
                "accept_time" => AdminStep::AcceptTime(time(t.get(2).map_or("now", String::as_str))?),
                "execute_plan" => AdminStep::ExecutePlan,
                d => return Err(err(format!("unknown admin decision {d:?}"))),
            }),
            "deliver_schedule" => Step::DeliverSchedule,
            "capture_leaf" => {
                leaves.insert(arg(1)?.to_owned());
                Step::CaptureLeaf(arg(1)?.to_owned())
            }
            "expect" => Step::Expect(match arg(1)? {
                "event" => {
                    let kind = event_kind(arg(2)?).map_err(err)?;
                    let mut fields = Vec::new();
                    for f in &t[3..] {
                        if let Some((k, v)) = f.split_once('~') {
                            fields.push(FieldMatch::Contains(k.into(), v.into()));
                        } else if let Some((k, v)) = f.split_once('=') {
                            fields.push(FieldMatch::Equals(k.into(), v.into()));
                        } else {
                            return Err(err(format!("field match {f:?} needs = or ~")));
                        }
                    }
                    Expectation::Event { kind, fields }
                }
                "no_event" => Expectation::NoEvent { kind: event_kind(arg(2)?).map_err(err)? },
                "phase" => Expectation::Phase(parse_phase(arg(2)?).map_err(err)?),
                "verdict" => Expectation::Verdict(parse_verdict(arg(2)?).map_err(err)?),
                "plan" => Expectation::Plan(arg(2)?.to_owned()),
                "alert" => Expectation::Alert(t[2..].join(" ")),
                "verify" => {
                    let leaf = arg(2)?;
                    if !leaves.contains(leaf) {
                        return Err(err(format!("no captured leaf {leaf:?}")));
                    }
                    let outcome = arg(3)?;
                    if !VERIFY_OUTCOMES.contains(&outcome) {
                        return Err(err(format!("unknown verify outcome {outcome:?}")));
                    }
                    let at = match (t.get(4).map(String::as_str), t.get(5)) {
                        (None, _) => TimeExpr { base: TimeBase::Reference, offset_ms: 0 },
                        (Some("at"), Some(x)) => time(x)?,
                        _ => return Err(err("verify takes `at <time>`".into())),
                    };
                    Expectation::Verify { leaf: leaf.to_owned(), at, outcome: outcome.to_owned() }
                }
                "next_index" => Expectation::NextIndex(arg(2)?.parse().map_err(|_| err("bad index".into()))?),
                "signed_count" => Expectation::SignedCount(arg(2)?.parse().map_err(|_| err("bad count".into()))?),
                "clock_error_within" => Expectation::ClockErrorWithin(pos_dur(arg(2)?)?),
                e => return Err(err(format!("unknown expectation {e:?}"))),
            }),
            s => return Err(err(format!("unknown step {s:?}"))),
        };
        if !set_up
            && !matches!(step, Step::Setup | Step::NtpFault { .. } | Step::Jump(_) | Step::SetClock(_) | Step::Drift(_))
        {
            return Err(err("step needs an earlier setup".into()));
        }
        sc.steps.push((line, step));
    }
    Ok(sc)
}
