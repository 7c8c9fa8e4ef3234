//! Trusted time: clocks, SNTP, majority consensus and the timer cross-check.

pub mod clock;
pub mod sntp;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use clock::{ClockSource, SystemClock, VirtualClock, DEFAULT_SLEW_US_PER_S};
pub use sntp::{query_sntp, NtpSample, NtpTransport, ServerBehavior, SimulatedServer, SntpError, UdpTransport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeConfig {
    pub expected_servers: usize,
    pub agreement_window_ms: u64,
    pub minor_adjust_threshold_ms: u64,
    pub skew_tolerance_ms: u64,
    pub timeout_ms: u64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            expected_servers: 3,
            agreement_window_ms: 1000,
            minor_adjust_threshold_ms: 5000,
            skew_tolerance_ms: 60_000,
            timeout_ms: sntp::DEFAULT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictStatus {
    Trusted,
    Adjusted,
    NoConsensus,
    Unavailable,
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Trusted => "trusted",
            Self::Adjusted => "adjusted",
            Self::NoConsensus => "no-consensus",
            Self::Unavailable => "unavailable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeVerdict {
    pub status: VerdictStatus,
    /// Agreed time; the local reading when there is no agreement.
    pub consensus_time_ms: u64,
    /// Consensus minus local clock.
    pub applied_offset_ms: i64,
    /// Servers in the agreeing majority, sorted.
    pub agreeing: Vec<String>,
    pub alert: Option<String>,
}

impl TimeVerdict {
    /// Verdict for a deployment without time servers: the local clock is
    /// taken as-is.
    pub fn local_only(local_ms: u64) -> Self {
        Self {
            status: VerdictStatus::Trusted,
            consensus_time_ms: local_ms,
            applied_offset_ms: 0,
            agreeing: Vec::new(),
            alert: None,
        }
    }

    pub fn is_trusted(&self) -> bool {
        self.status == VerdictStatus::Trusted
    }

    /// Consensus time when one was reached.
    pub fn agreed_time_ms(&self) -> Option<u64> {
        matches!(self.status, VerdictStatus::Trusted | VerdictStatus::Adjusted).then_some(self.consensus_time_ms)
    }
}

/// Majority vote over one round of samples taken against `local_ms`.
///
/// Each sample is first shifted to `local_ms` using its own receive time, so
/// sequential queries compare fairly. The largest set of samples that agree
/// pairwise within the window wins if it is a strict majority of the
/// configured server count; its member with the smallest delay supplies the
/// time. Ties are broken on (delay, time, server id), which makes the result
/// independent of sample order.
pub fn consensus(samples: &[NtpSample], local_ms: u64, cfg: &TimeConfig) -> TimeVerdict {
    let unagreed = |status, alert: String| TimeVerdict {
        status,
        consensus_time_ms: local_ms,
        applied_offset_ms: 0,
        agreeing: Vec::new(),
        alert: Some(alert),
    };
    if samples.len() != cfg.expected_servers {
        return unagreed(
            VerdictStatus::NoConsensus,
            format!("expected {} time samples, got {}", cfg.expected_servers, samples.len()),
        );
    }
    let valid: Vec<(i64, &NtpSample)> =
        samples.iter().filter(|s| s.error.is_none()).map(|s| (local_ms as i64 + s.offset_ms(), s)).collect();
    if valid.is_empty() {
        return unagreed(VerdictStatus::Unavailable, "no time server answered".into());
    }
    let key = |(t, s): &(i64, &NtpSample)| (s.round_trip_delay_ms, *t, s.server.clone());
    let n = valid.len().min(20);
    // (size, leader key, sorted member names)
    type Group = (usize, (u64, i64, String), Vec<String>);
    let mut best: Option<Group> = None;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let lo = members.iter().map(|&i| valid[i].0).min().unwrap();
        let hi = members.iter().map(|&i| valid[i].0).max().unwrap();
        if hi.abs_diff(lo) > cfg.agreement_window_ms {
            continue;
        }
        let leader = members.iter().map(|&i| key(&valid[i])).min().unwrap();
        let mut names: Vec<String> = members.iter().map(|&i| valid[i].1.server.clone()).collect();
        names.sort();
        let better = match &best {
            None => true,
            Some((bs, bk, bn)) => members.len() > *bs || (members.len() == *bs && (&leader, &names) < (bk, bn)),
        };
        if better {
            best = Some((members.len(), leader, names));
        }
    }
    let (size, leader, agreeing) = best.expect("a single sample always agrees with itself");
    if size * 2 <= cfg.expected_servers {
        let mut spread: Vec<String> =
            valid.iter().map(|(t, s)| format!("{}={:+}ms", s.server, *t - local_ms as i64)).collect();
        spread.sort();
        return unagreed(VerdictStatus::NoConsensus, format!("no majority among time servers ({})", spread.join(", ")));
    }
    let consensus_time = leader.1.max(0) as u64;
    let offset = consensus_time as i64 - local_ms as i64;
    let (status, alert) = if offset.unsigned_abs() <= cfg.minor_adjust_threshold_ms {
        (VerdictStatus::Trusted, None)
    } else {
        (
            VerdictStatus::Adjusted,
            Some(format!("system clock off by {offset:+} ms against servers {}", agreeing.join(","))),
        )
    };
    TimeVerdict { status, consensus_time_ms: consensus_time, applied_offset_ms: offset, agreeing, alert }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossCheck {
    Ok,
    Anomaly(String),
}

impl CrossCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok)
    }
}

fn describe_gap(what: &str, diff_ms: i64, ahead: &str, behind: &str) -> String {
    let secs = (diff_ms.unsigned_abs() + 500) / 1000;
    format!("{what} {} {secs} s", if diff_ms > 0 { ahead } else { behind })
}

/// Compares the relative timer against the absolute clock at a check
/// point. Both must be within `tolerance_ms` of their expected values.
pub fn cross_check(
    relative_elapsed_ms: u64,
    expected_interval_ms: u64,
    absolute_now_ms: u64,
    expected_absolute_ms: u64,
    tolerance_ms: u64,
) -> CrossCheck {
    let mut problems = Vec::new();
    let abs = absolute_now_ms as i64 - expected_absolute_ms as i64;
    if abs.unsigned_abs() > tolerance_ms {
        problems.push(describe_gap("absolute", abs, "ahead", "behind"));
    }
    let rel = relative_elapsed_ms as i64 - expected_interval_ms as i64;
    if rel.unsigned_abs() > tolerance_ms {
        problems.push(describe_gap("relative timer", rel, "late", "early"));
    }
    if problems.is_empty() {
        CrossCheck::Ok
    } else {
        CrossCheck::Anomaly(problems.join("; "))
    }
}

/// Queries every configured server and folds the samples into a verdict.
pub struct TimeService {
    clock: Arc<dyn ClockSource>,
    servers: Vec<(String, Box<dyn NtpTransport>)>,
    config: TimeConfig,
}

impl TimeService {
    pub fn new(clock: Arc<dyn ClockSource>, config: TimeConfig) -> Self {
        Self { clock, servers: Vec::new(), config }
    }

    pub fn add_server(&mut self, name: &str, transport: Box<dyn NtpTransport>) {
        self.servers.push((name.to_owned(), transport));
    }

    pub fn config(&self) -> &TimeConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn ClockSource> {
        &self.clock
    }

    pub fn sample(&mut self) -> Vec<NtpSample> {
        let clock = self.clock.as_ref();
        let timeout = self.config.timeout_ms;
        self.servers.iter_mut().map(|(name, t)| query_sntp(name, t.as_mut(), clock, timeout)).collect()
    }

    /// With no servers configured the local clock is trusted as-is.
    pub fn verdict(&mut self) -> TimeVerdict {
        if self.servers.is_empty() {
            return TimeVerdict::local_only(self.clock.now_ms());
        }
        let samples = self.sample();
        consensus(&samples, self.clock.now_ms(), &self.config)
    }
}
