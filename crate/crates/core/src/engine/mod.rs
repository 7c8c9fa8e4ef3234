//! CA state machine: setup, scheduled issuance, anomaly halts, admin
//! decisions and recovery after downtime.
//!
//! All state lives in one directory:
//!
//! | file | content |
//! |------|---------|
//! | `ca.der` | self-signed CA certificate (index 0) |
//! | `key.xks` | XMSS key state |
//! | `schedule.sched` | newest schedule |
//! | `schedules/NNNNNNNN.sched` | every schedule by signing index |
//! | `events.log` | append-only event log |
//! | `leaf.der`, `leaf.key` | current leaf and its classical secret |
//! | `admin.inbox` | pending admin decisions, one JSON object per line |

pub mod log;
pub mod recovery;

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certkit::der::DerError;
use crate::certkit::{
    issue_leaf, self_sign_ca, Certificate, ClassicalKeyPair, ClassicalSecret, ClassicalSuite, EcdsaP256, IssueError,
    LeafRequest, MAX_TIME,
};
use crate::keystore::{write_atomic, KeyStore, KeyStoreError, SignAudit};
use crate::schedule::{issue_schedule, update_schedule, IssuancePolicy, Schedule, ScheduleError};
use crate::timeauth::{cross_check, CrossCheck, TimeService, TimeVerdict, VerdictStatus};
use crate::xmss::XmssParams;

pub use self::log::EventLog;
pub use recovery::{plan_recovery, RecoveryAction, RecoveryInputs, RecoveryPlan};

pub const CA_CERT_FILE: &str = "ca.der";
pub const KEY_FILE: &str = "key.xks";
pub const SCHEDULE_FILE: &str = "schedule.sched";
pub const SCHEDULE_HISTORY_DIR: &str = "schedules";
pub const EVENT_LOG_FILE: &str = "events.log";
pub const LEAF_CERT_FILE: &str = "leaf.der";
pub const LEAF_KEY_FILE: &str = "leaf.key";
pub const ADMIN_INBOX_FILE: &str = "admin.inbox";

pub const DUMMY_TAG: &[u8] = b"DUMMY";
pub const DEFAULT_DUMMY_THRESHOLD: u32 = 10;

/// Message signed to burn `index` without issuing anything.
pub fn dummy_message(index: u32) -> Vec<u8> {
    let mut m = DUMMY_TAG.to_vec();
    m.extend_from_slice(&index.to_be_bytes());
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub validity_minutes: u16,
    pub overlap_minutes: u16,
    pub dummy_threshold: u32,
    pub skew_tolerance_ms: u64,
    pub issuer_cn: String,
    pub subject_cn: String,
    pub san_dns: Option<String>,
    /// Permits the h=4 test parameter set.
    pub allow_toy_params: bool,
    /// Derives leaf keys from this seed instead of the OS generator.
    pub leaf_key_seed: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            validity_minutes: crate::schedule::DEFAULT_VALIDITY_MINUTES,
            overlap_minutes: crate::schedule::DEFAULT_OVERLAP_MINUTES,
            dummy_threshold: DEFAULT_DUMMY_THRESHOLD,
            skew_tolerance_ms: 60_000,
            issuer_cn: "ExampleCA".into(),
            subject_cn: "ECDSACrt".into(),
            san_dns: Some("example.com".into()),
            allow_toy_params: false,
            leaf_key_seed: None,
        }
    }
}

impl EngineConfig {
    pub fn policy(&self) -> IssuancePolicy {
        IssuancePolicy::new(self.overlap_minutes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Running,
    HaltedAwaitingAdmin,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedLeaf {
    pub index: u32,
    pub not_before: u64,
    pub not_after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeTimer {
    pub armed_at_mono_ms: u64,
    pub interval_ms: u64,
    /// Wall time the timer is expected to fire at.
    pub expected_wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum AdminDecision {
    /// The system clock has been fixed and now reads `time`.
    CorrectTime { time: u64 },
    /// `time` is right even though the time servers say otherwise.
    AcceptTime { time: u64 },
    /// Carry out the plan computed at the current trusted time.
    ExecutePlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SetupComplete { ca_index: u32, schedule_index: u32, start_index: u32, validity_minutes: u16 },
    Issued { index: u32, not_before: u64, not_after: u64 },
    Halted { reasons: Vec<String>, plan: Option<RecoveryPlan> },
    AdminAlert { message: String },
    AdminDecision { decision: AdminDecision },
    DummySigned { index: u32 },
    ScheduleUpdated { index: u32, start_index: u32, creation_date: u64, validity_minutes: u16 },
    Resumed { rationale: String },
    Restarted { next_index: u32 },
    Exhausted { next_index: u32 },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SetupComplete { .. } => "setup_complete",
            Self::Issued { .. } => "issued",
            Self::Halted { .. } => "halted",
            Self::AdminAlert { .. } => "admin_alert",
            Self::AdminDecision { .. } => "admin_decision",
            Self::DummySigned { .. } => "dummy_signed",
            Self::ScheduleUpdated { .. } => "schedule_updated",
            Self::Resumed { .. } => "resumed",
            Self::Restarted { .. } => "restarted",
            Self::Exhausted { .. } => "exhausted",
        }
    }

    /// XMSS indices this event records as signed.
    pub fn signed_indices(&self) -> Vec<u32> {
        match *self {
            Self::SetupComplete { ca_index, schedule_index, .. } => vec![ca_index, schedule_index],
            Self::Issued { index, .. } | Self::DummySigned { index } | Self::ScheduleUpdated { index, .. } => {
                vec![index]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineEvent {
    pub seq: u64,
    /// POSIX seconds of the system clock.
    pub at: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    pub phase: Phase,
    pub last_issued: Option<IssuedLeaf>,
    /// Highest index recorded as signed by any event.
    pub last_signed: Option<u32>,
    pub pending_plan: Option<RecoveryPlan>,
    /// Process-local; never persisted.
    pub armed_timer: Option<RelativeTimer>,
}

impl EngineState {
    /// Rebuilds the persistent part of the state from a log.
    pub fn replay(events: &[EngineEvent]) -> Self {
        let mut s =
            Self { phase: Phase::Running, last_issued: None, last_signed: None, pending_plan: None, armed_timer: None };
        for e in events {
            s.apply(&e.kind);
        }
        s
    }

    fn apply(&mut self, kind: &EventKind) {
        if let Some(max) = kind.signed_indices().into_iter().max() {
            self.last_signed = Some(self.last_signed.map_or(max, |l| l.max(max)));
        }
        match kind {
            EventKind::Issued { index, not_before, not_after } => {
                self.last_issued = Some(IssuedLeaf { index: *index, not_before: *not_before, not_after: *not_after })
            }
            EventKind::Halted { plan, .. } => {
                self.phase = Phase::HaltedAwaitingAdmin;
                self.pending_plan = plan.clone();
            }
            EventKind::Resumed { .. } => {
                self.phase = Phase::Running;
                self.pending_plan = None;
            }
            EventKind::Exhausted { .. } => self.phase = Phase::Exhausted,
            _ => {}
        }
    }
}

/// Everything the engine learns about time.
pub trait TimeAuthority {
    fn wall_ms(&self) -> u64;
    fn mono_ms(&self) -> u64;
    /// May take time (network queries); callers re-read the clock after.
    fn verdict(&mut self) -> TimeVerdict;
}

impl TimeAuthority for TimeService {
    fn wall_ms(&self) -> u64 {
        self.clock().now_ms()
    }

    fn mono_ms(&self) -> u64 {
        self.clock().monotonic_ms()
    }

    fn verdict(&mut self) -> TimeVerdict {
        TimeService::verdict(self)
    }
}

/// Fixed readings, set by hand. Without a verdict the wall clock is trusted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManualTime {
    pub wall_ms: u64,
    pub mono_ms: u64,
    pub verdict: Option<TimeVerdict>,
}

impl ManualTime {
    pub fn at_secs(secs: u64) -> Self {
        Self { wall_ms: secs * 1000, mono_ms: 0, verdict: None }
    }

    /// Real time passes.
    pub fn advance(&mut self, ms: u64) {
        self.wall_ms += ms;
        self.mono_ms += ms;
    }
}

impl TimeAuthority for ManualTime {
    fn wall_ms(&self) -> u64 {
        self.wall_ms
    }

    fn mono_ms(&self) -> u64 {
        self.mono_ms
    }

    fn verdict(&mut self) -> TimeVerdict {
        self.verdict.clone().unwrap_or_else(|| TimeVerdict::local_only(self.wall_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickOutcome {
    Idle,
    Issued(u32),
    Halted(Vec<String>),
    Exhausted,
    NotRunning(Phase),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wakeup {
    Now,
    AtMonotonic(u64),
    AtWall(u64),
}

/// Simulated process death at a point inside issuance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    CrashAfterReserve,
    CrashAfterSign,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("the h=4 test parameters are not allowed for a CA")]
    ToyParams,
    #[error("time is not trusted: {0}")]
    UntrustedTime(String),
    #[error("CA directory {0} is already initialised")]
    NotFresh(PathBuf),
    #[error("no anomaly to resolve: engine is {0:?}")]
    NotHalted(Phase),
    #[error("engine is {0:?}, not running")]
    NotRunning(Phase),
    #[error("simulated crash with index {index} consumed")]
    Crashed { index: u32 },
    #[error("corrupt CA state: {0}")]
    Corrupt(String),
    #[error(transparent)]
    KeyStore(#[from] KeyStoreError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Issue(#[from] IssueError),
    #[error(transparent)]
    Der(#[from] DerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct Engine {
    dir: PathBuf,
    config: EngineConfig,
    store: KeyStore,
    ca: Certificate,
    schedule: Schedule,
    log: EventLog,
    state: EngineState,
    /// Confirmed time minus system time, set by the last admin decision.
    confirmed_offset_s: Option<i64>,
    fault: Option<Fault>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dir", &self.dir)
            .field("next_index", &self.store.next_index())
            .field("state", &self.state)
            .finish()
    }
}

fn secs(ms: u64) -> u64 {
    ms / 1000
}

fn with_detail(head: String, detail: &Option<String>) -> String {
    match detail {
        Some(d) => format!("{head}: {d}"),
        None => head,
    }
}

impl Engine {
    /// Signs the CA certificate (index 0), the schedule (index 1) and the
    /// first leaf (index 2) into a fresh directory.
    pub fn setup(
        dir: impl AsRef<Path>,
        config: EngineConfig,
        params: XmssParams,
        entropy: &[u8],
        time: &mut dyn TimeAuthority,
        audit: Option<Arc<dyn SignAudit>>,
    ) -> Result<Self, EngineError> {
        let dir = dir.as_ref().to_path_buf();
        if params == XmssParams::TOY_4 && !config.allow_toy_params {
            return Err(EngineError::ToyParams);
        }
        config.policy().check(config.validity_minutes)?;
        let verdict = time.verdict();
        if !verdict.is_trusted() {
            return Err(EngineError::UntrustedTime(with_detail(verdict.status.to_string(), &verdict.alert)));
        }
        fs::create_dir_all(&dir)?;
        if dir.join(EVENT_LOG_FILE).exists() || dir.join(KEY_FILE).exists() {
            return Err(EngineError::NotFresh(dir));
        }
        let mut store = KeyStore::create_file(dir.join(KEY_FILE), params, entropy)?;
        if let Some(a) = audit {
            store.set_audit(a);
        }
        let now = secs(time.wall_ms());
        let lifetime = params.leaf_count().saturating_mul(u64::from(config.validity_minutes) * 60);
        let ca = self_sign_ca(&mut store, &config.issuer_cn, now, now.saturating_add(lifetime).min(MAX_TIME))?;
        let schedule = issue_schedule(&mut store, &config.policy(), now, config.validity_minutes)?;
        write_atomic(&dir.join(CA_CERT_FILE), &ca.to_der())?;
        save_schedule(&dir, &schedule)?;
        let log = EventLog::open(dir.join(EVENT_LOG_FILE))?;
        let mut engine = Self {
            state: EngineState::replay(log.events()),
            dir,
            config,
            store,
            ca,
            schedule,
            log,
            confirmed_offset_s: None,
            fault: None,
        };
        engine.emit(
            now,
            EventKind::SetupComplete {
                ca_index: engine.ca.xmss_index(),
                schedule_index: engine.schedule.signing_index(),
                start_index: engine.schedule.start_index(),
                validity_minutes: engine.config.validity_minutes,
            },
        )?;
        let first = engine.schedule.start_index();
        engine.issue(first, time.wall_ms(), time.mono_ms())?;
        Ok(engine)
    }

    /// Reopens an existing directory after a restart and checks the key
    /// index against the schedule before anything is signed.
    pub fn open(
        dir: impl AsRef<Path>,
        config: EngineConfig,
        time: &mut dyn TimeAuthority,
        audit: Option<Arc<dyn SignAudit>>,
    ) -> Result<Self, EngineError> {
        let dir = dir.as_ref().to_path_buf();
        let mut store = KeyStore::open_file(dir.join(KEY_FILE))?;
        if let Some(a) = audit {
            store.set_audit(a);
        }
        let ca = Certificate::from_der(&fs::read(dir.join(CA_CERT_FILE))?)?;
        if !ca.is_ca() || !ca.verify_signature(store.public_key()) {
            return Err(EngineError::Corrupt("CA certificate does not match the key".into()));
        }
        let schedule = Schedule::decode(&fs::read(dir.join(SCHEDULE_FILE))?)?;
        if !schedule.verify(store.public_key()) {
            return Err(EngineError::Corrupt("schedule signature does not verify".into()));
        }
        let log = EventLog::open(dir.join(EVENT_LOG_FILE))?;
        if log.dropped_tail() > 0 {
            ::log::warn!("event log: dropped {} bytes of torn tail", log.dropped_tail());
        }
        let mut state = EngineState::replay(log.events());
        if let Ok(bytes) = fs::read(dir.join(LEAF_CERT_FILE)) {
            let leaf = Certificate::from_der(&bytes)?;
            let index = leaf.xmss_index();
            if state.last_issued.is_none_or(|l| l.index < index) {
                state.last_issued = Some(IssuedLeaf { index, not_before: leaf.not_before, not_after: leaf.not_after });
            }
            state.last_signed = Some(state.last_signed.map_or(index, |l| l.max(index)));
        }
        let mut engine = Self { dir, config, store, ca, schedule, log, state, confirmed_offset_s: None, fault: None };
        engine.startup(time)?;
        Ok(engine)
    }

    fn startup(&mut self, time: &mut dyn TimeAuthority) -> Result<(), EngineError> {
        if self.state.phase != Phase::Running {
            return Ok(());
        }
        let verdict = time.verdict();
        let now = secs(time.wall_ms());
        self.emit(now, EventKind::Restarted { next_index: self.store.next_index() })?;
        if !verdict.is_trusted() {
            let reason = with_detail(format!("time not verified after restart ({})", verdict.status), &verdict.alert);
            return self.halt(now, vec![reason], None);
        }
        let plan = self.plan_recovery(now);
        match plan.action {
            RecoveryAction::Resume => Ok(()),
            RecoveryAction::Exhausted => self.exhaust(now),
            _ => self.halt(now, vec![format!("restart check: {}", plan.rationale)], Some(plan)),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn ca(&self) -> &Certificate {
        &self.ca
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn store(&self) -> &KeyStore {
        &self.store
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn events(&self) -> &[EngineEvent] {
        self.log.events()
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Alerts raised since the engine last resumed.
    pub fn alerts(&self) -> Vec<String> {
        let events = self.log.events();
        let start = events.iter().rposition(|e| matches!(e.kind, EventKind::Resumed { .. })).map_or(0, |i| i + 1);
        events[start..]
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::AdminAlert { message } => Some(message.clone()),
                _ => None,
            })
            .collect()
    }

    /// The leaf being served. Stays available while halted.
    pub fn current_leaf(&self) -> Option<(Certificate, ClassicalSecret)> {
        let cert = Certificate::from_der(&fs::read(self.dir.join(LEAF_CERT_FILE)).ok()?).ok()?;
        let secret = ClassicalSecret::from_bytes(&fs::read(self.dir.join(LEAF_KEY_FILE)).ok()?);
        Some((cert, secret))
    }

    pub fn plan_recovery(&self, trusted_now: u64) -> RecoveryPlan {
        plan_recovery(&RecoveryInputs {
            schedule: &self.schedule,
            policy: self.config.policy(),
            next_index: self.store.next_index(),
            last_signed: self.state.last_signed,
            leaf_count: self.store.params().leaf_count(),
            trusted_now,
            dummy_threshold: self.config.dummy_threshold,
        })
    }

    /// When the next tick can do anything.
    pub fn next_wakeup(&self, mono_now: u64) -> Option<Wakeup> {
        if self.state.phase != Phase::Running {
            return None;
        }
        if self.store.is_exhausted() {
            return Some(Wakeup::Now);
        }
        let due_wall = || match self.schedule.issue_instant(&self.config.policy(), self.store.next_index()) {
            Ok(t) => Wakeup::AtWall(t * 1000),
            Err(_) => Wakeup::Now,
        };
        Some(match self.state.armed_timer {
            Some(t) if mono_now < t.armed_at_mono_ms + t.interval_ms => {
                Wakeup::AtMonotonic(t.armed_at_mono_ms + t.interval_ms)
            }
            _ => due_wall(),
        })
    }

    fn trigger_reached(&self, wall_ms: u64, mono_ms: u64) -> bool {
        match self.state.armed_timer {
            Some(t) => mono_ms >= t.armed_at_mono_ms + t.interval_ms,
            None => match self.schedule.issue_instant(&self.config.policy(), self.store.next_index()) {
                Ok(at) => secs(wall_ms) >= at,
                Err(_) => true,
            },
        }
    }

    /// Issues the next leaf once it is due and every time check agrees;
    /// halts on any disagreement.
    pub fn tick(&mut self, time: &mut dyn TimeAuthority) -> Result<TickOutcome, EngineError> {
        if self.state.phase != Phase::Running {
            return Ok(TickOutcome::NotRunning(self.state.phase));
        }
        if self.store.is_exhausted() {
            self.exhaust(secs(time.wall_ms()))?;
            return Ok(TickOutcome::Exhausted);
        }
        if !self.trigger_reached(time.wall_ms(), time.mono_ms()) {
            return Ok(TickOutcome::Idle);
        }
        let verdict = time.verdict();
        let (wall, mono) = (time.wall_ms(), time.mono_ms());
        let now = secs(wall);
        let n = self.store.next_index();
        let mut reasons = Vec::new();
        if !verdict.is_trusted() {
            reasons.push(with_detail(format!("time verdict {}", verdict.status), &verdict.alert));
        }
        if let Some(t) = self.state.armed_timer {
            let elapsed = mono.saturating_sub(t.armed_at_mono_ms);
            if let CrossCheck::Anomaly(d) =
                cross_check(elapsed, t.interval_ms, wall, t.expected_wall_ms, self.config.skew_tolerance_ms)
            {
                reasons.push(format!("timer cross-check: {d}"));
            }
        }
        if let Some(last) = self.state.last_signed.filter(|l| *l >= n) {
            reasons.push(format!("key state rolled back: next index {n} but index {last} already signed"));
        }
        match self.schedule.index_due_at(&self.config.policy(), now) {
            None => reasons.push(format!("system time {now} is outside the schedule")),
            Some(d) if d == n => {}
            Some(d) if d + 1 == n && reasons.is_empty() => return Ok(TickOutcome::Idle),
            Some(d) if n < d => reasons.push(format!("next index {n} is {} behind the schedule index {d}", d - n)),
            Some(d) => reasons.push(format!("next index {n} is {} ahead of the schedule index {d}", n - d)),
        }
        if !reasons.is_empty() {
            self.halt(now, reasons.clone(), None)?;
            return Ok(TickOutcome::Halted(reasons));
        }
        match self.issue(n, wall, mono) {
            Ok(()) => Ok(TickOutcome::Issued(n)),
            Err(EngineError::Issue(IssueError::KeyStore(KeyStoreError::Exhausted { .. }))) => {
                self.exhaust(now)?;
                Ok(TickOutcome::Exhausted)
            }
            Err(EngineError::Issue(e @ IssueError::Mismatch { .. })) => {
                let reasons = vec![e.to_string()];
                self.halt(now, reasons.clone(), None)?;
                Ok(TickOutcome::Halted(reasons))
            }
            Err(e) => Err(e),
        }
    }

    fn leaf_keypair(&self, index: u32) -> ClassicalKeyPair {
        let mut rng = match self.config.leaf_key_seed {
            Some(seed) => {
                let mut h = Sha256::new();
                h.update(seed.to_be_bytes());
                h.update(index.to_be_bytes());
                ChaCha20Rng::from_seed(h.finalize().into())
            }
            None => ChaCha20Rng::from_entropy(),
        };
        EcdsaP256.generate(&mut rng)
    }

    fn issue(&mut self, index: u32, wall_ms: u64, mono_ms: u64) -> Result<(), EngineError> {
        let now = secs(wall_ms);
        if let Some(Fault::CrashAfterReserve) = self.fault {
            self.fault = None;
            let index = self.store.reserve_index()?;
            return Err(EngineError::Crashed { index });
        }
        let keys = self.leaf_keypair(index);
        let request = LeafRequest {
            subject_cn: self.config.subject_cn.clone(),
            san_dns: self.config.san_dns.clone(),
            public_key: keys.public.clone(),
        };
        let policy = self.config.policy();
        let leaf = issue_leaf(&mut self.store, &self.schedule, &policy, &self.config.issuer_cn, index, &request, now)?;
        if let Some(Fault::CrashAfterSign) = self.fault.take() {
            return Err(EngineError::Crashed { index });
        }
        write_secret(&self.dir.join(LEAF_KEY_FILE), keys.secret.as_bytes())?;
        write_atomic(&self.dir.join(LEAF_CERT_FILE), &leaf.to_der())?;
        self.emit(now, EventKind::Issued { index, not_before: leaf.not_before, not_after: leaf.not_after })?;
        self.state.armed_timer = match self.schedule.issue_instant(&policy, index + 1) {
            Ok(next) => Some(RelativeTimer {
                armed_at_mono_ms: mono_ms,
                interval_ms: (next * 1000).saturating_sub(wall_ms),
                expected_wall_ms: next * 1000,
            }),
            Err(_) => None,
        };
        Ok(())
    }

    /// Resolves a halt. Every decision is logged; the engine runs again only
    /// after the resulting plan executed cleanly. Returns the new events.
    pub fn apply_admin(
        &mut self,
        decision: AdminDecision,
        time: &mut dyn TimeAuthority,
    ) -> Result<Vec<EngineEvent>, EngineError> {
        if self.state.phase != Phase::HaltedAwaitingAdmin {
            return Err(EngineError::NotHalted(self.state.phase));
        }
        let mark = self.log.events().len();
        let now = secs(time.wall_ms());
        self.emit(now, EventKind::AdminDecision { decision: decision.clone() })?;
        let tolerance = self.config.skew_tolerance_ms / 1000;
        let confirmed = match decision {
            AdminDecision::CorrectTime { time: t } | AdminDecision::AcceptTime { time: t } if now.abs_diff(t) > tolerance => {
                Err(format!("decision time {t} differs from the system clock {now} by more than {tolerance} s; set the clock first"))
            }
            AdminDecision::CorrectTime { time: t } => {
                let v = time.verdict();
                if v.status == VerdictStatus::Adjusted {
                    Err(format!("time servers disagree with corrected time {t} by {} ms", v.applied_offset_ms))
                } else {
                    Ok(t)
                }
            }
            AdminDecision::AcceptTime { time: t } => Ok(t),
            AdminDecision::ExecutePlan => match self.confirmed_offset_s {
                Some(off) => Ok(now.saturating_add_signed(off)),
                None if time.verdict().is_trusted() => Ok(secs(time.wall_ms())),
                None => Err("no confirmed time: submit correct_time or accept_time first".to_owned()),
            },
        };
        match confirmed {
            Ok(t) => {
                self.confirmed_offset_s = Some(t as i64 - now as i64);
                let plan = self.plan_recovery(t);
                self.execute(plan, t, time)?;
            }
            Err(message) => self.emit(now, EventKind::AdminAlert { message })?,
        }
        Ok(self.log.events()[mark..].to_vec())
    }

    /// Operator-initiated re-anchoring, e.g. to change the validity period.
    /// The first leaf under the new schedule is due immediately.
    pub fn update_schedule(
        &mut self,
        validity_minutes: u16,
        time: &mut dyn TimeAuthority,
    ) -> Result<EngineEvent, EngineError> {
        if self.state.phase != Phase::Running {
            return Err(EngineError::NotRunning(self.state.phase));
        }
        let verdict = time.verdict();
        if !verdict.is_trusted() {
            return Err(EngineError::UntrustedTime(with_detail(verdict.status.to_string(), &verdict.alert)));
        }
        let now = secs(time.wall_ms());
        let next = update_schedule(&mut self.store, &self.schedule, &self.config.policy(), now, validity_minutes)?;
        save_schedule(&self.dir, &next)?;
        self.emit(
            now,
            EventKind::ScheduleUpdated {
                index: next.signing_index(),
                start_index: next.start_index(),
                creation_date: next.creation_date(),
                validity_minutes: next.validity_minutes(),
            },
        )?;
        self.schedule = next;
        self.config.validity_minutes = validity_minutes;
        self.state.armed_timer = None;
        Ok(self.log.events().last().cloned().expect("event just appended"))
    }

    fn execute(&mut self, plan: RecoveryPlan, t: u64, time: &mut dyn TimeAuthority) -> Result<(), EngineError> {
        let now = secs(time.wall_ms());
        match plan.action {
            RecoveryAction::Resume => {}
            RecoveryAction::DummySign { count } => {
                for _ in 0..count {
                    let index = self.store.reserve_index()?;
                    self.store.sign_with_reserved(index, &dummy_message(index))?;
                    self.emit(now, EventKind::DummySigned { index })?;
                }
            }
            RecoveryAction::ScheduleUpdate => {
                let next = update_schedule(
                    &mut self.store,
                    &self.schedule,
                    &self.config.policy(),
                    t,
                    self.config.validity_minutes,
                )?;
                save_schedule(&self.dir, &next)?;
                self.emit(
                    now,
                    EventKind::ScheduleUpdated {
                        index: next.signing_index(),
                        start_index: next.start_index(),
                        creation_date: next.creation_date(),
                        validity_minutes: next.validity_minutes(),
                    },
                )?;
                self.schedule = next;
            }
            RecoveryAction::Halt => {
                self.state.pending_plan = Some(plan.clone());
                return self.emit(
                    now,
                    EventKind::AdminAlert { message: format!("recovery not possible: {}", plan.rationale) },
                );
            }
            RecoveryAction::Exhausted => return self.exhaust(now),
        }
        self.confirmed_offset_s = None;
        self.emit(now, EventKind::Resumed { rationale: plan.rationale })
    }

    fn halt(&mut self, now: u64, reasons: Vec<String>, plan: Option<RecoveryPlan>) -> Result<(), EngineError> {
        let mut message = format!("issuance halted: {}", reasons.join("; "));
        if let Some(p) = &plan {
            message.push_str(&format!("; proposed {}", describe_action(&p.action)));
        }
        self.emit(now, EventKind::Halted { reasons, plan })?;
        self.emit(now, EventKind::AdminAlert { message })
    }

    fn exhaust(&mut self, now: u64) -> Result<(), EngineError> {
        let next_index = self.store.next_index();
        self.emit(now, EventKind::Exhausted { next_index })?;
        self.emit(
            now,
            EventKind::AdminAlert { message: format!("key exhausted at index {next_index}; a new CA is needed") },
        )
    }

    fn emit(&mut self, at: u64, kind: EventKind) -> Result<(), EngineError> {
        let event = EngineEvent { seq: self.log.next_seq(), at, kind };
        self.log.append(event.clone())?;
        if matches!(event.kind, EventKind::Halted { .. } | EventKind::Exhausted { .. }) {
            self.state.armed_timer = None;
        }
        self.state.apply(&event.kind);
        Ok(())
    }
}

pub fn describe_action(action: &RecoveryAction) -> String {
    match action {
        RecoveryAction::Resume => "resume".into(),
        RecoveryAction::DummySign { count } => format!("dummy_sign({count})"),
        RecoveryAction::ScheduleUpdate => "schedule_update".into(),
        RecoveryAction::Halt => "halt".into(),
        RecoveryAction::Exhausted => "exhausted".into(),
    }
}

fn save_schedule(dir: &Path, schedule: &Schedule) -> io::Result<()> {
    let bytes = schedule.encode();
    let history = dir.join(SCHEDULE_HISTORY_DIR);
    fs::create_dir_all(&history)?;
    write_atomic(&history.join(format!("{:08}.sched", schedule.signing_index())), &bytes)?;
    write_atomic(&dir.join(SCHEDULE_FILE), &bytes)
}

fn write_secret(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic(path, bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    }
    Ok(())
}

/// Every schedule the CA has signed, oldest first.
pub fn schedule_history(dir: &Path) -> io::Result<Vec<Vec<u8>>> {
    let mut paths: Vec<_> = fs::read_dir(dir.join(SCHEDULE_HISTORY_DIR))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == crate::schedule::SCHEDULE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(fs::read).collect()
}

/// Queue of admin decisions, written by the CLI and drained by the daemon.
pub struct AdminInbox;

impl AdminInbox {
    pub fn submit(dir: &Path, decision: &AdminDecision) -> io::Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(ADMIN_INBOX_FILE))?;
        let line = serde_json::to_string(decision).map_err(io::Error::other)?;
        writeln!(f, "{line}")?;
        f.sync_data()
    }

    /// Takes every pending decision, oldest first.
    pub fn drain(dir: &Path) -> io::Result<Vec<AdminDecision>> {
        let path = dir.join(ADMIN_INBOX_FILE);
        let f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut out = Vec::new();
        for line in io::BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
        }
        fs::remove_file(&path)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
