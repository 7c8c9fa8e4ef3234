//! Deterministic scenario simulator: virtual clock, simulated time servers,
//! crash/restart/rollback of the CA process and a verifying peer.

pub mod builtin;
pub mod script;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use schedca::engine::{
    describe_action, schedule_history, AdminDecision, Engine, EngineConfig, EngineError, EngineEvent, EventLog,
    TickOutcome, TimeAuthority, Wakeup, EVENT_LOG_FILE, KEY_FILE, LEAF_CERT_FILE,
};
use schedca::keystore::AuditTrail;
use schedca::timeauth::{
    ClockSource, NtpTransport, SimulatedServer, SntpError, TimeConfig, TimeService, TimeVerdict, VirtualClock,
    DEFAULT_SLEW_US_PER_S,
};
use schedca::verifier::{IngestError, TrustStore};
use schedca::xmss::ENTROPY_BYTES;
use tempfile::TempDir;

use crate::audit::{audit, AuditReport};
pub use script::{parse, Scenario, ScriptError, Step};
use script::{AdminStep, Expectation, FieldMatch, ServerRef, TimeBase, TimeExpr};

/// Lets the script change a server's behavior while the time service owns it.
#[derive(Clone)]
struct SharedServer(Arc<Mutex<SimulatedServer>>);

impl NtpTransport for SharedServer {
    fn exchange(&mut self, request: &[u8; 48], timeout_ms: u64) -> Result<Vec<u8>, SntpError> {
        self.0.lock().expect("server lock").exchange(request, timeout_ms)
    }
}

/// Time as the CA process sees it. Trusted verdicts with a small offset are
/// slewed into the clock, as an NTP daemon would.
pub struct SimTime {
    clock: VirtualClock,
    service: TimeService,
}

impl SimTime {
    pub fn new(clock: VirtualClock, service: TimeService) -> Self {
        Self { clock, service }
    }
}

impl TimeAuthority for SimTime {
    fn wall_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn mono_ms(&self) -> u64 {
        self.clock.monotonic_ms()
    }

    fn verdict(&mut self) -> TimeVerdict {
        let v = self.service.verdict();
        if v.is_trusted() && v.applied_offset_ms != 0 {
            self.clock.slew(v.applied_offset_ms, DEFAULT_SLEW_US_PER_S);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    /// Script line; 0 for checks added by the runner.
    pub line: usize,
    pub step: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioReport {
    pub name: String,
    pub outcomes: Vec<Outcome>,
    pub events: Vec<EngineEvent>,
    pub audit: AuditReport,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&Outcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }

    /// Stable text: no paths, no wall-clock readings of the host.
    pub fn render(&self) -> String {
        let mut s = format!("scenario {}\n", self.name);
        for o in &self.outcomes {
            let at = if o.line == 0 { "    -".to_owned() } else { format!("{:5}", o.line) };
            let _ = write!(s, "  {at}  {}  {}", if o.passed { "pass" } else { "FAIL" }, o.step);
            if !o.detail.is_empty() {
                let _ = write!(s, "  ({})", o.detail);
            }
            s.push('\n');
        }
        s.push_str("events\n");
        for e in &self.events {
            let body = serde_json::to_value(&e.kind).expect("events serialize");
            let _ = writeln!(s, "  #{} at {} {}", e.seq, e.at, body);
        }
        let _ = writeln!(s, "audit {}", self.audit.summary());
        let _ = writeln!(s, "result {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

struct World {
    sc: Scenario,
    clock: VirtualClock,
    servers: HashMap<String, Arc<Mutex<SimulatedServer>>>,
    time: SimTime,
    dir: TempDir,
    engine: Option<Engine>,
    audit: AuditTrail,
    snapshots: HashMap<String, Vec<u8>>,
    leaves: HashMap<String, Vec<u8>>,
    peer: Option<TrustStore>,
    /// Events before this position have been matched by expectations.
    cursor: usize,
    outcomes: Vec<Outcome>,
}

impl World {
    fn new(sc: &Scenario) -> std::io::Result<Self> {
        let clock = VirtualClock::new(sc.start * 1000);
        let mut service = TimeService::new(Arc::new(clock.clone()), TimeConfig::default());
        let mut servers = HashMap::new();
        for (i, name) in Scenario::server_names(sc.servers).into_iter().enumerate() {
            let server = Arc::new(Mutex::new(SimulatedServer::new(clock.clone(), 5 + 5 * i as u64)));
            service.add_server(&name, Box::new(SharedServer(server.clone())));
            servers.insert(name, server);
        }
        Ok(Self {
            sc: sc.clone(),
            time: SimTime::new(clock.clone(), service),
            clock,
            servers,
            dir: tempfile::tempdir()?,
            engine: None,
            audit: AuditTrail::new(),
            snapshots: HashMap::new(),
            leaves: HashMap::new(),
            peer: None,
            cursor: 0,
            outcomes: Vec::new(),
        })
    }

    fn config(&self) -> EngineConfig {
        EngineConfig {
            validity_minutes: self.sc.validity_minutes,
            overlap_minutes: self.sc.overlap_minutes,
            allow_toy_params: true,
            leaf_key_seed: Some(self.sc.seed),
            ..EngineConfig::default()
        }
    }

    fn events(&self) -> Vec<EngineEvent> {
        match &self.engine {
            Some(e) => e.events().to_vec(),
            None => EventLog::read(self.dir.path().join(EVENT_LOG_FILE)).unwrap_or_default(),
        }
    }

    fn fail(&mut self, line: usize, step: &str, detail: String) {
        self.outcomes.push(Outcome { line, step: step.to_owned(), passed: false, detail });
    }

    fn engine(&mut self) -> Result<&mut Engine, String> {
        self.engine.as_mut().ok_or_else(|| "CA process is down".to_owned())
    }

    fn restart(&mut self) -> Result<(), String> {
        self.engine = None;
        self.clock.restart_monotonic();
        let cfg = self.config();
        let audit = Arc::new(self.audit.clone());
        let engine = Engine::open(self.dir.path(), cfg, &mut self.time, Some(audit)).map_err(|e| e.to_string())?;
        self.engine = Some(engine);
        Ok(())
    }

    /// Lets `ms` of real time pass, waking the engine whenever it asks.
    fn advance(&mut self, ms: u64) -> Result<(), String> {
        let end = self.clock.monotonic_ms() + ms;
        let mut idle_spins = 0;
        loop {
            let mono = self.clock.monotonic_ms();
            let Some(engine) = self.engine.as_mut() else {
                self.clock.advance(end.saturating_sub(mono));
                return Ok(());
            };
            let wait = match engine.next_wakeup(mono) {
                None => {
                    self.clock.advance(end.saturating_sub(mono));
                    return Ok(());
                }
                Some(Wakeup::Now) => 0,
                Some(Wakeup::AtMonotonic(m)) => m.saturating_sub(mono),
                Some(Wakeup::AtWall(w)) => w.saturating_sub(self.clock.now_ms()),
            };
            if mono + wait > end {
                self.clock.advance(end.saturating_sub(mono));
                return Ok(());
            }
            self.clock.advance(wait);
            match engine.tick(&mut self.time) {
                Ok(TickOutcome::Idle) => {
                    idle_spins += 1;
                    if wait == 0 {
                        // woken early; let a millisecond pass
                        self.clock.advance(1);
                    }
                    if idle_spins > 1_000_000 {
                        return Err("engine never made progress".into());
                    }
                }
                Ok(_) => idle_spins = 0,
                Err(EngineError::Crashed { .. }) => self.engine = None,
                Err(e) => return Err(e.to_string()),
            }
        }
    }

    fn resolve(&self, t: TimeExpr, leaf: Option<&[u8]>) -> Result<u64, String> {
        let base_ms = match t.base {
            TimeBase::Now => self.clock.now_ms(),
            TimeBase::Reference => self.clock.reference_ms(),
            TimeBase::Posix(s) => s * 1000,
            TimeBase::NotBefore => {
                let der = leaf.ok_or("`nb` needs a leaf")?;
                schedca::certkit::Certificate::from_der(der).map_err(|e| e.to_string())?.not_before * 1000
            }
        };
        base_ms.checked_add_signed(t.offset_ms).map(|ms| ms / 1000).ok_or_else(|| "time before the epoch".into())
    }

    fn leaf_bytes(&self, label: &str) -> Result<Vec<u8>, String> {
        if label == "current" {
            fs::read(self.dir.path().join(LEAF_CERT_FILE)).map_err(|e| format!("no current leaf: {e}"))
        } else {
            self.leaves.get(label).cloned().ok_or_else(|| format!("leaf {label:?} was not captured"))
        }
    }

    fn step(&mut self, step: &Step) -> Result<(), String> {
        match step {
            Step::Setup => {
                let mut entropy = [0u8; ENTROPY_BYTES];
                ChaCha20Rng::seed_from_u64(self.sc.seed).fill_bytes(&mut entropy);
                let cfg = self.config();
                let audit = Arc::new(self.audit.clone());
                let engine =
                    Engine::setup(self.dir.path(), cfg.clone(), self.sc.params, &entropy, &mut self.time, Some(audit))
                        .map_err(|e| e.to_string())?;
                let mut peer = TrustStore::new(engine.ca().clone(), cfg.policy()).map_err(|e| e.to_string())?;
                peer.ingest_schedule(&engine.schedule().encode()).map_err(|e| e.to_string())?;
                self.peer = Some(peer);
                self.engine = Some(engine);
            }
            Step::Advance(ms) => self.advance(*ms)?,
            Step::Jump(ms) => self.clock.jump(*ms),
            Step::SetClock(s) => self.clock.set_wall(s * 1000),
            Step::FixClock => {
                self.clock.set_wall(self.clock.reference_ms());
                self.clock.slew(0, DEFAULT_SLEW_US_PER_S);
            }
            Step::Slew { offset_ms, rate_us_per_s } => self.clock.slew(*offset_ms, *rate_us_per_s),
            Step::Drift(us) => self.clock.set_drift(*us),
            Step::Crash => self.engine = None,
            Step::Restart => self.restart()?,
            Step::CrashRestart(down) => {
                self.engine = None;
                self.clock.advance(*down);
                self.restart()?;
            }
            Step::CrashDuringIssue => self.engine()?.inject_fault(schedca::engine::Fault::CrashAfterReserve),
            Step::Snapshot(label) => {
                let bytes = fs::read(self.dir.path().join(KEY_FILE)).map_err(|e| e.to_string())?;
                self.snapshots.insert(label.clone(), bytes);
            }
            Step::RollbackStateFile(label) => {
                self.engine = None;
                let bytes = self.snapshots.get(label).ok_or("unknown snapshot")?;
                fs::write(self.dir.path().join(KEY_FILE), bytes).map_err(|e| e.to_string())?;
                self.restart()?;
            }
            Step::NtpFault { server, behavior } => {
                let mut names: Vec<&String> = match server {
                    ServerRef::All => self.servers.keys().collect(),
                    ServerRef::Named(n) => vec![n],
                };
                names.sort();
                for n in names {
                    self.servers[n].lock().expect("server lock").behavior = *behavior;
                }
            }
            Step::Admin(a) => {
                let decision = match a {
                    AdminStep::CorrectTime(t) => AdminDecision::CorrectTime { time: self.resolve(*t, None)? },
                    AdminStep::AcceptTime(t) => AdminDecision::AcceptTime { time: self.resolve(*t, None)? },
                    AdminStep::ExecutePlan => AdminDecision::ExecutePlan,
                };
                let engine = self.engine.as_mut().ok_or("CA process is down")?;
                engine.apply_admin(decision, &mut self.time).map_err(|e| e.to_string())?;
            }
            Step::DeliverSchedule => {
                let history = schedule_history(self.dir.path()).map_err(|e| e.to_string())?;
                let peer = self.peer.as_mut().ok_or("no peer")?;
                for bytes in history {
                    match peer.ingest_schedule(&bytes) {
                        Ok(_) | Err(IngestError::Replay { .. }) => {}
                        Err(e) => return Err(e.to_string()),
                    }
                }
            }
            Step::CaptureLeaf(label) => {
                let bytes = self.leaf_bytes("current")?;
                self.leaves.insert(label.clone(), bytes);
            }
            Step::Expect(e) => return self.expect(e),
        }
        Ok(())
    }

    /// `Ok` means the expectation held; `Err` carries what was seen instead.
    fn expect(&mut self, e: &Expectation) -> Result<(), String> {
        let events = self.events();
        match e {
            Expectation::Event { kind, fields } => {
                let hit = events[self.cursor.min(events.len())..].iter().position(|ev| {
                    let v = serde_json::to_value(&ev.kind).expect("events serialize");
                    ev.kind.name() == kind && fields.iter().all(|f| field_matches(&v, f))
                });
                match hit {
                    Some(i) => {
                        self.cursor += i + 1;
                        Ok(())
                    }
                    None => Err(format!("not found after event #{}", self.cursor)),
                }
            }
            Expectation::NoEvent { kind } => {
                match events[self.cursor.min(events.len())..].iter().find(|ev| ev.kind.name() == kind) {
                    Some(ev) => Err(format!("found event #{}", ev.seq)),
                    None => Ok(()),
                }
            }
            Expectation::Phase(p) => {
                let got = self.engine.as_ref().map(|e| e.phase());
                if got == Some(*p) {
                    Ok(())
                } else {
                    Err(format!("phase {got:?}"))
                }
            }
            Expectation::Verdict(status) => {
                let v = self.time.verdict();
                if v.status == *status {
                    Ok(())
                } else {
                    Err(format!("verdict {} ({})", v.status, v.alert.unwrap_or_default()))
                }
            }
            Expectation::Plan(want) => {
                let engine = self.engine.as_ref().ok_or("CA process is down")?;
                let got = engine.state().pending_plan.as_ref().map(|p| describe_action(&p.action));
                if got.as_deref() == Some(want.as_str()) {
                    Ok(())
                } else {
                    Err(format!("plan {got:?}"))
                }
            }
            Expectation::Alert(text) => {
                let found = events[self.cursor.min(events.len())..].iter().any(|ev| {
                    matches!(&ev.kind, schedca::engine::EventKind::AdminAlert { message } if message.contains(text.as_str()))
                });
                if found {
                    Ok(())
                } else {
                    Err("no matching alert".into())
                }
            }
            Expectation::Verify { leaf, at, outcome } => {
                let der = self.leaf_bytes(leaf)?;
                let now = self.resolve(*at, Some(&der))?;
                let peer = self.peer.as_ref().ok_or("no peer")?;
                let got = match peer.verify_leaf(&der, now) {
                    Ok(_) => "accept".to_owned(),
                    Err(r) => r.code().to_owned(),
                };
                if &got == outcome {
                    Ok(())
                } else {
                    Err(format!("got {got} at {now}"))
                }
            }
            Expectation::NextIndex(i) => {
                let engine = self.engine.as_ref().ok_or("CA process is down")?;
                let got = engine.store().next_index();
                if got == *i {
                    Ok(())
                } else {
                    Err(format!("next index {got}"))
                }
            }
            Expectation::SignedCount(n) => {
                let got = self.audit.indices().len();
                if got == *n {
                    Ok(())
                } else {
                    Err(format!("{got} signatures"))
                }
            }
            Expectation::ClockErrorWithin(ms) => {
                let err = self.clock.error_ms();
                if err.unsigned_abs() <= *ms {
                    Ok(())
                } else {
                    Err(format!("clock error {err} ms"))
                }
            }
        }
    }
}

fn field_matches(event: &serde_json::Value, f: &FieldMatch) -> bool {
    let text = |k: &str| match event.get(k) {
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(v) => Some(v.to_string()),
        None => None,
    };
    match f {
        FieldMatch::Equals(k, v) => text(k).as_deref() == Some(v.as_str()),
        FieldMatch::Contains(k, v) => text(k).is_some_and(|t| t.contains(v.as_str())),
    }
}

/// Runs a parsed scenario in a fresh temporary CA directory.
pub fn run_scenario(sc: &Scenario, source: &str) -> std::io::Result<ScenarioReport> {
    let mut world = World::new(sc)?;
    let lines: Vec<&str> = source.lines().collect();
    for (line, step) in &sc.steps {
        let text = lines.get(line - 1).map_or("", |l| l.split('#').next().unwrap_or("").trim()).to_owned();
        let result = world.step(step);
        match (step, result) {
            (Step::Expect(_), r) => world.outcomes.push(Outcome {
                line: *line,
                step: text,
                passed: r.is_ok(),
                detail: r.err().unwrap_or_default(),
            }),
            (_, Ok(())) => {}
            (_, Err(detail)) => world.fail(*line, &text, detail),
        }
    }
    let events = world.events();
    let audit = audit(&world.audit, &events);
    world.outcomes.push(Outcome {
        line: 0,
        step: "double-sign audit".into(),
        passed: audit.passed(),
        detail: audit.summary(),
    });
    Ok(ScenarioReport { name: sc.name.clone(), outcomes: world.outcomes, events, audit })
}

/// Parses and runs script text.
pub fn run_script(source: &str) -> anyhow::Result<ScenarioReport> {
    let sc = parse(source)?;
    Ok(run_scenario(&sc, source)?)
}
