use std::collections::HashSet;

use super::*;
use crate::keystore::AuditTrail;
use crate::timeauth::VerdictStatus;
use crate::xmss::ENTROPY_BYTES;

const T0: u64 = 1_751_720_001;
const SLOT: u64 = 238 * 60;
const DAY_MS: i64 = 86_400_000;

fn cfg() -> EngineConfig {
    EngineConfig { allow_toy_params: true, leaf_key_seed: Some(7), ..EngineConfig::default() }
}

struct Rig {
    dir: tempfile::TempDir,
    time: ManualTime,
    audit: AuditTrail,
}

impl Rig {
    fn new() -> (Self, Engine) {
        let dir = tempfile::tempdir().unwrap();
        let mut time = ManualTime::at_secs(T0);
        let audit = AuditTrail::new();
        let e = Engine::setup(
            dir.path(),
            cfg(),
            XmssParams::TOY_4,
            &[5; ENTROPY_BYTES],
            &mut time,
            Some(Arc::new(audit.clone())),
        )
        .unwrap();
        (Self { dir, time, audit }, e)
    }

    fn reopen(&mut self) -> Engine {
        self.time.mono_ms = 0;
        Engine::open(self.dir.path(), cfg(), &mut self.time, Some(Arc::new(self.audit.clone()))).unwrap()
    }

    fn jump(&mut self, ms: i64) {
        self.time.wall_ms = self.time.wall_ms.checked_add_signed(ms).unwrap();
    }

    /// Sleeps until the engine's next wakeup and ticks, until something happens.
    fn step(&mut self, e: &mut Engine) -> TickOutcome {
        for _ in 0..10 {
            match e.next_wakeup(self.time.mono_ms) {
                Some(Wakeup::AtMonotonic(m)) => self.time.advance(m.saturating_sub(self.time.mono_ms)),
                Some(Wakeup::AtWall(w)) => self.time.advance(w.saturating_sub(self.time.wall_ms)),
                Some(Wakeup::Now) | None => {}
            }
            let out = e.tick(&mut self.time).unwrap();
            if out != TickOutcome::Idle {
                return out;
            }
        }
        panic!("engine never acted");
    }
}

fn kinds(events: &[EngineEvent]) -> Vec<&'static str> {
    events.iter().map(|e| e.kind.name()).collect()
}

fn untrusted(wall_ms: u64, status: VerdictStatus) -> TimeVerdict {
    TimeVerdict {
        status,
        consensus_time_ms: wall_ms,
        applied_offset_ms: 0,
        agreeing: Vec::new(),
        alert: Some("servers disagree".into()),
    }
}

#[test]
fn setup_consumes_indices_zero_one_two() {
    let (mut rig, e) = Rig::new();
    assert_eq!(
        e.events()[0].kind,
        EventKind::SetupComplete { ca_index: 0, schedule_index: 1, start_index: 2, validity_minutes: 240 }
    );
    assert_eq!(e.events()[1].kind, EventKind::Issued { index: 2, not_before: T0, not_after: T0 + 14_400 });
    assert_eq!(e.schedule().start_index(), 2);
    assert_eq!(e.ca().xmss_index(), 0);
    assert_eq!(rig.audit.indices(), vec![0, 1, 2]);
    assert_eq!(e.current_leaf().unwrap().0.xmss_index(), 2);
    let again = Engine::setup(rig.dir.path(), cfg(), XmssParams::TOY_4, &[5; ENTROPY_BYTES], &mut rig.time, None);
    assert!(matches!(again, Err(EngineError::NotFresh(_))));
}

#[test]
fn toy_parameters_need_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let r = Engine::setup(
        dir.path(),
        EngineConfig::default(),
        XmssParams::TOY_4,
        &[5; ENTROPY_BYTES],
        &mut ManualTime::at_secs(T0),
        None,
    );
    assert!(matches!(r, Err(EngineError::ToyParams)));
}

#[test]
fn setup_requires_trusted_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut time = ManualTime::at_secs(T0);
    time.verdict = Some(untrusted(time.wall_ms, VerdictStatus::NoConsensus));
    let r = Engine::setup(dir.path(), cfg(), XmssParams::TOY_4, &[5; ENTROPY_BYTES], &mut time, None);
    assert!(matches!(r, Err(EngineError::UntrustedTime(_))));
    assert!(!dir.path().join(KEY_FILE).exists());
}

#[test]
fn consecutive_ticks_issue_consecutive_leaves_until_exhausted() {
    let (mut rig, mut e) = Rig::new();
    for i in 3..15 {
        assert_eq!(rig.step(&mut e), TickOutcome::Issued(i));
    }
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(15));
    assert_eq!(rig.step(&mut e), TickOutcome::Exhausted);
    assert_eq!(e.phase(), Phase::Exhausted);
    assert_eq!(rig.audit.indices(), (0..16).collect::<Vec<_>>());

    let issued: Vec<IssuedLeaf> = e
        .events()
        .iter()
        .filter_map(|ev| match ev.kind {
            EventKind::Issued { index, not_before, not_after } => Some(IssuedLeaf { index, not_before, not_after }),
            _ => None,
        })
        .collect();
    for pair in issued.windows(2) {
        assert!(pair[1].index > pair[0].index);
        assert_eq!(pair[0].not_after - pair[1].not_before, 120);
    }
    for leaf in &issued {
        let slot = e.schedule().issue_time_for_index(&e.config().policy(), leaf.index).unwrap();
        assert_eq!(leaf.not_before, slot);
    }
}

#[test]
fn issuance_happens_overlap_before_the_slot() {
    let (mut rig, mut e) = Rig::new();
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(3));
    let at = e.events().last().unwrap().at;
    assert_eq!(at, T0 + SLOT - 120);
}

#[test]
fn forward_jump_halts_until_time_is_corrected() {
    let (mut rig, mut e) = Rig::new();
    rig.jump(2 * DAY_MS);
    let TickOutcome::Halted(reasons) = rig.step(&mut e) else { panic!("expected a halt") };
    let all = reasons.join("; ");
    assert!(all.contains("absolute ahead 172800 s"), "{all}");
    assert!(all.contains("behind the schedule"), "{all}");
    assert!(e.alerts().iter().any(|a| a.contains("issuance halted")));
    assert_eq!(rig.audit.indices(), vec![0, 1, 2]);
    assert_eq!(e.tick(&mut rig.time).unwrap(), TickOutcome::NotRunning(Phase::HaltedAwaitingAdmin));

    rig.jump(-2 * DAY_MS);
    let now = rig.time.wall_ms / 1000;
    let events = e.apply_admin(AdminDecision::CorrectTime { time: now }, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "resumed"]);
    assert!(e.alerts().is_empty());
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(3));
}

#[test]
fn backward_jump_halts() {
    let (mut rig, mut e) = Rig::new();
    rig.jump(-DAY_MS);
    let TickOutcome::Halted(reasons) = rig.step(&mut e) else { panic!("expected a halt") };
    assert!(reasons.join("; ").contains("absolute behind 86400 s"));
    assert_eq!(rig.audit.indices(), vec![0, 1, 2]);
}

#[test]
fn untrusted_verdict_blocks_issuance() {
    let (mut rig, mut e) = Rig::new();
    rig.time.verdict = Some(untrusted(0, VerdictStatus::NoConsensus));
    let TickOutcome::Halted(reasons) = rig.step(&mut e) else { panic!("expected a halt") };
    assert!(reasons[0].contains("no-consensus"));
    assert_eq!(rig.audit.indices(), vec![0, 1, 2]);
}

#[test]
fn downtime_of_three_slots_signs_three_dummies() {
    let (mut rig, e) = Rig::new();
    drop(e);
    rig.time.advance(4 * SLOT * 1000 + SLOT * 500);
    let mut e = rig.reopen();
    assert_eq!(e.phase(), Phase::HaltedAwaitingAdmin);
    let plan = e.state().pending_plan.clone().unwrap();
    assert_eq!(plan.action, RecoveryAction::DummySign { count: 3 });
    let events = e.apply_admin(AdminDecision::ExecutePlan, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "dummy_signed", "dummy_signed", "dummy_signed", "resumed"]);
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(6));
    assert!(rig.audit.duplicates().is_empty());
}

#[test]
fn long_downtime_updates_the_schedule() {
    let (mut rig, e) = Rig::new();
    drop(e);
    rig.time.advance(12 * SLOT * 1000 + 1000);
    let mut e = rig.reopen();
    assert_eq!(e.state().pending_plan.as_ref().unwrap().action, RecoveryAction::ScheduleUpdate);
    let events = e.apply_admin(AdminDecision::ExecutePlan, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "schedule_updated", "resumed"]);
    assert_eq!(e.schedule().signing_index(), 3);
    assert_eq!(e.schedule().start_index(), 4);
    assert_eq!(schedule_history(rig.dir.path()).unwrap().len(), 2);
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(4));
}

#[test]
fn restart_inside_the_slot_resumes_silently() {
    let (mut rig, e) = Rig::new();
    drop(e);
    rig.time.advance(1000 * 60);
    let mut e = rig.reopen();
    assert_eq!(e.phase(), Phase::Running);
    assert_eq!(kinds(&e.events()[2..]), vec!["restarted"]);
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(3));
}

#[test]
fn rolled_back_key_state_is_detected() {
    let (mut rig, mut e) = Rig::new();
    let key = rig.dir.path().join(KEY_FILE);
    let old = fs::read(&key).unwrap();
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(3));
    drop(e);
    fs::write(&key, old).unwrap();
    let signed = rig.audit.indices().len();
    let mut e = rig.reopen();
    assert_eq!(e.phase(), Phase::HaltedAwaitingAdmin);
    assert!(e.alerts()[0].contains("rolled back"), "{:?}", e.alerts());
    let events = e.apply_admin(AdminDecision::ExecutePlan, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "admin_alert"]);
    assert_eq!(e.phase(), Phase::HaltedAwaitingAdmin);
    assert_eq!(rig.audit.indices().len(), signed);
}

#[test]
fn halt_survives_restart() {
    let (mut rig, mut e) = Rig::new();
    rig.time.verdict = Some(untrusted(0, VerdictStatus::Unavailable));
    assert!(matches!(rig.step(&mut e), TickOutcome::Halted(_)));
    drop(e);
    rig.time.verdict = None;
    let e = rig.reopen();
    assert_eq!(e.phase(), Phase::HaltedAwaitingAdmin);
    assert_ne!(e.events().last().unwrap().kind.name(), "restarted");
}

#[test]
fn crash_during_issuance_wastes_one_index() {
    let (mut rig, mut e) = Rig::new();
    e.inject_fault(Fault::CrashAfterReserve);
    rig.time.advance(SLOT * 1000 - 120_000);
    assert!(matches!(e.tick(&mut rig.time), Err(EngineError::Crashed { index: 3 })));
    drop(e);
    let mut e = rig.reopen();
    assert_eq!(e.phase(), Phase::Running);
    assert_eq!(e.store().next_index(), 4);
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(4));
    assert_eq!(rig.audit.indices(), vec![0, 1, 2, 4]);
}

#[test]
fn crash_after_signing_is_recovered_from_the_key_state() {
    let (mut rig, mut e) = Rig::new();
    e.inject_fault(Fault::CrashAfterSign);
    rig.time.advance(SLOT * 1000 - 120_000);
    assert!(matches!(e.tick(&mut rig.time), Err(EngineError::Crashed { index: 3 })));
    drop(e);
    let mut e = rig.reopen();
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(4));
    assert!(rig.audit.duplicates().is_empty());
}

#[test]
fn log_replay_rebuilds_state() {
    let (mut rig, mut e) = Rig::new();
    rig.step(&mut e);
    rig.jump(DAY_MS);
    rig.step(&mut e);
    rig.jump(-DAY_MS);
    let now = rig.time.wall_ms / 1000;
    e.apply_admin(AdminDecision::CorrectTime { time: now }, &mut rig.time).unwrap();
    rig.step(&mut e);
    let logged = EventLog::read(rig.dir.path().join(EVENT_LOG_FILE)).unwrap();
    assert_eq!(logged, e.events());
    let replayed = EngineState::replay(&logged);
    assert_eq!(replayed, EngineState { armed_timer: None, ..e.state().clone() });
    let seqs: Vec<u64> = logged.iter().map(|ev| ev.seq).collect();
    assert_eq!(seqs, (0..logged.len() as u64).collect::<Vec<_>>());
}

#[test]
fn admin_decisions_outside_a_halt_are_refused() {
    let (mut rig, mut e) = Rig::new();
    assert!(matches!(
        e.apply_admin(AdminDecision::ExecutePlan, &mut rig.time),
        Err(EngineError::NotHalted(Phase::Running))
    ));
    assert_eq!(e.events().len(), 2);
}

#[test]
fn inconsistent_decisions_keep_the_halt() {
    let (mut rig, mut e) = Rig::new();
    rig.jump(2 * DAY_MS);
    rig.step(&mut e);
    // clock still wrong
    let events = e.apply_admin(AdminDecision::CorrectTime { time: T0 + SLOT }, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "admin_alert"]);
    assert_eq!(e.phase(), Phase::HaltedAwaitingAdmin);
    // servers contradict the correction
    rig.time.verdict = Some(TimeVerdict { applied_offset_ms: -DAY_MS, ..untrusted(0, VerdictStatus::Adjusted) });
    let now = rig.time.wall_ms / 1000;
    let events = e.apply_admin(AdminDecision::CorrectTime { time: now }, &mut rig.time).unwrap();
    assert!(matches!(&events[1].kind, EventKind::AdminAlert { message } if message.contains("time servers disagree")));
    assert_eq!(rig.audit.indices(), vec![0, 1, 2]);
}

#[test]
fn accepted_forward_time_runs_ahead_and_an_update_recovers() {
    let (mut rig, e) = Rig::new();
    drop(e);
    // compromised servers agree with a clock that skipped three slots
    rig.time.advance(60_000);
    rig.jump((4 * SLOT * 1000) as i64);
    let mut e = rig.reopen();
    assert_eq!(e.state().pending_plan.as_ref().unwrap().action, RecoveryAction::DummySign { count: 3 });
    let now = rig.time.wall_ms / 1000;
    e.apply_admin(AdminDecision::AcceptTime { time: now }, &mut rig.time).unwrap();
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(6));
    let premature = e.current_leaf().unwrap().0;

    rig.jump(-((4 * SLOT * 1000) as i64));
    assert!(matches!(rig.step(&mut e), TickOutcome::Halted(_)));
    let now = rig.time.wall_ms / 1000;
    let events = e.apply_admin(AdminDecision::CorrectTime { time: now }, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "schedule_updated", "resumed"]);
    let s = e.schedule();
    assert_eq!(s.signing_index(), 7);
    assert!(premature.not_before > s.creation_date());
    assert_ne!(s.index_for_time(&e.config().policy(), premature.not_before), Some(premature.xmss_index()));
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(8));
}

#[test]
fn execute_plan_on_exhausted_store_reports_exhaustion() {
    let (mut rig, mut e) = Rig::new();
    for i in 3..16 {
        assert_eq!(rig.step(&mut e), TickOutcome::Issued(i));
    }
    drop(e);
    rig.time.verdict = Some(untrusted(0, VerdictStatus::Unavailable));
    let mut e = rig.reopen();
    assert_eq!(e.phase(), Phase::HaltedAwaitingAdmin);
    rig.time.verdict = None;
    let events = e.apply_admin(AdminDecision::ExecutePlan, &mut rig.time).unwrap();
    assert_eq!(kinds(&events), vec!["admin_decision", "exhausted", "admin_alert"]);
    assert_eq!(e.phase(), Phase::Exhausted);
}

#[test]
fn signatures_never_repeat_across_the_log() {
    let (mut rig, mut e) = Rig::new();
    for _ in 0..3 {
        rig.step(&mut e);
    }
    drop(e);
    rig.time.advance(5 * SLOT * 1000);
    let mut e = rig.reopen();
    e.apply_admin(AdminDecision::ExecutePlan, &mut rig.time).unwrap();
    rig.step(&mut e);
    let mut seen = HashSet::new();
    for ev in e.events() {
        for i in ev.kind.signed_indices() {
            assert!(seen.insert(i), "index {i} logged twice");
        }
    }
    let audited: HashSet<u32> = rig.audit.indices().into_iter().collect();
    assert_eq!(seen, audited);
}

#[test]
fn dummy_messages_are_tagged() {
    assert_eq!(dummy_message(0x0102_0304), b"DUMMY\x01\x02\x03\x04");
}

#[test]
fn admin_inbox_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    assert!(AdminInbox::drain(dir.path()).unwrap().is_empty());
    AdminInbox::submit(dir.path(), &AdminDecision::CorrectTime { time: 5 }).unwrap();
    AdminInbox::submit(dir.path(), &AdminDecision::ExecutePlan).unwrap();
    assert_eq!(
        AdminInbox::drain(dir.path()).unwrap(),
        vec![AdminDecision::CorrectTime { time: 5 }, AdminDecision::ExecutePlan]
    );
    assert!(AdminInbox::drain(dir.path()).unwrap().is_empty());
}

#[test]
fn operator_update_changes_validity_and_issues_at_once() {
    let (mut rig, mut e) = Rig::new();
    assert_eq!(rig.step(&mut e), TickOutcome::Issued(3));
    rig.time.advance(600_000);
    let ev = e.update_schedule(120, &mut rig.time).unwrap();
    assert_eq!(
        ev.kind,
        EventKind::ScheduleUpdated {
            index: 4,
            start_index: 5,
            creation_date: rig.time.wall_ms / 1000,
            validity_minutes: 120
        }
    );
    assert_eq!(e.schedule().validity_minutes(), 120);
    assert_eq!(e.tick(&mut rig.time).unwrap(), TickOutcome::Issued(5));
    let (leaf, _) = e.current_leaf().unwrap();
    assert_eq!(leaf.not_after - leaf.not_before, 120 * 60);
    assert_eq!(schedule_history(rig.dir.path()).unwrap().len(), 2);
    drop(e);
    let e = rig.reopen();
    assert_eq!(e.schedule().validity_minutes(), 120);
    assert_eq!(e.phase(), Phase::Running);
}

#[test]
fn operator_update_needs_running_engine_and_trusted_time() {
    let (mut rig, mut e) = Rig::new();
    rig.time.verdict = Some(untrusted(rig.time.wall_ms, VerdictStatus::NoConsensus));
    assert!(matches!(e.update_schedule(240, &mut rig.time), Err(EngineError::UntrustedTime(_))));
    assert!(matches!(rig.step(&mut e), TickOutcome::Halted(_)));
    assert!(matches!(e.update_schedule(240, &mut rig.time), Err(EngineError::NotRunning(Phase::HaltedAwaitingAdmin))));
    assert_eq!(rig.audit.indices(), vec![0, 1, 2]);
}
