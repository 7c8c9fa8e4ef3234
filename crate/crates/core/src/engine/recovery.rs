use serde::{Deserialize, Serialize};

use crate::schedule::{IssuancePolicy, Schedule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecoveryAction {
    Resume,
    DummySign { count: u32 },
    ScheduleUpdate,
    Halt,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryPlan {
    #[serde(flatten)]
    pub action: RecoveryAction,
    pub rationale: String,
    /// Index due at the confirmed time, if inside the schedule.
    pub expected: Option<u32>,
    /// Keystore next index.
    pub actual: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct RecoveryInputs<'a> {
    pub schedule: &'a Schedule,
    pub policy: IssuancePolicy,
    pub next_index: u32,
    /// Highest index known to have signed anything.
    pub last_signed: Option<u32>,
    pub leaf_count: u64,
    pub trusted_now: u64,
    pub dummy_threshold: u32,
}

/// Decides how to get the key index back onto the schedule at a confirmed
/// time. Indices are compared with the index due at that time (the slot
/// whose issuance lead has started).
pub fn plan_recovery(i: &RecoveryInputs<'_>) -> RecoveryPlan {
    let n = i.next_index;
    let plan = |action, expected, rationale: String| RecoveryPlan { action, rationale, expected, actual: n };
    if u64::from(n) >= i.leaf_count {
        return plan(RecoveryAction::Exhausted, None, format!("all {} indices are used", i.leaf_count));
    }
    if let Some(last) = i.last_signed.filter(|l| *l >= n) {
        return plan(
            RecoveryAction::Halt,
            None,
            format!("key state rolled back: next index {n} but index {last} already signed"),
        );
    }
    let Some(d) = i.schedule.index_due_at(&i.policy, i.trusted_now) else {
        return plan(RecoveryAction::Halt, None, format!("time {} is outside the schedule", i.trusted_now));
    };
    let remaining = i.leaf_count - u64::from(n);
    let update = |why: String| {
        if remaining < 2 {
            plan(RecoveryAction::Exhausted, Some(d), format!("{why}; too few indices left for a schedule update"))
        } else {
            plan(RecoveryAction::ScheduleUpdate, Some(d), why)
        }
    };
    if n == d {
        plan(RecoveryAction::Resume, Some(d), format!("index {n} matches the schedule"))
    } else if n == d + 1 {
        plan(RecoveryAction::Resume, Some(d), format!("index {n} is one ahead of slot {d}; resuming at the next slot"))
    } else if n < d {
        let gap = d - n;
        if gap <= i.dummy_threshold {
            plan(RecoveryAction::DummySign { count: gap }, Some(d), format!("index {n} is {gap} behind the schedule"))
        } else {
            update(format!("index {n} is {gap} behind the schedule, over the dummy threshold {}", i.dummy_threshold))
        }
    } else {
        update(format!("index {n} is {} ahead of the schedule", n - d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleHeader;
    use crate::xmss::{XmssParams, XmssSignature};

    const C: u64 = 1_751_720_001;
    const SLOT: u64 = 238 * 60;

    fn sched() -> Schedule {
        let mut sig = vec![0u8; XmssParams::SHA2_16_256.signature_bytes()];
        sig[..4].copy_from_slice(&1u32.to_be_bytes());
        let h = ScheduleHeader { creation_date: C, validity_minutes: 240, start_index: 2, max_index: 65536 };
        Schedule::new(h, XmssSignature::from_bytes(&sig).unwrap()).unwrap()
    }

    fn run(next: u32, last: Option<u32>, now: u64) -> RecoveryPlan {
        let s = sched();
        plan_recovery(&RecoveryInputs {
            schedule: &s,
            policy: IssuancePolicy::default(),
            next_index: next,
            last_signed: last,
            leaf_count: 65536,
            trusted_now: now,
            dummy_threshold: 10,
        })
    }

    /// Middle of the slot for `index`.
    fn in_slot(index: u32) -> u64 {
        C + u64::from(index - 2) * SLOT + SLOT / 2
    }

    #[test]
    fn on_schedule_resumes() {
        // leaf 5 issued, next is 6, still inside slot 5
        assert_eq!(run(6, Some(5), in_slot(5)).action, RecoveryAction::Resume);
        // issue instant for 6 reached
        assert_eq!(run(6, Some(5), in_slot(6)).action, RecoveryAction::Resume);
    }

    #[test]
    fn gap_of_three_signs_dummies() {
        let p = run(6, Some(5), in_slot(9));
        assert_eq!(p.action, RecoveryAction::DummySign { count: 3 });
        assert_eq!(p.expected, Some(9));
    }

    #[test]
    fn threshold_boundary() {
        assert_eq!(run(6, Some(5), in_slot(16)).action, RecoveryAction::DummySign { count: 10 });
        assert_eq!(run(6, Some(5), in_slot(17)).action, RecoveryAction::ScheduleUpdate);
    }

    #[test]
    fn wasted_index_resumes_at_following_slot() {
        // crash after reserving 6 during slot 6's lead; next is 7
        assert_eq!(run(7, Some(5), in_slot(6)).action, RecoveryAction::Resume);
    }

    #[test]
    fn ahead_needs_schedule_update() {
        assert_eq!(run(9, Some(8), in_slot(6)).action, RecoveryAction::ScheduleUpdate);
    }

    #[test]
    fn rollback_and_range_halt() {
        let p = run(4, Some(6), in_slot(7));
        assert_eq!(p.action, RecoveryAction::Halt);
        assert!(p.rationale.contains("rolled back"));
        assert_eq!(run(6, Some(5), C - 1000).action, RecoveryAction::Halt);
    }

    #[test]
    fn exhaustion() {
        assert_eq!(run(65536, Some(65535), in_slot(100)).action, RecoveryAction::Exhausted);
        // an update needs two indices
        let far = C + 70_000 * SLOT;
        let s = sched();
        let p = plan_recovery(&RecoveryInputs {
            schedule: &s,
            policy: IssuancePolicy::default(),
            next_index: 65535,
            last_signed: Some(65534),
            leaf_count: 65536,
            trusted_now: C + 65532 * SLOT,
            dummy_threshold: 10,
        });
        assert_eq!(p.action, RecoveryAction::Resume);
        assert!(s.index_due_at(&IssuancePolicy::default(), far).is_none());
    }

    #[test]
    fn plan_serialises_flat() {
        let p = run(6, Some(5), in_slot(9));
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"action\":\"dummy_sign\""), "{json}");
        assert_eq!(serde_json::from_str::<RecoveryPlan>(&json).unwrap(), p);
    }
}
