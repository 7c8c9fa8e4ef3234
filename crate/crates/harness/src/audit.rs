//! Double-sign audit over every index handed to the XMSS signer and every
//! index the event log claims.

use std::collections::{BTreeMap, BTreeSet};

use schedca::engine::EngineEvent;
use schedca::keystore::AuditTrail;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuditReport {
    /// Indices in signing order, across all process lifetimes.
    pub signed: Vec<u32>,
    pub duplicates: Vec<u32>,
    /// Indices the event log reports more than once.
    pub log_duplicates: Vec<u32>,
    /// Logged indices the signer never saw.
    pub unexplained: Vec<u32>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.duplicates.is_empty() && self.log_duplicates.is_empty() && self.unexplained.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} signatures, {} duplicate, {} logged twice, {} unexplained",
            self.signed.len(),
            self.duplicates.len(),
            self.log_duplicates.len(),
            self.unexplained.len()
        )
    }

    pub fn merge(&mut self, other: &AuditReport) {
        self.signed.extend_from_slice(&other.signed);
        self.duplicates.extend_from_slice(&other.duplicates);
        self.log_duplicates.extend_from_slice(&other.log_duplicates);
        self.unexplained.extend_from_slice(&other.unexplained);
    }
}

fn repeated(indices: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut counts = BTreeMap::new();
    for i in indices {
        *counts.entry(i).or_insert(0u32) += 1;
    }
    counts.into_iter().filter(|(_, n)| *n > 1).map(|(i, _)| i).collect()
}

pub fn audit(trail: &AuditTrail, events: &[EngineEvent]) -> AuditReport {
    let signed = trail.indices();
    let logged: Vec<u32> = events.iter().flat_map(|e| e.kind.signed_indices()).collect();
    let seen: BTreeSet<u32> = signed.iter().copied().collect();
    AuditReport {
        duplicates: repeated(signed.iter().copied()),
        log_duplicates: repeated(logged.iter().copied()),
        unexplained: logged.iter().copied().filter(|i| !seen.contains(i)).collect(),
        signed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use schedca::engine::EventKind;
    use schedca::keystore::SignAudit;

    #[test]
    fn flags_repeats_and_unexplained_indices() {
        let trail = AuditTrail::new();
        for i in [0, 1, 2, 2] {
            trail.record(i);
        }
        let ev = |seq, index| EngineEvent { seq, at: 0, kind: EventKind::DummySigned { index } };
        let r = audit(&trail, &[ev(0, 1), ev(1, 1), ev(2, 9)]);
        assert_eq!(r.duplicates, vec![2]);
        assert_eq!(r.log_duplicates, vec![1]);
        assert_eq!(r.unexplained, vec![9]);
        assert!(!r.passed());
        assert!(audit(&AuditTrail::new(), &[]).passed());
    }
}
