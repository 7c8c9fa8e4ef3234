//! Peer-side checks: chain to the CA, schedule conformance of the leaf's
//! XMSS index, validity window and handshake signatures.

use serde::Serialize;
use thiserror::Error;

use crate::certkit::{verify_handshake, Certificate, ClassicalSuite, HandshakeError, TbsAlgorithm};
use crate::schedule::{IssuancePolicy, Schedule, ScheduleError};

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("CA certificate: {0}")]
    Malformed(String),
    #[error("certificate is not a self-signed XMSS CA")]
    NotACa,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schedule does not decode: {0}")]
    Decode(#[from] ScheduleError),
    #[error("schedule signature does not verify under the CA key")]
    BadSignature,
    #[error("schedule signed with index {signing_index} does not supersede index {newest}")]
    Replay { signing_index: u32, newest: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Reject {
    #[error("malformed certificate: {detail}")]
    Malformed { detail: String },
    #[error("certificate is not a leaf")]
    NotALeaf,
    #[error("issuer {issuer} is not the trusted CA")]
    UnknownIssuer { issuer: String },
    #[error("CA signature does not verify")]
    BadCaSignature,
    #[error("no schedule covers not_before {not_before}")]
    NoSchedule { not_before: u64 },
    #[error("index {index} does not match the schedule (expected {expected:?} under schedule {schedule_index})")]
    ScheduleMismatch { index: u32, expected: Option<u32>, schedule_index: u32 },
    #[error("not valid before {not_before} (now {now})")]
    NotYetValid { now: u64, not_before: u64 },
    #[error("expired at {not_after} (now {now})")]
    Expired { now: u64, not_after: u64 },
    #[error("handshake signature invalid")]
    BadSignature,
}

impl Reject {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Malformed { .. } => "malformed",
            Self::NotALeaf => "not-a-leaf",
            Self::UnknownIssuer { .. } => "unknown-issuer",
            Self::BadCaSignature => "bad-ca-signature",
            Self::NoSchedule { .. } => "no-schedule",
            Self::ScheduleMismatch { .. } => "schedule-mismatch",
            Self::NotYetValid { .. } => "not-yet-valid",
            Self::Expired { .. } => "expired",
            Self::BadSignature => "bad-signature",
        }
    }
}

/// One CA and the schedules it has distributed, ordered by signing index.
#[derive(Debug, Clone)]
pub struct TrustStore {
    ca: Certificate,
    schedules: Vec<Schedule>,
    policy: IssuancePolicy,
}

impl TrustStore {
    pub fn new(ca: Certificate, policy: IssuancePolicy) -> Result<Self, TrustError> {
        let self_signed = ca.is_ca()
            && ca.issuer_cn == ca.subject_cn
            && ca.tbs_algorithm == TbsAlgorithm::Xmss
            && ca.signature.index() == 0;
        if !self_signed {
            return Err(TrustError::NotACa);
        }
        let key = ca.xmss_public_key().ok_or(TrustError::NotACa)?.clone();
        if !ca.verify_signature(&key) {
            return Err(TrustError::NotACa);
        }
        Ok(Self { ca, schedules: Vec::new(), policy })
    }

    pub fn from_der(ca_der: &[u8], policy: IssuancePolicy) -> Result<Self, TrustError> {
        Self::new(Certificate::from_der(ca_der).map_err(|e| TrustError::Malformed(e.to_string()))?, policy)
    }

    pub fn ca(&self) -> &Certificate {
        &self.ca
    }

    pub fn policy(&self) -> IssuancePolicy {
        self.policy
    }

    pub fn schedules(&self) -> &[Schedule] {
        &self.schedules
    }

    pub fn newest(&self) -> Option<&Schedule> {
        self.schedules.last()
    }

    /// Accepts a schedule only if it verifies and supersedes every stored one.
    pub fn ingest_schedule(&mut self, bytes: &[u8]) -> Result<&Schedule, IngestError> {
        let schedule = Schedule::decode(bytes)?;
        let key = self.ca.xmss_public_key().expect("checked at construction");
        if !schedule.verify(key) {
            return Err(IngestError::BadSignature);
        }
        if let Some(newest) = self.newest() {
            if schedule.signing_index() <= newest.signing_index() {
                return Err(IngestError::Replay {
                    signing_index: schedule.signing_index(),
                    newest: newest.signing_index(),
                });
            }
        }
        self.schedules.push(schedule);
        Ok(self.schedules.last().expect("just pushed"))
    }

    /// The newest schedule already in force at `not_before`. A leaf dated
    /// after a schedule update is judged by the update even if its index
    /// predates it, which is what exposes prematurely issued leaves.
    pub fn applicable_schedule(&self, not_before: u64) -> Option<&Schedule> {
        self.schedules.iter().rev().find(|s| s.creation_date() <= not_before)
    }

    /// Read-only and deterministic in (store, bytes, now).
    pub fn verify_leaf(&self, bytes: &[u8], now: u64) -> Result<Certificate, Reject> {
        let leaf = Certificate::from_der(bytes).map_err(|e| Reject::Malformed { detail: e.to_string() })?;
        if leaf.is_ca() || leaf.classical_key().is_none() {
            return Err(Reject::NotALeaf);
        }
        if leaf.issuer_cn != self.ca.subject_cn {
            return Err(Reject::UnknownIssuer { issuer: leaf.issuer_cn.clone() });
        }
        let key = self.ca.xmss_public_key().expect("checked at construction");
        if !leaf.verify_signature(key) {
            return Err(Reject::BadCaSignature);
        }
        let index = leaf.xmss_index();
        if leaf.serial != u64::from(index) {
            return Err(Reject::Malformed {
                detail: format!("serial {} differs from signature index {index}", leaf.serial),
            });
        }
        let schedule =
            self.applicable_schedule(leaf.not_before).ok_or(Reject::NoSchedule { not_before: leaf.not_before })?;
        let expected = schedule.index_for_time(&self.policy, leaf.not_before);
        if expected != Some(index) || leaf.validity_secs() != schedule.validity_secs() {
            return Err(Reject::ScheduleMismatch { index, expected, schedule_index: schedule.signing_index() });
        }
        if now < leaf.not_before {
            return Err(Reject::NotYetValid { now, not_before: leaf.not_before });
        }
        if now > leaf.not_after {
            return Err(Reject::Expired { now, not_after: leaf.not_after });
        }
        Ok(leaf)
    }

    /// `verify_leaf` plus the classical signature over the transcript.
    pub fn verify_peer_auth(
        &self,
        suite: &dyn ClassicalSuite,
        leaf_bytes: &[u8],
        transcript: &[u8],
        signature: &[u8],
        now: u64,
    ) -> Result<Certificate, Reject> {
        let leaf = self.verify_leaf(leaf_bytes, now)?;
        match verify_handshake(suite, &leaf, transcript, signature, now) {
            Ok(()) => Ok(leaf),
            Err(HandshakeError::NotYetValid { now, not_before }) => Err(Reject::NotYetValid { now, not_before }),
            Err(HandshakeError::Expired { now, not_after }) => Err(Reject::Expired { now, not_after }),
            Err(HandshakeError::NotALeaf) => Err(Reject::NotALeaf),
            Err(HandshakeError::BadSecret | HandshakeError::BadSignature) => Err(Reject::BadSignature),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::certkit::{authenticate_handshake, issue_leaf, self_sign_ca, ClassicalKeyPair, EcdsaP256, LeafRequest};
    use crate::keystore::{KeyStore, MemoryMedium, NoWrap};
    use crate::schedule::{issue_schedule, update_schedule};
    use crate::xmss::{XmssParams, ENTROPY_BYTES};

    const T0: u64 = 1_751_720_001;
    const SLOT: u64 = 238 * 60;

    struct Ca {
        store: KeyStore,
        ca: Certificate,
        schedules: Vec<Schedule>,
        rng: ChaCha20Rng,
    }

    impl Ca {
        fn new() -> Self {
            let mut store = KeyStore::create(
                Box::new(MemoryMedium::new()),
                Box::new(NoWrap),
                XmssParams::TOY_4,
                &[9; ENTROPY_BYTES],
            )
            .unwrap();
            let ca = self_sign_ca(&mut store, "ExampleCA", T0, T0 + 10 * 365 * 86_400).unwrap();
            let s = issue_schedule(&mut store, &IssuancePolicy::default(), T0, 240).unwrap();
            Self { store, ca, schedules: vec![s], rng: ChaCha20Rng::seed_from_u64(3) }
        }

        fn trust(&self) -> TrustStore {
            let mut ts = TrustStore::new(self.ca.clone(), IssuancePolicy::default()).unwrap();
            for s in &self.schedules {
                ts.ingest_schedule(&s.encode()).unwrap();
            }
            ts
        }

        /// Issues the leaf for `index` at its issue instant under the newest schedule.
        fn leaf(&mut self, index: u32) -> (Certificate, ClassicalKeyPair) {
            let p = IssuancePolicy::default();
            let s = self.schedules.last().unwrap();
            let at = s.issue_instant(&p, index).unwrap();
            self.leaf_at(index, at)
        }

        fn leaf_at(&mut self, index: u32, at: u64) -> (Certificate, ClassicalKeyPair) {
            let keys = EcdsaP256.generate(&mut self.rng);
            let req = LeafRequest { subject_cn: "ECDSACrt".into(), san_dns: None, public_key: keys.public.clone() };
            let s = self.schedules.last().unwrap();
            let c = issue_leaf(&mut self.store, s, &IssuancePolicy::default(), "ExampleCA", index, &req, at).unwrap();
            (c, keys)
        }

        fn update(&mut self, now: u64) {
            let s =
                update_schedule(&mut self.store, self.schedules.last().unwrap(), &IssuancePolicy::default(), now, 240)
                    .unwrap();
            self.schedules.push(s);
        }
    }

    #[test]
    fn nominal_leaf_accepted_mid_validity() {
        let mut ca = Ca::new();
        let (leaf, _) = ca.leaf(2);
        let ts = ca.trust();
        let got = ts.verify_leaf(&leaf.to_der(), T0 + 7200).unwrap();
        assert_eq!(got, leaf);
    }

    #[test]
    fn validity_window_boundaries() {
        let mut ca = Ca::new();
        let (leaf, _) = ca.leaf(2);
        let ts = ca.trust();
        let der = leaf.to_der();
        assert!(ts.verify_leaf(&der, leaf.not_after).is_ok());
        assert_eq!(ts.verify_leaf(&der, leaf.not_after + 1).unwrap_err().code(), "expired");
        assert_eq!(ts.verify_leaf(&der, leaf.not_before - 1).unwrap_err().code(), "not-yet-valid");
    }

    #[test]
    fn both_leaves_verify_inside_the_overlap() {
        let mut ca = Ca::new();
        let (a, _) = ca.leaf(2);
        let (b, _) = ca.leaf(3);
        let ts = ca.trust();
        for t in b.not_before..=a.not_after {
            assert!(ts.verify_leaf(&a.to_der(), t).is_ok());
            assert!(ts.verify_leaf(&b.to_der(), t).is_ok());
        }
        assert_eq!(a.not_after - b.not_before, 120);
        assert!(ts.verify_leaf(&a.to_der(), a.not_after + 1).is_err());
    }

    #[test]
    fn premature_leaf_rejected_after_update() {
        let mut ca = Ca::new();
        ca.leaf(2);
        // clock ran four slots ahead: index 3 issued for a slot long in the future
        let future = ca.schedules[0].issue_instant(&IssuancePolicy::default(), 6).unwrap();
        for i in 3..6 {
            let idx = ca.store.reserve_index().unwrap();
            assert_eq!(idx, i);
            ca.store.sign_with_reserved(idx, b"DUMMY").unwrap();
        }
        let (premature, _) = ca.leaf_at(6, future);
        let before = ca.trust();
        assert!(before.verify_leaf(&premature.to_der(), premature.not_before + 60).is_ok());
        // back at true time the CA re-anchors
        ca.update(T0 + SLOT / 2);
        let ts = ca.trust();
        let err = ts.verify_leaf(&premature.to_der(), premature.not_before + 60).unwrap_err();
        assert_eq!(err.code(), "schedule-mismatch", "{err}");
        // the leaf from before the update still verifies
        let (fresh, _) = ca.leaf(8);
        assert!(ts.verify_leaf(&fresh.to_der(), fresh.not_before + 1).is_ok());
    }

    #[test]
    fn leaf_from_superseded_schedule_uses_its_own_schedule() {
        let mut ca = Ca::new();
        let (old, _) = ca.leaf(2);
        ca.update(T0 + 600);
        let ts = ca.trust();
        assert_eq!(ts.applicable_schedule(old.not_before).unwrap().signing_index(), 1);
        assert!(ts.verify_leaf(&old.to_der(), T0 + 700).is_ok());
    }

    #[test]
    fn schedule_ingest_rules() {
        let mut ca = Ca::new();
        ca.update(T0 + SLOT);
        let mut ts = TrustStore::new(ca.ca.clone(), IssuancePolicy::default()).unwrap();
        let first = ca.schedules[0].encode();
        assert_eq!(ts.ingest_schedule(&first).unwrap().signing_index(), 1);
        assert!(matches!(ts.ingest_schedule(&first), Err(IngestError::Replay { .. })));
        let mut mutated = ca.schedules[1].encode();
        mutated[5] ^= 1;
        assert!(matches!(ts.ingest_schedule(&mutated), Err(IngestError::BadSignature)));
        ts.ingest_schedule(&ca.schedules[1].encode()).unwrap();
        assert!(matches!(ts.ingest_schedule(&first), Err(IngestError::Replay { signing_index: 1, newest: 2 })));
        assert!(matches!(ts.ingest_schedule(&first[..10]), Err(IngestError::Decode(_))));
    }

    #[test]
    fn schedule_from_another_ca_is_refused() {
        let ca = Ca::new();
        let mut other =
            KeyStore::create(Box::new(MemoryMedium::new()), Box::new(NoWrap), XmssParams::TOY_4, &[1; ENTROPY_BYTES])
                .unwrap();
        self_sign_ca(&mut other, "ExampleCA", T0, T0 + 1).unwrap();
        let foreign = issue_schedule(&mut other, &IssuancePolicy::default(), T0, 240).unwrap();
        let mut ts = ca.trust();
        assert!(matches!(ts.ingest_schedule(&foreign.encode()), Err(IngestError::BadSignature)));
    }

    #[test]
    fn leaf_without_schedule_or_from_stranger() {
        let mut ca = Ca::new();
        let (leaf, _) = ca.leaf(2);
        let empty = TrustStore::new(ca.ca.clone(), IssuancePolicy::default()).unwrap();
        assert_eq!(empty.verify_leaf(&leaf.to_der(), T0 + 1).unwrap_err().code(), "no-schedule");
        let ts = ca.trust();
        assert_eq!(ts.verify_leaf(&ca.ca.to_der(), T0 + 1).unwrap_err().code(), "not-a-leaf");
        let mut der = leaf.to_der();
        let last = der.len() - 1;
        der[last] ^= 1;
        assert_eq!(ts.verify_leaf(&der, T0 + 1).unwrap_err().code(), "bad-ca-signature");
        assert_eq!(ts.verify_leaf(&der[..40], T0 + 1).unwrap_err().code(), "malformed");
    }

    #[test]
    fn handshake_accepts_and_rejects_mutated_transcript() {
        let mut ca = Ca::new();
        let (leaf, keys) = ca.leaf(2);
        let ts = ca.trust();
        let now = T0 + 60;
        let sig = authenticate_handshake(&EcdsaP256, &leaf, &keys.secret, b"transcript", now).unwrap();
        assert!(ts.verify_peer_auth(&EcdsaP256, &leaf.to_der(), b"transcript", &sig, now).is_ok());
        let err = ts.verify_peer_auth(&EcdsaP256, &leaf.to_der(), b"transcripT", &sig, now).unwrap_err();
        assert_eq!(err.code(), "bad-signature");
    }

    #[test]
    fn ca_must_be_self_signed() {
        let mut ca = Ca::new();
        let (leaf, _) = ca.leaf(2);
        assert!(matches!(TrustStore::new(leaf, IssuancePolicy::default()), Err(TrustError::NotACa)));
        assert!(TrustStore::from_der(&ca.ca.to_der(), IssuancePolicy::default()).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Whatever order valid schedules arrive in, the newest one wins.
        #[test]
        fn ingest_order_keeps_the_newest(order in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let mut ca = Ca::new();
            ca.update(T0 + SLOT);
            ca.update(T0 + 2 * SLOT);
            let mut ts = TrustStore::new(ca.ca.clone(), IssuancePolicy::default()).unwrap();
            for i in order {
                let _ = ts.ingest_schedule(&ca.schedules[i].encode());
            }
            prop_assert_eq!(ts.newest().unwrap().signing_index(), 3);
            let sigs: Vec<u32> = ts.schedules().iter().map(|s| s.signing_index()).collect();
            prop_assert!(sigs.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn verification_is_deterministic(now in T0..T0 + 3 * SLOT, flip in 0usize..600) {
            let mut ca = Ca::new();
            let (leaf, _) = ca.leaf(2);
            let ts = ca.trust();
            let mut der = leaf.to_der();
            let i = flip % der.len();
            der[i] ^= 0x40;
            prop_assert_eq!(ts.verify_leaf(&der, now), ts.verify_leaf(&der, now));
        }
    }
}
