//! Signed issuance schedule: binds wall-clock slots to XMSS indices.
//!
//! Wire format (`.sched`), integers big-endian:
//!
//! ```text
//! creation_date u64 | validity_minutes u16 | start_index u32 | max_index u32 | XMSS signature
//! ```
//!
//! The signature covers the 18 header bytes and is made with index
//! `start_index - 1`. Slot `k` starts at `creation_date + k * interval`
//! where `interval = validity - overlap`; `max_index` is exclusive.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keystore::{KeyStore, KeyStoreError};
use crate::xmss::{self, XmssError, XmssParams, XmssPublicKey, XmssSignature};

pub const HEADER_BYTES: usize = 18;
pub const SCHEDULE_EXTENSION: &str = "sched";
pub const DEFAULT_OVERLAP_MINUTES: u16 = 2;
pub const DEFAULT_VALIDITY_MINUTES: u16 = 240;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule truncated: {0} bytes")]
    Truncated(usize),
    #[error("schedule signature length {0} matches no parameter set")]
    SignatureLength(usize),
    #[error("schedule invariant violated: {0}")]
    Invariant(&'static str),
    #[error("index {index} outside schedule range [{start}, {max})")]
    IndexOutOfRange { index: u32, start: u32, max: u32 },
    #[error("validity {validity} min must exceed overlap {overlap} min")]
    Policy { validity: u16, overlap: u16 },
    #[error("key cannot cover a schedule and a certificate: {remaining} signatures left")]
    Exhausted { remaining: u32 },
    #[error(transparent)]
    Xmss(#[from] XmssError),
    #[error(transparent)]
    KeyStore(#[from] KeyStoreError),
}

/// How far issuance leads the slot start, shared out of band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuancePolicy {
    pub overlap_minutes: u16,
}

impl Default for IssuancePolicy {
    fn default() -> Self {
        Self { overlap_minutes: DEFAULT_OVERLAP_MINUTES }
    }
}

impl IssuancePolicy {
    pub fn new(overlap_minutes: u16) -> Self {
        Self { overlap_minutes }
    }

    pub fn overlap_secs(&self) -> u64 {
        u64::from(self.overlap_minutes) * 60
    }

    /// validity - overlap, if at least one minute.
    pub fn issue_interval_minutes(&self, validity_minutes: u16) -> Option<u16> {
        validity_minutes.checked_sub(self.overlap_minutes).filter(|m| *m >= 1)
    }

    pub fn check(&self, validity_minutes: u16) -> Result<(), ScheduleError> {
        self.issue_interval_minutes(validity_minutes)
            .map(|_| ())
            .ok_or(ScheduleError::Policy { validity: validity_minutes, overlap: self.overlap_minutes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleHeader {
    /// POSIX seconds.
    pub creation_date: u64,
    pub validity_minutes: u16,
    /// First leaf index governed by this schedule ("Current Index").
    pub start_index: u32,
    /// Exclusive upper bound on leaf indices.
    pub max_index: u32,
}

impl ScheduleHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[..8].copy_from_slice(&self.creation_date.to_be_bytes());
        out[8..10].copy_from_slice(&self.validity_minutes.to_be_bytes());
        out[10..14].copy_from_slice(&self.start_index.to_be_bytes());
        out[14..18].copy_from_slice(&self.max_index.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_BYTES]) -> Self {
        Self {
            creation_date: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            validity_minutes: u16::from_be_bytes(bytes[8..10].try_into().unwrap()),
            start_index: u32::from_be_bytes(bytes[10..14].try_into().unwrap()),
            max_index: u32::from_be_bytes(bytes[14..18].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    header: ScheduleHeader,
    signature: XmssSignature,
}

impl Schedule {
    /// Assembles a schedule and checks the structural invariants.
    pub fn new(header: ScheduleHeader, signature: XmssSignature) -> Result<Self, ScheduleError> {
        let params = signature.params().ok_or(ScheduleError::SignatureLength(signature.encoded_len()))?;
        if header.start_index >= header.max_index {
            return Err(ScheduleError::Invariant("start_index must be below max_index"));
        }
        if u64::from(header.max_index) > params.leaf_count() {
            return Err(ScheduleError::Invariant("max_index exceeds the key's leaf count"));
        }
        if header.validity_minutes == 0 {
            return Err(ScheduleError::Invariant("validity must be positive"));
        }
        if u64::from(signature.index()) + 1 != u64::from(header.start_index) {
            return Err(ScheduleError::Invariant("schedule must be signed with start_index - 1"));
        }
        Ok(Self { header, signature })
    }

    pub fn header(&self) -> &ScheduleHeader {
        &self.header
    }

    pub fn signature(&self) -> &XmssSignature {
        &self.signature
    }

    pub fn creation_date(&self) -> u64 {
        self.header.creation_date
    }

    pub fn validity_minutes(&self) -> u16 {
        self.header.validity_minutes
    }

    pub fn validity_secs(&self) -> u64 {
        u64::from(self.header.validity_minutes) * 60
    }

    pub fn start_index(&self) -> u32 {
        self.header.start_index
    }

    pub fn max_index(&self) -> u32 {
        self.header.max_index
    }

    /// The XMSS index that signed this schedule.
    pub fn signing_index(&self) -> u32 {
        self.signature.index()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.signature.encoded_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.signature.to_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ScheduleError> {
        if bytes.len() < HEADER_BYTES {
            return Err(ScheduleError::Truncated(bytes.len()));
        }
        let (head, sig) = bytes.split_at(HEADER_BYTES);
        let params = XmssParams::from_signature_len(sig.len()).ok_or(ScheduleError::SignatureLength(sig.len()))?;
        let signature = XmssSignature::from_bytes_with(params, sig)?;
        Self::new(ScheduleHeader::from_bytes(head.try_into().unwrap()), signature)
    }

    /// Signature over the header verifies under the CA key.
    pub fn verify(&self, ca: &XmssPublicKey) -> bool {
        self.signature.params() == Some(ca.params()) && xmss::verify(ca, &self.header.to_bytes(), &self.signature)
    }

    pub fn interval_secs(&self, policy: &IssuancePolicy) -> Option<u64> {
        policy.issue_interval_minutes(self.header.validity_minutes).map(|m| u64::from(m) * 60)
    }

    /// Index whose slot contains `t`, or `None` when `t` is outside the
    /// schedule.
    pub fn index_for_time(&self, policy: &IssuancePolicy, t: u64) -> Option<u32> {
        let interval = self.interval_secs(policy)?;
        let offset = t.checked_sub(self.header.creation_date)?;
        let index = u64::from(self.header.start_index) + offset / interval;
        (index < u64::from(self.header.max_index)).then_some(index as u32)
    }

    /// Start of the slot for `index`.
    pub fn issue_time_for_index(&self, policy: &IssuancePolicy, index: u32) -> Result<u64, ScheduleError> {
        let h = &self.header;
        if index < h.start_index || index >= h.max_index {
            return Err(ScheduleError::IndexOutOfRange { index, start: h.start_index, max: h.max_index });
        }
        let interval = self
            .interval_secs(policy)
            .ok_or(ScheduleError::Policy { validity: h.validity_minutes, overlap: policy.overlap_minutes })?;
        Ok(h.creation_date + u64::from(index - h.start_index) * interval)
    }

    /// Latest index whose issuance instant (slot start minus overlap) has
    /// been reached at `t`.
    pub fn index_due_at(&self, policy: &IssuancePolicy, t: u64) -> Option<u32> {
        self.index_for_time(policy, t + policy.overlap_secs())
    }

    /// When the certificate for `index` may be issued. The first slot is
    /// issued at creation time since nothing precedes it.
    pub fn issue_instant(&self, policy: &IssuancePolicy, index: u32) -> Result<u64, ScheduleError> {
        let slot = self.issue_time_for_index(policy, index)?;
        Ok(slot.saturating_sub(policy.overlap_secs()).max(self.header.creation_date))
    }
}

/// Reserves the next index, signs a schedule anchored at `now` that starts
/// at the following index, and returns it.
pub fn issue_schedule(
    store: &mut KeyStore,
    policy: &IssuancePolicy,
    now: u64,
    validity_minutes: u16,
) -> Result<Schedule, ScheduleError> {
    policy.check(validity_minutes)?;
    let remaining = store.remaining_signatures();
    if remaining < 2 {
        return Err(ScheduleError::Exhausted { remaining });
    }
    let index = store.reserve_index()?;
    let header = ScheduleHeader {
        creation_date: now,
        validity_minutes,
        start_index: index + 1,
        max_index: store.params().leaf_count() as u32,
    };
    let signature = store.sign_with_reserved(index, &header.to_bytes())?;
    Schedule::new(header, signature)
}

/// Re-anchors the schedule at the current index and time. The result
/// supersedes `old`; peers must receive it before trusting new leaves.
pub fn update_schedule(
    store: &mut KeyStore,
    old: &Schedule,
    policy: &IssuancePolicy,
    now: u64,
    new_validity_minutes: u16,
) -> Result<Schedule, ScheduleError> {
    let next = issue_schedule(store, policy, now, new_validity_minutes)?;
    debug_assert!(next.signing_index() > old.signing_index());
    Ok(next)
}

/// Nominal CA lifetime in 365-day years.
pub fn nominal_lifetime_years(certificates: u64, validity_minutes: u16) -> f64 {
    const MINUTES_PER_YEAR: f64 = 365.0 * 24.0 * 60.0;
    certificates as f64 * f64::from(validity_minutes) / MINUTES_PER_YEAR
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        let created = chrono::DateTime::from_timestamp(h.creation_date as i64, 0)
            .map(|d| d.format("%Y-%m-%d %H:%M:%S UTC").to_string())
            .unwrap_or_else(|| "out of range".into());
        writeln!(
            f,
            "| {:<22} | {:<15} | {:<13} | {:<9} |",
            "Creation Date (8 B)", "Validity (2 B)", "Current Index (4 B)", "Max Index (4 B)"
        )?;
        writeln!(
            f,
            "| {:<22} | {:<15} | {:<19} | {:<15} |",
            format!("{} (time_t)", h.creation_date),
            format!("{} (minutes)", h.validity_minutes),
            h.start_index,
            h.max_index
        )?;
        writeln!(f, "| Signature ({} B), XMSS index {}", self.signature.encoded_len(), self.signature.index())?;
        write!(f, "created {created}")
    }
}
