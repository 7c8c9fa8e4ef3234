//! CA and leaf certificates in a fixed DER subset of X.509.
//!
//! Field order is fixed: version, serial, signature algorithm, issuer,
//! validity, subject, SPKI, optional SAN extension. The TBS algorithm
//! names the classical suite on leaves and XMSS on the self-signed CA; the
//! outer algorithm is always XMSS.

pub mod der;
mod pretty;
pub mod suite;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, NaiveTime};
use thiserror::Error;

use crate::keystore::{KeyStore, KeyStoreError};
use crate::schedule::{IssuancePolicy, Schedule, ScheduleError};
use crate::xmss::{self, XmssPublicKey, XmssSignature, PUBLIC_KEY_BYTES};
use der::{DerError, DerErrorKind, Element, Reader};
pub use pretty::{describe, render_table, FieldRow};
pub use suite::{ClassicalKeyPair, ClassicalSecret, ClassicalSuite, EcdsaP256, P256_POINT_BYTES};

pub const XMSS_OID: &str = "1.3.6.1.5.5.7.6.34";
pub const ECDSA_WITH_SHA256_OID: &str = "1.2.840.10045.4.3.2";
pub const EC_PUBLIC_KEY_OID: &str = "1.2.840.10045.2.1";
pub const SECP256R1_OID: &str = "1.2.840.10045.3.1.7";
pub const COMMON_NAME_OID: &str = "2.5.4.3";
pub const SUBJECT_ALT_NAME_OID: &str = "2.5.29.17";
pub const CERT_EXTENSION: &str = "der";

/// Largest representable instant: 9999-12-31T23:59:59Z.
pub const MAX_TIME: u64 = 253_402_300_799;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbsAlgorithm {
    EcdsaWithSha256,
    Xmss,
}

impl TbsAlgorithm {
    fn oid(self) -> &'static str {
        match self {
            Self::EcdsaWithSha256 => ECDSA_WITH_SHA256_OID,
            Self::Xmss => XMSS_OID,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EcdsaWithSha256 => "ecdsaWithSHA256",
            Self::Xmss => "xmss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubjectKey {
    /// Uncompressed SEC1 point.
    EcP256(Vec<u8>),
    Xmss(XmssPublicKey),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub serial: u64,
    pub tbs_algorithm: TbsAlgorithm,
    pub issuer_cn: String,
    pub not_before: u64,
    pub not_after: u64,
    pub subject_cn: String,
    pub subject_key: SubjectKey,
    pub san_dns: Option<String>,
    pub signature: XmssSignature,
}

/// Certificate fields before signing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TbsFields {
    pub serial: u64,
    pub tbs_algorithm: TbsAlgorithm,
    pub issuer_cn: String,
    pub not_before: u64,
    pub not_after: u64,
    pub subject_cn: String,
    pub subject_key: SubjectKey,
    pub san_dns: Option<String>,
}

fn alg_id(oid: &str, params: Option<&str>) -> Vec<u8> {
    match params {
        Some(p) => der::seq(&[&der::oid(oid), &der::oid(p)]),
        None => der::seq(&[&der::oid(oid)]),
    }
}

fn name(cn: &str) -> Vec<u8> {
    let atv = der::seq(&[&der::oid(COMMON_NAME_OID), &der::tlv(der::TAG_UTF8_STRING, cn.as_bytes())]);
    der::seq(&[&der::tlv(der::TAG_SET, &atv)])
}

pub(crate) fn encode_time(secs: u64) -> Vec<u8> {
    let dt = DateTime::from_timestamp(secs.min(MAX_TIME) as i64, 0).expect("in range").naive_utc();
    let year = dt.year();
    if (1950..2050).contains(&year) {
        der::tlv(der::TAG_UTC_TIME, dt.format("%y%m%d%H%M%SZ").to_string().as_bytes())
    } else {
        der::tlv(der::TAG_GENERALIZED_TIME, dt.format("%Y%m%d%H%M%SZ").to_string().as_bytes())
    }
}

fn digits(s: &[u8]) -> Option<u32> {
    if s.is_empty() || !s.iter().all(u8::is_ascii_digit) {
        return None;
    }
    Some(s.iter().fold(0u32, |acc, d| acc * 10 + u32::from(d - b'0')))
}

fn decode_time(el: &Element<'_>) -> Result<u64, DerError> {
    let bad = || DerError { offset: el.offset, kind: DerErrorKind::BadTime };
    let c = el.content;
    let (year, rest) = match el.tag {
        der::TAG_UTC_TIME if c.len() == 13 => {
            let yy = digits(&c[..2]).ok_or_else(bad)? as i32;
            (if yy >= 50 { 1900 + yy } else { 2000 + yy }, &c[2..])
        }
        der::TAG_GENERALIZED_TIME if c.len() == 15 => (digits(&c[..4]).ok_or_else(bad)? as i32, &c[4..]),
        der::TAG_UTC_TIME | der::TAG_GENERALIZED_TIME => return Err(bad()),
        found => {
            return Err(DerError {
                offset: el.offset,
                kind: DerErrorKind::UnexpectedTag { expected: der::TAG_UTC_TIME, found },
            })
        }
    };
    if rest[10] != b'Z' {
        return Err(bad());
    }
    let field = |i: usize| digits(&rest[i..i + 2]).ok_or_else(bad);
    let date = NaiveDate::from_ymd_opt(year, field(0)?, field(2)?).ok_or_else(bad)?;
    let time = NaiveTime::from_hms_opt(field(4)?, field(6)?, field(8)?).ok_or_else(bad)?;
    let secs = NaiveDateTime::new(date, time).and_utc().timestamp();
    u64::try_from(secs).map_err(|_| bad())
}

impl TbsFields {
    pub fn to_der(&self) -> Vec<u8> {
        let version = der::tlv(der::TAG_CONTEXT_0, &der::uint(2));
        let validity = der::seq(&[&encode_time(self.not_before), &encode_time(self.not_after)]);
        let spki = match &self.subject_key {
            SubjectKey::EcP256(point) => {
                der::seq(&[&alg_id(EC_PUBLIC_KEY_OID, Some(SECP256R1_OID)), &der::bit_string(point)])
            }
            SubjectKey::Xmss(pk) => der::seq(&[&alg_id(XMSS_OID, None), &der::bit_string(&pk.to_bytes())]),
        };
        let mut parts: Vec<Vec<u8>> = vec![
            version,
            der::uint(self.serial),
            alg_id(self.tbs_algorithm.oid(), None),
            name(&self.issuer_cn),
            validity,
            name(&self.subject_cn),
            spki,
        ];
        if let Some(dns) = &self.san_dns {
            let general_names = der::seq(&[&der::tlv(der::TAG_DNS_NAME, dns.as_bytes())]);
            let ext = der::seq(&[&der::oid(SUBJECT_ALT_NAME_OID), &der::tlv(der::TAG_OCTET_STRING, &general_names)]);
            parts.push(der::tlv(der::TAG_CONTEXT_3, &der::seq(&[&ext])));
        }
        der::tlv(der::TAG_SEQUENCE, &parts.concat())
    }

    pub fn validity_secs(&self) -> u64 {
        self.not_after.saturating_sub(self.not_before)
    }
}

impl Certificate {
    pub fn from_parts(tbs: TbsFields, signature: XmssSignature) -> Self {
        Self {
            serial: tbs.serial,
            tbs_algorithm: tbs.tbs_algorithm,
            issuer_cn: tbs.issuer_cn,
            not_before: tbs.not_before,
            not_after: tbs.not_after,
            subject_cn: tbs.subject_cn,
            subject_key: tbs.subject_key,
            san_dns: tbs.san_dns,
            signature,
        }
    }

    pub fn tbs(&self) -> TbsFields {
        TbsFields {
            serial: self.serial,
            tbs_algorithm: self.tbs_algorithm,
            issuer_cn: self.issuer_cn.clone(),
            not_before: self.not_before,
            not_after: self.not_after,
            subject_cn: self.subject_cn.clone(),
            subject_key: self.subject_key.clone(),
            san_dns: self.san_dns.clone(),
        }
    }

    pub fn tbs_der(&self) -> Vec<u8> {
        self.tbs().to_der()
    }

    pub fn xmss_index(&self) -> u32 {
        self.signature.index()
    }

    pub fn is_ca(&self) -> bool {
        matches!(self.subject_key, SubjectKey::Xmss(_))
    }

    pub fn validity_secs(&self) -> u64 {
        self.not_after.saturating_sub(self.not_before)
    }

    /// Inclusive on both ends.
    pub fn is_valid_at(&self, now: u64) -> bool {
        self.not_before <= now && now <= self.not_after
    }

    pub fn xmss_public_key(&self) -> Option<&XmssPublicKey> {
        match &self.subject_key {
            SubjectKey::Xmss(k) => Some(k),
            SubjectKey::EcP256(_) => None,
        }
    }

    pub fn classical_key(&self) -> Option<&[u8]> {
        match &self.subject_key {
            SubjectKey::EcP256(p) => Some(p),
            SubjectKey::Xmss(_) => None,
        }
    }

    pub fn to_der(&self) -> Vec<u8> {
        der::seq(&[&self.tbs_der(), &alg_id(XMSS_OID, None), &der::bit_string(&self.signature.to_bytes())])
    }

    /// XMSS signature over the TBS bytes verifies under `ca`.
    pub fn verify_signature(&self, ca: &XmssPublicKey) -> bool {
        self.signature.params() == Some(ca.params()) && xmss::verify(ca, &self.tbs_der(), &self.signature)
    }

    pub fn from_der(bytes: &[u8]) -> Result<Self, DerError> {
        let mut top = Reader::new(bytes);
        let cert = top.expect(der::TAG_SEQUENCE)?;
        top.finish()?;
        let mut r = cert.reader();
        let tbs_el = r.expect(der::TAG_SEQUENCE)?;
        let outer_alg = r.expect(der::TAG_SEQUENCE)?;
        expect_alg(&outer_alg, &[XMSS_OID], false)?;
        let sig_el = r.expect(der::TAG_BIT_STRING)?;
        r.finish()?;
        let sig_bytes = sig_el.as_bit_string()?;
        let signature = XmssSignature::from_bytes(sig_bytes)
            .map_err(|_| DerError { offset: sig_el.offset, kind: DerErrorKind::BadValue("XMSS signature") })?;

        let tbs = parse_tbs(&tbs_el)?;
        let cert = Self::from_parts(tbs, signature);
        if cert.to_der() != bytes {
            return Err(DerError { offset: 0, kind: DerErrorKind::NonCanonical });
        }
        Ok(cert)
    }
}

fn expect_alg(el: &Element<'_>, allowed: &[&str], allow_params: bool) -> Result<(String, Option<String>), DerError> {
    let mut r = el.reader();
    let oid_el = r.expect(der::TAG_OID)?;
    let oid = oid_el.as_oid()?;
    if !allowed.contains(&oid.as_str()) {
        return Err(DerError { offset: oid_el.offset, kind: DerErrorKind::UnknownAlgorithm(oid) });
    }
    let params = if allow_params && !r.is_empty() { Some(r.expect(der::TAG_OID)?.as_oid()?) } else { None };
    r.finish()?;
    Ok((oid, params))
}

fn parse_name(el: &Element<'_>) -> Result<String, DerError> {
    let mut r = el.reader();
    let set = r.expect(der::TAG_SET)?;
    r.finish()?;
    let mut sr = set.reader();
    let atv = sr.expect(der::TAG_SEQUENCE)?;
    sr.finish()?;
    let mut ar = atv.reader();
    let oid_el = ar.expect(der::TAG_OID)?;
    if oid_el.as_oid()? != COMMON_NAME_OID {
        return Err(DerError { offset: oid_el.offset, kind: DerErrorKind::BadValue("only CN names are supported") });
    }
    let value = ar.expect(der::TAG_UTF8_STRING)?;
    ar.finish()?;
    Ok(value.as_utf8()?.to_owned())
}

fn parse_tbs(tbs_el: &Element<'_>) -> Result<TbsFields, DerError> {
    let mut r = tbs_el.reader();
    let version = r.expect(der::TAG_CONTEXT_0)?;
    let mut vr = version.reader();
    let v = vr.expect(der::TAG_INTEGER)?;
    vr.finish()?;
    if v.as_u64()? != 2 {
        return Err(DerError { offset: v.offset, kind: DerErrorKind::BadValue("version must be v3") });
    }
    let serial = r.expect(der::TAG_INTEGER)?.as_u64()?;
    let alg_el = r.expect(der::TAG_SEQUENCE)?;
    let (alg, _) = expect_alg(&alg_el, &[ECDSA_WITH_SHA256_OID, XMSS_OID], false)?;
    let tbs_algorithm = if alg == XMSS_OID { TbsAlgorithm::Xmss } else { TbsAlgorithm::EcdsaWithSha256 };
    let issuer_cn = parse_name(&r.expect(der::TAG_SEQUENCE)?)?;

    let validity = r.expect(der::TAG_SEQUENCE)?;
    let mut vr = validity.reader();
    let nb_el = vr.any()?;
    let na_el = vr.any()?;
    vr.finish()?;
    let not_before = decode_time(&nb_el)?;
    let not_after = decode_time(&na_el)?;
    if not_after < not_before {
        return Err(DerError {
            offset: validity.offset,
            kind: DerErrorKind::BadValue("validity ends before it starts"),
        });
    }
    let subject_cn = parse_name(&r.expect(der::TAG_SEQUENCE)?)?;

    let spki = r.expect(der::TAG_SEQUENCE)?;
    let mut sr = spki.reader();
    let key_alg_el = sr.expect(der::TAG_SEQUENCE)?;
    let (key_alg, params) = expect_alg(&key_alg_el, &[EC_PUBLIC_KEY_OID, XMSS_OID], true)?;
    let key_el = sr.expect(der::TAG_BIT_STRING)?;
    sr.finish()?;
    let key_bytes = key_el.as_bit_string()?;
    let subject_key = if key_alg == XMSS_OID {
        if params.is_some() || key_bytes.len() != PUBLIC_KEY_BYTES {
            return Err(DerError { offset: key_el.offset, kind: DerErrorKind::BadValue("XMSS public key") });
        }
        SubjectKey::Xmss(
            XmssPublicKey::from_bytes(key_bytes)
                .map_err(|_| DerError { offset: key_el.offset, kind: DerErrorKind::BadValue("XMSS public key") })?,
        )
    } else {
        if params.as_deref() != Some(SECP256R1_OID) {
            return Err(DerError {
                offset: key_alg_el.offset,
                kind: DerErrorKind::BadValue("curve must be secp256r1"),
            });
        }
        if key_bytes.len() != P256_POINT_BYTES || key_bytes[0] != 0x04 {
            return Err(DerError { offset: key_el.offset, kind: DerErrorKind::BadValue("P-256 point") });
        }
        SubjectKey::EcP256(key_bytes.to_vec())
    };

    let san_dns = if r.is_empty() {
        None
    } else {
        let exts = r.expect(der::TAG_CONTEXT_3)?;
        let mut er = exts.reader();
        let list = er.expect(der::TAG_SEQUENCE)?;
        er.finish()?;
        let mut lr = list.reader();
        let ext = lr.expect(der::TAG_SEQUENCE)?;
        lr.finish()?;
        let mut xr = ext.reader();
        let oid_el = xr.expect(der::TAG_OID)?;
        let oid = oid_el.as_oid()?;
        if oid != SUBJECT_ALT_NAME_OID {
            return Err(DerError { offset: oid_el.offset, kind: DerErrorKind::UnknownExtension(oid) });
        }
        let value = xr.expect(der::TAG_OCTET_STRING)?;
        xr.finish()?;
        let mut vr = value.reader();
        let names = vr.expect(der::TAG_SEQUENCE)?;
        vr.finish()?;
        let mut nr = names.reader();
        let dns = nr.expect(der::TAG_DNS_NAME)?;
        nr.finish()?;
        if !dns.content.is_ascii() {
            return Err(DerError { offset: dns.offset, kind: DerErrorKind::BadString });
        }
        Some(dns.as_utf8()?.to_owned())
    };
    r.finish()?;
    Ok(TbsFields { serial, tbs_algorithm, issuer_cn, not_before, not_after, subject_cn, subject_key, san_dns })
}

#[derive(Debug, Error)]
pub enum IssueError {
    #[error("index mismatch: requested {requested}, schedule expects {scheduled:?}, keystore next is {keystore_next}")]
    Mismatch { requested: u32, scheduled: Option<u32>, keystore_next: u32 },
    #[error("CA certificate must be signed with index 0, keystore is at {0}")]
    NotFresh(u32),
    #[error("certificate field out of range: {0}")]
    Field(&'static str),
    #[error(transparent)]
    KeyStore(#[from] KeyStoreError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Signs the CA certificate with index 0.
pub fn self_sign_ca(
    store: &mut KeyStore,
    cn: &str,
    not_before: u64,
    not_after: u64,
) -> Result<Certificate, IssueError> {
    if store.next_index() != 0 {
        return Err(IssueError::NotFresh(store.next_index()));
    }
    if not_after < not_before || not_after > MAX_TIME {
        return Err(IssueError::Field("validity"));
    }
    let tbs = TbsFields {
        serial: 0,
        tbs_algorithm: TbsAlgorithm::Xmss,
        issuer_cn: cn.to_owned(),
        not_before,
        not_after,
        subject_cn: cn.to_owned(),
        subject_key: SubjectKey::Xmss(store.public_key().clone()),
        san_dns: None,
    };
    let index = store.reserve_index()?;
    let signature = store.sign_with_reserved(index, &tbs.to_der())?;
    Ok(Certificate::from_parts(tbs, signature))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafRequest {
    pub subject_cn: String,
    pub san_dns: Option<String>,
    /// Uncompressed P-256 point.
    pub public_key: Vec<u8>,
}

/// Issues the leaf for `index`. Refuses without reserving anything unless
/// `index` is both the one due at `now` and the keystore's next index.
pub fn issue_leaf(
    store: &mut KeyStore,
    schedule: &Schedule,
    policy: &IssuancePolicy,
    issuer_cn: &str,
    index: u32,
    request: &LeafRequest,
    now: u64,
) -> Result<Certificate, IssueError> {
    let scheduled = schedule.index_due_at(policy, now);
    let keystore_next = store.next_index();
    if scheduled != Some(index) || keystore_next != index {
        return Err(IssueError::Mismatch { requested: index, scheduled, keystore_next });
    }
    if request.public_key.len() != P256_POINT_BYTES {
        return Err(IssueError::Field("public key"));
    }
    let not_before = schedule.issue_time_for_index(policy, index)?;
    let not_after = not_before + schedule.validity_secs();
    if not_after > MAX_TIME {
        return Err(IssueError::Field("validity"));
    }
    let tbs = TbsFields {
        serial: u64::from(index),
        tbs_algorithm: TbsAlgorithm::EcdsaWithSha256,
        issuer_cn: issuer_cn.to_owned(),
        not_before,
        not_after,
        subject_cn: request.subject_cn.clone(),
        subject_key: SubjectKey::EcP256(request.public_key.clone()),
        san_dns: request.san_dns.clone(),
    };
    let reserved = store.reserve_index()?;
    debug_assert_eq!(reserved, index);
    let signature = store.sign_with_reserved(reserved, &tbs.to_der())?;
    Ok(Certificate::from_parts(tbs, signature))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HandshakeError {
    #[error("certificate not valid before {not_before} (now {now})")]
    NotYetValid { now: u64, not_before: u64 },
    #[error("certificate expired at {not_after} (now {now})")]
    Expired { now: u64, not_after: u64 },
    #[error("certificate carries no classical key")]
    NotALeaf,
    #[error("secret key rejected by suite")]
    BadSecret,
    #[error("handshake signature invalid")]
    BadSignature,
}

fn check_window(leaf: &Certificate, now: u64) -> Result<(), HandshakeError> {
    if now < leaf.not_before {
        Err(HandshakeError::NotYetValid { now, not_before: leaf.not_before })
    } else if now > leaf.not_after {
        Err(HandshakeError::Expired { now, not_after: leaf.not_after })
    } else {
        Ok(())
    }
}

/// Signs a handshake transcript with the leaf's classical key.
pub fn authenticate_handshake(
    suite: &dyn ClassicalSuite,
    leaf: &Certificate,
    secret: &ClassicalSecret,
    transcript: &[u8],
    now: u64,
) -> Result<Vec<u8>, HandshakeError> {
    check_window(leaf, now)?;
    leaf.classical_key().ok_or(HandshakeError::NotALeaf)?;
    suite.sign(secret, transcript).ok_or(HandshakeError::BadSecret)
}

pub fn verify_handshake(
    suite: &dyn ClassicalSuite,
    leaf: &Certificate,
    transcript: &[u8],
    signature: &[u8],
    now: u64,
) -> Result<(), HandshakeError> {
    check_window(leaf, now)?;
    let key = leaf.classical_key().ok_or(HandshakeError::NotALeaf)?;
    if suite.verify(key, transcript, signature) {
        Ok(())
    } else {
        Err(HandshakeError::BadSignature)
    }
}
