//! Tabular certificate dump with per-field byte counts.

use super::der::{self, DerError, Element, Reader};
use super::{Certificate, SubjectKey};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldRow {
    pub field: &'static str,
    pub value: String,
    /// Content octets only.
    pub content_len: usize,
    /// Tag, length and content octets.
    pub tlv_len: usize,
}

impl FieldRow {
    fn new(field: &'static str, value: impl Into<String>, el: &Element<'_>) -> Self {
        Self { field, value: value.into(), content_len: el.content.len(), tlv_len: el.tlv_len() }
    }
}

fn fmt_time(secs: u64) -> String {
    chrono::DateTime::from_timestamp(secs as i64, 0)
        .map(|d| d.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_default()
}

/// One row per certificate field, in encoding order.
pub fn describe(bytes: &[u8]) -> Result<Vec<FieldRow>, DerError> {
    let cert = Certificate::from_der(bytes)?;
    let mut rows = Vec::with_capacity(14);
    let mut top = Reader::new(bytes);
    let mut r = top.expect(der::TAG_SEQUENCE)?.reader();
    let tbs = r.expect(der::TAG_SEQUENCE)?;
    let outer_alg = r.expect(der::TAG_SEQUENCE)?;
    let sig = r.expect(der::TAG_BIT_STRING)?;

    let mut t = tbs.reader();
    rows.push(FieldRow::new("Version", "3", &t.expect(der::TAG_CONTEXT_0)?));
    rows.push(FieldRow::new("Serial Number", format!("{:02x}", cert.serial), &t.expect(der::TAG_INTEGER)?));
    rows.push(FieldRow::new("Signature Algorithm", cert.tbs_algorithm.name(), &t.expect(der::TAG_SEQUENCE)?));
    rows.push(FieldRow::new("Issuer", format!("CN={}", cert.issuer_cn), &t.expect(der::TAG_SEQUENCE)?));
    let validity = t.expect(der::TAG_SEQUENCE)?;
    let mut v = validity.reader();
    rows.push(FieldRow::new("Not Before", fmt_time(cert.not_before), &v.any()?));
    rows.push(FieldRow::new("Not After", fmt_time(cert.not_after), &v.any()?));
    rows.push(FieldRow::new("Subject", format!("CN={}", cert.subject_cn), &t.expect(der::TAG_SEQUENCE)?));

    let spki = t.expect(der::TAG_SEQUENCE)?;
    let mut s = spki.reader();
    let mut alg = s.expect(der::TAG_SEQUENCE)?.reader();
    let (alg_name, param_name) = match cert.subject_key {
        SubjectKey::EcP256(_) => ("Elliptic Curve", Some("secp256r1")),
        SubjectKey::Xmss(_) => ("XMSS", None),
    };
    rows.push(FieldRow::new("Public Key Algorithm", alg_name, &alg.expect(der::TAG_OID)?));
    if let Some(p) = param_name {
        rows.push(FieldRow::new("Key Parameters", p, &alg.expect(der::TAG_OID)?));
    }
    rows.push(FieldRow::new("Public Key", "[BIT STRING]", &s.expect(der::TAG_BIT_STRING)?));

    if let Some(dns) = &cert.san_dns {
        let mut e = t.expect(der::TAG_CONTEXT_3)?.reader();
        let mut list = e.expect(der::TAG_SEQUENCE)?.reader();
        let ext = list.expect(der::TAG_SEQUENCE)?;
        rows.push(FieldRow::new("Subject Alternative Name", "X509v3 Subject Alternative Name:", &ext));
        let mut x = ext.reader();
        x.expect(der::TAG_OID)?;
        let mut octets = x.expect(der::TAG_OCTET_STRING)?.reader();
        let mut names = octets.expect(der::TAG_SEQUENCE)?.reader();
        rows.push(FieldRow::new("DNS Name", format!("DNS: {dns}"), &names.expect(der::TAG_DNS_NAME)?));
    }
    rows.push(FieldRow::new("Algorithm ID", super::XMSS_OID, &outer_alg));
    rows.push(FieldRow::new("Signature", format!("[BIT STRING] xmss index {}", cert.xmss_index()), &sig));
    Ok(rows)
}

pub fn render_table(rows: &[FieldRow]) -> String {
    let width = rows.iter().map(|r| r.value.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<26} {:<width$} {:>8} {:>8}\n", "Certificate Field", "Value", "Content", "TLV");
    for r in rows {
        out.push_str(&format!("{:<26} {:<width$} {:>8} {:>8}\n", r.field, r.value, r.content_len, r.tlv_len));
    }
    out
}
