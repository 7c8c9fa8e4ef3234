//! Just enough DER to write and read the certificate subset.

use thiserror::Error;

pub const TAG_INTEGER: u8 = 0x02;
pub const TAG_BIT_STRING: u8 = 0x03;
pub const TAG_OCTET_STRING: u8 = 0x04;
pub const TAG_OID: u8 = 0x06;
pub const TAG_UTF8_STRING: u8 = 0x0c;
pub const TAG_UTC_TIME: u8 = 0x17;
pub const TAG_GENERALIZED_TIME: u8 = 0x18;
pub const TAG_SEQUENCE: u8 = 0x30;
pub const TAG_SET: u8 = 0x31;
pub const TAG_CONTEXT_0: u8 = 0xa0;
pub const TAG_CONTEXT_3: u8 = 0xa3;
pub const TAG_DNS_NAME: u8 = 0x82;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("DER error at offset {offset}: {kind}")]
pub struct DerError {
    pub offset: usize,
    pub kind: DerErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DerErrorKind {
    #[error("unexpected end of input")]
    Truncated,
    #[error("expected tag {expected:#04x}, found {found:#04x}")]
    UnexpectedTag { expected: u8, found: u8 },
    #[error("non-minimal length encoding")]
    NonMinimalLength,
    #[error("length does not fit")]
    LengthOverflow,
    #[error("trailing bytes")]
    TrailingData,
    #[error("non-minimal integer")]
    NonMinimalInteger,
    #[error("integer out of range")]
    IntegerRange,
    #[error("malformed object identifier")]
    BadOid,
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error("unsupported extension {0}")]
    UnknownExtension(String),
    #[error("invalid string")]
    BadString,
    #[error("invalid time")]
    BadTime,
    #[error("invalid bit string")]
    BadBitString,
    #[error("invalid field value: {0}")]
    BadValue(&'static str),
    #[error("encoding is not canonical")]
    NonCanonical,
}

pub fn push_len(out: &mut Vec<u8>, len: usize) {
    if len < 0x80 {
        out.push(len as u8);
    } else {
        let bytes = (len as u64).to_be_bytes();
        let skip = bytes.iter().take_while(|b| **b == 0).count();
        out.push(0x80 | (8 - skip) as u8);
        out.extend_from_slice(&bytes[skip..]);
    }
}

pub fn tlv(tag: u8, content: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(content.len() + 6);
    out.push(tag);
    push_len(&mut out, content.len());
    out.extend_from_slice(content);
    out
}

pub fn seq(parts: &[&[u8]]) -> Vec<u8> {
    tlv(TAG_SEQUENCE, &parts.concat())
}

pub fn uint(value: u64) -> Vec<u8> {
    let bytes = value.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count().min(7);
    let mut content = Vec::with_capacity(9);
    if bytes[skip] & 0x80 != 0 {
        content.push(0);
    }
    content.extend_from_slice(&bytes[skip..]);
    tlv(TAG_INTEGER, &content)
}

pub fn bit_string(bytes: &[u8]) -> Vec<u8> {
    let mut content = Vec::with_capacity(bytes.len() + 1);
    content.push(0);
    content.extend_from_slice(bytes);
    tlv(TAG_BIT_STRING, &content)
}

/// Parses dotted notation; panics on malformed constants (only used with
/// literals).
pub fn oid(dotted: &str) -> Vec<u8> {
    let arcs: Vec<u64> = dotted.split('.').map(|a| a.parse().expect("numeric arc")).collect();
    assert!(arcs.len() >= 2 && arcs[0] <= 2);
    let mut content = Vec::new();
    let mut push_arc = |mut v: u64| {
        let mut tmp = vec![(v & 0x7f) as u8];
        v >>= 7;
        while v > 0 {
            tmp.push(0x80 | (v & 0x7f) as u8);
            v >>= 7;
        }
        content.extend(tmp.iter().rev());
    };
    push_arc(arcs[0] * 40 + arcs[1]);
    for arc in &arcs[2..] {
        push_arc(*arc);
    }
    tlv(TAG_OID, &content)
}

pub fn oid_to_string(content: &[u8]) -> Option<String> {
    let mut arcs = Vec::new();
    let mut acc: u64 = 0;
    let mut fresh = true;
    for &b in content {
        if fresh && b == 0x80 {
            return None;
        }
        acc = acc.checked_mul(128)? | u64::from(b & 0x7f);
        fresh = b & 0x80 == 0;
        if fresh {
            arcs.push(acc);
            acc = 0;
        }
    }
    if !fresh || arcs.is_empty() {
        return None;
    }
    let first = arcs[0];
    let (a, b) = if first < 40 {
        (0, first)
    } else if first < 80 {
        (1, first - 40)
    } else {
        (2, first - 80)
    };
    let mut parts = vec![a.to_string(), b.to_string()];
    parts.extend(arcs[1..].iter().map(|x| x.to_string()));
    Some(parts.join("."))
}

/// A decoded element: tag, content and where it sat in the input.
#[derive(Debug, Clone, Copy)]
pub struct Element<'a> {
    pub tag: u8,
    pub content: &'a [u8],
    /// Offset of the tag byte in the outermost input.
    pub offset: usize,
    /// Offset of the first content byte.
    pub content_offset: usize,
}

impl<'a> Element<'a> {
    pub fn tlv_len(&self) -> usize {
        self.content_offset - self.offset + self.content.len()
    }

    pub fn reader(&self) -> Reader<'a> {
        Reader { data: self.content, pos: 0, base: self.content_offset }
    }

    fn err(&self, kind: DerErrorKind) -> DerError {
        DerError { offset: self.offset, kind }
    }

    pub fn as_u64(&self) -> Result<u64, DerError> {
        let c = self.content;
        if c.is_empty() {
            return Err(self.err(DerErrorKind::NonMinimalInteger));
        }
        if c.len() > 1 && ((c[0] == 0 && c[1] & 0x80 == 0) || (c[0] == 0xff && c[1] & 0x80 != 0)) {
            return Err(self.err(DerErrorKind::NonMinimalInteger));
        }
        if c[0] & 0x80 != 0 {
            return Err(self.err(DerErrorKind::IntegerRange));
        }
        let digits = if c[0] == 0 && c.len() > 1 { &c[1..] } else { c };
        if digits.len() > 8 {
            return Err(self.err(DerErrorKind::IntegerRange));
        }
        Ok(digits.iter().fold(0u64, |acc, b| (acc << 8) | u64::from(*b)))
    }

    pub fn as_oid(&self) -> Result<String, DerError> {
        oid_to_string(self.content).ok_or_else(|| self.err(DerErrorKind::BadOid))
    }

    pub fn as_utf8(&self) -> Result<&'a str, DerError> {
        std::str::from_utf8(self.content).map_err(|_| self.err(DerErrorKind::BadString))
    }

    /// Content of a BIT STRING with zero unused bits.
    pub fn as_bit_string(&self) -> Result<&'a [u8], DerError> {
        match self.content.split_first() {
            Some((0, rest)) => Ok(rest),
            _ => Err(self.err(DerErrorKind::BadBitString)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0, base: 0 }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.data.len()
    }

    fn err(&self, kind: DerErrorKind) -> DerError {
        DerError { offset: self.offset(), kind }
    }

    pub fn peek_tag(&self) -> Option<u8> {
        self.data.get(self.pos).copied()
    }

    pub fn any(&mut self) -> Result<Element<'a>, DerError> {
        let start = self.pos;
        let tag = *self.data.get(self.pos).ok_or_else(|| self.err(DerErrorKind::Truncated))?;
        if tag & 0x1f == 0x1f {
            return Err(self.err(DerErrorKind::UnexpectedTag { expected: 0, found: tag }));
        }
        self.pos += 1;
        let first = *self.data.get(self.pos).ok_or_else(|| self.err(DerErrorKind::Truncated))?;
        self.pos += 1;
        let len = if first < 0x80 {
            first as usize
        } else {
            let n = (first & 0x7f) as usize;
            if n == 0 || n > 4 {
                return Err(DerError { offset: self.base + start, kind: DerErrorKind::LengthOverflow });
            }
            let bytes = self.data.get(self.pos..self.pos + n).ok_or_else(|| self.err(DerErrorKind::Truncated))?;
            self.pos += n;
            let len = bytes.iter().fold(0usize, |acc, b| (acc << 8) | *b as usize);
            if bytes[0] == 0 || len < 0x80 {
                return Err(DerError { offset: self.base + start, kind: DerErrorKind::NonMinimalLength });
            }
            len
        };
        let content_start = self.pos;
        let end = content_start.checked_add(len).filter(|e| *e <= self.data.len());
        let end = end.ok_or(DerError { offset: self.base + start, kind: DerErrorKind::Truncated })?;
        self.pos = end;
        Ok(Element {
            tag,
            content: &self.data[content_start..end],
            offset: self.base + start,
            content_offset: self.base + content_start,
        })
    }

    pub fn expect(&mut self, tag: u8) -> Result<Element<'a>, DerError> {
        let offset = self.offset();
        match self.peek_tag() {
            None => Err(self.err(DerErrorKind::Truncated)),
            Some(found) if found != tag => {
                Err(DerError { offset, kind: DerErrorKind::UnexpectedTag { expected: tag, found } })
            }
            Some(_) => self.any(),
        }
    }

    pub fn finish(&self) -> Result<(), DerError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(self.err(DerErrorKind::TrailingData))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_minimal() {
        assert_eq!(uint(0), [2, 1, 0]);
        assert_eq!(uint(2), [2, 1, 2]);
        assert_eq!(uint(0x80), [2, 2, 0, 0x80]);
        assert_eq!(uint(65535), [2, 3, 0, 0xff, 0xff]);
        for v in [0u64, 1, 127, 128, 255, 256, 65535, 1 << 31, u64::MAX >> 1, u64::MAX] {
            let enc = uint(v);
            let el = Reader::new(&enc).any().unwrap();
            assert_eq!(el.as_u64().unwrap(), v);
        }
        let bad = [2u8, 2, 0, 1];
        assert!(Reader::new(&bad).any().unwrap().as_u64().is_err());
    }

    #[test]
    fn oid_encoding_matches_known_bytes() {
        assert_eq!(oid("1.2.840.10045.4.3.2"), [6, 8, 0x2a, 0x86, 0x48, 0xce, 0x3d, 4, 3, 2]);
        assert_eq!(oid("2.5.4.3"), [6, 3, 0x55, 4, 3]);
        let xmss = oid("1.3.6.1.5.5.7.6.34");
        assert_eq!(xmss.len(), 10);
        assert_eq!(oid_to_string(&xmss[2..]).unwrap(), "1.3.6.1.5.5.7.6.34");
        assert_eq!(oid_to_string(&[0x80, 1]), None);
        assert_eq!(oid_to_string(&[0x81]), None);
    }

    #[test]
    fn long_lengths_round_trip() {
        let content = vec![7u8; 2693];
        let enc = tlv(TAG_BIT_STRING, &content);
        assert_eq!(&enc[..4], &[3, 0x82, 0x0a, 0x85]);
        let el = Reader::new(&enc).any().unwrap();
        assert_eq!(el.content.len(), 2693);
        assert_eq!(el.tlv_len(), enc.len());
    }

    #[test]
    fn rejects_non_minimal_lengths() {
        let enc = [0x04u8, 0x81, 0x05, 1, 2, 3, 4, 5];
        let e = Reader::new(&enc).any().unwrap_err();
        assert_eq!(e.kind, DerErrorKind::NonMinimalLength);
        let trunc = [0x04u8, 0x05, 1];
        assert_eq!(Reader::new(&trunc).any().unwrap_err().kind, DerErrorKind::Truncated);
    }
}
