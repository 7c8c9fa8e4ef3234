use super::XmssError;

/// Hash output length in bytes (SHA-256).
pub const N: usize = 32;
/// Winternitz parameter.
pub const W: u32 = 16;
const LOG_W: usize = 4;
/// Number of message digits: 8n / log2(w).
pub const WOTS_LEN1: usize = 64;
/// Number of checksum digits.
pub const WOTS_LEN2: usize = 3;
/// Total number of WOTS+ chains.
pub const WOTS_LEN: usize = WOTS_LEN1 + WOTS_LEN2;

/// Encoded public key length: oid(4) || root(n) || pub_seed(n).
pub const PUBLIC_KEY_BYTES: usize = 4 + 2 * N;

/// Single-tree XMSS parameter set over SHA-256 with n = 32, w = 16.
///
/// Heights 10, 16 and 20 map to the registered `XMSS-SHA2_{h}_256`
/// identifiers. Height 4 is a toy set for exhaustive sweeps; it carries a
/// private-use identifier and callers that run a real CA must reject it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct XmssParams {
    height: u8,
}

const OID_SHA2_10_256: u32 = 0x0000_0001;
const OID_SHA2_16_256: u32 = 0x0000_0002;
const OID_SHA2_20_256: u32 = 0x0000_0003;
const OID_TOY_4: u32 = 0xFFFF_0004;

impl XmssParams {
    pub const SHA2_10_256: Self = Self { height: 10 };
    pub const SHA2_16_256: Self = Self { height: 16 };
    pub const SHA2_20_256: Self = Self { height: 20 };
    pub const TOY_4: Self = Self { height: 4 };

    pub fn new(height: u8) -> Result<Self, XmssError> {
        match height {
            4 | 10 | 16 | 20 => Ok(Self { height }),
            other => Err(XmssError::UnsupportedHeight(other)),
        }
    }

    pub fn from_oid(oid: u32) -> Result<Self, XmssError> {
        match oid {
            OID_SHA2_10_256 => Ok(Self::SHA2_10_256),
            OID_SHA2_16_256 => Ok(Self::SHA2_16_256),
            OID_SHA2_20_256 => Ok(Self::SHA2_20_256),
            OID_TOY_4 => Ok(Self::TOY_4),
            other => Err(XmssError::UnknownOid(other)),
        }
    }

    /// Recovers the parameter set from a serialized signature length.
    pub fn from_signature_len(len: usize) -> Option<Self> {
        [Self::TOY_4, Self::SHA2_10_256, Self::SHA2_16_256, Self::SHA2_20_256]
            .into_iter()
            .find(|p| p.signature_bytes() == len)
    }

    pub fn height(&self) -> u32 {
        u32::from(self.height)
    }

    pub fn oid(&self) -> u32 {
        match self.height {
            10 => OID_SHA2_10_256,
            16 => OID_SHA2_16_256,
            20 => OID_SHA2_20_256,
            _ => OID_TOY_4,
        }
    }

    pub fn is_toy(&self) -> bool {
        self.height == 4
    }

    /// Number of one-time keys, 2^h.
    pub fn leaf_count(&self) -> u64 {
        1u64 << self.height
    }

    /// Number of nodes in the full tree, 2^(h+1) - 1.
    pub fn node_count(&self) -> usize {
        (1usize << (self.height + 1)) - 1
    }

    /// idx(4) || r(n) || wots_sig(len * n) || auth(h * n)
    pub fn signature_bytes(&self) -> usize {
        4 + N + WOTS_LEN * N + self.height as usize * N
    }

    pub fn public_key_bytes(&self) -> usize {
        PUBLIC_KEY_BYTES
    }

    pub fn name(&self) -> String {
        if self.is_toy() {
            "XMSS-SHA2_4_256 (toy)".to_string()
        } else {
            format!("XMSS-SHA2_{}_256", self.height)
        }
    }
}

pub(crate) fn log_w() -> usize {
    LOG_W
}
