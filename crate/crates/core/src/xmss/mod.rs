//! Single-tree XMSS (WOTS+, L-tree, Merkle tree) over SHA-256.
//!
//! Signing here is stateless with respect to the index: the caller picks the
//! leaf. Index discipline lives in [`crate::keystore`].

mod address;
mod hash;
mod params;
mod tree;
mod wots;

use thiserror::Error;
use zeroize::Zeroize;

pub use params::{XmssParams, N, PUBLIC_KEY_BYTES, W, WOTS_LEN};
pub use tree::NodeCache;

use hash::{Hasher, Node};

/// Length of the key generation entropy: sk_seed || sk_prf || pub_seed.
pub const ENTROPY_BYTES: usize = 3 * N;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XmssError {
    #[error("unsupported tree height {0}")]
    UnsupportedHeight(u8),
    #[error("unknown XMSS parameter identifier {0:#010x}")]
    UnknownOid(u32),
    #[error("entropy must be {ENTROPY_BYTES} bytes, got {0}")]
    EntropyLength(usize),
    #[error("leaf index {index} out of range for {leaves} leaves")]
    IndexOutOfRange { index: u32, leaves: u64 },
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct XmssPublicKey {
    params: XmssParams,
    root: Node,
    pub_seed: Node,
}

impl XmssPublicKey {
    pub fn params(&self) -> XmssParams {
        self.params
    }

    pub fn root(&self) -> &[u8; N] {
        &self.root
    }

    pub fn pub_seed(&self) -> &[u8; N] {
        &self.pub_seed
    }

    /// oid(4) || root(32) || pub_seed(32)
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PUBLIC_KEY_BYTES);
        out.extend_from_slice(&self.params.oid().to_be_bytes());
        out.extend_from_slice(&self.root);
        out.extend_from_slice(&self.pub_seed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, XmssError> {
        if bytes.len() != PUBLIC_KEY_BYTES {
            return Err(XmssError::Malformed("public key length"));
        }
        let oid = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        Ok(Self {
            params: XmssParams::from_oid(oid)?,
            root: bytes[4..4 + N].try_into().unwrap(),
            pub_seed: bytes[4 + N..].try_into().unwrap(),
        })
    }
}

/// The private key with its full tree cached.
#[derive(Clone, PartialEq, Eq)]
pub struct XmssSecret {
    params: XmssParams,
    sk_seed: Node,
    sk_prf: Node,
    pub_seed: Node,
    root: Node,
    cache: NodeCache,
}

impl std::fmt::Debug for XmssSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("XmssSecret").field("params", &self.params).field("cache", &self.cache).finish_non_exhaustive()
    }
}

impl Drop for XmssSecret {
    fn drop(&mut self) {
        self.sk_seed.zeroize();
        self.sk_prf.zeroize();
    }
}

impl XmssSecret {
    pub fn params(&self) -> XmssParams {
        self.params
    }

    pub fn public_key(&self) -> XmssPublicKey {
        XmssPublicKey { params: self.params, root: self.root, pub_seed: self.pub_seed }
    }

    pub fn node_cache(&self) -> &NodeCache {
        &self.cache
    }

    /// Root matches the cached top node and every internal node hashes
    /// correctly from its children.
    pub fn is_consistent(&self) -> bool {
        &self.root == self.cache.root()
            && self.cache.height() == self.params.height()
            && self.cache.is_consistent(&Hasher::new(&self.pub_seed))
    }

    /// sk_seed || sk_prf || pub_seed || root || nodes
    pub fn to_bytes(&self) -> Vec<u8> {
        let nodes = self.cache.nodes();
        let mut out = Vec::with_capacity(4 * N + nodes.len() * N);
        out.extend_from_slice(&self.sk_seed);
        out.extend_from_slice(&self.sk_prf);
        out.extend_from_slice(&self.pub_seed);
        out.extend_from_slice(&self.root);
        for n in nodes {
            out.extend_from_slice(n);
        }
        out
    }

    /// Decodes a secret and checks the cached root against the stored root.
    /// Full cache consistency is checked separately by [`Self::is_consistent`].
    pub fn from_bytes(params: XmssParams, bytes: &[u8]) -> Result<Self, XmssError> {
        let expected = 4 * N + params.node_count() * N;
        if bytes.len() != expected {
            return Err(XmssError::Malformed("secret key length"));
        }
        let take = |i: usize| -> Node { bytes[i * N..(i + 1) * N].try_into().unwrap() };
        let nodes: Vec<Node> = bytes[4 * N..].chunks_exact(N).map(|c| c.try_into().unwrap()).collect();
        let cache = NodeCache::from_nodes(params.height(), nodes).ok_or(XmssError::Malformed("node cache size"))?;
        let secret = Self { params, sk_seed: take(0), sk_prf: take(1), pub_seed: take(2), root: take(3), cache };
        if &secret.root != secret.cache.root() {
            return Err(XmssError::Malformed("root does not match node cache"));
        }
        Ok(secret)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XmssSignature {
    index: u32,
    randomizer: Node,
    wots: Vec<Node>,
    auth_path: Vec<Node>,
}

impl XmssSignature {
    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn height(&self) -> u32 {
        self.auth_path.len() as u32
    }

    pub fn params(&self) -> Option<XmssParams> {
        XmssParams::new(self.auth_path.len() as u8).ok()
    }

    pub fn encoded_len(&self) -> usize {
        4 + N + (self.wots.len() + self.auth_path.len()) * N
    }

    /// index(4, big-endian) || r || wots_sig || auth_path
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.randomizer);
        for n in self.wots.iter().chain(&self.auth_path) {
            out.extend_from_slice(n);
        }
        out
    }

    /// Decodes a signature, inferring the tree height from its length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, XmssError> {
        let params = XmssParams::from_signature_len(bytes.len()).ok_or(XmssError::Malformed("signature length"))?;
        Self::from_bytes_with(params, bytes)
    }

    pub fn from_bytes_with(params: XmssParams, bytes: &[u8]) -> Result<Self, XmssError> {
        if bytes.len() != params.signature_bytes() {
            return Err(XmssError::Malformed("signature length"));
        }
        let index = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if u64::from(index) >= params.leaf_count() {
            return Err(XmssError::IndexOutOfRange { index, leaves: params.leaf_count() });
        }
        let mut nodes = bytes[4..].chunks_exact(N).map(|c| -> Node { c.try_into().unwrap() });
        let randomizer = nodes.next().unwrap();
        let wots: Vec<Node> = nodes.by_ref().take(WOTS_LEN).collect();
        let auth_path: Vec<Node> = nodes.collect();
        Ok(Self { index, randomizer, wots, auth_path })
    }
}

/// Deterministic key generation from 96 bytes of entropy.
pub fn keygen(params: XmssParams, entropy: &[u8]) -> Result<(XmssPublicKey, XmssSecret), XmssError> {
    if entropy.len() != ENTROPY_BYTES {
        return Err(XmssError::EntropyLength(entropy.len()));
    }
    let sk_seed: Node = entropy[..N].try_into().unwrap();
    let sk_prf: Node = entropy[N..2 * N].try_into().unwrap();
    let pub_seed: Node = entropy[2 * N..].try_into().unwrap();
    let hasher = Hasher::with_secret(&pub_seed, &sk_seed);
    let cache = NodeCache::build(params, &hasher);
    let root = *cache.root();
    let secret = XmssSecret { params, sk_seed, sk_prf, pub_seed, root, cache };
    Ok((secret.public_key(), secret))
}

/// Signs `message` with the one-time key at `index`. The caller guarantees
/// the index has never been used.
pub fn sign(secret: &XmssSecret, index: u32, message: &[u8]) -> Result<XmssSignature, XmssError> {
    let leaves = secret.params.leaf_count();
    if u64::from(index) >= leaves {
        return Err(XmssError::IndexOutOfRange { index, leaves });
    }
    let hasher = Hasher::with_secret(&secret.pub_seed, &secret.sk_seed);
    let randomizer = hash::prf_index(&secret.sk_prf, index);
    let digest = hash::h_msg(&randomizer, &secret.root, index, message);
    Ok(XmssSignature {
        index,
        randomizer,
        wots: wots::sign(&hasher, index, &digest),
        auth_path: secret.cache.auth_path(index),
    })
}

/// Recomputes the root from the signature and compares it with the key's.
pub fn verify(pk: &XmssPublicKey, message: &[u8], sig: &XmssSignature) -> bool {
    let params = pk.params;
    if sig.auth_path.len() != params.height() as usize
        || sig.wots.len() != WOTS_LEN
        || u64::from(sig.index) >= params.leaf_count()
    {
        return false;
    }
    let hasher = Hasher::new(&pk.pub_seed);
    let digest = hash::h_msg(&sig.randomizer, &pk.root, sig.index, message);
    let mut wots_pk = wots::public_key_from_signature(&hasher, sig.index, &digest, &sig.wots);
    let leaf = wots::ltree(&hasher, sig.index, &mut wots_pk);
    tree::root_from_path(&hasher, sig.index, leaf, &sig.auth_path) == pk.root
}

/// Total verification over raw signature bytes.
pub fn verify_bytes(pk: &XmssPublicKey, message: &[u8], sig: &[u8]) -> bool {
    match XmssSignature::from_bytes_with(pk.params, sig) {
        Ok(sig) => verify(pk, message, &sig),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::address::Address;
    use super::*;

    fn entropy(tag: u8) -> Vec<u8> {
        (0..ENTROPY_BYTES as u8).map(|i| i.wrapping_mul(31) ^ tag).collect()
    }

    /// Independent treehash oracle: recursive descent with the tree index
    /// arithmetic written out as in the stack-based reference algorithm
    /// (right child index j, parent index (j - 1) / 2).
    fn naive_root(hasher: &Hasher, leaves: &[Node], level: u32, index: u32) -> Node {
        if level == 0 {
            return leaves[index as usize];
        }
        let left = naive_root(hasher, leaves, level - 1, 2 * index);
        let right = naive_root(hasher, leaves, level - 1, 2 * index + 1);
        let right_index = 2 * index + 1;
        let mut adrs = Address::hash_tree();
        adrs.set_tree_height(level - 1);
        adrs.set_tree_index((right_index - 1) / 2);
        hasher.rand_hash(&mut adrs, &left, &right)
    }

    #[test]
    fn root_matches_naive_treehash_oracle_h10() {
        let e = entropy(7);
        let (pk, sk) = keygen(XmssParams::SHA2_10_256, &e).unwrap();
        let hasher = Hasher::with_secret(&e[64..].try_into().unwrap(), &e[..32].try_into().unwrap());
        let leaves: Vec<Node> = (0..1024).map(|i| tree::leaf(&hasher, i)).collect();
        assert_eq!(&naive_root(&hasher, &leaves, 10, 0), pk.root());
        assert!(sk.is_consistent());
    }

    #[test]
    fn keygen_is_deterministic() {
        let (pk1, sk1) = keygen(XmssParams::SHA2_10_256, &entropy(1)).unwrap();
        let (pk2, sk2) = keygen(XmssParams::SHA2_10_256, &entropy(1)).unwrap();
        assert_eq!(pk1, pk2);
        assert!(sk1 == sk2);
        let s1 = sign(&sk1, 5, b"m").unwrap();
        let s2 = sign(&sk2, 5, b"m").unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn exhaustive_small_tree_round_trip() {
        let (pk, sk) = keygen(XmssParams::TOY_4, &entropy(2)).unwrap();
        for i in 0..16 {
            let msg = format!("message {i}");
            let sig = sign(&sk, i, msg.as_bytes()).unwrap();
            assert_eq!(sig.index(), i);
            assert_eq!(sig.to_bytes().len(), XmssParams::TOY_4.signature_bytes());
            assert!(verify(&pk, msg.as_bytes(), &sig), "index {i}");
            assert!(!verify(&pk, b"other", &sig));
        }
        assert_eq!(sign(&sk, 16, b"x"), Err(XmssError::IndexOutOfRange { index: 16, leaves: 16 }));
    }

    #[test]
    fn signature_and_key_encodings_round_trip() {
        let (pk, sk) = keygen(XmssParams::TOY_4, &entropy(3)).unwrap();
        let sig = sign(&sk, 9, b"payload").unwrap();
        let bytes = sig.to_bytes();
        assert_eq!(&bytes[..4], &9u32.to_be_bytes());
        assert_eq!(XmssSignature::from_bytes(&bytes).unwrap(), sig);
        assert_eq!(XmssPublicKey::from_bytes(&pk.to_bytes()).unwrap(), pk);
        assert_eq!(pk.to_bytes().len(), 68);
        let restored = XmssSecret::from_bytes(sk.params(), &sk.to_bytes()).unwrap();
        assert!(restored == sk);
    }

    #[test]
    fn truncated_or_oversized_signatures_reject() {
        let (pk, sk) = keygen(XmssParams::TOY_4, &entropy(4)).unwrap();
        let bytes = sign(&sk, 1, b"m").unwrap().to_bytes();
        assert!(verify_bytes(&pk, b"m", &bytes));
        assert!(!verify_bytes(&pk, b"m", &bytes[..bytes.len() - 1]));
        assert!(!verify_bytes(&pk, b"m", &[bytes.clone(), vec![0]].concat()));
        assert!(!verify_bytes(&pk, b"m", &[]));
        let mut bad_index = bytes.clone();
        bad_index[..4].copy_from_slice(&16u32.to_be_bytes());
        assert!(!verify_bytes(&pk, b"m", &bad_index));
    }

    #[test]
    fn rejects_short_entropy() {
        assert_eq!(keygen(XmssParams::TOY_4, &[0u8; 95]).unwrap_err(), XmssError::EntropyLength(95));
    }
}
