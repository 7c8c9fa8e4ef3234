//! Keyed hash functions for XMSS over SHA-256 (n = 32).
//!
//! Every function is `SHA-256(toByte(domain, 32) || KEY || M)`. The fixed
//! length inputs are fed straight into the compression function, with the
//! `domain || seed` block precomputed once per key.

#[allow(deprecated)]
use sha2::digest::generic_array::GenericArray;
use sha2::{Digest, Sha256};

use super::address::Address;
use super::params::N;

const IV: [u32; 8] = [0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19];

const DOMAIN_F: u8 = 0;
const DOMAIN_H: u8 = 1;
const DOMAIN_HMSG: u8 = 2;
const DOMAIN_PRF: u8 = 3;
const DOMAIN_PRF_KEYGEN: u8 = 4;

pub(crate) type Node = [u8; N];

// generic-array 0.14 is what sha2 0.10 exposes for raw blocks
#[allow(deprecated)]
fn compress(state: &mut [u32; 8], block: &[u8; 64]) {
    sha2::compress256(state, &[GenericArray::from(*block)]);
}

fn state_bytes(state: &[u32; 8]) -> Node {
    let mut out = [0u8; N];
    for (chunk, word) in out.chunks_exact_mut(4).zip(state) {
        chunk.copy_from_slice(&word.to_be_bytes());
    }
    out
}

fn domain_block(domain: u8, key: &[u8; N]) -> [u8; 64] {
    let mut block = [0u8; 64];
    block[31] = domain;
    block[32..].copy_from_slice(key);
    block
}

/// Final block for a message whose last 32 bytes are `tail` and whose total
/// length is `total` bytes (one full block precedes it).
fn tail_block_32(tail: &[u8; N], total_bits: u64) -> [u8; 64] {
    let mut block = [0u8; 64];
    block[..32].copy_from_slice(tail);
    block[32] = 0x80;
    block[56..].copy_from_slice(&total_bits.to_be_bytes());
    block
}

fn padding_block(total_bits: u64) -> [u8; 64] {
    let mut block = [0u8; 64];
    block[0] = 0x80;
    block[56..].copy_from_slice(&total_bits.to_be_bytes());
    block
}

/// Hash context bound to a key pair's public seed (and optionally the secret
/// seed for key generation).
#[derive(Clone)]
pub(crate) struct Hasher {
    prf_pub: [u32; 8],
    prf_keygen: Option<[u32; 8]>,
    pub_seed: Node,
}

impl Hasher {
    pub(crate) fn new(pub_seed: &Node) -> Self {
        let mut prf_pub = IV;
        compress(&mut prf_pub, &domain_block(DOMAIN_PRF, pub_seed));
        Self { prf_pub, prf_keygen: None, pub_seed: *pub_seed }
    }

    pub(crate) fn with_secret(pub_seed: &Node, sk_seed: &Node) -> Self {
        let mut h = Self::new(pub_seed);
        let mut st = IV;
        compress(&mut st, &domain_block(DOMAIN_PRF_KEYGEN, sk_seed));
        h.prf_keygen = Some(st);
        h
    }

    /// PRF(PUB_SEED, ADRS)
    pub(crate) fn prf_adrs(&self, adrs: &Address) -> Node {
        let mut st = self.prf_pub;
        compress(&mut st, &tail_block_32(&adrs.to_bytes(), 96 * 8));
        state_bytes(&st)
    }

    /// PRF_keygen(SK_SEED, PUB_SEED || ADRS), the WOTS+ secret for one chain.
    pub(crate) fn prf_keygen(&self, adrs: &Address) -> Node {
        let mut st = self.prf_keygen.expect("hasher built without secret seed");
        let mut block = [0u8; 64];
        block[..32].copy_from_slice(&self.pub_seed);
        block[32..].copy_from_slice(&adrs.to_bytes());
        compress(&mut st, &block);
        compress(&mut st, &padding_block(128 * 8));
        state_bytes(&st)
    }

    /// F(KEY, M)
    pub(crate) fn f(key: &Node, msg: &Node) -> Node {
        let mut st = IV;
        compress(&mut st, &domain_block(DOMAIN_F, key));
        compress(&mut st, &tail_block_32(msg, 96 * 8));
        state_bytes(&st)
    }

    /// H(KEY, M) with a 2n-byte message.
    pub(crate) fn h(key: &Node, left: &Node, right: &Node) -> Node {
        let mut st = IV;
        compress(&mut st, &domain_block(DOMAIN_H, key));
        let mut block = [0u8; 64];
        block[..32].copy_from_slice(left);
        block[32..].copy_from_slice(right);
        compress(&mut st, &block);
        compress(&mut st, &padding_block(128 * 8));
        state_bytes(&st)
    }

    /// One chain step: F(PRF(ADRS[km=0]), X xor PRF(ADRS[km=1])).
    pub(crate) fn chain_step(&self, adrs: &mut Address, x: &Node) -> Node {
        adrs.set_key_and_mask(0);
        let key = self.prf_adrs(adrs);
        adrs.set_key_and_mask(1);
        let mask = self.prf_adrs(adrs);
        Self::f(&key, &xor(x, &mask))
    }

    /// RAND_HASH(LEFT, RIGHT, SEED, ADRS)
    pub(crate) fn rand_hash(&self, adrs: &mut Address, left: &Node, right: &Node) -> Node {
        adrs.set_key_and_mask(0);
        let key = self.prf_adrs(adrs);
        adrs.set_key_and_mask(1);
        let bm0 = self.prf_adrs(adrs);
        adrs.set_key_and_mask(2);
        let bm1 = self.prf_adrs(adrs);
        Self::h(&key, &xor(left, &bm0), &xor(right, &bm1))
    }
}

/// PRF(SK_PRF, toByte(idx, 32)), the per-signature randomizer.
pub(crate) fn prf_index(sk_prf: &Node, index: u32) -> Node {
    let mut st = IV;
    compress(&mut st, &domain_block(DOMAIN_PRF, sk_prf));
    let mut idx = [0u8; N];
    idx[28..].copy_from_slice(&index.to_be_bytes());
    compress(&mut st, &tail_block_32(&idx, 96 * 8));
    state_bytes(&st)
}

/// H_msg(r || root || toByte(idx, 32), M)
pub(crate) fn h_msg(r: &Node, root: &Node, index: u32, message: &[u8]) -> Node {
    let mut prefix = [0u8; 32];
    prefix[31] = DOMAIN_HMSG;
    let mut idx = [0u8; N];
    idx[28..].copy_from_slice(&index.to_be_bytes());
    Sha256::new()
        .chain_update(prefix)
        .chain_update(r)
        .chain_update(root)
        .chain_update(idx)
        .chain_update(message)
        .finalize()
        .into()
}

pub(crate) fn xor(a: &Node, b: &Node) -> Node {
    let mut out = [0u8; N];
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x ^ y;
    }
    out
}
