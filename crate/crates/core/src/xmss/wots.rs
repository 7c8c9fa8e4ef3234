//! WOTS+ with w = 16 over the keyed chain function.

use super::address::Address;
use super::hash::{Hasher, Node};
use super::params::{log_w, W, WOTS_LEN, WOTS_LEN1, WOTS_LEN2};

/// Message digits followed by checksum digits, each in [0, w).
pub(crate) fn digits(msg: &Node) -> [u8; WOTS_LEN] {
    let mut out = [0u8; WOTS_LEN];
    for (i, byte) in msg.iter().enumerate() {
        out[2 * i] = byte >> 4;
        out[2 * i + 1] = byte & 0x0f;
    }
    let mut csum: u32 = out[..WOTS_LEN1].iter().map(|&d| W - 1 - u32::from(d)).sum();
    // left-align the checksum into ceil(len2 * log_w / 8) bytes
    csum <<= 8 - ((WOTS_LEN2 * log_w()) % 8);
    let bytes = (csum as u16).to_be_bytes();
    out[WOTS_LEN1] = bytes[0] >> 4;
    out[WOTS_LEN1 + 1] = bytes[0] & 0x0f;
    out[WOTS_LEN1 + 2] = bytes[1] >> 4;
    out
}

fn chain(hasher: &Hasher, adrs: &mut Address, start: &Node, from: u32, steps: u32) -> Node {
    let mut tmp = *start;
    for j in from..from + steps {
        adrs.set_hash(j);
        tmp = hasher.chain_step(adrs, &tmp);
    }
    tmp
}

fn secret(hasher: &Hasher, leaf: u32, chain_idx: u32) -> Node {
    let mut adrs = Address::ots(leaf);
    adrs.set_chain(chain_idx);
    hasher.prf_keygen(&adrs)
}

pub(crate) fn public_key(hasher: &Hasher, leaf: u32) -> Vec<Node> {
    (0..WOTS_LEN as u32)
        .map(|i| {
            let sk = secret(hasher, leaf, i);
            let mut adrs = Address::ots(leaf);
            adrs.set_chain(i);
            chain(hasher, &mut adrs, &sk, 0, W - 1)
        })
        .collect()
}

pub(crate) fn sign(hasher: &Hasher, leaf: u32, msg: &Node) -> Vec<Node> {
    digits(msg)
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let sk = secret(hasher, leaf, i as u32);
            let mut adrs = Address::ots(leaf);
            adrs.set_chain(i as u32);
            chain(hasher, &mut adrs, &sk, 0, u32::from(d))
        })
        .collect()
}

pub(crate) fn public_key_from_signature(hasher: &Hasher, leaf: u32, msg: &Node, sig: &[Node]) -> Vec<Node> {
    digits(msg)
        .iter()
        .zip(sig)
        .enumerate()
        .map(|(i, (&d, s))| {
            let mut adrs = Address::ots(leaf);
            adrs.set_chain(i as u32);
            chain(hasher, &mut adrs, s, u32::from(d), W - 1 - u32::from(d))
        })
        .collect()
}

/// Compresses a WOTS+ public key into one leaf node.
pub(crate) fn ltree(hasher: &Hasher, leaf: u32, pk: &mut [Node]) -> Node {
    let mut adrs = Address::ltree(leaf);
    let mut len = pk.len();
    adrs.set_tree_height(0);
    while len > 1 {
        for i in 0..len / 2 {
            adrs.set_tree_index(i as u32);
            pk[i] = hasher.rand_hash(&mut adrs, &pk[2 * i], &pk[2 * i + 1]);
        }
        if len % 2 == 1 {
            pk[len / 2] = pk[len - 1];
        }
        len = len.div_ceil(2);
        let h = adrs.tree_height();
        adrs.set_tree_height(h + 1);
    }
    pk[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_digits_for_extreme_messages() {
        // all-zero digest: checksum 64 * 15 = 960 = 0x3c0, shifted by 4 -> 0x3c00
        let d = digits(&[0u8; 32]);
        assert_eq!(&d[64..], &[3, 12, 0]);
        // all-ones digest: checksum 0
        let d = digits(&[0xffu8; 32]);
        assert_eq!(&d[64..], &[0, 0, 0]);
        assert!(d[..64].iter().all(|&x| x == 15));
    }

    #[test]
    fn signature_chains_complete_to_public_key() {
        let h = Hasher::with_secret(&[1u8; 32], &[2u8; 32]);
        let msg = [0x5au8; 32];
        let pk = public_key(&h, 3);
        let sig = sign(&h, 3, &msg);
        assert_eq!(public_key_from_signature(&h, 3, &msg, &sig), pk);
        let other = [0xa5u8; 32];
        assert_ne!(public_key_from_signature(&h, 3, &other, &sig), pk);
    }
}
