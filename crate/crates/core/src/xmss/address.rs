/// 32-byte hash address (ADRS), eight big-endian words.
///
/// Single-tree XMSS keeps the layer and tree words at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct Address([u32; 8]);

pub(crate) const TYPE_OTS: u32 = 0;
pub(crate) const TYPE_LTREE: u32 = 1;
pub(crate) const TYPE_HASH_TREE: u32 = 2;

impl Address {
    pub(crate) fn ots(leaf: u32) -> Self {
        let mut a = Self::default();
        a.0[3] = TYPE_OTS;
        a.0[4] = leaf;
        a
    }

    pub(crate) fn ltree(leaf: u32) -> Self {
        let mut a = Self::default();
        a.0[3] = TYPE_LTREE;
        a.0[4] = leaf;
        a
    }

    pub(crate) fn hash_tree() -> Self {
        let mut a = Self::default();
        a.0[3] = TYPE_HASH_TREE;
        a
    }

    pub(crate) fn set_chain(&mut self, chain: u32) {
        self.0[5] = chain;
    }

    pub(crate) fn set_hash(&mut self, hash: u32) {
        self.0[6] = hash;
    }

    pub(crate) fn set_tree_height(&mut self, height: u32) {
        self.0[5] = height;
    }

    pub(crate) fn tree_height(&self) -> u32 {
        self.0[5]
    }

    pub(crate) fn set_tree_index(&mut self, index: u32) {
        self.0[6] = index;
    }

    pub(crate) fn set_key_and_mask(&mut self, km: u32) {
        self.0[7] = km;
    }

    pub(crate) fn to_bytes(self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (chunk, word) in out.chunks_exact_mut(4).zip(self.0) {
            chunk.copy_from_slice(&word.to_be_bytes());
        }
        out
    }
}
