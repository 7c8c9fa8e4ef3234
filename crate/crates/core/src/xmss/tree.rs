//! Full Merkle tree over the WOTS+ leaves, stored level by level.

use super::address::Address;
use super::hash::{Hasher, Node};
use super::params::XmssParams;
use super::wots;

/// Every node of the tree: level 0 holds 2^h leaves, level h holds the root.
#[derive(Clone, PartialEq, Eq)]
pub struct NodeCache {
    height: u32,
    nodes: Vec<Node>,
}

impl std::fmt::Debug for NodeCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeCache").field("height", &self.height).field("nodes", &self.nodes.len()).finish()
    }
}

fn level_offset(height: u32, level: u32) -> usize {
    // sum_{k < level} 2^(height - k)
    let total = (1usize << (height + 1)) - 1;
    let remaining = (1usize << (height - level + 1)) - 1;
    total - remaining
}

pub(crate) fn leaf(hasher: &Hasher, index: u32) -> Node {
    let mut pk = wots::public_key(hasher, index);
    wots::ltree(hasher, index, &mut pk)
}

/// Parent of the nodes `left` and `right`, both at `level`, where the
/// parent has position `parent_index` on `level + 1`.
pub(crate) fn parent(hasher: &Hasher, level: u32, parent_index: u32, left: &Node, right: &Node) -> Node {
    let mut adrs = Address::hash_tree();
    adrs.set_tree_height(level);
    adrs.set_tree_index(parent_index);
    hasher.rand_hash(&mut adrs, left, right)
}

impl NodeCache {
    pub(crate) fn build(params: XmssParams, hasher: &Hasher) -> Self {
        let height = params.height();
        let mut nodes = Vec::with_capacity(params.node_count());
        for i in 0..params.leaf_count() as u32 {
            nodes.push(leaf(hasher, i));
        }
        let mut prev_start = 0usize;
        for level in 0..height {
            let width = 1usize << (height - level);
            for p in 0..width / 2 {
                let l = nodes[prev_start + 2 * p];
                let r = nodes[prev_start + 2 * p + 1];
                nodes.push(parent(hasher, level, p as u32, &l, &r));
            }
            prev_start += width;
        }
        Self { height, nodes }
    }

    pub(crate) fn from_nodes(height: u32, nodes: Vec<Node>) -> Option<Self> {
        if nodes.len() != (1usize << (height + 1)) - 1 {
            return None;
        }
        Some(Self { height, nodes })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn node(&self, level: u32, index: usize) -> &Node {
        &self.nodes[level_offset(self.height, level) + index]
    }

    pub fn root(&self) -> &Node {
        self.nodes.last().expect("non-empty tree")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn auth_path(&self, index: u32) -> Vec<Node> {
        (0..self.height)
            .map(|level| {
                let sibling = ((index >> level) ^ 1) as usize;
                *self.node(level, sibling)
            })
            .collect()
    }

    /// Checks that every internal node is the hash of its children.
    pub(crate) fn is_consistent(&self, hasher: &Hasher) -> bool {
        (0..self.height).all(|level| {
            let width = 1usize << (self.height - level - 1);
            (0..width).all(|p| {
                let expect = parent(hasher, level, p as u32, self.node(level, 2 * p), self.node(level, 2 * p + 1));
                &expect == self.node(level + 1, p)
            })
        })
    }
}

pub(crate) fn root_from_path(hasher: &Hasher, index: u32, leaf: Node, auth: &[Node]) -> Node {
    let mut node = leaf;
    for (k, sibling) in auth.iter().enumerate() {
        let k = k as u32;
        let parent_index = index >> (k + 1);
        node = if (index >> k) & 1 == 0 {
            parent(hasher, k, parent_index, &node, sibling)
        } else {
            parent(hasher, k, parent_index, sibling, &node)
        };
    }
    node
}
