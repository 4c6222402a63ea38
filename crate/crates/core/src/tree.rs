//! Arena-backed rooted phylogeny.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub label: Option<String>,
    /// Length of the edge to the parent; `None` when absent.
    pub length: Option<f64>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// Rooted tree with labeled leaves. Internal labels are kept but carry no
/// meaning for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyloTree {
    nodes: Vec<Node>,
    root: NodeId,
}

impl Default for PhyloTree {
    fn default() -> Self {
        Self::new()
    }
}

impl PhyloTree {
    /// A tree consisting of an unlabeled root only.
    pub fn new() -> Self {
        PhyloTree {
            nodes: vec![Node {
                label: None,
                length: None,
                parent: None,
                children: Vec::new(),
            }],
            root: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_child(
        &mut self,
        parent: NodeId,
        label: Option<String>,
        length: Option<f64>,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            label,
            length,
            parent: Some(parent),
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// Node ids with every child before its parent.
    pub fn postorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                out.push(id);
            } else {
                stack.push((id, true));
                for &c in self.nodes[id].children.iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    /// Leaf ids in left-to-right order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.postorder()
            .into_iter()
            .filter(|&id| self.is_leaf(id))
            .collect()
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        self.leaves()
            .into_iter()
            .map(|id| self.nodes[id].label.clone().unwrap_or_default())
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_empty()).count()
    }

    /// Checks that every leaf carries a distinct, nonempty label.
    pub fn validate_labels(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.leaves() {
            match &self.nodes[id].label {
                Some(l) if !l.is_empty() => {
                    if !seen.insert(l.as_str()) {
                        return Err(Error::DuplicateLabel(l.clone()));
                    }
                }
                _ => return Err(Error::Precondition(format!("leaf {id} has no label"))),
            }
        }
        Ok(())
    }

    /// Distance from the root to every node, treating absent lengths as 0.
    pub fn depths(&self) -> Vec<f64> {
        let mut depth = vec![0.0; self.nodes.len()];
        let mut order = self.postorder();
        order.reverse();
        for id in order {
            if let Some(p) = self.nodes[id].parent {
                depth[id] = depth[p] + self.nodes[id].length.unwrap_or(0.0);
            }
        }
        depth
    }

    /// Path lengths between all pairs of leaves, in `leaf_labels` order.
    pub fn leaf_distances(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let leaves = self.leaves();
        let n = self.nodes.len();
        let depth = self.depths();
        // ancestors as sets of ids for LCA lookup
        let mut ancestors: Vec<Vec<NodeId>> = Vec::with_capacity(leaves.len());
        for &leaf in &leaves {
            let mut chain = Vec::new();
            let mut cur = Some(leaf);
            while let Some(c) = cur {
                chain.push(c);
                cur = self.nodes[c].parent;
            }
            ancestors.push(chain);
        }
        let mut d = vec![vec![0.0; leaves.len()]; leaves.len()];
        let mut mark = vec![usize::MAX; n];
        for i in 0..leaves.len() {
            for &a in &ancestors[i] {
                mark[a] = i;
            }
            for j in 0..leaves.len() {
                if i == j {
                    continue;
                }
                let lca = *ancestors[j]
                    .iter()
                    .find(|&&a| mark[a] == i)
                    .expect("common root");
                d[i][j] = depth[leaves[i]] + depth[leaves[j]] - 2.0 * depth[lca];
            }
        }
        (self.leaf_labels(), d)
    }

    /// Undirected neighbor lists, used by the unrooted views.
    pub fn adjacency(&self) -> Vec<Vec<NodeId>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                adj[id].push(p);
                adj[p].push(id);
            }
        }
        adj
    }

    /// Map from leaf label to node id.
    pub fn leaf_index(&self) -> HashMap<String, NodeId> {
        self.leaves()
            .into_iter()
            .filter_map(|id| self.nodes[id].label.clone().map(|l| (l, id)))
            .collect()
    }

    /// Copy with every leaf label passed through `f`.
    pub fn relabel(&self, mut f: impl FnMut(&str) -> String) -> PhyloTree {
        let mut out = self.clone();
        for id in self.leaves() {
            if let Some(l) = &self.nodes[id].label {
                out.nodes[id].label = Some(f(l));
            }
        }
        out
    }

    /// Builds a tree from explicit parent links; `parents[root]` must be `None`.
    pub(crate) fn from_nodes(nodes: Vec<Node>, root: NodeId) -> Self {
        PhyloTree { nodes, root }
    }
}
