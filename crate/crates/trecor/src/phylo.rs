//! Trees, count matrices, and the leaf-to-internal-node transform.
//!
//! A strictly binary tree over `q+1` taxa has `q` internal nodes. For sample
//! `i` and internal node `j`, `N_ij` is the total count of the clade below
//! `j` and `y_ij` the count of the left sub-clade, so `y_ij ~ Binomial(N_ij,
//! p_ij)` factorizes the multinomial over leaves into independent binomials
//! along the tree. The map between leaf compositions and the per-node
//! branching probabilities is bijective; both directions live here.
//!
//! Internal nodes are indexed by depth-first preorder (root first, left
//! subtree before right), so a parent always has a smaller index than its
//! children and `dfs_order` is the identity permutation. Every matrix
//! produced by this crate orders its node axis this way.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors from parsing, transforming, or serializing tree-shaped data.
#[derive(Debug, Error)]
pub enum PhyloError {
    #[error("newick syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("non-binary node of arity {arity} at byte {position}; pass MultifurcationPolicy::LeftDeep to binarize")]
    NonBinary { arity: usize, position: usize },
    #[error("duplicate leaf label {0:?}")]
    DuplicateLeaf(String),
    #[error("tree must have at least 2 leaves")]
    TooFewLeaves,
    #[error("taxon name mismatch: {0}")]
    TaxonMismatch(String),
    #[error("sample {0:?} has zero total count")]
    ZeroCountSample(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("sidecar error: {0}")]
    Sidecar(String),
}

/// Reference to a child node: either an internal node or a leaf, by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Internal(usize),
    Leaf(usize),
}

/// What to do with nodes of arity greater than two in a Newick input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MultifurcationPolicy {
    /// Reject the tree (default).
    #[default]
    Reject,
    /// Resolve left-deep: fold children pairwise from the left, recording a
    /// warning per resolved node.
    LeftDeep,
}

/// What to do with samples whose total count is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroRowPolicy {
    /// Drop the sample and report it in the return value (default).
    #[default]
    Drop,
    /// Fail with [`PhyloError::ZeroCountSample`].
    Error,
}

/// Strictly binary rooted tree, topology only. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyloTree {
    left: Vec<NodeRef>,
    right: Vec<NodeRef>,
    parent: Vec<Option<usize>>,
    leaf_names: Vec<String>,
    leaf_parent: Vec<usize>,
    dfs_order: Vec<usize>,
}

impl PhyloTree {
    /// Number of internal nodes `q`.
    pub fn q(&self) -> usize {
        self.left.len()
    }

    /// Number of leaves, always `q + 1`.
    pub fn n_leaves(&self) -> usize {
        self.leaf_names.len()
    }

    /// Root internal node, always index 0.
    pub fn root(&self) -> usize {
        0
    }

    pub fn left_child(&self, j: usize) -> NodeRef {
        self.left[j]
    }

    pub fn right_child(&self, j: usize) -> NodeRef {
        self.right[j]
    }

    /// Parent of internal node `j`, `None` for the root.
    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    /// Internal parent of leaf `k`.
    pub fn leaf_parent(&self, k: usize) -> usize {
        self.leaf_parent[k]
    }

    pub fn leaf_names(&self) -> &[String] {
        &self.leaf_names
    }

    pub fn leaf_index(&self, name: &str) -> Option<usize> {
        self.leaf_names.iter().position(|n| n == name)
    }

    /// Depth-first ordering of internal nodes. Identity by construction;
    /// kept so callers can treat the ordering as data rather than convention.
    pub fn dfs_order(&self) -> &[usize] {
        &self.dfs_order
    }

    /// Build from provisional child pairs. Internal and leaf indices are
    /// remapped to depth-first preorder encounter order.
    pub(crate) fn from_parts(
        pairs: Vec<(NodeRef, NodeRef)>,
        leaf_names: Vec<String>,
        root: NodeRef,
    ) -> Result<Self, PhyloError> {
        if leaf_names.len() < 2 {
            return Err(PhyloError::TooFewLeaves);
        }
        let q = pairs.len();
        if leaf_names.len() != q + 1 {
            return Err(PhyloError::Invalid(format!(
                "tree shape: {} internal nodes with {} leaves",
                q,
                leaf_names.len()
            )));
        }
        {
            let mut seen = HashMap::new();
            for name in &leaf_names {
                if name.is_empty() {
                    return Err(PhyloError::Invalid("empty leaf label".into()));
                }
                if seen.insert(name.clone(), ()).is_some() {
                    return Err(PhyloError::DuplicateLeaf(name.clone()));
                }
            }
        }
        let root_internal = match root {
            NodeRef::Internal(r) => r,
            NodeRef::Leaf(_) => return Err(PhyloError::TooFewLeaves),
        };
        // Preorder walk assigning canonical indices; also detects nodes that
        // are shared or unreachable.
        let mut int_map = vec![usize::MAX; q];
        let mut leaf_map = vec![usize::MAX; leaf_names.len()];
        let mut order = Vec::with_capacity(q);
        let mut leaf_order = Vec::with_capacity(leaf_names.len());
        let mut stack = vec![NodeRef::Internal(root_internal)];
        while let Some(node) = stack.pop() {
            match node {
                NodeRef::Internal(old) => {
                    if old >= q {
                        return Err(PhyloError::Invalid(format!("internal index {old} out of range")));
                    }
                    if int_map[old] != usize::MAX {
                        return Err(PhyloError::Invalid(format!("internal node {old} referenced twice")));
                    }
                    int_map[old] = order.len();
                    order.push(old);
                    let (l, r) = pairs[old];
                    stack.push(r);
                    stack.push(l);
                }
                NodeRef::Leaf(old) => {
                    if old >= leaf_names.len() {
                        return Err(PhyloError::Invalid(format!("leaf index {old} out of range")));
                    }
                    if leaf_map[old] != usize::MAX {
                        return Err(PhyloError::Invalid(format!("leaf {old} referenced twice")));
                    }
                    leaf_map[old] = leaf_order.len();
                    leaf_order.push(old);
                }
            }
        }
        if order.len() != q || leaf_order.len() != leaf_names.len() {
            return Err(PhyloError::Invalid("tree has unreachable nodes".into()));
        }
        let remap = |n: NodeRef| match n {
            NodeRef::Internal(old) => NodeRef::Internal(int_map[old]),
            NodeRef::Leaf(old) => NodeRef::Leaf(leaf_map[old]),
        };
        let mut left = vec![NodeRef::Leaf(usize::MAX); q];
        let mut right = vec![NodeRef::Leaf(usize::MAX); q];
        for (new_j, &old_j) in order.iter().enumerate() {
            left[new_j] = remap(pairs[old_j].0);
            right[new_j] = remap(pairs[old_j].1);
        }
        let mut parent = vec![None; q];
        let mut leaf_parent = vec![usize::MAX; leaf_names.len()];
        for j in 0..q {
            for child in [left[j], right[j]] {
                match child {
                    NodeRef::Internal(c) => parent[c] = Some(j),
                    NodeRef::Leaf(l) => leaf_parent[l] = j,
                }
            }
        }
        let mut names = vec![String::new(); leaf_names.len()];
        for (old, name) in leaf_names.into_iter().enumerate() {
            names[leaf_map[old]] = name;
        }
        Ok(PhyloTree {
            left,
            right,
            parent,
            leaf_names: names,
            leaf_parent,
            dfs_order: (0..q).collect(),
        })
    }

    /// Leaf indices of the clade below internal node `j`, ascending.
    pub fn clade_leaves(&self, j: usize) -> Vec<usize> {
        let mut leaves = Vec::new();
        let mut stack = vec![NodeRef::Internal(j)];
        while let Some(node) = stack.pop() {
            match node {
                NodeRef::Internal(k) => {
                    stack.push(self.right[k]);
                    stack.push(self.left[k]);
                }
                NodeRef::Leaf(l) => leaves.push(l),
            }
        }
        leaves.sort_unstable();
        leaves
    }

    /// Leaf indices of the left sub-clade of internal node `j`, ascending.
    pub fn left_clade_leaves(&self, j: usize) -> Vec<usize> {
        match self.left[j] {
            NodeRef::Leaf(l) => vec![l],
            NodeRef::Internal(c) => self.clade_leaves(c),
        }
    }

    /// Names of the clade below internal node `j`, in ascending leaf order.
    pub fn clade_leaf_names(&self, j: usize) -> Vec<String> {
        self.clade_leaves(j)
            .into_iter()
            .map(|l| self.leaf_names[l].clone())
            .collect()
    }
}

/// Parse a Newick string into a strictly binary tree, rejecting
/// multifurcations.
pub fn parse_newick(text: &str) -> Result<PhyloTree, PhyloError> {
    parse_newick_with(text, MultifurcationPolicy::Reject).map(|(tree, _)| tree)
}

/// Parse a Newick string; multifurcations are handled per `policy`, and any
/// left-deep resolutions are reported as warning strings.
///
/// Branch lengths, internal node labels, and bracket comments are accepted
/// and discarded: the model is topology-only.
pub fn parse_newick_with(
    text: &str,
    policy: MultifurcationPolicy,
) -> Result<(PhyloTree, Vec<String>), PhyloError> {
    Parser {
        bytes: text.as_bytes(),
        pos: 0,
        policy,
    }
    .parse()
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    policy: MultifurcationPolicy,
}

impl<'a> Parser<'a> {
    fn syntax(&self, message: impl Into<String>) -> PhyloError {
        PhyloError::Syntax {
            position: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skip whitespace and `[...]` comments.
    fn skip_filler(&mut self) -> Result<(), PhyloError> {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    let start = self.pos;
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b']' {
                            break;
                        }
                    }
                    if self.bytes.get(self.pos - 1) != Some(&b']') {
                        self.pos = start;
                        return Err(self.syntax("unterminated comment"));
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    /// Read a label: quoted (single quotes, doubled to escape) or a run of
    /// characters excluding Newick punctuation and whitespace.
    fn read_label(&mut self) -> Result<String, PhyloError> {
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let mut label = String::new();
            loop {
                match self.peek() {
                    Some(b'\'') => {
                        self.pos += 1;
                        if self.peek() == Some(b'\'') {
                            label.push('\'');
                            self.pos += 1;
                        } else {
                            return Ok(label);
                        }
                    }
                    Some(_) => {
                        // Advance by whole UTF-8 characters inside quotes.
                        let s = &self.bytes[self.pos..];
                        let ch_len = utf8_len(s[0]);
                        let chunk = s.get(..ch_len).ok_or_else(|| self.syntax("truncated character"))?;
                        label.push_str(
                            std::str::from_utf8(chunk).map_err(|_| self.syntax("invalid UTF-8 in label"))?,
                        );
                        self.pos += ch_len;
                    }
                    None => return Err(self.syntax("unterminated quoted label")),
                }
            }
        } else {
            let start = self.pos;
            while let Some(b) = self.peek() {
                if b"(),;:[]'".contains(&b) || b.is_ascii_whitespace() {
                    break;
                }
                self.pos += 1;
            }
            if self.pos == start {
                return Err(self.syntax("expected a label"));
            }
            Ok(std::str::from_utf8(&self.bytes[start..self.pos])
                .map_err(|_| self.syntax("invalid UTF-8 in label"))?
                .to_string())
        }
    }

    /// Parse and discard an optional `:length` suffix.
    fn skip_branch_length(&mut self) -> Result<(), PhyloError> {
        self.skip_filler()?;
        if self.peek() != Some(b':') {
            return Ok(());
        }
        self.pos += 1;
        self.skip_filler()?;
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() || b"+-.eE".contains(&b) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        if text.parse::<f64>().is_err() {
            self.pos = start;
            return Err(self.syntax("invalid branch length"));
        }
        Ok(())
    }

    fn parse(mut self) -> Result<(PhyloTree, Vec<String>), PhyloError> {
        // Frames hold the children collected so far for each open '('.
        let mut frames: Vec<(usize, Vec<NodeRef>)> = Vec::new();
        let mut pairs: Vec<(NodeRef, NodeRef)> = Vec::new();
        let mut leaf_names: Vec<String> = Vec::new();
        let mut warnings: Vec<String> = Vec::new();
        let mut last: Option<NodeRef> = None;
        let root;
        loop {
            self.skip_filler()?;
            if last.is_none() {
                // Expecting a node: either a new frame or a leaf label.
                match self.peek() {
                    Some(b'(') => {
                        frames.push((self.pos, Vec::new()));
                        self.pos += 1;
                    }
                    Some(b) if b == b')' || b == b',' || b == b';' || b == b':' => {
                        return Err(self.syntax(format!("expected a node, found {:?}", b as char)));
                    }
                    Some(_) => {
                        let label = self.read_label()?;
                        leaf_names.push(label);
                        last = Some(NodeRef::Leaf(leaf_names.len() - 1));
                        self.skip_branch_length()?;
                    }
                    None => return Err(self.syntax("unexpected end of input")),
                }
            } else {
                match self.peek() {
                    Some(b',') => {
                        self.pos += 1;
                        let frame = frames
                            .last_mut()
                            .ok_or_else(|| self.syntax("',' outside parentheses"))?;
                        frame.1.push(last.take().unwrap());
                    }
                    Some(b')') => {
                        self.pos += 1;
                        let (open_pos, mut children) = frames
                            .pop()
                            .ok_or_else(|| self.syntax("unmatched ')'"))?;
                        children.push(last.take().unwrap());
                        let node = self.close_node(open_pos, children, &mut pairs, &mut warnings)?;
                        last = Some(node);
                        // Optional internal label, then optional branch length.
                        self.skip_filler()?;
                        if let Some(b) = self.peek() {
                            if !b"(),;:[]".contains(&b) && !b.is_ascii_whitespace() {
                                let _ = self.read_label()?;
                            }
                        }
                        self.skip_branch_length()?;
                    }
                    Some(b';') => {
                        if !frames.is_empty() {
                            return Err(self.syntax("unbalanced parentheses at ';'"));
                        }
                        self.pos += 1;
                        root = last.take().unwrap();
                        break;
                    }
                    Some(b) => {
                        return Err(self.syntax(format!("unexpected {:?} after a node", b as char)));
                    }
                    None => return Err(self.syntax("missing ';' at end of tree")),
                }
            }
        }
        self.skip_filler()?;
        if self.pos != self.bytes.len() {
            return Err(self.syntax("trailing content after ';'"));
        }
        let (tree, warns) = (PhyloTree::from_parts(pairs, leaf_names, root)?, warnings);
        Ok((tree, warns))
    }

    /// Turn a completed child list into internal node(s), binarizing per the
    /// policy when the arity exceeds two.
    fn close_node(
        &self,
        open_pos: usize,
        children: Vec<NodeRef>,
        pairs: &mut Vec<(NodeRef, NodeRef)>,
        warnings: &mut Vec<String>,
    ) -> Result<NodeRef, PhyloError> {
        match children.len() {
            0 => unreachable!("close_node always receives the last child"),
            1 => Err(PhyloError::Syntax {
                position: open_pos,
                message: "node has a single child; trees must be strictly binary".into(),
            }),
            2 => {
                pairs.push((children[0], children[1]));
                Ok(NodeRef::Internal(pairs.len() - 1))
            }
            arity => match self.policy {
                MultifurcationPolicy::Reject => Err(PhyloError::NonBinary {
                    arity,
                    position: open_pos,
                }),
                MultifurcationPolicy::LeftDeep => {
                    warnings.push(format!(
                        "multifurcation of arity {arity} at byte {open_pos} resolved left-deep"
                    ));
                    let mut iter = children.into_iter();
                    let mut acc = iter.next().unwrap();
                    for child in iter {
                        pairs.push((acc, child));
                        acc = NodeRef::Internal(pairs.len() - 1);
                    }
                    Ok(acc)
                }
            },
        }
    }
}

fn utf8_len(first: u8) -> usize {
    match first {
        b if b < 0x80 => 1,
        b if b >= 0xF0 => 4,
        b if b >= 0xE0 => 3,
        _ => 2,
    }
}

/// Serialize to Newick. Topology and leaf names only; inverse of
/// [`parse_newick`] up to whitespace.
pub fn serialize_newick(tree: &PhyloTree) -> String {
    enum Task {
        Visit(NodeRef),
        Text(&'static str),
    }
    let mut out = String::new();
    let mut stack = vec![Task::Text(";"), Task::Visit(NodeRef::Internal(tree.root()))];
    while let Some(task) = stack.pop() {
        match task {
            Task::Text(s) => out.push_str(s),
            Task::Visit(NodeRef::Leaf(l)) => {
                write_label(&mut out, &tree.leaf_names[l]);
            }
            Task::Visit(NodeRef::Internal(j)) => {
                out.push('(');
                stack.push(Task::Text(")"));
                stack.push(Task::Visit(tree.right[j]));
                stack.push(Task::Text(","));
                stack.push(Task::Visit(tree.left[j]));
            }
        }
    }
    out
}

fn write_label(out: &mut String, label: &str) {
    let needs_quotes = label
        .chars()
        .any(|c| c.is_whitespace() || "(),;:[]'".contains(c));
    if needs_quotes {
        out.push('\'');
        for c in label.chars() {
            if c == '\'' {
                out.push('\'');
            }
            out.push(c);
        }
        out.push('\'');
    } else {
        out.push_str(label);
    }
}

/// SHA-256 of the canonical Newick serialization, hex-encoded. Identifies a
/// topology-plus-names for sidecar provenance.
pub fn tree_hash(tree: &PhyloTree) -> String {
    let digest = Sha256::digest(serialize_newick(tree).as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// Restrict the tree to a subset of its leaves, suppressing the internal
/// nodes left with a single child. At least two names must be kept; order
/// and duplicates in `keep` are irrelevant.
pub fn prune_to_leaves(tree: &PhyloTree, keep: &[String]) -> Result<PhyloTree, PhyloError> {
    let mut keep_leaf = vec![false; tree.n_leaves()];
    for name in keep {
        let l = tree
            .leaf_index(name)
            .ok_or_else(|| PhyloError::TaxonMismatch(format!("leaf {name:?} not in tree")))?;
        keep_leaf[l] = true;
    }
    if keep_leaf.iter().filter(|&&k| k).count() < 2 {
        return Err(PhyloError::TooFewLeaves);
    }

    let mut leaf_names = Vec::new();
    let mut new_leaf = vec![usize::MAX; tree.n_leaves()];
    for (l, name) in tree.leaf_names().iter().enumerate() {
        if keep_leaf[l] {
            new_leaf[l] = leaf_names.len();
            leaf_names.push(name.clone());
        }
    }

    // Reverse preorder puts children before parents, so each internal node
    // reduces to the surviving subtree of its children: nothing, a single
    // node (the suppressed case), or a fresh pair.
    let q = tree.q();
    let mut reduced: Vec<Option<NodeRef>> = vec![None; q];
    let mut pairs = Vec::new();
    for j in (0..q).rev() {
        let resolve = |child: NodeRef, reduced: &[Option<NodeRef>]| match child {
            NodeRef::Leaf(l) => keep_leaf[l].then_some(NodeRef::Leaf(new_leaf[l])),
            NodeRef::Internal(c) => reduced[c],
        };
        let left = resolve(tree.left[j], &reduced);
        let right = resolve(tree.right[j], &reduced);
        reduced[j] = match (left, right) {
            (Some(l), Some(r)) => {
                pairs.push((l, r));
                Some(NodeRef::Internal(pairs.len() - 1))
            }
            (one, None) => one,
            (None, one) => one,
        };
    }
    let root = reduced[tree.root()].expect("at least two kept leaves survive to the root");
    PhyloTree::from_parts(pairs, leaf_names, root)
}

/// Observed counts over taxa: `n` samples by `q+1` taxa.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    z: DMatrix<u64>,
    taxon_names: Vec<String>,
    sample_ids: Vec<String>,
}

impl CountMatrix {
    pub fn new(
        z: DMatrix<u64>,
        taxon_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self, PhyloError> {
        if z.ncols() != taxon_names.len() {
            return Err(PhyloError::Invalid(format!(
                "count matrix has {} columns but {} taxon names",
                z.ncols(),
                taxon_names.len()
            )));
        }
        if z.nrows() != sample_ids.len() {
            return Err(PhyloError::Invalid(format!(
                "count matrix has {} rows but {} sample ids",
                z.nrows(),
                sample_ids.len()
            )));
        }
        let mut seen = HashMap::new();
        for name in &taxon_names {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(PhyloError::DuplicateLeaf(name.clone()));
            }
        }
        Ok(CountMatrix {
            z,
            taxon_names,
            sample_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_taxa(&self) -> usize {
        self.z.ncols()
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.z
    }

    pub fn taxon_names(&self) -> &[String] {
        &self.taxon_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// Row sum `M_i`.
    pub fn sample_total(&self, i: usize) -> u64 {
        self.z.row(i).iter().sum()
    }
}

/// Per-node binomial data: clade totals `N` and left-subclade counts `y`,
/// both `n x q` in DFS node order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCounts {
    pub n_total: DMatrix<u64>,
    pub y_left: DMatrix<u64>,
    pub sample_ids: Vec<String>,
    pub tree_hash: String,
}

impl NodeCounts {
    pub fn n_samples(&self) -> usize {
        self.n_total.nrows()
    }

    pub fn q(&self) -> usize {
        self.n_total.ncols()
    }

    /// Check the structural invariants against the generating tree:
    /// `0 <= y <= N`, child totals match `y` and `N - y`, and the root total
    /// is positive for every retained sample.
    pub fn validate(&self, tree: &PhyloTree) -> Result<(), PhyloError> {
        let (n, q) = (self.n_total.nrows(), self.n_total.ncols());
        if q != tree.q() || self.y_left.nrows() != n || self.y_left.ncols() != q {
            return Err(PhyloError::Invalid("node count shapes do not match tree".into()));
        }
        if self.tree_hash != tree_hash(tree) {
            return Err(PhyloError::Invalid("node counts were built from a different tree".into()));
        }
        for i in 0..n {
            for j in 0..q {
                let (nj, yj) = (self.n_total[(i, j)], self.y_left[(i, j)]);
                if yj > nj {
                    return Err(PhyloError::Invalid(format!(
                        "y > N at sample {i}, node {j}: {yj} > {nj}"
                    )));
                }
                let check = |child: NodeRef, expect: u64, side: &str| -> Result<(), PhyloError> {
                    if let NodeRef::Internal(c) = child {
                        if self.n_total[(i, c)] != expect {
                            return Err(PhyloError::Invalid(format!(
                                "{side} child total mismatch at sample {i}, node {j}"
                            )));
                        }
                    }
                    Ok(())
                };
                check(tree.left_child(j), yj, "left")?;
                check(tree.right_child(j), nj - yj, "right")?;
            }
            if self.n_total[(i, tree.root())] == 0 {
                return Err(PhyloError::ZeroCountSample(self.sample_ids[i].clone()));
            }
        }
        Ok(())
    }
}

/// Aggregate leaf counts to per-node binomial data by one bottom-up pass per
/// sample. Taxa are matched to leaves by name; the sets must agree exactly.
/// Returns the node counts and the ids of any dropped zero-total samples.
pub fn leaf_to_node_counts(
    tree: &PhyloTree,
    counts: &CountMatrix,
    zero_rows: ZeroRowPolicy,
) -> Result<(NodeCounts, Vec<String>), PhyloError> {
    let q = tree.q();
    let n_leaves = tree.n_leaves();
    if counts.n_taxa() != n_leaves {
        return Err(PhyloError::TaxonMismatch(format!(
            "count matrix has {} taxa, tree has {} leaves",
            counts.n_taxa(),
            n_leaves
        )));
    }
    let col_by_name: HashMap<&str, usize> = counts
        .taxon_names
        .iter()
        .enumerate()
        .map(|(c, n)| (n.as_str(), c))
        .collect();
    let mut col_of_leaf = vec![0usize; n_leaves];
    for (l, name) in tree.leaf_names().iter().enumerate() {
        col_of_leaf[l] = *col_by_name
            .get(name.as_str())
            .ok_or_else(|| PhyloError::TaxonMismatch(format!("tree leaf {name:?} missing from count matrix")))?;
    }

    let mut kept_rows = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..counts.n_samples() {
        if counts.sample_total(i) == 0 {
            match zero_rows {
                ZeroRowPolicy::Drop => dropped.push(counts.sample_ids[i].clone()),
                ZeroRowPolicy::Error => {
                    return Err(PhyloError::ZeroCountSample(counts.sample_ids[i].clone()))
                }
            }
        } else {
            kept_rows.push(i);
        }
    }

    let n = kept_rows.len();
    let mut n_total = DMatrix::<u64>::zeros(n, q);
    let mut y_left = DMatrix::<u64>::zeros(n, q);
    for (row, &i) in kept_rows.iter().enumerate() {
        // Children always have larger preorder indices, so a reverse sweep
        // sees every child total before its parent needs it.
        let subtotal = |n_total: &DMatrix<u64>, child: NodeRef| -> u64 {
            match child {
                NodeRef::Leaf(l) => counts.z[(i, col_of_leaf[l])],
                NodeRef::Internal(c) => n_total[(row, c)],
            }
        };
        for j in (0..q).rev() {
            let left = subtotal(&n_total, tree.left_child(j));
            let right = subtotal(&n_total, tree.right_child(j));
            n_total[(row, j)] = left + right;
            y_left[(row, j)] = left;
        }
    }
    let sample_ids = kept_rows
        .iter()
        .map(|&i| counts.sample_ids[i].clone())
        .collect();
    Ok((
        NodeCounts {
            n_total,
            y_left,
            sample_ids,
            tree_hash: tree_hash(tree),
        },
        dropped,
    ))
}

/// Recover per-leaf counts from node data: the inverse of
/// [`leaf_to_node_counts`] on retained samples. Each leaf reads its parent's
/// `y` (left child) or `N - y` (right child).
pub fn node_to_leaf_counts(
    tree: &PhyloTree,
    nodes: &NodeCounts,
) -> Result<CountMatrix, PhyloError> {
    nodes.validate(tree)?;
    let n = nodes.n_samples();
    let n_leaves = tree.n_leaves();
    let mut z = DMatrix::<u64>::zeros(n, n_leaves);
    for l in 0..n_leaves {
        let j = tree.leaf_parent(l);
        let is_left = tree.left_child(j) == NodeRef::Leaf(l);
        for i in 0..n {
            z[(i, l)] = if is_left {
                nodes.y_left[(i, j)]
            } else {
                nodes.n_total[(i, j)] - nodes.y_left[(i, j)]
            };
        }
    }
    CountMatrix::new(z, tree.leaf_names().to_vec(), nodes.sample_ids.clone())
}

/// Empirical log-odds with a pseudocount:
/// `log((y + pc) / (N - y + pc))`, finite everywhere for `pc > 0`. Empty
/// clades (`N = 0`) map to 0.
pub fn node_log_odds(nodes: &NodeCounts, pseudocount: f64) -> Result<DMatrix<f64>, PhyloError> {
    if !(pseudocount > 0.0) {
        return Err(PhyloError::Invalid(format!(
            "pseudocount must be positive, got {pseudocount}"
        )));
    }
    let (n, q) = (nodes.n_samples(), nodes.q());
    let mut out = DMatrix::<f64>::zeros(n, q);
    for i in 0..n {
        for j in 0..q {
            let nn = nodes.n_total[(i, j)] as f64;
            let yy = nodes.y_left[(i, j)] as f64;
            out[(i, j)] = ((yy + pseudocount) / (nn - yy + pseudocount)).ln();
        }
    }
    Ok(out)
}

/// Edge-count distance between every pair of internal nodes. The internal
/// nodes of a rooted binary tree form a connected subtree, so paths never
/// leave the internal node set.
pub fn tree_graph_distance(tree: &PhyloTree) -> DMatrix<u32> {
    let q = tree.q();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); q];
    for j in 0..q {
        if let Some(p) = tree.parent(j) {
            adj[j].push(p);
            adj[p].push(j);
        }
    }
    let mut dist = DMatrix::<u32>::zeros(q, q);
    let mut queue = std::collections::VecDeque::new();
    for start in 0..q {
        let mut seen = vec![false; q];
        seen[start] = true;
        queue.push_back((start, 0u32));
        while let Some((node, d)) = queue.pop_front() {
            dist[(start, node)] = d;
            for &next in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back((next, d + 1));
                }
            }
        }
    }
    dist
}

/// Map a positive leaf composition to per-node left-branching probabilities:
/// `p_j` = (left sub-clade mass) / (clade mass). Scale-invariant in `theta`.
pub fn composition_to_branch_probs(
    tree: &PhyloTree,
    theta: &DVector<f64>,
) -> Result<DVector<f64>, PhyloError> {
    let q = tree.q();
    if theta.len() != q + 1 {
        return Err(PhyloError::Invalid(format!(
            "composition length {} does not match {} leaves",
            theta.len(),
            q + 1
        )));
    }
    if theta.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(PhyloError::Invalid(
            "composition entries must be strictly positive and finite".into(),
        ));
    }
    let mut mass = vec![0.0f64; q];
    let mut left_mass = vec![0.0f64; q];
    let side_mass = |mass: &[f64], child: NodeRef| match child {
        NodeRef::Leaf(l) => theta[l],
        NodeRef::Internal(c) => mass[c],
    };
    for j in (0..q).rev() {
        let lm = side_mass(&mass, tree.left_child(j));
        let rm = side_mass(&mass, tree.right_child(j));
        mass[j] = lm + rm;
        left_mass[j] = lm;
    }
    Ok(DVector::from_fn(q, |j, _| left_mass[j] / mass[j]))
}

/// Map per-node left-branching probabilities to the leaf composition (sums
/// to 1). Inverse of [`composition_to_branch_probs`] up to normalization.
pub fn branch_probs_to_composition(
    tree: &PhyloTree,
    p: &DVector<f64>,
) -> Result<DVector<f64>, PhyloError> {
    let q = tree.q();
    if p.len() != q {
        return Err(PhyloError::Invalid(format!(
            "branch probability length {} does not match {} internal nodes",
            p.len(),
            q
        )));
    }
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite()) {
        return Err(PhyloError::Invalid("branch probabilities must lie in [0, 1]".into()));
    }
    let mut node_mass = vec![0.0f64; q];
    node_mass[tree.root()] = 1.0;
    let mut theta = DVector::<f64>::zeros(q + 1);
    // Parents precede children in preorder, so a forward sweep is top-down.
    for j in 0..q {
        let w = node_mass[j];
        for (child, share) in [(tree.left_child(j), w * p[j]), (tree.right_child(j), w * (1.0 - p[j]))] {
            match child {
                NodeRef::Leaf(l) => theta[l] = share,
                NodeRef::Internal(c) => node_mass[c] = share,
            }
        }
    }
    Ok(theta)
}

/// Load a count matrix from delimited text. The header row names the taxa;
/// if its first field is `sample_id`, that column provides sample ids,
/// otherwise ids are `sample_1`, `sample_2`, ... in row order.
pub fn load_counts_delimited<R: Read>(reader: R, delimiter: u8) -> Result<CountMatrix, PhyloError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PhyloError::Csv(e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(PhyloError::Csv("empty header row".into()));
    }
    let has_id_col = headers.get(0) == Some("sample_id");
    let first_taxon = usize::from(has_id_col);
    let taxon_names: Vec<String> = headers.iter().skip(first_taxon).map(str::to_string).collect();
    if taxon_names.is_empty() {
        return Err(PhyloError::Csv("no taxon columns".into()));
    }
    let mut rows: Vec<u64> = Vec::new();
    let mut sample_ids = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| PhyloError::Csv(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(PhyloError::Csv(format!(
                "row {} has {} fields, expected {}",
                r + 1,
                record.len(),
                headers.len()
            )));
        }
        sample_ids.push(if has_id_col {
            record.get(0).unwrap_or("").to_string()
        } else {
            format!("sample_{}", r + 1)
        });
        for (c, field) in record.iter().enumerate().skip(first_taxon) {
            let value: u64 = field.trim().parse().map_err(|_| {
                PhyloError::Csv(format!(
                    "row {}, column {:?}: {:?} is not a nonnegative integer",
                    r + 1,
                    headers.get(c).unwrap_or(""),
                    field
                ))
            })?;
            rows.push(value);
        }
    }
    let n = sample_ids.len();
    let z = DMatrix::from_row_slice(n, taxon_names.len(), &rows);
    CountMatrix::new(z, taxon_names, sample_ids)
}

/// Load a count matrix from a file path, picking the delimiter from the
/// extension (`.tsv` means tab, anything else comma).
pub fn load_counts_file(path: &Path) -> Result<CountMatrix, PhyloError> {
    let delimiter = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) {
        b'\t'
    } else {
        b','
    };
    load_counts_delimited(std::fs::File::open(path)?, delimiter)
}

/// Write a count matrix with a `sample_id` column and taxon-name headers.
pub fn save_counts_delimited<W: Write>(
    counts: &CountMatrix,
    writer: W,
    delimiter: u8,
) -> Result<(), PhyloError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let mut header = vec!["sample_id".to_string()];
    header.extend(counts.taxon_names.iter().cloned());
    wtr.write_record(&header).map_err(|e| PhyloError::Csv(e.to_string()))?;
    for i in 0..counts.n_samples() {
        let mut record = vec![counts.sample_ids[i].clone()];
        record.extend((0..counts.n_taxa()).map(|c| counts.z[(i, c)].to_string()));
        wtr.write_record(&record).map_err(|e| PhyloError::Csv(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_counts_file(counts: &CountMatrix, path: &Path) -> Result<(), PhyloError> {
    let delimiter = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv")) {
        b'\t'
    } else {
        b','
    };
    save_counts_delimited(counts, std::fs::File::create(path)?, delimiter)
}

/// Sidecar metadata for a serialized [`NodeCounts`] bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeCountsSidecar {
    pub tree_hash: String,
    pub node_order: String,
    pub n_csv: String,
    pub y_csv: String,
    pub q: usize,
    pub n_samples: usize,
}

/// Write a node-count bundle: `{stem}.n.csv`, `{stem}.y.csv`, and
/// `{stem}.sidecar.json` under `dir`.
pub fn save_node_counts(nodes: &NodeCounts, dir: &Path, stem: &str) -> Result<(), PhyloError> {
    let write_matrix = |m: &DMatrix<u64>, path: &Path| -> Result<(), PhyloError> {
        let mut wtr = csv::Writer::from_writer(std::fs::File::create(path)?);
        let mut header = vec!["sample_id".to_string()];
        header.extend((0..m.ncols()).map(|j| format!("node_{j}")));
        wtr.write_record(&header).map_err(|e| PhyloError::Csv(e.to_string()))?;
        for i in 0..m.nrows() {
            let mut record = vec![nodes.sample_ids[i].clone()];
            record.extend((0..m.ncols()).map(|j| m[(i, j)].to_string()));
            wtr.write_record(&record).map_err(|e| PhyloError::Csv(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    };
    let n_csv = format!("{stem}.n.csv");
    let y_csv = format!("{stem}.y.csv");
    write_matrix(&nodes.n_total, &dir.join(&n_csv))?;
    write_matrix(&nodes.y_left, &dir.join(&y_csv))?;
    let sidecar = NodeCountsSidecar {
        tree_hash: nodes.tree_hash.clone(),
        node_order: "dfs-preorder".into(),
        n_csv,
        y_csv,
        q: nodes.q(),
        n_samples: nodes.n_samples(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| PhyloError::Sidecar(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.sidecar.json")), json)?;
    Ok(())
}

/// Read a node-count bundle written by [`save_node_counts`].
pub fn load_node_counts(dir: &Path, stem: &str) -> Result<NodeCounts, PhyloError> {
    let sidecar_path = dir.join(format!("{stem}.sidecar.json"));
    let sidecar: NodeCountsSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
        .map_err(|e| PhyloError::Sidecar(format!("{}: {e}", sidecar_path.display())))?;
    if sidecar.node_order != "dfs-preorder" {
        return Err(PhyloError::Sidecar(format!(
            "unsupported node order {:?}",
            sidecar.node_order
        )));
    }
    let read_matrix = |name: &str| -> Result<(DMatrix<u64>, Vec<String>), PhyloError> {
        let mut rdr = csv::Reader::from_reader(std::fs::File::open(dir.join(name))?);
        let width = rdr.headers().map_err(|e| PhyloError::Csv(e.to_string()))?.len();
        if width != sidecar.q + 1 {
            return Err(PhyloError::Sidecar(format!(
                "{name}: expected {} node columns, found {}",
                sidecar.q,
                width.saturating_sub(1)
            )));
        }
        let mut values = Vec::new();
        let mut ids = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| PhyloError::Csv(e.to_string()))?;
            ids.push(record.get(0).unwrap_or("").to_string());
            for field in record.iter().skip(1) {
                values.push(
                    field
                        .trim()
                        .parse::<u64>()
                        .map_err(|_| PhyloError::Csv(format!("{name}: bad count {field:?}")))?,
                );
            }
        }
        Ok((DMatrix::from_row_slice(ids.len(), sidecar.q, &values), ids))
    };
    let (n_total, ids_n) = read_matrix(&sidecar.n_csv)?;
    let (y_left, ids_y) = read_matrix(&sidecar.y_csv)?;
    if ids_n != ids_y {
        return Err(PhyloError::Sidecar("sample ids differ between N and y files".into()));
    }
    if n_total.nrows() != sidecar.n_samples {
        return Err(PhyloError::Sidecar(format!(
            "expected {} samples, found {}",
            sidecar.n_samples,
            n_total.nrows()
        )));
    }
    for i in 0..n_total.nrows() {
        for j in 0..n_total.ncols() {
            if y_left[(i, j)] > n_total[(i, j)] {
                return Err(PhyloError::Csv(format!("y > N at sample {i}, node {j}")));
            }
        }
    }
    Ok(NodeCounts {
        n_total,
        y_left,
        sample_ids: ids_n,
        tree_hash: sidecar.tree_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn counts_from_rows(rows: &[(&str, &[u64])], taxa: &[&str]) -> CountMatrix {
        let n = rows.len();
        let t = taxa.len();
        let mut z = DMatrix::<u64>::zeros(n, t);
        for (i, (_, vals)) in rows.iter().enumerate() {
            for (c, &v) in vals.iter().enumerate() {
                z[(i, c)] = v;
            }
        }
        CountMatrix::new(
            z,
            taxa.iter().map(|s| s.to_string()).collect(),
            rows.iter().map(|(id, _)| id.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_smallest_binary_tree() {
        let tree = parse_newick("((A,B),C);").unwrap();
        assert_eq!(tree.q(), 2);
        let mut names = tree.leaf_names().to_vec();
        names.sort();
        assert_eq!(names, ["A", "B", "C"]);
        // Root's left child is the (A,B) node.
        assert_eq!(tree.clade_leaf_names(tree.root()).len(), 3);
        let left_names: Vec<String> = tree
            .left_clade_leaves(tree.root())
            .into_iter()
            .map(|l| tree.leaf_names()[l].clone())
            .collect();
        assert_eq!(left_names, ["A", "B"]);
    }

    #[test]
    fn parse_rejects_degenerate_inputs() {
        assert!(parse_newick("(A);").is_err());
        assert!(matches!(parse_newick("A;"), Err(PhyloError::TooFewLeaves)));
        assert!(parse_newick("").is_err());
        assert!(parse_newick("((A,B),C)").is_err(), "missing semicolon");
        assert!(parse_newick("((A,B),C)); extra").is_err());
        assert!(matches!(
            parse_newick("((A,B),(C,A));"),
            Err(PhyloError::DuplicateLeaf(_))
        ));
    }

    #[test]
    fn parse_reports_error_position() {
        match parse_newick("((A,B),C;") {
            Err(PhyloError::Syntax { position, .. }) => assert_eq!(position, 8),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn parse_four_leaf_tree() {
        let tree = parse_newick("((A,B),(C,D));").unwrap();
        assert_eq!(tree.q(), 3);
        let left_names: Vec<String> = tree
            .left_clade_leaves(tree.root())
            .into_iter()
            .map(|l| tree.leaf_names()[l].clone())
            .collect();
        assert_eq!(left_names, ["A", "B"]);
    }

    #[test]
    fn parse_discards_lengths_labels_comments() {
        let tree = parse_newick("((A:0.1,B:0.2)anc:0.05,C:1e-3)root[a comment];").unwrap();
        assert_eq!(tree.q(), 2);
        let quoted = parse_newick("(('taxon one','it''s'),C);").unwrap();
        assert!(quoted.leaf_names().iter().any(|n| n == "taxon one"));
        assert!(quoted.leaf_names().iter().any(|n| n == "it's"));
    }

    #[test]
    fn multifurcation_policy() {
        assert!(matches!(
            parse_newick("(A,B,C,D);"),
            Err(PhyloError::NonBinary { arity: 4, .. })
        ));
        let (tree, warnings) =
            parse_newick_with("(A,B,C,D);", MultifurcationPolicy::LeftDeep).unwrap();
        assert_eq!(tree.q(), 3);
        assert_eq!(warnings.len(), 1);
        // Left-deep: ((A,B),C) then joined with D.
        let left_names: Vec<String> = tree
            .left_clade_leaves(tree.root())
            .into_iter()
            .map(|l| tree.leaf_names()[l].clone())
            .collect();
        assert_eq!(left_names, ["A", "B", "C"]);
    }

    #[test]
    fn serialize_round_trip() {
        for text in ["((A,B),C);", "((A,B),(C,D));", "(((X,Y),Z),(W,(U,V)));"] {
            let tree = parse_newick(text).unwrap();
            let out = serialize_newick(&tree);
            assert_eq!(out, text);
            assert_eq!(parse_newick(&out).unwrap(), tree);
        }
        let quoted = parse_newick("(('a b',C),D);").unwrap();
        let reparsed = parse_newick(&serialize_newick(&quoted)).unwrap();
        assert_eq!(reparsed, quoted);
    }

    #[test]
    fn node_counts_manual_example() {
        // ((A,B),C) with z = [2,3,5]: root (N=10, y=5), (A,B) node (N=5, y=2).
        let tree = parse_newick("((A,B),C);").unwrap();
        let counts = counts_from_rows(&[("s1", &[2, 3, 5])], &["A", "B", "C"]);
        let (nodes, dropped) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
        assert!(dropped.is_empty());
        assert_eq!(nodes.n_total[(0, 0)], 10);
        assert_eq!(nodes.y_left[(0, 0)], 5);
        assert_eq!(nodes.n_total[(0, 1)], 5);
        assert_eq!(nodes.y_left[(0, 1)], 2);
        nodes.validate(&tree).unwrap();
    }

    #[test]
    fn node_counts_name_matching_is_order_independent() {
        let tree = parse_newick("((A,B),C);").unwrap();
        // Columns deliberately shuffled relative to tree leaf order.
        let counts = counts_from_rows(&[("s1", &[5, 2, 3])], &["C", "A", "B"]);
        let (nodes, _) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
        assert_eq!(nodes.n_total[(0, 0)], 10);
        assert_eq!(nodes.y_left[(0, 0)], 5);
        assert_eq!(nodes.y_left[(0, 1)], 2);
    }

    #[test]
    fn node_counts_single_split() {
        let tree = parse_newick("(A,B);").unwrap();
        let counts = counts_from_rows(&[("s1", &[4, 6])], &["A", "B"]);
        let (nodes, _) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
        assert_eq!(nodes.n_total[(0, 0)], 10);
        assert_eq!(nodes.y_left[(0, 0)], 4);
    }

    #[test]
    fn zero_rows_dropped_or_rejected() {
        let tree = parse_newick("((A,B),C);").unwrap();
        let counts = counts_from_rows(&[("s1", &[2, 3, 5]), ("s2", &[0, 0, 0])], &["A", "B", "C"]);
        let (nodes, dropped) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
        assert_eq!(nodes.n_samples(), 1);
        assert_eq!(dropped, ["s2"]);
        assert!(matches!(
            leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Error),
            Err(PhyloError::ZeroCountSample(id)) if id == "s2"
        ));
    }

    #[test]
    fn unmatched_taxa_rejected() {
        let tree = parse_newick("((A,B),C);").unwrap();
        let counts = counts_from_rows(&[("s1", &[2, 3, 5])], &["A", "B", "X"]);
        assert!(matches!(
            leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop),
            Err(PhyloError::TaxonMismatch(_))
        ));
    }

    #[test]
    fn log_odds_examples() {
        let tree = parse_newick("(A,B);").unwrap();
        let make = |y: u64, n: u64| {
            let counts = counts_from_rows(&[("s", &[y, n - y])], &["A", "B"]);
            leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap().0
        };
        let lo = node_log_odds(&make(5, 10), 0.5).unwrap();
        assert_relative_eq!(lo[(0, 0)], 0.0, epsilon = 1e-15);
        let lo = node_log_odds(&make(0, 10), 0.5).unwrap();
        // log(0.5 / 10.5), frozen by hand.
        assert_relative_eq!(lo[(0, 0)], -3.044522437723423, epsilon = 1e-12);
        // Empty clade: N = 0 at an interior node of a 3-leaf tree.
        let tree3 = parse_newick("((A,B),C);").unwrap();
        let counts = counts_from_rows(&[("s", &[0, 0, 7])], &["A", "B", "C"]);
        let (nodes, _) = leaf_to_node_counts(&tree3, &counts, ZeroRowPolicy::Drop).unwrap();
        let lo = node_log_odds(&nodes, 0.5).unwrap();
        assert_relative_eq!(lo[(0, 1)], 0.0, epsilon = 1e-15);
        assert!(node_log_odds(&nodes, 0.0).is_err());
    }

    #[test]
    fn graph_distance_examples() {
        // ((A,B),(C,D)): preorder internals are root 0, (A,B) = 1, (C,D) = 2.
        let tree = parse_newick("((A,B),(C,D));").unwrap();
        let d = tree_graph_distance(&tree);
        assert_eq!(d[(0, 0)], 0);
        assert_eq!(d[(0, 1)], 1);
        assert_eq!(d[(1, 0)], 1);
        assert_eq!(d[(1, 2)], 2);
        assert_eq!(d[(2, 1)], 2);
    }

    #[test]
    fn composition_round_trip_manual() {
        let tree = parse_newick("((A,B),C);").unwrap();
        // Leaf order is preorder: A, B, C.
        let theta = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let p = composition_to_branch_probs(&tree, &theta).unwrap();
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.4, epsilon = 1e-15);
        let back = branch_probs_to_composition(&tree, &p).unwrap();
        for k in 0..3 {
            assert_relative_eq!(back[k], theta[k], epsilon = 1e-15);
        }
        assert!(composition_to_branch_probs(&tree, &DVector::from_vec(vec![0.2, 0.0, 0.8])).is_err());
        assert!(branch_probs_to_composition(&tree, &DVector::from_vec(vec![0.5, 1.5])).is_err());
    }

    /// Random binary tree via string joins, plus random counts; checks the
    /// bottom-up pass against brute-force clade enumeration and the
    /// composition maps against each other.
    #[test]
    fn aggregation_matches_brute_force_on_random_trees() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n_leaves in [2usize, 3, 5, 17, 64] {
            let mut parts: Vec<String> = (0..n_leaves).map(|k| format!("t{k}")).collect();
            while parts.len() > 1 {
                let a = rng.random_range(0..parts.len());
                let sa = parts.swap_remove(a);
                let b = rng.random_range(0..parts.len());
                let sb = parts.swap_remove(b);
                parts.push(format!("({sa},{sb})"));
            }
            let text = format!("{};", parts.pop().unwrap());
            let tree = parse_newick(&text).unwrap();
            assert_eq!(tree.q(), n_leaves - 1);
            assert_eq!(serialize_newick(&tree), text);

            let taxa: Vec<String> = tree.leaf_names().to_vec();
            let z: Vec<u64> = (0..n_leaves).map(|_| rng.random_range(0..50u64)).collect();
            let counts = CountMatrix::new(
                DMatrix::from_row_slice(1, n_leaves, &z),
                taxa,
                vec!["s".into()],
            )
            .unwrap();
            if counts.sample_total(0) == 0 {
                continue;
            }
            let (nodes, _) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
            nodes.validate(&tree).unwrap();
            for j in 0..tree.q() {
                let brute_n: u64 = tree.clade_leaves(j).iter().map(|&l| z[l]).sum();
                let brute_y: u64 = tree.left_clade_leaves(j).iter().map(|&l| z[l]).sum();
                assert_eq!(nodes.n_total[(0, j)], brute_n);
                assert_eq!(nodes.y_left[(0, j)], brute_y);
            }

            // Composition round trip on the same topology.
            let theta = DVector::from_fn(n_leaves, |k, _| 0.1 + z[k] as f64);
            let total: f64 = theta.iter().sum();
            let p = composition_to_branch_probs(&tree, &theta).unwrap();
            let back = branch_probs_to_composition(&tree, &p).unwrap();
            for k in 0..n_leaves {
                assert_relative_eq!(back[k], theta[k] / total, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn counts_csv_round_trip() {
        let counts = counts_from_rows(&[("s1", &[2, 3, 5]), ("s2", &[0, 1, 9])], &["A", "B", "C"]);
        let mut buf = Vec::new();
        save_counts_delimited(&counts, &mut buf, b',').unwrap();
        let loaded = load_counts_delimited(buf.as_slice(), b',').unwrap();
        assert_eq!(loaded, counts);
        // Without a sample_id column, ids are generated.
        let raw = "A,B,C\n2,3,5\n";
        let loaded = load_counts_delimited(raw.as_bytes(), b',').unwrap();
        assert_eq!(loaded.sample_ids(), ["sample_1"]);
        assert_eq!(loaded.counts()[(0, 2)], 5);
        // Bad values are reported, not panicked on.
        assert!(load_counts_delimited("A,B\n1,-2\n".as_bytes(), b',').is_err());
        assert!(load_counts_delimited("A,B\n1,x\n".as_bytes(), b',').is_err());
        assert!(load_counts_delimited("A,B\n1\n".as_bytes(), b',').is_err());
        assert!(load_counts_delimited("".as_bytes(), b',').is_err());
    }

    #[test]
    fn node_counts_bundle_round_trip() {
        let tree = parse_newick("((A,B),(C,D));").unwrap();
        let counts = counts_from_rows(&[("s1", &[1, 2, 3, 4]), ("s2", &[4, 0, 0, 1])], &["A", "B", "C", "D"]);
        let (nodes, _) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_node_counts(&nodes, dir.path(), "case").unwrap();
        let loaded = load_node_counts(dir.path(), "case").unwrap();
        assert_eq!(loaded, nodes);
        assert_eq!(loaded.tree_hash, tree_hash(&tree));
        loaded.validate(&tree).unwrap();
        // A different tree fails validation via the hash.
        let other = parse_newick("((A,C),(B,D));").unwrap();
        assert!(loaded.validate(&other).is_err());
    }

    #[test]
    fn tree_hash_distinguishes_topologies() {
        let a = tree_hash(&parse_newick("((A,B),C);").unwrap());
        let b = tree_hash(&parse_newick("((A,C),B);").unwrap());
        let a2 = tree_hash(&parse_newick(" ((A,B),C); ".trim()).unwrap());
        assert_ne!(a, b);
        assert_eq!(a, a2);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn prune_suppresses_unary_chains() {
        let tree = parse_newick("(((A,B),(C,D)),(E,F));").unwrap();
        let keep = |names: &[&str]| -> Vec<String> { names.iter().map(|s| s.to_string()).collect() };
        // Dropping B and the whole (C,D) clade collapses two levels.
        let pruned = prune_to_leaves(&tree, &keep(&["A", "E", "F"])).unwrap();
        assert_eq!(serialize_newick(&pruned), "(A,(E,F));");
        // Keeping one cherry keeps its shape.
        let cherry = prune_to_leaves(&tree, &keep(&["C", "D"])).unwrap();
        assert_eq!(serialize_newick(&cherry), "(C,D);");
        // Keeping everything is the identity.
        assert_eq!(prune_to_leaves(&tree, &keep(&["A", "B", "C", "D", "E", "F"])).unwrap(), tree);
        assert!(matches!(
            prune_to_leaves(&tree, &keep(&["A"])),
            Err(PhyloError::TooFewLeaves)
        ));
        assert!(matches!(
            prune_to_leaves(&tree, &keep(&["A", "Z"])),
            Err(PhyloError::TaxonMismatch(_))
        ));
    }

    #[test]
    fn leaf_node_leaf_round_trip() {
        let tree = parse_newick("(((A,B),C),(D,E));").unwrap();
        let counts = counts_from_rows(
            &[("s1", &[3, 0, 7, 2, 9]), ("s2", &[0, 1, 0, 0, 5])],
            &["A", "B", "C", "D", "E"],
        );
        let (nodes, _) = leaf_to_node_counts(&tree, &counts, ZeroRowPolicy::Drop).unwrap();
        let back = node_to_leaf_counts(&tree, &nodes).unwrap();
        assert_eq!(back.counts(), counts.counts());
        assert_eq!(back.sample_ids(), counts.sample_ids());
        // Column order follows the tree's leaf order, not the input header.
        assert_eq!(back.taxon_names(), tree.leaf_names());
    }
}
