//! Aggregating tree: a trie over the codes whose nodes carry the cross-term
//! `ε = c_m(p_m)ᵀ Σ_{i<m} c_i(p_i)`, so a query's distance to a node follows from its
//! parent's distance with one table lookup.
//!
//! Chains that end in a single full code are folded into a leaf that keeps the
//! remaining `(code, ε)` steps. Internal chains are never folded.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::binio::{put_u32, put_u64, ByteReader};
use crate::codebook::{
    hash_hex, rank_neighbors, step_epsilon, AdcTable, Codebook, CodebookHash, CrossProductTable, EncodedDataset,
    Neighbor,
};
use crate::{Error, Result};

const TREE_MAGIC: &[u8; 4] = b"HCLT";
const TREE_VERSION: u32 = 1;
const KIND_INTERNAL: u8 = 0;
const KIND_LEAF: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    /// Children occupy `first_child..first_child + child_count` in the arena.
    Internal { first_child: u32, child_count: u32 },
    /// Remaining steps in `suffix[suffix_start..][..suffix_len]`, ids in `ids[ids_start..][..id_count]`.
    Leaf {
        suffix_start: u32,
        suffix_len: u32,
        ids_start: u32,
        id_count: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    /// Code of this node within dictionary `depth - 1` (unused for the root).
    pub code: u16,
    pub epsilon: f32,
    /// Number of code parts fixed by the path to this node.
    pub depth: u16,
    /// Rank in a preorder walk; orders nodes of equal depth lexicographically by path.
    pub preorder: u32,
    pub kind: NodeKind,
}

/// Nodes are stored breadth-first with siblings contiguous and ordered by code.
/// Node 0 is the root, which is always internal.
#[derive(Debug, Clone, PartialEq)]
pub struct ATree {
    m: usize,
    k: usize,
    nodes: Vec<Node>,
    suffix: Vec<(u16, f32)>,
    ids: Vec<u64>,
    leaf_count: usize,
    codebook_hash: CodebookHash,
}

/// A leaf with its full code and the ε of every step along the path.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPath<'a> {
    pub node: usize,
    pub code: Vec<u16>,
    pub epsilons: Vec<f32>,
    pub ids: &'a [u64],
}

impl ATree {
    pub fn num_dicts(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// All nodes including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Internal nodes other than the root.
    pub fn internal_count(&self) -> usize {
        self.nodes.len() - self.leaf_count - 1
    }

    /// Number of indexed vectors.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn codebook_hash(&self) -> &CodebookHash {
        &self.codebook_hash
    }

    pub fn children(&self, node: usize) -> std::ops::Range<usize> {
        match self.nodes[node].kind {
            NodeKind::Internal {
                first_child,
                child_count,
            } => first_child as usize..(first_child + child_count) as usize,
            NodeKind::Leaf { .. } => 0..0,
        }
    }

    /// Suffix steps and ids of a leaf; empty slices for internal nodes.
    pub fn leaf_payload(&self, node: usize) -> (&[(u16, f32)], &[u64]) {
        match self.nodes[node].kind {
            NodeKind::Leaf {
                suffix_start,
                suffix_len,
                ids_start,
                id_count,
            } => (
                &self.suffix[suffix_start as usize..(suffix_start + suffix_len) as usize],
                &self.ids[ids_start as usize..(ids_start + id_count) as usize],
            ),
            NodeKind::Internal { .. } => (&[], &[]),
        }
    }

    /// Every leaf with its reconstructed path, in preorder.
    pub fn leaf_paths(&self) -> Vec<LeafPath<'_>> {
        let mut out = Vec::with_capacity(self.leaf_count);
        let mut stack: Vec<(usize, Vec<u16>, Vec<f32>)> = vec![(0, Vec::new(), Vec::new())];
        while let Some((node, code, eps)) = stack.pop() {
            match self.nodes[node].kind {
                NodeKind::Internal { .. } => {
                    for c in self.children(node).rev() {
                        let n = &self.nodes[c];
                        let mut code = code.clone();
                        let mut eps = eps.clone();
                        code.push(n.code);
                        eps.push(n.epsilon);
                        stack.push((c, code, eps));
                    }
                }
                NodeKind::Leaf { .. } => {
                    let (suffix, ids) = self.leaf_payload(node);
                    let mut code = code;
                    let mut eps = eps;
                    for &(c, e) in suffix {
                        code.push(c);
                        eps.push(e);
                    }
                    out.push(LeafPath {
                        node,
                        code,
                        epsilons: eps,
                        ids,
                    });
                }
            }
        }
        out
    }

    /// The code matrix recovered from the leaves, one row per id, in leaf order.
    pub fn decompress(&self) -> Result<EncodedDataset> {
        let mut codes = Vec::with_capacity(self.ids.len() * self.m);
        let mut ids = Vec::with_capacity(self.ids.len());
        for leaf in self.leaf_paths() {
            for &id in leaf.ids {
                codes.extend_from_slice(&leaf.code);
                ids.push(id);
            }
        }
        Ok(EncodedDataset::new(self.m, self.k, codes)?
            .with_ids(ids)?
            .with_codebook_hash(Some(self.codebook_hash)))
    }

    pub fn check_codebook(&self, codebook: &Codebook) -> Result<()> {
        let actual = codebook.content_hash();
        if actual != self.codebook_hash {
            return Err(Error::CodebookMismatch(format!(
                "tree was built for codebook {} but {} was supplied",
                hash_hex(&self.codebook_hash),
                hash_hex(&actual)
            )));
        }
        Ok(())
    }
}

/// Builds the tree over `encoded`, tagging it with the codebook's hash.
pub fn build_atree(encoded: &EncodedDataset, codebook: &Codebook, cross: &CrossProductTable) -> Result<ATree> {
    encoded.check_codebook(codebook)?;
    if cross.num_dicts() != codebook.num_dicts() || cross.num_codewords() != codebook.num_codewords() {
        return Err(Error::CodebookMismatch("cross-product table built for another codebook".into()));
    }
    let (m, k) = (encoded.num_dicts(), encoded.num_codewords());
    if m > u16::MAX as usize {
        return Err(Error::invalid("too many dictionaries for a tree"));
    }
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by(|&a, &b| encoded.code(a).cmp(encoded.code(b)).then(encoded.id(a).cmp(&encoded.id(b))));
    let mut tree = ATree {
        m,
        k,
        nodes: vec![Node {
            code: 0,
            epsilon: 0.0,
            depth: 0,
            preorder: 0,
            kind: NodeKind::Internal {
                first_child: 1,
                child_count: 0,
            },
        }],
        suffix: Vec::new(),
        ids: Vec::new(),
        leaf_count: 0,
        codebook_hash: codebook.content_hash(),
    };

    // Breadth-first: each queued internal node owns a contiguous run of `order`.
    let mut queue = std::collections::VecDeque::from([(0usize, 0usize, order.len())]);
    while let Some((node, lo, hi)) = queue.pop_front() {
        let depth = tree.nodes[node].depth as usize;
        let first_child = tree.nodes.len();
        let mut start = lo;
        while start < hi {
            let c = encoded.code(order[start])[depth];
            let mut end = start + 1;
            while end < hi && encoded.code(order[end])[depth] == c {
                end += 1;
            }
            let path = encoded.code(order[start]);
            let child = Node {
                code: c,
                epsilon: step_epsilon(cross, &path[..depth], c),
                depth: (depth + 1) as u16,
                preorder: 0,
                kind: NodeKind::Internal {
                    first_child: 0,
                    child_count: 0,
                },
            };
            let idx = tree.nodes.len();
            tree.nodes.push(child);
            // Sorted rows: the group holds one distinct code iff its ends agree.
            if encoded.code(order[start]) == encoded.code(order[end - 1]) {
                let suffix_start = tree.suffix.len() as u32;
                for part in depth + 1..m {
                    let code = path[part];
                    tree.suffix.push((code, step_epsilon(cross, &path[..part], code)));
                }
                let ids_start = tree.ids.len() as u32;
                tree.ids.extend(order[start..end].iter().map(|&i| encoded.id(i)));
                tree.nodes[idx].kind = NodeKind::Leaf {
                    suffix_start,
                    suffix_len: (m - depth - 1) as u32,
                    ids_start,
                    id_count: (end - start) as u32,
                };
                tree.leaf_count += 1;
            } else {
                queue.push_back((idx, start, end));
            }
            start = end;
        }
        tree.nodes[node].kind = NodeKind::Internal {
            first_child: first_child as u32,
            child_count: (tree.nodes.len() - first_child) as u32,
        };
    }
    assign_preorder(&mut tree);
    Ok(tree)
}

fn assign_preorder(tree: &mut ATree) {
    let mut stack = vec![0usize];
    let mut next = 0u32;
    while let Some(node) = stack.pop() {
        tree.nodes[node].preorder = next;
        next += 1;
        stack.extend(tree.children(node).rev());
    }
}

/// `‖q − T‖²` for a node whose parent reconstruction `T'` has `‖q − T'‖² = parent_dist`:
/// `parent_dist + table[m][code] − ‖q‖² + 2ε`, with the first layer reading the
/// table entry directly. One table lookup.
#[inline]
pub fn node_distance(parent_dist: f64, table: &AdcTable, layer: usize, code: u16, epsilon: f32) -> f64 {
    table.extend(parent_dist, layer, code, epsilon)
}

/// Per-layer candidate budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Budgets {
    /// `L_i = ceil(l0 · ls^i)` for layers `i = 1..=M`.
    Geometric { l0: usize, ls: f64 },
    /// One budget per layer.
    Fixed(Vec<usize>),
    /// No pruning.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub budgets: Budgets,
    /// Number of results.
    pub r: usize,
}

impl SearchParams {
    pub fn geometric(l0: usize, ls: f64, r: usize) -> Self {
        Self {
            budgets: Budgets::Geometric { l0, ls },
            r,
        }
    }

    pub fn unbounded(r: usize) -> Self {
        Self {
            budgets: Budgets::Unbounded,
            r,
        }
    }

    /// Budget for each of the `m` layers.
    pub fn layer_budgets(&self, m: usize) -> Result<Vec<usize>> {
        if self.r == 0 {
            return Err(Error::invalid("result size R must be at least 1"));
        }
        let budgets = match &self.budgets {
            Budgets::Unbounded => vec![usize::MAX; m],
            Budgets::Fixed(b) => {
                if b.len() != m {
                    return Err(Error::invalid(format!("{} layer budgets given for {m} layers", b.len())));
                }
                b.clone()
            }
            Budgets::Geometric { l0, ls } => {
                if !(ls.is_finite() && *ls > 0.0) {
                    return Err(Error::invalid(format!("L_s must be positive and finite (got {ls})")));
                }
                (1..=m)
                    .map(|i| {
                        let v = (*l0 as f64 * ls.powi(i as i32)).ceil();
                        if v >= usize::MAX as f64 {
                            usize::MAX
                        } else {
                            v as usize
                        }
                    })
                    .collect()
            }
        };
        if budgets.contains(&0) {
            return Err(Error::invalid(format!("layer budgets must be at least 1 (got {budgets:?})")));
        }
        Ok(budgets)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Tree nodes whose distance was computed (steps inside folded leaf suffixes excluded).
    pub nodes_visited: usize,
    /// Candidate list size after truncation at each layer.
    pub layer_sizes: Vec<usize>,
    pub table_secs: f64,
    pub traversal_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutput {
    pub neighbors: Vec<Neighbor>,
    pub stats: SearchStats,
}

#[derive(Clone, Copy)]
struct Candidate {
    dist: f64,
    preorder: u32,
    node: u32,
}

fn cand_cmp(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.dist.total_cmp(&b.dist).then(a.preorder.cmp(&b.preorder))
}

/// Budgeted layer-by-layer search. Checks the codebook hash first.
pub fn atree_search(tree: &ATree, codebook: &Codebook, q: &[f32], params: &SearchParams) -> Result<SearchOutput> {
    tree.check_codebook(codebook)?;
    let budgets = params.layer_budgets(tree.m)?;
    let t0 = Instant::now();
    let table = AdcTable::new(codebook, q)?;
    let table_secs = t0.elapsed().as_secs_f64();
    let mut out = search_with_table(tree, &table, &budgets, params.r);
    out.stats.table_secs = table_secs;
    Ok(out)
}

/// Search with a prebuilt table and per-layer budgets. The caller guarantees the
/// table was built from the tree's codebook.
pub fn search_with_table(tree: &ATree, table: &AdcTable, budgets: &[usize], r: usize) -> SearchOutput {
    let t0 = Instant::now();
    let mut stats = SearchStats::default();
    let mut current = vec![Candidate {
        dist: table.q_norm_sq() as f64,
        preorder: 0,
        node: 0,
    }];
    let mut next = Vec::new();
    for (layer, &budget) in budgets.iter().enumerate().take(tree.m) {
        next.clear();
        for cand in &current {
            let node = &tree.nodes[cand.node as usize];
            match node.kind {
                NodeKind::Internal { .. } => {
                    for c in tree.children(cand.node as usize) {
                        let child = &tree.nodes[c];
                        next.push(Candidate {
                            dist: node_distance(cand.dist, table, layer, child.code, child.epsilon),
                            preorder: child.preorder,
                            node: c as u32,
                        });
                    }
                    stats.nodes_visited += tree.children(cand.node as usize).len();
                }
                NodeKind::Leaf { suffix_start, .. } => {
                    let step = layer - node.depth as usize;
                    let (code, eps) = tree.suffix[suffix_start as usize + step];
                    next.push(Candidate {
                        dist: node_distance(cand.dist, table, layer, code, eps),
                        ..*cand
                    });
                }
            }
        }
        if next.len() > budget {
            next.select_nth_unstable_by(budget - 1, cand_cmp);
            next.truncate(budget);
        }
        stats.layer_sizes.push(next.len());
        std::mem::swap(&mut current, &mut next);
    }
    let hits = if tree.is_empty() {
        Vec::new()
    } else {
        current
            .iter()
            .flat_map(|c| {
                let (_, ids) = tree.leaf_payload(c.node as usize);
                ids.iter().map(move |&id| (c.dist, id))
            })
            .collect()
    };
    let neighbors = rank_neighbors(hits, r);
    stats.traversal_secs = t0.elapsed().as_secs_f64();
    SearchOutput { neighbors, stats }
}

impl ATree {
    /// Preorder stream: per node `kind u8, code u16, ε f32`, then `child_count u32`
    /// for internal nodes or `suffix_len u32, (u16, f32)*, id_count u64, u64*` for leaves.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TREE_MAGIC)?;
        put_u32(w, TREE_VERSION)?;
        w.write_all(&self.codebook_hash)?;
        for v in [
            self.ids.len(),
            self.nodes.len(),
            self.leaf_count,
            self.internal_count(),
            self.m,
            self.k,
        ] {
            put_u64(w, v as u64)?;
        }
        let mut buf = Vec::new();
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            let n = &self.nodes[node];
            buf.clear();
            match n.kind {
                NodeKind::Internal { child_count, .. } => {
                    buf.push(KIND_INTERNAL);
                    buf.extend_from_slice(&n.code.to_le_bytes());
                    buf.extend_from_slice(&n.epsilon.to_le_bytes());
                    buf.extend_from_slice(&child_count.to_le_bytes());
                    stack.extend(self.children(node).rev());
                }
                NodeKind::Leaf { .. } => {
                    let (suffix, ids) = self.leaf_payload(node);
                    buf.push(KIND_LEAF);
                    buf.extend_from_slice(&n.code.to_le_bytes());
                    buf.extend_from_slice(&n.epsilon.to_le_bytes());
                    buf.extend_from_slice(&(suffix.len() as u32).to_le_bytes());
                    for &(c, e) in suffix {
                        buf.extend_from_slice(&c.to_le_bytes());
                        buf.extend_from_slice(&e.to_le_bytes());
                    }
                    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
                    for id in ids {
                        buf.extend_from_slice(&id.to_le_bytes());
                    }
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.read_magic(TREE_MAGIC)?;
        let version = r.u32("version")?;
        if version != TREE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: None,
                expected: TREE_VERSION,
                found: version,
            });
        }
        let mut codebook_hash = [0u8; 32];
        r.read_exact(&mut codebook_hash, "codebook hash")?;
        let counts_at = r.offset();
        let mut counts = [0usize; 6];
        for c in &mut counts {
            *c = r.u64("counts")? as usize;
        }
        let [n_ids, node_count, leaf_count, internal_count, m, k] = counts;
        if m == 0 || m > u16::MAX as usize || k == 0 || k > crate::codebook::MAX_K || node_count != leaf_count + internal_count + 1 {
            return Err(Error::format(counts_at, format!(
                "inconsistent tree header: nodes={node_count}, leaves={leaf_count}, internal={internal_count}, M={m}, K={k}"
            )));
        }

        // Parse the preorder stream into per-node records, then lay them out breadth-first.
        struct Parsed {
            code: u16,
            epsilon: f32,
            depth: u16,
            children: Vec<usize>,
            suffix: Vec<(u16, f32)>,
            ids: Vec<u64>,
            leaf: bool,
        }
        let mut parsed: Vec<Parsed> = Vec::with_capacity(node_count.min(1 << 24));
        // (node, children still to read)
        let mut open: Vec<(usize, usize)> = Vec::new();
        let mut total_ids = 0usize;
        loop {
            let at = r.offset();
            if parsed.len() == node_count {
                break;
            }
            let kind = r.u8("node kind")?;
            let code = r.u16("node code")?;
            let epsilon = r.f32("node epsilon")?;
            if !epsilon.is_finite() || code as usize >= k {
                return Err(Error::format(at, "invalid node code or epsilon"));
            }
            let depth = match open.last() {
                Some(&(p, _)) => parsed[p].depth + 1,
                None if parsed.is_empty() => 0,
                None => return Err(Error::format(at, "node outside the tree")),
            };
            if depth as usize > m {
                return Err(Error::format(at, "tree deeper than M"));
            }
            let idx = parsed.len();
            if let Some((p, remaining)) = open.last_mut() {
                let siblings = &parsed[*p].children;
                if let Some(&prev) = siblings.last() {
                    if parsed[prev].code >= code {
                        return Err(Error::format(at, "children not in increasing code order"));
                    }
                }
                parsed[*p].children.push(idx);
                *remaining -= 1;
            }
            let mut node = Parsed {
                code,
                epsilon,
                depth,
                children: Vec::new(),
                suffix: Vec::new(),
                ids: Vec::new(),
                leaf: false,
            };
            match kind {
                KIND_INTERNAL => {
                    let count = r.u32("child count")? as usize;
                    if count == 0 && depth != 0 {
                        return Err(Error::format(at, "internal node without children"));
                    }
                    parsed.push(node);
                    if count > 0 {
                        open.push((idx, count));
                    }
                }
                KIND_LEAF if depth > 0 => {
                    let len = r.u32("suffix length")? as usize;
                    if depth as usize + len != m {
                        return Err(Error::format(at, "leaf suffix does not reach depth M"));
                    }
                    for _ in 0..len {
                        let c = r.u16("suffix code")?;
                        let e = r.f32("suffix epsilon")?;
                        if c as usize >= k || !e.is_finite() {
                            return Err(Error::format(at, "invalid suffix step"));
                        }
                        node.suffix.push((c, e));
                    }
                    let count = r.u64("id count")? as usize;
                    if count == 0 || total_ids + count > n_ids {
                        return Err(Error::format(at, "leaf id count inconsistent with header"));
                    }
                    for _ in 0..count {
                        node.ids.push(r.u64("ids")?);
                    }
                    total_ids += count;
                    node.leaf = true;
                    parsed.push(node);
                }
                _ => return Err(Error::format(at, format!("invalid node kind {kind}"))),
            }
            while let Some(&(_, 0)) = open.last() {
                open.pop();
            }
            if open.is_empty() && parsed.len() < node_count {
                return Err(Error::format(r.offset(), "node stream ended before the header count"));
            }
        }
        if !open.is_empty() || total_ids != n_ids || parsed.iter().filter(|p| p.leaf).count() != leaf_count {
            return Err(Error::format(r.offset(), "node stream disagrees with the header counts"));
        }
        r.expect_eof()?;

        let mut tree = ATree {
            m,
            k,
            nodes: Vec::with_capacity(node_count),
            suffix: Vec::new(),
            ids: Vec::with_capacity(n_ids),
            leaf_count,
            codebook_hash,
        };
        let mut bfs = std::collections::VecDeque::from([0usize]);
        let mut placed = 1usize;
        while let Some(p) = bfs.pop_front() {
            let rec = &parsed[p];
            let kind = if rec.leaf {
                let k = NodeKind::Leaf {
                    suffix_start: tree.suffix.len() as u32,
                    suffix_len: rec.suffix.len() as u32,
                    ids_start: tree.ids.len() as u32,
                    id_count: rec.ids.len() as u32,
                };
                tree.suffix.extend_from_slice(&rec.suffix);
                tree.ids.extend_from_slice(&rec.ids);
                k
            } else {
                let k = NodeKind::Internal {
                    first_child: placed as u32,
                    child_count: rec.children.len() as u32,
                };
                bfs.extend(rec.children.iter().copied());
                placed += rec.children.len();
                k
            };
            tree.nodes.push(Node {
                code: rec.code,
                epsilon: rec.epsilon,
                depth: rec.depth,
                preorder: p as u32,
                kind,
            });
        }
        Ok(tree)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| e.with_path(path))
    }
}

pub fn serialize_atree(tree: &ATree, path: impl AsRef<Path>) -> Result<()> {
    tree.save(path)
}

pub fn deserialize_atree(path: impl AsRef<Path>) -> Result<ATree> {
    ATree::load(path)
}
