//! Type inventories, annotated instances, and weighted type graphs.
//!
//! A hierarchy over the type inventory can come from an explicit taxonomy
//! (child/parent edge list) or be mined from the dataset itself by
//! counting which types are annotated together: raw co-occurrence counts
//! or positive PMI. All derivations produce the same [`WeightedTypeGraph`]
//! shape, which the embedding trainer consumes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error("unknown type id {0}")]
    UnknownTypeId(u32),
    #[error("unknown type name '{0}'")]
    UnknownTypeName(String),
    #[error("duplicate type name '{0}'")]
    DuplicateTypeName(String),
    #[error("self-loop on '{0}'")]
    SelfLoop(String),
    #[error("duplicate edge {0}-{1}")]
    DuplicateEdge(u32, u32),
    #[error("edge weight must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("node {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: u32, num_nodes: u32 },
    #[error("cycle detected through node {0}")]
    CycleDetected(u32),
    #[error("node count mismatch: {0} vs {1}")]
    NodeCountMismatch(u32, u32),
    #[error("no instances")]
    EmptyInstances,
    #[error("empty inventory")]
    EmptyInventory,
    #[error("invalid mention span [{start}, {end}) for {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("instance has no gold types")]
    EmptyGold,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// The three-tier label partition of the inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Granularity {
    Coarse,
    Fine,
    Ultra,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Coarse, Granularity::Fine, Granularity::Ultra];
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::Coarse => write!(f, "coarse"),
            Granularity::Fine => write!(f, "fine"),
            Granularity::Ultra => write!(f, "ultra"),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(Granularity::Coarse),
            "fine" => Ok(Granularity::Fine),
            "ultra" => Ok(Granularity::Ultra),
            other => Err(format!("unknown granularity '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeEntry {
    pub name: String,
    pub granularity: Granularity,
}

/// The full set of candidate type labels, with dense ids 0..len-1 given by
/// entry order.
#[derive(Debug, Clone)]
pub struct TypeInventory {
    entries: Vec<TypeEntry>,
    by_name: BTreeMap<String, u32>,
}

impl TypeInventory {
    pub fn new(entries: Vec<TypeEntry>) -> Result<Self, HierarchyError> {
        if entries.is_empty() {
            return Err(HierarchyError::EmptyInventory);
        }
        let mut by_name = BTreeMap::new();
        for (id, entry) in entries.iter().enumerate() {
            if by_name.insert(entry.name.clone(), id as u32).is_some() {
                return Err(HierarchyError::DuplicateTypeName(entry.name.clone()));
            }
        }
        Ok(Self { entries, by_name })
    }

    pub fn len(&self) -> u32 {
        self.entries.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name_of(&self, id: u32) -> Result<&str, HierarchyError> {
        self.entries
            .get(id as usize)
            .map(|e| e.name.as_str())
            .ok_or(HierarchyError::UnknownTypeId(id))
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn granularity_of(&self, id: u32) -> Result<Granularity, HierarchyError> {
        self.entries
            .get(id as usize)
            .map(|e| e.granularity)
            .ok_or(HierarchyError::UnknownTypeId(id))
    }

    pub fn ids_with(&self, granularity: Granularity) -> Vec<u32> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.granularity == granularity)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// One "name granularity" line per type, in id order.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for entry in &self.entries {
            writeln!(w, "{} {}", entry.name, entry.granularity)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, HierarchyError> {
        let mut entries = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| HierarchyError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (name, gran) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(g), None) => (n, g),
                _ => {
                    return Err(HierarchyError::Parse {
                        line: lineno + 1,
                        message: "expected 'name granularity'".into(),
                    })
                }
            };
            let granularity = gran.parse().map_err(|e: String| HierarchyError::Parse {
                line: lineno + 1,
                message: e,
            })?;
            entries.push(TypeEntry { name: name.to_string(), granularity });
        }
        Self::new(entries)
    }
}

/// A mention span inside a tokenized context sentence with its gold types.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    context_tokens: Vec<String>,
    mention_start: usize,
    mention_end: usize,
    gold_types: Vec<u32>,
}

impl AnnotatedInstance {
    pub fn new(
        context_tokens: Vec<String>,
        mention_start: usize,
        mention_end: usize,
        gold_types: Vec<u32>,
        num_types: u32,
    ) -> Result<Self, HierarchyError> {
        if !(mention_start < mention_end && mention_end <= context_tokens.len()) {
            return Err(HierarchyError::InvalidSpan {
                start: mention_start,
                end: mention_end,
                len: context_tokens.len(),
            });
        }
        if gold_types.is_empty() {
            return Err(HierarchyError::EmptyGold);
        }
        let mut gold = gold_types;
        gold.sort_unstable();
        gold.dedup();
        if let Some(&bad) = gold.iter().find(|&&t| t >= num_types) {
            return Err(HierarchyError::UnknownTypeId(bad));
        }
        Ok(Self { context_tokens, mention_start, mention_end, gold_types: gold })
    }

    pub fn context_tokens(&self) -> &[String] {
        &self.context_tokens
    }

    pub fn mention_span(&self) -> (usize, usize) {
        (self.mention_start, self.mention_end)
    }

    pub fn gold_types(&self) -> &[u32] {
        &self.gold_types
    }

    pub fn gold_with(&self, inventory: &TypeInventory, granularity: Granularity) -> Vec<u32> {
        self.gold_types
            .iter()
            .copied()
            .filter(|&t| inventory.granularity_of(t) == Ok(granularity))
            .collect()
    }
}

/// Undirected weighted graph over type ids.
///
/// Each unordered pair appears at most once; the stored orientation is the
/// insertion orientation, which [`transitive_closure`] interprets as
/// child -> parent for taxonomy graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTypeGraph {
    num_nodes: u32,
    edges: BTreeMap<(u32, u32), f64>,
}

impl WeightedTypeGraph {
    pub fn new(num_nodes: u32) -> Self {
        Self { num_nodes, edges: BTreeMap::new() }
    }

    pub fn num_nodes(&self) -> u32 {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    fn check_pair(&self, a: u32, b: u32) -> Result<(), HierarchyError> {
        for node in [a, b] {
            if node >= self.num_nodes {
                return Err(HierarchyError::NodeOutOfRange { node, num_nodes: self.num_nodes });
            }
        }
        Ok(())
    }

    /// Inserts an edge, keeping the given orientation. Errors on
    /// self-loops, repeated pairs (in either orientation) and non-positive
    /// weights.
    pub fn add_edge(&mut self, a: u32, b: u32, weight: f64) -> Result<(), HierarchyError> {
        self.check_pair(a, b)?;
        if a == b {
            return Err(HierarchyError::SelfLoop(a.to_string()));
        }
        if weight <= 0.0 || !weight.is_finite() {
            return Err(HierarchyError::NonPositiveWeight(weight));
        }
        if self.edges.contains_key(&(a, b)) || self.edges.contains_key(&(b, a)) {
            return Err(HierarchyError::DuplicateEdge(a, b));
        }
        self.edges.insert((a, b), weight);
        Ok(())
    }

    /// Weight of the unordered pair {a, b}, if present.
    pub fn weight(&self, a: u32, b: u32) -> Option<f64> {
        self.edges.get(&(a, b)).or_else(|| self.edges.get(&(b, a))).copied()
    }

    /// Combines `weight` into the pair {a, b}: inserted if absent,
    /// otherwise merged with the existing weight via `combine`.
    fn upsert(&mut self, a: u32, b: u32, weight: f64, combine: impl Fn(f64, f64) -> f64) {
        if let Some(w) = self.edges.get_mut(&(a, b)) {
            *w = combine(*w, weight);
        } else if let Some(w) = self.edges.get_mut(&(b, a)) {
            *w = combine(*w, weight);
        } else {
            self.edges.insert((a, b), weight);
        }
    }

    /// Edges in deterministic (sorted, oriented-key) order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    /// Neighbor lists irrespective of edge orientation.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.num_nodes as usize];
        for &(a, b) in self.edges.keys() {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Text export: a `nodes=<n>` header then one "a b weight" line per
    /// edge with round-trip-exact floats.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "nodes={}", self.num_nodes)?;
        for (a, b, weight) in self.edges() {
            writeln!(w, "{a} {b} {weight:.16e}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, HierarchyError> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(line))) => line,
            Some((n, Err(e))) => {
                return Err(HierarchyError::Parse { line: n + 1, message: e.to_string() })
            }
            None => return Err(HierarchyError::Parse { line: 1, message: "empty file".into() }),
        };
        let num_nodes = header
            .strip_prefix("nodes=")
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| HierarchyError::Parse {
                line: 1,
                message: format!("expected 'nodes=<n>' header, got '{header}'"),
            })?;
        let mut graph = Self::new(num_nodes);
        for (lineno, line) in lines {
            let line = line.map_err(|e| HierarchyError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse = || -> Option<(u32, u32, f64)> {
                let mut parts = line.split_whitespace();
                let a = parts.next()?.parse().ok()?;
                let b = parts.next()?.parse().ok()?;
                let w = parts.next()?.parse().ok()?;
                if parts.next().is_some() {
                    return None;
                }
                Some((a, b, w))
            };
            let (a, b, w) = parse().ok_or_else(|| HierarchyError::Parse {
                line: lineno + 1,
                message: format!("expected 'a b weight', got '{line}'"),
            })?;
            graph.add_edge(a, b, w).map_err(|e| HierarchyError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(graph)
    }
}

fn validate_instances(
    instances: &[AnnotatedInstance],
    inventory: &TypeInventory,
) -> Result<(), HierarchyError> {
    if instances.is_empty() {
        return Err(HierarchyError::EmptyInstances);
    }
    for inst in instances {
        if let Some(&bad) = inst.gold_types.iter().find(|&&t| t >= inventory.len()) {
            return Err(HierarchyError::UnknownTypeId(bad));
        }
    }
    Ok(())
}

fn pair_counts(instances: &[AnnotatedInstance]) -> BTreeMap<(u32, u32), u64> {
    let mut counts = BTreeMap::new();
    for inst in instances {
        let gold = &inst.gold_types;
        for i in 0..gold.len() {
            for j in i + 1..gold.len() {
                // gold is sorted and deduped, so (gold[i], gold[j]) is the
                // canonical orientation.
                *counts.entry((gold[i], gold[j])).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Edge weight = number of instances whose gold set contains both types.
pub fn build_freq_graph(
    instances: &[AnnotatedInstance],
    inventory: &TypeInventory,
) -> Result<WeightedTypeGraph, HierarchyError> {
    validate_instances(instances, inventory)?;
    let mut graph = WeightedTypeGraph::new(inventory.len());
    for ((a, b), count) in pair_counts(instances) {
        graph.add_edge(a, b, count as f64)?;
    }
    Ok(graph)
}

/// Edge weight = positive PMI of the pair under per-instance occurrence
/// probabilities; pairs at or below zero are dropped.
pub fn build_pmi_graph(
    instances: &[AnnotatedInstance],
    inventory: &TypeInventory,
) -> Result<WeightedTypeGraph, HierarchyError> {
    validate_instances(instances, inventory)?;
    let n = instances.len() as f64;
    let mut type_counts = vec![0u64; inventory.len() as usize];
    for inst in instances {
        for &t in &inst.gold_types {
            type_counts[t as usize] += 1;
        }
    }
    let mut graph = WeightedTypeGraph::new(inventory.len());
    for ((a, b), co) in pair_counts(instances) {
        let ca = type_counts[a as usize] as f64;
        let cb = type_counts[b as usize] as f64;
        // ln( (co/n) / ((ca/n)(cb/n)) ) = ln(co * n / (ca * cb))
        let pmi = (co as f64 * n / (ca * cb)).ln();
        if pmi > 0.0 {
            graph.add_edge(a, b, pmi)?;
        }
    }
    Ok(graph)
}

/// Parses a taxonomy edge list ("child parent" per line, names resolved
/// against the inventory) into a unit-weight graph oriented child->parent.
pub fn load_taxonomy<R: BufRead>(
    r: R,
    inventory: &TypeInventory,
) -> Result<WeightedTypeGraph, HierarchyError> {
    let mut graph = WeightedTypeGraph::new(inventory.len());
    for (lineno, line) in r.lines().enumerate() {
        let line =
            line.map_err(|e| HierarchyError::Parse { line: lineno + 1, message: e.to_string() })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (child, parent) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(p), None) => (c, p),
            _ => {
                return Err(HierarchyError::Parse {
                    line: lineno + 1,
                    message: "expected 'child parent'".into(),
                })
            }
        };
        if child == parent {
            return Err(HierarchyError::SelfLoop(child.to_string()));
        }
        let child_id = inventory
            .id_of(child)
            .ok_or_else(|| HierarchyError::UnknownTypeName(child.to_string()))?;
        let parent_id = inventory
            .id_of(parent)
            .ok_or_else(|| HierarchyError::UnknownTypeName(parent.to_string()))?;
        graph.add_edge(child_id, parent_id, 1.0)?;
    }
    Ok(graph)
}

/// How stored edge orientation maps onto the IS-A relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeOrientation {
    ChildToParent,
    ParentToChild,
}

/// Adds a unit edge from every node to each of its ancestors. Existing
/// pair weights are kept at max(old, 1). Errors if the oriented graph has
/// a cycle.
pub fn transitive_closure(
    graph: &WeightedTypeGraph,
    orientation: EdgeOrientation,
) -> Result<WeightedTypeGraph, HierarchyError> {
    let n = graph.num_nodes as usize;
    let mut parents = vec![Vec::new(); n];
    for (a, b, _) in graph.edges() {
        let (child, parent) = match orientation {
            EdgeOrientation::ChildToParent => (a, b),
            EdgeOrientation::ParentToChild => (b, a),
        };
        parents[child as usize].push(parent);
    }
    for list in &mut parents {
        list.sort_unstable();
    }

    // Ancestor sets via DFS with cycle detection (0 = new, 1 = on stack,
    // 2 = done).
    let mut state = vec![0u8; n];
    let mut ancestors: Vec<Vec<u32>> = vec![Vec::new(); n];

    fn visit(
        node: usize,
        parents: &[Vec<u32>],
        state: &mut [u8],
        ancestors: &mut [Vec<u32>],
    ) -> Result<(), HierarchyError> {
        if state[node] == 1 {
            return Err(HierarchyError::CycleDetected(node as u32));
        }
        if state[node] == 2 {
            return Ok(());
        }
        state[node] = 1;
        let mut acc = std::collections::BTreeSet::new();
        for &p in &parents[node] {
            visit(p as usize, parents, state, ancestors)?;
            acc.insert(p);
            acc.extend(ancestors[p as usize].iter().copied());
        }
        ancestors[node] = acc.into_iter().collect();
        state[node] = 2;
        Ok(())
    }

    for node in 0..n {
        visit(node, &parents, &mut state, &mut ancestors)?;
    }

    let mut closed = graph.clone();
    for (node, anc) in ancestors.iter().enumerate() {
        for &a in anc {
            let (from, to) = match orientation {
                EdgeOrientation::ChildToParent => (node as u32, a),
                EdgeOrientation::ParentToChild => (a, node as u32),
            };
            closed.upsert(from, to, 1.0, f64::max);
        }
    }
    Ok(closed)
}

/// How weights of shared pairs combine when merging two graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeRule {
    Sum,
    Max,
}

impl std::str::FromStr for MergeRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(MergeRule::Sum),
            "max" => Ok(MergeRule::Max),
            other => Err(format!("unknown merge rule '{other}' (expected sum|max)")),
        }
    }
}

/// Union of two graphs over the same inventory; weights of shared pairs
/// are summed.
pub fn merge_graphs(
    a: &WeightedTypeGraph,
    b: &WeightedTypeGraph,
) -> Result<WeightedTypeGraph, HierarchyError> {
    merge_graphs_with(a, b, MergeRule::Sum)
}

/// [`merge_graphs`] with an explicit combination rule for shared pairs.
pub fn merge_graphs_with(
    a: &WeightedTypeGraph,
    b: &WeightedTypeGraph,
    rule: MergeRule,
) -> Result<WeightedTypeGraph, HierarchyError> {
    if a.num_nodes != b.num_nodes {
        return Err(HierarchyError::NodeCountMismatch(a.num_nodes, b.num_nodes));
    }
    let combine = match rule {
        MergeRule::Sum => |old: f64, new: f64| old + new,
        MergeRule::Max => f64::max,
    };
    let mut merged = a.clone();
    for (x, y, w) in b.edges() {
        merged.upsert(x, y, w, combine);
    }
    Ok(merged)
}
