//! Embedding a weighted type graph into the Poincare ball or the
//! Euclidean unit ball.
//!
//! Training follows the usual negative-sampling recipe for graph
//! embeddings: edges are drawn proportional to their weight, a handful of
//! non-neighbors are drawn as negatives, and the softmax over negated
//! distances is pushed toward the true neighbor. In hyperbolic space the
//! Euclidean gradient is rescaled by the inverse metric factor
//! ((1 - ||x||^2)^2 / 4) and every update is retracted back inside the
//! ball, so plain SGD suffices.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{self, SpaceKind, MAX_NORM};
use crate::hierarchy::{TypeInventory, WeightedTypeGraph};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("graph has {graph} nodes but inventory has {inventory} types")]
    NodeCountMismatch { graph: u32, inventory: u32 },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("vector {id} violates the ball invariant (norm {norm})")]
    VectorOutsideBall { id: u32, norm: f64 },
    #[error("vector {id} has dimension {got}, expected {expected}")]
    DimMismatch { id: u32, got: usize, expected: usize },
    #[error("unknown type id {0}")]
    UnknownTypeId(u32),
    #[error("table has {table} vectors but graph has {graph} nodes")]
    CoverageMismatch { table: u32, graph: u32 },
    #[error("query has dimension {got}, expected {expected}")]
    QueryDimMismatch { got: usize, expected: usize },
    #[error("query outside the ball (norm {0})")]
    QueryOutsideBall(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One point per type id, all inside the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEmbeddingTable {
    space: SpaceKind,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl TypeEmbeddingTable {
    pub fn new(space: SpaceKind, dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        for (id, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(EmbedError::DimMismatch { id: id as u32, got: v.len(), expected: dim });
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm <= MAX_NORM) {
                return Err(EmbedError::VectorOutsideBall { id: id as u32, norm });
            }
        }
        Ok(Self { space, dim, vectors })
    }

    pub fn space(&self) -> SpaceKind {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> u32 {
        self.vectors.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: u32) -> Result<&[f64], EmbedError> {
        self.vectors
            .get(id as usize)
            .map(|v| v.as_slice())
            .ok_or(EmbedError::UnknownTypeId(id))
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        geometry::space_distance_raw(self.space, x, y)
    }

    /// Header `space=<s> dim=<n> count=<m>`, then one
    /// `<id> <name> <v1> ... <vn>` line per type with round-trip-exact
    /// floats.
    pub fn write_to<W: Write>(&self, inventory: &TypeInventory, mut w: W) -> std::io::Result<()> {
        writeln!(w, "space={} dim={} count={}", self.space, self.dim, self.len())?;
        for (id, vec) in self.vectors.iter().enumerate() {
            let name = inventory.name_of(id as u32).unwrap_or("?");
            write!(w, "{id} {name}")?;
            for x in vec {
                write!(w, " {x:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<(Self, Vec<String>), EmbedError> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(line))) => line,
            Some((n, Err(e))) => {
                return Err(EmbedError::Parse { line: n + 1, message: e.to_string() })
            }
            None => return Err(EmbedError::Parse { line: 1, message: "empty file".into() }),
        };
        let mut space = None;
        let mut dim = None;
        let mut count = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("space", v)) => {
                    space = Some(v.parse::<SpaceKind>().map_err(|e| EmbedError::Parse {
                        line: 1,
                        message: e,
                    })?)
                }
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<u32>().ok(),
                _ => {
                    return Err(EmbedError::Parse {
                        line: 1,
                        message: format!("unexpected header field '{field}'"),
                    })
                }
            }
        }
        let (space, dim, count) = match (space, dim, count) {
            (Some(s), Some(d), Some(c)) => (s, d, c),
            _ => {
                return Err(EmbedError::Parse {
                    line: 1,
                    message: "header must contain space=, dim= and count=".into(),
                })
            }
        };
        let mut vectors = Vec::with_capacity(count as usize);
        let mut names = Vec::with_capacity(count as usize);
        for (lineno, line) in lines {
            let line = line
                .map_err(|e| EmbedError::Parse { line: lineno + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let id: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| EmbedError::Parse {
                    line: lineno + 1,
                    message: "missing type id".into(),
                })?;
            if id as usize != vectors.len() {
                return Err(EmbedError::Parse {
                    line: lineno + 1,
                    message: format!("expected id {} in order, got {id}", vectors.len()),
                });
            }
            let name = parts.next().ok_or_else(|| EmbedError::Parse {
                line: lineno + 1,
                message: "missing type name".into(),
            })?;
            let coords: Result<Vec<f64>, _> = parts.map(|s| s.parse::<f64>()).collect();
            let coords = coords.map_err(|e| EmbedError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if coords.len() != dim {
                return Err(EmbedError::Parse {
                    line: lineno + 1,
                    message: format!("expected {dim} coordinates, got {}", coords.len()),
                });
            }
            names.push(name.to_string());
            vectors.push(coords);
        }
        if vectors.len() != count as usize {
            return Err(EmbedError::Parse {
                line: 1,
                message: format!("header count {count} but {} rows", vectors.len()),
            });
        }
        Ok((Self::new(space, dim, vectors)?, names))
    }
}

/// Hyperparameters for graph-embedding training.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub burn_in_epochs: usize,
    pub burn_in_lr_factor: f64,
    pub negatives_per_edge: usize,
    pub init_radius: f64,
    pub seed: u64,
}

impl Default for GraphEmbedConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            epochs: 300,
            learning_rate: 0.1,
            burn_in_epochs: 10,
            burn_in_lr_factor: 0.1,
            negatives_per_edge: 10,
            init_radius: 1e-3,
            seed: 0,
        }
    }
}

/// Softmax sharpness per space. Hyperbolic distances spread without bound,
/// but Euclidean distances inside the unit ball cap at 2, which makes the
/// temperature-1 softmax too soft to enforce clean neighbor rankings.
fn softmax_temperature(space: SpaceKind) -> f64 {
    match space {
        SpaceKind::Hyperbolic => 1.0,
        SpaceKind::Euclidean => 0.2,
    }
}

impl GraphEmbedConfig {
    fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 2 {
            return Err(EmbedError::BadConfig(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.negatives_per_edge < 1 {
            return Err(EmbedError::BadConfig("negatives_per_edge must be >= 1".into()));
        }
        if !(self.init_radius > 0.0 && self.init_radius < 0.1) {
            return Err(EmbedError::BadConfig(format!(
                "init_radius must be in (0, 0.1), got {}",
                self.init_radius
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(EmbedError::BadConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub table: TypeEmbeddingTable,
    /// Exact objective (weight-averaged over edges, negatives = all
    /// non-neighbors) evaluated after each epoch.
    pub loss_trace: Vec<f64>,
}

impl EmbedOutcome {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Weighted edge sampler over prefix sums; scale-invariant in the weights.
struct EdgeSampler {
    endpoints: Vec<(u32, u32)>,
    prefix: Vec<f64>,
    total: f64,
}

impl EdgeSampler {
    fn new(graph: &WeightedTypeGraph) -> Self {
        let mut endpoints = Vec::with_capacity(graph.num_edges());
        let mut prefix = Vec::with_capacity(graph.num_edges());
        let mut total = 0.0;
        for (a, b, w) in graph.edges() {
            endpoints.push((a, b));
            total += w;
            prefix.push(total);
        }
        Self { endpoints, prefix, total }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        let x = rng.random::<f64>() * self.total;
        let idx = self.prefix.partition_point(|&p| p <= x).min(self.endpoints.len() - 1);
        self.endpoints[idx]
    }
}

fn retract(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm >= MAX_NORM {
        // Land a hair inside MAX_NORM so rounding cannot push back out.
        let scale = MAX_NORM * (1.0 - 1e-12) / norm;
        for x in v {
            *x *= scale;
        }
    }
}

/// The objective the sampler estimates: for each directed reading of each
/// edge, the softmax loss of the target against all non-neighbors of the
/// anchor, averaged over edges with their weights. Scale-invariant in the
/// weights, like the sampler.
fn exact_objective(
    space: SpaceKind,
    vectors: &[Vec<f64>],
    graph: &WeightedTypeGraph,
    neighbor_sets: &[BTreeSet<u32>],
) -> f64 {
    let n = vectors.len() as u32;
    let tau = softmax_temperature(space);
    let mut total_weight = 0.0;
    let mut total_loss = 0.0;
    for (a, b, w) in graph.edges() {
        let mut edge_loss = 0.0;
        for (anchor, target) in [(a, b), (b, a)] {
            let d_target =
                geometry::space_distance_raw(space, &vectors[anchor as usize], &vectors[target as usize]);
            let mut scores = vec![-d_target / tau];
            for cand in 0..n {
                if cand == anchor || neighbor_sets[anchor as usize].contains(&cand) {
                    continue;
                }
                let d = geometry::space_distance_raw(
                    space,
                    &vectors[anchor as usize],
                    &vectors[cand as usize],
                );
                scores.push(-d / tau);
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            edge_loss += lse - (-d_target / tau);
        }
        total_loss += w * edge_loss / 2.0;
        total_weight += w;
    }
    total_loss / total_weight
}

fn distance_grad(space: SpaceKind, u: &[f64], v: &[f64]) -> Vec<f64> {
    match space {
        SpaceKind::Hyperbolic => geometry::hyperbolic_grad(u, v),
        SpaceKind::Euclidean => {
            let d = geometry::euclidean_distance_raw(u, v);
            if d < 1e-12 {
                vec![0.0; u.len()]
            } else {
                u.iter().zip(v).map(|(a, b)| (a - b) / d).collect()
            }
        }
    }
}

/// Trains type embeddings with weighted edge sampling and uniform
/// non-neighbor negatives. Deterministic given `config.seed`.
pub fn train_type_embeddings(
    graph: &WeightedTypeGraph,
    inventory: &TypeInventory,
    space: SpaceKind,
    config: &GraphEmbedConfig,
) -> Result<EmbedOutcome, EmbedError> {
    config.validate()?;
    if graph.num_nodes() != inventory.len() {
        return Err(EmbedError::NodeCountMismatch {
            graph: graph.num_nodes(),
            inventory: inventory.len(),
        });
    }
    if graph.num_edges() == 0 {
        return Err(EmbedError::EmptyGraph);
    }
    let n = graph.num_nodes() as usize;
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut vectors: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-config.init_radius..config.init_radius))
                .collect()
        })
        .collect();

    let sampler = EdgeSampler::new(graph);
    let neighbor_sets: Vec<BTreeSet<u32>> = graph
        .adjacency()
        .into_iter()
        .map(|list| list.into_iter().collect())
        .collect();

    let tau = softmax_temperature(space);
    let draws_per_epoch = graph.num_edges();
    let k = config.negatives_per_edge;
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Burn-in at a reduced rate settles coarse structure; afterwards
        // the rate anneals linearly to 1% so the embedding stops jittering
        // around its optimum.
        let lr = if epoch < config.burn_in_epochs {
            config.learning_rate * config.burn_in_lr_factor
        } else {
            let span = (config.epochs - config.burn_in_epochs).max(1);
            let progress = (epoch - config.burn_in_epochs) as f64 / span as f64;
            config.learning_rate * (1.0 - 0.99 * progress)
        };
        for _ in 0..draws_per_epoch {
            let (a, b) = sampler.sample(&mut rng);
            // Alternate the anchor role so both endpoints collect
            // negatives over time.
            let (anchor, target) = if rng.random::<bool>() { (a, b) } else { (b, a) };

            let mut others = Vec::with_capacity(1 + k);
            others.push(target);
            let anchor_neighbors = &neighbor_sets[anchor as usize];
            for _ in 0..k {
                let mut pick = None;
                for _ in 0..100 {
                    let cand = rng.random_range(0..n as u32);
                    if cand != anchor && !anchor_neighbors.contains(&cand) {
                        pick = Some(cand);
                        break;
                    }
                }
                let neg = pick.unwrap_or_else(|| {
                    // Near-complete graph: accept any node but the anchor.
                    loop {
                        let cand = rng.random_range(0..n as u32);
                        if cand != anchor {
                            return cand;
                        }
                    }
                });
                others.push(neg);
            }

            let dists: Vec<f64> = others
                .iter()
                .map(|&o| {
                    geometry::space_distance_raw(
                        space,
                        &vectors[anchor as usize],
                        &vectors[o as usize],
                    )
                })
                .collect();
            // softmax over scores s_j = -d_j / tau, shifted for stability;
            // the 1/tau gradient factor is folded into the learning rate
            let max_score =
                dists.iter().map(|d| -d / tau).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = dists.iter().map(|d| (-d / tau - max_score).exp()).collect();
            let z: f64 = exps.iter().sum();

            // dL/dd_j proportional to delta_{j0} - p_j
            let mut grad_anchor = vec![0.0; dim];
            for (j, &other) in others.iter().enumerate() {
                let p = exps[j] / z;
                let coeff = if j == 0 { 1.0 - p } else { -p };
                if coeff == 0.0 {
                    continue;
                }
                let ga = distance_grad(space, &vectors[anchor as usize], &vectors[other as usize]);
                for (g, x) in grad_anchor.iter_mut().zip(&ga) {
                    *g += coeff * x;
                }
                let go = distance_grad(space, &vectors[other as usize], &vectors[anchor as usize]);
                apply_update(space, &mut vectors[other as usize], &go, coeff, lr);
            }
            apply_update(space, &mut vectors[anchor as usize], &grad_anchor, 1.0, lr);
        }
        let epoch_loss = exact_objective(space, &vectors, graph, &neighbor_sets);
        if !epoch_loss.is_finite() {
            return Err(EmbedError::NonFiniteLoss { epoch });
        }
        debug_assert!(vectors
            .iter()
            .all(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() <= MAX_NORM));
        loss_trace.push(epoch_loss);
    }

    let table = TypeEmbeddingTable::new(space, dim, vectors)?;
    Ok(EmbedOutcome { table, loss_trace })
}

fn apply_update(space: SpaceKind, point: &mut [f64], grad: &[f64], coeff: f64, lr: f64) {
    let scale = match space {
        SpaceKind::Hyperbolic => {
            let norm_sq: f64 = point.iter().map(|x| x * x).sum();
            let f = (1.0 - norm_sq) * (1.0 - norm_sq) / 4.0;
            lr * coeff * f
        }
        SpaceKind::Euclidean => lr * coeff,
    };
    for (p, g) in point.iter_mut().zip(grad) {
        *p -= scale * g;
    }
    retract(point);
}

/// Mean average precision of true graph neighbors under distance ranking,
/// ties broken by lower id. Nodes without neighbors are skipped.
pub fn reconstruction_map(
    table: &TypeEmbeddingTable,
    graph: &WeightedTypeGraph,
) -> Result<f64, EmbedError> {
    if table.len() != graph.num_nodes() {
        return Err(EmbedError::CoverageMismatch { table: table.len(), graph: graph.num_nodes() });
    }
    let adjacency = graph.adjacency();
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    for (node, neighbors) in adjacency.iter().enumerate() {
        if neighbors.is_empty() {
            continue;
        }
        let query = table.vector(node as u32)?;
        let mut ranked: Vec<(u32, f64)> = (0..table.len())
            .filter(|&o| o != node as u32)
            .map(|o| (o, table.distance(query, table.vector(o).unwrap())))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let neighbor_set: BTreeSet<u32> = neighbors.iter().copied().collect();
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, (id, _)) in ranked.iter().enumerate() {
            if neighbor_set.contains(id) {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / neighbor_set.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(EmbedError::EmptyGraph);
    }
    Ok(ap_sum / counted as f64)
}

/// Ranked nearest types for a query point.
#[derive(Debug, Clone)]
pub struct NearestNeighbors {
    pub items: Vec<(u32, f64)>,
    /// True when k exceeded the candidate population and the full ranking
    /// was returned instead.
    pub truncated: bool,
}

/// The k closest types to `query` under the table's distance, optionally
/// restricted to `candidates`. Ties break toward the lower type id.
pub fn nearest_types(
    table: &TypeEmbeddingTable,
    query: &[f64],
    candidates: Option<&[u32]>,
    k: usize,
) -> Result<NearestNeighbors, EmbedError> {
    if query.len() != table.dim() {
        return Err(EmbedError::QueryDimMismatch { got: query.len(), expected: table.dim() });
    }
    if table.space() == SpaceKind::Hyperbolic {
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm <= MAX_NORM) {
            return Err(EmbedError::QueryOutsideBall(norm));
        }
    }
    let pool: Vec<u32> = match candidates {
        Some(ids) => {
            for &id in ids {
                if id >= table.len() {
                    return Err(EmbedError::UnknownTypeId(id));
                }
            }
            ids.to_vec()
        }
        None => (0..table.len()).collect(),
    };
    let mut ranked: Vec<(u32, f64)> = pool
        .iter()
        .map(|&id| (id, table.distance(query, table.vector(id).unwrap())))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let truncated = k > ranked.len();
    if !truncated {
        ranked.truncate(k);
    }
    Ok(NearestNeighbors { items: ranked, truncated })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &slot in &idx[i..=j] {
            ranks[slot] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{Granularity, TypeEntry};

    pub(crate) fn simple_inventory(n: u32) -> TypeInventory {
        TypeInventory::new(
            (0..n)
                .map(|i| TypeEntry { name: format!("t{i}"), granularity: Granularity::Ultra })
                .collect(),
        )
        .unwrap()
    }

    /// Balanced tree with `branching` children per node and `depth`
    /// levels; returns (graph, depth of each node).
    pub(crate) fn balanced_tree(branching: usize, depth: usize) -> (WeightedTypeGraph, Vec<usize>) {
        let mut num = 0usize;
        let mut level_sizes = Vec::new();
        let mut size = 1;
        for _ in 0..depth {
            level_sizes.push(size);
            num += size;
            size *= branching;
        }
        let mut graph = WeightedTypeGraph::new(num as u32);
        let mut depths = vec![0usize; num];
        let mut parents_start = 0usize;
        let mut child = 1usize;
        for (level, &level_size) in level_sizes.iter().enumerate().take(depth - 1) {
            for p in parents_start..parents_start + level_size {
                for _ in 0..branching {
                    graph.add_edge(child as u32, p as u32, 1.0).unwrap();
                    depths[child] = level + 1;
                    child += 1;
                }
            }
            parents_start += level_size;
        }
        (graph, depths)
    }

    #[test]
    fn tree_builder_shapes() {
        let (g, depths) = balanced_tree(3, 3);
        assert_eq!(g.num_nodes(), 13);
        assert_eq!(g.num_edges(), 12);
        assert_eq!(depths.iter().filter(|&&d| d == 2).count(), 9);
    }

    #[test]
    fn two_nodes_one_edge_attract() {
        let inv = simple_inventory(2);
        let mut g = WeightedTypeGraph::new(2);
        g.add_edge(0, 1, 1.0).unwrap();
        let config = GraphEmbedConfig { dim: 2, epochs: 50, ..Default::default() };
        for space in [SpaceKind::Hyperbolic, SpaceKind::Euclidean] {
            let out = train_type_embeddings(&g, &inv, space, &config).unwrap();
            let u = out.table.vector(0).unwrap();
            let v = out.table.vector(1).unwrap();
            let held_out = [0.4, -0.4];
            let duv = out.table.distance(u, v);
            let dux = out.table.distance(u, &held_out);
            assert!(duv < dux, "{space:?}: d(u,v)={duv} d(u,x)={dux}");
        }
    }

    #[test]
    fn trainer_rejects_bad_inputs() {
        let inv = simple_inventory(2);
        let empty = WeightedTypeGraph::new(2);
        let config = GraphEmbedConfig::default();
        assert!(matches!(
            train_type_embeddings(&empty, &inv, SpaceKind::Hyperbolic, &config),
            Err(EmbedError::EmptyGraph)
        ));
        let mut g = WeightedTypeGraph::new(3);
        g.add_edge(0, 1, 1.0).unwrap();
        assert!(matches!(
            train_type_embeddings(&g, &inv, SpaceKind::Hyperbolic, &config),
            Err(EmbedError::NodeCountMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let inv = simple_inventory(13);
        let (g, _) = balanced_tree(3, 3);
        let config = GraphEmbedConfig { epochs: 30, seed: 9, ..Default::default() };
        let a = train_type_embeddings(&g, &inv, SpaceKind::Hyperbolic, &config).unwrap();
        let b = train_type_embeddings(&g, &inv, SpaceKind::Hyperbolic, &config).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn weight_doubling_leaves_training_unchanged() {
        let inv = simple_inventory(4);
        let mut g1 = WeightedTypeGraph::new(4);
        g1.add_edge(0, 1, 1.0).unwrap();
        g1.add_edge(1, 2, 3.0).unwrap();
        g1.add_edge(2, 3, 0.5).unwrap();
        let mut g2 = WeightedTypeGraph::new(4);
        for (a, b, w) in g1.edges() {
            g2.add_edge(a, b, 2.0 * w).unwrap();
        }
        let config = GraphEmbedConfig { dim: 3, epochs: 20, seed: 4, ..Default::default() };
        let o1 = train_type_embeddings(&g1, &inv, SpaceKind::Euclidean, &config).unwrap();
        let o2 = train_type_embeddings(&g2, &inv, SpaceKind::Euclidean, &config).unwrap();
        assert_eq!(o1.table, o2.table);
    }

    #[test]
    fn near_complete_graph_falls_back_to_any_negative() {
        // Every node neighbors every other: rejection sampling can never
        // find a non-neighbor, so the capped fallback must kick in and
        // training still terminates.
        let inv = simple_inventory(4);
        let mut g = WeightedTypeGraph::new(4);
        for a in 0..4u32 {
            for b in a + 1..4 {
                g.add_edge(a, b, 1.0).unwrap();
            }
        }
        let config = GraphEmbedConfig { dim: 2, epochs: 10, ..Default::default() };
        let out = train_type_embeddings(&g, &inv, SpaceKind::Hyperbolic, &config).unwrap();
        assert_eq!(out.loss_trace.len(), 10);
    }

    #[test]
    fn all_vectors_stay_inside_ball() {
        let inv = simple_inventory(13);
        let (g, _) = balanced_tree(3, 3);
        let config =
            GraphEmbedConfig { epochs: 120, learning_rate: 1.0, ..Default::default() };
        for space in [SpaceKind::Hyperbolic, SpaceKind::Euclidean] {
            let out = train_type_embeddings(&g, &inv, space, &config).unwrap();
            for id in 0..out.table.len() {
                let norm: f64 =
                    out.table.vector(id).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm <= MAX_NORM, "{space:?} vector {id} norm {norm}");
                assert!(norm > 0.0);
            }
        }
    }

    #[test]
    fn loss_trace_decreases_on_tree_up_to_stochastic_tolerance() {
        let inv = simple_inventory(13);
        let (g, _) = balanced_tree(3, 3);
        for seed in 0..3 {
            let config = GraphEmbedConfig { seed, ..Default::default() };
            let out = train_type_embeddings(&g, &inv, SpaceKind::Hyperbolic, &config).unwrap();
            let trace = &out.loss_trace;
            // No epoch may backslide by more than 5% relative; overall the
            // objective must drop decisively.
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] * 1.05, "epoch loss rose {} -> {}", w[0], w[1]);
            }
            assert!(trace.last().unwrap() < &(trace[0] * 0.5), "{trace:?}");
        }
    }

    #[test]
    fn tree_reconstruction_and_depth_norm() {
        let inv = simple_inventory(13);
        let (g, depths) = balanced_tree(3, 3);
        let config = GraphEmbedConfig { seed: 1, ..Default::default() };
        let out = train_type_embeddings(&g, &inv, SpaceKind::Hyperbolic, &config).unwrap();
        let map = reconstruction_map(&out.table, &g).unwrap();
        assert!(map > 0.9, "MAP = {map}");
        let norms: Vec<f64> = (0..13)
            .map(|i| out.table.vector(i).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let depths_f: Vec<f64> = depths.iter().map(|&d| d as f64).collect();
        let rho = spearman(&depths_f, &norms);
        assert!(rho > 0.8, "spearman = {rho}");
    }

    #[test]
    fn reconstruction_perfect_table() {
        // 4-node star: 0 connected to 1, 2, 3; plant 0 at the center.
        let mut g = WeightedTypeGraph::new(4);
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(0, 2, 1.0).unwrap();
        g.add_edge(0, 3, 1.0).unwrap();
        let table = TypeEmbeddingTable::new(
            SpaceKind::Euclidean,
            2,
            vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0, 0.5], vec![-0.5, 0.0]],
        )
        .unwrap();
        let map = reconstruction_map(&table, &g).unwrap();
        assert_eq!(map, 1.0);
    }

    #[test]
    fn reconstruction_complete_graph_is_one() {
        let mut g = WeightedTypeGraph::new(3);
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(0, 2, 1.0).unwrap();
        g.add_edge(1, 2, 1.0).unwrap();
        let table = TypeEmbeddingTable::new(
            SpaceKind::Hyperbolic,
            2,
            vec![vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.7, -0.1]],
        )
        .unwrap();
        assert_eq!(reconstruction_map(&table, &g).unwrap(), 1.0);
    }

    #[test]
    fn reconstruction_planted_path_matches_brute_force() {
        // Path 0-1-2-3 with planted coordinates; AP by hand:
        // node0: neighbor {1} at rank 2 -> 1/2
        // node1: neighbors {0,2} at ranks 1,3 -> (1 + 2/3)/2 = 5/6
        // node2: neighbors {1,3} at ranks 1,2 -> 1
        // node3: neighbor {2} at rank 3 -> 1/3
        // MAP = 2/3
        let mut g = WeightedTypeGraph::new(4);
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(1, 2, 1.0).unwrap();
        g.add_edge(2, 3, 1.0).unwrap();
        let table = TypeEmbeddingTable::new(
            SpaceKind::Euclidean,
            2,
            vec![
                vec![0.0, 0.0],
                vec![0.5, 0.0],
                vec![0.55, 0.0],
                vec![0.2, 0.0],
            ],
        )
        .unwrap();
        let map = reconstruction_map(&table, &g).unwrap();
        assert!((map - 2.0 / 3.0).abs() < 1e-15, "MAP = {map}");
    }

    #[test]
    fn nearest_own_vector_is_rank_one() {
        let table = TypeEmbeddingTable::new(
            SpaceKind::Hyperbolic,
            2,
            vec![vec![0.1, 0.0], vec![0.0, 0.3], vec![-0.4, 0.2]],
        )
        .unwrap();
        let nn = nearest_types(&table, table.vector(1).unwrap(), None, 1).unwrap();
        assert_eq!(nn.items.len(), 1);
        assert_eq!(nn.items[0].0, 1);
        assert_eq!(nn.items[0].1, 0.0);
        assert!(!nn.truncated);
    }

    #[test]
    fn nearest_full_population_sorted_and_truncation_flag() {
        let table = TypeEmbeddingTable::new(
            SpaceKind::Euclidean,
            2,
            vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.9, 0.0]],
        )
        .unwrap();
        let nn = nearest_types(&table, &[0.85, 0.0], None, 3).unwrap();
        let ids: Vec<u32> = nn.items.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![2, 1, 0]);
        assert!(nn.items.windows(2).all(|w| w[0].1 <= w[1].1));

        let over = nearest_types(&table, &[0.85, 0.0], Some(&[0, 1]), 5).unwrap();
        assert!(over.truncated);
        assert_eq!(over.items.len(), 2);
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let vectors: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
                v
            })
            .collect();
        let table = TypeEmbeddingTable::new(SpaceKind::Hyperbolic, 4, vectors).unwrap();
        let query: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
        let nn = nearest_types(&table, &query, None, 5).unwrap();
        let mut all: Vec<(u32, f64)> = (0..20)
            .map(|id| (id, table.distance(&query, table.vector(id).unwrap())))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        assert_eq!(nn.items, all[..5].to_vec());
    }

    #[test]
    fn embedding_file_round_trip_exact() {
        let inv = simple_inventory(3);
        let table = TypeEmbeddingTable::new(
            SpaceKind::Hyperbolic,
            3,
            vec![
                vec![0.1, 0.25, -0.017],
                vec![1.0 / 3.0, -2.0 / 7.0, 0.0],
                vec![-0.9, 0.1, 0.05],
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        table.write_to(&inv, &mut buf).unwrap();
        let (back, names) = TypeEmbeddingTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        assert_eq!(names, vec!["t0", "t1", "t2"]);
    }

    #[test]
    fn spearman_handles_ties() {
        let depths = [0.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        let norms = [0.05, 0.3, 0.35, 0.7, 0.8, 0.75];
        let rho = spearman(&depths, &norms);
        assert!(rho > 0.9, "rho = {rho}");
        let anti = spearman(&depths, &norms.iter().map(|x| -x).collect::<Vec<_>>());
        assert!(anti < -0.9);
    }
}
