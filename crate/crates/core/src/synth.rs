//! Seeded synthetic corpus generator for end-to-end testing.
//!
//! The inventory is a balanced tree; level 0 is the root, the deepest
//! level holds the ultra-fine types, the level above them the fine types
//! and everything higher is coarse. Each instance picks a leaf uniformly;
//! its gold set is the root-to-leaf path with ancestors dropped
//! independently at the noise rate (the leaf itself is always kept).
//! Context tokens mix leaf-specific signature tokens with shared fillers
//! and the mention token identifies the leaf, so the mapping is learnable
//! from either representation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::DatasetRecord;
use crate::hierarchy::{Granularity, HierarchyError, TypeEntry, TypeInventory};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible size: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Children per tree node.
    pub branching: usize,
    /// Tree levels including the root; at least 3 so every granularity is
    /// populated.
    pub depth: usize,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    /// Probability of dropping each non-leaf ancestor from a gold set.
    pub noise: f64,
    pub word_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            branching: 3,
            depth: 4,
            num_train: 2000,
            num_dev: 200,
            num_test: 200,
            noise: 0.0,
            word_dim: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub inventory: TypeInventory,
    /// Taxonomy edges as (child name, parent name).
    pub taxonomy: Vec<(String, String)>,
    /// Word-vector entries in vocabulary order.
    pub word_vectors: Vec<(String, Vec<f64>)>,
    pub train: Vec<DatasetRecord>,
    pub dev: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

struct Tree {
    parents: Vec<Option<usize>>,
    levels: Vec<usize>,
    depth: usize,
}

impl Tree {
    fn balanced(branching: usize, depth: usize) -> Self {
        let mut parents = vec![None];
        let mut levels = vec![0usize];
        let mut level_start = 0usize;
        let mut level_size = 1usize;
        for level in 1..depth {
            let parent_range = level_start..level_start + level_size;
            level_start += level_size;
            level_size *= branching;
            for parent in parent_range {
                for _ in 0..branching {
                    parents.push(Some(parent));
                    levels.push(level);
                }
            }
        }
        Self { parents, levels, depth }
    }

    fn num_nodes(&self) -> usize {
        self.parents.len()
    }

    fn granularity(&self, node: usize) -> Granularity {
        let level = self.levels[node];
        if level == self.depth - 1 {
            Granularity::Ultra
        } else if level == self.depth - 2 {
            Granularity::Fine
        } else {
            Granularity::Coarse
        }
    }

    fn leaves(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&n| self.levels[n] == self.depth - 1).collect()
    }

    /// Path root -> node, inclusive.
    fn path(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cursor = node;
        while let Some(p) = self.parents[cursor] {
            path.push(p);
            cursor = p;
        }
        path.reverse();
        path
    }
}

fn type_name(node: usize) -> String {
    format!("n{node}")
}

const NUM_FILLERS: usize = 10;
const SIGNATURES_PER_LEAF: usize = 3;

/// Generates the full corpus deterministically from the seed.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    if config.branching < 2 {
        return Err(SynthError::Infeasible("branching must be >= 2".into()));
    }
    if config.depth < 3 {
        return Err(SynthError::Infeasible(
            "depth must be >= 3 so coarse, fine and ultra are all populated".into(),
        ));
    }
    if config.depth > 6 {
        return Err(SynthError::Infeasible("depth > 6 explodes the inventory".into()));
    }
    if !(0.0..1.0).contains(&config.noise) {
        return Err(SynthError::Infeasible("noise must be in [0, 1)".into()));
    }
    if config.word_dim < 2 {
        return Err(SynthError::Infeasible("word_dim must be >= 2".into()));
    }
    if config.num_train == 0 {
        return Err(SynthError::Infeasible("need at least one training instance".into()));
    }

    let tree = Tree::balanced(config.branching, config.depth);
    let inventory = TypeInventory::new(
        (0..tree.num_nodes())
            .map(|n| TypeEntry { name: type_name(n), granularity: tree.granularity(n) })
            .collect(),
    )?;
    let taxonomy: Vec<(String, String)> = (0..tree.num_nodes())
        .filter_map(|n| tree.parents[n].map(|p| (type_name(n), type_name(p))))
        .collect();

    let leaves = tree.leaves();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Vocabulary: fillers, then per-leaf signatures, then mention tokens.
    let mut tokens: Vec<String> = (0..NUM_FILLERS).map(|i| format!("f{i}")).collect();
    for &leaf in &leaves {
        for j in 0..SIGNATURES_PER_LEAF {
            tokens.push(format!("s{leaf}_{j}"));
        }
    }
    for &leaf in &leaves {
        tokens.push(format!("m{leaf}"));
    }
    let word_vectors: Vec<(String, Vec<f64>)> = tokens
        .into_iter()
        .map(|t| {
            let v: Vec<f64> =
                (0..config.word_dim).map(|_| rng.random_range(-0.6..0.6)).collect();
            (t, v)
        })
        .collect();

    let make_instance = |rng: &mut ChaCha8Rng| -> DatasetRecord {
        let leaf = leaves[rng.random_range(0..leaves.len())];
        let path = tree.path(leaf);
        let mut gold = Vec::new();
        for &node in &path {
            if node == leaf || rng.random::<f64>() >= config.noise {
                gold.push(node);
            }
        }
        let mut coarse = Vec::new();
        let mut fine = Vec::new();
        let mut ultra = Vec::new();
        for node in gold {
            match tree.granularity(node) {
                Granularity::Coarse => coarse.push(type_name(node)),
                Granularity::Fine => fine.push(type_name(node)),
                Granularity::Ultra => ultra.push(type_name(node)),
            }
        }

        let side_tokens = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = rng.random_range(1..=3usize);
            (0..len)
                .map(|_| {
                    if rng.random::<f64>() < 0.7 {
                        format!("s{leaf}_{}", rng.random_range(0..SIGNATURES_PER_LEAF))
                    } else {
                        format!("f{}", rng.random_range(0..NUM_FILLERS))
                    }
                })
                .collect()
        };
        let left = side_tokens(rng);
        let right = side_tokens(rng);
        let mention_start = left.len();
        let mut sentence = left;
        sentence.push(format!("m{leaf}"));
        sentence.extend(right);
        DatasetRecord {
            tokens: sentence,
            mention: (mention_start, mention_start + 1),
            coarse,
            fine,
            ultra,
        }
    };

    let train: Vec<DatasetRecord> = (0..config.num_train).map(|_| make_instance(&mut rng)).collect();
    let dev: Vec<DatasetRecord> = (0..config.num_dev).map(|_| make_instance(&mut rng)).collect();
    let test: Vec<DatasetRecord> = (0..config.num_test).map(|_| make_instance(&mut rng)).collect();

    Ok(SynthCorpus { inventory, taxonomy, word_vectors, train, dev, test })
}
