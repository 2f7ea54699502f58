//! Shared optimization utilities: Adam with bias correction, global
//! gradient-norm clipping, and a central finite-difference checker used to
//! verify every analytic gradient in the crate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in block '{block}'")]
    NonFiniteGradient { block: String },
    #[error("shape mismatch in block '{block}': params {params}, state {state}")]
    ShapeMismatch { block: String, params: usize, state: usize },
    #[error("loss was non-finite at a probe point in block '{block}'")]
    NonFiniteLoss { block: String },
}

/// A model exposes its parameters as named flat blocks. Gradients are
/// carried in a second value of the same type, so the two block lists
/// always line up.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<(&'static str, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment accumulators matching a model's block layout.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<P: ParamBlocks>(config: AdamConfig, params: &P) -> Self {
        let m = params.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all parameter blocks. Rejects non-finite
/// gradients up front so a diverging model fails loudly with the block
/// name instead of poisoning the moments.
pub fn adam_step<P: ParamBlocks>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
) -> Result<(), OptimError> {
    for (name, g) in grads.blocks() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient { block: name.to_string() });
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let grad_blocks = grads.blocks();
    for (idx, (name, p)) in params.blocks_mut().into_iter().enumerate() {
        let (_, g) = grad_blocks[idx];
        let m = &mut state.m[idx];
        if m.len() != p.len() {
            return Err(OptimError::ShapeMismatch {
                block: name.to_string(),
                params: p.len(),
                state: m.len(),
            });
        }
        let v = &mut state.v[idx];
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
    Ok(())
}

/// Scales all blocks by max_norm/total when the global L2 norm exceeds
/// max_norm. Returns the pre-clip norm.
pub fn clip_global_norm<P: ParamBlocks>(grads: &mut P, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let total: f64 = grads
        .blocks()
        .iter()
        .map(|(_, b)| b.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    // The slack keeps re-clipping an already-clipped block a no-op even
    // when the scaled norm lands an ulp above max_norm.
    if total > max_norm * (1.0 + 1e-12) {
        let scale = max_norm / total;
        for (_, b) in grads.blocks_mut() {
            for x in b {
                *x *= scale;
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error threshold per coordinate.
    pub tolerance: f64,
    /// Coordinates probed per block (sampled without replacement when the
    /// block is larger).
    pub max_coords_per_block: usize,
    /// Seed for the coordinate sampler.
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-6, tolerance: 1e-4, max_coords_per_block: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FdBlockReport {
    pub block: &'static str,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub blocks: Vec<FdBlockReport>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failed_blocks(&self) -> Vec<&'static str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_err >= self.tolerance)
            .map(|b| b.block)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failed_blocks().is_empty()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-8 {
        // Below the noise floor of a central difference at h = 1e-6.
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// Checks `analytic` against central differences of `loss` taken through
/// the live parameters. Coordinates are subsampled deterministically per
/// block, so a given seed always probes the same entries.
pub fn finite_difference_check<P, F, E>(
    mut loss: F,
    params: &mut P,
    analytic: &P,
    opts: FdOptions,
) -> Result<FdReport, OptimError>
where
    P: ParamBlocks,
    F: FnMut(&P) -> Result<f64, E>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let block_names: Vec<&'static str> = params.blocks().iter().map(|(n, _)| *n).collect();
    let block_lens: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
    let mut reports = Vec::new();
    for (idx, name) in block_names.iter().enumerate() {
        let len = block_lens[idx];
        let coords: Vec<usize> = if len <= opts.max_coords_per_block {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < opts.max_coords_per_block {
                picked.insert(rng.random_range(0..len));
            }
            picked.into_iter().collect()
        };
        let mut max_rel = 0.0;
        let mut worst = (0.0, 0.0);
        for &i in &coords {
            let orig = params.blocks()[idx].1[i];
            params.blocks_mut()[idx].1[i] = orig + opts.step;
            let lp = loss(params).map_err(|_| OptimError::NonFiniteLoss { block: name.to_string() })?;
            params.blocks_mut()[idx].1[i] = orig - opts.step;
            let lm = loss(params).map_err(|_| OptimError::NonFiniteLoss { block: name.to_string() })?;
            params.blocks_mut()[idx].1[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(OptimError::NonFiniteLoss { block: name.to_string() });
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let ana = analytic.blocks()[idx].1[i];
            let e = rel_err(ana, numeric);
            if e > max_rel {
                max_rel = e;
                worst = (ana, numeric);
            }
        }
        reports.push(FdBlockReport {
            block: name,
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            worst_analytic: worst.0,
            worst_numeric: worst.1,
        });
    }
    Ok(FdReport { blocks: reports, tolerance: opts.tolerance })
}
