//! The stacked regression model mapping encoder features into the target
//! space.
//!
//! Each granularity has its own projection layer: an MLP direction head
//! (hidden ReLU layer, dropout, linear output) and a linear norm head
//! whose sigmoid fixes the output's Euclidean norm. The projected point
//! `v = sigmoid(norm_head(x)) * normalize(dir_head(x))` therefore always
//! lands strictly inside the unit ball, so plain Adam optimizes it in
//! either geometry. Layers are stacked coarse -> fine -> ultra; each
//! higher layer sees `[encoder features; previous projected point]`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embedding::{nearest_types, EmbedError, TypeEmbeddingTable};
use crate::encoder::{
    encode_backward, encode_cached, EncoderConfig, EncoderError, EncoderParams, Vocabulary,
    WordEmbeddingTable,
};
use crate::eval::loose_macro_f1;
use crate::geometry::{
    loss_gradient_raw, BallPoint, GeometryError, LossWeights, SpaceKind, MAX_NORM,
};
use crate::hierarchy::{AnnotatedInstance, Granularity, TypeInventory};
use crate::linalg::{concat, dot, Mat};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState, OptimError, ParamBlocks};

/// Hidden width of the direction MLP.
pub const PROJECTION_HIDDEN_DIM: usize = 500;

/// Cap keeping sigmoid outputs inside the validated ball even at extreme
/// preactivations.
const LAMBDA_CAP: f64 = MAX_NORM * (1.0 - 1e-12);

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("direction vector is degenerate (norm {0:e})")]
    DegenerateDirection(f64),
    #[error("config space {config} does not match table space {table}")]
    SpaceMismatch { config: SpaceKind, table: SpaceKind },
    #[error("gold type {0} missing from the embedding table")]
    GoldMissing(u32),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("model embeds {model} dims but table holds {table}")]
    EmbedDimMismatch { model: usize, table: usize },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// y = W x + b
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut w = Mat::zeros(out_dim, in_dim);
        for x in &mut w.data {
            *x = rng.random_range(-scale..scale);
        }
        // Small nonzero biases keep the direction head away from the
        // exact-zero output a fully dead ReLU layer would otherwise
        // produce.
        let b = (0..out_dim).map(|_| rng.random_range(-scale..scale)).collect();
        Self { w, b }
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { w: Mat::zeros(out_dim, in_dim), b: vec![0.0; out_dim] }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        y
    }

    /// Accumulates dL/dW and dL/db into `grad`, returns dL/dx.
    fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Affine) -> Vec<f64> {
        grad.w.add_outer(gy, x);
        for (gb, g) in grad.b.iter_mut().zip(gy) {
            *gb += g;
        }
        self.w.matvec_t(gy)
    }
}

/// One granularity's projection: direction MLP + norm head.
#[derive(Debug, Clone)]
pub struct ProjectionLayer {
    pub dir_hidden: Affine,
    pub dir_out: Affine,
    pub norm_out: Affine,
    pub dropout: f64,
}

impl ProjectionLayer {
    pub fn init(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            dir_hidden: Affine::init(hidden_dim, in_dim, rng),
            dir_out: Affine::init(out_dim, hidden_dim, rng),
            norm_out: Affine::init(1, in_dim, rng),
            dropout,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            dir_hidden: Affine::zeros(self.dir_hidden.w.rows, self.dir_hidden.w.cols),
            dir_out: Affine::zeros(self.dir_out.w.rows, self.dir_out.w.cols),
            norm_out: Affine::zeros(self.norm_out.w.rows, self.norm_out.w.cols),
            dropout: self.dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dir_hidden.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.dir_out.w.rows
    }
}

/// Dropout mode for a forward pass. Training mode carries the RNG that
/// samples dropout masks; evaluation is deterministic.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl ForwardMode<'_> {
    fn reborrow(&mut self) -> ForwardMode<'_> {
        match self {
            ForwardMode::Eval => ForwardMode::Eval,
            ForwardMode::Train(rng) => ForwardMode::Train(rng),
        }
    }
}

struct LayerCache {
    input: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    mask: Option<Vec<f64>>,
    r: Vec<f64>,
    rbar_norm: f64,
    lambda: f64,
    capped: bool,
}

fn reparameterize_cached(
    input: &[f64],
    layer: &ProjectionLayer,
    mut mode: ForwardMode<'_>,
) -> Result<(BallPoint, LayerCache), ProjectionError> {
    let h_pre = layer.dir_hidden.forward(input);
    let mut h_act: Vec<f64> = h_pre.iter().map(|&x| x.max(0.0)).collect();
    let mask = match &mut mode {
        ForwardMode::Train(rng) if layer.dropout > 0.0 => {
            let keep = 1.0 - layer.dropout;
            let mask: Vec<f64> = h_act
                .iter()
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            for (h, m) in h_act.iter_mut().zip(&mask) {
                *h *= m;
            }
            Some(mask)
        }
        _ => None,
    };
    let rbar = layer.dir_out.forward(&h_act);
    let rbar_norm = rbar.iter().map(|x| x * x).sum::<f64>().sqrt();
    if rbar_norm < 1e-12 {
        return Err(ProjectionError::DegenerateDirection(rbar_norm));
    }
    let r: Vec<f64> = rbar.iter().map(|x| x / rbar_norm).collect();
    let lambda_pre = layer.norm_out.forward(input)[0];
    // The sigmoid underflows to exactly 0 below ~-745; floor it so the
    // output norm stays strictly positive as the construction promises.
    let sigma = (1.0 / (1.0 + (-lambda_pre).exp())).max(1e-308);
    let (lambda, capped) =
        if sigma > LAMBDA_CAP { (LAMBDA_CAP, true) } else { (sigma, false) };
    let coords: Vec<f64> = r.iter().map(|x| lambda * x).collect();
    let point = BallPoint::new(coords)?;
    Ok((
        point,
        LayerCache { input: input.to_vec(), h_pre, h_act, mask, r, rbar_norm, lambda, capped },
    ))
}

/// Projects a feature vector into the ball through one layer. Dropout is
/// active only in training mode.
pub fn reparameterize(
    input: &[f64],
    layer: &ProjectionLayer,
    mode: ForwardMode<'_>,
) -> Result<BallPoint, ProjectionError> {
    reparameterize_cached(input, layer, mode).map(|(point, _)| point)
}

/// Backward through one projection layer. `g_v` is dL/dv; gradients are
/// accumulated into `grad`; returns dL/d(input).
fn layer_backward(
    layer: &ProjectionLayer,
    cache: &LayerCache,
    g_v: &[f64],
    grad: &mut ProjectionLayer,
) -> Vec<f64> {
    // v = lambda * r
    let g_lambda = dot(g_v, &cache.r);
    let g_r: Vec<f64> = g_v.iter().map(|g| cache.lambda * g).collect();
    // r = rbar / |rbar|  =>  dL/drbar = (g_r - (g_r . r) r) / |rbar|
    let grr = dot(&g_r, &cache.r);
    let g_rbar: Vec<f64> = g_r
        .iter()
        .zip(&cache.r)
        .map(|(g, r)| (g - grr * r) / cache.rbar_norm)
        .collect();

    let mut g_input = vec![0.0; cache.input.len()];

    // Direction path: dir_out -> dropout -> relu -> dir_hidden.
    let mut g_hact = layer.dir_out.backward(&cache.h_act, &g_rbar, &mut grad.dir_out);
    if let Some(mask) = &cache.mask {
        for (g, m) in g_hact.iter_mut().zip(mask) {
            *g *= m;
        }
    }
    let g_hpre: Vec<f64> = g_hact
        .iter()
        .zip(&cache.h_pre)
        .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
        .collect();
    let g_in_dir = layer.dir_hidden.backward(&cache.input, &g_hpre, &mut grad.dir_hidden);
    for (gi, g) in g_input.iter_mut().zip(&g_in_dir) {
        *gi += g;
    }

    // Norm path: lambda = sigmoid(norm_out(input)), zero slope if capped.
    let g_lambda_pre =
        if cache.capped { 0.0 } else { g_lambda * cache.lambda * (1.0 - cache.lambda) };
    let g_in_norm = layer.norm_out.backward(&cache.input, &[g_lambda_pre], &mut grad.norm_out);
    for (gi, g) in g_input.iter_mut().zip(&g_in_norm) {
        *gi += g;
    }
    g_input
}

/// The full model: encoder plus the three stacked projection layers.
#[derive(Debug, Clone)]
pub struct StackedProjector {
    pub encoder: EncoderParams,
    pub coarse: ProjectionLayer,
    pub fine: ProjectionLayer,
    pub ultra: ProjectionLayer,
    pub embed_dim: usize,
}

impl StackedProjector {
    /// Fresh model with random init. The coarse layer reads the encoder
    /// output; fine and ultra read `[encoder output; previous point]`.
    pub fn init(
        encoder_config: EncoderConfig,
        word_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let encoder = EncoderParams::init(encoder_config, word_dim, rng);
        let d_e = encoder.output_dim();
        Self {
            coarse: ProjectionLayer::init(d_e, hidden_dim, embed_dim, dropout, rng),
            fine: ProjectionLayer::init(d_e + embed_dim, hidden_dim, embed_dim, dropout, rng),
            ultra: ProjectionLayer::init(d_e + embed_dim, hidden_dim, embed_dim, dropout, rng),
            encoder,
            embed_dim,
        }
    }

    /// [`init`] with a fresh ChaCha stream derived from `seed`.
    pub fn init_seeded(
        encoder_config: EncoderConfig,
        word_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        dropout: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(encoder_config, word_dim, embed_dim, hidden_dim, dropout, &mut rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            coarse: self.coarse.zeros_like(),
            fine: self.fine.zeros_like(),
            ultra: self.ultra.zeros_like(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn layer(&self, g: Granularity) -> &ProjectionLayer {
        match g {
            Granularity::Coarse => &self.coarse,
            Granularity::Fine => &self.fine,
            Granularity::Ultra => &self.ultra,
        }
    }
}

impl ParamBlocks for StackedProjector {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut blocks = self.encoder.blocks();
        for (layer, dh_w, dh_b, do_w, do_b, no_w, no_b) in [
            (
                &self.coarse,
                "coarse.dir_hidden.w",
                "coarse.dir_hidden.b",
                "coarse.dir_out.w",
                "coarse.dir_out.b",
                "coarse.norm_out.w",
                "coarse.norm_out.b",
            ),
            (
                &self.fine,
                "fine.dir_hidden.w",
                "fine.dir_hidden.b",
                "fine.dir_out.w",
                "fine.dir_out.b",
                "fine.norm_out.w",
                "fine.norm_out.b",
            ),
            (
                &self.ultra,
                "ultra.dir_hidden.w",
                "ultra.dir_hidden.b",
                "ultra.dir_out.w",
                "ultra.dir_out.b",
                "ultra.norm_out.w",
                "ultra.norm_out.b",
            ),
        ] {
            blocks.push((dh_w, layer.dir_hidden.w.data.as_slice()));
            blocks.push((dh_b, layer.dir_hidden.b.as_slice()));
            blocks.push((do_w, layer.dir_out.w.data.as_slice()));
            blocks.push((do_b, layer.dir_out.b.as_slice()));
            blocks.push((no_w, layer.norm_out.w.data.as_slice()));
            blocks.push((no_b, layer.norm_out.b.as_slice()));
        }
        blocks
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut blocks = self.encoder.blocks_mut();
        for (layer, dh_w, dh_b, do_w, do_b, no_w, no_b) in [
            (
                &mut self.coarse,
                "coarse.dir_hidden.w",
                "coarse.dir_hidden.b",
                "coarse.dir_out.w",
                "coarse.dir_out.b",
                "coarse.norm_out.w",
                "coarse.norm_out.b",
            ),
            (
                &mut self.fine,
                "fine.dir_hidden.w",
                "fine.dir_hidden.b",
                "fine.dir_out.w",
                "fine.dir_out.b",
                "fine.norm_out.w",
                "fine.norm_out.b",
            ),
            (
                &mut self.ultra,
                "ultra.dir_hidden.w",
                "ultra.dir_hidden.b",
                "ultra.dir_out.w",
                "ultra.dir_out.b",
                "ultra.norm_out.w",
                "ultra.norm_out.b",
            ),
        ] {
            blocks.push((dh_w, layer.dir_hidden.w.data.as_mut_slice()));
            blocks.push((dh_b, layer.dir_hidden.b.as_mut_slice()));
            blocks.push((do_w, layer.dir_out.w.data.as_mut_slice()));
            blocks.push((do_b, layer.dir_out.b.as_mut_slice()));
            blocks.push((no_w, layer.norm_out.w.data.as_mut_slice()));
            blocks.push((no_b, layer.norm_out.b.as_mut_slice()));
        }
        blocks
    }
}

/// The three projected points for one instance.
#[derive(Debug, Clone)]
pub struct ProjectedTriple {
    pub coarse: BallPoint,
    pub fine: BallPoint,
    pub ultra: BallPoint,
}

impl ProjectedTriple {
    pub fn get(&self, g: Granularity) -> &BallPoint {
        match g {
            Granularity::Coarse => &self.coarse,
            Granularity::Fine => &self.fine,
            Granularity::Ultra => &self.ultra,
        }
    }
}

struct ForwardCache {
    encoder_cache: crate::encoder::EncodeCache,
    coarse: LayerCache,
    fine: LayerCache,
    ultra: LayerCache,
}

fn forward_cached(
    instance: &AnnotatedInstance,
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    mut mode: ForwardMode<'_>,
) -> Result<(ProjectedTriple, ForwardCache), ProjectionError> {
    let (encoder_out, encoder_cache) = encode_cached(instance, &model.encoder, vocab, words)?;
    let (v_coarse, coarse) =
        reparameterize_cached(&encoder_out, &model.coarse, mode.reborrow())?;
    let fine_in = concat(&encoder_out, v_coarse.coords());
    let (v_fine, fine) = reparameterize_cached(&fine_in, &model.fine, mode.reborrow())?;
    let ultra_in = concat(&encoder_out, v_fine.coords());
    let (v_ultra, ultra) = reparameterize_cached(&ultra_in, &model.ultra, mode.reborrow())?;
    Ok((
        ProjectedTriple { coarse: v_coarse, fine: v_fine, ultra: v_ultra },
        ForwardCache { encoder_cache, coarse, fine, ultra },
    ))
}

/// Projects an instance through all three granularity layers.
pub fn forward(
    instance: &AnnotatedInstance,
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    mode: ForwardMode<'_>,
) -> Result<ProjectedTriple, ProjectionError> {
    forward_cached(instance, model, vocab, words, mode).map(|(t, _)| t)
}

/// Per-granularity mixing weights for the combined losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GranularityWeights {
    pub coarse: LossWeights,
    pub fine: LossWeights,
    pub ultra: LossWeights,
}

impl GranularityWeights {
    pub fn uniform(w: LossWeights) -> Self {
        Self { coarse: w, fine: w, ultra: w }
    }

    pub fn get(&self, g: Granularity) -> &LossWeights {
        match g {
            Granularity::Coarse => &self.coarse,
            Granularity::Fine => &self.fine,
            Granularity::Ultra => &self.ultra,
        }
    }
}

fn granularity_loss(
    point: &BallPoint,
    golds: &[u32],
    table: &TypeEmbeddingTable,
    weights: &LossWeights,
) -> Result<f64, ProjectionError> {
    let space = table.space();
    let mut sum = 0.0;
    for &t in golds {
        let target = table.vector(t).map_err(|_| ProjectionError::GoldMissing(t))?;
        let target = BallPoint::new(target.to_vec())?;
        sum += crate::geometry::combined_loss(point, &target, weights, space)?;
    }
    Ok(sum / golds.len() as f64)
}

/// Sum over granularities with gold labels of the mean combined loss to
/// the gold type embeddings; label-free granularities contribute zero.
#[allow(clippy::too_many_arguments)]
pub fn instance_loss(
    instance: &AnnotatedInstance,
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
    weights: &GranularityWeights,
    mode: ForwardMode<'_>,
) -> Result<f64, ProjectionError> {
    if model.embed_dim != table.dim() {
        return Err(ProjectionError::EmbedDimMismatch {
            model: model.embed_dim,
            table: table.dim(),
        });
    }
    let triple = forward(instance, model, vocab, words, mode)?;
    let mut total = 0.0;
    for g in Granularity::ALL {
        let golds = instance.gold_with(inventory, g);
        if golds.is_empty() {
            continue;
        }
        total += granularity_loss(triple.get(g), &golds, table, weights.get(g))?;
    }
    Ok(total)
}

/// dL/dv for one granularity's mean-over-golds combined loss.
fn granularity_loss_grad(
    point: &BallPoint,
    golds: &[u32],
    table: &TypeEmbeddingTable,
    weights: &LossWeights,
) -> Result<Vec<f64>, ProjectionError> {
    let space = table.space();
    let mut grad = vec![0.0; point.dim()];
    for &t in golds {
        let target = table.vector(t).map_err(|_| ProjectionError::GoldMissing(t))?;
        let g = loss_gradient_raw(point.coords(), target, weights, space)?;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    let scale = 1.0 / golds.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok(grad)
}

/// Loss and parameter gradients for one instance, accumulated into
/// `grads`. Used by the trainer and the gradient-correctness checks.
#[allow(clippy::too_many_arguments)]
pub fn instance_loss_grad(
    instance: &AnnotatedInstance,
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
    weights: &GranularityWeights,
    mode: ForwardMode<'_>,
    grads: &mut StackedProjector,
) -> Result<f64, ProjectionError> {
    let (triple, cache) = forward_cached(instance, model, vocab, words, mode)?;
    let d_e = model.encoder.output_dim();

    let mut loss = 0.0;
    let mut loss_grads: Vec<Vec<f64>> = Vec::with_capacity(3);
    for g in Granularity::ALL {
        let golds = instance.gold_with(inventory, g);
        if golds.is_empty() {
            loss_grads.push(vec![0.0; model.embed_dim]);
            continue;
        }
        loss += granularity_loss(triple.get(g), &golds, table, weights.get(g))?;
        loss_grads.push(granularity_loss_grad(triple.get(g), &golds, table, weights.get(g))?);
    }
    let g_ultra = loss_grads.pop().unwrap();
    let mut g_fine = loss_grads.pop().unwrap();
    let mut g_coarse = loss_grads.pop().unwrap();

    let mut g_encoder = vec![0.0; d_e];

    // Ultra layer: input was [e; v_fine].
    let g_in = layer_backward(&model.ultra, &cache.ultra, &g_ultra, &mut grads.ultra);
    for (acc, g) in g_encoder.iter_mut().zip(&g_in[..d_e]) {
        *acc += g;
    }
    for (acc, g) in g_fine.iter_mut().zip(&g_in[d_e..]) {
        *acc += g;
    }

    // Fine layer: input was [e; v_coarse].
    let g_in = layer_backward(&model.fine, &cache.fine, &g_fine, &mut grads.fine);
    for (acc, g) in g_encoder.iter_mut().zip(&g_in[..d_e]) {
        *acc += g;
    }
    for (acc, g) in g_coarse.iter_mut().zip(&g_in[d_e..]) {
        *acc += g;
    }

    // Coarse layer: input was e.
    let g_in = layer_backward(&model.coarse, &cache.coarse, &g_coarse, &mut grads.coarse);
    for (acc, g) in g_encoder.iter_mut().zip(&g_in) {
        *acc += g;
    }

    encode_backward(
        &cache.encoder_cache,
        &model.encoder,
        words,
        &g_encoder,
        &mut grads.encoder,
        None,
    )?;
    Ok(loss)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub dropout: f64,
    pub weights: GranularityWeights,
    pub space: SpaceKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn with_space(space: SpaceKind) -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 1024,
            epochs: 50,
            max_grad_norm: 10.0,
            dropout: 0.3,
            weights: GranularityWeights::uniform(LossWeights::new(1.0, 1.0).unwrap()),
            space,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), ProjectionError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ProjectionError::BadConfig("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(ProjectionError::BadConfig("batch_size must be positive".into()));
        }
        if !self.max_grad_norm.is_finite() || self.max_grad_norm <= 0.0 {
            return Err(ProjectionError::BadConfig("max_grad_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ProjectionError::BadConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Trained model plus traces. The model is the epoch snapshot with the
/// best dev coarse macro-F1 (ties keep the later epoch).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StackedProjector,
    pub loss_trace: Vec<f64>,
    pub dev_f1_trace: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Macro-F1 of top-1 coarse predictions on a dataset; the model-selection
/// signal.
pub fn dev_coarse_macro_f1(
    dataset: &[AnnotatedInstance],
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
) -> Result<f64, ProjectionError> {
    let coarse_ids = inventory.ids_with(Granularity::Coarse);
    if coarse_ids.is_empty() {
        return Ok(0.0);
    }
    let mut preds: Vec<BTreeSet<u32>> = Vec::with_capacity(dataset.len());
    let mut golds: Vec<BTreeSet<u32>> = Vec::with_capacity(dataset.len());
    for instance in dataset {
        let triple = forward(instance, model, vocab, words, ForwardMode::Eval)?;
        let nn = nearest_types(table, triple.coarse.coords(), Some(&coarse_ids), 1)?;
        preds.push(nn.items.iter().map(|&(id, _)| id).collect());
        golds.push(instance.gold_with(inventory, Granularity::Coarse).into_iter().collect());
    }
    let prf = loose_macro_f1(&preds, &golds)
        .expect("aligned by construction");
    Ok(prf.f1)
}

/// Minibatch Adam over the mean instance loss, with global gradient-norm
/// clipping; selects the best epoch by dev coarse macro-F1. Deterministic
/// given `config.seed`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: StackedProjector,
    train_set: &[AnnotatedInstance],
    dev_set: &[AnnotatedInstance],
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
    config: &TrainConfig,
) -> Result<TrainOutcome, ProjectionError> {
    config.validate()?;
    if table.space() != config.space {
        return Err(ProjectionError::SpaceMismatch { config: config.space, table: table.space() });
    }
    if model.embed_dim != table.dim() {
        return Err(ProjectionError::EmbedDimMismatch {
            model: model.embed_dim,
            table: table.dim(),
        });
    }
    if train_set.is_empty() {
        return Err(ProjectionError::EmptyTrainSet);
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), &model);

    let mut best_dev_f1 =
        dev_coarse_macro_f1(dev_set, &model, vocab, words, table, inventory)?;
    let mut best_model = model.clone();
    let mut best_epoch = 0usize;

    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut dev_f1_trace = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_id, batch) in indices.chunks(config.batch_size).enumerate() {
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for &idx in batch {
                batch_loss += instance_loss_grad(
                    &train_set[idx],
                    &model,
                    vocab,
                    words,
                    table,
                    inventory,
                    &config.weights,
                    ForwardMode::Train(&mut rng),
                    &mut grads,
                )?;
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(ProjectionError::NanLoss { epoch, batch: batch_id });
            }
            for (_, block) in grads.blocks_mut() {
                for g in block {
                    *g *= scale;
                }
            }
            clip_global_norm(&mut grads, config.max_grad_norm);
            adam_step(&mut model, &grads, &mut adam)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        loss_trace.push(epoch_loss / train_set.len() as f64);

        let dev_f1 = dev_coarse_macro_f1(dev_set, &model, vocab, words, table, inventory)?;
        dev_f1_trace.push(dev_f1);
        if dev_f1 >= best_dev_f1 {
            best_dev_f1 = dev_f1;
            best_model = model.clone();
            best_epoch = epoch + 1;
        }
    }

    Ok(TrainOutcome { model: best_model, loss_trace, dev_f1_trace, best_epoch, best_dev_f1 })
}

/// Checkpoint metadata echoed alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub space: SpaceKind,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub dropout: f64,
    pub weights: GranularityWeights,
}

impl CheckpointMeta {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            space: config.space,
            seed: config.seed,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            epochs: config.epochs,
            max_grad_norm: config.max_grad_norm,
            dropout: config.dropout,
            weights: config.weights,
        }
    }
}

/// Writes a self-describing text checkpoint with round-trip-exact floats.
pub fn save_checkpoint<W: Write>(
    model: &StackedProjector,
    meta: &CheckpointMeta,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "typeball-checkpoint v1")?;
    let cfg = model.encoder.config;
    writeln!(
        w,
        "dims word_dim={} position_dim={} attention_dim={} context_window={} \
         max_mention_tokens={} embed_dim={} hidden_dim={}",
        model.encoder.word_dim,
        cfg.position_dim,
        cfg.attention_dim,
        cfg.context_window,
        cfg.max_mention_tokens,
        model.embed_dim,
        model.coarse.dir_hidden.w.rows,
    )?;
    writeln!(
        w,
        "config space={} seed={} learning_rate={:.16e} batch_size={} epochs={} \
         max_grad_norm={:.16e} dropout={:.16e}",
        meta.space,
        meta.seed,
        meta.learning_rate,
        meta.batch_size,
        meta.epochs,
        meta.max_grad_norm,
        meta.dropout,
    )?;
    writeln!(
        w,
        "weights coarse={:.16e},{:.16e} fine={:.16e},{:.16e} ultra={:.16e},{:.16e}",
        meta.weights.coarse.alpha(),
        meta.weights.coarse.beta(),
        meta.weights.fine.alpha(),
        meta.weights.fine.beta(),
        meta.weights.ultra.alpha(),
        meta.weights.ultra.beta(),
    )?;
    for (name, block) in model.blocks() {
        write!(w, "block {name} {}", block.len())?;
        for x in block {
            write!(w, " {x:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_kv(field: &str, line: usize) -> Result<(&str, &str), ProjectionError> {
    field.split_once('=').ok_or(ProjectionError::Parse {
        line,
        message: format!("expected key=value, got '{field}'"),
    })
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize) -> Result<T, ProjectionError> {
    value.parse().map_err(|_| ProjectionError::Parse {
        line,
        message: format!("bad number '{value}'"),
    })
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<R: BufRead>(
    r: R,
) -> Result<(StackedProjector, CheckpointMeta), ProjectionError> {
    let mut lines = r.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String), ProjectionError> {
        match lines.next() {
            Some((n, Ok(line))) => Ok((n + 1, line)),
            Some((n, Err(e))) => {
                Err(ProjectionError::Parse { line: n + 1, message: e.to_string() })
            }
            None => Err(ProjectionError::Parse {
                line: 0,
                message: format!("missing {expect} line"),
            }),
        }
    };

    let (n, magic) = next_line("header")?;
    if magic.trim() != "typeball-checkpoint v1" {
        return Err(ProjectionError::Parse { line: n, message: "bad checkpoint header".into() });
    }

    let (n, dims_line) = next_line("dims")?;
    let mut word_dim = 0usize;
    let mut position_dim = 0usize;
    let mut attention_dim = 0usize;
    let mut context_window = 0usize;
    let mut max_mention_tokens = 0usize;
    let mut embed_dim = 0usize;
    let mut hidden_dim = 0usize;
    for field in dims_line.split_whitespace().skip(1) {
        let (k, v) = parse_kv(field, n)?;
        match k {
            "word_dim" => word_dim = parse_num(v, n)?,
            "position_dim" => position_dim = parse_num(v, n)?,
            "attention_dim" => attention_dim = parse_num(v, n)?,
            "context_window" => context_window = parse_num(v, n)?,
            "max_mention_tokens" => max_mention_tokens = parse_num(v, n)?,
            "embed_dim" => embed_dim = parse_num(v, n)?,
            "hidden_dim" => hidden_dim = parse_num(v, n)?,
            other => {
                return Err(ProjectionError::Parse {
                    line: n,
                    message: format!("unknown dims field '{other}'"),
                })
            }
        }
    }

    let (n, config_line) = next_line("config")?;
    let mut space = SpaceKind::Hyperbolic;
    let mut seed = 0u64;
    let mut learning_rate = 0.0;
    let mut batch_size = 0usize;
    let mut epochs = 0usize;
    let mut max_grad_norm = 0.0;
    let mut dropout = 0.0;
    for field in config_line.split_whitespace().skip(1) {
        let (k, v) = parse_kv(field, n)?;
        match k {
            "space" => {
                space = v
                    .parse()
                    .map_err(|e: String| ProjectionError::Parse { line: n, message: e })?
            }
            "seed" => seed = parse_num(v, n)?,
            "learning_rate" => learning_rate = parse_num(v, n)?,
            "batch_size" => batch_size = parse_num(v, n)?,
            "epochs" => epochs = parse_num(v, n)?,
            "max_grad_norm" => max_grad_norm = parse_num(v, n)?,
            "dropout" => dropout = parse_num(v, n)?,
            other => {
                return Err(ProjectionError::Parse {
                    line: n,
                    message: format!("unknown config field '{other}'"),
                })
            }
        }
    }

    let (n, weights_line) = next_line("weights")?;
    let mut parsed_weights = Vec::with_capacity(3);
    for field in weights_line.split_whitespace().skip(1) {
        let (_, v) = parse_kv(field, n)?;
        let (a, b) = v.split_once(',').ok_or(ProjectionError::Parse {
            line: n,
            message: format!("expected alpha,beta in '{v}'"),
        })?;
        let w = LossWeights::new(parse_num(a, n)?, parse_num(b, n)?)
            .map_err(|e| ProjectionError::Parse { line: n, message: e.to_string() })?;
        parsed_weights.push(w);
    }
    if parsed_weights.len() != 3 {
        return Err(ProjectionError::Parse {
            line: n,
            message: "weights line must have coarse, fine and ultra".into(),
        });
    }
    let weights = GranularityWeights {
        coarse: parsed_weights[0],
        fine: parsed_weights[1],
        ultra: parsed_weights[2],
    };

    let encoder_config = EncoderConfig {
        position_dim,
        attention_dim,
        context_window,
        max_mention_tokens,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model =
        StackedProjector::init(encoder_config, word_dim, embed_dim, hidden_dim, dropout, &mut rng);

    let expected: Vec<(&'static str, usize)> =
        model.blocks().iter().map(|(name, b)| (*name, b.len())).collect();
    for (loaded, (name, expected_len)) in expected.into_iter().enumerate() {
        let (n, line) = next_line("block")?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some("block"), Some(got_name), Some(len)) if got_name == name => {
                let len: usize = parse_num(len, n)?;
                if len != expected_len {
                    return Err(ProjectionError::Parse {
                        line: n,
                        message: format!(
                            "block {name} has {len} values, expected {expected_len}"
                        ),
                    });
                }
            }
            _ => {
                return Err(ProjectionError::Parse {
                    line: n,
                    message: format!("expected 'block {name} <len>'"),
                })
            }
        }
        let values: Result<Vec<f64>, _> = parts.map(|s| s.parse::<f64>()).collect();
        let values =
            values.map_err(|e| ProjectionError::Parse { line: n, message: e.to_string() })?;
        if values.len() != expected_len {
            return Err(ProjectionError::Parse {
                line: n,
                message: format!(
                    "block {name} carries {} values, expected {expected_len}",
                    values.len()
                ),
            });
        }
        let mut blocks = model.blocks_mut();
        blocks[loaded].1.copy_from_slice(&values);
    }

    let meta = CheckpointMeta {
        space,
        seed,
        learning_rate,
        batch_size,
        epochs,
        max_grad_norm,
        dropout,
        weights,
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Vocabulary, WordEmbeddingTable};
    use crate::hierarchy::{TypeEntry, TypeInventory};
    use crate::optim::{finite_difference_check, FdOptions};

    fn tiny_vocab_words(dim: usize, seed: u64) -> (Vocabulary, WordEmbeddingTable) {
        let tokens: Vec<String> =
            ["alpha", "beta", "gamma", "delta", "ment"].iter().map(|s| s.to_string()).collect();
        let vocab = Vocabulary::new(&tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..vocab.len())
            .map(|_| (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        (vocab, WordEmbeddingTable::new(rows, true))
    }

    fn tiny_model(embed_dim: usize, dropout: f64, seed: u64) -> StackedProjector {
        let config = EncoderConfig {
            position_dim: 2,
            attention_dim: 3,
            context_window: 2,
            max_mention_tokens: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StackedProjector::init(config, 3, embed_dim, 7, dropout, &mut rng)
    }

    fn tiny_instance(gold: &[u32], num_types: u32) -> AnnotatedInstance {
        AnnotatedInstance::new(
            ["alpha", "beta", "ment", "gamma", "delta"].iter().map(|s| s.to_string()).collect(),
            2,
            3,
            gold.to_vec(),
            num_types,
        )
        .unwrap()
    }

    fn tiny_inventory() -> TypeInventory {
        TypeInventory::new(
            [
                ("root", Granularity::Coarse),
                ("mid_a", Granularity::Fine),
                ("mid_b", Granularity::Fine),
                ("leaf_a", Granularity::Ultra),
                ("leaf_b", Granularity::Ultra),
                ("leaf_c", Granularity::Ultra),
            ]
            .into_iter()
            .map(|(n, g)| TypeEntry { name: n.into(), granularity: g })
            .collect(),
        )
        .unwrap()
    }

    fn tiny_table(space: SpaceKind, dim: usize, seed: u64) -> TypeEmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.25..0.25)).collect();
                v
            })
            .collect();
        TypeEmbeddingTable::new(space, dim, vectors).unwrap()
    }

    #[test]
    fn reparameterize_identity_like_fixture() {
        // 2-d layer: dir path passes the input through, norm head reads
        // the first coordinate. Input (1, 0):
        // rbar = (1,0), r = (1,0), lambda = sigmoid(1).
        let layer = ProjectionLayer {
            dir_hidden: Affine {
                w: Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
                b: vec![0.0, 0.0],
            },
            dir_out: Affine {
                w: Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
                b: vec![0.0, 0.0],
            },
            norm_out: Affine { w: Mat::from_rows(vec![vec![1.0, 0.0]]), b: vec![0.0] },
            dropout: 0.0,
        };
        let v = reparameterize(&[1.0, 0.0], &layer, ForwardMode::Eval).unwrap();
        let sigma1 = 0.7310585786300049;
        assert!((v.coords()[0] - sigma1).abs() < 1e-15);
        assert!(v.coords()[1].abs() < 1e-15);
        assert!((v.norm() - sigma1).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_norm_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(4, 0.0, 9);
        for _ in 0..200 {
            let input: Vec<f64> =
                (0..model.coarse.in_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = reparameterize(&input, &model.coarse, ForwardMode::Eval).unwrap();
            let norm = v.norm();
            assert!(norm > 0.0 && norm <= MAX_NORM, "norm = {norm}");
        }
    }

    #[test]
    fn reparameterize_output_collinear_with_direction() {
        let model = tiny_model(4, 0.0, 11);
        let input: Vec<f64> = (0..model.coarse.in_dim()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let v = reparameterize(&input, &model.coarse, ForwardMode::Eval).unwrap();
        // Recompute the direction and compare angles.
        let h: Vec<f64> =
            model.coarse.dir_hidden.forward(&input).iter().map(|&x| x.max(0.0)).collect();
        let rbar = model.coarse.dir_out.forward(&h);
        let cos = crate::geometry::cosine_distance(v.coords(), &rbar).unwrap();
        assert!(cos.abs() < 1e-12, "cosine distance {cos}");
    }

    #[test]
    fn reparameterize_degenerate_direction_errors() {
        let layer = ProjectionLayer {
            dir_hidden: Affine::zeros(3, 2),
            dir_out: Affine::zeros(2, 3),
            norm_out: Affine { w: Mat::from_rows(vec![vec![1.0, 0.0]]), b: vec![0.0] },
            dropout: 0.0,
        };
        assert!(matches!(
            reparameterize(&[1.0, 1.0], &layer, ForwardMode::Eval),
            Err(ProjectionError::DegenerateDirection(_))
        ));
    }

    #[test]
    fn forward_outputs_stay_in_ball_and_eval_is_deterministic() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inst = tiny_instance(&[0], 6);
        for seed in 0..20 {
            let model = tiny_model(4, 0.0, seed);
            let t1 = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
            let t2 = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
            for (a, b) in [
                (&t1.coarse, &t2.coarse),
                (&t1.fine, &t2.fine),
                (&t1.ultra, &t2.ultra),
            ] {
                assert_eq!(a.coords(), b.coords());
                assert!(a.norm() > 0.0 && a.norm() <= MAX_NORM);
            }
        }
    }

    #[test]
    fn shortcut_carries_coarse_into_fine() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inst = tiny_instance(&[0], 6);
        let mut model = tiny_model(4, 0.0, 21);
        let base = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        // Perturb only the coarse direction head.
        model.coarse.dir_out.b[0] += 0.5;
        let bumped = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        assert_ne!(base.coarse.coords(), bumped.coarse.coords());
        assert_ne!(base.fine.coords(), bumped.fine.coords(), "shortcut not wired");
        assert_ne!(base.ultra.coords(), bumped.ultra.coords());
    }

    #[test]
    fn dropout_only_active_in_train_mode() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inst = tiny_instance(&[0], 6);
        // Modest rate: the tiny 7-unit hidden layer must keep at least one
        // live unit or the direction degenerates (correctly) to an error.
        let model = tiny_model(4, 0.2, 33);
        let eval1 = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        let eval2 = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        assert_eq!(eval1.coarse.coords(), eval2.coarse.coords());

        let mut rng1 = ChaCha8Rng::seed_from_u64(100);
        let mut rng2 = ChaCha8Rng::seed_from_u64(101);
        let t1 = forward(&inst, &model, &vocab, &words, ForwardMode::Train(&mut rng1)).unwrap();
        let t2 = forward(&inst, &model, &vocab, &words, ForwardMode::Train(&mut rng2)).unwrap();
        assert_ne!(t1.ultra.coords(), t2.ultra.coords(), "dropout should vary with the rng");
    }

    #[test]
    fn instance_loss_zero_at_planted_gold() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inventory = tiny_inventory();
        let inst = tiny_instance(&[0], 6); // coarse gold only
        let model = tiny_model(4, 0.0, 5);
        let triple = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        // Plant the coarse gold's embedding exactly at v_coarse.
        let mut vectors: Vec<Vec<f64>> = (0..6).map(|_| vec![0.1, 0.0, 0.0, 0.0]).collect();
        vectors[0] = triple.coarse.coords().to_vec();
        let table = TypeEmbeddingTable::new(SpaceKind::Hyperbolic, 4, vectors).unwrap();
        let weights = GranularityWeights::uniform(LossWeights::new(1.0, 0.0).unwrap());
        let loss = instance_loss(
            &inst, &model, &vocab, &words, &table, &inventory, &weights, ForwardMode::Eval,
        )
        .unwrap();
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn granularities_without_gold_contribute_zero() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inventory = tiny_inventory();
        let model = tiny_model(4, 0.0, 5);
        let table = tiny_table(SpaceKind::Hyperbolic, 4, 7);
        let weights = GranularityWeights::uniform(LossWeights::new(1.0, 1.0).unwrap());

        // Gold at coarse and ultra but not fine.
        let inst = tiny_instance(&[0, 3], 6);
        let loss = instance_loss(
            &inst, &model, &vocab, &words, &table, &inventory, &weights, ForwardMode::Eval,
        )
        .unwrap();
        let triple = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        let coarse_part =
            granularity_loss(&triple.coarse, &[0], &table, weights.get(Granularity::Coarse))
                .unwrap();
        let ultra_part =
            granularity_loss(&triple.ultra, &[3], &table, weights.get(Granularity::Ultra))
                .unwrap();
        assert!((loss - coarse_part - ultra_part).abs() < 1e-12);
    }

    #[test]
    fn two_ultra_golds_average_their_losses() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inventory = tiny_inventory();
        let model = tiny_model(4, 0.0, 5);
        let table = tiny_table(SpaceKind::Hyperbolic, 4, 13);
        let weights = GranularityWeights::uniform(LossWeights::new(1.0, 1.0).unwrap());
        let inst = tiny_instance(&[3, 4], 6);
        let loss = instance_loss(
            &inst, &model, &vocab, &words, &table, &inventory, &weights, ForwardMode::Eval,
        )
        .unwrap();
        let triple = forward(&inst, &model, &vocab, &words, ForwardMode::Eval).unwrap();
        let mut expect = 0.0;
        for t in [3u32, 4] {
            let target = BallPoint::new(table.vector(t).unwrap().to_vec()).unwrap();
            expect += crate::geometry::combined_loss(
                &triple.ultra,
                &target,
                weights.get(Granularity::Ultra),
                SpaceKind::Hyperbolic,
            )
            .unwrap();
        }
        expect /= 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_under_gold_permutation() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inventory = tiny_inventory();
        let model = tiny_model(4, 0.0, 5);
        let table = tiny_table(SpaceKind::Euclidean, 4, 17);
        let weights = GranularityWeights::uniform(LossWeights::new(1.0, 1.0).unwrap());
        let a = tiny_instance(&[3, 4, 5], 6);
        let b = tiny_instance(&[5, 3, 4], 6);
        let la = instance_loss(
            &a, &model, &vocab, &words, &table, &inventory, &weights, ForwardMode::Eval,
        )
        .unwrap();
        let lb = instance_loss(
            &b, &model, &vocab, &words, &table, &inventory, &weights, ForwardMode::Eval,
        )
        .unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (vocab, words) = tiny_vocab_words(3, 1);
        let inventory = tiny_inventory();
        let weight_grid = [
            LossWeights::new(1.0, 0.0).unwrap(),
            LossWeights::new(0.0, 1.0).unwrap(),
            LossWeights::new(0.7, 1.3).unwrap(),
        ];
        for space in [SpaceKind::Hyperbolic, SpaceKind::Euclidean] {
            for (i, w) in weight_grid.iter().enumerate() {
                let weights = GranularityWeights::uniform(*w);
                let seed = 40 + i as u64;
                let mut model = tiny_model(4, 0.0, seed);
                let table = tiny_table(space, 4, seed);
                let inst = tiny_instance(&[0, 1, 3, 4], 6);
                let mut analytic = model.zeros_like();
                instance_loss_grad(
                    &inst,
                    &model,
                    &vocab,
                    &words,
                    &table,
                    &inventory,
                    &weights,
                    ForwardMode::Eval,
                    &mut analytic,
                )
                .unwrap();
                let report = finite_difference_check(
                    |m: &StackedProjector| {
                        instance_loss(
                            &inst,
                            m,
                            &vocab,
                            &words,
                            &table,
                            &inventory,
                            &weights,
                            ForwardMode::Eval,
                        )
                    },
                    &mut model,
                    &analytic,
                    FdOptions { max_coords_per_block: 6, seed, ..FdOptions::default() },
                )
                .unwrap();
                assert!(
                    report.passed(),
                    "space {space:?} weights {w:?}: failures {:?} (max rel {})",
                    report.failed_blocks(),
                    report.max_rel_err()
                );
            }
        }
    }

    fn planted_corpus(
        n: usize,
        seed: u64,
    ) -> (Vec<AnnotatedInstance>, TypeInventory) {
        // 6 types: 1 coarse, 2 fine, 3 ultra; instances carry a
        // leaf-correlated mention token.
        let inventory = tiny_inventory();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mentions = ["alpha", "beta", "gamma"];
        let instances = (0..n)
            .map(|_| {
                let leaf = rng.random_range(0..3u32);
                let mention = mentions[leaf as usize];
                let fine = 1 + (leaf % 2);
                AnnotatedInstance::new(
                    ["delta", mention, "delta"].iter().map(|s| s.to_string()).collect(),
                    1,
                    2,
                    vec![0, fine, 3 + leaf],
                    6,
                )
                .unwrap()
            })
            .collect();
        (instances, inventory)
    }

    #[test]
    fn training_reduces_loss_by_half_on_separable_fixture() {
        let (vocab, words) = tiny_vocab_words(3, 2);
        let (train_set, inventory) = planted_corpus(50, 77);
        let table = tiny_table(SpaceKind::Hyperbolic, 4, 99);
        let model = tiny_model(4, 0.0, 1);
        let config = TrainConfig {
            learning_rate: 0.005,
            batch_size: 10,
            epochs: 50,
            dropout: 0.0,
            ..TrainConfig::with_space(SpaceKind::Hyperbolic)
        };
        let outcome = train(
            model,
            &train_set,
            &train_set[..10],
            &vocab,
            &words,
            &table,
            &inventory,
            &config,
        )
        .unwrap();
        let first = outcome.loss_trace[0];
        let last = *outcome.loss_trace.last().unwrap();
        assert!(last <= 0.5 * first, "loss went {first} -> {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (vocab, words) = tiny_vocab_words(3, 2);
        let (train_set, inventory) = planted_corpus(10, 78);
        let table = tiny_table(SpaceKind::Hyperbolic, 4, 99);
        let model = tiny_model(4, 0.0, 2);
        let before: Vec<Vec<f64>> =
            model.blocks().iter().map(|(_, b)| b.to_vec()).collect();
        let config = TrainConfig {
            learning_rate: 0.0,
            batch_size: 5,
            epochs: 3,
            dropout: 0.0,
            ..TrainConfig::with_space(SpaceKind::Hyperbolic)
        };
        let outcome = train(
            model,
            &train_set,
            &train_set[..2],
            &vocab,
            &words,
            &table,
            &inventory,
            &config,
        )
        .unwrap();
        // The final (not just best) parameters are untouched; with no
        // learning the best model is the init snapshot.
        for ((_, after), before) in outcome.model.blocks().iter().zip(&before) {
            assert_eq!(*after, before.as_slice());
        }
    }

    #[test]
    fn same_seed_reproduces_traces_and_model() {
        let (vocab, words) = tiny_vocab_words(3, 2);
        let (train_set, inventory) = planted_corpus(20, 79);
        let table = tiny_table(SpaceKind::Euclidean, 4, 99);
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            epochs: 5,
            dropout: 0.2,
            ..TrainConfig::with_space(SpaceKind::Euclidean)
        };
        let run = |seed: u64| {
            let model = tiny_model(4, 0.2, seed);
            train(
                model,
                &train_set,
                &train_set[..5],
                &vocab,
                &words,
                &table,
                &inventory,
                &TrainConfig { seed, ..config.clone() },
            )
            .unwrap()
        };
        let a = run(4);
        let b = run(4);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.dev_f1_trace, b.dev_f1_trace);
        for ((_, ba), (_, bb)) in a.model.blocks().iter().zip(b.model.blocks().iter()) {
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn space_mismatch_is_rejected() {
        let (vocab, words) = tiny_vocab_words(3, 2);
        let (train_set, inventory) = planted_corpus(5, 80);
        let table = tiny_table(SpaceKind::Euclidean, 4, 99);
        let model = tiny_model(4, 0.0, 3);
        let config = TrainConfig::with_space(SpaceKind::Hyperbolic);
        assert!(matches!(
            train(model, &train_set, &train_set, &vocab, &words, &table, &inventory, &config),
            Err(ProjectionError::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (vocab, words) = tiny_vocab_words(3, 2);
        let (train_set, inventory) = planted_corpus(5, 81);
        let table = tiny_table(SpaceKind::Hyperbolic, 4, 99);
        let model = tiny_model(4, 0.0, 3);
        let before: Vec<Vec<f64>> = model.blocks().iter().map(|(_, b)| b.to_vec()).collect();
        let config = TrainConfig {
            epochs: 0,
            dropout: 0.0,
            ..TrainConfig::with_space(SpaceKind::Hyperbolic)
        };
        let outcome = train(
            model,
            &train_set,
            &train_set,
            &vocab,
            &words,
            &table,
            &inventory,
            &config,
        )
        .unwrap();
        assert_eq!(outcome.best_epoch, 0);
        for ((_, after), before) in outcome.model.blocks().iter().zip(&before) {
            assert_eq!(*after, before.as_slice());
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let model = tiny_model(4, 0.3, 123);
        let config = TrainConfig {
            seed: 9,
            ..TrainConfig::with_space(SpaceKind::Euclidean)
        };
        let meta = CheckpointMeta::from_config(&config);
        let mut buf = Vec::new();
        save_checkpoint(&model, &meta, &mut buf).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(loaded_meta, meta);
        for ((name, a), (_, b)) in model.blocks().iter().zip(loaded.blocks().iter()) {
            assert_eq!(a, b, "block {name} differs");
        }
        // Byte-identical when re-saved.
        let mut buf2 = Vec::new();
        save_checkpoint(&loaded, &loaded_meta, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn checkpoint_rejects_corrupt_input() {
        let model = tiny_model(4, 0.3, 123);
        let meta = CheckpointMeta::from_config(&TrainConfig::with_space(SpaceKind::Hyperbolic));
        let mut buf = Vec::new();
        save_checkpoint(&model, &meta, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let corrupted = text.replace("typeball-checkpoint v1", "garbage");
        assert!(load_checkpoint(corrupted.as_bytes()).is_err());
        // Truncated block section.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        let truncated = lines.join("\n");
        assert!(load_checkpoint(truncated.as_bytes()).is_err());
    }
}
