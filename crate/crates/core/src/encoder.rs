//! Mention-in-context feature encoder.
//!
//! The context window around a mention (up to `context_window` tokens on
//! each side, mention excluded) is pooled with a single-head tanh
//! attention over concatenated word and relative-position features; the
//! mention tokens themselves are pooled with the same attention shape
//! over word features alone. The output is `[M; C]` with
//! `d_m = d_word` and `d_c = d_word + d_pos`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hierarchy::AnnotatedInstance;
use crate::linalg::{dot, Mat};
use crate::optim::ParamBlocks;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("empty mention span")]
    EmptyMention,
    #[error("no context tokens within the window")]
    EmptyContext,
    #[error("upstream gradient has dimension {got}, expected {expected}")]
    UpstreamDimMismatch { got: usize, expected: usize },
    #[error("word table row {row} out of range ({rows} rows)")]
    WordRowOutOfRange { row: usize, rows: usize },
}

/// Token-to-row lookup with UNK/PAD specials; indices are dense over the
/// word table rows.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    unk: usize,
    pad: usize,
}

pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

impl Vocabulary {
    /// Builds a vocabulary over the given tokens; UNK and PAD rows are
    /// appended unless already present.
    pub fn new(tokens: &[String]) -> Self {
        let mut index = BTreeMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            index.insert(tok.clone(), i);
        }
        let mut next = tokens.len();
        let unk = *index.entry(UNK_TOKEN.to_string()).or_insert_with(|| {
            let i = next;
            next += 1;
            i
        });
        let pad = *index.entry(PAD_TOKEN.to_string()).or_insert_with(|| {
            let i = next;
            next += 1;
            i
        });
        Self { index, unk, pad }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk)
    }

    pub fn unk_index(&self) -> usize {
        self.unk
    }

    pub fn pad_index(&self) -> usize {
        self.pad
    }
}

/// Pretrained word vectors, one row per vocabulary index. Frozen by
/// default: gradients for the rows are only produced when requested.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    rows: Mat,
    frozen: bool,
}

impl WordEmbeddingTable {
    pub fn new(rows: Vec<Vec<f64>>, frozen: bool) -> Self {
        Self { rows: Mat::from_rows(rows), frozen }
    }

    pub fn dim(&self) -> usize {
        self.rows.cols
    }

    pub fn num_rows(&self) -> usize {
        self.rows.rows
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn row(&self, i: usize) -> Result<&[f64], EncoderError> {
        if i >= self.rows.rows {
            return Err(EncoderError::WordRowOutOfRange { row: i, rows: self.rows.rows });
        }
        Ok(self.rows.row(i))
    }

    #[cfg(test)]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        self.rows.row_mut(i)
    }
}

/// Structural hyperparameters of the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Relative-position embedding dimension.
    pub position_dim: usize,
    /// Attention hidden dimension for both scorers.
    pub attention_dim: usize,
    /// Max context tokens per side of the mention.
    pub context_window: usize,
    /// Mentions longer than this keep only their first tokens.
    pub max_mention_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { position_dim: 25, attention_dim: 100, context_window: 10, max_mention_tokens: 5 }
    }
}

/// Trainable encoder parameters.
///
/// `position` has `2 * context_window + 1` rows covering relative offsets
/// -L..=L (the 0 row is reserved for completeness; context excludes the
/// mention, so it stays untouched).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub word_dim: usize,
    pub position: Mat,
    pub ctx_w: Mat,
    pub ctx_s: Vec<f64>,
    pub men_w: Mat,
    pub men_s: Vec<f64>,
}

impl EncoderParams {
    /// Random small init, uniform in [-0.1, 0.1].
    pub fn init(config: EncoderConfig, word_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 0.1;
        let mut mat = |rows: usize, cols: usize| {
            let mut m = Mat::zeros(rows, cols);
            for x in &mut m.data {
                *x = rng.random_range(-scale..scale);
            }
            m
        };
        let ctx_feat = word_dim + config.position_dim;
        let position = mat(2 * config.context_window + 1, config.position_dim);
        let ctx_w = mat(config.attention_dim, ctx_feat);
        let men_w = mat(config.attention_dim, word_dim);
        let ctx_s: Vec<f64> =
            (0..config.attention_dim).map(|_| rng.random_range(-scale..scale)).collect();
        let men_s: Vec<f64> =
            (0..config.attention_dim).map(|_| rng.random_range(-scale..scale)).collect();
        Self { config, word_dim, position, ctx_w, ctx_s, men_w, men_s }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            word_dim: self.word_dim,
            position: Mat::zeros(self.position.rows, self.position.cols),
            ctx_w: Mat::zeros(self.ctx_w.rows, self.ctx_w.cols),
            ctx_s: vec![0.0; self.ctx_s.len()],
            men_w: Mat::zeros(self.men_w.rows, self.men_w.cols),
            men_s: vec![0.0; self.men_s.len()],
        }
    }

    /// d_c: pooled context feature dimension.
    pub fn context_dim(&self) -> usize {
        self.word_dim + self.config.position_dim
    }

    /// d_m: pooled mention feature dimension.
    pub fn mention_dim(&self) -> usize {
        self.word_dim
    }

    /// Encoder output dimension d_m + d_c.
    pub fn output_dim(&self) -> usize {
        self.mention_dim() + self.context_dim()
    }
}

impl ParamBlocks for EncoderParams {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("encoder.position", self.position.data.as_slice()),
            ("encoder.ctx_w", self.ctx_w.data.as_slice()),
            ("encoder.ctx_s", self.ctx_s.as_slice()),
            ("encoder.men_w", self.men_w.data.as_slice()),
            ("encoder.men_s", self.men_s.as_slice()),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("encoder.position", self.position.data.as_mut_slice()),
            ("encoder.ctx_w", self.ctx_w.data.as_mut_slice()),
            ("encoder.ctx_s", self.ctx_s.as_mut_slice()),
            ("encoder.men_w", self.men_w.data.as_mut_slice()),
            ("encoder.men_s", self.men_s.as_mut_slice()),
        ]
    }
}

/// Gradients of the encoder parameters; the word block is present only
/// when the table is trainable.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub params: EncoderParams,
    /// Sparse per-row word-vector gradients, absent for a frozen table.
    pub word_rows: Option<BTreeMap<usize, Vec<f64>>>,
}

struct ContextToken {
    word_row: usize,
    pos_row: usize,
    features: Vec<f64>,
    tanh_wx: Vec<f64>,
}

struct MentionToken {
    word_row: usize,
    tanh_wx: Vec<f64>,
}

pub(crate) struct EncodeCache {
    ctx: Vec<ContextToken>,
    ctx_attention: Vec<f64>,
    men: Vec<MentionToken>,
    men_attention: Vec<f64>,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn tanh_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

pub(crate) fn encode_cached(
    instance: &AnnotatedInstance,
    params: &EncoderParams,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
) -> Result<(Vec<f64>, EncodeCache), EncoderError> {
    let (start, end) = instance.mention_span();
    let tokens = instance.context_tokens();
    if start >= end {
        return Err(EncoderError::EmptyMention);
    }
    let window = params.config.context_window;

    // Context = up to `window` tokens strictly left and right of the
    // mention, with relative offsets -window..=-1 and 1..=window.
    let mut positions = Vec::new();
    let left_from = start.saturating_sub(window);
    for i in left_from..start {
        positions.push((i, i as isize - start as isize));
    }
    let right_to = (end + window).min(tokens.len());
    for i in end..right_to {
        positions.push((i, (i - end + 1) as isize));
    }
    if positions.is_empty() {
        return Err(EncoderError::EmptyContext);
    }

    let mut ctx_tokens = Vec::with_capacity(positions.len());
    let mut ctx_scores = Vec::with_capacity(positions.len());
    for (i, offset) in positions {
        let word_row = vocab.lookup(&tokens[i]);
        let pos_row = (offset + window as isize) as usize;
        let word = words.row(word_row)?;
        let mut features = Vec::with_capacity(params.context_dim());
        features.extend_from_slice(word);
        features.extend_from_slice(params.position.row(pos_row));
        let tanh_wx = tanh_vec(&params.ctx_w.matvec(&features));
        ctx_scores.push(dot(&params.ctx_s, &tanh_wx));
        ctx_tokens.push(ContextToken { word_row, pos_row, features, tanh_wx });
    }
    let ctx_attention = softmax(&ctx_scores);
    let mut context = vec![0.0; params.context_dim()];
    for (tok, &a) in ctx_tokens.iter().zip(&ctx_attention) {
        for (c, f) in context.iter_mut().zip(&tok.features) {
            *c += a * f;
        }
    }

    // Mention tokens, tail-truncated to the configured cap.
    let men_end = end.min(start + params.config.max_mention_tokens);
    let mut men_tokens = Vec::with_capacity(men_end - start);
    let mut men_scores = Vec::with_capacity(men_end - start);
    for token in &tokens[start..men_end] {
        let word_row = vocab.lookup(token);
        let word = words.row(word_row)?;
        let tanh_wx = tanh_vec(&params.men_w.matvec(word));
        men_scores.push(dot(&params.men_s, &tanh_wx));
        men_tokens.push(MentionToken { word_row, tanh_wx });
    }
    let men_attention = softmax(&men_scores);
    let mut mention = vec![0.0; params.mention_dim()];
    for (tok, &a) in men_tokens.iter().zip(&men_attention) {
        let word = words.row(tok.word_row)?;
        for (m, w) in mention.iter_mut().zip(word) {
            *m += a * w;
        }
    }

    let mut out = mention;
    out.extend_from_slice(&context);
    Ok((out, EncodeCache { ctx: ctx_tokens, ctx_attention, men: men_tokens, men_attention }))
}

/// Feature vector [M; C] for the mention in its context.
pub fn encode(
    instance: &AnnotatedInstance,
    params: &EncoderParams,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
) -> Result<Vec<f64>, EncoderError> {
    encode_cached(instance, params, vocab, words).map(|(out, _)| out)
}

/// Backward pass through a tanh-attention pooling block.
///
/// `upstream` is dL/d(pooled); `features[i]` are the pooled items,
/// `tanh_wx[i]` the cached scorer activations, `attention` the softmax.
/// Returns dL/d(features[i]) and accumulates scorer gradients.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    upstream: &[f64],
    features: &[&[f64]],
    tanh_wx: &[&[f64]],
    attention: &[f64],
    w: &Mat,
    s: &[f64],
    grad_w: &mut Mat,
    grad_s: &mut [f64],
) -> Vec<Vec<f64>> {
    let n = features.len();
    // dL/da_i = upstream . x_i
    let dl_da: Vec<f64> = features.iter().map(|x| dot(upstream, x)).collect();
    // softmax backward: dL/de_i = a_i (dL/da_i - sum_j a_j dL/da_j)
    let mix: f64 = attention.iter().zip(&dl_da).map(|(a, g)| a * g).sum();
    let dl_de: Vec<f64> = attention.iter().zip(&dl_da).map(|(a, g)| a * (g - mix)).collect();

    let mut grads_x: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        // score e_i = s . tanh(W x_i)
        let t = tanh_wx[i];
        grad_s.iter_mut().zip(t).for_each(|(g, ti)| *g += dl_de[i] * ti);
        // q_i = dL/d(W x_i) = dl_de[i] * s (1 - t^2)
        let q: Vec<f64> =
            s.iter().zip(t).map(|(si, ti)| dl_de[i] * si * (1.0 - ti * ti)).collect();
        grad_w.add_outer(&q, features[i]);
        // dL/dx_i = a_i * upstream + W^T q_i
        let mut gx = w.matvec_t(&q);
        for (g, u) in gx.iter_mut().zip(upstream) {
            *g += attention[i] * u;
        }
        grads_x.push(gx);
    }
    grads_x
}

pub(crate) fn encode_backward(
    cache: &EncodeCache,
    params: &EncoderParams,
    words: &WordEmbeddingTable,
    upstream: &[f64],
    grad_params: &mut EncoderParams,
    mut word_rows: Option<&mut BTreeMap<usize, Vec<f64>>>,
) -> Result<(), EncoderError> {
    if upstream.len() != params.output_dim() {
        return Err(EncoderError::UpstreamDimMismatch {
            got: upstream.len(),
            expected: params.output_dim(),
        });
    }
    let d_m = params.mention_dim();
    let up_mention = &upstream[..d_m];
    let up_context = &upstream[d_m..];

    // Context block.
    let features: Vec<&[f64]> = cache.ctx.iter().map(|t| t.features.as_slice()).collect();
    let tanh_wx: Vec<&[f64]> = cache.ctx.iter().map(|t| t.tanh_wx.as_slice()).collect();
    let grads_x = attention_backward(
        up_context,
        &features,
        &tanh_wx,
        &cache.ctx_attention,
        &params.ctx_w,
        &params.ctx_s,
        &mut grad_params.ctx_w,
        &mut grad_params.ctx_s,
    );
    for (tok, gx) in cache.ctx.iter().zip(&grads_x) {
        let pos_grad = &gx[params.word_dim..];
        for (g, p) in grad_params.position.row_mut(tok.pos_row).iter_mut().zip(pos_grad) {
            *g += p;
        }
        if let Some(word_rows) = word_rows.as_mut() {
            let entry =
                word_rows.entry(tok.word_row).or_insert_with(|| vec![0.0; params.word_dim]);
            for (e, g) in entry.iter_mut().zip(&gx[..params.word_dim]) {
                *e += g;
            }
        }
    }

    // Mention block.
    let men_features: Vec<&[f64]> =
        cache.men.iter().map(|t| words.row(t.word_row).expect("cached row")).collect();
    let men_tanh: Vec<&[f64]> = cache.men.iter().map(|t| t.tanh_wx.as_slice()).collect();
    let grads_m = attention_backward(
        up_mention,
        &men_features,
        &men_tanh,
        &cache.men_attention,
        &params.men_w,
        &params.men_s,
        &mut grad_params.men_w,
        &mut grad_params.men_s,
    );
    if let Some(word_rows) = word_rows.as_mut() {
        for (tok, gm) in cache.men.iter().zip(&grads_m) {
            let entry =
                word_rows.entry(tok.word_row).or_insert_with(|| vec![0.0; params.word_dim]);
            for (e, g) in entry.iter_mut().zip(gm) {
                *e += g;
            }
        }
    }
    Ok(())
}

/// Gradients of all encoder parameters for the given upstream gradient.
/// The word-row block is produced only for a trainable table.
pub fn encode_gradient(
    instance: &AnnotatedInstance,
    params: &EncoderParams,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    upstream: &[f64],
) -> Result<EncoderGrads, EncoderError> {
    let (_, cache) = encode_cached(instance, params, vocab, words)?;
    let mut grad_params = params.zeros_like();
    let mut word_rows = if words.frozen() { None } else { Some(BTreeMap::new()) };
    encode_backward(&cache, params, words, upstream, &mut grad_params, word_rows.as_mut())?;
    Ok(EncoderGrads { params: grad_params, word_rows })
}
