//! Cross-concept aggregation: proxy bank, transformer decoder, fusion MLP,
//! relevance weights, and the effective-rank diagnostic.
//!
//! A bank of per-concept proxies (initialized as a copy of the stable
//! concept embeddings) is refined by a small transformer decoder that
//! self-attends across concepts and cross-attends to the prompt tokens. A
//! fusion MLP then combines each stable embedding with its refined proxy
//! into a summary row, and the relevance of every other concept to the
//! active one is the cosine between the active embedding and that summary.
//!
//! Everything here treats the concept axis as a set: permuting bank rows
//! permutes outputs without changing their values beyond roundoff. All
//! forward passes have matching hand-written backward passes; the
//! consolidation objective in the diffusion module stitches them together.
//!
//! Row-vector convention throughout: a bank is `G x d` and projections
//! multiply on the right.

use crate::error::{Fl2tError, Result};
use crate::numerics::{dot, norm, singular_values, softmax_rows, Matrix, SeededRng};
use crate::regularizers::RelevanceWeights;
use serde::{Deserialize, Serialize};

/// Standard deviation for decoder and fusion weight initialization.
pub const AGGREGATION_INIT_STD: f64 = 0.01;

/// Small constant inside the optional layer-norm denominator.
const LN_EPS: f64 = 1e-8;

/// How relevance weights are computed from embeddings and summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// Cosine similarity; always lands in `[-1, 1]`.
    Cosine,
    /// Raw inner product, clamped into `[-1, 1]` so downstream bounds that
    /// assume that interval still apply.
    RawInnerProduct,
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Cosine
    }
}

/// Stable concept embeddings, one row per concept, in concept-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbeddingBank {
    matrix: Matrix,
}

impl ConceptEmbeddingBank {
    /// Wrap a `G x d` matrix; every row must be nonzero, since a zero
    /// embedding has no direction to match prompts or proxies against.
    pub fn new(matrix: Matrix) -> Result<ConceptEmbeddingBank> {
        for i in 0..matrix.rows() {
            if matrix.row(i).iter().all(|v| *v == 0.0) {
                return Err(Fl2tError::Degenerate(format!(
                    "concept embedding row {i} is identically zero"
                )));
            }
        }
        Ok(ConceptEmbeddingBank { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn concepts(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }
}

/// Trainable proxy embeddings, same shape as the concept bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyBank {
    pub matrix: Matrix,
}

/// Fresh proxies: an independent copy of the concept embeddings.
///
/// The copy is deliberate; proxies drift during joint training while the
/// stable embeddings keep serving prompt matching.
pub fn init_proxies(bank: &ConceptEmbeddingBank) -> ProxyBank {
    ProxyBank {
        matrix: bank.matrix().clone(),
    }
}

/// Weights of one decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub cq: Matrix,
    pub ck: Matrix,
    pub cv: Matrix,
    pub co: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_w2: Matrix,
}

impl DecoderLayerParams {
    fn zeros(d: usize) -> DecoderLayerParams {
        DecoderLayerParams {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            cq: Matrix::zeros(d, d),
            ck: Matrix::zeros(d, d),
            cv: Matrix::zeros(d, d),
            co: Matrix::zeros(d, d),
            ffn_w1: Matrix::zeros(d, 4 * d),
            ffn_w2: Matrix::zeros(4 * d, d),
        }
    }

    fn init(rng: &mut SeededRng, d: usize, std: f64) -> DecoderLayerParams {
        DecoderLayerParams {
            wq: crate::numerics::gaussian(rng, d, d, 0.0, std),
            wk: crate::numerics::gaussian(rng, d, d, 0.0, std),
            wv: crate::numerics::gaussian(rng, d, d, 0.0, std),
            wo: crate::numerics::gaussian(rng, d, d, 0.0, std),
            cq: crate::numerics::gaussian(rng, d, d, 0.0, std),
            ck: crate::numerics::gaussian(rng, d, d, 0.0, std),
            cv: crate::numerics::gaussian(rng, d, d, 0.0, std),
            co: crate::numerics::gaussian(rng, d, d, 0.0, std),
            ffn_w1: crate::numerics::gaussian(rng, d, 4 * d, 0.0, std),
            ffn_w2: crate::numerics::gaussian(rng, 4 * d, d, 0.0, std),
        }
    }
}

/// Full decoder: a stack of layers plus the layer-norm toggle.
///
/// Each layer applies, with residual connections:
/// self-attention over the proxy rows, cross-attention against the prompt
/// token embeddings, and a 4x tanh feed-forward block. Attention is
/// single-head scaled dot product. Layer norm is off by default and, when
/// enabled, normalizes each block input (no learned affine).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
    pub layer_norm: bool,
}

impl DecoderParams {
    /// Gaussian-initialized decoder.
    pub fn init(rng: &mut SeededRng, d: usize, layers: usize, layer_norm: bool) -> DecoderParams {
        DecoderParams {
            layers: (0..layers)
                .map(|_| DecoderLayerParams::init(rng, d, AGGREGATION_INIT_STD))
                .collect(),
            layer_norm,
        }
    }

    /// All-zero decoder; forward passes become the identity.
    pub fn zeros(d: usize, layers: usize) -> DecoderParams {
        DecoderParams {
            layers: (0..layers).map(|_| DecoderLayerParams::zeros(d)).collect(),
            layer_norm: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.wq.rows())
    }
}

/// Fusion MLP `concat(C_i, P'_i) -> summary`, hidden width `2d`, tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionMlp {
    /// `2d x 2d`.
    pub w1: Matrix,
    /// `2d x d`.
    pub w2: Matrix,
}

impl FusionMlp {
    pub fn init(rng: &mut SeededRng, d: usize) -> FusionMlp {
        FusionMlp {
            w1: crate::numerics::gaussian(rng, 2 * d, 2 * d, 0.0, AGGREGATION_INIT_STD),
            w2: crate::numerics::gaussian(rng, 2 * d, d, 0.0, AGGREGATION_INIT_STD),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.cols()
    }
}

fn ln_forward(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean: f64 = row.iter().sum::<f64>() / d;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn ln_backward(normalized: &Matrix, inv_std: &[f64], d_out: &Matrix) -> Matrix {
    let d = normalized.cols() as f64;
    let mut dx = Matrix::zeros(normalized.rows(), normalized.cols());
    for r in 0..normalized.rows() {
        let y = normalized.row(r);
        let dy = d_out.row(r);
        let mean_dy: f64 = dy.iter().sum::<f64>() / d;
        let mean_dy_y: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d;
        let drow = dx.row_mut(r);
        for c in 0..y.len() {
            drow[c] = inv_std[r] * (dy[c] - mean_dy - y[c] * mean_dy_y);
        }
    }
    dx
}

fn softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    let mut dz = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let drow = dz.row_mut(r);
        for c in 0..p.len() {
            drow[c] = p[c] * (dp[c] - inner);
        }
    }
    dz
}

struct AttentionCache {
    input: Matrix,
    keys_input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    mixed: Matrix,
}

fn attention_forward(
    queries_in: &Matrix,
    keys_in: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
) -> (Matrix, AttentionCache) {
    let d = wq.rows() as f64;
    let q = queries_in.mul_unchecked(wq);
    let k = keys_in.mul_unchecked(wk);
    let v = keys_in.mul_unchecked(wv);
    let scores = q.mul_t(&k).scaled(1.0 / d.sqrt());
    let probs = softmax_rows(&scores);
    let mixed = probs.mul_unchecked(&v);
    let out = mixed.mul_unchecked(wo);
    (
        out,
        AttentionCache {
            input: queries_in.clone(),
            keys_input: keys_in.clone(),
            q,
            k,
            v,
            probs,
            mixed,
        },
    )
}

struct AttentionGrads {
    d_wq: Matrix,
    d_wk: Matrix,
    d_wv: Matrix,
    d_wo: Matrix,
    d_queries_in: Matrix,
    d_keys_in: Matrix,
}

fn attention_backward(
    cache: &AttentionCache,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    d_out: &Matrix,
) -> AttentionGrads {
    let d = wq.rows() as f64;
    let d_wo = cache.mixed.tmul(d_out);
    let d_mixed = d_out.mul_t(wo);
    let d_probs = d_mixed.mul_t(&cache.v);
    let d_v = cache.probs.tmul(&d_mixed);
    let d_scores = softmax_backward(&cache.probs, &d_probs).scaled(1.0 / d.sqrt());
    let d_q = d_scores.mul_unchecked(&cache.k);
    let d_k = d_scores.tmul(&cache.q);
    let d_wq = cache.input.tmul(&d_q);
    let d_wk = cache.keys_input.tmul(&d_k);
    let d_wv = cache.keys_input.tmul(&d_v);
    let d_queries_in = d_q.mul_t(wq);
    let mut d_keys_in = d_k.mul_t(wk);
    d_keys_in.add_scaled_assign(&d_v.mul_t(wv), 1.0);
    AttentionGrads {
        d_wq,
        d_wk,
        d_wv,
        d_wo,
        d_queries_in,
        d_keys_in,
    }
}

struct DecoderLayerCache {
    self_attn: AttentionCache,
    self_norm: Option<(Matrix, Vec<f64>)>,
    cross_attn: AttentionCache,
    cross_norm: Option<(Matrix, Vec<f64>)>,
    x2: Matrix,
    ffn_norm: Option<(Matrix, Vec<f64>)>,
    ffn_hidden: Matrix,
}

/// Forward intermediates needed for one backward sweep.
pub struct DecoderCache {
    layers: Vec<DecoderLayerCache>,
    output: Matrix,
}

impl DecoderCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradients for every decoder weight.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub layers: Vec<DecoderLayerParams>,
}

fn check_decoder_inputs(proxies: &Matrix, prompt: &Matrix, params: &DecoderParams) -> Result<()> {
    if params.layers.is_empty() {
        return Err(Fl2tError::Domain("decoder needs at least one layer".into()));
    }
    let d = params.dim();
    if proxies.cols() != d || prompt.cols() != d {
        return Err(Fl2tError::Shape {
            op: "decoder_forward",
            left_rows: proxies.rows(),
            left_cols: proxies.cols(),
            right_rows: prompt.rows(),
            right_cols: prompt.cols(),
        });
    }
    if proxies.rows() == 0 || prompt.rows() == 0 {
        return Err(Fl2tError::Domain(
            "decoder needs at least one proxy row and one prompt token".into(),
        ));
    }
    Ok(())
}

/// Refine the proxy bank against a prompt: `G x d -> G x d`.
///
/// Per layer, with residuals: `X += SelfAttn(X)`, `X += CrossAttn(X, E)`,
/// `X += FFN(X)`. Row order is preserved, and permuting the input rows
/// permutes the output rows (self-attention sees the rows as a set).
pub fn decoder_forward(proxies: &Matrix, prompt: &Matrix, params: &DecoderParams) -> Result<Matrix> {
    Ok(decoder_forward_cached(proxies, prompt, params)?.output)
}

/// Output of every layer, in order (diagnostics view of the same pass).
pub fn decoder_layer_outputs(
    proxies: &Matrix,
    prompt: &Matrix,
    params: &DecoderParams,
) -> Result<Vec<Matrix>> {
    check_decoder_inputs(proxies, prompt, params)?;
    let mut x = proxies.clone();
    let mut outputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        x = decoder_layer_forward(&x, prompt, layer, params.layer_norm).0;
        outputs.push(x.clone());
    }
    Ok(outputs)
}

fn decoder_layer_forward(
    x: &Matrix,
    prompt: &Matrix,
    layer: &DecoderLayerParams,
    layer_norm: bool,
) -> (Matrix, DecoderLayerCache) {
    let (self_in, self_norm) = if layer_norm {
        let (n, s) = ln_forward(x);
        (n.clone(), Some((n, s)))
    } else {
        (x.clone(), None)
    };
    let (self_out, self_attn) =
        attention_forward(&self_in, &self_in, &layer.wq, &layer.wk, &layer.wv, &layer.wo);
    let mut x1 = x.clone();
    x1.add_scaled_assign(&self_out, 1.0);

    let (cross_in, cross_norm) = if layer_norm {
        let (n, s) = ln_forward(&x1);
        (n.clone(), Some((n, s)))
    } else {
        (x1.clone(), None)
    };
    let (cross_out, cross_attn) =
        attention_forward(&cross_in, prompt, &layer.cq, &layer.ck, &layer.cv, &layer.co);
    let mut x2 = x1.clone();
    x2.add_scaled_assign(&cross_out, 1.0);

    let (ffn_in, ffn_norm) = if layer_norm {
        let (n, s) = ln_forward(&x2);
        (n.clone(), Some((n, s)))
    } else {
        (x2.clone(), None)
    };
    let mut hidden = ffn_in.mul_unchecked(&layer.ffn_w1);
    for v in hidden.data_mut() {
        *v = v.tanh();
    }
    let ffn_out = hidden.mul_unchecked(&layer.ffn_w2);
    let mut x3 = x2.clone();
    x3.add_scaled_assign(&ffn_out, 1.0);

    (
        x3,
        DecoderLayerCache {
            self_attn,
            self_norm,
            cross_attn,
            cross_norm,
            x2,
            ffn_norm,
            ffn_hidden: hidden,
        },
    )
}

/// Forward pass that keeps every intermediate for the backward sweep.
pub fn decoder_forward_cached(
    proxies: &Matrix,
    prompt: &Matrix,
    params: &DecoderParams,
) -> Result<DecoderCache> {
    check_decoder_inputs(proxies, prompt, params)?;
    let mut x = proxies.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = decoder_layer_forward(&x, prompt, layer, params.layer_norm);
        layers.push(cache);
        x = next;
    }
    Ok(DecoderCache { layers, output: x })
}

/// Backward sweep through the decoder.
///
/// Returns gradients with respect to the proxies, the prompt embeddings,
/// and every decoder weight.
pub fn decoder_backward(
    cache: &DecoderCache,
    params: &DecoderParams,
    d_output: &Matrix,
) -> (Matrix, Matrix, DecoderGrads) {
    let mut d_x = d_output.clone();
    let prompt_rows = cache.layers[0].cross_attn.keys_input.rows();
    let d = params.dim();
    let mut d_prompt = Matrix::zeros(prompt_rows, d);
    let mut layer_grads: Vec<DecoderLayerParams> = Vec::with_capacity(params.layers.len());
    for (layer, lcache) in params.layers.iter().zip(&cache.layers).rev() {
        // FFN block: x3 = x2 + tanh(n3 W1) W2.
        let d_ffn_out = d_x.clone();
        let d_w2 = lcache.ffn_hidden.tmul(&d_ffn_out);
        let mut d_hidden = d_ffn_out.mul_t(&layer.ffn_w2);
        for (dh, h) in d_hidden.data_mut().iter_mut().zip(lcache.ffn_hidden.data()) {
            *dh *= 1.0 - h * h;
        }
        let d_w1 = match &lcache.ffn_norm {
            Some((n, _)) => n.tmul(&d_hidden),
            None => lcache.x2.tmul(&d_hidden),
        };
        let d_ffn_in = d_hidden.mul_t(&layer.ffn_w1);
        let mut d_x2 = d_x;
        match &lcache.ffn_norm {
            Some((n, inv)) => d_x2.add_scaled_assign(&ln_backward(n, inv, &d_ffn_in), 1.0),
            None => d_x2.add_scaled_assign(&d_ffn_in, 1.0),
        }

        // Cross-attention block: x2 = x1 + CrossAttn(n2, prompt).
        let cross = attention_backward(
            &lcache.cross_attn,
            &layer.cq,
            &layer.ck,
            &layer.cv,
            &layer.co,
            &d_x2,
        );
        d_prompt.add_scaled_assign(&cross.d_keys_in, 1.0);
        let mut d_x1 = d_x2;
        match &lcache.cross_norm {
            Some((n, inv)) => {
                d_x1.add_scaled_assign(&ln_backward(n, inv, &cross.d_queries_in), 1.0)
            }
            None => d_x1.add_scaled_assign(&cross.d_queries_in, 1.0),
        }

        // Self-attention block: x1 = x0 + SelfAttn(n1); queries and keys
        // share the input, so both input gradients flow back.
        let selfa = attention_backward(
            &lcache.self_attn,
            &layer.wq,
            &layer.wk,
            &layer.wv,
            &layer.wo,
            &d_x1,
        );
        let mut d_self_in = selfa.d_queries_in;
        d_self_in.add_scaled_assign(&selfa.d_keys_in, 1.0);
        let mut d_x0 = d_x1;
        match &lcache.self_norm {
            Some((n, inv)) => d_x0.add_scaled_assign(&ln_backward(n, inv, &d_self_in), 1.0),
            None => d_x0.add_scaled_assign(&d_self_in, 1.0),
        }

        layer_grads.push(DecoderLayerParams {
            wq: selfa.d_wq,
            wk: selfa.d_wk,
            wv: selfa.d_wv,
            wo: selfa.d_wo,
            cq: cross.d_wq,
            ck: cross.d_wk,
            cv: cross.d_wv,
            co: cross.d_wo,
            ffn_w1: d_w1,
            ffn_w2: d_w2,
        });
        d_x = d_x0;
    }
    layer_grads.reverse();
    (
        d_x,
        d_prompt,
        DecoderGrads {
            layers: layer_grads,
        },
    )
}

/// Forward intermediates of the fusion MLP over all concepts.
pub struct FusionCache {
    concat: Matrix,
    hidden: Matrix,
    output: Matrix,
}

impl FusionCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradients of the fusion MLP weights.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub d_w1: Matrix,
    pub d_w2: Matrix,
}

/// Summaries for every concept: `S_i = tanh([C_i, P'_i] W1) W2`, `G x d`.
pub fn fuse_all(
    bank: &ConceptEmbeddingBank,
    refined: &Matrix,
    mlp: &FusionMlp,
) -> Result<Matrix> {
    Ok(fuse_all_cached(bank, refined, mlp)?.output)
}

/// Cached variant of [`fuse_all`] for the backward pass.
pub fn fuse_all_cached(
    bank: &ConceptEmbeddingBank,
    refined: &Matrix,
    mlp: &FusionMlp,
) -> Result<FusionCache> {
    let g = bank.concepts();
    let d = bank.dim();
    if refined.rows() != g || refined.cols() != d {
        return Err(Fl2tError::Shape {
            op: "fuse_all",
            left_rows: g,
            left_cols: d,
            right_rows: refined.rows(),
            right_cols: refined.cols(),
        });
    }
    if mlp.w1.rows() != 2 * d || mlp.w2.cols() != d {
        return Err(Fl2tError::Shape {
            op: "fuse_all mlp",
            left_rows: 2 * d,
            left_cols: 2 * d,
            right_rows: mlp.w1.rows(),
            right_cols: mlp.w1.cols(),
        });
    }
    let mut concat = Matrix::zeros(g, 2 * d);
    for i in 0..g {
        concat.row_mut(i)[..d].copy_from_slice(bank.row(i));
        concat.row_mut(i)[d..].copy_from_slice(refined.row(i));
    }
    let mut hidden = concat.mul_unchecked(&mlp.w1);
    for v in hidden.data_mut() {
        *v = v.tanh();
    }
    let output = hidden.mul_unchecked(&mlp.w2);
    Ok(FusionCache {
        concat,
        hidden,
        output,
    })
}

/// Backward through the fusion MLP.
///
/// Returns gradients for the concept embeddings, the refined proxies, and
/// the MLP weights.
pub fn fuse_backward(cache: &FusionCache, mlp: &FusionMlp, d_output: &Matrix) -> (Matrix, Matrix, FusionGrads) {
    let d = mlp.dim();
    let d_w2 = cache.hidden.tmul(d_output);
    let mut d_hidden = d_output.mul_t(&mlp.w2);
    for (dh, h) in d_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
        *dh *= 1.0 - h * h;
    }
    let d_w1 = cache.concat.tmul(&d_hidden);
    let d_concat = d_hidden.mul_t(&mlp.w1);
    let g = cache.concat.rows();
    let mut d_bank = Matrix::zeros(g, d);
    let mut d_refined = Matrix::zeros(g, d);
    for i in 0..g {
        d_bank.row_mut(i).copy_from_slice(&d_concat.row(i)[..d]);
        d_refined.row_mut(i).copy_from_slice(&d_concat.row(i)[d..]);
    }
    (d_bank, d_refined, FusionGrads { d_w1, d_w2 })
}

/// Cross-concept summaries for every concept except `active`, rows in
/// ascending concept order.
pub fn fuse(
    bank: &ConceptEmbeddingBank,
    refined: &Matrix,
    mlp: &FusionMlp,
    active: usize,
) -> Result<Matrix> {
    if active >= bank.concepts() {
        return Err(Fl2tError::Domain(format!(
            "active concept {active} out of range for {} concepts",
            bank.concepts()
        )));
    }
    if bank.concepts() < 2 {
        return Err(Fl2tError::Domain(
            "fusing cross-concept summaries needs at least 2 concepts".into(),
        ));
    }
    let all = fuse_all(bank, refined, mlp)?;
    let rows: Vec<Vec<f64>> = (0..bank.concepts())
        .filter(|&i| i != active)
        .map(|i| all.row(i).to_vec())
        .collect();
    Matrix::from_rows(&rows)
}

/// Relevance of every other concept to the active one.
///
/// `summaries` must be the output of [`fuse`] for the same `active` (one
/// row per non-active concept, ascending). Cosine mode always lands in
/// `[-1, 1]`; raw mode clamps into that interval so the drift bounds that
/// assume it keep holding.
pub fn relevance(
    bank: &ConceptEmbeddingBank,
    summaries: &Matrix,
    active: usize,
    mode: LambdaMode,
) -> Result<RelevanceWeights> {
    let g = bank.concepts();
    if active >= g {
        return Err(Fl2tError::Domain(format!(
            "active concept {active} out of range for {g} concepts"
        )));
    }
    if summaries.rows() != g - 1 || summaries.cols() != bank.dim() {
        return Err(Fl2tError::Shape {
            op: "relevance",
            left_rows: g - 1,
            left_cols: bank.dim(),
            right_rows: summaries.rows(),
            right_cols: summaries.cols(),
        });
    }
    let c_g = bank.row(active);
    let mut entries = Vec::with_capacity(g - 1);
    let mut row = 0;
    for i in 0..g {
        if i == active {
            continue;
        }
        let s_i = summaries.row(row);
        let lambda = match mode {
            LambdaMode::Cosine => crate::numerics::cosine_sim(c_g, s_i)?,
            LambdaMode::RawInnerProduct => dot(c_g, s_i).clamp(-1.0, 1.0),
        };
        entries.push((i, lambda));
        row += 1;
    }
    RelevanceWeights::new(active, entries)
}

/// Exponential of the Shannon entropy of the normalized singular values.
///
/// 1 for a rank-one matrix, `d` for a `d x d` identity, and in general a
/// smooth count of how many directions carry mass. Fails on an all-zero
/// matrix, whose spectrum has no distribution to take an entropy of.
pub fn effective_rank(m: &Matrix) -> Result<f64> {
    let sv = singular_values(m)?;
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Err(Fl2tError::Degenerate(
            "effective rank of an all-zero matrix is undefined".into(),
        ));
    }
    let mut entropy = 0.0;
    for s in &sv {
        let p = s / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Gradient of `cosine(u, v)` with respect to both arguments.
///
/// Returns zero vectors when the cosine is saturated by clamping or either
/// norm vanishes (saturation has zero subgradient; a zero norm should have
/// been rejected upstream).
pub(crate) fn cosine_grads(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return (vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let c = dot(u, v) / (nu * nv);
    if !(-1.0..=1.0).contains(&c) {
        return (vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let cross = 1.0 / (nu * nv);
    let du: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi * cross - c * ui / (nu * nu))
        .collect();
    let dv: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| ui * cross - c * vi / (nv * nv))
        .collect();
    (du, dv)
}
