//! Toy conditional diffusion model: noise schedule, prompt-conditioned
//! denoiser with per-layer adapter merging, training losses, ancestral
//! sampling, and the joint consolidation objective.
//!
//! The denoiser is deliberately small: a frozen input projection, a stack
//! of square hidden layers with tanh between them (the layers the adapters
//! attach to), and a frozen output projection. Conditioning is the mean of
//! the prompt token embeddings, concatenated with the noisy point and a
//! sinusoidal time embedding.
//!
//! Losses evaluate on pre-sampled draws `(sample index, timestep, noise)`
//! so that they are plain deterministic functions of the parameters; that
//! is what makes the finite-difference checks and the bitwise
//! reproducibility guarantees possible. Gradients are hand-written
//! backward passes over the cached forwards.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::aggregation::{
    cosine_grads, decoder_backward, decoder_forward_cached, fuse_all_cached, fuse_backward,
    init_proxies, ConceptEmbeddingBank, DecoderGrads, DecoderParams, FusionGrads, FusionMlp,
    LambdaMode, ProxyBank,
};
use crate::error::{Fl2tError, Result};
use crate::lora::{init_adapter, AdapterSet, LoraAdapter};
use crate::numerics::{dot, finite_diff_grad, max_relative_error, Matrix, SeededRng, DEFAULT_STEP};
use crate::regularizers::{
    r1_weighted, r1_weighted_grads, r2_grads, r2_shared, r3_contrastive, r3_grad,
    RelevanceWeights, SharedSubspace,
};
use serde::{Deserialize, Serialize};

/// Training data and prompt for one concept.
///
/// Sample access is counted so experiments can prove they never replayed
/// another concept's data during consolidation.
#[derive(Debug)]
pub struct ConceptTask {
    pub concept_id: usize,
    samples: Matrix,
    pub prompt_tokens: Vec<usize>,
    reads: AtomicU64,
}

impl ConceptTask {
    pub fn new(concept_id: usize, samples: Matrix, prompt_tokens: Vec<usize>) -> ConceptTask {
        ConceptTask {
            concept_id,
            samples,
            prompt_tokens,
            reads: AtomicU64::new(0),
        }
    }

    /// The training samples; every call is recorded.
    pub fn samples(&self) -> &Matrix {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.samples
    }

    /// How many times [`ConceptTask::samples`] has been called.
    pub fn sample_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }
}

/// Variance schedule for the forward corruption process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

/// Linear beta schedule from `beta_min` to `beta_max` inclusive.
///
/// The cumulative products `alpha_bar` must come out strictly decreasing
/// and inside `(0, 1)`; anything else means the requested betas do not
/// describe a usable corruption process.
pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Fl2tError::Domain(format!(
            "schedule needs at least 2 steps, got {t_steps}"
        )));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Fl2tError::Domain(format!(
            "betas must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let frac = t as f64 / (t_steps - 1) as f64;
        betas.push(beta_min + frac * (beta_max - beta_min));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for (t, a) in alphas.iter().enumerate() {
        let next = prod * a;
        if !(0.0 < next && next < prod) {
            return Err(Fl2tError::Numerical(format!(
                "alpha_bar stopped decreasing at step {t}"
            )));
        }
        alpha_bars.push(next);
        prod = next;
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Sinusoidal embedding of a timestep: interleaved `sin`/`cos` pairs at
/// geometrically spaced frequencies, `width` values total.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    assert!(
        width >= 2 && width % 2 == 0,
        "time embedding width must be even and at least 2, got {width}"
    );
    let mut emb = Vec::with_capacity(width);
    let pairs = width / 2;
    for i in 0..pairs {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
        let angle = t as f64 * freq;
        emb.push(angle.sin());
        emb.push(angle.cos());
    }
    emb
}

/// Corrupt a clean point to timestep `t`:
/// `z_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if t >= schedule.steps() {
        return Err(Fl2tError::Domain(format!(
            "timestep {t} out of range for {} steps",
            schedule.steps()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Fl2tError::Domain(format!(
            "point has {} components but noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bars[t];
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| signal * x + noise * e)
        .collect())
}

/// Prompt token embeddings: a fixed block of context tokens followed by
/// one trainable row per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTable {
    pub matrix: Matrix,
    pub context_count: usize,
}

impl TokenTable {
    /// Gaussian-initialized table for `context` shared tokens plus
    /// `concepts` concept tokens.
    pub fn init(rng: &mut SeededRng, context: usize, concepts: usize, dim: usize, std: f64) -> TokenTable {
        TokenTable {
            matrix: crate::numerics::gaussian(rng, context + concepts, dim, 0.0, std),
            context_count: context,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab(&self) -> usize {
        self.matrix.rows()
    }

    /// Token id of a concept's dedicated row.
    pub fn concept_token(&self, concept: usize) -> usize {
        self.context_count + concept
    }

    /// Embedding rows for a token sequence, one row per position.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Fl2tError::Domain("prompt has no tokens".into()));
        }
        let mut out = Matrix::zeros(tokens.len(), self.dim());
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab() {
                return Err(Fl2tError::UnknownToken {
                    token: tok,
                    vocab: self.vocab(),
                });
            }
            out.row_mut(pos).copy_from_slice(self.matrix.row(tok));
        }
        Ok(out)
    }

    /// Mean of the token embeddings: the conditioning vector.
    pub fn pooled(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let rows = self.lookup(tokens)?;
        let mut pooled = vec![0.0; self.dim()];
        for pos in 0..rows.rows() {
            for (p, v) in pooled.iter_mut().zip(rows.row(pos)) {
                *p += v;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for p in &mut pooled {
            *p *= inv;
        }
        Ok(pooled)
    }
}

/// Anything that predicts the noise inside a latent at a given timestep.
pub trait NoisePredictor {
    /// Predicted noise for latent `z` at timestep `t` under a pooled
    /// prompt embedding. Implementations assume dimensions consistent
    /// with the model they describe.
    fn predict(&self, z: &[f64], t: usize, prompt: &[f64]) -> Vec<f64>;
}

/// Always predicts zero noise; handy for sampling-statistics oracles.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, z: &[f64], _t: usize, _prompt: &[f64]) -> Vec<f64> {
        vec![0.0; z.len()]
    }
}

/// Predicts `z / sqrt(1 - alpha_bar_t)`, which is exactly the injected
/// noise whenever the clean data is identically zero.
pub struct LatentRescalePredictor {
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for LatentRescalePredictor {
    fn predict(&self, z: &[f64], t: usize, _prompt: &[f64]) -> Vec<f64> {
        let ab = self.schedule.alpha_bars[t];
        let inv = 1.0 / (1.0 - ab).sqrt();
        z.iter().map(|v| v * inv).collect()
    }
}

/// The denoiser network.
///
/// `w_in` and `w_out` are frozen after initialization, as are the square
/// hidden `layers`; per-concept adapters supply all trainable capacity on
/// the hidden layers. Column convention: a layer maps `h -> tanh(W h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    /// `hidden x input_dim` where the input is
    /// `concat(z, time embedding, pooled prompt)`.
    pub w_in: Matrix,
    /// Square `hidden x hidden` layers the adapters attach to.
    pub layers: Vec<Matrix>,
    /// `d_data x hidden` output projection.
    pub w_out: Matrix,
    pub time_width: usize,
    pub d_data: usize,
}

/// Input-column standard deviation of the frozen prompt block in `w_in`.
///
/// Pooled prompt embeddings start near zero and stay well below unit
/// scale after training, so they get flat unit-variance columns instead
/// of fan-in scaling; otherwise conditioning cannot steer the sampler at
/// this width.
pub const PROMPT_IN_STD: f64 = 1.0;

impl Denoiser {
    /// Initialize the frozen backbone. The latent and time columns of
    /// `w_in` use `1/sqrt(d_data + time_width)`, the prompt columns use
    /// [`PROMPT_IN_STD`], and every later matrix uses `1/sqrt(fan_in)`.
    pub fn init(
        rng: &mut SeededRng,
        d_data: usize,
        hidden: usize,
        layers: usize,
        time_width: usize,
        d_embed: usize,
    ) -> Denoiser {
        let input_dim = d_data + time_width + d_embed;
        let zt_std = 1.0 / ((d_data + time_width) as f64).sqrt();
        let mut w_in = crate::numerics::gaussian(rng, hidden, input_dim, 0.0, 1.0);
        for r in 0..hidden {
            for (c, v) in w_in.row_mut(r).iter_mut().enumerate() {
                *v *= if c < d_data + time_width { zt_std } else { PROMPT_IN_STD };
            }
        }
        let hidden_std = 1.0 / (hidden as f64).sqrt();
        let layer_mats = (0..layers)
            .map(|_| crate::numerics::gaussian(rng, hidden, hidden, 0.0, hidden_std))
            .collect();
        let w_out = crate::numerics::gaussian(rng, d_data, hidden, 0.0, hidden_std);
        Denoiser {
            w_in,
            layers: layer_mats,
            w_out,
            time_width,
            d_data,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.input_dim() - self.d_data - self.time_width
    }

    /// Dimensions of the adapter-carrying layers, `(out, in)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows(), l.cols())).collect()
    }

    fn build_input(&self, z: &[f64], t: usize, prompt: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.d_data, "latent has wrong dimension");
        assert_eq!(
            prompt.len(),
            self.embed_dim(),
            "pooled prompt has wrong dimension"
        );
        let mut u = Vec::with_capacity(self.input_dim());
        u.extend_from_slice(z);
        u.extend_from_slice(&time_embedding(t, self.time_width));
        u.extend_from_slice(prompt);
        u
    }

    /// Forward pass with the given (usually adapter-merged) hidden layers.
    pub fn predict_with_layers(
        &self,
        layers: &[Matrix],
        z: &[f64],
        t: usize,
        prompt: &[f64],
    ) -> Vec<f64> {
        let u = self.build_input(z, t, prompt);
        let mut h = matvec(&self.w_in, &u);
        for v in &mut h {
            *v = v.tanh();
        }
        for layer in layers {
            h = matvec(layer, &h);
            for v in &mut h {
                *v = v.tanh();
            }
        }
        matvec(&self.w_out, &h)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z: &[f64], t: usize, prompt: &[f64]) -> Vec<f64> {
        self.predict_with_layers(&self.layers, z, t, prompt)
    }
}

/// A denoiser with one concept's adapters merged into its hidden layers.
pub struct MergedDenoiser<'a> {
    pub base: &'a Denoiser,
    pub layers: Vec<Matrix>,
}

/// Merge an adapter set into the base hidden layers at the given scale.
pub fn merge_adapters<'a>(
    base: &'a Denoiser,
    set: &AdapterSet,
    scale: f64,
) -> Result<MergedDenoiser<'a>> {
    if set.layers.len() != base.layers.len() {
        return Err(Fl2tError::Domain(format!(
            "adapter set has {} layers but the denoiser has {}",
            set.layers.len(),
            base.layers.len()
        )));
    }
    let layers = base
        .layers
        .iter()
        .zip(&set.layers)
        .map(|(w, a)| crate::lora::merge(w, a, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(MergedDenoiser { base, layers })
}

impl NoisePredictor for MergedDenoiser<'_> {
    fn predict(&self, z: &[f64], t: usize, prompt: &[f64]) -> Vec<f64> {
        self.base.predict_with_layers(&self.layers, z, t, prompt)
    }
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), v.len(), "matvec dimension mismatch");
    let mut out = vec![0.0; m.rows()];
    for r in 0..m.rows() {
        out[r] = dot(m.row(r), v);
    }
    out
}

fn matvec_t(m: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.rows(), v.len(), "transposed matvec dimension mismatch");
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let vr = v[r];
        if vr == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(r)) {
            *o += vr * w;
        }
    }
    out
}

/// One pre-sampled training draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub sample_index: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// A batch of pre-sampled draws; losses over these are deterministic
/// functions of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraws {
    pub draws: Vec<NoiseDraw>,
}

/// Draw `count` random `(sample, timestep, noise)` triples.
pub fn presample_noise(
    rng: &mut SeededRng,
    count: usize,
    n_samples: usize,
    t_steps: usize,
    d_data: usize,
) -> NoiseDraws {
    let draws = (0..count)
        .map(|_| NoiseDraw {
            sample_index: rng.next_index(n_samples),
            t: rng.next_index(t_steps),
            eps: (0..d_data).map(|_| rng.next_gaussian()).collect(),
        })
        .collect();
    NoiseDraws { draws }
}

fn check_draws(draws: &NoiseDraws, data: &Matrix, schedule: &NoiseSchedule) -> Result<()> {
    if draws.draws.is_empty() {
        return Err(Fl2tError::Domain("no draws to evaluate".into()));
    }
    for (i, d) in draws.draws.iter().enumerate() {
        if d.sample_index >= data.rows() {
            return Err(Fl2tError::Domain(format!(
                "draw {i} references sample {} of {}",
                d.sample_index,
                data.rows()
            )));
        }
        if d.t >= schedule.steps() {
            return Err(Fl2tError::Domain(format!(
                "draw {i} references timestep {} of {}",
                d.t,
                schedule.steps()
            )));
        }
        if d.eps.len() != data.cols() {
            return Err(Fl2tError::Domain(format!(
                "draw {i} has {}-dimensional noise for {}-dimensional data",
                d.eps.len(),
                data.cols()
            )));
        }
    }
    Ok(())
}

/// Denoising loss on pre-sampled draws: the mean over draws of the squared
/// distance between predicted and injected noise.
pub fn cdm_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    data: &Matrix,
    pooled_prompt: &[f64],
    schedule: &NoiseSchedule,
    draws: &NoiseDraws,
) -> Result<f64> {
    check_draws(draws, data, schedule)?;
    let mut total = 0.0;
    for d in &draws.draws {
        let z = forward_noise(schedule, data.row(d.sample_index), d.t, &d.eps)?;
        let pred = model.predict(&z, d.t, pooled_prompt);
        total += pred
            .iter()
            .zip(&d.eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>();
    }
    Ok(total / draws.draws.len() as f64)
}

/// Ancestral sampling from pure noise down to a clean point.
///
/// Transition variance is `beta_t`; the final step adds no noise.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    pooled_prompt: &[f64],
    rng: &mut SeededRng,
    count: usize,
    d_data: usize,
) -> Matrix {
    let mut out = Matrix::zeros(count, d_data);
    for i in 0..count {
        let mut z: Vec<f64> = (0..d_data).map(|_| rng.next_gaussian()).collect();
        for t in (0..schedule.steps()).rev() {
            let pred = model.predict(&z, t, pooled_prompt);
            let alpha = schedule.alphas[t];
            let ab = schedule.alpha_bars[t];
            let coeff = schedule.betas[t] / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / alpha.sqrt();
            for (zv, p) in z.iter_mut().zip(&pred) {
                *zv = inv_sqrt_alpha * (*zv - coeff * p);
            }
            if t > 0 {
                let sigma = schedule.betas[t].sqrt();
                for zv in z.iter_mut() {
                    *zv += sigma * rng.next_gaussian();
                }
            }
        }
        out.row_mut(i).copy_from_slice(&z);
    }
    out
}

/// Gradients of the denoising loss for one concept's fine-tuning:
/// adapter factors plus the pooled prompt embedding.
#[derive(Debug, Clone)]
pub struct FineTuneGrads {
    pub d_a: Vec<Matrix>,
    pub d_b: Vec<Matrix>,
    pub d_pooled: Vec<f64>,
}

/// Core backward pass shared by fine-tuning and consolidation: the mean
/// squared noise residual differentiated with respect to the adapter
/// factors of the merged model and the pooled prompt.
fn cdm_backward(
    base: &Denoiser,
    merged: &[Matrix],
    set: &AdapterSet,
    scale: f64,
    data: &Matrix,
    pooled: &[f64],
    schedule: &NoiseSchedule,
    draws: &NoiseDraws,
) -> Result<(f64, FineTuneGrads)> {
    check_draws(draws, data, schedule)?;
    let n_layers = base.layers.len();
    let hidden = base.hidden();
    let mut d_merged: Vec<Matrix> = base
        .layers
        .iter()
        .map(|l| Matrix::zeros(l.rows(), l.cols()))
        .collect();
    let mut d_pooled = vec![0.0; pooled.len()];
    let mut loss = 0.0;

    for dr in &draws.draws {
        let z = forward_noise(schedule, data.row(dr.sample_index), dr.t, &dr.eps)?;
        let u = base.build_input(&z, dr.t, pooled);
        // Forward with every activation kept.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut h = matvec(&base.w_in, &u);
        for v in &mut h {
            *v = v.tanh();
        }
        acts.push(h);
        for layer in merged {
            let mut next = matvec(layer, acts.last().expect("activation present"));
            for v in &mut next {
                *v = v.tanh();
            }
            acts.push(next);
        }
        let out = matvec(&base.w_out, &acts[n_layers]);
        let resid: Vec<f64> = out.iter().zip(&dr.eps).map(|(p, e)| p - e).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();

        // Backward. d(loss)/d(out) = 2 * resid.
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
        let mut d_h = matvec_t(&base.w_out, &d_out);
        for l in (0..n_layers).rev() {
            let mut d_pre = vec![0.0; hidden];
            for ((dp, dh), a) in d_pre.iter_mut().zip(&d_h).zip(&acts[l + 1]) {
                *dp = dh * (1.0 - a * a);
            }
            let dm = d_merged[l].data_mut();
            let prev = &acts[l];
            for (r, dpr) in d_pre.iter().enumerate() {
                if *dpr == 0.0 {
                    continue;
                }
                let row = &mut dm[r * hidden..(r + 1) * hidden];
                for (slot, pv) in row.iter_mut().zip(prev) {
                    *slot += dpr * pv;
                }
            }
            d_h = matvec_t(&merged[l], &d_pre);
        }
        let mut d_pre0 = vec![0.0; hidden];
        for ((dp, dh), a) in d_pre0.iter_mut().zip(&d_h).zip(&acts[0]) {
            *dp = dh * (1.0 - a * a);
        }
        let d_u = matvec_t(&base.w_in, &d_pre0);
        let offset = base.d_data + base.time_width;
        for (dp, du) in d_pooled.iter_mut().zip(&d_u[offset..]) {
            *dp += du;
        }
    }

    let inv = 1.0 / draws.draws.len() as f64;
    loss *= inv;
    for dp in &mut d_pooled {
        *dp *= inv;
    }
    // Push the merged-layer gradient through dW = scale * A B.
    let mut d_a = Vec::with_capacity(n_layers);
    let mut d_b = Vec::with_capacity(n_layers);
    for (dm, adapter) in d_merged.iter().zip(&set.layers) {
        d_a.push(dm.mul_t(&adapter.b).scaled(scale * inv));
        d_b.push(adapter.a.tmul(dm).scaled(scale * inv));
    }
    Ok((loss, FineTuneGrads { d_a, d_b, d_pooled }))
}

/// Loss and gradients for single-concept fine-tuning: the denoising loss
/// of the adapter-merged model on that concept's own data.
pub fn fine_tune_grads(
    base: &Denoiser,
    set: &AdapterSet,
    scale: f64,
    data: &Matrix,
    pooled: &[f64],
    schedule: &NoiseSchedule,
    draws: &NoiseDraws,
) -> Result<(f64, FineTuneGrads)> {
    let merged = merge_adapters(base, set, scale)?;
    cdm_backward(base, &merged.layers, set, scale, data, pooled, schedule, draws)
}

/// Scalar coefficients of the consolidation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationCoeffs {
    pub merge_scale: f64,
    /// Weight of the relevance-weighted orthogonality penalty.
    pub r1_coeff: f64,
    /// Weight of the shared-subspace reconstruction penalty.
    pub gamma1: f64,
    /// Weight of the contrastive summary-separation penalty.
    pub gamma2: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_mode: LambdaMode,
}

impl Default for ConsolidationCoeffs {
    fn default() -> Self {
        ConsolidationCoeffs {
            merge_scale: 1.0,
            r1_coeff: 1.0,
            gamma1: 0.1,
            gamma2: 0.1,
            tau: 0.1,
            lambda_mode: LambdaMode::Cosine,
        }
    }
}

/// Everything the joint objective trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationState {
    pub adapters: Vec<AdapterSet>,
    pub subspace: SharedSubspace,
    pub decoder: DecoderParams,
    pub fusion: FusionMlp,
    pub proxies: ProxyBank,
}

/// Gradients for every trainable piece of [`ConsolidationState`] plus the
/// active concept's token row, and the relevance weights that were used.
pub struct ConsolidationGrads {
    pub d_a: Vec<Vec<Matrix>>,
    pub d_b: Vec<Vec<Matrix>>,
    pub d_h: Vec<Vec<Matrix>>,
    pub d_w_star: Vec<Matrix>,
    pub d_decoder: DecoderGrads,
    pub d_fusion: FusionGrads,
    pub d_proxies: Matrix,
    pub d_active_row: Vec<f64>,
    pub lambda: RelevanceWeights,
}

/// The fixed surroundings of one consolidation evaluation: the frozen
/// model, the active concept, its data and prompt, and the coefficients.
pub struct ConsolidationContext<'a> {
    pub base: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub table: &'a TokenTable,
    pub bank: &'a ConceptEmbeddingBank,
    pub active: usize,
    pub prompt_tokens: &'a [usize],
    pub data: &'a Matrix,
    pub draws: &'a NoiseDraws,
    pub coeffs: ConsolidationCoeffs,
    /// When set, these relevance weights are used as constants instead of
    /// recomputing them from the aggregation pipeline.
    pub lambda_override: Option<&'a RelevanceWeights>,
}

impl ConsolidationContext<'_> {
    fn check(&self, state: &ConsolidationState) -> Result<()> {
        let g = state.adapters.len();
        if self.active >= g {
            return Err(Fl2tError::Domain(format!(
                "active concept {} out of range for {g} adapters",
                self.active
            )));
        }
        if self.bank.concepts() != g {
            return Err(Fl2tError::Domain(format!(
                "embedding bank has {} concepts but {g} adapter sets exist",
                self.bank.concepts()
            )));
        }
        Ok(())
    }

    /// Relevance weights exactly as [`ConsolidationContext::grads`] would
    /// compute them, without touching any gradient machinery.
    pub fn lambda(&self, state: &ConsolidationState) -> Result<RelevanceWeights> {
        self.check(state)?;
        if let Some(l) = self.lambda_override {
            return Ok(l.clone());
        }
        let prompt_embs = self.table.lookup(self.prompt_tokens)?;
        let refined =
            crate::aggregation::decoder_forward(&state.proxies.matrix, &prompt_embs, &state.decoder)?;
        let s_all = crate::aggregation::fuse_all(self.bank, &refined, &state.fusion)?;
        relevance_from_all(self.bank, &s_all, self.active, self.coeffs.lambda_mode)
    }

    /// The full objective value:
    /// denoising loss of the active merged model, plus the weighted
    /// orthogonality, shared-subspace, and contrastive penalties.
    pub fn loss(&self, state: &ConsolidationState) -> Result<f64> {
        self.check(state)?;
        let g = state.adapters.len();
        let pooled = self.table.pooled(self.prompt_tokens)?;
        let merged = merge_adapters(self.base, &state.adapters[self.active], self.coeffs.merge_scale)?;
        let mut total = cdm_loss(&merged, self.data, &pooled, self.schedule, self.draws)?;

        let prompt_embs = self.table.lookup(self.prompt_tokens)?;
        let refined =
            crate::aggregation::decoder_forward(&state.proxies.matrix, &prompt_embs, &state.decoder)?;
        let s_all = crate::aggregation::fuse_all(self.bank, &refined, &state.fusion)?;
        let lambda = match self.lambda_override {
            Some(l) => l.clone(),
            None => relevance_from_all(self.bank, &s_all, self.active, self.coeffs.lambda_mode)?,
        };

        if self.coeffs.r1_coeff != 0.0 && g > 1 {
            total += self.coeffs.r1_coeff
                * r1_weighted(&state.adapters, self.active, &lambda)?.value;
        }
        if self.coeffs.gamma1 != 0.0 {
            total += self.coeffs.gamma1 * r2_shared(&state.adapters, &state.subspace)?;
        }
        if self.coeffs.gamma2 != 0.0 && g > 1 {
            total += self.coeffs.gamma2 * r3_contrastive(&s_all, self.coeffs.tau)?;
        }
        Ok(total)
    }

    /// The objective value together with hand-derived gradients for every
    /// trainable parameter.
    pub fn grads(&self, state: &ConsolidationState) -> Result<(f64, ConsolidationGrads)> {
        self.check(state)?;
        let g = state.adapters.len();
        let pooled = self.table.pooled(self.prompt_tokens)?;
        let merged = merge_adapters(self.base, &state.adapters[self.active], self.coeffs.merge_scale)?;
        let (mse, tune) = cdm_backward(
            self.base,
            &merged.layers,
            &state.adapters[self.active],
            self.coeffs.merge_scale,
            self.data,
            &pooled,
            self.schedule,
            self.draws,
        )?;
        let mut total = mse;

        // Aggregation forward, cached for the backward sweep.
        let prompt_embs = self.table.lookup(self.prompt_tokens)?;
        let dec_cache =
            decoder_forward_cached(&state.proxies.matrix, &prompt_embs, &state.decoder)?;
        let fuse_cache = fuse_all_cached(self.bank, dec_cache.output(), &state.fusion)?;
        let s_all = fuse_cache.output().clone();
        let lambda = match self.lambda_override {
            Some(l) => (*l).clone(),
            None => relevance_from_all(self.bank, &s_all, self.active, self.coeffs.lambda_mode)?,
        };

        let mut d_a: Vec<Vec<Matrix>> = state
            .adapters
            .iter()
            .map(|set| {
                set.layers
                    .iter()
                    .map(|l| Matrix::zeros(l.a.rows(), l.a.cols()))
                    .collect()
            })
            .collect();
        let mut d_b: Vec<Vec<Matrix>> = state
            .adapters
            .iter()
            .map(|set| {
                set.layers
                    .iter()
                    .map(|l| Matrix::zeros(l.b.rows(), l.b.cols()))
                    .collect()
            })
            .collect();
        let mut d_h: Vec<Vec<Matrix>> = state
            .subspace
            .projections
            .iter()
            .map(|per| per.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
            .collect();
        let mut d_w_star: Vec<Matrix> = state
            .subspace
            .w_star
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();

        for (l, (da, db)) in tune.d_a.iter().zip(&tune.d_b).enumerate() {
            d_a[self.active][l].add_scaled_assign(da, 1.0);
            d_b[self.active][l].add_scaled_assign(db, 1.0);
        }

        // Gradient flowing into the fused summaries, from the contrastive
        // penalty and, unless overridden, from the relevance weights used
        // inside the orthogonality penalty.
        let mut d_s = Matrix::zeros(s_all.rows(), s_all.cols());

        let mut lambda_terms: Vec<(usize, f64)> = Vec::new();
        if self.coeffs.r1_coeff != 0.0 && g > 1 {
            let value = r1_weighted(&state.adapters, self.active, &lambda)?.value;
            total += self.coeffs.r1_coeff * value;
            let og = r1_weighted_grads(&state.adapters, self.active, &lambda)?;
            for (i, per) in og.d_a.iter().enumerate() {
                for (l, m) in per.iter().enumerate() {
                    d_a[i][l].add_scaled_assign(m, self.coeffs.r1_coeff);
                }
            }
            lambda_terms = og
                .d_lambda
                .iter()
                .map(|&(i, t)| (i, t * self.coeffs.r1_coeff))
                .collect();
        }
        if self.coeffs.gamma1 != 0.0 {
            total += self.coeffs.gamma1 * r2_shared(&state.adapters, &state.subspace)?;
            let rg = r2_grads(&state.adapters, &state.subspace)?;
            for i in 0..g {
                for l in 0..state.adapters[i].layers.len() {
                    d_a[i][l].add_scaled_assign(&rg.d_a[i][l], self.coeffs.gamma1);
                    d_b[i][l].add_scaled_assign(&rg.d_b[i][l], self.coeffs.gamma1);
                    d_h[i][l].add_scaled_assign(&rg.d_h[i][l], self.coeffs.gamma1);
                }
            }
            for (l, m) in rg.d_w_star.iter().enumerate() {
                d_w_star[l].add_scaled_assign(m, self.coeffs.gamma1);
            }
        }
        if self.coeffs.gamma2 != 0.0 && g > 1 {
            total += self.coeffs.gamma2 * r3_contrastive(&s_all, self.coeffs.tau)?;
            let dg = r3_grad(&s_all, self.coeffs.tau)?;
            d_s.add_scaled_assign(&dg, self.coeffs.gamma2);
        }

        // Relevance weights are a function of the summaries; route their
        // gradient into the summary rows. The stable embeddings are frozen,
        // so their side of the cosine is dropped.
        if self.lambda_override.is_none() {
            for (i, term) in &lambda_terms {
                let c_g = self.bank.row(self.active);
                let s_i = s_all.row(*i);
                match self.coeffs.lambda_mode {
                    LambdaMode::Cosine => {
                        let (_, dv) = cosine_grads(c_g, s_i);
                        let row = d_s.row_mut(*i);
                        for (slot, v) in row.iter_mut().zip(&dv) {
                            *slot += term * v;
                        }
                    }
                    LambdaMode::RawInnerProduct => {
                        if dot(c_g, s_i).abs() < 1.0 {
                            let row = d_s.row_mut(*i);
                            for (slot, v) in row.iter_mut().zip(c_g) {
                                *slot += term * v;
                            }
                        }
                    }
                }
            }
        }

        let (_d_bank, d_refined, d_fusion) = fuse_backward(&fuse_cache, &state.fusion, &d_s);
        let (d_proxies, d_prompt_rows, d_decoder) =
            decoder_backward(&dec_cache, &state.decoder, &d_refined);

        // Token-row gradient: cross-attention positions of the active
        // concept's token plus the mean-pooling path from the denoising
        // loss. Context tokens are frozen.
        let active_token = self.table.concept_token(self.active);
        let dim = self.table.dim();
        let mut d_active_row = vec![0.0; dim];
        let pool_share = 1.0 / self.prompt_tokens.len() as f64;
        for (slot, &tok) in self.prompt_tokens.iter().enumerate() {
            if tok == active_token {
                for (acc, v) in d_active_row.iter_mut().zip(d_prompt_rows.row(slot)) {
                    *acc += v;
                }
                for (acc, v) in d_active_row.iter_mut().zip(&tune.d_pooled) {
                    *acc += pool_share * v;
                }
            }
        }

        Ok((
            total,
            ConsolidationGrads {
                d_a,
                d_b,
                d_h,
                d_w_star,
                d_decoder,
                d_fusion,
                d_proxies,
                d_active_row,
                lambda,
            },
        ))
    }
}

/// Relevance weights computed from the all-concept summary matrix.
pub(crate) fn relevance_from_all(
    bank: &ConceptEmbeddingBank,
    s_all: &Matrix,
    active: usize,
    mode: LambdaMode,
) -> Result<RelevanceWeights> {
    let g = bank.concepts();
    if s_all.rows() != g || s_all.cols() != bank.dim() {
        return Err(Fl2tError::Shape {
            op: "relevance_from_all",
            left_rows: g,
            left_cols: bank.dim(),
            right_rows: s_all.rows(),
            right_cols: s_all.cols(),
        });
    }
    let c_g = bank.row(active);
    let mut entries = Vec::with_capacity(g.saturating_sub(1));
    for i in 0..g {
        if i == active {
            continue;
        }
        let lambda = match mode {
            LambdaMode::Cosine => crate::numerics::cosine_sim(c_g, s_all.row(i))?,
            LambdaMode::RawInnerProduct => dot(c_g, s_all.row(i)).clamp(-1.0, 1.0),
        };
        entries.push((i, lambda));
    }
    RelevanceWeights::new(active, entries)
}

/// A small, fully randomized consolidation instance with every weight
/// scaled into a range where finite differences are well conditioned.
/// Shared by the unit tests and the public gradient-check suite.
#[allow(clippy::type_complexity)]
fn fd_instance(
    seed: u64,
) -> (
    Denoiser,
    NoiseSchedule,
    TokenTable,
    ConceptEmbeddingBank,
    ConsolidationState,
    Matrix,
    NoiseDraws,
    Vec<usize>,
) {
    let d_data = 2;
    let hidden = 6;
    let n_layers = 2;
    let rank = 2;
    let d_embed = 4;
    let g = 2;
    let mut rng = SeededRng::new(seed);
    let base = Denoiser::init(&mut rng, d_data, hidden, n_layers, 4, d_embed);
    let schedule = make_schedule(10, 1e-3, 0.05).unwrap();
    let table = TokenTable::init(&mut rng, 2, g, d_embed, 1.0);
    let bank = ConceptEmbeddingBank::new(crate::numerics::gaussian(&mut rng, g, d_embed, 0.0, 1.0))
        .unwrap();
    let mut adapters = Vec::new();
    for concept_id in 0..g {
        let mut set = AdapterSet {
            concept_id,
            layers: (0..n_layers)
                .map(|_| init_adapter(&mut rng, hidden, hidden, rank).unwrap())
                .collect(),
        };
        for l in &mut set.layers {
            l.a = crate::numerics::gaussian(&mut rng, hidden, rank, 0.0, 0.4);
            l.b = crate::numerics::gaussian(&mut rng, rank, hidden, 0.0, 0.4);
        }
        adapters.push(set);
    }
    let mut subspace = SharedSubspace::init(
        &mut rng,
        g,
        &[(hidden, hidden); 2],
        rank,
    );
    for w in &mut subspace.w_star {
        *w = crate::numerics::gaussian(&mut rng, rank, hidden, 0.0, 0.4);
    }
    for per in &mut subspace.projections {
        for h in per.iter_mut() {
            *h = crate::numerics::gaussian(&mut rng, hidden, rank, 0.0, 0.4);
        }
    }
    let mut decoder = DecoderParams::init(&mut rng, d_embed, 2, false);
    for layer in &mut decoder.layers {
        for m in [
            &mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo,
            &mut layer.cq, &mut layer.ck, &mut layer.cv, &mut layer.co,
        ] {
            *m = m.scaled(20.0);
        }
        layer.ffn_w1 = layer.ffn_w1.scaled(20.0);
        layer.ffn_w2 = layer.ffn_w2.scaled(20.0);
    }
    let mut fusion = FusionMlp::init(&mut rng, d_embed);
    fusion.w1 = fusion.w1.scaled(20.0);
    fusion.w2 = fusion.w2.scaled(20.0);
    let proxies = init_proxies(&bank);
    let state = ConsolidationState {
        adapters,
        subspace,
        decoder,
        fusion,
        proxies,
    };
    let data = crate::numerics::gaussian(&mut rng, 3, d_data, 0.0, 1.0);
    let draws = presample_noise(&mut rng, 3, 3, 10, d_data);
    let prompt = vec![0, 1, table.concept_token(0)];
    (base, schedule, table, bank, state, data, draws, prompt)
}

/// One loss's finite-difference comparison outcome.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckOutcome {
    pub loss: String,
    pub points: usize,
    pub max_relative_error: f64,
}

/// The losses [`gradient_check_suite`] knows how to probe.
pub const GRADCHECK_LOSSES: [&str; 6] = ["r1", "r1w", "r2", "r3", "cdm", "full"];

fn random_fd_adapters(
    rng: &mut SeededRng,
    g: usize,
    layers: usize,
    out: usize,
    inp: usize,
    rank: usize,
) -> Vec<AdapterSet> {
    (0..g)
        .map(|concept_id| AdapterSet {
            concept_id,
            layers: (0..layers)
                .map(|_| LoraAdapter {
                    a: crate::numerics::gaussian(rng, out, rank, 0.0, 0.4),
                    b: crate::numerics::gaussian(rng, rank, inp, 0.0, 0.4),
                })
                .collect(),
        })
        .collect()
}

fn check_r1(seed: u64, weighted: bool) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let g = 2;
    let sets = random_fd_adapters(&mut rng, g, 2, 4, 4, 2);
    let active = 0usize;
    let lambda = if weighted {
        let entries: Vec<(usize, f64)> = (0..g)
            .filter(|&i| i != active)
            .map(|i| (i, rng.next_f64() * 1.8 - 0.9))
            .collect();
        RelevanceWeights::new(active, entries)?
    } else {
        RelevanceWeights::ones(active, g)
    };
    let grads = r1_weighted_grads(&sets, active, &lambda)?;

    let mut x: Vec<f64> = Vec::new();
    for set in &sets {
        for l in &set.layers {
            x.extend_from_slice(l.a.data());
        }
    }
    if weighted {
        for &(_, v) in lambda.entries() {
            x.push(v);
        }
    }
    let eval = |v: &[f64]| {
        let mut pos = 0usize;
        let mut s2 = sets.clone();
        for set in &mut s2 {
            for l in &mut set.layers {
                let (r, c) = (l.a.rows(), l.a.cols());
                l.a = Matrix::from_vec(r, c, v[pos..pos + r * c].to_vec()).unwrap();
                pos += r * c;
            }
        }
        let lam = if weighted {
            let entries: Vec<(usize, f64)> = lambda
                .entries()
                .iter()
                .enumerate()
                .map(|(j, &(i, _))| (i, v[pos + j]))
                .collect();
            RelevanceWeights::new(active, entries).unwrap()
        } else {
            lambda.clone()
        };
        r1_weighted(&s2, active, &lam).unwrap().value
    };
    let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP)?;

    let mut analytic: Vec<f64> = Vec::new();
    for per in &grads.d_a {
        for m in per {
            analytic.extend_from_slice(m.data());
        }
    }
    if weighted {
        for &(_, v) in &grads.d_lambda {
            analytic.push(v);
        }
    }
    Ok(max_relative_error(&numerical, &analytic))
}

fn check_r2(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let g = 2;
    let hidden = 4;
    let rank = 2;
    let sets = random_fd_adapters(&mut rng, g, 2, hidden, hidden, rank);
    let mut subspace = SharedSubspace::init(&mut rng, g, &[(hidden, hidden); 2], rank);
    for w in &mut subspace.w_star {
        *w = crate::numerics::gaussian(&mut rng, rank, hidden, 0.0, 0.4);
    }
    for per in &mut subspace.projections {
        for h in per.iter_mut() {
            *h = crate::numerics::gaussian(&mut rng, hidden, rank, 0.0, 0.4);
        }
    }
    let grads = r2_grads(&sets, &subspace)?;

    let mut x: Vec<f64> = Vec::new();
    for set in &sets {
        for l in &set.layers {
            x.extend_from_slice(l.a.data());
            x.extend_from_slice(l.b.data());
        }
    }
    for per in &subspace.projections {
        for h in per {
            x.extend_from_slice(h.data());
        }
    }
    for w in &subspace.w_star {
        x.extend_from_slice(w.data());
    }
    let eval = |v: &[f64]| {
        let take = |rows: usize, cols: usize, pos: &mut usize| {
            let n = rows * cols;
            let m = Matrix::from_vec(rows, cols, v[*pos..*pos + n].to_vec()).unwrap();
            *pos += n;
            m
        };
        let mut pos = 0usize;
        let mut s2 = sets.clone();
        for set in &mut s2 {
            for l in &mut set.layers {
                let (ar, ac) = (l.a.rows(), l.a.cols());
                l.a = take(ar, ac, &mut pos);
                let (br, bc) = (l.b.rows(), l.b.cols());
                l.b = take(br, bc, &mut pos);
            }
        }
        let mut sub2 = subspace.clone();
        for per in &mut sub2.projections {
            for h in per.iter_mut() {
                let (r, c) = (h.rows(), h.cols());
                *h = take(r, c, &mut pos);
            }
        }
        for w in &mut sub2.w_star {
            let (r, c) = (w.rows(), w.cols());
            *w = take(r, c, &mut pos);
        }
        r2_shared(&s2, &sub2).unwrap()
    };
    let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP)?;

    let mut analytic: Vec<f64> = Vec::new();
    for (da_set, db_set) in grads.d_a.iter().zip(&grads.d_b) {
        for (da, db) in da_set.iter().zip(db_set) {
            analytic.extend_from_slice(da.data());
            analytic.extend_from_slice(db.data());
        }
    }
    for per in &grads.d_h {
        for h in per {
            analytic.extend_from_slice(h.data());
        }
    }
    for w in &grads.d_w_star {
        analytic.extend_from_slice(w.data());
    }
    Ok(max_relative_error(&numerical, &analytic))
}

fn check_r3(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let s = crate::numerics::gaussian(&mut rng, 3, 4, 0.0, 1.0);
    let tau = 0.5;
    let grad = r3_grad(&s, tau)?;
    let x = s.data().to_vec();
    let eval = |v: &[f64]| {
        let m = Matrix::from_vec(3, 4, v.to_vec()).unwrap();
        r3_contrastive(&m, tau).unwrap()
    };
    let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP)?;
    Ok(max_relative_error(&numerical, grad.data()))
}

fn check_cdm(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let base = Denoiser::init(&mut rng, 2, 6, 2, 4, 4);
    let schedule = make_schedule(10, 1e-3, 0.05)?;
    let set = AdapterSet {
        concept_id: 0,
        layers: (0..2)
            .map(|_| LoraAdapter {
                a: crate::numerics::gaussian(&mut rng, 6, 2, 0.0, 0.5),
                b: crate::numerics::gaussian(&mut rng, 2, 6, 0.0, 0.5),
            })
            .collect(),
    };
    let data = crate::numerics::gaussian(&mut rng, 3, 2, 0.0, 1.0);
    let pooled: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
    let draws = presample_noise(&mut rng, 4, 3, 10, 2);
    let (_, grads) = fine_tune_grads(&base, &set, 1.0, &data, &pooled, &schedule, &draws)?;

    let mut x: Vec<f64> = Vec::new();
    for l in &set.layers {
        x.extend_from_slice(l.a.data());
        x.extend_from_slice(l.b.data());
    }
    x.extend_from_slice(&pooled);
    let eval = |v: &[f64]| {
        let mut pos = 0usize;
        let mut s2 = set.clone();
        for l in &mut s2.layers {
            let (ar, ac) = (l.a.rows(), l.a.cols());
            l.a = Matrix::from_vec(ar, ac, v[pos..pos + ar * ac].to_vec()).unwrap();
            pos += ar * ac;
            let (br, bc) = (l.b.rows(), l.b.cols());
            l.b = Matrix::from_vec(br, bc, v[pos..pos + br * bc].to_vec()).unwrap();
            pos += br * bc;
        }
        let pooled2 = v[pos..pos + pooled.len()].to_vec();
        let merged = merge_adapters(&base, &s2, 1.0).unwrap();
        cdm_loss(&merged, &data, &pooled2, &schedule, &draws).unwrap()
    };
    let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP)?;

    let mut analytic: Vec<f64> = Vec::new();
    for (da, db) in grads.d_a.iter().zip(&grads.d_b) {
        analytic.extend_from_slice(da.data());
        analytic.extend_from_slice(db.data());
    }
    analytic.extend_from_slice(&grads.d_pooled);
    Ok(max_relative_error(&numerical, &analytic))
}

fn check_full(seed: u64) -> Result<f64> {
    let (base, schedule, table, bank, state, data, draws, prompt) = fd_instance(seed);
    let coeffs = ConsolidationCoeffs {
        merge_scale: 1.0,
        r1_coeff: 0.7,
        gamma1: 0.3,
        gamma2: 0.9,
        tau: 0.5,
        lambda_mode: LambdaMode::Cosine,
    };
    let ctx = ConsolidationContext {
        base: &base,
        schedule: &schedule,
        table: &table,
        bank: &bank,
        active: 0,
        prompt_tokens: &prompt,
        data: &data,
        draws: &draws,
        coeffs,
        lambda_override: None,
    };
    let (_, grads) = ctx.grads(&state)?;

    let d_embed = bank.dim();
    let active_token = table.concept_token(0);
    let mut x: Vec<f64> = Vec::new();
    for set in &state.adapters {
        for l in &set.layers {
            x.extend_from_slice(l.a.data());
            x.extend_from_slice(l.b.data());
        }
    }
    for per in &state.subspace.projections {
        for h in per {
            x.extend_from_slice(h.data());
        }
    }
    for w in &state.subspace.w_star {
        x.extend_from_slice(w.data());
    }
    for layer in &state.decoder.layers {
        for m in [
            &layer.wq, &layer.wk, &layer.wv, &layer.wo,
            &layer.cq, &layer.ck, &layer.cv, &layer.co,
            &layer.ffn_w1, &layer.ffn_w2,
        ] {
            x.extend_from_slice(m.data());
        }
    }
    x.extend_from_slice(state.fusion.w1.data());
    x.extend_from_slice(state.fusion.w2.data());
    x.extend_from_slice(state.proxies.matrix.data());
    x.extend_from_slice(table.matrix.row(active_token));

    let eval = |v: &[f64]| {
        let take = |rows: usize, cols: usize, pos: &mut usize| {
            let n = rows * cols;
            let m = Matrix::from_vec(rows, cols, v[*pos..*pos + n].to_vec()).unwrap();
            *pos += n;
            m
        };
        let mut pos = 0;
        let mut s2 = state.clone();
        for set in &mut s2.adapters {
            for l in &mut set.layers {
                let (ar, ac) = (l.a.rows(), l.a.cols());
                l.a = take(ar, ac, &mut pos);
                let (br, bc) = (l.b.rows(), l.b.cols());
                l.b = take(br, bc, &mut pos);
            }
        }
        for per in &mut s2.subspace.projections {
            for h in per.iter_mut() {
                let (r, c) = (h.rows(), h.cols());
                *h = take(r, c, &mut pos);
            }
        }
        for w in &mut s2.subspace.w_star {
            let (r, c) = (w.rows(), w.cols());
            *w = take(r, c, &mut pos);
        }
        for layer in &mut s2.decoder.layers {
            layer.wq = take(d_embed, d_embed, &mut pos);
            layer.wk = take(d_embed, d_embed, &mut pos);
            layer.wv = take(d_embed, d_embed, &mut pos);
            layer.wo = take(d_embed, d_embed, &mut pos);
            layer.cq = take(d_embed, d_embed, &mut pos);
            layer.ck = take(d_embed, d_embed, &mut pos);
            layer.cv = take(d_embed, d_embed, &mut pos);
            layer.co = take(d_embed, d_embed, &mut pos);
            layer.ffn_w1 = take(d_embed, 4 * d_embed, &mut pos);
            layer.ffn_w2 = take(4 * d_embed, d_embed, &mut pos);
        }
        s2.fusion.w1 = take(2 * d_embed, 2 * d_embed, &mut pos);
        s2.fusion.w2 = take(2 * d_embed, d_embed, &mut pos);
        let (pr, pc) = (state.proxies.matrix.rows(), state.proxies.matrix.cols());
        s2.proxies.matrix = take(pr, pc, &mut pos);
        let mut t2 = table.clone();
        t2.matrix
            .row_mut(active_token)
            .copy_from_slice(&v[pos..pos + d_embed]);
        let ctx2 = ConsolidationContext {
            base: &base,
            schedule: &schedule,
            table: &t2,
            bank: &bank,
            active: 0,
            prompt_tokens: &prompt,
            data: &data,
            draws: &draws,
            coeffs,
            lambda_override: None,
        };
        ctx2.loss(&s2).unwrap()
    };
    let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP)?;

    let mut analytic: Vec<f64> = Vec::new();
    for (da_set, db_set) in grads.d_a.iter().zip(&grads.d_b) {
        for (da, db) in da_set.iter().zip(db_set) {
            analytic.extend_from_slice(da.data());
            analytic.extend_from_slice(db.data());
        }
    }
    for per in &grads.d_h {
        for h in per {
            analytic.extend_from_slice(h.data());
        }
    }
    for w in &grads.d_w_star {
        analytic.extend_from_slice(w.data());
    }
    for layer in &grads.d_decoder.layers {
        for m in [
            &layer.wq, &layer.wk, &layer.wv, &layer.wo,
            &layer.cq, &layer.ck, &layer.cv, &layer.co,
            &layer.ffn_w1, &layer.ffn_w2,
        ] {
            analytic.extend_from_slice(m.data());
        }
    }
    analytic.extend_from_slice(grads.d_fusion.d_w1.data());
    analytic.extend_from_slice(grads.d_fusion.d_w2.data());
    analytic.extend_from_slice(grads.d_proxies.data());
    analytic.extend_from_slice(&grads.d_active_row);
    Ok(max_relative_error(&numerical, &analytic))
}

/// Compare the analytic gradient of each requested loss against central
/// finite differences at `points` random instances.
///
/// `loss` is one of [`GRADCHECK_LOSSES`] or `"all"`. Returns the worst
/// relative error per loss; errors on an unknown loss name.
pub fn gradient_check_suite(loss: &str, points: usize, seed: u64) -> Result<Vec<GradCheckOutcome>> {
    let selected: Vec<&str> = if loss == "all" {
        GRADCHECK_LOSSES.to_vec()
    } else if let Some(&name) = GRADCHECK_LOSSES.iter().find(|&&n| n == loss) {
        vec![name]
    } else {
        return Err(Fl2tError::Domain(format!(
            "unknown loss {loss:?}; expected one of all, r1, r1w, r2, r3, cdm, full"
        )));
    };
    if points == 0 {
        return Err(Fl2tError::Domain(
            "gradient check needs at least one point".into(),
        ));
    }
    let mut out = Vec::with_capacity(selected.len());
    for (li, name) in selected.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..points {
            let point_seed = SeededRng::derive_seed(seed, ((li as u64) << 32) ^ k as u64);
            let err = match *name {
                "r1" => check_r1(point_seed, false)?,
                "r1w" => check_r1(point_seed, true)?,
                "r2" => check_r2(point_seed)?,
                "r3" => check_r3(point_seed)?,
                "cdm" => check_cdm(point_seed)?,
                "full" => check_full(point_seed)?,
                other => unreachable!("loss {other:?} slipped past the filter"),
            };
            worst = worst.max(err);
        }
        out.push(GradCheckOutcome {
            loss: name.to_string(),
            points,
            max_relative_error: worst,
        });
    }
    Ok(out)
}
