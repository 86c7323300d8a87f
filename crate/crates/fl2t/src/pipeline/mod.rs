//! End-to-end experiment orchestration: synthetic concept data, the
//! two-step training procedure (independent per-concept fine-tuning, then
//! joint consolidation), similarity-weighted adapter aggregation at
//! inference, the sequential-fine-tuning baseline, and the evaluation
//! loop that turns all of it into metric rows.
//!
//! Every random choice draws from its own seed stream derived from the
//! master seed, so full runs are bitwise reproducible, step-1 workers can
//! run in parallel without perturbing each other, and evaluation noise is
//! identical before and after consolidation.

pub mod config;
pub mod metrics;

use std::f64::consts::PI;

use crate::aggregation::{
    init_proxies, ConceptEmbeddingBank, DecoderLayerParams, DecoderParams, FusionMlp,
};
use crate::diffusion::{
    cdm_loss, fine_tune_grads, make_schedule, merge_adapters, presample_noise, sample,
    ConceptTask, ConsolidationCoeffs, ConsolidationContext, ConsolidationGrads,
    ConsolidationState, Denoiser, MergedDenoiser, NoiseDraws, NoiseSchedule, TokenTable,
};
use crate::error::{Fl2tError, Result};
use crate::lora::{ewa_aggregate, ewa_weights, init_adapter, merge_delta, AdapterSet};
use crate::numerics::{Matrix, SeededRng};
use crate::regularizers::{RelevanceWeights, SharedSubspace};

pub use config::{ExperimentConfig, TaskOrder};
pub use metrics::{
    identity_alignment, identity_mean_similarity, mean_row, project_rows, projection_matrix,
    MetricsRow, PROJECTION_DIM, PROJECTION_SEED,
};

/// Dimension of the synthetic sample space.
pub const D_DATA: usize = 2;

/// Standard deviation of freshly initialized token embeddings.
pub const TOKEN_INIT_STD: f64 = 0.01;

/// Distance of each concept's data center from the origin.
pub const CENTER_RADIUS: f64 = 2.2;
/// Offset of the two mixture components from the concept center.
pub const COMPONENT_OFFSET: f64 = 0.6;
/// Per-coordinate noise inside each mixture component.
pub const COMPONENT_STD: f64 = 0.15;

/// Seed streams. Per-concept streams add the concept id; the ranges are
/// disjoint for every supported concept count.
pub const STREAM_BASE: u64 = 0;
pub const STREAM_TOKENS: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_STEP1: u64 = 100;
pub const STREAM_ADAPTER: u64 = 150;
pub const STREAM_SUBSPACE: u64 = 200;
pub const STREAM_DECODER: u64 = 201;
pub const STREAM_FUSION: u64 = 202;
pub const STREAM_STEP2: u64 = 300;
pub const STREAM_EVAL: u64 = 400;
pub const STREAM_GEN: u64 = 500;

fn derive(master: u64, stream: u64) -> SeededRng {
    SeededRng::new(SeededRng::derive_seed(master, stream))
}

/// The frozen backbone, initial token table, and noise schedule implied by
/// a config.
pub fn build_model(config: &ExperimentConfig) -> Result<(Denoiser, TokenTable, NoiseSchedule)> {
    let schedule = make_schedule(config.t_steps, config.beta_min, config.beta_max)?;
    let mut rng = derive(config.master_seed, STREAM_BASE);
    let base = Denoiser::init(
        &mut rng,
        D_DATA,
        config.hidden_dim,
        config.denoiser_layers,
        config.time_width,
        config.embed_dim,
    );
    let mut rng = derive(config.master_seed, STREAM_TOKENS);
    let table = TokenTable::init(
        &mut rng,
        config.context_tokens,
        config.concepts,
        config.embed_dim,
        TOKEN_INIT_STD,
    );
    Ok((base, table, schedule))
}

/// The prompt for one concept: a fixed run of context tokens followed by
/// the concept's own token.
pub fn prompt_tokens_for(config: &ExperimentConfig, concept: usize) -> Result<Vec<usize>> {
    if concept >= config.concepts {
        return Err(Fl2tError::UnknownToken {
            token: config.context_tokens + concept,
            vocab: config.context_tokens + config.concepts,
        });
    }
    let mut tokens: Vec<usize> = (0..config.prompt_context).collect();
    tokens.push(config.context_tokens + concept);
    Ok(tokens)
}

/// Synthetic training data: concept `i` is a two-component Gaussian
/// mixture on a circle of radius [`CENTER_RADIUS`], with the components
/// split along the tangent direction so each concept has internal
/// structure worth denoising.
pub fn build_tasks(config: &ExperimentConfig) -> Result<Vec<ConceptTask>> {
    (0..config.concepts)
        .map(|i| {
            let mut rng = derive(config.master_seed, STREAM_DATA + i as u64);
            let theta = 2.0 * PI * i as f64 / config.concepts as f64;
            let center = [CENTER_RADIUS * theta.cos(), CENTER_RADIUS * theta.sin()];
            let tangent = [-theta.sin(), theta.cos()];
            let mut samples = Matrix::zeros(config.samples_per_concept, D_DATA);
            for r in 0..config.samples_per_concept {
                let side = if rng.next_index(2) == 0 { 1.0 } else { -1.0 };
                let row = samples.row_mut(r);
                for d in 0..D_DATA {
                    row[d] = center[d]
                        + side * COMPONENT_OFFSET * tangent[d]
                        + COMPONENT_STD * rng.next_gaussian();
                }
            }
            Ok(ConceptTask::new(i, samples, prompt_tokens_for(config, i)?))
        })
        .collect()
}

/// One concept's plain fine-tuning segment: denoising loss only, updating
/// the concept's adapters and its own token row. Used both by step-1
/// workers and by the sequential baseline, so a single-concept baseline is
/// bitwise identical to step 1.
///
/// Returns the last step's loss, or NaN when the config asks for zero
/// steps.
pub fn train_concept_segment(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    table: &mut TokenTable,
    set: &mut AdapterSet,
    task: &ConceptTask,
) -> Result<f64> {
    let mut rng = derive(config.master_seed, STREAM_STEP1 + task.concept_id as u64);
    let steps = config.steps_per_epoch();
    let token = table.concept_token(task.concept_id);
    let occurrences = task.prompt_tokens.iter().filter(|&&t| t == token).count() as f64;
    let share = occurrences / task.prompt_tokens.len() as f64;
    let mut last = f64::NAN;
    let mut step_index = 0usize;
    for _ in 0..config.epochs_step1 {
        for _ in 0..steps {
            let data = task.samples();
            let draws =
                presample_noise(&mut rng, config.batch_size, data.rows(), schedule.steps(), D_DATA);
            let pooled = table.pooled(&task.prompt_tokens)?;
            let (loss, grads) =
                fine_tune_grads(base, set, config.merge_scale, data, &pooled, schedule, &draws)?;
            if !loss.is_finite() {
                return Err(Fl2tError::Numerical(format!(
                    "concept {} diverged at fine-tuning step {step_index}: loss {loss}",
                    task.concept_id
                )));
            }
            for (layer, (da, db)) in set.layers.iter_mut().zip(grads.d_a.iter().zip(&grads.d_b)) {
                layer.a.add_scaled_assign(da, -config.lr_network);
                layer.b.add_scaled_assign(db, -config.lr_network);
            }
            let row = table.matrix.row_mut(token);
            for (slot, g) in row.iter_mut().zip(&grads.d_pooled) {
                *slot -= config.lr_tokens * share * g;
            }
            last = loss;
            step_index += 1;
        }
    }
    Ok(last)
}

/// Output of step 1: per-concept adapters, the token table with trained
/// concept rows, and each concept's final fine-tuning loss.
#[derive(Debug, Clone)]
pub struct Step1Result {
    pub adapters: Vec<AdapterSet>,
    pub table: TokenTable,
    pub final_losses: Vec<f64>,
}

fn train_one_concept(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    table: &TokenTable,
    task: &ConceptTask,
) -> Result<(AdapterSet, Vec<f64>, f64)> {
    let mut rng = derive(config.master_seed, STREAM_ADAPTER + task.concept_id as u64);
    let layers = base
        .layer_dims()
        .iter()
        .map(|&(out, inp)| init_adapter(&mut rng, out, inp, config.rank))
        .collect::<Result<Vec<_>>>()?;
    let mut set = AdapterSet {
        concept_id: task.concept_id,
        layers,
    };
    let mut local = table.clone();
    let loss = train_concept_segment(config, base, schedule, &mut local, &mut set, task)?;
    let row = local.matrix.row(local.concept_token(task.concept_id)).to_vec();
    Ok((set, row, loss))
}

/// Step 1: train every concept independently, in parallel. Worker count
/// is the task count capped by available cores and the `FL2T_THREADS`
/// environment variable; results are identical for any worker count
/// because each task owns disjoint state and its own seed streams.
pub fn train_step1(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    table: &TokenTable,
    tasks: &[ConceptTask],
) -> Result<Step1Result> {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("FL2T_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(hw);
    train_step1_with_workers(config, base, schedule, table, tasks, cap.min(hw))
}

/// [`train_step1`] with an explicit worker count.
pub fn train_step1_with_workers(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    table: &TokenTable,
    tasks: &[ConceptTask],
    workers: usize,
) -> Result<Step1Result> {
    if tasks.len() != config.concepts {
        return Err(Fl2tError::Domain(format!(
            "{} tasks for a {}-concept config",
            tasks.len(),
            config.concepts
        )));
    }
    let workers = workers.clamp(1, tasks.len().max(1));
    let mut slots: Vec<Option<Result<(AdapterSet, Vec<f64>, f64)>>> = Vec::new();
    slots.resize_with(tasks.len(), || None);
    let per = tasks.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (chunk_index, chunk) in slots.chunks_mut(per).enumerate() {
            let start = chunk_index * per;
            scope.spawn(move || {
                for (offset, slot) in chunk.iter_mut().enumerate() {
                    let task = &tasks[start + offset];
                    *slot = Some(train_one_concept(config, base, schedule, table, task));
                }
            });
        }
    });

    let mut adapters = Vec::with_capacity(tasks.len());
    let mut final_losses = Vec::with_capacity(tasks.len());
    let mut out_table = table.clone();
    for (i, slot) in slots.into_iter().enumerate() {
        let (set, row, loss) = slot.expect("every step-1 slot is filled before the scope ends")?;
        let token = out_table.concept_token(i);
        out_table.matrix.row_mut(token).copy_from_slice(&row);
        adapters.push(set);
        final_losses.push(loss);
    }
    Ok(Step1Result {
        adapters,
        table: out_table,
        final_losses,
    })
}

/// Scalar objective coefficients implied by a config.
pub fn consolidation_coeffs(config: &ExperimentConfig) -> ConsolidationCoeffs {
    ConsolidationCoeffs {
        merge_scale: config.merge_scale,
        r1_coeff: config.r1_coeff,
        gamma1: config.gamma1,
        gamma2: config.gamma2,
        tau: config.tau,
        lambda_mode: config.lambda_mode,
    }
}

fn step_decoder_layer(params: &mut DecoderLayerParams, grads: &DecoderLayerParams, lr: f64) {
    params.wq.add_scaled_assign(&grads.wq, -lr);
    params.wk.add_scaled_assign(&grads.wk, -lr);
    params.wv.add_scaled_assign(&grads.wv, -lr);
    params.wo.add_scaled_assign(&grads.wo, -lr);
    params.cq.add_scaled_assign(&grads.cq, -lr);
    params.ck.add_scaled_assign(&grads.ck, -lr);
    params.cv.add_scaled_assign(&grads.cv, -lr);
    params.co.add_scaled_assign(&grads.co, -lr);
    params.ffn_w1.add_scaled_assign(&grads.ffn_w1, -lr);
    params.ffn_w2.add_scaled_assign(&grads.ffn_w2, -lr);
}

fn apply_consolidation_update(state: &mut ConsolidationState, grads: &ConsolidationGrads, lr: f64) {
    for (set, (da_set, db_set)) in state
        .adapters
        .iter_mut()
        .zip(grads.d_a.iter().zip(&grads.d_b))
    {
        for (layer, (da, db)) in set.layers.iter_mut().zip(da_set.iter().zip(db_set)) {
            layer.a.add_scaled_assign(da, -lr);
            layer.b.add_scaled_assign(db, -lr);
        }
    }
    for (per_concept, d_per) in state.subspace.projections.iter_mut().zip(&grads.d_h) {
        for (h, dh) in per_concept.iter_mut().zip(d_per) {
            h.add_scaled_assign(dh, -lr);
        }
    }
    for (w, dw) in state.subspace.w_star.iter_mut().zip(&grads.d_w_star) {
        w.add_scaled_assign(dw, -lr);
    }
    for (layer, d_layer) in state.decoder.layers.iter_mut().zip(&grads.d_decoder.layers) {
        step_decoder_layer(layer, d_layer, lr);
    }
    state.fusion.w1.add_scaled_assign(&grads.d_fusion.d_w1, -lr);
    state.fusion.w2.add_scaled_assign(&grads.d_fusion.d_w2, -lr);
    state.proxies.matrix.add_scaled_assign(&grads.d_proxies, -lr);
}

/// Output of step 2: all consolidated state, the further-trained token
/// table, the frozen concept-embedding bank used for aggregation, the
/// relevance weights recorded per concept at the start of step 2 (when the
/// state is still visit-order independent), the visit order, and final
/// per-concept objective values.
#[derive(Debug, Clone)]
pub struct Step2Result {
    pub state: ConsolidationState,
    pub table: TokenTable,
    pub bank: ConceptEmbeddingBank,
    pub lambda_probe: Vec<RelevanceWeights>,
    pub order: Vec<usize>,
    pub final_losses: Vec<f64>,
}

/// Step 2: joint consolidation. Initializes the shared subspace, decoder,
/// fusion head, and proxies (copied from the concept embeddings), then
/// visits tasks in the configured order, following the full objective's
/// gradient for the active concept while the others participate only
/// through adapters, proxies, and embeddings. No foreign samples are read.
pub fn train_step2(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    step1: &Step1Result,
    tasks: &[ConceptTask],
) -> Result<Step2Result> {
    let g = config.concepts;
    if g < 2 {
        return Err(Fl2tError::Degenerate(
            "consolidation needs at least two concepts".into(),
        ));
    }
    if step1.adapters.len() != g || tasks.len() != g {
        return Err(Fl2tError::Domain(format!(
            "step-1 output covers {} concepts and {} tasks exist, but the config says {g}",
            step1.adapters.len(),
            tasks.len()
        )));
    }

    let mut table = step1.table.clone();
    let mut bank_rows = Matrix::zeros(g, table.dim());
    for i in 0..g {
        let token = step1.table.concept_token(i);
        bank_rows.row_mut(i).copy_from_slice(step1.table.matrix.row(token));
    }
    let bank = ConceptEmbeddingBank::new(bank_rows)?;

    let mut state = ConsolidationState {
        adapters: step1.adapters.clone(),
        subspace: SharedSubspace::init(
            &mut derive(config.master_seed, STREAM_SUBSPACE),
            g,
            &base.layer_dims(),
            config.subspace(),
        ),
        decoder: DecoderParams::init(
            &mut derive(config.master_seed, STREAM_DECODER),
            config.embed_dim,
            config.decoder_layers,
            config.layer_norm,
        ),
        fusion: FusionMlp::init(&mut derive(config.master_seed, STREAM_FUSION), config.embed_dim),
        proxies: init_proxies(&bank),
    };
    let coeffs = consolidation_coeffs(config);

    // Relevance snapshot before any visit has mutated the state. Every
    // quantity involved is independent of the visit order, so these
    // weights are directly comparable across permuted runs.
    let probe_data = Matrix::zeros(1, D_DATA);
    let no_draws = NoiseDraws { draws: Vec::new() };
    let mut lambda_probe = Vec::with_capacity(g);
    for gi in 0..g {
        let ctx = ConsolidationContext {
            base,
            schedule,
            table: &table,
            bank: &bank,
            active: gi,
            prompt_tokens: &tasks[gi].prompt_tokens,
            data: &probe_data,
            draws: &no_draws,
            coeffs,
            lambda_override: None,
        };
        lambda_probe.push(ctx.lambda(&state)?);
    }

    let order = config.resolve_order()?;
    let steps = config.steps_per_epoch();
    let mut step_rngs: Vec<SeededRng> = (0..g)
        .map(|i| derive(config.master_seed, STREAM_STEP2 + i as u64))
        .collect();
    let mut final_losses = vec![f64::NAN; g];
    let mut step_index = 0usize;
    for _ in 0..config.epochs_step2 {
        for &gi in &order {
            for _ in 0..steps {
                let data = tasks[gi].samples();
                let draws = presample_noise(
                    &mut step_rngs[gi],
                    config.batch_size,
                    data.rows(),
                    schedule.steps(),
                    D_DATA,
                );
                let (loss, grads) = ConsolidationContext {
                    base,
                    schedule,
                    table: &table,
                    bank: &bank,
                    active: gi,
                    prompt_tokens: &tasks[gi].prompt_tokens,
                    data,
                    draws: &draws,
                    coeffs,
                    lambda_override: None,
                }
                .grads(&state)?;
                if !loss.is_finite() {
                    return Err(Fl2tError::Numerical(format!(
                        "concept {gi} diverged at consolidation step {step_index}: loss {loss}"
                    )));
                }
                apply_consolidation_update(&mut state, &grads, config.lr_network);
                let token = table.concept_token(gi);
                let row = table.matrix.row_mut(token);
                for (slot, d) in row.iter_mut().zip(&grads.d_active_row) {
                    *slot -= config.lr_tokens * d;
                }
                final_losses[gi] = loss;
                step_index += 1;
            }
        }
    }

    Ok(Step2Result {
        state,
        table,
        bank,
        lambda_probe,
        order,
        final_losses,
    })
}

/// Inference: weight every concept's adapters by prompt similarity against
/// the stored concept-embedding bank, merge the blended update into the
/// frozen backbone, and sample.
pub fn consolidate_and_generate(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    state: &ConsolidationState,
    table: &TokenTable,
    bank: &ConceptEmbeddingBank,
    concept: usize,
    count: usize,
) -> Result<Matrix> {
    let prompt = prompt_tokens_for(config, concept)?;
    let prompt_rows = table.lookup(&prompt)?;
    let weights = ewa_weights(&prompt_rows, bank.matrix())?;
    let deltas = ewa_aggregate(&state.adapters, &weights)?;
    let mut layers = Vec::with_capacity(base.layers.len());
    for (w, delta) in base.layers.iter().zip(&deltas) {
        layers.push(merge_delta(w, delta, config.merge_scale)?);
    }
    let model = MergedDenoiser { base, layers };
    let pooled = table.pooled(&prompt)?;
    let mut rng = derive(config.master_seed, STREAM_GEN + concept as u64);
    Ok(sample(&model, schedule, &pooled, &mut rng, count, D_DATA))
}

/// Denoising loss of one concept's merged model on its own data, under a
/// fixed evaluation noise stream. The stream is re-derived on every call,
/// so before/after comparisons see identical noise.
pub fn concept_own_loss(
    config: &ExperimentConfig,
    base: &Denoiser,
    schedule: &NoiseSchedule,
    set: &AdapterSet,
    table: &TokenTable,
    task: &ConceptTask,
) -> Result<f64> {
    let mut rng = derive(config.master_seed, STREAM_EVAL + task.concept_id as u64);
    let data = task.samples();
    let draws = presample_noise(&mut rng, config.eval_draws, data.rows(), schedule.steps(), D_DATA);
    let pooled = table.pooled(&task.prompt_tokens)?;
    let merged = merge_adapters(base, set, config.merge_scale)?;
    cdm_loss(&merged, data, &pooled, schedule, &draws)
}

/// Everything a full two-step run produces.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub order: Vec<usize>,
    pub step1_losses: Vec<f64>,
    pub step2_losses: Vec<f64>,
    pub lambda_probe: Vec<RelevanceWeights>,
    pub rows: Vec<MetricsRow>,
    pub state: ConsolidationState,
    pub table: TokenTable,
    pub bank: ConceptEmbeddingBank,
}

/// The full pipeline: build, step 1, per-concept loss snapshot, step 2,
/// then per-concept generation and metrics. `rows` is indexed by concept
/// id; forgetting is the own-loss change from the step-1 snapshot to the
/// consolidated state.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let (base, table0, schedule) = build_model(config)?;
    let tasks = build_tasks(config)?;
    let step1 = train_step1(config, &base, &schedule, &table0, &tasks)?;
    let mut loss_before = Vec::with_capacity(tasks.len());
    for task in &tasks {
        loss_before.push(concept_own_loss(
            config,
            &base,
            &schedule,
            &step1.adapters[task.concept_id],
            &step1.table,
            task,
        )?);
    }
    let step2 = train_step2(config, &base, &schedule, &step1, &tasks)?;

    let projection = projection_matrix(D_DATA);
    let mut rows = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let gi = task.concept_id;
        let loss_after = concept_own_loss(
            config,
            &base,
            &schedule,
            &step2.state.adapters[gi],
            &step2.table,
            task,
        )?;
        let generated = consolidate_and_generate(
            config,
            &base,
            &schedule,
            &step2.state,
            &step2.table,
            &step2.bank,
            gi,
            config.eval_samples,
        )?;
        let gen_proj = project_rows(&projection, &generated);
        let reference = mean_row(&project_rows(&projection, task.samples()));
        rows.push(MetricsRow {
            order_position: step2
                .order
                .iter()
                .position(|&x| x == gi)
                .expect("visit order is a permutation of the concepts"),
            concept_id: gi,
            identity_alignment: identity_alignment(&gen_proj, &reference)?,
            identity_mean_similarity: identity_mean_similarity(&gen_proj, &reference)?,
            loss_before: loss_before[gi],
            loss_after,
            forgetting: loss_after - loss_before[gi],
        });
    }

    Ok(ExperimentResult {
        order: step2.order,
        step1_losses: step1.final_losses,
        step2_losses: step2.final_losses,
        lambda_probe: step2.lambda_probe,
        rows,
        state: step2.state,
        table: step2.table,
        bank: step2.bank,
    })
}

/// What sequential fine-tuning of one shared adapter set produces.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub order: Vec<usize>,
    pub adapter: AdapterSet,
    pub table: TokenTable,
    pub rows: Vec<MetricsRow>,
}

/// The forgetting baseline: one shared adapter set fine-tuned on every
/// concept strictly in sequence, no consolidation machinery. Each
/// concept's `loss_before` is measured right after its own segment, so
/// forgetting isolates the damage done by later concepts.
pub fn run_baseline(config: &ExperimentConfig) -> Result<BaselineResult> {
    config.validate()?;
    let (base, table0, schedule) = build_model(config)?;
    let tasks = build_tasks(config)?;
    let order = config.resolve_order()?;

    let mut rng = derive(config.master_seed, STREAM_ADAPTER);
    let layers = base
        .layer_dims()
        .iter()
        .map(|&(out, inp)| init_adapter(&mut rng, out, inp, config.rank))
        .collect::<Result<Vec<_>>>()?;
    let mut adapter = AdapterSet {
        concept_id: 0,
        layers,
    };
    let mut table = table0.clone();

    let mut loss_before = vec![f64::NAN; tasks.len()];
    for &gi in &order {
        train_concept_segment(config, &base, &schedule, &mut table, &mut adapter, &tasks[gi])?;
        loss_before[gi] = concept_own_loss(config, &base, &schedule, &adapter, &table, &tasks[gi])?;
    }

    let projection = projection_matrix(D_DATA);
    let merged = merge_adapters(&base, &adapter, config.merge_scale)?;
    let mut rows = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let gi = task.concept_id;
        let loss_after = concept_own_loss(config, &base, &schedule, &adapter, &table, task)?;
        let pooled = table.pooled(&task.prompt_tokens)?;
        let mut gen_rng = derive(config.master_seed, STREAM_GEN + gi as u64);
        let generated = sample(&merged, &schedule, &pooled, &mut gen_rng, config.eval_samples, D_DATA);
        let gen_proj = project_rows(&projection, &generated);
        let reference = mean_row(&project_rows(&projection, task.samples()));
        rows.push(MetricsRow {
            order_position: order
                .iter()
                .position(|&x| x == gi)
                .expect("visit order is a permutation of the concepts"),
            concept_id: gi,
            identity_alignment: identity_alignment(&gen_proj, &reference)?,
            identity_mean_similarity: identity_mean_similarity(&gen_proj, &reference)?,
            loss_before: loss_before[gi],
            loss_after,
            forgetting: loss_after - loss_before[gi],
        });
    }

    Ok(BaselineResult {
        order,
        adapter,
        table,
        rows,
    })
}

/// Full runs under several visit orders, plus the cross-order agreement
/// numbers: the largest deviation between per-concept relevance-weight
/// multisets, and the spread of the similarity metric.
#[derive(Debug, Clone)]
pub struct OrderExperimentResult {
    pub orders: Vec<Vec<usize>>,
    pub runs: Vec<ExperimentResult>,
    /// Largest |difference| over order pairs, concepts, and sorted
    /// relevance entries.
    pub lambda_max_dev: f64,
    /// Largest per-concept spread of `identity_mean_similarity` across
    /// orders.
    pub ims_spread: f64,
    /// Mean forgetting per order.
    pub mean_forgetting: Vec<f64>,
}

/// Run the pipeline once per visit order with identical data and
/// parameter seeds, and compare.
pub fn run_order_experiment(
    config: &ExperimentConfig,
    orders: &[Vec<usize>],
) -> Result<OrderExperimentResult> {
    if orders.len() < 2 {
        return Err(Fl2tError::Config {
            field: "orders".into(),
            message: "need at least two visit orders to compare".into(),
        });
    }
    let mut runs = Vec::with_capacity(orders.len());
    for order in orders {
        let mut cfg = config.clone();
        cfg.order = TaskOrder::Explicit(order.clone());
        runs.push(run_experiment(&cfg)?);
    }

    let g = config.concepts;
    let mut lambda_max_dev = 0.0f64;
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            for gi in 0..g {
                let la = runs[a].lambda_probe[gi].sorted_values();
                let lb = runs[b].lambda_probe[gi].sorted_values();
                assert_eq!(
                    la.len(),
                    lb.len(),
                    "relevance multisets must pair up across orders"
                );
                for (x, y) in la.iter().zip(&lb) {
                    lambda_max_dev = lambda_max_dev.max((x - y).abs());
                }
            }
        }
    }

    let mut ims_spread = 0.0f64;
    for gi in 0..g {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for run in &runs {
            hi = hi.max(run.rows[gi].identity_mean_similarity);
            lo = lo.min(run.rows[gi].identity_mean_similarity);
        }
        ims_spread = ims_spread.max(hi - lo);
    }
    let mean_forgetting = runs
        .iter()
        .map(|r| r.rows.iter().map(|row| row.forgetting).sum::<f64>() / g as f64)
        .collect();

    Ok(OrderExperimentResult {
        orders: orders.to_vec(),
        runs,
        lambda_max_dev,
        ims_spread,
        mean_forgetting,
    })
}
