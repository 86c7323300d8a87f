//! Order-agnostic consolidation of per-concept low-rank adapters on a toy
//! conditional diffusion model.
//!
//! The crate trains one low-rank adapter per concept independently, then
//! consolidates all of them jointly: a small transformer decoder refines a
//! bank of concept proxies against the current prompt, a fusion MLP turns
//! proxies into cross-concept summaries, relevance weights derived from
//! those summaries steer an orthogonality regularizer, and at inference the
//! per-concept weight deltas are blended by prompt-matched aggregation
//! weights. A separate analyzer checks the drift bound that justifies the
//! relevance weighting and counts pairwise interactions for summation,
//! concatenation, and attention-style merging.
//!
//! Modules, bottom to top:
//!
//! - [`numerics`]: deterministic matrices, seeded RNG, finite differences.
//! - [`lora`]: adapter init/merge algebra and embedding-weighted
//!   aggregation of per-concept deltas.
//! - [`regularizers`]: subspace orthogonality (plain and relevance
//!   weighted), shared-subspace reconstruction, contrastive separation.
//! - [`aggregation`]: proxy bank, transformer decoder, fusion MLP,
//!   relevance weights, effective rank.
//! - [`diffusion`]: toy DDPM (schedule, denoiser, losses, sampling) plus
//!   the full consolidation objective with hand-derived gradients.
//! - [`drift`]: aggregated-drift bounds, the constructive coefficient
//!   search, simplified attention, and interaction counting.
//! - [`pipeline`]: two-step training, sequential baseline, metrics, and
//!   the order experiment.
//! - [`checkpoint`]: JSON/CSV artifacts with atomic writes.
//! - [`cli`]: the `fl2t` command-line front end.
//!
//! Runnable walkthroughs for each capability live under `examples/`.

pub mod aggregation;
pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod drift;
pub mod error;
pub mod lora;
pub mod numerics;
pub mod pipeline;
pub mod regularizers;

pub use error::{Fl2tError, Result};
