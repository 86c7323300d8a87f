//! Generation-quality metrics: a fixed random projection lifts 2-D points
//! into a comparison space, and cosine alignment against a concept's
//! reference direction scores how recognizably "on concept" generated
//! samples are.

use crate::error::Result;
use crate::numerics::{cosine_sim, Matrix, SeededRng};
use serde::{Deserialize, Serialize};

/// Seed of the shared projection; fixed so every run, order, and method
/// scores against the same embedding of the plane.
pub const PROJECTION_SEED: u64 = 0x464c_3254;

/// Width of the comparison space.
pub const PROJECTION_DIM: usize = 16;

/// The fixed projection matrix, `PROJECTION_DIM x d_data`.
pub fn projection_matrix(d_data: usize) -> Matrix {
    let mut rng = SeededRng::new(PROJECTION_SEED);
    crate::numerics::gaussian(&mut rng, PROJECTION_DIM, d_data, 0.0, 1.0)
}

/// Project points (one per row) into the comparison space.
pub fn project_rows(projection: &Matrix, points: &Matrix) -> Matrix {
    points.mul_t(projection)
}

/// Mean of the rows.
pub fn mean_row(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    let inv = 1.0 / m.rows() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    mean
}

/// Identity alignment: mean cosine between each projected generated point
/// and the concept's reference direction.
pub fn identity_alignment(generated_proj: &Matrix, reference: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..generated_proj.rows() {
        total += cosine_sim(generated_proj.row(r), reference)?;
    }
    Ok(total / generated_proj.rows() as f64)
}

/// Identity mean similarity: cosine between the mean projected generated
/// point and the reference direction.
pub fn identity_mean_similarity(generated_proj: &Matrix, reference: &[f64]) -> Result<f64> {
    cosine_sim(&mean_row(generated_proj), reference)
}

/// One concept's scores in one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Position of this concept in the visiting order.
    pub order_position: usize,
    pub concept_id: usize,
    pub identity_alignment: f64,
    pub identity_mean_similarity: f64,
    /// Own-data loss right after this concept's own training finished.
    pub loss_before: f64,
    /// Own-data loss at the end of the whole run.
    pub loss_after: f64,
    /// `loss_after - loss_before`; positive means degradation.
    pub forgetting: f64,
}
