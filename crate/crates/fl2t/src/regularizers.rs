//! Training regularizers and their closed-form gradients.
//!
//! Three penalties shape consolidation:
//!
//! - subspace orthogonality: for the active concept `g`, penalize overlap
//!   between its adapter row spaces and every other concept's, either
//!   uniformly or scaled by per-concept relevance weights;
//! - shared-subspace reconstruction: every concept's weight delta should be
//!   expressible as its own projection of one shared basis;
//! - contrastive separation: cross-concept summary vectors should repel
//!   each other in cosine similarity.
//!
//! Each penalty ships with hand-derived gradients; the unit tests check all
//! of them against central finite differences.

use crate::error::{Fl2tError, Result};
use crate::lora::AdapterSet;
use crate::numerics::{norm, Matrix, SeededRng};
use serde::{Deserialize, Serialize};

/// Standard deviation for subspace initialization.
pub const SUBSPACE_INIT_STD: f64 = 0.01;

/// Shared low-rank basis plus per-concept projections onto it.
///
/// `w_star[l]` is the shared basis for layer `l` (shape `s x in_dim`);
/// `projections[i][l]` maps it into concept `i`'s delta (shape `out_dim x s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSubspace {
    pub w_star: Vec<Matrix>,
    pub projections: Vec<Vec<Matrix>>,
}

impl SharedSubspace {
    /// Gaussian-initialized subspace for `concepts` concepts and the given
    /// per-layer dimensions.
    pub fn init(
        rng: &mut SeededRng,
        concepts: usize,
        layer_dims: &[(usize, usize)],
        subspace_dim: usize,
    ) -> SharedSubspace {
        let w_star = layer_dims
            .iter()
            .map(|&(_, in_dim)| {
                crate::numerics::gaussian(rng, subspace_dim, in_dim, 0.0, SUBSPACE_INIT_STD)
            })
            .collect();
        let projections = (0..concepts)
            .map(|_| {
                layer_dims
                    .iter()
                    .map(|&(out_dim, _)| {
                        crate::numerics::gaussian(rng, out_dim, subspace_dim, 0.0, SUBSPACE_INIT_STD)
                    })
                    .collect()
            })
            .collect();
        SharedSubspace { w_star, projections }
    }
}

/// Relevance weights for the concepts other than the active one.
///
/// Entries are `(concept_index, lambda)` in ascending index order, each
/// lambda inside `[-1, 1]`. The active concept carries no weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceWeights {
    active: usize,
    entries: Vec<(usize, f64)>,
}

impl RelevanceWeights {
    pub fn new(active: usize, entries: Vec<(usize, f64)>) -> Result<RelevanceWeights> {
        for window in entries.windows(2) {
            if window[0].0 >= window[1].0 {
                return Err(Fl2tError::Domain(
                    "relevance entries must have strictly ascending concept indices".into(),
                ));
            }
        }
        for &(idx, lambda) in &entries {
            if idx == active {
                return Err(Fl2tError::Domain(format!(
                    "relevance weight given for the active concept {active}"
                )));
            }
            if !(-1.0..=1.0).contains(&lambda) || !lambda.is_finite() {
                return Err(Fl2tError::Domain(format!(
                    "relevance weight {lambda} for concept {idx} is outside [-1, 1]"
                )));
            }
        }
        Ok(RelevanceWeights { active, entries })
    }

    /// Uniform weights of 1 for every concept except `active`.
    pub fn ones(active: usize, concepts: usize) -> RelevanceWeights {
        RelevanceWeights {
            active,
            entries: (0..concepts)
                .filter(|&i| i != active)
                .map(|i| (i, 1.0))
                .collect(),
        }
    }

    /// Zero weights (cuts every cross-concept term).
    pub fn zeros(active: usize, concepts: usize) -> RelevanceWeights {
        RelevanceWeights {
            active,
            entries: (0..concepts)
                .filter(|&i| i != active)
                .map(|i| (i, 0.0))
                .collect(),
        }
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// Weight for concept `i`, if present.
    pub fn get(&self, i: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|(idx, _)| *idx == i)
            .map(|(_, l)| *l)
    }

    /// Multiset of weights (sorted values), used by order-invariance checks.
    pub fn sorted_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.entries.iter().map(|(_, l)| *l).collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Value of an orthogonality penalty plus a degeneracy marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityValue {
    pub value: f64,
    /// True when there was no other concept to compare against.
    pub degenerate: bool,
}

fn check_adapter_shapes(sets: &[AdapterSet], active: usize) -> Result<()> {
    if active >= sets.len() {
        return Err(Fl2tError::Domain(format!(
            "active concept index {active} out of range for {} adapter sets",
            sets.len()
        )));
    }
    let reference = &sets[active];
    for set in sets {
        if set.layers.len() != reference.layers.len() {
            return Err(Fl2tError::Domain(format!(
                "concept {} has {} adapter layers, concept {} has {}",
                set.concept_id,
                set.layers.len(),
                reference.concept_id,
                reference.layers.len()
            )));
        }
        for (l, (layer, ref_layer)) in set.layers.iter().zip(&reference.layers).enumerate() {
            if layer.a.rows() != ref_layer.a.rows() || layer.a.cols() != ref_layer.a.cols() {
                return Err(Fl2tError::Shape {
                    op: "orthogonality layer factors",
                    left_rows: ref_layer.a.rows(),
                    left_cols: ref_layer.a.cols(),
                    right_rows: layer.a.rows(),
                    right_cols: layer.a.cols(),
                });
            }
            let _ = l;
        }
    }
    Ok(())
}

/// Per-concept overlap terms `sum_l ||A_i A_g^T||_F^2` for every `i != g`,
/// in ascending concept order. Shared by the plain and weighted penalties
/// so that uniform weights reproduce the plain value bitwise.
fn overlap_terms(sets: &[AdapterSet], active: usize) -> Vec<(usize, f64)> {
    let a_g = &sets[active];
    let mut terms = Vec::with_capacity(sets.len().saturating_sub(1));
    for (i, set) in sets.iter().enumerate() {
        if i == active {
            continue;
        }
        let mut term = 0.0;
        for (layer, g_layer) in set.layers.iter().zip(&a_g.layers) {
            term += layer.a.mul_t(&g_layer.a).frobenius_norm_sq();
        }
        terms.push((i, term));
    }
    terms
}

/// Uniform subspace-orthogonality penalty
/// `sum_{i != g} sum_l ||A_i^l (A_g^l)^T||_F^2`.
///
/// With a single concept there is nothing to compare against; the value is
/// zero and the degenerate flag is set.
pub fn r1_orthogonality(sets: &[AdapterSet], active: usize) -> Result<OrthogonalityValue> {
    check_adapter_shapes(sets, active)?;
    if sets.len() < 2 {
        return Ok(OrthogonalityValue {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut value = 0.0;
    for (_, term) in overlap_terms(sets, active) {
        value += term;
    }
    Ok(OrthogonalityValue {
        value,
        degenerate: false,
    })
}

/// Relevance-weighted orthogonality penalty
/// `sum_{i != g} lambda_i sum_l ||A_i^l (A_g^l)^T||_F^2`.
pub fn r1_weighted(
    sets: &[AdapterSet],
    active: usize,
    lambda: &RelevanceWeights,
) -> Result<OrthogonalityValue> {
    check_adapter_shapes(sets, active)?;
    if lambda.active() != active {
        return Err(Fl2tError::Domain(format!(
            "relevance weights were built for concept {}, not {active}",
            lambda.active()
        )));
    }
    if sets.len() < 2 {
        return Ok(OrthogonalityValue {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut value = 0.0;
    for (i, term) in overlap_terms(sets, active) {
        let weight = lambda.get(i).ok_or_else(|| {
            Fl2tError::Domain(format!("no relevance weight for concept {i}"))
        })?;
        value += weight * term;
    }
    Ok(OrthogonalityValue {
        value,
        degenerate: false,
    })
}

/// Gradients of the weighted orthogonality penalty.
#[derive(Debug, Clone)]
pub struct OrthogonalityGrads {
    /// Gradient with respect to each concept's `A` factors,
    /// `[concept][layer]`, zero matrices where a concept does not appear.
    pub d_a: Vec<Vec<Matrix>>,
    /// Gradient with respect to each relevance weight, ascending order.
    pub d_lambda: Vec<(usize, f64)>,
}

/// Hand-derived gradients of [`r1_weighted`].
///
/// With `P_i^l = A_i^l (A_g^l)^T`:
/// `d/dA_i = 2 lambda_i P_i A_g`, `d/dA_g = sum_i 2 lambda_i P_i^T A_i`,
/// `d/dlambda_i = sum_l ||P_i^l||_F^2`.
pub fn r1_weighted_grads(
    sets: &[AdapterSet],
    active: usize,
    lambda: &RelevanceWeights,
) -> Result<OrthogonalityGrads> {
    check_adapter_shapes(sets, active)?;
    let mut d_a: Vec<Vec<Matrix>> = sets
        .iter()
        .map(|set| {
            set.layers
                .iter()
                .map(|l| Matrix::zeros(l.a.rows(), l.a.cols()))
                .collect()
        })
        .collect();
    let mut d_lambda = Vec::new();
    let a_g = &sets[active];
    for (i, set) in sets.iter().enumerate() {
        if i == active {
            continue;
        }
        let weight = lambda.get(i).ok_or_else(|| {
            Fl2tError::Domain(format!("no relevance weight for concept {i}"))
        })?;
        let mut term = 0.0;
        for (l, (layer, g_layer)) in set.layers.iter().zip(&a_g.layers).enumerate() {
            let p = layer.a.mul_t(&g_layer.a);
            term += p.frobenius_norm_sq();
            d_a[i][l].add_scaled_assign(&p.mul_unchecked(&g_layer.a), 2.0 * weight);
            d_a[active][l].add_scaled_assign(&p.tmul(&layer.a), 2.0 * weight);
        }
        d_lambda.push((i, term));
    }
    Ok(OrthogonalityGrads { d_a, d_lambda })
}

/// Shared-subspace reconstruction penalty
/// `sum_i sum_l ||dW_i^l - H_i^l W_*^l||_F^2`.
pub fn r2_shared(sets: &[AdapterSet], subspace: &SharedSubspace) -> Result<f64> {
    if sets.len() != subspace.projections.len() {
        return Err(Fl2tError::Domain(format!(
            "{} adapter sets but {} projection sets",
            sets.len(),
            subspace.projections.len()
        )));
    }
    let mut value = 0.0;
    for (set, proj) in sets.iter().zip(&subspace.projections) {
        if set.layers.len() != subspace.w_star.len() || proj.len() != subspace.w_star.len() {
            return Err(Fl2tError::Domain(format!(
                "concept {} layer count does not match the shared subspace",
                set.concept_id
            )));
        }
        for ((layer, h), w_star) in set.layers.iter().zip(proj).zip(&subspace.w_star) {
            let target = h.matmul(w_star)?;
            let resid = crate::lora::delta_weight(layer).sub(&target)?;
            value += resid.frobenius_norm_sq();
        }
    }
    Ok(value)
}

/// Gradients of the reconstruction penalty.
#[derive(Debug, Clone)]
pub struct ReconstructionGrads {
    pub d_a: Vec<Vec<Matrix>>,
    pub d_b: Vec<Vec<Matrix>>,
    pub d_h: Vec<Vec<Matrix>>,
    pub d_w_star: Vec<Matrix>,
}

/// Hand-derived gradients of [`r2_shared`].
///
/// With `R = dW_i - H_i W_*`: `d/ddW_i = 2R` (pushed through the factors as
/// `d/dA_i = 2 R B_i^T`, `d/dB_i = 2 A_i^T R`), `d/dH_i = -2 R W_*^T`, and
/// `d/dW_* = sum_i -2 H_i^T R`.
pub fn r2_grads(sets: &[AdapterSet], subspace: &SharedSubspace) -> Result<ReconstructionGrads> {
    if sets.len() != subspace.projections.len() {
        return Err(Fl2tError::Domain(format!(
            "{} adapter sets but {} projection sets",
            sets.len(),
            subspace.projections.len()
        )));
    }
    let mut d_a = Vec::with_capacity(sets.len());
    let mut d_b = Vec::with_capacity(sets.len());
    let mut d_h = Vec::with_capacity(sets.len());
    let mut d_w_star: Vec<Matrix> = subspace
        .w_star
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    for (set, proj) in sets.iter().zip(&subspace.projections) {
        let mut da_layers = Vec::with_capacity(set.layers.len());
        let mut db_layers = Vec::with_capacity(set.layers.len());
        let mut dh_layers = Vec::with_capacity(set.layers.len());
        for (l, (layer, h)) in set.layers.iter().zip(proj).enumerate() {
            let w_star = &subspace.w_star[l];
            let target = h.matmul(w_star)?;
            let resid = crate::lora::delta_weight(layer).sub(&target)?;
            da_layers.push(resid.mul_t(&layer.b).scaled(2.0));
            db_layers.push(layer.a.tmul(&resid).scaled(2.0));
            dh_layers.push(resid.mul_t(w_star).scaled(-2.0));
            d_w_star[l].add_scaled_assign(&h.tmul(&resid), -2.0);
        }
        d_a.push(da_layers);
        d_b.push(db_layers);
        d_h.push(dh_layers);
    }
    Ok(ReconstructionGrads {
        d_a,
        d_b,
        d_h,
        d_w_star,
    })
}

/// Pairwise cosine-similarity matrix with an exact unit diagonal.
fn cosine_matrix(s: &Matrix) -> Result<Matrix> {
    let g = s.rows();
    let mut k = Matrix::zeros(g, g);
    for i in 0..g {
        k.set(i, i, 1.0);
        for j in (i + 1)..g {
            let c = crate::numerics::cosine_sim(s.row(i), s.row(j))?;
            k.set(i, j, c);
            k.set(j, i, c);
        }
    }
    Ok(k)
}

/// Contrastive separation penalty over summary rows.
///
/// `(1/G) sum_i -log( exp(1/tau) / sum_j exp(K_ij/tau) )` with `K` the
/// pairwise cosine matrix. The self-similarity is identically 1, so the
/// numerator is constant; minimizing the penalty pushes off-diagonal
/// similarities down. Log-sum-exp is evaluated with max subtraction so
/// small temperatures stay finite.
pub fn r3_contrastive(s: &Matrix, tau: f64) -> Result<f64> {
    if s.rows() < 2 {
        return Err(Fl2tError::Domain(format!(
            "contrastive penalty needs at least 2 rows, got {}",
            s.rows()
        )));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Fl2tError::Domain(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let k = cosine_matrix(s)?;
    let g = s.rows();
    let mut value = 0.0;
    for i in 0..g {
        let mut max = f64::NEG_INFINITY;
        for j in 0..g {
            max = max.max(k.get(i, j) / tau);
        }
        let mut sum = 0.0;
        for j in 0..g {
            sum += (k.get(i, j) / tau - max).exp();
        }
        value += max + sum.ln() - 1.0 / tau;
    }
    Ok(value / g as f64)
}

/// Hand-derived gradient of [`r3_contrastive`] with respect to the rows.
///
/// With softmax weights `p_ij` over each row of `K/tau`, the penalty's
/// derivative through `K_ij` (`i != j`) is `p_ij / (G tau)`; the diagonal
/// is identically 1 and contributes nothing. Cosine derivatives are then
/// `d cos(u,v)/du = v/(|u||v|) - cos(u,v) u/|u|^2`.
pub fn r3_grad(s: &Matrix, tau: f64) -> Result<Matrix> {
    if s.rows() < 2 {
        return Err(Fl2tError::Domain(format!(
            "contrastive penalty needs at least 2 rows, got {}",
            s.rows()
        )));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Fl2tError::Domain(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let g = s.rows();
    let d = s.cols();
    let k = cosine_matrix(s)?;
    let scaled = {
        let mut m = k.clone();
        for v in m.data_mut() {
            *v /= tau;
        }
        m
    };
    let p = crate::numerics::softmax_rows(&scaled);
    let norms: Vec<f64> = (0..g).map(|i| norm(s.row(i))).collect();
    let mut grad = Matrix::zeros(g, d);
    let scale = 1.0 / (g as f64 * tau);
    for i in 0..g {
        for j in 0..g {
            if i == j {
                continue;
            }
            let w = scale * p.get(i, j);
            let kij = k.get(i, j);
            let cross = 1.0 / (norms[i] * norms[j]);
            for c in 0..d {
                let si = s.get(i, c);
                let sj = s.get(j, c);
                let gi = w * (sj * cross - kij * si / (norms[i] * norms[i]));
                let gj = w * (si * cross - kij * sj / (norms[j] * norms[j]));
                grad.set(i, c, grad.get(i, c) + gi);
                grad.set(j, c, grad.get(j, c) + gj);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraAdapter;
    use crate::numerics::{finite_diff_grad, max_relative_error, SeededRng, DEFAULT_STEP};

    fn random_sets(seed: u64, concepts: usize, layers: usize, dims: (usize, usize), rank: usize) -> Vec<AdapterSet> {
        let mut rng = SeededRng::new(seed);
        (0..concepts)
            .map(|c| AdapterSet {
                concept_id: c,
                layers: (0..layers)
                    .map(|_| LoraAdapter {
                        a: crate::numerics::gaussian(&mut rng, dims.0, rank, 0.0, 0.5),
                        b: crate::numerics::gaussian(&mut rng, rank, dims.1, 0.0, 0.5),
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn r1_positive_for_identical_factors() {
        let mut sets = random_sets(1, 2, 1, (5, 4), 2);
        sets[1].layers[0].a = sets[0].layers[0].a.clone();
        let r1 = r1_orthogonality(&sets, 1).unwrap();
        assert!(!r1.degenerate);
        assert!(
            r1.value > 0.0,
            "identical A factors must overlap, got {}",
            r1.value
        );
    }

    #[test]
    fn r1_zero_for_disjoint_column_support() {
        // A_0 only uses factor column 0, A_1 only column 1; every row inner
        // product vanishes, so the overlap is exactly zero.
        let mut sets = random_sets(2, 2, 1, (4, 4), 2);
        for r in 0..4 {
            sets[0].layers[0].a.set(r, 1, 0.0);
            sets[1].layers[0].a.set(r, 0, 0.0);
        }
        let r1 = r1_orthogonality(&sets, 1).unwrap();
        assert_eq!(r1.value, 0.0);
    }

    #[test]
    fn r1_single_concept_is_degenerate_zero() {
        let sets = random_sets(3, 1, 2, (4, 4), 2);
        let r1 = r1_orthogonality(&sets, 0).unwrap();
        assert_eq!(r1.value, 0.0);
        assert!(r1.degenerate);
    }

    #[test]
    fn r1_weighted_with_unit_weights_matches_plain_bitwise() {
        for seed in 0..10 {
            let sets = random_sets(100 + seed, 4, 2, (6, 5), 3);
            let plain = r1_orthogonality(&sets, 2).unwrap();
            let ones = RelevanceWeights::ones(2, 4);
            let weighted = r1_weighted(&sets, 2, &ones).unwrap();
            assert_eq!(
                plain.value.to_bits(),
                weighted.value.to_bits(),
                "seed {seed}: unit weights must reproduce the plain penalty bitwise"
            );
        }
    }

    #[test]
    fn relevance_weights_reject_out_of_range() {
        assert!(RelevanceWeights::new(0, vec![(1, 1.5)]).is_err());
        assert!(RelevanceWeights::new(0, vec![(1, f64::NAN)]).is_err());
        assert!(RelevanceWeights::new(0, vec![(0, 0.5)]).is_err());
        assert!(RelevanceWeights::new(0, vec![(2, 0.5), (1, 0.1)]).is_err());
        assert!(RelevanceWeights::new(0, vec![(1, -1.0), (2, 1.0)]).is_ok());
    }

    #[test]
    fn r1_weighted_gradients_match_finite_differences() {
        // 20 random configurations; flatten all A factors plus the lambdas
        // into one probe vector.
        for point in 0..20 {
            let sets = random_sets(500 + point, 3, 2, (4, 3), 2);
            let mut rng = SeededRng::new(900 + point);
            let lambda = RelevanceWeights::new(
                1,
                vec![(0, rng.next_f64() * 2.0 - 1.0), (2, rng.next_f64() * 2.0 - 1.0)],
            )
            .unwrap();
            let grads = r1_weighted_grads(&sets, 1, &lambda).unwrap();

            let mut x = Vec::new();
            for set in &sets {
                for layer in &set.layers {
                    x.extend_from_slice(layer.a.data());
                }
            }
            for &(_, l) in lambda.entries() {
                x.push(l);
            }
            let eval = |v: &[f64]| {
                let mut sets2 = sets.clone();
                let mut pos = 0;
                for set in &mut sets2 {
                    for layer in &mut set.layers {
                        let n = layer.a.data().len();
                        let (r, c) = (layer.a.rows(), layer.a.cols());
                        layer.a = Matrix::from_vec(r, c, v[pos..pos + n].to_vec()).unwrap();
                        pos += n;
                    }
                }
                let lam = RelevanceWeights::new(1, vec![(0, v[pos]), (2, v[pos + 1])]).unwrap();
                r1_weighted(&sets2, 1, &lam).unwrap().value
            };
            let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP).unwrap();
            let mut analytic = Vec::new();
            for da_set in &grads.d_a {
                for da in da_set {
                    analytic.extend_from_slice(da.data());
                }
            }
            for &(_, dl) in &grads.d_lambda {
                analytic.push(dl);
            }
            let err = max_relative_error(&numerical, &analytic);
            assert!(err < 1e-4, "point {point}: max relative error {err}");
        }
    }

    #[test]
    fn r2_zero_iff_deltas_lie_in_the_subspace() {
        // Construct adapters whose deltas equal H_i W_* exactly: set
        // A_i = H_i and B_i = W_*.
        let mut rng = SeededRng::new(7);
        let layer_dims = [(5, 6), (5, 6)];
        let subspace = SharedSubspace::init(&mut rng, 2, &layer_dims, 2);
        let sets: Vec<AdapterSet> = (0..2)
            .map(|c| AdapterSet {
                concept_id: c,
                layers: (0..2)
                    .map(|l| LoraAdapter {
                        a: subspace.projections[c][l].clone(),
                        b: subspace.w_star[l].clone(),
                    })
                    .collect(),
            })
            .collect();
        let r2 = r2_shared(&sets, &subspace).unwrap();
        assert_eq!(r2, 0.0, "constructive alignment must zero the penalty");

        let perturbed = random_sets(8, 2, 2, (5, 6), 2);
        let r2p = r2_shared(&perturbed, &subspace).unwrap();
        assert!(r2p > 0.0);
    }

    #[test]
    fn r2_nonnegative_over_random_inputs() {
        let mut rng = SeededRng::new(70);
        for trial in 0..50 {
            let sets = random_sets(3000 + trial, 3, 2, (4, 5), 2);
            let subspace = SharedSubspace::init(&mut rng, 3, &[(4, 5), (4, 5)], 2);
            let r2 = r2_shared(&sets, &subspace).unwrap();
            assert!(r2 >= 0.0, "trial {trial}: negative penalty {r2}");
        }
    }

    #[test]
    fn r2_gradients_match_finite_differences() {
        for point in 0..20 {
            let sets = random_sets(4000 + point, 2, 2, (4, 3), 2);
            let mut rng = SeededRng::new(5000 + point);
            let mut subspace = SharedSubspace::init(&mut rng, 2, &[(4, 3), (4, 3)], 2);
            // Move the subspace away from the tiny init so residuals are
            // far from zero and the probe is well conditioned.
            for w in &mut subspace.w_star {
                *w = crate::numerics::gaussian(&mut rng, 2, 3, 0.0, 0.5);
            }
            for proj in &mut subspace.projections {
                for h in proj.iter_mut() {
                    *h = crate::numerics::gaussian(&mut rng, 4, 2, 0.0, 0.5);
                }
            }
            let grads = r2_grads(&sets, &subspace).unwrap();

            let mut x = Vec::new();
            for set in &sets {
                for layer in &set.layers {
                    x.extend_from_slice(layer.a.data());
                    x.extend_from_slice(layer.b.data());
                }
            }
            for proj in &subspace.projections {
                for h in proj {
                    x.extend_from_slice(h.data());
                }
            }
            for w in &subspace.w_star {
                x.extend_from_slice(w.data());
            }
            let eval = |v: &[f64]| {
                let mut sets2 = sets.clone();
                let mut sub2 = subspace.clone();
                let mut pos = 0;
                let take = |rows: usize, cols: usize, pos: &mut usize| {
                    let n = rows * cols;
                    let m = Matrix::from_vec(rows, cols, v[*pos..*pos + n].to_vec()).unwrap();
                    *pos += n;
                    m
                };
                for set in &mut sets2 {
                    for layer in &mut set.layers {
                        layer.a = take(4, 2, &mut pos);
                        layer.b = take(2, 3, &mut pos);
                    }
                }
                for proj in &mut sub2.projections {
                    for h in proj.iter_mut() {
                        *h = take(4, 2, &mut pos);
                    }
                }
                for w in &mut sub2.w_star {
                    *w = take(2, 3, &mut pos);
                }
                r2_shared(&sets2, &sub2).unwrap()
            };
            let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP).unwrap();
            let mut analytic = Vec::new();
            for (da_set, db_set) in grads.d_a.iter().zip(&grads.d_b) {
                for (da, db) in da_set.iter().zip(db_set) {
                    analytic.extend_from_slice(da.data());
                    analytic.extend_from_slice(db.data());
                }
            }
            for dh_set in &grads.d_h {
                for dh in dh_set {
                    analytic.extend_from_slice(dh.data());
                }
            }
            for dw in &grads.d_w_star {
                analytic.extend_from_slice(dw.data());
            }
            let err = max_relative_error(&numerical, &analytic);
            assert!(err < 1e-4, "point {point}: max relative error {err}");
        }
    }

    #[test]
    fn r3_identical_rows_give_log_g() {
        for g in 2..6 {
            let rows: Vec<Vec<f64>> = (0..g).map(|_| vec![0.3, -0.7, 0.2]).collect();
            let s = Matrix::from_rows(&rows).unwrap();
            let r3 = r3_contrastive(&s, 0.1).unwrap();
            let expected = (g as f64).ln();
            assert!(
                (r3 - expected).abs() < 1e-12,
                "G={g}: expected ln {g} = {expected}, got {r3}"
            );
        }
    }

    #[test]
    fn r3_two_orthogonal_rows_match_closed_form() {
        // K = [[1,0],[0,1]], tau = 1: each term is
        // -ln(e / (e + 1)) = ln(1 + 1/e).
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r3 = r3_contrastive(&s, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!(
            (r3 - expected).abs() < 1e-12,
            "expected {expected}, got {r3} (0.31326...)"
        );
        assert!((expected - 0.31326168751822286).abs() < 1e-15);
    }

    #[test]
    fn r3_rejects_bad_inputs() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(r3_contrastive(&s, 0.1).is_err(), "single row");
        let s2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(r3_contrastive(&s2, 0.0).is_err(), "zero temperature");
        let s3 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(r3_contrastive(&s3, 0.1).is_err(), "zero-norm row");
    }

    #[test]
    fn r3_invariant_to_row_permutation_and_rescaling() {
        let mut rng = SeededRng::new(99);
        for trial in 0..50 {
            let s = crate::numerics::gaussian(&mut rng, 4, 5, 0.0, 1.0);
            let base = r3_contrastive(&s, 0.1).unwrap();
            let perm = [3usize, 1, 0, 2];
            let permuted =
                Matrix::from_rows(&perm.iter().map(|&i| s.row(i).to_vec()).collect::<Vec<_>>())
                    .unwrap();
            let p = r3_contrastive(&permuted, 0.1).unwrap();
            assert!(
                (base - p).abs() < 1e-12,
                "trial {trial}: permutation moved value {base} -> {p}"
            );
            let mut rescaled = s.clone();
            for (r, f) in [(0usize, 3.0), (2, 0.25)] {
                for v in rescaled.row_mut(r) {
                    *v *= f;
                }
            }
            let r = r3_contrastive(&rescaled, 0.1).unwrap();
            assert!(
                (base - r).abs() < 1e-12,
                "trial {trial}: rescaling moved value {base} -> {r}"
            );
        }
    }

    #[test]
    fn r3_gradient_matches_finite_differences() {
        for point in 0..20 {
            let mut rng = SeededRng::new(7000 + point);
            let s = crate::numerics::gaussian(&mut rng, 3, 4, 0.0, 1.0);
            let tau = 0.5;
            let analytic = r3_grad(&s, tau).unwrap();
            let x: Vec<f64> = s.data().to_vec();
            let eval = |v: &[f64]| {
                let m = Matrix::from_vec(3, 4, v.to_vec()).unwrap();
                r3_contrastive(&m, tau).unwrap()
            };
            let numerical = finite_diff_grad(eval, &x, DEFAULT_STEP).unwrap();
            let err = max_relative_error(&numerical, analytic.data());
            assert!(err < 1e-4, "point {point}: max relative error {err}");
        }
    }

    #[test]
    fn r3_gradient_pushes_similar_rows_apart() {
        // Two nearly parallel rows: a gradient step against the penalty
        // must lower the off-diagonal cosine.
        let s = Matrix::from_rows(&[vec![1.0, 0.05], vec![1.0, -0.05]]).unwrap();
        let before = crate::numerics::cosine_sim(s.row(0), s.row(1)).unwrap();
        let grad = r3_grad(&s, 0.1).unwrap();
        let mut stepped = s.clone();
        stepped.add_scaled_assign(&grad, -0.5);
        let after = crate::numerics::cosine_sim(stepped.row(0), stepped.row(1)).unwrap();
        assert!(
            after < before,
            "gradient step should separate rows: cos {before} -> {after}"
        );
    }
}
