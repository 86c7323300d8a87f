//! Drift analysis for merged adapters: triangle bound on the joint
//! update, damping coefficients that provably shrink it, a simplified
//! attention layer for interaction studies, and interaction counting for
//! different merge mechanisms.
//!
//! The object of study is a set of per-concept gradient directions
//! `m_1..m_N`. Merging everything at once moves the shared weights by
//! `M = sum_k m_k`; the analyzer bounds `||M||` by the sum of the
//! individual norms, and constructs per-concept coefficients in `[-1, 1]`
//! that strictly shrink the joint norm whenever it is nonzero, by damping
//! the single direction most aligned with the total.

use crate::error::{Fl2tError, Result};
use crate::numerics::{dot, norm, Matrix};
use serde::{Deserialize, Serialize};

/// Per-concept gradient directions of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    vectors: Vec<Vec<f64>>,
}

impl GradientSet {
    /// At least one vector, all of one nonzero dimension, all finite.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<GradientSet> {
        let dim = match vectors.first() {
            None => {
                return Err(Fl2tError::Domain(
                    "gradient set needs at least one vector".into(),
                ))
            }
            Some(v) if v.is_empty() => {
                return Err(Fl2tError::Domain("gradient vectors must be nonempty".into()))
            }
            Some(v) => v.len(),
        };
        for (k, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Fl2tError::Domain(format!(
                    "gradient {k} has dimension {} but the first has {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Fl2tError::Numerical(format!(
                    "gradient {k} contains a non-finite entry"
                )));
            }
        }
        Ok(GradientSet { vectors })
    }

    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k]
    }

    /// Weighted sum `sum_k lambda_k m_k`; every coefficient must sit in
    /// `[-1, 1]`.
    pub fn aggregate(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.count() {
            return Err(Fl2tError::Domain(format!(
                "{} coefficients for {} gradients",
                coeffs.len(),
                self.count()
            )));
        }
        for (k, c) in coeffs.iter().enumerate() {
            if !c.is_finite() || !(-1.0..=1.0).contains(c) {
                return Err(Fl2tError::Domain(format!(
                    "coefficient {c} for gradient {k} is outside [-1, 1]"
                )));
            }
        }
        let mut out = vec![0.0; self.dim()];
        for (v, c) in self.vectors.iter().zip(coeffs) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += c * x;
            }
        }
        Ok(out)
    }

    /// Plain sum of all gradients: the undamped joint update.
    pub fn sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for v in &self.vectors {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        out
    }

    /// Triangle-inequality slack `sum_k ||m_k|| - ||sum_k m_k||`;
    /// mathematically nonnegative.
    pub fn triangle_slack(&self) -> f64 {
        let rhs: f64 = self.vectors.iter().map(|v| norm(v)).sum();
        rhs - norm(&self.sum())
    }
}

/// Damping coefficients produced by [`find_reducing_coefficients`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducingCoefficients {
    /// One coefficient per gradient, each in `[-1, 1]`.
    pub lambda: Vec<f64>,
    /// Index of the damped gradient; absent in the degenerate case.
    pub k_star: Option<usize>,
    /// Fraction removed from the damped gradient; absent when degenerate.
    pub epsilon: Option<f64>,
    /// True when the joint update is exactly zero and no damping applies.
    pub degenerate: bool,
}

/// Coefficients that strictly shrink the joint update.
///
/// Picks `k* = argmax_k <M, m_k>` (lowest index on ties), then removes an
/// `epsilon = min(1/2, <M, m_k*> / ||m_k*||^2)` fraction of that gradient.
/// Expanding `||M - eps m||^2 = ||M||^2 - eps (2 <M, m> - eps ||m||^2)`
/// shows the norm drops strictly for either branch of the minimum. When
/// `M = 0` there is nothing to shrink and all coefficients stay 1.
pub fn find_reducing_coefficients(set: &GradientSet) -> ReducingCoefficients {
    let total = set.sum();
    if norm(&total) == 0.0 {
        return ReducingCoefficients {
            lambda: vec![1.0; set.count()],
            k_star: None,
            epsilon: None,
            degenerate: true,
        };
    }
    let mut k_star = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..set.count() {
        let align = dot(&total, set.vector(k));
        if align > best {
            best = align;
            k_star = k;
        }
    }
    // The alignments sum to ||M||^2 > 0, so the best one is positive and
    // the damped gradient is nonzero.
    let m_norm_sq = dot(set.vector(k_star), set.vector(k_star));
    let epsilon = (best / m_norm_sq).min(0.5);
    let mut lambda = vec![1.0; set.count()];
    lambda[k_star] = 1.0 - epsilon;
    ReducingCoefficients {
        lambda,
        k_star: Some(k_star),
        epsilon: Some(epsilon),
        degenerate: false,
    }
}

/// Everything the analyzer can say about one gradient set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub count: usize,
    pub dim: usize,
    /// Norm of the undamped joint update.
    pub norm_joint: f64,
    /// Norm after applying the reducing coefficients.
    pub norm_reduced: f64,
    /// Sum of the individual gradient norms: the triangle bound.
    pub bound_rhs: f64,
    /// `bound_rhs - norm_joint`; nonnegative up to roundoff.
    pub slack: f64,
    pub k_star: Option<usize>,
    pub epsilon: Option<f64>,
    pub lambda: Vec<f64>,
    pub degenerate: bool,
}

/// Run the full analysis: triangle bound plus reducing coefficients.
pub fn drift_report(set: &GradientSet) -> Result<DriftReport> {
    let joint = set.sum();
    let norm_joint = norm(&joint);
    let bound_rhs: f64 = (0..set.count()).map(|k| norm(set.vector(k))).sum();
    let coeffs = find_reducing_coefficients(set);
    let reduced = set.aggregate(&coeffs.lambda)?;
    Ok(DriftReport {
        count: set.count(),
        dim: set.dim(),
        norm_joint,
        norm_reduced: norm(&reduced),
        bound_rhs,
        slack: bound_rhs - norm_joint,
        k_star: coeffs.k_star,
        epsilon: coeffs.epsilon,
        lambda: coeffs.lambda,
        degenerate: coeffs.degenerate,
    })
}

/// One round of simplified attention mixing:
/// `X_i' = X_i + sum_{j != i} <X_i, X_j> X_j`.
///
/// The cross terms are accumulated in a canonical order determined only
/// by the values involved, never by row position, so permuting the input
/// rows permutes the output rows bitwise.
pub fn simplified_attention_layer(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let xi = x.row(i);
        let mut contributions: Vec<(f64, &[f64])> = Vec::with_capacity(x.rows() - 1);
        for j in 0..x.rows() {
            if j == i {
                continue;
            }
            contributions.push((dot(xi, x.row(j)), x.row(j)));
        }
        contributions.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                for (u, v) in a.1.iter().zip(b.1) {
                    let ord = u.total_cmp(v);
                    if ord != std::cmp::Ordering::Equal {
                        return ord;
                    }
                }
                std::cmp::Ordering::Equal
            })
        });
        let row = out.row_mut(i);
        for (coeff, vec) in contributions {
            for (o, v) in row.iter_mut().zip(vec) {
                *o += coeff * v;
            }
        }
    }
    out
}

/// How concepts are combined inside a model under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMechanism {
    /// Weight deltas added into shared parameters.
    Summation,
    /// Concepts kept in disjoint parameter blocks.
    Concatenation,
    /// Concepts mixed through token-to-token attention.
    Attention,
}

/// Count of pairwise concept-token interactions one forward pass incurs.
///
/// `merges` concepts, `tokens` per concept, `dim` channels. Summation
/// touches every token's channels once per merge; concatenation keeps
/// concepts disjoint so no cross-concept interaction exists; attention
/// compares every token against every token.
pub fn interaction_count(mechanism: MergeMechanism, merges: u64, tokens: u64, dim: u64) -> u64 {
    match mechanism {
        MergeMechanism::Summation => merges * tokens * dim,
        MergeMechanism::Concatenation => 0,
        MergeMechanism::Attention => merges * tokens * tokens * dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn hand_worked_damping_example() {
        // m1 = (3, 0), m2 = (0, 4): joint (3, 4) with norm 5. The second
        // gradient aligns best (16 vs 9), epsilon = min(1/2, 16/16) = 1/2,
        // so the damped update is (3, 2) with norm sqrt(13).
        let set = GradientSet::new(vec![vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let report = drift_report(&set).unwrap();
        assert_eq!(report.k_star, Some(1));
        assert_eq!(report.epsilon, Some(0.5));
        assert_eq!(report.lambda, vec![1.0, 0.5]);
        assert!((report.norm_joint - 5.0).abs() < 1e-12);
        assert!((report.norm_reduced - 13.0f64.sqrt()).abs() < 1e-12);
        assert!((report.bound_rhs - 7.0).abs() < 1e-12);
        assert!(report.norm_reduced < report.norm_joint);
    }

    #[test]
    fn single_gradient_gets_halved() {
        let set = GradientSet::new(vec![vec![2.0, 0.0]]).unwrap();
        let coeffs = find_reducing_coefficients(&set);
        assert_eq!(coeffs.epsilon, Some(0.5));
        assert_eq!(coeffs.lambda, vec![0.5]);
        let reduced = set.aggregate(&coeffs.lambda).unwrap();
        assert_eq!(reduced, vec![1.0, 0.0]);
    }

    #[test]
    fn cancelling_gradients_are_degenerate() {
        let set = GradientSet::new(vec![vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        let report = drift_report(&set).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.k_star, None);
        assert_eq!(report.lambda, vec![1.0, 1.0]);
        assert_eq!(report.norm_joint, 0.0);
        assert_eq!(report.norm_reduced, 0.0);
    }

    #[test]
    fn triangle_bound_holds_on_random_sets() {
        let mut rng = SeededRng::new(51);
        for trial in 0..200 {
            let n = 1 + rng.next_index(6);
            let d = 1 + rng.next_index(12);
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| 3.0 * rng.next_gaussian()).collect())
                .collect();
            let set = GradientSet::new(vectors).unwrap();
            assert!(
                set.triangle_slack() >= -1e-10,
                "trial {trial}: slack {} went negative",
                set.triangle_slack()
            );
        }
    }

    #[test]
    fn damping_strictly_reduces_random_joint_norms() {
        let mut rng = SeededRng::new(52);
        for trial in 0..200 {
            let n = 1 + rng.next_index(6);
            let d = 1 + rng.next_index(12);
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.next_gaussian()).collect())
                .collect();
            let set = GradientSet::new(vectors).unwrap();
            let report = drift_report(&set).unwrap();
            if report.degenerate {
                continue;
            }
            assert!(
                report.norm_reduced < report.norm_joint,
                "trial {trial}: {} did not drop below {}",
                report.norm_reduced,
                report.norm_joint
            );

            // The norm drop must match the quadratic expansion
            // ||M - eps m||^2 = ||M||^2 - 2 eps <M, m> + eps^2 ||m||^2.
            let k = report.k_star.unwrap();
            let eps = report.epsilon.unwrap();
            let m = set.vector(k);
            let total = set.sum();
            let expected_sq = dot(&total, &total) - 2.0 * eps * dot(&total, m)
                + eps * eps * dot(m, m);
            let got_sq = report.norm_reduced * report.norm_reduced;
            assert!(
                (expected_sq - got_sq).abs() < 1e-10,
                "trial {trial}: quadratic identity off by {}",
                (expected_sq - got_sq).abs()
            );
        }
    }

    #[test]
    fn aggregate_validates_inputs() {
        let set = GradientSet::new(vec![vec![1.0, 0.0]]).unwrap();
        assert!(set.aggregate(&[0.5, 0.5]).is_err(), "length mismatch");
        assert!(set.aggregate(&[1.5]).is_err(), "coefficient above 1");
        assert!(set.aggregate(&[f64::NAN]).is_err(), "non-finite coefficient");
        assert!(GradientSet::new(vec![]).is_err(), "empty set");
        assert!(
            GradientSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err(),
            "ragged dimensions"
        );
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut rng = SeededRng::new(53);
        for _ in 0..100 {
            let n = 2 + rng.next_index(5);
            let d = 4;
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.next_gaussian()).collect())
                .collect();
            let coeffs: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            let set = GradientSet::new(vectors.clone()).unwrap();
            let base = set.aggregate(&coeffs).unwrap();

            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.next_index(i + 1);
                idx.swap(i, j);
            }
            let shuffled_vecs: Vec<Vec<f64>> = idx.iter().map(|&i| vectors[i].clone()).collect();
            let shuffled_coeffs: Vec<f64> = idx.iter().map(|&i| coeffs[i]).collect();
            let set2 = GradientSet::new(shuffled_vecs).unwrap();
            let other = set2.aggregate(&shuffled_coeffs).unwrap();
            for (a, b) in base.iter().zip(&other) {
                assert!(
                    (a - b).abs() < 1e-12,
                    "weighted sum changed under reordering: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn attention_layer_fixes_orthonormal_rows() {
        let mut x = Matrix::zeros(3, 4);
        x.set(0, 0, 1.0);
        x.set(1, 1, 1.0);
        x.set(2, 2, 1.0);
        let out = simplified_attention_layer(&x);
        assert_eq!(out, x, "orthonormal rows have zero cross terms");
    }

    #[test]
    fn attention_layer_matches_hand_computation() {
        // Rows a*e1 and b*e1: <x1, x2> = ab, so row 1 becomes
        // (a + a b^2) e1 and row 2 becomes (b + a^2 b) e1.
        let a = 2.0;
        let b = 3.0;
        let x = Matrix::from_rows(&[vec![a, 0.0], vec![b, 0.0]]).unwrap();
        let out = simplified_attention_layer(&x);
        assert_eq!(out.get(0, 0), a + a * b * b);
        assert_eq!(out.get(1, 0), b + a * a * b);
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(1, 1), 0.0);
    }

    #[test]
    fn attention_layer_is_bitwise_permutation_equivariant() {
        let mut rng = SeededRng::new(54);
        for trial in 0..100 {
            let n = 2 + rng.next_index(6);
            let d = 1 + rng.next_index(8);
            let x = crate::numerics::gaussian(&mut rng, n, d, 0.0, 1.0);
            let out = simplified_attention_layer(&x);

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.next_index(i + 1);
                perm.swap(i, j);
            }
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
            let out_p = simplified_attention_layer(&Matrix::from_rows(&rows).unwrap());
            for (new_pos, &old) in perm.iter().enumerate() {
                for c in 0..d {
                    assert_eq!(
                        out.get(old, c).to_bits(),
                        out_p.get(new_pos, c).to_bits(),
                        "trial {trial}: row {old} entry {c} not bitwise equal"
                    );
                }
            }
        }
    }

    #[test]
    fn interaction_counts_match_mechanism_formulas() {
        // Hand cells first.
        assert_eq!(interaction_count(MergeMechanism::Summation, 2, 3, 4), 24);
        assert_eq!(interaction_count(MergeMechanism::Concatenation, 2, 3, 4), 0);
        assert_eq!(interaction_count(MergeMechanism::Attention, 2, 3, 4), 72);
        // Attention exceeds summation by exactly a factor of tokens.
        for m in 1..=5u64 {
            for n in 1..=5u64 {
                for d in [1u64, 8, 64] {
                    let s = interaction_count(MergeMechanism::Summation, m, n, d);
                    let a = interaction_count(MergeMechanism::Attention, m, n, d);
                    assert_eq!(a, s * n);
                    assert_eq!(interaction_count(MergeMechanism::Concatenation, m, n, d), 0);
                }
            }
        }
    }
}
