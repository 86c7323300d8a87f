//! Low-rank adapter algebra and embedding-weighted aggregation.
//!
//! Each concept owns one adapter per denoiser layer: a weight delta
//! factored as `dW = A * B` with `A` of shape `out x rank` and `B` of shape
//! `rank x in`. `A` starts as small Gaussian noise and `B` starts at zero,
//! so a freshly initialized adapter is an exact no-op. At inference, the
//! per-concept deltas are blended with aggregation weights derived from how
//! strongly the prompt matches each stored concept embedding.

use crate::error::{Fl2tError, Result};
use crate::numerics::{dot, Matrix, SeededRng};
use serde::{Deserialize, Serialize};

/// Standard deviation of the `A` factor at initialization.
pub const INIT_STD: f64 = 0.01;

/// One low-rank weight delta, factored as `A * B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// Left factor, `out_dim x rank`, Gaussian at init.
    pub a: Matrix,
    /// Right factor, `rank x in_dim`, zero at init.
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }
}

/// All adapters of one concept, one per denoiser layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub concept_id: usize,
    pub layers: Vec<LoraAdapter>,
}

impl AdapterSet {
    /// Weight deltas for every layer.
    pub fn deltas(&self) -> Vec<Matrix> {
        self.layers.iter().map(delta_weight).collect()
    }
}

/// Aggregation weights over concepts; nonnegative with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EwaWeights {
    psi: Vec<f64>,
}

impl EwaWeights {
    pub fn values(&self) -> &[f64] {
        &self.psi
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
}

/// Fresh adapter: `A ~ N(0, INIT_STD^2)`, `B = 0`.
///
/// Rank must be positive and at most `min(out_dim, in_dim)`; a rank beyond
/// that bound cannot be realized by the factorization.
pub fn init_adapter(
    rng: &mut SeededRng,
    out_dim: usize,
    in_dim: usize,
    rank: usize,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > out_dim.min(in_dim) {
        return Err(Fl2tError::Domain(format!(
            "adapter rank {rank} is outside 1..={} for a {out_dim}x{in_dim} layer",
            out_dim.min(in_dim)
        )));
    }
    Ok(LoraAdapter {
        a: crate::numerics::gaussian(rng, out_dim, rank, 0.0, INIT_STD),
        b: Matrix::zeros(rank, in_dim),
    })
}

/// Dense weight delta `A * B`.
pub fn delta_weight(adapter: &LoraAdapter) -> Matrix {
    adapter.a.mul_unchecked(&adapter.b)
}

/// Merged weight `base + scale * A * B`.
pub fn merge(base: &Matrix, adapter: &LoraAdapter, scale: f64) -> Result<Matrix> {
    let delta = delta_weight(adapter);
    merge_delta(base, &delta, scale)
}

/// Merged weight `base + scale * delta` for an already-dense delta.
pub fn merge_delta(base: &Matrix, delta: &Matrix, scale: f64) -> Result<Matrix> {
    if (base.rows(), base.cols()) != (delta.rows(), delta.cols()) {
        return Err(Fl2tError::Shape {
            op: "merge",
            left_rows: base.rows(),
            left_cols: base.cols(),
            right_rows: delta.rows(),
            right_cols: delta.cols(),
        });
    }
    let mut out = base.clone();
    out.add_scaled_assign(delta, scale);
    Ok(out)
}

/// Aggregation weights for a prompt against the stored concept embeddings.
///
/// For each concept `i`, the match score is the maximum over prompt tokens
/// of the inner product between the token embedding and the stored concept
/// embedding. Scores are squared elementwise and normalized to unit L2
/// norm. The normalizer sums the squared scores in value-sorted order, so
/// permuting the embedding bank permutes the weights bitwise.
///
/// All-zero match scores leave no direction to aggregate along and fail
/// with a degeneracy error.
pub fn ewa_weights(prompt_embeddings: &Matrix, embedding_bank: &Matrix) -> Result<EwaWeights> {
    if prompt_embeddings.cols() != embedding_bank.cols() {
        return Err(Fl2tError::Shape {
            op: "ewa_weights",
            left_rows: prompt_embeddings.rows(),
            left_cols: prompt_embeddings.cols(),
            right_rows: embedding_bank.rows(),
            right_cols: embedding_bank.cols(),
        });
    }
    if prompt_embeddings.rows() == 0 || embedding_bank.rows() == 0 {
        return Err(Fl2tError::Domain(
            "ewa_weights needs at least one prompt token and one stored embedding".into(),
        ));
    }
    let g = embedding_bank.rows();
    let mut scores = vec![0.0f64; g];
    for i in 0..g {
        let mut best = f64::NEG_INFINITY;
        for t in 0..prompt_embeddings.rows() {
            let s = dot(prompt_embeddings.row(t), embedding_bank.row(i));
            if s > best {
                best = s;
            }
        }
        scores[i] = best;
    }
    let squared: Vec<f64> = scores.iter().map(|m| m * m).collect();
    if squared.iter().all(|s| *s == 0.0) {
        return Err(Fl2tError::Degenerate(
            "all prompt/concept match scores are zero; aggregation weights are undefined".into(),
        ));
    }
    // Sorted accumulation makes the normalizer independent of bank order.
    let mut fourth: Vec<f64> = squared.iter().map(|s| s * s).collect();
    fourth.sort_by(f64::total_cmp);
    let norm = fourth.iter().sum::<f64>().sqrt();
    let psi = squared.iter().map(|s| s / norm).collect();
    Ok(EwaWeights { psi })
}

/// Per-layer aggregate delta `sum_i psi_i * dW_i`.
///
/// Terms with an exactly zero weight are skipped, so a one-hot weight
/// vector reproduces the selected concept's deltas bitwise.
pub fn ewa_aggregate(sets: &[AdapterSet], weights: &EwaWeights) -> Result<Vec<Matrix>> {
    if sets.is_empty() {
        return Err(Fl2tError::Domain("ewa_aggregate needs at least one adapter set".into()));
    }
    if sets.len() != weights.len() {
        return Err(Fl2tError::Domain(format!(
            "{} adapter sets but {} aggregation weights",
            sets.len(),
            weights.len()
        )));
    }
    let layer_count = sets[0].layers.len();
    for set in sets {
        if set.layers.len() != layer_count {
            return Err(Fl2tError::Domain(format!(
                "concept {} has {} layers, expected {}",
                set.concept_id,
                set.layers.len(),
                layer_count
            )));
        }
    }
    let mut out = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let rows = sets[0].layers[l].out_dim();
        let cols = sets[0].layers[l].in_dim();
        let mut acc = Matrix::zeros(rows, cols);
        for (set, &w) in sets.iter().zip(weights.values()) {
            let adapter = &set.layers[l];
            if (adapter.out_dim(), adapter.in_dim()) != (rows, cols) {
                return Err(Fl2tError::Shape {
                    op: "ewa_aggregate",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: adapter.out_dim(),
                    right_cols: adapter.in_dim(),
                });
            }
            if w == 0.0 {
                continue;
            }
            if w == 1.0 {
                // Bitwise-faithful fast path for one-hot weights: adding
                // 1.0 * x to a zero accumulator canonicalizes -0.0, so copy
                // the delta entries instead.
                let delta = delta_weight(adapter);
                for (o, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    if *o == 0.0 {
                        *o = *d;
                    } else {
                        *o += *d;
                    }
                }
            } else {
                acc.add_scaled_assign(&delta_weight(adapter), w);
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{singular_values, SeededRng};

    fn random_adapter(seed: u64, out_dim: usize, in_dim: usize, rank: usize) -> LoraAdapter {
        let mut rng = SeededRng::new(seed);
        LoraAdapter {
            a: crate::numerics::gaussian(&mut rng, out_dim, rank, 0.0, 1.0),
            b: crate::numerics::gaussian(&mut rng, rank, in_dim, 0.0, 1.0),
        }
    }

    #[test]
    fn same_seed_gives_identical_init() {
        let a1 = init_adapter(&mut SeededRng::new(99), 8, 8, 4).unwrap();
        let a2 = init_adapter(&mut SeededRng::new(99), 8, 8, 4).unwrap();
        assert_eq!(a1, a2, "same seed must reproduce the adapter bitwise");
    }

    #[test]
    fn fresh_adapter_delta_is_zero_and_merge_is_noop() {
        let adapter = init_adapter(&mut SeededRng::new(5), 6, 7, 3).unwrap();
        let delta = delta_weight(&adapter);
        assert!(delta.data().iter().all(|v| *v == 0.0), "B = 0 must force dW = 0");

        let mut rng = SeededRng::new(6);
        let base = crate::numerics::gaussian(&mut rng, 6, 7, 0.0, 1.0);
        let merged = merge(&base, &adapter, 1.0).unwrap();
        assert_eq!(merged, base, "merging a fresh adapter must not move the base");
    }

    #[test]
    fn init_rejects_bad_rank() {
        assert!(init_adapter(&mut SeededRng::new(1), 4, 4, 0).is_err());
        assert!(init_adapter(&mut SeededRng::new(1), 4, 6, 5).is_err());
    }

    #[test]
    fn delta_rank_is_bounded_by_adapter_rank() {
        // Singular values past the factorization rank must vanish.
        let adapter = random_adapter(21, 16, 12, 3);
        let delta = delta_weight(&adapter);
        let sv = singular_values(&delta).unwrap();
        assert!(sv[0] > 1e-3, "delta should be nontrivial, got {:?}", sv);
        for (i, s) in sv.iter().enumerate().skip(3) {
            assert!(
                *s < 1e-10,
                "singular value {i} should vanish for a rank-3 delta, got {s}"
            );
        }
    }

    #[test]
    fn merge_then_subtract_recovers_scaled_delta() {
        let adapter = random_adapter(33, 9, 9, 4);
        let mut rng = SeededRng::new(34);
        let base = crate::numerics::gaussian(&mut rng, 9, 9, 0.0, 1.0);
        let scale = 0.75;
        let merged = merge(&base, &adapter, scale).unwrap();
        let recovered = merged.sub(&base).unwrap();
        let expected = delta_weight(&adapter).scaled(scale);
        for (r, e) in recovered.data().iter().zip(expected.data()) {
            assert!((r - e).abs() < 1e-12, "recovered {r} vs expected {e}");
        }
    }

    #[test]
    fn delta_is_linear_in_the_b_factor() {
        // Superposition: A(B1 + B2) = AB1 + AB2.
        let mut rng = SeededRng::new(44);
        let a = crate::numerics::gaussian(&mut rng, 10, 4, 0.0, 1.0);
        let b1 = crate::numerics::gaussian(&mut rng, 4, 8, 0.0, 1.0);
        let b2 = crate::numerics::gaussian(&mut rng, 4, 8, 0.0, 1.0);
        let joint = delta_weight(&LoraAdapter {
            a: a.clone(),
            b: b1.add(&b2).unwrap(),
        });
        let split = delta_weight(&LoraAdapter { a: a.clone(), b: b1 })
            .add(&delta_weight(&LoraAdapter { a, b: b2 }))
            .unwrap();
        for (x, y) in joint.data().iter().zip(split.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn ewa_weights_match_hand_example() {
        // Scores (3, 4): squared (9, 16), normalizer sqrt(81 + 256), so
        // psi = (9, 16) / sqrt(337).
        let prompt = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let bank = Matrix::from_rows(&[vec![3.0, 1.0], vec![2.0, 4.0]]).unwrap();
        let psi = ewa_weights(&prompt, &bank).unwrap();
        let expected = [9.0 / 337.0f64.sqrt(), 16.0 / 337.0f64.sqrt()];
        for (got, want) in psi.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-14, "psi {got} vs {want}");
        }
        let norm: f64 = psi.values().iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ewa_weights_take_max_over_tokens() {
        // Second token matches the lone concept harder than the first.
        let prompt = Matrix::from_rows(&[vec![0.1, 0.0], vec![2.0, 0.0]]).unwrap();
        let bank = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let psi = ewa_weights(&prompt, &bank).unwrap();
        assert_eq!(psi.values(), &[1.0], "single concept always normalizes to 1");
        // The max matters for multi-concept score ratios.
        let bank2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = ewa_weights(&prompt, &Matrix::zeros(1, 2));
        assert!(matches!(err, Err(Fl2tError::Degenerate(_))));
        let psi2 = ewa_weights(&prompt, &bank2).unwrap();
        assert_eq!(psi2.values()[0], 1.0);
        assert_eq!(psi2.values()[1], 0.0);
    }

    #[test]
    fn ewa_weights_norm_holds_over_random_inputs() {
        let mut rng = SeededRng::new(321);
        for trial in 0..1000 {
            let tokens = 1 + rng.next_index(4);
            let g = 1 + rng.next_index(6);
            let d = 2 + rng.next_index(6);
            let prompt = crate::numerics::gaussian(&mut rng, tokens, d, 0.0, 1.0);
            let bank = crate::numerics::gaussian(&mut rng, g, d, 0.0, 1.0);
            let psi = ewa_weights(&prompt, &bank).unwrap();
            let norm: f64 = psi.values().iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!(
                (norm - 1.0).abs() < 1e-10,
                "trial {trial}: psi norm {norm} not unit"
            );
            assert!(psi.values().iter().all(|p| *p >= 0.0), "trial {trial}: negative psi");
        }
    }

    #[test]
    fn ewa_weights_permute_with_the_bank_bitwise() {
        let mut rng = SeededRng::new(77);
        for _ in 0..100 {
            let prompt = crate::numerics::gaussian(&mut rng, 3, 5, 0.0, 1.0);
            let bank = crate::numerics::gaussian(&mut rng, 4, 5, 0.0, 1.0);
            let psi = ewa_weights(&prompt, &bank).unwrap();
            let perm = [2usize, 0, 3, 1];
            let permuted_bank =
                Matrix::from_rows(&perm.iter().map(|&i| bank.row(i).to_vec()).collect::<Vec<_>>())
                    .unwrap();
            let psi_perm = ewa_weights(&prompt, &permuted_bank).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert_eq!(
                    psi.values()[i].to_bits(),
                    psi_perm.values()[j].to_bits(),
                    "permutation must carry weights over exactly"
                );
            }
        }
    }

    #[test]
    fn ewa_aggregate_matches_double_loop_oracle() {
        // Independent oracle: accumulate psi_i * A_i * B_i entrywise with
        // explicit loops, then compare within 1e-12.
        let mut rng = SeededRng::new(555);
        for trial in 0..100 {
            let g = 2 + rng.next_index(3);
            let layers = 1 + rng.next_index(3);
            let sets: Vec<AdapterSet> = (0..g)
                .map(|c| AdapterSet {
                    concept_id: c,
                    layers: (0..layers)
                        .map(|l| random_adapter(1000 + 17 * trial + 3 * c as u64 + l as u64, 5, 6, 2))
                        .collect(),
                })
                .collect();
            let prompt = crate::numerics::gaussian(&mut rng, 2, 4, 0.0, 1.0);
            let bank = crate::numerics::gaussian(&mut rng, g, 4, 0.0, 1.0);
            let psi = ewa_weights(&prompt, &bank).unwrap();
            let got = ewa_aggregate(&sets, &psi).unwrap();
            for l in 0..layers {
                for r in 0..5 {
                    for c in 0..6 {
                        let mut acc = 0.0;
                        for (set, w) in sets.iter().zip(psi.values()) {
                            let mut d = 0.0;
                            for k in 0..2 {
                                d += set.layers[l].a.get(r, k) * set.layers[l].b.get(k, c);
                            }
                            acc += w * d;
                        }
                        assert!(
                            (acc - got[l].get(r, c)).abs() < 1e-12,
                            "trial {trial} layer {l} entry ({r},{c}): {acc} vs {}",
                            got[l].get(r, c)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn one_hot_weights_reproduce_single_concept_bitwise() {
        let sets: Vec<AdapterSet> = (0..3)
            .map(|c| AdapterSet {
                concept_id: c,
                layers: vec![random_adapter(71 + c as u64, 7, 7, 3)],
            })
            .collect();
        // Bank engineered so only concept 1 scores nonzero.
        let prompt = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let bank =
            Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, -3.0]]).unwrap();
        let psi = ewa_weights(&prompt, &bank).unwrap();
        assert_eq!(psi.values(), &[0.0, 1.0, 0.0]);
        let agg = ewa_aggregate(&sets, &psi).unwrap();
        let expected = delta_weight(&sets[1].layers[0]);
        assert_eq!(agg[0], expected, "one-hot aggregation must be bitwise exact");
    }

    #[test]
    fn identical_sets_scale_by_sqrt_two() {
        let set = AdapterSet {
            concept_id: 0,
            layers: vec![random_adapter(88, 6, 6, 2)],
        };
        let twin = AdapterSet {
            concept_id: 1,
            layers: set.layers.clone(),
        };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let psi = EwaWeights { psi: vec![s, s] };
        let agg = ewa_aggregate(&[set.clone(), twin], &psi).unwrap();
        let expected = delta_weight(&set.layers[0]).scaled(2.0f64.sqrt());
        for (x, y) in agg[0].data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_mismatches() {
        let set_a = AdapterSet {
            concept_id: 0,
            layers: vec![random_adapter(1, 5, 5, 2)],
        };
        let set_b = AdapterSet {
            concept_id: 1,
            layers: vec![random_adapter(2, 5, 5, 2), random_adapter(3, 5, 5, 2)],
        };
        let psi = EwaWeights { psi: vec![1.0, 0.0] };
        assert!(ewa_aggregate(&[set_a.clone(), set_b], &psi).is_err());
        let psi_short = EwaWeights { psi: vec![1.0] };
        assert!(ewa_aggregate(&[set_a.clone(), set_a], &psi_short).is_err());
        assert!(ewa_aggregate(&[], &psi_short).is_err());
    }
}
