//! Embedding-weighted aggregation: route a prompt to the right adapters
//! without being told which concept it mentions.
//!
//! Each concept owns an embedding direction and a low-rank adapter. For a
//! prompt, every concept scores the best match between its direction and
//! the prompt tokens; squaring and normalizing the scores gives the
//! mixing weights psi. A prompt aligned with one concept yields a
//! near-one-hot psi, and exact one-hot weights return that concept's
//! delta untouched.

use fl2t::lora::{delta_weight, ewa_aggregate, ewa_weights, init_adapter, AdapterSet};
use fl2t::numerics::{Matrix, SeededRng};

fn main() -> fl2t::Result<()> {
    let mut rng = SeededRng::new(3);
    let dim = 6;
    let concepts = 3;

    // Concept embeddings: three orthogonal directions.
    let mut bank = Matrix::zeros(concepts, dim);
    for (i, scale) in [1.5, 2.0, 0.8].into_iter().enumerate() {
        bank.set(i, i, scale);
    }

    // One adapter set per concept, single layer, rank 2.
    let sets: Vec<AdapterSet> = (0..concepts)
        .map(|concept_id| {
            Ok(AdapterSet {
                concept_id,
                layers: vec![init_adapter(&mut rng, 5, 5, 2)?],
            })
        })
        .collect::<fl2t::Result<_>>()?;
    // Fresh adapters have B = 0, so give each a visible delta.
    let mut sets = sets;
    for set in &mut sets {
        for adapter in &mut set.layers {
            for v in adapter.b.data_mut() {
                *v = rng.next_gaussian();
            }
        }
    }

    // A two-token prompt leaning toward concept 1.
    let mut prompt = Matrix::zeros(2, dim);
    prompt.set(0, 1, 0.9);
    prompt.set(0, 2, 0.1);
    prompt.set(1, 0, 0.05);
    prompt.set(1, 1, 1.1);

    let weights = ewa_weights(&prompt, &bank)?;
    println!("psi for a concept-1 prompt:");
    for (i, w) in weights.values().iter().enumerate() {
        println!("  concept {i}: {w:.6}");
    }
    let norm: f64 = weights.values().iter().map(|w| w * w).sum::<f64>().sqrt();
    println!("  |psi| = {norm:.12} (unit by construction)");

    let merged = ewa_aggregate(&sets, &weights)?;
    println!(
        "\naggregated delta norm: {:.6} (vs concept-1 alone {:.6})",
        merged[0].frobenius_norm(),
        delta_weight(&sets[1].layers[0]).frobenius_norm()
    );

    // Exact one-hot weights reproduce a single concept's delta bitwise.
    let mut one_hot = Matrix::zeros(1, dim);
    one_hot.set(0, 2, 1.0);
    let routed = ewa_aggregate(&sets, &ewa_weights(&one_hot, &bank)?)?;
    let exact = routed[0] == delta_weight(&sets[2].layers[0]);
    println!("one-hot prompt routes to concept 2 exactly: {exact}");
    Ok(())
}
