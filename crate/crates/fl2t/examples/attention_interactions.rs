//! Pairwise-interaction accounting for three ways of merging M adapter
//! outputs over n tokens of width d, plus a demonstration that the
//! simplified attention layer treats its inputs as a set.
//!
//! Summation mixes every merge into one running sum (M*n*d multiplies),
//! concatenation never mixes anything, and attention pays for every token
//! pair (M*n^2*d). The attention layer below is the stripped-down update
//! x_i += sum_{j != i} <x_i, x_j> x_j; permuting its input rows permutes
//! the output rows the same way, bit for bit.

use fl2t::drift::{interaction_count, simplified_attention_layer, MergeMechanism};
use fl2t::numerics::{gaussian, Matrix, SeededRng};

fn main() -> fl2t::Result<()> {
    println!(
        "{:>14} {:>4} {:>4} {:>4} {:>14}",
        "mechanism", "M", "n", "d", "interactions"
    );
    let mechanisms = [
        MergeMechanism::Summation,
        MergeMechanism::Concatenation,
        MergeMechanism::Attention,
    ];
    for &(merges, tokens, dim) in &[(2u64, 4u64, 8u64), (3, 16, 32), (6, 77, 768)] {
        for mechanism in mechanisms {
            println!(
                "{:>14} {merges:>4} {tokens:>4} {dim:>4} {:>14}",
                format!("{mechanism:?}").to_lowercase(),
                interaction_count(mechanism, merges, tokens, dim)
            );
        }
    }

    let mut rng = SeededRng::new(11);
    let x = gaussian(&mut rng, 4, 6, 0.0, 1.0);
    let out = simplified_attention_layer(&x);

    let perm = [2usize, 0, 3, 1];
    let permuted_in = Matrix::from_rows(
        &perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>(),
    )?;
    let permuted_out = simplified_attention_layer(&permuted_in);

    let mut exact = true;
    for (slot, &i) in perm.iter().enumerate() {
        exact &= permuted_out.row(slot) == out.row(i);
    }
    println!("\npermutation equivariance of the attention layer: {exact} (bitwise)");
    Ok(())
}
