//! Two properties of the aggregation decoder: it treats the proxy bank as
//! a set, and deep self-attention-only stacks collapse the spectrum of
//! their outputs.
//!
//! The first half permutes the proxy rows and checks the decoder output
//! permutes identically. The second half measures the effective rank
//! (entropy of the singular-value distribution) of proxies pushed through
//! residual self-attention layers with no cross terms: depth concentrates
//! the spectrum, so the effective rank drops.

use fl2t::aggregation::{
    decoder_forward, decoder_layer_outputs, effective_rank, DecoderParams,
};
use fl2t::numerics::{gaussian, Matrix, SeededRng};

fn main() -> fl2t::Result<()> {
    let mut rng = SeededRng::new(21);
    let dim = 16;
    let concepts = 6;

    let params = DecoderParams::init(&mut rng, dim, 2, false);
    let proxies = gaussian(&mut rng, concepts, dim, 0.0, 1.0);
    let prompt = gaussian(&mut rng, 3, dim, 0.0, 1.0);

    let out = decoder_forward(&proxies, &prompt, &params)?;
    let perm = [4usize, 1, 5, 0, 2, 3];
    let permuted = Matrix::from_rows(
        &perm.iter().map(|&i| proxies.row(i).to_vec()).collect::<Vec<_>>(),
    )?;
    let out_permuted = decoder_forward(&permuted, &prompt, &params)?;
    let mut exact = true;
    for (slot, &i) in perm.iter().enumerate() {
        exact &= out_permuted.row(slot) == out.row(i);
    }
    println!("decoder permutation equivariance: {exact} (bitwise)");

    // Self-attention-only stack: wider random weights, no layer norm, and
    // the prompt is never read because only self-attention contributes.
    let mut deep = DecoderParams::zeros(dim, 4);
    for layer in &mut deep.layers {
        layer.wq = gaussian(&mut rng, dim, dim, 0.0, 0.3);
        layer.wk = gaussian(&mut rng, dim, dim, 0.0, 0.3);
        layer.wv = gaussian(&mut rng, dim, dim, 0.0, 0.3);
        layer.wo = gaussian(&mut rng, dim, dim, 0.0, 0.3);
    }
    let start = gaussian(&mut rng, concepts, dim, 0.0, 1.0);
    let outputs = decoder_layer_outputs(&start, &prompt, &deep)?;
    println!("\neffective rank through a self-attention-only stack:");
    println!("  input:   {:.4}", effective_rank(&start)?);
    for (depth, layer_out) in outputs.iter().enumerate() {
        println!("  layer {}: {:.4}", depth + 1, effective_rank(layer_out)?);
    }
    Ok(())
}
