//! Finite-difference audit of every analytic gradient in the crate.
//!
//! Each loss below ships a hand-derived backward pass: the two
//! orthogonality penalties (plain and relevance-weighted), the shared
//! subspace reconstruction penalty, the contrastive separation penalty,
//! the denoising loss through merged adapters, and the full consolidation
//! objective through the decoder, fusion head, proxies, and token
//! embedding. The suite compares each against central finite differences
//! at random instances and reports the worst relative error.

use fl2t::diffusion::gradient_check_suite;

fn main() -> fl2t::Result<()> {
    let points = 5;
    let seed = 7;
    println!("{:>6} {:>8} {:>20}", "loss", "points", "max relative error");
    for outcome in gradient_check_suite("all", points, seed)? {
        println!(
            "{:>6} {:>8} {:>20.3e}",
            outcome.loss, outcome.points, outcome.max_relative_error
        );
    }
    println!("\nanything below 1e-4 counts as a match at step 1e-5");
    Ok(())
}
