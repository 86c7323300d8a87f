//! Monte-Carlo look at update drift when several per-concept gradients
//! are merged at once.
//!
//! For each trial, a random set of gradients is aggregated two ways: with
//! unit coefficients (the joint update) and with one coefficient damped
//! by the constructive rule. The joint norm never exceeds the sum of the
//! individual norms, and damping strictly shrinks it whenever the sum of
//! gradients is nonzero.

use fl2t::drift::{drift_report, GradientSet};
use fl2t::numerics::SeededRng;

fn main() -> fl2t::Result<()> {
    let mut rng = SeededRng::new(7);
    let dim = 16;
    let trials = 12;

    println!(
        "{:>5} {:>6} {:>12} {:>12} {:>12} {:>10}",
        "trial", "count", "norm_joint", "norm_reduced", "bound_rhs", "slack"
    );
    let mut min_slack = f64::INFINITY;
    let mut reduced = 0;
    for trial in 0..trials {
        let count = 2 + rng.next_index(7);
        let vectors: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..dim).map(|_| rng.next_gaussian()).collect())
            .collect();
        let set = GradientSet::new(vectors)?;
        let report = drift_report(&set)?;
        println!(
            "{trial:>5} {count:>6} {:>12.6} {:>12.6} {:>12.6} {:>10.3e}",
            report.norm_joint, report.norm_reduced, report.bound_rhs, report.slack
        );
        min_slack = min_slack.min(report.slack);
        if report.norm_reduced < report.norm_joint {
            reduced += 1;
        }
    }
    println!("\nsmallest slack: {min_slack:.3e} (the triangle bound held every time)");
    println!("strict reductions: {reduced}/{trials}");

    // A degenerate set: the gradients cancel exactly, so no damping of a
    // single coefficient can improve on the zero joint update.
    let degenerate = GradientSet::new(vec![vec![3.0, -1.0], vec![-3.0, 1.0]])?;
    let report = drift_report(&degenerate)?;
    println!(
        "\ncancelling pair: degenerate = {}, lambda = {:?}",
        report.degenerate, report.lambda
    );
    Ok(())
}
