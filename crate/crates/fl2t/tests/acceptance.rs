//! End-to-end acceptance suite. One test per shipped guarantee; each
//! prints a single summary line on success and enforces its own runtime
//! budget. Tolerances are pinned inline next to the assertions.

use std::time::{Duration, Instant};

use fl2t::aggregation::{
    decoder_forward, effective_rank, fuse, init_proxies, relevance, ConceptEmbeddingBank,
    DecoderParams, FusionMlp, LambdaMode,
};
use fl2t::diffusion::{
    cdm_loss, forward_noise, gradient_check_suite, make_schedule, presample_noise, sample,
    LatentRescalePredictor, ZeroPredictor,
};
use fl2t::drift::{drift_report, find_reducing_coefficients, GradientSet};
use fl2t::drift::{interaction_count, MergeMechanism};
use fl2t::lora::{delta_weight, ewa_aggregate, ewa_weights, init_adapter, AdapterSet};
use fl2t::numerics::{dot, gaussian, norm, Matrix, SeededRng};
use fl2t::pipeline::{run_baseline, run_experiment, run_order_experiment, ExperimentConfig};

fn finish(criterion: &str, start: Instant, limit: Duration, detail: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed <= limit,
        "{criterion} exceeded its {limit:?} budget: took {elapsed:?}"
    );
    println!("{criterion}: PASS in {elapsed:.2?} ({detail})");
}

fn random_set(rng: &mut SeededRng, max_count: usize, max_dim: usize) -> GradientSet {
    let count = 1 + rng.next_index(max_count);
    let dim = 1 + rng.next_index(max_dim);
    let vectors: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..dim).map(|_| rng.next_gaussian()).collect())
        .collect();
    GradientSet::new(vectors).expect("random gradient sets are valid")
}

#[test]
fn acceptance_01_aggregation_upper_bound() {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let trials = 1000;
    let mut min_slack = f64::INFINITY;
    for _ in 0..trials {
        let set = random_set(&mut rng, 8, 32);
        let coeffs: Vec<f64> = (0..set.count()).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let merged = set.aggregate(&coeffs).unwrap();
        let rhs: f64 = (0..set.count()).map(|k| norm(set.vector(k))).sum();
        let slack = rhs - norm(&merged);
        assert!(
            slack >= -1e-10,
            "bound violated: |sum lambda_k m_k| = {} > {rhs} = sum |m_k|",
            norm(&merged)
        );
        min_slack = min_slack.min(slack);
    }
    finish(
        "criterion 01 (aggregation bound)",
        start,
        Duration::from_secs(1),
        &format!("{trials} mixed-sign trials, min slack {min_slack:.3e}"),
    );
}

#[test]
fn acceptance_02_damping_construction() {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let trials = 1000;
    let mut done = 0;
    while done < trials {
        let set = random_set(&mut rng, 8, 32);
        let joint = set.sum();
        if norm(&joint) <= 1e-6 {
            continue;
        }
        let coeffs = find_reducing_coefficients(&set);
        assert!(!coeffs.degenerate, "nonzero joint update marked degenerate");
        let damped = set.aggregate(&coeffs.lambda).unwrap();
        assert!(
            norm(&damped) < norm(&joint),
            "damping failed to reduce: {} >= {}",
            norm(&damped),
            norm(&joint)
        );

        // ||M - eps m||^2 expands to ||M||^2 - 2 eps <M, m> + eps^2 ||m||^2.
        let k = coeffs.k_star.expect("non-degenerate damping names k*");
        let eps = coeffs.epsilon.expect("non-degenerate damping has epsilon");
        let m = set.vector(k);
        let direct: f64 = joint
            .iter()
            .zip(m)
            .map(|(j, x)| (j - eps * x) * (j - eps * x))
            .sum();
        let expanded = dot(&joint, &joint) - 2.0 * eps * dot(&joint, m)
            + eps * eps * dot(m, m);
        let scale = direct.abs().max(1.0);
        assert!(
            (direct - expanded).abs() <= 1e-10 * scale,
            "quadratic identity off by {:.3e}",
            (direct - expanded).abs()
        );
        done += 1;
    }

    let cancelling =
        GradientSet::new(vec![vec![2.0, -1.0, 0.5], vec![-2.0, 1.0, -0.5]]).unwrap();
    let coeffs = find_reducing_coefficients(&cancelling);
    assert!(coeffs.degenerate, "cancelling pair must be degenerate");
    assert_eq!(coeffs.lambda, vec![1.0, 1.0], "degenerate case keeps unit coefficients");
    finish(
        "criterion 02 (damping construction)",
        start,
        Duration::from_secs(1),
        &format!("{trials} strict reductions, quadratic identity within 1e-10"),
    );
}

#[test]
fn acceptance_03_aggregation_set_invariance() {
    let start = Instant::now();
    let mut rng = SeededRng::new(303);
    let d = 16;
    for instance in 0..100 {
        let g = 2 + rng.next_index(5);
        let bank_matrix = gaussian(&mut rng, g, d, 0.0, 1.0);
        let decoder = DecoderParams::init(&mut rng, d, 2, false);
        let fusion = FusionMlp::init(&mut rng, d);
        let prompt = gaussian(&mut rng, 3, d, 0.0, 1.0);
        let active = rng.next_index(g);

        let bank = ConceptEmbeddingBank::new(bank_matrix.clone()).unwrap();
        let proxies = init_proxies(&bank);
        let refined = decoder_forward(&proxies.matrix, &prompt, &decoder).unwrap();
        let summaries = fuse(&bank, &refined, &fusion, active).unwrap();
        let lambda = relevance(&bank, &summaries, active, LambdaMode::Cosine).unwrap();

        // Fisher-Yates permutation of the concept axis.
        let mut perm: Vec<usize> = (0..g).collect();
        for i in (1..g).rev() {
            let j = rng.next_index(i + 1);
            perm.swap(i, j);
        }
        let permuted_rows: Vec<Vec<f64>> =
            perm.iter().map(|&i| bank_matrix.row(i).to_vec()).collect();
        let permuted_bank = ConceptEmbeddingBank::new(Matrix::from_rows(&permuted_rows).unwrap())
            .unwrap();
        let permuted_proxies = init_proxies(&permuted_bank);
        let permuted_refined =
            decoder_forward(&permuted_proxies.matrix, &prompt, &decoder).unwrap();
        let active_slot = perm.iter().position(|&i| i == active).unwrap();
        let permuted_summaries =
            fuse(&permuted_bank, &permuted_refined, &fusion, active_slot).unwrap();
        let permuted_lambda =
            relevance(&permuted_bank, &permuted_summaries, active_slot, LambdaMode::Cosine)
                .unwrap();

        for (slot, &original) in perm.iter().enumerate() {
            if original == active {
                continue;
            }
            let a = lambda.get(original).unwrap();
            let b = permuted_lambda.get(slot).unwrap();
            assert!(
                (a - b).abs() <= 1e-12,
                "instance {instance}: relevance for concept {original} moved \
                 from {a} to {b} under permutation"
            );
        }
    }
    finish(
        "criterion 03 (set invariance)",
        start,
        Duration::from_secs(5),
        "100 instances, G in 2..=6, per-entry deviation <= 1e-12",
    );
}

#[test]
fn acceptance_04_gradient_suite() {
    let start = Instant::now();
    let outcomes = gradient_check_suite("all", 20, 404).unwrap();
    for outcome in &outcomes {
        assert!(
            outcome.max_relative_error < 1e-4,
            "loss {} disagrees with finite differences: {:.3e}",
            outcome.loss,
            outcome.max_relative_error
        );
    }
    let worst = outcomes
        .iter()
        .map(|o| o.max_relative_error)
        .fold(0.0f64, f64::max);
    finish(
        "criterion 04 (gradient suite)",
        start,
        Duration::from_secs(30),
        &format!("6 losses x 20 points, worst relative error {worst:.3e}"),
    );
}

#[test]
fn acceptance_05_ewa_correctness() {
    let start = Instant::now();
    let mut rng = SeededRng::new(505);

    for _ in 0..1000 {
        let g = 2 + rng.next_index(6);
        let d = 2 + rng.next_index(15);
        let tokens = 1 + rng.next_index(4);
        let bank = gaussian(&mut rng, g, d, 0.0, 1.0);
        let prompt = gaussian(&mut rng, tokens, d, 0.0, 1.0);
        let weights = ewa_weights(&prompt, &bank).unwrap();
        let n: f64 = weights.values().iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-10, "|psi| = {n} is not unit");
    }

    // Orthogonal bank directions and an axis prompt give exactly one-hot
    // weights, which must return the selected delta bitwise.
    let g = 3;
    let d = 4;
    let mut bank = Matrix::zeros(g, d);
    for i in 0..g {
        bank.set(i, i, 0.5 + i as f64);
    }
    let sets: Vec<AdapterSet> = (0..g)
        .map(|concept_id| {
            let mut set = AdapterSet {
                concept_id,
                layers: vec![init_adapter(&mut rng, 5, 6, 2).unwrap()],
            };
            for v in set.layers[0].b.data_mut() {
                *v = rng.next_gaussian();
            }
            set
        })
        .collect();
    for target in 0..g {
        let mut prompt = Matrix::zeros(1, d);
        prompt.set(0, target, 2.0);
        let weights = ewa_weights(&prompt, &bank).unwrap();
        let mut expected = vec![0.0; g];
        expected[target] = 1.0;
        assert_eq!(weights.values(), &expected[..], "psi must be exactly one-hot");
        let merged = ewa_aggregate(&sets, &weights).unwrap();
        assert_eq!(
            merged[0],
            delta_weight(&sets[target].layers[0]),
            "one-hot aggregation must copy concept {target} bitwise"
        );
    }

    // Double-loop oracle.
    for _ in 0..100 {
        let g = 2 + rng.next_index(3);
        let layers = 1 + rng.next_index(2);
        let sets: Vec<AdapterSet> = (0..g)
            .map(|concept_id| {
                let mut set = AdapterSet {
                    concept_id,
                    layers: (0..layers)
                        .map(|_| init_adapter(&mut rng, 4, 3, 2).unwrap())
                        .collect(),
                };
                for l in &mut set.layers {
                    for v in l.b.data_mut() {
                        *v = rng.next_gaussian();
                    }
                }
                set
            })
            .collect();
        let bank = gaussian(&mut rng, g, 5, 0.0, 1.0);
        let prompt = gaussian(&mut rng, 2, 5, 0.0, 1.0);
        let weights = ewa_weights(&prompt, &bank).unwrap();
        let merged = ewa_aggregate(&sets, &weights).unwrap();
        for (l, got) in merged.iter().enumerate() {
            for r in 0..got.rows() {
                for c in 0..got.cols() {
                    let mut oracle = 0.0;
                    for (i, set) in sets.iter().enumerate() {
                        let delta = delta_weight(&set.layers[l]);
                        oracle += weights.values()[i] * delta.get(r, c);
                    }
                    assert!(
                        (got.get(r, c) - oracle).abs() <= 1e-12,
                        "layer {l} entry ({r},{c}) deviates from the double loop"
                    );
                }
            }
        }
    }
    finish(
        "criterion 05 (aggregation weights)",
        start,
        Duration::from_secs(2),
        "1000 unit norms, bitwise one-hot routing, 100 oracle cases",
    );
}

#[test]
fn acceptance_06_interaction_table() {
    let start = Instant::now();
    let mut checked = 0;
    for &n in &[1u64, 2, 4, 8, 16] {
        for &d in &[1u64, 3, 9, 27, 81] {
            for &m in &[1u64, 2, 6] {
                assert_eq!(
                    interaction_count(MergeMechanism::Summation, m, n, d),
                    m * n * d,
                    "summation count at (M={m}, n={n}, d={d})"
                );
                assert_eq!(
                    interaction_count(MergeMechanism::Concatenation, m, n, d),
                    0,
                    "concatenation count at (M={m}, n={n}, d={d})"
                );
                assert_eq!(
                    interaction_count(MergeMechanism::Attention, m, n, d),
                    m * n * n * d,
                    "attention count at (M={m}, n={n}, d={d})"
                );
                checked += 3;
            }
        }
    }
    finish(
        "criterion 06 (interaction table)",
        start,
        Duration::from_millis(100),
        &format!("{checked} exact counts over a 5x5x3 grid"),
    );
}

#[test]
fn acceptance_07_diffusion_sanity() {
    let start = Instant::now();
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();

    // Forward-noising variance: z_t - sqrt(alpha_bar) x0 has variance
    // 1 - alpha_bar per coordinate.
    let mut rng = SeededRng::new(707);
    let t = 40;
    let x0 = [1.5, -0.75];
    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let eps = [rng.next_gaussian(), rng.next_gaussian()];
        let z = forward_noise(&schedule, &x0, t, &eps).unwrap();
        let shift = schedule.alpha_bars[t].sqrt();
        for (zi, xi) in z.iter().zip(&x0) {
            let centered = zi - shift * xi;
            acc += centered * centered;
        }
    }
    let expected = 1.0 - schedule.alpha_bars[t];
    let empirical = acc / (2.0 * draws as f64);
    assert!(
        (empirical / expected - 1.0).abs() <= 0.05,
        "forward variance {empirical} vs expected {expected}"
    );

    // The rescaling stub predicts the injected noise exactly when the
    // clean data is identically zero.
    let stub = LatentRescalePredictor {
        schedule: make_schedule(100, 1e-4, 0.02).unwrap(),
    };
    let data = Matrix::zeros(6, 2);
    let noise = presample_noise(&mut rng, 64, data.rows(), schedule.steps(), 2);
    let loss = cdm_loss(&stub, &data, &[0.0; 4], &schedule, &noise).unwrap();
    assert!(loss < 1e-12, "stub loss {loss} should be numerically zero");

    // Ancestral sampling with the zero stub concentrates near zero: each
    // coordinate mean within 3 empirical standard errors.
    let mut rng = SeededRng::new(708);
    let n = 4000;
    let samples = sample(&ZeroPredictor, &schedule, &[0.0; 4], &mut rng, n, 2);
    for c in 0..2 {
        let mean: f64 = (0..n).map(|r| samples.get(r, c)).sum::<f64>() / n as f64;
        let var: f64 =
            (0..n).map(|r| (samples.get(r, c) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            mean.abs() <= 3.0 * se,
            "coordinate {c} mean {mean} exceeds 3 standard errors ({se})"
        );
    }
    finish(
        "criterion 07 (diffusion sanity)",
        start,
        Duration::from_secs(30),
        "variance law within 5%, exact stub loss, concentrated sampling",
    );
}

#[test]
fn acceptance_08_forgetting_direction() {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let pipeline = run_experiment(&config).unwrap();
    let baseline = run_baseline(&config).unwrap();

    let mean = |rows: &[fl2t::pipeline::MetricsRow]| {
        rows.iter().map(|r| r.forgetting).sum::<f64>() / rows.len() as f64
    };
    let pipeline_forgetting = mean(&pipeline.rows);
    let baseline_forgetting = mean(&baseline.rows);
    assert!(
        pipeline_forgetting < baseline_forgetting,
        "consolidation should forget less: {pipeline_forgetting} vs {baseline_forgetting}"
    );

    let favored = pipeline
        .rows
        .iter()
        .zip(&baseline.rows)
        .filter(|(p, b)| p.identity_mean_similarity >= b.identity_mean_similarity)
        .count();
    let needed = config.concepts.div_ceil(2);
    assert!(
        favored >= needed,
        "identity similarity favors consolidation on only {favored} of {} concepts \
         (needed {needed})",
        config.concepts
    );
    finish(
        "criterion 08 (forgetting direction)",
        start,
        Duration::from_secs(600),
        &format!(
            "mean forgetting {pipeline_forgetting:+.4} vs {baseline_forgetting:+.4}, \
             identity favored on {favored}/{} concepts",
            config.concepts
        ),
    );
}

#[test]
fn acceptance_09_order_agnosticism() {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let orders = vec![vec![0, 1, 2], vec![2, 0, 1], vec![1, 2, 0]];
    let result = run_order_experiment(&config, &orders).unwrap();
    assert!(
        result.lambda_max_dev <= 1e-12,
        "relevance probes deviate across orders by {:.3e}",
        result.lambda_max_dev
    );

    // Each run is individually bitwise reproducible.
    let again = run_order_experiment(&config, &orders).unwrap();
    for (first, second) in result.runs.iter().zip(&again.runs) {
        let a = serde_json::to_string(&first.state).unwrap();
        let b = serde_json::to_string(&second.state).unwrap();
        assert!(a == b, "repeated run produced a different consolidated state");
        for (x, y) in first.rows.iter().zip(&second.rows) {
            let a = serde_json::to_string(x).unwrap();
            let b = serde_json::to_string(y).unwrap();
            assert_eq!(a, b, "repeated run produced different metrics");
        }
    }
    finish(
        "criterion 09 (order agnosticism)",
        start,
        Duration::from_secs(1800),
        &format!(
            "3 orders, relevance deviation {:.3e}, reruns bitwise identical",
            result.lambda_max_dev
        ),
    );
}

#[test]
fn acceptance_10_rank_collapse() {
    let start = Instant::now();
    let mut rng = SeededRng::new(1010);
    let g = 6;
    let d = 16;
    let mut collapsed = 0;
    let trials = 50;
    for _ in 0..trials {
        let mut params = DecoderParams::zeros(d, 4);
        for layer in &mut params.layers {
            layer.wq = gaussian(&mut rng, d, d, 0.0, 0.3);
            layer.wk = gaussian(&mut rng, d, d, 0.0, 0.3);
            layer.wv = gaussian(&mut rng, d, d, 0.0, 0.3);
            layer.wo = gaussian(&mut rng, d, d, 0.0, 0.3);
        }
        let proxies = gaussian(&mut rng, g, d, 0.0, 1.0);
        let prompt = Matrix::zeros(1, d);
        let outputs =
            fl2t::aggregation::decoder_layer_outputs(&proxies, &prompt, &params).unwrap();
        let after_two = effective_rank(&outputs[1]).unwrap();
        let after_four = effective_rank(&outputs[3]).unwrap();
        if after_four < after_two {
            collapsed += 1;
        }
    }
    assert!(
        collapsed >= 45,
        "expected spectral collapse in at least 45/{trials} stacks, saw {collapsed}"
    );
    finish(
        "criterion 10 (rank collapse)",
        start,
        Duration::from_secs(5),
        &format!("effective rank dropped from layer 2 to 4 in {collapsed}/{trials} banks"),
    );
}

#[test]
fn acceptance_drift_report_consistency() {
    // The packaged drift report ties criteria 1 and 2 together: its slack
    // and damped norm must satisfy both guarantees on fresh random sets.
    let start = Instant::now();
    let mut rng = SeededRng::new(111);
    for _ in 0..200 {
        let set = random_set(&mut rng, 8, 32);
        let report = drift_report(&set).unwrap();
        assert!(report.slack >= -1e-10, "triangle slack {} negative", report.slack);
        assert!(report.norm_reduced <= report.norm_joint + 1e-12);
        assert_eq!(report.degenerate, report.norm_joint == 0.0);
    }
    finish(
        "drift report consistency",
        start,
        Duration::from_secs(1),
        "200 reports respect both bounds",
    );
}
