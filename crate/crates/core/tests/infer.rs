use geopfn::infer::{bins_json, predict, write_predictions_csv, InferError, Prediction, PredictiveDistribution};
use geopfn::model::{BinStrategy, ModelCheckpoint, ModelConfig};
use geopfn::prior::{sample_task_at, PriorConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_distribution(rng: &mut ChaCha8Rng, tails: bool) -> PredictiveDistribution {
    let n = rng.random_range(3..40);
    let mut edges = vec![rng.random_range(-5.0..5.0)];
    for _ in 0..n {
        let last = *edges.last().unwrap();
        edges.push(last + rng.random_range(0.05..2.0));
    }
    let raw: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random::<f64>() }).collect();
    let total: f64 = raw.iter().sum::<f64>().max(1e-12);
    let mut masses: Vec<f64> = raw.iter().map(|m| m / total).collect();
    if masses.iter().all(|&m| m == 0.0) {
        masses[0] = 1.0;
    }
    let (l, r) = if tails { (Some(rng.random_range(0.1..2.0)), Some(rng.random_range(0.1..2.0))) } else { (None, None) };
    PredictiveDistribution::new(edges, masses, l, r).unwrap()
}

/// Midpoint-rule integral of `y · pdf(y)` over `points` cells.
fn quadrature_mean(d: &PredictiveDistribution, points: usize) -> f64 {
    let e = d.edges();
    let lo = d.left_tail().map_or(e[0], |s| e[1] - 12.0 * s);
    let hi = d.right_tail().map_or(e[e.len() - 1], |s| e[e.len() - 2] + 12.0 * s);
    let h = (hi - lo) / points as f64;
    (0..points).map(|i| lo + (i as f64 + 0.5) * h).map(|y| y * d.pdf(y) * h).sum()
}

#[test]
fn symmetric_two_bins_have_mean_one() {
    let d = PredictiveDistribution::new(vec![0.0, 1.0, 2.0], vec![0.5, 0.5], None, None).unwrap();
    assert!((d.mean() - 1.0).abs() < 1e-12);
}

#[test]
fn single_bin_mass_has_its_centroid_as_mean() {
    let d = PredictiveDistribution::new(vec![0.0, 2.0, 4.0, 6.0], vec![0.0, 1.0, 0.0], None, None).unwrap();
    assert!((d.mean() - 3.0).abs() < 1e-12);
}

#[test]
fn uniform_median_is_the_midpoint() {
    let d = PredictiveDistribution::new(vec![0.0, 10.0], vec![1.0], None, None).unwrap();
    assert!((d.quantile(0.5).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn quantile_on_a_bin_boundary() {
    let d = PredictiveDistribution::new(vec![0.0, 1.0, 2.0], vec![0.25, 0.75], None, None).unwrap();
    assert!((d.quantile(0.25).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn probabilities_outside_the_open_interval_fail() {
    let d = PredictiveDistribution::new(vec![0.0, 1.0], vec![1.0], None, None).unwrap();
    for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(d.quantile(p), Err(InferError::Probability(_))));
    }
}

#[test]
fn invalid_distributions_are_rejected() {
    assert!(PredictiveDistribution::new(vec![0.0, 1.0, 1.0], vec![0.5, 0.5], None, None).is_err());
    assert!(PredictiveDistribution::new(vec![0.0, 1.0, 2.0], vec![0.5, 0.6], None, None).is_err());
    assert!(PredictiveDistribution::new(vec![0.0, 1.0, 2.0], vec![1.5, -0.5], None, None).is_err());
    assert!(PredictiveDistribution::new(vec![0.0, 1.0], vec![1.0], Some(-1.0), None).is_err());
}

#[test]
fn mean_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..20 {
        let d = random_distribution(&mut rng, k % 2 == 0);
        let e = d.edges();
        let span = e[e.len() - 1] - e[0];
        let q = quadrature_mean(&d, 1_000_000);
        assert!((d.mean() - q).abs() < 1e-3 * span, "mean {} quadrature {q}", d.mean());
    }
}

#[test]
fn cdf_inverts_quantile() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..100 {
        let d = random_distribution(&mut rng, k % 2 == 0);
        for p in [0.025, 0.5, 0.975] {
            let x = d.quantile(p).unwrap();
            assert!((d.cdf(x) - p).abs() < 1e-6, "p {p} x {x} cdf {}", d.cdf(x));
        }
    }
}

proptest! {
    #[test]
    fn quantile_is_monotone_and_brackets_the_mean(seed in 0u64..100_000, tails in any::<bool>()) {
        let d = random_distribution(&mut ChaCha8Rng::seed_from_u64(seed), tails);
        let ps: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
        let qs: Vec<f64> = ps.iter().map(|&p| d.quantile(p).unwrap()).collect();
        prop_assert!(qs.windows(2).all(|w| w[0] <= w[1]));
        let m = d.mean();
        prop_assert!(d.quantile(0.001).unwrap() <= m && m <= d.quantile(0.999).unwrap());
    }

    #[test]
    fn affine_maps_commute_with_summaries(seed in 0u64..100_000, a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let d = random_distribution(&mut ChaCha8Rng::seed_from_u64(seed), true);
        let t = d.affine(a, b).unwrap();
        let tol = 1e-9 * (1.0 + a) * (1.0 + b.abs() + d.mean().abs());
        prop_assert!((t.mean() - (a * d.mean() + b)).abs() < tol * 100.0);
        for p in [0.025, 0.5, 0.975] {
            let expect = a * d.quantile(p).unwrap() + b;
            prop_assert!((t.quantile(p).unwrap() - expect).abs() < tol * 100.0);
        }
    }
}

fn tiny_checkpoint() -> ModelCheckpoint {
    let cfg = ModelConfig { embed_dim: 16, n_layers: 1, n_heads: 2, mlp_hidden: 16, n_bins: 16, dropout_rate: 0.0, max_features: 8, max_rows: 64 };
    ModelCheckpoint::new(cfg, PriorConfig::default(), BinStrategy::EqualMass, cfg.init_weights(4)).unwrap()
}

fn prior() -> PriorConfig {
    PriorConfig { max_features: 4, min_rows: 10, max_rows: 30, seed: 13, ..PriorConfig::default() }
}

#[test]
fn duplicated_test_rows_get_identical_predictions() {
    let ck = tiny_checkpoint();
    let task = sample_task_at(&prior(), 5).unwrap();
    let dup = task.permute_test(&[0, 0]);
    let preds = predict(&ck, &dup).unwrap();
    assert_eq!(preds[0], preds[1]);
    assert_eq!(preds[0], predict(&ck, &task).unwrap()[0]);
}

#[test]
fn shuffled_training_rows_change_nothing() {
    let ck = tiny_checkpoint();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10 {
        let task = sample_task_at(&prior(), i).unwrap();
        let mut order: Vec<usize> = (0..task.n_train()).collect();
        order.shuffle(&mut rng);
        let a = predict(&ck, &task).unwrap();
        let b = predict(&ck, &task.permute_train(&order)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let scale = 1.0 + x.mean.abs();
            assert!((x.mean - y.mean).abs() < 1e-5 * scale);
            assert!((x.q975 - y.q975).abs() < 1e-5 * scale);
        }
    }
}

#[test]
fn predictions_ignore_test_targets() {
    let ck = tiny_checkpoint();
    let task = sample_task_at(&prior(), 2).unwrap();
    let mut mutated = task.clone();
    mutated.y_test = Some(vec![1e9; task.n_test()]);
    assert_eq!(predict(&ck, &task).unwrap(), predict(&ck, &mutated).unwrap());
}

#[test]
fn predictions_are_ordered_summaries() {
    let ck = tiny_checkpoint();
    for i in 0..10 {
        for p in predict(&ck, &sample_task_at(&prior(), i).unwrap()).unwrap() {
            assert!(p.q025 <= p.q500 && p.q500 <= p.q975);
            assert!(p.mean.is_finite());
        }
    }
}

#[test]
fn closed_interval_counts_its_endpoints() {
    let p = Prediction { mean: 0.0, q025: -1.0, q500: 0.0, q975: 1.0, distribution: None };
    assert!(p.covers(1.0) && p.covers(-1.0) && !p.covers(1.0 + 1e-12));
}

#[test]
fn prediction_csv_has_the_documented_columns() {
    let ck = tiny_checkpoint();
    let preds = predict(&ck, &sample_task_at(&prior(), 0).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_predictions_csv(&mut buf, &preds).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row_id,mean,q025,q500,q975"));
    assert_eq!(lines.count(), preds.len());
    let dump = bins_json(&preds);
    assert_eq!(dump.as_array().unwrap().len(), preds.len());
}

#[test]
fn exp_mean_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..20 {
        let d = random_distribution(&mut rng, k % 2 == 0).affine(0.3, -1.0).unwrap();
        let e = d.edges();
        let lo = d.left_tail().map_or(e[0], |s| e[1] - 14.0 * s);
        let hi = d.right_tail().map_or(e[e.len() - 1], |s| e[e.len() - 2] + 14.0 * s);
        let n = 1_000_000;
        let h = (hi - lo) / n as f64;
        let q: f64 = (0..n).map(|i| lo + (i as f64 + 0.5) * h).map(|y| y.exp() * d.pdf(y) * h).sum();
        assert!((d.exp_mean() - q).abs() < 1e-4 * q, "closed form {} quadrature {q}", d.exp_mean());
    }
}

#[test]
fn log_predictions_map_quantiles_through_exp() {
    let d = PredictiveDistribution::new(vec![0.0, 1.0, 2.0], vec![0.5, 0.5], None, None).unwrap();
    let p = Prediction::from_log_distribution(d.clone()).unwrap();
    assert!((p.q500 - 1f64.exp()).abs() < 1e-12);
    assert!((p.mean - (2f64.exp() - 1.0) / 2.0).abs() < 1e-12);
    assert!(p.mean > d.mean().exp());
}

#[test]
fn chunked_prediction_equals_one_pass() {
    let ck = tiny_checkpoint();
    for i in 0..5 {
        let task = sample_task_at(&prior(), i).unwrap();
        let whole = geopfn::infer::predict_distributions(&ck, &task).unwrap();
        for chunk in [1, 2, 3] {
            assert_eq!(geopfn::infer::predict_chunked(&ck, &task, chunk).unwrap(), whole);
        }
    }
}
