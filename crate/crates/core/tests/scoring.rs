use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use coincide::feature_store::FeatureMatrix;
use coincide::scoring::{allocate_budgets, budget_probabilities, density, DensityOptions};

fn blob(n: usize, dim: usize, noise: f64, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = center
                .iter()
                .map(|c| c + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();
    FeatureMatrix::from_rows(&rows).unwrap()
}

#[test]
fn subsampled_density_is_within_three_standard_errors() {
    let x = blob(1000, 16, 0.35, 11);
    let members: Vec<usize> = (0..1000).collect();
    let exact = density(
        &x,
        &members,
        &DensityOptions {
            cap: usize::MAX,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let capped = DensityOptions {
        cap: 200,
        ..Default::default()
    };
    let draws: Vec<f64> = (0..60).map(|s| density(&x, &members, &capped, s).unwrap()).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
    assert!(sd > 0.0);
    // a single seeded estimate, against the spread of the estimator
    assert!(
        (draws[0] - exact).abs() <= 3.0 * sd,
        "{} vs {exact} (sd {sd})",
        draws[0]
    );
    // the estimator is unbiased
    let se_mean = sd / (draws.len() as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 3.0 * se_mean,
        "mean {mean} vs {exact} (se {se_mean})"
    );
}

#[test]
fn cap_at_or_above_cluster_size_is_exact() {
    let x = blob(40, 8, 0.5, 3);
    let members: Vec<usize> = (0..40).collect();
    let exact = |cap| {
        density(
            &x,
            &members,
            &DensityOptions {
                cap,
                ..Default::default()
            },
            99,
        )
        .unwrap()
    };
    assert_eq!(exact(40), exact(usize::MAX));
    assert_eq!(exact(512), exact(usize::MAX));
}

#[test]
fn huge_tau_gives_uniform_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let k = rng.random_range(1..=40);
        let s: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..=1.0)).collect();
        let p = budget_probabilities(&s, &d, 1e6).unwrap();
        let worst = p.iter().map(|pi| (pi - 1.0 / k as f64).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "max deviation {worst}");
    }
}

#[test]
fn documented_budget_examples() {
    let p = budget_probabilities(&[0.2, 0.1], &[1.0, 1.0], 0.1).unwrap();
    let e = (2f64.exp(), 1f64.exp());
    assert!((p[0] - e.0 / (e.0 + e.1)).abs() < 1e-15);
    assert!((p[0] - 0.7311).abs() < 1e-4);

    // logits ln(0.55), ln(0.45) give P = [0.55, 0.45]
    let s = [0.55f64.ln() * 0.1, 0.45f64.ln() * 0.1];
    let (p, n) = allocate_budgets(&s, &[1.0, 1.0], 0.1, &[4, 100], 10).unwrap();
    assert!((p[0] - 0.55).abs() < 1e-12);
    assert_eq!(n, vec![4, 6]);

    let (_, n) = allocate_budgets(&[1.0, 1.0], &[1.0, 1.0], 0.3, &[10, 10], 20).unwrap();
    assert_eq!(n, vec![10, 10]);
    assert!(allocate_budgets(&[1.0, 1.0], &[1.0, 1.0], 0.3, &[10, 10], 21).is_err());
}
