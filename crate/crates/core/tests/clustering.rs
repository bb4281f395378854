use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use coincide::cluster::{self, KMeansConfig};
use coincide::feature_store::FeatureMatrix;
use coincide::synth::{self, adjusted_rand_index, PointsPerCluster, Spread, SynthSpec};

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

#[test]
fn assign_matches_brute_force_and_euclidean() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let dim = rng.random_range(2..=16);
        let k = rng.random_range(1..=9);
        let x = FeatureMatrix::from_rows(&unit_rows(&mut rng, 150, dim)).unwrap();
        let centroids: Vec<f32> = unit_rows(&mut rng, k, dim).concat();
        let got = cluster::assign(&x, &centroids).unwrap();
        for (i, row) in x.rows().enumerate() {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let dot: f64 = row
                    .iter()
                    .zip(&centroids[c * dim..(c + 1) * dim])
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                if dot > best.1 {
                    best = (c, dot);
                }
            }
            assert_eq!(got[i], best.0);
        }
        assert_eq!(cluster::assign_euclidean(&x, &centroids).unwrap(), got);
    }
}

#[test]
fn recovers_well_separated_planted_clusters() {
    for seed in 0..5 {
        let spec = SynthSpec {
            n_clusters_true: 6,
            points_per_cluster: PointsPerCluster::Range([20, 80]),
            dim: 24,
            angular_spread_deg: Spread::Uniform(2.0),
            inter_cluster_sim: 0.0,
            task_labels: vec![],
            seed,
        };
        let ds = synth::generate(&spec).unwrap();
        let model = cluster::fit(&ds.features, &KMeansConfig::new(6, seed)).unwrap();
        assert_eq!(adjusted_rand_index(&model.assignment, &ds.truth).unwrap(), 1.0);
    }
}

#[test]
fn clusters_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = FeatureMatrix::from_rows(&unit_rows(&mut rng, 90, 10)).unwrap();
    let model = cluster::fit(&x, &KMeansConfig::new(4, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.clusters");
    cluster::write_clusters(&model, &path).unwrap();
    let back = cluster::read_clusters(&path, &x).unwrap();
    assert_eq!(back.centroids, model.centroids);
    assert_eq!(back.assignment, model.assignment);
    assert_eq!(back.objective, model.objective);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), cluster::CLUSTER_HEADER_LEN + 4 * (4 * 10 + 90));
    let other = FeatureMatrix::from_rows(&unit_rows(&mut rng, 91, 10)).unwrap();
    assert!(cluster::decode_clusters(&bytes, &other).is_err());
    assert!(cluster::decode_clusters(&bytes[..bytes.len() - 1], &x).is_err());
}

#[test]
fn same_seed_same_model_other_seed_may_differ() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = FeatureMatrix::from_rows(&unit_rows(&mut rng, 300, 6)).unwrap();
    let a = cluster::fit(&x, &KMeansConfig::new(7, 3)).unwrap();
    let b = cluster::fit(&x, &KMeansConfig::new(7, 3)).unwrap();
    assert_eq!(
        cluster::encode_clusters(&a).unwrap(),
        cluster::encode_clusters(&b).unwrap()
    );
}
