//! Property-based invariants: consensus-matrix structure over random graphs,
//! flatten round-trips, loss sanity, similarity-matrix bounds, partition
//! conservation, and the heterogeneity/concentration monotonicity checks.

use proptest::prelude::*;

use deprl_core::data::{dirichlet_partition, generate_planted, PlantedOutput, PlantedSpec};
use deprl_core::metrics::cosine_similarity_matrix;
use deprl_core::model::{loss, ExampleSet, Head, LossKind, ReprShape, Representation};
use deprl_core::rng;
use deprl_core::topology::{ConsensusMatrix, Graph};

fn arb_graph() -> impl Strategy<Value = Graph> {
    (2usize..=32, 0.15f64..=1.0, any::<u64>())
        .prop_map(|(n, p, seed)| Graph::random_connected(n, p, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metropolis_is_doubly_stochastic_and_symmetric(g in arb_graph()) {
        let p = ConsensusMatrix::<f64>::metropolis(&g);
        prop_assert!(p.is_doubly_stochastic(1e-12));
        for i in 0..g.n_workers() {
            for j in 0..g.n_workers() {
                prop_assert_eq!(p.get(i, j), p.get(j, i));
                if !g.is_adjacent(i, j) {
                    prop_assert_eq!(p.get(i, j), 0.0);
                }
            }
        }
        prop_assert!(g.is_connected());
    }

    #[test]
    fn gossip_preserves_the_mean(g in arb_graph(), seed in any::<u64>()) {
        let p = ConsensusMatrix::<f64>::metropolis(&g);
        let n = g.n_workers();
        let mut rng = rng::substream(seed, 0, 0, rng::phase::PROBE);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng::std_normal(&mut rng) * 10.0).collect())
            .collect();
        let mixed = p.mix(&vectors);
        for c in 0..3 {
            let before: f64 = vectors.iter().map(|v| v[c]).sum::<f64>() / n as f64;
            let after: f64 = mixed.iter().map(|v| v[c]).sum::<f64>() / n as f64;
            prop_assert!((before - after).abs() < 1e-10);
        }
    }

    #[test]
    fn representation_flatten_roundtrip(
        d in 1usize..=8,
        z_frac in 0.0f64..1.0,
        h in 1usize..=6,
        nonlinear in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let z = 1 + ((d - 1) as f64 * z_frac) as usize;
        let shape = if nonlinear {
            ReprShape::OneHiddenTanh { d, h, z }
        } else {
            ReprShape::Linear { d, z }
        };
        let mut r = rng::substream(seed, 0, 0, rng::phase::GRADCHECK);
        let repr = Representation::<f64>::random_init(shape, &mut r).unwrap();
        let back = Representation::from_flat(shape, &repr.flatten()).unwrap();
        prop_assert_eq!(repr, back);
    }

    #[test]
    fn losses_are_nonnegative_and_ce_bounded_at_uniform(
        d in 1usize..=5,
        c in 2usize..=6,
        seed in any::<u64>(),
    ) {
        let mut r = rng::substream(seed, 0, 0, rng::phase::GRADCHECK);
        let shape = ReprShape::Linear { d, z: 1 };
        let repr = Representation::<f64>::random_init(shape, &mut r).unwrap();
        let head = Head::<f64>::random_init(c, 1, &mut r);

        let mut class_set = ExampleSet::new_classification(d, c);
        let x: Vec<f64> = (0..d).map(|_| rng::std_normal(&mut r)).collect();
        class_set.push_class(&x, 0);
        let ce = loss(&repr, &head, class_set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        prop_assert!(ce >= 0.0);

        // Uniform logits: zero head ⇒ cross-entropy is exactly ln c.
        let zero_head = Head::<f64>::zeros(c, 1);
        let u = loss(&repr, &zero_head, class_set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        prop_assert!(u <= (c as f64).ln() + 1e-12);
        prop_assert!(u >= (c as f64).ln() - 1e-12);

        let mut reg_set = ExampleSet::new_regression(d, 2);
        reg_set.push_vector(&x, &[0.3, -0.7]);
        let head2 = Head::<f64>::random_init(2, 1, &mut r);
        let sq = loss(&repr, &head2, reg_set.full(), LossKind::Squared).unwrap();
        prop_assert!(sq >= 0.0);
    }

    #[test]
    fn cosine_matrix_is_symmetric_unit_diagonal_bounded(
        n in 1usize..=6,
        len in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let mut r = rng::substream(seed, 0, 0, rng::phase::GRADCHECK);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                loop {
                    let v: Vec<f64> = (0..len).map(|_| rng::std_normal(&mut r)).collect();
                    if v.iter().any(|x| *x != 0.0) {
                        return v;
                    }
                }
            })
            .collect();
        let m = cosine_similarity_matrix(&vectors).unwrap();
        for i in 0..n {
            prop_assert_eq!(m[i][i], 1.0);
            for j in 0..n {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!(m[i][j] >= -1.0 - 1e-12 && m[i][j] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_partition_conserves_and_covers(
        workers in 2usize..=8,
        classes in 1usize..=5,
        per_class in 8usize..=40,
        pi in 0.05f64..=10.0,
        seed in any::<u64>(),
    ) {
        let mut set = ExampleSet::<f64>::new_classification(2, classes);
        for class in 0..classes {
            for i in 0..per_class {
                set.push_class(&[class as f64, i as f64], class);
            }
        }
        let shards = dirichlet_partition(&set, workers, pi, seed).unwrap();
        let total: usize = shards.iter().map(|s| s.train.len() + s.test.len()).sum();
        prop_assert_eq!(total, classes * per_class);
        for shard in &shards {
            prop_assert!(!shard.train.is_empty());
        }
    }
}

#[test]
fn head_similarity_is_nonincreasing_in_heterogeneity() {
    // Mean pairwise cosine similarity of the planted heads, averaged over 20
    // seeds, must not increase along the heterogeneity grid.
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut means = Vec::new();
    for &h in &grid {
        let mut acc = 0.0;
        for seed in 0..20u64 {
            let task = generate_planted::<f64>(&PlantedSpec {
                n_workers: 6,
                d: 12,
                z: 3,
                samples_per_worker: 4,
                noise_std: 0.0,
                heterogeneity: h,
                seed,
                output: PlantedOutput::Regression { dim: 2 },
            })
            .unwrap();
            let flats: Vec<Vec<f64>> = task.theta_stars.iter().map(|t| t.flatten()).collect();
            let m = cosine_similarity_matrix(&flats).unwrap();
            let n = flats.len();
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    sum += m[i][j];
                    count += 1;
                }
            }
            acc += sum / count as f64;
        }
        means.push(acc / 20.0);
    }
    for w in means.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-9,
            "similarity increased along the heterogeneity grid: {means:?}"
        );
    }
}

#[test]
fn dirichlet_concentration_increases_with_pi() {
    // Per-class variance of worker proportions shrinks as π grows.
    let classes = 5;
    let workers = 6;
    let per_class = 600;
    let mut set = ExampleSet::<f64>::new_classification(1, classes);
    for class in 0..classes {
        for i in 0..per_class {
            set.push_class(&[i as f64], class);
        }
    }
    let variance_for = |pi: f64| -> f64 {
        let mut acc = 0.0;
        for seed in 0..20u64 {
            let shards = dirichlet_partition(&set, workers, pi, seed).unwrap();
            for class in 0..classes {
                let counts: Vec<f64> = shards
                    .iter()
                    .map(|s| {
                        let train = s.class_histogram.as_ref().unwrap()[class];
                        let test = s.test.class_histogram().unwrap()[class];
                        (train + test) as f64 / per_class as f64
                    })
                    .collect();
                let mean = counts.iter().sum::<f64>() / workers as f64;
                acc += counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / workers as f64;
            }
        }
        acc / (20.0 * classes as f64)
    };
    let spread = variance_for(0.1);
    let tight = variance_for(10.0);
    assert!(
        tight < spread,
        "variance did not shrink: π=0.1 → {spread}, π=10 → {tight}"
    );
}

#[test]
fn cross_entropy_shift_stability_random_instances() {
    for seed in 0..20u64 {
        let mut r = rng::substream(seed, 0, 0, rng::phase::GRADCHECK);
        let repr =
            Representation::<f64>::random_init(ReprShape::Linear { d: 4, z: 2 }, &mut r).unwrap();
        let mut head = Head::<f64>::random_init(5, 2, &mut r);
        let mut set = ExampleSet::new_classification(4, 5);
        for _ in 0..3 {
            let x: Vec<f64> = (0..4).map(|_| rng::std_normal(&mut r)).collect();
            set.push_class(&x, (seed % 5) as usize);
        }
        let base = loss(&repr, &head, set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        for b in head.bias.iter_mut() {
            *b += 1000.0;
        }
        let shifted = loss(&repr, &head, set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((base - shifted).abs() < 1e-9);
    }
}
