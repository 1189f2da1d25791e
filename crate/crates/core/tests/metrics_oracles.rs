//! Independent oracles for the metrics module: the head-gradient Lipschitz
//! constant of a linear/squared model against a direct eigenvalue
//! computation, and constant-estimation sanity on a concrete case.

use deprl_core::data::{generate_planted, PlantedOutput, PlantedSpec};
use deprl_core::engine::{init_states, ModelSpec, RunConfig};
use deprl_core::metrics::estimate_constants;
use deprl_core::model::{self, Head, LossKind, ReprShape};
use deprl_core::rng;

/// Largest eigenvalue of a symmetric matrix by power iteration.
fn top_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += m[i][j] * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in w.iter_mut() {
            *x /= norm;
        }
        lambda = norm;
        v = w;
    }
    lambda
}

#[test]
fn head_gradient_lipschitz_bounded_by_design_eigenvalue() {
    // Linear representation, squared loss, c = 1: the head gradient is
    // linear in θ with operator H = (1/m) Σ u uᵀ where u = [code(x); 1].
    // With code dim 4 plus the bias, H is the 5×5 empirical design operator,
    // and every finite difference ratio ‖∇θF(θa) − ∇θF(θb)‖ / ‖θa − θb‖
    // is bounded by its top eigenvalue.
    let task = generate_planted::<f64>(&PlantedSpec {
        n_workers: 1,
        d: 5,
        z: 4,
        samples_per_worker: 30,
        noise_std: 0.1,
        heterogeneity: 0.0,
        seed: 21,
        output: PlantedOutput::Regression { dim: 1 },
    })
    .unwrap();
    let shard = &task.shards[0];
    let phi = &task.phi_star;

    // Design operator over the augmented codes.
    let dim = 5;
    let m = shard.train.len();
    let mut h = vec![vec![0.0; dim]; dim];
    for e in 0..m {
        let mut u = phi.encode(shard.train.input(e)).unwrap();
        u.push(1.0);
        for i in 0..dim {
            for j in 0..dim {
                h[i][j] += u[i] * u[j] / m as f64;
            }
        }
    }
    let lambda = top_eigenvalue(&h);
    assert!(lambda.is_finite() && lambda > 0.0);

    let mut rng = rng::substream(99, 0, 0, rng::phase::PROBE);
    for _ in 0..50 {
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Head<f64> {
            let mut head = Head::zeros(1, 4);
            for v in head.weight.data_mut() {
                *v = rng::std_normal(rng);
            }
            head.bias[0] = rng::std_normal(rng);
            head
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let ga = model::grad_theta(phi, &a, shard.train.full(), LossKind::Squared).unwrap();
        let gb = model::grad_theta(phi, &b, shard.train.full(), LossKind::Squared).unwrap();
        let num: f64 = ga
            .flatten()
            .iter()
            .zip(gb.flatten().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a
            .flatten()
            .iter()
            .zip(b.flatten().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(
            num / den <= lambda + 1e-9,
            "ratio {} exceeds λmax {}",
            num / den,
            lambda
        );
    }

    // The empirical Lipschitz estimate on this task is finite and positive.
    let cfg = RunConfig::new(
        ModelSpec {
            repr: ReprShape::Linear { d: 5, z: 4 },
            out_dim: 1,
        },
        LossKind::Squared,
    );
    let states = init_states::<f64>(&cfg, 1).unwrap();
    let consts = estimate_constants(&states, &task.shards, LossKind::Squared, 8, 6, 123).unwrap();
    assert!(consts.lipschitz_l.is_finite() && consts.lipschitz_l > 0.0);
}

#[test]
fn global_partial_grads_examples() {
    use deprl_core::engine::WorkerState;
    use deprl_core::metrics::{global_partial_grads, HeadGradMode};

    let task = generate_planted::<f64>(&PlantedSpec {
        n_workers: 3,
        d: 6,
        z: 2,
        samples_per_worker: 15,
        noise_std: 0.0,
        heterogeneity: 0.0,
        seed: 41,
        output: PlantedOutput::Regression { dim: 1 },
    })
    .unwrap();

    // N = 1: the global partials are the single worker's full-batch partials
    // at its own representation.
    let cfg = RunConfig::new(
        ModelSpec {
            repr: ReprShape::Linear { d: 6, z: 2 },
            out_dim: 1,
        },
        LossKind::Squared,
    );
    let states = init_states::<f64>(&cfg, 1).unwrap();
    let (gp_sq, gt_sq) = global_partial_grads(
        &states,
        &task.shards[..1],
        LossKind::Squared,
        HeadGradMode::MeanOfGrads,
    )
    .unwrap();
    let gp = model::grad_phi(
        &states[0].phi,
        &states[0].theta,
        task.shards[0].train.full(),
        LossKind::Squared,
    )
    .unwrap();
    let gt = model::grad_theta(
        &states[0].phi,
        &states[0].theta,
        task.shards[0].train.full(),
        LossKind::Squared,
    )
    .unwrap();
    assert!((gp_sq - gp.sq_norm()).abs() < 1e-15);
    assert!((gt_sq - gt.sq_norm()).abs() < 1e-15);

    // At the planted optimum of a noiseless homogeneous task both components
    // vanish.
    let optimum: Vec<WorkerState<f64>> = task
        .theta_stars
        .iter()
        .map(|theta| WorkerState {
            phi: task.phi_star.clone(),
            theta: theta.clone(),
        })
        .collect();
    let (gp_sq, gt_sq) = global_partial_grads(
        &optimum,
        &task.shards,
        LossKind::Squared,
        HeadGradMode::MeanOfGrads,
    )
    .unwrap();
    assert!(gp_sq < 1e-10, "grad_phi_sq {gp_sq}");
    assert!(gt_sq < 1e-10, "grad_theta_sq {gt_sq}");

    // Incongruent head shapes are rejected: θ-averaging needs one shape.
    let mut mixed = optimum.clone();
    mixed[1].theta = Head::zeros(2, 2);
    assert!(global_partial_grads(
        &mixed,
        &task.shards,
        LossKind::Squared,
        HeadGradMode::MeanOfGrads
    )
    .is_err());
}
