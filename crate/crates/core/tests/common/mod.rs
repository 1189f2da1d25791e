//! Shared oracles for integration tests: single-machine reference
//! trajectories that the decentralized engine must reduce to in degenerate
//! configurations. These drive the model's gradient functions directly and
//! never touch the engine's round loop.

use deprl_core::data::Shard;
use deprl_core::model::{self, Head, LossKind, Representation};
use deprl_core::scalar::Scalar;

/// Centralized alternating gradient descent on one machine, full batch:
/// `τ` head steps at rate α, then one representation step at rate β, per
/// round. Returns the state after every round.
pub fn centralized_alternating_gd<T: Scalar>(
    phi0: &Representation<T>,
    theta0: &Head<T>,
    shard: &Shard<T>,
    kind: LossKind,
    alpha: f64,
    beta: f64,
    tau: usize,
    rounds: usize,
) -> Vec<(Representation<T>, Head<T>)> {
    let a = T::of_f64(alpha);
    let b = T::of_f64(beta);
    let mut phi = phi0.clone();
    let mut theta = theta0.clone();
    let mut trajectory = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        for _ in 0..tau {
            let g = model::grad_theta(&phi, &theta, shard.train.full(), kind).unwrap();
            theta.axpy(-a, &g);
        }
        let g = model::grad_phi(&phi, &theta, shard.train.full(), kind).unwrap();
        phi.axpy(-b, &g);
        trajectory.push((phi.clone(), theta.clone()));
    }
    trajectory
}

/// Centralized full-batch gradient descent on the joint `(φ, θ)` vector at a
/// single rate, one step per round.
pub fn centralized_sgd<T: Scalar>(
    phi0: &Representation<T>,
    theta0: &Head<T>,
    shard: &Shard<T>,
    kind: LossKind,
    rate: f64,
    rounds: usize,
) -> Vec<(Representation<T>, Head<T>)> {
    let r = T::of_f64(rate);
    let mut phi = phi0.clone();
    let mut theta = theta0.clone();
    let mut trajectory = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (gp, gt) = model::grad_pair(&phi, &theta, shard.train.full(), kind).unwrap();
        phi.axpy(-r, &gp);
        theta.axpy(-r, &gt);
        trajectory.push((phi.clone(), theta.clone()));
    }
    trajectory
}

/// Max absolute difference between two flattened parameter vectors.
pub fn flat_max_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max)
}
