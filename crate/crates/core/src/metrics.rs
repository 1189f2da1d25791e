//! Convergence diagnostics: the per-round quantity `M(k)`, its components,
//! the closed-form upper bound on the running average of `M(k)`, empirical
//! estimates of the smoothness/noise constants, similarity matrices, and
//! accuracy.
//!
//! `M(k)` combines three non-negative pieces measured at the consensus
//! representation `φ̄(k)` (the worker mean):
//!
//! ```text
//! M(k) = ‖∇_φ f(φ̄(k), heads after the round's local updates)‖²
//!      + (α·τ/β) · ‖∇_θ f(φ̄(k), heads before the round's local updates)‖²
//!      + (1/N) Σ_i ‖φ_i(k) − φ̄(k)‖²
//! ```
//!
//! A run is an ε-approximation once the running average of `M(k)` drops to ε.
//! All diagnostics use deterministic full-batch gradients even when training
//! itself is stochastic.

use rayon::prelude::*;

use crate::data::Shard;
use crate::engine::WorkerState;
use crate::error::{Error, Result};
use crate::matrix::{axpy_slice, sq_norm_slice};
use crate::model::{self, Head, LossKind, Representation};
use crate::rng::{self, phase};
use crate::scalar::Scalar;
use crate::topology::MixingParams;

// ---------------------------------------------------------------------------
// Per-round record
// ---------------------------------------------------------------------------

/// One round's instrumentation. Everything is reported in `f64` regardless of
/// the training scalar type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Round index the record describes.
    pub k: usize,
    /// `‖∇_φ f(φ̄(k), {θ_i(k+1)})‖²`.
    pub grad_phi_sq: f64,
    /// `‖∇_θ f(φ̄(k), {θ_i(k)})‖²`.
    pub grad_theta_sq: f64,
    /// `(1/N) Σ ‖φ_i(k) − φ̄(k)‖²`.
    pub consensus_err: f64,
    /// Weighted sum of the three components above.
    pub m_k: f64,
    /// Mean of `m_k` over all recorded rounds so far.
    pub running_avg_m: f64,
    /// Mean full-batch train loss at the round-start parameters.
    pub avg_train_loss: f64,
    /// Mean per-worker test accuracy at round start; `NaN` for regression.
    pub avg_test_accuracy: f64,
}

/// Column header for the metrics CSV.
pub const CSV_HEADER: &str =
    "k,grad_phi_sq,grad_theta_sq,consensus_err,m_k,running_avg_m,avg_train_loss,avg_test_accuracy";

impl MetricsRecord {
    /// CSV row matching [`CSV_HEADER`]; floats use the shortest decimal that
    /// round-trips.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.k,
            self.grad_phi_sq,
            self.grad_theta_sq,
            self.consensus_err,
            self.m_k,
            self.running_avg_m,
            self.avg_train_loss,
            self.avg_test_accuracy
        )
    }
}

// ---------------------------------------------------------------------------
// Components
// ---------------------------------------------------------------------------

/// `(1/N) Σ ‖v_i − v̄‖²` over flattened per-worker vectors.
///
/// Evaluated on the translated values `e_i = v_i − v_0` (the error is
/// translation invariant), so a cohort whose vectors are all identical
/// reports exactly zero; the property the shared initialization promises.
pub fn consensus_error_flat<T: Scalar>(vectors: &[Vec<T>]) -> f64 {
    assert!(!vectors.is_empty(), "need at least one worker");
    let n = vectors.len();
    let len = vectors[0].len();
    let base = &vectors[0];
    let mut mean = vec![T::zero(); len];
    for v in vectors {
        assert_eq!(v.len(), len, "congruent shapes required");
        for (m, (&vi, &bi)) in mean.iter_mut().zip(v.iter().zip(base.iter())) {
            *m += vi - bi;
        }
    }
    let inv_n = T::one() / T::of_f64(n as f64);
    for m in mean.iter_mut() {
        *m *= inv_n;
    }
    let mut acc = T::zero();
    for v in vectors {
        let mut diff_sq = T::zero();
        for ((&vi, &bi), &mi) in v.iter().zip(base.iter()).zip(mean.iter()) {
            let d = (vi - bi) - mi;
            diff_sq += d * d;
        }
        acc += diff_sq;
    }
    (acc * inv_n).as_f64()
}

/// Consensus error of the workers' representation estimates.
pub fn consensus_error<T: Scalar>(states: &[WorkerState<T>]) -> f64 {
    let flats: Vec<Vec<T>> = states.iter().map(|s| s.phi.flatten()).collect();
    consensus_error_flat(&flats)
}

/// How the squared norm of the head partial gradient is aggregated across
/// workers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadGradMode {
    /// `‖(1/N) Σ_i ∇_θ F_i‖²`: the squared norm of the mean head gradient,
    /// mirroring the representation term. Default.
    #[default]
    MeanOfGrads,
    /// `(1/N) Σ_i ‖∇_θ F_i‖²`: mean of per-worker squared norms.
    MeanOfSquaredNorms,
}

/// Full-batch partial gradients of the global loss, both evaluated at the
/// consensus representation `φ̄`:
/// the θ term uses `heads_theta` (round-start heads) and the φ term uses
/// `heads_phi` (post-update heads).
///
/// Returns `(‖∇_φ f‖², aggregated ‖∇_θ f‖²)`.
pub fn global_partial_grads_at<T: Scalar>(
    phi_bar: &Representation<T>,
    heads_theta: &[Head<T>],
    heads_phi: &[Head<T>],
    shards: &[Shard<T>],
    kind: LossKind,
    mode: HeadGradMode,
) -> Result<(f64, f64)> {
    let n = shards.len();
    if heads_theta.len() != n || heads_phi.len() != n || n == 0 {
        return Err(Error::invalid("one head pair per shard required"));
    }
    let c = heads_theta[0].out_dim();
    let z = heads_theta[0].code_dim();
    for h in heads_theta.iter().chain(heads_phi.iter()) {
        if h.out_dim() != c || h.code_dim() != z {
            return Err(Error::invalid(
                "θ-averaging requires congruent head shapes across workers",
            ));
        }
    }

    let per_worker: Vec<Result<(Representation<T>, Head<T>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let batch = shards[i].train.full();
            let gp = model::grad_phi(phi_bar, &heads_phi[i], batch, kind)?;
            let gt = model::grad_theta(phi_bar, &heads_theta[i], batch, kind)?;
            Ok((gp, gt))
        })
        .collect();

    let inv_n = T::one() / T::of_f64(n as f64);
    let mut phi_mean: Option<Representation<T>> = None;
    let mut theta_mean: Option<Head<T>> = None;
    let mut theta_sq_acc = T::zero();
    for item in per_worker {
        let (gp, gt) = item?;
        match phi_mean.as_mut() {
            Some(acc) => acc.axpy(inv_n, &gp),
            None => {
                let mut acc = Representation::zeros(gp.shape())?;
                acc.axpy(inv_n, &gp);
                phi_mean = Some(acc);
            }
        }
        match mode {
            HeadGradMode::MeanOfGrads => match theta_mean.as_mut() {
                Some(acc) => acc.axpy(inv_n, &gt),
                None => {
                    let mut acc = Head::zeros(c, z);
                    acc.axpy(inv_n, &gt);
                    theta_mean = Some(acc);
                }
            },
            HeadGradMode::MeanOfSquaredNorms => theta_sq_acc += inv_n * gt.sq_norm(),
        }
    }

    let grad_phi_sq = phi_mean.expect("n > 0").sq_norm().as_f64();
    let grad_theta_sq = match mode {
        HeadGradMode::MeanOfGrads => theta_mean.expect("n > 0").sq_norm().as_f64(),
        HeadGradMode::MeanOfSquaredNorms => theta_sq_acc.as_f64(),
    };
    Ok((grad_phi_sq, grad_theta_sq))
}

/// Partial gradients at the current states (same heads on both sides), with
/// `φ̄` computed from the states.
pub fn global_partial_grads<T: Scalar>(
    states: &[WorkerState<T>],
    shards: &[Shard<T>],
    kind: LossKind,
    mode: HeadGradMode,
) -> Result<(f64, f64)> {
    if states.is_empty() {
        return Err(Error::invalid("need at least one worker"));
    }
    let phi_bar = mean_representation(states)?;
    let heads: Vec<Head<T>> = states.iter().map(|s| s.theta.clone()).collect();
    global_partial_grads_at(&phi_bar, &heads, &heads, shards, kind, mode)
}

/// Mean of the workers' representations.
pub fn mean_representation<T: Scalar>(states: &[WorkerState<T>]) -> Result<Representation<T>> {
    if states.is_empty() {
        return Err(Error::invalid("need at least one worker"));
    }
    let shape = states[0].phi.shape();
    let len = shape.param_len();
    let mut mean = vec![T::zero(); len];
    for s in states {
        let flat = s.phi.flatten();
        if flat.len() != len {
            return Err(Error::invalid(
                "representation shapes differ across workers",
            ));
        }
        axpy_slice(&mut mean, T::one(), &flat);
    }
    let inv_n = T::one() / T::of_f64(states.len() as f64);
    for m in mean.iter_mut() {
        *m *= inv_n;
    }
    Representation::from_flat(shape, &mean)
}

/// `M(k) = grad_phi_sq + (α·τ/β)·grad_theta_sq + consensus_err`.
pub fn m_of_k(
    grad_phi_sq: f64,
    grad_theta_sq: f64,
    consensus_err: f64,
    alpha: f64,
    tau: usize,
    beta: f64,
) -> Result<f64> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::invalid("β must be positive in M(k)"));
    }
    Ok(grad_phi_sq + (alpha * tau as f64 / beta) * grad_theta_sq + consensus_err)
}

// ---------------------------------------------------------------------------
// Theory constants and the convergence bound
// ---------------------------------------------------------------------------

/// Where a constants estimate came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    UserSupplied,
    /// Probed from data; necessarily a lower bound on the true constant, so
    /// bounds computed from it are indicative rather than certified.
    EmpiricallyEstimated,
}

/// Smoothness and noise constants used by the convergence bound:
/// `lipschitz_l` bounds how fast partial gradients change, `sigma` bounds the
/// minibatch gradient noise, `varsigma` bounds the cross-worker variability
/// of the representation gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryConstants {
    pub lipschitz_l: f64,
    pub sigma: f64,
    pub varsigma: f64,
    pub provenance: Provenance,
}

impl TheoryConstants {
    pub fn user(lipschitz_l: f64, sigma: f64, varsigma: f64) -> Result<TheoryConstants> {
        if lipschitz_l < 0.0 || sigma < 0.0 || varsigma < 0.0 {
            return Err(Error::invalid("theory constants must be non-negative"));
        }
        Ok(TheoryConstants {
            lipschitz_l,
            sigma,
            varsigma,
            provenance: Provenance::UserSupplied,
        })
    }
}

/// Term-by-term evaluation of the upper bound on `(1/K) Σ_k M(k)`.
///
/// The vanishing term decays as `1/(Kβ)`; the remaining five are a
/// K-independent noise floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremBound {
    /// `4(f₀ − f*)/(Kβ)`.
    pub vanishing: f64,
    /// `2βLσ²/N`.
    pub phi_variance: f64,
    /// `12α³L²τ(τ−1)(6τ+1)σ²/β`: accumulated drift of the `τ` local head
    /// steps; exactly zero when `τ = 1`.
    pub head_drift: f64,
    /// `2α²τLσ²/β`.
    pub head_variance: f64,
    /// `(2β/3N)(1 + 1/L²)σ²`.
    pub mix_variance: f64,
    /// `(2β/N)(1 + 1/L²)ς²`.
    pub heterogeneity: f64,
}

impl TheoremBound {
    pub fn total(&self) -> f64 {
        self.vanishing
            + self.phi_variance
            + self.head_drift
            + self.head_variance
            + self.mix_variance
            + self.heterogeneity
    }

    pub fn noise_floor(&self) -> f64 {
        self.total() - self.vanishing
    }
}

impl std::fmt::Display for TheoremBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total {:.6e} = vanishing {:.6e} + phi_variance {:.6e} + head_drift {:.6e} \
             + head_variance {:.6e} + mix_variance {:.6e} + heterogeneity {:.6e}",
            self.total(),
            self.vanishing,
            self.phi_variance,
            self.head_drift,
            self.head_variance,
            self.mix_variance,
            self.heterogeneity
        )
    }
}

/// Evaluate the convergence bound at `(K, α, β, τ)` for `n` workers.
///
/// `f0` is the global loss at initialization, `fstar` an estimate of the
/// optimal loss. Terms whose noise factor is exactly zero are zero even when
/// `1/L²` would be infinite. `mix` is accepted so callers can keep the bound
/// evaluation next to the step-size feasibility data, but only the loss gap
/// and constants enter the bound itself.
#[allow(clippy::too_many_arguments)]
pub fn theorem_bound(
    f0: f64,
    fstar: f64,
    constants: &TheoryConstants,
    _mix: &MixingParams<f64>,
    n: usize,
    k_rounds: usize,
    alpha: f64,
    beta: f64,
    tau: usize,
) -> Result<TheoremBound> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::invalid("β must be positive"));
    }
    if k_rounds == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let l = constants.lipschitz_l;
    let sigma_sq = constants.sigma * constants.sigma;
    let varsigma_sq = constants.varsigma * constants.varsigma;
    let n_f = n as f64;
    let tau_f = tau as f64;

    let vanishing = 4.0 * (f0 - fstar) / (k_rounds as f64 * beta);
    let phi_variance = if sigma_sq == 0.0 {
        0.0
    } else {
        2.0 * beta * l * sigma_sq / n_f
    };
    let head_drift = if sigma_sq == 0.0 {
        0.0
    } else {
        12.0 * alpha.powi(3) * l * l * tau_f * (tau_f - 1.0) * (6.0 * tau_f + 1.0) * sigma_sq / beta
    };
    let head_variance = if sigma_sq == 0.0 {
        0.0
    } else {
        2.0 * alpha * alpha * tau_f * l * sigma_sq / beta
    };
    let smooth_factor = || 1.0 + 1.0 / (l * l);
    let mix_variance = if sigma_sq == 0.0 {
        0.0
    } else {
        2.0 * beta / (3.0 * n_f) * smooth_factor() * sigma_sq
    };
    let heterogeneity = if varsigma_sq == 0.0 {
        0.0
    } else {
        2.0 * beta / n_f * smooth_factor() * varsigma_sq
    };

    Ok(TheoremBound {
        vanishing,
        phi_variance,
        head_drift,
        head_variance,
        mix_variance,
        heterogeneity,
    })
}

/// Probe the theory constants empirically at the current states.
///
/// `lipschitz_l` is the largest observed ratio of partial-gradient change to
/// parameter change over random perturbation pairs; `sigma` the largest
/// per-worker root-mean-square deviation of minibatch gradients from the
/// full-batch gradient; `varsigma` the cross-worker variability of the
/// representation gradient at the consensus point. All are lower bounds on
/// the true suprema.
pub fn estimate_constants<T: Scalar>(
    states: &[WorkerState<T>],
    shards: &[Shard<T>],
    kind: LossKind,
    batch_size: usize,
    probes: usize,
    seed: u64,
) -> Result<TheoryConstants> {
    if probes < 2 {
        return Err(Error::invalid("need at least 2 probes"));
    }
    if states.len() != shards.len() || states.is_empty() {
        return Err(Error::invalid("one state per shard required"));
    }
    let n = states.len();

    // Lipschitz probes: gradient difference over parameter distance.
    let mut l_max = 0.0f64;
    for p in 0..probes {
        let i = p % n;
        let state = &states[i];
        let batch = shards[i].train.full();
        let mut rng = rng::substream(seed, i as u64, p as u64, rng::sub(phase::PROBE, 0));
        let mut perturb_repr = |base: &Representation<T>| -> Result<Representation<T>> {
            let mut flat = base.flatten();
            for v in flat.iter_mut() {
                *v += T::of_f64(0.1 * rng::std_normal(&mut rng));
            }
            Representation::from_flat(base.shape(), &flat)
        };
        let phi_a = perturb_repr(&state.phi)?;
        let phi_b = perturb_repr(&state.phi)?;
        let mut perturb_head = |base: &Head<T>| -> Result<Head<T>> {
            let mut flat = base.flatten();
            for v in flat.iter_mut() {
                *v += T::of_f64(0.1 * rng::std_normal(&mut rng));
            }
            Head::from_flat(base.out_dim(), base.code_dim(), &flat)
        };
        let theta_a = perturb_head(&state.theta)?;
        let theta_b = perturb_head(&state.theta)?;

        let (gp_a, gt_a) = model::grad_pair(&phi_a, &theta_a, batch, kind)?;
        let (gp_b, gt_b) = model::grad_pair(&phi_b, &theta_b, batch, kind)?;

        let dist = flat_distance(&phi_a.flatten(), &phi_b.flatten())
            + flat_distance(&theta_a.flatten(), &theta_b.flatten());
        if dist > 0.0 {
            let dgp = flat_distance(&gp_a.flatten(), &gp_b.flatten());
            let dgt = flat_distance(&gt_a.flatten(), &gt_b.flatten());
            l_max = l_max.max(dgp / dist).max(dgt / dist);
        }
    }

    // Minibatch-noise probes: empirical variance against the full batch.
    let mut sigma_sq_max = 0.0f64;
    for (i, (state, shard)) in states.iter().zip(shards.iter()).enumerate() {
        let full = shard.train.full();
        let (gp_full, gt_full) = model::grad_pair(&state.phi, &state.theta, full, kind)?;
        let gp_full = gp_full.flatten();
        let gt_full = gt_full.flatten();
        let mut acc_phi = 0.0;
        let mut acc_theta = 0.0;
        for p in 0..probes {
            let mut rng = rng::substream(seed, i as u64, p as u64, rng::sub(phase::PROBE, 1));
            let idx = rng::sample_batch_indices(&mut rng, shard.train.len(), batch_size);
            let (gp, gt) =
                model::grad_pair(&state.phi, &state.theta, shard.train.batch(&idx), kind)?;
            acc_phi += flat_distance(&gp.flatten(), &gp_full).powi(2);
            acc_theta += flat_distance(&gt.flatten(), &gt_full).powi(2);
        }
        sigma_sq_max = sigma_sq_max
            .max(acc_phi / probes as f64)
            .max(acc_theta / probes as f64);
    }

    // Cross-worker variability of the representation gradient at φ̄.
    let phi_bar = mean_representation(states)?;
    let per_worker: Vec<Vec<T>> = states
        .iter()
        .zip(shards.iter())
        .map(|(s, shard)| {
            model::grad_phi(&phi_bar, &s.theta, shard.train.full(), kind).map(|g| g.flatten())
        })
        .collect::<Result<_>>()?;
    let len = per_worker[0].len();
    let mut mean = vec![T::zero(); len];
    for g in &per_worker {
        axpy_slice(&mut mean, T::one(), g);
    }
    let inv_n = T::one() / T::of_f64(n as f64);
    for m in mean.iter_mut() {
        *m *= inv_n;
    }
    let mut varsigma_sq = 0.0;
    for g in &per_worker {
        varsigma_sq += flat_distance_t(g, &mean).powi(2);
    }
    varsigma_sq /= n as f64;

    Ok(TheoryConstants {
        lipschitz_l: l_max,
        sigma: sigma_sq_max.sqrt(),
        varsigma: varsigma_sq.sqrt(),
        provenance: Provenance::EmpiricallyEstimated,
    })
}

fn flat_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    flat_distance_t(a, b)
}

fn flat_distance_t<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.as_f64().sqrt()
}

// ---------------------------------------------------------------------------
// Similarity, thresholds, accuracy
// ---------------------------------------------------------------------------

/// Pairwise cosine similarities; entry `(i,j)` is `⟨v_i, v_j⟩/(‖v_i‖‖v_j‖)`,
/// the diagonal is exactly 1.
pub fn cosine_similarity_matrix<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::invalid("need at least one vector"));
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| sq_norm_slice(v).as_f64().sqrt())
        .collect();
    for (i, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            return Err(Error::invalid(format!("vector {i} has zero norm")));
        }
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in (i + 1)..n {
            let d = crate::matrix::dot(&vectors[i], &vectors[j]).as_f64();
            let c = d / (norms[i] * norms[j]);
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    Ok(out)
}

/// Which per-round field [`rounds_to_threshold`] averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdField {
    MK,
    AvgTrainLoss,
}

/// Smallest recorded round whose running average of the chosen field is at
/// most `epsilon`; `None` if never reached.
pub fn rounds_to_threshold(
    records: &[MetricsRecord],
    epsilon: f64,
    field: ThresholdField,
) -> Option<usize> {
    assert!(epsilon > 0.0, "threshold must be positive");
    let mut acc = 0.0;
    for (i, rec) in records.iter().enumerate() {
        let v = match field {
            ThresholdField::MK => rec.m_k,
            ThresholdField::AvgTrainLoss => rec.avg_train_loss,
        };
        acc += v;
        if acc / (i + 1) as f64 <= epsilon {
            return Some(rec.k);
        }
    }
    None
}

/// Per-worker test accuracy with each worker's own parameters on its own
/// test shard, plus the unweighted mean. Ties in the argmax go to the lowest
/// class index. Rejects regression tasks.
pub fn accuracy<T: Scalar>(
    states: &[WorkerState<T>],
    shards: &[Shard<T>],
    kind: LossKind,
) -> Result<(Vec<f64>, f64)> {
    let pairs: Vec<(&Representation<T>, &Head<T>)> =
        states.iter().map(|s| (&s.phi, &s.theta)).collect();
    accuracy_pairs(&pairs, shards, kind)
}

/// [`accuracy`] over explicit parameter pairs.
pub fn accuracy_pairs<T: Scalar>(
    pairs: &[(&Representation<T>, &Head<T>)],
    shards: &[Shard<T>],
    kind: LossKind,
) -> Result<(Vec<f64>, f64)> {
    if kind != LossKind::SoftmaxCrossEntropy {
        return Err(Error::invalid(
            "accuracy is defined for classification runs; use test loss for regression",
        ));
    }
    if pairs.len() != shards.len() || pairs.is_empty() {
        return Err(Error::invalid("one parameter pair per shard required"));
    }
    let per_worker: Vec<Result<f64>> = pairs
        .par_iter()
        .zip(shards.par_iter())
        .map(|((phi, theta), shard)| {
            if !shard.test.is_classification() {
                return Err(Error::invalid("accuracy needs classification targets"));
            }
            if shard.test.is_empty() {
                return Err(Error::invalid(format!(
                    "worker {} has an empty test set",
                    shard.worker_id
                )));
            }
            let mut correct = 0usize;
            for e in 0..shard.test.len() {
                let predicted = model::predict_class(phi, theta, shard.test.input(e))?;
                if let crate::model::TargetRef::Class(label) = shard.test.target(e) {
                    if predicted == label {
                        correct += 1;
                    }
                }
            }
            Ok(correct as f64 / shard.test.len() as f64)
        })
        .collect();
    let per_worker: Vec<f64> = per_worker.into_iter().collect::<Result<_>>()?;
    let mean = per_worker.iter().sum::<f64>() / per_worker.len() as f64;
    Ok((per_worker, mean))
}
