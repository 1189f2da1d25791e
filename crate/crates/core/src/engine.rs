//! The training engine: alternating local updates plus gossip consensus on
//! the shared representation, the single-model decentralized SGD baseline,
//! step-size schedules, the new-worker generalization protocol, and
//! checkpointing.
//!
//! One round of the personalized algorithm, per worker `i`:
//!
//! 1. `τ` local SGD steps on the private head `θ_i`, representation frozen,
//!    a fresh minibatch per step;
//! 2. one SGD half-step on the local representation `φ_i`, using the updated
//!    head and its own fresh minibatch;
//! 3. a consensus step: `φ_i ← Σ_j P(i,j)·φ_j^half` over the neighborhood.
//!
//! Step 3 reads a frozen snapshot of all half-step values (synchronous round
//! with a barrier), and heads never travel: only representations are mixed.
//!
//! All per-worker computation inside a round is independent and may run on
//! any number of threads; randomness is keyed, not sequenced, so traces are
//! byte-identical for every thread count.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::matrix::axpy_slice;
use crate::metrics::{self, HeadGradMode, MetricsRecord};
use crate::model::{self, Head, LossKind, ReprShape, Representation};
use crate::rng::{self, phase};
use crate::scalar::Scalar;
use crate::topology::{ConsensusMatrix, Graph};

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

/// One worker's trainable parameters. Representation shapes are identical
/// across workers (consensus averaging needs congruent flattening); heads are
/// private and never read by other workers.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerState<T> {
    pub phi: Representation<T>,
    pub theta: Head<T>,
}

/// Step-size schedule applied to both rates each round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `α, β` as configured, every round.
    Constant,
    /// `α·γᵏ, β·γᵏ`: multiplicative decay per communication round.
    Decay { gamma: f64 },
    /// Theory-driven rates `α = 1/(τ√K)`, `β = √(N/K)`, constant over the run.
    Corollary,
}

/// Predictor architecture for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub repr: ReprShape,
    /// Head output dimension: class count, or regression target dimension.
    pub out_dim: usize,
}

/// Everything a run needs besides the graph and the data.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Head learning rate.
    pub alpha: f64,
    /// Representation learning rate.
    pub beta: f64,
    /// Local head steps per round.
    pub tau: usize,
    /// Communication rounds.
    pub rounds: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub schedule: Schedule,
    pub seed: u64,
    pub model: ModelSpec,
    /// Record diagnostics every this many rounds (records keep the true k).
    pub metrics_stride: usize,
    pub head_grad_mode: HeadGradMode,
    /// Give every worker the same initial head (the default draws them
    /// independently; the shared representation is always identical at k=0).
    pub shared_head_init: bool,
    /// Optional smoothness estimate; when present the run emits step-size
    /// feasibility warnings (never errors; the estimate is just an estimate).
    pub lipschitz_hint: Option<f64>,
    /// Worker-level parallelism; 0 uses the process-global thread pool.
    pub threads: usize,
}

impl RunConfig {
    pub fn new(model: ModelSpec, loss: LossKind) -> RunConfig {
        RunConfig {
            alpha: 0.01,
            beta: 0.01,
            tau: 1,
            rounds: 1,
            batch_size: 1,
            loss,
            schedule: Schedule::Constant,
            seed: 0,
            model,
            metrics_stride: 1,
            head_grad_mode: HeadGradMode::default(),
            shared_head_init: false,
            lipschitz_hint: None,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::invalid("α must be finite and non-negative"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid("β must be finite and non-negative"));
        }
        if self.tau < 1 {
            return Err(Error::invalid("τ must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.metrics_stride < 1 {
            return Err(Error::invalid("metrics stride must be at least 1"));
        }
        if let Schedule::Decay { gamma } = self.schedule {
            if gamma.is_nan() || gamma <= 0.0 || gamma > 1.0 {
                return Err(Error::invalid("decay rate must be in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Effective `(α, β)` for round `k`.
    pub fn rates_at(&self, k: usize, n_workers: usize) -> (f64, f64) {
        match self.schedule {
            Schedule::Constant => (self.alpha, self.beta),
            Schedule::Decay { gamma } => {
                let f = gamma.powi(k as i32);
                (self.alpha * f, self.beta * f)
            }
            Schedule::Corollary => corollary_rates(n_workers, self.rounds, self.tau),
        }
    }
}

/// Step sizes from the convergence analysis: `α = 1/(τ√K)`, `β = √(N/K)`.
pub fn corollary_rates(n_workers: usize, rounds: usize, tau: usize) -> (f64, f64) {
    assert!(
        n_workers > 0 && rounds > 0 && tau > 0,
        "all inputs positive"
    );
    let k = rounds as f64;
    let alpha = 1.0 / (tau as f64 * k.sqrt());
    let beta = (n_workers as f64 / k).sqrt();
    (alpha, beta)
}

/// Minimum round count for the corollary rates to be admissible:
/// `max(18C²L²N³/(1−q)², (2L²+2)²/(NL⁴), NL²)`.
pub fn corollary_k_floor(n_workers: usize, big_c: f64, q: f64, lipschitz_l: f64) -> f64 {
    let n = n_workers as f64;
    let l2 = lipschitz_l * lipschitz_l;
    let term1 = 18.0 * big_c * big_c * l2 * n.powi(3) / ((1.0 - q) * (1.0 - q));
    let term2 = (2.0 * l2 + 2.0).powi(2) / (n * l2 * l2);
    let term3 = n * l2;
    term1.max(term2).max(term3)
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Run-level summary attached to a trace.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rounds: usize,
    /// Mean of `m_k` over all recorded rounds; `NaN` when nothing was recorded.
    pub running_avg_m: f64,
    /// Mean full-batch train loss at the final parameters.
    pub final_avg_train_loss: f64,
    /// Mean test accuracy at the final parameters; `None` for regression.
    pub final_avg_test_accuracy: Option<f64>,
    pub wall_secs: f64,
    pub warnings: Vec<String>,
}

/// Per-round records plus the final summary.
#[derive(Clone, Debug)]
pub struct MetricsTrace {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

impl MetricsTrace {
    /// The whole trace as CSV (header included), one row per recorded round.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# schema_version {}\n{}\n",
            crate::SCHEMA_VERSION,
            metrics::CSV_HEADER
        );
        for rec in &self.records {
            out.push_str(&rec.to_csv_row());
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Initial states: every worker gets the SAME representation draw (so the
/// consensus error starts at exactly zero) and, by default, an independent
/// head draw.
pub fn init_states<T: Scalar>(cfg: &RunConfig, n_workers: usize) -> Result<Vec<WorkerState<T>>> {
    let mut phi_rng = rng::substream(cfg.seed, rng::SHARED, 0, phase::INIT_PHI);
    let phi0 = Representation::random_init(cfg.model.repr, &mut phi_rng)?;
    let z = cfg.model.repr.output_dim();
    let mut states = Vec::with_capacity(n_workers);
    for i in 0..n_workers {
        let who = if cfg.shared_head_init {
            rng::SHARED
        } else {
            i as u64
        };
        let mut theta_rng = rng::substream(cfg.seed, who, 0, phase::INIT_THETA);
        states.push(WorkerState {
            phi: phi0.clone(),
            theta: Head::random_init(cfg.model.out_dim, z, &mut theta_rng),
        });
    }
    Ok(states)
}

fn validate_task<T: Scalar>(cfg: &RunConfig, graph: &Graph, shards: &[Shard<T>]) -> Result<()> {
    cfg.validate()?;
    let n = graph.n_workers();
    if shards.len() != n {
        return Err(Error::invalid(format!(
            "graph has {n} workers but {} shards supplied",
            shards.len()
        )));
    }
    let d = cfg.model.repr.input_dim();
    for shard in shards {
        if shard.train.is_empty() {
            return Err(Error::invalid(format!(
                "worker {} has an empty train shard",
                shard.worker_id
            )));
        }
        if shard.train.input_dim() != d {
            return Err(Error::invalid(format!(
                "worker {} has input dim {}, model expects {d}",
                shard.worker_id,
                shard.train.input_dim()
            )));
        }
        let classification = shard.train.is_classification();
        match cfg.loss {
            LossKind::SoftmaxCrossEntropy if !classification => {
                return Err(Error::invalid("cross-entropy requires class targets"));
            }
            LossKind::Squared if classification => {
                return Err(Error::invalid("squared loss requires vector targets"));
            }
            _ => {}
        }
        if shard.train.target_dim() != cfg.model.out_dim {
            return Err(Error::invalid(format!(
                "worker {} targets have dim {}, model head outputs {}",
                shard.worker_id,
                shard.train.target_dim(),
                cfg.model.out_dim
            )));
        }
    }
    Ok(())
}

/// Step-size feasibility conditions from the convergence analysis, evaluated
/// with a smoothness estimate: warn when `α > 1/(τL(1+36τ²))` or
/// `β > min(1/L, NL²/(2L²+2), (1−q)/(3√2·C·L·N))`.
fn feasibility_warnings<T: Scalar>(
    cfg: &RunConfig,
    n: usize,
    p_mat: &ConsensusMatrix<T>,
) -> Vec<String> {
    let mut warnings = Vec::new();
    let Some(l) = cfg.lipschitz_hint else {
        return warnings;
    };
    if l.is_nan() || l <= 0.0 {
        return warnings;
    }
    let (alpha, beta) = cfg.rates_at(0, n);
    let tau = cfg.tau as f64;
    let alpha_max = 1.0 / (tau * l * (1.0 + 36.0 * tau * tau));
    if alpha > alpha_max {
        warnings.push(format!(
            "head rate α={alpha} exceeds the feasibility limit {alpha_max:.6e} for L={l}"
        ));
    }
    if let Ok(mix) = p_mat.mixing_params() {
        let q = mix.q.as_f64();
        let big_c = mix.big_c.as_f64();
        let n_f = n as f64;
        let beta_max = (1.0 / l)
            .min(n_f * l * l / (2.0 * l * l + 2.0))
            .min((1.0 - q) / (3.0 * std::f64::consts::SQRT_2 * big_c * l * n_f));
        if beta > beta_max {
            warnings.push(format!(
                "representation rate β={beta} exceeds the feasibility limit {beta_max:.6e} \
                 for L={l} (q={q:.6}, C={big_c:.3})"
            ));
        }
    }
    warnings
}

// ---------------------------------------------------------------------------
// Round internals
// ---------------------------------------------------------------------------

fn check_finite<T: Scalar>(states: &[WorkerState<T>], round: usize) -> Result<()> {
    for (i, s) in states.iter().enumerate() {
        if !s.phi.is_finite() || !s.theta.is_finite() {
            return Err(Error::RunAbort {
                round,
                worker: i,
                reason: "non-finite parameter detected".to_string(),
            });
        }
    }
    Ok(())
}

/// `τ` local head steps for every worker, representations untouched.
fn head_updates<T: Scalar>(
    states: &mut [WorkerState<T>],
    shards: &[Shard<T>],
    cfg: &RunConfig,
    k: usize,
    alpha: f64,
) -> Result<()> {
    let a = T::of_f64(alpha);
    states
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(i, state)| -> Result<()> {
            let shard = &shards[i];
            for s in 0..cfg.tau {
                let mut rng = rng::substream(
                    cfg.seed,
                    i as u64,
                    k as u64,
                    rng::sub(phase::HEAD_BATCH, s as u64),
                );
                let idx = rng::sample_batch_indices(&mut rng, shard.train.len(), cfg.batch_size);
                let g =
                    model::grad_theta(&state.phi, &state.theta, shard.train.batch(&idx), cfg.loss)?;
                state.theta.axpy(-a, &g);
            }
            Ok(())
        })
}

/// Representation half-steps: `φ_i − β·g_φ(φ_i, θ_i)` on a fresh minibatch,
/// flattened for the consensus exchange.
fn phi_half_steps<T: Scalar>(
    states: &[WorkerState<T>],
    shards: &[Shard<T>],
    cfg: &RunConfig,
    k: usize,
    beta: f64,
) -> Result<Vec<Vec<T>>> {
    let b = T::of_f64(beta);
    states
        .par_iter()
        .enumerate()
        .map(|(i, state)| -> Result<Vec<T>> {
            let shard = &shards[i];
            let mut rng = rng::substream(cfg.seed, i as u64, k as u64, phase::PHI_BATCH);
            let idx = rng::sample_batch_indices(&mut rng, shard.train.len(), cfg.batch_size);
            let g = model::grad_phi(&state.phi, &state.theta, shard.train.batch(&idx), cfg.loss)?;
            let mut half = state.phi.clone();
            half.axpy(-b, &g);
            Ok(half.flatten())
        })
        .collect()
}

fn apply_consensus<T: Scalar>(
    states: &mut [WorkerState<T>],
    p_mat: &ConsensusMatrix<T>,
    halves: &[Vec<T>],
) -> Result<()> {
    let mixed = p_mat.mix(halves);
    let shape = states[0].phi.shape();
    for (state, flat) in states.iter_mut().zip(mixed) {
        state.phi = Representation::from_flat(shape, &flat)?;
    }
    Ok(())
}

/// One full round of the personalized algorithm: `τ` head steps per worker,
/// one representation half-step per worker, then the consensus exchange.
/// Step sizes come from the configured schedule at round `k`.
pub fn deprl_round<T: Scalar>(
    states: &mut [WorkerState<T>],
    p_mat: &ConsensusMatrix<T>,
    shards: &[Shard<T>],
    cfg: &RunConfig,
    k: usize,
) -> Result<()> {
    let n = states.len();
    if n != shards.len() || n != p_mat.n() {
        return Err(Error::invalid(
            "states, shards, and matrix sizes must agree",
        ));
    }
    let (alpha, beta) = cfg.rates_at(k, n);
    head_updates(states, shards, cfg, k, alpha)?;
    let halves = phi_half_steps(states, shards, cfg, k, beta)?;
    apply_consensus(states, p_mat, &halves)?;
    check_finite(states, k)
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct Recorder {
    records: Vec<MetricsRecord>,
    m_sum: f64,
    m_count: usize,
}

impl Recorder {
    fn new(m_sum: f64, m_count: usize) -> Recorder {
        Recorder {
            records: Vec::new(),
            m_sum,
            m_count,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        k: usize,
        grad_phi_sq: f64,
        grad_theta_sq: f64,
        consensus_err: f64,
        head_weight: f64,
        avg_train_loss: f64,
        avg_test_accuracy: f64,
    ) {
        let m_k = grad_phi_sq + head_weight * grad_theta_sq + consensus_err;
        self.m_sum += m_k;
        self.m_count += 1;
        let running_avg_m = self.m_sum / self.m_count as f64;
        self.records.push(MetricsRecord {
            k,
            grad_phi_sq,
            grad_theta_sq,
            consensus_err,
            m_k,
            running_avg_m,
            avg_train_loss,
            avg_test_accuracy,
        });
    }
}

/// Full-batch loss at `(φ_i, θ_i)` averaged over workers.
fn mean_train_loss<T: Scalar>(
    phis: &[Representation<T>],
    thetas: &[Head<T>],
    shards: &[Shard<T>],
    kind: LossKind,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = (0..shards.len())
        .into_par_iter()
        .map(|i| Ok(model::loss(&phis[i], &thetas[i], shards[i].train.full(), kind)?.as_f64()))
        .collect();
    let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn mean_test_accuracy<T: Scalar>(
    phis: &[Representation<T>],
    thetas: &[Head<T>],
    shards: &[Shard<T>],
    kind: LossKind,
) -> Result<f64> {
    if kind != LossKind::SoftmaxCrossEntropy {
        return Ok(f64::NAN);
    }
    let pairs: Vec<(&Representation<T>, &Head<T>)> = phis.iter().zip(thetas.iter()).collect();
    let (_, mean) = metrics::accuracy_pairs(&pairs, shards, kind)?;
    Ok(mean)
}

#[allow(clippy::too_many_arguments)]
fn record_round<T: Scalar>(
    recorder: &mut Recorder,
    k: usize,
    phis_start: &[Representation<T>],
    thetas_before: &[Head<T>],
    thetas_after: &[Head<T>],
    shards: &[Shard<T>],
    cfg: &RunConfig,
    head_weight: f64,
) -> Result<()> {
    let flats: Vec<Vec<T>> = phis_start.iter().map(|p| p.flatten()).collect();
    let consensus_err = metrics::consensus_error_flat(&flats);
    let shape = phis_start[0].shape();
    let mut mean_flat = vec![T::zero(); shape.param_len()];
    for f in &flats {
        axpy_slice(&mut mean_flat, T::one(), f);
    }
    let inv_n = T::one() / T::of_f64(flats.len() as f64);
    for v in mean_flat.iter_mut() {
        *v *= inv_n;
    }
    let phi_bar = Representation::from_flat(shape, &mean_flat)?;
    let (grad_phi_sq, grad_theta_sq) = metrics::global_partial_grads_at(
        &phi_bar,
        thetas_before,
        thetas_after,
        shards,
        cfg.loss,
        cfg.head_grad_mode,
    )?;
    let avg_train_loss = mean_train_loss(phis_start, thetas_before, shards, cfg.loss)?;
    let avg_test_accuracy = mean_test_accuracy(phis_start, thetas_before, shards, cfg.loss)?;
    recorder.push(
        k,
        grad_phi_sq,
        grad_theta_sq,
        consensus_err,
        head_weight,
        avg_train_loss,
        avg_test_accuracy,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Run drivers
// ---------------------------------------------------------------------------

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(f)
    }
}

/// Observer invoked after every completed round with the round index (the
/// one just finished) and the post-round states; used for checkpointing.
pub type RoundObserver<'a, T> =
    dyn FnMut(usize, &[WorkerState<T>], f64, usize) -> Result<()> + Send + 'a;

/// Run the personalized algorithm for `cfg.rounds` rounds.
///
/// Per-round records hold the diagnostics of round `k` measured at its start
/// state (and, for the φ gradient, the post-update heads, matching the
/// diagnostic's definition). Deterministic in `(graph, shards, cfg)` for any
/// thread count.
pub fn run_deprl<T: Scalar>(
    graph: &Graph,
    shards: &[Shard<T>],
    cfg: &RunConfig,
) -> Result<MetricsTrace> {
    run_deprl_observed(graph, shards, cfg, None, &mut |_, _, _, _| Ok(()))
}

/// [`run_deprl`] with checkpoint resume and a per-round observer.
pub fn run_deprl_observed<T: Scalar>(
    graph: &Graph,
    shards: &[Shard<T>],
    cfg: &RunConfig,
    resume: Option<Checkpoint<T>>,
    observer: &mut RoundObserver<'_, T>,
) -> Result<MetricsTrace> {
    validate_task(cfg, graph, shards)?;
    let n = graph.n_workers();
    let p_mat = ConsensusMatrix::<T>::metropolis(graph);
    let warnings = feasibility_warnings(cfg, n, &p_mat);

    let (start_round, mut states, m_sum, m_count) = match resume {
        Some(cp) => (cp.round, cp.states, cp.m_sum, cp.m_count),
        None => (0, init_states(cfg, n)?, 0.0, 0),
    };
    if states.len() != n {
        return Err(Error::invalid(
            "checkpoint worker count does not match graph",
        ));
    }

    let timer = Instant::now();
    let mut recorder = Recorder::new(m_sum, m_count);

    with_pool(cfg.threads, || -> Result<()> {
        for k in start_round..cfg.rounds {
            let (alpha, beta) = cfg.rates_at(k, n);
            let record_now = k % cfg.metrics_stride == 0;

            let thetas_before: Option<Vec<Head<T>>> =
                record_now.then(|| states.iter().map(|s| s.theta.clone()).collect());

            head_updates(&mut states, shards, cfg, k, alpha)?;

            if let Some(before) = thetas_before {
                let phis: Vec<Representation<T>> = states.iter().map(|s| s.phi.clone()).collect();
                let after: Vec<Head<T>> = states.iter().map(|s| s.theta.clone()).collect();
                // ατ/β; NaN when β is zero (the diagnostic is undefined there).
                let head_weight = alpha * cfg.tau as f64 / beta;
                record_round(
                    &mut recorder,
                    k,
                    &phis,
                    &before,
                    &after,
                    shards,
                    cfg,
                    head_weight,
                )?;
            }

            let halves = phi_half_steps(&states, shards, cfg, k, beta)?;
            apply_consensus(&mut states, &p_mat, &halves)?;
            check_finite(&states, k)?;
            observer(k, &states, recorder.m_sum, recorder.m_count)?;
        }
        Ok(())
    })?;

    let summary = finish_summary(&states, shards, cfg, &recorder, timer, warnings)?;
    Ok(MetricsTrace {
        records: recorder.records,
        summary,
    })
}

fn finish_summary<T: Scalar>(
    states: &[WorkerState<T>],
    shards: &[Shard<T>],
    cfg: &RunConfig,
    recorder: &Recorder,
    timer: Instant,
    warnings: Vec<String>,
) -> Result<RunSummary> {
    let phis: Vec<Representation<T>> = states.iter().map(|s| s.phi.clone()).collect();
    let thetas: Vec<Head<T>> = states.iter().map(|s| s.theta.clone()).collect();
    let final_avg_train_loss = mean_train_loss(&phis, &thetas, shards, cfg.loss)?;
    let final_avg_test_accuracy = if cfg.loss == LossKind::SoftmaxCrossEntropy {
        Some(mean_test_accuracy(&phis, &thetas, shards, cfg.loss)?)
    } else {
        None
    };
    Ok(RunSummary {
        rounds: cfg.rounds,
        running_avg_m: if recorder.m_count == 0 {
            f64::NAN
        } else {
            recorder.m_sum / recorder.m_count as f64
        },
        final_avg_train_loss,
        final_avg_test_accuracy,
        wall_secs: timer.elapsed().as_secs_f64(),
        warnings,
    })
}

/// Decentralized single-model SGD baseline: each worker holds the full
/// parameter vector `(φ_i, θ_i)`, takes ONE gradient step on the whole
/// vector per round at rate `β`, then gossip-averages the whole vector,
/// heads included, so nothing is personalized. All workers start from the
/// same initial point.
pub fn run_dpsgd<T: Scalar>(
    graph: &Graph,
    shards: &[Shard<T>],
    cfg: &RunConfig,
) -> Result<MetricsTrace> {
    Ok(run_dpsgd_final_states(graph, shards, cfg)?.0)
}

/// [`run_dpsgd`] returning the final worker states as well.
pub fn run_dpsgd_final_states<T: Scalar>(
    graph: &Graph,
    shards: &[Shard<T>],
    cfg: &RunConfig,
) -> Result<(MetricsTrace, Vec<WorkerState<T>>)> {
    validate_task(cfg, graph, shards)?;
    let n = graph.n_workers();
    let p_mat = ConsensusMatrix::<T>::metropolis(graph);
    let warnings = feasibility_warnings(cfg, n, &p_mat);

    let shared_cfg = RunConfig {
        shared_head_init: true,
        ..cfg.clone()
    };
    let mut states = init_states::<T>(&shared_cfg, n)?;

    let timer = Instant::now();
    let mut recorder = Recorder::new(0.0, 0);

    with_pool(cfg.threads, || -> Result<()> {
        for k in 0..cfg.rounds {
            let (_, beta) = cfg.rates_at(k, n);
            let b = T::of_f64(beta);
            let record_now = k % cfg.metrics_stride == 0;
            let thetas_before: Option<Vec<Head<T>>> =
                record_now.then(|| states.iter().map(|s| s.theta.clone()).collect());

            // One joint step per worker on a single fresh minibatch.
            let halves: Vec<(Vec<T>, Vec<T>)> = states
                .par_iter()
                .enumerate()
                .map(|(i, state)| -> Result<(Vec<T>, Vec<T>)> {
                    let shard = &shards[i];
                    let mut rng = rng::substream(cfg.seed, i as u64, k as u64, phase::DPSGD_BATCH);
                    let idx =
                        rng::sample_batch_indices(&mut rng, shard.train.len(), cfg.batch_size);
                    let (gp, gt) = model::grad_pair(
                        &state.phi,
                        &state.theta,
                        shard.train.batch(&idx),
                        cfg.loss,
                    )?;
                    let mut phi_half = state.phi.clone();
                    phi_half.axpy(-b, &gp);
                    let mut theta_half = state.theta.clone();
                    theta_half.axpy(-b, &gt);
                    Ok((phi_half.flatten(), theta_half.flatten()))
                })
                .collect::<Result<_>>()?;

            if let Some(before) = thetas_before {
                let phis: Vec<Representation<T>> = states.iter().map(|s| s.phi.clone()).collect();
                // The joint step updates the head too; "after" is the half-step
                // head, evaluated before gossip. The single-rate baseline has no
                // two-timescale weight, so the head term enters with weight 1.
                let shape = states[0].theta.weight.rows();
                let z = states[0].theta.weight.cols();
                let after: Vec<Head<T>> = halves
                    .iter()
                    .map(|(_, t)| Head::from_flat(shape, z, t))
                    .collect::<Result<_>>()?;
                record_round(&mut recorder, k, &phis, &before, &after, shards, cfg, 1.0)?;
            }

            let phi_halves: Vec<Vec<T>> = halves.iter().map(|(p, _)| p.clone()).collect();
            let theta_halves: Vec<Vec<T>> = halves.iter().map(|(_, t)| t.clone()).collect();
            let mixed_phi = p_mat.mix(&phi_halves);
            let mixed_theta = p_mat.mix(&theta_halves);
            let shape = states[0].phi.shape();
            let (c, z) = (states[0].theta.out_dim(), states[0].theta.code_dim());
            for (i, state) in states.iter_mut().enumerate() {
                state.phi = Representation::from_flat(shape, &mixed_phi[i])?;
                state.theta = Head::from_flat(c, z, &mixed_theta[i])?;
            }
            check_finite(&states, k)?;
        }
        Ok(())
    })?;

    let summary = finish_summary(&states, shards, cfg, &recorder, timer, warnings)?;
    Ok((
        MetricsTrace {
            records: recorder.records,
            summary,
        },
        states,
    ))
}

/// Final states of a run (same inputs as [`run_deprl`]); used when the
/// learned representation itself is the product, e.g. for generalization.
pub fn run_deprl_final_states<T: Scalar>(
    graph: &Graph,
    shards: &[Shard<T>],
    cfg: &RunConfig,
) -> Result<(MetricsTrace, Vec<WorkerState<T>>)> {
    let mut captured: Option<Vec<WorkerState<T>>> = None;
    let trace = run_deprl_observed(graph, shards, cfg, None, &mut |k, states, _, _| {
        if k + 1 == cfg.rounds {
            captured = Some(states.to_vec());
        }
        Ok(())
    })?;
    let states = match captured {
        Some(s) => s,
        // rounds == 0: the trace is empty and the states are the initial ones
        None => init_states(cfg, graph.n_workers())?,
    };
    Ok((trace, states))
}

// ---------------------------------------------------------------------------
// Generalization to unseen workers
// ---------------------------------------------------------------------------

/// How [`generalize_to_new_workers`] scored the new workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneralizationMetric {
    /// Mean per-worker test accuracy (classification tasks).
    Accuracy,
    /// Mean per-worker full-batch test loss (regression tasks).
    TestLoss,
}

/// Outcome of fitting fresh heads against a frozen representation.
#[derive(Clone, Debug)]
pub struct Generalization<T> {
    pub heads: Vec<Head<T>>,
    pub per_worker: Vec<f64>,
    pub mean: f64,
    pub metric: GeneralizationMetric,
}

/// Fit a private head for each new worker against a frozen representation:
/// `head_steps` SGD steps on the head only, then evaluate on the worker's own
/// test shard. The representation is never updated.
pub fn generalize_to_new_workers<T: Scalar>(
    frozen_phi: &Representation<T>,
    new_shards: &[Shard<T>],
    head_steps: usize,
    alpha: f64,
    batch_size: usize,
    kind: LossKind,
    seed: u64,
) -> Result<Generalization<T>> {
    if new_shards.is_empty() {
        return Err(Error::invalid("need at least one new worker"));
    }
    let z = frozen_phi.output_dim();
    let d = frozen_phi.input_dim();
    let a = T::of_f64(alpha);

    let fitted: Vec<Result<(Head<T>, f64)>> = new_shards
        .par_iter()
        .map(|shard| -> Result<(Head<T>, f64)> {
            if shard.train.input_dim() != d {
                return Err(Error::invalid(format!(
                    "worker {} input dim {} does not match representation ({d})",
                    shard.worker_id,
                    shard.train.input_dim()
                )));
            }
            let wid = shard.worker_id as u64;
            let mut init_rng = rng::substream(seed, wid, 0, phase::GENERALIZE_INIT);
            let mut theta = Head::random_init(shard.train.target_dim(), z, &mut init_rng);
            for step in 0..head_steps {
                let mut rng = rng::substream(seed, wid, step as u64, phase::GENERALIZE_BATCH);
                let idx = rng::sample_batch_indices(&mut rng, shard.train.len(), batch_size);
                let g = model::grad_theta(frozen_phi, &theta, shard.train.batch(&idx), kind)?;
                theta.axpy(-a, &g);
            }
            let score = match kind {
                LossKind::SoftmaxCrossEntropy => {
                    let pair = [(frozen_phi, &theta)];
                    let (per, _) =
                        metrics::accuracy_pairs(&pair, std::slice::from_ref(shard), kind)?;
                    per[0]
                }
                LossKind::Squared => {
                    model::loss(frozen_phi, &theta, shard.test.full(), kind)?.as_f64()
                }
            };
            Ok((theta, score))
        })
        .collect();

    let mut heads = Vec::with_capacity(new_shards.len());
    let mut per_worker = Vec::with_capacity(new_shards.len());
    for item in fitted {
        let (theta, score) = item?;
        heads.push(theta);
        per_worker.push(score);
    }
    let mean = per_worker.iter().sum::<f64>() / per_worker.len() as f64;
    Ok(Generalization {
        heads,
        per_worker,
        mean,
        metric: match kind {
            LossKind::SoftmaxCrossEntropy => GeneralizationMetric::Accuracy,
            LossKind::Squared => GeneralizationMetric::TestLoss,
        },
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Text format:
//
//   deprl-checkpoint v1
//   round <k> m_sum <float> m_count <int>
//   workers <N>
//   repr linear <z> <d>            (or: repr one-hidden <z> <h> <d>)
//   head <c> <z>
//   <flattened φ of worker 0>
//   <flattened θ of worker 0>
//   ...

/// A resumable snapshot: parameters after `round` rounds plus the running
/// diagnostic sums, so a resumed trace continues the original byte-for-byte.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub round: usize,
    pub m_sum: f64,
    pub m_count: usize,
    pub states: Vec<WorkerState<T>>,
}

const CHECKPOINT_MAGIC: &str = "deprl-checkpoint v1";

pub fn save_checkpoint<T: Scalar>(cp: &Checkpoint<T>, path: &Path) -> Result<()> {
    if cp.states.is_empty() {
        return Err(Error::invalid("checkpoint needs at least one worker"));
    }
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "round {} m_sum {} m_count {}\n",
        cp.round, cp.m_sum, cp.m_count
    ));
    out.push_str(&format!("workers {}\n", cp.states.len()));
    match cp.states[0].phi.shape() {
        ReprShape::Linear { d, z } => out.push_str(&format!("repr linear {z} {d}\n")),
        ReprShape::OneHiddenTanh { d, h, z } => {
            out.push_str(&format!("repr one-hidden {z} {h} {d}\n"))
        }
    }
    out.push_str(&format!(
        "head {} {}\n",
        cp.states[0].theta.out_dim(),
        cp.states[0].theta.code_dim()
    ));
    for state in &cp.states {
        push_flat_line(&mut out, &state.phi.flatten());
        push_flat_line(&mut out, &state.theta.flatten());
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)
}

fn push_flat_line<T: Scalar>(out: &mut String, flat: &[T]) {
    let parts: Vec<String> = flat.iter().map(|v| format!("{v}")).collect();
    out.push_str(&parts.join(" "));
    out.push('\n');
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, msg: &str| Error::MalformedFile {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&CHECKPOINT_MAGIC) {
        return Err(malformed(1, "bad magic line"));
    }
    let need = |idx: usize| -> Result<&str> {
        lines
            .get(idx)
            .copied()
            .ok_or_else(|| malformed(lines.len() + 1, "truncated checkpoint"))
    };

    let toks: Vec<&str> = need(1)?.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "round" || toks[2] != "m_sum" || toks[4] != "m_count" {
        return Err(malformed(2, "bad round line"));
    }
    let round: usize = toks[1].parse().map_err(|_| malformed(2, "bad round"))?;
    let m_sum: f64 = toks[3].parse().map_err(|_| malformed(2, "bad m_sum"))?;
    let m_count: usize = toks[5].parse().map_err(|_| malformed(2, "bad m_count"))?;

    let toks: Vec<&str> = need(2)?.split_whitespace().collect();
    if toks.len() != 2 || toks[0] != "workers" {
        return Err(malformed(3, "bad workers line"));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| malformed(3, "bad worker count"))?;

    let toks: Vec<&str> = need(3)?.split_whitespace().collect();
    let shape = match toks.as_slice() {
        ["repr", "linear", z, d] => ReprShape::Linear {
            d: d.parse().map_err(|_| malformed(4, "bad dim"))?,
            z: z.parse().map_err(|_| malformed(4, "bad dim"))?,
        },
        ["repr", "one-hidden", z, h, d] => ReprShape::OneHiddenTanh {
            d: d.parse().map_err(|_| malformed(4, "bad dim"))?,
            h: h.parse().map_err(|_| malformed(4, "bad dim"))?,
            z: z.parse().map_err(|_| malformed(4, "bad dim"))?,
        },
        _ => return Err(malformed(4, "bad repr line")),
    };
    let toks: Vec<&str> = need(4)?.split_whitespace().collect();
    let (c, z) = match toks.as_slice() {
        ["head", c, z] => (
            c.parse().map_err(|_| malformed(5, "bad head dim"))?,
            z.parse().map_err(|_| malformed(5, "bad head dim"))?,
        ),
        _ => return Err(malformed(5, "bad head line")),
    };

    let parse_flat = |line: &str, ln: usize| -> Result<Vec<T>> {
        line.split_whitespace()
            .map(|tok| tok.parse::<T>().map_err(|_| malformed(ln, "bad float")))
            .collect()
    };
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let phi_line = need(5 + 2 * i)?;
        let theta_line = need(6 + 2 * i)?;
        let phi = Representation::from_flat(shape, &parse_flat(phi_line, 6 + 2 * i)?)
            .map_err(|_| malformed(6 + 2 * i, "wrong representation length"))?;
        let theta = Head::from_flat(c, z, &parse_flat(theta_line, 7 + 2 * i)?)
            .map_err(|_| malformed(7 + 2 * i, "wrong head length"))?;
        states.push(WorkerState { phi, theta });
    }
    Ok(Checkpoint {
        round,
        m_sum,
        m_count,
        states,
    })
}
