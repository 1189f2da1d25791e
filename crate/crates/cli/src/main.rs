//! `deprl`: experiment runner for the decentralized shared-representation
//! simulator.
//!
//! Subcommands: `run` (one experiment over a seed list), `sweep-speedup`
//! (worker-count scaling), `gradcheck` (finite-difference gradient audit),
//! `generalize` (fit new workers against a frozen representation).
//!
//! Exit codes: 0 success; 1 failed check or I/O trouble; 2 invalid spec or
//! usage; 3 run aborted on non-finite parameters.
//! `DEPRL_LOG=info|debug` turns on progress logging (stderr).

mod output;
mod spec;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deprl_core::data::{
    generate_planted, load_shards, plant_new_workers, PlantedOutput, PlantedSpec, Shard,
};
use deprl_core::engine::{
    self, corollary_k_floor, generalize_to_new_workers, run_deprl_final_states, run_deprl_observed,
    run_dpsgd_final_states, Checkpoint, GeneralizationMetric, MetricsTrace, RunConfig, WorkerState,
};
use deprl_core::metrics::{self, TheoryConstants, ThresholdField};
use deprl_core::model::{ReprShape, Representation};
use deprl_core::topology::{ConsensusMatrix, Graph};
use deprl_core::Error as CoreError;

use output::*;
use spec::{parse_spec, Algorithm, ExperimentSpec, SpecError, TaskSpec, TopologySpec};

#[derive(Parser)]
#[command(
    name = "deprl",
    version,
    about = "decentralized personalized learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (created if missing); all artifacts land here.
    #[arg(long)]
    out: PathBuf,
    /// Worker-level thread count; 0 uses all cores.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the spec once per seed; writes per-seed metrics CSVs and a
    /// JSON summary.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Write a resumable checkpoint every N rounds.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Re-run the spec at several worker counts and report rounds-to-ε and
    /// speedups (planted tasks only; per-worker data held fixed).
    SweepSpeedup {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated worker counts, e.g. 4,8,16.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<usize>,
        /// Threshold on the running average of M(k).
        #[arg(long)]
        epsilon: f64,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Worst acceptable relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Train per the spec, then fit fresh workers' heads against the learned
    /// (and, for comparison, a random) frozen representation.
    Generalize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 8)]
        new_workers: usize,
        #[arg(long, default_value_t = 400)]
        head_steps: usize,
        #[arg(long, default_value_t = 0.3)]
        head_alpha: f64,
    },
}

fn log_level() -> u8 {
    match std::env::var("DEPRL_LOG").as_deref() {
        Ok("debug") => 2,
        Ok("info") => 1,
        _ => 0,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= 1 { eprintln!($($arg)*); }
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            common,
            checkpoint_every,
        } => cmd_run(&common, checkpoint_every),
        Command::SweepSpeedup {
            common,
            workers,
            epsilon,
        } => cmd_sweep(&common, &workers, epsilon),
        Command::Gradcheck {
            seed,
            instances,
            tolerance,
        } => cmd_gradcheck(seed, instances, tolerance),
        Command::Generalize {
            common,
            new_workers,
            head_steps,
            head_alpha,
        } => cmd_generalize(&common, new_workers, head_steps, head_alpha),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deprl: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
    fn failed(message: impl Into<String>) -> CliError {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> CliError {
        CliError::usage(e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        let code = match &e {
            CoreError::RunAbort { .. } => 3,
            CoreError::InvalidArgument(_)
            | CoreError::MalformedFile { .. }
            | CoreError::ConstructionFailure(_) => 2,
            CoreError::Io { .. } => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read spec {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_spec(&text, base)?)
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::failed(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::failed(format!("cannot write {}: {e}", path.display())))
}

/// The run's communication graph. Random topologies draw from the first
/// seed so the whole seed sweep shares one graph (the summary reports a
/// single set of mixing constants).
fn build_graph(spec: &ExperimentSpec, workers: usize) -> Result<Graph, CliError> {
    Ok(match &spec.topology {
        TopologySpec::Ring => Graph::ring(workers)?,
        TopologySpec::Complete => Graph::complete(workers)?,
        TopologySpec::Random { edge_prob } => {
            Graph::random_connected(workers, *edge_prob, spec.seeds[0])?
        }
    })
}

/// Planted shards for one seed, or the shards loaded from the task file.
fn task_shards(
    spec: &ExperimentSpec,
    workers: usize,
    seed: u64,
) -> Result<Vec<Shard<f64>>, CliError> {
    match &spec.task {
        TaskSpec::Planted {
            d,
            z,
            samples_per_worker,
            noise_std,
            heterogeneity,
            classes,
            target_dim,
        } => {
            let output = if *classes > 0 {
                PlantedOutput::Classification { classes: *classes }
            } else {
                PlantedOutput::Regression { dim: *target_dim }
            };
            let task = generate_planted::<f64>(&PlantedSpec {
                n_workers: workers,
                d: *d,
                z: *z,
                samples_per_worker: *samples_per_worker,
                noise_std: *noise_std,
                heterogeneity: *heterogeneity,
                seed,
                output,
            })?;
            Ok(task.shards)
        }
        TaskSpec::ShardFile { path } => {
            let shards: Vec<Shard<f64>> = load_shards(path)?;
            if shards.len() != workers {
                return Err(CliError::usage(format!(
                    "shard file holds {} workers but topology.workers = {workers}",
                    shards.len()
                )));
            }
            Ok(shards)
        }
    }
}

/// Rebind the model shape to the task's input dimension (shard-file specs
/// leave it open until the file is read).
fn bind_repr(spec: &ExperimentSpec, d: usize) -> ReprShape {
    match spec.model_repr {
        ReprShape::Linear { z, .. } => ReprShape::Linear { d, z },
        ReprShape::OneHiddenTanh { h, z, .. } => ReprShape::OneHiddenTanh { d, h, z },
    }
}

fn execute(
    spec: &ExperimentSpec,
    graph: &Graph,
    shards: &[Shard<f64>],
    cfg: &RunConfig,
    observer: &mut engine::RoundObserver<'_, f64>,
) -> Result<(MetricsTrace, Vec<WorkerState<f64>>), CliError> {
    Ok(match spec.algorithm {
        Algorithm::Deprl => {
            let mut captured: Option<Vec<WorkerState<f64>>> = None;
            let rounds = cfg.rounds;
            let trace = run_deprl_observed(graph, shards, cfg, None, &mut |k, states, a, b| {
                if k + 1 == rounds {
                    captured = Some(states.to_vec());
                }
                observer(k, states, a, b)
            })?;
            let states = match captured {
                Some(s) => s,
                None => engine::init_states(cfg, graph.n_workers())?,
            };
            (trace, states)
        }
        Algorithm::Dpsgd => run_dpsgd_final_states(graph, shards, cfg)?,
    })
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(common: &CommonArgs, checkpoint_every: Option<usize>) -> Result<(), CliError> {
    let spec = load_spec(&common.spec)?;
    ensure_out_dir(&common.out)?;
    let graph = build_graph(&spec, spec.workers)?;
    let p_mat = ConsensusMatrix::<f64>::metropolis(&graph);
    let mix = p_mat.mixing_params().ok();

    let mut seed_summaries = Vec::new();
    for &seed in &spec.seeds {
        let shards = task_shards(&spec, spec.workers, seed)?;
        let d = shards[0].train.input_dim();
        let out_dim = spec
            .out_dim()
            .unwrap_or_else(|| shards[0].train.target_dim());
        let mut cfg = spec.run_config(seed, out_dim, common.threads);
        cfg.model.repr = bind_repr(&spec, d);

        let out_dir = common.out.clone();
        let stride = checkpoint_every.unwrap_or(0);
        let mut observer = move |k: usize,
                                 states: &[WorkerState<f64>],
                                 m_sum: f64,
                                 m_count: usize|
              -> deprl_core::Result<()> {
            if stride > 0 && (k + 1) % stride == 0 {
                let cp = Checkpoint {
                    round: k + 1,
                    m_sum,
                    m_count,
                    states: states.to_vec(),
                };
                let path = out_dir.join(format!("checkpoint_seed{seed}_round{}.txt", k + 1));
                engine::save_checkpoint(&cp, &path)?;
            }
            Ok(())
        };

        info!(
            "seed {seed}: running {} for {} rounds",
            spec.algorithm.as_str(),
            cfg.rounds
        );
        let (trace, states) = execute(&spec, &graph, &shards, &cfg, &mut observer)?;

        let csv_name = format!("metrics_seed{seed}.csv");
        write_file(&common.out.join(&csv_name), trace.to_csv().as_bytes())?;

        // Bound evaluation when constants are supplied or requested.
        let mut constants_json = None;
        let mut bound_json = None;
        if spec.constants.active() && !trace.records.is_empty() {
            let constants = if spec.constants.user_supplied() {
                TheoryConstants::user(
                    spec.constants.lipschitz,
                    spec.constants.sigma,
                    spec.constants.varsigma,
                )?
            } else {
                metrics::estimate_constants(&states, &shards, cfg.loss, cfg.batch_size, 8, seed)?
            };
            if let Some(mix) = &mix {
                let n = graph.n_workers();
                let (alpha, beta) = cfg.rates_at(0, n);
                if beta > 0.0 && cfg.rounds > 0 {
                    let f0 = trace.records[0].avg_train_loss;
                    let fstar = spec.constants.fstar;
                    let bound = metrics::theorem_bound(
                        f0, fstar, &constants, mix, n, cfg.rounds, alpha, beta, cfg.tau,
                    )?;
                    let k_floor = corollary_k_floor(n, mix.big_c, mix.q, constants.lipschitz_l);
                    bound_json = Some(BoundJson::new(
                        &bound,
                        k_floor,
                        f0,
                        fstar,
                        alpha,
                        beta,
                        constants.provenance
                            == deprl_core::metrics::Provenance::EmpiricallyEstimated,
                    ));
                }
            }
            constants_json = Some(ConstantsJson::new(&constants));
        }

        seed_summaries.push(SeedSummary {
            seed,
            rounds: trace.summary.rounds,
            running_avg_m: finite_opt(trace.summary.running_avg_m),
            final_avg_train_loss: trace.summary.final_avg_train_loss,
            final_avg_test_accuracy: trace.summary.final_avg_test_accuracy,
            wall_secs: trace.summary.wall_secs,
            warnings: trace.summary.warnings.clone(),
            metrics_csv: csv_name,
            constants: constants_json,
            theorem_bound: bound_json,
        });
    }

    let avg_m: Vec<f64> = seed_summaries
        .iter()
        .filter_map(|s| s.running_avg_m)
        .collect();
    let train: Vec<f64> = seed_summaries
        .iter()
        .map(|s| s.final_avg_train_loss)
        .collect();
    let acc: Vec<f64> = seed_summaries
        .iter()
        .filter_map(|s| s.final_avg_test_accuracy)
        .collect();
    let summary = SummaryFile {
        schema_version: deprl_core::SCHEMA_VERSION,
        algorithm: spec.algorithm.as_str().to_string(),
        spec: spec.echo(),
        graph: GraphJson::new(&graph),
        consensus: ConsensusJson::new(&p_mat, mix.as_ref()),
        seeds: seed_summaries,
        aggregate: Aggregate {
            running_avg_m: (!avg_m.is_empty()).then(|| stats(&avg_m)),
            final_avg_train_loss: stats(&train),
            final_avg_test_accuracy: (!acc.is_empty()).then(|| stats(&acc)),
        },
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::failed(format!("summary serialization failed: {e}")))?;
    write_file(&common.out.join("summary.json"), json.as_bytes())?;
    println!("wrote {}", common.out.join("summary.json").display());
    Ok(())
}

fn finite_opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

// ---------------------------------------------------------------------------
// sweep-speedup
// ---------------------------------------------------------------------------

fn cmd_sweep(common: &CommonArgs, workers: &[usize], epsilon: f64) -> Result<(), CliError> {
    if workers.is_empty() {
        return Err(CliError::usage("sweep needs at least one worker count"));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(CliError::usage("epsilon must be positive"));
    }
    let spec = load_spec(&common.spec)?;
    if matches!(spec.task, TaskSpec::ShardFile { .. }) {
        return Err(CliError::usage(
            "sweep-speedup varies the worker count and needs a planted task",
        ));
    }
    ensure_out_dir(&common.out)?;

    let mut counts = workers.to_vec();
    counts.sort_unstable();
    let mut rows = Vec::new();
    for &n in &counts {
        let graph = build_graph(&spec, n)?;
        let mut per_seed = Vec::new();
        for &seed in &spec.seeds {
            let shards = task_shards(&spec, n, seed)?;
            let out_dim = spec.out_dim().expect("planted task");
            let mut cfg = spec.run_config(seed, out_dim, common.threads);
            cfg.model.repr = bind_repr(&spec, shards[0].train.input_dim());
            info!("sweep N={n} seed {seed}");
            let (trace, _) = execute(&spec, &graph, &shards, &cfg, &mut |_, _, _, _| Ok(()))?;
            per_seed.push(metrics::rounds_to_threshold(
                &trace.records,
                epsilon,
                ThresholdField::MK,
            ));
        }
        let mut reached: Vec<f64> = per_seed.iter().flatten().map(|&k| k as f64).collect();
        let median_rounds = if reached.is_empty() {
            None
        } else {
            reached.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = reached.len();
            Some(if m % 2 == 1 {
                reached[m / 2]
            } else {
                0.5 * (reached[m / 2 - 1] + reached[m / 2])
            })
        };
        rows.push(SweepRow {
            n_workers: n,
            rounds_per_seed: per_seed,
            median_rounds,
            speedup: None,
        });
    }
    let base = rows[0].median_rounds;
    for row in rows.iter_mut() {
        row.speedup = match (base, row.median_rounds) {
            (Some(b), Some(m)) if m > 0.0 => Some(b / m),
            (Some(_), Some(_)) => Some(1.0), // both hit at round 0
            _ => None,
        };
    }

    // Plot-ready CSV alongside the JSON.
    let mut csv = format!("# schema_version {}\n", deprl_core::SCHEMA_VERSION);
    csv.push_str("n_workers");
    for seed in &spec.seeds {
        csv.push_str(&format!(",rounds_seed{seed}"));
    }
    csv.push_str(",median_rounds,speedup\n");
    for row in &rows {
        csv.push_str(&row.n_workers.to_string());
        for r in &row.rounds_per_seed {
            match r {
                Some(k) => csv.push_str(&format!(",{k}")),
                None => csv.push(','),
            }
        }
        match row.median_rounds {
            Some(m) => csv.push_str(&format!(",{m}")),
            None => csv.push(','),
        }
        match row.speedup {
            Some(s) => csv.push_str(&format!(",{s}\n")),
            None => csv.push_str(",\n"),
        }
    }
    write_file(&common.out.join("speedup.csv"), csv.as_bytes())?;

    let file = SweepFile {
        schema_version: deprl_core::SCHEMA_VERSION,
        epsilon,
        field: "m_k".into(),
        seeds: spec.seeds.clone(),
        rows,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::failed(format!("sweep serialization failed: {e}")))?;
    write_file(&common.out.join("speedup.json"), json.as_bytes())?;
    println!("wrote {}", common.out.join("speedup.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(seed: u64, instances: usize, tolerance: f64) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::usage("need at least one instance"));
    }
    let report = deprl_core::gradcheck::run(seed, instances)?;
    println!(
        "gradcheck: {} instances, worst relative error {:.6e} ({})",
        report.instances, report.worst_rel_err, report.worst_desc
    );
    if report.passes(tolerance) {
        println!("gradcheck: PASS at tolerance {tolerance:.1e}");
        Ok(())
    } else {
        Err(CliError::failed(format!(
            "gradcheck: FAIL at tolerance {tolerance:.1e}; worst instance {} (seed {seed}) — \
             rerun with --seed {seed} --instances {instances}",
            report.worst_instance
        )))
    }
}

// ---------------------------------------------------------------------------
// generalize
// ---------------------------------------------------------------------------

fn cmd_generalize(
    common: &CommonArgs,
    new_workers: usize,
    head_steps: usize,
    head_alpha: f64,
) -> Result<(), CliError> {
    if new_workers == 0 {
        return Err(CliError::usage("need at least one new worker"));
    }
    let spec = load_spec(&common.spec)?;
    let TaskSpec::Planted {
        d,
        z,
        samples_per_worker,
        noise_std,
        heterogeneity,
        classes,
        target_dim,
    } = spec.task
    else {
        return Err(CliError::usage(
            "generalize draws new workers from the planted ground truth; shard-file tasks \
             have no generator to extend",
        ));
    };
    ensure_out_dir(&common.out)?;
    let graph = build_graph(&spec, spec.workers)?;

    let mut seeds_out = Vec::new();
    for &seed in &spec.seeds {
        let output = if classes > 0 {
            PlantedOutput::Classification { classes }
        } else {
            PlantedOutput::Regression { dim: target_dim }
        };
        let task = generate_planted::<f64>(&PlantedSpec {
            n_workers: spec.workers,
            d,
            z,
            samples_per_worker,
            noise_std,
            heterogeneity,
            seed,
            output,
        })?;
        let out_dim = spec.out_dim().expect("planted task");
        let mut cfg = spec.run_config(seed, out_dim, common.threads);
        cfg.model.repr = bind_repr(&spec, d);

        info!("generalize seed {seed}: training base cohort");
        let states = match spec.algorithm {
            Algorithm::Deprl => run_deprl_final_states(&graph, &task.shards, &cfg)?.1,
            Algorithm::Dpsgd => run_dpsgd_final_states(&graph, &task.shards, &cfg)?.1,
        };
        let learned_phi = metrics::mean_representation(&states)?;
        let mut rng = deprl_core::rng::substream(seed ^ 0x5eed_0bad, deprl_core::rng::SHARED, 0, 1);
        let random_phi = Representation::<f64>::random_init(cfg.model.repr, &mut rng)?;

        let fresh = plant_new_workers(&task, new_workers, seed.wrapping_add(1_000_003))?;
        let fit = |phi: &Representation<f64>| {
            generalize_to_new_workers(
                phi,
                &fresh.shards,
                head_steps,
                head_alpha,
                cfg.batch_size,
                cfg.loss,
                seed.wrapping_add(9),
            )
        };
        let learned = fit(&learned_phi)?;
        let random = fit(&random_phi)?;
        seeds_out.push(GeneralizeSeed {
            seed,
            metric: match learned.metric {
                GeneralizationMetric::Accuracy => "accuracy".into(),
                GeneralizationMetric::TestLoss => "test-loss".into(),
            },
            learned_mean: learned.mean,
            random_mean: random.mean,
            learned_per_worker: learned.per_worker,
            random_per_worker: random.per_worker,
        });
    }

    let file = GeneralizeFile {
        schema_version: deprl_core::SCHEMA_VERSION,
        new_workers,
        head_steps,
        head_alpha,
        seeds: seeds_out,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::failed(format!("serialization failed: {e}")))?;
    write_file(&common.out.join("generalization.json"), json.as_bytes())?;
    println!("wrote {}", common.out.join("generalization.json").display());
    Ok(())
}
