//! JSON artifact schemas. Every file carries `schema_version`; floats pass
//! through serde_json's shortest-round-trip formatting.

use std::collections::BTreeMap;

use serde::Serialize;

use deprl_core::metrics::{TheoremBound, TheoryConstants};
use deprl_core::topology::{ConsensusMatrix, Graph, MixingParams};

#[derive(Serialize)]
pub struct GraphJson {
    pub workers: usize,
    /// Undirected edges `(i, j)`, `i < j`; self-loops are implicit.
    pub edges: Vec<(usize, usize)>,
}

impl GraphJson {
    pub fn new(graph: &Graph) -> GraphJson {
        GraphJson {
            workers: graph.n_workers(),
            edges: graph.edge_pairs(),
        }
    }
}

#[derive(Serialize)]
pub struct ConsensusJson {
    /// Row-major N×N weights.
    pub weights: Vec<f64>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub big_c: Option<f64>,
}

impl ConsensusJson {
    pub fn new(matrix: &ConsensusMatrix<f64>, mix: Option<&MixingParams<f64>>) -> ConsensusJson {
        ConsensusJson {
            weights: matrix.weights().to_vec(),
            p: mix.map(|m| m.p),
            q: mix.map(|m| m.q),
            big_c: mix.map(|m| m.big_c),
        }
    }
}

#[derive(Serialize)]
pub struct ConstantsJson {
    pub lipschitz_l: f64,
    pub sigma: f64,
    pub varsigma: f64,
    pub provenance: String,
}

impl ConstantsJson {
    pub fn new(c: &TheoryConstants) -> ConstantsJson {
        ConstantsJson {
            lipschitz_l: c.lipschitz_l,
            sigma: c.sigma,
            varsigma: c.varsigma,
            provenance: match c.provenance {
                deprl_core::metrics::Provenance::UserSupplied => "user-supplied".into(),
                deprl_core::metrics::Provenance::EmpiricallyEstimated => {
                    "empirically-estimated".into()
                }
            },
        }
    }
}

#[derive(Serialize)]
pub struct BoundJson {
    pub total: f64,
    pub vanishing: f64,
    pub phi_variance: f64,
    pub head_drift: f64,
    pub head_variance: f64,
    pub mix_variance: f64,
    pub heterogeneity: f64,
    pub k_floor: f64,
    pub f0: f64,
    pub fstar: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Always true when the constants were estimated: estimates are lower
    /// bounds on the true suprema, so the bound is indicative.
    pub indicative: bool,
}

impl BoundJson {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        bound: &TheoremBound,
        k_floor: f64,
        f0: f64,
        fstar: f64,
        alpha: f64,
        beta: f64,
        indicative: bool,
    ) -> BoundJson {
        BoundJson {
            total: bound.total(),
            vanishing: bound.vanishing,
            phi_variance: bound.phi_variance,
            head_drift: bound.head_drift,
            head_variance: bound.head_variance,
            mix_variance: bound.mix_variance,
            heterogeneity: bound.heterogeneity,
            k_floor,
            f0,
            fstar,
            alpha,
            beta,
            indicative,
        }
    }
}

#[derive(Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub rounds: usize,
    pub running_avg_m: Option<f64>,
    pub final_avg_train_loss: f64,
    pub final_avg_test_accuracy: Option<f64>,
    pub wall_secs: f64,
    pub warnings: Vec<String>,
    pub metrics_csv: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem_bound: Option<BoundJson>,
}

#[derive(Serialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (n−1); `None` with fewer than two seeds.
    pub std: Option<f64>,
}

pub fn stats(values: &[f64]) -> Stats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n >= 2 {
        Some((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt())
    } else {
        None
    };
    Stats { mean, std }
}

#[derive(Serialize)]
pub struct Aggregate {
    pub running_avg_m: Option<Stats>,
    pub final_avg_train_loss: Stats,
    pub final_avg_test_accuracy: Option<Stats>,
}

#[derive(Serialize)]
pub struct SummaryFile {
    pub schema_version: u32,
    pub algorithm: String,
    pub spec: BTreeMap<String, String>,
    pub graph: GraphJson,
    pub consensus: ConsensusJson,
    pub seeds: Vec<SeedSummary>,
    pub aggregate: Aggregate,
}

#[derive(Serialize)]
pub struct SweepRow {
    pub n_workers: usize,
    /// Rounds to reach the threshold per seed; `None` = never reached.
    pub rounds_per_seed: Vec<Option<usize>>,
    /// Median over the seeds that reached the threshold.
    pub median_rounds: Option<f64>,
    /// `median(smallest N) / median(this N)`; 1.0 on the base row.
    pub speedup: Option<f64>,
}

#[derive(Serialize)]
pub struct SweepFile {
    pub schema_version: u32,
    pub epsilon: f64,
    pub field: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

#[derive(Serialize)]
pub struct GeneralizeSeed {
    pub seed: u64,
    pub metric: String,
    pub learned_mean: f64,
    pub random_mean: f64,
    pub learned_per_worker: Vec<f64>,
    pub random_per_worker: Vec<f64>,
}

#[derive(Serialize)]
pub struct GeneralizeFile {
    pub schema_version: u32,
    pub new_workers: usize,
    pub head_steps: usize,
    pub head_alpha: f64,
    pub seeds: Vec<GeneralizeSeed>,
}
