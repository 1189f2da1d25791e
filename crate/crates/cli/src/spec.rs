//! Experiment spec files: flat `key = value` lines with dotted section
//! prefixes, `#` comments, order-independent. The grammar is documented in
//! the README; unknown keys are hard errors so typos cannot silently change
//! an experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use deprl_core::engine::{ModelSpec, RunConfig, Schedule};
use deprl_core::metrics::HeadGradMode;
use deprl_core::model::{LossKind, ReprShape};

/// Parse/validation failure with position information.
#[derive(Debug)]
pub struct SpecError {
    pub line: Option<usize>,
    pub field: Option<String>,
    pub msg: String,
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spec error")?;
        if let Some(line) = self.line {
            write!(f, " at line {line}")?;
        }
        if let Some(field) = &self.field {
            write!(f, " (field `{field}`)")?;
        }
        write!(f, ": {}", self.msg)
    }
}

impl SpecError {
    fn new(line: Option<usize>, field: Option<&str>, msg: impl Into<String>) -> SpecError {
        SpecError {
            line,
            field: field.map(str::to_string),
            msg: msg.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Deprl,
    Dpsgd,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Deprl => "deprl",
            Algorithm::Dpsgd => "dpsgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySpec {
    Ring,
    Complete,
    Random { edge_prob: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    Planted {
        d: usize,
        z: usize,
        samples_per_worker: usize,
        noise_std: f64,
        heterogeneity: f64,
        /// 0 = regression targets.
        classes: usize,
        /// Regression target dimension (ignored for classification).
        target_dim: usize,
    },
    ShardFile {
        path: PathBuf,
    },
}

/// User-supplied theory constants enabling the bound evaluation in the
/// summary; `estimate = true` probes them from the final states instead.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConstantsSpec {
    pub lipschitz: f64,
    pub sigma: f64,
    pub varsigma: f64,
    pub fstar: f64,
    pub estimate: bool,
}

impl ConstantsSpec {
    pub fn user_supplied(&self) -> bool {
        self.lipschitz > 0.0
    }
    pub fn active(&self) -> bool {
        self.user_supplied() || self.estimate
    }
}

/// A fully validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub topology: TopologySpec,
    pub task: TaskSpec,
    pub model_repr: ReprShape,
    pub run: RunParams,
    pub constants: ConstantsSpec,
}

/// The `run.*` section before it is bound to a worker count and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunParams {
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub tau: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub metrics_stride: usize,
    pub head_grad_mode: HeadGradMode,
    pub shared_head_init: bool,
    pub lipschitz_hint: Option<f64>,
}

impl ExperimentSpec {
    /// Head output dimension implied by the task.
    pub fn out_dim(&self) -> Option<usize> {
        match &self.task {
            TaskSpec::Planted {
                classes,
                target_dim,
                ..
            } => Some(if *classes > 0 { *classes } else { *target_dim }),
            TaskSpec::ShardFile { .. } => None, // read from the file
        }
    }

    /// Bind the spec to a concrete engine configuration.
    pub fn run_config(&self, seed: u64, out_dim: usize, threads: usize) -> RunConfig {
        RunConfig {
            alpha: self.run.alpha,
            beta: self.run.beta,
            tau: self.run.tau,
            rounds: self.run.rounds,
            batch_size: self.run.batch_size,
            loss: self.run.loss,
            schedule: self.run.schedule,
            seed,
            model: ModelSpec {
                repr: self.model_repr,
                out_dim,
            },
            metrics_stride: self.run.metrics_stride,
            head_grad_mode: self.run.head_grad_mode,
            shared_head_init: self.run.shared_head_init,
            lipschitz_hint: self.run.lipschitz_hint,
            threads,
        }
    }

    /// Re-serialize to the text grammar; `parse(to_text(s)) == s`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "schema_version = {}\n",
            deprl_core::SCHEMA_VERSION
        ));
        out.push_str(&format!("algorithm = {}\n", self.algorithm.as_str()));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        out.push_str(&format!("topology.workers = {}\n", self.workers));
        match &self.topology {
            TopologySpec::Ring => out.push_str("topology.kind = ring\n"),
            TopologySpec::Complete => out.push_str("topology.kind = complete\n"),
            TopologySpec::Random { edge_prob } => {
                out.push_str("topology.kind = random\n");
                out.push_str(&format!("topology.edge_prob = {edge_prob}\n"));
            }
        }
        match &self.task {
            TaskSpec::Planted {
                d,
                z,
                samples_per_worker,
                noise_std,
                heterogeneity,
                classes,
                target_dim,
            } => {
                out.push_str("task.kind = planted\n");
                out.push_str(&format!("task.d = {d}\n"));
                out.push_str(&format!("task.z = {z}\n"));
                out.push_str(&format!("task.samples_per_worker = {samples_per_worker}\n"));
                out.push_str(&format!("task.noise_std = {noise_std}\n"));
                out.push_str(&format!("task.heterogeneity = {heterogeneity}\n"));
                out.push_str(&format!("task.classes = {classes}\n"));
                out.push_str(&format!("task.target_dim = {target_dim}\n"));
            }
            TaskSpec::ShardFile { path } => {
                out.push_str("task.kind = shard-file\n");
                out.push_str(&format!("task.path = {}\n", path.display()));
            }
        }
        match self.model_repr {
            ReprShape::Linear { z, .. } => {
                out.push_str("model.repr = linear\n");
                out.push_str(&format!("model.z = {z}\n"));
            }
            ReprShape::OneHiddenTanh { h, z, .. } => {
                out.push_str("model.repr = one-hidden\n");
                out.push_str(&format!("model.z = {z}\n"));
                out.push_str(&format!("model.hidden = {h}\n"));
            }
        }
        out.push_str(&format!("run.loss = {}\n", self.run.loss.as_str()));
        out.push_str(&format!("run.alpha = {}\n", self.run.alpha));
        out.push_str(&format!("run.beta = {}\n", self.run.beta));
        out.push_str(&format!("run.tau = {}\n", self.run.tau));
        out.push_str(&format!("run.rounds = {}\n", self.run.rounds));
        out.push_str(&format!("run.batch_size = {}\n", self.run.batch_size));
        match self.run.schedule {
            Schedule::Constant => out.push_str("run.schedule = constant\n"),
            Schedule::Decay { gamma } => {
                out.push_str("run.schedule = decay\n");
                out.push_str(&format!("run.decay_gamma = {gamma}\n"));
            }
            Schedule::Corollary => out.push_str("run.schedule = corollary\n"),
        }
        out.push_str(&format!(
            "run.metrics_stride = {}\n",
            self.run.metrics_stride
        ));
        out.push_str(&format!(
            "run.head_grad_mode = {}\n",
            match self.run.head_grad_mode {
                HeadGradMode::MeanOfGrads => "mean-of-grads",
                HeadGradMode::MeanOfSquaredNorms => "mean-of-squared-norms",
            }
        ));
        out.push_str(&format!(
            "run.shared_head_init = {}\n",
            self.run.shared_head_init
        ));
        out.push_str(&format!(
            "run.lipschitz = {}\n",
            self.run.lipschitz_hint.unwrap_or(0.0)
        ));
        if self.constants.active() {
            out.push_str(&format!(
                "constants.lipschitz = {}\n",
                self.constants.lipschitz
            ));
            out.push_str(&format!("constants.sigma = {}\n", self.constants.sigma));
            out.push_str(&format!(
                "constants.varsigma = {}\n",
                self.constants.varsigma
            ));
            out.push_str(&format!("constants.fstar = {}\n", self.constants.fstar));
            out.push_str(&format!(
                "constants.estimate = {}\n",
                self.constants.estimate
            ));
        }
        out
    }

    /// Echo of the configuration as ordered key/value pairs for the JSON
    /// summary.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.to_text()
            .lines()
            .filter_map(|l| {
                let (k, v) = l.split_once(" = ")?;
                Some((k.to_string(), v.to_string()))
            })
            .collect()
    }
}

const KNOWN_KEYS: &[&str] = &[
    "schema_version",
    "algorithm",
    "seeds",
    "topology.kind",
    "topology.workers",
    "topology.edge_prob",
    "task.kind",
    "task.path",
    "task.d",
    "task.z",
    "task.samples_per_worker",
    "task.noise_std",
    "task.heterogeneity",
    "task.classes",
    "task.target_dim",
    "model.repr",
    "model.z",
    "model.hidden",
    "run.loss",
    "run.alpha",
    "run.beta",
    "run.tau",
    "run.rounds",
    "run.batch_size",
    "run.schedule",
    "run.decay_gamma",
    "run.metrics_stride",
    "run.head_grad_mode",
    "run.shared_head_init",
    "run.lipschitz",
    "constants.lipschitz",
    "constants.sigma",
    "constants.varsigma",
    "constants.fstar",
    "constants.estimate",
];

struct RawSpec {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawSpec {
    fn get(&self, key: &str) -> Option<&(usize, String)> {
        self.entries.get(key)
    }

    fn required(&self, key: &str) -> Result<&(usize, String), SpecError> {
        self.get(key)
            .ok_or_else(|| SpecError::new(None, Some(key), "missing required field"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, SpecError> {
        let (line, value) = self.required(key)?;
        value.parse::<T>().map_err(|_| {
            SpecError::new(
                Some(*line),
                Some(key),
                format!("cannot parse `{value}` as {}", std::any::type_name::<T>()),
            )
        })
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, SpecError> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse(key),
        }
    }
}

/// Parse a spec from text. `base_dir` anchors relative file references.
pub fn parse_spec(text: &str, base_dir: &Path) -> Result<ExperimentSpec, SpecError> {
    let mut entries = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SpecError::new(
                Some(line_no),
                None,
                format!("expected `key = value`, got `{raw_line}`"),
            ));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(SpecError::new(Some(line_no), Some(&key), "unknown field"));
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(SpecError::new(Some(line_no), Some(&key), "duplicate field"));
        }
    }
    let raw = RawSpec { entries };

    let schema: u32 = raw.parse_or("schema_version", deprl_core::SCHEMA_VERSION)?;
    if schema != deprl_core::SCHEMA_VERSION {
        let (line, _) = raw.required("schema_version")?;
        return Err(SpecError::new(
            Some(*line),
            Some("schema_version"),
            format!("unsupported schema version {schema}"),
        ));
    }

    let (alg_line, alg) = raw.required("algorithm")?;
    let algorithm = match alg.as_str() {
        "deprl" => Algorithm::Deprl,
        "dpsgd" => Algorithm::Dpsgd,
        other => {
            return Err(SpecError::new(
                Some(*alg_line),
                Some("algorithm"),
                format!("unknown algorithm `{other}` (expected deprl or dpsgd)"),
            ))
        }
    };

    let (seeds_line, seeds_raw) = raw.required("seeds")?;
    let mut seeds = Vec::new();
    for tok in seeds_raw.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        seeds.push(tok.parse::<u64>().map_err(|_| {
            SpecError::new(
                Some(*seeds_line),
                Some("seeds"),
                format!("bad seed `{tok}`"),
            )
        })?);
    }
    if seeds.is_empty() {
        return Err(SpecError::new(
            Some(*seeds_line),
            Some("seeds"),
            "at least one seed required",
        ));
    }

    let workers: usize = raw.parse("topology.workers")?;
    let (topo_line, topo) = raw.required("topology.kind")?;
    let topology = match topo.as_str() {
        "ring" => TopologySpec::Ring,
        "complete" => TopologySpec::Complete,
        "random" => TopologySpec::Random {
            edge_prob: raw.parse("topology.edge_prob")?,
        },
        other => {
            return Err(SpecError::new(
                Some(*topo_line),
                Some("topology.kind"),
                format!("unknown topology `{other}`"),
            ))
        }
    };

    let (task_line, task_kind) = raw.required("task.kind")?;
    let task = match task_kind.as_str() {
        "planted" => TaskSpec::Planted {
            d: raw.parse("task.d")?,
            z: raw.parse("task.z")?,
            samples_per_worker: raw.parse("task.samples_per_worker")?,
            noise_std: raw.parse_or("task.noise_std", 0.0)?,
            heterogeneity: raw.parse_or("task.heterogeneity", 0.0)?,
            classes: raw.parse_or("task.classes", 0)?,
            target_dim: raw.parse_or("task.target_dim", 1)?,
        },
        "shard-file" => {
            let (line, p) = raw.required("task.path")?;
            let path = base_dir.join(p);
            if !path.is_file() {
                return Err(SpecError::new(
                    Some(*line),
                    Some("task.path"),
                    format!("file not found: {}", path.display()),
                ));
            }
            TaskSpec::ShardFile { path }
        }
        other => {
            return Err(SpecError::new(
                Some(*task_line),
                Some("task.kind"),
                format!("unknown task kind `{other}`"),
            ))
        }
    };

    let model_d = match &task {
        TaskSpec::Planted { d, .. } => *d,
        // Placeholder; rebound from the shard-file header at load time.
        TaskSpec::ShardFile { .. } => usize::MAX,
    };
    let model_z: usize = raw.parse("model.z")?;
    let repr_kind: String = raw.parse_or("model.repr", "linear".to_string())?;
    let model_repr = match repr_kind.as_str() {
        "linear" => ReprShape::Linear {
            d: model_d,
            z: model_z,
        },
        "one-hidden" => ReprShape::OneHiddenTanh {
            d: model_d,
            h: raw.parse("model.hidden")?,
            z: model_z,
        },
        other => {
            let (line, _) = raw.required("model.repr")?;
            return Err(SpecError::new(
                Some(*line),
                Some("model.repr"),
                format!("unknown representation kind `{other}`"),
            ));
        }
    };

    let (loss_line, loss_raw) = raw.required("run.loss")?;
    let loss: LossKind = loss_raw
        .parse()
        .map_err(|e: String| SpecError::new(Some(*loss_line), Some("run.loss"), e))?;

    let (sched, alpha_required) = match raw.parse_or("run.schedule", "constant".to_string())? {
        s if s == "constant" => (Schedule::Constant, true),
        s if s == "decay" => (
            Schedule::Decay {
                gamma: raw.parse("run.decay_gamma")?,
            },
            true,
        ),
        s if s == "corollary" => (Schedule::Corollary, false),
        other => {
            let (line, _) = raw.required("run.schedule")?;
            return Err(SpecError::new(
                Some(*line),
                Some("run.schedule"),
                format!("unknown schedule `{other}`"),
            ));
        }
    };
    let alpha = if alpha_required {
        raw.parse("run.alpha")?
    } else {
        raw.parse_or("run.alpha", 0.0)?
    };
    let beta = if alpha_required {
        raw.parse("run.beta")?
    } else {
        raw.parse_or("run.beta", 0.0)?
    };

    let head_grad_mode = match raw
        .parse_or("run.head_grad_mode", "mean-of-grads".to_string())?
        .as_str()
    {
        "mean-of-grads" => HeadGradMode::MeanOfGrads,
        "mean-of-squared-norms" => HeadGradMode::MeanOfSquaredNorms,
        other => {
            let (line, _) = raw.required("run.head_grad_mode")?;
            return Err(SpecError::new(
                Some(*line),
                Some("run.head_grad_mode"),
                format!("unknown mode `{other}`"),
            ));
        }
    };

    let lipschitz: f64 = raw.parse_or("run.lipschitz", 0.0)?;
    let run = RunParams {
        loss,
        alpha,
        beta,
        tau: raw.parse_or("run.tau", 1)?,
        rounds: raw.parse("run.rounds")?,
        batch_size: raw.parse("run.batch_size")?,
        schedule: sched,
        metrics_stride: raw.parse_or("run.metrics_stride", 1)?,
        head_grad_mode,
        shared_head_init: raw.parse_or("run.shared_head_init", false)?,
        lipschitz_hint: (lipschitz > 0.0).then_some(lipschitz),
    };

    let constants = ConstantsSpec {
        lipschitz: raw.parse_or("constants.lipschitz", 0.0)?,
        sigma: raw.parse_or("constants.sigma", 0.0)?,
        varsigma: raw.parse_or("constants.varsigma", 0.0)?,
        fstar: raw.parse_or("constants.fstar", 0.0)?,
        estimate: raw.parse_or("constants.estimate", false)?,
    };

    let spec = ExperimentSpec {
        algorithm,
        seeds,
        workers,
        topology,
        task,
        model_repr,
        run,
        constants,
    };
    validate(&spec)?;
    Ok(spec)
}

fn validate(spec: &ExperimentSpec) -> Result<(), SpecError> {
    let field = |f: &str, msg: String| SpecError::new(None, Some(f), msg);
    if spec.workers == 0 {
        return Err(field("topology.workers", "must be positive".into()));
    }
    if let TopologySpec::Random { edge_prob } = spec.topology {
        if edge_prob.is_nan() || edge_prob <= 0.0 || edge_prob > 1.0 {
            return Err(field(
                "topology.edge_prob",
                format!("must be in (0, 1], got {edge_prob}"),
            ));
        }
    }
    if let TaskSpec::Planted {
        d,
        z,
        samples_per_worker,
        noise_std,
        heterogeneity,
        classes,
        target_dim,
        ..
    } = &spec.task
    {
        if z > d {
            return Err(field(
                "task.z",
                format!("must satisfy z ≤ d, got z={z} d={d}"),
            ));
        }
        if *samples_per_worker < 2 {
            return Err(field(
                "task.samples_per_worker",
                "must be at least 2".into(),
            ));
        }
        if *noise_std < 0.0 {
            return Err(field("task.noise_std", "must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(heterogeneity) {
            return Err(field("task.heterogeneity", "must be in [0, 1]".into()));
        }
        match spec.run.loss {
            LossKind::SoftmaxCrossEntropy if *classes < 2 => {
                return Err(field(
                    "task.classes",
                    "cross-entropy needs a classification task (classes ≥ 2)".into(),
                ));
            }
            LossKind::Squared if *classes > 0 => {
                return Err(field(
                    "run.loss",
                    "squared loss needs a regression task (classes = 0)".into(),
                ));
            }
            _ => {}
        }
        if *classes == 0 && *target_dim == 0 {
            return Err(field("task.target_dim", "must be positive".into()));
        }
        if spec.model_repr.output_dim() > *d {
            return Err(field("model.z", "must satisfy z ≤ d".into()));
        }
    }
    if spec.run.alpha < 0.0 || !spec.run.alpha.is_finite() {
        return Err(field("run.alpha", "must be finite and non-negative".into()));
    }
    if spec.run.beta < 0.0 || !spec.run.beta.is_finite() {
        return Err(field("run.beta", "must be finite and non-negative".into()));
    }
    if spec.run.tau == 0 {
        return Err(field("run.tau", "must be at least 1".into()));
    }
    if spec.run.batch_size == 0 {
        return Err(field("run.batch_size", "must be at least 1".into()));
    }
    if spec.run.metrics_stride == 0 {
        return Err(field("run.metrics_stride", "must be at least 1".into()));
    }
    if let Schedule::Decay { gamma } = spec.run.schedule {
        if gamma.is_nan() || gamma <= 0.0 || gamma > 1.0 {
            return Err(field("run.decay_gamma", "must be in (0, 1]".into()));
        }
    }
    Ok(())
}
