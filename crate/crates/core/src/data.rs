//! Synthetic heterogeneous multi-worker tasks, non-IID Dirichlet
//! partitioning, and shard persistence.
//!
//! The planted task is the desk-scale testbed: a ground-truth linear
//! representation with orthonormal rows is shared by every worker, while
//! per-worker ground-truth heads interpolate between one common head
//! (`heterogeneity = 0`) and fully independent heads (`heterogeneity = 1`).
//! At zero noise the ground truth interpolates the data exactly, so optima
//! and stationary points are known in closed form.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::model::{ExampleSet, Head, LossKind, Representation, TargetRef};
use crate::rng::{self, phase};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Shard
// ---------------------------------------------------------------------------

/// One worker's local data: disjoint train and test example sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard<T> {
    pub worker_id: usize,
    pub train: ExampleSet<T>,
    pub test: ExampleSet<T>,
    /// Per-class train counts; `None` for regression targets.
    pub class_histogram: Option<Vec<usize>>,
}

impl<T: Scalar> Shard<T> {
    fn from_sets(worker_id: usize, train: ExampleSet<T>, test: ExampleSet<T>) -> Shard<T> {
        let class_histogram = train.class_histogram();
        Shard {
            worker_id,
            train,
            test,
            class_histogram,
        }
    }
}

// ---------------------------------------------------------------------------
// Planted task
// ---------------------------------------------------------------------------

/// What the planted heads map to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlantedOutput {
    /// Real-valued targets of the given dimension (squared loss).
    Regression { dim: usize },
    /// Labels are the argmax of the planted logits (cross-entropy loss).
    Classification { classes: usize },
}

impl PlantedOutput {
    fn out_dim(&self) -> usize {
        match *self {
            PlantedOutput::Regression { dim } => dim,
            PlantedOutput::Classification { classes } => classes,
        }
    }
}

/// Parameters of [`generate_planted`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedSpec {
    pub n_workers: usize,
    pub d: usize,
    pub z: usize,
    pub samples_per_worker: usize,
    pub noise_std: f64,
    /// 0 = every worker has the same optimal head; 1 = independent heads.
    pub heterogeneity: f64,
    pub seed: u64,
    pub output: PlantedOutput,
}

/// A synthetic task with known ground truth.
#[derive(Clone, Debug)]
pub struct PlantedTask<T> {
    pub phi_star: Representation<T>,
    pub theta_stars: Vec<Head<T>>,
    pub noise_std: f64,
    pub shards: Vec<Shard<T>>,
    pub spec: PlantedSpec,
}

impl<T: Scalar> PlantedTask<T> {
    /// Mean full-train loss at the planted parameters; with zero noise and a
    /// regression output this is exactly zero.
    pub fn ground_truth_train_loss(&self, kind: LossKind) -> Result<f64> {
        let mut acc = 0.0;
        for (shard, theta) in self.shards.iter().zip(self.theta_stars.iter()) {
            acc += crate::model::loss(&self.phi_star, theta, shard.train.full(), kind)?.as_f64();
        }
        Ok(acc / self.shards.len() as f64)
    }
}

fn gaussian_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    (0..len).map(|_| T::of_f64(rng::std_normal(rng))).collect()
}

/// Random `z×d` matrix with orthonormal rows (Gram–Schmidt on Gaussian rows).
fn orthonormal_rows<T: Scalar>(z: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(z);
    while rows.len() < z {
        let mut v = gaussian_vec::<T>(rng, d);
        for prev in &rows {
            let proj = dot(&v, prev);
            for (vi, &pi) in v.iter_mut().zip(prev.iter()) {
                *vi -= proj * pi;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm.as_f64() < 1e-8 {
            continue; // essentially-degenerate draw, redo this row
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        rows.push(v);
    }
    Matrix::from_rows(&rows)
}

fn planted_head<T: Scalar>(
    spec: &PlantedSpec,
    theta_mean: &Head<T>,
    worker: u64,
    seed: u64,
) -> Head<T> {
    let c = spec.output.out_dim();
    let mut rng = rng::substream(seed, worker, 0, phase::PLANT_HEAD_NOISE);
    let mut xi = Head::zeros(c, spec.z);
    for v in xi.weight.data_mut() {
        *v = T::of_f64(rng::std_normal(&mut rng));
    }
    for v in xi.bias.iter_mut() {
        *v = T::of_f64(rng::std_normal(&mut rng));
    }
    let h = T::of_f64(spec.heterogeneity);
    let mut theta = Head::zeros(c, spec.z);
    theta.axpy(T::one() - h, theta_mean);
    theta.axpy(h, &xi);
    theta
}

fn planted_shard<T: Scalar>(
    spec: &PlantedSpec,
    phi_star: &Representation<T>,
    theta_star: &Head<T>,
    worker_id: usize,
    worker_key: u64,
    seed: u64,
) -> Result<Shard<T>> {
    let mut x_rng = rng::substream(seed, worker_key, 0, phase::PLANT_INPUTS);
    let mut e_rng = rng::substream(seed, worker_key, 0, phase::PLANT_TARGET_NOISE);
    let m = spec.samples_per_worker;

    let mut all = match spec.output {
        PlantedOutput::Regression { dim } => ExampleSet::new_regression(spec.d, dim),
        PlantedOutput::Classification { classes } => {
            ExampleSet::new_classification(spec.d, classes)
        }
    };
    for _ in 0..m {
        let x = gaussian_vec::<T>(&mut x_rng, spec.d);
        let mut out = crate::model::forward(phi_star, theta_star, &x)?;
        if spec.noise_std > 0.0 {
            let std = T::of_f64(spec.noise_std);
            for o in out.iter_mut() {
                *o += std * T::of_f64(rng::std_normal(&mut e_rng));
            }
        }
        match spec.output {
            PlantedOutput::Regression { .. } => all.push_vector(&x, &out),
            PlantedOutput::Classification { .. } => {
                let mut best = 0;
                for (c, &v) in out.iter().enumerate().skip(1) {
                    if v > out[best] {
                        best = c;
                    }
                }
                all.push_class(&x, best);
            }
        }
    }

    let (train_idx, test_idx) = split_80_20(&all);
    Ok(Shard::from_sets(
        worker_id,
        all.select(&train_idx),
        all.select(&test_idx),
    ))
}

/// 80/20 split, stratified by class for classification sets. For each group
/// the last `count/5` examples become test, so the split is a deterministic
/// function of example order.
fn split_80_20<T: Scalar>(set: &ExampleSet<T>) -> (Vec<usize>, Vec<usize>) {
    let groups: Vec<Vec<usize>> = if set.is_classification() {
        let mut by_class = vec![Vec::new(); set.target_dim()];
        for i in 0..set.len() {
            if let TargetRef::Class(l) = set.target(i) {
                by_class[l].push(i);
            }
        }
        by_class
    } else {
        vec![(0..set.len()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in &groups {
        let n_test = group.len() / 5;
        let n_train = group.len() - n_test;
        train.extend_from_slice(&group[..n_train]);
        test.extend_from_slice(&group[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Generate a planted task: orthonormal ground-truth representation, heads
/// blended between a shared mean and per-worker noise, Gaussian inputs,
/// targets from the planted predictor plus Gaussian observation noise,
/// 80/20 train/test. Deterministic in `spec.seed`.
pub fn generate_planted<T: Scalar>(spec: &PlantedSpec) -> Result<PlantedTask<T>> {
    if spec.z > spec.d {
        return Err(Error::invalid(format!(
            "planted representation must compress: z={} > d={}",
            spec.z, spec.d
        )));
    }
    if spec.z == 0 || spec.d == 0 || spec.n_workers == 0 {
        return Err(Error::invalid(
            "dimensions and worker count must be positive",
        ));
    }
    if spec.samples_per_worker < 2 {
        return Err(Error::invalid("need at least 2 samples per worker"));
    }
    if !(0.0..=1.0).contains(&spec.heterogeneity) {
        return Err(Error::invalid("heterogeneity must be in [0, 1]"));
    }
    if spec.noise_std < 0.0 {
        return Err(Error::invalid("noise_std must be non-negative"));
    }

    let mut repr_rng = rng::substream(spec.seed, rng::SHARED, 0, phase::PLANT_REPR);
    let phi_star = Representation::linear(orthonormal_rows(spec.z, spec.d, &mut repr_rng))?;

    let c = spec.output.out_dim();
    let mut mean_rng = rng::substream(spec.seed, rng::SHARED, 0, phase::PLANT_HEAD_MEAN);
    let mut theta_mean = Head::zeros(c, spec.z);
    for v in theta_mean.weight.data_mut() {
        *v = T::of_f64(rng::std_normal(&mut mean_rng));
    }
    for v in theta_mean.bias.iter_mut() {
        *v = T::of_f64(rng::std_normal(&mut mean_rng));
    }

    let mut theta_stars = Vec::with_capacity(spec.n_workers);
    let mut shards = Vec::with_capacity(spec.n_workers);
    for i in 0..spec.n_workers {
        let theta = planted_head(spec, &theta_mean, i as u64, spec.seed);
        shards.push(planted_shard(
            spec, &phi_star, &theta, i, i as u64, spec.seed,
        )?);
        theta_stars.push(theta);
    }

    Ok(PlantedTask {
        phi_star,
        theta_stars,
        noise_std: spec.noise_std,
        shards,
        spec: *spec,
    })
}

/// Fresh workers for an existing planted task: the ground-truth
/// representation is reused, heads and data are drawn anew from `seed`.
/// Worker ids continue after the original cohort.
pub fn plant_new_workers<T: Scalar>(
    task: &PlantedTask<T>,
    n_new: usize,
    seed: u64,
) -> Result<PlantedTask<T>> {
    if n_new == 0 {
        return Err(Error::invalid("need at least one new worker"));
    }
    let spec = PlantedSpec {
        n_workers: n_new,
        seed,
        ..task.spec
    };
    let mut mean_rng = rng::substream(seed, rng::SHARED, 0, phase::PLANT_HEAD_MEAN);
    let c = spec.output.out_dim();
    let mut theta_mean = Head::zeros(c, spec.z);
    for v in theta_mean.weight.data_mut() {
        *v = T::of_f64(rng::std_normal(&mut mean_rng));
    }
    for v in theta_mean.bias.iter_mut() {
        *v = T::of_f64(rng::std_normal(&mut mean_rng));
    }

    let offset = task.spec.n_workers;
    let mut theta_stars = Vec::with_capacity(n_new);
    let mut shards = Vec::with_capacity(n_new);
    for i in 0..n_new {
        let theta = planted_head(&spec, &theta_mean, i as u64, seed);
        shards.push(planted_shard(
            &spec,
            &task.phi_star,
            &theta,
            offset + i,
            i as u64,
            seed,
        )?);
        theta_stars.push(theta);
    }
    Ok(PlantedTask {
        phi_star: task.phi_star.clone(),
        theta_stars,
        noise_std: spec.noise_std,
        shards,
        spec,
    })
}

// ---------------------------------------------------------------------------
// Dirichlet partition
// ---------------------------------------------------------------------------

/// Partition a labeled set across workers with per-class proportions drawn
/// from `Dir(π, …, π)`; smaller `π` means more skew.
///
/// Fractional allocations are rounded by largest remainder (ties to the lower
/// worker index), every worker is guaranteed at least one train example by
/// moving one from the largest shard, and the per-worker 80/20 split happens
/// after allocation, so the total example count is conserved exactly.
pub fn dirichlet_partition<T: Scalar>(
    examples: &ExampleSet<T>,
    n_workers: usize,
    pi: f64,
    seed: u64,
) -> Result<Vec<Shard<T>>> {
    if n_workers < 2 {
        return Err(Error::invalid("partition needs at least 2 workers"));
    }
    if examples.len() < n_workers {
        return Err(Error::invalid(format!(
            "{} examples cannot cover {} workers",
            examples.len(),
            n_workers
        )));
    }
    if pi.is_nan() || pi <= 0.0 {
        return Err(Error::invalid("Dirichlet parameter must be positive"));
    }

    // Group example indices by class; a regression set is a single class.
    let groups: Vec<Vec<usize>> = if examples.is_classification() {
        let mut by_class = vec![Vec::new(); examples.target_dim()];
        for i in 0..examples.len() {
            if let TargetRef::Class(l) = examples.target(i) {
                by_class[l].push(i);
            }
        }
        if by_class.iter().any(|g| g.is_empty()) {
            return Err(Error::invalid("every class must be nonempty"));
        }
        by_class
    } else {
        vec![(0..examples.len()).collect()]
    };

    let mut per_worker: Vec<Vec<usize>> = vec![Vec::new(); n_workers];
    for (class, group) in groups.iter().enumerate() {
        let mut rng = rng::substream(seed, rng::SHARED, class as u64, phase::PARTITION);
        let props = dirichlet_draw(&mut rng, n_workers, pi);
        let counts = largest_remainder(&props, group.len());

        // Shuffle the class's examples, then hand out contiguous slices.
        let mut shuffled = group.clone();
        fisher_yates(&mut shuffled, &mut rng);
        let mut cursor = 0;
        for (w, &count) in counts.iter().enumerate() {
            per_worker[w].extend_from_slice(&shuffled[cursor..cursor + count]);
            cursor += count;
        }
    }

    // Repair pass: no worker may end up empty. Move one example out of the
    // largest shard, taking from its lowest-index class first.
    while let Some(empty) = per_worker.iter().position(|w| w.is_empty()) {
        let donor = (0..n_workers)
            .max_by_key(|&w| (per_worker[w].len(), usize::MAX - w))
            .expect("nonempty worker list");
        let pick = (0..per_worker[donor].len())
            .min_by_key(|&k| class_of(examples, per_worker[donor][k]))
            .expect("donor has examples");
        let moved = per_worker[donor].swap_remove(pick);
        per_worker[empty].push(moved);
    }

    let mut shards = Vec::with_capacity(n_workers);
    for (w, mut idx) in per_worker.into_iter().enumerate() {
        idx.sort_unstable();
        let local = examples.select(&idx);
        let (train_idx, test_idx) = split_80_20(&local);
        shards.push(Shard::from_sets(
            w,
            local.select(&train_idx),
            local.select(&test_idx),
        ));
    }
    Ok(shards)
}

fn class_of<T: Scalar>(examples: &ExampleSet<T>, i: usize) -> usize {
    match examples.target(i) {
        TargetRef::Class(l) => l,
        TargetRef::Vector(_) => 0,
    }
}

/// One draw from `Dir(π, …, π)` via normalized Gamma variates.
fn dirichlet_draw(rng: &mut ChaCha8Rng, n: usize, pi: f64) -> Vec<f64> {
    let gamma = Gamma::new(pi, 1.0).expect("positive shape");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // all draws underflowed (extreme π); fall back to uniform
        return vec![1.0 / n as f64; n];
    }
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Apportion `total` items to the given proportions: floor everything, then
/// hand the leftovers to the largest fractional parts, lower index first.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = props[a] * total as f64 - counts[a] as f64;
        let fb = props[b] * total as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..(total - assigned) {
        counts[order[k % props.len()]] += 1;
    }
    counts
}

fn fisher_yates(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Shard files
// ---------------------------------------------------------------------------
//
// Plain text, one value per token, `Display`-formatted floats (shortest
// round-trip decimal, so load∘save is bit-exact):
//
//   deprl-shards v1
//   workers <N> input_dim <d> targets <classes|vectors> <c>
//   worker <id> train <m_train> test <m_test>
//   <d input values> <target>          (m_train lines, then m_test lines)
//   ...
//
// For `classes` the target is a single integer label; for `vectors` it is
// `c` float components.

const SHARD_MAGIC: &str = "deprl-shards v1";

/// Write shards to `path`. The set must be nonempty and homogeneous.
pub fn save_shards<T: Scalar>(shards: &[Shard<T>], path: &Path) -> Result<()> {
    if shards.is_empty() {
        return Err(Error::invalid("no shards to save"));
    }
    let d = shards[0].train.input_dim();
    let classification = shards[0].train.is_classification();
    let c = shards[0].train.target_dim();

    let mut out = String::new();
    out.push_str(SHARD_MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "workers {} input_dim {} targets {} {}\n",
        shards.len(),
        d,
        if classification { "classes" } else { "vectors" },
        c
    ));
    for shard in shards {
        out.push_str(&format!(
            "worker {} train {} test {}\n",
            shard.worker_id,
            shard.train.len(),
            shard.test.len()
        ));
        for set in [&shard.train, &shard.test] {
            for i in 0..set.len() {
                let mut line = String::new();
                for v in set.input(i) {
                    line.push_str(&format!("{v} "));
                }
                match set.target(i) {
                    TargetRef::Class(l) => line.push_str(&l.to_string()),
                    TargetRef::Vector(vs) => {
                        let parts: Vec<String> = vs.iter().map(|v| format!("{v}")).collect();
                        line.push_str(&parts.join(" "));
                    }
                }
                line.push('\n');
                out.push_str(&line);
            }
        }
    }

    let mut file = fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(out.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read shards back; exact inverse of [`save_shards`].
pub fn load_shards<T: Scalar>(path: &Path) -> Result<Vec<Shard<T>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, msg: &str| Error::MalformedFile {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };

    let n_lines = text.lines().count();
    let mut lines = text.lines().enumerate();
    let (ln, magic) = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
    if magic != SHARD_MAGIC {
        return Err(malformed(ln + 1, "bad magic line"));
    }
    let (ln, header) = lines.next().ok_or_else(|| malformed(2, "missing header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 7 || toks[0] != "workers" || toks[2] != "input_dim" || toks[4] != "targets" {
        return Err(malformed(ln + 1, "bad header"));
    }
    let n_workers: usize = toks[1]
        .parse()
        .map_err(|_| malformed(ln + 1, "bad worker count"))?;
    let d: usize = toks[3]
        .parse()
        .map_err(|_| malformed(ln + 1, "bad input_dim"))?;
    let classification = match toks[5] {
        "classes" => true,
        "vectors" => false,
        _ => return Err(malformed(ln + 1, "bad target kind")),
    };
    let c: usize = toks[6]
        .parse()
        .map_err(|_| malformed(ln + 1, "bad target dim"))?;

    let parse_val = |tok: &str, line: usize| -> Result<T> {
        tok.parse::<T>().map_err(|_| malformed(line, "bad float"))
    };

    let mut shards = Vec::with_capacity(n_workers);
    for _ in 0..n_workers {
        let (ln, wline) = lines
            .next()
            .ok_or_else(|| malformed(n_lines + 1, "truncated: missing worker header"))?;
        let toks: Vec<&str> = wline.split_whitespace().collect();
        if toks.len() != 6 || toks[0] != "worker" || toks[2] != "train" || toks[4] != "test" {
            return Err(malformed(ln + 1, "bad worker header"));
        }
        let worker_id: usize = toks[1].parse().map_err(|_| malformed(ln + 1, "bad id"))?;
        let m_train: usize = toks[3]
            .parse()
            .map_err(|_| malformed(ln + 1, "bad count"))?;
        let m_test: usize = toks[5]
            .parse()
            .map_err(|_| malformed(ln + 1, "bad count"))?;

        let mut sets = Vec::with_capacity(2);
        for count in [m_train, m_test] {
            let mut set = if classification {
                ExampleSet::new_classification(d, c)
            } else {
                ExampleSet::new_regression(d, c)
            };
            for _ in 0..count {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| malformed(n_lines + 1, "truncated: missing example row"))?;
                let toks: Vec<&str> = row.split_whitespace().collect();
                let expected = if classification { d + 1 } else { d + c };
                if toks.len() != expected {
                    return Err(malformed(ln + 1, "wrong number of values"));
                }
                let mut x = Vec::with_capacity(d);
                for tok in &toks[..d] {
                    x.push(parse_val(tok, ln + 1)?);
                }
                if classification {
                    let label: usize = toks[d]
                        .parse()
                        .map_err(|_| malformed(ln + 1, "bad label"))?;
                    if label >= c {
                        return Err(malformed(ln + 1, "label out of range"));
                    }
                    set.push_class(&x, label);
                } else {
                    let mut y = Vec::with_capacity(c);
                    for tok in &toks[d..] {
                        y.push(parse_val(tok, ln + 1)?);
                    }
                    set.push_vector(&x, &y);
                }
            }
            sets.push(set);
        }
        let test = sets.pop().expect("two sets");
        let train = sets.pop().expect("two sets");
        shards.push(Shard::from_sets(worker_id, train, test));
    }
    if lines.next().is_some() {
        return Err(malformed(n_lines, "trailing content after last shard"));
    }
    Ok(shards)
}

/// Convenience wrapper taking any path-like.
pub fn save_shards_to<T: Scalar>(shards: &[Shard<T>], path: impl Into<PathBuf>) -> Result<()> {
    save_shards(shards, &path.into())
}
