//! Shared representation φ, per-worker heads θ, losses, and their exact
//! analytic partial gradients.
//!
//! A worker's predictor is the composition `head ∘ representation`:
//! the representation maps `d`-dimensional inputs to a `z`-dimensional code
//! (`z ≤ d`), the head maps codes to `c` outputs (class logits or a
//! regression vector). The representation is the only thing workers ever
//! exchange; heads stay private.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{axpy_slice, sq_norm_slice, Matrix};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Representation
// ---------------------------------------------------------------------------

/// Shape descriptor for a representation, independent of the scalar type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprShape {
    /// Single linear map `z×d`.
    Linear { d: usize, z: usize },
    /// One hidden tanh layer: `d → h → z`.
    OneHiddenTanh { d: usize, h: usize, z: usize },
}

impl ReprShape {
    pub fn input_dim(&self) -> usize {
        match *self {
            ReprShape::Linear { d, .. } => d,
            ReprShape::OneHiddenTanh { d, .. } => d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            ReprShape::Linear { z, .. } => z,
            ReprShape::OneHiddenTanh { z, .. } => z,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            ReprShape::Linear { d, z } => z * d,
            ReprShape::OneHiddenTanh { d, h, z } => h * d + h + z * h + z,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        let z = self.output_dim();
        if z == 0 || d == 0 {
            return Err(Error::invalid("representation dimensions must be positive"));
        }
        if z > d {
            return Err(Error::invalid(format!(
                "representation must not expand: z={z} > d={d}"
            )));
        }
        if let ReprShape::OneHiddenTanh { h, .. } = *self {
            if h == 0 {
                return Err(Error::invalid("hidden width must be positive"));
            }
        }
        Ok(())
    }
}

/// Representation parameters. Flattening order is fixed (row-major per
/// matrix, matrices before their biases) and round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation<T> {
    Linear {
        /// `z×d` weight.
        weight: Matrix<T>,
    },
    OneHiddenTanh {
        /// `h×d` first layer.
        w1: Matrix<T>,
        /// Length `h`.
        b1: Vec<T>,
        /// `z×h` second layer.
        w2: Matrix<T>,
        /// Length `z`.
        b2: Vec<T>,
    },
}

impl<T: Scalar> Representation<T> {
    pub fn linear(weight: Matrix<T>) -> Result<Self> {
        let shape = ReprShape::Linear {
            d: weight.cols(),
            z: weight.rows(),
        };
        shape.validate()?;
        Ok(Representation::Linear { weight })
    }

    pub fn one_hidden_tanh(w1: Matrix<T>, b1: Vec<T>, w2: Matrix<T>, b2: Vec<T>) -> Result<Self> {
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return Err(Error::invalid("inconsistent hidden-layer shapes"));
        }
        let shape = ReprShape::OneHiddenTanh {
            d: w1.cols(),
            h: w1.rows(),
            z: w2.rows(),
        };
        shape.validate()?;
        Ok(Representation::OneHiddenTanh { w1, b1, w2, b2 })
    }

    pub fn zeros(shape: ReprShape) -> Result<Self> {
        shape.validate()?;
        Ok(match shape {
            ReprShape::Linear { d, z } => Representation::Linear {
                weight: Matrix::zeros(z, d),
            },
            ReprShape::OneHiddenTanh { d, h, z } => Representation::OneHiddenTanh {
                w1: Matrix::zeros(h, d),
                b1: vec![T::zero(); h],
                w2: Matrix::zeros(z, h),
                b2: vec![T::zero(); z],
            },
        })
    }

    /// Entries i.i.d. uniform on `[−1/√d, 1/√d]`.
    pub fn random_init(shape: ReprShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut repr = Self::zeros(shape)?;
        let bound = 1.0 / (shape.input_dim() as f64).sqrt();
        repr.for_each_param(|_| T::of_f64((2.0 * rng.random::<f64>() - 1.0) * bound));
        Ok(repr)
    }

    pub fn shape(&self) -> ReprShape {
        match self {
            Representation::Linear { weight } => ReprShape::Linear {
                d: weight.cols(),
                z: weight.rows(),
            },
            Representation::OneHiddenTanh { w1, w2, .. } => ReprShape::OneHiddenTanh {
                d: w1.cols(),
                h: w1.rows(),
                z: w2.rows(),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.shape().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.shape().output_dim()
    }

    pub fn param_len(&self) -> usize {
        self.shape().param_len()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_len());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<T>) {
        match self {
            Representation::Linear { weight } => out.extend_from_slice(weight.data()),
            Representation::OneHiddenTanh { w1, b1, w2, b2 } => {
                out.extend_from_slice(w1.data());
                out.extend_from_slice(b1);
                out.extend_from_slice(w2.data());
                out.extend_from_slice(b2);
            }
        }
    }

    pub fn from_flat(shape: ReprShape, flat: &[T]) -> Result<Self> {
        shape.validate()?;
        if flat.len() != shape.param_len() {
            return Err(Error::invalid(format!(
                "flat buffer has {} entries, shape needs {}",
                flat.len(),
                shape.param_len()
            )));
        }
        Ok(match shape {
            ReprShape::Linear { d, z } => Representation::Linear {
                weight: Matrix::from_flat(z, d, flat.to_vec()),
            },
            ReprShape::OneHiddenTanh { d, h, z } => {
                let (a, rest) = flat.split_at(h * d);
                let (b, rest) = rest.split_at(h);
                let (c, e) = rest.split_at(z * h);
                Representation::OneHiddenTanh {
                    w1: Matrix::from_flat(h, d, a.to_vec()),
                    b1: b.to_vec(),
                    w2: Matrix::from_flat(z, h, c.to_vec()),
                    b2: e.to_vec(),
                }
            }
        })
    }

    /// `self += a · other`. Both sides must have the same shape.
    pub fn axpy(&mut self, a: T, other: &Representation<T>) {
        match (self, other) {
            (Representation::Linear { weight }, Representation::Linear { weight: ow }) => {
                weight.axpy(a, ow);
            }
            (
                Representation::OneHiddenTanh { w1, b1, w2, b2 },
                Representation::OneHiddenTanh {
                    w1: o1,
                    b1: ob1,
                    w2: o2,
                    b2: ob2,
                },
            ) => {
                w1.axpy(a, o1);
                axpy_slice(b1, a, ob1);
                w2.axpy(a, o2);
                axpy_slice(b2, a, ob2);
            }
            _ => panic!("representation shape mismatch in axpy"),
        }
    }

    pub fn scale(&mut self, a: T) {
        self.for_each_param(|v| v * a);
    }

    pub fn sq_norm(&self) -> T {
        match self {
            Representation::Linear { weight } => weight.sq_norm(),
            Representation::OneHiddenTanh { w1, b1, w2, b2 } => {
                w1.sq_norm() + sq_norm_slice(b1) + w2.sq_norm() + sq_norm_slice(b2)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(|v| ok &= v.is_finite());
        ok
    }

    /// Code vector for one input: `B·x`, or `W2·tanh(W1·x + b1) + b2`.
    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dim {}, representation expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(match self {
            Representation::Linear { weight } => weight.matvec(x),
            Representation::OneHiddenTanh { w1, b1, w2, b2 } => {
                let mut a1 = w1.matvec(x);
                for (a, &b) in a1.iter_mut().zip(b1.iter()) {
                    *a = (*a + b).tanh();
                }
                let mut code = w2.matvec(&a1);
                for (c, &b) in code.iter_mut().zip(b2.iter()) {
                    *c += b;
                }
                code
            }
        })
    }

    fn for_each_param(&mut self, mut f: impl FnMut(T) -> T) {
        match self {
            Representation::Linear { weight } => {
                for v in weight.data_mut() {
                    *v = f(*v);
                }
            }
            Representation::OneHiddenTanh { w1, b1, w2, b2 } => {
                for v in w1.data_mut() {
                    *v = f(*v);
                }
                for v in b1.iter_mut() {
                    *v = f(*v);
                }
                for v in w2.data_mut() {
                    *v = f(*v);
                }
                for v in b2.iter_mut() {
                    *v = f(*v);
                }
            }
        }
    }

    fn visit_params(&self, mut f: impl FnMut(T)) {
        match self {
            Representation::Linear { weight } => weight.data().iter().for_each(|&v| f(v)),
            Representation::OneHiddenTanh { w1, b1, w2, b2 } => {
                w1.data().iter().for_each(|&v| f(v));
                b1.iter().for_each(|&v| f(v));
                w2.data().iter().for_each(|&v| f(v));
                b2.iter().for_each(|&v| f(v));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Head
// ---------------------------------------------------------------------------

/// Worker-private head: affine map from the `z`-dimensional code to `c`
/// outputs. Flattening order: weight row-major, then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    /// `c×z` weight.
    pub weight: Matrix<T>,
    /// Length `c`.
    pub bias: Vec<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Head { weight, bias })
    }

    pub fn zeros(out_dim: usize, code_dim: usize) -> Self {
        Head {
            weight: Matrix::zeros(out_dim, code_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Entries i.i.d. uniform on `[−1/√z, 1/√z]`.
    pub fn random_init(out_dim: usize, code_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (code_dim as f64).sqrt();
        let mut head = Head::zeros(out_dim, code_dim);
        for v in head.weight.data_mut() {
            *v = T::of_f64((2.0 * rng.random::<f64>() - 1.0) * bound);
        }
        for v in head.bias.iter_mut() {
            *v = T::of_f64((2.0 * rng.random::<f64>() - 1.0) * bound);
        }
        head
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_len(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_len());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }

    pub fn from_flat(out_dim: usize, code_dim: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != out_dim * code_dim + out_dim {
            return Err(Error::invalid(format!(
                "flat buffer has {} entries, head needs {}",
                flat.len(),
                out_dim * code_dim + out_dim
            )));
        }
        let (w, b) = flat.split_at(out_dim * code_dim);
        Ok(Head {
            weight: Matrix::from_flat(out_dim, code_dim, w.to_vec()),
            bias: b.to_vec(),
        })
    }

    pub fn axpy(&mut self, a: T, other: &Head<T>) {
        self.weight.axpy(a, &other.weight);
        axpy_slice(&mut self.bias, a, &other.bias);
    }

    pub fn sq_norm(&self) -> T {
        self.weight.sq_norm() + sq_norm_slice(&self.bias)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.data().iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Data containers
// ---------------------------------------------------------------------------

/// Labeled examples with a fixed input dimension, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSet<T> {
    input_dim: usize,
    inputs: Vec<T>, // m×d row-major
    targets: Targets<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    Classes {
        n_classes: usize,
        labels: Vec<usize>,
    },
    Vectors {
        dim: usize,
        values: Vec<T>,
    },
}

/// Target of a single example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetRef<'a, T> {
    Class(usize),
    Vector(&'a [T]),
}

impl<T: Scalar> ExampleSet<T> {
    pub fn new_classification(input_dim: usize, n_classes: usize) -> Self {
        ExampleSet {
            input_dim,
            inputs: Vec::new(),
            targets: Targets::Classes {
                n_classes,
                labels: Vec::new(),
            },
        }
    }

    pub fn new_regression(input_dim: usize, target_dim: usize) -> Self {
        ExampleSet {
            input_dim,
            inputs: Vec::new(),
            targets: Targets::Vectors {
                dim: target_dim,
                values: Vec::new(),
            },
        }
    }

    pub fn push_class(&mut self, x: &[T], label: usize) {
        assert_eq!(x.len(), self.input_dim);
        match &mut self.targets {
            Targets::Classes { n_classes, labels } => {
                assert!(label < *n_classes, "label out of range");
                labels.push(label);
            }
            Targets::Vectors { .. } => panic!("class label pushed into regression set"),
        }
        self.inputs.extend_from_slice(x);
    }

    pub fn push_vector(&mut self, x: &[T], y: &[T]) {
        assert_eq!(x.len(), self.input_dim);
        match &mut self.targets {
            Targets::Vectors { dim, values } => {
                assert_eq!(y.len(), *dim, "target dim mismatch");
                values.extend_from_slice(y);
            }
            Targets::Classes { .. } => panic!("vector target pushed into classification set"),
        }
        self.inputs.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        if self.input_dim == 0 {
            0
        } else {
            self.inputs.len() / self.input_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of classes, or the regression target dimension.
    pub fn target_dim(&self) -> usize {
        match &self.targets {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Vectors { dim, .. } => *dim,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.targets, Targets::Classes { .. })
    }

    pub fn input(&self, i: usize) -> &[T] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> TargetRef<'_, T> {
        match &self.targets {
            Targets::Classes { labels, .. } => TargetRef::Class(labels[i]),
            Targets::Vectors { dim, values } => TargetRef::Vector(&values[i * dim..(i + 1) * dim]),
        }
    }

    /// Copy out the examples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> ExampleSet<T> {
        let mut out = match &self.targets {
            Targets::Classes { n_classes, .. } => {
                ExampleSet::new_classification(self.input_dim, *n_classes)
            }
            Targets::Vectors { dim, .. } => ExampleSet::new_regression(self.input_dim, *dim),
        };
        for &i in idx {
            match self.target(i) {
                TargetRef::Class(l) => out.push_class(self.input(i), l),
                TargetRef::Vector(v) => out.push_vector(self.input(i), v),
            }
        }
        out
    }

    /// Per-class example counts; `None` for regression targets.
    pub fn class_histogram(&self) -> Option<Vec<usize>> {
        match &self.targets {
            Targets::Classes { n_classes, labels } => {
                let mut hist = vec![0usize; *n_classes];
                for &l in labels {
                    hist[l] += 1;
                }
                Some(hist)
            }
            Targets::Vectors { .. } => None,
        }
    }

    pub fn full(&self) -> Batch<'_, T> {
        Batch {
            set: self,
            idx: None,
        }
    }

    pub fn batch<'a>(&'a self, idx: &'a [usize]) -> Batch<'a, T> {
        Batch {
            set: self,
            idx: Some(idx),
        }
    }
}

/// A view over a subset of an [`ExampleSet`] (or all of it).
#[derive(Clone, Copy)]
pub struct Batch<'a, T> {
    set: &'a ExampleSet<T>,
    idx: Option<&'a [usize]>,
}

impl<'a, T: Scalar> Batch<'a, T> {
    pub fn len(&self) -> usize {
        match self.idx {
            Some(idx) => idx.len(),
            None => self.set.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn resolve(&self, j: usize) -> usize {
        match self.idx {
            Some(idx) => idx[j],
            None => j,
        }
    }

    pub fn input(&self, j: usize) -> &'a [T] {
        self.set.input(self.resolve(j))
    }

    pub fn target(&self, j: usize) -> TargetRef<'a, T> {
        self.set.target(self.resolve(j))
    }

    pub fn set(&self) -> &'a ExampleSet<T> {
        self.set
    }
}

// ---------------------------------------------------------------------------
// Losses and gradients
// ---------------------------------------------------------------------------

/// Per-example error. Squared is `½‖pred − y‖²`; cross-entropy is the
/// negative log-softmax of the true class, computed with max-subtraction so
/// logits up to ±700 cannot overflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::SoftmaxCrossEntropy => "cross-entropy",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "squared" => Ok(LossKind::Squared),
            "cross-entropy" => Ok(LossKind::SoftmaxCrossEntropy),
            other => Err(format!("unknown loss kind `{other}`")),
        }
    }
}

/// Predictor output for one input: `head(repr(x))`.
pub fn forward<T: Scalar>(repr: &Representation<T>, head: &Head<T>, x: &[T]) -> Result<Vec<T>> {
    if head.code_dim() != repr.output_dim() {
        return Err(Error::invalid(format!(
            "head expects code dim {}, representation produces {}",
            head.code_dim(),
            repr.output_dim()
        )));
    }
    let code = repr.encode(x)?;
    let mut pred = head.weight.matvec(&code);
    for (p, &b) in pred.iter_mut().zip(head.bias.iter()) {
        *p += b;
    }
    Ok(pred)
}

/// Predicted class: argmax over logits, ties broken by the lowest index.
pub fn predict_class<T: Scalar>(
    repr: &Representation<T>,
    head: &Head<T>,
    x: &[T],
) -> Result<usize> {
    let pred = forward(repr, head, x)?;
    let mut best = 0;
    for (c, &v) in pred.iter().enumerate().skip(1) {
        if v > pred[best] {
            best = c;
        }
    }
    Ok(best)
}

fn per_example_loss_and_dpred<T: Scalar>(
    pred: &[T],
    target: TargetRef<'_, T>,
    loss: LossKind,
    want_grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    match (loss, target) {
        (LossKind::Squared, TargetRef::Vector(y)) => {
            if y.len() != pred.len() {
                return Err(Error::invalid("target dim does not match prediction"));
            }
            let mut residual = Vec::with_capacity(pred.len());
            let mut acc = T::zero();
            for (&p, &t) in pred.iter().zip(y.iter()) {
                let r = p - t;
                acc += r * r;
                residual.push(r);
            }
            let half = T::of_f64(0.5);
            Ok((half * acc, want_grad.then_some(residual)))
        }
        (LossKind::SoftmaxCrossEntropy, TargetRef::Class(y)) => {
            if y >= pred.len() {
                return Err(Error::invalid("class index out of range"));
            }
            let max = pred
                .iter()
                .copied()
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut sum = T::zero();
            for &p in pred {
                sum += (p - max).exp();
            }
            let log_sum = max + sum.ln();
            let loss_val = log_sum - pred[y];
            let grad = want_grad.then(|| {
                pred.iter()
                    .enumerate()
                    .map(|(c, &p)| {
                        let s = (p - max).exp() / sum;
                        if c == y {
                            s - T::one()
                        } else {
                            s
                        }
                    })
                    .collect()
            });
            Ok((loss_val, grad))
        }
        (LossKind::Squared, TargetRef::Class(_)) => Err(Error::invalid(
            "squared loss needs vector targets, got class labels",
        )),
        (LossKind::SoftmaxCrossEntropy, TargetRef::Vector(_)) => Err(Error::invalid(
            "cross-entropy needs class labels, got vector targets",
        )),
    }
}

struct BatchEval<T> {
    loss: T,
    grad_phi: Option<Representation<T>>,
    grad_theta: Option<Head<T>>,
}

/// One pass over the batch accumulating whatever was requested; sums are
/// taken first and divided by the batch size at the end, so the batch
/// gradient is exactly the mean of per-example gradients up to
/// summation-order rounding.
fn eval_batch<T: Scalar>(
    repr: &Representation<T>,
    head: &Head<T>,
    batch: Batch<'_, T>,
    loss: LossKind,
    want_phi: bool,
    want_theta: bool,
) -> Result<BatchEval<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must be nonempty"));
    }
    if head.code_dim() != repr.output_dim() {
        return Err(Error::invalid(format!(
            "head expects code dim {}, representation produces {}",
            head.code_dim(),
            repr.output_dim()
        )));
    }
    let want_grad = want_phi || want_theta;
    let mut loss_acc = T::zero();
    let mut g_phi = if want_phi {
        Some(Representation::zeros(repr.shape())?)
    } else {
        None
    };
    let mut g_theta = if want_theta {
        Some(Head::zeros(head.out_dim(), head.code_dim()))
    } else {
        None
    };

    for j in 0..batch.len() {
        let x = batch.input(j);
        if x.len() != repr.input_dim() {
            return Err(Error::invalid("input dim does not match representation"));
        }

        // Forward, keeping the hidden activation for backprop.
        let (code, hidden) = match repr {
            Representation::Linear { weight } => (weight.matvec(x), None),
            Representation::OneHiddenTanh { w1, b1, w2, b2 } => {
                let mut hdn = w1.matvec(x);
                for (a, &b) in hdn.iter_mut().zip(b1.iter()) {
                    *a = (*a + b).tanh();
                }
                let mut code = w2.matvec(&hdn);
                for (c, &b) in code.iter_mut().zip(b2.iter()) {
                    *c += b;
                }
                (code, Some(hdn))
            }
        };
        let mut pred = head.weight.matvec(&code);
        for (p, &b) in pred.iter_mut().zip(head.bias.iter()) {
            *p += b;
        }

        let (l, dpred) = per_example_loss_and_dpred(&pred, batch.target(j), loss, want_grad)?;
        loss_acc += l;
        let Some(dpred) = dpred else { continue };

        if let Some(gt) = g_theta.as_mut() {
            gt.weight.add_outer(T::one(), &dpred, &code);
            axpy_slice(&mut gt.bias, T::one(), &dpred);
        }
        if let Some(gp) = g_phi.as_mut() {
            // δ = Aᵀ·dpred, then back through the representation.
            let delta = head.weight.matvec_transpose(&dpred);
            match (gp, repr) {
                (Representation::Linear { weight }, Representation::Linear { .. }) => {
                    weight.add_outer(T::one(), &delta, x);
                }
                (
                    Representation::OneHiddenTanh { w1, b1, w2, b2 },
                    Representation::OneHiddenTanh { w2: pw2, .. },
                ) => {
                    let hdn = hidden.as_ref().expect("hidden activation cached");
                    w2.add_outer(T::one(), &delta, hdn);
                    axpy_slice(b2, T::one(), &delta);
                    let mut ga = pw2.matvec_transpose(&delta);
                    for (g, &h) in ga.iter_mut().zip(hdn.iter()) {
                        *g *= T::one() - h * h;
                    }
                    w1.add_outer(T::one(), &ga, x);
                    axpy_slice(b1, T::one(), &ga);
                }
                _ => unreachable!("gradient allocated with the parameter shape"),
            }
        }
    }

    let inv_m = T::one() / T::of_f64(batch.len() as f64);
    if let Some(gp) = g_phi.as_mut() {
        gp.scale(inv_m);
    }
    if let Some(gt) = g_theta.as_mut() {
        gt.weight.scale(inv_m);
        for b in gt.bias.iter_mut() {
            *b *= inv_m;
        }
    }
    Ok(BatchEval {
        loss: loss_acc * inv_m,
        grad_phi: g_phi,
        grad_theta: g_theta,
    })
}

/// Mean per-example loss over the batch.
pub fn loss<T: Scalar>(
    repr: &Representation<T>,
    head: &Head<T>,
    batch: Batch<'_, T>,
    kind: LossKind,
) -> Result<T> {
    Ok(eval_batch(repr, head, batch, kind, false, false)?.loss)
}

/// Exact mean gradient of the batch loss w.r.t. the head, representation fixed.
pub fn grad_theta<T: Scalar>(
    repr: &Representation<T>,
    head: &Head<T>,
    batch: Batch<'_, T>,
    kind: LossKind,
) -> Result<Head<T>> {
    Ok(eval_batch(repr, head, batch, kind, false, true)?
        .grad_theta
        .expect("requested"))
}

/// Exact mean gradient of the batch loss w.r.t. the representation, head fixed.
pub fn grad_phi<T: Scalar>(
    repr: &Representation<T>,
    head: &Head<T>,
    batch: Batch<'_, T>,
    kind: LossKind,
) -> Result<Representation<T>> {
    Ok(eval_batch(repr, head, batch, kind, true, false)?
        .grad_phi
        .expect("requested"))
}

/// Both partial gradients from a single pass over one batch.
pub fn grad_pair<T: Scalar>(
    repr: &Representation<T>,
    head: &Head<T>,
    batch: Batch<'_, T>,
    kind: LossKind,
) -> Result<(Representation<T>, Head<T>)> {
    let eval = eval_batch(repr, head, batch, kind, true, true)?;
    Ok((
        eval.grad_phi.expect("requested"),
        eval.grad_theta.expect("requested"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, phase};

    fn scalar_model(b: f64, a: f64, bias: f64) -> (Representation<f64>, Head<f64>) {
        let repr = Representation::linear(Matrix::from_flat(1, 1, vec![b])).unwrap();
        let head = Head::new(Matrix::from_flat(1, 1, vec![a]), vec![bias]).unwrap();
        (repr, head)
    }

    #[test]
    fn forward_scalar_product() {
        let (repr, head) = scalar_model(1.0, 2.0, 0.0);
        assert_eq!(forward(&repr, &head, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn forward_zero_network_is_bias() {
        let repr = Representation::one_hidden_tanh(
            Matrix::zeros(2, 3),
            vec![0.0; 2],
            Matrix::zeros(2, 2),
            vec![0.0; 2],
        )
        .unwrap();
        let head = Head::new(Matrix::from_rows(&[vec![1.0, -4.0]]), vec![5.0]).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]] {
            assert_eq!(forward(&repr, &head, &x).unwrap(), vec![5.0]);
        }
    }

    #[test]
    fn forward_identity_composition() {
        let eye = |n: usize| {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                m.set(i, i, 1.0);
            }
            m
        };
        let repr = Representation::linear(eye(3)).unwrap();
        let head = Head::new(eye(3), vec![0.0; 3]).unwrap();
        let x = [0.3, -1.2, 7.0];
        assert_eq!(forward(&repr, &head, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let (repr, head) = scalar_model(1.0, 2.0, 0.0);
        assert!(forward(&repr, &head, &[1.0, 2.0]).is_err());
        let wide_head = Head::<f64>::zeros(1, 3);
        assert!(forward(&repr, &wide_head, &[1.0]).is_err());
    }

    #[test]
    fn representation_rejects_expansion() {
        assert!(Representation::linear(Matrix::<f64>::zeros(3, 2)).is_err()); // z=3 > d=2
        assert!(ReprShape::OneHiddenTanh { d: 2, h: 4, z: 3 }
            .validate()
            .is_err());
    }

    #[test]
    fn squared_loss_values() {
        let (repr, head) = scalar_model(1.0, 2.0, 0.0);
        let mut exact = ExampleSet::new_regression(1, 1);
        exact.push_vector(&[3.0], &[6.0]);
        assert_eq!(
            loss(&repr, &head, exact.full(), LossKind::Squared).unwrap(),
            0.0
        );

        let mut off = ExampleSet::new_regression(1, 1);
        off.push_vector(&[3.0], &[5.0]); // pred 6, y 5 → ½
        assert_eq!(
            loss(&repr, &head, off.full(), LossKind::Squared).unwrap(),
            0.5
        );
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let repr = Representation::linear(Matrix::from_flat(1, 1, vec![0.0])).unwrap();
        let head = Head::new(Matrix::zeros(2, 1), vec![0.0, 0.0]).unwrap();
        let mut set = ExampleSet::new_classification(1, 2);
        set.push_class(&[1.0], 0);
        let l = loss(&repr, &head, set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shift_stable() {
        let repr = Representation::<f64>::linear(Matrix::from_flat(2, 2, vec![1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let mut set = ExampleSet::new_classification(2, 3);
        set.push_class(&[0.4, -0.7], 2);
        let head = Head::new(
            Matrix::from_rows(&[vec![0.3, 1.0], vec![-2.0, 0.1], vec![0.9, 0.9]]),
            vec![0.1, -0.2, 0.0],
        )
        .unwrap();
        let base = loss(&repr, &head, set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        let mut shifted = head.clone();
        for b in shifted.bias.iter_mut() {
            *b += 1000.0;
        }
        let l = loss(&repr, &shifted, set.full(), LossKind::SoftmaxCrossEntropy).unwrap();
        assert!((l - base).abs() < 1e-9);
    }

    // Hand-differentiated oracle for the scalar squared case B=1, A=2, bias=0,
    // x=3, y=5: pred = 6, residual = 1, so ∂A = residual·(B·x) = 3, ∂bias = 1,
    // ∂B = residual·A·x = 6.
    #[test]
    fn scalar_gradients_match_hand_derivation() {
        let (repr, head) = scalar_model(1.0, 2.0, 0.0);
        let mut set = ExampleSet::new_regression(1, 1);
        set.push_vector(&[3.0], &[5.0]);

        let gt = grad_theta(&repr, &head, set.full(), LossKind::Squared).unwrap();
        assert_eq!(gt.weight.get(0, 0), 3.0);
        assert_eq!(gt.bias[0], 1.0);

        let gp = grad_phi(&repr, &head, set.full(), LossKind::Squared).unwrap();
        match gp {
            Representation::Linear { weight } => assert_eq!(weight.get(0, 0), 6.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_residual_means_zero_gradient() {
        let (repr, head) = scalar_model(1.0, 2.0, 0.0);
        let mut set = ExampleSet::new_regression(1, 1);
        set.push_vector(&[3.0], &[6.0]);
        let gt = grad_theta(&repr, &head, set.full(), LossKind::Squared).unwrap();
        assert_eq!(gt.sq_norm(), 0.0);
        let gp = grad_phi(&repr, &head, set.full(), LossKind::Squared).unwrap();
        assert_eq!(gp.sq_norm(), 0.0);
    }

    #[test]
    fn zero_head_blocks_representation_gradient() {
        let (repr, _) = scalar_model(1.5, 0.0, 0.0);
        let head = Head::new(Matrix::from_flat(1, 1, vec![0.0]), vec![4.0]).unwrap();
        let mut set = ExampleSet::new_regression(1, 1);
        set.push_vector(&[2.0], &[4.0]); // bias matches target exactly
        let gp = grad_phi(&repr, &head, set.full(), LossKind::Squared).unwrap();
        assert_eq!(gp.sq_norm(), 0.0);
    }

    #[test]
    fn batch_gradient_is_mean_of_per_example() {
        let mut rng = rng::substream(5, 0, 0, phase::GRADCHECK);
        let shape = ReprShape::OneHiddenTanh { d: 4, h: 3, z: 2 };
        let repr = Representation::random_init(shape, &mut rng).unwrap();
        let head = Head::random_init(2, 2, &mut rng);
        let mut set = ExampleSet::new_regression(4, 2);
        for _ in 0..6 {
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random::<f64>() - 0.5).collect();
            set.push_vector(&x, &y);
        }
        let full = grad_phi(&repr, &head, set.full(), LossKind::Squared).unwrap();
        let mut mean = Representation::zeros(shape).unwrap();
        for i in 0..6 {
            let idx = [i];
            let g = grad_phi(&repr, &head, set.batch(&idx), LossKind::Squared).unwrap();
            mean.axpy(1.0 / 6.0, &g);
        }
        let mut diff = full.flatten();
        let mf = mean.flatten();
        for (d, m) in diff.iter_mut().zip(mf.iter()) {
            *d -= m;
        }
        assert!(sq_norm_slice(&diff).sqrt() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (repr, head) = scalar_model(1.0, 2.0, 0.0);
        let set = ExampleSet::<f64>::new_regression(1, 1);
        assert!(loss(&repr, &head, set.full(), LossKind::Squared).is_err());
    }

    #[test]
    fn flatten_round_trips_bit_exact() {
        let mut rng = rng::substream(9, 0, 0, phase::GRADCHECK);
        for shape in [
            ReprShape::Linear { d: 5, z: 3 },
            ReprShape::OneHiddenTanh { d: 5, h: 4, z: 2 },
        ] {
            let repr = Representation::<f64>::random_init(shape, &mut rng).unwrap();
            let back = Representation::from_flat(shape, &repr.flatten()).unwrap();
            assert_eq!(repr, back);
        }
        let head = Head::<f64>::random_init(3, 2, &mut rng);
        let back = Head::from_flat(3, 2, &head.flatten()).unwrap();
        assert_eq!(head, back);
    }

    #[test]
    fn f32_instantiation_works() {
        let repr = Representation::linear(Matrix::from_flat(1, 2, vec![1.0f32, 2.0])).unwrap();
        let head = Head::new(Matrix::from_flat(1, 1, vec![2.0f32]), vec![0.5]).unwrap();
        let out = forward(&repr, &head, &[1.0f32, 1.0]).unwrap();
        assert_eq!(out, vec![6.5f32]);
    }
}
