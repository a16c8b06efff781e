//! Neural-network primitives: parameter tensors with gradient and
//! optimizer state, affine layers, inverted dropout, the negative
//! cosine similarity, Adam, and a central-difference gradient checker.
//!
//! Everything here is written against the dense [`Mat`] type in plain
//! f64, with gradients accumulated explicitly — the model's backward
//! pass is hand-derived, and the checker in this module is the oracle
//! that keeps it honest.

use crate::error::{Error, Result};
use crate::mat::{axpy, dot, norm2, Mat};
use crate::rng;

/// Additive guard applied to vector norms inside loss code, so that a
/// degenerate all-zero embedding row cannot produce a division by
/// zero mid-training. Strict entry points reject zero norms instead.
pub const NORM_GUARD: f64 = 1e-12;

/// A named parameter matrix with its gradient accumulator and Adam
/// moment estimates. Names double as checkpoint file stems.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    adam_m: Mat,
    adam_v: Mat,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Mat) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            name: name.into(),
            value,
            grad: Mat::zeros(r, c),
            adam_m: Mat::zeros(r, c),
            adam_v: Mat::zeros(r, c),
        }
    }

    pub fn xavier(name: impl Into<String>, rows: usize, cols: usize, seed: u64) -> Self {
        ParamTensor::new(name, xavier_mat(rows, cols, seed))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        norm2(self.grad.data())
    }
}

/// Xavier/Glorot uniform init on `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
pub fn xavier_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    use rand::Rng;
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = rng::stream(seed, "xavier", &[]);
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Mat::from_vec(rows, cols, data).expect("sized by construction")
}

/// An affine map `x -> x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl LinearLayer {
    /// Xavier-initialized weights, zero bias. Tensor names become
    /// `<prefix>_W` / `<prefix>_b`.
    pub fn xavier(prefix: &str, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        LinearLayer {
            w: ParamTensor::xavier(format!("{}_W", prefix), in_dim, out_dim, seed),
            b: ParamTensor::new(format!("{}_b", prefix), Mat::zeros(1, out_dim)),
        }
    }

    pub fn from_parts(prefix: &str, w: Mat, b: Mat) -> Self {
        LinearLayer {
            w: ParamTensor::new(format!("{}_W", prefix), w),
            b: ParamTensor::new(format!("{}_b", prefix), b),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        let mut out = x.matmul(&self.w.value)?;
        for r in 0..out.rows() {
            axpy(1.0, self.b.value.row(0), out.row_mut(r));
        }
        Ok(out)
    }

    /// Accumulates `dW += x^T d_out`, `db += column sums of d_out` and
    /// returns the input gradient `d_out W^T`.
    pub fn backward(&mut self, x: &Mat, d_out: &Mat) -> Result<Mat> {
        self.backward_params_only(x, d_out)?;
        d_out.matmul(&self.w.value.transpose())
    }

    /// Same accumulation as [`backward`](Self::backward) without the
    /// input gradient — for inputs that are constants (features).
    pub fn backward_params_only(&mut self, x: &Mat, d_out: &Mat) -> Result<()> {
        let dw = x.matmul_at_b(d_out)?;
        self.w.grad.add_assign(&dw)?;
        self.b.grad.add_assign(&d_out.col_sums())?;
        Ok(())
    }
}

/// Whether dropout zeroes individual entries or whole rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Element,
    Row,
}

/// A sampled dropout mask. `p` is the drop probability; surviving
/// entries are rescaled by `1 / (1 - p)` so the map is unbiased.
/// `p = 0` is represented without a mask and applies as an exact copy.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    pub p: f64,
    pub mode: MaskMode,
    keep: Option<Mat>,
}

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask { p: 0.0, mode: MaskMode::Element, keep: None }
    }

    /// Samples a fresh mask for a `rows x cols` input.
    pub fn sample(
        rows: usize,
        cols: usize,
        p: f64,
        mode: MaskMode,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        use rand::Rng;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter {
                name: "dropout",
                reason: format!("probability must lie in [0, 1), got {}", p),
            });
        }
        if p == 0.0 {
            return Ok(DropoutMask::identity());
        }
        let mut keep = Mat::zeros(rows, cols);
        match mode {
            MaskMode::Element => {
                for v in keep.data_mut() {
                    *v = if rng.random::<f64>() >= p { 1.0 } else { 0.0 };
                }
            }
            MaskMode::Row => {
                for r in 0..rows {
                    let k = if rng.random::<f64>() >= p { 1.0 } else { 0.0 };
                    keep.row_mut(r).fill(k);
                }
            }
        }
        Ok(DropoutMask { p, mode, keep: Some(keep) })
    }

    /// Applies the mask with inverted rescaling. With `p = 0` this is
    /// a bit-exact copy of the input.
    pub fn apply(&self, h: &Mat) -> Result<Mat> {
        match &self.keep {
            None => Ok(h.clone()),
            Some(keep) => {
                if keep.shape() != h.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "dropout",
                        detail: format!("mask {:?} vs input {:?}", keep.shape(), h.shape()),
                    });
                }
                let scale = 1.0 / (1.0 - self.p);
                let mut out = h.clone();
                for (o, k) in out.data_mut().iter_mut().zip(keep.iter()) {
                    *o *= k * scale;
                }
                Ok(out)
            }
        }
    }

    pub fn keep_fraction(&self) -> f64 {
        match &self.keep {
            None => 1.0,
            Some(keep) => keep.iter().sum::<f64>() / keep.len() as f64,
        }
    }
}

/// Negative cosine similarity `-(u . v) / (|u| |v|)`. Rejects
/// zero-norm inputs, which signal degenerate embeddings.
pub fn neg_cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if norm2(u) == 0.0 || norm2(v) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(neg_cosine_guarded(u, v))
}

/// Negative cosine with the [`NORM_GUARD`] added to each norm, the
/// form used inside losses during training.
pub fn neg_cosine_guarded(u: &[f64], v: &[f64]) -> f64 {
    let denom = (norm2(u) + NORM_GUARD) * (norm2(v) + NORM_GUARD);
    -dot(u, v) / denom
}

/// Guarded negative cosine plus its gradient with respect to `u`
/// (`v` is treated as a constant). The value is symmetric in its
/// arguments, so the gradient in `v` is `neg_cosine_grad(v, u).1`.
pub fn neg_cosine_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let nu = norm2(u);
    let nv = norm2(v);
    let gu = nu + NORM_GUARD;
    let gv = nv + NORM_GUARD;
    let s = dot(u, v);
    let value = -s / (gu * gv);
    let coeff = s / (gu * gu * gv);
    let grad = u
        .iter()
        .zip(v)
        .map(|(&uj, &vj)| {
            let unit = if nu > 0.0 { uj / nu } else { 0.0 };
            -vj / (gu * gv) + coeff * unit
        })
        .collect();
    (value, grad)
}

/// Adam hyper-parameters and the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        AdamState::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: format!("must be finite and non-negative, got {}", lr),
            });
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter {
                    name: "adam_beta",
                    reason: format!("{} must lie in [0, 1), got {}", name, b),
                });
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter {
                name: "adam_epsilon",
                reason: format!("must be positive, got {}", epsilon),
            });
        }
        Ok(AdamState { lr, beta1, beta2, epsilon, step: 0 })
    }

    /// One Adam update over the given tensors with bias correction;
    /// gradients are zeroed afterward, ready for reaccumulation.
    pub fn step<'a>(&mut self, tensors: impl IntoIterator<Item = &'a mut ParamTensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for tensor in tensors {
            let n = tensor.value.len();
            for j in 0..n {
                let g = tensor.grad.data()[j];
                let m = self.beta1 * tensor.adam_m.data()[j] + (1.0 - self.beta1) * g;
                let v = self.beta2 * tensor.adam_v.data()[j] + (1.0 - self.beta2) * g * g;
                tensor.adam_m.data_mut()[j] = m;
                tensor.adam_v.data_mut()[j] = v;
                let update = self.lr * (m / bc1) / ((v / bc2).sqrt() + self.epsilon);
                tensor.value.data_mut()[j] -= update;
            }
            tensor.zero_grad();
        }
    }
}

/// Relative error with a small floor so that noise-level gradients do
/// not produce spurious blow-ups: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct FdWorst {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<FdWorst>,
}

impl FdReport {
    pub fn empty() -> Self {
        FdReport { max_rel_err: 0.0, checked: 0, worst: None }
    }

    pub fn absorb(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some(FdWorst { index, analytic, numeric });
        }
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &FdReport) {
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.clone().or_else(|| self.worst.clone());
        }
        self.checked += other.checked;
    }
}

/// Central-difference check of `t.grad` against the scalar function
/// `loss`, which must be a deterministic function of `t.value`.
/// Every coordinate is perturbed by `+-eps` and restored.
pub fn fd_check_tensor(
    t: &mut ParamTensor,
    eps: f64,
    mut loss: impl FnMut(&ParamTensor) -> f64,
) -> FdReport {
    let mut report = FdReport::empty();
    for j in 0..t.value.len() {
        let old = t.value.data()[j];
        t.value.data_mut()[j] = old + eps;
        let up = loss(t);
        t.value.data_mut()[j] = old - eps;
        let down = loss(t);
        t.value.data_mut()[j] = old;
        let numeric = (up - down) / (2.0 * eps);
        report.absorb(j, t.grad.data()[j], numeric);
    }
    report
}
