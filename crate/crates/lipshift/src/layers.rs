//! The Lipschitz layer zoo: every layer knows how to run forward (eagerly and
//! on the autodiff tape) and how to produce a certified upper bound on its own
//! Lipschitz constant. Linear layers additionally expose themselves as
//! [`LinearOperator`]s so tests can cross-check declared bounds against the
//! exact SVD oracle on the materialized matrix.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::spectral::{
    self, LinearOperator, MatrixOperator, SigmaEstimate, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::tape::{Tape, Var};
use crate::tensor::{ReduceKind, Tensor};

/// Rows of the prediction head with l2 norm at or below this are left
/// unnormalized instead of being divided by a near-zero norm.
pub const ROW_NORM_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// CenterNorm
// ---------------------------------------------------------------------------

/// Centers each feature vector (subtracts its mean) and applies a learned
/// per-channel affine map. Contrary to LayerNorm there is no variance
/// division, so the layer is globally Lipschitz with constant `max_i |gamma_i|`
/// (centering is an orthogonal projection, norm at most 1).
#[derive(Debug, Clone)]
pub struct CenterNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> CenterNorm<S> {
    pub fn new(dim: usize) -> Self {
        CenterNorm { gamma: Tensor::ones(vec![dim]), beta: Tensor::zeros(vec![dim]) }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    /// Eager forward on `[rows, dim]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let d = self.dim();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::Dimension(format!(
                "CenterNorm({d}) got input {:?}",
                x.shape()
            )));
        }
        let rows = x.shape()[0];
        let inv = S::from_usize(d).unwrap().recip();
        let mut out = Tensor::zeros(vec![rows, d]);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv;
            for j in 0..d {
                out.data_mut()[r * d + j] =
                    self.gamma.data()[j] * (row[j] - mean) + self.beta.data()[j];
            }
        }
        Ok(out)
    }

    /// Tape forward; `gamma`/`beta` are the layer's parameter nodes.
    pub fn forward_t(&self, tape: &mut Tape<S>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let mean = tape.reduce(x, ReduceKind::Mean, &[1])?;
        let neg_mean = tape.neg(mean);
        let centered = tape.badd_col(x, neg_mean)?;
        let scaled = tape.bmul_row(centered, gamma)?;
        tape.badd_row(scaled, beta)
    }

    pub fn bound(&self) -> f64 {
        self.gamma
            .data()
            .iter()
            .map(|&g| g.abs().to_f())
            .fold(0.0, f64::max)
    }

    pub fn bound_t(&self, tape: &mut Tape<S>, gamma: Var) -> Var {
        let a = tape.abs(gamma);
        tape.max_all(a)
    }

    pub fn operator(&self) -> CenterOperator<S> {
        CenterOperator { gamma: self.gamma.clone() }
    }
}

/// The centering-plus-scale map as a linear operator on one feature vector
/// (bias dropped; it does not affect the Lipschitz constant).
pub struct CenterOperator<S> {
    gamma: Tensor<S>,
}

impl<S: Scalar> LinearOperator<S> for CenterOperator<S> {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.gamma.numel()]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.gamma.numel()]
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let d = self.gamma.numel();
        let inv = S::from_usize(d).unwrap().recip();
        let mean = x.data().iter().fold(S::zero(), |a, &v| a + v) * inv;
        Ok(Tensor::from_fn(vec![d], |i| {
            self.gamma.data()[i] * (x.data()[i] - mean)
        }))
    }

    fn apply_transpose(&self, u: &Tensor<S>) -> Result<Tensor<S>> {
        // (C diag(gamma))^T = diag(gamma) C^T = diag is applied first, then the
        // (symmetric) centering projection.
        let d = self.gamma.numel();
        let inv = S::from_usize(d).unwrap().recip();
        let scaled: Vec<S> = (0..d).map(|i| self.gamma.data()[i] * u.data()[i]).collect();
        let mean = scaled.iter().fold(S::zero(), |a, &v| a + v) * inv;
        Ok(Tensor::from_fn(vec![d], |i| scaled[i] - mean))
    }
}

// ---------------------------------------------------------------------------
// MaxMin
// ---------------------------------------------------------------------------

/// Pairwise channel sorting: gradient-norm-preserving activation, Lipschitz
/// constant exactly 1 (its Jacobian is a permutation).
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxMin;

impl MaxMin {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::maxmin(x)?.0)
    }

    pub fn forward_t<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        tape.maxmin(x)
    }

    pub fn bound(&self) -> f64 {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Shift
// ---------------------------------------------------------------------------

/// Partial channel shift: four groups of `group` channels each translate one
/// pixel (left/right/up/down, zero fill), the rest pass through. A
/// sub-permutation of the input, hence 1-Lipschitz and parameter-free.
#[derive(Debug, Clone, Copy)]
pub struct ShiftLayer {
    pub channels: usize,
    pub group: usize,
}

impl ShiftLayer {
    pub fn new(channels: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=0.25).contains(&fraction) {
            return Err(Error::config(
                "shift_fraction",
                format!("must be in [0, 0.25], got {fraction}"),
            ));
        }
        let exact = channels as f64 * fraction;
        let group = exact.round() as usize;
        if (exact - group as f64).abs() > 1e-9 {
            return Err(Error::config(
                "shift_fraction",
                format!("{fraction} * {channels} channels is not an integer group size"),
            ));
        }
        Ok(ShiftLayer { channels, group })
    }

    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::shift_apply(x, self.group, false)
    }

    pub fn forward_t<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        tape.shift(x, self.group)
    }

    pub fn bound(&self) -> f64 {
        1.0
    }

    pub fn operator(&self, h: usize, w: usize) -> ShiftOperator {
        ShiftOperator { h, w, c: self.channels, group: self.group }
    }
}

pub struct ShiftOperator {
    h: usize,
    w: usize,
    c: usize,
    group: usize,
}

impl<S: Scalar> LinearOperator<S> for ShiftOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.c]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.c]
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x4 = x.reshape(vec![1, self.h, self.w, self.c])?;
        ops::shift_apply(&x4, self.group, false)?.reshape(vec![self.h, self.w, self.c])
    }

    fn apply_transpose(&self, u: &Tensor<S>) -> Result<Tensor<S>> {
        let u4 = u.reshape(vec![1, self.h, self.w, self.c])?;
        ops::shift_apply(&u4, self.group, true)?.reshape(vec![self.h, self.w, self.c])
    }
}

// ---------------------------------------------------------------------------
// LiResConv
// ---------------------------------------------------------------------------

/// Residual 1x1 convolution `y = x + W x + b` applied per spatial position.
/// The Lipschitz constant is the spectral norm of the *composite* map
/// `I + W`, which is what [`bound`](LiResConv::bound) estimates. The weight is
/// initialized so that composite has spectral norm 1.
#[derive(Debug, Clone)]
pub struct LiResConv<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LiResConv<S> {
    pub fn new(dim: usize, seed: u64) -> Self {
        // Draw I + G with a small Gaussian perturbation, divide by its spectral
        // norm, and store the result minus I: sigma(I + W) = 1 at init.
        let g = spectral::spectral_normalized_init::<f64>(dim, dim, seed)
            .scale(0.25)
            .add(&Tensor::eye(dim))
            .expect("square add");
        let normalized = spectral::normalize_spectral(&g);
        let w = Tensor::from_fn(vec![dim, dim], |i| {
            let eye = if i / dim == i % dim { 1.0 } else { 0.0 };
            S::from_f(normalized.data()[i] - eye)
        });
        LiResConv { w, b: Tensor::zeros(vec![dim]) }
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// Eager forward on `[rows, dim]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let branch = x.matmul(&self.w.transpose2())?;
        let rows = x.shape()[0];
        let d = self.dim();
        let mut out = x.add(&branch)?;
        for r in 0..rows {
            for j in 0..d {
                out.data_mut()[r * d + j] += self.b.data()[j];
            }
        }
        Ok(out)
    }

    /// Tape forward. When `drop` is `Some((p, seed, n))` the residual branch is
    /// stochastically dropped per sample (the `rows` of `x` are `n` samples'
    /// tokens, contiguous per sample) and the surviving branches are scaled by
    /// `1/(1-p)`.
    pub fn forward_t(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        w: Var,
        b: Var,
        drop: Option<(f64, u64, usize)>,
    ) -> Result<Var> {
        let wt = tape.transpose(w)?;
        let mut branch = tape.matmul(x, wt)?;
        branch = tape.badd_row(branch, b)?;
        if let Some((p, seed, n)) = drop {
            if p > 0.0 {
                let shape = tape.value(branch).shape().to_vec();
                let total = shape.iter().product::<usize>();
                if total % n != 0 {
                    return Err(Error::Contract(format!(
                        "drop-path sample count {n} does not divide activation {shape:?}"
                    )));
                }
                let flat = tape.reshape(branch, vec![n, total / n])?;
                let dropped = tape.droppath(flat, p, seed)?;
                branch = tape.reshape(dropped, shape)?;
            }
        }
        tape.add(x, branch)
    }

    pub fn composite(&self) -> Tensor<S> {
        self.w.add(&Tensor::eye(self.dim())).expect("square add")
    }

    pub fn bound(&self, seed: u64) -> Result<SigmaEstimate> {
        spectral::power_iteration(
            &MatrixOperator::new(self.composite()),
            DEFAULT_MAX_ITERS,
            DEFAULT_TOL,
            seed,
        )
    }

    pub fn bound_t(&self, tape: &mut Tape<S>, w: Var, seed: u64) -> Result<Var> {
        let composite = tape.add_const(w, Tensor::eye(self.dim()))?;
        tape.spectral_sigma(composite, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)
    }

    /// The composite per-pixel map `I + W` over a full `[h,w]` feature map.
    pub fn operator(&self, h: usize, w: usize) -> Conv1x1Operator<S> {
        Conv1x1Operator { h, w, m: self.composite() }
    }
}

/// A per-pixel channel mixing matrix applied across a feature map.
pub struct Conv1x1Operator<S> {
    h: usize,
    w: usize,
    m: Tensor<S>,
}

impl<S: Scalar> Conv1x1Operator<S> {
    pub fn new(h: usize, w: usize, m: Tensor<S>) -> Self {
        Conv1x1Operator { h, w, m }
    }
}

impl<S: Scalar> LinearOperator<S> for Conv1x1Operator<S> {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.m.shape()[1]]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.m.shape()[0]]
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let cin = self.m.shape()[1];
        let flat = x.reshape(vec![self.h * self.w, cin])?;
        let y = flat.matmul(&self.m.transpose2())?;
        y.reshape(vec![self.h, self.w, self.m.shape()[0]])
    }

    fn apply_transpose(&self, u: &Tensor<S>) -> Result<Tensor<S>> {
        let cout = self.m.shape()[0];
        let flat = u.reshape(vec![self.h * self.w, cout])?;
        let y = flat.matmul(&self.m)?;
        y.reshape(vec![self.h, self.w, self.m.shape()[1]])
    }
}

// ---------------------------------------------------------------------------
// Patch embedding / merging
// ---------------------------------------------------------------------------

/// Non-overlapping `p x p` patch extraction followed by a shared affine map.
/// Patch extraction is a permutation of the input, so the layer's Lipschitz
/// constant equals the spectral norm of the weight matrix.
#[derive(Debug, Clone)]
pub struct PatchEmbed<S> {
    pub p: usize,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

/// Downsampling between stages: a patch embedding with `p = 2` over the
/// current feature map.
pub type PatchMerge<S> = PatchEmbed<S>;

impl<S: Scalar> PatchEmbed<S> {
    pub fn new(p: usize, cin: usize, cout: usize, seed: u64) -> Self {
        PatchEmbed {
            p,
            w: spectral::spectral_normalized_init(p * p * cin, cout, seed),
            b: Tensor::zeros(vec![cout]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h / self.p, w / self.p);
        let patches = ops::patchify(x, self.p)?;
        let mut y = patches.matmul(&self.w)?;
        let cout = self.out_dim();
        for r in 0..y.shape()[0] {
            for j in 0..cout {
                y.data_mut()[r * cout + j] += self.b.data()[j];
            }
        }
        y.reshape(vec![n, oh, ow, cout])
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (n, h, ww) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / self.p, ww / self.p);
        let patches = tape.patchify(x, self.p)?;
        let y = tape.matmul(patches, w)?;
        let y = tape.badd_row(y, b)?;
        tape.reshape(y, vec![n, oh, ow, self.out_dim()])
    }

    pub fn bound(&self, seed: u64) -> Result<SigmaEstimate> {
        spectral::power_iteration(
            &MatrixOperator::new(self.w.clone()),
            DEFAULT_MAX_ITERS,
            DEFAULT_TOL,
            seed,
        )
    }

    pub fn bound_t(&self, tape: &mut Tape<S>, w: Var, seed: u64) -> Result<Var> {
        tape.spectral_sigma(w, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)
    }

    pub fn operator(&self, h: usize, w: usize) -> PatchOperator<S> {
        PatchOperator { h, w, p: self.p, weight: self.w.clone() }
    }
}

/// Patchify-then-matmul over one feature map.
pub struct PatchOperator<S> {
    h: usize,
    w: usize,
    p: usize,
    weight: Tensor<S>,
}

impl<S: Scalar> LinearOperator<S> for PatchOperator<S> {
    fn input_shape(&self) -> Vec<usize> {
        let cin = self.weight.shape()[0] / (self.p * self.p);
        vec![self.h, self.w, cin]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.h / self.p, self.w / self.p, self.weight.shape()[1]]
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let ins = LinearOperator::<S>::input_shape(self);
        let x4 = x.reshape(vec![1, ins[0], ins[1], ins[2]])?;
        let patches = ops::patchify(&x4, self.p)?;
        let y = patches.matmul(&self.weight)?;
        y.reshape(self.output_shape())
    }

    fn apply_transpose(&self, u: &Tensor<S>) -> Result<Tensor<S>> {
        let outs = LinearOperator::<S>::output_shape(self);
        let ins = LinearOperator::<S>::input_shape(self);
        let rows = outs[0] * outs[1];
        let flat = u.reshape(vec![rows, outs[2]])?;
        let g = flat.matmul(&self.weight.transpose2())?;
        ops::patchify_adjoint(&g, 1, ins[0], ins[1], ins[2], self.p)?
            .reshape(ins)
    }
}

// ---------------------------------------------------------------------------
// Average pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Non-overlapping `k x k` window mean; Lipschitz constant `1/k`.
    Kernel(usize),
    /// Mean over the full spatial extent; Lipschitz constant `1/sqrt(H*W)`.
    Global,
}

#[derive(Debug, Clone, Copy)]
pub struct AvgPoolLayer {
    pub kind: PoolKind,
}

impl AvgPoolLayer {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self.kind {
            PoolKind::Kernel(k) => ops::avgpool(x, k),
            PoolKind::Global => ops::global_pool(x),
        }
    }

    pub fn forward_t<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        match self.kind {
            PoolKind::Kernel(k) => tape.avgpool(x, k),
            PoolKind::Global => tape.global_pool(x),
        }
    }

    /// Estimated by power iteration on the pooling operator itself rather than
    /// hard-coding the closed form; tests check the two agree.
    pub fn bound<S: Scalar>(&self, h: usize, w: usize, c: usize, seed: u64) -> Result<SigmaEstimate> {
        let op = PoolOperator { h, w, c, kind: self.kind };
        spectral::power_iteration::<S>(&op, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)
    }

    pub fn operator(&self, h: usize, w: usize, c: usize) -> PoolOperator {
        PoolOperator { h, w, c, kind: self.kind }
    }
}

pub struct PoolOperator {
    h: usize,
    w: usize,
    c: usize,
    kind: PoolKind,
}

impl<S: Scalar> LinearOperator<S> for PoolOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.c]
    }

    fn output_shape(&self) -> Vec<usize> {
        match self.kind {
            PoolKind::Kernel(k) => vec![self.h / k, self.w / k, self.c],
            PoolKind::Global => vec![self.c],
        }
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x4 = x.reshape(vec![1, self.h, self.w, self.c])?;
        match self.kind {
            PoolKind::Kernel(k) => {
                ops::avgpool(&x4, k)?.reshape(LinearOperator::<S>::output_shape(self))
            }
            PoolKind::Global => ops::global_pool(&x4)?.reshape(vec![self.c]),
        }
    }

    fn apply_transpose(&self, u: &Tensor<S>) -> Result<Tensor<S>> {
        match self.kind {
            PoolKind::Kernel(k) => {
                let (oh, ow) = (self.h / k, self.w / k);
                let u4 = u.reshape(vec![1, oh, ow, self.c])?;
                ops::avgpool_adjoint(&u4, 1, self.h, self.w, self.c, k)?
                    .reshape(vec![self.h, self.w, self.c])
            }
            PoolKind::Global => {
                let u2 = u.reshape(vec![1, self.c])?;
                ops::global_pool_adjoint(&u2, 1, self.h, self.w, self.c)?
                    .reshape(vec![self.h, self.w, self.c])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Last-layer-normalized head
// ---------------------------------------------------------------------------

/// Linear classification head whose weight rows are l2-normalized on every
/// forward pass. Certification then uses the pairwise row distances
/// `||w_i - w_j||` (all in `[0, 2]`) instead of a global spectral norm.
#[derive(Debug, Clone)]
pub struct LlnHead<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LlnHead<S> {
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        LlnHead {
            w: spectral::spectral_normalized_init(classes, dim, seed),
            b: Tensor::zeros(vec![classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    /// Row-normalized weights; rows with norm at or below [`ROW_NORM_FLOOR`]
    /// are kept as-is.
    pub fn normalized_rows(&self) -> Tensor<S> {
        let (r, c) = (self.w.shape()[0], self.w.shape()[1]);
        let floor = S::from_f(ROW_NORM_FLOOR);
        let mut out = self.w.clone();
        for i in 0..r {
            let row = &self.w.data()[i * c..(i + 1) * c];
            let n = row.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
            if n > floor {
                for j in 0..c {
                    out.data_mut()[i * c + j] = row[j] / n;
                }
            }
        }
        out
    }

    /// Indices of weight rows that fell back to the unnormalized path.
    pub fn degenerate_rows(&self) -> Vec<usize> {
        let (r, c) = (self.w.shape()[0], self.w.shape()[1]);
        let floor = S::from_f(ROW_NORM_FLOOR);
        (0..r)
            .filter(|&i| {
                let row = &self.w.data()[i * c..(i + 1) * c];
                row.iter().fold(S::zero(), |a, &v| a + v * v).sqrt() <= floor
            })
            .collect()
    }

    /// Eager forward on `[n, dim]` -> `[n, classes]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let what = self.normalized_rows();
        let mut z = x.matmul(&what.transpose2())?;
        let nc = self.classes();
        for r in 0..z.shape()[0] {
            for j in 0..nc {
                z.data_mut()[r * nc + j] += self.b.data()[j];
            }
        }
        Ok(z)
    }

    pub fn forward_t(&self, tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
        let what = tape.row_normalize(w, S::from_f(ROW_NORM_FLOOR))?;
        let wt = tape.transpose(what)?;
        let z = tape.matmul(x, wt)?;
        tape.badd_row(z, b)
    }

    /// Pairwise distances between normalized rows: entry `(i, j)` bounds the
    /// Lipschitz constant of the margin `z_i - z_j` as a function of the head
    /// input.
    pub fn pair_constants(&self) -> Tensor<S> {
        let what = self.normalized_rows();
        let (r, c) = (what.shape()[0], what.shape()[1]);
        Tensor::from_fn(vec![r, r], |idx| {
            let (i, j) = (idx / r, idx % r);
            let mut s = S::zero();
            for k in 0..c {
                let d = what.data()[i * c + k] - what.data()[j * c + k];
                s += d * d;
            }
            s.sqrt()
        })
    }

    pub fn pair_constants_t(&self, tape: &mut Tape<S>, w: Var) -> Result<Var> {
        let what = tape.row_normalize(w, S::from_f(ROW_NORM_FLOOR))?;
        tape.pairwise_row_dist(what)
    }
}

// ---------------------------------------------------------------------------
// Stochastic depth / dropout wrapper
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropKind {
    /// Independent per-element zeroing.
    Dropout,
    /// Per-sample zeroing of the whole tensor slice.
    DropPath,
}

/// Training-time stochastic regularizer. Survivors are scaled by `1/(1-p)` so
/// the map is identity in expectation; at evaluation time it is the identity,
/// and the certification bound accounts for the worst realized scale `1/(1-p)`
/// via the model-level `(1-p)` discount on the backbone product.
#[derive(Debug, Clone, Copy)]
pub struct DropLayer {
    pub p: f64,
    pub kind: DropKind,
}

impl DropLayer {
    pub fn new(p: f64, kind: DropKind) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("p_drop", format!("must be in [0, 1), got {p}")));
        }
        Ok(DropLayer { p, kind })
    }

    pub fn forward_t<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        training: bool,
        seed: u64,
    ) -> Result<Var> {
        if !training || self.p == 0.0 {
            return Ok(x);
        }
        match self.kind {
            DropKind::Dropout => tape.dropout(x, self.p, seed),
            DropKind::DropPath => tape.droppath(x, self.p, seed),
        }
    }
}
