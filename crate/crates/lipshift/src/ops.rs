//! Raw spatial kernels shared by the tape ops and the layer operators.
//!
//! Activations are laid out `[N, H, W, C]` row-major. Each kernel comes with
//! its adjoint (used both as the tape VJP and as `apply_transpose` of the
//! corresponding linear operator).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims4<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [N,H,W,C] tensor, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Partial channel shift: the first four groups of `group` channels move one
/// pixel left/right/up/down with zero fill; remaining channels are copied.
/// With `transpose` the four directions are reversed, which is the adjoint of
/// the forward map.
pub fn shift_apply<S: Scalar>(x: &Tensor<S>, group: usize, transpose: bool) -> Result<Tensor<S>> {
    let (n, h, w, c) = dims4(x)?;
    if 4 * group > c {
        return Err(Error::Dimension(format!(
            "shift needs 4*{group} channels, input has {c}"
        )));
    }
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    let at = |ni: usize, hi: usize, wi: usize, ci: usize| ((ni * h + hi) * w + wi) * c + ci;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    // direction 0: left, 1: right, 2: up, 3: down
                    let dir = if ci < 4 * group { ci / group } else { 4 };
                    let dir = if transpose && dir < 4 { dir ^ 1 } else { dir };
                    let v = match dir {
                        0 => (wi + 1 < w).then(|| src[at(ni, hi, wi + 1, ci)]),
                        1 => (wi > 0).then(|| src[at(ni, hi, wi - 1, ci)]),
                        2 => (hi + 1 < h).then(|| src[at(ni, hi + 1, wi, ci)]),
                        3 => (hi > 0).then(|| src[at(ni, hi - 1, wi, ci)]),
                        _ => Some(src[at(ni, hi, wi, ci)]),
                    };
                    if let Some(v) = v {
                        out[at(ni, hi, wi, ci)] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// Gathers non-overlapping `p x p` patches into rows: output is
/// `[N*(H/p)*(W/p), p*p*C]`, patch pixels enumerated row-major.
pub fn patchify<S: Scalar>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (n, h, w, c) = dims4(x)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Dimension(format!(
            "spatial dims {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (oh, ow) = (h / p, w / p);
    let src = x.data();
    let cols = p * p * c;
    let mut out = vec![S::zero(); n * oh * ow * cols];
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let row = (ni * oh + i) * ow + j;
                for pi in 0..p {
                    for pj in 0..p {
                        let src_base = ((ni * h + i * p + pi) * w + j * p + pj) * c;
                        let dst_base = row * cols + (pi * p + pj) * c;
                        out[dst_base..dst_base + c]
                            .copy_from_slice(&src[src_base..src_base + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n * oh * ow, cols], out)
}

/// Adjoint of [`patchify`]: scatters patch rows back to `[N,H,W,C]`.
pub fn patchify_adjoint<S: Scalar>(
    g: &Tensor<S>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> Result<Tensor<S>> {
    let (oh, ow) = (h / p, w / p);
    let cols = p * p * c;
    if g.shape() != [n * oh * ow, cols] {
        return Err(Error::Dimension(format!(
            "patchify adjoint expects [{}, {cols}], got {:?}",
            n * oh * ow,
            g.shape()
        )));
    }
    let src = g.data();
    let mut out = vec![S::zero(); n * h * w * c];
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let row = (ni * oh + i) * ow + j;
                for pi in 0..p {
                    for pj in 0..p {
                        let dst_base = ((ni * h + i * p + pi) * w + j * p + pj) * c;
                        let src_base = row * cols + (pi * p + pj) * c;
                        out[dst_base..dst_base + c]
                            .copy_from_slice(&src[src_base..src_base + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// Non-overlapping `k x k` mean pooling, stride `k`.
pub fn avgpool<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let (n, h, w, c) = dims4(x)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Dimension(format!(
            "spatial dims {h}x{w} not divisible by pool kernel {k}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = S::from_usize(k * k).unwrap().recip();
    let src = x.data();
    let mut out = vec![S::zero(); n * oh * ow * c];
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for pi in 0..k {
                    for pj in 0..k {
                        let src_base = ((ni * h + i * k + pi) * w + j * k + pj) * c;
                        let dst_base = ((ni * oh + i) * ow + j) * c;
                        for ci in 0..c {
                            out[dst_base + ci] += src[src_base + ci] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

/// Adjoint of [`avgpool`]: distributes each pooled gradient over its window.
pub fn avgpool_adjoint<S: Scalar>(
    g: &Tensor<S>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) -> Result<Tensor<S>> {
    let (oh, ow) = (h / k, w / k);
    if g.shape() != [n, oh, ow, c] {
        return Err(Error::Dimension(format!(
            "avgpool adjoint expects [{n},{oh},{ow},{c}], got {:?}",
            g.shape()
        )));
    }
    let inv = S::from_usize(k * k).unwrap().recip();
    let src = g.data();
    let mut out = vec![S::zero(); n * h * w * c];
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for pi in 0..k {
                    for pj in 0..k {
                        let dst_base = ((ni * h + i * k + pi) * w + j * k + pj) * c;
                        let src_base = ((ni * oh + i) * ow + j) * c;
                        for ci in 0..c {
                            out[dst_base + ci] = src[src_base + ci] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// Mean over the full spatial extent: `[N,H,W,C] -> [N,C]`.
pub fn global_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, h, w, c) = dims4(x)?;
    let inv = S::from_usize(h * w).unwrap().recip();
    let src = x.data();
    let mut out = vec![S::zero(); n * c];
    for ni in 0..n {
        for s in 0..h * w {
            let base = (ni * h * w + s) * c;
            for ci in 0..c {
                out[ni * c + ci] += src[base + ci] * inv;
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_pool_adjoint<S: Scalar>(
    g: &Tensor<S>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Tensor<S>> {
    if g.shape() != [n, c] {
        return Err(Error::Dimension(format!(
            "global pool adjoint expects [{n},{c}], got {:?}",
            g.shape()
        )));
    }
    let inv = S::from_usize(h * w).unwrap().recip();
    let src = g.data();
    let mut out = vec![S::zero(); n * h * w * c];
    for ni in 0..n {
        for s in 0..h * w {
            let base = (ni * h * w + s) * c;
            for ci in 0..c {
                out[base + ci] = src[ni * c + ci] * inv;
            }
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// Pairwise channel sorting on the last axis: channels `(2i, 2i+1)` become
/// `(max, min)`. Returns the output together with a per-pair swap flag; the
/// Jacobian is the permutation encoded by those flags.
pub fn maxmin<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<bool>)> {
    let c = *x.shape().last().unwrap();
    if !c.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "maxmin needs an even channel count, got {c}"
        )));
    }
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    let mut swapped = vec![false; src.len() / 2];
    for (pair, chunk) in src.chunks_exact(2).enumerate() {
        let (a, b) = (chunk[0], chunk[1]);
        if a >= b {
            out[2 * pair] = a;
            out[2 * pair + 1] = b;
        } else {
            out[2 * pair] = b;
            out[2 * pair + 1] = a;
            swapped[pair] = true;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, swapped))
}

/// Converts a dataset-layout `[N,C,H,W]` tensor to the activation layout
/// `[N,H,W,C]`.
pub fn nchw_to_nhwc<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [N,C,H,W] tensor, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((ni * h + i) * w + j) * c + ci] = src[((ni * c + ci) * h + i) * w + j];
                }
            }
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// Inverse of [`nchw_to_nhwc`].
pub fn nhwc_to_nchw<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, h, w, c) = dims4(x)?;
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((ni * c + ci) * h + i) * w + j] = src[((ni * h + i) * w + j) * c + ci];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
