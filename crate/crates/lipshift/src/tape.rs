//! Reverse-mode autodiff over a linear tape.
//!
//! Operations record their inputs and a VJP closure as they execute; the tape
//! is therefore already in topological order and `backward` visits each node
//! exactly once in reverse. Gradients accumulate across repeated backward
//! calls until [`Tape::reset_grads`].
//!
//! The op set is exactly what the layer zoo needs: matmul, pointwise
//! arithmetic, axis reductions, 2-d row/column broadcasts, label
//! gather/scatter, the spatial kernels from [`crate::ops`], a softmax
//! cross-entropy head, and a differentiable spectral norm whose gradient is
//! the rank-one outer product of the converged singular vectors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::spectral::{self, MatrixOperator};
use crate::tensor::{ReduceKind, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type VjpFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>;

struct Node<S> {
    op: &'static str,
    value: Tensor<S>,
    grad: Tensor<S>,
    parents: Vec<usize>,
    vjp: Option<VjpFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        parents: Vec<usize>,
        vjp: Option<VjpFn<S>>,
    ) -> Var {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.nodes.push(Node { op, value, grad, parents, vjp });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push("leaf", value, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = Tensor::zeros(n.value.shape().to_vec());
        }
    }

    /// Accumulates `d root / d leaf` into every node's gradient. The root
    /// must be scalar-valued.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        // Propagate through a scratch buffer so earlier backward calls do not
        // leak into this pass; the pass result is then added to the stored
        // accumulators.
        let mut local: Vec<Tensor<S>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        local[root.0].data_mut()[0] = S::one();

        for i in (0..=root.0).rev() {
            let contribs = {
                let node = &self.nodes[i];
                match &node.vjp {
                    Some(f) => f(&local[i]),
                    None => continue,
                }
            };
            let parents = self.nodes[i].parents.clone();
            debug_assert_eq!(parents.len(), contribs.len());
            for (p, c) in parents.into_iter().zip(contribs) {
                local[p] = local[p].add(&c)?;
            }
        }
        for (n, l) in self.nodes.iter_mut().zip(local) {
            n.grad = n.grad.add(&l)?;
        }
        Ok(())
    }

    // ── pointwise and linear algebra ────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.matmul(&bv)?;
        let vjp: VjpFn<S> = Box::new(move |g| {
            vec![
                g.matmul(&bv.transpose2()).unwrap(),
                av.transpose2().matmul(g).unwrap(),
            ]
        });
        Ok(self.push("matmul", out, vec![a.0, b.0], Some(vjp)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let vjp: VjpFn<S> = Box::new(|g| vec![g.clone(), g.clone()]);
        Ok(self.push("add", out, vec![a.0, b.0], Some(vjp)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let vjp: VjpFn<S> = Box::new(|g| vec![g.clone(), g.scale(-S::one())]);
        Ok(self.push("sub", out, vec![a.0, b.0], Some(vjp)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = av.mul(&bv)?;
        let vjp: VjpFn<S> =
            Box::new(move |g| vec![g.mul(&bv).unwrap(), g.mul(&av).unwrap()]);
        Ok(self.push("mul", out, vec![a.0, b.0], Some(vjp)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "div on shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::from_fn(av.shape().to_vec(), |i| av.data()[i] / bv.data()[i]);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let da = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] / bv.data()[i]);
            let db = Tensor::from_fn(g.shape().to_vec(), |i| {
                -g.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i])
            });
            vec![da, db]
        });
        Ok(self.push("div", out, vec![a.0, b.0], Some(vjp)))
    }

    /// Elementwise a / b where entries with `b <= floor` yield 0 with zero
    /// gradient (used for margin / pair-constant ratios).
    pub fn div_guarded(&mut self, a: Var, b: Var, floor: S) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "div_guarded on shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::from_fn(av.shape().to_vec(), |i| {
            if bv.data()[i] <= floor {
                S::zero()
            } else {
                av.data()[i] / bv.data()[i]
            }
        });
        let vjp: VjpFn<S> = Box::new(move |g| {
            let da = Tensor::from_fn(g.shape().to_vec(), |i| {
                if bv.data()[i] <= floor {
                    S::zero()
                } else {
                    g.data()[i] / bv.data()[i]
                }
            });
            let db = Tensor::from_fn(g.shape().to_vec(), |i| {
                if bv.data()[i] <= floor {
                    S::zero()
                } else {
                    -g.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i])
                }
            });
            vec![da, db]
        });
        Ok(self.push("div_guarded", out, vec![a.0, b.0], Some(vjp)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).scale(c);
        let vjp: VjpFn<S> = Box::new(move |g| vec![g.scale(c)]);
        self.push("scale", out, vec![a.0], Some(vjp))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).add_scalar(c);
        let vjp: VjpFn<S> = Box::new(|g| vec![g.clone()]);
        self.push("add_scalar", out, vec![a.0], Some(vjp))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|v| v.abs());
        let vjp: VjpFn<S> = Box::new(move |g| {
            vec![Tensor::from_fn(g.shape().to_vec(), |i| {
                if av.data()[i] < S::zero() {
                    -g.data()[i]
                } else {
                    g.data()[i]
                }
            })]
        });
        self.push("abs", out, vec![a.0], Some(vjp))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.sqrt());
        let ov = out.clone();
        let half = S::from_f(0.5);
        let vjp: VjpFn<S> = Box::new(move |g| {
            vec![Tensor::from_fn(g.shape().to_vec(), |i| {
                let d = ov.data()[i];
                if d == S::zero() {
                    S::zero()
                } else {
                    g.data()[i] * half / d
                }
            })]
        });
        self.push("sqrt", out, vec![a.0], Some(vjp))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|v| v.max(lo).min(hi));
        let vjp: VjpFn<S> = Box::new(move |g| {
            vec![Tensor::from_fn(g.shape().to_vec(), |i| {
                let v = av.data()[i];
                if v > lo && v < hi {
                    g.data()[i]
                } else {
                    S::zero()
                }
            })]
        });
        self.push("clamp", out, vec![a.0], Some(vjp))
    }

    /// Elementwise multiply by a constant mask (not a tape node).
    pub fn mul_mask(&mut self, a: Var, mask: Tensor<S>) -> Result<Var> {
        let out = self.value(a).mul(&mask)?;
        let vjp: VjpFn<S> = Box::new(move |g| vec![g.mul(&mask).unwrap()]);
        Ok(self.push("mul_mask", out, vec![a.0], Some(vjp)))
    }

    /// Multiply every entry of `a` by the scalar-valued node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension(format!(
                "mul_scalar needs a scalar node, got {:?}",
                self.value(s).shape()
            )));
        }
        let av = self.value(a).clone();
        let sv = self.value(s).item();
        let out = av.scale(sv);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let da = g.scale(sv);
            let ds = Tensor::scalar(g.dot(&av).unwrap());
            vec![da, ds]
        });
        Ok(self.push("mul_scalar", out, vec![a.0, s.0], Some(vjp)))
    }

    /// Add a constant tensor (not a tape node).
    pub fn add_const(&mut self, a: Var, t: Tensor<S>) -> Result<Var> {
        let out = self.value(a).add(&t)?;
        let vjp: VjpFn<S> = Box::new(|g| vec![g.clone()]);
        Ok(self.push("add_const", out, vec![a.0], Some(vjp)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                self.value(a).shape()
            )));
        }
        let out = self.value(a).transpose2();
        let vjp: VjpFn<S> = Box::new(|g| vec![g.transpose2()]);
        Ok(self.push("transpose", out, vec![a.0], Some(vjp)))
    }

    /// Normalizes each row of a matrix to unit l2 norm. Rows with norm below
    /// `floor` are passed through unchanged (degenerate-row fallback).
    pub fn row_normalize(&mut self, a: Var, floor: S) -> Result<Var> {
        let av = self.value(a).clone();
        if av.rank() != 2 {
            return Err(Error::Dimension(format!(
                "row_normalize needs a matrix, got {:?}",
                av.shape()
            )));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut norms = vec![S::one(); r];
        let mut out = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let n = row.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
            let div = if n <= floor { S::one() } else { n };
            norms[i] = div;
            for j in 0..c {
                out.data_mut()[i * c + j] = row[j] / div;
            }
        }
        let ov = out.clone();
        let vjp: VjpFn<S> = Box::new(move |g| {
            // d(w/|w|) : (g - (g . w_hat) w_hat) / |w|, identity for fallback rows
            let mut d = Tensor::zeros(vec![r, c]);
            for i in 0..r {
                let n = norms[i];
                let gh = &g.data()[i * c..(i + 1) * c];
                let wh = &ov.data()[i * c..(i + 1) * c];
                let fallback = n == S::one() && av.data()[i * c..(i + 1) * c] == *wh;
                let proj = gh
                    .iter()
                    .zip(wh)
                    .fold(S::zero(), |acc, (&gv, &wv)| acc + gv * wv);
                for j in 0..c {
                    let v = if fallback {
                        gh[j]
                    } else {
                        (gh[j] - proj * wh[j]) / n
                    };
                    d.data_mut()[i * c + j] = v;
                }
            }
            vec![d]
        });
        Ok(self.push("row_normalize", out, vec![a.0], Some(vjp)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let in_shape = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape)?;
        let vjp: VjpFn<S> = Box::new(move |g| vec![g.reshape(in_shape.clone()).unwrap()]);
        Ok(self.push("reshape", out, vec![a.0], Some(vjp)))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let av = self.value(a).clone();
        let out = av.reduce(kind, axes)?;
        let plan = av.reduce_plan(axes)?;
        let in_shape = av.shape().to_vec();
        let count = av.numel() / out.numel();
        let vjp: VjpFn<S> = match kind {
            ReduceKind::Sum => Box::new(move |g| {
                vec![Tensor::from_fn(in_shape.clone(), |i| g.data()[plan[i]])]
            }),
            ReduceKind::Mean => {
                let inv = S::from_usize(count).unwrap().recip();
                Box::new(move |g| {
                    vec![Tensor::from_fn(in_shape.clone(), |i| g.data()[plan[i]] * inv)]
                })
            }
            ReduceKind::Max => {
                // first-maximum-in-scan-order tie rule
                let mut argmax: Vec<usize> = vec![usize::MAX; out.numel()];
                for (i, &o) in plan.iter().enumerate() {
                    if argmax[o] == usize::MAX || av.data()[i] > av.data()[argmax[o]] {
                        argmax[o] = i;
                    }
                }
                Box::new(move |g| {
                    let mut d = Tensor::zeros(in_shape.clone());
                    for (o, &i) in argmax.iter().enumerate() {
                        d.data_mut()[i] = g.data()[o];
                    }
                    vec![d]
                })
            }
        };
        Ok(self.push("reduce", out, vec![a.0], Some(vjp)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, ReduceKind::Sum, &axes).expect("full reduce")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, ReduceKind::Mean, &axes).expect("full reduce")
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, ReduceKind::Max, &axes).expect("full reduce")
    }

    /// Scalar l2 norm of any tensor.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a).expect("same node");
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    // ── 2-d broadcasts ──────────────────────────────────────────────

    fn check_row_vec(&self, a: Var, v: Var, op: &str) -> Result<(usize, usize)> {
        let ash = self.value(a).shape().to_vec();
        let vsh = self.value(v).shape().to_vec();
        if ash.len() != 2 || vsh != [ash[1]] {
            return Err(Error::Dimension(format!("{op} on {ash:?} with row vector {vsh:?}")));
        }
        Ok((ash[0], ash[1]))
    }

    fn check_col_vec(&self, a: Var, v: Var, op: &str) -> Result<(usize, usize)> {
        let ash = self.value(a).shape().to_vec();
        let vsh = self.value(v).shape().to_vec();
        if ash.len() != 2 || vsh != [ash[0]] {
            return Err(Error::Dimension(format!("{op} on {ash:?} with column vector {vsh:?}")));
        }
        Ok((ash[0], ash[1]))
    }

    /// `out[i,j] = a[i,j] + v[j]`
    pub fn badd_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.check_row_vec(a, v, "badd_row")?;
        let av = self.value(a).clone();
        let vv = self.value(v).clone();
        let out = Tensor::from_fn(vec![r, c], |i| av.data()[i] + vv.data()[i % c]);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let dv = g.reduce(ReduceKind::Sum, &[0]).unwrap();
            vec![g.clone(), dv]
        });
        Ok(self.push("badd_row", out, vec![a.0, v.0], Some(vjp)))
    }

    /// `out[i,j] = a[i,j] * v[j]`
    pub fn bmul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.check_row_vec(a, v, "bmul_row")?;
        let av = self.value(a).clone();
        let vv = self.value(v).clone();
        let out = Tensor::from_fn(vec![r, c], |i| av.data()[i] * vv.data()[i % c]);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let da = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * vv.data()[i % c]);
            let prod = g.mul(&av).unwrap();
            let dv = prod.reduce(ReduceKind::Sum, &[0]).unwrap();
            vec![da, dv]
        });
        Ok(self.push("bmul_row", out, vec![a.0, v.0], Some(vjp)))
    }

    /// `out[i,j] = a[i,j] + v[i]`
    pub fn badd_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.check_col_vec(a, v, "badd_col")?;
        let av = self.value(a).clone();
        let vv = self.value(v).clone();
        let out = Tensor::from_fn(vec![r, c], |i| av.data()[i] + vv.data()[i / c]);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let dv = g.reduce(ReduceKind::Sum, &[1]).unwrap();
            vec![g.clone(), dv]
        });
        Ok(self.push("badd_col", out, vec![a.0, v.0], Some(vjp)))
    }

    /// `out[i,j] = a[i,j] / v[i]`
    pub fn bdiv_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.check_col_vec(a, v, "bdiv_col")?;
        let av = self.value(a).clone();
        let vv = self.value(v).clone();
        let out = Tensor::from_fn(vec![r, c], |i| av.data()[i] / vv.data()[i / c]);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let da = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] / vv.data()[i / c]);
            let dv = Tensor::from_fn(vec![g.shape()[0]], |i| {
                let mut s = S::zero();
                let cc = g.shape()[1];
                for j in 0..cc {
                    s += g.data()[i * cc + j] * av.data()[i * cc + j];
                }
                -s / (vv.data()[i] * vv.data()[i])
            });
            vec![da, dv]
        });
        Ok(self.push("bdiv_col", out, vec![a.0, v.0], Some(vjp)))
    }

    // ── label indexing ──────────────────────────────────────────────

    /// `out[b] = z[b, labels[b]]`
    pub fn select_label(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let zv = self.value(z).clone();
        if zv.rank() != 2 || zv.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "select_label on {:?} with {} labels",
                zv.shape(),
                labels.len()
            )));
        }
        let c = zv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Dimension(format!("label {bad} out of range for {c} classes")));
        }
        let labels = labels.to_vec();
        let out = Tensor::from_fn(vec![labels.len()], |b| zv.data()[b * c + labels[b]]);
        let lc = labels.clone();
        let shape = zv.shape().to_vec();
        let vjp: VjpFn<S> = Box::new(move |g| {
            let mut d = Tensor::zeros(shape.clone());
            for (b, &y) in lc.iter().enumerate() {
                d.data_mut()[b * c + y] = g.data()[b];
            }
            vec![d]
        });
        Ok(self.push("select_label", out, vec![z.0], Some(vjp)))
    }

    /// `out[b, j] = k[j, labels[b]]`: the per-sample column of a pair matrix.
    pub fn gather_cols(&mut self, k: Var, labels: &[usize]) -> Result<Var> {
        let kv = self.value(k).clone();
        if kv.rank() != 2 || kv.shape()[0] != kv.shape()[1] {
            return Err(Error::Dimension(format!(
                "gather_cols needs a square matrix, got {:?}",
                kv.shape()
            )));
        }
        let c = kv.shape()[0];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Dimension(format!("label {bad} out of range for {c} classes")));
        }
        let labels = labels.to_vec();
        let out = Tensor::from_fn(vec![labels.len(), c], |i| {
            let (b, j) = (i / c, i % c);
            kv.data()[j * c + labels[b]]
        });
        let vjp: VjpFn<S> = Box::new(move |g| {
            let mut d = Tensor::zeros(vec![c, c]);
            for (b, &y) in labels.iter().enumerate() {
                for j in 0..c {
                    d.data_mut()[j * c + y] += g.data()[b * c + j];
                }
            }
            vec![d]
        });
        Ok(self.push("gather_cols", out, vec![k.0], Some(vjp)))
    }

    // ── layer kernels ───────────────────────────────────────────────

    pub fn maxmin(&mut self, a: Var) -> Result<Var> {
        let (out, swapped) = ops::maxmin(self.value(a))?;
        let shape = out.shape().to_vec();
        let vjp: VjpFn<S> = Box::new(move |g| {
            let mut d = Tensor::zeros(shape.clone());
            for (pair, &sw) in swapped.iter().enumerate() {
                let (g0, g1) = (g.data()[2 * pair], g.data()[2 * pair + 1]);
                if sw {
                    d.data_mut()[2 * pair] = g1;
                    d.data_mut()[2 * pair + 1] = g0;
                } else {
                    d.data_mut()[2 * pair] = g0;
                    d.data_mut()[2 * pair + 1] = g1;
                }
            }
            vec![d]
        });
        Ok(self.push("maxmin", out, vec![a.0], Some(vjp)))
    }

    pub fn shift(&mut self, a: Var, group: usize) -> Result<Var> {
        let out = ops::shift_apply(self.value(a), group, false)?;
        let vjp: VjpFn<S> = Box::new(move |g| vec![ops::shift_apply(g, group, true).unwrap()]);
        Ok(self.push("shift", out, vec![a.0], Some(vjp)))
    }

    pub fn patchify(&mut self, a: Var, p: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        let out = ops::patchify(self.value(a), p)?;
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let vjp: VjpFn<S> =
            Box::new(move |g| vec![ops::patchify_adjoint(g, n, h, w, c, p).unwrap()]);
        Ok(self.push("patchify", out, vec![a.0], Some(vjp)))
    }

    pub fn avgpool(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        let out = ops::avgpool(self.value(a), k)?;
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let vjp: VjpFn<S> =
            Box::new(move |g| vec![ops::avgpool_adjoint(g, n, h, w, c, k).unwrap()]);
        Ok(self.push("avgpool", out, vec![a.0], Some(vjp)))
    }

    pub fn global_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        let out = ops::global_pool(self.value(a))?;
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let vjp: VjpFn<S> =
            Box::new(move |g| vec![ops::global_pool_adjoint(g, n, h, w, c).unwrap()]);
        Ok(self.push("global_pool", out, vec![a.0], Some(vjp)))
    }

    /// Training-time dropout: Bernoulli keep mask scaled by 1/(1-p).
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("p_drop", format!("rate {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = S::from_f(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(self.value(a).shape().to_vec(), |_| {
            if rng.gen::<f64>() < p {
                S::zero()
            } else {
                keep
            }
        });
        self.mul_mask(a, mask)
    }

    /// Training-time drop-path on a `[B, ...]` batch: whole samples are
    /// zeroed with probability p and survivors scaled by 1/(1-p).
    pub fn droppath(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("p_drop", format!("rate {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let b = shape[0];
        let per = self.value(a).numel() / b;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = S::from_f(1.0 / (1.0 - p));
        let rows: Vec<S> = (0..b)
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let mask = Tensor::from_fn(shape, |i| rows[i / per]);
        self.mul_mask(a, mask)
    }

    // ── composite heads ─────────────────────────────────────────────

    /// `out[i,j] = ||w_i - w_j||_2` over the rows of a matrix.
    pub fn pairwise_row_dist(&mut self, w: Var) -> Result<Var> {
        let wv = self.value(w).clone();
        if wv.rank() != 2 {
            return Err(Error::Dimension(format!(
                "pairwise_row_dist needs a matrix, got {:?}",
                wv.shape()
            )));
        }
        let (r, c) = (wv.shape()[0], wv.shape()[1]);
        let mut out = Tensor::zeros(vec![r, r]);
        for i in 0..r {
            for j in (i + 1)..r {
                let mut s = S::zero();
                for t in 0..c {
                    let d = wv.data()[i * c + t] - wv.data()[j * c + t];
                    s += d * d;
                }
                let d = s.sqrt();
                out.data_mut()[i * r + j] = d;
                out.data_mut()[j * r + i] = d;
            }
        }
        let dv = out.clone();
        let vjp: VjpFn<S> = Box::new(move |g| {
            let mut dw = Tensor::zeros(vec![r, c]);
            for i in 0..r {
                for j in 0..r {
                    if i == j {
                        continue;
                    }
                    let dist = dv.data()[i * r + j];
                    if dist == S::zero() {
                        continue;
                    }
                    let coeff = g.data()[i * r + j] / dist;
                    for t in 0..c {
                        let diff = wv.data()[i * c + t] - wv.data()[j * c + t];
                        dw.data_mut()[i * c + t] += coeff * diff;
                        dw.data_mut()[j * c + t] -= coeff * diff;
                    }
                }
            }
            vec![dw]
        });
        Ok(self.push("pairwise_row_dist", out, vec![w.0], Some(vjp)))
    }

    /// Largest singular value of a matrix node as a differentiable scalar.
    /// Forward runs power iteration to `tol`; the VJP is the rank-one outer
    /// product `u v^T` of the converged singular vectors.
    pub fn spectral_sigma(&mut self, a: Var, max_iters: usize, tol: f64, seed: u64) -> Result<Var> {
        let av = self.value(a).clone();
        let op = MatrixOperator::new(av);
        let (est, u, v) = spectral::power_iteration_vectors(&op, max_iters, tol, seed)?;
        let (r, c) = (op.matrix().shape()[0], op.matrix().shape()[1]);
        let vjp: VjpFn<S> = Box::new(move |g| {
            let gs = g.item();
            let mut d = Tensor::zeros(vec![r, c]);
            for i in 0..r {
                for j in 0..c {
                    d.data_mut()[i * c + j] = gs * u.data()[i] * v.data()[j];
                }
            }
            vec![d]
        });
        Ok(self.push(
            "spectral_sigma",
            Tensor::scalar(S::from_f(est.value)),
            vec![a.0],
            Some(vjp),
        ))
    }

    /// Mean softmax cross-entropy of a `[B, C]` logit batch against labels.
    pub fn softmax_ce(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let zv = self.value(z).clone();
        if zv.rank() != 2 || zv.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_ce on {:?} with {} labels",
                zv.shape(),
                labels.len()
            )));
        }
        let (b, c) = (zv.shape()[0], zv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Dimension(format!("label {bad} out of range for {c} classes")));
        }
        if !zv.is_finite() {
            return Err(Error::Train("non-finite logits in cross-entropy".into()));
        }
        let labels = labels.to_vec();
        let mut total = S::zero();
        let mut probs = vec![S::zero(); b * c];
        for (bi, row) in zv.data().chunks_exact(c).enumerate() {
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[bi * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[bi * c + j] = probs[bi * c + j] / denom;
            }
            let lse = m + denom.ln();
            total += lse - row[labels[bi]];
        }
        let loss = total / S::from_usize(b).unwrap();
        let inv_b = S::from_usize(b).unwrap().recip();
        let vjp: VjpFn<S> = Box::new(move |g| {
            let gs = g.item() * inv_b;
            let mut d = Tensor::zeros(vec![b, c]);
            for bi in 0..b {
                for j in 0..c {
                    let indicator = if j == labels[bi] { S::one() } else { S::zero() };
                    d.data_mut()[bi * c + j] = gs * (probs[bi * c + j] - indicator);
                }
            }
            vec![d]
        });
        Ok(self.push("softmax_ce", Tensor::scalar(loss), vec![z.0], Some(vjp)))
    }
}
