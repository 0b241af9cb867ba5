//! Minimal dense row-major tensor.
//!
//! Only what the layer zoo needs: matmul, pointwise arithmetic on equal
//! shapes or a scalar operand, and axis reductions. No broadcasting beyond
//! scalars. Tensors are immutable value types; every op allocates its result.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Pointwise operation selector for [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
}

/// Reduction selector for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: (0..numel).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) into {shape:?} ({numel})",
                self.shape,
                self.numel()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn elementwise(&self, other: &Self, kind: ElemKind) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise {kind:?} on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match kind {
                ElemKind::Add => a + b,
                ElemKind::Sub => a - b,
                ElemKind::Mul => a * b,
            })
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, ElemKind::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, ElemKind::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, ElemKind::Mul)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: S) -> Self {
        self.map(|v| v + c)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.rank(), 2, "transpose2 on rank-{} tensor", self.rank());
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "dot on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_l2(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Reduces over the given axes. Mean divides by the reduced count; max
    /// keeps the first maximum in row-major scan order (ties route there).
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Self> {
        let (out_shape, _) = self.reduce_layout(axes)?;
        let plan = self.reduce_plan(axes)?;
        let out_numel: usize = out_shape.iter().product::<usize>().max(1);
        let mut out = match kind {
            ReduceKind::Max => vec![S::neg_infinity(); out_numel],
            _ => vec![S::zero(); out_numel],
        };
        for (i, &v) in self.data.iter().enumerate() {
            let o = plan[i];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[o] += v,
                ReduceKind::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
            }
        }
        if kind == ReduceKind::Mean {
            let count = S::from_usize(self.numel() / out_numel).unwrap();
            for v in &mut out {
                *v = *v / count;
            }
        }
        let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        Tensor::new(shape, out)
    }

    /// Output shape after dropping `axes`, plus the sorted axis list.
    pub(crate) fn reduce_layout(&self, axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::Dimension(format!("duplicate reduction axes {axes:?}")));
        }
        for &a in &sorted {
            if a >= self.rank() {
                return Err(Error::Dimension(format!(
                    "axis {a} out of range for shape {:?}",
                    self.shape
                )));
            }
        }
        let out_shape = self
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !sorted.contains(i))
            .map(|(_, &d)| d)
            .collect();
        Ok((out_shape, sorted))
    }

    /// Maps each input linear index to its output linear index under
    /// reduction over `axes`.
    pub(crate) fn reduce_plan(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let (out_shape, sorted) = self.reduce_layout(axes)?;
        let kept: Vec<usize> = (0..self.rank()).filter(|i| !sorted.contains(i)).collect();
        let mut out_strides = vec![0usize; self.rank()];
        let mut stride = 1usize;
        for (pos, &axis) in kept.iter().enumerate().rev() {
            out_strides[axis] = stride;
            stride *= out_shape.get(pos).copied().unwrap_or(1);
        }
        let mut plan = vec![0usize; self.numel()];
        let mut idx = vec![0usize; self.rank()];
        for (i, slot) in plan.iter_mut().enumerate() {
            let mut o = 0usize;
            for (a, &ix) in idx.iter().enumerate() {
                o += out_strides[a] * ix;
            }
            *slot = o;
            // advance the multi-index
            if i + 1 < self.numel() {
                for a in (0..self.rank()).rev() {
                    idx[a] += 1;
                    if idx[a] < self.shape[a] {
                        break;
                    }
                    idx[a] = 0;
                }
            }
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor64::eye(2);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = p.matmul(&b).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor64::zeros(vec![2, 3]);
        let b = Tensor64::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let z = Tensor64::zeros(vec![3]);
        assert_eq!(x.add(&z).unwrap(), x);
    }

    #[test]
    fn scale_minus_one_twice_is_identity() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        assert_eq!(x.scale(-1.0).scale(-1.0), x);
    }

    #[test]
    fn mean_all() {
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let m = x.reduce(ReduceKind::Mean, &[0]).unwrap();
        assert_relative_eq!(m.item(), 3.0);
    }

    #[test]
    fn sum_axis_of_ones() {
        let x = Tensor64::ones(vec![2, 3]);
        let s = x.reduce(ReduceKind::Sum, &[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 3.0]);
    }

    #[test]
    fn max_reduce() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 5.0, -1.0, 2.0]).unwrap();
        let m = x.reduce(ReduceKind::Max, &[1]).unwrap();
        assert_eq!(m.data(), &[5.0, 2.0]);
    }

    #[test]
    fn invalid_axis_errors() {
        let x = Tensor64::ones(vec![2, 3]);
        assert!(x.reduce(ReduceKind::Sum, &[2]).is_err());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let y = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let xc = x.clone();
        let yc = y.clone();
        let _ = x.add(&y).unwrap();
        let _ = x.mul(&y).unwrap();
        let _ = x.reduce(ReduceKind::Mean, &[0]).unwrap();
        assert_eq!(x, xc);
        assert_eq!(y, yc);
    }

    type Tensor64 = Tensor<f64>;
}
