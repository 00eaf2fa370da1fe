//! Dense row-major N-dimensional array.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major N-dimensional array with an optional gradient slot.
///
/// The gradient slot is filled by [`crate::params::ParamStore::accumulate`]
/// after a backward pass; plain activations never carry one.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(f).collect())
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::dim(
                "index",
                format!("index {index:?} for shape {:?}", self.shape),
            ));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::Bounds { index: i, len: d });
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shapes("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let shape = permuted_shape(&self.shape, perm)?;
        Ok(Self::from_parts(shape, permute_data(&self.data, &self.shape, perm)))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        } else {
            self.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("gradient of {} values for shape {:?}", g.len(), self.shape),
            ));
        }
        let slot = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += *v;
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn permuted_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::dim("permute", format!("perm {perm:?} for shape {shape:?}")));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::dim("permute", format!("perm {perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Copies `data` (laid out as `shape`) into the permuted layout.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Inverse of a permutation.
pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn permute_then_inverse_is_bit_exact() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64).sin());
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]).unwrap(), t.get(&[1, 2, 3]).unwrap());
        let back = p.permute(&invert_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn grad_slot_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[2, 2]);
        t.set_requires_grad(true);
        t.zero_grad();
        assert_eq!(t.grad().unwrap().len(), 4);
        assert!(t.accumulate_grad(&[1.0; 3]).is_err());
    }
}
