//! Raw slice kernels behind the graph operations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::strides;

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat position of `out`, the flat offset into a tensor of `shape`
/// broadcast up to `out`.
pub fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src = strides(shape);
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i + shape.len() >= rank {
            let j = i + shape.len() - rank;
            eff[i] = if shape[j] == 1 { 0 } else { src[j] };
        }
    }
    let n: usize = out.iter().product();
    let mut res = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        res.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    res
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - m).exp();
                y[base + j * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                y[base + j * inner] *= inv;
            }
        }
    }
    y
}

pub fn log_softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                s += (x[base + j * inner] - m).exp();
            }
            let lse = m + s.ln();
            for j in 0..len {
                y[base + j * inner] = x[base + j * inner] - lse;
            }
        }
    }
    y
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Geometry of a 3D convolution over `[B, C, D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(Error::shapes("conv3d", x, w));
        }
        if x[1] != w[1] {
            return Err(Error::dim(
                "conv3d",
                format!("input has {} channels, kernel expects {} (shapes {x:?}, {w:?})", x[1], w[1]),
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || x[a + 2] + 2 * pad[a] < w[a + 2] {
                return Err(Error::dim(
                    "conv3d",
                    format!("extent {} with padding {} smaller than kernel {}", x[a + 2], pad[a], w[a + 2]),
                ));
            }
            output[a] = (x[a + 2] + 2 * pad[a] - w[a + 2]) / stride[a] + 1;
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            input: [x[2], x[3], x[4]],
            kernel: [w[2], w[3], w[4]],
            stride,
            pad,
            output,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }
}

const PAD: usize = usize::MAX;

/// Column map of one batch item: for row `(ci, kd, kh, kw)` and output voxel
/// `o`, the input offset within the item, or `PAD` for padding.
fn im2col_index(g: &ConvGeom) -> Vec<usize> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let mut idx = Vec::with_capacity(g.cin * kd * kh * kw * od * oh * ow);
    let coord = |o: usize, k: usize, a: usize, n: usize| {
        let v = (o * g.stride[a] + k) as isize - g.pad[a] as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    };
    for ci in 0..g.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    for z in 0..od {
                        for y in 0..oh {
                            for x in 0..ow {
                                let pos = match (coord(z, a, 0, id), coord(y, b, 1, ih), coord(x, c, 2, iw)) {
                                    (Some(z), Some(y), Some(x)) => ((ci * id + z) * ih + y) * iw + x,
                                    _ => PAD,
                                };
                                idx.push(pos);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

fn fill_cols<T: Scalar>(idx: &[usize], x: &[T], cols: &mut [T]) {
    for (c, &i) in cols.iter_mut().zip(idx) {
        *c = if i == PAD { T::zero() } else { x[i] };
    }
}

pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ovol = g.output.iter().product::<usize>();
    let ivol = g.cin * g.input.iter().product::<usize>();
    let k = g.cin * g.kernel.iter().product::<usize>();
    let mut out = vec![T::zero(); g.batch * g.cout * ovol];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(ovol).enumerate() {
            let v = b[i % g.cout];
            chunk.iter_mut().for_each(|o| *o = v);
        }
    }
    let idx = im2col_index(g);
    let mut cols = vec![T::zero(); k * ovol];
    for b in 0..g.batch {
        fill_cols(&idx, &x[b * ivol..(b + 1) * ivol], &mut cols);
        gemm_acc(w, &cols, &mut out[b * g.cout * ovol..(b + 1) * g.cout * ovol], g.cout, k, ovol);
    }
    out
}

/// Returns (grad_x, grad_w, grad_bias).
pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ovol = g.output.iter().product::<usize>();
    let ivol = g.cin * g.input.iter().product::<usize>();
    let k = g.cin * g.kernel.iter().product::<usize>();
    let mut gx = vec![T::zero(); if need_x { x.len() } else { 0 }];
    let mut gw = vec![T::zero(); if need_w { w.len() } else { 0 }];
    let idx = im2col_index(g);
    let mut cols = vec![T::zero(); k * ovol];
    for b in 0..g.batch {
        let go = &gout[b * g.cout * ovol..(b + 1) * g.cout * ovol];
        if need_w {
            fill_cols(&idx, &x[b * ivol..(b + 1) * ivol], &mut cols);
            gemm_nt_acc(go, &cols, &mut gw, g.cout, ovol, k);
        }
        if need_x {
            cols.iter_mut().for_each(|c| *c = T::zero());
            gemm_tn_acc(w, go, &mut cols, g.cout, k, ovol);
            let gxb = &mut gx[b * ivol..(b + 1) * ivol];
            for (&i, &c) in idx.iter().zip(&cols) {
                if i != PAD {
                    gxb[i] += c;
                }
            }
        }
    }
    let mut gb = vec![T::zero(); g.cout];
    for (i, chunk) in gout.chunks(ovol).enumerate() {
        gb[i % g.cout] += chunk.iter().copied().sum::<T>();
    }
    (gx, gw, gb)
}
