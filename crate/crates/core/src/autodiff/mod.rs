//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order.

pub mod kernels;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{invert_perm, numel, permute_data, permuted_shape, Tensor};

use kernels::ConvGeom;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Gelu,
}

enum Op<T: Scalar> {
    Leaf,
    Binary { a: Var, b: Var, kind: BinKind },
    Unary { a: Var, kind: UnKind },
    Scale { a: Var, c: T },
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { a: Var, index: Arc<[Option<usize>]> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool3d { a: Var, kernel: [usize; 3] },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A named value captured during a forward pass (attention maps, etc.).
#[derive(Clone, Debug)]
pub struct Tap<T: Scalar = f64> {
    pub label: String,
    pub value: Tensor<T>,
}

/// Computation tape.
///
/// Parameters are pulled in lazily from the bound [`ParamStore`]; each one is
/// materialized at most once per graph, so gradients from every use site are
/// summed into the same leaf.
pub struct Graph<'p, T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
    taps: Option<Vec<Tap<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`, zeros if `v` did not influence the loss.
    pub fn tensor(&self, g: &Graph<'_, T>, v: Var) -> Tensor<T> {
        let shape = g.shape(v).to_vec();
        match self.get(v) {
            Some(d) => Tensor::from_parts(shape, d.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            training: false,
            rng: None,
            taps: None,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        let mut g = Self::new();
        g.bound = vec![None; store.len()];
        g.store = Some(store);
        g
    }

    /// Training mode enables stochastic gates, drawing from `rng`.
    pub fn train(mut self, rng: ChaCha8Rng) -> Self {
        self.training = true;
        self.rng = Some(rng);
        self
    }

    pub fn record_taps(mut self) -> Self {
        self.taps = Some(Vec::new());
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn recording(&self) -> bool {
        self.taps.is_some()
    }

    pub fn tap(&mut self, label: impl Into<String>, v: Var) {
        if let Some(taps) = self.taps.as_mut() {
            taps.push(Tap {
                label: label.into(),
                value: self.nodes[v.0].value.clone(),
            });
        }
    }

    pub fn take_taps(&mut self) -> Vec<Tap<T>> {
        self.taps.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Uniform draw in [0, 1); only meaningful in training mode.
    pub fn draw(&mut self) -> Option<f64> {
        self.rng.as_mut().map(|r| r.random::<f64>())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store bound");
        let p = store.get(id);
        let mut value = p.value.clone();
        value.set_requires_grad(false);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: p.trainable,
        });
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters materialized in this graph with their leaf handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Copies out the gradient of every bound parameter that received one.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        ParamGrads(
            self.bound_params()
                .filter_map(|(id, v)| grads.get(v).map(|g| (id, g.to_vec())))
                .collect(),
        )
    }

    // ---------------------------------------------------------------- ops

    fn binary(&mut self, a: Var, b: Var, kind: BinKind, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = if sa == sb {
            let xa = self.value(a).data();
            let xb = self.value(b).data();
            let data: Vec<T> = match kind {
                BinKind::Add => xa.iter().zip(xb).map(|(x, y)| *x + *y).collect(),
                BinKind::Sub => xa.iter().zip(xb).map(|(x, y)| *x - *y).collect(),
                BinKind::Mul => xa.iter().zip(xb).map(|(x, y)| *x * *y).collect(),
                BinKind::Div => xa.iter().zip(xb).map(|(x, y)| *x / *y).collect(),
            };
            Tensor::from_parts(sa.to_vec(), data)
        } else {
            let shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::shapes(name, sa, sb))?;
            let ia = kernels::broadcast_index(sa, &shape);
            let ib = kernels::broadcast_index(sb, &shape);
            let xa = self.value(a).data();
            let xb = self.value(b).data();
            let f = |x: T, y: T| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(xa[i], xb[j])).collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Binary { a, b, kind }, &[a, b]))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div, "div")
    }

    fn unary(&mut self, a: Var, kind: UnKind) -> Var {
        let f: fn(T) -> T = match kind {
            UnKind::Neg => |x| -x,
            UnKind::Exp => |x| x.exp(),
            UnKind::Log => |x| x.ln(),
            UnKind::Gelu => kernels::gelu,
        };
        let out = self.value(a).map(f);
        self.push(out, Op::Unary { a, kind }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Neg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Log)
    }

    /// Smooth nonlinearity (GELU, tanh form).
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Gelu)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    /// Batched matrix product over the trailing two axes, leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); plan.batches() * plan.m * plan.n];
        for (bi, (&ia, &ib)) in plan.ia.iter().zip(&plan.ib).enumerate() {
            kernels::gemm_acc(
                &xa[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                &xb[ib * plan.k * plan.n..(ib + 1) * plan.k * plan.n],
                &mut out[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul { a, b }, &[a, b]))
    }

    /// Affine map over the last axis: `x · w + b` with `w` of shape `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shapes("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Error::shapes("linear", &sw, self.shape(b)));
            }
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(&sx) / k;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs))
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(op, format!("axis {axis} for shape {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let t = self.value(a);
        let y = kernels::softmax(t.data(), t.shape(), axis);
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(out, Op::Softmax { a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let t = self.value(a);
        let y = kernels::log_softmax(t.data(), t.shape(), axis);
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(out, Op::LogSoftmax { a, axis }, &[a]))
    }

    /// Normalization over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shapes("layer_norm", &sx, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / n;
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_n = T::one() / T::lit(n as f64);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::from_parts(sx, out), op, &[x, gamma, beta]))
    }

    /// Sum over `axis`, keeping it as an extent-1 axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let t = self.value(a);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { a, axis }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    /// Output axis `i` takes input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let shape = permuted_shape(t.shape(), perm)?;
        let data = permute_data(t.data(), t.shape(), perm);
        let op = Op::Permute {
            a,
            perm: perm.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, parts))
    }

    /// Flat gather: `out[i] = a.flat[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, a: Var, index: Arc<[Option<usize>]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::dim(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        for i in index.iter() {
            out.push(match *i {
                Some(j) if j < x.len() => x[j],
                Some(j) => return Err(Error::Bounds { index: j, len: x.len() }),
                None => T::zero(),
            });
        }
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { a, index }, &[a]))
    }

    /// 3D convolution over `[B, C, D, H, W]` with explicit zero padding.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shapes("conv3d", self.shape(w), self.shape(b)));
            }
        }
        let out = kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(geom.out_shape(), out), Op::Conv3d { x, w, b, geom }, &inputs))
    }

    /// 1D convolution over `[B, C, L]` with "same" zero padding (odd kernels).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[2] % 2 == 0 {
            return Err(Error::shapes("conv1d", &sx, &sw));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv1d",
                format!("input has {} channels, kernel expects {} (shapes {sx:?}, {sw:?})", sx[1], sw[1]),
            ));
        }
        let x5 = self.reshape(x, &[sx[0], sx[1], 1, 1, sx[2]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, 1, sw[2]])?;
        let y = self.conv3d(x5, w5, b, [1, 1, 1], [0, 0, sw[2] / 2])?;
        self.reshape(y, &[sx[0], sw[0], sx[2]])
    }

    /// Non-overlapping average pooling with `kernel` as window and stride.
    pub fn avg_pool3d(&mut self, a: Var, kernel: [usize; 3]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 5 || (0..3).any(|i| kernel[i] == 0 || !s[i + 2].is_multiple_of(kernel[i])) {
            return Err(Error::dim("avg_pool3d", format!("kernel {kernel:?} for shape {s:?}")));
        }
        let o = [s[2] / kernel[0], s[3] / kernel[1], s[4] / kernel[2]];
        let x = self.value(a).data();
        let planes = s[0] * s[1];
        let inv = T::one() / T::lit((kernel[0] * kernel[1] * kernel[2]) as f64);
        let mut out = vec![T::zero(); planes * o[0] * o[1] * o[2]];
        for p in 0..planes {
            for d in 0..s[2] {
                for h in 0..s[3] {
                    for w in 0..s[4] {
                        let src = ((p * s[2] + d) * s[3] + h) * s[4] + w;
                        let dst = ((p * o[0] + d / kernel[0]) * o[1] + h / kernel[1]) * o[2] + w / kernel[2];
                        out[dst] += x[src];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = vec![s[0], s[1], o[0], o[1], o[2]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool3d { a, kernel }, &[a]))
    }

    /// `B×C×D×H×W → B×C×1×1×1` mean pooling.
    pub fn adaptive_avg_pool3d(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 5 {
            return Err(Error::dim("adaptive_avg_pool3d", format!("expected rank 5, got {s:?}")));
        }
        self.avg_pool3d(a, [s[2], s[3], s[4]])
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (xa, xb) = (val(*a), val(*b));
                let same = sa == sb;
                let out_shape = node.value.shape();
                let (ia, ib): (Vec<usize>, Vec<usize>) = if same {
                    ((0..g.len()).collect(), (0..g.len()).collect())
                } else {
                    (
                        kernels::broadcast_index(sa, out_shape),
                        kernels::broadcast_index(sb, out_shape),
                    )
                };
                if self.wants(*a) {
                    let ga = slot(grads, *a, xa.len());
                    for o in 0..g.len() {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => g[o],
                            BinKind::Mul => g[o] * xb[ib[o]],
                            BinKind::Div => g[o] / xb[ib[o]],
                        };
                        ga[ia[o]] += d;
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, xb.len());
                    for o in 0..g.len() {
                        let d = match kind {
                            BinKind::Add => g[o],
                            BinKind::Sub => -g[o],
                            BinKind::Mul => g[o] * xa[ia[o]],
                            BinKind::Div => -g[o] * xa[ia[o]] / (xb[ib[o]] * xb[ib[o]]),
                        };
                        gb[ib[o]] += d;
                    }
                }
            }
            Op::Unary { a, kind } => {
                let x = val(*a);
                let y = node.value.data();
                let ga = slot(grads, *a, x.len());
                for i in 0..g.len() {
                    ga[i] += match kind {
                        UnKind::Neg => -g[i],
                        UnKind::Exp => g[i] * y[i],
                        UnKind::Log => g[i] / x[i],
                        UnKind::Gelu => g[i] * kernels::gelu_grad(x[i]),
                    };
                }
            }
            Op::Scale { a, c } => {
                let ga = slot(grads, *a, g.len());
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += *s * *c;
                }
            }
            Op::MatMul { a, b } => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b)).expect("validated in forward");
                let (xa, xb) = (val(*a), val(*b));
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.wants(*a) {
                    let ga = slot(grads, *a, xa.len());
                    for (bi, (&ia, &ib)) in plan.ia.iter().zip(&plan.ib).enumerate() {
                        kernels::gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &xb[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, xb.len());
                    for (bi, (&ia, &ib)) in plan.ia.iter().zip(&plan.ib).enumerate() {
                        kernels::gemm_tn_acc(
                            &xa[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let xv = val(*x);
                let m = xv.len() / k;
                if self.wants(*x) {
                    let gx = slot(grads, *x, xv.len());
                    kernels::gemm_nt_acc(g, val(*w), gx, m, n, k);
                }
                if self.wants(*w) {
                    let gw = slot(grads, *w, k * n);
                    kernels::gemm_tn_acc(xv, g, gw, m, k, n);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = slot(grads, *b, n);
                        for row in g.chunks(n) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let ga = slot(grads, *a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let ga = slot(grads, *a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += g[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += g[p] - y[p].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *self.shape(*x).last().unwrap();
                let gv = val(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, n);
                    for row_g in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += row_g[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    let inv_n = T::one() / T::lit(n as f64);
                    for (r, (row_g, row_h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..n {
                            let dh = row_g[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * row_h[j];
                        }
                        for j in 0..n {
                            let dh = row_g[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (dh - inv_n * sum_dh - row_h[j] * inv_n * sum_dh_h);
                        }
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                let sa = self.shape(*a);
                let (outer, len, inner) = kernels::axis_split(sa, *axis);
                let ga = slot(grads, *a, numel(sa));
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape { a } => {
                let ga = slot(grads, *a, g.len());
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += *s;
                }
            }
            Op::Permute { a, perm } => {
                let back = permute_data(g, node.value.shape(), &invert_perm(perm));
                let ga = slot(grads, *a, g.len());
                for (d, s) in ga.iter_mut().zip(&back) {
                    *d += *s;
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let gp = slot(grads, *p, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + chunk];
                            for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    off += chunk;
                }
            }
            Op::Gather { a, index } => {
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                for (i, j) in index.iter().enumerate() {
                    if let Some(j) = j {
                        ga[*j] += g[i];
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (need_x, need_w) = (self.wants(*x), self.wants(*w));
                let (gx, gw, gb) = kernels::conv3d_backward(geom, val(*x), val(*w), g, need_x, need_w);
                if need_x {
                    add_into(slot(grads, *x, gx.len()), &gx);
                }
                if need_w {
                    add_into(slot(grads, *w, gw.len()), &gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        add_into(slot(grads, *b, gb.len()), &gb);
                    }
                }
            }
            Op::AvgPool3d { a, kernel } => {
                let s = self.shape(*a);
                let o = [s[2] / kernel[0], s[3] / kernel[1], s[4] / kernel[2]];
                let inv = T::one() / T::lit((kernel[0] * kernel[1] * kernel[2]) as f64);
                let planes = s[0] * s[1];
                let ga = slot(grads, *a, numel(s));
                for p in 0..planes {
                    for d in 0..s[2] {
                        for h in 0..s[3] {
                            for w in 0..s[4] {
                                let src = ((p * s[2] + d) * s[3] + h) * s[4] + w;
                                let dst = ((p * o[0] + d / kernel[0]) * o[1] + h / kernel[1]) * o[2] + w / kernel[2];
                                ga[src] += g[dst] * inv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    ia: Vec<usize>,
    ib: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa.len() > 4 || sb.len() > 4 {
            return Err(Error::shapes("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shapes("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = kernels::broadcast_shape(ba, bb).ok_or_else(|| Error::shapes("matmul", sa, sb))?;
        let ia = kernels::broadcast_index(ba, &batch);
        let ib = kernels::broadcast_index(bb, &batch);
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            m,
            k,
            n,
            ia,
            ib,
            out_shape,
        })
    }

    fn batches(&self) -> usize {
        self.ia.len()
    }
}
