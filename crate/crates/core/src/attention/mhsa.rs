//! Multi-head attention over windows and the kernelized (Performer) variant.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionKind {
    #[default]
    Softmax,
    Performer,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Performer => "performer",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "performer" => Ok(Self::Performer),
            _ => Err(Error::Config(format!("unknown attention kind `{s}` (expected softmax or performer)"))),
        }
    }
}

/// Query/key/value/output projections for one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    /// Fixed random features `[head_dim, m]` for the Performer kernel.
    pub features: Option<ParamId>,
}

impl AttentionParams {
    /// `zero_out` starts the output projection at zero so the layer contributes nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        kind: AttentionKind,
        feature_count: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        let g = Group::Transformer;
        let q = Linear::new(store, rng, &format!("{name}.q"), dim, dim, true, g);
        let k = Linear::new(store, rng, &format!("{name}.k"), dim, dim, true, g);
        let v = Linear::new(store, rng, &format!("{name}.v"), dim, dim, true, g);
        let out = if zero_out {
            Linear::zeroed(store, &format!("{name}.out"), dim, dim, g)
        } else {
            Linear::new(store, rng, &format!("{name}.out"), dim, dim, true, g)
        };
        let features = match kind {
            AttentionKind::Softmax => None,
            AttentionKind::Performer => {
                if feature_count == 0 {
                    return Err(Error::Config(format!("{name}: performer needs at least one random feature")));
                }
                let w = random_features(rng, dim / heads, feature_count);
                Some(store.add_buffer(format!("{name}.features"), w, g))
            }
        };
        Ok(Self {
            q,
            k,
            v,
            out,
            heads,
            dim,
            features,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        if self.features.is_some() {
            AttentionKind::Performer
        } else {
            AttentionKind::Softmax
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[B, N, E]` to `[B, heads, N, dh]`.
    fn split_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.head_dim()])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    fn merge_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let p = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(p, &[s[0], s[2], self.dim])
    }

    fn check_input<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim(
                "attention",
                format!("{what} shape {s:?}, expected [batch, tokens, {}]", self.dim),
            ));
        }
        Ok(())
    }

    /// Attention of `query` tokens `[B, Nq, E]` over `context` tokens `[B, Nk, E]`.
    ///
    /// `bias` is added to the logits and must broadcast to `[B, heads, Nq, Nk]`.
    /// Returns the projected output and, for softmax attention, the weights.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        context: Var,
        bias: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        self.check_input(g, query, "query")?;
        self.check_input(g, context, "context")?;
        let (nq, nk) = (g.shape(query)[1], g.shape(context)[1]);
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let (heads, weights) = match self.features {
            None => {
                let kt = g.transpose(k)?;
                let raw = g.matmul(q, kt)?;
                let mut logits = g.scale(raw, T::lit(1.0 / (self.head_dim() as f64).sqrt()));
                for &b in bias {
                    check_bias(g.shape(b), nq, nk)?;
                    logits = g.add(logits, b)?;
                }
                let attn = g.softmax(logits, 3)?;
                (g.matmul(attn, v)?, Some(attn))
            }
            Some(f) => {
                if !bias.is_empty() {
                    return Err(Error::Unsupported(
                        "logit biases cannot be applied to kernelized attention".into(),
                    ));
                }
                let w = g.param(f);
                (performer_core(g, q, k, v, w)?, None)
            }
        };
        let merged = self.merge_heads(g, heads)?;
        Ok((self.out.forward(g, merged)?, weights))
    }
}

fn check_bias(s: &[usize], nq: usize, nk: usize) -> Result<()> {
    let r = s.len();
    if r < 2 || s[r - 1] != nk || (s[r - 2] != nq && s[r - 2] != 1) {
        return Err(Error::dim(
            "attention bias",
            format!("bias shape {s:?} does not cover {nq}x{nk} logits"),
        ));
    }
    Ok(())
}

/// Gaussian random projection `[d, m]` for positive random features.
pub fn random_features<T: Scalar, R: Rng>(rng: &mut R, d: usize, m: usize) -> Tensor<T> {
    Tensor::from_fn(&[d, m], |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Positive random-feature map `exp(xW - |x|²/2 - c) / sqrt(m)`.
///
/// `c` is a stabilizing constant (row max for queries, global max for keys);
/// it cancels in the normalized attention output.
fn feature_map<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, per_row: bool) -> Result<Var> {
    let d = g.shape(x)[g.shape(x).len() - 1];
    let m = g.shape(w)[1];
    let xs = g.scale(x, T::lit((d as f64).powf(-0.25)));
    let proj = g.matmul(xs, w)?;
    let sq = g.mul(xs, xs)?;
    let r = g.shape(sq).len();
    let norm = g.sum_axis(sq, r - 1)?;
    let half = g.scale(norm, T::lit(0.5));
    let logits = g.sub(proj, half)?;
    let lv = g.value(logits);
    let stab = if per_row {
        let s = lv.shape().to_vec();
        let rows = lv.numel() / m;
        let mut maxes = Vec::with_capacity(rows);
        for row in lv.data().chunks(m) {
            maxes.push(row.iter().copied().fold(T::neg_infinity(), T::max));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        Tensor::new(shape, maxes)?
    } else {
        Tensor::scalar(lv.data().iter().copied().fold(T::neg_infinity(), T::max))
    };
    let c = g.constant(stab);
    let shifted = g.sub(logits, c)?;
    let e = g.exp(shifted);
    Ok(g.scale(e, T::lit(1.0 / (m as f64).sqrt())))
}

/// Linear-complexity approximation of softmax attention on `[.., N, dh]` heads.
pub fn performer_core<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, features: Var) -> Result<Var> {
    let r = g.shape(k).len();
    let pq = feature_map(g, q, features, true)?;
    let pk = feature_map(g, k, features, false)?;
    let pkt = g.transpose(pk)?;
    let kv = g.matmul(pkt, v)?;
    let num = g.matmul(pq, kv)?;
    let ksum = g.sum_axis(pk, r - 2)?;
    let kst = g.transpose(ksum)?;
    let den = g.matmul(pq, kst)?;
    g.div(num, den)
}

/// Kernelized self-attention over a token sequence `[N, E]`.
pub fn performer_attention<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, params: &AttentionParams) -> Result<Var> {
    if params.features.is_none() {
        return Err(Error::Contract("performer_attention needs random features".into()));
    }
    let s = g.shape(tokens).to_vec();
    let x = g.reshape(tokens, &[1, s[0], s[1]])?;
    let (out, _) = params.forward(g, x, x, &[])?;
    g.reshape(out, &s)
}
