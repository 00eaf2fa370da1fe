//! Composite layers built from graph primitives.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        group: Group,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init::fan_in(rng, &[input, output], input), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output]), group));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, group: Group) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[input, output]), group);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[output]), group));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, group: Group) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), group),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Nonlinearity applied after each factorized convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Identity => x,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Factorized (2+1)D convolution: spatial `1×k×k` then temporal `k×1×1`,
/// each followed by bias and the activation.
#[derive(Clone, Debug)]
pub struct Conv2Plus1d {
    pub spatial: ParamId,
    pub spatial_bias: ParamId,
    pub temporal: ParamId,
    pub temporal_bias: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub activation: Activation,
}

impl Conv2Plus1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        activation: Activation,
        group: Group,
    ) -> Self {
        assert!(kernel % 2 == 1, "factorized conv kernels must be odd");
        let spatial = store.add(
            format!("{name}.spatial.weight"),
            init::fan_in(rng, &[cout, cin, 1, kernel, kernel], cin * kernel * kernel),
            group,
        );
        let spatial_bias = store.add(format!("{name}.spatial.bias"), Tensor::zeros(&[cout]), group);
        let temporal = store.add(
            format!("{name}.temporal.weight"),
            init::fan_in(rng, &[cout, cout, kernel, 1, 1], cout * kernel),
            group,
        );
        let temporal_bias = store.add(format!("{name}.temporal.bias"), Tensor::zeros(&[cout]), group);
        Self {
            spatial,
            spatial_bias,
            temporal,
            temporal_bias,
            kernel,
            cin,
            cout,
            activation,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let ws = g.param(self.spatial);
        let bs = g.param(self.spatial_bias);
        let wt = g.param(self.temporal);
        let bt = g.param(self.temporal_bias);
        conv_2plus1d(g, x, [ws, bs, wt, bt], self.activation)
    }
}

/// Functional form of the factorized convolution with "same" zero padding.
///
/// `kernels` is `[spatial weight (Cm×Ci×1×k×k), spatial bias, temporal weight
/// (Co×Cm×k×1×1), temporal bias]`.
pub fn conv_2plus1d<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    kernels: [Var; 4],
    activation: Activation,
) -> Result<Var> {
    let [ws, bs, wt, bt] = kernels;
    let (ss, st) = (g.shape(ws).to_vec(), g.shape(wt).to_vec());
    if ss.len() != 5 || st.len() != 5 || ss[2] != 1 || st[3] != 1 || st[4] != 1 || st[1] != ss[0] {
        return Err(Error::shapes("conv_2plus1d", &ss, &st));
    }
    let h = g.conv3d(x, ws, Some(bs), [1, 1, 1], [0, ss[3] / 2, ss[4] / 2])?;
    let h = activation.apply(g, h);
    let y = g.conv3d(h, wt, Some(bt), [1, 1, 1], [st[2] / 2, 0, 0])?;
    Ok(activation.apply(g, y))
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Mean softmax cross-entropy of `logits [B, K]` against class indices.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
    }
    let k = s[1];
    let mut onehot = Tensor::<T>::zeros(&s);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Bounds { index: l, len: k });
        }
        onehot.data_mut()[i * k + l] = T::one();
    }
    let ls = g.log_softmax(logits, 1)?;
    let oh = g.constant(onehot);
    let picked = g.mul(ls, oh)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -T::one() / T::lit(labels.len() as f64)))
}

/// Stochastic-depth residual: `x + branch` at evaluation; in training the
/// branch is dropped with probability `p` and otherwise scaled by `1/(1-p)`.
pub fn drop_path_residual<T: Scalar>(g: &mut Graph<'_, T>, x: Var, branch: Var, p: f64) -> Result<Var> {
    if g.is_training() && p > 0.0 {
        let u = g.draw().unwrap_or(1.0);
        if u < p {
            return Ok(x);
        }
        let scaled = g.scale(branch, T::lit(1.0 / (1.0 - p)));
        return g.add(x, scaled);
    }
    g.add(x, branch)
}
