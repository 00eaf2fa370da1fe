//! Finite-difference checks of every differentiable operation of the crate,
//! each over a number of random seeds.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{grad_check, grad_check_params};
use crate::attention::{
    performer_core, AttentionKind, AttentionParams, BlockConfig, BlockContext, EncoderBlock, PatchMerging,
    RelPosBias, WindowConfig, WindowPlan,
};
use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::forced::{fa_attn_bias, fa_channel_concat, fa_input_add, fa_linear_bias, fa_pos_encoding};
use crate::fusion::{channel_project, concat_metadata, FusionBlockConfig, FusionLayers, SideKind};
use crate::nn::{conv_2plus1d, cross_entropy, drop_path_residual, mse_loss, Activation};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst relative error of one checked operation over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub group: &'static str,
    pub name: String,
    pub max_rel_err: f64,
    /// Set when the check itself could not run.
    pub error: Option<String>,
}

impl OpCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.error.is_none() && self.max_rel_err <= tol
    }
}

/// Collects checks; failures to run are recorded rather than returned.
pub struct Suite {
    seeds: u64,
    eps: f64,
    group: &'static str,
    pub results: Vec<OpCheck>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn probe(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(normal(&mut rng(seed ^ 0x9e37_79b9), &shape));
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn constant(g: &mut Graph<'_, f64>, seed: u64, shape: &[usize]) -> Var {
    g.constant(normal(&mut rng(seed.wrapping_add(1000)), shape))
}

/// Replaces every trainable parameter with small random values, so that
/// zero-initialized paths carry gradient too.
fn randomize(store: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let mut r = rng(seed.wrapping_add(77));
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.set(id, normal(&mut r, &shape).map(|x| 0.3 * x))?;
    }
    Ok(())
}

impl Suite {
    fn record(&mut self, name: String, outcome: Result<f64>) {
        let (max_rel_err, error) = match outcome {
            Ok(e) => (e, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        self.results.push(OpCheck {
            group: self.group,
            name,
            max_rel_err,
            error,
        });
    }

    /// Checks `f(x)` under a random weighting of its output, `x ~ N(0, 1)`.
    fn op<F>(&mut self, name: impl Into<String>, shape: &[usize], f: F)
    where
        F: Fn(&mut Graph<'_, f64>, Var, u64) -> Result<Var>,
    {
        let shape = shape.to_vec();
        self.op_with(name, move |seed| normal(&mut rng(seed), &shape), f);
    }

    fn op_with<X, F>(&mut self, name: impl Into<String>, input: X, f: F)
    where
        X: Fn(u64) -> Tensor<f64>,
        F: Fn(&mut Graph<'_, f64>, Var, u64) -> Result<Var>,
    {
        let outcome = (0..self.seeds).try_fold(0.0f64, |worst, seed| {
            let x = input(seed);
            let err = grad_check(
                |g, v| {
                    let y = f(g, v, seed)?;
                    probe(g, y, seed)
                },
                &x,
                self.eps,
            )?;
            Ok(worst.max(err))
        });
        self.record(name.into(), outcome);
    }

    /// Checks every trainable parameter of the store built for each seed.
    fn params<B, F>(&mut self, name: impl Into<String>, build: B, f: F)
    where
        B: Fn(u64) -> Result<ParamStore<f64>>,
        F: Fn(&mut Graph<'_, f64>, u64) -> Result<Var>,
    {
        let outcome = (0..self.seeds).try_fold(0.0f64, |worst, seed| {
            let store = build(seed)?;
            let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
            let err = grad_check_params(
                &store,
                &ids,
                |g| {
                    let y = f(g, seed)?;
                    probe(g, y, seed)
                },
                self.eps,
            )?;
            Ok(worst.max(err))
        });
        self.record(name.into(), outcome);
    }
}

type Group = (&'static str, fn(&mut Suite));

/// Check groups in running order.
pub const GROUPS: [Group; 12] = [
    ("elementwise", elementwise_ops),
    ("matmul", matmul_and_linear),
    ("normalization", normalizations),
    ("layout", reductions_and_layout),
    ("convolution", convolutions_and_pools),
    ("loss", losses_and_stochastic_depth),
    ("performer", performer_kernel),
    ("forced", forced_attention_ops),
    ("fusion", fusion_ops),
    ("attention", attention_layers),
    ("encoder", two_stacked_encoder_blocks),
    ("backbone", backbone_stack),
];

/// Runs the named groups (all when `only` is empty) with `seeds` seeds each.
pub fn run(only: &[&str], seeds: u64, eps: f64) -> Result<Vec<OpCheck>> {
    if seeds == 0 {
        return Err(Error::Config("the gradient suite needs at least one seed".into()));
    }
    if let Some(bad) = only.iter().find(|n| !GROUPS.iter().any(|(g, _)| g == *n)) {
        return Err(Error::Config(format!("unknown gradient check group `{bad}`")));
    }
    let mut suite = Suite {
        seeds,
        eps,
        group: "",
        results: Vec::new(),
    };
    for (name, group) in GROUPS {
        if only.is_empty() || only.contains(&name) {
            suite.group = name;
            group(&mut suite);
        }
    }
    Ok(suite.results)
}

fn elementwise_ops(s: &mut Suite) {
    s.op("add", &[3, 4], |g, x, s| {
        let c = constant(g, s, &[4]);
        g.add(x, c)
    });
    s.op("sub", &[3, 4], |g, x, s| {
        let c = constant(g, s, &[3, 1]);
        g.sub(c, x)
    });
    s.op("mul", &[3, 4], |g, x, s| {
        let c = constant(g, s, &[3, 4]);
        g.mul(x, c)
    });
    s.op("mul self", &[5], |g, x, _| g.mul(x, x));
    s.op("div numerator", &[2, 3], |g, x, s| {
        let d = g.constant(uniform(&mut rng(s + 500), &[2, 3], 0.5, 2.0));
        g.div(x, d)
    });
    s.op_with(
        "div denominator",
        |s| uniform(&mut rng(s), &[2, 3], 0.5, 2.0),
        |g, x, s| {
            let n = constant(g, s, &[2, 3]);
            g.div(n, x)
        },
    );
    s.op("neg", &[4], |g, x, _| Ok(g.neg(x)));
    s.op("exp", &[4, 2], |g, x, _| Ok(g.exp(x)));
    s.op_with("log", |s| uniform(&mut rng(s), &[6], 0.2, 3.0), |g, x, _| Ok(g.log(x)));
    s.op("gelu", &[3, 5], |g, x, _| Ok(g.gelu(x)));
    s.op("scale", &[7], |g, x, _| Ok(g.scale(x, -2.5)));
}

fn matmul_and_linear(s: &mut Suite) {
    s.op("matmul left", &[3, 4], |g, x, s| {
        let b = constant(g, s, &[4, 2]);
        g.matmul(x, b)
    });
    s.op("matmul right", &[4, 2], |g, x, s| {
        let a = constant(g, s, &[3, 4]);
        g.matmul(a, x)
    });
    s.op("batched matmul", &[2, 3, 3, 4], |g, x, s| {
        let b = constant(g, s, &[2, 3, 4, 2]);
        g.matmul(x, b)
    });
    s.op("broadcast matmul", &[4, 3], |g, x, s| {
        let a = constant(g, s, &[2, 5, 4]);
        g.matmul(a, x)
    });
    s.op("linear input", &[5, 3], |g, x, s| {
        let w = constant(g, s, &[3, 4]);
        let b = constant(g, s + 1, &[4]);
        g.linear(x, w, Some(b))
    });
    s.op("linear weight", &[3, 4], |g, w, s| {
        let x = constant(g, s, &[2, 5, 3]);
        g.linear(x, w, None)
    });
    s.op("linear bias", &[4], |g, b, s| {
        let x = constant(g, s, &[5, 3]);
        let w = constant(g, s + 1, &[3, 4]);
        g.linear(x, w, Some(b))
    });
}

fn normalizations(s: &mut Suite) {
    for axis in 0..2 {
        s.op(format!("softmax axis {axis}"), &[3, 5], move |g, x, _| g.softmax(x, axis));
        s.op(format!("log_softmax axis {axis}"), &[4, 3], move |g, x, _| g.log_softmax(x, axis));
    }
    s.op("softmax rank 4", &[2, 2, 3, 3], |g, x, _| g.softmax(x, 3));
    s.op("layer_norm input", &[4, 6], |g, x, s| {
        let gamma = constant(g, s, &[6]);
        let beta = constant(g, s + 1, &[6]);
        g.layer_norm(x, gamma, beta, 1e-5)
    });
    s.op("layer_norm gamma", &[6], |g, gamma, s| {
        let x = constant(g, s, &[3, 6]);
        let beta = constant(g, s + 1, &[6]);
        g.layer_norm(x, gamma, beta, 1e-5)
    });
    s.op("layer_norm beta", &[6], |g, beta, s| {
        let x = constant(g, s, &[3, 6]);
        let gamma = constant(g, s + 1, &[6]);
        g.layer_norm(x, gamma, beta, 1e-5)
    });
}

fn reductions_and_layout(s: &mut Suite) {
    for axis in 0..3 {
        s.op(format!("sum_axis {axis}"), &[2, 3, 4], move |g, x, _| g.sum_axis(x, axis));
    }
    s.op("sum_all", &[3, 4], |g, x, _| Ok(g.sum_all(x)));
    s.op("mean_all", &[3, 4], |g, x, _| Ok(g.mean_all(x)));
    s.op("reshape", &[2, 6], |g, x, _| g.reshape(x, &[3, 2, 2]));
    s.op("permute", &[2, 3, 4], |g, x, _| g.permute(x, &[2, 0, 1]));
    s.op("transpose", &[2, 3, 4], |g, x, _| g.transpose(x));
    for axis in 0..2 {
        s.op(format!("concat axis {axis}"), &[2, 3], move |g, x, s| {
            let c = constant(g, s, &[2, 3]);
            let y = g.scale(x, 2.0);
            g.concat(&[x, c, y], axis)
        });
    }
    s.op("gather with repeats and padding", &[6], |g, x, _| {
        let idx: Arc<[Option<usize>]> = [Some(5), Some(0), None, Some(0), Some(3), Some(2), Some(5), None].into();
        g.gather(x, idx, &[2, 4])
    });
}

fn convolutions_and_pools(s: &mut Suite) {
    s.op("conv3d input", &[1, 2, 3, 4, 4], |g, x, s| {
        let w = constant(g, s, &[3, 2, 3, 3, 3]);
        let b = constant(g, s + 1, &[3]);
        g.conv3d(x, w, Some(b), [1, 1, 1], [1, 1, 1])
    });
    s.op("conv3d weight", &[2, 2, 1, 3, 3], |g, w, s| {
        let x = constant(g, s, &[2, 2, 2, 5, 5]);
        g.conv3d(x, w, None, [1, 2, 2], [0, 1, 1])
    });
    s.op("conv3d bias", &[2], |g, b, s| {
        let x = constant(g, s, &[1, 1, 2, 3, 3]);
        let w = constant(g, s + 1, &[2, 1, 1, 2, 2]);
        g.conv3d(x, w, Some(b), [1, 1, 1], [0, 0, 0])
    });
    s.op("conv1d input", &[2, 3, 5], |g, x, s| {
        let w = constant(g, s, &[4, 3, 3]);
        let b = constant(g, s + 1, &[4]);
        g.conv1d(x, w, Some(b))
    });
    s.op("conv1d weight", &[4, 3, 1], |g, w, s| {
        let x = constant(g, s, &[1, 3, 6]);
        g.conv1d(x, w, None)
    });
    s.op("avg_pool3d", &[1, 2, 2, 4, 4], |g, x, _| g.avg_pool3d(x, [1, 2, 2]));
    s.op("adaptive_avg_pool3d", &[2, 3, 2, 3, 3], |g, x, _| g.adaptive_avg_pool3d(x));
    for act in [Activation::Gelu, Activation::Identity] {
        s.op(format!("conv_2plus1d input ({act:?})"), &[1, 2, 3, 4, 4], move |g, x, s| {
            let ws = constant(g, s, &[3, 2, 1, 3, 3]);
            let bs = constant(g, s + 1, &[3]);
            let wt = constant(g, s + 2, &[2, 3, 3, 1, 1]);
            let bt = constant(g, s + 3, &[2]);
            conv_2plus1d(g, x, [ws, bs, wt, bt], act)
        });
    }
    s.op("conv_2plus1d spatial kernel", &[3, 2, 1, 3, 3], |g, ws, s| {
        let x = constant(g, s, &[1, 2, 3, 4, 4]);
        let bs = constant(g, s + 1, &[3]);
        let wt = constant(g, s + 2, &[2, 3, 3, 1, 1]);
        let bt = constant(g, s + 3, &[2]);
        conv_2plus1d(g, x, [ws, bs, wt, bt], Activation::Gelu)
    });
    s.op("conv_2plus1d temporal kernel", &[2, 3, 3, 1, 1], |g, wt, s| {
        let x = constant(g, s, &[1, 2, 3, 4, 4]);
        let ws = constant(g, s + 1, &[3, 2, 1, 3, 3]);
        let bs = constant(g, s + 2, &[3]);
        let bt = constant(g, s + 3, &[2]);
        conv_2plus1d(g, x, [ws, bs, wt, bt], Activation::Gelu)
    });
}

fn losses_and_stochastic_depth(s: &mut Suite) {
    s.op("mse_loss", &[3, 5], |g, x, s| {
        let t = constant(g, s, &[3, 5]);
        mse_loss(g, x, t)
    });
    s.op("cross_entropy", &[4, 3], |g, x, s| cross_entropy(g, x, &[0, 2, 1, (s % 3) as usize]));
    s.op("drop_path residual (evaluation)", &[3, 4], |g, x, s| {
        let b = constant(g, s, &[3, 4]);
        let h = g.mul(x, b)?;
        drop_path_residual(g, x, h, 0.3)
    });
}

fn performer_kernel(s: &mut Suite) {
    for which in 0..3 {
        s.op(format!("performer_core {}", ["q", "k", "v"][which]), &[1, 2, 6, 4], move |g, x, s| {
            let a = constant(g, s, &[1, 2, 6, 4]);
            let b = constant(g, s + 1, &[1, 2, 6, 4]);
            let w = g.constant(normal(&mut rng(s + 9), &[4, 16]));
            match which {
                0 => performer_core(g, x, a, b, w),
                1 => performer_core(g, a, x, b, w),
                _ => performer_core(g, a, b, x, w),
            }
        });
    }
}

fn forced_attention_ops(s: &mut Suite) {
    s.op("fa_pos_encoding", &[6, 4], |g, x, s| {
        let rows = g.constant(Tensor::from_fn(&[6, 4], |i| ((i / 4 + s as usize) % 2) as f64));
        let w1 = constant(g, s, &[4]);
        fa_pos_encoding(g, x, rows, w1)
    });
    s.op("fa_pos_encoding w1", &[4], |g, w1, s| {
        let x = constant(g, s, &[6, 4]);
        let rows = g.constant(Tensor::from_fn(&[6, 4], |i| ((i / 4) % 2) as f64));
        fa_pos_encoding(g, x, rows, w1)
    });
    let rows = |g: &mut Graph<'_, f64>| g.constant(Tensor::from_fn(&[5, 4], |i| ((i / 4 + 1) % 2) as f64));
    s.op("fa_linear_bias output", &[5, 4], move |g, out, s| {
        let r = rows(g);
        let w2 = constant(g, s, &[4, 4]);
        let lb = constant(g, s + 1, &[4]);
        fa_linear_bias(g, out, r, w2, lb)
    });
    s.op("fa_linear_bias w2", &[4, 4], move |g, w2, s| {
        let r = rows(g);
        let out = constant(g, s, &[5, 4]);
        let lb = constant(g, s + 1, &[4]);
        fa_linear_bias(g, out, r, w2, lb)
    });
    s.op("fa_linear_bias learned bias", &[4], move |g, lb, s| {
        let r = rows(g);
        let out = constant(g, s, &[5, 4]);
        let w2 = constant(g, s + 1, &[4, 4]);
        fa_linear_bias(g, out, r, w2, lb)
    });
    s.op("fa_attn_bias logits", &[2, 2, 3, 3], |g, x, s| {
        let rows = g.constant(Tensor::from_fn(&[2, 3, 4], |i| ((i / 4) % 2) as f64));
        let adapter = constant(g, s, &[4, 2]);
        let l = fa_attn_bias(g, x, rows, adapter)?;
        g.softmax(l, 3)
    });
    s.op("fa_attn_bias adapter", &[4, 2], |g, a, s| {
        let rows = g.constant(Tensor::from_fn(&[2, 3, 4], |i| ((i / 4 + s as usize) % 2) as f64));
        let logits = constant(g, s, &[2, 2, 3, 3]);
        let l = fa_attn_bias(g, logits, rows, a)?;
        g.softmax(l, 3)
    });
    let seg = |s: u64| Tensor::from_fn(&[2, 4, 4], move |i| (i as u64 * 7 + s).is_multiple_of(3) as u8 as f64);
    s.op("fa_channel_concat input", &[3, 2, 4, 4], move |g, x, s| {
        let m = g.constant(seg(s));
        let w = constant(g, s, &[3, 4, 1]);
        let b = constant(g, s + 1, &[3]);
        fa_channel_concat(g, x, m, w, b)
    });
    s.op("fa_channel_concat kernel", &[3, 4, 1], move |g, w, s| {
        let x = constant(g, s, &[3, 2, 4, 4]);
        let m = g.constant(seg(s));
        let b = constant(g, s + 1, &[3]);
        fa_channel_concat(g, x, m, w, b)
    });
    s.op("fa_input_add input", &[3, 2, 4, 4], move |g, x, s| {
        let m = g.constant(seg(s));
        let gamma = constant(g, s, &[1]);
        fa_input_add(g, x, m, gamma)
    });
    s.op("fa_input_add gamma", &[1], move |g, gamma, s| {
        let x = constant(g, s, &[3, 2, 4, 4]);
        let m = g.constant(seg(s));
        fa_input_add(g, x, m, gamma)
    });
}

fn fusion_ops(s: &mut Suite) {
    s.op("channel_project features", &[5, 6], |g, x, s| {
        let w = constant(g, s, &[4, 6, 1]);
        let b = constant(g, s + 1, &[4]);
        channel_project(g, x, w, b)
    });
    s.op("channel_project kernel", &[4, 6, 1], |g, w, s| {
        let x = constant(g, s, &[5, 6]);
        let b = constant(g, s + 1, &[4]);
        channel_project(g, x, w, b)
    });
    s.op("concat_metadata features", &[4, 6], |g, x, s| {
        let m = constant(g, s, &[2]);
        let w = constant(g, s + 1, &[8, 6]);
        let b = constant(g, s + 2, &[6]);
        concat_metadata(g, x, m, w, b)
    });
    s.op("concat_metadata meta", &[2], |g, m, s| {
        let x = constant(g, s, &[4, 6]);
        let w = constant(g, s + 1, &[8, 6]);
        let b = constant(g, s + 2, &[6]);
        concat_metadata(g, x, m, w, b)
    });
    for kind in [AttentionKind::Softmax, AttentionKind::Performer] {
        s.params(
            format!("cross attention layers ({kind:?})"),
            move |seed| {
                let mut store = ParamStore::<f64>::new();
                let cfg = FusionBlockConfig {
                    order: vec![SideKind::Audio, SideKind::Transcript],
                    zero_init: true,
                    attention_kind: kind,
                };
                FusionLayers::new(&mut store, &mut rng(seed), "f", &cfg.order, 4, 2, &cfg, 6)?;
                randomize(&mut store, seed)?;
                Ok(store)
            },
            move |g, seed| {
                let cfg = FusionBlockConfig {
                    order: vec![SideKind::Audio, SideKind::Transcript],
                    zero_init: true,
                    attention_kind: kind,
                };
                // Rebuild the layer handles with the same names; ids are positional.
                let mut shadow = ParamStore::<f64>::new();
                let layers = FusionLayers::new(&mut shadow, &mut rng(seed), "f", &cfg.order, 4, 2, &cfg, 6)?;
                let main = constant(g, seed, &[5, 4]);
                let a = constant(g, seed + 1, &[3, 4]);
                let t = constant(g, seed + 2, &[2, 4]);
                layers.apply(g, main, &[(SideKind::Audio, a), (SideKind::Transcript, t)])
            },
        );
    }
}

fn attention_layers(s: &mut Suite) {
    for kind in [AttentionKind::Softmax, AttentionKind::Performer] {
        s.params(
            format!("attention projections ({kind:?})"),
            move |seed| {
                let mut store = ParamStore::<f64>::new();
                AttentionParams::new(&mut store, &mut rng(seed), "a", 4, 2, kind, 8, false)?;
                Ok(store)
            },
            move |g, seed| {
                let mut shadow = ParamStore::<f64>::new();
                let p = AttentionParams::new(&mut shadow, &mut rng(seed), "a", 4, 2, kind, 8, false)?;
                let q = constant(g, seed, &[2, 3, 4]);
                let kv = constant(g, seed + 1, &[2, 5, 4]);
                Ok(p.forward(g, q, kv, &[])?.0)
            },
        );
    }
    s.params(
        "relative position bias",
        |seed| {
            let mut store = ParamStore::<f64>::new();
            RelPosBias::new(&mut store, &mut rng(seed), "r", [2, 2, 2], 2);
            Ok(store)
        },
        |g, seed| {
            let mut shadow = ParamStore::<f64>::new();
            let r = RelPosBias::new(&mut shadow, &mut rng(seed), "r", [2, 2, 2], 2);
            let cfg = WindowConfig::new([2, 2, 2], 2, 4)?;
            let plan = WindowPlan::new([2, 4, 4], &cfg);
            let b = r.bias(g, &plan)?;
            let logits = constant(g, seed, &[plan.n_windows, 2, 8, 8]);
            let l = g.add(logits, b)?;
            g.softmax(l, 3)
        },
    );
    s.params(
        "patch merging",
        |seed| {
            let mut store = ParamStore::<f64>::new();
            PatchMerging::new(&mut store, &mut rng(seed), "m", 3);
            randomize(&mut store, seed)?;
            Ok(store)
        },
        |g, seed| {
            let mut shadow = ParamStore::<f64>::new();
            let m = PatchMerging::new(&mut shadow, &mut rng(seed), "m", 3);
            let x = constant(g, seed, &[16, 3]);
            Ok(m.forward(g, x, [1, 4, 4])?.0)
        },
    );
}

fn block_config(shift: bool) -> Result<BlockConfig> {
    let mut window = WindowConfig::new([1, 2, 2], 2, 4)?;
    if shift {
        window = window.shifted();
    }
    Ok(BlockConfig {
        window,
        mlp_ratio: 2,
        drop_path: 0.1,
        kind: AttentionKind::Softmax,
        feature_count: 0,
    })
}

fn two_stacked_encoder_blocks(s: &mut Suite) {
    let build = |store: &mut ParamStore<f64>, seed: u64| -> Result<(EncoderBlock, EncoderBlock)> {
        let mut r = rng(seed);
        let a = EncoderBlock::new(store, &mut r, "b0", block_config(false)?)?;
        let b = EncoderBlock::new(store, &mut r, "b1", block_config(true)?)?;
        Ok((a, b))
    };
    s.params(
        "encoder blocks",
        |seed| {
            let mut store = ParamStore::<f64>::new();
            build(&mut store, seed)?;
            randomize(&mut store, seed)?;
            Ok(store)
        },
        |g, seed| {
            let mut shadow = ParamStore::<f64>::new();
            let (a, b) = build(&mut shadow, seed)?;
            let ctx = BlockContext {
                grid: [2, 4, 4],
                forced_rows: None,
                sides: &[],
            };
            let x = constant(g, seed, &[32, 4]);
            let h = a.forward(g, x, &ctx)?;
            b.forward(g, h, &ctx)
        },
    );
}

fn backbone_stack(s: &mut Suite) {
    let cfg = BackboneConfig {
        in_channels: 2,
        stem_channels: 2,
        block_count: 1,
        kernel: 3,
        downsample: [1, 2, 2],
        out_channels: 3,
        activation: Activation::Gelu,
    };
    let c2 = cfg.clone();
    s.params(
        "backbone",
        move |seed| {
            let mut store = ParamStore::<f64>::new();
            Backbone::new(&mut store, &mut rng(seed), "bb", cfg.clone());
            Ok(store)
        },
        move |g, seed| {
            let mut shadow = ParamStore::<f64>::new();
            let b = Backbone::new(&mut shadow, &mut rng(seed), "bb", c2.clone());
            let x = constant(g, seed, &[2, 2, 2, 4, 4]);
            b.forward_batch(g, x)
        },
    );
}
