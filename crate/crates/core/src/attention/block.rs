//! Transformer encoder block over a 3D token grid and the patch-merging step.

use std::sync::Arc;

use rand::Rng;

use super::mhsa::{AttentionKind, AttentionParams};
use super::window::{RelPosBias, WindowConfig, WindowPlan};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::forced;
use crate::fusion::{FusionLayers, SideKind};
use crate::nn::{drop_path_residual, LayerNorm, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-block parameters of the segmentation-guided variants acting inside blocks.
#[derive(Clone, Debug, Default)]
pub enum BlockForcing {
    #[default]
    None,
    /// Output bias `(M1 rows · W2) ⊙ b` after the attention residual.
    LinearBias { w2: ParamId, bias: ParamId },
    /// Key-column logit bias `M1 rows · A`, one column per head.
    AttnBias { adapter: ParamId },
}

/// Per-forward inputs shared by all blocks of a stage.
#[derive(Clone, Copy, Debug)]
pub struct BlockContext<'a> {
    pub grid: [usize; 3],
    /// Segmentation rows per token `[L, E]`, when a forced variant needs them.
    pub forced_rows: Option<Var>,
    pub sides: &'a [(SideKind, Var)],
}

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub window: WindowConfig,
    pub mlp_ratio: usize,
    pub drop_path: f64,
    pub kind: AttentionKind,
    pub feature_count: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub name: String,
    pub cfg: BlockConfig,
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub rel: Option<RelPosBias>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub forcing: BlockForcing,
    pub cross: Option<FusionLayers>,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: BlockConfig) -> Result<Self> {
        let e = cfg.window.embed_dim;
        let heads = cfg.window.heads;
        let grp = Group::Transformer;
        if cfg.kind == AttentionKind::Performer && cfg.window.shift.iter().any(|&s| s > 0) {
            return Err(Error::Config(format!("{name}: kernelized self-attention does not use shifted windows")));
        }
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), e, grp);
        let attn = AttentionParams::new(store, rng, &format!("{name}.attn"), e, heads, cfg.kind, cfg.feature_count, false)?;
        let rel = (cfg.kind == AttentionKind::Softmax)
            .then(|| RelPosBias::new(store, rng, &format!("{name}.attn"), cfg.window.window, heads));
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), e, grp);
        let hidden = e * cfg.mlp_ratio.max(1);
        let fc1 = Linear::new(store, rng, &format!("{name}.mlp.fc1"), e, hidden, true, grp);
        let fc2 = Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, e, true, grp);
        Ok(Self {
            name: name.to_string(),
            cfg,
            norm1,
            attn,
            rel,
            norm2,
            fc1,
            fc2,
            forcing: BlockForcing::None,
            cross: None,
        })
    }

    pub fn plan(&self, grid: [usize; 3]) -> WindowPlan {
        WindowPlan::new(grid, &self.cfg.window)
    }

    /// Label under which attention weights `[nW, heads, N, N]` are recorded.
    pub fn tap_label(&self) -> String {
        format!("{}.attn", self.name)
    }

    fn self_attention<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, ctx: &BlockContext<'_>) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if self.cfg.kind == AttentionKind::Performer {
            if !matches!(self.forcing, BlockForcing::None | BlockForcing::LinearBias { .. }) {
                return Err(Error::Unsupported("attention-logit forcing needs softmax attention".into()));
            }
            let x = g.reshape(h, &[1, s[0], s[1]])?;
            let (out, _) = self.attn.forward(g, x, x, &[])?;
            return g.reshape(out, &s);
        }
        let plan = self.plan(ctx.grid);
        let win = plan.partition(g, h)?;
        let mut biases = Vec::new();
        if let Some(rel) = &self.rel {
            biases.push(rel.bias(g, &plan)?);
        }
        if let Some(mask) = plan.mask::<T>() {
            biases.push(g.constant(mask));
        }
        if let BlockForcing::AttnBias { adapter } = self.forcing {
            let rows = ctx
                .forced_rows
                .ok_or_else(|| Error::Contract(format!("{}: attention forcing without segmentation rows", self.name)))?;
            let rows_w = plan.partition(g, rows)?;
            let a = g.param(adapter);
            biases.push(forced::fa_attn_bias_term(g, rows_w, a)?);
        }
        let (out, attn) = self.attn.forward(g, win, win, &biases)?;
        if let Some(a) = attn {
            g.tap(self.tap_label(), a);
        }
        plan.reverse(g, out)
    }

    /// `x` is `[D·H·W, E]` in row-major grid order.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &BlockContext<'_>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let l: usize = ctx.grid.iter().product();
        if s.len() != 2 || s[0] != l || s[1] != self.cfg.window.embed_dim {
            return Err(Error::dim(
                "encoder_block",
                format!("tokens {s:?} for grid {:?} and width {}", ctx.grid, self.cfg.window.embed_dim),
            ));
        }
        let h = self.norm1.forward(g, x)?;
        let a = self.self_attention(g, h, ctx)?;
        let mut x = drop_path_residual(g, x, a, self.cfg.drop_path)?;
        if let BlockForcing::LinearBias { w2, bias } = self.forcing {
            let rows = ctx
                .forced_rows
                .ok_or_else(|| Error::Contract(format!("{}: output forcing without segmentation rows", self.name)))?;
            let w2 = g.param(w2);
            let b = g.param(bias);
            x = forced::fa_linear_bias(g, x, rows, w2, b)?;
        }
        if let Some(cross) = &self.cross {
            x = cross.apply(g, x, ctx.sides)?;
        }
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        drop_path_residual(g, x, h, self.cfg.drop_path)
    }
}

/// Concatenates each 2x2 spatial neighbourhood and projects `4E -> 2E`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduce: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim, Group::Transformer),
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), 4 * dim, 2 * dim, false, Group::Transformer),
            dim,
        }
    }

    pub fn out_grid(grid: [usize; 3]) -> Result<[usize; 3]> {
        if !grid[1].is_multiple_of(2) || !grid[2].is_multiple_of(2) {
            return Err(Error::dim("patch_merging", format!("grid {grid:?} has an odd spatial extent")));
        }
        Ok([grid[0], grid[1] / 2, grid[2] / 2])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, grid: [usize; 3]) -> Result<(Var, [usize; 3])> {
        let out = Self::out_grid(grid)?;
        let e = self.dim;
        let s = g.shape(x).to_vec();
        if s != [grid.iter().product::<usize>(), e] {
            return Err(Error::dim("patch_merging", format!("tokens {s:?} for grid {grid:?} width {e}")));
        }
        let gathered = g.gather(x, merge_index(grid, e), &[out.iter().product(), 4 * e])?;
        let n = self.norm.forward(g, gathered)?;
        Ok((self.reduce.forward(g, n)?, out))
    }
}

/// Source offsets for merging; neighbour order (0,0), (1,0), (0,1), (1,1) in (h, w).
pub fn merge_index(grid: [usize; 3], e: usize) -> Arc<[Option<usize>]> {
    let [d, h, w] = grid;
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(d * h * w * e);
    for z in 0..d {
        for y in 0..h2 {
            for x in 0..w2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (z * h + 2 * y + dy) * w + 2 * x + dx;
                    idx.extend((0..e).map(|c| Some(t * e + c)));
                }
            }
        }
    }
    idx.into()
}

/// Value-level merge of `[L, E]` tokens.
pub fn patch_merging<T: Scalar>(store: &ParamStore<T>, m: &PatchMerging, tokens: &Tensor<T>, grid: [usize; 3]) -> Result<(Tensor<T>, [usize; 3])> {
    let mut g = Graph::with_params(store);
    let x = g.constant(tokens.clone());
    let (y, out) = m.forward(&mut g, x, grid)?;
    Ok((g.value(y).clone(), out))
}
