//! Shared-weight (2+1)D convolutional front-end applied to every patch.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2Plus1d};
use crate::params::{init, Group, ParamId, ParamStore};
use crate::patching::{assemble_index, homogeneous_patch_shape, partition_index, PatchGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub block_count: usize,
    pub kernel: usize,
    /// Per-axis (D, H, W) reduction applied by average pooling after the blocks.
    pub downsample: [usize; 3],
    pub out_channels: usize,
    pub activation: Activation,
}

impl BackboneConfig {
    /// Output extent of a `[D, p, p]` patch; errors unless divisible.
    pub fn out_extent(&self, patch: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.downsample[a] == 0 || !patch[a].is_multiple_of(self.downsample[a]) {
                return Err(Error::Config(format!(
                    "patch extent {patch:?} not divisible by downsample {:?}",
                    self.downsample
                )));
            }
            out[a] = patch[a] / self.downsample[a];
        }
        Ok(out)
    }
}

/// Stem → residual (2+1)D blocks → average-pool downsample → pointwise projection.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Conv2Plus1d,
    pub blocks: Vec<(Conv2Plus1d, Conv2Plus1d)>,
    pub proj: ParamId,
    pub proj_bias: ParamId,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: BackboneConfig) -> Self {
        let g = Group::Backbone;
        let (c, k, act) = (cfg.stem_channels, cfg.kernel, cfg.activation);
        let stem = Conv2Plus1d::new(store, rng, &format!("{name}.stem"), cfg.in_channels, c, k, act, g);
        let blocks = (0..cfg.block_count)
            .map(|i| {
                let a = Conv2Plus1d::new(store, rng, &format!("{name}.block{i}.conv1"), c, c, k, act, g);
                let b = Conv2Plus1d::new(store, rng, &format!("{name}.block{i}.conv2"), c, c, k, act, g);
                (a, b)
            })
            .collect();
        let proj = store.add(
            format!("{name}.proj.weight"),
            init::fan_in(rng, &[cfg.out_channels, c, 1, 1, 1], c),
            g,
        );
        let proj_bias = store.add(format!("{name}.proj.bias"), Tensor::zeros(&[cfg.out_channels]), g);
        Self {
            cfg,
            stem,
            blocks,
            proj,
            proj_bias,
        }
    }

    /// Applies the stack to a `P×C×D×p×p` batch of patches.
    pub fn forward_batch<T: Scalar>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::dim(
                "backbone",
                format!("expected P×{}×D×H×W patches, got {s:?}", self.cfg.in_channels),
            ));
        }
        let mut x = self.stem.forward(g, patches)?;
        for (a, b) in &self.blocks {
            let h = a.forward(g, x)?;
            let h = b.forward(g, h)?;
            x = g.add(x, h)?;
        }
        if self.cfg.downsample != [1, 1, 1] {
            x = g.avg_pool3d(x, self.cfg.downsample)?;
        }
        let w = g.param(self.proj);
        let b = g.param(self.proj_bias);
        g.conv3d(x, w, Some(b), [1, 1, 1], [0, 0, 0])
    }

    /// Value-level forward over a [`PatchGrid`]; output grid keeps its arrangement.
    pub fn forward_grid<T: Scalar>(&self, store: &ParamStore<T>, grid: &PatchGrid<T>) -> Result<PatchGrid<T>> {
        let ps = homogeneous_patch_shape(grid)?;
        let n = grid.patches.len();
        let mut flat = Vec::with_capacity(n * ps.iter().product::<usize>());
        for p in &grid.patches {
            flat.extend_from_slice(p.data());
        }
        let mut g = Graph::with_params(store);
        let x = g.constant(Tensor::new(vec![n, ps[0], ps[1], ps[2], ps[3]], flat)?);
        let y = self.forward_batch(&mut g, x)?;
        let ys = g.shape(y).to_vec();
        let per: usize = ys[1..].iter().product();
        let patches = g
            .value(y)
            .data()
            .chunks(per)
            .map(|c| Tensor::new(ys[1..].to_vec(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchGrid {
            patches,
            grid: grid.grid,
            patch_size: ys[4],
            source_shape: [ys[1], ys[2], grid.grid.0 * ys[3], grid.grid.1 * ys[4]],
        })
    }
}

/// Value-level reassembly of a feature grid into `C'×D'×H'×W'`.
pub fn assemble_feature_grid<T: Scalar>(g: &PatchGrid<T>) -> Result<Tensor<T>> {
    crate::patching::merge_patches(g)
}

/// Graph-level partition of a `C×D×H×W` video into `P×C×D×p×p` patches.
pub fn partition_var<T: Scalar>(g: &mut Graph<'_, T>, video: Var, p: usize) -> Result<(Var, (usize, usize))> {
    let s = g.shape(video).to_vec();
    let [c, d, h, w] = match s.as_slice() {
        [c, d, h, w] => [*c, *d, *h, *w],
        _ => return Err(Error::dim("partition", format!("expected C×D×H×W, got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim("partition", format!("{h}×{w} frame not divisible by patch {p}")));
    }
    let (rows, cols) = (h / p, w / p);
    let idx: Arc<[Option<usize>]> = partition_index([c, d, h, w], rows, cols).into();
    let out = g.gather(video, idx, &[rows * cols, c, d, p, p])?;
    Ok((out, (rows, cols)))
}

/// Graph-level inverse tiling of `P×C×D×ph×pw` features.
pub fn assemble_var<T: Scalar>(g: &mut Graph<'_, T>, feats: Var, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 5 || s[0] != grid.0 * grid.1 {
        return Err(Error::Contract(format!("feature batch {s:?} does not fill grid {grid:?}")));
    }
    let idx: Arc<[Option<usize>]> = assemble_index([s[1], s[2], s[3], s[4]], grid.0, grid.1).into();
    g.gather(feats, idx, &[s[1], s[2], grid.0 * s[3], grid.1 * s[4]])
}
