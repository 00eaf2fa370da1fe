//! 3D window partitioning, cyclic shifting and relative position indexing.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logit offset separating tokens from different shifted regions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: [usize; 3],
    pub heads: usize,
    pub embed_dim: usize,
    pub shift: [usize; 3],
}

impl WindowConfig {
    pub fn new(window: [usize; 3], heads: usize, embed_dim: usize) -> Result<Self> {
        if heads == 0 || !embed_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("embed_dim {embed_dim} not divisible by {heads} heads")));
        }
        if window.contains(&0) {
            return Err(Error::Config(format!("window {window:?} has a zero extent")));
        }
        Ok(Self {
            window,
            heads,
            embed_dim,
            shift: [0; 3],
        })
    }

    pub fn shifted(mut self) -> Self {
        self.shift = self.window.map(|w| w / 2);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Precomputed token regrouping for one (grid, window, shift) combination.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
    pub n_windows: usize,
    pub tokens_per_window: usize,
    /// `[nW·N]` source token for each window slot (`None` = padding).
    pub forward: Arc<[Option<usize>]>,
    /// `[L]` window slot holding each original token.
    pub reverse: Arc<[usize]>,
    /// Shift region id of each window slot; present only when shifting.
    pub regions: Option<Vec<usize>>,
}

impl WindowPlan {
    /// Windows larger than the grid shrink to the grid and stop shifting on that axis.
    pub fn new(grid: [usize; 3], cfg: &WindowConfig) -> Self {
        let mut window = cfg.window;
        let mut shift = cfg.shift;
        for a in 0..3 {
            if grid[a] <= window[a] {
                window[a] = grid[a];
                shift[a] = 0;
            }
        }
        let padded: [usize; 3] = std::array::from_fn(|a| grid[a].div_ceil(window[a]) * window[a]);
        let nw: [usize; 3] = std::array::from_fn(|a| padded[a] / window[a]);
        let n_windows = nw.iter().product();
        let n = window.iter().product::<usize>();
        let mut forward = Vec::with_capacity(n_windows * n);
        let mut reverse = vec![0usize; grid.iter().product()];
        let shifting = shift.iter().any(|&s| s > 0);
        let mut regions = shifting.then(Vec::new);
        let region = |a: usize, s: usize| -> usize {
            if s < padded[a] - window[a] {
                0
            } else if s < padded[a] - shift[a] {
                1
            } else {
                2
            }
        };
        for wd in 0..nw[0] {
            for wh in 0..nw[1] {
                for ww in 0..nw[2] {
                    for i in 0..window[0] {
                        for j in 0..window[1] {
                            for k in 0..window[2] {
                                let s = [wd * window[0] + i, wh * window[1] + j, ww * window[2] + k];
                                let src: [usize; 3] = std::array::from_fn(|a| (s[a] + shift[a]) % padded[a]);
                                let slot = forward.len();
                                if (0..3).all(|a| src[a] < grid[a]) {
                                    let t = (src[0] * grid[1] + src[1]) * grid[2] + src[2];
                                    forward.push(Some(t));
                                    reverse[t] = slot;
                                } else {
                                    forward.push(None);
                                }
                                if let Some(r) = regions.as_mut() {
                                    r.push((region(0, s[0]) * 3 + region(1, s[1])) * 3 + region(2, s[2]));
                                }
                            }
                        }
                    }
                }
            }
        }
        Self {
            grid,
            window,
            shift,
            padded,
            n_windows,
            tokens_per_window: n,
            forward: forward.into(),
            reverse: reverse.into(),
            regions,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Additive mask `[nW, 1, N, N]` blocking attention across shift regions.
    pub fn mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        let r = self.regions.as_ref()?;
        let (nw, n) = (self.n_windows, self.tokens_per_window);
        Some(Tensor::from_fn(&[nw, 1, n, n], |idx| {
            let w = idx / (n * n);
            let (i, j) = ((idx / n) % n, idx % n);
            if r[w * n + i] == r[w * n + j] {
                T::zero()
            } else {
                T::lit(MASK_VALUE)
            }
        }))
    }

    /// Gathers token rows `[L, E]` into windows `[nW, N, E]`.
    pub fn partition<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[0] != self.tokens() {
            return Err(Error::dim("window_partition", format!("tokens {s:?} for grid {:?}", self.grid)));
        }
        let e = s[1];
        let idx: Arc<[Option<usize>]> = self
            .forward
            .iter()
            .flat_map(|t| (0..e).map(move |c| t.map(|t| t * e + c)))
            .collect();
        g.gather(x, idx, &[self.n_windows, self.tokens_per_window, e])
    }

    /// Inverse of [`Self::partition`], dropping padding slots.
    pub fn reverse<T: Scalar>(&self, g: &mut Graph<'_, T>, windows: Var) -> Result<Var> {
        let s = g.shape(windows).to_vec();
        if s.len() != 3 || s[0] * s[1] != self.forward.len() {
            return Err(Error::dim("window_reverse", format!("windows {s:?}")));
        }
        let e = s[2];
        let idx: Arc<[Option<usize>]> = self
            .reverse
            .iter()
            .flat_map(|&slot| (0..e).map(move |c| Some(slot * e + c)))
            .collect();
        g.gather(windows, idx, &[self.tokens(), e])
    }

    /// Window-local coordinates of each slot.
    pub fn coords(&self) -> Vec<[usize; 3]> {
        let w = self.window;
        (0..self.tokens_per_window)
            .map(|p| [p / (w[1] * w[2]), (p / w[2]) % w[1], p % w[2]])
            .collect()
    }
}

/// Value-level window partition of a `[D·H·W, E]` token tensor into `[nW, N, E]`.
pub fn window_partition<T: Scalar>(tokens: &Tensor<T>, grid: [usize; 3], cfg: &WindowConfig) -> Result<(Tensor<T>, WindowPlan)> {
    let plan = WindowPlan::new(grid, cfg);
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let w = plan.partition(&mut g, x)?;
    Ok((g.value(w).clone(), plan))
}

pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, plan: &WindowPlan) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(windows.clone());
    let t = plan.reverse(&mut g, x)?;
    Ok(g.value(t).clone())
}

/// Learnable per-head logit offsets indexed by 3D coordinate differences.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    pub window: [usize; 3],
    pub heads: usize,
}

impl RelPosBias {
    pub fn table_len(window: [usize; 3]) -> usize {
        window.iter().map(|w| 2 * w - 1).product()
    }

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, window: [usize; 3], heads: usize) -> Self {
        let table = store.add(
            format!("{name}.rel_bias"),
            init::normal(rng, &[Self::table_len(window), heads], 0.02),
            Group::Transformer,
        );
        Self { table, window, heads }
    }

    /// Table row for a pair of window-local coordinates.
    pub fn index(&self, a: [usize; 3], b: [usize; 3]) -> usize {
        let w = self.window;
        let d: [usize; 3] = std::array::from_fn(|i| a[i] + w[i] - 1 - b[i]);
        (d[0] * (2 * w[1] - 1) + d[1]) * (2 * w[2] - 1) + d[2]
    }

    /// `[N, N]` table-row index for the plan's (possibly shrunk) window.
    pub fn index_map(&self, plan: &WindowPlan) -> Vec<usize> {
        let coords = plan.coords();
        let n = coords.len();
        let mut out = Vec::with_capacity(n * n);
        for a in &coords {
            for b in &coords {
                out.push(self.index(*a, *b));
            }
        }
        out
    }

    /// Gathered bias `[heads, N, N]`.
    pub fn bias<T: Scalar>(&self, g: &mut Graph<'_, T>, plan: &WindowPlan) -> Result<Var> {
        let table = g.param(self.table);
        let map = self.index_map(plan);
        let n = plan.tokens_per_window;
        let h = self.heads;
        let idx: Arc<[Option<usize>]> = (0..h)
            .flat_map(|head| map.iter().map(move |&row| Some(row * h + head)))
            .collect();
        g.gather(table, idx, &[h, n, n])
    }
}
