//! Cross-attention fusion of side inputs into the main token stream.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{AttentionKind, AttentionParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::params::{init, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SideKind {
    FullframeTarget,
    FullframeInterlocutor,
    Audio,
    Transcript,
    Metadata,
}

impl SideKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FullframeTarget => "fullframe_target",
            Self::FullframeInterlocutor => "fullframe_interlocutor",
            Self::Audio => "audio",
            Self::Transcript => "transcript",
            Self::Metadata => "metadata",
        }
    }

    fn pairs_with(self, next: SideKind) -> bool {
        matches!(
            (self, next),
            (Self::FullframeTarget, Self::FullframeInterlocutor)
                | (Self::Audio, Self::Transcript)
                | (Self::Transcript, Self::Audio)
        )
    }
}

impl fmt::Display for SideKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SideKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "fullframe_target" => Self::FullframeTarget,
            "fullframe_interlocutor" => Self::FullframeInterlocutor,
            "audio" => Self::Audio,
            "transcript" => Self::Transcript,
            "metadata" => Self::Metadata,
            other => return Err(Error::Config(format!("unknown side input `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlockConfig {
    pub order: Vec<SideKind>,
    pub zero_init: bool,
    pub attention_kind: AttentionKind,
}

impl Default for FusionBlockConfig {
    fn default() -> Self {
        Self {
            order: Vec::new(),
            zero_init: true,
            attention_kind: AttentionKind::Performer,
        }
    }
}

impl FusionBlockConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.order.iter().enumerate() {
            if self.order[..i].contains(s) {
                return Err(Error::Config(format!("side `{s}` listed twice in fusion order")));
            }
            if *s == SideKind::Metadata {
                return Err(Error::Config(
                    "metadata is concatenated to audio/transcript, not attended to directly".into(),
                ));
            }
            if *s == SideKind::FullframeInterlocutor && (i == 0 || self.order[i - 1] != SideKind::FullframeTarget) {
                return Err(Error::Config(
                    "fullframe_interlocutor must immediately follow fullframe_target".into(),
                ));
            }
        }
        Ok(())
    }

    /// Parses a comma-separated list of side names.
    pub fn parse_order(text: &str) -> Result<Vec<SideKind>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

/// Pointwise (kernel-1) convolution mapping native side channels to the fusion width.
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    /// `[fusion, native, 1]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub native: usize,
    pub fusion: usize,
}

impl ChannelProjection {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, native: usize, fusion: usize) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init::fan_in(rng, &[fusion, native, 1], native),
                Group::Transformer,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fusion]), Group::Transformer),
            native,
            fusion,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        channel_project(g, features, w, b)
    }
}

/// `[tokens, native]` to `[tokens, fusion]` via a kernel-1 conv1d `w [fusion, native, 1]`.
pub fn channel_project<T: Scalar>(g: &mut Graph<'_, T>, features: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Contract(format!("side features {s:?} must be a non-empty [tokens, channels] sequence")));
    }
    let f = g.shape(w)[0];
    let t = g.transpose(features)?;
    let t = g.reshape(t, &[1, s[1], s[0]])?;
    let y = g.conv1d(t, w, Some(b))?;
    let y = g.reshape(y, &[f, s[0]])?;
    g.transpose(y)
}

/// Appends a fixed metadata vector to each side token and maps back to the native width.
#[derive(Clone, Debug)]
pub struct MetadataMixer {
    /// `[native + meta, native]`, initialized to pass the features through.
    pub weight: ParamId,
    pub bias: ParamId,
    pub native: usize,
    pub meta: usize,
}

impl MetadataMixer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, native: usize, meta: usize) -> Self {
        let w = Tensor::from_fn(&[native + meta, native], |i| {
            if i / native == i % native {
                T::one()
            } else {
                T::zero()
            }
        });
        Self {
            weight: store.add(format!("{name}.weight"), w, Group::Transformer),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[native]), Group::Transformer),
            native,
            meta,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var, meta: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        concat_metadata(g, features, meta, w, b)
    }
}

/// Concatenates `meta [m]` to every row of `features [L, n]`, then applies `w [n+m, n]`.
pub fn concat_metadata<T: Scalar>(g: &mut Graph<'_, T>, features: Var, meta: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let ms = g.shape(meta).to_vec();
    if ms.len() != 1 {
        return Err(Error::Contract(format!("metadata must be a flat vector, got {ms:?}")));
    }
    if s.len() != 2 {
        return Err(Error::Contract(format!("side features {s:?} must be [tokens, channels]")));
    }
    if ms[0] == 0 {
        return Ok(features);
    }
    let idx: std::sync::Arc<[Option<usize>]> = (0..s[0] * ms[0]).map(|i| Some(i % ms[0])).collect();
    let tiled = g.gather(meta, idx, &[s[0], ms[0]])?;
    let cat = g.concat(&[features, tiled], 1)?;
    g.linear(cat, w, Some(b))
}

/// Pre-norm cross-attention with its own residual: `x + Attn(LN(x), LN(side))`.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer {
    pub side: SideKind,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: AttentionParams,
}

impl CrossAttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        side: SideKind,
        dim: usize,
        heads: usize,
        cfg: &FusionBlockConfig,
        feature_count: usize,
    ) -> Result<Self> {
        Ok(Self {
            side,
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim, Group::Transformer),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim, Group::Transformer),
            attn: AttentionParams::new(
                store,
                rng,
                &format!("{name}.attn"),
                dim,
                heads,
                cfg.attention_kind,
                feature_count,
                cfg.zero_init,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, main: Var, side: Var) -> Result<Var> {
        let (ms, ss) = (g.shape(main).to_vec(), g.shape(side).to_vec());
        if ms.len() != 2 || ss.len() != 2 || ms[1] != ss[1] {
            return Err(Error::dim("cross_attention", format!("main {ms:?} vs side {ss:?}")));
        }
        let q = self.norm_q.forward(g, main)?;
        let kv = self.norm_kv.forward(g, side)?;
        let q = g.reshape(q, &[1, ms[0], ms[1]])?;
        let kv = g.reshape(kv, &[1, ss[0], ss[1]])?;
        let (out, _) = self.attn.forward(g, q, kv, &[])?;
        let out = g.reshape(out, &ms)?;
        g.add(main, out)
    }
}

/// The cross-attention layers attached to one encoder block, in application order.
#[derive(Clone, Debug, Default)]
pub struct FusionLayers {
    pub layers: Vec<CrossAttentionLayer>,
}

impl FusionLayers {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        sides: &[SideKind],
        dim: usize,
        heads: usize,
        cfg: &FusionBlockConfig,
        feature_count: usize,
    ) -> Result<Self> {
        let layers = sides
            .iter()
            .map(|&s| CrossAttentionLayer::new(store, rng, &format!("{name}.cross.{s}"), s, dim, heads, cfg, feature_count))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn sides(&self) -> Vec<SideKind> {
        self.layers.iter().map(|l| l.side).collect()
    }

    /// Runs each layer in order. Adjacent paired sides get an extra residual
    /// around both layers, in averaged form `(x + pair(x)) / 2` so that
    /// zero-initialized layers leave `x` unchanged.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, sides: &[(SideKind, Var)]) -> Result<Var> {
        let find = |kind: SideKind| {
            sides
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Data(format!("fusion expects `{kind}` features but none were supplied")))
        };
        let mut x = x;
        let mut i = 0;
        while i < self.layers.len() {
            let a = &self.layers[i];
            match self.layers.get(i + 1) {
                Some(b) if a.side.pairs_with(b.side) => {
                    let x1 = a.forward(g, x, find(a.side)?)?;
                    let x2 = b.forward(g, x1, find(b.side)?)?;
                    let s = g.add(x, x2)?;
                    x = g.scale(s, T::lit(0.5));
                    i += 2;
                }
                _ => {
                    x = a.forward(g, x, find(a.side)?)?;
                    i += 1;
                }
            }
        }
        Ok(x)
    }
}
