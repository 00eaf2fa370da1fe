//! Segmentation-guided ("forced") attention variants.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ForcedVariant {
    Off,
    /// (a) seg rows scaled by `w1` added to the token embedding.
    PosEncoding,
    /// (b) seg rows mapped by `w2` and gated by a learned bias after attention.
    #[default]
    LinearBias,
    /// (c) seg rows of the key token shift attention logits.
    AttnBias,
    /// (d) seg map concatenated as an input channel, then reduced back.
    ChannelConcat,
    /// (e) seg map scaled by `γ` added to every input channel.
    InputAdd,
}

impl ForcedVariant {
    pub const ALL: [ForcedVariant; 6] = [
        Self::Off,
        Self::PosEncoding,
        Self::LinearBias,
        Self::AttnBias,
        Self::ChannelConcat,
        Self::InputAdd,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::PosEncoding => "a",
            Self::LinearBias => "b",
            Self::AttnBias => "c",
            Self::ChannelConcat => "d",
            Self::InputAdd => "e",
        }
    }

    /// Whether the variant consumes token-level segmentation rows.
    pub fn uses_rows(self) -> bool {
        matches!(self, Self::PosEncoding | Self::LinearBias | Self::AttnBias)
    }

    /// Whether the variant modifies the raw input video.
    pub fn on_input(self) -> bool {
        matches!(self, Self::ChannelConcat | Self::InputAdd)
    }
}

impl fmt::Display for ForcedVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ForcedVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "off" | "none" => Self::Off,
            "a" | "pos_encoding" => Self::PosEncoding,
            "b" | "linear_bias" => Self::LinearBias,
            "c" | "attn_bias" => Self::AttnBias,
            "d" | "channel_concat" => Self::ChannelConcat,
            "e" | "input_add" => Self::InputAdd,
            other => {
                return Err(Error::Config(format!(
                    "unknown forced variant `{other}` (expected off, a, b, c, d or e)"
                )))
            }
        })
    }
}

/// Input-level parameters for variants (d) and (e).
#[derive(Clone, Debug, Default)]
pub struct InputForcing {
    /// `[C, C+1, 1]` kernel and `[C]` bias.
    pub reduce: Option<(ParamId, ParamId)>,
    pub gamma: Option<ParamId>,
}

impl InputForcing {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, variant: ForcedVariant, channels: usize) -> Self {
        let grp = Group::Transformer;
        match variant {
            ForcedVariant::ChannelConcat => {
                let c = channels;
                let w = Tensor::from_fn(&[c, c + 1, 1], |i| {
                    let (o, k) = (i / (c + 1), i % (c + 1));
                    if o == k {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                let weight = store.add(format!("{name}.reduce.weight"), w, grp);
                let bias = store.add(format!("{name}.reduce.bias"), Tensor::zeros(&[c]), grp);
                Self {
                    reduce: Some((weight, bias)),
                    gamma: None,
                }
            }
            ForcedVariant::InputAdd => Self {
                reduce: None,
                gamma: Some(store.add(format!("{name}.gamma"), Tensor::ones(&[1]), grp)),
            },
            _ => Self::default(),
        }
    }

    /// Applies whichever input variant is configured; identity otherwise.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, seg: Option<Var>) -> Result<Var> {
        if self.reduce.is_none() && self.gamma.is_none() {
            return Ok(x);
        }
        let seg = seg.ok_or_else(|| Error::Config("input forcing needs a segmentation map".into()))?;
        if let Some((w, b)) = self.reduce {
            let (w, b) = (g.param(w), g.param(b));
            return fa_channel_concat(g, x, seg, w, b);
        }
        let gamma = g.param(self.gamma.expect("checked above"));
        fa_input_add(g, x, seg, gamma)
    }
}

fn check_seg<T: Scalar>(g: &Graph<'_, T>, x: Var, seg: Var, op: &'static str) -> Result<()> {
    let (xs, ss) = (g.shape(x), g.shape(seg));
    if xs.len() != 4 || ss.len() != 3 || xs[1..] != ss[..] {
        return Err(Error::dim(op, format!("input {xs:?} vs segmentation {ss:?}")));
    }
    Ok(())
}

/// Variant (a): `x + rows ⊙ w1` for token rows `[L, E]`.
pub fn fa_pos_encoding<T: Scalar>(g: &mut Graph<'_, T>, x: Var, rows: Var, w1: Var) -> Result<Var> {
    if g.shape(x) != g.shape(rows) {
        return Err(Error::shapes("fa_pos_encoding", g.shape(x), g.shape(rows)));
    }
    let t = g.mul(rows, w1)?;
    g.add(x, t)
}

/// Variant (b): `out + (rows · W2) ⊙ learned_bias`.
pub fn fa_linear_bias<T: Scalar>(g: &mut Graph<'_, T>, out: Var, rows: Var, w2: Var, learned_bias: Var) -> Result<Var> {
    let mapped = g.matmul(rows, w2)?;
    if g.shape(mapped) != g.shape(out) {
        return Err(Error::shapes("fa_linear_bias", g.shape(out), g.shape(mapped)));
    }
    let t = g.mul(mapped, learned_bias)?;
    g.add(out, t)
}

/// Variant (c) bias term `[nW, heads, 1, N]` from windowed key rows `[nW, N, E]`
/// and adapter `[E, heads]`.
pub fn fa_attn_bias_term<T: Scalar>(g: &mut Graph<'_, T>, key_rows: Var, adapter: Var) -> Result<Var> {
    let s = g.shape(key_rows).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("fa_attn_bias", format!("key rows {s:?}, expected [windows, tokens, width]")));
    }
    let per_head = g.matmul(key_rows, adapter)?;
    let heads = g.shape(per_head)[2];
    let p = g.permute(per_head, &[0, 2, 1])?;
    g.reshape(p, &[s[0], heads, 1, s[1]])
}

/// Variant (c) applied to logits `[nW, heads, N, N]`.
pub fn fa_attn_bias<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, key_rows: Var, adapter: Var) -> Result<Var> {
    let term = fa_attn_bias_term(g, key_rows, adapter)?;
    g.add(logits, term)
}

/// Variant (d): concatenate `seg [D,H,W]` to `x [C,D,H,W]` and reduce `C+1 -> C`
/// with a pointwise convolution `w [C, C+1, 1]`.
pub fn fa_channel_concat<T: Scalar>(g: &mut Graph<'_, T>, x: Var, seg: Var, w: Var, b: Var) -> Result<Var> {
    check_seg(g, x, seg, "fa_channel_concat")?;
    let s = g.shape(x).to_vec();
    let l = s[1] * s[2] * s[3];
    let xf = g.reshape(x, &[s[0], l])?;
    let sf = g.reshape(seg, &[1, l])?;
    let cat = g.concat(&[xf, sf], 0)?;
    let cat = g.reshape(cat, &[1, s[0] + 1, l])?;
    let y = g.conv1d(cat, w, Some(b))?;
    g.reshape(y, &s)
}

/// Variant (e): `x + γ·seg` broadcast over channels.
pub fn fa_input_add<T: Scalar>(g: &mut Graph<'_, T>, x: Var, seg: Var, gamma: Var) -> Result<Var> {
    check_seg(g, x, seg, "fa_input_add")?;
    let s = g.shape(seg).to_vec();
    let s4 = g.reshape(seg, &[1, s[0], s[1], s[2]])?;
    let t = g.mul(s4, gamma)?;
    g.add(x, t)
}

/// Standard sinusoidal encoding `[len, width]` over flattened token positions.
pub fn sinusoidal<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, width], |i| {
        let (pos, c) = ((i / width) as f64, i % width);
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / width as f64);
        let a = pos * freq;
        T::lit(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}
