//! Model configuration, presets and their text serialization.

use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::forced::ForcedVariant;
use crate::fusion::{FusionBlockConfig, SideKind};
use crate::kv::{self, KvDoc, KvWriter};
use crate::nn::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Five continuous targets in [0, 1].
    Regression,
    Classification(usize),
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Regression => 5,
            Task::Classification(k) => k,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Regression => f.write_str("regression"),
            Task::Classification(k) => write!(f, "classification:{k}"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "regression" {
            return Ok(Task::Regression);
        }
        if let Some(k) = s.strip_prefix("classification:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("bad class count in `{s}`")))?;
            if k < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
            return Ok(Task::Classification(k));
        }
        Err(Error::Config(format!(
            "unknown task `{s}` (expected regression or classification:<k>)"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LateFusion {
    FaceOnly,
    ConcatAll,
}

impl fmt::Display for LateFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LateFusion::FaceOnly => "face_only",
            LateFusion::ConcatAll => "concat_all",
        })
    }
}

impl FromStr for LateFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face_only" => Ok(LateFusion::FaceOnly),
            "concat_all" => Ok(LateFusion::ConcatAll),
            _ => Err(Error::Config(format!("unknown late fusion `{s}` (expected face_only or concat_all)"))),
        }
    }
}

/// How fusion-stage blocks distribute the side inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Every fusion block attends to every side in order.
    Sequential,
    /// Block `b` attends only to side `b mod n`.
    Alternating,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Sequential => "sequential",
            FusionMode::Alternating => "alternating",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(FusionMode::Sequential),
            "alternating" => Ok(FusionMode::Alternating),
            _ => Err(Error::Config(format!("unknown fusion mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub heads: usize,
}

/// A token-sequence side input of fixed native width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SideSpec {
    pub width: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Face and full-frame input extents `[C, D, H, W]`.
    pub input: [usize; 4],
    pub patch_size: usize,
    pub use_backbone: bool,
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub stages: Vec<StageConfig>,
    pub window: [usize; 3],
    pub mlp_ratio: usize,
    pub drop_path: f64,
    pub self_attention: AttentionKind,
    pub performer_features: usize,
    pub forced_variant: ForcedVariant,
    pub seg_per_frame: bool,
    pub seg_min_fraction: f64,
    pub fullframe: bool,
    pub interlocutor: bool,
    pub audio: Option<SideSpec>,
    pub transcript: Option<SideSpec>,
    pub metadata_width: usize,
    /// Explicit side order; empty means the canonical order of enabled sides.
    pub fusion: FusionBlockConfig,
    pub fusion_mode: FusionMode,
    pub late_fusion: LateFusion,
}

impl ModelConfig {
    /// Desk-scale reference: 3×8×32×32 input, p = 8, two stages (E 32 → 64).
    pub fn desk() -> Self {
        Self {
            task: Task::Regression,
            input: [3, 8, 32, 32],
            patch_size: 8,
            use_backbone: true,
            backbone: BackboneConfig {
                in_channels: 3,
                stem_channels: 8,
                block_count: 2,
                kernel: 3,
                downsample: [2, 4, 4],
                out_channels: 32,
                activation: Activation::Gelu,
            },
            embed_dim: 32,
            stages: vec![StageConfig { depth: 2, heads: 2 }, StageConfig { depth: 2, heads: 4 }],
            window: [2, 4, 4],
            mlp_ratio: 2,
            drop_path: 0.1,
            self_attention: AttentionKind::Softmax,
            performer_features: 16,
            forced_variant: ForcedVariant::LinearBias,
            seg_per_frame: false,
            seg_min_fraction: 0.0,
            fullframe: true,
            interlocutor: false,
            audio: Some(SideSpec { width: 12, tokens: 6 }),
            transcript: Some(SideSpec { width: 16, tokens: 6 }),
            metadata_width: 0,
            fusion: FusionBlockConfig::default(),
            fusion_mode: FusionMode::Sequential,
            late_fusion: LateFusion::ConcatAll,
        }
    }

    /// Reduced preset for repeated multi-seed training runs on one CPU core:
    /// 3×4×16×16 input, p = 8, stages E 16 → 32.
    pub fn compact() -> Self {
        Self {
            input: [3, 4, 16, 16],
            backbone: BackboneConfig {
                in_channels: 3,
                stem_channels: 4,
                block_count: 1,
                kernel: 3,
                downsample: [2, 2, 2],
                out_channels: 16,
                activation: Activation::Gelu,
            },
            embed_dim: 16,
            stages: vec![StageConfig { depth: 1, heads: 2 }, StageConfig { depth: 2, heads: 2 }],
            window: [2, 4, 4],
            drop_path: 0.0,
            performer_features: 8,
            ..Self::desk()
        }
    }

    /// Smallest useful configuration, for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            input: [3, 2, 8, 8],
            patch_size: 4,
            backbone: BackboneConfig {
                in_channels: 3,
                stem_channels: 2,
                block_count: 1,
                kernel: 3,
                downsample: [1, 2, 2],
                out_channels: 4,
                activation: Activation::Gelu,
            },
            embed_dim: 4,
            stages: vec![StageConfig { depth: 2, heads: 2 }, StageConfig { depth: 1, heads: 2 }],
            window: [1, 1, 2],
            mlp_ratio: 1,
            drop_path: 0.0,
            performer_features: 4,
            audio: Some(SideSpec { width: 3, tokens: 2 }),
            transcript: Some(SideSpec { width: 5, tokens: 2 }),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "compact" => Ok(Self::compact()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown model preset `{name}` (expected desk, compact or tiny)"))),
        }
    }

    /// Token grid produced by the front-end.
    pub fn token_grid(&self) -> Result<[usize; 3]> {
        let [_, d, h, w] = self.input;
        let p = self.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("{h}×{w} frames not divisible by patch size {p}")));
        }
        let patch = self.backbone.out_extent([d, p, p])?;
        Ok([patch[0], (h / p) * patch[1], (w / p) * patch[2]])
    }

    /// Token grid and width at the start of each stage.
    pub fn stage_shapes(&self) -> Result<Vec<([usize; 3], usize)>> {
        let mut grid = self.token_grid()?;
        let mut e = self.embed_dim;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            out.push((grid, e));
            if s + 1 < self.stages.len() {
                if grid[1] % 2 != 0 || grid[2] % 2 != 0 {
                    return Err(Error::Config(format!("stage {s} grid {grid:?} cannot be merged 2×2")));
                }
                grid = [grid[0], grid[1] / 2, grid[2] / 2];
                e *= 2;
            }
        }
        Ok(out)
    }

    pub fn final_width(&self) -> usize {
        self.embed_dim << self.stages.len().saturating_sub(1)
    }

    /// Sides enabled by the branch flags, in canonical order.
    pub fn enabled_sides(&self) -> Vec<SideKind> {
        let mut v = Vec::new();
        if self.fullframe {
            v.push(SideKind::FullframeTarget);
            if self.interlocutor {
                v.push(SideKind::FullframeInterlocutor);
            }
        }
        if self.audio.is_some() {
            v.push(SideKind::Audio);
        }
        if self.transcript.is_some() {
            v.push(SideKind::Transcript);
        }
        v
    }

    pub fn fusion_order(&self) -> Vec<SideKind> {
        if self.fusion.order.is_empty() {
            self.enabled_sides()
        } else {
            self.fusion.order.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_shapes()?;
        if self.input[0] != self.backbone.in_channels {
            return Err(Error::Config(format!(
                "input has {} channels but the backbone expects {}",
                self.input[0], self.backbone.in_channels
            )));
        }
        if stages.is_empty() {
            return Err(Error::Config("at least one transformer stage is required".into()));
        }
        for (s, ((_, e), st)) in stages.iter().zip(&self.stages).enumerate() {
            if st.depth == 0 || st.heads == 0 || e % st.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: width {e} with {} heads and depth {} is invalid",
                    st.heads, st.depth
                )));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        if self.interlocutor && !self.fullframe {
            return Err(Error::Config("interlocutor branch requires the full-frame branch".into()));
        }
        if self.forced_variant == ForcedVariant::AttnBias && self.self_attention == AttentionKind::Performer {
            return Err(Error::Unsupported(
                "forced variant c biases attention logits and needs softmax self-attention".into(),
            ));
        }
        let order = self.fusion_order();
        let fusion = FusionBlockConfig {
            order: order.clone(),
            ..self.fusion.clone()
        };
        fusion.validate()?;
        let enabled = self.enabled_sides();
        let mut sorted = order.clone();
        sorted.sort();
        let mut want = enabled.clone();
        want.sort();
        if sorted != want {
            return Err(Error::Config(format!(
                "fusion order [{}] must list exactly the enabled sides [{}]",
                kv::join(&order),
                kv::join(&enabled)
            )));
        }
        if self.metadata_width > 0 && self.audio.is_none() && self.transcript.is_none() {
            return Err(Error::Config("metadata needs an audio or transcript side".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        let b = &self.backbone;
        w.section("model")
            .kv("task", self.task)
            .kv("input", kv::join(&self.input))
            .kv("patch_size", self.patch_size)
            .kv("use_backbone", self.use_backbone)
            .kv("embed_dim", self.embed_dim)
            .kv(
                "stage_depths",
                kv::join(&self.stages.iter().map(|s| s.depth).collect::<Vec<_>>()),
            )
            .kv(
                "stage_heads",
                kv::join(&self.stages.iter().map(|s| s.heads).collect::<Vec<_>>()),
            )
            .kv("window", kv::join(&self.window))
            .kv("mlp_ratio", self.mlp_ratio)
            .kv("drop_path", self.drop_path)
            .kv("self_attention", self.self_attention)
            .kv("performer_features", self.performer_features)
            .kv("forced_variant", self.forced_variant)
            .kv("seg_per_frame", self.seg_per_frame)
            .kv("seg_min_fraction", self.seg_min_fraction)
            .kv("fullframe", self.fullframe)
            .kv("interlocutor", self.interlocutor)
            .kv("audio", side_text(self.audio))
            .kv("transcript", side_text(self.transcript))
            .kv("metadata_width", self.metadata_width)
            .kv("fusion_order", kv::join(&self.fusion.order))
            .kv("fusion_zero_init", self.fusion.zero_init)
            .kv("fusion_attention", self.fusion.attention_kind)
            .kv("fusion_mode", self.fusion_mode)
            .kv("late_fusion", self.late_fusion);
        w.section("backbone")
            .kv("stem_channels", b.stem_channels)
            .kv("block_count", b.block_count)
            .kv("kernel", b.kernel)
            .kv("downsample", kv::join(&b.downsample))
            .kv("out_channels", b.out_channels)
            .kv("activation", b.activation);
        w.finish()
    }

    /// Reads the `[model]` and `[backbone]` sections over a base preset
    /// (`model.preset`, default `desk`). Unset keys keep the preset value.
    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let preset: String = doc.get_or("model", "preset", "desk".to_string())?;
        let base = Self::preset(&preset)?;
        let m = "model";
        let mut cfg = Self {
            task: doc.get_or(m, "task", base.task)?,
            patch_size: doc.get_or(m, "patch_size", base.patch_size)?,
            use_backbone: doc.get_or(m, "use_backbone", base.use_backbone)?,
            embed_dim: doc.get_or(m, "embed_dim", base.embed_dim)?,
            mlp_ratio: doc.get_or(m, "mlp_ratio", base.mlp_ratio)?,
            drop_path: doc.get_or(m, "drop_path", base.drop_path)?,
            self_attention: doc.get_or(m, "self_attention", base.self_attention)?,
            performer_features: doc.get_or(m, "performer_features", base.performer_features)?,
            forced_variant: doc.get_or(m, "forced_variant", base.forced_variant)?,
            seg_per_frame: doc.get_or(m, "seg_per_frame", base.seg_per_frame)?,
            seg_min_fraction: doc.get_or(m, "seg_min_fraction", base.seg_min_fraction)?,
            fullframe: doc.get_or(m, "fullframe", base.fullframe)?,
            interlocutor: doc.get_or(m, "interlocutor", base.interlocutor)?,
            metadata_width: doc.get_or(m, "metadata_width", base.metadata_width)?,
            fusion_mode: doc.get_or(m, "fusion_mode", base.fusion_mode)?,
            late_fusion: doc.get_or(m, "late_fusion", base.late_fusion)?,
            ..base.clone()
        };
        if let Some(v) = doc.get(m, "input") {
            cfg.input = kv::parse_array(v, "model.input")?;
        }
        if let Some(v) = doc.get(m, "window") {
            cfg.window = kv::parse_array(v, "model.window")?;
        }
        let depths = doc.get(m, "stage_depths").map(|v| kv::parse_list::<usize>(v, "model.stage_depths"));
        let heads = doc.get(m, "stage_heads").map(|v| kv::parse_list::<usize>(v, "model.stage_heads"));
        if depths.is_some() || heads.is_some() {
            let d = depths.transpose()?.unwrap_or_else(|| base.stages.iter().map(|s| s.depth).collect());
            let h = heads.transpose()?.unwrap_or_else(|| base.stages.iter().map(|s| s.heads).collect());
            if d.len() != h.len() {
                return Err(Error::Config(format!(
                    "{} stage depths but {} stage head counts",
                    d.len(),
                    h.len()
                )));
            }
            cfg.stages = d.into_iter().zip(h).map(|(depth, heads)| StageConfig { depth, heads }).collect();
        }
        if let Some(v) = doc.get(m, "audio") {
            cfg.audio = parse_side(v, "model.audio")?;
        }
        if let Some(v) = doc.get(m, "transcript") {
            cfg.transcript = parse_side(v, "model.transcript")?;
        }
        if let Some(v) = doc.get(m, "fusion_order") {
            cfg.fusion.order = FusionBlockConfig::parse_order(v)?;
        }
        cfg.fusion.zero_init = doc.get_or(m, "fusion_zero_init", base.fusion.zero_init)?;
        cfg.fusion.attention_kind = doc.get_or(m, "fusion_attention", base.fusion.attention_kind)?;
        let b = "backbone";
        cfg.backbone = BackboneConfig {
            in_channels: cfg.input[0],
            stem_channels: doc.get_or(b, "stem_channels", base.backbone.stem_channels)?,
            block_count: doc.get_or(b, "block_count", base.backbone.block_count)?,
            kernel: doc.get_or(b, "kernel", base.backbone.kernel)?,
            downsample: match doc.get(b, "downsample") {
                Some(v) => kv::parse_array(v, "backbone.downsample")?,
                None => base.backbone.downsample,
            },
            out_channels: doc.get_or(b, "out_channels", base.backbone.out_channels)?,
            activation: doc.get_or(b, "activation", base.backbone.activation)?,
        };
        if cfg.backbone.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("backbone.kernel {} must be odd", cfg.backbone.kernel)));
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let cfg = Self::from_doc(&doc)?;
        doc.reject_unused()?;
        Ok(cfg)
    }
}

fn side_text(s: Option<SideSpec>) -> String {
    match s {
        None => "off".into(),
        Some(s) => format!("{}x{}", s.tokens, s.width),
    }
}

/// `off` or `<tokens>x<width>`.
fn parse_side(v: &str, what: &str) -> Result<Option<SideSpec>> {
    if v == "off" {
        return Ok(None);
    }
    let (t, w) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{what}: expected `off` or `<tokens>x<width>`, got `{v}`")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{what}: bad count `{s}`")))
    };
    Ok(Some(SideSpec {
        tokens: parse(t)?,
        width: parse(w)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "compact", "tiny"] {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.token_grid().unwrap(), [4, 8, 8]);
        let s = cfg.stage_shapes().unwrap();
        assert_eq!(s, vec![([4, 8, 8], 32), ([4, 4, 4], 64)]);
        assert_eq!(cfg.final_width(), 64);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelConfig::from_text("[model]\ntask = nope").is_err());
        assert!(ModelConfig::from_text("[model]\nbogus = 1").is_err());
        assert!(ModelConfig::from_text("[model]\nstage_depths = 1,2,3").is_err());
        let mut cfg = ModelConfig::desk();
        cfg.fusion.order = vec![SideKind::Audio];
        assert!(cfg.validate().is_err());
        cfg.fusion.order = vec![SideKind::Transcript, SideKind::Audio, SideKind::FullframeTarget];
        cfg.validate().unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.self_attention = AttentionKind::Performer;
        cfg.forced_variant = ForcedVariant::AttnBias;
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn task_widths() {
        assert_eq!(Task::Regression.outputs(), 5);
        assert_eq!("classification:15".parse::<Task>().unwrap().outputs(), 15);
    }
}
