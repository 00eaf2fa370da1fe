//! The full model: shared front-end, face and full-frame branches, side
//! inputs, fusion and the prediction head.

pub mod checkpoint;
pub mod config;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{BlockConfig, BlockContext, BlockForcing, EncoderBlock, PatchMerging, WindowConfig};
use crate::autodiff::{Graph, Var};
use crate::backbone::{assemble_var, partition_var, Backbone};
use crate::error::{Error, Result};
use crate::forced::{self, ForcedVariant, InputForcing};
use crate::fusion::{ChannelProjection, FusionLayers, MetadataMixer, SideKind};
use crate::nn::Linear;
use crate::params::{Group, ParamId, ParamStore};
use crate::patching::{chunk_of_tokens, patchify_segmap, rescale_m1, ChunkLayout, SegMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use config::{FusionMode, LateFusion, ModelConfig, SideSpec, StageConfig, Task};

/// Input modalities of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Face,
    Segmentation,
    Fullframe,
    Interlocutor,
    Audio,
    Transcript,
    Metadata,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::Segmentation => "segmentation",
            Modality::Fullframe => "fullframe",
            Modality::Interlocutor => "interlocutor",
            Modality::Audio => "audio",
            Modality::Transcript => "transcript",
            Modality::Metadata => "metadata",
        }
    }
}

/// One sample's inputs. Reads of each modality are logged.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Scalar = f64> {
    /// `[C, D, H, W]`
    pub face: Tensor<T>,
    pub seg: Option<SegMap>,
    pub fullframe: Option<Tensor<T>>,
    pub interlocutor: Option<Tensor<T>>,
    /// `[tokens, width]`
    pub audio: Option<Tensor<T>>,
    pub transcript: Option<Tensor<T>>,
    /// `[width]`
    pub metadata: Option<Tensor<T>>,
    reads: RefCell<BTreeSet<Modality>>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn new(face: Tensor<T>) -> Self {
        Self {
            face,
            seg: None,
            fullframe: None,
            interlocutor: None,
            audio: None,
            transcript: None,
            metadata: None,
            reads: RefCell::default(),
        }
    }

    pub fn reads(&self) -> BTreeSet<Modality> {
        self.reads.borrow().clone()
    }

    pub fn clear_reads(&self) {
        self.reads.borrow_mut().clear();
    }

    fn mark(&self, m: Modality) {
        self.reads.borrow_mut().insert(m);
    }

    fn tensor(&self, m: Modality) -> Result<&Tensor<T>> {
        self.mark(m);
        let t = match m {
            Modality::Face => Some(&self.face),
            Modality::Fullframe => self.fullframe.as_ref(),
            Modality::Interlocutor => self.interlocutor.as_ref(),
            Modality::Audio => self.audio.as_ref(),
            Modality::Transcript => self.transcript.as_ref(),
            Modality::Metadata => self.metadata.as_ref(),
            Modality::Segmentation => None,
        };
        t.ok_or_else(|| Error::Data(format!("sample has no `{}` input but the model needs it", m.name())))
    }

    fn segmentation(&self) -> Option<&SegMap> {
        self.mark(Modality::Segmentation);
        self.seg.as_ref()
    }
}

/// Converts video to tokens `[L, C']`: patch partition plus the shared
/// convolutional backbone, or a plain linear embedding of voxel blocks.
#[derive(Clone, Debug)]
pub enum FrontEnd {
    Backbone(Backbone),
    Linear(Linear),
}

/// Embedding and stages of one transformer branch.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub name: String,
    pub embed: Linear,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<EncoderBlock>,
    pub merge: Option<PatchMerging>,
}

/// Per-forward state handed to a trunk.
struct TrunkInputs<'a> {
    rows: Option<&'a [Var]>,
    w1: Option<Var>,
    sides: &'a [(SideKind, Var)],
}

impl Trunk {
    /// Runs the branch on front-end tokens; returns final tokens and grid.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        grid: [usize; 3],
        inputs: &TrunkInputs<'_>,
    ) -> Result<(Var, [usize; 3])> {
        let mut x = self.embed.forward(g, tokens)?;
        let l: usize = grid.iter().product();
        let pe = g.constant(forced::sinusoidal(l, self.embed.output));
        x = g.add(x, pe)?;
        if let (Some(w1), Some(rows)) = (inputs.w1, inputs.rows) {
            x = forced::fa_pos_encoding(g, x, rows[0], w1)?;
        }
        let mut grid = grid;
        let last = self.stages.len() - 1;
        for (s, stage) in self.stages.iter().enumerate() {
            let ctx = BlockContext {
                grid,
                forced_rows: inputs.rows.map(|r| r[s]),
                sides: if s == last { inputs.sides } else { &[] },
            };
            for block in &stage.blocks {
                x = block.forward(g, x, &ctx)?;
            }
            if let Some(m) = &stage.merge {
                let (y, gr) = m.forward(g, x, grid)?;
                x = y;
                grid = gr;
            }
        }
        Ok((x, grid))
    }
}

pub struct Model<T: Scalar = f64> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub frontend: FrontEnd,
    pub input_forcing: InputForcing,
    pub w1: Option<ParamId>,
    pub face: Trunk,
    pub fullframe: Option<Trunk>,
    pub interlocutor: Option<Trunk>,
    pub audio: Option<(Option<MetadataMixer>, ChannelProjection)>,
    pub transcript: Option<(Option<MetadataMixer>, ChannelProjection)>,
    pub head: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let grid = cfg.token_grid()?;
        let frontend = if cfg.use_backbone {
            FrontEnd::Backbone(Backbone::new(&mut store, &mut rng, "backbone", cfg.backbone.clone()))
        } else {
            let ds = cfg.backbone.downsample;
            let fan = cfg.input[0] * ds.iter().product::<usize>();
            FrontEnd::Linear(Linear::new(
                &mut store,
                &mut rng,
                "patch_embed",
                fan,
                cfg.backbone.out_channels,
                true,
                Group::Transformer,
            ))
        };
        let variant = cfg.forced_variant;
        let input_forcing = InputForcing::new(&mut store, "face.forced", variant, cfg.input[0]);
        let w1 = (variant == ForcedVariant::PosEncoding)
            .then(|| store.add("face.forced.w1", Tensor::zeros(&[cfg.embed_dim]), Group::Transformer));
        let face = build_trunk(&mut store, &mut rng, &cfg, "face", true)?;
        let fullframe = cfg
            .fullframe
            .then(|| build_trunk(&mut store, &mut rng, &cfg, "fullframe", false))
            .transpose()?;
        let interlocutor = cfg
            .interlocutor
            .then(|| build_trunk(&mut store, &mut rng, &cfg, "interlocutor", false))
            .transpose()?;
        let fw = cfg.final_width();
        let mw = cfg.metadata_width;
        let mut side = |name: &str, spec: Option<SideSpec>| {
            spec.map(|s| {
                let mix = (mw > 0).then(|| MetadataMixer::new(&mut store, &format!("{name}.metadata"), s.width, mw));
                let proj = ChannelProjection::new(&mut store, &mut rng, &format!("{name}.proj"), s.width, fw);
                (mix, proj)
            })
        };
        let audio = side("audio", cfg.audio);
        let transcript = side("transcript", cfg.transcript);
        let branches = match cfg.late_fusion {
            LateFusion::FaceOnly => 1,
            LateFusion::ConcatAll => 1 + cfg.fullframe as usize + cfg.interlocutor as usize,
        };
        let head = Linear::new(&mut store, &mut rng, "head", fw * branches, cfg.task.outputs(), true, Group::Transformer);
        let _ = grid;
        Ok(Self {
            cfg,
            store,
            frontend,
            input_forcing,
            w1,
            face,
            fullframe,
            interlocutor,
            audio,
            transcript,
            head,
        })
    }

    /// Video `[C, D, H, W]` to tokens `[L, C']` on the token grid.
    pub fn embed_video(&self, g: &mut Graph<'_, T>, video: Var) -> Result<(Var, [usize; 3])> {
        let want = self.cfg.input;
        if g.shape(video) != want {
            return Err(Error::dim(
                "model input",
                format!("video {:?}, expected {want:?}", g.shape(video)),
            ));
        }
        let grid = self.cfg.token_grid()?;
        let l: usize = grid.iter().product();
        let feats = match &self.frontend {
            FrontEnd::Backbone(b) => {
                let (patches, rc) = partition_var(g, video, self.cfg.patch_size)?;
                let f = b.forward_batch(g, patches)?;
                assemble_var(g, f, rc)?
            }
            FrontEnd::Linear(lin) => {
                let blocks = g.gather(video, voxel_block_index(want, self.cfg.backbone.downsample), &[l, lin.input])?;
                let t = lin.forward(g, blocks)?;
                let t = g.transpose(t)?;
                g.reshape(t, &[lin.output, grid[0], grid[1], grid[2]])?
            }
        };
        let c = g.shape(feats)[0];
        let flat = g.reshape(feats, &[c, l])?;
        Ok((g.transpose(flat)?, grid))
    }

    /// Segmentation rows `[L_s, E_s]` for each face-branch stage.
    fn forced_rows(&self, g: &mut Graph<'_, T>, seg: &SegMap) -> Result<Vec<Var>> {
        let shapes = self.cfg.stage_shapes()?;
        let (grid0, e0) = shapes[0];
        let depth = if self.cfg.seg_per_frame { grid0[0] } else { 1 };
        let mut layout = ChunkLayout {
            depth,
            rows: grid0[1],
            cols: grid0[2],
        };
        let mut m = patchify_segmap(seg, layout, e0, self.cfg.seg_min_fraction)?;
        let mut out = Vec::with_capacity(shapes.len());
        for (s, &(grid, e)) in shapes.iter().enumerate() {
            if s > 0 {
                layout = ChunkLayout {
                    depth,
                    rows: grid[1],
                    cols: grid[2],
                };
                m = rescale_m1(&m, layout, e)?;
            }
            let chunks = chunk_of_tokens(grid, layout)?;
            out.push(g.constant(m.rows_for(&chunks)?));
        }
        Ok(out)
    }

    fn check_seg(&self, seg: &SegMap) -> Result<()> {
        let [_, d, h, w] = self.cfg.input;
        if seg.height() != h || seg.width() != w {
            return Err(Error::dim(
                "segmentation",
                format!("{}×{} map for {h}×{w} frames", seg.height(), seg.width()),
            ));
        }
        if self.cfg.seg_per_frame && seg.frames().is_some_and(|f| f != d) {
            return Err(Error::dim(
                "segmentation",
                format!("{} frames in map for {d} video frames", seg.frames().unwrap_or(1)),
            ));
        }
        Ok(())
    }

    /// Pooled `[1, E]` features from final tokens.
    fn pool(&self, g: &mut Graph<'_, T>, x: Var, grid: [usize; 3]) -> Result<Var> {
        let out = self.branch_output(g, x, grid)?;
        let p = g.adaptive_avg_pool3d(out)?;
        let e = g.shape(p)[1];
        g.reshape(p, &[1, e])
    }

    /// Final tokens `[L, E]` as a `1×E×D×H×W` feature grid.
    pub fn branch_output(&self, g: &mut Graph<'_, T>, x: Var, grid: [usize; 3]) -> Result<Var> {
        let e = g.shape(x)[1];
        let t = g.transpose(x)?;
        g.reshape(t, &[1, e, grid[0], grid[1], grid[2]])
    }

    /// Full-frame branch on a video without forcing or fusion; final tokens and grid.
    pub fn fullframe_tokens(&self, g: &mut Graph<'_, T>, trunk: &Trunk, video: Var) -> Result<(Var, [usize; 3])> {
        let (tokens, grid) = self.embed_video(g, video)?;
        let inputs = TrunkInputs {
            rows: None,
            w1: None,
            sides: &[],
        };
        trunk.forward(g, tokens, grid, &inputs)
    }

    fn side_tokens(
        &self,
        g: &mut Graph<'_, T>,
        input: &ModelInput<T>,
        modality: Modality,
        parts: &(Option<MetadataMixer>, ChannelProjection),
        spec: SideSpec,
    ) -> Result<Var> {
        let t = input.tensor(modality)?;
        if t.shape() != [spec.tokens, spec.width] {
            return Err(Error::dim(
                "side input",
                format!("{} tokens {:?}, expected [{}, {}]", modality.name(), t.shape(), spec.tokens, spec.width),
            ));
        }
        let mut x = g.constant(t.clone());
        if let Some(mix) = &parts.0 {
            let meta = input.tensor(Modality::Metadata)?;
            if meta.shape() != [mix.meta] {
                return Err(Error::dim(
                    "metadata",
                    format!("metadata {:?}, expected [{}]", meta.shape(), mix.meta),
                ));
            }
            let mv = g.constant(meta.clone());
            x = mix.forward(g, x, mv)?;
        }
        parts.1.forward(g, x)
    }

    /// Face branch output `1×E×D×H×W` given full-frame side tokens.
    pub fn face_branch_forward(
        &self,
        g: &mut Graph<'_, T>,
        input: &ModelInput<T>,
        sides: &[(SideKind, Var)],
    ) -> Result<Var> {
        let (x, grid) = self.face_tokens(g, input, sides)?;
        self.branch_output(g, x, grid)
    }

    fn face_tokens(
        &self,
        g: &mut Graph<'_, T>,
        input: &ModelInput<T>,
        sides: &[(SideKind, Var)],
    ) -> Result<(Var, [usize; 3])> {
        let variant = self.cfg.forced_variant;
        let video = g.constant(input.tensor(Modality::Face)?.clone());
        let seg = if variant == ForcedVariant::Off {
            None
        } else {
            let seg = input.segmentation().ok_or_else(|| {
                Error::Config(format!("forced variant {variant} requires a segmentation map"))
            })?;
            self.check_seg(seg)?;
            Some(seg)
        };
        let video = if variant.on_input() {
            let seg = seg.expect("checked above");
            let sv = g.constant(seg.to_tensor(self.cfg.input[1]));
            self.input_forcing.apply(g, video, Some(sv))?
        } else {
            video
        };
        let (tokens, grid) = self.embed_video(g, video)?;
        let rows = match seg {
            Some(seg) if variant.uses_rows() => Some(self.forced_rows(g, seg)?),
            _ => None,
        };
        let w1 = self.w1.map(|id| g.param(id));
        let inputs = TrunkInputs {
            rows: rows.as_deref(),
            w1,
            sides,
        };
        self.face.forward(g, tokens, grid, &inputs)
    }

    /// Predictions `[1, outputs]` for one sample.
    pub fn forward_one(&self, g: &mut Graph<'_, T>, input: &ModelInput<T>) -> Result<Var> {
        let mut sides = Vec::new();
        let mut pooled = Vec::new();
        let late = self.cfg.late_fusion == LateFusion::ConcatAll;
        let fulls = [
            (&self.fullframe, Modality::Fullframe, SideKind::FullframeTarget),
            (&self.interlocutor, Modality::Interlocutor, SideKind::FullframeInterlocutor),
        ];
        for (trunk, modality, kind) in fulls {
            if let Some(trunk) = trunk {
                let video = g.constant(input.tensor(modality)?.clone());
                let (x, grid) = self.fullframe_tokens(g, trunk, video)?;
                sides.push((kind, x));
                if late {
                    pooled.push(self.pool(g, x, grid)?);
                }
            }
        }
        let side_inputs = [
            (&self.audio, Modality::Audio, SideKind::Audio, self.cfg.audio),
            (&self.transcript, Modality::Transcript, SideKind::Transcript, self.cfg.transcript),
        ];
        for (parts, modality, kind, spec) in side_inputs {
            if let (Some(parts), Some(spec)) = (parts, spec) {
                let x = self.side_tokens(g, input, modality, parts, spec)?;
                sides.push((kind, x));
            }
        }
        let (x, grid) = self.face_tokens(g, input, &sides)?;
        let face = self.pool(g, x, grid)?;
        pooled.insert(0, face);
        let feats = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled, 1)?
        };
        self.head.forward(g, feats)
    }

    /// Predictions `[B, outputs]`, one sample at a time.
    pub fn forward(&self, g: &mut Graph<'_, T>, inputs: &[ModelInput<T>]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let outs = inputs
            .iter()
            .map(|i| self.forward_one(g, i))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 0)
        }
    }

    /// Evaluation-mode predictions as a `[B, outputs]` tensor.
    pub fn predict(&self, inputs: &[ModelInput<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        let y = self.forward(&mut g, inputs)?;
        Ok(g.value(y).clone())
    }

    /// All encoder blocks of the face branch with their stage index.
    pub fn face_blocks(&self) -> impl Iterator<Item = (usize, &EncoderBlock)> {
        self.face
            .stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.blocks.iter().map(move |b| (s, b)))
    }

    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix) && p.trainable)
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

fn build_trunk<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    name: &str,
    is_face: bool,
) -> Result<Trunk> {
    let shapes = cfg.stage_shapes()?;
    let embed = Linear::new(store, rng, &format!("{name}.embed"), cfg.backbone.out_channels, cfg.embed_dim, true, Group::Transformer);
    let order = cfg.fusion_order();
    let variant = if is_face { cfg.forced_variant } else { ForcedVariant::Off };
    let last = shapes.len() - 1;
    let mut stages = Vec::with_capacity(shapes.len());
    for (s, (&(_, e), st)) in shapes.iter().zip(&cfg.stages).enumerate() {
        let mut blocks = Vec::with_capacity(st.depth);
        for b in 0..st.depth {
            let bname = format!("{name}.stage{s}.block{b}");
            let mut window = WindowConfig::new(cfg.window, st.heads, e)?;
            if b % 2 == 1 && cfg.self_attention == crate::attention::AttentionKind::Softmax {
                window = window.shifted();
            }
            let bc = BlockConfig {
                window,
                mlp_ratio: cfg.mlp_ratio,
                drop_path: cfg.drop_path,
                kind: cfg.self_attention,
                feature_count: cfg.performer_features,
            };
            let mut block = EncoderBlock::new(store, rng, &bname, bc)?;
            block.forcing = match variant {
                ForcedVariant::LinearBias => BlockForcing::LinearBias {
                    w2: store.add(format!("{bname}.forced.w2"), Tensor::eye(e), Group::Transformer),
                    bias: store.add(format!("{bname}.forced.learned_bias"), Tensor::zeros(&[e]), Group::Transformer),
                },
                ForcedVariant::AttnBias => BlockForcing::AttnBias {
                    adapter: store.add(format!("{bname}.forced.adapter"), Tensor::zeros(&[e, st.heads]), Group::Transformer),
                },
                _ => BlockForcing::None,
            };
            if is_face && s == last && !order.is_empty() {
                let sides: Vec<SideKind> = match cfg.fusion_mode {
                    FusionMode::Sequential => order.clone(),
                    FusionMode::Alternating => vec![order[b % order.len()]],
                };
                block.cross = Some(FusionLayers::new(
                    store,
                    rng,
                    &bname,
                    &sides,
                    e,
                    st.heads,
                    &cfg.fusion,
                    cfg.performer_features,
                )?);
            }
            blocks.push(block);
        }
        let merge = (s < last).then(|| PatchMerging::new(store, rng, &format!("{name}.stage{s}.merge"), e));
        stages.push(Stage { blocks, merge });
    }
    Ok(Trunk {
        name: name.to_string(),
        embed,
        stages,
    })
}

/// Gather map from `[C, D, H, W]` to `[L, C·kd·kh·kw]` non-overlapping voxel blocks.
pub fn voxel_block_index(shape: [usize; 4], k: [usize; 3]) -> Arc<[Option<usize>]> {
    let [c, d, h, w] = shape;
    let (gd, gh, gw) = (d / k[0], h / k[1], w / k[2]);
    let mut idx = Vec::with_capacity(c * d * h * w);
    for bd in 0..gd {
        for bh in 0..gh {
            for bw in 0..gw {
                for ch in 0..c {
                    for i in 0..k[0] {
                        for j in 0..k[1] {
                            for l in 0..k[2] {
                                let (z, y, x) = (bd * k[0] + i, bh * k[1] + j, bw * k[2] + l);
                                idx.push(Some(((ch * d + z) * h + y) * w + x));
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}
