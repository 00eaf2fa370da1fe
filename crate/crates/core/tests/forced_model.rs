//! Segmentation-guided variants and whole-model behaviour.

mod common;

use common::{normal, rng, uniform};
use fat_core::forced::{fa_attn_bias, fa_channel_concat, fa_input_add, fa_linear_bias, fa_pos_encoding, ForcedVariant};
use fat_core::model::{checkpoint, LateFusion, Modality, ModelConfig, ModelInput, Task};
use fat_core::patching::SegMap;
use fat_core::{Graph, Model, Tensor, Var};

fn value(g: &Graph<'_, f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central foreground rectangle covering the middle half of each frame.
fn centre_seg(h: usize, w: usize) -> SegMap {
    let mask = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (h / 4..h - h / 4).contains(&y) && (w / 4..w - w / 4).contains(&x)
        })
        .collect();
    SegMap::new(h, w, mask).unwrap()
}

fn sample(cfg: &ModelConfig, seed: u64, seg: SegMap) -> ModelInput<f64> {
    let mut r = rng(seed);
    let [c, d, h, w] = cfg.input;
    let mut m = ModelInput::new(uniform(&mut r, &[c, d, h, w], 0.0, 1.0));
    m.seg = Some(seg);
    if cfg.fullframe {
        m.fullframe = Some(uniform(&mut r, &[c, d, h, w], 0.0, 1.0));
    }
    if cfg.interlocutor {
        m.interlocutor = Some(uniform(&mut r, &[c, d, h, w], 0.0, 1.0));
    }
    if let Some(s) = cfg.audio {
        m.audio = Some(normal(&mut r, &[s.tokens, s.width]));
    }
    if let Some(s) = cfg.transcript {
        m.transcript = Some(normal(&mut r, &[s.tokens, s.width]));
    }
    if cfg.metadata_width > 0 {
        m.metadata = Some(normal(&mut r, &[cfg.metadata_width]));
    }
    m
}

fn tiny(variant: ForcedVariant) -> ModelConfig {
    ModelConfig {
        forced_variant: variant,
        ..ModelConfig::tiny()
    }
}

fn input_for(cfg: &ModelConfig, seed: u64) -> ModelInput<f64> {
    sample(cfg, seed, centre_seg(cfg.input[2], cfg.input[3]))
}

fn predict(model: &Model<f64>, input: &ModelInput<f64>) -> Vec<f64> {
    model.predict(std::slice::from_ref(input)).unwrap().data().to_vec()
}

/// Overwrites trainable parameters whose name contains `pattern` with noise.
fn randomize(model: &mut Model<f64>, pattern: &str, seed: u64) -> usize {
    let mut r = rng(seed);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.contains(pattern))
        .map(|(id, _)| id)
        .collect();
    for &id in &ids {
        let shape = model.store.get(id).value.shape().to_vec();
        model.store.set(id, normal(&mut r, &shape).map(|v| 0.5 * v)).unwrap();
    }
    ids.len()
}

// ---------------------------------------------------------------- variant ops

#[test]
fn position_encoding_shifts_foreground_tokens() {
    let mut g = Graph::<f64>::new();
    let x = normal(&mut rng(1), &[6, 4]);
    let xv = g.constant(x.clone());
    let rows = g.constant(Tensor::ones(&[6, 4]));
    let w1 = g.constant(Tensor::ones(&[4]));
    let y = fa_pos_encoding(&mut g, xv, rows, w1).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| v + 1.0).collect();
    assert_eq!(value(&g, y), expect);

    let zero = g.constant(Tensor::zeros(&[6, 4]));
    let y = fa_pos_encoding(&mut g, xv, zero, w1).unwrap();
    assert_eq!(value(&g, y), x.data());
    let bad = g.constant(Tensor::ones(&[5, 4]));
    assert!(fa_pos_encoding(&mut g, xv, bad, w1).is_err());
}

#[test]
fn linear_bias_adds_mapped_rows() {
    let mut g = Graph::<f64>::new();
    let x = normal(&mut rng(2), &[6, 4]);
    let xv = g.constant(x.clone());
    let rows = g.constant(Tensor::ones(&[6, 4]));
    let w2 = g.constant(Tensor::eye(4));
    let b = g.constant(Tensor::ones(&[4]));
    let y = fa_linear_bias(&mut g, xv, rows, w2, b).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| v + 1.0).collect();
    assert_eq!(value(&g, y), expect);

    // General case against a loop.
    let r = uniform(&mut rng(3), &[6, 4], 0.0, 1.0);
    let w = normal(&mut rng(4), &[4, 4]);
    let lb = normal(&mut rng(5), &[4]);
    let (rv, wv, lv) = (g.constant(r.clone()), g.constant(w.clone()), g.constant(lb.clone()));
    let y = fa_linear_bias(&mut g, xv, rv, wv, lv).unwrap();
    let mut expect = x.data().to_vec();
    for i in 0..6 {
        for j in 0..4 {
            let m: f64 = (0..4).map(|k| r.data()[i * 4 + k] * w.data()[k * 4 + j]).sum();
            expect[i * 4 + j] += m * lb.data()[j];
        }
    }
    assert!(max_diff(&value(&g, y), &expect) <= 1e-12);
}

#[test]
fn attention_bias_moves_mass_to_foreground_keys() {
    let mut g = Graph::<f64>::new();
    let logits = normal(&mut rng(6), &[1, 2, 5, 5]);
    let lv = g.constant(logits);
    // Keys 1 and 3 are foreground.
    let keys = g.constant(Tensor::from_fn(&[1, 5, 3], |i| if matches!(i / 3, 1 | 3) { 1.0 } else { 0.0 }));
    let adapter = g.constant(Tensor::ones(&[3, 2]));
    let biased = fa_attn_bias(&mut g, lv, keys, adapter).unwrap();
    let before = g.softmax(lv, 3).unwrap();
    let after = g.softmax(biased, 3).unwrap();
    let fg = |v: &[f64]| v.chunks(5).map(|r| r[1] + r[3]).collect::<Vec<_>>();
    for (b, a) in fg(&value(&g, before)).iter().zip(fg(&value(&g, after))) {
        assert!(a > *b, "foreground mass {a} not above {b}");
    }
    // Bias of 3 on each foreground logit, nothing elsewhere.
    let diff: Vec<f64> = value(&g, biased).iter().zip(value(&g, lv)).map(|(a, b)| a - b).collect();
    for row in diff.chunks(5) {
        assert!(max_diff(row, &[0.0, 3.0, 0.0, 3.0, 0.0]) <= 1e-12, "{row:?}");
    }
}

#[test]
fn channel_concat_is_a_per_pixel_affine_map() {
    let mut g = Graph::<f64>::new();
    let x = normal(&mut rng(7), &[3, 2, 4, 4]);
    let seg = Tensor::from_fn(&[2, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let w = normal(&mut rng(8), &[3, 4, 1]);
    let b = normal(&mut rng(9), &[3]);
    let vars = [x.clone(), seg.clone(), w.clone(), b.clone()].map(|t| g.constant(t));
    let y = fa_channel_concat(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
    let p = 32;
    let mut expect = vec![0.0; 3 * p];
    for o in 0..3 {
        for i in 0..p {
            let mut acc = b.data()[o];
            for c in 0..3 {
                acc += w.data()[o * 4 + c] * x.data()[c * p + i];
            }
            acc += w.data()[o * 4 + 3] * seg.data()[i];
            expect[o * p + i] = acc;
        }
    }
    assert!(max_diff(&value(&g, y), &expect) <= 1e-12);
    let bad = g.constant(Tensor::zeros(&[2, 4, 3]));
    assert!(fa_channel_concat(&mut g, vars[0], bad, vars[2], vars[3]).is_err());
}

#[test]
fn input_add_scales_segmentation_by_gamma() {
    let mut g = Graph::<f64>::new();
    let x = normal(&mut rng(10), &[3, 2, 4, 4]);
    let seg = Tensor::from_fn(&[2, 4, 4], |i| (i % 5 == 0) as u8 as f64);
    let gamma = g.constant(Tensor::full(&[1], 2.0));
    let (xv, sv) = (g.constant(x.clone()), g.constant(seg.clone()));
    let y = fa_input_add(&mut g, xv, sv, gamma).unwrap();
    let expect: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v + 2.0 * seg.data()[i % 32]).collect();
    assert_eq!(value(&g, y), expect);
}

// ---------------------------------------------------------------- model level

#[test]
fn zero_initialized_row_variants_match_the_unforced_model() {
    let off = Model::<f64>::new(tiny(ForcedVariant::Off), 5).unwrap();
    let input = input_for(&off.cfg, 1);
    let base = predict(&off, &input);
    for v in [ForcedVariant::PosEncoding, ForcedVariant::LinearBias, ForcedVariant::AttnBias] {
        let m = Model::<f64>::new(tiny(v), 5).unwrap();
        let d = max_diff(&predict(&m, &input), &base);
        assert!(d <= 1e-12, "variant {v}: {d:.3e}");
    }
}

#[test]
fn pass_through_input_variants_match_the_unforced_model() {
    let off = Model::<f64>::new(tiny(ForcedVariant::Off), 5).unwrap();
    let input = input_for(&off.cfg, 2);
    let base = predict(&off, &input);

    let d = Model::<f64>::new(tiny(ForcedVariant::ChannelConcat), 5).unwrap();
    assert!(max_diff(&predict(&d, &input), &base) <= 1e-12);

    let mut e = Model::<f64>::new(tiny(ForcedVariant::InputAdd), 5).unwrap();
    let gamma = e.input_forcing.gamma.unwrap();
    assert_eq!(e.store.get(gamma).value.data(), [1.0]);
    assert!(max_diff(&predict(&e, &input), &base) > 1e-6, "gamma = 1 must change the output");
    e.store.set(gamma, Tensor::zeros(&[1])).unwrap();
    assert!(max_diff(&predict(&e, &input), &base) <= 1e-12);
}

#[test]
fn zero_initialized_fusion_matches_the_face_only_model() {
    let cfg = ModelConfig {
        late_fusion: LateFusion::FaceOnly,
        interlocutor: true,
        ..tiny(ForcedVariant::Off)
    };
    let mut model = Model::<f64>::new(cfg, 9).unwrap();
    let input = input_for(&model.cfg, 3);
    let full = predict(&model, &input);
    assert!(input.reads().contains(&Modality::Audio));
    let crossed = model.face.stages.iter().flat_map(|s| &s.blocks).filter(|b| b.cross.is_some()).count();
    assert!(crossed > 0);

    for stage in &mut model.face.stages {
        for block in &mut stage.blocks {
            block.cross = None;
        }
    }
    model.fullframe = None;
    model.interlocutor = None;
    model.audio = None;
    model.transcript = None;
    let bare = predict(&model, &input);
    let d = max_diff(&full, &bare);
    assert!(d <= 1e-12, "{d:.3e}");
}

#[test]
fn background_only_segmentation_is_a_no_op() {
    let off = Model::<f64>::new(tiny(ForcedVariant::Off), 4).unwrap();
    let [_, _, h, w] = off.cfg.input;
    let input = sample(&off.cfg, 6, SegMap::filled(h, w, false));
    let base = predict(&off, &input);
    for v in [ForcedVariant::PosEncoding, ForcedVariant::LinearBias, ForcedVariant::AttnBias, ForcedVariant::InputAdd] {
        let mut m = Model::<f64>::new(tiny(v), 4).unwrap();
        let pattern = if v == ForcedVariant::InputAdd { "forced.gamma" } else { ".forced." };
        assert!(randomize(&mut m, pattern, 11) > 0);
        let d = max_diff(&predict(&m, &input), &base);
        assert!(d <= 1e-12, "variant {v}: {d:.3e}");
    }

    // Variant (d): only the segmentation column of the reduction is moved.
    let mut m = Model::<f64>::new(tiny(ForcedVariant::ChannelConcat), 4).unwrap();
    let (wid, _) = m.input_forcing.reduce.unwrap();
    let c = m.cfg.input[0];
    let mut wt = m.store.get(wid).value.clone();
    let noise = normal(&mut rng(12), &[c]);
    for o in 0..c {
        wt.data_mut()[o * (c + 1) + c] = noise.data()[o];
    }
    m.store.set(wid, wt).unwrap();
    assert!(max_diff(&predict(&m, &input), &base) <= 1e-12);
    let fg = input_for(&m.cfg, 6);
    assert!(max_diff(&predict(&m, &fg), &predict(&off, &fg)) > 1e-9, "foreground must matter");
}

#[test]
fn recorded_attention_rows_are_distributions() {
    for v in ForcedVariant::ALL {
        let mut m = Model::<f64>::new(tiny(v), 2).unwrap();
        randomize(&mut m, ".forced.", 3);
        let input = input_for(&m.cfg, 4);
        let mut g = Graph::with_params(&m.store).record_taps();
        m.forward(&mut g, std::slice::from_ref(&input)).unwrap();
        let taps = g.take_taps();
        assert_eq!(taps.len(), m.face_blocks().count() + m.fullframe.as_ref().map_or(0, |t| t.stages.iter().map(|s| s.blocks.len()).sum()));
        for tap in taps {
            let n = *tap.value.shape().last().unwrap();
            for row in tap.value.data().chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "{}: row sum {s}", tap.label);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}

#[test]
fn desk_shapes() {
    let cfg = ModelConfig::desk();
    let shapes = cfg.stage_shapes().unwrap();
    assert_eq!(shapes, vec![([4, 8, 8], 32), ([4, 4, 4], 64)]);
    let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.store.get(model.head.weight).value.shape(), [128, 5]);
    let input = input_for(&cfg, 0);
    let mut g = Graph::with_params(&model.store);
    let out = model.forward(&mut g, std::slice::from_ref(&input)).unwrap();
    assert_eq!(g.shape(out), [1, 5]);

    let bare_cfg = ModelConfig {
        fullframe: false,
        audio: None,
        transcript: None,
        ..ModelConfig::desk()
    };
    let bare = Model::<f64>::new(bare_cfg, 0).unwrap();
    let mut g = Graph::with_params(&bare.store);
    let face = bare.face_branch_forward(&mut g, &input, &[]).unwrap();
    assert_eq!(g.shape(face), [1, 64, 4, 4, 4]);

    let face_only = Model::<f64>::new(
        ModelConfig {
            late_fusion: LateFusion::FaceOnly,
            ..ModelConfig::desk()
        },
        0,
    )
    .unwrap();
    assert_eq!(face_only.store.get(face_only.head.weight).value.shape(), [64, 5]);

    let cls = Model::<f64>::new(
        ModelConfig {
            task: Task::Classification(15),
            ..ModelConfig::tiny()
        },
        0,
    )
    .unwrap();
    let input = input_for(&cls.cfg, 0);
    assert_eq!(cls.predict(&[input]).unwrap().shape(), [1, 15]);
}

#[test]
fn predictions_are_deterministic_and_per_sample() {
    let cfg = tiny(ForcedVariant::LinearBias);
    let a = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let b = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let c = Model::<f64>::new(cfg.clone(), 8).unwrap();
    let (x, y) = (input_for(&cfg, 1), input_for(&cfg, 2));
    assert_eq!(predict(&a, &x), predict(&b, &x));
    assert_ne!(predict(&a, &x), predict(&c, &x));

    let both = a.predict(&[x.clone(), y.clone()]).unwrap();
    let k = cfg.task.outputs();
    assert_eq!(&both.data()[..k], predict(&a, &x).as_slice());
    assert_eq!(&both.data()[k..], predict(&a, &y).as_slice());
}

#[test]
fn disabled_modalities_are_never_read() {
    let cfg = ModelConfig {
        audio: None,
        ..tiny(ForcedVariant::Off)
    };
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let mut input = input_for(&tiny(ForcedVariant::Off), 3);
    predict(&model, &input);
    let reads = input.reads();
    assert!(!reads.contains(&Modality::Audio));
    assert!(!reads.contains(&Modality::Segmentation));
    assert!(reads.contains(&Modality::Transcript));

    // Missing required inputs are reported, not defaulted.
    input.transcript = None;
    assert!(model.predict(&[input]).is_err());
}

#[test]
fn full_frame_branches_mirror_the_face_trunk() {
    let cfg = ModelConfig {
        interlocutor: true,
        ..tiny(ForcedVariant::LinearBias)
    };
    let m = Model::<f64>::new(cfg, 0).unwrap();
    let shapes = |prefix: &str| {
        m.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix) && !p.name.contains(".forced.") && !p.name.contains(".cross."))
            .map(|(_, p)| (p.name[prefix.len()..].to_string(), p.value.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    let face = shapes("face.");
    assert!(!face.is_empty());
    assert_eq!(shapes("fullframe."), face);
    assert_eq!(shapes("interlocutor."), face);
    assert_eq!(m.parameter_count("interlocutor."), m.parameter_count("fullframe."));
    assert!(m.store.iter().all(|(_, p)| !(p.name.starts_with("fullframe.") && p.name.contains(".forced."))));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = tiny(ForcedVariant::AttnBias);
    let mut m = Model::<f64>::new(cfg.clone(), 3).unwrap();
    randomize(&mut m, ".forced.", 1);
    let bytes = checkpoint::to_bytes(&m);
    let back: Model<f64> = checkpoint::from_bytes(&bytes).unwrap();
    let x = input_for(&cfg, 5);
    assert_eq!(predict(&back, &x), predict(&m, &x));
    assert_eq!(back.store.checksum(None), m.store.checksum(None));
    assert!(checkpoint::from_bytes::<f64>(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn gradient_check_of_a_forced_tiny_model() {
    // Whole-model gradients on a handful of parameters, including forced ones.
    for v in [ForcedVariant::PosEncoding, ForcedVariant::AttnBias, ForcedVariant::ChannelConcat] {
        let mut m = Model::<f64>::new(tiny(v), 1).unwrap();
        randomize(&mut m, ".forced.", 2);
        let input = input_for(&m.cfg, 3);
        let target = normal(&mut rng(4), &[1, 5]);
        let ids: Vec<_> = m
            .store
            .iter()
            .filter(|(_, p)| p.trainable && (p.name.contains("forced") || p.name.starts_with("head")))
            .map(|(id, _)| id)
            .collect();
        let err = fat_core::gradcheck::grad_check_params(
            &m.store,
            &ids,
            |g| {
                let y = m.forward(g, std::slice::from_ref(&input))?;
                let t = g.constant(target.clone());
                fat_core::nn::mse_loss(g, y, t)
            },
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "variant {v}: {err:.3e}");
    }
}
