//! Acceptance checks. Prints one verdict line per criterion and exits non-zero
//! when any fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 2 5`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fat_core::attention::{performer_core, random_features};
use fat_core::backbone::Backbone;
use fat_core::forced::ForcedVariant;
use fat_core::gradcheck::suite;
use fat_core::metrics::{eq7_accuracy, mse_per_trait, weighted_f1};
use fat_core::model::{FusionMode, LateFusion, ModelConfig, ModelInput, Task};
use fat_core::patching::{merge_patches, partition_patches, patchify_segmap, ChunkLayout, PatchGrid, SegMap};
use fat_core::{Error, Graph, Model, ParamStore, Result, Tensor};
use fat_harness::ablation::{run_ablation, AblationRow};
use fat_harness::check::model_grad_check;
use fat_harness::cli::main_with;
use fat_harness::config::ExperimentConfig;
use fat_harness::sampler::balanced_batches;
use fat_harness::synth::{generate_dataset, generate_sample, GenerationSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const OP_TOL: f64 = 1e-5;
const OP_EPS: f64 = 1e-6;
const OP_SEEDS: u64 = 20;
const MODEL_TOL: f64 = 1e-4;
const MODEL_EPS: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ROW_SUM_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
const PATCHIFY_MAPS: u64 = 200;
const PERFORMER_SEEDS: u64 = 20;
const ABLATION_SEEDS: usize = 5;
const ABLATION_MIN_WINS: usize = 4;
const ABLATION_TRAIN_SAMPLES: usize = 256;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
/// Half the variance of a uniform label on [0, 1].
const LOSS_THRESHOLD: f64 = 1.0 / 24.0;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample::<f64, _>(StandardNormal))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn with_variant(base: ModelConfig, v: ForcedVariant) -> ModelConfig {
    ModelConfig {
        forced_variant: v,
        drop_path: 0.0,
        ..base
    }
}

fn input(cfg: &ModelConfig, seed: u64) -> Result<ModelInput<f64>> {
    let s = generate_sample(seed, &GenerationSpec::for_model(cfg), None)?;
    Ok(s.to_input(cfg.seg_per_frame))
}

fn background_input(cfg: &ModelConfig, seed: u64) -> Result<ModelInput<f64>> {
    let mut m = input(cfg, seed)?;
    let [_, d, h, w] = cfg.input;
    m.seg = Some(if cfg.seg_per_frame {
        SegMap::per_frame(d, h, w, vec![false; d * h * w])?
    } else {
        SegMap::filled(h, w, false)
    });
    Ok(m)
}

fn predict(model: &Model<f64>, input: &ModelInput<f64>) -> Result<Vec<f64>> {
    Ok(model.predict(std::slice::from_ref(input))?.data().to_vec())
}

/// Overwrites trainable parameters whose name contains `pattern` with
/// `N(0, scale²)` noise; returns how many were touched.
fn randomize(model: &mut Model<f64>, pattern: &str, scale: f64, seed: u64) -> Result<usize> {
    let mut r = rng(seed);
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.contains(pattern))
        .map(|(id, _)| id)
        .collect();
    for &id in &ids {
        let shape = model.store.get(id).value.shape().to_vec();
        model.store.set(id, normal(&mut r, &shape).map(|v| scale * v))?;
    }
    Ok(ids.len())
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<Verdict> {
    let start = Instant::now();
    let ops = suite::run(&[], OP_SEEDS, OP_EPS)?;
    let failed: Vec<&str> = ops.iter().filter(|r| !r.passed(OP_TOL)).map(|r| r.name.as_str()).collect();
    let worst_op = ops.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);

    let mut worst_model = 0.0f64;
    for v in ForcedVariant::ALL {
        for seed in 0..2 {
            let err = model_grad_check(with_variant(ModelConfig::tiny(), v), seed, 2, MODEL_EPS)?;
            worst_model = worst_model.max(err);
        }
    }
    let elapsed = start.elapsed();
    Ok(Verdict::new(
        failed.is_empty() && worst_model <= MODEL_TOL && elapsed <= GRAD_BUDGET,
        format!(
            "{} ops x {OP_SEEDS} seeds, worst {worst_op:.2e} (tol {OP_TOL:.0e}, failing {failed:?}); \
             tiny model over all variants worst {worst_model:.2e} (tol {MODEL_TOL:.0e}); {:.1}s of {}s",
            ops.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn attention_rows() -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut negative = 0usize;
    let mut rows = 0usize;
    let mut cases = 0usize;
    for (preset, base) in [("tiny", ModelConfig::tiny()), ("compact", ModelConfig::compact())] {
        for v in ForcedVariant::ALL {
            // Bias settings: initial, random relative-position table, and both
            // relative-position and forced terms random and large.
            for setting in 0..3u64 {
                let mut m = Model::<f64>::new(with_variant(base.clone(), v), 3)?;
                if setting >= 1 {
                    randomize(&mut m, "rel_bias", 3.0, 10 + setting)?;
                }
                if setting == 2 {
                    randomize(&mut m, "forced", 3.0, 20 + setting)?;
                }
                for inp in &[input(&m.cfg, 5)?, background_input(&m.cfg, 6)?] {
                    let mut g = Graph::with_params(&m.store).record_taps();
                    m.forward(&mut g, std::slice::from_ref(inp))?;
                    let taps = g.take_taps();
                    if taps.is_empty() {
                        return Err(Error::Contract(format!("{preset} {v}: no attention recorded")));
                    }
                    for tap in taps {
                        let n = *tap.value.shape().last().unwrap_or(&1);
                        for row in tap.value.data().chunks(n) {
                            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                            negative += row.iter().filter(|&&p| p < 0.0).count();
                            rows += 1;
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(Verdict::new(
        worst <= ROW_SUM_TOL && negative == 0,
        format!("{rows} rows over {cases} model/variant/bias/seg cases; worst |sum - 1| {worst:.2e} (tol {ROW_SUM_TOL:.0e}); {negative} negative"),
    ))
}

// ---------------------------------------------------------------- 3

fn zero_init_identities() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut note = |what: String, d: f64| {
        pass &= d <= IDENTITY_TOL;
        notes.push(format!("{what} {d:.1e}"));
    };

    for (preset, base) in [("tiny", ModelConfig::tiny()), ("compact", ModelConfig::compact())] {
        let off = Model::<f64>::new(with_variant(base.clone(), ForcedVariant::Off), 7)?;
        let inputs: Vec<_> = (0..3).map(|s| input(&off.cfg, 40 + s)).collect::<Result<_>>()?;
        let reference: Vec<Vec<f64>> = inputs.iter().map(|i| predict(&off, i)).collect::<Result<_>>()?;
        let worst_against = |m: &Model<f64>| -> Result<f64> {
            let mut w = 0.0f64;
            for (i, r) in inputs.iter().zip(&reference) {
                w = w.max(max_diff(&predict(m, i)?, r));
            }
            Ok(w)
        };

        let mut abc = 0.0f64;
        for v in [ForcedVariant::PosEncoding, ForcedVariant::LinearBias, ForcedVariant::AttnBias] {
            abc = abc.max(worst_against(&Model::new(with_variant(base.clone(), v), 7)?)?);
        }
        note(format!("{preset} a/b/c"), abc);

        let d = Model::<f64>::new(with_variant(base.clone(), ForcedVariant::ChannelConcat), 7)?;
        note(format!("{preset} d"), worst_against(&d)?);

        let mut e = Model::<f64>::new(with_variant(base.clone(), ForcedVariant::InputAdd), 7)?;
        let gamma = e.input_forcing.gamma.ok_or_else(|| Error::Contract("variant e without gamma".into()))?;
        e.store.set(gamma, Tensor::zeros(&[1]))?;
        note(format!("{preset} e(gamma=0)"), worst_against(&e)?);
    }

    // Fusion: every side enabled, face-only head, both fusion schedules.
    for mode in [FusionMode::Sequential, FusionMode::Alternating] {
        let cfg = ModelConfig {
            late_fusion: LateFusion::FaceOnly,
            interlocutor: true,
            fusion_mode: mode,
            ..with_variant(ModelConfig::tiny(), ForcedVariant::Off)
        };
        let mut model = Model::<f64>::new(cfg, 9)?;
        let inputs: Vec<_> = (0..3).map(|s| input(&model.cfg, 60 + s)).collect::<Result<_>>()?;
        let full: Vec<Vec<f64>> = inputs.iter().map(|i| predict(&model, i)).collect::<Result<_>>()?;
        for stage in &mut model.face.stages {
            for block in &mut stage.blocks {
                block.cross = None;
            }
        }
        model.fullframe = None;
        model.interlocutor = None;
        model.audio = None;
        model.transcript = None;
        let mut w = 0.0f64;
        for (i, f) in inputs.iter().zip(&full) {
            w = w.max(max_diff(&predict(&model, i)?, f));
        }
        note(format!("fusion {mode}"), w);
    }
    Ok(Verdict::new(pass, format!("{} (tol {IDENTITY_TOL:.0e})", notes.join(", "))))
}

// ---------------------------------------------------------------- 4

fn background_no_op() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;
    for (preset, base) in [("tiny", ModelConfig::tiny()), ("compact", ModelConfig::compact())] {
        for per_frame in [false, true] {
            let base = ModelConfig {
                seg_per_frame: per_frame,
                ..base.clone()
            };
            let off = Model::<f64>::new(with_variant(base.clone(), ForcedVariant::Off), 4)?;
            let bg = background_input(&off.cfg, 8)?;
            let reference = predict(&off, &bg)?;
            let mut worst = 0.0f64;
            for v in ForcedVariant::ALL.into_iter().filter(|&v| v != ForcedVariant::Off) {
                let mut m = Model::<f64>::new(with_variant(base.clone(), v), 4)?;
                if v == ForcedVariant::ChannelConcat {
                    // Only the segmentation column; the image columns are the
                    // pass-through part of the reduction.
                    let (wid, _) = m.input_forcing.reduce.ok_or_else(|| Error::Contract("variant d without reduction".into()))?;
                    let c = m.cfg.input[0];
                    let mut wt = m.store.get(wid).value.clone();
                    let noise = normal(&mut rng(12), &[c]);
                    for o in 0..c {
                        wt.data_mut()[o * (c + 1) + c] = noise.data()[o];
                    }
                    m.store.set(wid, wt)?;
                } else {
                    let pattern = if v == ForcedVariant::InputAdd { "forced.gamma" } else { ".forced." };
                    if randomize(&mut m, pattern, 1.0, 11)? == 0 {
                        return Err(Error::Contract(format!("variant {v}: no forced parameters")));
                    }
                }
                worst = worst.max(max_diff(&predict(&m, &bg)?, &reference));
                // The same model must react to foreground, or the check is vacuous.
                let fg = input(&m.cfg, 8)?;
                if max_diff(&predict(&m, &fg)?, &predict(&off, &fg)?) <= 1e-9 {
                    pass = false;
                    notes.push(format!("{preset} variant {v} ignores foreground"));
                }
            }
            pass &= worst <= IDENTITY_TOL;
            notes.push(format!("{preset}{} {worst:.1e}", if per_frame { " per-frame" } else { "" }));
        }
    }
    Ok(Verdict::new(pass, format!("worst over variants a-e: {} (tol {IDENTITY_TOL:.0e})", notes.join(", "))))
}

// ---------------------------------------------------------------- 5

fn patching() -> Result<Verdict> {
    let mut r = rng(5);

    let mut round_trips = 0;
    for _ in 0..100 {
        let (c, d, rows, cols, p) = (
            r.random_range(1..4),
            r.random_range(1..4),
            r.random_range(1..5),
            r.random_range(1..5),
            r.random_range(1..6),
        );
        let x = normal(&mut r, &[c, d, rows * p, cols * p]);
        let back = merge_patches(&partition_patches(&x, p)?)?;
        if back.shape() == x.shape() && back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            round_trips += 1;
        }
    }

    let mut oracle_matches = 0;
    for _ in 0..PATCHIFY_MAPS {
        let (rows, cols, ch, cw) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let (h, w) = (rows * ch, cols * cw);
        let density = r.random_range(0.0..0.3);
        let per_frame = r.random_bool(0.5);
        let (frames, depth) = if per_frame {
            let depth = r.random_range(1..3);
            (depth * r.random_range(1..3), depth)
        } else {
            (1, 1)
        };
        let mask: Vec<bool> = (0..frames * h * w).map(|_| r.random_bool(density)).collect();
        let seg = if per_frame {
            SegMap::per_frame(frames, h, w, mask.clone())?
        } else {
            SegMap::new(h, w, mask.clone())?
        };
        let layout = ChunkLayout { depth, rows, cols };
        let m = patchify_segmap(&seg, layout, 3, 0.0)?;
        let fpc = frames / depth;
        let mut ok = m.flags().len() == layout.count();
        for d in 0..depth {
            for rr in 0..rows {
                for cc in 0..cols {
                    let any = (d * fpc..(d + 1) * fpc).any(|f| {
                        (rr * ch..(rr + 1) * ch).any(|y| (cc * cw..(cc + 1) * cw).any(|x| mask[(f * h + y) * w + x]))
                    });
                    ok &= m.flags()[layout.index(d, rr, cc)] == any;
                }
            }
        }
        oracle_matches += ok as u64;
    }

    // Backbone: permuting the patches permutes the outputs, bit for bit.
    let cfg = ModelConfig::compact();
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::new(&mut store, &mut rng(6), "bb", cfg.backbone);
    let [c, d, _, _] = cfg.input;
    let p = cfg.patch_size;
    let x = normal(&mut r, &[c, d, 3 * p, 2 * p]);
    let grid = partition_patches(&x, p)?;
    let out = backbone.forward_grid(&store, &grid)?;
    let mut perm: Vec<usize> = (0..grid.patches.len()).collect();
    let mut equivariant = true;
    for _ in 0..5 {
        perm.shuffle(&mut r);
        let shuffled = PatchGrid {
            patches: perm.iter().map(|&i| grid.patches[i].clone()).collect(),
            ..grid.clone()
        };
        let out2 = backbone.forward_grid(&store, &shuffled)?;
        for (k, &i) in perm.iter().enumerate() {
            let (a, b) = (out2.patches[k].data(), out.patches[i].data());
            equivariant &= a.len() == b.len() && a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
        }
    }
    Ok(Verdict::new(
        round_trips == 100 && oracle_matches == PATCHIFY_MAPS && equivariant,
        format!(
            "round trips bit-exact {round_trips}/100; patchify vs any-pixel oracle {oracle_matches}/{PATCHIFY_MAPS}; \
             backbone permutation-equivariant: {equivariant}"
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn performer_error(seed: u64, m: usize) -> Result<f64> {
    let (n, dh) = (8, 4);
    let mut r = rng(seed);
    let q = normal(&mut r, &[1, 1, n, dh]);
    let k = normal(&mut r, &[1, 1, n, dh]);
    let v = normal(&mut r, &[1, 1, n, dh]);
    let w: Tensor<f64> = random_features(&mut rng(seed ^ 0x5eed), dh, m);
    let mut g = Graph::<f64>::new();
    let vars = [q.clone(), k.clone(), v.clone(), w].map(|t| g.constant(t));
    let y = performer_core(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    let approx = g.value(y).data().to_vec();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| scale * (0..dh).map(|c| qd[i * dh + c] * kd[j * dh + c]).sum::<f64>())
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dh {
            let exact: f64 = (0..n).map(|j| e[j] / z * vd[j * dh + c]).sum();
            total += (approx[i * dh + c] - exact).abs();
        }
    }
    Ok(total / (n * dh) as f64)
}

fn performer_fidelity() -> Result<Verdict> {
    let mean = |m: usize| -> Result<f64> {
        let mut s = 0.0;
        for seed in 0..PERFORMER_SEEDS {
            s += performer_error(seed, m)?;
        }
        Ok(s / PERFORMER_SEEDS as f64)
    };
    let (small, large) = (mean(32)?, mean(512)?);
    Ok(Verdict::new(
        large < small,
        format!("mean |err| over {PERFORMER_SEEDS} seeds: m=32 {small:.4}, m=512 {large:.4}"),
    ))
}

// ---------------------------------------------------------------- 7

fn metrics() -> Result<Verdict> {
    let acc = eq7_accuracy(&[0.2, 0.8], &[0.3, 0.6])?;
    let acc_hand = 1.0 - (0.1 + 0.2) / 2.0;

    let mut r = rng(7);
    let t = Tensor::<f64>::from_fn(&[7, 5], |_| r.random());
    let p = Tensor::<f64>::from_fn(&[7, 5], |_| r.random());
    let (per, mean) = mse_per_trait(t.data(), p.data(), 5)?;
    let mut mse_err = 0.0f64;
    let mut total = 0.0;
    for c in 0..5 {
        let s: f64 = (0..7).map(|i| (t.data()[i * 5 + c] - p.data()[i * 5 + c]).powi(2)).sum();
        total += s;
        mse_err = mse_err.max((per[c] - s / 7.0).abs());
    }
    mse_err = mse_err.max((mean - total / 35.0).abs());
    let (zeros, _) = mse_per_trait(&[0.0; 10], &[1.0; 10], 5)?;
    mse_err = mse_err.max(max_diff(&zeros, &[1.0; 5]));

    // Rows truth, columns prediction.
    let confusion = [[2, 1, 0], [0, 3, 0], [1, 0, 3]];
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (ti, row) in confusion.iter().enumerate() {
        for (pi, &n) in row.iter().enumerate() {
            truth.extend(std::iter::repeat_n(ti, n));
            pred.extend(std::iter::repeat_n(pi, n));
        }
    }
    let n = truth.len() as f64;
    let mut f1_hand = 0.0;
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let support: f64 = confusion[c].iter().sum::<usize>() as f64;
        let predicted: f64 = confusion.iter().map(|row| row[c]).sum::<usize>() as f64;
        let (precision, recall) = (tp / predicted, tp / support);
        f1_hand += support / n * 2.0 * precision * recall / (precision + recall);
    }
    let f1 = weighted_f1(&truth, &pred, 3)?;
    let errs = [(acc - acc_hand).abs(), (acc - 0.85).abs(), mse_err, (f1 - f1_hand).abs(), (f1 - 0.8).abs()];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok(Verdict::new(
        worst <= METRIC_TOL,
        format!("eq7 {acc:.15}, weighted F1 {f1:.15}, mse oracle err {mse_err:.1e}; worst {worst:.1e} (tol {METRIC_TOL:.0e})"),
    ))
}

// ---------------------------------------------------------------- 8 and 9

fn ablation_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_model(ModelConfig::compact());
    cfg.seed = 0;
    cfg.data.samples = 320;
    cfg.optim.lr = 1e-3;
    cfg.optim.lr_backbone = 1e-4;
    cfg.optim.epochs = 10;
    cfg.optim.batch_size = 8;
    cfg
}

fn ablation_and_convergence() -> Result<(Verdict, Verdict)> {
    let cfg = ablation_config();
    let train_samples = (cfg.data.samples as f64 * cfg.data.train_fraction).round() as usize;
    let rows = [AblationRow::Full, AblationRow::WoForced, AblationRow::WoAudio, AblationRow::WoTranscript];
    let start = Instant::now();
    let table = run_ablation(&cfg, &rows, ABLATION_SEEDS, |r| {
        let losses: Vec<String> = r.output.record.train_losses().iter().map(|l| format!("{l:.4}")).collect();
        println!(
            "    {:<14} seed {} best epoch {:<2} val {:.6}  train [{}]",
            r.row.id(),
            r.seed,
            r.output.record.best_epoch,
            r.output.record.best().loss_like(),
            losses.join(" ")
        );
    })?;
    let elapsed = start.elapsed();
    let seeds: Vec<u64> = (0..ABLATION_SEEDS as u64).map(|s| cfg.seed + s).collect();
    let score = |row, seed| table.score(row, seed).unwrap_or(f64::INFINITY);
    let mean = |row| table.row_means(row).and_then(|m| m.last().copied()).unwrap_or(f64::INFINITY);

    let mut pass = train_samples >= ABLATION_TRAIN_SAMPLES && elapsed <= ABLATION_BUDGET;
    let mut parts = Vec::new();
    for row in [AblationRow::WoForced, AblationRow::WoAudio, AblationRow::WoTranscript] {
        let wins = seeds.iter().filter(|&&s| score(AblationRow::Full, s) < score(row, s)).count();
        let ok = wins >= ABLATION_MIN_WINS && mean(AblationRow::Full) < mean(row);
        pass &= ok;
        parts.push(format!("vs {} {wins}/{} seeds, mean {:.5}", row.id(), seeds.len(), mean(row)));
    }
    let ablation = Verdict::new(
        pass,
        format!(
            "full mean {:.5}; {}; {train_samples} train samples; {:.0}s of {}s",
            mean(AblationRow::Full),
            parts.join("; "),
            elapsed.as_secs_f64(),
            ABLATION_BUDGET.as_secs()
        ),
    );

    let epochs = |row: AblationRow, seed: u64| {
        table
            .runs
            .iter()
            .find(|r| r.row == row && r.seed == seed)
            .and_then(|r| r.output.record.epochs_to_reach(LOSS_THRESHOLD))
    };
    let mut no_worse = 0;
    let mut pairs = Vec::new();
    for &s in &seeds {
        let (f, u) = (epochs(AblationRow::Full, s), epochs(AblationRow::WoForced, s));
        if f.is_some_and(|f| u.is_none_or(|u| f <= u)) {
            no_worse += 1;
        }
        let show = |e: Option<usize>| e.map_or("never".to_string(), |e| e.to_string());
        pairs.push(format!("{}/{}", show(f), show(u)));
    }
    let convergence = Verdict::new(
        no_worse >= ABLATION_MIN_WINS,
        format!(
            "epochs to train loss {LOSS_THRESHOLD:.5} (forced/unforced per seed) [{}]; forced no worse on {no_worse}/{}",
            pairs.join(", "),
            seeds.len()
        ),
    );
    Ok((ablation, convergence))
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(|e| Error::Data(e.to_string()))?.to_path_buf();
                files.insert(rel, std::fs::read(&path)?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Result<Verdict> {
    let root = tempfile::tempdir()?;
    let runs = root.path().join("runs");
    let config = root.path().join("exp.txt");
    std::fs::write(
        &config,
        format!(
            "[experiment]\nseed = 3\nout = {}\n\n[model]\npreset = tiny\n\n[data]\nsamples = 24\n\n[optim]\nepochs = 2\n",
            runs.join("default").display()
        ),
    )?;
    let c = config.to_str().unwrap_or_default().to_string();
    let out = |name: &str| runs.join(name).to_string_lossy().into_owned();
    let ckpt = runs.join("train").join("checkpoint.bin").to_string_lossy().into_owned();
    let commands: Vec<Vec<String>> = [
        vec!["generate", "--config", &c, "--out", &out("generate")],
        vec!["train", "--config", &c, "--out", &out("train")],
        vec!["ablate", "--config", &c, "--rows", "full,wo_forced,wo_audio", "--seeds", "2", "--out", &out("ablate")],
        vec!["eval", "--config", &c, "--checkpoint", &ckpt, "--out", &out("eval")],
        vec!["export-attention", "--config", &c, "--checkpoint", &ckpt, "--out", &out("pgm")],
        vec!["export-attention", "--config", &c, "--checkpoint", &ckpt, "--format", "png", "--out", &out("png")],
    ]
    .iter()
    .map(|v| std::iter::once("fat").chain(v.iter().copied()).map(String::from).collect())
    .collect();

    let mut snapshots = Vec::new();
    for _ in 0..2 {
        if runs.exists() {
            std::fs::remove_dir_all(&runs)?;
        }
        for cmd in &commands {
            let code = main_with(cmd.iter().cloned());
            if code != 0 {
                return Ok(Verdict::new(false, format!("`{}` exited with {code}", cmd[1..].join(" "))));
            }
        }
        snapshots.push(snapshot(&runs)?);
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let count = |ext: &str| a.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    Ok(Verdict::new(
        differing.is_empty() && count("csv") > 0 && count("bin") > 0,
        format!(
            "{} commands run twice; {} files ({} csv, {} checkpoints); differing: {differing:?}",
            commands.len(),
            a.len(),
            count("csv"),
            count("bin")
        ),
    ))
}

// ---------------------------------------------------------------- 11

fn balanced_sampler() -> Result<Verdict> {
    let spec = GenerationSpec {
        class_ratios: vec![50.0, 30.0, 5.0],
        ..GenerationSpec::for_model(&ModelConfig {
            task: Task::Classification(3),
            ..ModelConfig::tiny()
        })
    };
    let data = generate_dataset(85, 11, &spec, 1.0)?;
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let counts = data.class_counts(&all);
    let labels = data.classes(&all);
    let mut batches = 0;
    let mut bad = 0;
    for seed in 0..5 {
        for b in balanced_batches(&labels, 3, 9, seed)? {
            let mut per = [0usize; 3];
            b.iter().for_each(|&i| per[labels[i]] += 1);
            batches += 1;
            bad += (per != [3, 3, 3]) as usize;
        }
    }
    Ok(Verdict::new(
        counts == [50, 30, 5] && bad == 0 && batches > 0,
        format!("class counts {counts:?}; {batches} batches of 9 over 5 seeds, {bad} not exactly 3/3/3"),
    ))
}

// ----------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut verdicts: Vec<(usize, Result<Verdict>)> = Vec::new();
    let mut run = |n: usize, f: &dyn Fn() -> Result<Verdict>| {
        if wanted(n) {
            let v = f();
            report(n, &v);
            verdicts.push((n, v));
        }
    };
    run(1, &gradients);
    run(2, &attention_rows);
    run(3, &zero_init_identities);
    run(4, &background_no_op);
    run(5, &patching);
    run(6, &performer_fidelity);
    run(7, &metrics);
    if wanted(8) || wanted(9) {
        match ablation_and_convergence() {
            Ok((a, c)) => {
                run(8, &|| Ok(Verdict::new(a.pass, a.detail.clone())));
                run(9, &|| Ok(Verdict::new(c.pass, c.detail.clone())));
            }
            Err(e) => {
                let msg = e.to_string();
                run(8, &|| Err(Error::Data(msg.clone())));
                run(9, &|| Err(Error::Data(msg.clone())));
            }
        }
    }
    run(10, &determinism);
    run(11, &balanced_sampler);

    let failed: Vec<usize> = verdicts
        .iter()
        .filter(|(_, v)| !v.as_ref().is_ok_and(|v| v.pass))
        .map(|(n, _)| *n)
        .collect();
    println!("\nacceptance: {} of {} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}

fn report(n: usize, v: &Result<Verdict>) {
    match v {
        Ok(v) => println!("criterion {n:>2}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail),
        Err(e) => println!("criterion {n:>2}: FAIL - error: {e}"),
    }
}
