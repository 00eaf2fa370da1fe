//! Synthetic multimodal samples whose labels depend only on a moving
//! foreground blob and on side-token signal components.

use std::f64::consts::PI;

use fat_core::kv::{self, KvDoc, KvWriter};
use fat_core::model::{ModelConfig, SideSpec, Task};
use fat_core::patching::SegMap;
use fat_core::{Error, ModelInput, Result, Tensor};
use nalgebra::{Matrix4, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Per-channel scale of the blob profile.
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.75, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSpec {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub radius: (f64, f64),
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: f64,
    pub intensity: (f64, f64),
    /// Flicker frequency range in cycles per frame.
    pub flicker: (f64, f64),
    /// Standard deviation of background pixels.
    pub noise: f64,
    /// Weight of the label signal in side tokens; the rest is noise.
    pub redundancy: f64,
    pub audio: Option<SideSpec>,
    pub transcript: Option<SideSpec>,
    pub metadata_width: usize,
    pub fullframe: bool,
    pub interlocutor: bool,
    pub task: Task,
    /// Relative class frequencies; uniform when empty.
    pub class_ratios: Vec<f64>,
}

impl GenerationSpec {
    /// A spec whose extents and side inputs match `cfg`.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let [channels, frames, height, width] = cfg.input;
        let scale = height.min(width) as f64 / 32.0;
        let r_min = 2.0 * scale.max(0.75);
        Self {
            channels,
            frames,
            height,
            width,
            radius: (r_min, (5.0 * scale).max(r_min + 1.0)),
            max_speed: 1.5 * scale,
            intensity: (0.5, 1.5),
            flicker: (0.05, 0.45),
            noise: 0.5,
            redundancy: 0.5,
            audio: cfg.audio,
            transcript: cfg.transcript,
            metadata_width: cfg.metadata_width,
            fullframe: cfg.fullframe,
            interlocutor: cfg.interlocutor,
            task: cfg.task,
            class_ratios: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.channels > CHANNEL_GAIN.len() {
            return err(format!("synthetic data supports 1 to 3 channels, got {}", self.channels));
        }
        if self.frames < 2 {
            return err("at least two frames are needed to encode motion".into());
        }
        if !(self.radius.0 >= 1.5 && self.radius.1 > self.radius.0) {
            return err(format!("radius range {:?} must satisfy 1.5 <= min < max", self.radius));
        }
        let travel = self.max_speed * (self.frames - 1) as f64;
        let need = 2.0 * self.radius.1 + travel + 2.0;
        if need > self.height.min(self.width) as f64 {
            return err(format!(
                "blob of radius {} moving {travel} px does not fit a {}×{} frame",
                self.radius.1, self.height, self.width
            ));
        }
        if !(self.max_speed > 0.0 && self.intensity.0 > 0.0 && self.intensity.1 > self.intensity.0) {
            return err("speed and intensity ranges must be positive and non-empty".into());
        }
        if !(self.flicker.0 > 0.0 && self.flicker.1 < 0.5 && self.flicker.1 > self.flicker.0) {
            return err(format!("flicker range {:?} must lie inside (0, 0.5)", self.flicker));
        }
        if !(0.0..=1.0).contains(&self.redundancy) || self.noise < 0.0 {
            return err("redundancy must be in [0, 1] and noise non-negative".into());
        }
        if let Task::Classification(k) = self.task {
            if !self.class_ratios.is_empty()
                && (self.class_ratios.len() != k || self.class_ratios.iter().any(|&r| r <= 0.0))
            {
                return err(format!("{} class ratios for {k} classes", self.class_ratios.len()));
            }
        }
        Ok(())
    }

    pub fn write(&self, w: &mut KvWriter) {
        let side = |s: Option<SideSpec>| s.map_or("off".to_string(), |s| format!("{}x{}", s.tokens, s.width));
        w.section("data")
            .kv("channels", self.channels)
            .kv("frames", self.frames)
            .kv("height", self.height)
            .kv("width", self.width)
            .kv("radius", format!("{},{}", self.radius.0, self.radius.1))
            .kv("max_speed", self.max_speed)
            .kv("intensity", format!("{},{}", self.intensity.0, self.intensity.1))
            .kv("flicker", format!("{},{}", self.flicker.0, self.flicker.1))
            .kv("noise", self.noise)
            .kv("redundancy", self.redundancy)
            .kv("audio", side(self.audio))
            .kv("transcript", side(self.transcript))
            .kv("metadata_width", self.metadata_width)
            .kv("fullframe", self.fullframe)
            .kv("interlocutor", self.interlocutor)
            .kv("task", self.task)
            .kv("class_ratios", kv::join(&self.class_ratios));
    }

    /// Reads `[data]` keys over `base`.
    pub fn read(doc: &KvDoc, base: &Self) -> Result<Self> {
        let d = "data";
        let pair = |key: &str, dflt: (f64, f64)| -> Result<(f64, f64)> {
            match doc.get(d, key) {
                None => Ok(dflt),
                Some(v) => {
                    let [a, b] = kv::parse_array::<2, f64>(v, &format!("data.{key}"))?;
                    Ok((a, b))
                }
            }
        };
        let side = |key: &str, dflt: Option<SideSpec>| -> Result<Option<SideSpec>> {
            match doc.get(d, key) {
                None => Ok(dflt),
                Some("off") => Ok(None),
                Some(v) => {
                    let (t, w) = v
                        .split_once('x')
                        .ok_or_else(|| Error::Config(format!("data.{key}: expected off or <tokens>x<width>")))?;
                    let p = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Config(format!("data.{key}: bad count `{s}`")))
                    };
                    Ok(Some(SideSpec { tokens: p(t)?, width: p(w)? }))
                }
            }
        };
        let spec = Self {
            channels: doc.get_or(d, "channels", base.channels)?,
            frames: doc.get_or(d, "frames", base.frames)?,
            height: doc.get_or(d, "height", base.height)?,
            width: doc.get_or(d, "width", base.width)?,
            radius: pair("radius", base.radius)?,
            max_speed: doc.get_or(d, "max_speed", base.max_speed)?,
            intensity: pair("intensity", base.intensity)?,
            flicker: pair("flicker", base.flicker)?,
            noise: doc.get_or(d, "noise", base.noise)?,
            redundancy: doc.get_or(d, "redundancy", base.redundancy)?,
            audio: side("audio", base.audio)?,
            transcript: side("transcript", base.transcript)?,
            metadata_width: doc.get_or(d, "metadata_width", base.metadata_width)?,
            fullframe: doc.get_or(d, "fullframe", base.fullframe)?,
            interlocutor: doc.get_or(d, "interlocutor", base.interlocutor)?,
            task: doc.get_or(d, "task", base.task)?,
            class_ratios: match doc.get(d, "class_ratios") {
                Some(v) => kv::parse_list(v, "data.class_ratios")?,
                None => base.class_ratios.clone(),
            },
        };
        Ok(spec)
    }
}

/// Generating parameters of one blob.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobParams {
    pub velocity: (f64, f64),
    pub intensity: f64,
    pub radius: f64,
    pub flicker: f64,
    /// Center at frame 0 as (x, y).
    pub start: (f64, f64),
}

impl BlobParams {
    pub fn amplitude(&self, t: usize) -> f64 {
        self.intensity * (1.0 + 0.5 * (2.0 * PI * self.flicker * t as f64).cos())
    }

    pub fn center(&self, t: usize) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * t as f64,
            self.start.1 + self.velocity.1 * t as f64,
        )
    }

    /// Profile value at pixel (x, y) of frame t; `None` outside the support.
    pub fn value(&self, t: usize, x: usize, y: usize) -> Option<f64> {
        let (cx, cy) = self.center(t);
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        let r2 = self.radius * self.radius;
        (d2 < r2).then(|| self.amplitude(t) * (1.0 - d2 / r2))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub seed: u64,
    /// `[C, D, H, W]`
    pub face: Tensor<f64>,
    pub fullframe: Option<Tensor<f64>>,
    pub interlocutor: Option<Tensor<f64>>,
    /// Per-frame blob support.
    pub seg: SegMap,
    pub audio: Option<Tensor<f64>>,
    pub transcript: Option<Tensor<f64>>,
    pub metadata: Option<Tensor<f64>>,
    /// Normalized (vx, vy, intensity, radius, flicker).
    pub label: [f64; 5],
    pub class: Option<usize>,
    pub blob: BlobParams,
}

impl SyntheticSample {
    /// Model input; the segmentation map is per-frame or the union over frames.
    pub fn to_input(&self, per_frame_seg: bool) -> ModelInput<f64> {
        let mut m = ModelInput::new(self.face.clone());
        m.seg = Some(if per_frame_seg { self.seg.clone() } else { self.seg.union() });
        m.fullframe = self.fullframe.clone();
        m.interlocutor = self.interlocutor.clone();
        m.audio = self.audio.clone();
        m.transcript = self.transcript.clone();
        m.metadata = self.metadata.clone();
        m
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn normalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v - lo) / (hi - lo)
}

fn draw_blob<R: Rng>(rng: &mut R, spec: &GenerationSpec, vx_norm: Option<f64>) -> BlobParams {
    let vrange = (-spec.max_speed, spec.max_speed);
    let vx = match vx_norm {
        Some(u) => vrange.0 + u * (vrange.1 - vrange.0),
        None => uniform(rng, vrange),
    };
    let vy = uniform(rng, vrange);
    let intensity = uniform(rng, spec.intensity);
    let radius = uniform(rng, spec.radius);
    let flicker = uniform(rng, spec.flicker);
    let travel = (spec.frames - 1) as f64;
    let start_axis = |rng: &mut R, v: f64, extent: usize| {
        let lo = radius + (-v * travel).max(0.0);
        let hi = (extent - 1) as f64 - radius - (v * travel).max(0.0);
        uniform(rng, (lo, hi.max(lo)))
    };
    let sx = start_axis(rng, vx, spec.width);
    let sy = start_axis(rng, vy, spec.height);
    BlobParams {
        velocity: (vx, vy),
        intensity,
        radius,
        flicker,
        start: (sx, sy),
    }
}

/// Renders blobs over Gaussian background noise; blob pixels carry no noise.
fn render<R: Rng>(rng: &mut R, spec: &GenerationSpec, blobs: &[BlobParams]) -> (Tensor<f64>, Vec<bool>) {
    let (c, d, h, w) = (spec.channels, spec.frames, spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut data = vec![0.0; c * d * h * w];
    let mut support = vec![false; d * h * w];
    for t in 0..d {
        for y in 0..h {
            for x in 0..w {
                let fg = blobs.iter().filter_map(|b| b.value(t, x, y)).fold(None, |acc: Option<f64>, v| {
                    Some(acc.unwrap_or(0.0) + v)
                });
                support[(t * h + y) * w + x] = fg.is_some();
                for ch in 0..c {
                    let i = ((ch * d + t) * h + y) * w + x;
                    data[i] = match fg {
                        Some(v) => CHANNEL_GAIN[ch] * v,
                        None if spec.noise > 0.0 => noise.sample(rng),
                        None => 0.0,
                    };
                }
            }
        }
    }
    (Tensor::new(vec![c, d, h, w], data).expect("consistent shape"), support)
}

fn side_tokens<R: Rng>(rng: &mut R, s: SideSpec, signal: &[f64], redundancy: f64) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(&[s.tokens, s.width], |i| {
        let z = signal[(i % s.width) % signal.len()];
        redundancy * z + (1.0 - redundancy) * normal.sample(rng)
    })
}

/// Generates one sample; `class` pins the first label into its bin.
pub fn generate_sample(seed: u64, spec: &GenerationSpec, class: Option<usize>) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vx_norm = match (spec.task, class) {
        (Task::Classification(k), Some(c)) => {
            if c >= k {
                return Err(Error::Bounds { index: c, len: k });
            }
            Some((c as f64 + rng.random::<f64>()) / k as f64)
        }
        _ => None,
    };
    let blob = draw_blob(&mut rng, spec, vx_norm);
    let (face, support) = render(&mut rng, spec, &[blob]);
    let seg = SegMap::per_frame(spec.frames, spec.height, spec.width, support)?;
    let vr = (-spec.max_speed, spec.max_speed);
    let label = [
        normalize(blob.velocity.0, vr),
        normalize(blob.velocity.1, vr),
        normalize(blob.intensity, spec.intensity),
        normalize(blob.radius, spec.radius),
        normalize(blob.flicker, spec.flicker),
    ];
    let class = match spec.task {
        Task::Classification(k) => Some(class.unwrap_or(((label[0] * k as f64) as usize).min(k - 1))),
        Task::Regression => None,
    };
    let fullframe = if spec.fullframe {
        let distractor = draw_blob(&mut rng, spec, None);
        Some(render(&mut rng, spec, &[blob, distractor]).0)
    } else {
        None
    };
    let interlocutor = if spec.interlocutor {
        let other = draw_blob(&mut rng, spec, None);
        Some(render(&mut rng, spec, &[other]).0)
    } else {
        None
    };
    let z = |i: usize| 2.0 * label[i] - 1.0;
    let audio = spec.audio.map(|s| side_tokens(&mut rng, s, &[z(2), z(4)], spec.redundancy));
    let transcript = spec.transcript.map(|s| side_tokens(&mut rng, s, &[z(0), z(1)], spec.redundancy));
    let metadata = (spec.metadata_width > 0).then(|| {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Tensor::from_fn(&[spec.metadata_width], |_| n.sample(&mut rng))
    });
    Ok(SyntheticSample {
        seed,
        face,
        fullframe,
        interlocutor,
        seg,
        audio,
        transcript,
        metadata,
        label,
        class,
        blob,
    })
}

/// Recovers blob parameters from the face video and per-frame support by an
/// exact least-squares fit of the quadratic profile in frames 0 and 1.
pub fn decode_blob(sample: &SyntheticSample) -> Result<BlobParams> {
    let s = sample.face.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    if d < 2 {
        return Err(Error::Data("need two frames to decode motion".into()));
    }
    let x = sample.face.data();
    let mut fits = Vec::with_capacity(2);
    for t in 0..2 {
        let mut ata = Matrix4::<f64>::zeros();
        let mut atb = Vector4::<f64>::zeros();
        let mut count = 0;
        for yy in 0..h {
            for xx in 0..w {
                if !sample.seg.at(t, yy, xx) {
                    continue;
                }
                let (fx, fy) = (xx as f64, yy as f64);
                let row = Vector4::new(1.0, fx * fx + fy * fy, fx, fy);
                let v = x[(t * h + yy) * w + xx];
                ata += row * row.transpose();
                atb += row * v;
                count += 1;
            }
        }
        if count < 4 {
            return Err(Error::Data(format!("frame {t}: only {count} foreground pixels")));
        }
        let c = ata
            .lu()
            .solve(&atb)
            .ok_or_else(|| Error::Numeric(format!("frame {t}: degenerate blob fit")))?;
        let cx = -c[2] / (2.0 * c[1]);
        let cy = -c[3] / (2.0 * c[1]);
        let amp = c[0] - c[1] * (cx * cx + cy * cy);
        let r = (-amp / c[1]).sqrt();
        fits.push((cx, cy, amp, r));
    }
    let (x0, y0, a0, r0) = fits[0];
    let (x1, y1, a1, _) = fits[1];
    let intensity = a0 / 1.5;
    let cos = ((a1 / intensity - 1.0) / 0.5).clamp(-1.0, 1.0);
    Ok(BlobParams {
        velocity: (x1 - x0, y1 - y0),
        intensity,
        radius: r0,
        flicker: cos.acos() / (2.0 * PI),
        start: (x0, y0),
    })
}

/// Label vector of decoded blob parameters under `spec`'s ranges.
pub fn label_of(blob: &BlobParams, spec: &GenerationSpec) -> [f64; 5] {
    let vr = (-spec.max_speed, spec.max_speed);
    [
        normalize(blob.velocity.0, vr),
        normalize(blob.velocity.1, vr),
        normalize(blob.intensity, spec.intensity),
        normalize(blob.radius, spec.radius),
        normalize(blob.flicker, spec.flicker),
    ]
}

/// Splits `n` into integer counts proportional to `ratios` (largest remainder).
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: GenerationSpec,
    pub seed: u64,
    pub samples: Vec<SyntheticSample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let k = match self.spec.task {
            Task::Classification(k) => k,
            Task::Regression => return Vec::new(),
        };
        let mut c = vec![0; k];
        for &i in idx {
            if let Some(cl) = self.samples[i].class {
                c[cl] += 1;
            }
        }
        c
    }

    pub fn classes(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].class.unwrap_or(0)).collect()
    }
}

/// `n` samples with a deterministic shuffled train/val split.
pub fn generate_dataset(n: usize, seed: u64, spec: &GenerationSpec, train_fraction: f64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("a dataset needs at least 2 samples, got {n}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<Option<usize>> = match spec.task {
        Task::Classification(k) => {
            let ratios = if spec.class_ratios.is_empty() {
                vec![1.0; k]
            } else {
                spec.class_ratios.clone()
            };
            let mut v: Vec<Option<usize>> = apportion(n, &ratios)
                .iter()
                .enumerate()
                .flat_map(|(c, &cnt)| std::iter::repeat_n(Some(c), cnt))
                .collect();
            v.shuffle(&mut rng);
            v
        }
        Task::Regression => vec![None; n],
    };
    let samples = classes
        .iter()
        .map(|&c| generate_sample(rng.next_u64(), spec, c))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenerationSpec {
        GenerationSpec::for_model(&ModelConfig::compact())
    }

    #[test]
    fn zero_noise_background_is_zero() {
        let s = GenerationSpec { noise: 0.0, ..spec() };
        let smp = generate_sample(3, &s, None).unwrap();
        let (h, w) = (s.height, s.width);
        for t in 0..s.frames {
            for y in 0..h {
                for x in 0..w {
                    if !smp.seg.at(t, y, x) {
                        assert_eq!(smp.face.data()[(t * h + y) * w + x], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn apportion_matches_ratios() {
        assert_eq!(apportion(85, &[50.0, 30.0, 5.0]), vec![50, 30, 5]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
    }

    #[test]
    fn oversized_blob_is_rejected() {
        let s = GenerationSpec { radius: (2.0, 9.0), ..spec() };
        assert!(matches!(generate_sample(0, &s, None), Err(Error::Config(_))));
    }

    #[test]
    fn split_counts() {
        let d = generate_dataset(10, 1, &spec(), 0.8).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (8, 2));
        assert!(d.train.iter().all(|i| !d.val.contains(i)));
    }
}
