//! Attention heatmaps of the face branch, per stage and head.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fat_core::attention::AttentionKind;
use fat_core::{pgm, Error, Graph, Model, ModelInput, Result, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ImageFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            other => Err(Error::Config(format!("unknown image format `{other}` (pgm or png)"))),
        }
    }
}

/// `maps[stage][head]` is an `[H, W]` frame-resolution map.
#[derive(Clone, Debug)]
pub struct Heatmaps {
    pub maps: Vec<Vec<Tensor<f64>>>,
}

/// Mean attention each token receives, averaged over the queries of its
/// window, the blocks of a stage and the temporal axis, then upsampled by
/// nearest neighbour to the input frame.
pub fn attention_heatmaps(model: &Model<f64>, input: &ModelInput<f64>) -> Result<Heatmaps> {
    if model.cfg.self_attention == AttentionKind::Performer {
        return Err(Error::Unsupported(
            "performer attention has no explicit weights to visualize".into(),
        ));
    }
    let shapes = model.cfg.stage_shapes()?;
    let [_, _, fh, fw] = model.cfg.input;
    let mut g = Graph::with_params(&model.store).record_taps();
    model.forward_one(&mut g, input)?;
    let taps = g.take_taps();
    let mut maps = Vec::with_capacity(shapes.len());
    for (s, &(grid, _)) in shapes.iter().enumerate() {
        let heads = model.cfg.stages[s].heads;
        let l: usize = grid.iter().product();
        let mut heat = vec![vec![0.0; l]; heads];
        let mut blocks = 0;
        for (_, block) in model.face_blocks().filter(|(st, _)| *st == s) {
            let label = block.tap_label();
            let tap = taps
                .iter()
                .find(|t| t.label == label)
                .ok_or_else(|| Error::Contract(format!("no attention recorded for {label}")))?;
            let plan = block.plan(grid);
            let n = plan.tokens_per_window;
            let a = tap.value.data();
            for w in 0..plan.n_windows {
                for (h, hm) in heat.iter_mut().enumerate() {
                    let base = (w * heads + h) * n * n;
                    for j in 0..n {
                        let Some(t) = plan.forward[w * n + j] else { continue };
                        let received: f64 = (0..n).map(|i| a[base + i * n + j]).sum();
                        hm[t] += received / n as f64;
                    }
                }
            }
            blocks += 1;
        }
        let [d, gh, gw] = grid;
        let per_stage = heat
            .into_iter()
            .map(|hm| {
                Tensor::from_fn(&[fh, fw], |p| {
                    let (y, x) = (p / fw * gh / fh, p % fw * gw / fw);
                    (0..d).map(|z| hm[(z * gh + y) * gw + x]).sum::<f64>() / (d * blocks.max(1)) as f64
                })
            })
            .collect();
        maps.push(per_stage);
    }
    Ok(Heatmaps { maps })
}

/// 8-bit gray levels scaled by the map maximum; a flat map stays flat.
pub fn to_gray(map: &Tensor<f64>) -> Vec<u8> {
    let max = map.data().iter().copied().fold(0.0f64, f64::max);
    map.data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

fn map_csv(map: &Tensor<f64>) -> String {
    let w = map.shape()[1];
    let mut s = String::new();
    for row in map.data().chunks(w) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Writes `stage{s}_head{h}.{pgm|png}` and `.csv` per map; returns the paths.
pub fn write_heatmaps(maps: &Heatmaps, dir: &Path, format: ImageFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (s, stage) in maps.maps.iter().enumerate() {
        for (h, map) in stage.iter().enumerate() {
            let (height, width) = (map.shape()[0], map.shape()[1]);
            let stem = format!("stage{s}_head{h}");
            let img = dir.join(format!("{stem}.{}", format.extension()));
            let gray = to_gray(map);
            match format {
                ImageFormat::Pgm => pgm::write_p5(&img, width, height, &gray)?,
                ImageFormat::Png => image::GrayImage::from_raw(width as u32, height as u32, gray)
                    .ok_or_else(|| Error::Contract("heatmap buffer size".into()))?
                    .save(&img)
                    .map_err(|e| Error::Data(format!("{}: {e}", img.display())))?,
            }
            let csv = dir.join(format!("{stem}.csv"));
            std::fs::write(&csv, map_csv(map))?;
            written.push(img);
            written.push(csv);
        }
    }
    Ok(written)
}
