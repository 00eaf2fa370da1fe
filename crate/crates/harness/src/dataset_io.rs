//! Directory layout for synthetic datasets.
//!
//! ```text
//! <dir>/spec.txt              generation spec plus seed and split
//! <dir>/manifest.csv          one row per sample: seed, split, class, labels, blob
//! <dir>/<index>/face.bin      raw tensors (also fullframe.bin, interlocutor.bin)
//! <dir>/<index>/seg.pgm       per-frame maps stacked vertically
//! <dir>/<index>/audio.csv     one row per token (also transcript.csv)
//! <dir>/<index>/metadata.csv  one row
//! ```
//!
//! Floats are written in shortest round-trip form, so a reload is bit-exact.

use std::path::Path;

use fat_core::kv::{KvDoc, KvWriter};
use fat_core::model::ModelConfig;
use fat_core::patching::SegMap;
use fat_core::{pgm, Error, Result, Tensor};

use crate::ablation::csv_err;
use crate::synth::{BlobParams, Dataset, GenerationSpec, SyntheticSample};

const TENSOR_MAGIC: &[u8; 8] = b"FATTNSR1";

/// `magic, u32 rank, u64 dims, f64 values`, little endian.
pub fn tensor_to_bytes(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * (t.rank() + t.numel()));
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |m: &str| Error::Data(format!("tensor file: {m}"));
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("missing magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated shape"))?;
        shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let body = &bytes[pos..];
    if body.len() != 8 * n {
        return Err(bad(&format!("{} payload bytes for shape {shape:?}", body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

fn rows_to_csv(t: &Tensor<f64>) -> Result<String> {
    let width = *t.shape().last().unwrap_or(&1);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in t.data().chunks(width.max(1)) {
        w.write_record(row.iter().map(f64::to_string)).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn rows_from_csv(text: &str, vector: bool) -> Result<Tensor<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(
            rec.iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("bad number `{v}`"))))
                .collect::<Result<_>>()?,
        );
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Data("ragged token CSV".into()));
    }
    let shape = if vector { vec![width] } else { vec![rows.len(), width] };
    Tensor::new(shape, rows.concat())
}

fn seg_to_pgm(seg: &SegMap) -> Result<Vec<u8>> {
    let d = seg.frames().unwrap_or(1);
    let px: Vec<u8> = seg.mask().iter().map(|&b| if b { 255 } else { 0 }).collect();
    pgm::encode_p5(seg.width(), d * seg.height(), &px)
}

fn seg_from_pgm(bytes: &[u8], frames: usize) -> Result<SegMap> {
    let stacked = SegMap::from_pgm_bytes(bytes)?;
    if stacked.height() % frames != 0 {
        return Err(Error::Data(format!("seg map height {} is not {frames} frames", stacked.height())));
    }
    SegMap::per_frame(frames, stacked.height() / frames, stacked.width(), stacked.mask().to_vec())
}

const MANIFEST_HEADER: [&str; 15] = [
    "index", "seed", "split", "class", "label0", "label1", "label2", "label3", "label4", "vx", "vy", "intensity",
    "radius", "flicker", "start",
];

/// Writes `data` under `dir`, creating it.
pub fn export_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = KvWriter::new();
    data.spec.write(&mut w);
    w.section("dataset")
        .kv("seed", data.seed)
        .kv("samples", data.samples.len());
    std::fs::write(dir.join("spec.txt"), w.finish())?;
    let mut m = csv::Writer::from_writer(Vec::new());
    m.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (i, s) in data.samples.iter().enumerate() {
        let split = if data.train.binary_search(&i).is_ok() { "train" } else { "val" };
        let b = &s.blob;
        let mut rec = vec![i.to_string(), s.seed.to_string(), split.into(), s.class.map_or(String::new(), |c| c.to_string())];
        rec.extend(s.label.iter().map(f64::to_string));
        rec.extend([b.velocity.0, b.velocity.1, b.intensity, b.radius, b.flicker].map(|v| v.to_string()));
        rec.push(format!("{};{}", b.start.0, b.start.1));
        m.write_record(&rec).map_err(csv_err)?;

        let sd = dir.join(format!("{i:05}"));
        std::fs::create_dir_all(&sd)?;
        std::fs::write(sd.join("face.bin"), tensor_to_bytes(&s.face))?;
        if let Some(t) = &s.fullframe {
            std::fs::write(sd.join("fullframe.bin"), tensor_to_bytes(t))?;
        }
        if let Some(t) = &s.interlocutor {
            std::fs::write(sd.join("interlocutor.bin"), tensor_to_bytes(t))?;
        }
        std::fs::write(sd.join("seg.pgm"), seg_to_pgm(&s.seg)?)?;
        for (name, t) in [("audio", &s.audio), ("transcript", &s.transcript), ("metadata", &s.metadata)] {
            if let Some(t) = t {
                std::fs::write(sd.join(format!("{name}.csv")), rows_to_csv(t)?)?;
            }
        }
    }
    let bytes = m.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(dir.join("manifest.csv"), bytes)?;
    Ok(())
}

fn optional(path: &Path) -> Result<Option<Vec<u8>>> {
    match std::fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Reads a dataset written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("spec.txt"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("spec.txt").display())))?;
    let doc = KvDoc::parse(&text)?;
    let spec = GenerationSpec::read(&doc, &GenerationSpec::for_model(&ModelConfig::desk()))?;
    let seed: u64 = doc.require("dataset", "seed")?;
    let n: usize = doc.require("dataset", "samples")?;
    doc.reject_unused()?;

    let mut r = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    let (mut samples, mut train, mut val) = (Vec::with_capacity(n), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(Error::Data(format!("manifest row {i} has {} fields", rec.len())));
        }
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| Error::Data(format!("manifest row {i}: bad `{}`", &rec[j])))
        };
        let (sx, sy) = rec[14]
            .split_once(';')
            .ok_or_else(|| Error::Data(format!("manifest row {i}: bad start")))?;
        let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::Data(format!("manifest row {i}: bad `{v}`")));
        let blob = BlobParams {
            velocity: (num(9)?, num(10)?),
            intensity: num(11)?,
            radius: num(12)?,
            flicker: num(13)?,
            start: (parse(sx)?, parse(sy)?),
        };
        match &rec[2] {
            "train" => train.push(i),
            "val" => val.push(i),
            other => return Err(Error::Data(format!("manifest row {i}: unknown split `{other}`"))),
        }
        let sd = dir.join(format!("{i:05}"));
        let tensor = |name: &str| -> Result<Option<Tensor<f64>>> {
            optional(&sd.join(name))?.map(|b| tensor_from_bytes(&b)).transpose()
        };
        let tokens = |name: &str, vector: bool| -> Result<Option<Tensor<f64>>> {
            optional(&sd.join(name))?
                .map(|b| rows_from_csv(&String::from_utf8_lossy(&b), vector))
                .transpose()
        };
        let face = tensor("face.bin")?.ok_or_else(|| Error::Data(format!("sample {i}: missing face.bin")))?;
        samples.push(SyntheticSample {
            seed: rec[1].parse().map_err(|_| Error::Data(format!("manifest row {i}: bad seed")))?,
            seg: seg_from_pgm(&std::fs::read(sd.join("seg.pgm"))?, spec.frames)?,
            face,
            fullframe: tensor("fullframe.bin")?,
            interlocutor: tensor("interlocutor.bin")?,
            audio: tokens("audio.csv", false)?,
            transcript: tokens("transcript.csv", false)?,
            metadata: tokens("metadata.csv", true)?,
            label: [num(4)?, num(5)?, num(6)?, num(7)?, num(8)?],
            class: if rec[3].is_empty() {
                None
            } else {
                Some(rec[3].parse().map_err(|_| Error::Data(format!("manifest row {i}: bad class")))?)
            },
            blob,
        });
    }
    if samples.len() != n {
        return Err(Error::Data(format!("manifest lists {} samples, spec says {n}", samples.len())));
    }
    Ok(Dataset {
        spec,
        seed,
        samples,
        train,
        val,
    })
}
