//! Experiment files: model, data, optimizer and ablation settings in one
//! sectioned `key = value` document.

use std::path::{Path, PathBuf};

use fat_core::kv::{self, KvDoc, KvWriter};
use fat_core::model::ModelConfig;
use fat_core::{Error, Result};
use sha2::{Digest, Sha256};

use crate::ablation::AblationRow;
use crate::optim::AdamWConfig;
use crate::synth::GenerationSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub spec: GenerationSpec,
    pub samples: usize,
    pub train_fraction: f64,
    /// Dataset seed; the run seed when unset, so ablation rows share data.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSettings {
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Class-balanced batches; only meaningful for classification.
    pub balanced: bool,
}

impl OptimSettings {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr_backbone: self.lr_backbone,
            lr_transformer: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::new(self.lr)
        }
    }
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_backbone: 3e-5,
            weight_decay: 0.02,
            epochs: 10,
            batch_size: 8,
            balanced: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSettings {
    pub rows: Vec<AblationRow>,
    /// Seeds `seed, seed + 1, ..` are run for every row.
    pub seeds: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            rows: AblationRow::ALL.to_vec(),
            seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub data: DataSettings,
    pub optim: OptimSettings,
    pub ablation: AblationSettings,
}

impl ExperimentConfig {
    /// Defaults around a model preset.
    pub fn for_model(model: ModelConfig) -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataSettings {
                spec: GenerationSpec::for_model(&model),
                samples: 320,
                train_fraction: 0.8,
                seed: None,
            },
            model,
            optim: OptimSettings::default(),
            ablation: AblationSettings::default(),
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.spec.validate()?;
        let m = &self.model;
        let s = &self.data.spec;
        if [s.channels, s.frames, s.height, s.width] != m.input {
            return Err(Error::Config(format!(
                "data extents {:?} do not match model input {:?}",
                [s.channels, s.frames, s.height, s.width],
                m.input
            )));
        }
        if s.task != m.task {
            return Err(Error::Config(format!("data task {} but model task {}", s.task, m.task)));
        }
        let sides_ok = (m.audio.is_none() || s.audio == m.audio)
            && (m.transcript.is_none() || s.transcript == m.transcript)
            && (!m.fullframe || s.fullframe)
            && (!m.interlocutor || s.interlocutor)
            && (m.metadata_width == 0 || s.metadata_width == m.metadata_width);
        if !sides_ok {
            return Err(Error::Config("data does not provide every side input the model uses".into()));
        }
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        if !(o.lr >= 0.0 && o.lr_backbone >= 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if self.data.samples < 2 {
            return Err(Error::Config("data.samples must be at least 2".into()));
        }
        if self.ablation.seeds == 0 {
            return Err(Error::Config("ablation.seeds must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text; every value is written, so it parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.section("experiment")
            .kv("seed", self.seed)
            .kv("out", self.out.display());
        let mut text = w.finish();
        text.push('\n');
        text.push_str(&self.model.to_text());
        let mut w = KvWriter::new();
        self.data.spec.write(&mut w);
        w.kv("samples", self.data.samples)
            .kv("train_fraction", self.data.train_fraction);
        if let Some(s) = self.data.seed {
            w.kv("seed", s);
        }
        let o = &self.optim;
        w.section("optim")
            .kv("lr", o.lr)
            .kv("lr_backbone", o.lr_backbone)
            .kv("weight_decay", o.weight_decay)
            .kv("epochs", o.epochs)
            .kv("batch_size", o.batch_size)
            .kv("balanced", o.balanced);
        w.section("ablation")
            .kv("rows", kv::join(&self.ablation.rows))
            .kv("seeds", self.ablation.seeds);
        text.push('\n');
        text.push_str(&w.finish());
        text
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let model = ModelConfig::from_doc(&doc)?;
        let base = Self::for_model(model.clone());
        let e = "experiment";
        let d = "data";
        let o = "optim";
        let spec = GenerationSpec::read(&doc, &base.data.spec)?;
        let lr: f64 = doc.get_or(o, "lr", base.optim.lr)?;
        let cfg = Self {
            seed: doc.get_or(e, "seed", base.seed)?,
            out: doc.get(e, "out").map_or(base.out.clone(), PathBuf::from),
            model,
            data: DataSettings {
                spec,
                samples: doc.get_or(d, "samples", base.data.samples)?,
                train_fraction: doc.get_or(d, "train_fraction", base.data.train_fraction)?,
                seed: doc.get(d, "seed").map(|_| doc.require(d, "seed")).transpose()?,
            },
            optim: OptimSettings {
                lr,
                lr_backbone: doc.get_or(o, "lr_backbone", lr / 10.0)?,
                weight_decay: doc.get_or(o, "weight_decay", base.optim.weight_decay)?,
                epochs: doc.get_or(o, "epochs", base.optim.epochs)?,
                batch_size: doc.get_or(o, "batch_size", base.optim.batch_size)?,
                balanced: doc.get_or(o, "balanced", base.optim.balanced)?,
            },
            ablation: AblationSettings {
                rows: match doc.get("ablation", "rows") {
                    Some(v) => AblationRow::parse_list(v)?,
                    None => base.ablation.rows.clone(),
                },
                seeds: doc.get_or("ablation", "seeds", base.ablation.seeds)?,
            },
        };
        doc.reject_unused()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::for_model(ModelConfig::compact());
        cfg.seed = 7;
        cfg.data.seed = Some(11);
        cfg.optim.lr = 1e-3;
        cfg.ablation.rows = vec![AblationRow::Full, AblationRow::WoAudio];
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn backbone_rate_defaults_to_a_tenth() {
        let cfg = ExperimentConfig::from_text("[model]\npreset = tiny\n[optim]\nlr = 0.002\n").unwrap();
        assert!((cfg.optim.lr_backbone - 2e-4).abs() < 1e-18);
        assert_eq!(cfg.optim.weight_decay, 0.02);
        assert_eq!(cfg.optim.epochs, 10);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = ExperimentConfig::from_text("[optim]\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("learning_rate")));
    }
}
