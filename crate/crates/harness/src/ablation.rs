//! The ablation matrix: the full model and six single-change variants, each
//! trained on the same data for every seed.

use std::fmt;
use std::str::FromStr;

use fat_core::forced::ForcedVariant;
use fat_core::fusion::SideKind;
use fat_core::metrics::TRAIT_NAMES;
use fat_core::model::{FusionMode, LateFusion, ModelConfig};
use fat_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::train::{train, TrainOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationRow {
    Full,
    WoForced,
    WoBackbone,
    WoCross,
    WoLateFusion,
    WoAudio,
    WoTranscript,
}

impl AblationRow {
    pub const ALL: [AblationRow; 7] = [
        AblationRow::Full,
        AblationRow::WoForced,
        AblationRow::WoBackbone,
        AblationRow::WoCross,
        AblationRow::WoLateFusion,
        AblationRow::WoAudio,
        AblationRow::WoTranscript,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::WoForced => "wo_forced",
            AblationRow::WoBackbone => "wo_backbone",
            AblationRow::WoCross => "wo_cross",
            AblationRow::WoLateFusion => "wo_late_fusion",
            AblationRow::WoAudio => "wo_audio",
            AblationRow::WoTranscript => "wo_transcript",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Full => "Full model",
            AblationRow::WoForced => "w/o Forced Attention",
            AblationRow::WoBackbone => "w/o CNN backbone",
            AblationRow::WoCross => "w/o Cross Attention",
            AblationRow::WoLateFusion => "w/o Late Fusion",
            AblationRow::WoAudio => "w/o Audio",
            AblationRow::WoTranscript => "w/o Transcript",
        }
    }

    /// The row's model: `base` with exactly one setting changed.
    ///
    /// "w/o Cross Attention" keeps one side per block, cycling through the
    /// sides in successive blocks, instead of the sequential fusion module.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let drop_side = |cfg: &mut ModelConfig, side: SideKind| cfg.fusion.order.retain(|&s| s != side);
        match self {
            AblationRow::Full => {}
            AblationRow::WoForced => cfg.forced_variant = ForcedVariant::Off,
            AblationRow::WoBackbone => cfg.use_backbone = false,
            AblationRow::WoCross => cfg.fusion_mode = FusionMode::Alternating,
            AblationRow::WoLateFusion => cfg.late_fusion = LateFusion::FaceOnly,
            AblationRow::WoAudio => {
                cfg.audio = None;
                drop_side(&mut cfg, SideKind::Audio);
            }
            AblationRow::WoTranscript => {
                cfg.transcript = None;
                drop_side(&mut cfg, SideKind::Transcript);
            }
        }
        cfg
    }

    /// Comma-separated row ids; `all` selects every row.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        if text.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut rows = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let row: Self = part.parse()?;
            if !rows.contains(&row) {
                rows.push(row);
            }
        }
        if rows.is_empty() {
            return Err(Error::Config("no ablation rows selected".into()));
        }
        Ok(rows)
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AblationRow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.id() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|r| r.id()).collect();
            Error::Config(format!("unknown ablation row `{s}`; valid rows: {}", valid.join(", ")))
        })
    }
}

/// One trained (row, seed) cell.
pub struct AblationRun {
    pub row: AblationRow,
    pub seed: u64,
    pub output: TrainOutput,
}

pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Best-epoch validation MSE per target for `row`, averaged over seeds.
    pub fn row_means(&self, row: AblationRow) -> Option<Vec<f64>> {
        let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.row == row).collect();
        let first = runs.first()?.output.record.best().per_trait_mse.len();
        let mut acc = vec![0.0; first + 1];
        for r in &runs {
            let best = r.output.record.best();
            for (a, v) in acc.iter_mut().zip(best.per_trait_mse.iter().chain([&best.loss_like()])) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= runs.len() as f64);
        Some(acc)
    }

    /// Best-epoch validation score of `row` at `seed`.
    pub fn score(&self, row: AblationRow, seed: u64) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.row == row && r.seed == seed)
            .map(|r| r.output.record.best().loss_like())
    }

    /// One line per run plus one seed-averaged line per row.
    ///
    /// Columns: `row,label,seed,best_epoch,<targets...>,mean`; averaged lines
    /// carry `mean` in the seed column.
    pub fn to_csv(&self) -> Result<String> {
        let k = self
            .runs
            .first()
            .map_or(TRAIT_NAMES.len(), |r| r.output.record.best().per_trait_mse.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string(), "label".into(), "seed".into(), "best_epoch".into()];
        header.extend((0..k).map(|i| if k == TRAIT_NAMES.len() { TRAIT_NAMES[i].to_string() } else { format!("t{i}") }));
        header.push("mean".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.runs {
            let best = r.output.record.best();
            let mut rec = vec![
                r.row.id().to_string(),
                r.row.label().to_string(),
                r.seed.to_string(),
                r.output.record.best_epoch.to_string(),
            ];
            rec.extend(best.per_trait_mse.iter().map(|v| v.to_string()));
            rec.push(best.loss_like().to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut rows: Vec<AblationRow> = self.runs.iter().map(|r| r.row).collect();
        rows.dedup();
        for row in rows {
            if let Some(means) = self.row_means(row) {
                let mut rec = vec![row.id().to_string(), row.label().to_string(), "mean".into(), String::new()];
                rec.extend(means.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Trains every selected row for seeds `base.seed ..` `base.seed + seeds`.
///
/// `progress` is called after each run.
pub fn run_ablation(
    base: &ExperimentConfig,
    rows: &[AblationRow],
    seeds: usize,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationTable> {
    if rows.is_empty() || seeds == 0 {
        return Err(Error::Config("an ablation needs at least one row and one seed".into()));
    }
    let mut runs = Vec::with_capacity(rows.len() * seeds);
    for &row in rows {
        for s in 0..seeds as u64 {
            let mut cfg = base.clone();
            cfg.seed = base.seed + s;
            cfg.data.seed = Some(base.data_seed() + s);
            cfg.model = row.apply(&base.model);
            cfg.ablation.rows = vec![row];
            cfg.ablation.seeds = 1;
            let output = train(&cfg)?;
            let run = AblationRun {
                row,
                seed: cfg.seed,
                output,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(AblationTable { runs })
}
