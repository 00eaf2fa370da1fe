//! The training loop and its per-epoch record.

use std::path::Path;
use std::time::{Duration, Instant};

use fat_core::metrics::{argmax_rows, MetricReport};
use fat_core::model::{checkpoint, Task};
use fat_core::nn::{cross_entropy, mse_loss};
use fat_core::{Error, Graph, Model, ModelInput, Result, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::optim::AdamW;
use crate::sampler::{balanced_batches, shuffled_batches};
use crate::synth::{generate_dataset, Dataset, SyntheticSample};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Epoch 0 is the untrained model.
    pub epoch: usize,
    /// Mean batch loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val: MetricReport,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Not part of any written file.
    pub wall_time: Duration,
}

impl RunRecord {
    pub fn best(&self) -> &MetricReport {
        &self.epochs[self.best_epoch].val
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.train_loss).collect()
    }

    /// First epoch whose mean train loss is at or below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.train_loss.is_some_and(|l| l <= threshold))
            .map(|e| e.epoch)
    }

    /// Columns `seed,config_hash,epoch,train_loss,val_<metric>...`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let names: Vec<String> = self.epochs[0].val.rows().into_iter().map(|(k, _)| format!("val_{k}")).collect();
        let mut header = vec!["seed".to_string(), "config_hash".into(), "epoch".into(), "train_loss".into()];
        header.extend(names);
        header.push("best".into());
        w.write_record(&header).map_err(crate::ablation::csv_err)?;
        for e in &self.epochs {
            let mut rec = vec![
                self.seed.to_string(),
                self.config_hash.clone(),
                e.epoch.to_string(),
                e.train_loss.map_or(String::new(), |l| l.to_string()),
            ];
            rec.extend(e.val.rows().into_iter().map(|(_, v)| v.to_string()));
            rec.push((e.epoch == self.best_epoch).to_string());
            w.write_record(&rec).map_err(crate::ablation::csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

pub struct TrainOutput {
    pub record: RunRecord,
    /// Serialized model at the best validation epoch.
    pub checkpoint: Vec<u8>,
    /// Model after the last epoch.
    pub model: Model<f64>,
}

/// Generates the configured dataset and trains on it.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let d = &cfg.data;
    let data = generate_dataset(d.samples, cfg.data_seed(), &d.spec, d.train_fraction)?;
    train_on(cfg, &data)
}

fn targets(samples: &[&SyntheticSample], task: Task) -> Result<Vec<f64>> {
    match task {
        Task::Regression => Ok(samples.iter().flat_map(|s| s.label).collect()),
        Task::Classification(_) => samples
            .iter()
            .map(|s| {
                s.class
                    .map(|c| c as f64)
                    .ok_or_else(|| Error::Data(format!("sample {} has no class", s.seed)))
            })
            .collect(),
    }
}

/// Evaluation-mode metrics of `model` over `samples`, predicted `chunk` at a time.
pub fn evaluate(model: &Model<f64>, samples: &[&SyntheticSample], chunk: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let per_frame = model.cfg.seg_per_frame;
    let mut pred = Vec::new();
    for part in samples.chunks(chunk.max(1)) {
        let inputs: Vec<ModelInput<f64>> = part.iter().map(|s| s.to_input(per_frame)).collect();
        pred.extend_from_slice(model.predict(&inputs)?.data());
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite prediction during evaluation".into()));
    }
    let truth = targets(samples, model.cfg.task)?;
    match model.cfg.task {
        Task::Regression => MetricReport::regression(&truth, &pred, 5),
        Task::Classification(k) => {
            let t: Vec<usize> = truth.iter().map(|&c| c as usize).collect();
            MetricReport::classification(&t, &argmax_rows(&pred, k), k)
        }
    }
}

/// Trains on `data.train`, evaluating on `data.val` after every epoch.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let o = &cfg.optim;
    let task = cfg.model.task;
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let train: Vec<&SyntheticSample> = data.train.iter().map(|&i| &data.samples[i]).collect();
    let val: Vec<&SyntheticSample> = data.val.iter().map(|&i| &data.samples[i]).collect();
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let per_frame = cfg.model.seg_per_frame;
    let inputs: Vec<ModelInput<f64>> = train.iter().map(|s| s.to_input(per_frame)).collect();
    let truth = targets(&train, task)?;
    let classes = data.classes(&data.train);

    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val: evaluate(&model, &val, o.batch_size)?,
    }];
    let mut best_epoch = 0;
    let mut best_ckpt = checkpoint::to_bytes(&model);
    let mut opt = AdamW::new(o.adamw(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e_6c6f_6f70);

    for epoch in 1..=o.epochs {
        let order_seed = rng.next_u64();
        let batches = match (task, o.balanced) {
            (Task::Classification(k), true) => balanced_batches(&classes, k, o.batch_size, order_seed)?,
            _ => shuffled_batches(train.len(), o.batch_size, order_seed)?,
        };
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let graph_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let batch_inputs: Vec<ModelInput<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            model.store.zero_grads();
            let (loss, grads) = {
                let mut g = Graph::with_params(&model.store).train(graph_rng);
                let pred = model.forward(&mut g, &batch_inputs)?;
                let loss = match task {
                    Task::Regression => {
                        let t: Vec<f64> = batch.iter().flat_map(|&i| truth[i * 5..i * 5 + 5].to_vec()).collect();
                        let t = g.constant(Tensor::new(vec![batch.len(), 5], t)?);
                        mse_loss(&mut g, pred, t)?
                    }
                    Task::Classification(_) => {
                        let labels: Vec<usize> = batch.iter().map(|&i| truth[i] as usize).collect();
                        cross_entropy(&mut g, pred, &labels)?
                    }
                };
                let grads = g.backward(loss)?;
                (g.value(loss).data()[0], g.param_grads(&grads))
            };
            let max_grad = grads.max_abs();
            if !loss.is_finite() || !max_grad.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training step at epoch {epoch}, batch {b}: loss {loss}, max |grad| {max_grad}"
                )));
            }
            model.store.accumulate(&grads)?;
            opt.step(&mut model.store)?;
            total += loss;
        }
        let val_report = evaluate(&model, &val, o.batch_size)?;
        if val_report.loss_like() < epochs[best_epoch].val.loss_like() {
            best_epoch = epoch;
            best_ckpt = checkpoint::to_bytes(&model);
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(total / batches.len() as f64),
            val: val_report,
        });
    }
    Ok(TrainOutput {
        record: RunRecord {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            epochs,
            best_epoch,
            wall_time: start.elapsed(),
        },
        checkpoint: best_ckpt,
        model,
    })
}

/// Writes `config.txt`, `record.csv` and `checkpoint.bin` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &TrainOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    std::fs::write(dir.join("record.csv"), out.record.to_csv()?)?;
    std::fs::write(dir.join("checkpoint.bin"), &out.checkpoint)?;
    Ok(())
}
