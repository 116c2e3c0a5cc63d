//! Run configuration and the minibatch training loop.
//!
//! Determinism contract: a `(seed, config, dataset bytes)` triple fully
//! determines every weight draw, batch order, epoch log line, and checkpoint
//! byte. All stochastic stages run on substreams derived from the seed, so
//! they are independent of each other and of evaluation order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::loss::{baseline_loss, pmn_loss, LossBreakdown, LossWeights};
use crate::metrics;
use crate::model::{AeMlpModel, Metric, Model, PmnModel};
use crate::nn::Adam;
use crate::rng::Rng;
use crate::signal::{AugmentConfig, Dataset};

const STREAM_INIT: u64 = 0x696e6974; // "init"
const STREAM_SHUFFLE: u64 = 0x73687566; // "shuf"

/// Which classifier sits on the shared autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Pmn,
    AeMlpBaseline,
}

/// Everything a run needs; the stock values are the reference training
/// recipe (50 epochs, batch 128, Adam at 1e-3 with 0.99 decay per epoch,
/// loss weights 1/0.25/0.25/0.01).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub loss_weights: LossWeights,
    /// Prototype count; `None` means one per class.
    pub prototype_count: Option<usize>,
    pub metric: Metric,
    pub variant: Variant,
    pub classes: usize,
    pub samples_per_class: usize,
    pub split_ratio: f64,
    pub augment: AugmentConfig,
    /// Optional dataset directory (expects `train.pmds`/`test.pmds`);
    /// `None` generates the synthetic task on the fly.
    pub dataset: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.001,
            lr_decay: 0.99,
            loss_weights: LossWeights::default(),
            prototype_count: None,
            metric: Metric::SqL2,
            variant: Variant::Pmn,
            classes: 4,
            samples_per_class: 200,
            split_ratio: 0.7,
            augment: AugmentConfig::default(),
            dataset: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PmnError::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(PmnError::Config("need at least two classes".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(PmnError::Config(format!(
                "split ratio {} outside (0, 1)",
                self.split_ratio
            )));
        }
        if self.learning_rate <= 0.0 || self.lr_decay <= 0.0 {
            return Err(PmnError::Config(
                "learning rate and decay must be positive".into(),
            ));
        }
        self.loss_weights.validate()?;
        if let Some(m) = self.prototype_count {
            if m < self.classes {
                return Err(PmnError::Config(format!(
                    "prototype count {m} below class count {}",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Deterministic model construction for this configuration. Training and
    /// checkpoint loading share this path so weight shapes always line up.
    pub fn build_model(&self) -> Result<Model> {
        self.validate()?;
        let mut rng = Rng::new(self.seed).derive(STREAM_INIT);
        Ok(match self.variant {
            Variant::Pmn => Model::Pmn(PmnModel::new(
                self.classes,
                self.prototype_count,
                self.metric,
                &mut rng,
            )?),
            Variant::AeMlpBaseline => Model::AeMlp(AeMlpModel::new(self.classes, &mut rng)),
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cla: f64,
    pub recon: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub r_rps: f64,
}

pub const LOG_HEADER: &str = "epoch,cla,recon,r1,r2,r3,total,train_acc,test_acc,r_rps";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.cla,
            self.recon,
            self.r1,
            self.r2,
            self.r3,
            self.total,
            self.train_acc,
            self.test_acc,
            self.r_rps
        )
    }
}

/// A finished training run.
pub struct TrainOutcome {
    /// Model after the last epoch.
    pub final_model: Model,
    /// Snapshot with the best test accuracy (ties keep the earlier epoch).
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub log: Vec<EpochLog>,
}

/// Train a model per the configuration.
///
/// When `out_dir` is given, writes `train_log.csv` incrementally and saves
/// `best.pmn` / `final.pmn` checkpoints there. On a non-finite loss the run
/// aborts with an error; checkpoints saved so far stay on disk.
pub fn train(
    config: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(PmnError::Usage("empty train or test set".into()));
    }
    if train_set.class_count() > config.classes || test_set.class_count() > config.classes {
        return Err(PmnError::Data(format!(
            "dataset has labels beyond the configured {} classes",
            config.classes
        )));
    }

    let mut model = config.build_model()?;
    let mut adam = Adam::new(config.learning_rate, config.lr_decay);
    let root_rng = Rng::new(config.seed);

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| PmnError::io(dir.display().to_string(), e))?;
            let path = dir.join("train_log.csv");
            let file =
                File::create(&path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{LOG_HEADER}")
                .map_err(|e| PmnError::io(path.display().to_string(), e))?;
            Some((w, path))
        }
        None => None,
    };

    let test_labels = test_set.labels();
    let test_x = test_set.full_tensor();
    let train_labels_all = train_set.labels();

    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut best_test_acc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        root_rng
            .derive(STREAM_SHUFFLE)
            .derive(epoch as u64)
            .shuffle(&mut order);

        let mut epoch_terms = [0.0f64; 6]; // cla, recon, r1, r2, r3, total
        let mut train_hits = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = train_set.batch_tensor(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels_all[i]).collect();

            model.zero_grads();
            let outcome = match &mut model {
                Model::Pmn(m) => pmn_loss(m, &x, &labels, &config.loss_weights, true)?,
                Model::AeMlp(m) => baseline_loss(m, &x, &labels, &config.loss_weights, true)?,
            };
            let b = outcome.breakdown;
            if !b.total.is_finite() {
                return Err(PmnError::Numerical(format!(
                    "non-finite loss at epoch {epoch}; last saved checkpoints retained"
                )));
            }
            let weight = batch.len() as f64;
            for (slot, term) in epoch_terms
                .iter_mut()
                .zip([b.cla, b.recon, b.r1, b.r2, b.r3, b.total])
            {
                *slot += weight * term;
            }
            train_hits += outcome
                .predictions
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();

            adam.begin_step();
            let mut slot = 0;
            let mut update_err = None;
            model.visit_params(&mut |param| {
                if update_err.is_none() {
                    if let Err(e) =
                        adam.update(slot, &param.name, param.value, param.grad, epoch)
                    {
                        update_err = Some(e);
                    }
                }
                slot += 1;
            });
            if let Some(e) = update_err {
                return Err(e);
            }
        }

        let n_train = train_set.len() as f64;
        let breakdown = LossBreakdown {
            cla: epoch_terms[0] / n_train,
            recon: epoch_terms[1] / n_train,
            r1: epoch_terms[2] / n_train,
            r2: epoch_terms[3] / n_train,
            r3: epoch_terms[4] / n_train,
            total: epoch_terms[5] / n_train,
        };

        // Frozen-model test pass; features are reused for the ratio metric.
        let test_features = model.encode_batch(&test_x)?;
        let probs = model.probs_from_latents(&test_features)?;
        let k = model.class_count();
        let predictions: Vec<usize> = (0..test_set.len())
            .map(|i| {
                let row = &probs.data()[i * k..(i + 1) * k];
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        let test_acc = metrics::accuracy(&predictions, &test_labels)?;
        let r_rps = metrics::r_rps(&test_features, &test_labels)?;

        let entry = EpochLog {
            epoch,
            cla: breakdown.cla,
            recon: breakdown.recon,
            r1: breakdown.r1,
            r2: breakdown.r2,
            r3: breakdown.r3,
            total: breakdown.total,
            train_acc: train_hits as f64 / n_train,
            test_acc,
            r_rps,
        };
        if let Some((w, path)) = log_file.as_mut() {
            writeln!(w, "{}", entry.csv_line())
                .and_then(|_| w.flush())
                .map_err(|e| PmnError::io(path.display().to_string(), e))?;
        }
        log.push(entry);

        if test_acc > best_test_acc {
            best_test_acc = test_acc;
            best_epoch = epoch;
            best_model = model.clone();
            if let Some(dir) = out_dir {
                crate::checkpoint::save(&dir.join("best.pmn"), &best_model, config, epoch)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        crate::checkpoint::save(
            &dir.join("final.pmn"),
            &model,
            config,
            config.epochs.saturating_sub(1),
        )?;
    }

    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        best_test_acc,
        log,
    })
}

/// Build (or load) the datasets a config describes.
pub fn load_or_generate_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        Some(dir) => {
            let dir = Path::new(dir);
            let train = crate::signal::read_pmds(&dir.join("train.pmds"))?;
            let test = crate::signal::read_pmds(&dir.join("test.pmds"))?;
            Ok((train, test))
        }
        None => {
            let specs = crate::signal::default_fault_specs();
            if specs.len() != config.classes {
                return Err(PmnError::Config(format!(
                    "the synthetic task defines {} classes, config asks for {}",
                    specs.len(),
                    config.classes
                )));
            }
            crate::signal::build_dataset(
                &specs,
                config.samples_per_class,
                config.split_ratio,
                &config.augment,
                &Rng::new(config.seed),
            )
        }
    }
}
