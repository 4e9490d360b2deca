//! End-to-end runs: load or generate data, split, standardize, train,
//! evaluate on the held-out split, and sweep the gate insertion point.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Preprocessing};
use crate::data::{
    encode, stratified_split, Dataset, Encoded, SplitConfig, StandardizerStats, SyntheticTask,
    Vocabulary,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::isfl::FusionConfig;
use crate::metrics::{self, EceConfig, MetricsReport};
use crate::models::{FusionMode, Model, ModelConfig};
use crate::training::{self, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    File { path: PathBuf },
    Synthetic(SyntheticTask),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path } => Dataset::load(path),
            DataSource::Synthetic(task) => task.generate(),
        }
    }
}

/// A complete, self-contained experiment description.
///
/// `model.encoder.vocab_size` and `model.d_struct` are derived from the data
/// when training starts; the values in the file are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub ece: EceConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let mut model = ModelConfig::new(encoder, 4, FusionMode::Isfl);
        model.fusion = Some(FusionConfig::midpoint(model.encoder.n_layers));
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticTask::default()),
            model,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            split: SplitConfig::default(),
            ece: EceConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Uses one seed for data generation, splitting, initialization and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.train.seed = seed;
        if let DataSource::Synthetic(task) = &mut self.data {
            task.seed = seed;
        }
    }

    /// Switches fusion mode, adding or dropping the fusion section as needed.
    pub fn set_fusion_mode(&mut self, mode: FusionMode) {
        self.model.fusion_mode = mode;
        match mode {
            FusionMode::Isfl => {
                if self.model.fusion.is_none() {
                    self.model.fusion = Some(FusionConfig::midpoint(self.model.encoder.n_layers));
                }
            }
            _ => self.model.fusion = None,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        // Derived fields get placeholder values so the rest can be checked.
        model.encoder.vocab_size = model.encoder.vocab_size.max(1);
        if model.fusion_mode != FusionMode::None {
            model.d_struct = model.d_struct.max(1);
        }
        model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.ece.validate()?;
        if let DataSource::Synthetic(task) = &self.data {
            task.validate().map_err(|e| match e {
                Error::Invalid { field, reason } => Error::Invalid {
                    field: format!("data.synthetic.{field}"),
                    reason,
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Train/test encodings plus the preprocessing state fitted on the training split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocabulary: Vocabulary,
    pub standardizer: StandardizerStats,
    pub train: Vec<Encoded>,
    pub test: Vec<Encoded>,
}

/// Splits, fits the vocabulary and standardizer on the training side only, and encodes both sides.
pub fn prepare(dataset: &Dataset, split: &SplitConfig, max_len: usize) -> Result<Prepared> {
    let (train_idx, test_idx) = stratified_split(&dataset.labels(), split)?;
    let train = dataset.subset(&train_idx);
    let test = dataset.subset(&test_idx);
    let vocabulary = Vocabulary::fit(train.examples.iter().map(|e| e.text.as_str()));
    let rows: Vec<Vec<f64>> = train.examples.iter().map(|e| e.aux.clone()).collect();
    let standardizer = StandardizerStats::fit(&rows)?;
    Ok(Prepared {
        train: encode(&train, &vocabulary, &standardizer, max_len)?,
        test: encode(&test, &vocabulary, &standardizer, max_len)?,
        vocabulary,
        standardizer,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub preprocessing: Preprocessing,
    /// Held-out encodings, ready for [`training::evaluate`].
    pub test: Vec<Encoded>,
}

impl TrainOutcome {
    pub fn test_report(&self, ece: &EceConfig) -> Result<MetricsReport> {
        let records = training::evaluate(&self.model, &self.test, 256)?;
        metrics::report(&records, ece)
    }
}

/// Runs split → standardize → train on an already loaded dataset.
pub fn train_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = prepare(dataset, &config.split, config.model.encoder.max_len)?;
    let mut model_config = config.model.clone();
    model_config.encoder.vocab_size = prepared.vocabulary.len();
    model_config.d_struct = dataset.d_struct;
    let mut model = Model::new(model_config, config.train.seed)?;
    let log = training::train(
        &mut model,
        &prepared.train,
        Some(&prepared.test),
        &config.train,
        &config.ece,
    )?;
    Ok(TrainOutcome {
        model,
        log,
        preprocessing: Preprocessing {
            vocabulary: prepared.vocabulary,
            standardizer: prepared.standardizer,
            split: config.split,
            data: config.data.clone(),
        },
        test: prepared.test,
    })
}

pub fn train_experiment(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = config.data.load()?;
    train_on(config, &dataset)
}

/// Re-creates the held-out split recorded in the checkpoint and evaluates on it.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    ece: &EceConfig,
) -> Result<MetricsReport> {
    let pre = &ckpt.preprocessing;
    if dataset.d_struct != pre.standardizer.width() {
        return Err(Error::invalid(
            "d_struct",
            format!(
                "checkpoint was trained with {} aux features but the dataset has {}",
                pre.standardizer.width(),
                dataset.d_struct
            ),
        ));
    }
    let (_, test_idx) = stratified_split(&dataset.labels(), &pre.split)?;
    let test = dataset.subset(&test_idx);
    let encoded = encode(
        &test,
        &pre.vocabulary,
        &pre.standardizer,
        ckpt.model.config.encoder.max_len,
    )?;
    let records = training::evaluate(&ckpt.model, &encoded, 256)?;
    metrics::report(&records, ece)
}

/// Writes checkpoint, standardizer, log and held-out report files for one run into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save(
        &dir.join("model.ckpt"),
        &outcome.model,
        &outcome.preprocessing,
    )?;
    let stats = serde_json::to_string_pretty(&outcome.preprocessing.standardizer)?;
    std::fs::write(dir.join("standardizer.json"), stats + "\n")?;
    let mut log = Vec::new();
    training::write_log(&outcome.log, &mut log)?;
    std::fs::write(dir.join("train_log.jsonl"), log)?;
    report.export(dir)
}

/// One row of a sweep comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub fusion_mode: FusionMode,
    pub insert_layer: Option<usize>,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// The run labels of a sweep: `isfl@{i}` for each layer, then `none` and `concat`.
pub fn sweep_plan(
    config: &ExperimentConfig,
    layers: &[usize],
) -> Result<Vec<(String, ExperimentConfig)>> {
    config.validate()?;
    let n_layers = config.model.encoder.n_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l > n_layers) {
        return Err(Error::invalid(
            "sweep.layers",
            format!("insert layer {bad} is outside [0, {n_layers}]"),
        ));
    }
    let mut plan = Vec::with_capacity(layers.len() + 2);
    for &layer in layers {
        let mut c = config.clone();
        c.set_fusion_mode(FusionMode::Isfl);
        if let Some(f) = c.model.fusion.as_mut() {
            f.insert_layer_index = layer;
        }
        plan.push((format!("isfl@{layer}"), c));
    }
    for mode in [FusionMode::None, FusionMode::ConcatHead] {
        let mut c = config.clone();
        c.set_fusion_mode(mode);
        plan.push((mode.name().to_string(), c));
    }
    Ok(plan)
}

/// Trains and evaluates one ISFL model per insertion layer plus the `none`
/// and `concat` baselines. Runs execute in parallel; a failed run is
/// recorded in its row and does not stop the others. When `out_dir` is
/// given, each run writes its files into `out_dir/<label>/`.
pub fn sweep(
    config: &ExperimentConfig,
    layers: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let plan = sweep_plan(config, layers)?;
    let dataset = config.data.load()?;
    let rows = plan
        .into_par_iter()
        .map(|(label, c)| {
            let outcome = train_on(&c, &dataset).and_then(|outcome| {
                let report = outcome.test_report(&c.ece)?;
                if let Some(dir) = out_dir {
                    write_run(&dir.join(label.replace('@', "_")), &outcome, &report)?;
                }
                Ok(report)
            });
            SweepRow {
                insert_layer: c.model.fusion.as_ref().map(|f| f.insert_layer_index),
                fusion_mode: c.model.fusion_mode,
                label,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    Ok(rows)
}

/// Comma-delimited comparison table, one row per configuration.
pub fn write_sweep_table<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "config,fusion_mode,insert_layer,accuracy,macro_f1,mcc,brier,log_loss,ece,roc_auc,average_precision,status"
    )?;
    for row in rows {
        let layer = row.insert_layer.map(|l| l.to_string()).unwrap_or_default();
        match &row.outcome {
            Ok(r) => writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},ok",
                row.label,
                row.fusion_mode,
                layer,
                r.accuracy,
                r.macro_f1,
                r.mcc,
                r.brier,
                r.log_loss,
                r.ece,
                r.roc_auc,
                r.average_precision
            )?,
            Err(e) => writeln!(
                w,
                "{},{},{},,,,,,,,,\"failed: {}\"",
                row.label,
                row.fusion_mode,
                layer,
                e.replace('"', "\"\"")
            )?,
        }
    }
    Ok(())
}
