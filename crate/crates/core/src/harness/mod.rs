//! Experiment orchestration: evaluation, metrics records, experiment configs,
//! CSV/JSON emission, presets, and paired benign/attacked comparisons.

pub mod config;
pub mod run;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{forward, ModelArch, ParameterVector};

pub use config::{load_dataset, preset, DatasetConfig, ExperimentConfig, PRESET_NAMES};
pub use run::{
    dump_representations, run_experiment, run_paired, AbortInfo, PairedSummary, RunOutcome,
    RunSummary, METRICS_CSV_HEADER,
};

/// Per-round metrics. `wall_time_ms` is measured in memory but persisted as 0
/// in CSV so reruns of the same config are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub mean_train_loss: f64,
    pub mean_ce_term: f64,
    pub mean_kd_final_term: f64,
    pub mean_kd_aux_term: f64,
    pub attacked: bool,
    pub wall_time_ms: u64,
}

const EVAL_CHUNK: usize = 256;

/// Fraction of `dataset` classified correctly (row-wise argmax, ties to the
/// lowest class index).
pub fn evaluate(arch: &ModelArch, params: &ParameterVector, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.num_examples() == 0 {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    if dataset.input_dim() != arch.input_dim {
        return Err(Error::Input(format!(
            "dataset has {} features, architecture expects {}",
            dataset.input_dim(),
            arch.input_dim
        )));
    }
    let n = dataset.num_examples();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let batch = dataset.features.slice(s![start..end, ..]);
        let trace = forward(arch, params, batch)?;
        let predicted = crate::nn::argmax_rows(&trace.logits);
        correct += predicted
            .iter()
            .zip(&dataset.labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// How much accuracy the attack removed. Both accuracies are fractions in
/// [0, 1]; a negative drop means the attacked run did better.
pub fn accuracy_drop(benign_accuracy: f64, attacked_accuracy: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&benign_accuracy));
    debug_assert!((0.0..=1.0).contains(&attacked_accuracy));
    benign_accuracy - attacked_accuracy
}
