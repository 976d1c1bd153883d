//! Experiment execution: drive the federated rounds to completion, persist
//! per-round metrics as CSV and a JSON summary, run paired benign/attacked
//! comparisons, and dump representations for external projection tooling.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::s;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackKind;
use crate::data::{dirichlet_partition, LabeledDataset};
use crate::error::{io_err, Error, Result};
use crate::federation::{run_round, RoundEnv, RoundState};
use crate::nn::{forward, ModelArch, ParameterVector};

use super::config::{load_dataset, ExperimentConfig};
use super::{accuracy_drop, evaluate, MetricsRecord};

/// CSV column order; matches the field order of [`MetricsRecord`].
pub const METRICS_CSV_HEADER: [&str; 8] = [
    "round",
    "test_accuracy",
    "mean_train_loss",
    "mean_ce_term",
    "mean_kd_final_term",
    "mean_kd_aux_term",
    "attacked",
    "wall_time_ms",
];

/// How a run ended early, if it did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    /// Round index that failed (0-based).
    pub round: usize,
    pub category: String,
    pub message: String,
}

/// Persisted run summary (written next to the metrics CSV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_label: String,
    /// SHA-256 of the canonical (pretty-printed) config JSON.
    pub config_sha256: String,
    pub rounds_completed: usize,
    /// Mean test accuracy over the final 5 completed rounds (all of them if
    /// fewer); the initial model's accuracy when no round completed.
    pub final_accuracy: f64,
    /// The same value rendered as a percentage.
    pub final_accuracy_pct: f64,
    /// Set when the run stopped early on a numeric failure.
    pub abort: Option<AbortInfo>,
    /// The full resolved configuration this run executed.
    pub config: ExperimentConfig,
}

/// Everything a finished (or aborted) run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub final_params: ParameterVector,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("csv: {other:?}")),
        },
    }
}

/// Write the per-round metrics CSV: fixed header, one row per round,
/// `wall_time_ms` pinned to 0 so identical configs produce identical bytes.
fn write_metrics_csv(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    writer
        .write_record(METRICS_CSV_HEADER)
        .map_err(csv_err(path))?;
    for record in metrics {
        let pinned = MetricsRecord {
            wall_time_ms: 0,
            ..record.clone()
        };
        writer.serialize(pinned).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run one experiment end to end.
///
/// Writes `<output_dir>/<run_label>.metrics.csv` and
/// `<output_dir>/<run_label>.summary.json`. A numeric failure mid-run stops
/// training and is recorded in the summary with its round; config and IO
/// failures propagate as errors.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let (train, test) = load_dataset(config)?;
    let shards = dirichlet_partition(&train, &config.partition)?;

    let initial = config.arch.init_params(config.federation.seed)?;
    let mut state = RoundState::new(initial, config.federation.total_clients);
    let env = RoundEnv {
        arch: &config.arch,
        train: &train,
        test: &test,
        shards: &shards,
        loss: &config.loss,
        attack: Some(&config.attack),
        defense: &config.defense,
    };

    let mut abort = None;
    for round in 0..config.federation.rounds {
        // Keep the pre-round state so a numeric abort still yields a usable
        // summary of everything completed so far.
        match run_round(state.clone(), &config.federation, &env) {
            Ok(next) => state = next,
            Err(Error::Numeric(message)) => {
                log::error!("round {round} aborted: {message}");
                abort = Some(AbortInfo {
                    round,
                    category: "numeric".to_string(),
                    message,
                });
                break;
            }
            Err(other) => return Err(other),
        }
    }

    let final_accuracy = if state.metrics.is_empty() {
        evaluate(&config.arch, &state.global_params, &test)?
    } else {
        let k = state.metrics.len().min(5);
        let tail = &state.metrics[state.metrics.len() - k..];
        tail.iter().map(|m| m.test_accuracy).sum::<f64>() / k as f64
    };

    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let csv_path = config
        .output_dir
        .join(format!("{}.metrics.csv", config.run_label));
    write_metrics_csv(&csv_path, &state.metrics)?;

    let config_json = config.to_json()?;
    let summary = RunSummary {
        run_label: config.run_label.clone(),
        config_sha256: sha256_hex(&config_json),
        rounds_completed: state.metrics.len(),
        final_accuracy,
        final_accuracy_pct: 100.0 * final_accuracy,
        abort,
        config: config.clone(),
    };
    let summary_path = config
        .output_dir
        .join(format!("{}.summary.json", config.run_label));
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    let mut file = fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    file.write_all(summary_json.as_bytes())
        .map_err(io_err(&summary_path))?;
    file.write_all(b"\n").map_err(io_err(&summary_path))?;

    Ok(RunOutcome {
        metrics: state.metrics,
        summary,
        final_params: state.global_params,
        csv_path,
        summary_path,
    })
}

/// Benign/attacked comparison written by [`run_paired`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub benign_label: String,
    pub attacked_label: String,
    pub benign_accuracy: f64,
    pub attacked_accuracy: f64,
    /// `benign - attacked`; negative means the attack helped.
    pub accuracy_drop: f64,
    pub benign_accuracy_pct: f64,
    pub attacked_accuracy_pct: f64,
    pub accuracy_drop_pct: f64,
}

/// Run a benign run and an attacked run that differ ONLY in `attack.kind`
/// (and `run_label`, which names the output files), then report the accuracy
/// drop. The benign side must have `attack.kind = NONE`. The comparison is
/// written to `<attacked output_dir>/<attacked run_label>.paired.json`.
pub fn run_paired(
    benign: &ExperimentConfig,
    attacked: &ExperimentConfig,
) -> Result<(RunOutcome, RunOutcome, PairedSummary)> {
    if benign.attack.kind != AttackKind::None {
        return Err(Error::Config(
            "the benign side of a paired run must have attack.kind = NONE".into(),
        ));
    }
    if attacked.attack.kind == AttackKind::None {
        return Err(Error::Config(
            "the attacked side of a paired run must have an active attack.kind".into(),
        ));
    }
    let mut mirror = attacked.clone();
    mirror.attack.kind = benign.attack.kind;
    mirror.run_label = benign.run_label.clone();
    if &mirror != benign {
        return Err(Error::Config(
            "paired runs must be identical apart from attack.kind and run_label".into(),
        ));
    }

    let benign_outcome = run_experiment(benign)?;
    let attacked_outcome = run_experiment(attacked)?;
    let b = benign_outcome.summary.final_accuracy;
    let a = attacked_outcome.summary.final_accuracy;
    let drop = accuracy_drop(b, a);
    let paired = PairedSummary {
        benign_label: benign.run_label.clone(),
        attacked_label: attacked.run_label.clone(),
        benign_accuracy: b,
        attacked_accuracy: a,
        accuracy_drop: drop,
        benign_accuracy_pct: 100.0 * b,
        attacked_accuracy_pct: 100.0 * a,
        accuracy_drop_pct: 100.0 * drop,
    };
    let path = attacked
        .output_dir
        .join(format!("{}.paired.json", attacked.run_label));
    let json = serde_json::to_string_pretty(&paired)
        .map_err(|e| Error::Config(format!("paired summary serialization failed: {e}")))?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok((benign_outcome, attacked_outcome, paired))
}

/// Dump each example's final-layer representation with its label as CSV
/// (columns `label, z0, ..`), for external projection/plotting tools.
pub fn dump_representations(
    arch: &ModelArch,
    params: &ParameterVector,
    dataset: &LabeledDataset,
    path: &Path,
) -> Result<()> {
    let rep_dim = arch.representation_dim();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    let mut header = vec!["label".to_string()];
    header.extend((0..rep_dim).map(|d| format!("z{d}")));
    writer.write_record(&header).map_err(csv_err(path))?;

    const CHUNK: usize = 256;
    let n = dataset.num_examples();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let batch = dataset.features.slice(s![start..end, ..]);
        let trace = forward(arch, params, batch)?;
        let reps = trace.representation();
        for (row, &label) in reps.outer_iter().zip(&dataset.labels[start..end]) {
            let mut record = vec![label.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            writer.write_record(&record).map_err(csv_err(path))?;
        }
        start = end;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::config::{preset, DatasetConfig};
    use super::*;
    use crate::federation::Defense;
    use crate::losses::{LossKind, LossSpec};
    use crate::nn::Activation;

    /// A config small enough for unit tests: 4 clients, tiny synthetic data.
    fn tiny_config(label: &str, dir: &Path) -> ExperimentConfig {
        let mut config = preset("fig2").unwrap();
        config.run_label = label.to_string();
        config.output_dir = dir.to_path_buf();
        config.dataset = DatasetConfig::Synth {
            num_classes: 3,
            input_dim: 12,
            train_per_class: 30,
            test_per_class: 10,
            spread: 0.25,
        };
        config.arch = ModelArch {
            input_dim: 12,
            trunk_dims: vec![16, 8],
            num_classes: 3,
            aux_head: None,
            activation: Activation::Relu,
        };
        config.loss = LossSpec::new(LossKind::Ce);
        config.attack.kind = AttackKind::None;
        config.partition.num_clients = 4;
        config.partition.alpha = 1.0;
        config.federation.total_clients = 4;
        config.federation.sample_fraction = 1.0;
        config.federation.rounds = 3;
        config.federation.batch_size = 16;
        config.defense = Defense::Mean;
        config.validate().unwrap();
        config
    }

    #[test]
    fn run_experiment_writes_csv_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config("smoke", dir.path());
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.metrics.len(), 3);
        assert_eq!(outcome.summary.rounds_completed, 3);
        assert!(outcome.summary.abort.is_none());
        assert!(
            (outcome.summary.final_accuracy_pct - 100.0 * outcome.summary.final_accuracy).abs()
                < 1e-12
        );

        let csv_text = fs::read_to_string(&outcome.csv_path).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER.join(","));
        assert_eq!(lines.count(), 3, "one data row per round");
        for line in csv_text.lines().skip(1) {
            let last = line.rsplit(',').next().unwrap();
            assert_eq!(last, "0", "wall_time_ms pinned in CSV");
        }

        let summary_text = fs::read_to_string(&outcome.summary_path).unwrap();
        let parsed: RunSummary = serde_json::from_str(&summary_text).unwrap();
        assert_eq!(parsed, outcome.summary);
        assert_eq!(parsed.config_sha256.len(), 64);
    }

    #[test]
    fn rerunning_the_same_config_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config("replay", dir.path());
        let first = run_experiment(&config).unwrap();
        let bytes_a = fs::read(&first.csv_path).unwrap();
        let second = run_experiment(&config).unwrap();
        let bytes_b = fs::read(&second.csv_path).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(first.summary, second.summary);
    }

    #[test]
    fn zero_rounds_reports_the_initial_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config("zero-rounds", dir.path());
        config.federation.rounds = 0;
        let outcome = run_experiment(&config).unwrap();
        assert!(outcome.metrics.is_empty());
        assert_eq!(outcome.summary.rounds_completed, 0);

        // The summary's accuracy is the untouched initial model's.
        let (_, test) = load_dataset(&config).unwrap();
        let initial = config.arch.init_params(config.federation.seed).unwrap();
        let expected = evaluate(&config.arch, &initial, &test).unwrap();
        assert_eq!(outcome.summary.final_accuracy, expected);

        let csv_text = fs::read_to_string(&outcome.csv_path).unwrap();
        assert_eq!(csv_text.trim(), METRICS_CSV_HEADER.join(","), "header-only CSV");
    }

    #[test]
    fn paired_runs_enforce_the_protocol_and_report_the_drop() {
        let dir = tempfile::tempdir().unwrap();
        let benign = tiny_config("pair-benign", dir.path());
        let mut attacked = tiny_config("pair-attacked", dir.path());
        attacked.attack.kind = AttackKind::StatOpt;
        let (b, a, paired) = run_paired(&benign, &attacked).unwrap();
        assert!(
            (paired.accuracy_drop
                - (b.summary.final_accuracy - a.summary.final_accuracy))
                .abs()
                < 1e-15
        );
        assert!((paired.accuracy_drop_pct - 100.0 * paired.accuracy_drop).abs() < 1e-12);
        let paired_path = dir.path().join("pair-attacked.paired.json");
        let parsed: PairedSummary =
            serde_json::from_str(&fs::read_to_string(paired_path).unwrap()).unwrap();
        assert_eq!(parsed, paired);

        // Protocol violations: benign side attacking, or extra differences.
        assert!(run_paired(&attacked, &attacked).is_err());
        let mut different = attacked.clone();
        different.federation.seed += 1;
        assert!(run_paired(&benign, &different).is_err());
    }

    #[test]
    fn representation_dump_matches_a_recomputed_forward_pass() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config("reps", dir.path());
        let (train, _) = load_dataset(&config).unwrap();
        let small = train.subset(&[0, 1, 2]);
        let params = config.arch.init_params(9).unwrap();
        let path = dir.path().join("reps.csv");
        dump_representations(&config.arch, &params, &small, &path).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "header + 3 rows");
        assert_eq!(lines[0].split(',').count(), 1 + config.arch.representation_dim());

        let trace = forward(&config.arch, &params, small.features.view()).unwrap();
        for (line, (rep_row, &label)) in lines[1..]
            .iter()
            .zip(trace.representation().outer_iter().zip(&small.labels))
        {
            let mut fields = line.split(',');
            assert_eq!(fields.next().unwrap(), label.to_string());
            for (field, &value) in fields.zip(rep_row.iter()) {
                let parsed: f64 = field.parse().unwrap();
                assert_eq!(parsed, value, "representation value should round-trip");
            }
        }

        // Empty dataset: header-only file.
        let empty = train.subset(&[]);
        let empty_path = dir.path().join("empty.csv");
        dump_representations(&config.arch, &params, &empty, &empty_path).unwrap();
        let text = fs::read_to_string(&empty_path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }
}
