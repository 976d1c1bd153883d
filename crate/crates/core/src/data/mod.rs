//! Datasets and their partitioning across clients.

mod idx;
mod synth;

pub use idx::load_idx;
pub use synth::{synth_gaussian_mixture, DEFAULT_SYNTH_SPREAD};

use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::{derive_rng, stream};

/// In-memory labeled dataset. Features are `[0, 1]`-scaled, one example per
/// row; labels index `0..num_classes`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Input("dataset needs at least 2 classes".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if !self
            .features
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(Error::Input("features must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Example indices per class, each list ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Copy the rows at `indices` into a batch plus its labels.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut batch = Array2::zeros((indices.len(), self.input_dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            batch.row_mut(r).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        (batch, labels)
    }

    /// New dataset containing the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.gather(indices);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Persist as CSV: header `f0..f{d-1},label`, one example per row.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path)(io),
            other => Error::Input(format!("csv: {other:?}")),
        })?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        writer
            .write_record(&header)
            .and_then(|_| {
                for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
                    let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    record.push(label.to_string());
                    writer.write_record(&record)?;
                }
                writer.flush().map_err(csv::Error::from)
            })
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => io_err(path)(io),
                other => Error::Input(format!("csv: {other:?}")),
            })
    }
}

/// How to split a dataset across clients: one Dirichlet(alpha) draw per class
/// decides what share of that class each client receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// The example indices one client owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub example_indices: Vec<usize>,
}

/// Label-skewed partition: for each class, draw client proportions from
/// Dirichlet(alpha) (as normalized Gamma(alpha, 1) draws), convert to integer
/// counts by largest-remainder rounding (ties broken by lower client id), and
/// deal that class's examples out in client order.
///
/// Shards are disjoint and cover the dataset exactly. Small alpha concentrates
/// each class on few clients; large alpha approaches a uniform split. Clients
/// may end up with zero examples; callers are expected to skip them when
/// training.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    config: &PartitionConfig,
) -> Result<Vec<ClientShard>> {
    dataset.validate()?;
    if config.num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    if !(config.alpha.is_finite() && config.alpha > 0.0) {
        return Err(Error::Config(format!(
            "alpha must be > 0, got {}",
            config.alpha
        )));
    }
    let by_class = dataset.class_indices();
    if let Some(empty) = by_class.iter().position(|ix| ix.is_empty()) {
        return Err(Error::Input(format!(
            "class {empty} has no examples; every class must be represented"
        )));
    }

    let n = config.num_clients;
    let mut rng = derive_rng(config.seed, stream::PARTITION, 0, 0);
    let gamma = Gamma::new(config.alpha, 1.0)
        .map_err(|e| Error::Config(format!("invalid Dirichlet alpha: {e}")))?;

    let mut shards: Vec<ClientShard> = (0..n)
        .map(|client_id| ClientShard {
            client_id,
            example_indices: Vec::new(),
        })
        .collect();

    for class_examples in &by_class {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Numeric(
                "degenerate Dirichlet draw (all-zero gamma samples)".into(),
            ));
        }

        // Largest-remainder rounding of proportions to counts.
        let m = class_examples.len();
        let mut counts = vec![0usize; n];
        let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut assigned = 0usize;
        for (j, d) in draws.iter().enumerate() {
            let target = d / total * m as f64;
            let base = target.floor() as usize;
            counts[j] = base;
            assigned += base;
            remainders.push((target - base as f64, j));
        }
        remainders.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite remainders")
                .then(a.1.cmp(&b.1))
        });
        for &(_, j) in remainders.iter().take(m - assigned) {
            counts[j] += 1;
        }

        let mut cursor = 0;
        for (j, &count) in counts.iter().enumerate() {
            shards[j]
                .example_indices
                .extend_from_slice(&class_examples[cursor..cursor + count]);
            cursor += count;
        }
        debug_assert_eq!(cursor, m);
    }

    for shard in &mut shards {
        shard.example_indices.sort_unstable();
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny_dataset(per_class: usize, classes: usize) -> LabeledDataset {
        let n = per_class * classes;
        let features = Array2::from_shape_fn((n, 3), |(i, j)| ((i + j) % 7) as f64 / 7.0);
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledDataset {
            features,
            labels,
            num_classes: classes,
        }
    }

    #[test]
    fn partition_is_a_disjoint_cover() {
        let dataset = tiny_dataset(40, 5);
        let config = PartitionConfig {
            num_clients: 7,
            alpha: 0.3,
            seed: 11,
        };
        let shards = dirichlet_partition(&dataset, &config).unwrap();
        assert_eq!(shards.len(), 7);
        let mut seen = BTreeSet::new();
        for shard in &shards {
            for &i in &shard.example_indices {
                assert!(seen.insert(i), "example {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), dataset.num_examples());
    }

    #[test]
    fn partition_is_deterministic_in_the_seed() {
        let dataset = tiny_dataset(30, 4);
        let config = PartitionConfig {
            num_clients: 5,
            alpha: 0.5,
            seed: 3,
        };
        let a = dirichlet_partition(&dataset, &config).unwrap();
        let b = dirichlet_partition(&dataset, &config).unwrap();
        assert_eq!(a, b);
        let c = dirichlet_partition(
            &dataset,
            &PartitionConfig {
                seed: 4,
                ..config
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    /// Per-class client counts for each shard.
    fn class_counts(dataset: &LabeledDataset, shards: &[ClientShard]) -> Vec<Vec<usize>> {
        shards
            .iter()
            .map(|shard| {
                let mut counts = vec![0usize; dataset.num_classes];
                for &i in &shard.example_indices {
                    counts[dataset.labels[i]] += 1;
                }
                counts
            })
            .collect()
    }

    #[test]
    fn single_client_receives_the_whole_dataset() {
        let dataset = tiny_dataset(10, 3);
        let shards = dirichlet_partition(
            &dataset,
            &PartitionConfig {
                num_clients: 1,
                alpha: 0.05,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(
            shards[0].example_indices,
            (0..dataset.num_examples()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn huge_alpha_splits_each_class_almost_evenly() {
        let dataset = tiny_dataset(100, 4);
        let config = PartitionConfig {
            num_clients: 10,
            alpha: 1e6,
            seed: 21,
        };
        let shards = dirichlet_partition(&dataset, &config).unwrap();
        let expected = 100.0 / 10.0;
        for (shard, counts) in shards.iter().zip(class_counts(&dataset, &shards)) {
            for (class, &count) in counts.iter().enumerate() {
                assert!(
                    (count as f64 - expected).abs() <= 0.25 * expected,
                    "client {} class {class}: {count} examples, expected about {expected}",
                    shard.client_id
                );
            }
        }
    }

    #[test]
    fn tiny_alpha_concentrates_each_class_on_one_client() {
        let dataset = tiny_dataset(100, 4);
        let mut shares = Vec::new();
        for seed in 0..5 {
            let shards = dirichlet_partition(
                &dataset,
                &PartitionConfig {
                    num_clients: 10,
                    alpha: 0.05,
                    seed,
                },
            )
            .unwrap();
            let counts = class_counts(&dataset, &shards);
            for class in 0..dataset.num_classes {
                let max = counts.iter().map(|c| c[class]).max().unwrap();
                shares.push(max as f64 / 100.0);
            }
        }
        let mean_share = shares.iter().sum::<f64>() / shares.len() as f64;
        assert!(
            mean_share > 0.5,
            "expected one client to dominate most classes, mean per-class max share {mean_share}"
        );
    }

    #[test]
    fn empty_class_is_an_input_error() {
        let mut dataset = tiny_dataset(10, 3);
        dataset.num_classes = 4; // class 3 has no examples
        let config = PartitionConfig {
            num_clients: 3,
            alpha: 1.0,
            seed: 0,
        };
        match dirichlet_partition(&dataset, &config) {
            Err(Error::Input(msg)) => assert!(msg.contains("class 3"), "{msg}"),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let dataset = tiny_dataset(10, 2);
        assert!(dirichlet_partition(
            &dataset,
            &PartitionConfig {
                num_clients: 0,
                alpha: 1.0,
                seed: 0
            }
        )
        .is_err());
        assert!(dirichlet_partition(
            &dataset,
            &PartitionConfig {
                num_clients: 3,
                alpha: 0.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn gather_and_subset_pick_requested_rows() {
        let dataset = tiny_dataset(5, 2);
        let (batch, labels) = dataset.gather(&[3, 0]);
        assert_eq!(batch.nrows(), 2);
        assert_eq!(batch.row(0), dataset.features.row(3));
        assert_eq!(labels, vec![dataset.labels[3], dataset.labels[0]]);

        let sub = dataset.subset(&[1, 2, 4]);
        assert_eq!(sub.num_examples(), 3);
        sub.validate().unwrap();
    }

    #[test]
    fn save_csv_writes_header_and_rows() {
        let dataset = tiny_dataset(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        dataset.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("f0,f1,f2,label"));
        assert_eq!(lines.count(), dataset.num_examples());
    }
}
