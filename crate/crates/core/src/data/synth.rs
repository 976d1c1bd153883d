//! Synthetic Gaussian-mixture classification data.
//!
//! Each class gets a center `0.5 + 0.3 * sqrt(d) * u` for a random
//! `d`-dimensional unit vector `u` (redrawn until pairwise cosine similarity
//! with earlier centers is at most 0.8, so classes do not collapse onto each
//! other), clamped into the unit box. Scaling the unit direction by `sqrt(d)`
//! keeps the typical per-coordinate excursion near 0.3 at every
//! dimensionality, so class separation does not wash out as `d` grows.
//! Examples are the center plus isotropic Gaussian noise of standard
//! deviation `spread`, clipped to `[0, 1]` per coordinate. Smaller `spread`
//! means an easier problem.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};

use super::LabeledDataset;

/// Spread that keeps a centroid classifier above 90% at small scale (4
/// classes, 16 dims) while leaving a small relu network trainable but
/// imperfect at image scale (784 dims, 10 classes) — high enough that
/// attack-induced degradation is visible, low enough to train through.
pub const DEFAULT_SYNTH_SPREAD: f64 = 0.15;

const MAX_CENTER_RETRIES: usize = 256;
const MAX_PAIRWISE_COSINE: f64 = 0.8;

/// Generate `examples_per_class` examples for each of `num_classes` classes.
/// Fully deterministic in `seed`: the same call yields the same centers and
/// the same examples. With `spread == 0` every example equals its class
/// center exactly.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    input_dim: usize,
    examples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    if input_dim == 0 {
        return Err(Error::Config("input_dim must be >= 1".into()));
    }
    if examples_per_class == 0 {
        return Err(Error::Config("examples_per_class must be >= 1".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Config(format!("spread must be >= 0, got {spread}")));
    }

    let mut rng = derive_rng(seed, stream::SYNTH, 0, 0);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut accepted = None;
        for _ in 0..MAX_CENTER_RETRIES {
            let v: Vec<f64> = (0..input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
            let too_close = units.iter().any(|prev| {
                let cos: f64 = prev.iter().zip(&u).map(|(a, b)| a * b).sum();
                cos.abs() > MAX_PAIRWISE_COSINE
            });
            if !too_close {
                accepted = Some(u);
                break;
            }
        }
        let u = accepted.ok_or_else(|| {
            Error::Numeric(format!(
                "could not place {num_classes} well-separated class centers in {input_dim} \
                 dimensions (failed at class {class}); increase input_dim or reduce num_classes"
            ))
        })?;
        let scale = 0.3 * (input_dim as f64).sqrt();
        centers.push(
            u.iter()
                .map(|x| (0.5 + scale * x).clamp(0.0, 1.0))
                .collect(),
        );
        units.push(u);
    }

    let total = num_classes * examples_per_class;
    let mut features = Array2::zeros((total, input_dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..examples_per_class {
            for (j, &c) in center.iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                features[[row, j]] = (c + spread * noise).clamp(0.0, 1.0);
            }
            labels.push(class);
            row += 1;
        }
    }

    let dataset = LabeledDataset {
        features,
        labels,
        num_classes,
    };
    dataset.validate()?;
    Ok(dataset)
}
