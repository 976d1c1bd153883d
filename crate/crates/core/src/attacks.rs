//! Untargeted model-poisoning attacks.
//!
//! Both attacks craft a single poisoned update from the round's benign
//! updates (a full-knowledge, upper-bound adversary) and submit the identical
//! vector from every malicious client:
//!
//! * **Stat-Opt** pushes a fixed distance along the static direction
//!   `w = -sign(mean(benign))`.
//! * **Dyn-Opt** scales a data-dependent direction by the `gamma` that
//!   maximizes how far the deployed aggregation rule is displaced, found with
//!   a halving search probed against the server's exact aggregator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{aggregate_mean, AgrOracle, ClientUpdate};
use crate::nn::ParameterVector;

/// Which attack (if any) is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttackKind {
    #[default]
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "STAT_OPT")]
    StatOpt,
    #[serde(rename = "DYN_OPT")]
    DynOpt,
}

/// How Stat-Opt combines the benign mean with its direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StatOptForm {
    /// `mean + gamma * w`: move away from the benign mean.
    #[default]
    #[serde(rename = "DEVIATION")]
    Deviation,
    /// `-gamma * w`: submit the scaled direction verbatim (kept as an option;
    /// note it points along the benign mean's sign, not against it).
    #[serde(rename = "LITERAL")]
    Literal,
}

/// Data-dependent direction used by Dyn-Opt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DynOptDirection {
    /// `w = -mean / ||mean||` (zero if the mean is the zero vector).
    #[default]
    #[serde(rename = "UNIT_MEAN")]
    UnitMean,
    /// `w = -sign(mean)` per coordinate.
    #[serde(rename = "SIGN_OF_MEAN")]
    SignOfMean,
    /// `w = -std` per coordinate (population standard deviation).
    #[serde(rename = "STD")]
    Std,
}

/// Adversary configuration. Malicious clients are the first
/// `ceil(malicious_fraction * total_clients)` client ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub malicious_fraction: f64,
    pub gamma_init: f64,
    pub gamma_search_iters: usize,
    pub gamma_threshold: f64,
    pub stat_opt_form: StatOptForm,
    pub dyn_opt_direction: DynOptDirection,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            malicious_fraction: 0.2,
            gamma_init: 10.0,
            gamma_search_iters: 12,
            gamma_threshold: 1e-3,
            stat_opt_form: StatOptForm::default(),
            dyn_opt_direction: DynOptDirection::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.malicious_fraction.is_finite()
            && (0.0..0.5).contains(&self.malicious_fraction))
        {
            return Err(Error::Config(format!(
                "malicious_fraction must be in [0, 0.5), got {}",
                self.malicious_fraction
            )));
        }
        if !(self.gamma_init.is_finite() && self.gamma_init > 0.0) {
            return Err(Error::Config(format!(
                "gamma_init must be > 0, got {}",
                self.gamma_init
            )));
        }
        if !(self.gamma_threshold.is_finite() && self.gamma_threshold > 0.0) {
            return Err(Error::Config(format!(
                "gamma_threshold must be > 0, got {}",
                self.gamma_threshold
            )));
        }
        Ok(())
    }

    /// Number of malicious clients for a population of `total_clients`:
    /// `ceil(fraction * total)`, snapping to the nearest integer first so
    /// that e.g. 0.2 of 20 is exactly 4 despite floating-point fuzz.
    pub fn num_malicious(&self, total_clients: usize) -> usize {
        let x = self.malicious_fraction * total_clients as f64;
        let nearest = x.round();
        let m = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
        m as usize
    }
}

fn benign_mean(benign: &[ClientUpdate]) -> Result<ParameterVector> {
    if benign.is_empty() {
        return Err(Error::Input(
            "attack crafting needs at least one benign update".into(),
        ));
    }
    aggregate_mean(benign)
}

/// Per-coordinate sign with `sign(0) = 0`.
fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The Dyn-Opt direction vector for the given benign updates and their mean.
fn dyn_opt_direction(
    benign: &[ClientUpdate],
    mean: &ParameterVector,
    direction: DynOptDirection,
) -> ParameterVector {
    let mut w = mean.zeros_like();
    match direction {
        DynOptDirection::UnitMean => {
            let norm = mean.l2_norm();
            if norm > 0.0 {
                for (out, &m) in w.values_mut().iter_mut().zip(mean.values()) {
                    *out = -m / norm;
                }
            }
        }
        DynOptDirection::SignOfMean => {
            for (out, &m) in w.values_mut().iter_mut().zip(mean.values()) {
                *out = -signum0(m);
            }
        }
        DynOptDirection::Std => {
            let n = benign.len() as f64;
            for d in 0..mean.len() {
                let mu = mean.values()[d];
                let var: f64 = benign
                    .iter()
                    .map(|u| {
                        let diff = u.delta.values()[d] - mu;
                        diff * diff
                    })
                    .sum::<f64>()
                    / n;
                w.values_mut()[d] = -var.sqrt();
            }
        }
    }
    w
}

/// Craft the Stat-Opt poisoned update from the benign updates.
///
/// `w = -sign(mean(benign))` per coordinate; the `Deviation` form returns
/// `mean + gamma * w`, the `Literal` form returns `-gamma * w`.
pub fn stat_opt(
    benign: &[ClientUpdate],
    gamma: f64,
    form: StatOptForm,
) -> Result<ParameterVector> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Input(format!(
            "stat_opt needs gamma > 0, got {gamma}"
        )));
    }
    let mean = benign_mean(benign)?;
    let mut out = mean.zeros_like();
    match form {
        StatOptForm::Deviation => {
            for (o, &m) in out.values_mut().iter_mut().zip(mean.values()) {
                *o = m + gamma * -signum0(m);
            }
        }
        StatOptForm::Literal => {
            for (o, &m) in out.values_mut().iter_mut().zip(mean.values()) {
                *o = -gamma * -signum0(m);
            }
        }
    }
    Ok(out)
}

/// `mean + gamma * w` as a fresh parameter vector.
fn poisoned_at(mean: &ParameterVector, w: &ParameterVector, gamma: f64) -> ParameterVector {
    let mut p = mean.clone();
    for (o, &wd) in p.values_mut().iter_mut().zip(w.values()) {
        *o += gamma * wd;
    }
    p
}

/// Craft the Dyn-Opt poisoned update: `mean + gamma* . w`, where `gamma*`
/// maximizes the displacement of the deployed aggregation rule,
/// `||agr(benign U m copies of poisoned) - agr(benign)||_2`, over a halving
/// search. The search starts at `gamma_init`, climbs while the objective keeps
/// improving and backs off otherwise, halving its step each iteration; it
/// stops after `gamma_search_iters` iterations or once the step drops below
/// `gamma_threshold`, and returns the best probed point (ties favor the
/// smaller `gamma`, including the no-op probe at 0).
pub fn dyn_opt(
    benign: &[ClientUpdate],
    oracle: &dyn AgrOracle,
    config: &AttackConfig,
    num_malicious: usize,
) -> Result<ParameterVector> {
    config.validate()?;
    let mean = benign_mean(benign)?;
    let w = dyn_opt_direction(benign, &mean, config.dyn_opt_direction);
    let base = oracle.aggregate_updates(benign)?;
    let spare_id = benign.iter().map(|u| u.client_id).max().unwrap_or(0) + 1;

    let probe = |gamma: f64| -> Result<f64> {
        let poisoned = poisoned_at(&mean, &w, gamma);
        let mut multiset: Vec<ClientUpdate> = benign.to_vec();
        for k in 0..num_malicious {
            multiset.push(ClientUpdate {
                client_id: spare_id + k,
                delta: poisoned.clone(),
                num_examples: 0,
            });
        }
        let shifted = oracle.aggregate_updates(&multiset)?;
        Ok(shifted.sub(&base)?.l2_norm())
    };

    // Probe ledger: (deviation, gamma). gamma = 0 is the reference no-op.
    let mut best = (probe(0.0)?, 0.0);
    let mut gamma = config.gamma_init;
    let mut step = config.gamma_init / 2.0;
    let mut prev_dev = f64::NEG_INFINITY;
    for _ in 0..config.gamma_search_iters {
        let dev = probe(gamma)?;
        if dev > best.0 || (dev == best.0 && gamma < best.1) {
            best = (dev, gamma);
        }
        if dev >= prev_dev {
            gamma += step;
        } else {
            gamma = (gamma - step).max(0.0);
        }
        prev_dev = dev;
        step /= 2.0;
        if step < config.gamma_threshold {
            break;
        }
    }
    Ok(poisoned_at(&mean, &w, best.1))
}

/// Replace the malicious members' updates inside a sampled cohort.
///
/// Cohort members whose client id does not appear in `benign` are the
/// round's malicious clients; each of them submits the identical crafted
/// vector. Benign members pass through bit-unchanged, in their original
/// order. With `kind = NONE` or no malicious member sampled, the cohort is
/// returned as-is.
pub fn apply_attack(
    cohort: &[ClientUpdate],
    benign: &[ClientUpdate],
    config: &AttackConfig,
    oracle: &dyn AgrOracle,
) -> Result<Vec<ClientUpdate>> {
    if config.kind == AttackKind::None {
        return Ok(cohort.to_vec());
    }
    config.validate()?;
    let benign_ids: std::collections::BTreeSet<usize> =
        benign.iter().map(|u| u.client_id).collect();
    let num_malicious = cohort
        .iter()
        .filter(|u| !benign_ids.contains(&u.client_id))
        .count();
    if num_malicious == 0 {
        return Ok(cohort.to_vec());
    }

    let crafted = match config.kind {
        AttackKind::StatOpt => stat_opt(benign, config.gamma_init, config.stat_opt_form)?,
        AttackKind::DynOpt => dyn_opt(benign, oracle, config, num_malicious)?,
        AttackKind::None => unreachable!("handled above"),
    };

    Ok(cohort
        .iter()
        .map(|u| {
            if benign_ids.contains(&u.client_id) {
                u.clone()
            } else {
                ClientUpdate {
                    client_id: u.client_id,
                    delta: crafted.clone(),
                    num_examples: u.num_examples,
                }
            }
        })
        .collect())
}
