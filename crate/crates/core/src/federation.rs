//! Federated averaging: client sampling, local training, robust aggregation,
//! and round orchestration.
//!
//! A round samples a client cohort, trains each sampled benign client from the
//! current global model, optionally lets an adversary replace the malicious
//! cohort members' updates, aggregates the update multiset, and steps the
//! global model by `server_lr` times the aggregate.
//!
//! Everything is deterministic given the experiment seed: sampling and local
//! shuffling draw from per-(round, client) derived streams, updates are kept
//! in ascending client-id order regardless of which worker finished first, and
//! both aggregators sort each coordinate's values before summing, which makes
//! them exactly permutation-invariant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, AttackConfig, AttackKind};
use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::harness::MetricsRecord;
use crate::losses::{client_loss, DistillContext, LossSpec, LossTerms};
use crate::nn::{
    backward, forward, sgd_step, ModelArch, OptimizerSettings, OptimizerState, ParameterVector,
};
use crate::rng::{derive_rng, stream};

/// Federation-level hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub total_clients: usize,
    /// Fraction of clients sampled per round; the cohort size is
    /// `max(1, round(total_clients * sample_fraction))`.
    pub sample_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub server_lr: f64,
    pub optimizer: OptimizerSettings,
    pub rounds: usize,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::Config("total_clients must be >= 1".into()));
        }
        if !(self.sample_fraction.is_finite() && self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sample_fraction must be in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.server_lr.is_finite() && self.server_lr > 0.0) {
            return Err(Error::Config(format!(
                "server_lr must be > 0, got {}",
                self.server_lr
            )));
        }
        self.optimizer.validate()
    }

    /// Cohort size per round.
    pub fn cohort_size(&self) -> usize {
        ((self.total_clients as f64 * self.sample_fraction).round() as usize)
            .max(1)
            .min(self.total_clients)
    }
}

/// One client's contribution to a round: its parameter delta from the global
/// model it started at.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ParameterVector,
    pub num_examples: usize,
}

/// Server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Defense {
    #[serde(rename = "MEAN")]
    Mean,
    /// Per coordinate, drop the `m` largest and `m` smallest values before
    /// averaging. Requires more than `2m` updates.
    #[serde(rename = "TRMEAN")]
    TrimmedMean { m: usize },
}

impl Defense {
    pub fn aggregate(&self, updates: &[ClientUpdate]) -> Result<ParameterVector> {
        match *self {
            Defense::Mean => aggregate_mean(updates),
            Defense::TrimmedMean { m } => aggregate_trimmed_mean(updates, m),
        }
    }
}

/// Callable view of the deployed aggregation rule, handed to adversaries so
/// their search probes exactly what the server will run.
pub trait AgrOracle: Sync {
    fn aggregate_updates(&self, updates: &[ClientUpdate]) -> Result<ParameterVector>;
}

impl AgrOracle for Defense {
    fn aggregate_updates(&self, updates: &[ClientUpdate]) -> Result<ParameterVector> {
        self.aggregate(updates)
    }
}

/// Shared per-coordinate sorted-trim kernel. Both aggregators go through it,
/// so `m = 0` trimming is bit-identical to the mean and both are exactly
/// permutation-invariant (each coordinate's values are sorted before summing).
fn trimmed_kernel(updates: &[ClientUpdate], m: usize) -> Result<ParameterVector> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::Input("cannot aggregate an empty update set".into()));
    }
    if n <= 2 * m {
        return Err(Error::Config(format!(
            "trimmed mean needs more than 2m = {} updates, got {n}",
            2 * m
        )));
    }
    let first = &updates[0].delta;
    for u in updates {
        crate::nn::check_same_layout(first, &u.delta)?;
        if !u.delta.is_finite() {
            return Err(Error::Numeric(format!(
                "update from client {} contains non-finite values",
                u.client_id
            )));
        }
    }

    let dims = first.len();
    let keep = (n - 2 * m) as f64;
    let mut out = first.zeros_like();
    let mut column = vec![0.0f64; n];
    for d in 0..dims {
        for (k, u) in updates.iter().enumerate() {
            column[k] = u.delta.values()[d];
        }
        column.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let sum: f64 = column[m..n - m].iter().sum();
        out.values_mut()[d] = sum / keep;
    }
    Ok(out)
}

/// Coordinate-wise arithmetic mean of the updates (unweighted).
pub fn aggregate_mean(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    trimmed_kernel(updates, 0)
}

/// Coordinate-wise trimmed mean: drop the `m` largest and `m` smallest values
/// per coordinate, average the rest.
pub fn aggregate_trimmed_mean(updates: &[ClientUpdate], m: usize) -> Result<ParameterVector> {
    trimmed_kernel(updates, m)
}

/// Apply the aggregated update to the global model: `global + server_lr * agg`.
pub fn global_update(
    global: &ParameterVector,
    aggregate: &ParameterVector,
    server_lr: f64,
) -> Result<ParameterVector> {
    if !(server_lr.is_finite() && server_lr > 0.0) {
        return Err(Error::Config(format!(
            "server_lr must be > 0, got {server_lr}"
        )));
    }
    let mut next = global.clone();
    next.add_scaled(aggregate, server_lr)?;
    if !next.is_finite() {
        return Err(Error::Numeric(
            "global model became non-finite after the server step".into(),
        ));
    }
    Ok(next)
}

/// Deterministically sample this round's cohort: `cohort_size` distinct
/// client ids, ascending, drawn without replacement from a stream keyed by
/// `(seed, round)`.
pub fn sample_clients(config: &FederationConfig, round_index: usize) -> Result<Vec<usize>> {
    config.validate()?;
    let n = config.cohort_size();
    let mut rng = derive_rng(config.seed, stream::SAMPLING, round_index as u64, 0);
    let mut picked = rand::seq::index::sample(&mut rng, config.total_clients, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-client training statistics for one round: term means over all steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalTrainStats {
    pub steps: usize,
    pub mean_terms: LossTerms,
}

/// Train one client from the current global model and return its update.
///
/// Each epoch reshuffles the shard (stream keyed by `(seed, round, client)`)
/// and walks it in batches, including a final partial batch. Distillation
/// context (global-model logits/representation, previous-local representation)
/// is recomputed per batch from frozen models. With `local_epochs == 0` the
/// delta is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    global: &ParameterVector,
    arch: &ModelArch,
    train: &LabeledDataset,
    shard: &ClientShard,
    loss: &LossSpec,
    config: &FederationConfig,
    prev_local: Option<&ParameterVector>,
    round_index: usize,
) -> Result<(ClientUpdate, LocalTrainStats)> {
    config.validate()?;
    loss.validate()?;
    if shard.example_indices.is_empty() {
        return Err(Error::Input(format!(
            "client {} has no local examples",
            shard.client_id
        )));
    }

    let mut params = global.clone();
    let mut optimizer = OptimizerState::new(config.optimizer, params.len())?;
    let mut rng = derive_rng(
        config.seed,
        stream::LOCAL_TRAIN,
        round_index as u64,
        shard.client_id as u64,
    );

    let needs_server = loss.kind.needs_server_logits() || loss.kind.needs_representations();
    let needs_prev = loss.kind.needs_representations();
    // A client that has never trained contrasts against the model it started
    // from, which makes the contrastive term inert on first participation.
    let prev_params = prev_local.unwrap_or(global);

    let mut stats_sum = LossTerms::default();
    let mut steps = 0usize;
    let mut order = shard.example_indices.clone();
    for _ in 0..config.local_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for batch_indices in order.chunks(config.batch_size) {
            let (batch, labels) = train.gather(batch_indices);
            let trace = forward(arch, &params, batch.view())?;

            let mut ctx = DistillContext::default();
            if needs_server {
                let server_trace = forward(arch, global, batch.view())?;
                ctx.server_representation = Some(server_trace.representation().clone());
                ctx.server_logits = Some(server_trace.logits);
            }
            if needs_prev {
                let prev_trace = forward(arch, prev_params, batch.view())?;
                ctx.prev_local_representation = Some(prev_trace.representation().clone());
            }

            let (terms, upstream) = client_loss(&trace, &labels, loss, &ctx).map_err(|e| {
                match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "round {round_index}, client {}: {msg}",
                        shard.client_id
                    )),
                    other => other,
                }
            })?;
            let grad = backward(arch, &params, &trace, &upstream)?;
            params = sgd_step(params, &grad, &mut optimizer)?;

            stats_sum.total += terms.total;
            stats_sum.ce += terms.ce;
            stats_sum.kd_final += terms.kd_final;
            stats_sum.kd_aux += terms.kd_aux;
            steps += 1;
        }
    }

    let delta = params.sub(global)?;
    let mean = if steps > 0 {
        let k = steps as f64;
        LossTerms {
            total: stats_sum.total / k,
            ce: stats_sum.ce / k,
            kd_final: stats_sum.kd_final / k,
            kd_aux: stats_sum.kd_aux / k,
        }
    } else {
        LossTerms::default()
    };
    Ok((
        ClientUpdate {
            client_id: shard.client_id,
            delta,
            num_examples: shard.example_indices.len(),
        },
        LocalTrainStats {
            steps,
            mean_terms: mean,
        },
    ))
}

/// Mutable server-side state threaded through rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Index of the next round to run (0-based).
    pub round_index: usize,
    pub global_params: ParameterVector,
    /// Last trained local model per client, used as the contrastive negative.
    pub prev_local: Vec<Option<ParameterVector>>,
    pub metrics: Vec<MetricsRecord>,
}

impl RoundState {
    pub fn new(global_params: ParameterVector, total_clients: usize) -> Self {
        Self {
            round_index: 0,
            global_params,
            prev_local: vec![None; total_clients],
            metrics: Vec::new(),
        }
    }
}

/// Everything immutable a round needs.
#[derive(Clone, Copy)]
pub struct RoundEnv<'a> {
    pub arch: &'a ModelArch,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub shards: &'a [ClientShard],
    pub loss: &'a LossSpec,
    pub attack: Option<&'a AttackConfig>,
    pub defense: &'a Defense,
}

/// Run one federated round and return the advanced state.
///
/// Order of events: sample the cohort; train sampled benign clients (clients
/// with empty shards are skipped with a warning); under an active attack,
/// replace the sampled malicious clients' updates with the crafted vector;
/// aggregate in ascending client-id order; step the global model; evaluate.
pub fn run_round(state: RoundState, config: &FederationConfig, env: &RoundEnv) -> Result<RoundState> {
    config.validate()?;
    env.loss.validate()?;
    if env.shards.len() != config.total_clients {
        return Err(Error::Config(format!(
            "{} shards for {} clients",
            env.shards.len(),
            config.total_clients
        )));
    }
    let started = std::time::Instant::now();
    let round = state.round_index;
    let sampled = sample_clients(config, round)?;

    let attack = env.attack.filter(|a| a.kind != AttackKind::None);
    if let Some(a) = attack {
        a.validate()?;
    }
    let num_malicious_total = attack
        .map(|a| a.num_malicious(config.total_clients))
        .unwrap_or(0);
    let is_malicious = |id: usize| id < num_malicious_total;

    let benign_ids: Vec<usize> = sampled.iter().copied().filter(|&id| !is_malicious(id)).collect();
    let malicious_ids: Vec<usize> = sampled.iter().copied().filter(|&id| is_malicious(id)).collect();

    // Train benign clients in parallel; results come back in cohort order so
    // worker scheduling cannot influence anything downstream.
    let trainable: Vec<usize> = benign_ids
        .iter()
        .copied()
        .filter(|&id| {
            let empty = env.shards[id].example_indices.is_empty();
            if empty {
                log::warn!("round {round}: client {id} has no examples; skipping this round");
            }
            !empty
        })
        .collect();
    let trained: Vec<(ClientUpdate, LocalTrainStats)> = trainable
        .par_iter()
        .map(|&id| {
            local_train(
                &state.global_params,
                env.arch,
                env.train,
                &env.shards[id],
                env.loss,
                config,
                state.prev_local[id].as_ref(),
                round,
            )
        })
        .collect::<Result<_>>()?;

    let benign_updates: Vec<ClientUpdate> = trained.iter().map(|(u, _)| u.clone()).collect();

    // Assemble the cohort's update multiset in ascending client-id order.
    let final_updates: Vec<ClientUpdate> = if let Some(attack_cfg) = attack {
        let mut cohort: Vec<ClientUpdate> = benign_updates
            .iter()
            .cloned()
            .chain(malicious_ids.iter().map(|&id| ClientUpdate {
                client_id: id,
                delta: state.global_params.zeros_like(),
                num_examples: env.shards[id].example_indices.len(),
            }))
            .collect();
        cohort.sort_by_key(|u| u.client_id);
        apply_attack(&cohort, &benign_updates, attack_cfg, env.defense)?
    } else {
        benign_updates.clone()
    };

    let aggregate = env.defense.aggregate(&final_updates)?;
    let new_global = global_update(&state.global_params, &aggregate, config.server_lr)?;
    let test_accuracy = crate::harness::evaluate(env.arch, &new_global, env.test)?;

    // Term means over the clients that actually trained.
    let (mut loss_m, mut ce_m, mut kdf_m, mut kda_m) = (0.0, 0.0, 0.0, 0.0);
    if !trained.is_empty() {
        let k = trained.len() as f64;
        for (_, s) in &trained {
            loss_m += s.mean_terms.total;
            ce_m += s.mean_terms.ce;
            kdf_m += s.mean_terms.kd_final;
            kda_m += s.mean_terms.kd_aux;
        }
        loss_m /= k;
        ce_m /= k;
        kdf_m /= k;
        kda_m /= k;
    }

    let mut next = state;
    for (update, _) in &trained {
        let mut local = next.global_params.clone();
        local.add_scaled(&update.delta, 1.0)?;
        next.prev_local[update.client_id] = Some(local);
    }
    next.metrics.push(MetricsRecord {
        round,
        test_accuracy,
        mean_train_loss: loss_m,
        mean_ce_term: ce_m,
        mean_kd_final_term: kdf_m,
        mean_kd_aux_term: kda_m,
        attacked: !malicious_ids.is_empty(),
        wall_time_ms: started.elapsed().as_millis() as u64,
    });
    next.global_params = new_global;
    next.round_index = round + 1;
    Ok(next)
}
