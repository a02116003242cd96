//! Federated execution engine.
//!
//! Clients run local SGD over their shards and periodically synchronize.
//! Two aggregation payloads are supported:
//!
//! - `Parameters`: FedAvg proper. Every client keeps its own model for
//!   `H` local steps, then the server averages the parameter vectors.
//! - `Gradients`: the BSP implementation. `H` is fixed to 1 and the server
//!   averages the per-client gradients each step, which is how synchronous
//!   training at the global batch `C * b` is realized.
//!
//! Everything is deterministic for a fixed seed: client batch streams come
//! from per-client seeded shuffles, aggregation reduces in a canonical
//! order, and the metrics log contains no wall-clock values. Clients are
//! stepped sequentially; the reduction order would make a parallel run
//! bit-identical anyway.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compress::{topk_compress, CompressionKind, CompressionSpec, VALUE_BYTES};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::gradscale::{factor_histogram, step_mapper, FactorCount, MapperStep, StepPolicy};
use crate::nn::{
    backward, init_params, predict, sgd_step, Batch, GradientVector, ModelSpec, ParamVector,
};

/// Aggregation payload exchanged at sync points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationPayload {
    Parameters,
    Gradients,
}

/// Communication policy: sync period `H` plus the payload kind.
/// `H = 1` with gradient payload is BSP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SyncPolicy {
    period: usize,
    payload: AggregationPayload,
}

impl SyncPolicy {
    pub fn new(period: usize, payload: AggregationPayload) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidArgument("sync period must be >= 1".into()));
        }
        if payload == AggregationPayload::Gradients && period != 1 {
            return Err(Error::InvalidArgument(
                "gradient aggregation is per-step; use period 1".into(),
            ));
        }
        Ok(Self { period, payload })
    }

    /// Synchronous gradient aggregation every iteration.
    pub fn bsp() -> Self {
        Self {
            period: 1,
            payload: AggregationPayload::Gradients,
        }
    }

    /// Parameter averaging every `period` local steps.
    pub fn fedavg(period: usize) -> Result<Self> {
        Self::new(period, AggregationPayload::Parameters)
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn payload(&self) -> AggregationPayload {
        self.payload
    }

    /// Short label used in reports.
    pub fn mode_tag(&self) -> String {
        match self.payload {
            AggregationPayload::Gradients => "bsp".to_string(),
            AggregationPayload::Parameters => format!("fedavg_h{}", self.period),
        }
    }
}

/// Training hyperparameters for one federated run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub local_batch: usize,
    pub total_iterations: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub step_policy: Option<StepPolicy>,
    pub compression: Option<CompressionSpec>,
}

impl TrainConfig {
    pub fn new(lr: f64, local_batch: usize, total_iterations: usize, eval_every: usize, seed: u64) -> Self {
        Self {
            lr,
            local_batch,
            total_iterations,
            eval_every,
            seed,
            step_policy: None,
            compression: None,
        }
    }
}

/// One logged iteration. `test_accuracy` is present at eval points only;
/// `delta` is absent on the first iteration (no predecessor norm).
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub test_accuracy: Option<f64>,
    pub grad_norm_sq: f64,
    pub delta: Option<f64>,
    pub scale_factor: f64,
    pub bytes_communicated: u64,
}

/// End-of-run aggregate view.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub sync_period: usize,
    pub clients: usize,
    pub local_batch: usize,
    /// Global batch per aggregation: the sum of client batch sizes.
    pub global_batch: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_test_accuracy: f64,
    pub total_bytes_communicated: u64,
    pub factor_counts: Vec<FactorCount>,
    pub notes: Vec<String>,
}

/// A finished federated run: the trained global model plus its metrics log.
#[derive(Clone, Debug)]
pub struct FederatedRun {
    pub final_params: ParamVector,
    pub log: MetricsLog,
}

/// Per-iteration records plus the run summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    records: Vec<IterationRecord>,
    summary: RunSummary,
}

impl MetricsLog {
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    pub fn summary_mut(&mut self) -> &mut RunSummary {
        &mut self.summary
    }

    /// The per-iteration scale-factor column.
    pub fn scale_factors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.scale_factor).collect()
    }

    /// Histogram of the logged scale factors; counts sum to the iteration
    /// count.
    pub fn factor_histogram(&self) -> Result<Vec<FactorCount>> {
        factor_histogram(&self.scale_factors())
    }

    /// CSV with columns `iter,loss,test_acc,grad_norm_sq,delta,scale_factor,bytes_comm`.
    /// Optional cells are empty; an infinite delta prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,test_acc,grad_norm_sq,delta,scale_factor,bytes_comm\n");
        for r in &self.records {
            let acc = r.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let delta = r.delta.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration, r.loss, acc, r.grad_norm_sq, delta, r.scale_factor, r.bytes_communicated
            ));
        }
        out
    }
}

/// Stable seed derivation for per-client (and other tagged) RNG streams.
/// SplitMix64 finalizer over the combined value.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Without-replacement batch stream over one shard: seeded shuffle, batches
/// dealt in order, reshuffled every epoch. The remainder smaller than one
/// batch is dropped. Batches are returned in canonical ascending index
/// order, so a batch's gradient depends only on its composition.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    indices: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(shard_indices: &[usize], batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > shard_indices.len() {
            return Err(Error::InvalidArgument(format!(
                "batch {batch} out of range for shard of {}",
                shard_indices.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = shard_indices.to_vec();
        indices.shuffle(&mut rng);
        Ok(Self {
            indices,
            batch,
            pos: 0,
            rng,
        })
    }

    /// Batches per epoch: `floor(shard / batch)`.
    pub fn epoch_length(&self) -> usize {
        self.indices.len() / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let mut out = self.indices[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out.sort_unstable();
        out
    }
}

/// Assemble a [`Batch`] by copying the dataset rows at `indices`.
pub fn batch_from_indices(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
    let (features, labels) = ds.gather(indices);
    Batch::new(features, labels, ds.dim())
}

/// `local_steps` successive SGD steps on batches drawn from the sampler,
/// returning the updated parameters. This is the plain local-round update;
/// the engine adds scaling and logging around the same per-step core.
pub fn local_round(
    spec: &ModelSpec,
    params: &ParamVector,
    ds: &Dataset,
    sampler: &mut BatchSampler,
    lr: f64,
    local_steps: usize,
) -> Result<ParamVector> {
    if local_steps == 0 {
        return Err(Error::InvalidArgument("local_steps must be >= 1".into()));
    }
    let mut p = params.clone();
    for _ in 0..local_steps {
        let idx = sampler.next_batch();
        let batch = batch_from_indices(ds, &idx)?;
        let (_, grad) = backward(spec, &p, &batch)?;
        p = sgd_step(&p, &grad, lr)?;
    }
    Ok(p)
}

/// Per-coordinate weighted mean with the addends sorted into a canonical
/// order before summation, which makes the result independent of the order
/// the inputs arrive in.
fn columnwise_mean(rows: &[&[f64]], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let len = rows[0].len();
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::DimensionMismatch(
            "client vectors have different lengths".into(),
        ));
    }
    let weight_sum = match weights {
        Some(w) => {
            if w.len() != rows.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} weights for {} vectors",
                    w.len(),
                    rows.len()
                )));
            }
            if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(Error::InvalidArgument(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            let s: f64 = w.iter().sum();
            if s <= 0.0 {
                return Err(Error::InvalidArgument("weights sum to zero".into()));
            }
            s
        }
        None => rows.len() as f64,
    };

    let mut terms = vec![0.0; rows.len()];
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        for (t, row) in terms.iter_mut().zip(rows.iter()) {
            *t = row[j];
        }
        if let Some(w) = weights {
            for (t, &wc) in terms.iter_mut().zip(w.iter()) {
                *t *= wc;
            }
        }
        terms.sort_by(f64::total_cmp);
        out.push(terms.iter().sum::<f64>() / weight_sum);
    }
    Ok(out)
}

/// Elementwise mean of the client parameter vectors. The summation order is
/// canonical, so any permutation of the inputs gives a bit-identical result.
pub fn aggregate_average(client_params: &[ParamVector]) -> Result<ParamVector> {
    let rows: Vec<&[f64]> = client_params.iter().map(|p| p.values()).collect();
    ParamVector::from_values(columnwise_mean(&rows, None)?)
}

/// Weighted mean `sum(w_c * p_c) / sum(w_c)`; weights default to shard
/// sample counts when aggregating over unequal data volumes.
pub fn weighted_aggregate(client_params: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let rows: Vec<&[f64]> = client_params.iter().map(|p| p.values()).collect();
    ParamVector::from_values(columnwise_mean(&rows, Some(weights))?)
}

/// Sync period equal to "one training epoch" for aggregate-per-epoch runs.
/// Shard sizes may differ, in which case epoch length differs per client;
/// the longest client epoch (in whole batches) is used.
pub fn epoch_sync_period(shards: &[ClientShard], local_batch: usize) -> usize {
    shards
        .iter()
        .map(|s| s.len() / local_batch)
        .max()
        .unwrap_or(1)
        .max(1)
}

/// Fraction of test samples classified correctly.
pub fn test_accuracy(spec: &ModelSpec, params: &ParamVector, test: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..test.len()).collect();
    let batch = batch_from_indices(test, &all)?;
    accuracy_on_batch(spec, params, &batch, test.labels())
}

fn accuracy_on_batch(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    labels: &[usize],
) -> Result<f64> {
    let preds = predict(spec, params, batch)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Run the federated simulation, returning the trained global model and the
/// full metrics log.
///
/// Per iteration, every client draws one batch and computes its gradient;
/// the step policy (identity when unset) maps it per client. With gradient
/// payload the mapped (and optionally top-k compressed) gradients are
/// averaged into one global step; with parameter payload each client steps
/// locally and parameter vectors are averaged every `H` iterations.
///
/// The logged gradient norm, delta and scale factor are client 0's stream.
/// Test accuracy is evaluated on the global model every `eval_every`
/// iterations and at the final iteration.
pub fn run_federated(
    spec: &ModelSpec,
    train: &Dataset,
    shards: &[ClientShard],
    test: &Dataset,
    sync: &SyncPolicy,
    cfg: &TrainConfig,
) -> Result<FederatedRun> {
    if shards.is_empty() {
        return Err(Error::InvalidArgument("no client shards".into()));
    }
    if cfg.total_iterations == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument(
            "total_iterations and eval_every must be >= 1".into(),
        ));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::InvalidArgument(format!("bad learning rate {}", cfg.lr)));
    }
    if let Some(min_shard) = shards.iter().map(|s| s.len()).min() {
        if cfg.local_batch == 0 || cfg.local_batch > min_shard {
            return Err(Error::InvalidArgument(format!(
                "local batch {} exceeds smallest shard {min_shard}",
                cfg.local_batch
            )));
        }
    }
    let compressing = matches!(
        cfg.compression,
        Some(CompressionSpec {
            kind: CompressionKind::TopK,
            ..
        })
    );
    if compressing && sync.payload() != AggregationPayload::Gradients {
        return Err(Error::InvalidArgument(
            "compression applies to communicated gradients; use gradient aggregation".into(),
        ));
    }

    let clients = shards.len();
    let policy = cfg.step_policy.unwrap_or_else(StepPolicy::identity);
    let mut mappers: Vec<_> = (0..clients).map(|_| step_mapper(policy)).collect();
    let mut samplers = shards
        .iter()
        .map(|s| {
            BatchSampler::new(
                &s.indices,
                cfg.local_batch,
                derive_seed(cfg.seed, s.client_id as u64 + 1),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut global = init_params(spec, cfg.seed);
    let mut client_params = vec![global.clone(); clients];
    let dense_payload = (global.len() as u64) * VALUE_BYTES;

    let test_indices: Vec<usize> = (0..test.len()).collect();
    let test_batch = batch_from_indices(test, &test_indices)?;

    let mut records = Vec::with_capacity(cfg.total_iterations);
    let mut total_bytes = 0u64;
    let mut final_accuracy = 0.0;

    for i in 0..cfg.total_iterations {
        let mut loss_sum = 0.0;
        let mut steps: Vec<MapperStep> = Vec::with_capacity(clients);
        let mut bytes_this_iter = 0u64;
        let mut synced = false;

        match sync.payload() {
            AggregationPayload::Gradients => {
                for (c, sampler) in samplers.iter_mut().enumerate() {
                    let idx = sampler.next_batch();
                    let batch = batch_from_indices(train, &idx)?;
                    let (loss, grad) = backward(spec, &global, &batch)?;
                    loss_sum += loss;
                    steps.push(mappers[c].step(&grad)?);
                }
                let mean = if compressing {
                    let cspec = cfg.compression.unwrap();
                    let mut dense = Vec::with_capacity(clients);
                    for step in &steps {
                        let sparse = topk_compress(&step.grad, &cspec)?;
                        bytes_this_iter += sparse.payload_bytes();
                        dense.push(sparse.to_dense());
                    }
                    let rows: Vec<&[f64]> = dense.iter().map(|g| g.values()).collect();
                    columnwise_mean(&rows, None)?
                } else {
                    bytes_this_iter += clients as u64 * dense_payload;
                    let rows: Vec<&[f64]> = steps.iter().map(|s| s.grad.values()).collect();
                    columnwise_mean(&rows, None)?
                };
                global = sgd_step(&global, &GradientVector::from_values(mean)?, cfg.lr)?;
                synced = true;
            }
            AggregationPayload::Parameters => {
                for (c, sampler) in samplers.iter_mut().enumerate() {
                    let idx = sampler.next_batch();
                    let batch = batch_from_indices(train, &idx)?;
                    let (loss, grad) = backward(spec, &client_params[c], &batch)?;
                    loss_sum += loss;
                    let step = mappers[c].step(&grad)?;
                    client_params[c] = sgd_step(&client_params[c], &step.grad, cfg.lr)?;
                    steps.push(step);
                }
                if (i + 1) % sync.period() == 0 {
                    global = aggregate_average(&client_params)?;
                    for cp in client_params.iter_mut() {
                        *cp = global.clone();
                    }
                    bytes_this_iter += clients as u64 * dense_payload;
                    synced = true;
                }
            }
        }
        total_bytes += bytes_this_iter;

        let test_acc = if (i + 1) % cfg.eval_every == 0 || i + 1 == cfg.total_iterations {
            let eval_params = if synced || sync.payload() == AggregationPayload::Gradients {
                global.clone()
            } else {
                // mid-round: evaluate the virtual global model
                aggregate_average(&client_params)?
            };
            let acc = accuracy_on_batch(spec, &eval_params, &test_batch, test.labels())?;
            final_accuracy = acc;
            Some(acc)
        } else {
            None
        };

        records.push(IterationRecord {
            iteration: i,
            loss: loss_sum / clients as f64,
            test_accuracy: test_acc,
            grad_norm_sq: steps[0].raw_norm_sq,
            delta: steps[0].delta,
            scale_factor: steps[0].factor,
            bytes_communicated: bytes_this_iter,
        });
    }

    let factor_counts = factor_histogram(&records.iter().map(|r| r.scale_factor).collect::<Vec<_>>())?;
    let summary = RunSummary {
        mode: sync.mode_tag(),
        sync_period: sync.period(),
        clients,
        local_batch: cfg.local_batch,
        global_batch: clients * cfg.local_batch,
        iterations: cfg.total_iterations,
        final_loss: records.last().unwrap().loss,
        final_test_accuracy: final_accuracy,
        total_bytes_communicated: total_bytes,
        factor_counts,
        notes: Vec::new(),
    };
    // If the run ended mid-round in parameter mode, the reported model is
    // the virtual global (the same one the final evaluation used).
    let final_params = if sync.payload() == AggregationPayload::Parameters
        && !cfg.total_iterations.is_multiple_of(sync.period())
    {
        aggregate_average(&client_params)?
    } else {
        global
    };
    Ok(FederatedRun {
        final_params,
        log: MetricsLog { records, summary },
    })
}
