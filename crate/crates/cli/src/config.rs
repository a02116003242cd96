//! TOML experiment configuration.
//!
//! Every config is schema-checked on load: unknown keys are rejected and
//! missing required fields fail with the offending path in the message.
//! Seeds are listed explicitly, so an experiment is always a fixed set of
//! runs.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use fedbatch::compress::CompressionSpec;
use fedbatch::data::{make_synthetic, train_test_split, ClientShard, Dataset, PartitionSpec};
use fedbatch::fed::{epoch_sync_period, AggregationPayload, SyncPolicy, TrainConfig};
use fedbatch::gradscale::StepPolicy;
use fedbatch::nn::{Activation, ModelSpec};

use crate::CliError;

/// Top-level config for `fedbatch train`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub runs: Vec<RunSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionModeSection,
    pub clients: usize,
    pub labels_per_client: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PartitionModeSection {
    Iid,
    LabelSkew,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: ActivationSection,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: usize,
}

fn default_activation() -> ActivationSection {
    ActivationSection::Relu
}

fn default_bytes_per_element() -> usize {
    8
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSection {
    Relu,
    Tanh,
}

impl From<ActivationSection> for Activation {
    fn from(a: ActivationSection) -> Self {
        match a {
            ActivationSection::Relu => Activation::Relu,
            ActivationSection::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub local_batch: usize,
    pub total_iterations: usize,
    pub eval_every: usize,
}

/// One run variant; optional fields fall back to the `[train]` section.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub payload: PayloadSection,
    pub sync_period: SyncPeriodSection,
    pub lr: Option<f64>,
    pub local_batch: Option<usize>,
    pub total_iterations: Option<usize>,
    pub step_policy: Option<StepPolicySection>,
    pub compression: Option<CompressionSection>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PayloadSection {
    Parameters,
    Gradients,
}

/// Either a whole number of local steps or `"epoch"` (the longest client
/// epoch, in whole batches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncPeriodSection {
    Steps(usize),
    Epoch,
}

impl<'de> Deserialize<'de> for SyncPeriodSection {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(usize),
            Word(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Steps(n) => Ok(SyncPeriodSection::Steps(n)),
            Raw::Word(w) if w == "epoch" => Ok(SyncPeriodSection::Epoch),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "sync_period must be a positive integer or \"epoch\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPolicySection {
    pub x: f64,
    pub threshold: f64,
    pub warmup_iters: Option<usize>,
    #[serde(default)]
    pub invert_branches: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSection {
    pub kind: CompressionKindSection,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_ratio() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CompressionKindSection {
    None,
    Topk,
}

/// Config for `profile`, `plan`, `sweep-compression` and `estimate-noise`:
/// a model plus the synthetic dataset it runs over, and the per-command
/// extras.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub sweep: Option<SweepSection>,
    pub noise: Option<NoiseSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub batch_sizes: Vec<usize>,
    pub ratio: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub b_small: Vec<usize>,
    pub b_large: usize,
    pub trials: usize,
    pub seed: u64,
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be non-empty".into()));
        }
        if self.runs.is_empty() {
            return Err(CliError::Config("at least one [[runs]] entry required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for run in &self.runs {
            if !names.insert(&run.name) {
                return Err(CliError::Config(format!("duplicate run name {:?}", run.name)));
            }
            if run.payload == PayloadSection::Gradients
                && run.sync_period != SyncPeriodSection::Steps(1)
            {
                return Err(CliError::Config(format!(
                    "run {:?}: gradient payload requires sync_period = 1",
                    run.name
                )));
            }
            if let SyncPeriodSection::Steps(0) = run.sync_period {
                return Err(CliError::Config(format!(
                    "run {:?}: sync_period must be >= 1",
                    run.name
                )));
            }
        }
        if self.partition.mode == PartitionModeSection::LabelSkew
            && self.partition.labels_per_client.is_none()
        {
            return Err(CliError::Config(
                "label_skew partition requires labels_per_client".into(),
            ));
        }
        Ok(())
    }
}

impl ModelSection {
    pub fn build(&self, dim: usize, classes: usize) -> Result<ModelSpec, CliError> {
        let mut widths = vec![dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(classes);
        ModelSpec::new(widths, self.activation.into(), self.bytes_per_element)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Materialized per-seed task: train/test split plus the client shards.
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
}

/// Build the seeded task for one run seed. The dataset, split and partition
/// seeds are all offset by the run seed, so each seed is an independent
/// instance of the same task family.
pub fn build_task(
    dataset: &DatasetSection,
    partition: &PartitionSection,
    run_seed: u64,
) -> Result<Task, CliError> {
    let ds = make_synthetic(
        dataset.classes,
        dataset.dim,
        dataset.per_class,
        dataset.spread,
        dataset.seed + run_seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let (train, test) = train_test_split(&ds, dataset.test_fraction, dataset.seed + 100 + run_seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let pspec = match partition.mode {
        PartitionModeSection::Iid => {
            PartitionSpec::iid(partition.clients, partition.seed + run_seed)
        }
        PartitionModeSection::LabelSkew => PartitionSpec::label_skew(
            partition.clients,
            partition.labels_per_client.unwrap_or(0),
            partition.seed + run_seed,
        ),
    };
    let shards =
        fedbatch::data::partition(&train, &pspec).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Task { train, test, shards })
}

/// Resolve one run variant into the engine's sync policy and train config.
/// Returns an extra note when the `"epoch"` period was derived from unequal
/// shard sizes.
pub fn build_run(
    run: &RunSection,
    train: &TrainSection,
    shards: &[ClientShard],
    run_seed: u64,
) -> Result<(SyncPolicy, TrainConfig, Vec<String>), CliError> {
    let local_batch = run.local_batch.unwrap_or(train.local_batch);
    let mut notes = Vec::new();
    let period = match run.sync_period {
        SyncPeriodSection::Steps(n) => n,
        SyncPeriodSection::Epoch => {
            let p = epoch_sync_period(shards, local_batch);
            let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
            let (min, max) = (
                *sizes.iter().min().unwrap_or(&0),
                *sizes.iter().max().unwrap_or(&0),
            );
            if min != max {
                notes.push(format!(
                    "sync_period \"epoch\" resolved to H={p} from the longest client epoch; shard sizes range {min}..{max}"
                ));
            }
            p
        }
    };
    let payload = match run.payload {
        PayloadSection::Parameters => AggregationPayload::Parameters,
        PayloadSection::Gradients => AggregationPayload::Gradients,
    };
    let sync = SyncPolicy::new(period, payload).map_err(|e| CliError::Config(e.to_string()))?;

    let mut cfg = TrainConfig::new(
        run.lr.unwrap_or(train.lr),
        local_batch,
        run.total_iterations.unwrap_or(train.total_iterations),
        train.eval_every,
        run_seed,
    );
    if let Some(sp) = &run.step_policy {
        let mut policy = StepPolicy::new(sp.x, sp.threshold)
            .map_err(|e| CliError::Config(e.to_string()))?
            .with_inverted_branches(sp.invert_branches);
        if let Some(w) = sp.warmup_iters {
            policy = policy.with_warmup(w);
        }
        cfg.step_policy = Some(policy);
    }
    if let Some(cs) = &run.compression {
        cfg.compression = Some(match cs.kind {
            CompressionKindSection::None => CompressionSpec::none(),
            CompressionKindSection::Topk => CompressionSpec::topk(cs.ratio)
                .map_err(|e| CliError::Config(e.to_string()))?,
        });
    }
    Ok((sync, cfg, notes))
}
