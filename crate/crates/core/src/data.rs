//! Seeded synthetic datasets and client partitioning.
//!
//! Datasets are Gaussian blobs: one seeded unit-norm center per class, scaled
//! by 2.0, with isotropic noise. Partitioning supports the two regimes the
//! simulator compares: an IID round-robin split and a label-skew split where
//! every client holds samples from a fixed number of class labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// An in-memory labeled dataset, features stored row-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() || dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "features {} != samples {} x dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if num_classes == 0 || labels.len() < num_classes {
            return Err(Error::InvalidArgument(
                "need at least one sample per class".into(),
            ));
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            seen[l] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidArgument(
                "every class needs at least one sample".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_row(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.dim..(sample + 1) * self.dim]
    }

    /// Copy the rows at `indices` into flat feature/label buffers, in order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        (features, labels)
    }

    /// Sub-dataset restricted to `indices`.
    fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let (features, labels) = self.gather(indices);
        Dataset::new(features, labels, self.dim, self.num_classes, name)
    }
}

/// How a dataset is split across clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    LabelSkew,
}

/// Partitioning parameters. `labels_per_client` only applies to label skew.
#[derive(Clone, Debug)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub labels_per_client: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(num_clients: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Iid,
            num_clients,
            labels_per_client: 0,
            seed,
        }
    }

    pub fn label_skew(num_clients: usize, labels_per_client: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::LabelSkew,
            num_clients,
            labels_per_client,
            seed,
        }
    }
}

/// Partition a dataset according to the spec, dispatching on the mode.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.mode {
        PartitionMode::Iid => partition_iid(ds, spec.num_clients, spec.seed),
        PartitionMode::LabelSkew => {
            partition_label_skew(ds, spec.num_clients, spec.labels_per_client, spec.seed)
        }
    }
}

/// One client's slice of a dataset, as indices into the parent.
#[derive(Clone, Debug)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gaussian-blob dataset: `num_classes * per_class` samples, class `k`
/// centered on a seeded random direction of norm 2.0 with noise std `spread`.
pub fn make_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument(
            "num_classes, dim and per_class must be positive".into(),
        ));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad spread {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();

    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut c: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in c.iter_mut() {
            *v = *v / norm * 2.0;
        }
        centers.push(c);
    }

    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                features.push(c + spread * unit.sample(&mut rng));
            }
            labels.push(k);
        }
    }
    Dataset::new(features, labels, dim, num_classes, "synthetic")
}

/// Seeded global shuffle followed by a round-robin deal; shard sizes differ
/// by at most one.
pub fn partition_iid(ds: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if num_clients == 0 || num_clients > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples across {num_clients} clients",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);

    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard {
            client_id,
            indices: Vec::with_capacity(ds.len() / num_clients + 1),
        })
        .collect();
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % num_clients].indices.push(idx);
    }
    for shard in shards.iter_mut() {
        shard.indices.sort_unstable();
    }
    Ok(shards)
}

/// Label-skew split: each client is dealt exactly `labels_per_client`
/// distinct labels (all labels covered), then every label's samples are split
/// evenly among the clients owning it.
pub fn partition_label_skew(
    ds: &Dataset,
    num_clients: usize,
    labels_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let k = ds.num_classes();
    if num_clients == 0 || labels_per_client == 0 {
        return Err(Error::InvalidArgument(
            "num_clients and labels_per_client must be positive".into(),
        ));
    }
    if labels_per_client > k {
        return Err(Error::Infeasible(format!(
            "labels_per_client {labels_per_client} exceeds {k} classes"
        )));
    }
    if num_clients * labels_per_client < k {
        return Err(Error::Infeasible(format!(
            "{num_clients} clients x {labels_per_client} labels cannot cover {k} classes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let copies = (num_clients * labels_per_client).div_ceil(k);
    let assignment = deal_labels(&mut rng, k, num_clients, labels_per_client, copies)?;

    // Owners of each label, in ascending client id.
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (client, hand) in assignment.iter().enumerate() {
        for &label in hand {
            owners[label].push(client);
        }
    }

    // Samples of each label, shuffled once, dealt round-robin to owners.
    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard {
            client_id,
            indices: Vec::new(),
        })
        .collect();
    for label in 0..k {
        let mut samples: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == label).collect();
        samples.shuffle(&mut rng);
        for (pos, idx) in samples.into_iter().enumerate() {
            let owner = owners[label][pos % owners[label].len()];
            shards[owner].indices.push(idx);
        }
    }
    for shard in shards.iter_mut() {
        shard.indices.sort_unstable();
    }
    Ok(shards)
}

/// Deal `labels_per_client` distinct labels to each client from `copies`
/// repetitions of the label list, re-dealing until every hand is
/// duplicate-free and all labels are covered.
fn deal_labels(
    rng: &mut ChaCha8Rng,
    num_labels: usize,
    num_clients: usize,
    labels_per_client: usize,
    copies: usize,
) -> Result<Vec<Vec<usize>>> {
    const MAX_DEALS: usize = 10_000;
    for _ in 0..MAX_DEALS {
        let mut deck: Vec<usize> = (0..copies).flat_map(|_| 0..num_labels).collect();
        deck.shuffle(rng);
        let hands: Vec<Vec<usize>> = (0..num_clients)
            .map(|c| {
                let mut hand = deck[c * labels_per_client..(c + 1) * labels_per_client].to_vec();
                hand.sort_unstable();
                hand
            })
            .collect();
        let duplicate_free = hands.iter().all(|h| h.windows(2).all(|w| w[0] != w[1]));
        let mut covered = vec![false; num_labels];
        for hand in &hands {
            for &l in hand {
                covered[l] = true;
            }
        }
        if duplicate_free && covered.iter().all(|&c| c) {
            return Ok(hands);
        }
    }
    Err(Error::Infeasible(
        "could not deal a duplicate-free covering label assignment".into(),
    ))
}

/// Seeded split into train and test; the test set stays global (it is never
/// partitioned across clients).
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} must be in (0,1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stratified by class so small datasets keep every class on both sides.
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for label in 0..ds.num_classes() {
        let mut samples: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == label).collect();
        samples.shuffle(&mut rng);
        let n_test = ((samples.len() as f64 * test_fraction).round() as usize)
            .clamp(1, samples.len() - 1);
        test_idx.extend_from_slice(&samples[..n_test]);
        train_idx.extend_from_slice(&samples[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train = ds.subset(&train_idx, format!("{}-train", ds.name()))?;
    let test = ds.subset(&test_idx, format!("{}-test", ds.name()))?;
    Ok((train, test))
}

/// Import a dataset from CSV with header `f0,...,f{d-1},label`.
/// Non-numeric cells are rejected.
pub fn load_csv(text: &str, name: impl Into<String>) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::Parse(
            "header must be f0,..,f{d-1},label".into(),
        ));
    }
    let dim = cols.len() - 1;
    for (i, col) in cols[..dim].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::Parse(format!(
                "expected column f{i}, found {col}"
            )));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(Error::Parse(format!(
                "row {}: expected {} cells, found {}",
                lineno + 2,
                dim + 1,
                cells.len()
            )));
        }
        for cell in &cells[..dim] {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!("row {}: non-numeric cell {cell:?}", lineno + 2))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "row {}: non-finite cell {cell:?}",
                    lineno + 2
                )));
            }
            features.push(v);
        }
        let label: usize = cells[dim].parse().map_err(|_| {
            Error::Parse(format!(
                "row {}: non-numeric label {:?}",
                lineno + 2,
                cells[dim]
            ))
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse("CSV has no data rows".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(features, labels, dim, num_classes, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn synthetic_counts_per_class() {
        let ds = make_synthetic(10, 8, 100, 0.4, 3).unwrap();
        assert_eq!(ds.len(), 1000);
        for k in 0..10 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == k).count(), 100);
        }
    }

    #[test]
    fn synthetic_zero_spread_collapses_to_centers() {
        let ds = make_synthetic(3, 5, 4, 0.0, 9).unwrap();
        for k in 0..3 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == k).collect();
            let first = ds.feature_row(rows[0]).to_vec();
            for &r in &rows[1..] {
                assert_eq!(ds.feature_row(r), &first[..]);
            }
            let norm: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(4, 6, 10, 0.5, 11).unwrap();
        let b = make_synthetic(4, 6, 10, 0.5, 11).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn tight_blobs_are_near_separable() {
        // a logistic model fits the spread-0.3 blobs almost perfectly in a
        // couple hundred synchronous steps
        use crate::fed::{run_federated, SyncPolicy, TrainConfig};
        use crate::nn::{Activation, ModelSpec};

        let ds = make_synthetic(10, 32, 60, 0.3, 5).unwrap();
        let shards = partition_iid(&ds, 1, 6).unwrap();
        let spec = ModelSpec::new(vec![32, 10], Activation::Relu, 8).unwrap();
        let cfg = TrainConfig::new(0.5, 64, 200, 200, 5);
        // evaluating on the training set gives train accuracy
        let run = run_federated(&spec, &ds, &shards, &ds, &SyncPolicy::bsp(), &cfg).unwrap();
        let acc = run.log.summary().final_test_accuracy;
        assert!(acc > 0.9, "train accuracy {acc}");
    }

    fn assert_partition(ds: &Dataset, shards: &[ClientShard], expect_total: usize) {
        let mut seen = HashSet::new();
        let mut total = 0;
        for shard in shards {
            assert!(!shard.is_empty());
            for &i in &shard.indices {
                assert!(i < ds.len());
                assert!(seen.insert(i), "index {i} appears twice");
            }
            total += shard.len();
        }
        assert_eq!(total, expect_total);
    }

    #[test]
    fn iid_shard_sizes_exact_when_divisible() {
        let ds = make_synthetic(10, 4, 100, 0.3, 5).unwrap();
        let shards = partition_iid(&ds, 10, 42).unwrap();
        assert_partition(&ds, &shards, 1000);
        for shard in &shards {
            assert_eq!(shard.len(), 100);
        }
    }

    #[test]
    fn iid_shard_sizes_differ_by_at_most_one() {
        let ds = make_synthetic(3, 4, 34, 0.3, 5).unwrap(); // n = 102
        let shards = partition_iid(&ds, 7, 1).unwrap();
        assert_partition(&ds, &shards, 102);
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn iid_histograms_stay_near_global_proportions() {
        let ds = make_synthetic(10, 4, 100, 0.3, 5).unwrap();
        let shards = partition_iid(&ds, 10, 42).unwrap();
        // global proportion is 10% per class; allow 10 percentage points
        for shard in &shards {
            let mut counts = [0usize; 10];
            for &i in &shard.indices {
                counts[ds.labels()[i]] += 1;
            }
            for &c in &counts {
                let pct = 100.0 * c as f64 / shard.len() as f64;
                assert!((pct - 10.0).abs() <= 10.0, "class share {pct}%");
            }
        }
    }

    #[test]
    fn iid_rejects_more_clients_than_samples() {
        let ds = make_synthetic(2, 3, 2, 0.3, 5).unwrap();
        assert!(partition_iid(&ds, 5, 0).is_err());
    }

    #[test]
    fn label_skew_one_label_per_client() {
        let ds = make_synthetic(10, 4, 100, 0.3, 5).unwrap();
        let shards = partition_label_skew(&ds, 10, 1, 7).unwrap();
        assert_partition(&ds, &shards, 1000);
        let mut covered = HashSet::new();
        for shard in &shards {
            let labels: HashSet<usize> = shard.indices.iter().map(|&i| ds.labels()[i]).collect();
            assert_eq!(labels.len(), 1);
            covered.extend(labels);
        }
        assert_eq!(covered.len(), 10);
    }

    #[test]
    fn label_skew_full_support_degenerates_to_all_labels() {
        let ds = make_synthetic(5, 4, 20, 0.3, 5).unwrap();
        let shards = partition_label_skew(&ds, 4, 5, 13).unwrap();
        assert_partition(&ds, &shards, 100);
        for shard in &shards {
            let labels: HashSet<usize> = shard.indices.iter().map(|&i| ds.labels()[i]).collect();
            assert_eq!(labels.len(), 5);
        }
    }

    #[test]
    fn label_skew_two_labels_five_clients() {
        // 10 classes, C=5, lpc=2: each label owned by exactly one client,
        // so every shard has exactly 2*per_class samples.
        let ds = make_synthetic(10, 4, 30, 0.3, 5).unwrap();
        let shards = partition_label_skew(&ds, 5, 2, 3).unwrap();
        assert_partition(&ds, &shards, 300);
        for shard in &shards {
            assert_eq!(shard.len(), 60);
            let labels: HashSet<usize> = shard.indices.iter().map(|&i| ds.labels()[i]).collect();
            assert_eq!(labels.len(), 2);
        }
    }

    #[test]
    fn label_skew_support_is_exact_across_seeds() {
        let ds = make_synthetic(6, 4, 12, 0.3, 5).unwrap();
        for seed in 0..20 {
            let shards = partition_label_skew(&ds, 4, 3, seed).unwrap();
            for shard in &shards {
                let labels: HashSet<usize> =
                    shard.indices.iter().map(|&i| ds.labels()[i]).collect();
                assert_eq!(labels.len(), 3, "seed {seed}");
            }
        }
    }

    #[test]
    fn label_skew_rejects_infeasible_coverage() {
        let ds = make_synthetic(10, 4, 10, 0.3, 5).unwrap();
        assert!(partition_label_skew(&ds, 3, 2, 0).is_err());
        assert!(partition_label_skew(&ds, 4, 11, 0).is_err());
    }

    #[test]
    fn partition_dispatches_on_mode() {
        let ds = make_synthetic(4, 3, 20, 0.3, 5).unwrap();
        let iid = partition(&ds, &PartitionSpec::iid(4, 9)).unwrap();
        let direct = partition_iid(&ds, 4, 9).unwrap();
        for (a, b) in iid.iter().zip(direct.iter()) {
            assert_eq!(a.indices, b.indices);
        }
        let skew = partition(&ds, &PartitionSpec::label_skew(2, 2, 9)).unwrap();
        let direct = partition_label_skew(&ds, 2, 2, 9).unwrap();
        for (a, b) in skew.iter().zip(direct.iter()) {
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn partitions_are_deterministic() {
        let ds = make_synthetic(6, 4, 20, 0.3, 5).unwrap();
        let a = partition_label_skew(&ds, 4, 2, 99).unwrap();
        let b = partition_label_skew(&ds, 4, 2, 99).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.indices, y.indices);
        }
        let c = partition_iid(&ds, 5, 123).unwrap();
        let d = partition_iid(&ds, 5, 123).unwrap();
        for (x, y) in c.iter().zip(d.iter()) {
            assert_eq!(x.indices, y.indices);
        }
    }

    #[test]
    fn train_test_split_is_global_and_stratified() {
        let ds = make_synthetic(5, 4, 50, 0.3, 5).unwrap();
        let (train, test) = train_test_split(&ds, 0.2, 8).unwrap();
        assert_eq!(train.len() + test.len(), 250);
        assert_eq!(test.len(), 50);
        for k in 0..5 {
            assert!(test.labels().contains(&k));
            assert!(train.labels().contains(&k));
        }
    }

    #[test]
    fn csv_round_trip_and_rejection() {
        let text = "f0,f1,label\n0.5,1.25,0\n-1.0,2.0,1\n0.25,0.0,0\n3.5,-2.0,1\n";
        let ds = load_csv(text, "tiny").unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.feature_row(1), &[-1.0, 2.0]);

        assert!(load_csv("f0,f1,label\nx,1.0,0\n", "bad").is_err());
        assert!(load_csv("f0,f1\n1.0,2.0\n", "bad").is_err());
        assert!(load_csv("f0,f1,label\n1.0,2.0\n", "bad").is_err());
    }
}
