//! Top-k gradient sparsification and the sparse/dense decomposition.
//!
//! A compressed update keeps the `k` largest-magnitude coordinates of a
//! gradient; what is dropped is the dense residual. Densifying the sparse
//! part and adding the residual reconstructs the original gradient exactly,
//! which is the identity the tests pin down.
//!
//! Wire format for byte accounting: 4 bytes per retained index plus 8 bytes
//! per retained value; dense gradients cost 8 bytes per coordinate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::batch_from_indices;
use crate::nn::{backward, init_params, GradientVector, ModelSpec, ParamVector};

pub const INDEX_BYTES: u64 = 4;
pub const VALUE_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionKind {
    None,
    TopK,
}

/// What to do to communicated gradients. `ratio` is the fraction of
/// coordinates kept; the retained count is `max(1, floor(ratio * len))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompressionSpec {
    pub kind: CompressionKind,
    pub ratio: f64,
}

impl CompressionSpec {
    pub fn none() -> Self {
        Self {
            kind: CompressionKind::None,
            ratio: 1.0,
        }
    }

    pub fn topk(ratio: f64) -> Result<Self> {
        if !(ratio.is_finite() && ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "compression ratio {ratio} must be in (0, 1]"
            )));
        }
        Ok(Self {
            kind: CompressionKind::TopK,
            ratio,
        })
    }

    /// Retained coordinate count for a gradient of length `len`.
    pub fn retained(&self, len: usize) -> usize {
        ((self.ratio * len as f64).floor() as usize).clamp(1, len)
    }
}

/// A sparsified gradient: strictly increasing indices into the original
/// vector plus the retained values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseUpdate {
    indices: Vec<u32>,
    values: Vec<f64>,
    original_length: usize,
}

impl SparseUpdate {
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Bytes on the wire: index plus value per retained coordinate.
    pub fn payload_bytes(&self) -> u64 {
        self.nnz() as u64 * (INDEX_BYTES + VALUE_BYTES)
    }

    /// Reconstruct the dense vector with zeros in the dropped positions.
    pub fn to_dense(&self) -> GradientVector {
        let mut values = vec![0.0; self.original_length];
        for (&i, &v) in self.indices.iter().zip(self.values.iter()) {
            values[i as usize] = v;
        }
        GradientVector::from_values(values).expect("sparse values are finite")
    }
}

/// Keep the `k` largest-magnitude coordinates; ties break toward the lower
/// index. Indices in the result are strictly increasing.
pub fn topk_compress(grad: &GradientVector, spec: &CompressionSpec) -> Result<SparseUpdate> {
    if grad.is_empty() {
        return Err(Error::InvalidArgument("cannot compress an empty gradient".into()));
    }
    let len = grad.len();
    let k = match spec.kind {
        CompressionKind::None => len,
        CompressionKind::TopK => spec.retained(len),
    };

    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        grad.values()[b]
            .abs()
            .total_cmp(&grad.values()[a].abs())
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();

    Ok(SparseUpdate {
        indices: keep.iter().map(|&i| i as u32).collect(),
        values: keep.iter().map(|&i| grad.values()[i]).collect(),
        original_length: len,
    })
}

/// The dense residual `phi = grad - densify(sparse)`: exactly the dropped
/// coordinates, zero on the retained support.
pub fn decompose(grad: &GradientVector, sparse: &SparseUpdate) -> Result<GradientVector> {
    if sparse.original_length() != grad.len() {
        return Err(Error::DimensionMismatch(format!(
            "sparse update length {} != gradient length {}",
            sparse.original_length(),
            grad.len()
        )));
    }
    let mut residual = grad.values().to_vec();
    for &i in sparse.indices() {
        residual[i as usize] = 0.0;
    }
    GradientVector::from_values(residual)
}

/// One row of the batch-size/compression sweep.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub ratio: f64,
    pub rel_residual_mean: f64,
    pub rel_residual_p50: f64,
}

/// For each batch size, compress gradients taken at a fixed early-training
/// parameter point (freshly initialized from the seed) and report the
/// relative residual `|phi| / |G|` over seeded trials.
pub fn compression_noise_sweep(
    spec: &ModelSpec,
    ds: &Dataset,
    batch_sizes: &[usize],
    ratio: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let params = init_params(spec, seed);
    compression_noise_sweep_at(spec, &params, ds, batch_sizes, ratio, trials, seed)
}

/// Sweep variant at an explicit parameter point. Deterministic per seed.
pub fn compression_noise_sweep_at(
    spec: &ModelSpec,
    params: &ParamVector,
    ds: &Dataset,
    batch_sizes: &[usize],
    ratio: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let cspec = CompressionSpec::topk(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);

    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        if b == 0 || b > ds.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {b} out of range for dataset of {}",
                ds.len()
            )));
        }
        let mut rels = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut idx = rand::seq::index::sample(&mut rng, ds.len(), b).into_vec();
            idx.sort_unstable();
            let batch = batch_from_indices(ds, &idx)?;
            let (_, grad) = backward(spec, params, &batch)?;
            let sparse = topk_compress(&grad, &cspec)?;
            let residual = decompose(&grad, &sparse)?;
            let norm = grad.norm();
            rels.push(if norm == 0.0 {
                0.0
            } else {
                residual.norm() / norm
            });
        }
        rels.sort_by(f64::total_cmp);
        let mean = rels.iter().sum::<f64>() / trials as f64;
        let p50 = if trials % 2 == 1 {
            rels[trials / 2]
        } else {
            0.5 * (rels[trials / 2 - 1] + rels[trials / 2])
        };
        rows.push(SweepRow {
            batch_size: b,
            ratio,
            rel_residual_mean: mean,
            rel_residual_p50: p50,
        });
    }
    Ok(rows)
}

/// Sweep table as CSV: `b,ratio,rel_residual_mean,rel_residual_p50`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("b,ratio,rel_residual_mean,rel_residual_p50\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.batch_size, r.ratio, r.rel_residual_mean, r.rel_residual_p50
        ));
    }
    out
}
