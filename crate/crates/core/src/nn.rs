//! Minimal dense-network core.
//!
//! A plain MLP with softmax cross-entropy loss, trained in double precision.
//! The API is deliberately small: deterministic initialization, batch forward
//! loss, exact mean-gradient backprop, and the SGD step. There is no autograd;
//! gradients are derived by hand and checked against finite differences in the
//! test suite.
//!
//! Parameter layout is a single flat vector: for each consecutive layer pair
//! `(w_in, w_out)`, the weight matrix in row-major `[out][in]` order followed
//! by the `w_out` biases. The forward pass stores per-layer activations for
//! the whole batch (the way training frameworks do), which is what makes the
//! activation-memory model in [`crate::perf`] measurable against reality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear logits
/// feeding softmax cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture description: layer widths from input dim to class count.
///
/// The loss is fixed: softmax cross-entropy over the final layer's logits.
/// `bytes_per_element` is only used by the memory model (the trainer itself
/// always runs in f64); profiled single-precision workloads set it to 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
    bytes_per_element: usize,
}

impl ModelSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        bytes_per_element: usize,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "model needs at least an input and an output width".into(),
            ));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        if bytes_per_element == 0 {
            return Err(Error::InvalidArgument(
                "bytes_per_element must be positive".into(),
            ));
        }
        Ok(Self {
            layer_widths,
            activation,
            bytes_per_element,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bytes_per_element(&self) -> usize {
        self.bytes_per_element
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of weight layers (consecutive width pairs).
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total parameters: sum of `w_in * w_out + w_out` over layer pairs.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat parameter vector; length always equals the owning spec's
/// `param_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite parameter value {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Flat gradient vector, same layout as [`ParamVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite gradient value {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Squared Euclidean norm, the quantity tracked per iteration.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// A sampled mini-batch: `b` feature rows plus class labels.
#[derive(Clone, Debug)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must be non-empty".into()));
        }
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch(format!(
                "batch features {} != size {} x dim {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_row(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.input_dim..(sample + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Bytes held by the batch buffers (features plus labels).
    pub fn memory_bytes(&self) -> u64 {
        (self.features.len() * std::mem::size_of::<f64>()
            + self.labels.len() * std::mem::size_of::<usize>()) as u64
    }
}

/// Deterministic initialization: weights from a normal with std
/// `1/sqrt(fan_in)`, biases exactly zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for pair in spec.layer_widths().windows(2) {
        let (w_in, w_out) = (pair[0], pair[1]);
        let normal = Normal::new(0.0, 1.0 / (w_in as f64).sqrt()).unwrap();
        for _ in 0..w_in * w_out {
            values.push(normal.sample(&mut rng));
        }
        values.extend(std::iter::repeat_n(0.0, w_out));
    }
    ParamVector { values }
}

/// Per-layer activations for a whole batch. `layers[l]` holds `b x width`
/// post-activation values (raw logits for the final layer).
struct Workspace {
    layers: Vec<Vec<f64>>,
}

impl Workspace {
    fn allocated_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|m| (m.len() * std::mem::size_of::<f64>()) as u64)
            .sum()
    }
}

fn check_shapes(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "params length {} != spec param count {}",
            params.len(),
            spec.param_count()
        )));
    }
    if batch.input_dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch dim {} != model input dim {}",
            batch.input_dim(),
            spec.input_dim()
        )));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&l| l >= spec.num_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes()
        )));
    }
    Ok(())
}

/// Forward pass for the whole batch, storing every layer's activations.
fn forward_batch(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Workspace {
    let widths = spec.layer_widths();
    let b = batch.size();
    let mut layers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_layers());
    let mut offset = 0;
    for (l, pair) in widths.windows(2).enumerate() {
        let (w_in, w_out) = (pair[0], pair[1]);
        let weights = &params.values[offset..offset + w_in * w_out];
        let biases = &params.values[offset + w_in * w_out..offset + w_in * w_out + w_out];
        offset += w_in * w_out + w_out;

        let mut out = vec![0.0; b * w_out];
        let last = l + 1 == spec.num_layers();
        for s in 0..b {
            let input: &[f64] = if l == 0 {
                batch.feature_row(s)
            } else {
                &layers[l - 1][s * w_in..(s + 1) * w_in]
            };
            let row = &mut out[s * w_out..(s + 1) * w_out];
            for (j, r) in row.iter_mut().enumerate() {
                let mut z = biases[j];
                let wrow = &weights[j * w_in..(j + 1) * w_in];
                for (w, x) in wrow.iter().zip(input.iter()) {
                    z += w * x;
                }
                *r = if last { z } else { spec.activation().apply(z) };
            }
        }
        layers.push(out);
    }
    Workspace { layers }
}

/// Softmax probabilities of one logit row, with max subtraction.
fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits.iter()) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn mean_loss(spec: &ModelSpec, ws: &Workspace, batch: &Batch) -> f64 {
    let k = spec.num_classes();
    let logits = ws.layers.last().unwrap();
    let mut total = 0.0;
    for (s, &label) in batch.labels().iter().enumerate() {
        let row = &logits[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / batch.size() as f64
}

/// Mean softmax cross-entropy of the batch.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_shapes(spec, params, batch)?;
    let ws = forward_batch(spec, params, batch);
    Ok(mean_loss(spec, &ws, batch))
}

/// Loss plus the exact mean gradient `(1/b) * sum of per-sample gradients`.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    check_shapes(spec, params, batch)?;
    let ws = forward_batch(spec, params, batch);
    let loss = mean_loss(spec, &ws, batch);

    let widths = spec.layer_widths();
    let b = batch.size();
    let k = spec.num_classes();
    let num_layers = spec.num_layers();
    let max_width = *widths.iter().max().unwrap();

    let mut grad = vec![0.0; params.len()];
    // Layer offsets into the flat vector, computed once.
    let mut offsets = Vec::with_capacity(num_layers);
    let mut off = 0;
    for pair in widths.windows(2) {
        offsets.push(off);
        off += pair[0] * pair[1] + pair[1];
    }

    // Backprop sample by sample with small width-sized delta buffers; the
    // batch-wide activations above are the only O(b) storage.
    let mut delta = vec![0.0; max_width];
    let mut delta_prev = vec![0.0; max_width];
    for s in 0..b {
        let logits = &ws.layers[num_layers - 1][s * k..(s + 1) * k];
        softmax_row(logits, &mut delta[..k]);
        delta[batch.labels()[s]] -= 1.0;

        for l in (0..num_layers).rev() {
            let (w_in, w_out) = (widths[l], widths[l + 1]);
            let weights = &params.values[offsets[l]..offsets[l] + w_in * w_out];
            let input: &[f64] = if l == 0 {
                batch.feature_row(s)
            } else {
                &ws.layers[l - 1][s * w_in..(s + 1) * w_in]
            };

            let (gw, gb) = grad[offsets[l]..offsets[l] + w_in * w_out + w_out]
                .split_at_mut(w_in * w_out);
            for j in 0..w_out {
                let d = delta[j];
                gb[j] += d;
                let grow = &mut gw[j * w_in..(j + 1) * w_in];
                for (g, x) in grow.iter_mut().zip(input.iter()) {
                    *g += d * x;
                }
            }

            if l > 0 {
                for (i, dp) in delta_prev[..w_in].iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..w_out {
                        acc += weights[j * w_in + i] * delta[j];
                    }
                    *dp = acc * spec.activation().derivative_from_output(input[i]);
                }
                delta[..w_in].copy_from_slice(&delta_prev[..w_in]);
            }
        }
    }

    let inv_b = 1.0 / b as f64;
    for g in grad.iter_mut() {
        *g *= inv_b;
    }
    Ok((loss, GradientVector { values: grad }))
}

/// Plain SGD update `w - lr * g`, returning the new parameters.
pub fn sgd_step(params: &ParamVector, grad: &GradientVector, lr: f64) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch(format!(
            "params length {} != grad length {}",
            params.len(),
            grad.len()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("bad learning rate {lr}")));
    }
    let values = params
        .values
        .iter()
        .zip(grad.values.iter())
        .map(|(w, g)| w - lr * g)
        .collect();
    Ok(ParamVector { values })
}

/// Argmax class per sample; ties resolve to the lower class index.
pub fn predict(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
    check_shapes(spec, params, batch)?;
    let ws = forward_batch(spec, params, batch);
    let k = spec.num_classes();
    let logits = ws.layers.last().unwrap();
    Ok((0..batch.size())
        .map(|s| {
            let row = &logits[s * k..(s + 1) * k];
            let mut best = 0;
            for (j, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Live-buffer accounting of one training step, broken into the terms the
/// memory model predicts.
#[derive(Clone, Copy, Debug)]
pub struct StepMemory {
    pub params_bytes: u64,
    pub grad_bytes: u64,
    pub activation_bytes: u64,
    pub batch_bytes: u64,
    pub scratch_bytes: u64,
}

impl StepMemory {
    pub fn total(&self) -> u64 {
        self.params_bytes
            + self.grad_bytes
            + self.activation_bytes
            + self.batch_bytes
            + self.scratch_bytes
    }
}

/// Run one forward+backward and report the peak bytes actually held by the
/// trainer's buffers. This is measured from the real allocation sizes, not
/// recomputed from the model formula, so it can validate the formula.
pub fn measured_step_bytes(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<StepMemory> {
    check_shapes(spec, params, batch)?;
    let ws = forward_batch(spec, params, batch);
    let f64_size = std::mem::size_of::<f64>() as u64;
    let max_width = *spec.layer_widths().iter().max().unwrap() as u64;
    Ok(StepMemory {
        params_bytes: params.len() as u64 * f64_size,
        grad_bytes: params.len() as u64 * f64_size,
        activation_bytes: ws.allocated_bytes(),
        batch_bytes: batch.memory_bytes(),
        // two width-sized delta buffers used during backprop
        scratch_bytes: 2 * max_width * f64_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec(widths: &[usize], act: Activation) -> ModelSpec {
        ModelSpec::new(widths.to_vec(), act, 8).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, dim: usize, classes: usize) -> Batch {
        let features = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, labels, dim).unwrap()
    }

    /// Straight-line recomputation of the mean loss: nested Vec weights,
    /// naive softmax. Shares nothing with the production path except the
    /// flat-layout contract it decodes.
    fn naive_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> f64 {
        let widths = spec.layer_widths();
        let mut total = 0.0;
        for s in 0..batch.size() {
            let mut x: Vec<f64> = batch.feature_row(s).to_vec();
            let mut off = 0;
            for (l, pair) in widths.windows(2).enumerate() {
                let (w_in, w_out) = (pair[0], pair[1]);
                let mut y = vec![0.0; w_out];
                for (j, yj) in y.iter_mut().enumerate() {
                    let mut z = params.values()[off + w_in * w_out + j];
                    for (i, xi) in x.iter().enumerate() {
                        z += params.values()[off + j * w_in + i] * xi;
                    }
                    *yj = if l + 1 == widths.len() - 1 {
                        z
                    } else {
                        match spec.activation() {
                            Activation::Relu => z.max(0.0),
                            Activation::Tanh => z.tanh(),
                        }
                    };
                }
                off += w_in * w_out + w_out;
                x = y;
            }
            let denom: f64 = x.iter().map(|z| z.exp()).sum();
            total += denom.ln() - x[batch.labels()[s]];
        }
        total / batch.size() as f64
    }

    fn fd_gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch, h: f64) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let mut plus = params.values().to_vec();
                plus[i] += h;
                let mut minus = params.values().to_vec();
                minus[i] -= h;
                let lp =
                    forward_loss(spec, &ParamVector::from_values(plus).unwrap(), batch).unwrap();
                let lm =
                    forward_loss(spec, &ParamVector::from_values(minus).unwrap(), batch).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(reference.iter())
            .map(|(a, r)| (a - r).abs() / a.abs().max(r.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn param_count_dimension_arithmetic() {
        assert_eq!(spec(&[2, 3], Activation::Relu).param_count(), 9);
        assert_eq!(spec(&[4, 8, 3], Activation::Relu).param_count(), 67);
    }

    #[test]
    fn init_is_deterministic() {
        let m = spec(&[5, 7, 3], Activation::Relu);
        let a = init_params(&m, 42);
        let b = init_params(&m, 42);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&m, 43));
    }

    #[test]
    fn init_biases_are_zero() {
        let m = spec(&[4, 8, 3], Activation::Relu);
        let p = init_params(&m, 7);
        // layer 0: 32 weights then 8 biases; layer 1: 24 weights then 3 biases
        assert!(p.values()[32..40].iter().all(|&v| v == 0.0));
        assert!(p.values()[64..67].iter().all(|&v| v == 0.0));
        assert!(p.values()[..32].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_params_loss_is_ln_k() {
        for k in [2usize, 5, 10] {
            let m = spec(&[3, k], Activation::Relu);
            let p = ParamVector::from_values(vec![0.0; m.param_count()]).unwrap();
            let features = vec![0.3; 4 * 3];
            let labels: Vec<usize> = (0..4).map(|s| s % k.min(4)).collect();
            let batch = Batch::new(features, labels, 3).unwrap();
            let loss = forward_loss(&m, &p, &batch).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12, "k={k} loss={loss}");
        }
    }

    #[test]
    fn forward_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = spec(&[4, 6, 3], Activation::Tanh);
        let p = init_params(&m, 5);
        let batch = random_batch(&mut rng, 3, 4, 3);
        let loss = forward_loss(&m, &p, &batch).unwrap();
        let oracle = naive_loss(&m, &p, &batch);
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        // layer counts up to 3, widths up to 8, tanh for smooth quotients
        let shapes: [&[usize]; 4] = [&[3, 4], &[4, 8, 3], &[2, 6, 4, 3], &[5, 5, 2]];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for widths in shapes {
            let m = spec(widths, Activation::Tanh);
            let p = init_params(&m, 17);
            let batch = random_batch(&mut rng, 5, widths[0], *widths.last().unwrap());
            let (_, grad) = backward(&m, &p, &batch).unwrap();
            let fd = fd_gradient(&m, &p, &batch, 1e-5);
            let err = max_rel_err(grad.values(), &fd);
            assert!(err < 1e-4, "widths {widths:?}: max rel err {err}");
        }
    }

    #[test]
    fn duplicated_sample_equals_single_sample_grad() {
        let m = spec(&[3, 5, 2], Activation::Tanh);
        let p = init_params(&m, 3);
        let row = vec![0.4, -0.2, 0.9];
        let single = Batch::new(row.clone(), vec![1], 3).unwrap();
        let mut features = Vec::new();
        for _ in 0..6 {
            features.extend_from_slice(&row);
        }
        let dup = Batch::new(features, vec![1; 6], 3).unwrap();
        let (_, g1) = backward(&m, &p, &single).unwrap();
        let (_, g6) = backward(&m, &p, &dup).unwrap();
        for (a, b) in g1.values().iter().zip(g6.values().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_params_output_bias_grad() {
        let m = spec(&[4, 2], Activation::Relu);
        let p = ParamVector::from_values(vec![0.0; m.param_count()]).unwrap();
        let batch = Batch::new(vec![0.0; 4], vec![0], 4).unwrap();
        let (_, g) = backward(&m, &p, &batch).unwrap();
        // weights 0..8 zero (zero inputs), biases at 8..10 are softmax - onehot
        assert!(g.values()[..8].iter().all(|&v| v == 0.0));
        assert!((g.values()[8] - (-0.5)).abs() < 1e-15);
        assert!((g.values()[9] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let p = ParamVector::from_values(vec![1.0]).unwrap();
        let g = GradientVector::from_values(vec![2.0]).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.1).unwrap().values(), &[0.8]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap().values(), &[1.0]);
        let zero = GradientVector::from_values(vec![0.0]).unwrap();
        assert_eq!(sgd_step(&p, &zero, 0.5).unwrap().values(), &[1.0]);
    }

    #[test]
    fn sgd_step_length_mismatch_errors() {
        let p = ParamVector::from_values(vec![1.0, 2.0]).unwrap();
        let g = GradientVector::from_values(vec![2.0]).unwrap();
        assert!(sgd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn mean_gradient_is_linear_over_concatenation() {
        let m = spec(&[3, 4, 2], Activation::Tanh);
        let p = init_params(&m, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let b1 = random_batch(&mut rng, 3, 3, 2);
        let b2 = random_batch(&mut rng, 5, 3, 2);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for s in 0..b1.size() {
            features.extend_from_slice(b1.feature_row(s));
        }
        for s in 0..b2.size() {
            features.extend_from_slice(b2.feature_row(s));
        }
        labels.extend_from_slice(b1.labels());
        labels.extend_from_slice(b2.labels());
        let concat = Batch::new(features, labels, 3).unwrap();

        let (_, g1) = backward(&m, &p, &b1).unwrap();
        let (_, g2) = backward(&m, &p, &b2).unwrap();
        let (_, gc) = backward(&m, &p, &concat).unwrap();
        let (n1, n2) = (3.0, 5.0);
        for ((a, b), c) in g1.values().iter().zip(g2.values()).zip(gc.values()) {
            let expected = (n1 * a + n2 * b) / (n1 + n2);
            assert!((c - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn trajectory_is_bit_deterministic() {
        let m = spec(&[4, 6, 3], Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches: Vec<Batch> = (0..30).map(|_| random_batch(&mut rng, 4, 4, 3)).collect();
        let run = |seed: u64| {
            let mut p = init_params(&m, seed);
            for b in &batches {
                let (_, g) = backward(&m, &p, b).unwrap();
                p = sgd_step(&p, &g, 0.05).unwrap();
            }
            p
        };
        assert_eq!(run(77), run(77));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = spec(&[3, 2], Activation::Relu);
        let p = ParamVector::from_values(vec![0.0; 5]).unwrap();
        let batch = Batch::new(vec![0.0; 3], vec![0], 3).unwrap();
        assert!(forward_loss(&m, &p, &batch).is_err());
        let p_ok = ParamVector::from_values(vec![0.0; m.param_count()]).unwrap();
        let wrong_dim = Batch::new(vec![0.0; 4], vec![0], 4).unwrap();
        assert!(backward(&m, &p_ok, &wrong_dim).is_err());
    }

    #[test]
    fn measured_bytes_accounts_all_buffers() {
        let m = spec(&[4, 8, 3], Activation::Relu);
        let p = init_params(&m, 1);
        let batch = Batch::new(vec![0.1; 6 * 4], vec![0; 6], 4).unwrap();
        let mem = measured_step_bytes(&m, &p, &batch).unwrap();
        assert_eq!(mem.params_bytes, 67 * 8);
        assert_eq!(mem.activation_bytes, 6 * (8 + 3) * 8);
        assert_eq!(mem.batch_bytes, (6 * 4 + 6) as u64 * 8);
    }
}
