//! Statistical-efficiency machinery for large-batch training.
//!
//! Large-batch gradients are smoother than small-batch ones; the two differ
//! by a noise term that shrinks as the batch grows. This module provides the
//! pieces used to mimic small-batch behaviour from large-batch gradients:
//!
//! - the relative gradient-norm change `delta`, used to detect critical
//!   training phases,
//! - a step-function scaler that multiplies gradients by a factor `X` outside
//!   those phases and leaves them untouched inside them,
//! - the [`TeacherMapper`] abstraction that generalizes the scaler to any
//!   gradient-to-gradient transform,
//! - an estimator for the small-vs-large batch gradient noise itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::VecDeque;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::batch_from_indices;
use crate::nn::{backward, GradientVector, ModelSpec, ParamVector};

/// Step-function scaling policy.
///
/// `x = 1` makes the policy a no-op. The threshold defaults to 0.5; 0.8 is
/// the documented stricter setting that keeps original gradients on most
/// iterations. `delta` is undefined on the first iteration, so the first
/// `warmup_iters` calls always use factor 1.0.
///
/// The default branch assignment follows the operational rule: iterations
/// whose norm change reaches the threshold are stepped up to `X`.
/// `invert_branches` swaps the two branches for the alternative reading in
/// which high-change iterations keep the original gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepPolicy {
    pub x: f64,
    pub threshold: f64,
    pub warmup_iters: usize,
    pub invert_branches: bool,
}

impl StepPolicy {
    pub fn new(x: f64, threshold: f64) -> Result<Self> {
        if !x.is_finite() || x < 1.0 {
            return Err(Error::InvalidArgument(format!("step factor {x} must be >= 1")));
        }
        if !threshold.is_finite() || threshold <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "threshold {threshold} must be positive"
            )));
        }
        Ok(Self {
            x,
            threshold,
            warmup_iters: 1,
            invert_branches: false,
        })
    }

    /// The no-op policy: factor 1.0 everywhere.
    pub fn identity() -> Self {
        Self {
            x: 1.0,
            threshold: 0.5,
            warmup_iters: 1,
            invert_branches: false,
        }
    }

    pub fn with_warmup(mut self, warmup_iters: usize) -> Self {
        self.warmup_iters = warmup_iters;
        self
    }

    pub fn with_inverted_branches(mut self, invert: bool) -> Self {
        self.invert_branches = invert;
        self
    }

    pub fn is_noop(&self) -> bool {
        self.x == 1.0
    }
}

/// Relative change of the squared gradient norm between consecutive
/// iterations: `|(cur - prev) / prev|`.
///
/// `prev_sq == 0` returns the `+inf` sentinel (the change is undefined);
/// callers treat the sentinel conservatively.
pub fn grad_change(prev_sq: f64, cur_sq: f64) -> Result<f64> {
    if !prev_sq.is_finite() || !cur_sq.is_finite() || prev_sq < 0.0 || cur_sq < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "squared norms must be finite and nonnegative, got {prev_sq}, {cur_sq}"
        )));
    }
    if prev_sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(((cur_sq - prev_sq) / prev_sq).abs())
}

/// Choose the scaling factor for one iteration. Returns either 1.0 or
/// `policy.x`; the `+inf` sentinel (degenerate previous norm) always maps to
/// the conservative 1.0.
pub fn select_factor(delta: f64, policy: &StepPolicy) -> f64 {
    if policy.is_noop() || !delta.is_finite() {
        return 1.0;
    }
    let stepped_up = delta >= policy.threshold;
    match (stepped_up, policy.invert_branches) {
        (true, false) | (false, true) => policy.x,
        _ => 1.0,
    }
}

/// Elementwise multiply by `factor`. Factor 1.0 returns the input bit-exactly
/// (the injected noise `(X-1) * G` is zero).
pub fn scale_gradient(grad: &GradientVector, factor: f64) -> Result<GradientVector> {
    if !factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite scale factor {factor}"
        )));
    }
    if factor < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "scale factor {factor} must be >= 1"
        )));
    }
    if factor == 1.0 {
        return Ok(grad.clone());
    }
    GradientVector::from_values(grad.values().iter().map(|v| v * factor).collect())
}

/// Tracks the squared gradient norm across iterations plus a bounded history
/// of cumulative norms (the quantity plotted when comparing batch sizes).
#[derive(Clone, Debug)]
pub struct NormTracker {
    prev_sq: Option<f64>,
    cumulative_norm: f64,
    history: VecDeque<f64>,
    capacity: usize,
}

impl Default for NormTracker {
    fn default() -> Self {
        Self::with_capacity(1024)
    }
}

impl NormTracker {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            prev_sq: None,
            cumulative_norm: 0.0,
            history: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
        }
    }

    /// Record one iteration's squared norm; returns the delta relative to the
    /// previous iteration, `None` on the first observation.
    pub fn observe(&mut self, norm_sq: f64) -> Result<Option<f64>> {
        if !norm_sq.is_finite() || norm_sq < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "squared norm {norm_sq} must be finite and nonnegative"
            )));
        }
        let delta = match self.prev_sq {
            Some(prev) => Some(grad_change(prev, norm_sq)?),
            None => None,
        };
        self.prev_sq = Some(norm_sq);
        self.cumulative_norm += norm_sq.sqrt();
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(self.cumulative_norm);
        Ok(delta)
    }

    pub fn prev_sq(&self) -> Option<f64> {
        self.prev_sq
    }

    pub fn cumulative_norm(&self) -> f64 {
        self.cumulative_norm
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }
}

/// Anything that maps a computed gradient to the gradient actually applied.
/// The step-function scaler is the only non-trivial implementation here; a
/// learned teacher would slot in behind the same interface.
pub trait TeacherMapper {
    fn map(&mut self, grad: &GradientVector) -> Result<GradientVector>;
}

/// Passes gradients through untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMapper;

impl TeacherMapper for IdentityMapper {
    fn map(&mut self, grad: &GradientVector) -> Result<GradientVector> {
        Ok(grad.clone())
    }
}

/// Everything the engine wants to know about one mapper invocation.
#[derive(Clone, Debug)]
pub struct MapperStep {
    pub grad: GradientVector,
    pub raw_norm_sq: f64,
    pub delta: Option<f64>,
    pub factor: f64,
}

/// Stateful step-function mapper: tracks raw gradient norms, derives the
/// change metric, picks the factor, and records every decision.
///
/// One instance per client per training run; instances are not shared across
/// threads.
#[derive(Clone, Debug)]
pub struct StepFunctionMapper {
    policy: StepPolicy,
    tracker: NormTracker,
    calls: usize,
    decisions: Vec<f64>,
}

impl StepFunctionMapper {
    pub fn new(policy: StepPolicy, tracker: NormTracker) -> Self {
        Self {
            policy,
            tracker,
            calls: 0,
            decisions: Vec::new(),
        }
    }

    pub fn policy(&self) -> &StepPolicy {
        &self.policy
    }

    /// Factors chosen so far, one per call.
    pub fn decisions(&self) -> &[f64] {
        &self.decisions
    }

    pub fn tracker(&self) -> &NormTracker {
        &self.tracker
    }

    /// Map one gradient, returning the scaled gradient together with the raw
    /// norm, the change metric and the chosen factor.
    pub fn step(&mut self, grad: &GradientVector) -> Result<MapperStep> {
        let raw_norm_sq = grad.norm_sq();
        let delta = self.tracker.observe(raw_norm_sq)?;
        let factor = if self.calls < self.policy.warmup_iters {
            1.0
        } else {
            match delta {
                Some(d) => select_factor(d, &self.policy),
                None => 1.0,
            }
        };
        self.calls += 1;
        self.decisions.push(factor);
        Ok(MapperStep {
            grad: scale_gradient(grad, factor)?,
            raw_norm_sq,
            delta,
            factor,
        })
    }
}

impl TeacherMapper for StepFunctionMapper {
    fn map(&mut self, grad: &GradientVector) -> Result<GradientVector> {
        Ok(self.step(grad)?.grad)
    }
}

/// Fresh step-function mapper over a fresh tracker.
pub fn step_mapper(policy: StepPolicy) -> StepFunctionMapper {
    StepFunctionMapper::new(policy, NormTracker::default())
}

/// Gradient-noise estimate: per-trial norms of
/// `gamma = G(b_small) - G(b_large)` over independent seeded batch draws.
#[derive(Clone, Debug, Serialize)]
pub struct NoiseEstimate {
    pub b_small: usize,
    pub b_large: usize,
    pub trials: usize,
    pub gamma_norms: Vec<f64>,
    pub mean_gamma_norm: f64,
}

/// Estimate the gradient noise between two batch sizes at fixed parameters.
///
/// Each trial draws an independent `b_small` batch and `b_large` batch
/// (without replacement, canonical ascending index order) and records
/// `|G_small - G_large|`. Deterministic for a fixed seed.
pub fn estimate_gamma(
    spec: &ModelSpec,
    params: &ParamVector,
    ds: &Dataset,
    b_small: usize,
    b_large: usize,
    trials: usize,
    seed: u64,
) -> Result<NoiseEstimate> {
    if b_small == 0 || b_small > b_large {
        return Err(Error::InvalidArgument(format!(
            "need 0 < b_small ({b_small}) <= b_large ({b_large})"
        )));
    }
    if b_large > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "b_large {b_large} exceeds dataset size {}",
            ds.len()
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |amount: usize| -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut rng, ds.len(), amount).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut gamma_norms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let small = batch_from_indices(ds, &draw(b_small))?;
        let large = batch_from_indices(ds, &draw(b_large))?;
        let (_, g_small) = backward(spec, params, &small)?;
        let (_, g_large) = backward(spec, params, &large)?;
        let norm_sq: f64 = g_small
            .values()
            .iter()
            .zip(g_large.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        gamma_norms.push(norm_sq.sqrt());
    }
    let mean_gamma_norm = gamma_norms.iter().sum::<f64>() / trials as f64;
    Ok(NoiseEstimate {
        b_small,
        b_large,
        trials,
        gamma_norms,
        mean_gamma_norm,
    })
}

/// Count of iterations per chosen scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FactorCount {
    pub factor: f64,
    pub count: u64,
}

/// Discrete factor histogram: one bin per distinct factor value, ascending.
/// The counts always sum to the number of logged iterations.
pub fn factor_histogram(factors: &[f64]) -> Result<Vec<FactorCount>> {
    if factors.is_empty() {
        return Err(Error::InvalidArgument(
            "factor histogram of an empty log".into(),
        ));
    }
    let mut sorted = factors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut bins: Vec<FactorCount> = Vec::new();
    for f in sorted {
        match bins.last_mut() {
            Some(last) if last.factor == f => last.count += 1,
            _ => bins.push(FactorCount { factor: f, count: 1 }),
        }
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{init_params, Activation};

    #[test]
    fn grad_change_arithmetic() {
        assert_eq!(grad_change(4.0, 5.0).unwrap(), 0.25);
        assert_eq!(grad_change(4.0, 2.0).unwrap(), 0.5);
        assert_eq!(grad_change(3.7, 3.7).unwrap(), 0.0);
        assert!(grad_change(0.0, 1.0).unwrap().is_infinite());
        assert!(grad_change(-1.0, 1.0).is_err());
        assert!(grad_change(1.0, f64::NAN).is_err());
    }

    #[test]
    fn grad_change_is_exact_for_positive_inputs() {
        for (prev, cur) in [(1.0f64, 3.0f64), (2.5, 0.5), (10.0, 10.1), (1e-8, 2e-8)] {
            let direct = ((cur - prev) / prev).abs();
            let got = grad_change(prev, cur).unwrap();
            assert!((got - direct).abs() <= 1e-15);
        }
    }

    #[test]
    fn select_factor_thresholds() {
        let p = StepPolicy::new(4.0, 0.5).unwrap();
        assert_eq!(select_factor(0.6, &p), 4.0);
        assert_eq!(select_factor(0.5, &p), 4.0);
        assert_eq!(select_factor(0.3, &p), 1.0);
        assert_eq!(select_factor(f64::INFINITY, &p), 1.0);

        let noop = StepPolicy::identity();
        for d in [0.0, 0.3, 0.9, 100.0] {
            assert_eq!(select_factor(d, &noop), 1.0);
        }

        let inverted = p.with_inverted_branches(true);
        assert_eq!(select_factor(0.6, &inverted), 1.0);
        assert_eq!(select_factor(0.3, &inverted), 4.0);
    }

    #[test]
    fn select_factor_is_two_valued() {
        let p = StepPolicy::new(2.5, 0.4).unwrap();
        for i in 0..200 {
            let d = i as f64 * 0.01;
            let f = select_factor(d, &p);
            assert!(f == 1.0 || f == 2.5);
        }
    }

    #[test]
    fn scale_gradient_identity_and_arithmetic() {
        let g = GradientVector::from_values(vec![1.0, -2.0]).unwrap();
        let same = scale_gradient(&g, 1.0).unwrap();
        assert_eq!(same, g);
        let scaled = scale_gradient(&g, 4.0).unwrap();
        assert_eq!(scaled.values(), &[4.0, -8.0]);
        // injected noise is (X-1) * G
        for ((s, o), x) in scaled.values().iter().zip(g.values()).zip([1.0, -2.0]) {
            assert!((s - o - 3.0 * x).abs() <= 1e-15);
        }
        assert!(scale_gradient(&g, f64::NAN).is_err());
        assert!(scale_gradient(&g, 0.5).is_err());
    }

    #[test]
    fn mapper_constant_stream_stays_at_one() {
        let mut mapper = step_mapper(StepPolicy::new(4.0, 0.5).unwrap());
        let g = GradientVector::from_values(vec![0.5, 0.5]).unwrap();
        for _ in 0..10 {
            let out = mapper.step(&g).unwrap();
            assert_eq!(out.factor, 1.0);
        }
        assert!(mapper.decisions().iter().all(|&f| f == 1.0));
    }

    #[test]
    fn mapper_follows_hand_evaluated_stream() {
        // squared norms 1, 4, 4 with tau = 0.5, X = 2:
        // warmup 1, then delta = 3 -> 2x, then delta = 0 -> 1x
        let mut mapper = step_mapper(StepPolicy::new(2.0, 0.5).unwrap());
        let gs = [
            GradientVector::from_values(vec![1.0]).unwrap(),
            GradientVector::from_values(vec![2.0]).unwrap(),
            GradientVector::from_values(vec![2.0]).unwrap(),
        ];
        let steps: Vec<MapperStep> = gs.iter().map(|g| mapper.step(g).unwrap()).collect();
        assert_eq!(steps[0].factor, 1.0);
        assert_eq!(steps[1].factor, 2.0);
        assert_eq!(steps[1].delta, Some(3.0));
        assert_eq!(steps[2].factor, 1.0);
        assert_eq!(steps[2].delta, Some(0.0));
        assert_eq!(steps[1].grad.values(), &[4.0]);
    }

    #[test]
    fn noop_mapper_returns_inputs_bit_exactly() {
        let mut mapper = step_mapper(StepPolicy::identity());
        let g = GradientVector::from_values(vec![0.123456789, -9.87]).unwrap();
        for _ in 0..5 {
            let out = mapper.map(&g).unwrap();
            assert_eq!(out, g);
        }
    }

    #[test]
    fn zero_prev_norm_is_conservative() {
        let mut mapper = step_mapper(StepPolicy::new(8.0, 0.5).unwrap());
        let zero = GradientVector::from_values(vec![0.0, 0.0]).unwrap();
        let g = GradientVector::from_values(vec![1.0, 1.0]).unwrap();
        mapper.step(&zero).unwrap();
        let out = mapper.step(&g).unwrap();
        assert_eq!(out.delta, Some(f64::INFINITY));
        assert_eq!(out.factor, 1.0);
    }

    #[test]
    fn gamma_is_exactly_zero_for_full_batches() {
        let ds = make_synthetic(3, 4, 10, 0.4, 5).unwrap();
        let spec = ModelSpec::new(vec![4, 3], Activation::Relu, 8).unwrap();
        let params = init_params(&spec, 1);
        let est = estimate_gamma(&spec, &params, &ds, ds.len(), ds.len(), 3, 9).unwrap();
        assert!(est.gamma_norms.iter().all(|&n| n == 0.0));
        assert_eq!(est.mean_gamma_norm, 0.0);
    }

    #[test]
    fn gamma_shrinks_with_batch_size() {
        let ds = make_synthetic(4, 6, 64, 0.6, 7).unwrap();
        let spec = ModelSpec::new(vec![6, 4], Activation::Relu, 8).unwrap();
        let params = init_params(&spec, 2);
        let wide = estimate_gamma(&spec, &params, &ds, 8, 128, 20, 11).unwrap();
        let narrow = estimate_gamma(&spec, &params, &ds, 64, 128, 20, 11).unwrap();
        assert!(
            wide.mean_gamma_norm > narrow.mean_gamma_norm,
            "{} vs {}",
            wide.mean_gamma_norm,
            narrow.mean_gamma_norm
        );
    }

    #[test]
    fn gamma_single_trial_statistics() {
        let ds = make_synthetic(3, 4, 20, 0.4, 5).unwrap();
        let spec = ModelSpec::new(vec![4, 3], Activation::Relu, 8).unwrap();
        let params = init_params(&spec, 1);
        let est = estimate_gamma(&spec, &params, &ds, 4, 16, 1, 3).unwrap();
        assert_eq!(est.gamma_norms.len(), 1);
        assert_eq!(est.mean_gamma_norm, est.gamma_norms[0]);
        assert!(estimate_gamma(&spec, &params, &ds, 4, 1000, 1, 3).is_err());
        assert!(estimate_gamma(&spec, &params, &ds, 16, 4, 1, 3).is_err());
    }

    #[test]
    fn histogram_counts_and_conservation() {
        let factors = vec![1.0, 4.0, 1.0, 1.0, 4.0, 1.0];
        let bins = factor_histogram(&factors).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0], FactorCount { factor: 1.0, count: 4 });
        assert_eq!(bins[1], FactorCount { factor: 4.0, count: 2 });
        assert_eq!(
            bins.iter().map(|b| b.count).sum::<u64>() as usize,
            factors.len()
        );

        let single = factor_histogram(&[1.0; 25]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].count, 25);

        assert!(factor_histogram(&[]).is_err());
    }

    #[test]
    fn tracker_accumulates_history() {
        let mut t = NormTracker::with_capacity(3);
        for sq in [4.0, 9.0, 16.0, 25.0] {
            t.observe(sq).unwrap();
        }
        assert_eq!(t.prev_sq(), Some(25.0));
        assert_eq!(t.cumulative_norm(), 2.0 + 3.0 + 4.0 + 5.0);
        // capacity 3: the oldest cumulative value (2.0) has been evicted
        let hist: Vec<f64> = t.history().collect();
        assert_eq!(hist, vec![5.0, 9.0, 14.0]);
    }
}
