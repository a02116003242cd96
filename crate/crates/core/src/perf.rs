//! Parallel performance model: step-time and memory decompositions, linear
//! fits over profiled batch sizes, and the batch-size planner.
//!
//! The per-step cost splits into compute, data movement, and a sync term that
//! fires once per aggregation period. Training memory splits into model,
//! gradient, optimizer state, activations, and batch memory; the last two
//! scale with the batch size. Both compute time and batch memory are modeled
//! as straight lines in the batch size, fitted from a handful of profiled
//! points, which is enough to answer the two planning questions: the largest
//! batch that fits a memory budget, and the batch that minimizes epoch time.

use serde::Serialize;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::batch_from_indices;
use crate::nn::{backward, init_params, ModelSpec};

/// One profiled operating point: median seconds of compute and batch
/// assembly plus measured batch memory at a given batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerfSample {
    pub batch_size: usize,
    pub t_c: f64,
    pub t_mov: f64,
    pub m_batch: u64,
    pub reps: usize,
}

/// Ordinary least-squares line fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub rss: f64,
    pub n: usize,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Fitted lines can dip below zero outside the sampled range; times and
    /// memory cannot.
    pub fn predict_clamped(&self, x: f64) -> f64 {
        self.predict(x).max(0.0)
    }
}

/// Least-squares fit of `y = slope * x + intercept`. Requires at least two
/// distinct x values; exact (zero residual) on collinear input.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(
            "linear fit needs at least two points".into(),
        ));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point in fit".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "all x values are equal; slope is undefined".into(),
        ));
    }
    let sxy: f64 = points
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rss = points
        .iter()
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    Ok(LinearFit {
        slope,
        intercept,
        rss,
        n: points.len(),
    })
}

/// Per-step cost model: fitted compute and movement lines plus a fixed sync
/// cost paid every `sync_period` iterations.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostModel {
    pub fit_tc: LinearFit,
    pub fit_tmov: LinearFit,
    pub t_sync: f64,
    pub sync_period: usize,
}

impl CostModel {
    pub fn new(fit_tc: LinearFit, fit_tmov: LinearFit, t_sync: f64, sync_period: usize) -> Result<Self> {
        if sync_period == 0 {
            return Err(Error::InvalidArgument("sync_period must be >= 1".into()));
        }
        if !t_sync.is_finite() || t_sync < 0.0 {
            return Err(Error::InvalidArgument(format!("bad t_sync {t_sync}")));
        }
        Ok(Self {
            fit_tc,
            fit_tmov,
            t_sync,
            sync_period,
        })
    }
}

/// Memory model per Eq-style decomposition: fixed model/gradient/optimizer
/// terms plus activation and batch memory that grow with the batch size.
///
/// `optimizer_multiplier` counts extra parameter-sized optimizer buffers:
/// 0 for plain SGD, 1 for momentum, 2 for Adam-style.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MemoryModel {
    pub param_count: usize,
    pub bytes_per_element: usize,
    pub optimizer_multiplier: usize,
    pub per_sample_activation_bytes: u64,
    pub fit_mbatch: LinearFit,
}

impl MemoryModel {
    pub fn new(
        param_count: usize,
        bytes_per_element: usize,
        optimizer_multiplier: usize,
        per_sample_activation_bytes: u64,
        fit_mbatch: LinearFit,
    ) -> Result<Self> {
        if param_count == 0 || bytes_per_element == 0 {
            return Err(Error::InvalidArgument(
                "param_count and bytes_per_element must be positive".into(),
            ));
        }
        // A falling batch-memory line has no physical reading and would make
        // the planner's search order-dependent.
        if fit_mbatch.slope < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batch-memory fit slope {} is negative",
                fit_mbatch.slope
            )));
        }
        Ok(Self {
            param_count,
            bytes_per_element,
            optimizer_multiplier,
            per_sample_activation_bytes,
            fit_mbatch,
        })
    }

    /// Model + gradient + optimizer bytes: everything independent of b.
    pub fn fixed_bytes(&self) -> u64 {
        (2 + self.optimizer_multiplier) as u64
            * self.param_count as u64
            * self.bytes_per_element as u64
    }
}

/// Activation memory of one forward pass: every non-input layer's outputs
/// are stored for the whole batch, so it is exactly linear in `b`.
pub fn activation_memory(spec: &ModelSpec, batch_size: usize) -> u64 {
    let width_sum: usize = spec.layer_widths()[1..].iter().sum();
    (width_sum * spec.bytes_per_element() * batch_size) as u64
}

/// Total predicted training memory at batch size `b`, in bytes.
pub fn total_memory(mm: &MemoryModel, batch_size: usize) -> f64 {
    mm.fixed_bytes() as f64
        + mm.per_sample_activation_bytes as f64 * batch_size as f64
        + mm.fit_mbatch.predict_clamped(batch_size as f64)
}

/// Largest batch size whose predicted total memory fits the budget.
/// `total_memory` is nondecreasing by construction, so a doubling phase plus
/// binary search finds the same answer a linear scan would.
pub fn max_batch(mm: &MemoryModel, budget_bytes: u64) -> Result<usize> {
    let budget = budget_bytes as f64;
    if total_memory(mm, 1) > budget {
        return Err(Error::Infeasible(format!(
            "budget {budget_bytes} B is below the memory needed at batch size 1 ({:.0} B)",
            total_memory(mm, 1)
        )));
    }
    let mut hi = 1usize;
    while total_memory(mm, hi) <= budget && hi < (1 << 40) {
        hi *= 2;
    }
    let mut lo = hi / 2; // fits
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if total_memory(mm, mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Predicted duration of iteration `i` at batch size `b`. The sync term is
/// included exactly when `(i + 1) % sync_period == 0`; communication is free
/// during local-training iterations.
pub fn step_time(cm: &CostModel, batch_size: usize, iteration: usize) -> f64 {
    let base =
        cm.fit_tc.predict_clamped(batch_size as f64) + cm.fit_tmov.predict_clamped(batch_size as f64);
    if (iteration + 1).is_multiple_of(cm.sync_period) {
        base + cm.t_sync
    } else {
        base
    }
}

/// Iterations and predicted seconds for one epoch over `dataset_size`
/// samples at global batch `b`: `I = ceil(D / B)` steps of `step_time`.
/// The sum over the epoch collapses to `I` base steps plus one sync cost per
/// completed period.
pub fn epoch_time(cm: &CostModel, dataset_size: usize, batch_size: usize) -> Result<(usize, f64)> {
    if batch_size == 0 || batch_size > dataset_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} out of range for dataset of {dataset_size}"
        )));
    }
    let iterations = dataset_size.div_ceil(batch_size);
    let base = cm.fit_tc.predict_clamped(batch_size as f64)
        + cm.fit_tmov.predict_clamped(batch_size as f64);
    let syncs = iterations / cm.sync_period;
    Ok((iterations, iterations as f64 * base + syncs as f64 * cm.t_sync))
}

/// Feasible candidate with the smallest predicted epoch time; ties break
/// toward the smaller batch (smaller batches generalize no worse at equal
/// cost).
pub fn optimal_batch(
    cm: &CostModel,
    mm: &MemoryModel,
    dataset_size: usize,
    budget_bytes: u64,
    candidates: &[usize],
) -> Result<usize> {
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut best: Option<(usize, f64)> = None;
    for &b in &sorted {
        if b == 0 || b > dataset_size || total_memory(mm, b) > budget_bytes as f64 {
            continue;
        }
        let (_, t) = epoch_time(cm, dataset_size, b)?;
        match best {
            Some((_, best_t)) if t >= best_t => {}
            _ => best = Some((b, t)),
        }
    }
    best.map(|(b, _)| b).ok_or_else(|| {
        Error::Infeasible(format!(
            "no candidate batch fits budget {budget_bytes} B and dataset size {dataset_size}"
        ))
    })
}

/// Measure compute time (backward pass) and batch-assembly time at each
/// batch size, reporting the median over `reps` repetitions.
///
/// Timings must run on a single thread; concurrent measurement invalidates
/// the samples.
pub fn profile(
    spec: &ModelSpec,
    ds: &Dataset,
    batch_sizes: &[usize],
    reps: usize,
) -> Result<Vec<PerfSample>> {
    if reps < 3 {
        return Err(Error::InvalidArgument("profiling needs reps >= 3".into()));
    }
    let params = init_params(spec, 0x9e37);
    let n = ds.len();
    for &b in batch_sizes {
        if b == 0 || b > n {
            return Err(Error::InvalidArgument(format!(
                "batch size {b} out of range for dataset of {n}"
            )));
        }
        // untimed warmup; two rounds so clocks and caches settle
        let warm_idx: Vec<usize> = (0..b).collect();
        let warm = batch_from_indices(ds, &warm_idx)?;
        backward(spec, &params, &warm)?;
        backward(spec, &params, &warm)?;
    }

    // Repetitions are interleaved across batch sizes so a transient system
    // stall cannot poison all measurements of one batch size.
    let mut tc = vec![Vec::with_capacity(reps); batch_sizes.len()];
    let mut tmov = vec![Vec::with_capacity(reps); batch_sizes.len()];
    let mut m_batch = vec![0u64; batch_sizes.len()];
    for rep in 0..reps {
        for (slot, &b) in batch_sizes.iter().enumerate() {
            let start = (rep * b) % n;
            let indices: Vec<usize> = (0..b).map(|j| (start + j) % n).collect();

            let t0 = Instant::now();
            let batch = batch_from_indices(ds, &indices)?;
            tmov[slot].push(t0.elapsed().as_secs_f64());

            let t1 = Instant::now();
            backward(spec, &params, &batch)?;
            tc[slot].push(t1.elapsed().as_secs_f64());

            m_batch[slot] = batch.memory_bytes();
        }
    }
    Ok(batch_sizes
        .iter()
        .enumerate()
        .map(|(slot, &b)| PerfSample {
            batch_size: b,
            t_c: median(&mut tc[slot]),
            t_mov: median(&mut tmov[slot]),
            m_batch: m_batch[slot],
            reps,
        })
        .collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Profile table as CSV: `b,t_c,t_mov,m_batch,reps`.
pub fn profile_to_csv(samples: &[PerfSample]) -> String {
    let mut out = String::from("b,t_c,t_mov,m_batch,reps\n");
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.batch_size, s.t_c, s.t_mov, s.m_batch, s.reps
        ));
    }
    out
}

/// Parse the CSV written by [`profile_to_csv`].
pub fn parse_profile_csv(text: &str) -> Result<Vec<PerfSample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some("b,t_c,t_mov,m_batch,reps") => {}
        other => {
            return Err(Error::Parse(format!(
                "bad profile header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(Error::Parse(format!("profile row {}: need 5 cells", i + 2)));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("profile row {}: bad number {s:?}", i + 2)))
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("profile row {}: bad integer {s:?}", i + 2)))
        };
        samples.push(PerfSample {
            batch_size: parse_u(cells[0])? as usize,
            t_c: parse_f(cells[1])?,
            t_mov: parse_f(cells[2])?,
            m_batch: parse_u(cells[3])?,
            reps: parse_u(cells[4])? as usize,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse("profile CSV has no rows".into()));
    }
    Ok(samples)
}

/// One candidate row of the planner report.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PlanRow {
    pub b: usize,
    pub feasible: bool,
    pub total_memory_bytes: f64,
    pub iterations: Option<usize>,
    pub epoch_seconds: Option<f64>,
}

/// Planner output: the largest feasible batch, the epoch-time argmin, and
/// the per-candidate table behind them.
#[derive(Clone, Debug, Serialize)]
pub struct PlanReport {
    pub feasible: bool,
    pub b_max: Option<usize>,
    pub b_opt: Option<usize>,
    pub epoch_time_table: Vec<PlanRow>,
}

/// Evaluate every candidate against the budget and dataset size.
pub fn build_plan(
    cm: &CostModel,
    mm: &MemoryModel,
    dataset_size: usize,
    budget_bytes: u64,
    candidates: &[usize],
) -> PlanReport {
    let mut table = Vec::with_capacity(candidates.len());
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &b in &sorted {
        let mem = total_memory(mm, b);
        let feasible = b >= 1 && b <= dataset_size && mem <= budget_bytes as f64;
        let (iterations, secs) = if feasible {
            let (i, t) = epoch_time(cm, dataset_size, b).expect("feasible candidate");
            (Some(i), Some(t))
        } else {
            (None, None)
        };
        table.push(PlanRow {
            b,
            feasible,
            total_memory_bytes: mem,
            iterations,
            epoch_seconds: secs,
        });
    }
    let b_max = max_batch(mm, budget_bytes).ok();
    let b_opt = optimal_batch(cm, mm, dataset_size, budget_bytes, &sorted).ok();
    PlanReport {
        feasible: b_opt.is_some(),
        b_max,
        b_opt,
        epoch_time_table: table,
    }
}
