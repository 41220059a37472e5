//! Partition-count tuning with the cost model
//! `iter_time = θ0 + θ1/P + θ2·P`: sample iteration times by doubling and
//! halving P, fit θ by least squares with `θ1, θ2 ≥ 0`, and take the
//! model's minimizer within the sampled range.

use std::fmt::Display;

use serde::{Deserialize, Serialize};

use crate::error::TuneError;
use crate::graph::{ClusterSpec, GraphSpec};
use crate::placement::DistributedPlan;
use crate::sim::{simulate_training, ComputeProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Fixed cost.
    pub theta0: f64,
    /// Cost divided across partitions.
    pub theta1: f64,
    /// Cost per partition.
    pub theta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub partitions: usize,
    pub time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub theta: Theta,
    pub samples: Vec<Sample>,
}

impl CostModelParams {
    pub fn new(theta0: f64, theta1: f64, theta2: f64) -> Self {
        Self {
            theta: Theta {
                theta0,
                theta1,
                theta2,
            },
            samples: Vec::new(),
        }
    }

    pub fn with_samples(mut self, samples: Vec<Sample>) -> Self {
        self.samples = samples;
        self
    }

    /// Smallest and largest sampled partition counts.
    pub fn sample_range(&self) -> Option<(usize, usize)> {
        let lo = self.samples.iter().map(|s| s.partitions).min()?;
        let hi = self.samples.iter().map(|s| s.partitions).max()?;
        Some((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    #[serde(rename = "best_P")]
    pub best_p: usize,
    #[serde(flatten)]
    pub params: CostModelParams,
    pub samples_taken: usize,
    pub predicted_time_us: f64,
}

pub fn predict_time(params: &CostModelParams, p: usize) -> f64 {
    let t = &params.theta;
    let p = p as f64;
    t.theta0 + t.theta1 / p + t.theta2 * p
}

/// Least squares for `y ≈ X·β` by modified Gram-Schmidt QR. Columns are
/// few and well scaled after normalization, so this is stable enough.
fn least_squares(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = columns.len();
    let mut q: Vec<Vec<f64>> = columns.to_vec();
    let mut r = vec![vec![0.0; k]; k];
    for j in 0..k {
        for i in 0..j {
            let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
            r[i][j] = dot;
            let qi = q[i].clone();
            for (v, u) in q[j].iter_mut().zip(&qi) {
                *v -= dot * u;
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = columns[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        r[j][j] = norm;
        for v in q[j].iter_mut() {
            *v /= norm;
        }
    }
    let qty: Vec<f64> = q
        .iter()
        .map(|col| col.iter().zip(y).map(|(a, b)| a * b).sum())
        .collect();
    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let tail: f64 = (j + 1..k).map(|i| r[j][i] * beta[i]).sum();
        beta[j] = (qty[j] - tail) / r[j][j];
    }
    Some(beta)
}

fn mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Fits θ minimizing squared error over `θ1, θ2 ≥ 0`. Each constraint
/// pattern (both free, one clamped to zero, both clamped) is solved in
/// closed form and the best feasible one kept; a pattern with more free
/// coefficients must reduce the error noticeably to be preferred.
pub fn fit_theta(samples: &[Sample]) -> Result<CostModelParams, TuneError> {
    let mut distinct: Vec<usize> = samples.iter().map(|s| s.partitions).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || distinct[0] == 0 {
        return Err(TuneError::InsufficientSamples(distinct.len()));
    }
    let y: Vec<f64> = samples.iter().map(|s| s.time_us).collect();
    let inv: Vec<f64> = samples.iter().map(|s| 1.0 / s.partitions as f64).collect();
    let lin: Vec<f64> = samples.iter().map(|s| s.partitions as f64).collect();
    let sse = |t: &Theta| -> f64 {
        samples
            .iter()
            .map(|s| {
                let p = s.partitions as f64;
                let r = s.time_us - (t.theta0 + t.theta1 / p + t.theta2 * p);
                r * r
            })
            .sum()
    };
    let scale = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ones = vec![1.0; samples.len()];

    let mut candidates = vec![Theta {
        theta0: mean(&y),
        theta1: 0.0,
        theta2: 0.0,
    }];
    for (use_inv, use_lin) in [(true, false), (false, true), (true, true)] {
        let mut cols = vec![ones.clone()];
        if use_inv {
            cols.push(inv.clone());
        }
        if use_lin {
            cols.push(lin.clone());
        }
        let norms: Vec<f64> = cols.iter().map(|c| scale(c)).collect();
        let scaled: Vec<Vec<f64>> = cols
            .iter()
            .zip(&norms)
            .map(|(c, n)| c.iter().map(|v| v / n).collect())
            .collect();
        let Some(beta) = least_squares(&scaled, &y) else { continue };
        let beta: Vec<f64> = beta.iter().zip(&norms).map(|(b, n)| b / n).collect();
        let mut it = beta.into_iter();
        let theta0 = it.next().unwrap_or(0.0);
        let theta1 = if use_inv { it.next().unwrap_or(0.0) } else { 0.0 };
        let theta2 = if use_lin { it.next().unwrap_or(0.0) } else { 0.0 };
        if theta1 >= 0.0 && theta2 >= 0.0 {
            candidates.push(Theta {
                theta0,
                theta1,
                theta2,
            });
        }
    }
    let tolerance = 1e-12 * y.iter().map(|v| v * v).sum::<f64>();
    let mut best = candidates[0];
    let mut best_sse = sse(&best);
    for c in candidates.into_iter().skip(1) {
        let e = sse(&c);
        if e < best_sse - tolerance {
            best = c;
            best_sse = e;
        }
    }
    Ok(CostModelParams {
        theta: best,
        samples: samples.to_vec(),
    })
}

/// Integer P minimizing the fitted model, never outside the sampled range.
/// With no partition overhead (`θ2 = 0`) that is the largest sampled P; with
/// nothing to parallelize (`θ1 = 0`) the smallest.
pub fn optimal_p(params: &CostModelParams) -> Result<usize, TuneError> {
    let (lo, hi) = params.sample_range().ok_or(TuneError::Unfitted)?;
    let t = &params.theta;
    if t.theta1 <= 0.0 {
        return Ok(lo);
    }
    if t.theta2 <= 0.0 {
        return Ok(hi);
    }
    let x = (t.theta1 / t.theta2).sqrt();
    let floor = (x.floor() as usize).max(1);
    let ceil = (x.ceil() as usize).max(1);
    let pick = if predict_time(params, ceil) < predict_time(params, floor) {
        ceil
    } else {
        floor
    };
    Ok(pick.clamp(lo, hi))
}

/// Relative improvement threshold of the sampling search.
pub const DEFAULT_THRESHOLD: f64 = 0.10;

/// Samples P starting at `start_p`: doubles while each step improves the
/// previous time by more than `threshold` (relative), then halves from
/// `start_p` under the same rule. Every visited P is evaluated once.
pub fn sample_search<F, E>(
    mut evaluator: F,
    start_p: usize,
    threshold: f64,
    max_p: usize,
) -> Result<Vec<Sample>, TuneError>
where
    F: FnMut(usize) -> Result<f64, E>,
    E: Display,
{
    let max_p = max_p.max(1);
    let start = start_p.clamp(1, max_p);
    let mut eval = |p: usize| {
        evaluator(p).map_err(|e| TuneError::Evaluator {
            partitions: p,
            message: e.to_string(),
        })
    };
    let improves = |prev: f64, new: f64| prev > 0.0 && (prev - new) / prev > threshold;

    let first = eval(start)?;
    let mut samples = vec![Sample {
        partitions: start,
        time_us: first,
    }];
    let (mut p, mut prev) = (start, first);
    while p < max_p {
        let next = (p * 2).min(max_p);
        let t = eval(next)?;
        samples.push(Sample {
            partitions: next,
            time_us: t,
        });
        if !improves(prev, t) {
            break;
        }
        (p, prev) = (next, t);
    }
    let (mut p, mut prev) = (start, first);
    while p > 1 {
        let next = p / 2;
        let t = eval(next)?;
        samples.push(Sample {
            partitions: next,
            time_us: t,
        });
        if !improves(prev, t) {
            break;
        }
        (p, prev) = (next, t);
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub threshold: f64,
    /// Simulated iterations per sample.
    pub iterations: usize,
    pub seed: u64,
    /// Defaults to the number of machines.
    pub start_p: Option<usize>,
    /// Upper bound on P; the smallest partitionable variable also bounds it.
    pub max_p: Option<usize>,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            iterations: 100,
            seed: 0,
            start_p: None,
            max_p: None,
        }
    }
}

/// Tunes one partition count shared by every partitionable sparse variable.
/// `plan_builder` maps a candidate P to the plan to simulate.
pub fn tune<F, E>(
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    mut plan_builder: F,
    profile: &ComputeProfile,
    options: &TuneOptions,
) -> Result<TuneResult, TuneError>
where
    F: FnMut(usize) -> Result<DistributedPlan, E>,
    E: Display,
{
    let largest = graph
        .variables
        .iter()
        .filter(|v| v.is_sparse() && v.partitionable)
        .map(|v| v.elements)
        .min()
        .ok_or(TuneError::NothingToPartition)?;
    let mut max_p = usize::try_from(largest).unwrap_or(usize::MAX);
    if let Some(cap) = options.max_p {
        max_p = max_p.min(cap.max(1));
    }
    let start = options.start_p.unwrap_or(cluster.machines);
    let evaluator = |p: usize| -> Result<f64, String> {
        let plan = plan_builder(p).map_err(|e| e.to_string())?;
        simulate_training(&plan, graph, cluster, profile, options.iterations, options.seed)
            .map(|run| run.mean_iter_time_us)
            .map_err(|e| e.to_string())
    };
    let samples = sample_search(evaluator, start, options.threshold, max_p)?;
    let samples_taken = samples.len();
    let params = fit_theta(&samples)?;
    let best_p = optimal_p(&params)?;
    Ok(TuneResult {
        best_p,
        predicted_time_us: predict_time(&params, best_p),
        params,
        samples_taken,
    })
}
