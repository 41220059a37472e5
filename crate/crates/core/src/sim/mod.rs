//! Message-level simulation of synchronous training iterations.
//!
//! An iteration runs five serialized phases: GPU compute, gradient exchange
//! (parameter-server pushes and AllReduce collectives, all concurrent),
//! server-side aggregation and update, per-partition bookkeeping, and the
//! parameter pull. Within a phase, transfers contend for full-duplex NIC
//! ports and a shared intra-machine bus; CPU work contends for a fixed pool
//! of server threads per machine.

mod collectives;
mod engine;
mod iteration;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{MachineTraffic, TransferReport};
use crate::placement::{Location, MechanismPolicy};

pub use collectives::{simulate_allgatherv, simulate_ps_exchange, simulate_ring_allreduce};
pub use iteration::{simulate_iteration, simulate_training};

/// What a message carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Gradient from a worker (or its machine aggregator) to a server.
    Push,
    /// GPU gradient copied to the machine-local aggregator.
    LocalGather,
    /// Updated parameters from a server to a worker machine or GPU.
    Pull,
    /// Pulled parameters copied from the machine CPU to each GPU.
    Fanout,
    /// GPU gradient copied to the machine's collective leader.
    IntraReduce,
    ReduceScatter,
    AllGather,
    AllGatherV,
    /// Collective result copied from the leader to the other GPUs.
    IntraBroadcast,
    /// Chief-issued update trigger; carries no payload.
    Update,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTag {
    pub variable: String,
    pub partition: Option<usize>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub src: Location,
    pub dst: Location,
    pub bytes: u64,
    pub tag: MessageTag,
    pub start_us: f64,
    pub end_us: f64,
}

impl Message {
    pub fn crosses_network(&self) -> bool {
        self.src.machine != self.dst.machine
    }
}

/// Serialized stages of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationPhase {
    Compute,
    Exchange,
    Aggregate,
    Overhead,
    Pull,
}

/// Timing parameters that are not network transfers. Durations in
/// microseconds; per-megabyte rates use 10^6 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    pub compute_us_per_gpu: f64,
    /// Fixed cost of each partition of a sparse parameter-server variable.
    pub partition_overhead_us: f64,
    /// Aggregation and update cost of sparse gradients.
    pub agg_us_per_mb: f64,
    /// Aggregation and update cost of dense gradients on servers.
    pub dense_agg_us_per_mb: f64,
    /// Cost of assembling partitioned results into one tensor, per variable.
    pub stitch_us_per_mb: f64,
    pub server_threads: usize,
    /// Extra fraction of compute time in the discarded warm-up iterations.
    pub warmup_inflation: f64,
    /// Upper bound of the uniform per-GPU compute slowdown fraction.
    pub compute_jitter: f64,
    pub policy: MechanismPolicy,
}

impl ComputeProfile {
    pub fn new(compute_us_per_gpu: f64) -> Self {
        Self {
            compute_us_per_gpu,
            partition_overhead_us: 50.0,
            agg_us_per_mb: 1000.0,
            dense_agg_us_per_mb: 100.0,
            stitch_us_per_mb: 100.0,
            server_threads: 16,
            warmup_inflation: 0.5,
            compute_jitter: 0.0,
            policy: MechanismPolicy::default(),
        }
    }

    pub fn for_graph(graph: &crate::graph::GraphSpec) -> Self {
        Self::new(graph.compute_us_per_gpu)
    }

    /// Profile with every non-network cost removed.
    pub fn network_only() -> Self {
        Self {
            compute_us_per_gpu: 0.0,
            partition_overhead_us: 0.0,
            agg_us_per_mb: 0.0,
            dense_agg_us_per_mb: 0.0,
            stitch_us_per_mb: 0.0,
            warmup_inflation: 0.0,
            ..Self::new(0.0)
        }
    }

    pub fn validate(&self) -> Result<(), crate::error::SpecError> {
        let fields = [
            ("compute_us_per_gpu", self.compute_us_per_gpu),
            ("partition_overhead_us", self.partition_overhead_us),
            ("agg_us_per_mb", self.agg_us_per_mb),
            ("dense_agg_us_per_mb", self.dense_agg_us_per_mb),
            ("stitch_us_per_mb", self.stitch_us_per_mb),
            ("warmup_inflation", self.warmup_inflation),
            ("compute_jitter", self.compute_jitter),
            ("policy.eff_ar", self.policy.eff_ar),
            ("policy.eff_ps", self.policy.eff_ps),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(crate::error::SpecError::invalid(
                    format!("profile.{name}"),
                    "must be a finite non-negative number",
                ));
            }
        }
        if self.server_threads == 0 {
            return Err(crate::error::SpecError::invalid(
                "profile.server_threads",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iter_time_us: f64,
    pub per_machine_bytes: TransferReport,
    pub phase_times: BTreeMap<IterationPhase, f64>,
    pub trace: Vec<Message>,
}

impl IterationStats {
    /// Time spent moving gradients and parameters.
    pub fn comm_time_us(&self) -> f64 {
        self.phase(IterationPhase::Exchange) + self.phase(IterationPhase::Pull)
    }

    pub fn phase(&self, phase: IterationPhase) -> f64 {
        self.phase_times.get(&phase).copied().unwrap_or(0.0)
    }

    /// Chief update triggers issued for one variable partition.
    pub fn update_events(&self, variable: &str, partition: usize) -> usize {
        self.trace
            .iter()
            .filter(|m| {
                m.tag.phase == Phase::Update
                    && m.tag.variable == variable
                    && m.tag.partition == Some(partition)
            })
            .count()
    }
}

/// Outcome of simulating one collective or exchange in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRun {
    pub duration_us: f64,
    /// Communication rounds in which every participant sends once.
    pub steps: usize,
    pub per_machine_bytes: TransferReport,
    pub trace: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub iteration_times_us: Vec<f64>,
    /// Index of the first iteration kept for the mean.
    pub retained_from: usize,
    pub mean_iter_time_us: f64,
    /// Unperturbed iteration whose communication every iteration shares.
    pub steady: IterationStats,
}

/// Cross-machine byte totals of a trace.
pub fn nic_traffic(trace: &[Message], machines: usize) -> TransferReport {
    let mut traffic = vec![MachineTraffic::default(); machines];
    for m in trace.iter().filter(|m| m.crosses_network()) {
        traffic[m.src.machine].egress_bytes += m.bytes;
        traffic[m.dst.machine].ingress_bytes += m.bytes;
    }
    TransferReport::from_traffic(traffic)
}

/// Checks that, per tag and overall, the bytes charged to senders equal the
/// bytes credited to receivers, and that no payload is addressed to its own
/// sender.
pub fn trace_is_conserved(trace: &[Message]) -> bool {
    type Key<'a> = (&'a str, Option<usize>, Phase);
    let mut sent: BTreeMap<Key, BTreeMap<Location, u64>> = BTreeMap::new();
    let mut received: BTreeMap<Key, BTreeMap<Location, u64>> = BTreeMap::new();
    for m in trace {
        if m.bytes > 0 && m.src == m.dst {
            return false;
        }
        let key = (m.tag.variable.as_str(), m.tag.partition, m.tag.phase);
        *sent.entry(key).or_default().entry(m.src).or_default() += m.bytes;
        *received.entry(key).or_default().entry(m.dst).or_default() += m.bytes;
    }
    fn totals<'a>(side: &BTreeMap<Key<'a>, BTreeMap<Location, u64>>) -> BTreeMap<Key<'a>, u64> {
        side.iter().map(|(k, v)| (*k, v.values().sum())).collect()
    }
    let report = nic_traffic(trace, machines_in(trace));
    totals(&sent) == totals(&received) && report.is_conserved()
}

fn machines_in(trace: &[Message]) -> usize {
    trace
        .iter()
        .map(|m| m.src.machine.max(m.dst.machine) + 1)
        .max()
        .unwrap_or(0)
}
