//! Transfer patterns of the two synchronization mechanisms, as task-graph
//! builders plus stand-alone simulations of each.

use crate::graph::{even_split, ClusterSpec, PartitionSet, VariableSpec};
use crate::placement::{DistributedPlan, Location, Mechanism};
use crate::error::SimError;

use super::engine::{Engine, Schedule, TaskId, Work};
use super::{nic_traffic, CommRun, Message, MessageTag, Phase};

pub(crate) fn tag(variable: &str, partition: Option<usize>, phase: Phase) -> MessageTag {
    MessageTag {
        variable: variable.to_string(),
        partition,
        phase,
    }
}

fn send(
    e: &mut Engine,
    src: Location,
    dst: Location,
    bytes: u64,
    tag: MessageTag,
    efficiency: f64,
    deps: &[TaskId],
) -> TaskId {
    e.add(
        Work::Transfer {
            src,
            dst,
            bytes,
            tag,
            efficiency,
        },
        deps,
    )
}

/// Ring AllReduce among `ranks`: reduce-scatter then all-gather, each
/// `n - 1` steps in which every rank forwards one chunk to its successor.
/// Chunks split `bytes` as evenly as possible. `ready[i]` gates rank `i`;
/// returns the task after which rank `i` holds the full result.
pub(crate) fn ring_allreduce(
    e: &mut Engine,
    ranks: &[Location],
    bytes: u64,
    variable: &str,
    efficiency: f64,
    ready: &[TaskId],
) -> Vec<TaskId> {
    let n = ranks.len();
    if n <= 1 {
        return ready.to_vec();
    }
    let chunks = even_split(bytes, n);
    let mut received = ready.to_vec();
    let mut sent = ready.to_vec();
    for step in 0..2 * (n - 1) {
        let mut next = received.clone();
        for i in 0..n {
            let (chunk, phase) = if step < n - 1 {
                ((i + n - step) % n, Phase::ReduceScatter)
            } else {
                let t = step - (n - 1);
                ((i + 1 + n - t) % n, Phase::AllGather)
            };
            let to = (i + 1) % n;
            let id = send(
                e,
                ranks[i],
                ranks[to],
                chunks[chunk],
                tag(variable, None, phase),
                efficiency,
                &[received[i], ready[i]],
            );
            next[to] = id;
            sent[i] = id;
        }
        received = next;
    }
    (0..n).map(|i| e.join(&[received[i], sent[i]])).collect()
}

/// Ring AllGatherv: `n - 1` steps, in step `s` rank `i` forwards the block
/// that originated at rank `i - s`. Every rank ends with the concatenation
/// of all payloads.
pub(crate) fn allgatherv(
    e: &mut Engine,
    ranks: &[Location],
    payloads: &[u64],
    variable: &str,
    efficiency: f64,
    ready: &[TaskId],
) -> Vec<TaskId> {
    let n = ranks.len();
    if n <= 1 {
        return ready.to_vec();
    }
    let mut received = ready.to_vec();
    let mut sent = ready.to_vec();
    for step in 0..n - 1 {
        let mut next = received.clone();
        for i in 0..n {
            let block = (i + n - step) % n;
            let to = (i + 1) % n;
            let id = send(
                e,
                ranks[i],
                ranks[to],
                payloads[block],
                tag(variable, None, Phase::AllGatherV),
                efficiency,
                &[received[i], ready[i]],
            );
            next[to] = id;
            sent[i] = id;
        }
        received = next;
    }
    (0..n).map(|i| e.join(&[received[i], sent[i]])).collect()
}

/// Copies `bytes` from every non-leader GPU of machine `m` to GPU 0.
fn intra_to_leader(
    e: &mut Engine,
    cluster: &ClusterSpec,
    m: usize,
    bytes: u64,
    variable: &str,
    start: TaskId,
) -> TaskId {
    let leader = Location::gpu(m, 0);
    let copies: Vec<TaskId> = (1..cluster.gpus_per_machine)
        .map(|g| {
            let t = tag(variable, None, Phase::IntraReduce);
            send(e, Location::gpu(m, g), leader, bytes, t, 1.0, &[start])
        })
        .collect();
    if copies.is_empty() {
        start
    } else {
        e.join(&copies)
    }
}

fn intra_from_leader(
    e: &mut Engine,
    cluster: &ClusterSpec,
    m: usize,
    bytes: u64,
    variable: &str,
    ready: TaskId,
) -> TaskId {
    let leader = Location::gpu(m, 0);
    let copies: Vec<TaskId> = (1..cluster.gpus_per_machine)
        .map(|g| {
            let t = tag(variable, None, Phase::IntraBroadcast);
            send(e, leader, Location::gpu(m, g), bytes, t, 1.0, &[ready])
        })
        .collect();
    if copies.is_empty() {
        ready
    } else {
        e.join(&copies)
    }
}

/// Hierarchical AllReduce of a dense tensor: reduce onto each machine's
/// first GPU, ring across machines, broadcast back.
pub(crate) fn hierarchical_allreduce(
    e: &mut Engine,
    cluster: &ClusterSpec,
    bytes: u64,
    variable: &str,
    efficiency: f64,
    start: TaskId,
) -> TaskId {
    let n = cluster.machines;
    let leaders: Vec<Location> = (0..n).map(|m| Location::gpu(m, 0)).collect();
    let ready: Vec<TaskId> = (0..n)
        .map(|m| intra_to_leader(e, cluster, m, bytes, variable, start))
        .collect();
    let done = ring_allreduce(e, &leaders, bytes, variable, efficiency, &ready);
    let out: Vec<TaskId> = (0..n)
        .map(|m| intra_from_leader(e, cluster, m, bytes, variable, done[m]))
        .collect();
    e.join(&out)
}

/// Hierarchical AllGatherv of sparse gradients of `bytes` per GPU. Every GPU
/// ends with all `N * G` contributions.
pub(crate) fn hierarchical_allgatherv(
    e: &mut Engine,
    cluster: &ClusterSpec,
    bytes: u64,
    variable: &str,
    efficiency: f64,
    start: TaskId,
) -> TaskId {
    let n = cluster.machines;
    let g = cluster.gpus_per_machine as u64;
    let leaders: Vec<Location> = (0..n).map(|m| Location::gpu(m, 0)).collect();
    let ready: Vec<TaskId> = (0..n)
        .map(|m| intra_to_leader(e, cluster, m, bytes, variable, start))
        .collect();
    let payloads = vec![g * bytes; n];
    let done = allgatherv(e, &leaders, &payloads, variable, efficiency, &ready);
    let gathered = n as u64 * g * bytes;
    let out: Vec<TaskId> = (0..n)
        .map(|m| intra_from_leader(e, cluster, m, gathered, variable, done[m]))
        .collect();
    e.join(&out)
}

/// One parameter-server shard: a variable partition homed on `owner`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Shard<'a> {
    pub variable: &'a str,
    pub partition: usize,
    pub bytes: u64,
    pub owner: usize,
}

/// Gradient push of one shard. With local aggregation each machine's GPUs
/// copy to the machine CPU, which sums them (`local_agg_us`) and sends one
/// message to the owner; without it every GPU sends its own. Returns the
/// tasks whose completion delivers a contribution to the owner.
pub(crate) fn ps_push(
    e: &mut Engine,
    cluster: &ClusterSpec,
    shard: Shard,
    local_agg: bool,
    local_agg_us: f64,
    efficiency: f64,
    start: TaskId,
) -> Vec<TaskId> {
    let server = Location::cpu(shard.owner);
    let t = |phase| tag(shard.variable, Some(shard.partition), phase);
    let mut arrivals = Vec::new();
    for m in 0..cluster.machines {
        let gpus = 0..cluster.gpus_per_machine;
        if local_agg {
            let cpu = Location::cpu(m);
            let copies: Vec<TaskId> = gpus
                .map(|g| {
                    send(e, Location::gpu(m, g), cpu, shard.bytes, t(Phase::LocalGather), 1.0, &[start])
                })
                .collect();
            let summed = if cluster.gpus_per_machine > 1 && local_agg_us > 0.0 {
                e.add(Work::Cpu { machine: m, us: local_agg_us }, &copies)
            } else {
                e.join(&copies)
            };
            if m == shard.owner {
                arrivals.push(summed);
            } else {
                let push = send(e, cpu, server, shard.bytes, t(Phase::Push), efficiency, &[summed]);
                arrivals.push(push);
            }
        } else {
            for g in gpus {
                let push = send(
                    e,
                    Location::gpu(m, g),
                    server,
                    shard.bytes,
                    t(Phase::Push),
                    efficiency,
                    &[start],
                );
                arrivals.push(push);
            }
        }
    }
    arrivals
}

/// Parameter pull of one shard, mirroring the push pattern.
pub(crate) fn ps_pull(
    e: &mut Engine,
    cluster: &ClusterSpec,
    shard: Shard,
    local_agg: bool,
    efficiency: f64,
    start: TaskId,
) -> TaskId {
    let server = Location::cpu(shard.owner);
    let t = |phase| tag(shard.variable, Some(shard.partition), phase);
    let mut done = Vec::new();
    for m in 0..cluster.machines {
        let gpus = 0..cluster.gpus_per_machine;
        if local_agg {
            let cpu = Location::cpu(m);
            let landed = if m == shard.owner {
                start
            } else {
                send(e, server, cpu, shard.bytes, t(Phase::Pull), efficiency, &[start])
            };
            for g in gpus {
                let copy = send(e, cpu, Location::gpu(m, g), shard.bytes, t(Phase::Fanout), 1.0, &[landed]);
                done.push(copy);
            }
        } else {
            for g in gpus {
                let pull = send(
                    e,
                    server,
                    Location::gpu(m, g),
                    shard.bytes,
                    t(Phase::Pull),
                    efficiency,
                    &[start],
                );
                done.push(pull);
            }
        }
    }
    e.join(&done)
}

pub(crate) fn sorted_trace(mut messages: Vec<Message>, offset: f64) -> Vec<Message> {
    // stable: equal start times keep scheduling order
    messages.sort_by(|a, b| a.start_us.total_cmp(&b.start_us));
    if offset != 0.0 {
        for m in &mut messages {
            m.start_us += offset;
            m.end_us += offset;
        }
    }
    messages
}

fn single_gpu_cluster(machines: usize, cluster: &ClusterSpec) -> ClusterSpec {
    ClusterSpec {
        machines,
        gpus_per_machine: 1,
        ..cluster.clone()
    }
}

fn comm_run(schedule: Schedule, steps: usize, machines: usize) -> CommRun {
    let trace = sorted_trace(schedule.messages, 0.0);
    CommRun {
        duration_us: schedule.makespan,
        steps,
        per_machine_bytes: nic_traffic(&trace, machines),
        trace,
    }
}

/// Ring AllReduce of `bytes` among `n` single-GPU machines with the
/// bandwidth and latency of `cluster`.
pub fn simulate_ring_allreduce(bytes: u64, n: usize, cluster: &ClusterSpec) -> CommRun {
    let c = single_gpu_cluster(n, cluster);
    let mut e = Engine::new(&c, 1);
    let ranks: Vec<Location> = (0..n).map(|m| Location::gpu(m, 0)).collect();
    let start = e.join(&[]);
    ring_allreduce(&mut e, &ranks, bytes, "allreduce", 1.0, &vec![start; n]);
    comm_run(e.run(), 2 * n.saturating_sub(1), n)
}

/// Ring AllGatherv of `bytes_per_worker` from each of `n` single-GPU
/// machines.
pub fn simulate_allgatherv(bytes_per_worker: u64, n: usize, cluster: &ClusterSpec) -> CommRun {
    let c = single_gpu_cluster(n, cluster);
    let mut e = Engine::new(&c, 1);
    let ranks: Vec<Location> = (0..n).map(|m| Location::gpu(m, 0)).collect();
    let start = e.join(&[]);
    let payloads = vec![bytes_per_worker; n];
    allgatherv(&mut e, &ranks, &payloads, "allgatherv", 1.0, &vec![start; n]);
    comm_run(e.run(), n.saturating_sub(1), n)
}

/// Push then pull of every partition of a parameter-server variable, with
/// network costs only. Duration is the sum of the two phases.
pub fn simulate_ps_exchange(
    var: &VariableSpec,
    partition_set: &PartitionSet,
    plan: &DistributedPlan,
    cluster: &ClusterSpec,
) -> Result<CommRun, SimError> {
    let actual = plan
        .mechanism(&var.name)
        .ok_or_else(|| SimError::InvalidPlan(vec![format!("variable {} not in plan", var.name)]))?;
    if actual != Mechanism::ParameterServer {
        return Err(SimError::MechanismMismatch {
            variable: var.name.clone(),
            expected: Mechanism::ParameterServer,
            actual,
        });
    }
    if partition_set.variable != var.name {
        return Err(SimError::InvalidPlan(vec![format!(
            "partition set is for {}, not {}",
            partition_set.variable, var.name
        )]));
    }
    let homes = plan.homes();
    let bytes = var.partition_touched_bytes(partition_set.count());
    let mut shards = Vec::with_capacity(bytes.len());
    for (p, b) in bytes.into_iter().enumerate() {
        let owner = homes.get(&(var.name.clone(), p)).copied().ok_or_else(|| {
            SimError::InvalidPlan(vec![format!("no home for {}#{p}", var.name)])
        })?;
        shards.push(Shard {
            variable: &var.name,
            partition: p,
            bytes: b,
            owner,
        });
    }
    let local_agg = plan.local_agg_enabled;

    let mut push = Engine::new(cluster, 1);
    let start = push.join(&[]);
    for &s in &shards {
        ps_push(&mut push, cluster, s, local_agg, 0.0, 1.0, start);
    }
    let push = push.run();

    let mut pull = Engine::new(cluster, 1);
    let start = pull.join(&[]);
    for &s in &shards {
        ps_pull(&mut pull, cluster, s, local_agg, 1.0, start);
    }
    let pull = pull.run();

    let offset = push.makespan;
    let mut trace = sorted_trace(push.messages, 0.0);
    trace.extend(sorted_trace(pull.messages, offset));
    Ok(CommRun {
        duration_us: push.makespan + pull.makespan,
        steps: 2,
        per_machine_bytes: nic_traffic(&trace, cluster.machines),
        trace,
    })
}
