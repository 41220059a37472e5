//! Task-graph discrete-event engine.
//!
//! Tasks become ready when all their dependencies finish and are started in
//! order of readiness (ties by insertion order). Each task then reserves the
//! resources it needs at the earliest instant they are all free:
//!
//! * a cross-machine transfer holds the sender's NIC egress port and the
//!   receiver's NIC ingress port for `bytes * efficiency / bandwidth`, then
//!   completes one link latency later;
//! * a same-machine transfer holds that machine's intra-node bus;
//! * CPU work takes the earliest-free worker thread of its machine;
//! * a delay holds nothing.
//!
//! Reservations are never reordered, so identical task graphs give identical
//! schedules.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::graph::ClusterSpec;
use crate::placement::Location;

use super::{Message, MessageTag};

pub(crate) type TaskId = usize;

#[derive(Debug, Clone)]
pub(crate) enum Work {
    Transfer {
        src: Location,
        dst: Location,
        bytes: u64,
        tag: MessageTag,
        /// Per-byte time multiplier of the synchronization mechanism.
        efficiency: f64,
    },
    /// Zero-cost control notification; recorded in the trace only.
    Control {
        src: Location,
        dst: Location,
        tag: MessageTag,
    },
    Cpu {
        machine: usize,
        us: f64,
    },
    Delay {
        us: f64,
    },
}

#[derive(Debug)]
struct Task {
    work: Work,
    deps: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ready(f64, TaskId);

impl Eq for Ready {}

impl Ord for Ready {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) struct Engine<'a> {
    cluster: &'a ClusterSpec,
    threads: usize,
    tasks: Vec<Task>,
}

#[derive(Debug)]
pub(crate) struct Schedule {
    #[cfg_attr(not(test), allow(dead_code))]
    pub finish: Vec<f64>,
    pub messages: Vec<Message>,
    /// Latest finish time, relative to the start; zero for an empty graph.
    pub makespan: f64,
}

impl<'a> Engine<'a> {
    pub fn new(cluster: &'a ClusterSpec, threads: usize) -> Self {
        Self {
            cluster,
            threads: threads.max(1),
            tasks: Vec::new(),
        }
    }

    pub fn add(&mut self, work: Work, deps: &[TaskId]) -> TaskId {
        debug_assert!(deps.iter().all(|&d| d < self.tasks.len()));
        self.tasks.push(Task {
            work,
            deps: deps.to_vec(),
        });
        self.tasks.len() - 1
    }

    /// A no-op that finishes when all `deps` have.
    pub fn join(&mut self, deps: &[TaskId]) -> TaskId {
        self.add(Work::Delay { us: 0.0 }, deps)
    }

    pub fn run(self) -> Schedule {
        let machines = self.cluster.machines;
        let nic = self.cluster.nic_bytes_per_us();
        let intra = self.cluster.intra_bytes_per_us();
        let latency = self.cluster.latency_us;

        let mut egress_free = vec![0.0f64; machines];
        let mut ingress_free = vec![0.0f64; machines];
        let mut bus_free = vec![0.0f64; machines];
        let mut cpu_free = vec![vec![0.0f64; self.threads]; machines];

        let n = self.tasks.len();
        let mut pending: Vec<usize> = self.tasks.iter().map(|t| t.deps.len()).collect();
        let mut successors: Vec<Vec<TaskId>> = vec![Vec::new(); n];
        for (id, task) in self.tasks.iter().enumerate() {
            for &d in &task.deps {
                successors[d].push(id);
            }
        }
        let mut ready_at = vec![0.0f64; n];
        let mut finish = vec![0.0f64; n];
        let mut heap: BinaryHeap<Reverse<Ready>> = pending
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 0)
            .map(|(id, _)| Reverse(Ready(0.0, id)))
            .collect();

        let mut messages = Vec::new();
        let mut makespan = 0.0f64;
        while let Some(Reverse(Ready(ready, id))) = heap.pop() {
            let done = match &self.tasks[id].work {
                Work::Transfer {
                    src,
                    dst,
                    bytes,
                    tag,
                    efficiency,
                } => {
                    let (start, end) = if src == dst {
                        (ready, ready)
                    } else if src.machine == dst.machine {
                        let m = src.machine;
                        let start = ready.max(bus_free[m]);
                        let end = start + *bytes as f64 / intra;
                        bus_free[m] = end;
                        (start, end)
                    } else {
                        let start = ready
                            .max(egress_free[src.machine])
                            .max(ingress_free[dst.machine]);
                        let busy = start + *bytes as f64 * efficiency / nic;
                        egress_free[src.machine] = busy;
                        ingress_free[dst.machine] = busy;
                        (start, busy + latency)
                    };
                    messages.push(Message {
                        src: *src,
                        dst: *dst,
                        bytes: *bytes,
                        tag: tag.clone(),
                        start_us: start,
                        end_us: end,
                    });
                    end
                }
                Work::Control { src, dst, tag } => {
                    messages.push(Message {
                        src: *src,
                        dst: *dst,
                        bytes: 0,
                        tag: tag.clone(),
                        start_us: ready,
                        end_us: ready,
                    });
                    ready
                }
                Work::Cpu { machine, us } => {
                    let slots = &mut cpu_free[*machine];
                    let (slot, free) = slots
                        .iter()
                        .copied()
                        .enumerate()
                        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                        .expect("at least one thread");
                    let end = ready.max(free) + us;
                    slots[slot] = end;
                    end
                }
                Work::Delay { us } => ready + us,
            };
            finish[id] = done;
            makespan = makespan.max(done);
            for &s in &successors[id] {
                ready_at[s] = ready_at[s].max(done);
                pending[s] -= 1;
                if pending[s] == 0 {
                    heap.push(Reverse(Ready(ready_at[s], s)));
                }
            }
        }
        debug_assert!(pending.iter().all(|&p| p == 0), "dependency cycle");
        Schedule {
            finish,
            messages,
            makespan,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Phase;

    fn tag() -> MessageTag {
        MessageTag {
            variable: "v".into(),
            partition: None,
            phase: Phase::Push,
        }
    }

    fn transfer(src: Location, dst: Location, bytes: u64) -> Work {
        Work::Transfer {
            src,
            dst,
            bytes,
            tag: tag(),
            efficiency: 1.0,
        }
    }

    #[test]
    fn transfers_share_egress_port() {
        // 12_500 bytes per us at 100 Gbps
        let c = ClusterSpec::new(3, 1, 100.0);
        let mut e = Engine::new(&c, 1);
        e.add(transfer(Location::cpu(0), Location::cpu(1), 12_500), &[]);
        e.add(transfer(Location::cpu(0), Location::cpu(2), 12_500), &[]);
        let s = e.run();
        assert_eq!(s.finish, vec![1.0, 2.0]);
        assert_eq!(s.makespan, 2.0);
    }

    #[test]
    fn distinct_ports_run_concurrently_and_pay_latency() {
        let c = ClusterSpec::new(4, 1, 100.0).with_latency(5.0);
        let mut e = Engine::new(&c, 1);
        e.add(transfer(Location::cpu(0), Location::cpu(1), 12_500), &[]);
        e.add(transfer(Location::cpu(2), Location::cpu(3), 12_500), &[]);
        let zero = e.add(transfer(Location::cpu(1), Location::cpu(2), 0), &[]);
        let s = e.run();
        assert_eq!(s.finish[0], 6.0);
        assert_eq!(s.finish[1], 6.0);
        // zero-size messages cost latency only
        assert_eq!(s.finish[zero], 5.0);
    }

    #[test]
    fn dependencies_and_cpu_threads() {
        let c = ClusterSpec::new(1, 1, 100.0);
        let mut e = Engine::new(&c, 2);
        let a = e.add(Work::Cpu { machine: 0, us: 4.0 }, &[]);
        let b = e.add(Work::Cpu { machine: 0, us: 4.0 }, &[]);
        let d = e.add(Work::Cpu { machine: 0, us: 4.0 }, &[]);
        let j = e.join(&[a, b, d]);
        let after = e.add(Work::Delay { us: 1.0 }, &[j]);
        let s = e.run();
        assert_eq!(s.finish[d], 8.0);
        assert_eq!(s.finish[after], 9.0);
    }

    #[test]
    fn intra_transfers_use_the_bus_without_latency() {
        let c = ClusterSpec::new(1, 2, 100.0).with_latency(50.0);
        let mut e = Engine::new(&c, 1);
        // intra defaults to 8x NIC: 100_000 bytes per us
        e.add(transfer(Location::gpu(0, 0), Location::gpu(0, 1), 100_000), &[]);
        e.add(transfer(Location::gpu(0, 1), Location::cpu(0), 100_000), &[]);
        let s = e.run();
        assert_eq!(s.finish, vec![1.0, 2.0]);
    }
}
