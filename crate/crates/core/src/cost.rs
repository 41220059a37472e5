//! Closed-form per-machine network transfer for one training iteration.
//!
//! The analytic model assumes one worker per machine with a colocated
//! server. Per variable of size `w` bytes (`αw` touched bytes for sparse
//! variables) on `N` machines:
//!
//! | variable | mechanism | per-machine total |
//! |----------|-----------|-------------------|
//! | dense    | PS        | owner `2w(N-1)`, others `2w` |
//! | dense    | AR        | `4w(N-1)/N` |
//! | sparse   | PS        | owner `2αw(N-1)`, others `2αw` |
//! | sparse   | AR        | `2αw(N-1)` |
//!
//! Totals count both directions; egress and ingress are each half. Sparse
//! index arrays are not counted. Where `N` does not divide the dense
//! AllReduce payload the per-direction figure is rounded to the nearest byte.

use serde::{Deserialize, Serialize};

use crate::error::CostError;
use crate::graph::{ClusterSpec, GraphSpec, VariableKind, VariableSpec};
use crate::placement::{
    transform, Architecture, DistributedPlan, Mechanism, MechanismPolicy,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineTraffic {
    pub egress_bytes: u64,
    pub ingress_bytes: u64,
}

impl MachineTraffic {
    pub fn total(&self) -> u64 {
        self.egress_bytes + self.ingress_bytes
    }

    /// Busier direction; with a full-duplex NIC this bounds transfer time.
    pub fn peak(&self) -> u64 {
        self.egress_bytes.max(self.ingress_bytes)
    }
}

/// Per-machine network bytes for one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub per_machine: Vec<MachineTraffic>,
    pub bottleneck_machine: usize,
    /// Bytes put on the network (sum of egress, equal to sum of ingress).
    pub total_bytes: u64,
}

impl TransferReport {
    pub fn zeros(machines: usize) -> Self {
        Self::from_traffic(vec![MachineTraffic::default(); machines])
    }

    pub fn from_traffic(per_machine: Vec<MachineTraffic>) -> Self {
        let bottleneck_machine = per_machine
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.peak().cmp(&b.peak()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let total_bytes = per_machine.iter().map(|t| t.egress_bytes).sum();
        Self {
            per_machine,
            bottleneck_machine,
            total_bytes,
        }
    }

    pub fn bottleneck_bytes(&self) -> u64 {
        self.per_machine
            .get(self.bottleneck_machine)
            .map(MachineTraffic::peak)
            .unwrap_or(0)
    }

    pub fn total_ingress(&self) -> u64 {
        self.per_machine.iter().map(|t| t.ingress_bytes).sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.total_bytes == self.total_ingress()
    }

    pub fn merge(&self, other: &TransferReport) -> TransferReport {
        let n = self.per_machine.len().max(other.per_machine.len());
        let traffic = (0..n)
            .map(|i| {
                let a = self.per_machine.get(i).copied().unwrap_or_default();
                let b = other.per_machine.get(i).copied().unwrap_or_default();
                MachineTraffic {
                    egress_bytes: a.egress_bytes + b.egress_bytes,
                    ingress_bytes: a.ingress_bytes + b.ingress_bytes,
                }
            })
            .collect();
        TransferReport::from_traffic(traffic)
    }

    /// One CSV row per machine.
    pub fn to_csv(&self) -> String {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(["machine", "egress_bytes", "ingress_bytes", "total_bytes"])
            .expect("in-memory write");
        for (i, t) in self.per_machine.iter().enumerate() {
            out.write_record([
                i.to_string(),
                t.egress_bytes.to_string(),
                t.ingress_bytes.to_string(),
                t.total().to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(out.into_inner().expect("flush")).expect("ascii csv")
    }
}

/// Exchange of `bytes` per worker through a server on `owner`.
fn ps_traffic(bytes: u64, machines: usize, owner: usize) -> Vec<MachineTraffic> {
    let peers = machines as u64 - 1;
    (0..machines)
        .map(|m| {
            if m == owner {
                MachineTraffic {
                    egress_bytes: bytes * peers,
                    ingress_bytes: bytes * peers,
                }
            } else {
                MachineTraffic {
                    egress_bytes: bytes,
                    ingress_bytes: bytes,
                }
            }
        })
        .collect()
}

pub fn transfer_one_variable(
    var: &VariableSpec,
    mech: Mechanism,
    cluster: &ClusterSpec,
    owner: Option<usize>,
) -> Result<TransferReport, CostError> {
    transfer_bytes(var.kind, var.touched_bytes(), &var.name, mech, cluster, owner)
}

fn transfer_bytes(
    kind: VariableKind,
    bytes: u64,
    name: &str,
    mech: Mechanism,
    cluster: &ClusterSpec,
    owner: Option<usize>,
) -> Result<TransferReport, CostError> {
    let n = cluster.machines;
    if mech == Mechanism::ParameterServer {
        match owner {
            None => return Err(CostError::MissingOwner(name.to_string())),
            Some(o) if o >= n => {
                return Err(CostError::OwnerOutOfRange {
                    owner: o,
                    machines: n,
                })
            }
            _ => {}
        }
    }
    if n <= 1 {
        return Ok(TransferReport::zeros(n));
    }
    let peers = n as u64 - 1;
    let traffic = match (mech, kind) {
        (Mechanism::ParameterServer, _) => ps_traffic(bytes, n, owner.unwrap_or(0)),
        (Mechanism::AllReduce, VariableKind::Dense) => {
            // 2(N-1) ring steps of w/N each way, rounded to the nearest byte
            let n64 = n as u64;
            let each_way = (2 * bytes * peers + n64 / 2) / n64;
            vec![
                MachineTraffic {
                    egress_bytes: each_way,
                    ingress_bytes: each_way,
                };
                n
            ]
        }
        (Mechanism::AllReduce, VariableKind::Sparse) => vec![
            MachineTraffic {
                egress_bytes: bytes * peers,
                ingress_bytes: bytes * peers,
            };
            n
        ],
    };
    Ok(TransferReport::from_traffic(traffic))
}

/// Sums per-variable (and per-partition) transfer using the plan's
/// mechanisms and server placement.
pub fn transfer_model(
    graph: &GraphSpec,
    plan: &DistributedPlan,
    cluster: &ClusterSpec,
) -> Result<TransferReport, CostError> {
    let homes = plan.homes();
    let mut report = TransferReport::zeros(cluster.machines);
    for var in &graph.variables {
        let mech = plan
            .mechanism(&var.name)
            .ok_or_else(|| CostError::UnplacedVariable(var.name.clone()))?;
        match mech {
            Mechanism::AllReduce if plan.dense_allreduce(var) => {
                let r = transfer_bytes(
                    VariableKind::Dense,
                    var.size_bytes(),
                    &var.name,
                    mech,
                    cluster,
                    None,
                )?;
                report = report.merge(&r);
            }
            Mechanism::AllReduce => {
                let r = transfer_one_variable(var, mech, cluster, None)?;
                report = report.merge(&r);
            }
            Mechanism::ParameterServer => {
                let parts = plan.partitions(&var.name);
                for (p, bytes) in var.partition_touched_bytes(parts).into_iter().enumerate() {
                    let owner = homes
                        .get(&(var.name.clone(), p))
                        .copied()
                        .ok_or_else(|| CostError::UnplacedVariable(var.name.clone()))?;
                    let r = transfer_bytes(var.kind, bytes, &var.name, mech, cluster, Some(owner))?;
                    report = report.merge(&r);
                }
            }
        }
    }
    Ok(report)
}

/// Analytic row of an architecture comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureEstimate {
    pub architecture: Architecture,
    pub bottleneck_bytes: u64,
    /// Compute plus bottleneck bytes over NIC bandwidth.
    pub analytic_time_us: f64,
    pub transfer: TransferReport,
}

/// Analytic lower bound on iteration time for a transfer pattern.
pub fn analytic_time_us(graph: &GraphSpec, cluster: &ClusterSpec, report: &TransferReport) -> f64 {
    graph.compute_us_per_gpu + report.bottleneck_bytes() as f64 / cluster.nic_bytes_per_us()
}

pub fn compare_architectures(
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    policy: &MechanismPolicy,
    partitions: &std::collections::BTreeMap<String, usize>,
) -> Result<Vec<ArchitectureEstimate>, crate::Error> {
    Architecture::ALL
        .iter()
        .map(|&arch| {
            let plan = transform(arch, graph, cluster, policy, partitions)?;
            let transfer = transfer_model(graph, &plan, cluster)?;
            Ok(ArchitectureEstimate {
                architecture: arch,
                bottleneck_bytes: transfer.bottleneck_bytes(),
                analytic_time_us: analytic_time_us(graph, cluster, &transfer),
                transfer,
            })
        })
        .collect()
}
