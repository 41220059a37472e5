//! Model, cluster and partitioning types, JSON ingestion, and sparsity metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::SpecError;

/// Whether every element of a variable is touched each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Dense,
    Sparse,
}

/// One trainable variable of the single-device model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub elements: u64,
    pub elem_bytes: u64,
    /// Average fraction of elements a worker reads and updates per iteration.
    pub alpha: f64,
    pub kind: VariableKind,
    #[serde(default)]
    pub partitionable: bool,
}

impl VariableSpec {
    pub fn dense(name: impl Into<String>, elements: u64, elem_bytes: u64) -> Self {
        Self {
            name: name.into(),
            elements,
            elem_bytes,
            alpha: 1.0,
            kind: VariableKind::Dense,
            partitionable: false,
        }
    }

    pub fn sparse(name: impl Into<String>, elements: u64, elem_bytes: u64, alpha: f64) -> Self {
        Self {
            name: name.into(),
            elements,
            elem_bytes,
            alpha,
            kind: VariableKind::Sparse,
            partitionable: true,
        }
    }

    pub fn with_partitionable(mut self, partitionable: bool) -> Self {
        self.partitionable = partitionable;
        self
    }

    pub fn is_sparse(&self) -> bool {
        self.kind == VariableKind::Sparse
    }

    /// Full variable size in bytes (`w`).
    pub fn size_bytes(&self) -> u64 {
        self.elements * self.elem_bytes
    }

    /// Elements a worker touches per iteration, rounded to whole elements and
    /// never below one. Dense variables touch all of them.
    pub fn touched_elements(&self) -> u64 {
        match self.kind {
            VariableKind::Dense => self.elements,
            VariableKind::Sparse => {
                let touched = (self.alpha * self.elements as f64).round() as u64;
                touched.clamp(1, self.elements)
            }
        }
    }

    /// Bytes exchanged per worker per iteration (`αw`). Index arrays are not
    /// counted.
    pub fn touched_bytes(&self) -> u64 {
        self.touched_elements() * self.elem_bytes
    }

    /// Touched bytes of each piece when the variable is split `count` ways.
    pub fn partition_touched_bytes(&self, count: usize) -> Vec<u64> {
        even_split(self.touched_elements(), count)
            .into_iter()
            .map(|e| e * self.elem_bytes)
            .collect()
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let field = |f: &str| format!("variables[{}].{f}", self.name);
        if self.name.is_empty() {
            return Err(SpecError::invalid("variables[].name", "must not be empty"));
        }
        if self.elements == 0 {
            return Err(SpecError::invalid(field("elements"), "must be at least 1"));
        }
        if self.elem_bytes == 0 {
            return Err(SpecError::invalid(field("elem_bytes"), "must be at least 1"));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha > 1.0 {
            return Err(SpecError::invalid(
                field("alpha"),
                format!("must lie in (0, 1], got {}", self.alpha),
            ));
        }
        if self.kind == VariableKind::Dense && self.alpha != 1.0 {
            return Err(SpecError::invalid(
                field("alpha"),
                format!("dense variables require alpha = 1, got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Single-device model: its variables and per-GPU compute cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub name: String,
    /// Items (images, sentences) each GPU processes per iteration.
    #[serde(default = "default_batch")]
    pub batch_per_gpu: u64,
    pub compute_us_per_gpu: f64,
    pub variables: Vec<VariableSpec>,
}

fn default_batch() -> u64 {
    1
}

impl GraphSpec {
    pub fn new(
        name: impl Into<String>,
        compute_us_per_gpu: f64,
        variables: Vec<VariableSpec>,
    ) -> Result<Self, SpecError> {
        let graph = Self {
            name: name.into(),
            batch_per_gpu: 1,
            compute_us_per_gpu,
            variables,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.name.is_empty() {
            return Err(SpecError::invalid("name", "must not be empty"));
        }
        if !self.compute_us_per_gpu.is_finite() || self.compute_us_per_gpu < 0.0 {
            return Err(SpecError::invalid(
                "compute_us_per_gpu",
                "must be a non-negative number",
            ));
        }
        if self.batch_per_gpu == 0 {
            return Err(SpecError::invalid("batch_per_gpu", "must be at least 1"));
        }
        if self.variables.is_empty() {
            return Err(SpecError::invalid("variables", "at least one variable is required"));
        }
        let mut seen = HashSet::new();
        for var in &self.variables {
            var.validate()?;
            if !seen.insert(var.name.as_str()) {
                return Err(SpecError::invalid(
                    format!("variables[{}].name", var.name),
                    "duplicate variable name",
                ));
            }
        }
        Ok(())
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Number of variables (`m`).
    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn has_sparse(&self) -> bool {
        self.variables.iter().any(VariableSpec::is_sparse)
    }
}

/// Homogeneous GPU cluster description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Number of machines (`N`).
    pub machines: usize,
    pub gpus_per_machine: usize,
    /// Per-machine NIC bandwidth, each direction.
    pub nic_gbps: f64,
    pub latency_us: f64,
    pub intra_gbps: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    machines: usize,
    gpus_per_machine: usize,
    nic_gbps: f64,
    #[serde(default)]
    latency_us: Option<f64>,
    #[serde(default)]
    intra_gbps: Option<f64>,
}

/// Multiplier applied to `nic_gbps` when `intra_gbps` is omitted.
pub const DEFAULT_INTRA_FACTOR: f64 = 8.0;

impl ClusterSpec {
    pub fn new(machines: usize, gpus_per_machine: usize, nic_gbps: f64) -> Self {
        Self {
            machines,
            gpus_per_machine,
            nic_gbps,
            latency_us: 0.0,
            intra_gbps: nic_gbps * DEFAULT_INTRA_FACTOR,
        }
    }

    pub fn with_latency(mut self, latency_us: f64) -> Self {
        self.latency_us = latency_us;
        self
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.machines == 0 {
            return Err(SpecError::invalid("machines", "must be at least 1"));
        }
        if self.gpus_per_machine == 0 {
            return Err(SpecError::invalid("gpus_per_machine", "must be at least 1"));
        }
        if !(self.nic_gbps.is_finite() && self.nic_gbps > 0.0) {
            return Err(SpecError::invalid("nic_gbps", "must be positive"));
        }
        if !(self.intra_gbps.is_finite() && self.intra_gbps > 0.0) {
            return Err(SpecError::invalid("intra_gbps", "must be positive"));
        }
        if !(self.latency_us.is_finite() && self.latency_us >= 0.0) {
            return Err(SpecError::invalid("latency_us", "must be non-negative"));
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> usize {
        self.machines * self.gpus_per_machine
    }

    /// NIC bandwidth in bytes per microsecond.
    pub fn nic_bytes_per_us(&self) -> f64 {
        gbps_to_bytes_per_us(self.nic_gbps)
    }

    pub fn intra_bytes_per_us(&self) -> f64 {
        gbps_to_bytes_per_us(self.intra_gbps)
    }
}

fn gbps_to_bytes_per_us(gbps: f64) -> f64 {
    // 1 Gbit/s = 1e9 / 8 bytes per 1e6 us
    gbps * 125.0
}

/// Parses and validates a graph document.
pub fn load_graph_spec(text: &str) -> Result<GraphSpec, SpecError> {
    let graph: GraphSpec = serde_json::from_str(text)?;
    graph.validate()?;
    Ok(graph)
}

/// Parses and validates a cluster document, filling optional fields.
pub fn load_cluster_spec(text: &str) -> Result<ClusterSpec, SpecError> {
    let doc: ClusterDoc = serde_json::from_str(text)?;
    let cluster = ClusterSpec {
        machines: doc.machines,
        gpus_per_machine: doc.gpus_per_machine,
        nic_gbps: doc.nic_gbps,
        latency_us: doc.latency_us.unwrap_or(0.0),
        intra_gbps: doc
            .intra_gbps
            .unwrap_or(doc.nic_gbps * DEFAULT_INTRA_FACTOR),
    };
    cluster.validate()?;
    Ok(cluster)
}

/// Element-weighted mean of per-variable alpha (`α_model`).
pub fn model_alpha(graph: &GraphSpec) -> f64 {
    let (weighted, total) = graph
        .variables
        .iter()
        .fold((0.0, 0.0), |(w, t), v| {
            let n = v.elements as f64;
            (w + n * v.alpha, t + n)
        });
    if total == 0.0 {
        return 1.0;
    }
    weighted / total
}

/// One contiguous piece of a partitioned variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub index: usize,
    pub elements: u64,
}

/// Even split of a variable into `P` pieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub variable: String,
    pub partitions: Vec<Partition>,
}

impl PartitionSet {
    pub fn count(&self) -> usize {
        self.partitions.len()
    }

    pub fn total_elements(&self) -> u64 {
        self.partitions.iter().map(|p| p.elements).sum()
    }
}

/// Splits `total` into `parts` near-equal shares; the first `total % parts`
/// shares are one larger.
pub fn even_split(total: u64, parts: usize) -> Vec<u64> {
    assert!(parts > 0, "even_split needs at least one part");
    let parts_u = parts as u64;
    let base = total / parts_u;
    let extra = (total % parts_u) as usize;
    (0..parts)
        .map(|i| base + u64::from(i < extra))
        .collect()
}

pub fn partition_variable(var: &VariableSpec, count: usize) -> Result<PartitionSet, SpecError> {
    if count == 0 || count as u64 > var.elements {
        return Err(SpecError::PartitionCount {
            variable: var.name.clone(),
            count,
            reason: format!("must lie in [1, {}]", var.elements),
        });
    }
    if count > 1 && !var.partitionable {
        return Err(SpecError::PartitionCount {
            variable: var.name.clone(),
            count,
            reason: "variable is not partitionable".into(),
        });
    }
    let partitions = even_split(var.elements, count)
        .into_iter()
        .enumerate()
        .map(|(index, elements)| Partition { index, elements })
        .collect();
    Ok(PartitionSet {
        variable: var.name.clone(),
        partitions,
    })
}

/// Per-worker share of a dataset of `total_items`.
pub fn shard_count(total_items: u64, workers: usize) -> Vec<u64> {
    even_split(total_items, workers.max(1))
}
