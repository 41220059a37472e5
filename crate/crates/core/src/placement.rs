//! Graph transformation from a single-device model to a placed, distributed
//! plan under AllReduce, parameter-server, or hybrid synchronization.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SpecError;
use crate::graph::{partition_variable, ClusterSpec, GraphSpec, VariableKind, VariableSpec};

/// How one variable's gradients are synchronized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "ar")]
    AllReduce,
    #[serde(rename = "ps")]
    ParameterServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Ar,
    PsNaive,
    PsOpt,
    Hybrid,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Ar,
        Architecture::PsNaive,
        Architecture::PsOpt,
        Architecture::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Ar => "ar",
            Architecture::PsNaive => "ps-naive",
            Architecture::PsOpt => "ps-opt",
            Architecture::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Gpu(usize),
    /// Host CPU; parameter servers and aggregation buffers live here.
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub machine: usize,
    pub device: Device,
}

impl Location {
    pub fn gpu(machine: usize, gpu: usize) -> Self {
        Self {
            machine,
            device: Device::Gpu(gpu),
        }
    }

    pub fn cpu(machine: usize) -> Self {
        Self {
            machine,
            device: Device::Cpu,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.device {
            Device::Gpu(g) => write!(f, "m{}/gpu{}", self.machine, g),
            Device::Cpu => write!(f, "m{}/cpu", self.machine),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    ModelReplica,
    GradProducer,
    Allreduce,
    Allgatherv,
    LocalAgg,
    GlobalAgg,
    Accumulator,
    Update,
    VariableHome,
    ReplicaVariable,
}

impl NodeRole {
    fn as_str(self) -> &'static str {
        match self {
            NodeRole::ModelReplica => "model_replica",
            NodeRole::GradProducer => "grad_producer",
            NodeRole::Allreduce => "allreduce",
            NodeRole::Allgatherv => "allgatherv",
            NodeRole::LocalAgg => "local_agg",
            NodeRole::GlobalAgg => "global_agg",
            NodeRole::Accumulator => "accumulator",
            NodeRole::Update => "update",
            NodeRole::VariableHome => "variable_home",
            NodeRole::ReplicaVariable => "replica_variable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedNode {
    pub id: String,
    pub role: NodeRole,
    pub location: Location,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<usize>,
    /// Set on the one model replica that triggers parameter-server updates.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub chief: bool,
}

impl PlacedNode {
    fn new(
        role: NodeRole,
        location: Location,
        variable: Option<&str>,
        partition: Option<usize>,
    ) -> Self {
        let mut id = role.as_str().to_string();
        if let Some(v) = variable {
            id.push(':');
            id.push_str(v);
        }
        if let Some(p) = partition {
            id.push_str(&format!("#{p}"));
        }
        id.push('@');
        id.push_str(&location.to_string());
        Self {
            id,
            role,
            location,
            variable: variable.map(str::to_string),
            partition,
            chief: false,
        }
    }
}

/// Chief worker coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChiefWorker {
    pub machine: usize,
    pub gpu: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributedPlan {
    pub architecture: Architecture,
    pub nodes: Vec<PlacedNode>,
    pub mech_of: BTreeMap<String, Mechanism>,
    pub partitions_of: BTreeMap<String, usize>,
    pub chief: ChiefWorker,
    pub local_agg_enabled: bool,
}

impl DistributedPlan {
    /// Owner machine of every parameter-server `(variable, partition)`.
    pub fn homes(&self) -> BTreeMap<(String, usize), usize> {
        self.nodes
            .iter()
            .filter(|n| n.role == NodeRole::VariableHome)
            .filter_map(|n| {
                Some((
                    (n.variable.clone()?, n.partition.unwrap_or(0)),
                    n.location.machine,
                ))
            })
            .collect()
    }

    pub fn mechanism(&self, variable: &str) -> Option<Mechanism> {
        self.mech_of.get(variable).copied()
    }

    pub fn partitions(&self, variable: &str) -> usize {
        self.partitions_of.get(variable).copied().unwrap_or(1)
    }

    /// Whether `var` is reduced with a dense ring. The hybrid transform
    /// converts sparse variables it assigns to AllReduce into dense ones;
    /// the pure AR architecture gathers sparse gradients instead.
    pub fn dense_allreduce(&self, var: &VariableSpec) -> bool {
        self.mechanism(&var.name) == Some(Mechanism::AllReduce)
            && (!var.is_sparse() || self.architecture == Architecture::Hybrid)
    }

    /// Bytes of variable state homed on each server (by full, not touched,
    /// size).
    pub fn homed_bytes(&self, graph: &GraphSpec, machines: usize) -> Vec<u64> {
        let mut loads = vec![0u64; machines];
        for ((name, index), machine) in self.homes() {
            let Some(var) = graph.variable(&name) else { continue };
            let parts = self.partitions(&name);
            let sizes = crate::graph::even_split(var.elements, parts);
            if let (Some(elements), Some(load)) = (sizes.get(index), loads.get_mut(machine)) {
                *load += elements * var.elem_bytes;
            }
        }
        loads
    }
}

/// Relative implementation efficiency of the two mechanisms; larger means
/// slower per byte. Used both for per-variable mechanism choice and by the
/// simulator as a per-byte time multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismPolicy {
    pub eff_ar: f64,
    pub eff_ps: f64,
}

impl Default for MechanismPolicy {
    fn default() -> Self {
        Self {
            eff_ar: 1.0,
            eff_ps: 1.0,
        }
    }
}

impl MechanismPolicy {
    pub fn efficiency(&self, mech: Mechanism) -> f64 {
        match mech {
            Mechanism::AllReduce => self.eff_ar,
            Mechanism::ParameterServer => self.eff_ps,
        }
    }
}

/// Chooses AllReduce for dense variables and for sparse ones whose dense
/// treatment is cheaper under `policy`; parameter server otherwise.
pub fn assign_mechanism(
    var: &VariableSpec,
    cluster: &ClusterSpec,
    policy: &MechanismPolicy,
) -> Mechanism {
    if var.kind == VariableKind::Dense || cluster.machines <= 1 {
        return Mechanism::AllReduce;
    }
    let n = cluster.machines as f64;
    let w = var.size_bytes() as f64;
    let spread = (n - 1.0) / n;
    let dense_ar = policy.eff_ar * 4.0 * w * spread;
    let sparse_ps = policy.eff_ps * 4.0 * var.alpha * w * spread;
    if dense_ar < sparse_ps {
        Mechanism::AllReduce
    } else {
        Mechanism::ParameterServer
    }
}

pub fn transform_ar(graph: &GraphSpec, cluster: &ClusterSpec) -> DistributedPlan {
    let mech_of = graph
        .variables
        .iter()
        .map(|v| (v.name.clone(), Mechanism::AllReduce))
        .collect();
    build_plan(graph, cluster, Architecture::Ar, mech_of, &BTreeMap::new(), false)
        .expect("AllReduce plans never partition")
}

pub fn transform_ps(
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    local_agg: bool,
    partitions: &BTreeMap<String, usize>,
) -> Result<DistributedPlan, SpecError> {
    let mech_of = graph
        .variables
        .iter()
        .map(|v| (v.name.clone(), Mechanism::ParameterServer))
        .collect();
    let arch = if local_agg {
        Architecture::PsOpt
    } else {
        Architecture::PsNaive
    };
    build_plan(graph, cluster, arch, mech_of, partitions, local_agg)
}

/// AllReduce for variables `assign_mechanism` sends there, optimized
/// parameter server for the rest. Without parameter-server variables the
/// plan is the AllReduce plan under a different label.
pub fn transform_hybrid(
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    policy: &MechanismPolicy,
    partitions: &BTreeMap<String, usize>,
) -> Result<DistributedPlan, SpecError> {
    let mech_of: BTreeMap<String, Mechanism> = graph
        .variables
        .iter()
        .map(|v| (v.name.clone(), assign_mechanism(v, cluster, policy)))
        .collect();
    let any_ps = mech_of.values().any(|&m| m == Mechanism::ParameterServer);
    build_plan(graph, cluster, Architecture::Hybrid, mech_of, partitions, any_ps)
}

pub fn transform(
    architecture: Architecture,
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    policy: &MechanismPolicy,
    partitions: &BTreeMap<String, usize>,
) -> Result<DistributedPlan, SpecError> {
    match architecture {
        Architecture::Ar => Ok(transform_ar(graph, cluster)),
        Architecture::PsNaive => transform_ps(graph, cluster, false, partitions),
        Architecture::PsOpt => transform_ps(graph, cluster, true, partitions),
        Architecture::Hybrid => transform_hybrid(graph, cluster, policy, partitions),
    }
}

/// Sets every partitionable sparse variable to `count` partitions, clamped to
/// its element count.
pub fn uniform_partitions(graph: &GraphSpec, count: usize) -> BTreeMap<String, usize> {
    graph
        .variables
        .iter()
        .filter(|v| v.is_sparse() && v.partitionable)
        .map(|v| (v.name.clone(), count.clamp(1, v.elements as usize)))
        .collect()
}

fn build_plan(
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    architecture: Architecture,
    mech_of: BTreeMap<String, Mechanism>,
    requested: &BTreeMap<String, usize>,
    local_agg: bool,
) -> Result<DistributedPlan, SpecError> {
    let chief = ChiefWorker { machine: 0, gpu: 0 };
    let mut nodes = Vec::new();
    for m in 0..cluster.machines {
        for g in 0..cluster.gpus_per_machine {
            let loc = Location::gpu(m, g);
            let mut replica = PlacedNode::new(NodeRole::ModelReplica, loc, None, None);
            replica.chief = (m, g) == (chief.machine, chief.gpu);
            nodes.push(replica);
            nodes.push(PlacedNode::new(NodeRole::GradProducer, loc, None, None));
        }
    }

    let mut partitions_of = BTreeMap::new();
    let mut ps_vars = Vec::new();
    for var in &graph.variables {
        match mech_of[&var.name] {
            Mechanism::AllReduce => {
                partitions_of.insert(var.name.clone(), 1);
                let collective = match var.kind {
                    VariableKind::Dense => NodeRole::Allreduce,
                    VariableKind::Sparse => NodeRole::Allgatherv,
                };
                for m in 0..cluster.machines {
                    for g in 0..cluster.gpus_per_machine {
                        let loc = Location::gpu(m, g);
                        let name = Some(var.name.as_str());
                        nodes.push(PlacedNode::new(NodeRole::ReplicaVariable, loc, name, None));
                        nodes.push(PlacedNode::new(collective, loc, name, None));
                        nodes.push(PlacedNode::new(NodeRole::Update, loc, name, None));
                    }
                }
            }
            Mechanism::ParameterServer => {
                let count = requested.get(&var.name).copied().unwrap_or(1);
                // validates partitionability and range
                partition_variable(var, count)?;
                partitions_of.insert(var.name.clone(), count);
                ps_vars.push((var, count));
            }
        }
    }

    let homes = assign_homes(&ps_vars, cluster.machines);
    for (var, count) in &ps_vars {
        let name = Some(var.name.as_str());
        for p in 0..*count {
            let owner = Location::cpu(homes[&(var.name.clone(), p)]);
            for role in [
                NodeRole::VariableHome,
                NodeRole::Accumulator,
                NodeRole::GlobalAgg,
                NodeRole::Update,
            ] {
                nodes.push(PlacedNode::new(role, owner, name, Some(p)));
            }
            if local_agg {
                for m in 0..cluster.machines {
                    nodes.push(PlacedNode::new(
                        NodeRole::LocalAgg,
                        Location::cpu(m),
                        name,
                        Some(p),
                    ));
                }
            }
        }
    }

    Ok(DistributedPlan {
        architecture,
        nodes,
        mech_of,
        partitions_of,
        chief,
        local_agg_enabled: local_agg,
    })
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Partitioned variables are dealt round-robin from a name-derived start;
/// whole variables then go largest-first onto the least-loaded server.
fn assign_homes(
    ps_vars: &[(&VariableSpec, usize)],
    servers: usize,
) -> HashMap<(String, usize), usize> {
    let mut loads = vec![0u64; servers];
    let mut homes = HashMap::new();

    for (var, count) in ps_vars.iter().filter(|(_, c)| *c > 1) {
        let start = (name_hash(&var.name) % servers as u64) as usize;
        let sizes = crate::graph::even_split(var.elements, *count);
        for (p, elements) in sizes.into_iter().enumerate() {
            let server = (start + p) % servers;
            loads[server] += elements * var.elem_bytes;
            homes.insert((var.name.clone(), p), server);
        }
    }

    let mut whole: Vec<&VariableSpec> = ps_vars
        .iter()
        .filter(|(_, c)| *c == 1)
        .map(|(v, _)| *v)
        .collect();
    whole.sort_by(|a, b| {
        b.size_bytes()
            .cmp(&a.size_bytes())
            .then_with(|| a.name.cmp(&b.name))
    });
    for var in whole {
        let server = (0..servers)
            .min_by_key(|&s| (loads[s], s))
            .expect("at least one server");
        loads[server] += var.size_bytes();
        homes.insert((var.name.clone(), 0), server);
    }
    homes
}

/// Checks structural invariants of a plan; returns one message per violation.
pub fn validate_plan(
    plan: &DistributedPlan,
    graph: &GraphSpec,
    cluster: &ClusterSpec,
) -> Vec<String> {
    let mut violations = Vec::new();
    let machines = cluster.machines;
    let gpus = cluster.gpus_per_machine;

    for node in &plan.nodes {
        let loc = node.location;
        let in_range = loc.machine < machines
            && match loc.device {
                Device::Gpu(g) => g < gpus,
                Device::Cpu => true,
            };
        if !in_range {
            violations.push(format!("node {} placed outside the cluster", node.id));
        }
        let needs_var = matches!(
            node.role,
            NodeRole::Update
                | NodeRole::GlobalAgg
                | NodeRole::Accumulator
                | NodeRole::VariableHome
                | NodeRole::LocalAgg
                | NodeRole::Allreduce
                | NodeRole::Allgatherv
                | NodeRole::ReplicaVariable
        );
        match &node.variable {
            None if needs_var => {
                violations.push(format!("node {} must name a variable", node.id))
            }
            Some(v) if graph.variable(v).is_none() => {
                violations.push(format!("node {} refers to unknown variable {v}", node.id))
            }
            _ => {}
        }
    }

    // replicas and gradient producers, one per GPU
    for role in [NodeRole::ModelReplica, NodeRole::GradProducer] {
        let mut per_gpu: HashMap<Location, usize> = HashMap::new();
        for n in plan.nodes.iter().filter(|n| n.role == role) {
            *per_gpu.entry(n.location).or_default() += 1;
        }
        for m in 0..machines {
            for g in 0..gpus {
                let c = per_gpu.get(&Location::gpu(m, g)).copied().unwrap_or(0);
                if c != 1 {
                    violations.push(format!(
                        "expected exactly one {} on m{m}/gpu{g}, found {c}",
                        role.as_str()
                    ));
                }
            }
        }
    }

    let chiefs: Vec<&PlacedNode> = plan.nodes.iter().filter(|n| n.chief).collect();
    if chiefs.len() != 1 {
        violations.push(format!("exactly one chief required, found {}", chiefs.len()));
    } else {
        let c = chiefs[0];
        let declared = Location::gpu(plan.chief.machine, plan.chief.gpu);
        if c.role != NodeRole::ModelReplica || c.location != declared {
            violations.push(format!(
                "chief flag on {} does not match declared chief {declared}",
                c.id
            ));
        }
    }

    // index nodes by (variable, partition, role)
    let mut by_key: HashMap<(&str, Option<usize>, NodeRole), Vec<&PlacedNode>> = HashMap::new();
    for n in &plan.nodes {
        if let Some(v) = &n.variable {
            by_key
                .entry((v.as_str(), n.partition, n.role))
                .or_default()
                .push(n);
        }
    }
    let nodes_of = |v: &str, p: Option<usize>, r: NodeRole| {
        by_key.get(&(v, p, r)).cloned().unwrap_or_default()
    };

    for var in &graph.variables {
        let name = var.name.as_str();
        let Some(mech) = plan.mechanism(name) else {
            violations.push(format!("variable {name} has no mechanism"));
            continue;
        };
        let parts = plan.partitions(name);
        match mech {
            Mechanism::AllReduce => {
                if parts != 1 {
                    violations.push(format!("AllReduce variable {name} must not be partitioned"));
                }
                let collective = match var.kind {
                    VariableKind::Dense => NodeRole::Allreduce,
                    VariableKind::Sparse => NodeRole::Allgatherv,
                };
                for role in [collective, NodeRole::ReplicaVariable, NodeRole::Update] {
                    let mut per_gpu: HashMap<Location, usize> = HashMap::new();
                    for n in nodes_of(name, None, role) {
                        *per_gpu.entry(n.location).or_default() += 1;
                    }
                    let ok = per_gpu.len() == machines * gpus
                        && per_gpu
                            .iter()
                            .all(|(l, c)| *c == 1 && matches!(l.device, Device::Gpu(_)));
                    if !ok {
                        violations.push(format!(
                            "AllReduce variable {name} needs one {} per GPU",
                            role.as_str()
                        ));
                    }
                }
                let stray = plan.nodes.iter().any(|n| {
                    n.variable.as_deref() == Some(name)
                        && (matches!(
                            n.role,
                            NodeRole::VariableHome
                                | NodeRole::Accumulator
                                | NodeRole::GlobalAgg
                                | NodeRole::LocalAgg
                        ) || (n.role != collective
                            && matches!(n.role, NodeRole::Allreduce | NodeRole::Allgatherv)))
                });
                if stray {
                    violations.push(format!(
                        "AllReduce variable {name} has server-side or mismatched aggregation nodes"
                    ));
                }
            }
            Mechanism::ParameterServer => {
                if parts == 0 || parts as u64 > var.elements || (parts > 1 && !var.partitionable) {
                    violations.push(format!("invalid partition count {parts} for {name}"));
                }
                for p in 0..parts {
                    let mut machine_of = Vec::new();
                    for role in [
                        NodeRole::VariableHome,
                        NodeRole::Accumulator,
                        NodeRole::GlobalAgg,
                        NodeRole::Update,
                    ] {
                        let found = nodes_of(name, Some(p), role);
                        if found.len() != 1 {
                            violations.push(format!(
                                "{name}#{p} needs exactly one {}, found {}",
                                role.as_str(),
                                found.len()
                            ));
                        }
                        machine_of.extend(found.iter().map(|n| (role, n.location)));
                    }
                    if let Some(&(_, home)) = machine_of.first() {
                        for (role, loc) in &machine_of[1..] {
                            if loc.machine != home.machine {
                                violations.push(format!(
                                    "colocation: {} of {name}#{p} on m{} but variable on m{}",
                                    role.as_str(),
                                    loc.machine,
                                    home.machine
                                ));
                            }
                        }
                    }
                    let locals = nodes_of(name, Some(p), NodeRole::LocalAgg);
                    if plan.local_agg_enabled {
                        let mut per_machine = vec![0usize; machines];
                        for n in locals {
                            if let Some(c) = per_machine.get_mut(n.location.machine) {
                                *c += 1;
                            }
                        }
                        if per_machine.iter().any(|&c| c != 1) {
                            violations.push(format!(
                                "{name}#{p} needs one local_agg per machine"
                            ));
                        }
                    } else if !locals.is_empty() {
                        violations.push(format!(
                            "{name}#{p} has local_agg nodes but local aggregation is disabled"
                        ));
                    }
                }
                let collective = plan.nodes.iter().any(|n| {
                    n.variable.as_deref() == Some(name)
                        && matches!(
                            n.role,
                            NodeRole::Allreduce | NodeRole::Allgatherv | NodeRole::ReplicaVariable
                        )
                });
                if collective {
                    violations.push(format!(
                        "parameter-server variable {name} also has collective nodes"
                    ));
                }
            }
        }
    }
    for name in plan.mech_of.keys() {
        if graph.variable(name).is_none() {
            violations.push(format!("plan assigns a mechanism to unknown variable {name}"));
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster(n: usize, g: usize) -> ClusterSpec {
        ClusterSpec::new(n, g, 100.0)
    }

    fn lm() -> GraphSpec {
        GraphSpec::new(
            "lm",
            1000.0,
            vec![
                VariableSpec::dense("lstm", 9_400_000, 4),
                VariableSpec::sparse("embedding", 813_300_000, 4, 0.008673),
            ],
        )
        .unwrap()
    }

    fn count(plan: &DistributedPlan, role: NodeRole) -> usize {
        plan.nodes.iter().filter(|n| n.role == role).count()
    }

    #[test]
    fn ar_on_single_dense_variable() {
        let g = GraphSpec::new("r", 1.0, vec![VariableSpec::dense("w", 100, 4)]).unwrap();
        let plan = transform_ar(&g, &cluster(2, 1));
        assert_eq!(count(&plan, NodeRole::ModelReplica), 2);
        assert_eq!(count(&plan, NodeRole::Allreduce), 2);
        assert_eq!(count(&plan, NodeRole::VariableHome), 0);
        assert!(validate_plan(&plan, &g, &cluster(2, 1)).is_empty());

        let solo = transform_ar(&g, &cluster(1, 1));
        assert_eq!(count(&solo, NodeRole::ModelReplica), 1);
        assert_eq!(count(&solo, NodeRole::Allreduce), 1);
    }

    #[test]
    fn ar_on_lm_uses_allgatherv_for_sparse() {
        let g = lm();
        let c = cluster(8, 6);
        let plan = transform_ar(&g, &c);
        assert_eq!(count(&plan, NodeRole::ModelReplica), 48);
        let gathers: Vec<_> = plan
            .nodes
            .iter()
            .filter(|n| n.role == NodeRole::Allgatherv)
            .collect();
        assert_eq!(gathers.len(), 48);
        assert!(gathers.iter().all(|n| n.variable.as_deref() == Some("embedding")));
        assert_eq!(count(&plan, NodeRole::Allreduce), 48);
        assert!(plan.mech_of.values().all(|m| *m == Mechanism::AllReduce));
        assert!(validate_plan(&plan, &g, &c).is_empty());
    }

    #[test]
    fn ps_distributes_equal_variables_evenly() {
        let vars = (0..4).map(|i| VariableSpec::dense(format!("v{i}"), 1000, 4)).collect();
        let g = GraphSpec::new("four", 1.0, vars).unwrap();
        let c = cluster(2, 1);
        let plan = transform_ps(&g, &c, true, &BTreeMap::new()).unwrap();
        let mut per_server = [0; 2];
        for m in plan.homes().values() {
            per_server[*m] += 1;
        }
        assert_eq!(per_server, [2, 2]);
        assert!(validate_plan(&plan, &g, &c).is_empty());
    }

    #[test]
    fn ps_partitions_spread_two_per_server() {
        let g = GraphSpec::new("p", 1.0, vec![VariableSpec::sparse("e", 600, 4, 0.1)]).unwrap();
        let c = cluster(3, 1);
        let parts = BTreeMap::from([("e".to_string(), 6)]);
        let plan = transform_ps(&g, &c, true, &parts).unwrap();
        let mut per_server = [0; 3];
        for m in plan.homes().values() {
            per_server[*m] += 1;
        }
        assert_eq!(per_server, [2, 2, 2]);
        assert_eq!(count(&plan, NodeRole::GlobalAgg), 6);
        assert_eq!(count(&plan, NodeRole::Update), 6);
        assert!(validate_plan(&plan, &g, &c).is_empty());
    }

    #[test]
    fn local_agg_once_per_machine() {
        let g = GraphSpec::new("d", 1.0, vec![VariableSpec::dense("w", 10, 4)]).unwrap();
        let plan = transform_ps(&g, &cluster(2, 3), true, &BTreeMap::new()).unwrap();
        assert_eq!(count(&plan, NodeRole::LocalAgg), 2);
        let naive = transform_ps(&g, &cluster(2, 3), false, &BTreeMap::new()).unwrap();
        assert_eq!(count(&naive, NodeRole::LocalAgg), 0);
        assert_eq!(naive.architecture, Architecture::PsNaive);
    }

    #[test]
    fn ps_rejects_partitioning_fixed_variables() {
        let g = GraphSpec::new("d", 1.0, vec![VariableSpec::dense("w", 10, 4)]).unwrap();
        let parts = BTreeMap::from([("w".to_string(), 2)]);
        assert!(transform_ps(&g, &cluster(2, 1), true, &parts).is_err());
    }

    #[test]
    fn hybrid_on_lm_splits_mechanisms() {
        let g = lm();
        let c = cluster(8, 6);
        let plan = transform_hybrid(&g, &c, &MechanismPolicy::default(), &BTreeMap::new()).unwrap();
        assert_eq!(plan.mech_of["lstm"], Mechanism::AllReduce);
        assert_eq!(plan.mech_of["embedding"], Mechanism::ParameterServer);
        assert!(validate_plan(&plan, &g, &c).is_empty());
    }

    #[test]
    fn hybrid_on_dense_graph_matches_ar() {
        let g = GraphSpec::new(
            "dense",
            1.0,
            vec![VariableSpec::dense("a", 10, 4), VariableSpec::dense("b", 30, 4)],
        )
        .unwrap();
        let c = cluster(3, 2);
        let ar = transform_ar(&g, &c);
        let hy = transform_hybrid(&g, &c, &MechanismPolicy::default(), &BTreeMap::new()).unwrap();
        assert_eq!(ar.nodes, hy.nodes);
        assert_eq!(ar.mech_of, hy.mech_of);
    }

    #[test]
    fn hybrid_treats_nearly_dense_sparse_as_dense_when_ps_is_slower() {
        let g = GraphSpec::new("s", 1.0, vec![VariableSpec::sparse("e", 1000, 4, 0.99)]).unwrap();
        let c = cluster(4, 1);
        let policy = MechanismPolicy { eff_ar: 1.0, eff_ps: 1.2 };
        let plan = transform_hybrid(&g, &c, &policy, &BTreeMap::new()).unwrap();
        assert_eq!(plan.mech_of["e"], Mechanism::AllReduce);
        assert!(validate_plan(&plan, &g, &c).is_empty());
        // equal efficiencies keep it on the parameter server
        let plain = transform_hybrid(&g, &c, &MechanismPolicy::default(), &BTreeMap::new()).unwrap();
        assert_eq!(plain.mech_of["e"], Mechanism::ParameterServer);
    }

    #[test]
    fn mechanism_examples() {
        let c = cluster(8, 1);
        let policy = MechanismPolicy::default();
        assert_eq!(
            assign_mechanism(&VariableSpec::dense("d", 100, 4), &c, &policy),
            Mechanism::AllReduce
        );
        assert_eq!(
            assign_mechanism(&VariableSpec::sparse("s", 100, 4, 0.02), &c, &policy),
            Mechanism::ParameterServer
        );
        // 1.0 * 4w(N-1)/N < 1.2 * 0.99 * 4w(N-1)/N
        let slow_ps = MechanismPolicy { eff_ar: 1.0, eff_ps: 1.2 };
        assert_eq!(
            assign_mechanism(&VariableSpec::sparse("s", 100, 4, 0.99), &c, &slow_ps),
            Mechanism::AllReduce
        );
        assert_eq!(
            assign_mechanism(&VariableSpec::sparse("s", 100, 4, 0.02), &cluster(1, 4), &policy),
            Mechanism::AllReduce
        );
    }

    #[test]
    fn validation_catches_moved_update() {
        let g = GraphSpec::new("d", 1.0, vec![VariableSpec::dense("w", 10, 4)]).unwrap();
        let c = cluster(2, 1);
        let mut plan = transform_ps(&g, &c, true, &BTreeMap::new()).unwrap();
        let home = plan.homes()[&("w".to_string(), 0)];
        let update = plan
            .nodes
            .iter_mut()
            .find(|n| n.role == NodeRole::Update)
            .unwrap();
        update.location = Location::cpu(1 - home);
        let report = validate_plan(&plan, &g, &c);
        assert!(report.iter().any(|v| v.starts_with("colocation")), "{report:?}");
    }

    #[test]
    fn validation_catches_second_chief() {
        let g = GraphSpec::new("d", 1.0, vec![VariableSpec::dense("w", 10, 4)]).unwrap();
        let c = cluster(2, 2);
        let mut plan = transform_ar(&g, &c);
        plan.nodes
            .iter_mut()
            .filter(|n| n.role == NodeRole::ModelReplica)
            .nth(1)
            .unwrap()
            .chief = true;
        let report = validate_plan(&plan, &g, &c);
        assert!(report.iter().any(|v| v.contains("exactly one chief")), "{report:?}");
    }

    #[test]
    fn validation_catches_missing_replica() {
        let g = GraphSpec::new("d", 1.0, vec![VariableSpec::dense("w", 10, 4)]).unwrap();
        let c = cluster(2, 2);
        let mut plan = transform_ar(&g, &c);
        let idx = plan
            .nodes
            .iter()
            .rposition(|n| n.role == NodeRole::GradProducer)
            .unwrap();
        plan.nodes.remove(idx);
        assert!(!validate_plan(&plan, &g, &c).is_empty());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let g = lm();
        let c = cluster(2, 2);
        let parts = uniform_partitions(&g, 4);
        let plan = transform_hybrid(&g, &c, &MechanismPolicy::default(), &parts).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        let back: DistributedPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(plan, back);
    }

    fn arb_graph() -> impl Strategy<Value = GraphSpec> {
        prop::collection::vec(
            (1u64..5_000, 1u64..5, prop::bool::ANY, 0.01f64..=1.0, prop::bool::ANY),
            1..6,
        )
        .prop_map(|vars| {
            let variables = vars
                .into_iter()
                .enumerate()
                .map(|(i, (n, b, sparse, alpha, part))| {
                    if sparse {
                        VariableSpec::sparse(format!("s{i}"), n, b, alpha).with_partitionable(part)
                    } else {
                        VariableSpec::dense(format!("d{i}"), n, b)
                    }
                })
                .collect();
            GraphSpec::new("rand", 10.0, variables).unwrap()
        })
    }

    proptest! {
        #[test]
        fn transforms_always_validate(
            g in arb_graph(),
            n in 1usize..6,
            gpus in 1usize..4,
            p in 1usize..20,
            local in prop::bool::ANY,
        ) {
            let c = cluster(n, gpus);
            let parts = uniform_partitions(&g, p);
            let ar = transform_ar(&g, &c);
            prop_assert!(validate_plan(&ar, &g, &c).is_empty());
            let ps = transform_ps(&g, &c, local, &parts).unwrap();
            let report = validate_plan(&ps, &g, &c);
            prop_assert!(report.is_empty(), "{:?}", report);
            let hy = transform_hybrid(&g, &c, &MechanismPolicy::default(), &parts).unwrap();
            prop_assert!(validate_plan(&hy, &g, &c).is_empty());
        }

        #[test]
        fn homed_bytes_are_balanced(
            sizes in prop::collection::vec(1u64..10_000, 1..20),
            n in 1usize..6,
        ) {
            let vars = sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| VariableSpec::dense(format!("v{i}"), s, 4))
                .collect();
            let g = GraphSpec::new("b", 1.0, vars).unwrap();
            let c = cluster(n, 1);
            let plan = transform_ps(&g, &c, true, &BTreeMap::new()).unwrap();
            let loads = plan.homed_bytes(&g, n);
            let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
            let largest = sizes.iter().max().unwrap() * 4;
            prop_assert!(spread <= largest);
        }

        #[test]
        fn equal_divisible_variables_balance_exactly(k in 1usize..5, n in 1usize..6, size in 1u64..1000) {
            let vars = (0..k * n).map(|i| VariableSpec::dense(format!("v{i:02}"), size, 4)).collect();
            let g = GraphSpec::new("e", 1.0, vars).unwrap();
            let c = cluster(n, 1);
            let plan = transform_ps(&g, &c, true, &BTreeMap::new()).unwrap();
            let loads = plan.homed_bytes(&g, n);
            prop_assert!(loads.iter().all(|&l| l == loads[0]));
        }

        #[test]
        fn mechanism_is_monotone_in_alpha(
            a1 in 0.001f64..=1.0,
            a2 in 0.001f64..=1.0,
            eff_ar in 0.5f64..2.0,
            eff_ps in 0.5f64..2.0,
            n in 1usize..9,
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let c = cluster(n, 1);
            let policy = MechanismPolicy { eff_ar, eff_ps };
            let m_hi = assign_mechanism(&VariableSpec::sparse("x", 1000, 4, hi), &c, &policy);
            let m_lo = assign_mechanism(&VariableSpec::sparse("x", 1000, 4, lo), &c, &policy);
            if m_hi == Mechanism::ParameterServer {
                prop_assert_eq!(m_lo, Mechanism::ParameterServer);
            }
        }
    }
}
