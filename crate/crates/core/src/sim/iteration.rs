use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;
use crate::graph::{ClusterSpec, GraphSpec, VariableSpec};
use crate::placement::{validate_plan, DistributedPlan, Location, Mechanism};

use super::collectives::{
    hierarchical_allgatherv, hierarchical_allreduce, ps_pull, ps_push, sorted_trace, tag, Shard,
};
use super::engine::{Engine, Work};
use super::{nic_traffic, ComputeProfile, IterationPhase, IterationStats, Phase, TrainingRun};

const MB: f64 = 1e6;

enum Sync<'a> {
    DenseRing(&'a VariableSpec),
    SparseGather(&'a VariableSpec),
    Server(&'a VariableSpec, Vec<Shard<'a>>),
}

fn sync_plan<'a>(
    plan: &'a DistributedPlan,
    graph: &'a GraphSpec,
) -> Result<Vec<Sync<'a>>, SimError> {
    let homes = plan.homes();
    let mut out = Vec::with_capacity(graph.variables.len());
    for var in &graph.variables {
        let mech = plan
            .mechanism(&var.name)
            .ok_or_else(|| SimError::InvalidPlan(vec![format!("variable {} not in plan", var.name)]))?;
        let sync = match mech {
            Mechanism::AllReduce if plan.dense_allreduce(var) => Sync::DenseRing(var),
            Mechanism::AllReduce => Sync::SparseGather(var),
            Mechanism::ParameterServer => {
                let parts = plan.partitions(&var.name);
                let mut shards = Vec::with_capacity(parts);
                for (p, bytes) in var.partition_touched_bytes(parts).into_iter().enumerate() {
                    let owner = homes.get(&(var.name.clone(), p)).copied().ok_or_else(|| {
                        SimError::InvalidPlan(vec![format!("no home for {}#{p}", var.name)])
                    })?;
                    shards.push(Shard {
                        variable: &var.name,
                        partition: p,
                        bytes,
                        owner,
                    });
                }
                Sync::Server(var, shards)
            }
        };
        out.push(sync);
    }
    Ok(out)
}

fn agg_rate(var: &VariableSpec, profile: &ComputeProfile) -> f64 {
    if var.is_sparse() {
        profile.agg_us_per_mb
    } else {
        profile.dense_agg_us_per_mb
    }
}

/// Everything after compute, which does not vary between iterations.
struct Communication {
    exchange: f64,
    aggregate: f64,
    overhead: f64,
    pull: f64,
    stats: IterationStats,
}

impl Communication {
    fn after_compute(&self) -> f64 {
        self.exchange + self.aggregate + self.overhead + self.pull
    }
}

fn iter_time(compute: f64, comm: &Communication) -> f64 {
    compute + comm.after_compute()
}

fn communicate(
    plan: &DistributedPlan,
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    profile: &ComputeProfile,
) -> Result<Communication, SimError> {
    profile.validate()?;
    let violations = validate_plan(plan, graph, cluster);
    if !violations.is_empty() {
        return Err(SimError::InvalidPlan(violations));
    }
    let syncs = sync_plan(plan, graph)?;
    let n = cluster.machines as u64;
    let g = cluster.gpus_per_machine as u64;
    let threads = profile.server_threads;
    let eff_ar = profile.policy.efficiency(Mechanism::AllReduce);
    let eff_ps = profile.policy.efficiency(Mechanism::ParameterServer);
    let local_agg = plan.local_agg_enabled;

    let mut e = Engine::new(cluster, threads);
    let start = e.join(&[]);
    for sync in &syncs {
        match sync {
            Sync::DenseRing(var) => {
                hierarchical_allreduce(&mut e, cluster, var.size_bytes(), &var.name, eff_ar, start);
            }
            Sync::SparseGather(var) => {
                hierarchical_allgatherv(&mut e, cluster, var.touched_bytes(), &var.name, eff_ar, start);
            }
            Sync::Server(var, shards) => {
                for &s in shards {
                    let local_us = agg_rate(var, profile) * (g * s.bytes) as f64 / MB;
                    ps_push(&mut e, cluster, s, local_agg, local_us, eff_ps, start);
                }
            }
        }
    }
    let exchange = e.run();

    let chief = Location::gpu(plan.chief.machine, plan.chief.gpu);
    let contributions = if local_agg { n } else { n * g };
    let mut e = Engine::new(cluster, threads);
    let start = e.join(&[]);
    let mut gpu_agg_us = 0.0;
    for sync in &syncs {
        match sync {
            Sync::DenseRing(_) => {}
            Sync::SparseGather(var) => {
                gpu_agg_us += profile.agg_us_per_mb * (n * g * var.touched_bytes()) as f64 / MB;
            }
            Sync::Server(var, shards) => {
                let rate = agg_rate(var, profile);
                for s in shards {
                    let agg_us = rate * (contributions * s.bytes) as f64 / MB;
                    let agg = e.add(Work::Cpu { machine: s.owner, us: agg_us }, &[start]);
                    let trigger = e.add(
                        Work::Control {
                            src: chief,
                            dst: Location::cpu(s.owner),
                            tag: tag(s.variable, Some(s.partition), Phase::Update),
                        },
                        &[agg],
                    );
                    let update_us = rate * s.bytes as f64 / MB;
                    e.add(Work::Cpu { machine: s.owner, us: update_us }, &[trigger]);
                }
            }
        }
    }
    if gpu_agg_us > 0.0 {
        e.add(Work::Delay { us: gpu_agg_us }, &[start]);
    }
    let aggregate = e.run();

    let mut overhead = 0.0;
    for sync in &syncs {
        if let Sync::Server(var, shards) = sync {
            if var.is_sparse() {
                overhead += profile.partition_overhead_us * shards.len() as f64
                    + profile.stitch_us_per_mb * var.touched_bytes() as f64 / MB;
            }
        }
    }

    let mut e = Engine::new(cluster, threads);
    let start = e.join(&[]);
    for sync in &syncs {
        if let Sync::Server(_, shards) = sync {
            for &s in shards {
                ps_pull(&mut e, cluster, s, local_agg, eff_ps, start);
            }
        }
    }
    let pull = e.run();

    let compute = profile.compute_us_per_gpu;
    let (x, a, p) = (exchange.makespan, aggregate.makespan, pull.makespan);
    let mut trace = sorted_trace(exchange.messages, compute);
    trace.extend(sorted_trace(aggregate.messages, compute + x));
    trace.extend(sorted_trace(pull.messages, compute + x + a + overhead));
    let per_machine_bytes = nic_traffic(&trace, cluster.machines);

    let mut comm = Communication {
        exchange: x,
        aggregate: a,
        overhead,
        pull: p,
        stats: IterationStats {
            iter_time_us: 0.0,
            per_machine_bytes,
            phase_times: [
                (IterationPhase::Compute, compute),
                (IterationPhase::Exchange, x),
                (IterationPhase::Aggregate, a),
                (IterationPhase::Overhead, overhead),
                (IterationPhase::Pull, p),
            ]
            .into_iter()
            .collect(),
            trace,
        },
    };
    comm.stats.iter_time_us = iter_time(compute, &comm);
    Ok(comm)
}

/// Simulates one steady-state iteration: compute, gradient exchange,
/// aggregation and chief-triggered update, partition bookkeeping, pull.
pub fn simulate_iteration(
    plan: &DistributedPlan,
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    profile: &ComputeProfile,
) -> Result<IterationStats, SimError> {
    communicate(plan, graph, cluster, profile).map(|c| c.stats)
}

/// Runs `iterations` iterations and averages the second half. The first
/// half is warm-up: its compute is inflated by `warmup_inflation` and it is
/// discarded. With `compute_jitter > 0` each GPU's compute is stretched by
/// a uniform random fraction drawn from `seed`, and the slowest GPU sets
/// the pace.
pub fn simulate_training(
    plan: &DistributedPlan,
    graph: &GraphSpec,
    cluster: &ClusterSpec,
    profile: &ComputeProfile,
    iterations: usize,
    seed: u64,
) -> Result<TrainingRun, SimError> {
    if iterations < 2 {
        return Err(SimError::TooFewIterations(iterations));
    }
    let comm = communicate(plan, graph, cluster, profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = iterations / 2;
    let gpus = cluster.total_gpus();
    let times: Vec<f64> = (0..iterations)
        .map(|i| {
            let mut compute = profile.compute_us_per_gpu;
            if profile.compute_jitter > 0.0 {
                let slowest = (0..gpus).map(|_| rng.gen::<f64>()).fold(0.0, f64::max);
                compute *= 1.0 + profile.compute_jitter * slowest;
            }
            if i < warmup {
                compute *= 1.0 + profile.warmup_inflation;
            }
            iter_time(compute, &comm)
        })
        .collect();
    let kept = &times[warmup..];
    // offset from the first kept value so a constant run averages exactly
    let first = kept[0];
    let mean = first + kept.iter().map(|t| t - first).sum::<f64>() / kept.len() as f64;
    Ok(TrainingRun {
        iteration_times_us: times,
        retained_from: warmup,
        mean_iter_time_us: mean,
        steady: comm.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::transfer_model;
    use crate::graph::VariableSpec;
    use crate::placement::{
        transform_ar, transform_hybrid, transform_ps, uniform_partitions, MechanismPolicy,
    };
    use crate::sim::trace_is_conserved;
    use std::collections::BTreeMap;

    fn lm_like() -> GraphSpec {
        GraphSpec::new(
            "lm-small",
            10_000.0,
            vec![
                VariableSpec::dense("lstm", 400_000, 4),
                VariableSpec::sparse("embedding", 8_000_000, 4, 0.01),
            ],
        )
        .unwrap()
    }

    fn dense_graph() -> GraphSpec {
        GraphSpec::new(
            "dense",
            5_000.0,
            vec![
                VariableSpec::dense("a", 300_000, 4),
                VariableSpec::dense("b", 120_000, 4),
                VariableSpec::dense("c", 50_000, 4),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_variable_graph_is_compute_only() {
        let graph = GraphSpec {
            name: "empty".into(),
            batch_per_gpu: 1,
            compute_us_per_gpu: 1234.0,
            variables: vec![],
        };
        let cluster = ClusterSpec::new(4, 2, 100.0);
        let plan = transform_ar(&graph, &cluster);
        let stats = simulate_iteration(&plan, &graph, &cluster, &ComputeProfile::for_graph(&graph)).unwrap();
        assert_eq!(stats.iter_time_us, 1234.0);
        assert!(stats.trace.is_empty());
    }

    #[test]
    fn hybrid_beats_allreduce_on_sparse_model() {
        let graph = lm_like();
        let cluster = ClusterSpec::new(4, 2, 10.0);
        let profile = ComputeProfile::for_graph(&graph);
        let parts = uniform_partitions(&graph, 4);
        let hybrid = transform_hybrid(&graph, &cluster, &MechanismPolicy::default(), &parts).unwrap();
        let ar = transform_ar(&graph, &cluster);
        let h = simulate_iteration(&hybrid, &graph, &cluster, &profile).unwrap();
        let a = simulate_iteration(&ar, &graph, &cluster, &profile).unwrap();
        assert!(h.iter_time_us < a.iter_time_us, "{} vs {}", h.iter_time_us, a.iter_time_us);
        assert!(h.iter_time_us >= graph.compute_us_per_gpu);
    }

    #[test]
    fn network_bytes_match_analytic_with_one_gpu() {
        let graph = lm_like();
        let cluster = ClusterSpec::new(4, 1, 10.0);
        let profile = ComputeProfile::for_graph(&graph);
        let parts = uniform_partitions(&graph, 4);
        for plan in [
            transform_ar(&graph, &cluster),
            transform_ps(&graph, &cluster, true, &parts).unwrap(),
            transform_hybrid(&graph, &cluster, &MechanismPolicy::default(), &parts).unwrap(),
        ] {
            let stats = simulate_iteration(&plan, &graph, &cluster, &profile).unwrap();
            let analytic = transfer_model(&graph, &plan, &cluster).unwrap();
            assert_eq!(stats.per_machine_bytes, analytic, "{}", plan.architecture);
            assert!(trace_is_conserved(&stats.trace));
        }
    }

    #[test]
    fn doubling_bandwidth_halves_communication() {
        let graph = dense_graph();
        let profile = ComputeProfile::network_only();
        for gpus in [1, 3] {
            let slow = ClusterSpec::new(4, gpus, 25.0);
            let fast = ClusterSpec::new(4, gpus, 50.0);
            for plan_of in [
                |g: &GraphSpec, c: &ClusterSpec| transform_ar(g, c),
                |g: &GraphSpec, c: &ClusterSpec| transform_ps(g, c, true, &BTreeMap::new()).unwrap(),
            ] {
                let s = simulate_iteration(&plan_of(&graph, &slow), &graph, &slow, &profile).unwrap();
                let f = simulate_iteration(&plan_of(&graph, &fast), &graph, &fast, &profile).unwrap();
                assert!(s.comm_time_us() > 0.0);
                assert_eq!(f.comm_time_us() * 2.0, s.comm_time_us());
            }
        }
    }

    #[test]
    fn one_update_per_partition() {
        let graph = lm_like();
        let cluster = ClusterSpec::new(3, 2, 10.0);
        let parts = uniform_partitions(&graph, 5);
        let plan = transform_ps(&graph, &cluster, true, &parts).unwrap();
        let stats = simulate_iteration(&plan, &graph, &cluster, &ComputeProfile::for_graph(&graph)).unwrap();
        for p in 0..5 {
            assert_eq!(stats.update_events("embedding", p), 1);
        }
        assert_eq!(stats.update_events("lstm", 0), 1);
        let chief = Location::gpu(plan.chief.machine, plan.chief.gpu);
        assert!(stats
            .trace
            .iter()
            .filter(|m| m.tag.phase == Phase::Update)
            .all(|m| m.src == chief && m.bytes == 0));
    }

    #[test]
    fn local_aggregation_divides_push_bytes_by_gpus() {
        let graph = dense_graph();
        let cluster = ClusterSpec::new(4, 6, 100.0);
        let profile = ComputeProfile::for_graph(&graph);
        let push = |local| {
            let plan = transform_ps(&graph, &cluster, local, &BTreeMap::new()).unwrap();
            let stats = simulate_iteration(&plan, &graph, &cluster, &profile).unwrap();
            stats
                .trace
                .iter()
                .filter(|m| m.tag.phase == Phase::Push && m.crosses_network())
                .map(|m| m.bytes)
                .sum::<u64>()
        };
        assert_eq!(push(false), 6 * push(true));
    }

    #[test]
    fn partitions_spread_aggregation_over_servers() {
        let graph = GraphSpec::new(
            "s",
            0.0,
            vec![VariableSpec::sparse("emb", 4_000_000, 4, 0.25)],
        )
        .unwrap();
        let cluster = ClusterSpec::new(4, 2, 100.0);
        let profile = ComputeProfile {
            partition_overhead_us: 0.0,
            ..ComputeProfile::for_graph(&graph)
        };
        let agg = |p: usize| {
            let plan = transform_ps(&graph, &cluster, true, &uniform_partitions(&graph, p)).unwrap();
            simulate_iteration(&plan, &graph, &cluster, &profile)
                .unwrap()
                .phase(IterationPhase::Aggregate)
        };
        let one = agg(1);
        assert!(one > 0.0);
        for p in [4, 8, 16] {
            assert!(agg(p) <= one / 4.0 + 1e-9 * one, "P={p}");
        }
    }

    #[test]
    fn training_discards_first_half() {
        let graph = dense_graph();
        let cluster = ClusterSpec::new(2, 2, 100.0);
        let plan = transform_ar(&graph, &cluster);
        let profile = ComputeProfile::for_graph(&graph);
        let single = simulate_iteration(&plan, &graph, &cluster, &profile).unwrap();

        let run = simulate_training(&plan, &graph, &cluster, &profile, 100, 7).unwrap();
        assert_eq!(run.retained_from, 50);
        assert!(run.iteration_times_us[..50].iter().all(|&t| t > single.iter_time_us));
        assert_eq!(run.mean_iter_time_us, single.iter_time_us);

        let two = simulate_training(&plan, &graph, &cluster, &profile, 2, 7).unwrap();
        assert_eq!(two.retained_from, 1);
        assert_eq!(two.mean_iter_time_us, single.iter_time_us);

        let err = simulate_training(&plan, &graph, &cluster, &profile, 1, 7).unwrap_err();
        assert!(matches!(err, SimError::TooFewIterations(1)));
    }

    #[test]
    fn jitter_is_seeded() {
        let graph = dense_graph();
        let cluster = ClusterSpec::new(2, 2, 100.0);
        let plan = transform_ar(&graph, &cluster);
        let profile = ComputeProfile {
            compute_jitter: 0.2,
            ..ComputeProfile::for_graph(&graph)
        };
        let a = simulate_training(&plan, &graph, &cluster, &profile, 20, 3).unwrap();
        let b = simulate_training(&plan, &graph, &cluster, &profile, 20, 3).unwrap();
        let c = simulate_training(&plan, &graph, &cluster, &profile, 20, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mean_iter_time_us, c.mean_iter_time_us);
    }

    #[test]
    fn rejects_invalid_plan() {
        let graph = dense_graph();
        let cluster = ClusterSpec::new(2, 2, 100.0);
        let mut plan = transform_ar(&graph, &cluster);
        plan.nodes.retain(|n| !n.chief);
        let err = simulate_iteration(&plan, &graph, &cluster, &ComputeProfile::for_graph(&graph)).unwrap_err();
        assert!(matches!(err, SimError::InvalidPlan(_)));
    }
}
