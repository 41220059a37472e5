//! Planning, cost estimation, and simulation for data-parallel training that
//! mixes parameter-server and AllReduce synchronization per variable.
//!
//! * [`graph`]: model and cluster descriptions, partitioning.
//! * [`placement`]: graph transformation into placed distributed plans.
//! * [`cost`]: closed-form per-machine network transfer.
//! * [`sim`]: message-level discrete-event simulation.
//! * [`tuner`]: partition-count search and cost-model fitting.
//! * [`report`]: the planner pipeline behind the command-line tool.

pub mod cost;
pub mod error;
pub mod graph;
pub mod placement;
pub mod report;
pub mod sim;
pub mod tuner;

pub use cost::{
    analytic_time_us, compare_architectures, transfer_model, transfer_one_variable,
    ArchitectureEstimate, MachineTraffic, TransferReport,
};
pub use error::{CostError, SimError, SpecError, TuneError};
pub use graph::{
    even_split, load_cluster_spec, load_graph_spec, model_alpha, partition_variable, shard_count,
    ClusterSpec, GraphSpec, Partition, PartitionSet, VariableKind, VariableSpec,
};
pub use placement::{
    assign_mechanism, transform, transform_ar, transform_hybrid, transform_ps, uniform_partitions,
    validate_plan, Architecture, ChiefWorker, Device, DistributedPlan, Location, Mechanism,
    MechanismPolicy, NodeRole, PlacedNode,
};
pub use sim::{
    simulate_allgatherv, simulate_iteration, simulate_ps_exchange, simulate_ring_allreduce,
    simulate_training, CommRun, ComputeProfile, IterationPhase, IterationStats, Message,
    MessageTag, Phase, TrainingRun,
};
pub use tuner::{
    fit_theta, optimal_p, predict_time, sample_search, tune, CostModelParams, Sample, Theta,
    TuneOptions, TuneResult, DEFAULT_THRESHOLD,
};

/// Any failure of the planner pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 1 for invalid input, 2 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
