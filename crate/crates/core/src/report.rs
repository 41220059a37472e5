//! The planner pipeline behind the command-line tool: load specs, build a
//! plan, estimate, simulate or tune, and render a report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{analytic_time_us, transfer_model, TransferReport};
use crate::graph::{load_cluster_spec, load_graph_spec, ClusterSpec, GraphSpec};
use crate::placement::{transform, uniform_partitions, Architecture, DistributedPlan, MechanismPolicy};
use crate::sim::{simulate_training, ComputeProfile, IterationStats, Message};
use crate::tuner::{tune, TuneOptions, TuneResult, DEFAULT_THRESHOLD};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Transform,
    Estimate,
    Simulate,
    Tune,
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub graph_path: PathBuf,
    pub cluster_path: PathBuf,
    /// Defaults to hybrid.
    pub architecture: Option<Architecture>,
    /// Overrides local aggregation; only meaningful for parameter-server
    /// architectures, where it selects between the naive and optimized form.
    pub local_agg: Option<bool>,
    /// Shared partition count of partitionable sparse variables; defaults to
    /// the number of machines.
    pub partitions: Option<usize>,
    pub threshold: f64,
    pub seed: u64,
    pub iterations: usize,
    pub output: OutputFormat,
    pub policy: MechanismPolicy,
}

impl RunConfig {
    pub fn new(command: Command, graph_path: impl Into<PathBuf>, cluster_path: impl Into<PathBuf>) -> Self {
        Self {
            command,
            graph_path: graph_path.into(),
            cluster_path: cluster_path.into(),
            architecture: None,
            local_agg: None,
            partitions: None,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            iterations: 100,
            output: OutputFormat::Json,
            policy: MechanismPolicy::default(),
        }
    }

    fn architecture(&self) -> Result<Architecture, Error> {
        let arch = self.architecture.unwrap_or(Architecture::Hybrid);
        match (arch, self.local_agg) {
            (a, None) => Ok(a),
            (Architecture::PsNaive | Architecture::PsOpt, Some(true)) => Ok(Architecture::PsOpt),
            (Architecture::PsNaive | Architecture::PsOpt, Some(false)) => Ok(Architecture::PsNaive),
            (a, Some(_)) => Err(Error::Usage(format!(
                "--local-agg applies only to parameter-server architectures, not {a}"
            ))),
        }
    }

    fn validate(&self) -> Result<(), Error> {
        if self.partitions == Some(0) {
            return Err(Error::Usage("--partitions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Usage("--threshold must be in [0, 1)".into()));
        }
        if self.iterations < 2 {
            return Err(Error::Usage("--iterations must be at least 2".into()));
        }
        for (name, eff) in [("--eff-ar", self.policy.eff_ar), ("--eff-ps", self.policy.eff_ps)] {
            if !(eff.is_finite() && eff > 0.0) {
                return Err(Error::Usage(format!("{name} must be a positive number")));
            }
        }
        Ok(())
    }
}

/// Settings a report was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub command: Command,
    pub graph: String,
    pub cluster: String,
    pub architecture: Option<Architecture>,
    pub partitions: usize,
    pub threshold: f64,
    pub seed: u64,
    pub iterations: usize,
    pub eff_ar: f64,
    pub eff_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureRow {
    pub architecture: Architecture,
    pub bottleneck_bytes: u64,
    pub analytic_time_us: f64,
    pub simulated_time_us: f64,
    /// Global batch per simulated second.
    pub throughput_items_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ConfigEcho,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<ArchitectureRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<DistributedPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferReport>,
    /// Simulated iteration; its trace is emitted separately.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<IterationStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<TuneResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: Report,
    /// Messages of the simulated iteration, if one was simulated.
    pub trace: Vec<Message>,
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Inputs {
    graph: GraphSpec,
    cluster: ClusterSpec,
    profile: ComputeProfile,
}

impl Inputs {
    fn load(config: &RunConfig) -> Result<Self, Error> {
        let graph = load_graph_spec(&read(&config.graph_path)?)?;
        let cluster = load_cluster_spec(&read(&config.cluster_path)?)?;
        let profile = ComputeProfile {
            policy: config.policy,
            ..ComputeProfile::for_graph(&graph)
        };
        Ok(Self {
            graph,
            cluster,
            profile,
        })
    }

    fn plan(&self, arch: Architecture, p: usize, policy: &MechanismPolicy) -> Result<DistributedPlan, Error> {
        let parts = uniform_partitions(&self.graph, p);
        Ok(transform(arch, &self.graph, &self.cluster, policy, &parts)?)
    }

    fn throughput(&self, time_us: f64) -> f64 {
        let items = self.graph.batch_per_gpu as f64 * self.cluster.total_gpus() as f64;
        items / (time_us / 1e6)
    }

    fn row(
        &self,
        arch: Architecture,
        plan: &DistributedPlan,
        config: &RunConfig,
    ) -> Result<(ArchitectureRow, IterationStats), Error> {
        let transfer = transfer_model(&self.graph, plan, &self.cluster)?;
        let run = simulate_training(plan, &self.graph, &self.cluster, &self.profile, config.iterations, config.seed)?;
        let row = ArchitectureRow {
            architecture: arch,
            bottleneck_bytes: transfer.bottleneck_bytes(),
            analytic_time_us: analytic_time_us(&self.graph, &self.cluster, &transfer),
            simulated_time_us: run.mean_iter_time_us,
            throughput_items_per_s: self.throughput(run.mean_iter_time_us),
        };
        Ok((row, run.steady))
    }
}

/// Executes one command.
pub fn run(config: &RunConfig) -> Result<RunOutput, Error> {
    config.validate()?;
    let inputs = Inputs::load(config)?;
    let arch = config.architecture()?;
    let p = config.partitions.unwrap_or(inputs.cluster.machines);
    let mut report = Report {
        config: ConfigEcho {
            command: config.command,
            graph: config.graph_path.display().to_string(),
            cluster: config.cluster_path.display().to_string(),
            architecture: (config.command != Command::Compare).then_some(arch),
            partitions: p,
            threshold: config.threshold,
            seed: config.seed,
            iterations: config.iterations,
            eff_ar: config.policy.eff_ar,
            eff_ps: config.policy.eff_ps,
        },
        rows: Vec::new(),
        plan: None,
        transfer: None,
        iteration: None,
        tune: None,
    };
    let mut trace = Vec::new();
    match config.command {
        Command::Transform => {
            report.plan = Some(inputs.plan(arch, p, &config.policy)?);
        }
        Command::Estimate => {
            let plan = inputs.plan(arch, p, &config.policy)?;
            report.transfer = Some(transfer_model(&inputs.graph, &plan, &inputs.cluster)?);
        }
        Command::Simulate => {
            let plan = inputs.plan(arch, p, &config.policy)?;
            let (row, stats) = inputs.row(arch, &plan, config)?;
            report.rows.push(row);
            report.transfer = Some(stats.per_machine_bytes.clone());
            trace = stats.trace.clone();
            report.iteration = Some(IterationStats { trace: Vec::new(), ..stats });
        }
        Command::Tune => {
            let options = TuneOptions {
                threshold: config.threshold,
                iterations: config.iterations,
                seed: config.seed,
                start_p: config.partitions,
                max_p: None,
            };
            let result = tune(
                &inputs.graph,
                &inputs.cluster,
                |p| inputs.plan(arch, p, &config.policy),
                &inputs.profile,
                &options,
            )?;
            let plan = inputs.plan(arch, result.best_p, &config.policy)?;
            let (row, stats) = inputs.row(arch, &plan, config)?;
            report.config.partitions = result.best_p;
            report.rows.push(row);
            trace = stats.trace.clone();
            report.iteration = Some(IterationStats { trace: Vec::new(), ..stats });
            report.tune = Some(result);
        }
        Command::Compare => {
            for a in Architecture::ALL {
                let plan = inputs.plan(a, p, &config.policy)?;
                report.rows.push(inputs.row(a, &plan, config)?.0);
            }
        }
    }
    Ok(RunOutput { report, trace })
}

const ROW_HEADER: [&str; 5] = [
    "architecture",
    "bottleneck_bytes",
    "analytic_time_us",
    "simulated_time_us",
    "throughput_items_per_s",
];

fn csv_rows(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(header).expect("in-memory write");
    for r in rows {
        out.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(out.into_inner().expect("flush")).expect("utf-8 csv")
}

/// Renders a report. JSON is pretty-printed with keys sorted; CSV carries
/// the report's main table with a single header row.
pub fn emit_report(report: &Report, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => {
            // serde_json's default map is ordered, so going through Value sorts keys
            let value = serde_json::to_value(report).expect("report serializes");
            let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
            text.push('\n');
            text
        }
        OutputFormat::Csv => match report.config.command {
            Command::Transform => {
                let nodes = report.plan.iter().flat_map(|p| p.nodes.iter());
                csv_rows(
                    &["id", "role", "location", "variable", "partition", "chief"],
                    nodes.map(|n| {
                        vec![
                            n.id.clone(),
                            serde_json::to_value(n.role)
                                .ok()
                                .and_then(|v| v.as_str().map(str::to_string))
                                .unwrap_or_default(),
                            n.location.to_string(),
                            n.variable.clone().unwrap_or_default(),
                            n.partition.map(|p| p.to_string()).unwrap_or_default(),
                            n.chief.to_string(),
                        ]
                    }),
                )
            }
            Command::Estimate => report
                .transfer
                .as_ref()
                .map(TransferReport::to_csv)
                .unwrap_or_else(|| csv_rows(&["machine", "egress_bytes", "ingress_bytes", "total_bytes"], [])),
            Command::Tune => {
                let best = report.tune.as_ref().map(|t| t.best_p);
                let samples = report.tune.iter().flat_map(|t| t.params.samples.iter());
                csv_rows(
                    &["partitions", "time_us", "predicted_time_us", "best"],
                    samples.map(|s| {
                        let predicted = report
                            .tune
                            .as_ref()
                            .map(|t| crate::tuner::predict_time(&t.params, s.partitions))
                            .unwrap_or(f64::NAN);
                        vec![
                            s.partitions.to_string(),
                            s.time_us.to_string(),
                            predicted.to_string(),
                            (Some(s.partitions) == best).to_string(),
                        ]
                    }),
                )
            }
            Command::Simulate | Command::Compare => csv_rows(
                &ROW_HEADER,
                report.rows.iter().map(|r| {
                    vec![
                        r.architecture.to_string(),
                        r.bottleneck_bytes.to_string(),
                        r.analytic_time_us.to_string(),
                        r.simulated_time_us.to_string(),
                        r.throughput_items_per_s.to_string(),
                    ]
                }),
            ),
        },
    }
}

/// One JSON object per line.
pub fn trace_lines(trace: &[Message]) -> String {
    let mut out = String::new();
    for m in trace {
        out.push_str(&serde_json::to_string(m).expect("message serializes"));
        out.push('\n');
    }
    out
}

/// Analytic and simulated rows keyed by architecture, for quick lookups.
pub fn rows_by_architecture(report: &Report) -> BTreeMap<Architecture, &ArchitectureRow> {
    report.rows.iter().map(|r| (r.architecture, r)).collect()
}
