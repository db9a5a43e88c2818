//! Experiment configuration, sweep grids, on-disk artifacts and reports.
//!
//! A config is a JSON document. Unknown keys are rejected and every error
//! names the offending field path. A config either describes one run or
//! carries a `grid` whose axes are crossed in a fixed order: `local_steps`,
//! `top_k`, `optimizer`, `agents`, `topology`, `partition_alpha` (outermost
//! first).
//!
//! Minimal example:
//!
//! ```json
//! {
//!   "problem":   { "kind": "logistic", "d": 20, "agents": 4, "samples_per_agent": 200 },
//!   "optimizer": { "kind": "adam", "alpha": 0.01 },
//!   "topology":  { "kind": "ring" }
//! }
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{theory_report, TheoryParams};
use crate::compression::{nominal_eta, CompressorSpec, PayloadWidths};
use crate::engine::{run, CommVariant, RunConfig, RunRecord, TheoryMode};
use crate::error::{Error, Result};
use crate::localopt::{OptimizerKind, OptimizerSpec};
use crate::problems::{make_problem, Batch, PartitionPlan, ProblemKind, ProblemParams};
use crate::topology::{Graph, TopologyKind};

pub const DEFAULT_MAX_RUNS: usize = 512;
pub const DEFAULT_ROUNDS: usize = 100;

fn one() -> usize {
    1
}
fn default_noise() -> f64 {
    0.1
}
fn default_separation() -> f64 {
    1.0
}
fn default_max_runs() -> usize {
    DEFAULT_MAX_RUNS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub d: usize,
    pub agents: usize,
    pub samples_per_agent: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "PartitionSection::iid")]
    pub partition: PartitionSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSection {
    Iid {
        #[serde(default)]
        seed: u64,
    },
    Dirichlet {
        alpha: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl PartitionSection {
    fn iid() -> Self {
        PartitionSection::Iid { seed: 0 }
    }

    pub fn plan(&self) -> PartitionPlan {
        match *self {
            PartitionSection::Iid { seed } => PartitionPlan::iid(seed),
            PartitionSection::Dirichlet { alpha, seed } => PartitionPlan::dirichlet(alpha, seed),
        }
    }

    fn seed(&self) -> u64 {
        match *self {
            PartitionSection::Iid { seed } | PartitionSection::Dirichlet { seed, .. } => seed,
        }
    }

    fn label(&self) -> String {
        match self {
            PartitionSection::Iid { .. } => "iid".into(),
            PartitionSection::Dirichlet { alpha, .. } => format!("dir{alpha}"),
        }
    }
}

impl ProblemSection {
    pub fn params(&self) -> ProblemParams {
        ProblemParams {
            kind: self.kind,
            d: self.d,
            agents: self.agents,
            samples_per_agent: self.samples_per_agent,
            lambda: self.lambda,
            clip: self.clip,
            noise: self.noise,
            separation: self.separation,
            seed: self.seed,
        }
    }

    /// Hash of everything that determines the pooled dataset and objective
    /// (not the split or the agent count).
    pub fn hash(&self) -> String {
        let key = serde_json::json!({
            "kind": self.kind,
            "d": self.d,
            "samples_per_agent": self.samples_per_agent,
            "lambda": self.lambda,
            "clip": self.clip,
            "noise": self.noise,
            "separation": self.separation,
            "seed": self.seed,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyName {
    Ring,
    Grid2d,
    Complete,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyName,
    /// Inline edge list for `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
    /// Edge-list file for `custom`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges_file: Option<PathBuf>,
}

impl TopologySection {
    fn named(kind: TopologyName) -> Self {
        TopologySection {
            kind,
            edges: None,
            edges_file: None,
        }
    }

    fn resolve(&self, n: usize, base: &Path) -> Result<TopologyKind> {
        Ok(match self.kind {
            TopologyName::Ring => TopologyKind::Ring,
            TopologyName::Grid2d => TopologyKind::Grid2d,
            TopologyName::Complete => TopologyKind::Complete,
            TopologyName::Custom => {
                let graph = match (&self.edges, &self.edges_file) {
                    (Some(edges), None) => Graph::new(n, edges.iter().copied())?,
                    (None, Some(file)) => {
                        let text = fs::read_to_string(base.join(file))?;
                        Graph::from_edge_list(&text)?
                    }
                    _ => {
                        return Err(Error::config(
                            "topology",
                            "custom topology needs exactly one of `edges` or `edges_file`",
                        ))
                    }
                };
                TopologyKind::Custom(graph)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorSection {
    #[default]
    Identity,
    TopK {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fraction: Option<f64>,
    },
    RandomK {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fraction: Option<f64>,
    },
    QsgdRescaled {
        s: u32,
    },
    GossipDrop {
        p: f64,
    },
}

/// `round(fraction * d)`, at least one coordinate.
pub fn k_from_fraction(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64).round() as usize).clamp(1, d)
}

impl CompressorSection {
    pub fn resolve(&self, d: usize) -> Result<CompressorSpec> {
        let count = |k: Option<usize>, fraction: Option<f64>| -> Result<usize> {
            match (k, fraction) {
                (Some(k), None) => Ok(k),
                (None, Some(f)) if f > 0.0 && f <= 1.0 => Ok(k_from_fraction(f, d)),
                (None, Some(f)) => Err(Error::config(
                    "compressor.fraction",
                    format!("must be in (0, 1], got {f}"),
                )),
                _ => Err(Error::config(
                    "compressor",
                    "sparsifiers need exactly one of `k` or `fraction`",
                )),
            }
        };
        let spec = match *self {
            CompressorSection::Identity => CompressorSpec::Identity,
            CompressorSection::TopK { k, fraction } => CompressorSpec::TopK { k: count(k, fraction)? },
            CompressorSection::RandomK { k, fraction } => CompressorSpec::RandomK { k: count(k, fraction)? },
            CompressorSection::QsgdRescaled { s } => CompressorSpec::QsgdRescaled { s },
            CompressorSection::GossipDrop { p } => CompressorSpec::GossipDrop { p },
        };
        spec.validate(d)
            .map_err(|e| Error::config("compressor", e.to_string()))?;
        Ok(spec)
    }

    fn label(&self) -> String {
        match self {
            CompressorSection::Identity => "identity".into(),
            CompressorSection::TopK { fraction: Some(f), .. } => format!("topk{f}"),
            CompressorSection::TopK { k: Some(k), .. } => format!("topk{k}"),
            CompressorSection::RandomK { fraction: Some(f), .. } => format!("randk{f}"),
            CompressorSection::RandomK { k: Some(k), .. } => format!("randk{k}"),
            CompressorSection::QsgdRescaled { s } => format!("qsgd{s}"),
            CompressorSection::GossipDrop { p } => format!("gossip{p}"),
            _ => "sparse".into(),
        }
    }
}

/// Sweep axes. `null` in `top_k` means no compression; `null` in
/// `partition_alpha` means an IID split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Vec<OptimizerKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Vec<TopologyName>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_alpha: Option<Vec<Option<f64>>>,
}

impl GridSection {
    fn size(&self) -> usize {
        fn len<T>(axis: &Option<Vec<T>>) -> usize {
            axis.as_ref().map_or(1, Vec::len)
        }
        len(&self.local_steps)
            * len(&self.top_k)
            * len(&self.optimizer)
            * len(&self.agents)
            * len(&self.topology)
            * len(&self.partition_alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

fn default_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Relative to the working directory.
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub optimizer: OptimizerSpec,
    pub topology: TopologySection,
    #[serde(default)]
    pub compressor: CompressorSection,
    #[serde(default = "one")]
    pub local_steps: usize,
    /// Communication rounds. Mutually exclusive with `iterations`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    /// Total local iterations `TK`, held fixed across a `local_steps` sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub theory_mode: TheoryMode,
    #[serde(default)]
    pub record_every: Option<usize>,
    /// Minibatch size; ignored when `full_batch` is set.
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default)]
    pub comm: CommVariant,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub widths: PayloadWidths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory `topology.edges_file` resolves against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config = deserialize(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn rounds_for(&self, k: usize) -> Result<usize> {
        match (self.rounds, self.iterations) {
            (Some(_), Some(_)) => Err(Error::config(
                "rounds",
                "`rounds` and `iterations` are mutually exclusive",
            )),
            (Some(r), None) => Ok(r),
            (None, Some(it)) => {
                if k == 0 || it % k != 0 {
                    Err(Error::config(
                        "iterations",
                        format!("{it} iterations are not a multiple of local_steps = {k}"),
                    ))
                } else {
                    Ok(it / k)
                }
            }
            (None, None) => Ok(DEFAULT_ROUNDS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.d == 0 {
            return Err(Error::config("problem.d", "must be at least 1"));
        }
        if p.agents < 2 {
            return Err(Error::config("problem.agents", "must be at least 2"));
        }
        if p.samples_per_agent == 0 {
            return Err(Error::config("problem.samples_per_agent", "must be at least 1"));
        }
        if !(p.lambda >= 0.0) {
            return Err(Error::config("problem.lambda", "must be nonnegative"));
        }
        if matches!(p.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("problem.clip", "must be positive"));
        }
        if !(p.noise >= 0.0) {
            return Err(Error::config("problem.noise", "must be nonnegative"));
        }
        if let PartitionSection::Dirichlet { alpha, .. } = p.partition {
            if !(alpha > 0.0) {
                return Err(Error::config("problem.partition.alpha", "must be positive"));
            }
        }
        self.optimizer.validate()?;
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be at least 1"));
        }
        if self.rounds == Some(0) {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.iterations == Some(0) {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config("gamma", format!("must be in [0, 1], got {g}")));
            }
        }
        if self.record_every == Some(0) {
            return Err(Error::config("record_every", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.output.formats.is_empty() {
            return Err(Error::config("output.formats", "must not be empty"));
        }
        self.compressor.resolve(p.d)?;
        if let Some(grid) = &self.grid {
            let size = grid.size();
            if size == 0 {
                return Err(Error::config("grid", "an axis is empty"));
            }
            if size > self.max_runs {
                return Err(Error::config(
                    "grid",
                    format!("{size} runs exceed max_runs = {}", self.max_runs),
                ));
            }
            for (i, k) in grid.local_steps.iter().flatten().enumerate() {
                if *k == 0 {
                    return Err(Error::config(format!("grid.local_steps[{i}]"), "must be at least 1"));
                }
            }
            for (i, f) in grid.top_k.iter().flatten().enumerate() {
                if matches!(f, Some(f) if !(*f > 0.0 && *f <= 1.0)) {
                    return Err(Error::config(format!("grid.top_k[{i}]"), "must be in (0, 1] or null"));
                }
            }
            for (i, a) in grid.agents.iter().flatten().enumerate() {
                if *a < 2 {
                    return Err(Error::config(format!("grid.agents[{i}]"), "must be at least 2"));
                }
            }
            for (i, a) in grid.partition_alpha.iter().flatten().enumerate() {
                if matches!(a, Some(a) if !(*a > 0.0)) {
                    return Err(Error::config(
                        format!("grid.partition_alpha[{i}]"),
                        "must be positive or null",
                    ));
                }
            }
            if grid.topology.iter().flatten().any(|t| *t == TopologyName::Custom) {
                return Err(Error::config("grid.topology", "custom topologies cannot be swept"));
            }
        }
        for run in self.expand()? {
            run.config.rounds_for(run.config.local_steps)?;
            run.config
                .topology
                .resolve(run.config.problem.agents, &self.base_dir)
                .and_then(|t| crate::topology::build_topology(&t, run.config.problem.agents))
                .map_err(|e| match e {
                    Error::Config { .. } => e,
                    other => Error::config("topology", other.to_string()),
                })?;
        }
        Ok(())
    }

    /// Cross product of the grid axes (one entry without a grid). Grid runs
    /// get seeds derived from `(seed, index)`; a single run keeps `seed`.
    pub fn expand(&self) -> Result<Vec<RunSpec>> {
        let Some(grid) = &self.grid else {
            let mut single = self.clone();
            single.max_runs = DEFAULT_MAX_RUNS;
            return Ok(vec![RunSpec {
                index: 0,
                name: single.run_name(0),
                config: single,
            }]);
        };
        fn axis<T: Clone>(values: &Option<Vec<T>>, current: T) -> Vec<T> {
            values.clone().unwrap_or_else(|| vec![current])
        }
        let current_frac = match self.compressor {
            CompressorSection::TopK { fraction: Some(f), .. } => Some(f),
            _ => None,
        };
        let current_alpha = match self.problem.partition {
            PartitionSection::Dirichlet { alpha, .. } => Some(alpha),
            PartitionSection::Iid { .. } => None,
        };
        let mut runs = Vec::new();
        for k in axis(&grid.local_steps, self.local_steps) {
            for frac in axis(&grid.top_k, current_frac) {
                for opt in axis(&grid.optimizer, self.optimizer.kind) {
                    for agents in axis(&grid.agents, self.problem.agents) {
                        for topo in axis(&grid.topology, self.topology.kind) {
                            for alpha in axis(&grid.partition_alpha, current_alpha) {
                                let index = runs.len();
                                let mut c = self.clone();
                                c.grid = None;
                                c.max_runs = DEFAULT_MAX_RUNS;
                                c.local_steps = k;
                                if grid.top_k.is_some() {
                                    c.compressor = match frac {
                                        Some(f) => CompressorSection::TopK {
                                            k: None,
                                            fraction: Some(f),
                                        },
                                        None => CompressorSection::Identity,
                                    };
                                }
                                c.optimizer = OptimizerSpec {
                                    kind: opt,
                                    ..self.optimizer
                                }
                                .normalized();
                                c.problem.agents = agents;
                                if grid.topology.is_some() {
                                    c.topology = TopologySection::named(topo);
                                }
                                if grid.partition_alpha.is_some() {
                                    let seed = self.problem.partition.seed();
                                    c.problem.partition = match alpha {
                                        Some(alpha) => PartitionSection::Dirichlet { alpha, seed },
                                        None => PartitionSection::Iid { seed },
                                    };
                                }
                                c.seed = crate::rng::derive_seed(self.seed, index as u64);
                                runs.push(RunSpec {
                                    index,
                                    name: c.run_name(index),
                                    config: c,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(runs)
    }

    fn run_name(&self, index: usize) -> String {
        let topo = match self.topology.kind {
            TopologyName::Ring => "ring",
            TopologyName::Grid2d => "grid2d",
            TopologyName::Complete => "complete",
            TopologyName::Custom => "custom",
        };
        format!(
            "run{index:03}_K{}_{}_{}_n{}_{}_{}",
            self.local_steps,
            self.compressor.label(),
            self.optimizer.kind.name(),
            self.problem.agents,
            topo,
            self.problem.partition.label()
        )
    }

    /// Engine configuration for a single (already expanded) run.
    pub fn run_config(&self) -> Result<RunConfig> {
        let n = self.problem.agents;
        Ok(RunConfig {
            optimizer: self.optimizer,
            compressor: self.compressor.resolve(self.problem.d)?,
            topology: self.topology.resolve(n, &self.base_dir)?,
            n,
            local_steps: self.local_steps,
            rounds: self.rounds_for(self.local_steps)?,
            gamma: self.gamma,
            seed: self.seed,
            theory_mode: self.theory_mode,
            record_every: self.record_every,
            batch: if self.full_batch {
                Batch::Full
            } else {
                Batch::Sample(self.batch)
            },
            comm: self.comm,
            workers: self.workers,
            record_history: false,
            widths: self.widths,
            x0: None,
        })
    }

    /// Self-contained copy for the run directory: custom edges inlined.
    fn echo(&self) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        if let TopologyKind::Custom(g) = self.topology.resolve(self.problem.agents, &self.base_dir)? {
            c.topology.edges = Some(g.edges().collect());
            c.topology.edges_file = None;
        }
        Ok(c)
    }
}

fn deserialize(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path.is_empty() { ".".into() } else { path }, e.inner().to_string())
    })
}

/// Reads and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let mut config = deserialize(&fs::read_to_string(path)?)?;
    config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub index: usize,
    pub name: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Rejected by strict theory mode.
    TheoryViolation,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub index: usize,
    pub name: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub problem_hash: String,
    pub local_steps: usize,
    pub compressor: String,
    pub optimizer: String,
    pub agents: usize,
    pub topology: String,
    pub partition: String,
    pub seed: u64,
    #[serde(default)]
    pub rounds: usize,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub nominal_eta: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub cbar: Option<f64>,
    #[serde(default)]
    pub total_bytes: u64,
    #[serde(default)]
    pub broadcast_bytes: u64,
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub best_grad_norm_sq: Option<f64>,
    #[serde(default)]
    pub final_consensus_err: Option<f64>,
    #[serde(default)]
    pub max_average_drift: Option<f64>,
    #[serde(default)]
    pub theory: serde_json::Value,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
}

impl Summary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub summary_path: Option<PathBuf>,
}

impl ExperimentOutcome {
    /// 0 when every run succeeded, 3 when any run hit a theory-mode
    /// violation, 2 for other run failures.
    pub fn exit_code(&self) -> i32 {
        let statuses = self.summary.runs.iter().map(|r| r.status);
        if statuses.clone().any(|s| s == RunStatus::TheoryViolation) {
            3
        } else if statuses.clone().any(|s| s == RunStatus::Failed) {
            2
        } else {
            0
        }
    }
}

fn skeleton(spec: &RunSpec) -> RunSummary {
    let c = &spec.config;
    RunSummary {
        index: spec.index,
        name: spec.name.clone(),
        status: RunStatus::Ok,
        error: None,
        problem_hash: c.problem.hash(),
        local_steps: c.local_steps,
        compressor: c.compressor.label(),
        optimizer: c.optimizer.kind.name().to_string(),
        agents: c.problem.agents,
        topology: format!("{:?}", c.topology.kind).to_lowercase(),
        partition: c.problem.partition.label(),
        seed: c.seed,
        rounds: 0,
        iterations: 0,
        rho: None,
        eta: None,
        nominal_eta: None,
        gamma: None,
        cbar: None,
        total_bytes: 0,
        broadcast_bytes: 0,
        final_loss: None,
        best_grad_norm_sq: None,
        final_consensus_err: None,
        max_average_drift: None,
        theory: serde_json::Value::Null,
        warnings: Vec::new(),
        csv: None,
    }
}

/// Runs one expanded spec and fills its summary.
pub fn execute(spec: &RunSpec) -> Result<(RunRecord, RunSummary)> {
    let c = &spec.config;
    let problem = make_problem(&c.problem.params(), &c.problem.partition.plan())?;
    let rc = c.run_config()?;
    let compressor = rc.compressor;
    let (k, t) = (rc.local_steps, rc.rounds);
    let record = run(rc, &problem)?;

    let params = TheoryParams::from_run(
        &record,
        &c.optimizer,
        problem.clip(),
        problem.smoothness(),
        problem.n_agents(),
        problem.dim(),
        k,
        t,
    );
    let theory = theory_report(&record, c.optimizer.kind, params);
    let mut s = skeleton(spec);
    s.rounds = record.rounds_completed;
    s.iterations = record.iterations;
    s.rho = Some(record.rho);
    s.eta = Some(record.eta);
    s.nominal_eta = nominal_eta(&compressor, problem.dim()).ok();
    s.gamma = Some(record.gamma);
    s.cbar = theory.cbar;
    s.total_bytes = record.total_bytes;
    s.broadcast_bytes = record.broadcast_bytes;
    s.final_loss = record.final_row().map(|r| r.loss);
    s.best_grad_norm_sq = record
        .rows
        .iter()
        .map(|r| r.grad_norm_sq)
        .min_by(f64::total_cmp);
    s.final_consensus_err = record.final_row().map(|r| r.consensus_err);
    s.max_average_drift = Some(record.max_average_drift);
    s.theory = serde_json::to_value(&theory)?;
    s.warnings = record.warnings.clone();
    Ok((record, s))
}

/// Runs every spec of the config, writing `<name>.csv` and
/// `<name>.config.json` per run and `summary.json` for the whole set. A
/// failing run is recorded in the summary and does not stop the others.
pub fn run_experiments(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output.dir.clone());
    fs::create_dir_all(&dir)?;
    let want_csv = config.output.formats.contains(&Format::Csv);
    let want_json = config.output.formats.contains(&Format::Json);

    let mut runs = Vec::new();
    for spec in config.expand()? {
        fs::write(
            dir.join(format!("{}.config.json", spec.name)),
            serde_json::to_string_pretty(&spec.config.echo()?)? + "\n",
        )?;
        let summary = match execute(&spec) {
            Ok((record, mut s)) => {
                if want_csv {
                    let file = format!("{}.csv", spec.name);
                    record.write_csv(fs::File::create(dir.join(&file))?)?;
                    s.csv = Some(file);
                }
                s
            }
            Err(e) => {
                log::error!("{}: {e}", spec.name);
                let mut s = skeleton(&spec);
                s.status = if matches!(e, Error::Theory(_)) {
                    RunStatus::TheoryViolation
                } else {
                    RunStatus::Failed
                };
                s.error = Some(e.to_string());
                s
            }
        };
        runs.push(summary);
    }
    let summary = Summary { runs };
    let summary_path = if want_json {
        let p = dir.join("summary.json");
        fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n")?;
        Some(p)
    } else {
        None
    };
    Ok(ExperimentOutcome {
        summary,
        summary_path,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6e}"))
}

/// Aligned comparison table over the runs of one or more summaries.
/// Relative bytes are measured against the first successful `K = 1`,
/// identity-compressed run with the same agent count and topology.
pub fn report(summaries: &[Summary]) -> Result<String> {
    let runs: Vec<&RunSummary> = summaries.iter().flat_map(|s| &s.runs).collect();
    if runs.is_empty() {
        return Err(Error::config("report", "no runs to report (pass at least one summary)"));
    }
    let mut out = String::new();
    let hashes: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.problem_hash.as_str()).collect();
    if hashes.len() > 1 {
        let _ = writeln!(
            out,
            "WARNING: runs describe {} different problems ({}); comparisons are not meaningful",
            hashes.len(),
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        );
    }
    let mut baselines: BTreeMap<(usize, String), u64> = BTreeMap::new();
    for r in &runs {
        if r.status == RunStatus::Ok && r.local_steps == 1 && r.compressor == "identity" {
            baselines.entry((r.agents, r.topology.clone())).or_insert(r.total_bytes);
        }
    }
    let _ = writeln!(
        out,
        "{:<44} {:>4} {:>10} {:>4} {:>13} {:>13} {:>13} {:>12} {:>9}",
        "run", "K", "compressor", "n", "final_loss", "grad_norm_sq", "consensus", "bytes", "rel_bytes"
    );
    for r in runs {
        let rel = baselines
            .get(&(r.agents, r.topology.clone()))
            .filter(|&&b| b > 0 && r.status == RunStatus::Ok)
            .map_or_else(|| "-".into(), |&b| format!("{:.4}", r.total_bytes as f64 / b as f64));
        let name = if r.status == RunStatus::Ok {
            r.name.clone()
        } else {
            format!("{} [{:?}]", r.name, r.status)
        };
        let _ = writeln!(
            out,
            "{:<44} {:>4} {:>10} {:>4} {:>13} {:>13} {:>13} {:>12} {:>9}",
            name,
            r.local_steps,
            r.compressor,
            r.agents,
            fmt_opt(r.final_loss),
            fmt_opt(r.best_grad_norm_sq),
            fmt_opt(r.final_consensus_err),
            r.total_bytes,
            rel
        );
    }
    Ok(out)
}

/// Long-format series of every run (`run,t,round,loss,...`), keeping at most
/// `max_points` evenly spaced rows per run plus the last one. Run CSVs are
/// looked up next to their summary.
pub fn write_series(summary_paths: &[PathBuf], out: impl std::io::Write, max_points: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "t", "round", "loss", "grad_norm_sq", "consensus_err", "bytes_cumulative"])?;
    for path in summary_paths {
        let summary = Summary::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for r in &summary.runs {
            let Some(file) = &r.csv else { continue };
            let mut reader = csv::Reader::from_path(dir.join(file))?;
            let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
            let stride = rows.len().div_ceil(max_points.max(1)).max(1);
            for (i, row) in rows.iter().enumerate() {
                if i % stride == 0 || i + 1 == rows.len() {
                    let mut rec = vec![r.name.as_str()];
                    rec.extend(row.iter());
                    w.write_record(&rec)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
