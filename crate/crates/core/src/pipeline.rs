//! End-to-end runs: load, trim, prune, derive, rewrite and verify, writing
//! one report file per stage.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::cost::{parse_mesh, ClusterSpec};
use crate::error::{Error, Result};
use crate::interp::{check_equivalence, default_tolerance, EquivalenceReport};
use crate::ir::{load_graph, trim_and_group, DType, GroupedGraph, RawGraph};
use crate::prune::prune_graph;
use crate::rewrite::rewrite_graph;
use crate::search::{derive_plan, ModelPlan, PlanFile, SearchOptions};

pub const PLAN_FILE: &str = "plan.json";
pub const GRAPH_FILE: &str = "parallel_graph.json";
pub const VERIFY_FILE: &str = "verify.json";
pub const TIMING_FILE: &str = "timing.json";

/// Reads a file, naming the path in the error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(e, path))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| with_path(e, path))
}

fn with_path(e: io::Error, path: &Path) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn resolve(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| with_path(e, path))
}

/// Loads a graph file, optionally casting every tensor to `dtype`.
pub fn load_graph_file(path: &Path, dtype: Option<DType>) -> Result<RawGraph> {
    let graph = load_graph(&read_file(path)?)?;
    Ok(match dtype {
        Some(d) => graph.with_dtype(d),
        None => graph,
    })
}

/// Where cluster settings come from; later fields override the file.
#[derive(Debug, Clone, Default)]
pub struct ClusterArgs {
    pub file: Option<PathBuf>,
    pub mesh: Option<String>,
    pub fusion_threshold: Option<u64>,
    pub chunk_size: Option<u64>,
}

impl ClusterArgs {
    pub fn resolve(&self) -> Result<ClusterSpec> {
        self.resolve_or(None)
    }

    /// Like [`ClusterArgs::resolve`], falling back to `mesh` when neither a
    /// mesh string nor a cluster file is given.
    pub fn resolve_or(&self, mesh: Option<(usize, usize)>) -> Result<ClusterSpec> {
        let mut spec = match (&self.file, &self.mesh, mesh) {
            (Some(p), _, _) => ClusterSpec::from_json(&read_file(p)?)?,
            (None, Some(_), _) => ClusterSpec::default(),
            (None, None, Some((m, n))) => ClusterSpec::new(m, n),
            (None, None, None) => {
                return Err(Error::BadConfig(
                    "no mesh given and no cluster config file".into(),
                ))
            }
        };
        if let Some(mesh) = &self.mesh {
            let (m, n) = parse_mesh(mesh)?;
            spec = spec.with_mesh(m, n);
        }
        if let Some(t) = self.fusion_threshold {
            spec.fusion_threshold_bytes = t;
        }
        if let Some(c) = self.chunk_size {
            spec.chunk_size_bytes = c;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Routes a saved plan over `graph`, pruned the way the plan was derived.
pub fn route_plan_file(
    graph: &GroupedGraph,
    plan: &PlanFile,
    mesh: &ClusterSpec,
) -> Result<ModelPlan> {
    let prune = prune_graph(graph, plan.min_duplicates)?;
    ModelPlan::route(graph, &prune, &plan.assignments, mesh)
}

/// Effective settings of a pipeline run. Everything but the output
/// directory and worker count is written into the reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub cluster_file: Option<PathBuf>,
    pub cluster: ClusterSpec,
    pub min_duplicates: usize,
    pub dtype: Option<DType>,
    pub trials: usize,
    /// Defaults to the graph's dtype tolerance; the one used is in the
    /// verification report.
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub table_limit: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub jobs: usize,
}

/// Unresolved pipeline settings as given on the command line.
#[derive(Debug, Clone)]
pub struct RunArgs {
    pub graph: PathBuf,
    pub cluster: ClusterArgs,
    pub min_duplicates: usize,
    pub dtype: Option<DType>,
    pub trials: usize,
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub table_limit: usize,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl RunArgs {
    /// Resolves every path and the cluster before any pass runs.
    pub fn resolve(&self) -> Result<RunConfig> {
        let graph = resolve(&self.graph)?;
        let cluster_file = self.cluster.file.as_deref().map(resolve).transpose()?;
        let cluster = self.cluster.resolve()?;
        if self.min_duplicates == 0 {
            return Err(Error::BadConfig("min_duplicates must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::BadConfig("trials must be at least 1".into()));
        }
        fs::create_dir_all(&self.out_dir).map_err(|e| with_path(e, &self.out_dir))?;
        let out_dir = resolve(&self.out_dir)?;
        Ok(RunConfig {
            graph,
            cluster_file,
            cluster,
            min_duplicates: self.min_duplicates,
            dtype: self.dtype,
            trials: self.trials,
            tolerance: self.tolerance,
            seed: self.seed,
            table_limit: self.table_limit,
            out_dir,
            jobs: self.jobs,
        })
    }
}

/// Tolerance for the least precise dtype in `graph`.
pub fn graph_tolerance(graph: &RawGraph) -> f64 {
    let f32 = graph.nodes().iter().any(|n| n.output.dtype == DType::F32);
    default_tolerance(if f32 { DType::F32 } else { DType::F64 })
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub jobs: usize,
    pub load_s: f64,
    pub derive_s: f64,
    pub rewrite_s: f64,
    pub verify_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub verify: EquivalenceReport,
    pub files: Vec<PathBuf>,
    pub timing: Timing,
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn json<T: Serialize>(config: &RunConfig, body: T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Report { config, body })? + "\n")
}

/// Runs every pass and writes the plan report, the rewritten graph, the
/// verification report and a separate timing file into `config.out_dir`.
/// Only the timing file depends on the worker count.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let lap = |since: &mut Instant| {
        let s = since.elapsed().as_secs_f64();
        *since = Instant::now();
        s
    };
    let mut clock = Instant::now();
    let raw = load_graph_file(&config.graph, config.dtype)?;
    let grouped = trim_and_group(&raw)?;
    let load_s = lap(&mut clock);

    let opts = SearchOptions {
        jobs: config.jobs,
        table_limit: config.table_limit,
        ..SearchOptions::default()
    };
    let mut plan = derive_plan(&grouped, &config.cluster, config.min_duplicates, &opts)?;
    plan.wall_time_s = None;
    let derive_s = lap(&mut clock);

    let pgraph = rewrite_graph(&grouped, &plan.model, &config.cluster)?;
    let rewrite_s = lap(&mut clock);

    let tolerance = config.tolerance.unwrap_or_else(|| graph_tolerance(&raw));
    let verify = check_equivalence(&raw, &pgraph, config.trials, tolerance, config.seed)?;
    let verify_s = lap(&mut clock);

    #[derive(Serialize)]
    struct PlanBody<'a> {
        plan: &'a crate::search::BestPlanReport,
    }
    #[derive(Serialize)]
    struct VerifyBody<'a> {
        verification: &'a EquivalenceReport,
        collectives: usize,
    }
    let timing = Timing {
        jobs: config.jobs,
        load_s,
        derive_s,
        rewrite_s,
        verify_s,
        total_s: start.elapsed().as_secs_f64(),
    };
    let files = [
        (PLAN_FILE, json(config, PlanBody { plan: &plan })?),
        (GRAPH_FILE, pgraph.to_json()),
        (
            VERIFY_FILE,
            json(
                config,
                VerifyBody {
                    verification: &verify,
                    collectives: pgraph.collective_count(),
                },
            )?,
        ),
        (TIMING_FILE, serde_json::to_string_pretty(&timing)? + "\n"),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = config.out_dir.join(name);
        write_file(&path, &body)?;
        written.push(path);
    }
    Ok(PipelineOutcome {
        verify,
        files: written,
        timing,
    })
}
