use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use autoshard::bench::{bench_scaling, to_csv, BenchConfig};
use autoshard::interp::check_equivalence;
use autoshard::ir::{
    gen_classifier, gen_t5, gen_transformer, save_graph, trim_and_group, AuxStyle,
    ClassifierConfig, OpKind, RawGraph, TransformerConfig,
};
use autoshard::patterns::{registry, PatternDescriptor};
use autoshard::pipeline::{
    graph_tolerance, load_graph_file, read_file, route_plan_file, run_pipeline, write_file,
    ClusterArgs, RunArgs,
};
use autoshard::prune::{prune_graph, PruneReport};
use autoshard::rewrite::rewrite_graph;
use autoshard::search::{derive_plan, PlanFile, SearchOptions};
use autoshard::{Error, Result};

/// Tensor-parallel sharding planner for model graphs.
#[derive(Parser)]
#[command(name = "autoshard", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model graph as JSON.
    Gen {
        #[command(subcommand)]
        model: GenModel,
    },
    /// Fold repeated blocks and report the shared subgraphs.
    Prune {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value_t = 2)]
        min_dup: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// List sharding patterns as JSON.
    Patterns {
        /// Only patterns for this op, e.g. matmul.
        #[arg(long)]
        op: Option<String>,
    },
    /// Search the cheapest sharding plan.
    Plan {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        cluster: ClusterOpts,
        #[arg(long, default_value_t = 2)]
        min_dup: usize,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the cost report of a saved plan.
    Cost {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        cluster: ClusterOpts,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Rewrite a graph into per-device graphs under a saved plan.
    Rewrite {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        cluster: ClusterOpts,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check a saved plan against the single-device graph; exits 1 on mismatch.
    Verify {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        cluster: ClusterOpts,
        #[command(flatten)]
        check: CheckArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Load, prune, plan, rewrite and verify, writing every report into a
    /// directory; exits 1 when verification fails.
    Pipeline {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        cluster: ClusterOpts,
        #[arg(long, default_value_t = 2)]
        min_dup: usize,
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        check: CheckArgs,
        /// Directory for plan.json, parallel_graph.json, verify.json and timing.json.
        #[arg(long, default_value = "autoshard-out")]
        out_dir: PathBuf,
    },
    /// Time the search over transformer stacks of growing depth; emits CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,48")]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        min_dup: usize,
        #[command(flatten)]
        cluster: ClusterOpts,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenModel {
    /// Encoder stack with embedding and vocabulary head.
    Transformer(TransformerArgs),
    /// Encoder-decoder stack.
    T5(TransformerArgs),
    /// Repeated backbone blocks followed by one wide classifier layer.
    Classifier {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        features: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[command(flatten)]
        common: GenCommon,
    },
}

#[derive(Args)]
struct TransformerArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    seq: usize,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[command(flatten)]
    common: GenCommon,
}

#[derive(Args)]
struct GenCommon {
    #[arg(long, value_enum, default_value_t = Aux::Light)]
    aux: Aux,
    #[arg(long, value_enum)]
    dtype: Option<DType>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aux {
    Bare,
    Light,
    Heavy,
}

impl From<Aux> for AuxStyle {
    fn from(a: Aux) -> AuxStyle {
        match a {
            Aux::Bare => AuxStyle::Bare,
            Aux::Light => AuxStyle::Light,
            Aux::Heavy => AuxStyle::Heavy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DType {
    F32,
    F64,
}

impl From<DType> for autoshard::ir::DType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => autoshard::ir::DType::F32,
            DType::F64 => autoshard::ir::DType::F64,
        }
    }
}

#[derive(Args)]
struct GraphArgs {
    /// Graph JSON file.
    #[arg(long)]
    graph: PathBuf,
    /// Cast every tensor to this dtype after loading.
    #[arg(long, value_enum)]
    dtype: Option<DType>,
}

impl GraphArgs {
    fn load(&self) -> Result<RawGraph> {
        load_graph_file(&self.graph, self.dtype.map(Into::into))
    }
}

#[derive(Args)]
struct ClusterOpts {
    /// Device mesh MxN: M nodes with N devices each. Overrides the cluster file.
    #[arg(long)]
    mesh: Option<String>,
    /// Cluster config JSON with mesh, bandwidths and collective parameters.
    #[arg(long, env = "AUTOSHARD_CLUSTER")]
    cluster: Option<PathBuf>,
    /// Gradients of at least this many bytes skip fusion [default: 1048576].
    #[arg(long)]
    fusion_threshold: Option<u64>,
    /// Capacity of one fused gradient bucket in bytes [default: 4194304].
    #[arg(long)]
    chunk_size: Option<u64>,
}

impl ClusterOpts {
    fn args(&self) -> ClusterArgs {
        ClusterArgs {
            file: self.cluster.clone(),
            mesh: self.mesh.clone(),
            fusion_threshold: self.fusion_threshold,
            chunk_size: self.chunk_size,
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    /// Search worker threads; 0 uses one per core. Does not change results.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Cost table rows kept per search unit.
    #[arg(long, default_value_t = 16)]
    table_limit: usize,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Relative error bound [default: 1e-10 for f64 graphs, 1e-5 otherwise].
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    emit(out, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_plan(path: &Path) -> Result<PlanFile> {
    PlanFile::parse(&read_file(path)?)
}

fn gen(model: GenModel) -> Result<()> {
    let (graph, common) = match model {
        GenModel::Transformer(a) => (gen_transformer(&transformer_config(&a))?, a.common),
        GenModel::T5(a) => (gen_t5(&transformer_config(&a))?, a.common),
        GenModel::Classifier {
            classes,
            features,
            blocks,
            batch,
            common,
        } => {
            let mut cfg = ClassifierConfig::new(classes, features).with_blocks(blocks);
            cfg.batch = batch;
            cfg.aux = common.aux.into();
            (gen_classifier(&cfg)?, common)
        }
    };
    let graph = match common.dtype {
        Some(d) => graph.with_dtype(d.into()),
        None => graph,
    };
    emit(common.out.as_deref(), &save_graph(&graph))
}

fn transformer_config(a: &TransformerArgs) -> TransformerConfig {
    let mut cfg = TransformerConfig::new(a.layers, a.d_model, a.heads)
        .with_batch_seq(a.batch, a.seq)
        .with_vocab(a.vocab);
    cfg.aux = a.common.aux.into();
    cfg
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { model } => gen(model)?,
        Command::Prune {
            graph,
            min_dup,
            out,
        } => {
            let grouped = trim_and_group(&graph.load()?)?;
            let result = prune_graph(&grouped, min_dup)?;
            let report = PruneReport::new(&grouped, &result);
            emit_json(
                out.as_deref(),
                &json!({ "graph": graph.graph, "report": report }),
            )?;
        }
        Command::Patterns { op } => {
            let kind = op
                .map(|s| {
                    OpKind::parse(&s.to_lowercase())
                        .ok_or_else(|| Error::BadConfig(format!("unknown op `{s}`")))
                })
                .transpose()?;
            let list: Vec<PatternDescriptor> = registry()
                .iter()
                .filter(|p| kind.is_none_or(|k| p.op() == k))
                .map(|p| p.descriptor())
                .collect();
            emit_json(None, &list)?;
        }
        Command::Plan {
            graph,
            cluster,
            min_dup,
            search,
            out,
        } => {
            let mesh = cluster.args().resolve()?;
            let grouped = trim_and_group(&graph.load()?)?;
            let opts = SearchOptions {
                jobs: search.jobs,
                table_limit: search.table_limit,
                ..SearchOptions::default()
            };
            let report = derive_plan(&grouped, &mesh, min_dup, &opts)?;
            emit_json(out.as_deref(), &report)?;
        }
        Command::Cost {
            graph,
            plan,
            cluster,
            out,
        } => {
            let pf = load_plan(&plan)?;
            let mesh = cluster.args().resolve_or(Some((pf.mesh.m, pf.mesh.n)))?;
            let grouped = trim_and_group(&graph.load()?)?;
            let model = route_plan_file(&grouped, &pf, &mesh)?;
            emit_json(
                out.as_deref(),
                &json!({ "cluster": mesh, "cost": model.cost, "collectives": model.collective_count() }),
            )?;
        }
        Command::Rewrite {
            graph,
            plan,
            cluster,
            out,
        } => {
            let pf = load_plan(&plan)?;
            let mesh = cluster.args().resolve_or(Some((pf.mesh.m, pf.mesh.n)))?;
            let grouped = trim_and_group(&graph.load()?)?;
            let model = route_plan_file(&grouped, &pf, &mesh)?;
            emit(
                out.as_deref(),
                &rewrite_graph(&grouped, &model, &mesh)?.to_json(),
            )?;
        }
        Command::Verify {
            graph,
            plan,
            cluster,
            check,
            out,
        } => {
            let pf = load_plan(&plan)?;
            let mesh = cluster.args().resolve_or(Some((pf.mesh.m, pf.mesh.n)))?;
            let raw = graph.load()?;
            let grouped = trim_and_group(&raw)?;
            let model = route_plan_file(&grouped, &pf, &mesh)?;
            let pgraph = rewrite_graph(&grouped, &model, &mesh)?;
            let tolerance = check.tolerance.unwrap_or_else(|| graph_tolerance(&raw));
            let report = check_equivalence(&raw, &pgraph, check.trials, tolerance, check.seed)?;
            emit_json(
                out.as_deref(),
                &json!({
                    "graph": graph.graph,
                    "plan": plan,
                    "cluster": mesh,
                    "seed": check.seed,
                    "verification": report,
                    "collectives": pgraph.collective_count(),
                }),
            )?;
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Pipeline {
            graph,
            cluster,
            min_dup,
            search,
            check,
            out_dir,
        } => {
            let config = RunArgs {
                graph: graph.graph,
                cluster: cluster.args(),
                min_duplicates: min_dup,
                dtype: graph.dtype.map(Into::into),
                trials: check.trials,
                tolerance: check.tolerance,
                seed: check.seed,
                table_limit: search.table_limit,
                out_dir,
                jobs: search.jobs,
            }
            .resolve()?;
            let outcome = run_pipeline(&config)?;
            emit_json(
                None,
                &json!({
                    "passed": outcome.verify.passed,
                    "worst_error": outcome.verify.worst,
                    "files": outcome.files,
                }),
            )?;
            if !outcome.verify.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench {
            layers,
            d_model,
            heads,
            min_dup,
            cluster,
            jobs,
            out,
        } => {
            let mesh = cluster.args().resolve_or(Some((1, 4)))?;
            let cfg = BenchConfig {
                layers,
                d_model,
                heads,
                min_duplicates: min_dup,
                jobs,
            };
            emit(out.as_deref(), &to_csv(&bench_scaling(&cfg, &mesh)?)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::from(2)
        }
    }
}
