//! C interface to the sharding planner.
//!
//! Every fallible call returns an [`AutoshardStatus`] and writes its result
//! through an out pointer. On failure, [`autoshard_last_error`] returns the
//! message for the calling thread. Handles are opaque and released with the
//! matching `_free` function; strings returned by the library are released
//! with [`autoshard_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use autoshard::cost::ClusterSpec;
use autoshard::interp::check_equivalence;
use autoshard::ir::{gen_transformer_stack, load_graph, trim_and_group, GroupedGraph, RawGraph};
use autoshard::pipeline::graph_tolerance;
use autoshard::rewrite::{rewrite_graph, ParallelGraph};
use autoshard::search::{derive_plan, BestPlanReport, SearchOptions};
use autoshard::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoshardStatus {
    Ok = 0,
    Parse = 1,
    Graph = 2,
    Config = 3,
    Pattern = 4,
    Plan = 5,
    Rewrite = 6,
    Interpreter = 7,
    Io = 8,
    NullArgument = 9,
    InvalidUtf8 = 10,
    Panic = 11,
}

impl From<&Error> for AutoshardStatus {
    fn from(e: &Error) -> Self {
        match e.kind() {
            "parse" => AutoshardStatus::Parse,
            "graph" => AutoshardStatus::Graph,
            "config" => AutoshardStatus::Config,
            "pattern" => AutoshardStatus::Pattern,
            "plan" => AutoshardStatus::Plan,
            "rewrite" => AutoshardStatus::Rewrite,
            "interpreter" => AutoshardStatus::Interpreter,
            _ => AutoshardStatus::Io,
        }
    }
}

/// A loaded model graph with its auxiliary operators trimmed.
pub struct AutoshardGraph {
    raw: RawGraph,
    grouped: GroupedGraph,
}

/// A derived sharding plan and the cluster it was derived for.
pub struct AutoshardPlan {
    report: BestPlanReport,
    cluster: ClusterSpec,
}

/// Per-device graphs produced by the rewriter.
pub struct AutoshardParallelGraph {
    graph: ParallelGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(AutoshardStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AutoshardStatus::NullArgument, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AutoshardStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AutoshardStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AutoshardStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            AutoshardStatus::InvalidUtf8,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = CString::new(s)
        .map_err(|_| Failure(AutoshardStatus::Parse, "string holds a NUL byte".into()))?
        .into_raw();
    Ok(())
}

fn graph_from(raw: RawGraph) -> Result<AutoshardGraph, Failure> {
    let grouped = trim_and_group(&raw)?;
    Ok(AutoshardGraph { raw, grouped })
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn autoshard_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn autoshard_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn autoshard_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a graph JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_graph_from_json(
    json: *const c_char,
    out: *mut *mut AutoshardGraph,
) -> AutoshardStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        put(out, graph_from(load_graph(text.as_bytes())?)?, "out")
    })
}

/// Builds the synthetic transformer stack with `layers` encoder layers.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_graph_transformer(
    layers: usize,
    d_model: usize,
    heads: usize,
    out: *mut *mut AutoshardGraph,
) -> AutoshardStatus {
    guard(|| {
        put(
            out,
            graph_from(gen_transformer_stack(layers, d_model, heads)?)?,
            "out",
        )
    })
}

/// Operator count of the graph as loaded, auxiliary operators included.
///
/// # Safety
/// `graph` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn autoshard_graph_node_count(graph: *const AutoshardGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.raw.len())
}

/// # Safety
/// `graph` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn autoshard_graph_free(graph: *mut AutoshardGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Searches the cheapest plan. `cluster_json` may be null, in which case
/// default link parameters are used; `m` and `n` always set the mesh.
/// `jobs` of 0 uses one worker per core.
///
/// # Safety
/// `graph` must be a live handle, `cluster_json` null or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_plan_derive(
    graph: *const AutoshardGraph,
    cluster_json: *const c_char,
    m: usize,
    n: usize,
    min_duplicates: usize,
    jobs: usize,
    out: *mut *mut AutoshardPlan,
) -> AutoshardStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        let base = if cluster_json.is_null() {
            ClusterSpec::default()
        } else {
            ClusterSpec::from_json(str_arg(cluster_json, "cluster_json")?.as_bytes())?
        };
        let cluster = base.with_mesh(m, n);
        cluster.validate()?;
        let opts = SearchOptions {
            jobs,
            ..SearchOptions::default()
        };
        let report = derive_plan(&g.grouped, &cluster, min_duplicates, &opts)?;
        put(out, AutoshardPlan { report, cluster }, "out")
    })
}

/// Modelled seconds of communication per training step under the plan.
///
/// # Safety
/// `plan` must be a live handle or null (which yields NaN).
#[no_mangle]
pub unsafe extern "C" fn autoshard_plan_total_cost(plan: *const AutoshardPlan) -> f64 {
    plan.as_ref().map_or(f64::NAN, |p| p.report.cost.total)
}

/// Number of weights the plan splits across devices.
///
/// # Safety
/// `plan` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn autoshard_plan_split_count(plan: *const AutoshardPlan) -> usize {
    plan.as_ref().map_or(0, |p| {
        p.report
            .assignments
            .values()
            .filter(|s| s.is_split())
            .count()
    })
}

/// Writes the full plan report as JSON; free it with [`autoshard_string_free`].
///
/// # Safety
/// `plan` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_plan_report_json(
    plan: *const AutoshardPlan,
    out: *mut *mut c_char,
) -> AutoshardStatus {
    guard(|| {
        let p = ref_arg(plan, "plan")?;
        put_string(
            out,
            serde_json::to_string_pretty(&p.report).map_err(Error::from)?,
        )
    })
}

/// # Safety
/// `plan` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn autoshard_plan_free(plan: *mut AutoshardPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Rewrites `graph` into per-device graphs under `plan`, which must have
/// been derived from the same graph.
///
/// # Safety
/// `graph` and `plan` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_rewrite(
    graph: *const AutoshardGraph,
    plan: *const AutoshardPlan,
    out: *mut *mut AutoshardParallelGraph,
) -> AutoshardStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        let p = ref_arg(plan, "plan")?;
        let pg = rewrite_graph(&g.grouped, &p.report.model, &p.cluster)?;
        put(out, AutoshardParallelGraph { graph: pg }, "out")
    })
}

/// # Safety
/// `pgraph` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn autoshard_parallel_device_count(
    pgraph: *const AutoshardParallelGraph,
) -> usize {
    pgraph.as_ref().map_or(0, |p| p.graph.device_count())
}

/// Collective operators inserted into each device graph.
///
/// # Safety
/// `pgraph` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn autoshard_parallel_collective_count(
    pgraph: *const AutoshardParallelGraph,
) -> usize {
    pgraph.as_ref().map_or(0, |p| p.graph.collective_count())
}

/// Writes the rewritten graph document as JSON; free it with
/// [`autoshard_string_free`].
///
/// # Safety
/// `pgraph` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_parallel_json(
    pgraph: *const AutoshardParallelGraph,
    out: *mut *mut c_char,
) -> AutoshardStatus {
    guard(|| put_string(out, ref_arg(pgraph, "pgraph")?.graph.to_json()))
}

/// # Safety
/// `pgraph` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn autoshard_parallel_free(pgraph: *mut AutoshardParallelGraph) {
    if !pgraph.is_null() {
        drop(Box::from_raw(pgraph));
    }
}

/// Runs both graphs on `trials` random inputs and compares outputs.
/// A `tolerance` of 0 or below picks the default for the graph's dtype.
/// `passed` and `worst_error` may be null.
///
/// # Safety
/// `graph` and `pgraph` must be live handles; non-null out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn autoshard_verify(
    graph: *const AutoshardGraph,
    pgraph: *const AutoshardParallelGraph,
    trials: usize,
    tolerance: f64,
    seed: u64,
    passed: *mut bool,
    worst_error: *mut f64,
) -> AutoshardStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        let p = ref_arg(pgraph, "pgraph")?;
        let tol = if tolerance > 0.0 {
            tolerance
        } else {
            graph_tolerance(&g.raw)
        };
        let report = check_equivalence(&g.raw, &p.graph, trials, tol, seed)?;
        if !passed.is_null() {
            *passed = report.passed;
        }
        if !worst_error.is_null() {
            *worst_error = report.worst;
        }
        Ok(())
    })
}
