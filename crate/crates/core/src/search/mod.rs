//! Plan search: per search unit, enumerate every weight layout assignment,
//! route it through the unit, cost it, and keep the cheapest. The winner of a
//! shared block is applied to all of its instances.

mod enumerate;
mod route;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use enumerate::{enumerate_all_plans, weight_options, CandidatePlan, PlanSpace};
pub use route::{pattern_routing, EdgeCollective, Invalid, Region, RoutedNode, RoutedPlan};

use crate::cost::{plan_cost, ClusterSpec, CostReport};
use crate::error::{Error, Result};
use crate::ir::GroupedGraph;
use crate::patterns::ShardSpec;
use crate::prune::{prune_graph, relative, PruneResult, PruneStats};

/// Largest per-unit candidate count searched before giving up.
pub const DEFAULT_MAX_CANDIDATES: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOptions {
    /// Worker threads; 0 lets the pool pick one per core.
    pub jobs: usize,
    /// Rows of the cost table kept per unit, cheapest first.
    pub table_limit: usize,
    pub max_candidates: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            jobs: 0,
            table_limit: 16,
            max_candidates: DEFAULT_MAX_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub index: u64,
    pub assignments: Vec<ShardSpec>,
    pub total: f64,
    pub splits: usize,
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    index: u64,
    total: f64,
    splits: usize,
}

/// Cost first, then fewer split weights, then enumeration order.
fn rank(a: &Scored, b: &Scored) -> Ordering {
    a.total
        .total_cmp(&b.total)
        .then(a.splits.cmp(&b.splits))
        .then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, Default)]
struct Acc {
    top: Vec<Scored>,
    best: Option<Scored>,
    enumerated: u64,
    valid: u64,
    steps: u64,
}

impl Acc {
    fn push(mut self, scored: Option<Scored>, steps: u64, limit: usize) -> Self {
        self.enumerated += 1;
        self.steps += steps;
        if let Some(s) = scored {
            self.valid += 1;
            if self.best.is_none_or(|b| rank(&s, &b) == Ordering::Less) {
                self.best = Some(s);
            }
            if limit > 0 {
                let at = self.top.partition_point(|t| rank(t, &s) == Ordering::Less);
                if at < limit {
                    self.top.insert(at, s);
                    self.top.truncate(limit);
                }
            }
        }
        self
    }

    fn merge(mut self, other: Acc, limit: usize) -> Self {
        self.enumerated += other.enumerated;
        self.valid += other.valid;
        self.steps += other.steps;
        self.best = match (self.best, other.best) {
            (Some(a), Some(b)) => Some(if rank(&a, &b) == Ordering::Greater {
                b
            } else {
                a
            }),
            (a, b) => a.or(b),
        };
        self.top.extend(other.top);
        self.top.sort_by(rank);
        self.top.truncate(limit);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitReport {
    pub id: usize,
    pub shared: bool,
    pub multiplicity: usize,
    pub instances: Vec<String>,
    /// Weight names relative to the instance prefix.
    pub weights: Vec<String>,
    pub candidates: u64,
    pub valid: u64,
    pub routing_steps: u64,
    pub best: TableRow,
    /// Cost of one instance under the best plan.
    pub best_cost: CostReport,
    pub best_routing: Vec<RoutedNode>,
    pub table: Vec<TableRow>,
    pub table_truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub candidates_enumerated: u64,
    pub valid_plans: u64,
    pub routing_steps: u64,
    pub unique_subgraphs: usize,
    pub search_units: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshInfo {
    pub m: usize,
    pub n: usize,
    pub devices: usize,
}

/// Result of [`derive_plan`]: the winning layout of every weight plus the
/// per-unit cost tables that led to it.
#[derive(Debug, Clone, Serialize)]
pub struct BestPlanReport {
    pub mesh: MeshInfo,
    pub min_duplicates: usize,
    pub cluster: ClusterSpec,
    pub prune: PruneStats,
    pub search: SearchStats,
    pub cost: CostReport,
    pub assignments: BTreeMap<String, ShardSpec>,
    pub units: Vec<UnitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(skip)]
    pub model: ModelPlan,
}

/// The part of a plan report needed to rebuild the routed model plan.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PlanFile {
    pub mesh: MeshInfo,
    pub min_duplicates: usize,
    pub assignments: BTreeMap<String, ShardSpec>,
}

impl PlanFile {
    pub fn parse(bytes: &[u8]) -> Result<PlanFile> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("plan file: {e}")))
    }
}

fn join(prefix: &str, rel: &str) -> String {
    match (prefix.is_empty(), rel.is_empty()) {
        (true, _) => rel.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}/{rel}"),
    }
}

/// A routed plan for every instance of every search unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelPlan {
    pub devices: usize,
    pub assignments: BTreeMap<String, ShardSpec>,
    pub routed: Vec<RoutedPlan>,
    pub cost: CostReport,
    /// Raw node index -> (routed plan, position).
    locate: Vec<(usize, usize)>,
    /// Raw node index -> incoming edge conversions by slot.
    inputs: Vec<Vec<Option<(usize, usize)>>>,
    /// Raw node index -> exit conversion.
    exits: Vec<Option<(usize, usize)>>,
}

impl ModelPlan {
    /// Routes every unit instance of `prune` under `assignments`, which must
    /// name every weight of the graph.
    pub fn route(
        graph: &GroupedGraph,
        prune: &PruneResult,
        assignments: &BTreeMap<String, ShardSpec>,
        mesh: &ClusterSpec,
    ) -> Result<ModelPlan> {
        let d = mesh.devices();
        let n = graph.raw.len();
        for name in assignments.keys() {
            match graph.raw.get(name) {
                Some(node) if node.weight.is_some() => {}
                _ => {
                    return Err(Error::BadConfig(format!(
                        "plan assigns a layout to `{name}`, which is not a weight of the graph"
                    )))
                }
            }
        }
        let mut plan = ModelPlan {
            devices: d,
            assignments: assignments.clone(),
            locate: vec![(usize::MAX, 0); n],
            inputs: (0..n)
                .map(|i| vec![None; graph.raw.producers(i).len()])
                .collect(),
            exits: vec![None; n],
            ..ModelPlan::default()
        };
        for unit in &prune.subgraphs {
            for inst in &unit.instances {
                let region = Region::new(graph, &inst.nodes, d);
                let specs = region
                    .weight_names()
                    .iter()
                    .map(|w| {
                        assignments.get(*w).copied().ok_or_else(|| {
                            Error::BadConfig(format!("plan has no layout for weight `{w}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let routed = pattern_routing(&region, &specs, mesh).map_err(|inv| {
                    Error::NoValidPlan(format!("assignment does not route at node `{}`", inv.node))
                })?;
                plan.cost.add(&plan_cost(&routed, mesh));
                let r = plan.routed.len();
                for (p, node) in routed.nodes.iter().enumerate() {
                    plan.locate[node.raw] = (r, p);
                }
                for (e, edge) in routed.edges.iter().enumerate() {
                    let producer = edge.producer.map(|p| routed.nodes[p].raw);
                    match (edge.consumer, producer) {
                        (Some(c), _) => plan.inputs[routed.nodes[c].raw][edge.slot] = Some((r, e)),
                        (None, Some(p)) => plan.exits[p] = Some((r, e)),
                        (None, None) => {}
                    }
                }
                plan.routed.push(routed);
            }
        }
        debug_assert!(plan.locate.iter().all(|&(r, _)| r != usize::MAX));
        Ok(plan)
    }

    /// Index into `routed` of the unit instance holding raw node `raw`.
    pub fn instance_of(&self, raw: usize) -> usize {
        self.locate[raw].0
    }

    pub fn node(&self, raw: usize) -> &RoutedNode {
        let (r, p) = self.locate[raw];
        &self.routed[r].nodes[p]
    }

    /// Conversion on input `slot` of raw node `raw`, if the producer lies in
    /// the same unit instance.
    pub fn input_conversion(&self, raw: usize, slot: usize) -> Option<&EdgeCollective> {
        self.inputs[raw][slot].map(|(r, e)| &self.routed[r].edges[e])
    }

    /// Conversion to Replica applied where `raw`'s output leaves its unit instance.
    pub fn exit_conversion(&self, raw: usize) -> Option<&EdgeCollective> {
        self.exits[raw].map(|(r, e)| &self.routed[r].edges[e])
    }

    /// Non-identity collectives the plan requires: pattern collectives plus
    /// edge and exit conversions.
    pub fn collective_count(&self) -> usize {
        self.routed
            .iter()
            .map(|r| {
                r.nodes
                    .iter()
                    .filter(|n| !n.collective.is_identity())
                    .count()
                    + r.edges.iter().filter(|e| !e.kind.is_identity()).count()
            })
            .sum()
    }
}

/// Prunes `graph`, searches every search unit independently and assembles
/// the cheapest model plan.
pub fn derive_plan(
    graph: &GroupedGraph,
    mesh: &ClusterSpec,
    min_dup: usize,
    opts: &SearchOptions,
) -> Result<BestPlanReport> {
    let start = Instant::now();
    mesh.validate()?;
    let prune = prune_graph(graph, min_dup)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::BadConfig(format!("worker pool: {e}")))?;
    let d = mesh.devices();
    let limit = opts.table_limit;
    let mut units = Vec::with_capacity(prune.subgraphs.len());
    let mut assignments = BTreeMap::new();
    let mut stats = SearchStats {
        candidates_enumerated: 0,
        valid_plans: 0,
        routing_steps: 0,
        unique_subgraphs: prune.stats.unique_subgraphs,
        search_units: prune.subgraphs.len(),
    };
    for unit in &prune.subgraphs {
        let first = &unit.instances[0];
        let region = Region::new(graph, &first.nodes, d);
        let space = PlanSpace::new(region.weights.iter().map(|&p| {
            let node = graph.raw.node(region.nodes[p]);
            let rank = node.weight.as_ref().map_or(0, |w| w.rank());
            (relative(&node.name, &first.prefix).to_string(), rank)
        }));
        if space.count > opts.max_candidates as u128 {
            return Err(Error::SearchTooLarge {
                candidates: space.count,
                limit: opts.max_candidates as u128,
            });
        }
        let count = space.count as u64;
        let acc = pool.install(|| {
            (0..count)
                .into_par_iter()
                .fold(Acc::default, |acc, index| {
                    let cand = space.decode(index);
                    match pattern_routing(&region, &cand.assignments, mesh) {
                        Ok(routed) => {
                            let scored = Scored {
                                index,
                                total: plan_cost(&routed, mesh).total,
                                splits: cand.splits(),
                            };
                            acc.push(Some(scored), routed.steps, limit)
                        }
                        Err(inv) => acc.push(None, inv.steps, limit),
                    }
                })
                .reduce(Acc::default, |a, b| a.merge(b, limit))
        });
        let best = acc.best.ok_or_else(|| {
            Error::NoValidPlan(format!(
                "no candidate routes for unit at `{}`",
                first.prefix
            ))
        })?;
        let best_plan = space.decode(best.index);
        let routed = pattern_routing(&region, &best_plan.assignments, mesh)
            .expect("best candidate routed during search");
        let best_cost = plan_cost(&routed, mesh);
        for inst in &unit.instances {
            for (rel, spec) in space.weights.iter().zip(&best_plan.assignments) {
                assignments.insert(join(&inst.prefix, rel), *spec);
            }
        }
        let row = |s: &Scored| TableRow {
            index: s.index,
            assignments: space.decode(s.index).assignments,
            total: s.total,
            splits: s.splits,
        };
        stats.candidates_enumerated += acc.enumerated;
        stats.valid_plans += acc.valid;
        stats.routing_steps += acc.steps;
        units.push(UnitReport {
            id: unit.id,
            shared: unit.shared,
            multiplicity: unit.multiplicity(),
            instances: unit.instances.iter().map(|i| i.prefix.clone()).collect(),
            weights: space.weights.clone(),
            candidates: acc.enumerated,
            valid: acc.valid,
            routing_steps: acc.steps,
            best: row(&best),
            best_cost,
            best_routing: routed.nodes,
            table_truncated: (acc.valid as usize) > acc.top.len(),
            table: acc.top.iter().map(row).collect(),
        });
    }
    let model = ModelPlan::route(graph, &prune, &assignments, mesh)?;
    Ok(BestPlanReport {
        mesh: MeshInfo {
            m: mesh.m,
            n: mesh.n,
            devices: d,
        },
        min_duplicates: min_dup,
        cluster: mesh.clone(),
        prune: prune.stats,
        search: stats,
        cost: model.cost.clone(),
        assignments,
        units,
        wall_time_s: Some(start.elapsed().as_secs_f64()),
        model,
    })
}
