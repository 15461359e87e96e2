//! Shared-subgraph detection over scoped names.
//!
//! GraphNodes are clustered by name prefix at every scope depth. Walking from
//! the deepest level upwards, prefix groups whose structure repeats at least
//! `min_dup` times are accepted as shared blocks; a group that does not repeat
//! stops its whole branch from being accepted at shallower levels. Each
//! GraphNode ends up in the shallowest accepted block on its branch, or in a
//! residual unit of its own.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{GroupedGraph, OpKind};

/// First `depth` components of a scope, or `None` if it is shallower.
fn prefix_at(scope: &str, depth: usize) -> Option<&str> {
    let mut end = 0;
    let mut seen = 0;
    for (i, part) in scope.split('/').enumerate() {
        if i > 0 {
            end += 1;
        }
        end += part.len();
        seen += 1;
        if seen == depth {
            return Some(&scope[..end]);
        }
    }
    None
}

pub(crate) fn relative<'a>(name: &'a str, prefix: &str) -> &'a str {
    if name == prefix {
        ""
    } else {
        name.strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('/'))
            .unwrap_or(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrefixGroup {
    pub prefix: String,
    /// GraphNode ids, ascending.
    pub members: Vec<usize>,
}

/// Prefix groups of GraphNode scopes per depth; `levels[k - 1]` holds depth `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeTree {
    pub max_depth: usize,
    pub levels: Vec<Vec<PrefixGroup>>,
}

impl NodeTree {
    pub fn level(&self, depth: usize) -> &[PrefixGroup] {
        depth
            .checked_sub(1)
            .and_then(|k| self.levels.get(k))
            .map_or(&[], Vec::as_slice)
    }
}

pub fn build_node_tree(graph: &GroupedGraph) -> NodeTree {
    let max_depth = graph.depth();
    let levels = (1..=max_depth)
        .map(|depth| {
            let mut by_prefix: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for g in &graph.groups {
                if let Some(p) = prefix_at(&g.scope, depth) {
                    by_prefix.entry(p).or_default().push(g.id);
                }
            }
            by_prefix
                .into_iter()
                .map(|(prefix, members)| PrefixGroup {
                    prefix: prefix.to_string(),
                    members,
                })
                .collect()
        })
        .collect();
    NodeTree { max_depth, levels }
}

/// Coarse structural signature of a block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Signature {
    pub ops: Vec<(OpKind, usize)>,
    pub weight_shapes: Vec<Vec<usize>>,
    pub internal_edges: usize,
}

/// Relative name, op, attr, weight shape and output shape of one raw member.
type MemberKey = (
    String,
    OpKind,
    Option<String>,
    Option<Vec<usize>>,
    Vec<usize>,
);

/// Exact form of a block with names made relative to its prefix; two blocks
/// with equal keys are isomorphic under the prefix substitution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct BlockKey {
    nodes: Vec<MemberKey>,
    /// Raw edges inside the block: (producer, consumer, slot) by position in `nodes`.
    edges: Vec<(usize, usize, usize)>,
}

struct Block {
    key: BlockKey,
    signature: Signature,
}

fn describe(graph: &GroupedGraph, group: &PrefixGroup, steps: &mut u64) -> Block {
    let raw = &graph.raw;
    let mut idx: Vec<usize> = group
        .members
        .iter()
        .flat_map(|&g| graph.groups[g].member_idx.iter().copied())
        .collect();
    idx.sort_unstable();
    *steps += idx.len() as u64;
    let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let nodes = idx
        .iter()
        .map(|&i| {
            let n = raw.node(i);
            (
                relative(&n.name, &group.prefix).to_string(),
                n.op,
                n.attr.clone(),
                n.weight.as_ref().map(|w| w.shape.clone()),
                n.output.shape.clone(),
            )
        })
        .collect::<Vec<_>>();
    let mut edges = Vec::new();
    for (c, &i) in idx.iter().enumerate() {
        for (slot, p) in raw.producers(i).iter().enumerate() {
            if let Some(&pp) = pos.get(p) {
                edges.push((pp, c, slot));
            }
        }
    }
    let members: HashSet<usize> = group.members.iter().copied().collect();
    let internal_edges = graph
        .edges
        .iter()
        .filter(|(a, b)| members.contains(a) && members.contains(b))
        .count();
    let mut ops: BTreeMap<OpKind, usize> = BTreeMap::new();
    let mut weight_shapes = Vec::new();
    for n in &nodes {
        *ops.entry(n.1).or_default() += 1;
        if let Some(w) = &n.3 {
            weight_shapes.push(w.clone());
        }
    }
    weight_shapes.sort();
    Block {
        key: BlockKey { nodes, edges },
        signature: Signature {
            ops: ops.into_iter().collect(),
            weight_shapes,
            internal_edges,
        },
    }
}

/// A bucket of isomorphic prefix groups at one depth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimilarBlocks {
    pub signature: Signature,
    pub count: usize,
    pub prefixes: Vec<String>,
}

/// Buckets the prefix groups at `depth` by structure, in order of first
/// appearance.
pub fn find_similar_blocks(
    graph: &GroupedGraph,
    tree: &NodeTree,
    depth: usize,
) -> Vec<SimilarBlocks> {
    let mut steps = 0;
    bucket_level(graph, tree.level(depth), &mut steps)
        .into_iter()
        .map(|(sig, prefixes)| SimilarBlocks {
            signature: sig,
            count: prefixes.len(),
            prefixes: prefixes
                .into_iter()
                .map(|i| tree.level(depth)[i].prefix.clone())
                .collect(),
        })
        .collect()
}

fn bucket_level(
    graph: &GroupedGraph,
    level: &[PrefixGroup],
    steps: &mut u64,
) -> Vec<(Signature, Vec<usize>)> {
    let mut buckets: Vec<(Signature, Vec<usize>)> = Vec::new();
    let mut index: HashMap<BlockKey, usize> = HashMap::new();
    for (i, group) in level.iter().enumerate() {
        let block = describe(graph, group, steps);
        match index.get(&block.key) {
            Some(&b) => buckets[b].1.push(i),
            None => {
                index.insert(block.key, buckets.len());
                buckets.push((block.signature, vec![i]));
            }
        }
    }
    buckets
}

/// One instance of a search unit: its prefix and GraphNode ids aligned with
/// the template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub prefix: String,
    pub nodes: Vec<usize>,
}

/// A search unit: a shared block with all its instances, or a residual
/// GraphNode with multiplicity 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Subgraph {
    pub id: usize,
    pub shared: bool,
    /// GraphNode ids of the representative instance, topologically ordered.
    pub template: Vec<usize>,
    /// Template scopes relative to the instance prefix.
    pub relative: Vec<String>,
    pub internal_edges: Vec<(usize, usize)>,
    pub instances: Vec<Instance>,
    pub signature: Signature,
    /// Template positions fed from outside the block.
    pub entries: Vec<usize>,
    /// Template positions that feed nodes outside the block.
    pub exits: Vec<usize>,
}

impl Subgraph {
    pub fn multiplicity(&self) -> usize {
        self.instances.len()
    }

    pub fn weight_count(&self, graph: &GroupedGraph) -> usize {
        self.template
            .iter()
            .filter(|&&g| graph.groups[g].weight.is_some())
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneStats {
    pub min_duplicates: usize,
    pub graph_nodes: usize,
    pub raw_nodes: usize,
    /// Distinct shared blocks.
    pub unique_subgraphs: usize,
    pub residual_units: usize,
    pub search_units: usize,
    /// GraphNodes the search visits: template sizes summed over units.
    pub search_nodes: usize,
    /// Raw-node visits spent describing prefix groups.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneResult {
    pub subgraphs: Vec<Subgraph>,
    pub stats: PruneStats,
}

impl PruneResult {
    pub fn shared(&self) -> impl Iterator<Item = &Subgraph> {
        self.subgraphs.iter().filter(|s| s.shared)
    }
}

pub fn prune_graph(graph: &GroupedGraph, min_dup: usize) -> Result<PruneResult> {
    if min_dup == 0 {
        return Err(Error::BadConfig("min_duplicates must be at least 1".into()));
    }
    let mut steps = 0u64;
    let mut selected: Vec<Option<String>> = vec![None; graph.len()];
    if min_dup > 1 {
        let tree = build_node_tree(graph);
        let mut blocked: HashSet<String> = HashSet::new();
        for depth in (1..=tree.max_depth).rev() {
            let level = tree.level(depth);
            let mut next_blocked = HashSet::new();
            for (_, members) in bucket_level(graph, level, &mut steps) {
                let ok = members.len() >= min_dup;
                for i in members {
                    let group = &level[i];
                    if ok && !blocked.contains(&group.prefix) {
                        for &g in &group.members {
                            selected[g] = Some(group.prefix.clone());
                        }
                    } else if let Some((parent, _)) = group.prefix.rsplit_once('/') {
                        next_blocked.insert(parent.to_string());
                    }
                }
            }
            for b in &blocked {
                if let Some((parent, _)) = b.rsplit_once('/') {
                    next_blocked.insert(parent.to_string());
                }
            }
            blocked = next_blocked;
        }
    }
    let mut subgraphs = if min_dup == 1 {
        vec![whole_graph(graph)]
    } else {
        assemble_units(graph, &selected, min_dup, &mut steps)
    };
    subgraphs.sort_by_key(|s| s.template[0]);
    for (i, s) in subgraphs.iter_mut().enumerate() {
        s.id = i;
    }
    let stats = PruneStats {
        min_duplicates: min_dup,
        graph_nodes: graph.len(),
        raw_nodes: graph.raw.len(),
        unique_subgraphs: subgraphs.iter().filter(|s| s.shared).count(),
        residual_units: subgraphs.iter().filter(|s| !s.shared).count(),
        search_units: subgraphs.len(),
        search_nodes: subgraphs.iter().map(|s| s.template.len()).sum(),
        steps,
    };
    Ok(PruneResult { subgraphs, stats })
}

fn whole_graph(graph: &GroupedGraph) -> Subgraph {
    let all: Vec<usize> = (0..graph.len()).collect();
    let group = PrefixGroup {
        prefix: String::new(),
        members: all.clone(),
    };
    let mut steps = 0;
    let signature = describe(graph, &group, &mut steps).signature;
    unit(
        graph,
        vec![Instance {
            prefix: String::new(),
            nodes: all,
        }],
        signature,
        false,
    )
}

fn assemble_units(
    graph: &GroupedGraph,
    selected: &[Option<String>],
    min_dup: usize,
    steps: &mut u64,
) -> Vec<Subgraph> {
    let mut by_prefix: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, p) in selected.iter().enumerate() {
        if let Some(p) = p {
            by_prefix.entry(p).or_default().push(g);
        }
    }
    let groups: Vec<PrefixGroup> = by_prefix
        .into_iter()
        .map(|(prefix, members)| PrefixGroup {
            prefix: prefix.to_string(),
            members,
        })
        .collect();
    let mut covered = vec![false; graph.len()];
    let mut out = Vec::new();
    for (signature, members) in bucket_level(graph, &groups, steps) {
        // Instances swallowed by a shallower block may leave too few behind.
        if members.len() < min_dup {
            continue;
        }
        let instances = members
            .iter()
            .map(|&i| {
                let group = &groups[i];
                for &g in &group.members {
                    covered[g] = true;
                }
                Instance {
                    prefix: group.prefix.clone(),
                    nodes: group.members.clone(),
                }
            })
            .collect();
        out.push(unit(graph, instances, signature, true));
    }
    for (g, &done) in covered.iter().enumerate() {
        if !done {
            let group = PrefixGroup {
                prefix: graph.groups[g].scope.clone(),
                members: vec![g],
            };
            let signature = describe(graph, &group, steps).signature;
            let inst = Instance {
                prefix: group.prefix,
                nodes: vec![g],
            };
            out.push(unit(graph, vec![inst], signature, false));
        }
    }
    out
}

/// Builds a unit from instances whose node lists are in id order, aligning
/// every instance with the first by relative scope.
fn unit(
    graph: &GroupedGraph,
    mut instances: Vec<Instance>,
    signature: Signature,
    shared: bool,
) -> Subgraph {
    let first = instances[0].clone();
    let rel_names: Vec<String> = first
        .nodes
        .iter()
        .map(|&g| relative(&graph.groups[g].scope, &first.prefix).to_string())
        .collect();
    for inst in instances.iter_mut().skip(1) {
        let by_rel: HashMap<&str, usize> = inst
            .nodes
            .iter()
            .map(|&g| (relative(&graph.groups[g].scope, &inst.prefix), g))
            .collect();
        inst.nodes = rel_names.iter().map(|r| by_rel[r.as_str()]).collect();
    }
    let pos: HashMap<usize, usize> = first
        .nodes
        .iter()
        .enumerate()
        .map(|(p, &g)| (g, p))
        .collect();
    let mut internal_edges = Vec::new();
    let mut entries = Vec::new();
    let mut exits = Vec::new();
    for (p, &g) in first.nodes.iter().enumerate() {
        let node = &graph.groups[g];
        if node.fan_in.iter().any(|f| !pos.contains_key(f)) {
            entries.push(p);
        }
        if node.fan_out.iter().any(|f| !pos.contains_key(f)) {
            exits.push(p);
        }
        for f in &node.fan_out {
            if let Some(&q) = pos.get(f) {
                internal_edges.push((p, q));
            }
        }
    }
    internal_edges.sort_unstable();
    Subgraph {
        id: 0,
        shared,
        template: first.nodes,
        relative: rel_names,
        internal_edges,
        instances,
        signature,
        entries,
        exits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{gen_transformer_stack, trim_and_group, RawGraph, RawNode, TensorSpec};

    fn grouped(names: &[&str]) -> GroupedGraph {
        let mut nodes = Vec::new();
        let mut prev: Option<&str> = None;
        for n in names {
            let inputs: Vec<&str> = prev.into_iter().collect();
            nodes.push(RawNode::new(
                *n,
                OpKind::Elementwise,
                &inputs,
                TensorSpec::activation(vec![2]),
            ));
            prev = Some(n);
        }
        trim_and_group(&RawGraph::new(nodes).unwrap()).unwrap()
    }

    #[test]
    fn prefix_helper() {
        assert_eq!(prefix_at("a/b/c", 1), Some("a"));
        assert_eq!(prefix_at("a/b/c", 3), Some("a/b/c"));
        assert_eq!(prefix_at("a/b/c", 4), None);
        assert_eq!(relative("a/b/c", "a"), "b/c");
        assert_eq!(relative("a", "a"), "");
    }

    #[test]
    fn depth_one_groups_count_prefixes() {
        let g = grouped(&["a/x/op", "a/y/op", "b/x/op"]);
        let tree = build_node_tree(&g);
        let level: Vec<_> = tree
            .level(1)
            .iter()
            .map(|p| (p.prefix.as_str(), p.members.len()))
            .collect();
        assert_eq!(level, [("a", 2), ("b", 1)]);
        assert!(tree.level(0).is_empty());
        assert!(tree.level(9).is_empty());
    }

    #[test]
    fn single_node_has_one_level() {
        let g = grouped(&["x"]);
        let tree = build_node_tree(&g);
        assert_eq!(tree.max_depth, 1);
        assert_eq!(tree.level(1).len(), 1);
    }

    #[test]
    fn transformer_layers_fold_into_one_block() {
        let g = trim_and_group(&gen_transformer_stack(24, 8, 2).unwrap()).unwrap();
        let r = prune_graph(&g, 2).unwrap();
        let shared: Vec<_> = r.shared().collect();
        assert_eq!(shared.len(), 1);
        assert_eq!(shared[0].multiplicity(), 24);
        assert_eq!(shared[0].weight_count(&g), 6);
        assert_eq!(shared[0].template.len(), 11);
        assert_eq!(r.stats.residual_units, 5);
        let mut seen = vec![0; g.len()];
        for s in &r.subgraphs {
            for inst in &s.instances {
                for &n in &inst.nodes {
                    seen[n] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn min_dup_one_keeps_the_whole_graph() {
        let g = trim_and_group(&gen_transformer_stack(3, 8, 2).unwrap()).unwrap();
        let r = prune_graph(&g, 1).unwrap();
        assert_eq!(r.subgraphs.len(), 1);
        assert_eq!(r.stats.search_nodes, g.len());
        assert!(prune_graph(&g, 0).is_err());
    }

    #[test]
    fn threshold_above_every_count_leaves_only_residuals() {
        let g = trim_and_group(&gen_transformer_stack(3, 8, 2).unwrap()).unwrap();
        let r = prune_graph(&g, 1000).unwrap();
        assert_eq!(r.stats.unique_subgraphs, 0);
        assert_eq!(r.subgraphs.len(), g.len());
    }

    #[test]
    fn instances_align_by_relative_scope() {
        let g = trim_and_group(&gen_transformer_stack(4, 8, 2).unwrap()).unwrap();
        let r = prune_graph(&g, 2).unwrap();
        let s = r.shared().next().unwrap();
        for inst in &s.instances {
            for (p, &n) in inst.nodes.iter().enumerate() {
                assert_eq!(
                    g.groups[n].scope,
                    format!("{}/{}", inst.prefix, s.relative[p])
                );
            }
        }
    }
}

/// One template position of a [`SubgraphSummary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TemplateOp {
    pub scope: String,
    pub op: OpKind,
    pub weight: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubgraphSummary {
    pub id: usize,
    pub shared: bool,
    pub multiplicity: usize,
    pub instances: Vec<String>,
    pub template: Vec<TemplateOp>,
}

/// Pruning outcome in report form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub stats: PruneStats,
    /// GraphNodes searched over GraphNodes in the model.
    pub pruning_ratio: f64,
    pub subgraphs: Vec<SubgraphSummary>,
}

impl PruneReport {
    pub fn new(graph: &GroupedGraph, result: &PruneResult) -> PruneReport {
        let subgraphs = result
            .subgraphs
            .iter()
            .map(|s| SubgraphSummary {
                id: s.id,
                shared: s.shared,
                multiplicity: s.multiplicity(),
                instances: s.instances.iter().map(|i| i.prefix.clone()).collect(),
                template: s
                    .template
                    .iter()
                    .zip(&s.relative)
                    .map(|(&g, rel)| TemplateOp {
                        scope: rel.clone(),
                        op: graph.groups[g].op,
                        weight: graph.groups[g].weight.as_ref().map(|w| w.shape.clone()),
                    })
                    .collect(),
            })
            .collect();
        let stats = result.stats.clone();
        PruneReport {
            pruning_ratio: stats.search_nodes as f64 / stats.graph_nodes.max(1) as f64,
            stats,
            subgraphs,
        }
    }
}
