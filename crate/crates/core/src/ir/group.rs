use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::raw::{scope_depth, RawGraph, RawNode};
use super::tensor::{OpKind, TensorSpec};
use crate::error::{Error, Result};

/// A name-scoped group of compute operators; the unit that sharding
/// decisions are made for.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub scope: String,
    /// Member node names in topological order.
    pub members: Vec<String>,
    /// Indices of the members in [`GroupedGraph::raw`].
    pub member_idx: Vec<usize>,
    pub op: OpKind,
    pub weight: Option<TensorSpec>,
    /// Index (into `members`) of the member carrying `weight`.
    pub weight_member: Option<usize>,
    pub activation: TensorSpec,
    pub fan_in: Vec<usize>,
    pub fan_out: Vec<usize>,
}

impl GraphNode {
    pub fn depth(&self) -> usize {
        scope_depth(&self.scope)
    }

    pub fn weight_node(&self) -> Option<&str> {
        self.weight_member.map(|i| self.members[i].as_str())
    }
}

/// An auxiliary node removed by trimming, kept for restoration after rewriting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRecord {
    pub node: RawNode,
    /// Scope of the group the node belongs to, if any.
    pub owner: Option<String>,
}

/// The trimmed compute graph together with its grouping into [`GraphNode`]s.
#[derive(Debug, Clone)]
pub struct GroupedGraph {
    /// Compute-only raw graph with auxiliary bypasses re-stitched.
    pub raw: RawGraph,
    pub groups: Vec<GraphNode>,
    /// Group id of every node of `raw`.
    pub group_of: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub side_table: Vec<AuxRecord>,
}

impl GroupedGraph {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.groups.iter().map(GraphNode::depth).max().unwrap_or(0)
    }

    pub fn roots(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.fan_in.is_empty())
            .map(|g| g.id)
            .collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.fan_out.is_empty())
            .map(|g| g.id)
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.groups.iter().filter(|g| g.weight.is_some()).count()
    }

    pub fn group_by_scope(&self, scope: &str) -> Option<&GraphNode> {
        self.groups.iter().find(|g| g.scope == scope)
    }
}

/// Removes auxiliary nodes and clusters the remaining operators by name scope.
pub fn trim_and_group(graph: &RawGraph) -> Result<GroupedGraph> {
    let (trimmed, removed) = trim(graph)?;
    let keys = group_keys(&trimmed);
    let (groups, group_of, edges) = build_groups(&trimmed, keys);
    let scopes: HashSet<&str> = groups.iter().map(|g| g.scope.as_str()).collect();
    let side_table = removed
        .into_iter()
        .map(|(node, resolved)| {
            let owner = owner_of(&node.name, &scopes).or_else(|| {
                resolved
                    .and_then(|name| trimmed.index_of(&name))
                    .map(|i| groups[group_of[i]].scope.clone())
            });
            AuxRecord { node, owner }
        })
        .collect();
    Ok(GroupedGraph {
        raw: trimmed,
        groups,
        group_of,
        edges,
        side_table,
    })
}

/// Compute node an auxiliary node forwards, following first inputs.
fn resolve(graph: &RawGraph, idx: usize, memo: &mut [Option<Option<usize>>]) -> Option<usize> {
    if let Some(r) = memo[idx] {
        return r;
    }
    let r = if graph.node(idx).op != OpKind::Auxiliary {
        Some(idx)
    } else {
        graph
            .producers(idx)
            .first()
            .and_then(|&p| resolve(graph, p, memo))
    };
    memo[idx] = Some(r);
    r
}

pub(crate) type Removed = Vec<(RawNode, Option<String>)>;

pub(crate) fn trim(graph: &RawGraph) -> Result<(RawGraph, Removed)> {
    let mut memo = vec![None; graph.len()];
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        if node.op == OpKind::Auxiliary {
            let fwd = resolve(graph, i, &mut memo).map(|r| graph.node(r).name.clone());
            removed.push((node.clone(), fwd));
            continue;
        }
        let mut n = node.clone();
        n.inputs = graph
            .producers(i)
            .iter()
            .filter_map(|&p| resolve(graph, p, &mut memo))
            .map(|p| graph.node(p).name.clone())
            .collect();
        kept.push(n);
    }
    if kept.is_empty() {
        return Err(Error::EmptyGraph);
    }
    Ok((RawGraph::new(kept)?, removed))
}

/// Scope key per node: the enclosing scope, except that each weight-bearing
/// node gets a group of its own when its scope holds several weights.
fn group_keys(raw: &RawGraph) -> Vec<String> {
    let mut weights_per_scope: HashMap<&str, usize> = HashMap::new();
    for n in raw.nodes() {
        if n.weight.is_some() {
            *weights_per_scope.entry(n.scope()).or_default() += 1;
        }
    }
    raw.nodes()
        .iter()
        .map(|n| {
            if n.weight.is_some() && weights_per_scope[n.scope()] > 1 {
                n.name.clone()
            } else {
                n.scope().to_string()
            }
        })
        .collect()
}

type Built = (Vec<GraphNode>, Vec<usize>, Vec<(usize, usize)>);

fn build_groups(raw: &RawGraph, mut keys: Vec<String>) -> Built {
    loop {
        let (ids, scopes) = intern(&keys);
        let edges = group_edges(raw, &ids);
        match topo_groups(&scopes, &edges) {
            Ok(order) => return assemble(raw, &ids, &scopes, &edges, &order),
            Err(stuck) => {
                // Groups left unsorted sit on or behind a cycle; break them up.
                let mut split_any = false;
                for (i, key) in keys.iter_mut().enumerate() {
                    if stuck[ids[i]] && *key != raw.node(i).name {
                        *key = raw.node(i).name.clone();
                        split_any = true;
                    }
                }
                assert!(split_any, "singleton groups over a DAG are acyclic");
            }
        }
    }
}

fn intern(keys: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut map: HashMap<&str, usize> = HashMap::new();
    let mut scopes = Vec::new();
    let ids = keys
        .iter()
        .map(|k| {
            *map.entry(k.as_str()).or_insert_with(|| {
                scopes.push(k.clone());
                scopes.len() - 1
            })
        })
        .collect();
    (ids, scopes)
}

fn group_edges(raw: &RawGraph, ids: &[usize]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..raw.len())
        .flat_map(|c| raw.producers(c).iter().map(move |&p| (p, c)))
        .map(|(p, c)| (ids[p], ids[c]))
        .filter(|(a, b)| a != b)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Topological order of groups (ties by scope), or the set of unsorted groups.
fn topo_groups(scopes: &[String], edges: &[(usize, usize)]) -> Result<Vec<usize>, Vec<bool>> {
    let n = scopes.len();
    let mut indegree = vec![0usize; n];
    let mut out = vec![Vec::new(); n];
    for &(a, b) in edges {
        indegree[b] += 1;
        out[a].push(b);
    }
    let mut ready: BinaryHeap<Reverse<(&str, usize)>> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| Reverse((scopes[i].as_str(), i)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, g))) = ready.pop() {
        order.push(g);
        for &b in &out[g] {
            indegree[b] -= 1;
            if indegree[b] == 0 {
                ready.push(Reverse((scopes[b].as_str(), b)));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(indegree.iter().map(|&d| d > 0).collect())
    }
}

fn assemble(
    raw: &RawGraph,
    ids: &[usize],
    scopes: &[String],
    edges: &[(usize, usize)],
    order: &[usize],
) -> Built {
    let mut renumber = vec![0; scopes.len()];
    for (new, &old) in order.iter().enumerate() {
        renumber[old] = new;
    }
    let group_of: Vec<usize> = ids.iter().map(|&g| renumber[g]).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); scopes.len()];
    for (i, &g) in group_of.iter().enumerate() {
        members[g].push(i);
    }
    let edges: Vec<(usize, usize)> = {
        let mut e: Vec<_> = edges
            .iter()
            .map(|&(a, b)| (renumber[a], renumber[b]))
            .collect();
        e.sort_unstable();
        e
    };
    let mut groups: Vec<GraphNode> = order
        .iter()
        .enumerate()
        .map(|(id, &old)| {
            let idx = &members[id];
            let nodes: Vec<&RawNode> = idx.iter().map(|&i| raw.node(i)).collect();
            let weight_member = nodes.iter().position(|n| n.weight.is_some());
            let op = match weight_member {
                Some(w) => nodes[w].op,
                None => nodes
                    .iter()
                    .map(|n| n.op)
                    .min_by_key(|o| o.dominance())
                    .unwrap(),
            };
            GraphNode {
                id,
                scope: scopes[old].clone(),
                members: nodes.iter().map(|n| n.name.clone()).collect(),
                member_idx: idx.clone(),
                op,
                weight: weight_member.and_then(|w| nodes[w].weight.clone()),
                weight_member,
                activation: nodes.last().unwrap().output.clone(),
                fan_in: Vec::new(),
                fan_out: Vec::new(),
            }
        })
        .collect();
    for &(a, b) in &edges {
        groups[a].fan_out.push(b);
        groups[b].fan_in.push(a);
    }
    (groups, group_of, edges)
}

/// Group whose scope is the longest component-wise prefix of `name`.
fn owner_of(name: &str, scopes: &HashSet<&str>) -> Option<String> {
    let mut prefix = name;
    loop {
        if scopes.contains(prefix) && prefix != name {
            return Some(prefix.to_string());
        }
        match prefix.rsplit_once('/') {
            Some((head, _)) => prefix = head,
            None => return None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act() -> TensorSpec {
        TensorSpec::activation(vec![2, 4])
    }

    #[test]
    fn matmul_with_two_init_nodes_becomes_one_group() {
        let g = RawGraph::new(vec![
            RawNode::new("dense/kernel/Initializer", OpKind::Auxiliary, &[], act()),
            RawNode::new(
                "dense/kernel/Assign",
                OpKind::Auxiliary,
                &["dense/kernel/Initializer"],
                act(),
            ),
            RawNode::new("dense/MatMul", OpKind::MatMul, &[], act())
                .with_weight(TensorSpec::weight(vec![4, 4])),
        ])
        .unwrap();
        let grouped = trim_and_group(&g).unwrap();
        assert_eq!(grouped.len(), 1);
        assert_eq!(grouped.side_table.len(), 2);
        assert!(grouped
            .side_table
            .iter()
            .all(|r| r.owner.as_deref() == Some("dense")));
    }

    #[test]
    fn aux_in_the_middle_is_bypassed() {
        let g = RawGraph::new(vec![
            RawNode::new("x", OpKind::Input, &[], act()),
            RawNode::new("ckpt/Identity", OpKind::Auxiliary, &["x"], act()),
            RawNode::new("y/Tanh", OpKind::Elementwise, &["ckpt/Identity"], act())
                .with_attr("tanh"),
        ])
        .unwrap();
        let grouped = trim_and_group(&g).unwrap();
        assert_eq!(grouped.raw.get("y/Tanh").unwrap().inputs, vec!["x"]);
        assert_eq!(grouped.edges.len(), 1);
        assert_eq!(grouped.side_table[0].owner.as_deref(), Some("x"));
    }

    #[test]
    fn only_aux_is_empty() {
        let g = RawGraph::new(vec![RawNode::new("a", OpKind::Auxiliary, &[], act())]).unwrap();
        assert!(matches!(trim_and_group(&g), Err(Error::EmptyGraph)));
    }

    #[test]
    fn interleaved_scopes_are_split_to_stay_acyclic() {
        // a/1 -> b/1 -> a/2 would make scope groups a <-> b cyclic.
        let g = RawGraph::new(vec![
            RawNode::new("a/1", OpKind::Input, &[], act()),
            RawNode::new("b/1", OpKind::Elementwise, &["a/1"], act()),
            RawNode::new("a/2", OpKind::Elementwise, &["b/1"], act()),
        ])
        .unwrap();
        let grouped = trim_and_group(&g).unwrap();
        assert_eq!(grouped.len(), 3);
        for &(a, b) in &grouped.edges {
            assert!(a < b, "group ids follow topological order");
        }
    }

    #[test]
    fn several_weights_in_one_scope_get_their_own_groups() {
        let g = RawGraph::new(vec![
            RawNode::new("x", OpKind::Input, &[], act()),
            RawNode::new("s/a", OpKind::MatMul, &["x"], act())
                .with_weight(TensorSpec::weight(vec![4, 4])),
            RawNode::new("s/b", OpKind::MatMul, &["s/a"], act())
                .with_weight(TensorSpec::weight(vec![4, 4])),
            RawNode::new("s/act", OpKind::Elementwise, &["s/b"], act()).with_attr("tanh"),
        ])
        .unwrap();
        let grouped = trim_and_group(&g).unwrap();
        let scopes: Vec<_> = grouped.groups.iter().map(|g| g.scope.as_str()).collect();
        assert_eq!(scopes, ["x", "s/a", "s/b", "s"]);
        assert!(grouped.groups.iter().all(|g| g.members.len() == 1));
    }
}
