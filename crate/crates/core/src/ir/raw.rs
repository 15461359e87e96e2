use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::tensor::{DType, OpKind, OpMode, TensorSpec};
use crate::error::{Error, Result};

/// One operator of an imported model, addressed by a `/`-scoped name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawNode {
    pub name: String,
    pub op: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<String>,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub weight: Option<TensorSpec>,
    pub output: TensorSpec,
}

impl RawNode {
    pub fn new(name: impl Into<String>, op: OpKind, inputs: &[&str], output: TensorSpec) -> Self {
        RawNode {
            name: name.into(),
            op,
            attr: None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weight: None,
            output,
        }
    }

    pub fn with_weight(mut self, weight: TensorSpec) -> Self {
        self.weight = Some(weight);
        self
    }

    pub fn with_attr(mut self, attr: impl Into<String>) -> Self {
        self.attr = Some(attr.into());
        self
    }

    pub fn mode(&self) -> Result<OpMode> {
        OpMode::resolve(
            self.op,
            self.attr.as_deref(),
            self.weight.is_some(),
            self.inputs.len(),
        )
    }

    /// Enclosing name scope, or the name itself for top-level nodes.
    pub fn scope(&self) -> &str {
        match self.name.rsplit_once('/') {
            Some((scope, _)) if !scope.is_empty() => scope,
            _ => &self.name,
        }
    }
}

pub(crate) fn scope_depth(name: &str) -> usize {
    name.split('/').filter(|s| !s.is_empty()).count()
}

/// A validated DAG of [`RawNode`]s, stored in canonical order: topological,
/// ties broken by lexicographic name.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraph {
    nodes: Vec<RawNode>,
    index: HashMap<String, usize>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
}

impl RawGraph {
    pub fn new(nodes: Vec<RawNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.name.clone(), i).is_some() {
                return Err(Error::DuplicateName(n.name.clone()));
            }
            n.output.validate()?;
            if let Some(w) = &n.weight {
                w.validate()?;
            }
            n.mode()?;
        }
        let mut producers = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let mut ps = Vec::with_capacity(n.inputs.len());
            for input in &n.inputs {
                let &p = index.get(input).ok_or_else(|| Error::DanglingRef {
                    node: n.name.clone(),
                    input: input.clone(),
                })?;
                ps.push(p);
            }
            producers.push(ps);
        }
        let order = canonical_order(&nodes, &producers)?;

        // Re-index into canonical order.
        let mut position = vec![0; nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let mut slots: Vec<Option<RawNode>> = nodes.into_iter().map(Some).collect();
        let nodes: Vec<RawNode> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        let producers: Vec<Vec<usize>> = order
            .iter()
            .map(|&old| producers[old].iter().map(|&p| position[p]).collect())
            .collect();
        let mut consumers = vec![Vec::new(); nodes.len()];
        for (c, ps) in producers.iter().enumerate() {
            for &p in ps {
                if !consumers[p].contains(&c) {
                    consumers[p].push(c);
                }
            }
        }
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.clone(), i))
            .collect();
        Ok(RawGraph {
            nodes,
            index,
            producers,
            consumers,
        })
    }

    pub fn nodes(&self) -> &[RawNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, idx: usize) -> &RawNode {
        &self.nodes[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&RawNode> {
        self.index_of(name).map(|i| &self.nodes[i])
    }

    /// Producer indices of `idx`, one per input slot.
    pub fn producers(&self, idx: usize) -> &[usize] {
        &self.producers[idx]
    }

    /// Distinct consumer indices of `idx`.
    pub fn consumers(&self, idx: usize) -> &[usize] {
        &self.consumers[idx]
    }

    pub fn edge_count(&self) -> usize {
        self.producers.iter().map(Vec::len).sum()
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.producers[i].is_empty())
            .collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.consumers[i].is_empty())
            .collect()
    }

    /// Maximum scope depth over node names.
    pub fn depth(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| scope_depth(&n.name))
            .max()
            .unwrap_or(0)
    }

    pub fn weights(&self) -> impl Iterator<Item = (&RawNode, &TensorSpec)> {
        self.nodes
            .iter()
            .filter_map(|n| n.weight.as_ref().map(|w| (n, w)))
    }

    pub fn parameter_bytes(&self) -> u64 {
        self.weights().map(|(_, w)| w.byte_size()).sum()
    }

    /// Copy of the graph with every tensor retyped to `dtype`.
    pub fn with_dtype(&self, dtype: DType) -> RawGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            n.output = n.output.with_dtype(dtype);
            if let Some(w) = &mut n.weight {
                *w = w.with_dtype(dtype);
            }
        }
        g
    }

    pub fn into_nodes(self) -> Vec<RawNode> {
        self.nodes
    }
}

fn canonical_order(nodes: &[RawNode], producers: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (c, ps) in producers.iter().enumerate() {
        for &p in ps {
            indegree[c] += 1;
            consumers[p].push(c);
        }
    }
    let mut ready: BinaryHeap<Reverse<(&str, usize)>> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| Reverse((nodes[i].name.as_str(), i)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse((nodes[c].name.as_str(), c)));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    let (from, to) = find_back_edge(nodes, producers, &indegree);
    Err(Error::Cycle { from, to })
}

/// Walks producer links among unsorted nodes until one repeats; every
/// unsorted node has an unsorted producer, so the walk must close a cycle.
fn find_back_edge(
    nodes: &[RawNode],
    producers: &[Vec<usize>],
    indegree: &[usize],
) -> (String, String) {
    let start = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap();
    let mut seen = vec![false; nodes.len()];
    let mut cur = start;
    loop {
        seen[cur] = true;
        let p = *producers[cur]
            .iter()
            .find(|&&p| indegree[p] > 0)
            .expect("unsorted node has an unsorted producer");
        if seen[p] {
            return (nodes[p].name.clone(), nodes[cur].name.clone());
        }
        cur = p;
    }
}
