use std::collections::HashMap;

use serde::Serialize;

use crate::cost::{collective_cost, ClusterSpec};
use crate::ir::{GroupedGraph, OpMode, TensorSpec};
use crate::patterns::{
    bind_all, conversion_collective, BoundPattern, CollectiveKind, NodeShapes, ShardSpec,
};
use crate::rewrite::fusion::Gradient;

/// Raw compute nodes of one instance of a search unit.
#[derive(Debug, Clone)]
pub struct Region<'g> {
    pub graph: &'g GroupedGraph,
    /// Indices into `graph.raw`, ascending and therefore topological.
    pub nodes: Vec<usize>,
    pos: HashMap<usize, usize>,
    /// Positions (in `nodes`) of weight-bearing nodes.
    pub weights: Vec<usize>,
    /// Per node: does any consumer lie outside the region?
    exits: Vec<bool>,
    bound: Vec<Vec<BoundPattern>>,
}

impl<'g> Region<'g> {
    /// Region covering the given GraphNodes, with patterns bound for `parts` devices.
    pub fn new(graph: &'g GroupedGraph, groups: &[usize], parts: usize) -> Self {
        let mut nodes: Vec<usize> = groups
            .iter()
            .flat_map(|&g| graph.groups[g].member_idx.iter().copied())
            .collect();
        nodes.sort_unstable();
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let raw = &graph.raw;
        let weights = (0..nodes.len())
            .filter(|&p| raw.node(nodes[p]).weight.is_some())
            .collect();
        let exits = nodes
            .iter()
            .map(|&i| raw.consumers(i).iter().any(|c| !pos.contains_key(c)))
            .collect();
        let bound = nodes
            .iter()
            .map(|&i| {
                let n = raw.node(i);
                let inputs: Vec<&[usize]> = raw
                    .producers(i)
                    .iter()
                    .map(|&p| raw.node(p).output.shape.as_slice())
                    .collect();
                let shapes = NodeShapes {
                    mode: n.mode().expect("validated graph"),
                    inputs: &inputs,
                    weight: n.weight.as_ref().map(|w| w.shape.as_slice()),
                    output: &n.output.shape,
                };
                bind_all(&shapes, parts)
            })
            .collect();
        Region {
            graph,
            nodes,
            pos,
            weights,
            exits,
            bound,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight_names(&self) -> Vec<&str> {
        self.weights
            .iter()
            .map(|&p| self.graph.raw.node(self.nodes[p]).name.as_str())
            .collect()
    }

    pub fn position(&self, raw: usize) -> Option<usize> {
        self.pos.get(&raw).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutedNode {
    pub node: String,
    #[serde(skip)]
    pub raw: usize,
    pub pattern: &'static str,
    pub inputs: Vec<ShardSpec>,
    pub weight: Option<ShardSpec>,
    pub produced: ShardSpec,
    pub collective: CollectiveKind,
    pub output: ShardSpec,
    #[serde(skip)]
    pub tensor: TensorSpec,
}

/// Layout conversion on an edge. `consumer == None` marks the conversion to
/// Replica at the region's exit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeCollective {
    pub producer: Option<usize>,
    pub consumer: Option<usize>,
    pub slot: usize,
    pub from: ShardSpec,
    pub to: ShardSpec,
    pub kind: CollectiveKind,
    #[serde(skip)]
    pub tensor: TensorSpec,
}

/// A candidate whose patterns chain from every root of the region to every leaf.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutedPlan {
    pub assignments: Vec<(String, ShardSpec)>,
    pub nodes: Vec<RoutedNode>,
    /// Internal edges in consumer order, then exits.
    pub edges: Vec<EdgeCollective>,
    /// Replicated trainable weights, whose gradients need an all-reduce.
    pub gradients: Vec<Gradient>,
    pub flops: u64,
    /// Pattern bindings examined while routing.
    pub steps: u64,
}

impl RoutedPlan {
    pub fn splits(&self) -> usize {
        self.assignments
            .iter()
            .filter(|(_, s)| s.is_split())
            .count()
    }
}

/// First node no registered pattern could route.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Invalid {
    pub node: String,
    pub steps: u64,
}

fn flops(
    mode: OpMode,
    inputs: &[&TensorSpec],
    weight: Option<&TensorSpec>,
    out: &TensorSpec,
) -> u64 {
    let e = out.elements();
    match mode {
        OpMode::Linear => 2 * e * weight.map_or(1, |w| w.shape[0] as u64),
        OpMode::Batched => 2 * e * inputs[0].shape.last().copied().unwrap_or(1) as u64,
        OpMode::Qk { heads } => {
            2 * e * (inputs[0].shape.last().copied().unwrap_or(1) / heads) as u64
        }
        OpMode::Av { .. } => 2 * e * inputs[0].shape.last().copied().unwrap_or(1) as u64,
        OpMode::Source | OpMode::Sink | OpMode::Aux | OpMode::Comm => 0,
        _ => e,
    }
}

/// Routes `assignments` (one spec per weight of `region`, in region order)
/// through the region in producer-ready order. Inputs from outside arrive
/// Replica; outputs leaving the region are converted back to Replica.
///
/// Each node takes the cheapest bound pattern whose weight layout equals its
/// assignment and whose input layouts are reachable from the producers'
/// states; ties go to registry order.
pub fn pattern_routing(
    region: &Region<'_>,
    assignments: &[ShardSpec],
    mesh: &ClusterSpec,
) -> Result<RoutedPlan, Invalid> {
    assert_eq!(
        assignments.len(),
        region.weights.len(),
        "one spec per weight"
    );
    let raw = &region.graph.raw;
    let mut weight_of = vec![None; region.len()];
    for (k, &p) in region.weights.iter().enumerate() {
        weight_of[p] = Some(assignments[k]);
    }
    let mut state: Vec<ShardSpec> = Vec::with_capacity(region.len());
    let mut nodes = Vec::with_capacity(region.len());
    let mut edges = Vec::new();
    let mut exits = Vec::new();
    let mut gradients = Vec::new();
    let mut total_flops = 0;
    let mut steps = 0u64;

    for (p, &i) in region.nodes.iter().enumerate() {
        let node = raw.node(i);
        let producers = raw.producers(i);
        let in_states: Vec<(Option<usize>, ShardSpec, &TensorSpec)> = producers
            .iter()
            .map(|&q| {
                let t = &raw.node(q).output;
                match region.position(q) {
                    Some(qp) => (Some(qp), state[qp], t),
                    None => (None, ShardSpec::Replica, t),
                }
            })
            .collect();
        let mut best: Option<(f64, &BoundPattern, Vec<CollectiveKind>, CollectiveKind)> = None;
        for b in &region.bound[p] {
            steps += 1;
            if b.weight != weight_of[p] {
                continue;
            }
            let mut cost = collective_cost(b.collective, &node.output, mesh);
            let mut convs = Vec::with_capacity(in_states.len());
            let mut ok = true;
            for ((_, from, t), &to) in in_states.iter().zip(&b.inputs) {
                match conversion_collective(*from, to, t) {
                    Ok(k) => {
                        cost += collective_cost(k, t, mesh);
                        convs.push(k);
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let exit = if region.exits[p] {
                conversion_collective(b.output, ShardSpec::Replica, &node.output)
                    .expect("every layout converts to Replica")
            } else {
                CollectiveKind::Identity
            };
            cost += collective_cost(exit, &node.output, mesh);
            if best.as_ref().is_none_or(|(c, ..)| cost < *c) {
                best = Some((cost, b, convs, exit));
            }
        }
        let Some((_, b, convs, exit)) = best else {
            return Err(Invalid {
                node: node.name.clone(),
                steps,
            });
        };
        for (slot, ((qp, from, t), kind)) in in_states.iter().zip(convs).enumerate() {
            if let Some(qp) = qp {
                edges.push(EdgeCollective {
                    producer: Some(*qp),
                    consumer: Some(p),
                    slot,
                    from: *from,
                    to: b.inputs[slot],
                    kind,
                    tensor: (*t).clone(),
                });
            }
        }
        if region.exits[p] && !exit.is_identity() {
            exits.push(EdgeCollective {
                producer: Some(p),
                consumer: None,
                slot: 0,
                from: b.output,
                to: ShardSpec::Replica,
                kind: exit,
                tensor: node.output.clone(),
            });
        }
        if let (Some(w), Some(ShardSpec::Replica)) = (&node.weight, b.weight) {
            if w.trainable {
                gradients.push(Gradient::new(node.name.clone(), w.byte_size()));
            }
        }
        let ins: Vec<&TensorSpec> = in_states.iter().map(|s| s.2).collect();
        total_flops += flops(
            node.mode().expect("validated graph"),
            &ins,
            node.weight.as_ref(),
            &node.output,
        );
        state.push(b.output);
        nodes.push(RoutedNode {
            node: node.name.clone(),
            raw: i,
            pattern: b.pattern.name,
            inputs: b.inputs.clone(),
            weight: b.weight,
            produced: b.produced,
            collective: b.collective,
            output: b.output,
            tensor: node.output.clone(),
        });
    }
    edges.extend(exits);
    let assignments = region
        .weight_names()
        .into_iter()
        .map(String::from)
        .zip(assignments.iter().copied())
        .collect();
    Ok(RoutedPlan {
        assignments,
        nodes,
        edges,
        gradients,
        flops: total_flops,
        steps,
    })
}
