//! Materializes a routed plan as per-device graphs with explicit collectives.

pub mod fusion;

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::cost::ClusterSpec;
use crate::error::{Error, Result};
use crate::ir::json::{CollectiveField, DocNode, Document, GradientBucketField, WeightSplit};
use crate::ir::{GroupedGraph, OpKind, RawGraph, RawNode, TensorSpec};
use crate::patterns::{CollectiveKind, ShardSpec};
use crate::search::{EdgeCollective, ModelPlan};
use fusion::{pack_gradients, FusionBucket, Gradient, Packing};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Collective {
    pub kind: CollectiveKind,
    pub participants: Vec<usize>,
}

/// One node of a device's graph. Compute nodes keep their original names;
/// inserted collectives are named after the tensor they move.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParallelNode {
    pub name: String,
    pub op: OpKind,
    pub attr: Option<String>,
    pub inputs: Vec<String>,
    /// Local shard of the weight.
    pub weight: Option<TensorSpec>,
    /// How `weight` was cut from the full tensor; `None` when replicated.
    pub weight_split: Option<WeightSplit>,
    /// Local output shape.
    pub output: TensorSpec,
    pub collective: Option<Collective>,
    /// Scope of the GraphNode this node was derived from.
    pub source: Option<String>,
}

impl ParallelNode {
    fn from_raw(n: &RawNode, source: Option<String>) -> Self {
        ParallelNode {
            name: n.name.clone(),
            op: n.op,
            attr: n.attr.clone(),
            inputs: n.inputs.clone(),
            weight: n.weight.clone(),
            weight_split: None,
            output: n.output.clone(),
            collective: None,
            source,
        }
    }

    fn to_raw(&self) -> RawNode {
        RawNode {
            name: self.name.clone(),
            op: self.op,
            attr: self.attr.clone(),
            inputs: self.inputs.clone(),
            weight: self.weight.clone(),
            output: self.output.clone(),
        }
    }
}

/// The distributed model: one node list per device, in execution order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParallelGraph {
    pub devices: Vec<Vec<ParallelNode>>,
    /// Fused all-reduce buckets of replicated gradients, in topological order.
    pub gradients: Packing,
}

impl ParallelGraph {
    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    /// Collective nodes on each device.
    pub fn collective_count(&self) -> usize {
        self.devices.first().map_or(0, |d| {
            d.iter().filter(|n| n.op == OpKind::Collective).count()
        })
    }

    /// New node name -> scope of the GraphNode it came from.
    pub fn provenance(&self) -> BTreeMap<&str, &str> {
        self.devices
            .first()
            .into_iter()
            .flatten()
            .filter_map(|n| n.source.as_deref().map(|s| (n.name.as_str(), s)))
            .collect()
    }

    pub fn to_document(&self) -> Document {
        let nodes = self
            .devices
            .iter()
            .enumerate()
            .flat_map(|(d, nodes)| {
                nodes.iter().map(move |n| DocNode {
                    device: Some(d),
                    collective: n.collective.as_ref().map(|c| CollectiveField {
                        kind: c.kind.to_string(),
                        participants: c.participants.clone(),
                    }),
                    weight_split: n.weight_split,
                    source: n.source.clone(),
                    ..DocNode::from_raw(&n.to_raw())
                })
            })
            .collect();
        let names = |ms: &[Gradient]| ms.iter().map(|g| g.name.clone()).collect();
        Document {
            version: 2,
            devices: Some(self.devices.len()),
            nodes,
            gradient_buckets: Some(
                self.gradients
                    .buckets
                    .iter()
                    .map(|b| GradientBucketField {
                        members: names(&b.members),
                        total_bytes: b.total_bytes,
                        chunk_index: b.chunk_index,
                    })
                    .collect(),
            ),
            unfused_gradients: Some(names(&self.gradients.unfused)),
        }
    }

    pub fn to_json(&self) -> String {
        self.to_document().to_json()
    }

    /// Parses a version-2 document and checks every device graph is a DAG.
    pub fn from_document(doc: &Document) -> Result<ParallelGraph> {
        if doc.version != 2 {
            return Err(Error::Parse(format!(
                "expected a version 2 parallel graph document, found version {}",
                doc.version
            )));
        }
        let count = doc
            .devices
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Parse("version 2 document needs `devices` >= 1".into()))?;
        let mut devices = vec![Vec::new(); count];
        for d in &doc.nodes {
            let device = d
                .device
                .filter(|&i| i < count)
                .ok_or_else(|| Error::Parse(format!("node `{}` has no valid device", d.name)))?;
            let raw = d.to_raw();
            let collective = match (&d.collective, raw.op) {
                (Some(c), OpKind::Collective) => Some(Collective {
                    kind: c.kind.parse()?,
                    participants: c.participants.clone(),
                }),
                (None, OpKind::Collective) | (Some(_), _) => {
                    return Err(Error::Parse(format!(
                        "node `{}`: `collective` field and op disagree",
                        d.name
                    )))
                }
                (None, _) => None,
            };
            devices[device].push(ParallelNode {
                weight_split: d.weight_split,
                collective,
                source: d.source.clone(),
                ..ParallelNode::from_raw(&raw, None)
            });
        }
        for nodes in &devices {
            RawGraph::new(nodes.iter().map(ParallelNode::to_raw).collect())?;
        }
        let bytes: HashMap<&str, u64> = devices[0]
            .iter()
            .filter_map(|n| n.weight.as_ref().map(|w| (n.name.as_str(), w.byte_size())))
            .collect();
        let grad = |name: &String| {
            Gradient::new(name.clone(), bytes.get(name.as_str()).copied().unwrap_or(0))
        };
        let gradients = Packing {
            buckets: doc
                .gradient_buckets
                .iter()
                .flatten()
                .map(|b| FusionBucket {
                    members: b.members.iter().map(grad).collect(),
                    total_bytes: b.total_bytes,
                    chunk_index: b.chunk_index,
                })
                .collect(),
            unfused: doc.unfused_gradients.iter().flatten().map(grad).collect(),
        };
        Ok(ParallelGraph { devices, gradients })
    }

    pub fn parse(bytes: &[u8]) -> Result<ParallelGraph> {
        ParallelGraph::from_document(&Document::parse(bytes)?)
    }
}

fn collective_node(
    name: String,
    input: &str,
    edge: &EdgeCollective,
    devices: usize,
    source: &str,
) -> ParallelNode {
    ParallelNode {
        name,
        op: OpKind::Collective,
        attr: None,
        inputs: vec![input.to_string()],
        weight: None,
        weight_split: None,
        output: local(&edge.tensor, edge.to, devices),
        collective: Some(Collective {
            kind: edge.kind,
            participants: (0..devices).collect(),
        }),
        source: Some(source.to_string()),
    }
}

fn local(t: &TensorSpec, spec: ShardSpec, parts: usize) -> TensorSpec {
    TensorSpec {
        shape: spec.local_shape(&t.shape, parts),
        ..t.clone()
    }
}

/// Stable topological order: each node as early as its inputs allow,
/// original position breaking ties.
fn stable_topo(nodes: Vec<ParallelNode>) -> Vec<ParallelNode> {
    let pos: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.as_str(), i))
        .collect();
    let mut pending: Vec<usize> = nodes
        .iter()
        .map(|n| {
            n.inputs
                .iter()
                .filter(|i| pos.contains_key(i.as_str()))
                .count()
        })
        .collect();
    let mut users = vec![Vec::new(); nodes.len()];
    for (c, n) in nodes.iter().enumerate() {
        for i in &n.inputs {
            if let Some(&p) = pos.get(i.as_str()) {
                users[p].push(c);
            }
        }
    }
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = pending
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == 0)
        .map(|(i, _)| std::cmp::Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(std::cmp::Reverse(i)) = ready.pop() {
        order.push(i);
        for &u in &users[i] {
            pending[u] -= 1;
            if pending[u] == 0 {
                ready.push(std::cmp::Reverse(u));
            }
        }
    }
    debug_assert_eq!(order.len(), nodes.len());
    let mut slots: Vec<Option<ParallelNode>> = nodes.into_iter().map(Some).collect();
    order
        .into_iter()
        .map(|i| slots[i].take().unwrap())
        .collect()
}

/// Builds the per-device graphs for `plan`: Split weights become local
/// shards, pattern and exit collectives follow their producer, edge
/// conversions precede their consumer, and auxiliary nodes are restored
/// next to their owners.
pub fn rewrite_graph(
    graph: &GroupedGraph,
    plan: &ModelPlan,
    mesh: &ClusterSpec,
) -> Result<ParallelGraph> {
    mesh.validate()?;
    let d = mesh.devices();
    let raw = &graph.raw;
    let scope = |i: usize| graph.groups[graph.group_of[i]].scope.clone();

    // Name under which each raw node's post-collective output is visible.
    let mut visible = Vec::with_capacity(raw.len());
    let mut exit_name = vec![None; raw.len()];
    let mut template: Vec<ParallelNode> = Vec::new();
    let mut aux_by_owner: HashMap<&str, Vec<&RawNode>> = HashMap::new();
    let mut orphans = Vec::new();
    for rec in &graph.side_table {
        match &rec.owner {
            Some(o) => aux_by_owner.entry(o.as_str()).or_default().push(&rec.node),
            None => orphans.push(&rec.node),
        }
    }
    let mut splits: HashMap<&str, (usize, Vec<usize>)> = HashMap::new();
    for n in orphans {
        template.push(ParallelNode::from_raw(n, None));
    }
    let mut placed_aux = vec![false; graph.groups.len()];

    for (i, node) in raw.nodes().iter().enumerate() {
        let routed = plan.node(i);
        let group = graph.group_of[i];
        let src = scope(i);
        let mut pn = ParallelNode::from_raw(node, Some(src.clone()));
        if let (Some(w), Some(ShardSpec::Split(axis))) = (&node.weight, routed.weight) {
            if w.shape[axis] % d != 0 {
                return Err(Error::IndivisibleShard {
                    node: node.name.clone(),
                    axis,
                    dim: w.shape[axis],
                    parts: d,
                });
            }
            pn.weight = Some(local(w, ShardSpec::Split(axis), d));
            pn.weight_split = Some(WeightSplit { axis, parts: d });
            splits.insert(node.name.as_str(), (axis, w.shape.clone()));
        }
        pn.output = local(&node.output, routed.produced, d);

        if !placed_aux[group] {
            placed_aux[group] = true;
            for a in aux_by_owner.get(src.as_str()).into_iter().flatten() {
                template.push(ParallelNode::from_raw(a, Some(src.clone())));
            }
        }

        let mut inserts = Vec::new();
        for (slot, &p) in raw.producers(i).iter().enumerate() {
            let same = plan.instance_of(p) == plan.instance_of(i);
            let upstream: &String = match (&exit_name[p], same) {
                (Some(e), false) => e,
                _ => &visible[p],
            };
            let input = match plan.input_conversion(i, slot) {
                Some(edge) if !edge.kind.is_identity() => {
                    let name = format!("{}/in{slot}/{}", node.name, edge.kind.family());
                    inserts.push(collective_node(name.clone(), upstream, edge, d, &src));
                    name
                }
                _ => upstream.clone(),
            };
            pn.inputs[slot] = input;
        }
        template.extend(inserts);
        template.push(pn);

        let mut out = node.name.clone();
        if !routed.collective.is_identity() {
            let edge = EdgeCollective {
                producer: None,
                consumer: None,
                slot: 0,
                from: routed.produced,
                to: routed.output,
                kind: routed.collective,
                tensor: node.output.clone(),
            };
            let name = format!("{}/comm/{}", node.name, routed.collective.family());
            template.push(collective_node(name.clone(), &out, &edge, d, &src));
            out = name;
        }
        if let Some(edge) = plan.exit_conversion(i) {
            let name = format!("{}/exit/{}", node.name, edge.kind.family());
            template.push(collective_node(name.clone(), &out, edge, d, &src));
            exit_name[i] = Some(name);
        }
        visible.push(out);
    }

    // Auxiliary copies of a split weight hold the local shard.
    for n in template.iter_mut().filter(|n| n.op == OpKind::Auxiliary) {
        let Some(owner) = &n.source else { continue };
        let full = graph.group_by_scope(owner).and_then(|g| g.weight_node());
        if let Some((axis, shape)) = full.and_then(|w| splits.get(w)) {
            if n.output.shape == *shape {
                n.output = local(&n.output, ShardSpec::Split(*axis), d);
            }
        }
    }
    let template = stable_topo(template);

    let mut gradients: Vec<(usize, Gradient)> = plan
        .routed
        .iter()
        .flat_map(|r| r.gradients.iter())
        .map(|g| (raw.index_of(&g.name).unwrap_or(usize::MAX), g.clone()))
        .collect();
    gradients.sort_by_key(|(i, _)| *i);
    let gradients: Vec<Gradient> = gradients.into_iter().map(|(_, g)| g).collect();
    let packing = if d > 1 {
        pack_gradients(
            &gradients,
            mesh.fusion_threshold_bytes,
            mesh.chunk_size_bytes,
        )?
    } else {
        Packing::default()
    };

    Ok(ParallelGraph {
        devices: vec![template; d],
        gradients: packing,
    })
}
