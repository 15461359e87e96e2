//! JSON graph documents.
//!
//! Version 1 holds a single-device model graph. Version 2 holds a rewritten
//! per-device graph and adds `device`, `collective`, `weight_split` and
//! `source` node fields; see [`crate::rewrite::ParallelGraph`].

use serde::{Deserialize, Serialize};

use super::raw::{RawGraph, RawNode};
use super::tensor::{OpKind, TensorSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveField {
    pub kind: String,
    pub participants: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSplit {
    pub axis: usize,
    pub parts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocNode {
    pub name: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<String>,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub weight: Option<TensorSpec>,
    pub output: TensorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collective: Option<CollectiveField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_split: Option<WeightSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBucketField {
    pub members: Vec<String>,
    pub total_bytes: u64,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<usize>,
    pub nodes: Vec<DocNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_buckets: Option<Vec<GradientBucketField>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unfused_gradients: Option<Vec<String>>,
}

impl Document {
    pub fn parse(bytes: &[u8]) -> Result<Document> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document serializes");
        s.push('\n');
        s
    }
}

/// Maps an op string to an [`OpKind`]; unknown strings become `Elementwise`.
pub(crate) fn parse_op(node: &str, op: &str) -> OpKind {
    OpKind::parse(op).unwrap_or_else(|| {
        log::warn!("node `{node}`: unknown op `{op}`, treating it as elementwise");
        OpKind::Elementwise
    })
}

impl DocNode {
    pub(crate) fn from_raw(n: &RawNode) -> DocNode {
        DocNode {
            name: n.name.clone(),
            op: n.op.as_str().to_string(),
            attr: n.attr.clone(),
            inputs: n.inputs.clone(),
            weight: n.weight.clone(),
            output: n.output.clone(),
            device: None,
            collective: None,
            weight_split: None,
            source: None,
        }
    }

    pub(crate) fn to_raw(&self) -> RawNode {
        RawNode {
            name: self.name.clone(),
            op: parse_op(&self.name, &self.op),
            attr: self.attr.clone(),
            inputs: self.inputs.clone(),
            weight: self.weight.clone(),
            output: self.output.clone(),
        }
    }
}

/// Loads a version-1 graph document and validates it as a DAG.
pub fn load_graph(source: &[u8]) -> Result<RawGraph> {
    let doc = Document::parse(source)?;
    if doc.version != 1 {
        return Err(Error::Parse(format!(
            "expected a version 1 graph document, found version {}",
            doc.version
        )));
    }
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for d in &doc.nodes {
        if d.device.is_some() || d.collective.is_some() {
            return Err(Error::Parse(format!(
                "node `{}` carries per-device fields in a version 1 document",
                d.name
            )));
        }
        let raw = d.to_raw();
        if raw.op == OpKind::Collective {
            return Err(Error::InvalidGraph(format!(
                "collective node `{}` before rewriting",
                raw.name
            )));
        }
        nodes.push(raw);
    }
    RawGraph::new(nodes)
}

pub fn graph_document(graph: &RawGraph) -> Document {
    Document {
        version: 1,
        devices: None,
        nodes: graph.nodes().iter().map(DocNode::from_raw).collect(),
        gradient_buckets: None,
        unfused_gradients: None,
    }
}

/// Canonical serialization: nodes in topological order, ties by name.
pub fn save_graph(graph: &RawGraph) -> String {
    graph_document(graph).to_json()
}
