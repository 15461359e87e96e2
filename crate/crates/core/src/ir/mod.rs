//! Graph intermediate representation: tensors, raw operator graphs, JSON
//! documents, scope grouping and synthetic model generators.

pub mod generate;
pub mod group;
pub mod json;
pub mod raw;
pub mod tensor;

pub use generate::{
    gen_classifier, gen_t5, gen_t5_like, gen_transformer, gen_transformer_stack,
    gen_wide_classifier, AuxStyle, ClassifierConfig, TransformerConfig,
};
pub use group::{trim_and_group, AuxRecord, GraphNode, GroupedGraph};
pub use json::{load_graph, save_graph, Document};
pub use raw::{RawGraph, RawNode};
pub use tensor::{DType, OpKind, OpMode, TensorSpec, UnaryFn};
