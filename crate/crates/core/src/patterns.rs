//! Split / Replica / Communication vocabulary and the per-operator registry
//! of sharding patterns.
//!
//! A pattern maps the shard states of a node's inputs and weight to the shard
//! state of its output, plus the collective that must run on the output for
//! the sharded computation to equal the unsharded one. Pattern axes are
//! symbolic ([`AxisRule`]) and are bound against concrete tensor ranks and the
//! device count by [`ShardingPattern::bind`].

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{OpKind, OpMode, TensorSpec};

/// How a tensor is laid out across the devices of the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ShardSpec {
    Replica,
    Split(usize),
    /// Per-device partial sum awaiting reduction.
    Partial,
}

impl ShardSpec {
    pub fn is_split(self) -> bool {
        matches!(self, ShardSpec::Split(_))
    }

    /// Per-device shape of a tensor with this layout over `parts` devices.
    pub fn local_shape(self, shape: &[usize], parts: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        if let ShardSpec::Split(a) = self {
            s[a] /= parts;
        }
        s
    }
}

impl fmt::Display for ShardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShardSpec::Replica => f.write_str("R"),
            ShardSpec::Split(a) => write!(f, "S({a})"),
            ShardSpec::Partial => f.write_str("P"),
        }
    }
}

impl FromStr for ShardSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(ShardSpec::Replica),
            "P" => Ok(ShardSpec::Partial),
            _ => s
                .strip_prefix("S(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|a| a.parse().ok())
                .map(ShardSpec::Split)
                .ok_or_else(|| Error::Parse(format!("invalid shard spec `{s}`"))),
        }
    }
}

impl From<ShardSpec> for String {
    fn from(s: ShardSpec) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ShardSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CollectiveKind {
    Identity,
    AllReduceSum,
    AllGather(usize),
    ReduceScatter(usize),
    AllToAll { from: usize, to: usize },
}

impl CollectiveKind {
    /// Kind without its axes; used as the key of efficiency and byte tables.
    pub fn family(self) -> &'static str {
        match self {
            CollectiveKind::Identity => "identity",
            CollectiveKind::AllReduceSum => "allreduce",
            CollectiveKind::AllGather(_) => "allgather",
            CollectiveKind::ReduceScatter(_) => "reducescatter",
            CollectiveKind::AllToAll { .. } => "alltoall",
        }
    }

    pub fn is_identity(self) -> bool {
        self == CollectiveKind::Identity
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollectiveKind::Identity => f.write_str("Identity"),
            CollectiveKind::AllReduceSum => f.write_str("AllReduceSum"),
            CollectiveKind::AllGather(a) => write!(f, "AllGather({a})"),
            CollectiveKind::ReduceScatter(a) => write!(f, "ReduceScatter({a})"),
            CollectiveKind::AllToAll { from, to } => write!(f, "AllToAll({from}->{to})"),
        }
    }
}

impl FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("invalid collective kind `{s}`"));
        match s {
            "Identity" => return Ok(CollectiveKind::Identity),
            "AllReduceSum" => return Ok(CollectiveKind::AllReduceSum),
            _ => {}
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let axis = |a: &str| a.parse::<usize>().map_err(|_| bad());
        match name {
            "AllGather" => Ok(CollectiveKind::AllGather(axis(args)?)),
            "ReduceScatter" => Ok(CollectiveKind::ReduceScatter(axis(args)?)),
            "AllToAll" => {
                let (from, to) = args.split_once("->").ok_or_else(bad)?;
                Ok(CollectiveKind::AllToAll {
                    from: axis(from)?,
                    to: axis(to)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl From<CollectiveKind> for String {
    fn from(c: CollectiveKind) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for CollectiveKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Collective converting a tensor from one layout into another, or
/// [`Error::NoRoute`] when no single collective does it.
pub fn conversion_collective(
    from: ShardSpec,
    to: ShardSpec,
    tensor: &TensorSpec,
) -> Result<CollectiveKind> {
    let in_rank = |s: ShardSpec| match s {
        ShardSpec::Split(a) => a < tensor.rank(),
        _ => true,
    };
    let no_route = Err(Error::NoRoute { from, to });
    if !in_rank(from) || !in_rank(to) {
        return no_route;
    }
    use ShardSpec::*;
    Ok(match (from, to) {
        (a, b) if a == b => CollectiveKind::Identity,
        (Split(a), Replica) => CollectiveKind::AllGather(a),
        (Partial, Replica) => CollectiveKind::AllReduceSum,
        (Split(a), Split(b)) => CollectiveKind::AllToAll { from: a, to: b },
        (Partial, Split(a)) => CollectiveKind::ReduceScatter(a),
        _ => return no_route,
    })
}

/// Symbolic axis of a pattern, resolved against a tensor's rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisRule {
    At(usize),
    Last,
    /// Axis `n`, provided it is not the last axis.
    Inner(usize),
}

impl AxisRule {
    pub fn resolve(self, rank: usize) -> Option<usize> {
        match self {
            AxisRule::At(n) if n < rank => Some(n),
            AxisRule::Last if rank > 0 => Some(rank - 1),
            AxisRule::Inner(n) if n + 1 < rank => Some(n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecRule {
    R,
    S(AxisRule),
    P,
}

impl SpecRule {
    fn resolve(self, shape: &[usize], parts: usize) -> Option<ShardSpec> {
        match self {
            SpecRule::R => Some(ShardSpec::Replica),
            SpecRule::P => Some(ShardSpec::Partial),
            SpecRule::S(rule) => {
                let a = rule.resolve(shape.len())?;
                shape[a]
                    .is_multiple_of(parts)
                    .then_some(ShardSpec::Split(a))
            }
        }
    }
}

impl fmt::Display for SpecRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecRule::R => f.write_str("R"),
            SpecRule::P => f.write_str("P"),
            SpecRule::S(AxisRule::At(n)) => write!(f, "S({n})"),
            SpecRule::S(AxisRule::Last) => f.write_str("S(last)"),
            SpecRule::S(AxisRule::Inner(n)) => write!(f, "S({n}<last)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inputs {
    /// Any number of inputs, all with the same rule.
    Each(SpecRule),
    One(SpecRule),
    Two(SpecRule, SpecRule),
}

/// Operator semantics a pattern applies to; finer than [`OpKind`] because
/// a MatMul may be a linear layer or an attention product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternClass {
    Linear,
    Batched,
    Qk,
    Av,
    Add,
    Mul,
    Bias,
    Unary,
    Norm,
    Softmax,
    Gather,
    Reshape,
    Source,
    Sink,
}

impl PatternClass {
    pub fn of(mode: OpMode) -> Option<PatternClass> {
        Some(match mode {
            OpMode::Linear => PatternClass::Linear,
            OpMode::Batched => PatternClass::Batched,
            OpMode::Qk { .. } => PatternClass::Qk,
            OpMode::Av { .. } => PatternClass::Av,
            OpMode::Add => PatternClass::Add,
            OpMode::Mul => PatternClass::Mul,
            OpMode::Bias => PatternClass::Bias,
            OpMode::Unary(_) => PatternClass::Unary,
            OpMode::Norm => PatternClass::Norm,
            OpMode::Softmax => PatternClass::Softmax,
            OpMode::Gather => PatternClass::Gather,
            OpMode::Reshape => PatternClass::Reshape,
            OpMode::Source => PatternClass::Source,
            OpMode::Sink => PatternClass::Sink,
            OpMode::Aux | OpMode::Comm => return None,
        })
    }

    pub fn op(self) -> OpKind {
        match self {
            PatternClass::Linear | PatternClass::Batched | PatternClass::Qk | PatternClass::Av => {
                OpKind::MatMul
            }
            PatternClass::Add | PatternClass::Mul | PatternClass::Bias | PatternClass::Unary => {
                OpKind::Elementwise
            }
            PatternClass::Norm => OpKind::LayerNorm,
            PatternClass::Softmax => OpKind::Softmax,
            PatternClass::Gather => OpKind::Embedding,
            PatternClass::Reshape => OpKind::Reshape,
            PatternClass::Source => OpKind::Input,
            PatternClass::Sink => OpKind::Output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardingPattern {
    pub name: &'static str,
    pub class: PatternClass,
    pub inputs: Inputs,
    /// Ignored for nodes without a weight.
    pub weight: SpecRule,
    /// Output layout before the collective runs.
    pub output: SpecRule,
    pub collective: CollectiveKind,
    /// Splits attention heads; the head count must divide evenly.
    pub per_head: bool,
}

/// Shapes and attributes of one node, against which patterns are bound.
#[derive(Debug, Clone, Copy)]
pub struct NodeShapes<'a> {
    pub mode: OpMode,
    pub inputs: &'a [&'a [usize]],
    pub weight: Option<&'a [usize]>,
    pub output: &'a [usize],
}

/// A pattern with concrete axes for one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundPattern {
    pub pattern: &'static ShardingPattern,
    pub inputs: Vec<ShardSpec>,
    pub weight: Option<ShardSpec>,
    /// Layout the op itself produces.
    pub produced: ShardSpec,
    pub collective: CollectiveKind,
    /// Layout after the collective.
    pub output: ShardSpec,
}

impl ShardingPattern {
    pub fn op(&self) -> OpKind {
        self.class.op()
    }

    /// Binds axes against `node` for `parts` devices. `None` if an axis is out
    /// of range, a split dimension is not divisible, or the arity differs.
    pub fn bind(&'static self, node: &NodeShapes<'_>, parts: usize) -> Option<BoundPattern> {
        if PatternClass::of(node.mode) != Some(self.class) {
            return None;
        }
        let rules: Vec<SpecRule> = match self.inputs {
            Inputs::Each(r) => vec![r; node.inputs.len()],
            Inputs::One(r) => vec![r],
            Inputs::Two(a, b) => vec![a, b],
        };
        if rules.len() != node.inputs.len() {
            return None;
        }
        let inputs = rules
            .iter()
            .zip(node.inputs)
            .map(|(r, s)| r.resolve(s, parts))
            .collect::<Option<Vec<_>>>()?;
        let weight = match node.weight {
            Some(w) => Some(self.weight.resolve(w, parts)?),
            None => None,
        };
        if self.per_head {
            let heads = match node.mode {
                OpMode::Qk { heads } | OpMode::Av { heads } => heads,
                _ => return None,
            };
            if heads % parts != 0 {
                return None;
            }
        }
        let produced = self.output.resolve(node.output, parts)?;
        let output = match (produced, self.collective) {
            (ShardSpec::Partial, CollectiveKind::AllReduceSum) => ShardSpec::Replica,
            (p, CollectiveKind::Identity) => p,
            _ => return None,
        };
        Some(BoundPattern {
            pattern: self,
            inputs,
            weight,
            produced,
            collective: self.collective,
            output,
        })
    }

    pub fn descriptor(&self) -> PatternDescriptor {
        let inputs = match self.inputs {
            Inputs::Each(r) => vec![format!("{r}*")],
            Inputs::One(r) => vec![r.to_string()],
            Inputs::Two(a, b) => vec![a.to_string(), b.to_string()],
        };
        PatternDescriptor {
            name: self.name,
            op: self.op().as_str(),
            class: self.class,
            inputs,
            weight: self.weight.to_string(),
            output: self.output.to_string(),
            collective: self.collective,
        }
    }
}

/// Serializable summary of a pattern, as listed by the `patterns` command.
#[derive(Debug, Clone, Serialize)]
pub struct PatternDescriptor {
    pub name: &'static str,
    pub op: &'static str,
    pub class: PatternClass,
    pub inputs: Vec<String>,
    pub weight: String,
    pub output: String,
    pub collective: CollectiveKind,
}

/// Output layout and collective of a bound pattern given actual input states.
pub fn infer_output(
    pattern: &BoundPattern,
    input_states: &[ShardSpec],
) -> Result<(ShardSpec, CollectiveKind)> {
    if input_states != pattern.inputs.as_slice() {
        return Err(Error::SpecMismatch {
            pattern: pattern.pattern.name.to_string(),
            expected: pattern.inputs.clone(),
            actual: input_states.to_vec(),
        });
    }
    Ok((pattern.output, pattern.collective))
}

const fn pat(
    name: &'static str,
    class: PatternClass,
    inputs: Inputs,
    weight: SpecRule,
    output: SpecRule,
    collective: CollectiveKind,
) -> ShardingPattern {
    ShardingPattern {
        name,
        class,
        inputs,
        weight,
        output,
        collective,
        per_head: false,
    }
}

const fn heads(mut p: ShardingPattern) -> ShardingPattern {
    p.per_head = true;
    p
}

use AxisRule::{At, Inner, Last};
use CollectiveKind::{AllReduceSum as AR, Identity as ID};
use Inputs::{Each, One, Two};
use PatternClass as C;
use SpecRule::{P, R, S};

const fn s(a: AxisRule) -> SpecRule {
    S(a)
}

static REGISTRY: &[ShardingPattern] = &[
    // Linear layer x[..., K] @ w[K, N].
    pat("matmul.linear.replica", C::Linear, One(R), R, R, ID),
    pat(
        "matmul.linear.col",
        C::Linear,
        One(R),
        s(At(1)),
        s(Last),
        ID,
    ),
    pat(
        "matmul.linear.row.allreduce",
        C::Linear,
        One(s(Last)),
        s(At(0)),
        P,
        AR,
    ),
    pat(
        "matmul.linear.dp",
        C::Linear,
        One(s(Inner(0))),
        R,
        s(At(0)),
        ID,
    ),
    pat("matmul.batched.replica", C::Batched, Two(R, R), R, R, ID),
    // Attention scores q[b,s,D] x k[b,t,D] -> [b,h,s,t].
    pat("matmul.qk.replica", C::Qk, Two(R, R), R, R, ID),
    heads(pat(
        "matmul.qk.heads",
        C::Qk,
        Two(s(Last), s(Last)),
        R,
        s(At(1)),
        ID,
    )),
    pat(
        "matmul.qk.dp",
        C::Qk,
        Two(s(At(0)), s(At(0))),
        R,
        s(At(0)),
        ID,
    ),
    // Attention context p[b,h,s,t] x v[b,t,D] -> [b,s,D].
    pat("matmul.av.replica", C::Av, Two(R, R), R, R, ID),
    heads(pat(
        "matmul.av.heads",
        C::Av,
        Two(s(At(1)), s(Last)),
        R,
        s(Last),
        ID,
    )),
    pat(
        "matmul.av.dp",
        C::Av,
        Two(s(At(0)), s(At(0))),
        R,
        s(At(0)),
        ID,
    ),
    pat("elementwise.add.replica", C::Add, Two(R, R), R, R, ID),
    pat(
        "elementwise.add.s0",
        C::Add,
        Two(s(At(0)), s(At(0))),
        R,
        s(At(0)),
        ID,
    ),
    pat(
        "elementwise.add.s1",
        C::Add,
        Two(s(At(1)), s(At(1))),
        R,
        s(At(1)),
        ID,
    ),
    pat(
        "elementwise.add.s2",
        C::Add,
        Two(s(At(2)), s(At(2))),
        R,
        s(At(2)),
        ID,
    ),
    pat(
        "elementwise.add.s3",
        C::Add,
        Two(s(At(3)), s(At(3))),
        R,
        s(At(3)),
        ID,
    ),
    pat("elementwise.mul.replica", C::Mul, Two(R, R), R, R, ID),
    pat(
        "elementwise.mul.s0",
        C::Mul,
        Two(s(At(0)), s(At(0))),
        R,
        s(At(0)),
        ID,
    ),
    pat(
        "elementwise.mul.s1",
        C::Mul,
        Two(s(At(1)), s(At(1))),
        R,
        s(At(1)),
        ID,
    ),
    pat(
        "elementwise.mul.s2",
        C::Mul,
        Two(s(At(2)), s(At(2))),
        R,
        s(At(2)),
        ID,
    ),
    pat(
        "elementwise.mul.s3",
        C::Mul,
        Two(s(At(3)), s(At(3))),
        R,
        s(At(3)),
        ID,
    ),
    // Bias x[..., N] + w[N].
    pat("elementwise.bias.replica", C::Bias, One(R), R, R, ID),
    pat(
        "elementwise.bias.s0",
        C::Bias,
        One(s(Inner(0))),
        R,
        s(At(0)),
        ID,
    ),
    pat(
        "elementwise.bias.s1",
        C::Bias,
        One(s(Inner(1))),
        R,
        s(At(1)),
        ID,
    ),
    pat(
        "elementwise.bias.s2",
        C::Bias,
        One(s(Inner(2))),
        R,
        s(At(2)),
        ID,
    ),
    pat(
        "elementwise.bias.last",
        C::Bias,
        One(s(Last)),
        s(At(0)),
        s(Last),
        ID,
    ),
    pat("elementwise.unary.replica", C::Unary, One(R), R, R, ID),
    pat(
        "elementwise.unary.s0",
        C::Unary,
        One(s(At(0))),
        R,
        s(At(0)),
        ID,
    ),
    pat(
        "elementwise.unary.s1",
        C::Unary,
        One(s(At(1))),
        R,
        s(At(1)),
        ID,
    ),
    pat(
        "elementwise.unary.s2",
        C::Unary,
        One(s(At(2))),
        R,
        s(At(2)),
        ID,
    ),
    pat(
        "elementwise.unary.s3",
        C::Unary,
        One(s(At(3))),
        R,
        s(At(3)),
        ID,
    ),
    // Normalization and softmax need the whole last axis on every device.
    pat("layernorm.replica", C::Norm, One(R), R, R, ID),
    pat("layernorm.s0", C::Norm, One(s(Inner(0))), R, s(At(0)), ID),
    pat("layernorm.s1", C::Norm, One(s(Inner(1))), R, s(At(1)), ID),
    pat("layernorm.s2", C::Norm, One(s(Inner(2))), R, s(At(2)), ID),
    pat("softmax.replica", C::Softmax, One(R), R, R, ID),
    pat("softmax.s0", C::Softmax, One(s(Inner(0))), R, s(At(0)), ID),
    pat("softmax.s1", C::Softmax, One(s(Inner(1))), R, s(At(1)), ID),
    pat("softmax.s2", C::Softmax, One(s(Inner(2))), R, s(At(2)), ID),
    // Embedding ids[...] -> table w[V, D] rows.
    pat("embedding.replica", C::Gather, One(R), R, R, ID),
    pat("embedding.col", C::Gather, One(R), s(At(1)), s(Last), ID),
    pat(
        "embedding.row.allreduce",
        C::Gather,
        One(R),
        s(At(0)),
        P,
        AR,
    ),
    pat("embedding.dp", C::Gather, One(s(At(0))), R, s(At(0)), ID),
    pat("reshape.replica", C::Reshape, Each(R), R, R, ID),
    pat("input.replica", C::Source, Each(R), R, R, ID),
    pat("output.replica", C::Sink, Each(R), R, R, ID),
];

/// Every registered pattern, in registry order.
pub fn registry() -> &'static [ShardingPattern] {
    REGISTRY
}

/// Patterns registered for a compute op kind; never empty.
pub fn patterns_for(op: OpKind) -> Vec<&'static ShardingPattern> {
    REGISTRY.iter().filter(|p| p.op() == op).collect()
}

/// Patterns for one operator class, all-Replica fallback first.
pub fn patterns_for_class(class: PatternClass) -> &'static [ShardingPattern] {
    static BY_CLASS: OnceLock<Vec<(PatternClass, std::ops::Range<usize>)>> = OnceLock::new();
    let table = BY_CLASS.get_or_init(|| {
        let mut out: Vec<(PatternClass, std::ops::Range<usize>)> = Vec::new();
        for (i, p) in REGISTRY.iter().enumerate() {
            match out.last_mut() {
                Some((c, r)) if *c == p.class => r.end = i + 1,
                _ => out.push((p.class, i..i + 1)),
            }
        }
        out
    });
    table
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, r)| &REGISTRY[r.clone()])
        .unwrap_or(&[])
}

/// Every pattern of `node`'s class that binds for `parts` devices.
pub fn bind_all(node: &NodeShapes<'_>, parts: usize) -> Vec<BoundPattern> {
    let Some(class) = PatternClass::of(node.mode) else {
        return Vec::new();
    };
    patterns_for_class(class)
        .iter()
        .filter_map(|p| p.bind(node, parts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize]) -> TensorSpec {
        TensorSpec::activation(shape.to_vec())
    }

    #[test]
    fn conversion_table() {
        use ShardSpec::*;
        let x = t(&[8, 6]);
        let c = |a, b| conversion_collective(a, b, &x);
        assert_eq!(c(Replica, Replica).unwrap(), CollectiveKind::Identity);
        assert_eq!(c(Split(1), Replica).unwrap(), CollectiveKind::AllGather(1));
        assert_eq!(c(Partial, Replica).unwrap(), CollectiveKind::AllReduceSum);
        assert_eq!(
            c(Split(0), Split(1)).unwrap(),
            CollectiveKind::AllToAll { from: 0, to: 1 }
        );
        assert_eq!(
            c(Partial, Split(0)).unwrap(),
            CollectiveKind::ReduceScatter(0)
        );
        assert!(matches!(c(Replica, Split(0)), Err(Error::NoRoute { .. })));
        assert!(matches!(c(Replica, Partial), Err(Error::NoRoute { .. })));
        assert!(matches!(c(Split(2), Replica), Err(Error::NoRoute { .. })));
    }

    #[test]
    fn every_compute_op_has_a_replica_fallback() {
        for op in OpKind::ALL.into_iter().filter(|o| o.is_compute()) {
            let ps = patterns_for(op);
            assert!(!ps.is_empty(), "{op}");
            assert!(ps.iter().any(|p| p.name.ends_with(".replica")));
        }
        let classes = [
            C::Linear,
            C::Batched,
            C::Qk,
            C::Av,
            C::Add,
            C::Mul,
            C::Bias,
            C::Unary,
            C::Norm,
            C::Softmax,
            C::Gather,
            C::Reshape,
            C::Source,
            C::Sink,
        ];
        for c in classes {
            let ps = patterns_for_class(c);
            assert!(ps[0].name.ends_with(".replica"), "{c:?}");
            assert!(ps.iter().all(|p| p.class == c));
        }
    }

    #[test]
    fn pattern_names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|p| p.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), registry().len());
    }

    fn linear<'a>(x: &'a [&'a [usize]], w: &'a [usize], y: &'a [usize]) -> NodeShapes<'a> {
        NodeShapes {
            mode: OpMode::Linear,
            inputs: x,
            weight: Some(w),
            output: y,
        }
    }

    fn find(name: &str) -> &'static ShardingPattern {
        registry().iter().find(|p| p.name == name).unwrap()
    }

    #[test]
    fn row_parallel_matmul_needs_allreduce() {
        let node = linear(&[&[4, 8]], &[8, 6], &[4, 6]);
        let b = find("matmul.linear.row.allreduce").bind(&node, 2).unwrap();
        assert_eq!(b.inputs, vec![ShardSpec::Split(1)]);
        assert_eq!(b.weight, Some(ShardSpec::Split(0)));
        assert_eq!(b.produced, ShardSpec::Partial);
        assert_eq!(
            infer_output(&b, &[ShardSpec::Split(1)]).unwrap(),
            (ShardSpec::Replica, CollectiveKind::AllReduceSum)
        );
        assert!(matches!(
            infer_output(&b, &[ShardSpec::Replica]),
            Err(Error::SpecMismatch { .. })
        ));
    }

    #[test]
    fn data_parallel_matmul_keeps_batch_split() {
        let node = linear(&[&[4, 8]], &[8, 6], &[4, 6]);
        let b = find("matmul.linear.dp").bind(&node, 2).unwrap();
        assert_eq!(
            infer_output(&b, &[ShardSpec::Split(0)]).unwrap(),
            (ShardSpec::Split(0), CollectiveKind::Identity)
        );
        let r = find("matmul.linear.replica").bind(&node, 2).unwrap();
        assert_eq!(
            infer_output(&r, &[ShardSpec::Replica]).unwrap(),
            (ShardSpec::Replica, CollectiveKind::Identity)
        );
    }

    #[test]
    fn indivisible_axes_do_not_bind() {
        let node = linear(&[&[4, 8]], &[8, 6], &[4, 6]);
        assert!(find("matmul.linear.col").bind(&node, 4).is_none());
        assert!(find("matmul.linear.col").bind(&node, 2).is_some());
        let qk = NodeShapes {
            mode: OpMode::Qk { heads: 2 },
            inputs: &[&[2, 4, 8], &[2, 4, 8]],
            weight: None,
            output: &[2, 2, 4, 4],
        };
        assert!(find("matmul.qk.heads").bind(&qk, 2).is_some());
        assert!(find("matmul.qk.heads").bind(&qk, 4).is_none());
    }

    #[test]
    fn norm_never_splits_last_axis() {
        let node = NodeShapes {
            mode: OpMode::Norm,
            inputs: &[&[4, 8]],
            weight: None,
            output: &[4, 8],
        };
        let bound: Vec<_> = bind_all(&node, 2).into_iter().map(|b| b.output).collect();
        assert_eq!(bound, vec![ShardSpec::Replica, ShardSpec::Split(0)]);
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in [ShardSpec::Replica, ShardSpec::Split(3), ShardSpec::Partial] {
            assert_eq!(s.to_string().parse::<ShardSpec>().unwrap(), s);
        }
        for c in [
            CollectiveKind::Identity,
            CollectiveKind::AllReduceSum,
            CollectiveKind::AllGather(2),
            CollectiveKind::ReduceScatter(0),
            CollectiveKind::AllToAll { from: 0, to: 1 },
        ] {
            assert_eq!(c.to_string().parse::<CollectiveKind>().unwrap(), c);
        }
        assert!("S(x)".parse::<ShardSpec>().is_err());
        assert!("AllToAll(1)".parse::<CollectiveKind>().is_err());
    }
}
