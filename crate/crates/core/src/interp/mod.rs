//! Reference executor for small tensors. Runs a model graph on one device,
//! or a rewritten graph on every device in lock-step, so the two can be
//! compared numerically.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::group::trim;
use crate::ir::{DType, OpKind, OpMode, RawGraph, TensorSpec, UnaryFn};
use crate::patterns::CollectiveKind;
use crate::rewrite::{ParallelGraph, ParallelNode};

pub mod certify;

pub const F64_TOLERANCE: f64 = 1e-10;
pub const F32_TOLERANCE: f64 = 1e-5;
const NORM_EPS: f64 = 1e-5;

pub fn default_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => F64_TOLERANCE,
        DType::F32 => F32_TOLERANCE,
    }
}

/// Dense row-major tensor. Elements are held as `f64`; `F32` tensors are
/// rounded to single precision after every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub spec: TensorSpec,
    pub data: Vec<f64>,
}

fn spec_of(shape: Vec<usize>, dtype: DType) -> TensorSpec {
    TensorSpec {
        shape,
        dtype,
        trainable: false,
    }
}

/// `(outer, dim, inner)` sizes around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl TensorValue {
    pub fn new(spec: TensorSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() as u64 != spec.elements() {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for shape {:?}",
                data.len(),
                spec.shape
            )));
        }
        Ok(TensorValue { spec, data }.rounded())
    }

    pub fn from_fn(shape: Vec<usize>, dtype: DType, f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        TensorValue {
            spec: spec_of(shape, dtype),
            data: (0..n).map(f).collect(),
        }
        .rounded()
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        TensorValue::from_fn(shape, dtype, |_| 0.0)
    }

    /// Uniform(-1, 1) draws.
    pub fn random(shape: Vec<usize>, dtype: DType, rng: &mut impl Rng) -> Self {
        TensorValue::from_fn(shape, dtype, |_| rng.gen_range(-1.0..1.0))
    }

    pub fn shape(&self) -> &[usize] {
        &self.spec.shape
    }

    fn rounded(mut self) -> Self {
        if self.spec.dtype == DType::F32 {
            for x in &mut self.data {
                *x = *x as f32 as f64;
            }
        }
        self
    }

    fn with_data(&self, shape: Vec<usize>, data: Vec<f64>) -> Self {
        TensorValue {
            spec: spec_of(shape, self.spec.dtype),
            data,
        }
        .rounded()
    }

    /// Part `index` of `parts` equal pieces along `axis`.
    pub fn slice(&self, axis: usize, parts: usize, index: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || parts == 0 || !shape[axis].is_multiple_of(parts) || index >= parts
        {
            return Err(Error::ShapeMismatch(format!(
                "cannot take part {index} of {parts} along axis {axis} of {shape:?}"
            )));
        }
        let (outer, dim, inner) = around(shape, axis);
        let w = dim / parts;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * dim + index * w) * inner;
            data.extend_from_slice(&self.data[base..base + w * inner]);
        }
        let mut s = shape.to_vec();
        s[axis] = w;
        Ok(self.with_data(s, data))
    }

    /// Concatenation along `axis`, in slice order.
    pub fn concat(parts: &[TensorValue], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Protocol("concatenation of no tensors".into()))?;
        let shape = first.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "concat axis {axis} out of range for {shape:?}"
            )));
        }
        for p in parts {
            let ok = p.shape().len() == shape.len()
                && p.shape()
                    .iter()
                    .zip(shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate {:?} with {shape:?} along axis {axis}",
                    p.shape()
                )));
            }
        }
        let (outer, _, inner) = around(shape, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut s = shape.to_vec();
        s[axis] = total;
        Ok(first.with_data(s, data))
    }

    /// Largest absolute element; 0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Relative error of `got` against `want`: the largest absolute difference
/// over the largest absolute reference element.
pub fn relative_error(want: &TensorValue, got: &TensorValue) -> f64 {
    if want.shape() != got.shape() {
        return f64::INFINITY;
    }
    let diff = want
        .data
        .iter()
        .zip(&got.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff == 0.0 {
        return 0.0;
    }
    diff / want.max_abs().max(f64::MIN_POSITIVE)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// The full value of weight `name`, a pure function of name, shape and seed.
pub fn weight_value(name: &str, spec: &TensorSpec, seed: u64) -> TensorValue {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    TensorValue::random(spec.shape.clone(), spec.dtype, &mut rng)
}

/// Random values for every input node: uniform(-1, 1), or valid row ids
/// when the input feeds an embedding.
pub fn random_inputs(graph: &RawGraph, seed: u64) -> BTreeMap<String, TensorValue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (i, n) in graph.nodes().iter().enumerate() {
        if n.op != OpKind::Input {
            continue;
        }
        let rows = graph
            .consumers(i)
            .iter()
            .map(|&c| graph.node(c))
            .filter(|c| c.op == OpKind::Embedding)
            .filter_map(|c| c.weight.as_ref().map(|w| w.shape[0]))
            .min();
        let shape = n.output.shape.clone();
        let v = match rows {
            Some(v) => TensorValue::from_fn(shape, n.output.dtype, |_| rng.gen_range(0..v) as f64),
            None => TensorValue::random(shape, n.output.dtype, &mut rng),
        };
        out.insert(n.name.clone(), v);
    }
    out
}

struct Node<'a> {
    name: &'a str,
    mode: OpMode,
    output: &'a TensorSpec,
    /// Global index of the first local row of a row-split embedding table.
    row_offset: Option<usize>,
}

fn mismatch(node: &str, what: String) -> Error {
    Error::ShapeMismatch(format!("node `{node}`: {what}"))
}

fn unary(f: UnaryFn, x: f64) -> f64 {
    match f {
        UnaryFn::Identity => x,
        UnaryFn::Tanh => x.tanh(),
        UnaryFn::Relu => x.max(0.0),
        UnaryFn::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

fn eval(
    node: &Node<'_>,
    inputs: &[&TensorValue],
    weight: Option<&TensorValue>,
    bound: Option<&TensorValue>,
) -> Result<TensorValue> {
    let name = node.name;
    let want = &node.output.shape;
    let dtype = node.output.dtype;
    let arity = |n: usize| {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(mismatch(
                name,
                format!("expected {n} inputs, got {}", inputs.len()),
            ))
        }
    };
    let need_weight = || weight.ok_or_else(|| mismatch(name, "missing weight".into()));
    let out = |shape: Vec<usize>, data: Vec<f64>| -> Result<TensorValue> {
        if &shape != want {
            return Err(mismatch(
                name,
                format!("computed shape {shape:?}, declared {want:?}"),
            ));
        }
        Ok(TensorValue::from_fn(shape, dtype, |i| data[i]))
    };
    match node.mode {
        OpMode::Source => {
            let v = bound.ok_or_else(|| mismatch(name, "input not bound".into()))?;
            out(v.shape().to_vec(), v.data.clone())
        }
        OpMode::Sink | OpMode::Reshape => {
            arity(1)?;
            if inputs[0].data.len() as u64 != node.output.elements() {
                return Err(mismatch(
                    name,
                    format!("{:?} does not reshape to {want:?}", inputs[0].shape()),
                ));
            }
            out(want.clone(), inputs[0].data.clone())
        }
        OpMode::Linear => {
            arity(1)?;
            let (x, w) = (inputs[0], need_weight()?);
            let k = *x.shape().last().unwrap();
            if w.shape().len() != 2 || w.shape()[0] != k {
                return Err(mismatch(name, format!("{:?} @ {:?}", x.shape(), w.shape())));
            }
            let n = w.shape()[1];
            let rows = x.data.len() / k;
            let mut data = vec![0.0; rows * n];
            for r in 0..rows {
                for kk in 0..k {
                    let a = x.data[r * k + kk];
                    for j in 0..n {
                        data[r * n + j] += a * w.data[kk * n + j];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            out(shape, data)
        }
        OpMode::Batched => {
            arity(2)?;
            let (a, b) = (inputs[0].shape(), inputs[1].shape());
            let r = a.len();
            if r < 2 || b.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
                return Err(mismatch(name, format!("{a:?} @ {b:?}")));
            }
            let (m, k, n) = (a[r - 2], a[r - 1], b[r - 1]);
            let batch: usize = a[..r - 2].iter().product();
            let mut data = vec![0.0; batch * m * n];
            for bt in 0..batch {
                for i in 0..m {
                    for kk in 0..k {
                        let x = inputs[0].data[(bt * m + i) * k + kk];
                        for j in 0..n {
                            data[(bt * m + i) * n + j] += x * inputs[1].data[(bt * k + kk) * n + j];
                        }
                    }
                }
            }
            let mut shape = a.to_vec();
            shape[r - 1] = n;
            out(shape, data)
        }
        OpMode::Qk { .. } => {
            arity(2)?;
            let (q, k) = (inputs[0], inputs[1]);
            let (qs, ks) = (q.shape(), k.shape());
            if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || want.len() != 4
            {
                return Err(mismatch(name, format!("scores of {qs:?} and {ks:?}")));
            }
            let (b, s, dm, t, h) = (qs[0], qs[1], qs[2], ks[1], want[1]);
            if h == 0 || dm % h != 0 {
                return Err(mismatch(name, format!("{h} heads over width {dm}")));
            }
            let dh = dm / h;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut data = vec![0.0; b * h * s * t];
            for bb in 0..b {
                for hh in 0..h {
                    for i in 0..s {
                        for j in 0..t {
                            let mut acc = 0.0;
                            for e in 0..dh {
                                acc += q.data[(bb * s + i) * dm + hh * dh + e]
                                    * k.data[(bb * t + j) * dm + hh * dh + e];
                            }
                            data[((bb * h + hh) * s + i) * t + j] = acc * scale;
                        }
                    }
                }
            }
            out(vec![b, h, s, t], data)
        }
        OpMode::Av { .. } => {
            arity(2)?;
            let (p, v) = (inputs[0], inputs[1]);
            let (ps, vs) = (p.shape(), v.shape());
            if ps.len() != 4 || vs.len() != 3 || ps[0] != vs[0] || ps[3] != vs[1] {
                return Err(mismatch(name, format!("context of {ps:?} and {vs:?}")));
            }
            let (b, h, s, t, dm) = (ps[0], ps[1], ps[2], ps[3], vs[2]);
            if dm % h != 0 {
                return Err(mismatch(name, format!("{h} heads over width {dm}")));
            }
            let dh = dm / h;
            let mut data = vec![0.0; b * s * dm];
            for bb in 0..b {
                for hh in 0..h {
                    for i in 0..s {
                        for j in 0..t {
                            let w = p.data[((bb * h + hh) * s + i) * t + j];
                            for e in 0..dh {
                                data[(bb * s + i) * dm + hh * dh + e] +=
                                    w * v.data[(bb * t + j) * dm + hh * dh + e];
                            }
                        }
                    }
                }
            }
            out(vec![b, s, dm], data)
        }
        OpMode::Add | OpMode::Mul => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let f = if node.mode == OpMode::Add {
                |x: f64, y: f64| x + y
            } else {
                |x: f64, y: f64| x * y
            };
            let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            out(a.shape().to_vec(), data)
        }
        OpMode::Bias => {
            arity(1)?;
            let (x, w) = (inputs[0], need_weight()?);
            let n = *x.shape().last().unwrap();
            if w.shape() != [n] {
                return Err(mismatch(
                    name,
                    format!("bias {:?} on {:?}", w.shape(), x.shape()),
                ));
            }
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| v + w.data[i % n])
                .collect();
            out(x.shape().to_vec(), data)
        }
        OpMode::Unary(f) => {
            arity(1)?;
            let data = inputs[0].data.iter().map(|&x| unary(f, x)).collect();
            out(inputs[0].shape().to_vec(), data)
        }
        OpMode::Norm => {
            arity(1)?;
            let x = inputs[0];
            let n = *x.shape().last().unwrap();
            if let Some(g) = weight {
                if g.shape() != [n] {
                    return Err(mismatch(
                        name,
                        format!("gain {:?} on {:?}", g.shape(), x.shape()),
                    ));
                }
            }
            let mut data = Vec::with_capacity(x.data.len());
            for row in x.data.chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                for (j, v) in row.iter().enumerate() {
                    let g = weight.map_or(1.0, |g| g.data[j]);
                    data.push((v - mean) * inv * g);
                }
            }
            out(x.shape().to_vec(), data)
        }
        OpMode::Softmax => {
            arity(1)?;
            let x = inputs[0];
            let n = *x.shape().last().unwrap();
            let mut data = Vec::with_capacity(x.data.len());
            for row in x.data.chunks(n) {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                data.extend(e.iter().map(|v| v / z));
            }
            out(x.shape().to_vec(), data)
        }
        OpMode::Gather => {
            arity(1)?;
            let (ids, w) = (inputs[0], need_weight()?);
            if w.shape().len() != 2 {
                return Err(mismatch(name, format!("table {:?}", w.shape())));
            }
            let (rows, dm) = (w.shape()[0], w.shape()[1]);
            let mut data = Vec::with_capacity(ids.data.len() * dm);
            for &id in &ids.data {
                let global = id.round();
                if global < 0.0 {
                    return Err(mismatch(name, format!("negative row id {id}")));
                }
                let local = (global as usize).checked_sub(node.row_offset.unwrap_or(0));
                match local {
                    Some(r) if r < rows => data.extend_from_slice(&w.data[r * dm..(r + 1) * dm]),
                    _ if node.row_offset.is_none() => {
                        return Err(mismatch(name, format!("row id {id} out of {rows} rows")))
                    }
                    // Rows held by another device contribute zeros to the partial sum.
                    _ => data.extend(std::iter::repeat_n(0.0, dm)),
                }
            }
            let mut shape = ids.shape().to_vec();
            shape.push(dm);
            out(shape, data)
        }
        OpMode::Aux | OpMode::Comm => Err(mismatch(name, "not a compute node".into())),
    }
}

/// Values of the graph's output nodes, or of its leaves if it has none.
fn results(graph: &RawGraph, values: &[Option<TensorValue>]) -> BTreeMap<String, TensorValue> {
    let mut outs: Vec<usize> = (0..graph.len())
        .filter(|&i| graph.node(i).op == OpKind::Output)
        .collect();
    if outs.is_empty() {
        outs = graph.leaves();
    }
    outs.into_iter()
        .filter_map(|i| values[i].clone().map(|v| (graph.node(i).name.clone(), v)))
        .collect()
}

/// Runs `graph` on a single device. Auxiliary nodes are trimmed first.
pub fn execute_single(
    graph: &RawGraph,
    inputs: &BTreeMap<String, TensorValue>,
    seed: u64,
) -> Result<BTreeMap<String, TensorValue>> {
    let (g, _) = trim(graph)?;
    let mut values: Vec<Option<TensorValue>> = Vec::with_capacity(g.len());
    for (i, n) in g.nodes().iter().enumerate() {
        let weight = n.weight.as_ref().map(|w| weight_value(&n.name, w, seed));
        let ins: Vec<&TensorValue> = g
            .producers(i)
            .iter()
            .map(|&p| values[p].as_ref().expect("topological order"))
            .collect();
        let node = Node {
            name: &n.name,
            mode: n.mode()?,
            output: &n.output,
            row_offset: None,
        };
        let v = eval(&node, &ins, weight.as_ref(), inputs.get(&n.name))?;
        values.push(Some(v));
    }
    Ok(results(&g, &values))
}

/// Local shard of a weight on `device`: the full tensor drawn from the seed,
/// then sliced.
fn local_weight(n: &ParallelNode, device: usize, seed: u64) -> Result<Option<TensorValue>> {
    let Some(w) = &n.weight else { return Ok(None) };
    match n.weight_split {
        None => Ok(Some(weight_value(&n.name, w, seed))),
        Some(split) => {
            let mut full = w.clone();
            full.shape[split.axis] *= split.parts;
            weight_value(&n.name, &full, seed)
                .slice(split.axis, split.parts, device)
                .map(Some)
        }
    }
}

/// Applies one collective to the tensors of all participants, in device order.
pub fn apply_collective(kind: CollectiveKind, parts: &[TensorValue]) -> Result<Vec<TensorValue>> {
    let d = parts.len();
    if d == 0 {
        return Err(Error::Protocol("collective with no participants".into()));
    }
    let same_shape = parts.iter().all(|p| p.shape() == parts[0].shape());
    if !same_shape {
        return Err(Error::Protocol(format!(
            "{kind} over tensors of different shapes"
        )));
    }
    let sum = || {
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            for (a, b) in acc.data.iter_mut().zip(&p.data) {
                *a += b;
            }
        }
        acc.rounded()
    };
    match kind {
        CollectiveKind::Identity => Ok(parts.to_vec()),
        CollectiveKind::AllReduceSum => Ok(vec![sum(); d]),
        CollectiveKind::AllGather(axis) => Ok(vec![TensorValue::concat(parts, axis)?; d]),
        CollectiveKind::ReduceScatter(axis) => {
            let total = sum();
            (0..d).map(|i| total.slice(axis, d, i)).collect()
        }
        CollectiveKind::AllToAll { from, to } => (0..d)
            .map(|j| {
                let pieces = parts
                    .iter()
                    .map(|p| p.slice(to, d, j))
                    .collect::<Result<Vec<_>>>()?;
                TensorValue::concat(&pieces, from)
            })
            .collect(),
    }
}

/// Runs every device of `pgraph` in lock-step: each device computes locally
/// until it reaches a collective, which executes once all participants are
/// waiting on it. Returns device 0's outputs.
pub fn execute_sharded(
    pgraph: &ParallelGraph,
    inputs: &BTreeMap<String, TensorValue>,
    seed: u64,
) -> Result<BTreeMap<String, TensorValue>> {
    let d = pgraph.device_count();
    let mut values: Vec<HashMap<&str, TensorValue>> = vec![HashMap::new(); d];
    let mut cursor = vec![0usize; d];
    let aux: Vec<HashSet<&str>> = pgraph
        .devices
        .iter()
        .map(|nodes| {
            nodes
                .iter()
                .filter(|n| n.op == OpKind::Auxiliary)
                .map(|n| n.name.as_str())
                .collect()
        })
        .collect();
    loop {
        for dev in 0..d {
            let nodes = &pgraph.devices[dev];
            while let Some(n) = nodes.get(cursor[dev]) {
                if n.op == OpKind::Collective {
                    break;
                }
                if n.op != OpKind::Auxiliary {
                    let v = run_local(n, dev, &values[dev], &aux[dev], inputs, seed)?;
                    values[dev].insert(n.name.as_str(), v);
                }
                cursor[dev] += 1;
            }
        }
        let waiting: Vec<Option<&ParallelNode>> = (0..d)
            .map(|dev| pgraph.devices[dev].get(cursor[dev]))
            .collect();
        if waiting.iter().all(Option::is_none) {
            break;
        }
        let first = waiting[0].ok_or_else(|| {
            Error::Protocol("device 0 finished while others wait on a collective".into())
        })?;
        let c = first.collective.as_ref().ok_or_else(|| {
            Error::Protocol(format!("collective node `{}` has no kind", first.name))
        })?;
        for (dev, w) in waiting.iter().enumerate() {
            match w {
                Some(n) if n.name == first.name && n.collective == first.collective => {}
                Some(n) => {
                    return Err(Error::Protocol(format!(
                        "device {dev} waits on `{}` while device 0 waits on `{}`",
                        n.name, first.name
                    )))
                }
                None => {
                    return Err(Error::Protocol(format!(
                        "device {dev} finished while device 0 waits on `{}`",
                        first.name
                    )))
                }
            }
        }
        let everyone: Vec<usize> = (0..d).collect();
        if c.participants != everyone {
            return Err(Error::Protocol(format!(
                "`{}` lists participants {:?} on a {d}-device graph",
                first.name, c.participants
            )));
        }
        if first.inputs.len() != 1 {
            return Err(Error::Protocol(format!(
                "`{}` has {} inputs, expected 1",
                first.name,
                first.inputs.len()
            )));
        }
        let parts = (0..d)
            .map(|dev| {
                values[dev]
                    .get(first.inputs[0].as_str())
                    .cloned()
                    .ok_or_else(|| {
                        Error::Protocol(format!(
                            "device {dev} has no value for `{}`",
                            first.inputs[0]
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let results = apply_collective(c.kind, &parts)?;
        for (dev, v) in results.into_iter().enumerate() {
            let n = &pgraph.devices[dev][cursor[dev]];
            if v.shape() != n.output.shape.as_slice() {
                return Err(mismatch(
                    &n.name,
                    format!(
                        "collective produced {:?}, declared {:?}",
                        v.shape(),
                        n.output.shape
                    ),
                ));
            }
            values[dev].insert(n.name.as_str(), v);
            cursor[dev] += 1;
        }
    }
    let mut out = BTreeMap::new();
    for n in pgraph.devices.first().into_iter().flatten() {
        if n.op == OpKind::Output {
            out.insert(n.name.clone(), values[0][n.name.as_str()].clone());
        }
    }
    Ok(out)
}

fn run_local(
    n: &ParallelNode,
    device: usize,
    values: &HashMap<&str, TensorValue>,
    aux: &HashSet<&str>,
    inputs: &BTreeMap<String, TensorValue>,
    seed: u64,
) -> Result<TensorValue> {
    // Inputs produced by auxiliary nodes carry no value.
    let mut ins = Vec::with_capacity(n.inputs.len());
    for i in n.inputs.iter().filter(|i| !aux.contains(i.as_str())) {
        let v = values.get(i.as_str()).ok_or_else(|| {
            Error::Protocol(format!(
                "device {device}: `{}` reads `{i}` before it was produced",
                n.name
            ))
        })?;
        ins.push(v);
    }
    let weight = local_weight(n, device, seed)?;
    let row_offset = match (n.op, n.weight_split, &n.weight) {
        (OpKind::Embedding, Some(s), Some(w)) if s.axis == 0 => Some(device * w.shape[0]),
        _ => None,
    };
    let mode = OpMode::resolve(n.op, n.attr.as_deref(), n.weight.is_some(), ins.len())?;
    let node = Node {
        name: &n.name,
        mode,
        output: &n.output,
        row_offset,
    };
    eval(&node, &ins, weight.as_ref(), inputs.get(&n.name))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub tolerance: f64,
    /// Largest relative error per output over all trials.
    pub max_error: BTreeMap<String, f64>,
    pub worst: f64,
    pub passed: bool,
}

/// Compares single-device and sharded execution on `trials` random input
/// draws. Weights are fixed by `seed`; trial `t` draws inputs from `seed + t`.
pub fn check_equivalence(
    graph: &RawGraph,
    pgraph: &ParallelGraph,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::BadConfig("trials must be at least 1".into()));
    }
    let mut max_error: BTreeMap<String, f64> = BTreeMap::new();
    for t in 0..trials {
        let inputs = random_inputs(graph, seed.wrapping_add(t as u64 + 1));
        let want = execute_single(graph, &inputs, seed)?;
        let got = execute_sharded(pgraph, &inputs, seed)?;
        for (name, w) in &want {
            let e = got
                .get(name)
                .map_or(f64::INFINITY, |g| relative_error(w, g));
            let slot = max_error.entry(name.clone()).or_insert(0.0);
            *slot = slot.max(e);
        }
    }
    let worst = max_error.values().fold(0.0f64, |a, &b| a.max(b));
    Ok(EquivalenceReport {
        trials,
        tolerance,
        max_error,
        worst,
        passed: worst <= tolerance,
    })
}
