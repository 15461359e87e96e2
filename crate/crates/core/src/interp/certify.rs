//! Randomized soundness check of sharding patterns: the sharded op followed
//! by the pattern's collective must reproduce the unsharded op.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{apply_collective, eval, relative_error, Node, TensorValue};
use crate::error::{Error, Result};
use crate::ir::{DType, OpMode, TensorSpec, UnaryFn};
use crate::patterns::{NodeShapes, PatternClass, ShardSpec, ShardingPattern};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub pattern: &'static str,
    pub parts: usize,
    /// Cases the pattern bound to and was checked on.
    pub cases: usize,
    pub max_error: f64,
}

struct Case {
    mode: OpMode,
    inputs: Vec<Vec<usize>>,
    weight: Option<Vec<usize>>,
    output: Vec<usize>,
    /// Rows of the table when the first input holds embedding ids.
    id_range: Option<usize>,
}

fn dims(rng: &mut ChaCha8Rng, parts: usize, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| parts * rng.gen_range(1..=2)).collect()
}

fn random_case(class: PatternClass, parts: usize, rng: &mut ChaCha8Rng) -> Option<Case> {
    let case = |mode, inputs, weight, output| Case {
        mode,
        inputs,
        weight,
        output,
        id_range: None,
    };
    let rank = rng.gen_range(2..=4);
    Some(match class {
        PatternClass::Linear => {
            let r = rng.gen_range(2..=3);
            let x = dims(rng, parts, r);
            let n = parts * rng.gen_range(1..=3);
            let mut out = x.clone();
            *out.last_mut().unwrap() = n;
            let k = *x.last().unwrap();
            case(OpMode::Linear, vec![x], Some(vec![k, n]), out)
        }
        PatternClass::Batched => {
            let [b, m, k, n]: [usize; 4] = dims(rng, parts, 4).try_into().unwrap();
            case(
                OpMode::Batched,
                vec![vec![b, m, k], vec![b, k, n]],
                None,
                vec![b, m, n],
            )
        }
        PatternClass::Qk | PatternClass::Av => {
            let heads = parts * rng.gen_range(1..=2);
            let dm = heads * rng.gen_range(1..=3);
            let [b, s]: [usize; 2] = dims(rng, parts, 2).try_into().unwrap();
            if class == PatternClass::Qk {
                case(
                    OpMode::Qk { heads },
                    vec![vec![b, s, dm], vec![b, s, dm]],
                    None,
                    vec![b, heads, s, s],
                )
            } else {
                case(
                    OpMode::Av { heads },
                    vec![vec![b, heads, s, s], vec![b, s, dm]],
                    None,
                    vec![b, s, dm],
                )
            }
        }
        PatternClass::Add | PatternClass::Mul => {
            let x = dims(rng, parts, rank);
            let mode = if class == PatternClass::Add {
                OpMode::Add
            } else {
                OpMode::Mul
            };
            case(mode, vec![x.clone(), x.clone()], None, x)
        }
        PatternClass::Bias => {
            let x = dims(rng, parts, rank);
            let n = *x.last().unwrap();
            case(OpMode::Bias, vec![x.clone()], Some(vec![n]), x)
        }
        PatternClass::Unary => {
            let x = dims(rng, parts, rank);
            let f = *[
                UnaryFn::Identity,
                UnaryFn::Tanh,
                UnaryFn::Gelu,
                UnaryFn::Relu,
            ]
            .choose(rng)
            .unwrap();
            case(OpMode::Unary(f), vec![x.clone()], None, x)
        }
        PatternClass::Norm => {
            let x = dims(rng, parts, rank);
            let gain = rng.gen_bool(0.5).then(|| vec![*x.last().unwrap()]);
            case(OpMode::Norm, vec![x.clone()], gain, x)
        }
        PatternClass::Softmax => {
            let x = dims(rng, parts, rank);
            case(OpMode::Softmax, vec![x.clone()], None, x)
        }
        PatternClass::Gather => {
            let ids = dims(rng, parts, 2);
            let [v, dm]: [usize; 2] = dims(rng, parts, 2).try_into().unwrap();
            let mut out = ids.clone();
            out.push(dm);
            Case {
                id_range: Some(v),
                ..case(OpMode::Gather, vec![ids], Some(vec![v, dm]), out)
            }
        }
        PatternClass::Reshape => {
            let x = dims(rng, parts, 2);
            case(OpMode::Reshape, vec![x.clone()], None, vec![x[1], x[0]])
        }
        PatternClass::Sink => {
            let x = dims(rng, parts, rank);
            case(OpMode::Sink, vec![x.clone()], None, x)
        }
        PatternClass::Source => return None,
    })
}

fn spec(shape: &[usize]) -> TensorSpec {
    TensorSpec::new(shape.to_vec(), DType::F64, false).expect("positive dims")
}

fn shard(v: &TensorValue, s: ShardSpec, parts: usize, device: usize) -> Result<TensorValue> {
    match s {
        ShardSpec::Replica => Ok(v.clone()),
        ShardSpec::Split(a) => v.slice(a, parts, device),
        ShardSpec::Partial => Err(Error::Protocol("partial operand in a pattern input".into())),
    }
}

/// Checks `pattern` on `cases` random nodes over `parts` devices. Cases the
/// pattern does not bind to are redrawn, up to a bounded number of attempts.
pub fn certify(
    pattern: &'static ShardingPattern,
    parts: usize,
    cases: usize,
    seed: u64,
) -> Result<Certificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut max_error = 0.0f64;
    let mut attempts = 0;
    while checked < cases && attempts < cases * 20 {
        attempts += 1;
        let Some(case) = random_case(pattern.class, parts, &mut rng) else {
            break;
        };
        let inputs: Vec<&[usize]> = case.inputs.iter().map(Vec::as_slice).collect();
        let shapes = NodeShapes {
            mode: case.mode,
            inputs: &inputs,
            weight: case.weight.as_deref(),
            output: &case.output,
        };
        let Some(bound) = pattern.bind(&shapes, parts) else {
            continue;
        };
        let full_inputs: Vec<TensorValue> = case
            .inputs
            .iter()
            .enumerate()
            .map(|(i, s)| match (i, case.id_range) {
                (0, Some(v)) => {
                    TensorValue::from_fn(s.clone(), DType::F64, |_| rng.gen_range(0..v) as f64)
                }
                _ => TensorValue::random(s.clone(), DType::F64, &mut rng),
            })
            .collect();
        let full_weight = case
            .weight
            .as_ref()
            .map(|w| TensorValue::random(w.clone(), DType::F64, &mut rng));
        let out_spec = spec(&case.output);
        let name = pattern.name;
        let reference = eval(
            &Node {
                name,
                mode: case.mode,
                output: &out_spec,
                row_offset: None,
            },
            &full_inputs.iter().collect::<Vec<_>>(),
            full_weight.as_ref(),
            None,
        )?;

        let local_out = spec(&bound.produced.local_shape(&case.output, parts));
        let mut locals = Vec::with_capacity(parts);
        for dev in 0..parts {
            let ins = full_inputs
                .iter()
                .zip(&bound.inputs)
                .map(|(v, s)| shard(v, *s, parts, dev))
                .collect::<Result<Vec<_>>>()?;
            let w = match (&full_weight, bound.weight) {
                (Some(v), Some(s)) => Some(shard(v, s, parts, dev)?),
                _ => None,
            };
            let row_offset = match (case.mode, bound.weight, &w) {
                (OpMode::Gather, Some(ShardSpec::Split(0)), Some(w)) => Some(dev * w.shape()[0]),
                _ => None,
            };
            let node = Node {
                name,
                mode: case.mode,
                output: &local_out,
                row_offset,
            };
            locals.push(eval(
                &node,
                &ins.iter().collect::<Vec<_>>(),
                w.as_ref(),
                None,
            )?);
        }
        let after = apply_collective(bound.collective, &locals)?;
        let err = match bound.output {
            ShardSpec::Replica => after
                .iter()
                .map(|v| relative_error(&reference, v))
                .fold(0.0, f64::max),
            ShardSpec::Split(a) => relative_error(&reference, &TensorValue::concat(&after, a)?),
            ShardSpec::Partial => {
                let summed =
                    apply_collective(crate::patterns::CollectiveKind::AllReduceSum, &after)?;
                relative_error(&reference, &summed[0])
            }
        };
        max_error = max_error.max(err);
        checked += 1;
    }
    Ok(Certificate {
        pattern: pattern.name,
        parts,
        cases: checked,
        max_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{registry, PatternClass};

    #[test]
    fn every_pattern_is_sound() {
        for (i, p) in registry().iter().enumerate() {
            if p.class == PatternClass::Source {
                continue;
            }
            for parts in [2, 4] {
                let c = certify(p, parts, 100, i as u64 * 31 + parts as u64).unwrap();
                assert!(c.cases >= 100, "{} bound only {} cases", p.name, c.cases);
                assert!(c.max_error <= 1e-10, "{c:?}");
            }
        }
    }
}
