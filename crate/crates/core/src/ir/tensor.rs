use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest element count a [`TensorSpec`] may describe.
pub const MAX_ELEMENTS: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Shape, element type and trainability of a tensor edge or weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
    pub dtype: DType,
    #[serde(default)]
    pub trainable: bool,
}

impl TensorSpec {
    pub fn new(shape: impl Into<Vec<usize>>, dtype: DType, trainable: bool) -> Result<Self> {
        let spec = TensorSpec {
            shape: shape.into(),
            dtype,
            trainable,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn activation(shape: impl Into<Vec<usize>>) -> Self {
        TensorSpec {
            shape: shape.into(),
            dtype: DType::F32,
            trainable: false,
        }
    }

    pub fn weight(shape: impl Into<Vec<usize>>) -> Self {
        TensorSpec {
            shape: shape.into(),
            dtype: DType::F32,
            trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() {
            return Err(Error::InvalidGraph("tensor shape must be non-empty".into()));
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidGraph(format!(
                "tensor shape {:?} has a zero dimension",
                self.shape
            )));
        }
        self.checked_elements()
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| {
                Error::InvalidGraph(format!("tensor shape {:?} is too large", self.shape))
            })?;
        Ok(())
    }

    fn checked_elements(&self) -> Option<u64> {
        self.shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn elements(&self) -> u64 {
        self.checked_elements().expect("validated tensor spec")
    }

    pub fn byte_size(&self) -> u64 {
        self.elements() * self.dtype.width()
    }

    pub fn with_dtype(&self, dtype: DType) -> Self {
        TensorSpec {
            dtype,
            ..self.clone()
        }
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{:?}", self.shape, self.dtype)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    MatMul,
    Elementwise,
    LayerNorm,
    Softmax,
    Embedding,
    Reshape,
    Input,
    Output,
    Auxiliary,
    Collective,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::MatMul,
        OpKind::Elementwise,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Embedding,
        OpKind::Reshape,
        OpKind::Input,
        OpKind::Output,
        OpKind::Auxiliary,
        OpKind::Collective,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Elementwise => "elementwise",
            OpKind::LayerNorm => "layernorm",
            OpKind::Softmax => "softmax",
            OpKind::Embedding => "embedding",
            OpKind::Reshape => "reshape",
            OpKind::Input => "input",
            OpKind::Output => "output",
            OpKind::Auxiliary => "auxiliary",
            OpKind::Collective => "collective",
        }
    }

    /// Lenient parse used by the document loader: unknown names are `None`.
    pub fn parse(s: &str) -> Option<OpKind> {
        let lower = s.to_ascii_lowercase();
        OpKind::ALL.into_iter().find(|k| k.as_str() == lower)
    }

    pub fn is_compute(self) -> bool {
        !matches!(self, OpKind::Auxiliary | OpKind::Collective)
    }

    /// Rank used to pick the dominant op of a group when no member carries a weight.
    pub(crate) fn dominance(self) -> u8 {
        match self {
            OpKind::MatMul => 0,
            OpKind::Embedding => 1,
            OpKind::LayerNorm => 2,
            OpKind::Softmax => 3,
            OpKind::Elementwise => 4,
            OpKind::Reshape => 5,
            OpKind::Input => 6,
            OpKind::Output => 7,
            OpKind::Collective => 8,
            OpKind::Auxiliary => 9,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryFn {
    Identity,
    Tanh,
    Gelu,
    Relu,
}

/// Concrete semantics of a node, derived from its op, optional `attr` string,
/// arity and weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpMode {
    /// `x[..., K] @ w[K, N]`
    Linear,
    /// `a[..., M, K] @ b[..., K, N]`
    Batched,
    /// Per-head attention scores: `q[b,s,D], k[b,t,D] -> [b,h,s,t]`, scaled by `1/sqrt(D/h)`.
    Qk {
        heads: usize,
    },
    /// Per-head context: `p[b,h,s,t], v[b,t,D] -> [b,s,D]`.
    Av {
        heads: usize,
    },
    Add,
    Mul,
    /// Adds a weight vector along the last axis.
    Bias,
    Unary(UnaryFn),
    Norm,
    Softmax,
    Gather,
    Reshape,
    Source,
    Sink,
    Aux,
    Comm,
}

impl OpMode {
    pub fn resolve(
        op: OpKind,
        attr: Option<&str>,
        has_weight: bool,
        arity: usize,
    ) -> Result<OpMode> {
        let bad = |what: &str| Error::Parse(format!("unsupported attr `{what}` for op {op}"));
        let heads_of = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|&h| h > 0)
                .ok_or_else(|| bad(s))
        };
        let mode = match op {
            OpKind::MatMul => match attr {
                None if has_weight => OpMode::Linear,
                None => OpMode::Batched,
                Some("linear") => OpMode::Linear,
                Some("batched") => OpMode::Batched,
                Some(a) => match a.split_once(':') {
                    Some(("qk", h)) => OpMode::Qk {
                        heads: heads_of(h)?,
                    },
                    Some(("av", h)) => OpMode::Av {
                        heads: heads_of(h)?,
                    },
                    _ => return Err(bad(a)),
                },
            },
            OpKind::Elementwise => match attr {
                None if has_weight => OpMode::Bias,
                None if arity >= 2 => OpMode::Add,
                None => OpMode::Unary(UnaryFn::Identity),
                Some("add") => OpMode::Add,
                Some("mul") => OpMode::Mul,
                Some("bias") => OpMode::Bias,
                Some("identity") => OpMode::Unary(UnaryFn::Identity),
                Some("tanh") => OpMode::Unary(UnaryFn::Tanh),
                Some("gelu") => OpMode::Unary(UnaryFn::Gelu),
                Some("relu") => OpMode::Unary(UnaryFn::Relu),
                Some(a) => return Err(bad(a)),
            },
            OpKind::LayerNorm => OpMode::Norm,
            OpKind::Softmax => OpMode::Softmax,
            OpKind::Embedding => OpMode::Gather,
            OpKind::Reshape => OpMode::Reshape,
            OpKind::Input => OpMode::Source,
            OpKind::Output => OpMode::Sink,
            OpKind::Auxiliary => OpMode::Aux,
            OpKind::Collective => OpMode::Comm,
        };
        let weight_ok = match mode {
            OpMode::Linear | OpMode::Bias | OpMode::Gather => has_weight,
            OpMode::Norm | OpMode::Aux => true,
            _ => !has_weight,
        };
        if !weight_ok {
            return Err(Error::InvalidGraph(format!(
                "{op} node in mode {mode:?} {} a weight",
                if has_weight {
                    "cannot carry"
                } else {
                    "requires"
                }
            )));
        }
        Ok(mode)
    }

    /// Attribute string that reproduces this mode, if one is needed.
    pub fn attr(self) -> Option<String> {
        match self {
            OpMode::Qk { heads } => Some(format!("qk:{heads}")),
            OpMode::Av { heads } => Some(format!("av:{heads}")),
            OpMode::Mul => Some("mul".into()),
            OpMode::Unary(UnaryFn::Tanh) => Some("tanh".into()),
            OpMode::Unary(UnaryFn::Gelu) => Some("gelu".into()),
            OpMode::Unary(UnaryFn::Relu) => Some("relu".into()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_size_uses_dtype_width() {
        let t = TensorSpec::new(vec![1024, 1024], DType::F32, true).unwrap();
        assert_eq!(t.byte_size(), 4 * 1024 * 1024);
        assert_eq!(t.with_dtype(DType::F64).byte_size(), 8 * 1024 * 1024);
    }

    #[test]
    fn rejects_empty_zero_and_huge_shapes() {
        assert!(TensorSpec::new(vec![], DType::F32, false).is_err());
        assert!(TensorSpec::new(vec![3, 0], DType::F32, false).is_err());
        assert!(TensorSpec::new(vec![1 << 20, 1 << 20], DType::F32, false).is_ok());
        assert!(TensorSpec::new(vec![1 << 21, 1 << 20], DType::F32, false).is_err());
        assert!(TensorSpec::new(vec![usize::MAX, usize::MAX], DType::F32, false).is_err());
    }

    #[test]
    fn mode_defaults_follow_arity_and_weight() {
        let m = |op, attr, w, n| OpMode::resolve(op, attr, w, n).unwrap();
        assert_eq!(m(OpKind::MatMul, None, true, 1), OpMode::Linear);
        assert_eq!(m(OpKind::MatMul, None, false, 2), OpMode::Batched);
        assert_eq!(
            m(OpKind::MatMul, Some("qk:4"), false, 2),
            OpMode::Qk { heads: 4 }
        );
        assert_eq!(m(OpKind::Elementwise, None, false, 2), OpMode::Add);
        assert_eq!(m(OpKind::Elementwise, None, true, 1), OpMode::Bias);
        assert_eq!(m(OpKind::Elementwise, None, true, 2), OpMode::Bias);
        assert!(OpMode::resolve(OpKind::MatMul, Some("linear"), false, 1).is_err());
        assert!(OpMode::resolve(OpKind::MatMul, Some("qk:2"), true, 2).is_err());
        assert!(OpMode::resolve(OpKind::MatMul, Some("qk:0"), false, 2).is_err());
        assert!(OpMode::resolve(OpKind::Elementwise, Some("frobnicate"), false, 1).is_err());
    }
}
