//! Synthetic benchmark models.
//!
//! Every weight is emitted together with framework-style auxiliary nodes
//! (initializers, assignments, reads and, for the T5-like model, optimizer
//! slots and checkpoint ops) so that trimming has realistic work to do.

use serde::{Deserialize, Serialize};

use super::raw::{RawGraph, RawNode};
use super::tensor::{OpKind, TensorSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxStyle {
    /// No auxiliary nodes.
    Bare,
    /// Initializer, assign and read per weight.
    Light,
    /// Initializer chain, assign/read, two optimizer slots and checkpoint ops.
    Heavy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub aux: AuxStyle,
}

impl TransformerConfig {
    pub fn new(layers: usize, d_model: usize, heads: usize) -> Self {
        TransformerConfig {
            layers,
            d_model,
            heads,
            batch: 2,
            seq: 4,
            vocab: 32,
            ffn_mult: 4,
            aux: AuxStyle::Light,
        }
    }

    pub fn with_batch_seq(mut self, batch: usize, seq: usize) -> Self {
        self.batch = batch;
        self.seq = seq;
        self
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.d_model,
            self.heads,
            self.batch,
            self.seq,
            self.vocab,
            self.ffn_mult,
        ];
        if dims.contains(&0) {
            return Err(Error::BadConfig(format!(
                "transformer dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::BadConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

struct Builder {
    nodes: Vec<RawNode>,
    aux: AuxStyle,
}

impl Builder {
    fn new(aux: AuxStyle) -> Self {
        Builder {
            nodes: Vec::new(),
            aux,
        }
    }

    fn push(&mut self, node: RawNode) -> String {
        let name = node.name.clone();
        self.nodes.push(node);
        name
    }

    fn aux(&mut self, name: String, inputs: &[&str], shape: &[usize]) -> String {
        self.push(RawNode::new(
            name,
            OpKind::Auxiliary,
            inputs,
            TensorSpec::activation(shape.to_vec()),
        ))
    }

    /// Emits the variable's auxiliary ops and returns the name of the read op, if any.
    fn variable(&mut self, scope: &str, shape: &[usize]) -> Option<String> {
        let var = format!("{scope}/kernel");
        match self.aux {
            AuxStyle::Bare => None,
            AuxStyle::Light => {
                let init = self.aux(format!("{var}/Initializer"), &[], shape);
                self.aux(var.clone(), &[], shape);
                self.aux(format!("{var}/Assign"), &[&var, &init], shape);
                Some(self.aux(format!("{var}/read"), &[&var], shape))
            }
            AuxStyle::Heavy => {
                let ru = format!("{var}/Initializer/random_uniform");
                let s = self.aux(format!("{ru}/shape"), &[], &[shape.len()]);
                let lo = self.aux(format!("{ru}/min"), &[], &[1]);
                let hi = self.aux(format!("{ru}/max"), &[], &[1]);
                let r = self.aux(format!("{ru}/RandomUniform"), &[&s], shape);
                let sub = self.aux(format!("{ru}/sub"), &[&hi, &lo], &[1]);
                let mul = self.aux(format!("{ru}/mul"), &[&r, &sub], shape);
                let init = self.aux(ru.clone(), &[&mul, &lo], shape);
                self.aux(var.clone(), &[], shape);
                self.aux(format!("{var}/Assign"), &[&var, &init], shape);
                let read = self.aux(format!("{var}/read"), &[&var], shape);
                for slot in ["Adam", "Adam_1"] {
                    let v = self.aux(format!("{var}/{slot}"), &[], shape);
                    let z = self.aux(format!("{var}/{slot}/Initializer/zeros"), &[], shape);
                    self.aux(format!("{var}/{slot}/Assign"), &[&v, &z], shape);
                    self.aux(format!("{var}/{slot}/read"), &[&v], shape);
                }
                self.aux(format!("{var}/save/SaveSlice"), &[&read], shape);
                let rs = self.aux(format!("{var}/restore/RestoreSlice"), &[], shape);
                self.aux(format!("{var}/restore/Assign"), &[&var, &rs], shape);
                Some(read)
            }
        }
    }

    /// A weight-bearing node named `{scope}/{leaf}`.
    fn weighted(
        &mut self,
        scope: &str,
        leaf: &str,
        op: OpKind,
        input: &str,
        weight: TensorSpec,
        out: Vec<usize>,
    ) -> String {
        let read = self.variable(scope, &weight.shape);
        let mut inputs = vec![input];
        if let Some(r) = &read {
            inputs.push(r);
        }
        let mut node = RawNode::new(
            format!("{scope}/{leaf}"),
            op,
            &inputs,
            TensorSpec::activation(out),
        )
        .with_weight(weight);
        if op == OpKind::MatMul {
            node = node.with_attr("linear");
        }
        self.push(node)
    }

    fn op(&mut self, name: String, op: OpKind, inputs: &[&str], out: Vec<usize>) -> String {
        self.push(RawNode::new(name, op, inputs, TensorSpec::activation(out)))
    }

    fn op_attr(
        &mut self,
        name: String,
        op: OpKind,
        attr: &str,
        inputs: &[&str],
        out: Vec<usize>,
    ) -> String {
        self.push(RawNode::new(name, op, inputs, TensorSpec::activation(out)).with_attr(attr))
    }

    fn finish(self) -> Result<RawGraph> {
        RawGraph::new(self.nodes)
    }
}

struct Dims {
    b: usize,
    s: usize,
    d: usize,
    h: usize,
    f: usize,
}

impl Dims {
    fn act(&self) -> Vec<usize> {
        vec![self.b, self.s, self.d]
    }
}

/// Multi-head attention: q/k/v projections, score/softmax/context core and
/// output projection. Returns the output projection's name.
fn attention(
    bld: &mut Builder,
    dims: &Dims,
    scope: &str,
    core_scope: &str,
    query_in: &str,
    kv_in: &str,
    names: [&str; 4],
) -> String {
    let d = dims.d;
    let proj = |bld: &mut Builder, sub: &str, input: &str| {
        bld.weighted(
            &format!("{scope}/{sub}"),
            "MatMul",
            OpKind::MatMul,
            input,
            TensorSpec::weight(vec![d, d]),
            dims.act(),
        )
    };
    let q = proj(bld, names[0], query_in);
    let k = proj(bld, names[1], kv_in);
    let v = proj(bld, names[2], kv_in);
    let scores = bld.op_attr(
        format!("{core_scope}/scores"),
        OpKind::MatMul,
        &format!("qk:{}", dims.h),
        &[&q, &k],
        vec![dims.b, dims.h, dims.s, dims.s],
    );
    let probs = bld.op(
        format!("{core_scope}/probs"),
        OpKind::Softmax,
        &[&scores],
        vec![dims.b, dims.h, dims.s, dims.s],
    );
    let ctx = bld.op_attr(
        format!("{core_scope}/context"),
        OpKind::MatMul,
        &format!("av:{}", dims.h),
        &[&probs, &v],
        dims.act(),
    );
    proj(bld, names[3], &ctx)
}

/// Feed-forward block; returns the output projection's name.
fn ffn(bld: &mut Builder, dims: &Dims, inner: &str, outer: &str, input: &str, act: &str) -> String {
    let hidden = vec![dims.b, dims.s, dims.f];
    let h = bld.weighted(
        inner,
        "MatMul",
        OpKind::MatMul,
        input,
        TensorSpec::weight(vec![dims.d, dims.f]),
        hidden.clone(),
    );
    let a = bld.op_attr(
        format!("{inner}/{}", capitalize(act)),
        OpKind::Elementwise,
        act,
        &[&h],
        hidden,
    );
    bld.weighted(
        outer,
        "MatMul",
        OpKind::MatMul,
        &a,
        TensorSpec::weight(vec![dims.f, dims.d]),
        dims.act(),
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn final_norm(bld: &mut Builder, dims: &Dims, scope: &str, input: &str) -> String {
    bld.weighted(
        scope,
        "LayerNorm",
        OpKind::LayerNorm,
        input,
        TensorSpec::weight(vec![dims.d]),
        dims.act(),
    )
}

/// Encoder-only transformer with `layers` isomorphic blocks named
/// `encoder/layer_{i}/...`, each holding six weights (query, key, value,
/// attention output, FFN intermediate, FFN output).
pub fn gen_transformer_stack(layers: usize, d_model: usize, heads: usize) -> Result<RawGraph> {
    gen_transformer(&TransformerConfig::new(layers, d_model, heads))
}

pub fn gen_transformer(cfg: &TransformerConfig) -> Result<RawGraph> {
    cfg.validate()?;
    let dims = Dims {
        b: cfg.batch,
        s: cfg.seq,
        d: cfg.d_model,
        h: cfg.heads,
        f: cfg.d_model * cfg.ffn_mult,
    };
    let mut bld = Builder::new(cfg.aux);
    let ids = bld.op("input_ids".into(), OpKind::Input, &[], vec![dims.b, dims.s]);
    let mut x = bld.weighted(
        "embedding/word_embeddings",
        "Gather",
        OpKind::Embedding,
        &ids,
        TensorSpec::weight(vec![cfg.vocab, dims.d]),
        dims.act(),
    );
    for i in 0..cfg.layers {
        let p = format!("encoder/layer_{i}");
        let ln1 = bld.op(
            format!("{p}/attention/ln/LayerNorm"),
            OpKind::LayerNorm,
            &[&x],
            dims.act(),
        );
        let attn = attention(
            &mut bld,
            &dims,
            &format!("{p}/attention"),
            &format!("{p}/attention/core"),
            &ln1,
            &ln1,
            ["query", "key", "value", "output"],
        );
        let r1 = bld.op_attr(
            format!("{p}/attention/residual/Add"),
            OpKind::Elementwise,
            "add",
            &[&x, &attn],
            dims.act(),
        );
        let ln2 = bld.op(
            format!("{p}/ffn/ln/LayerNorm"),
            OpKind::LayerNorm,
            &[&r1],
            dims.act(),
        );
        let y = ffn(
            &mut bld,
            &dims,
            &format!("{p}/ffn/intermediate"),
            &format!("{p}/ffn/output"),
            &ln2,
            "gelu",
        );
        x = bld.op_attr(
            format!("{p}/ffn/residual/Add"),
            OpKind::Elementwise,
            "add",
            &[&r1, &y],
            dims.act(),
        );
    }
    let normed = final_norm(&mut bld, &dims, "encoder/final_norm", &x);
    let logits = bld.weighted(
        "head/logits",
        "MatMul",
        OpKind::MatMul,
        &normed,
        TensorSpec::weight(vec![dims.d, cfg.vocab]),
        vec![dims.b, dims.s, cfg.vocab],
    );
    bld.op(
        "output".into(),
        OpKind::Output,
        &[&logits],
        vec![dims.b, dims.s, cfg.vocab],
    );
    bld.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub blocks: usize,
    pub batch: usize,
    pub aux: AuxStyle,
}

impl ClassifierConfig {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        ClassifierConfig {
            num_classes,
            feature_dim,
            blocks: 4,
            batch: 2,
            aux: AuxStyle::Light,
        }
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }
}

/// Small repeated backbone (`backbone/block_{i}/...`) followed by one wide
/// fully connected layer of shape `(feature_dim, num_classes)`.
pub fn gen_wide_classifier(num_classes: usize, feature_dim: usize) -> Result<RawGraph> {
    gen_classifier(&ClassifierConfig::new(num_classes, feature_dim))
}

pub fn gen_classifier(cfg: &ClassifierConfig) -> Result<RawGraph> {
    if [cfg.num_classes, cfg.feature_dim, cfg.blocks, cfg.batch].contains(&0) {
        return Err(Error::BadConfig(format!(
            "classifier dimensions must be positive: {cfg:?}"
        )));
    }
    let (b, f, c) = (cfg.batch, cfg.feature_dim, cfg.num_classes);
    let mut bld = Builder::new(cfg.aux);
    let mut x = bld.op("images".into(), OpKind::Input, &[], vec![b, f]);
    for i in 0..cfg.blocks {
        let p = format!("backbone/block_{i}");
        let conv = bld.weighted(
            &format!("{p}/conv"),
            "MatMul",
            OpKind::MatMul,
            &x,
            TensorSpec::weight(vec![f, f]),
            vec![b, f],
        );
        let norm = bld.op(
            format!("{p}/norm/LayerNorm"),
            OpKind::LayerNorm,
            &[&conv],
            vec![b, f],
        );
        x = bld.op_attr(
            format!("{p}/act/Relu"),
            OpKind::Elementwise,
            "relu",
            &[&norm],
            vec![b, f],
        );
    }
    let logits = bld.weighted(
        "head/fc",
        "MatMul",
        OpKind::MatMul,
        &x,
        TensorSpec::weight(vec![f, c]),
        vec![b, c],
    );
    let probs = bld.op(
        "head/softmax/Softmax".into(),
        OpKind::Softmax,
        &[&logits],
        vec![b, c],
    );
    bld.op("output".into(), OpKind::Output, &[&probs], vec![b, c]);
    bld.finish()
}

/// Encoder-decoder model in the naming style of T5 checkpoints: `layers`
/// encoder blocks and `layers` decoder blocks (with cross-attention), heavy
/// auxiliary ops per weight.
pub fn gen_t5_like(layers: usize, d_model: usize, heads: usize) -> Result<RawGraph> {
    let mut cfg = TransformerConfig::new(layers, d_model, heads);
    cfg.aux = AuxStyle::Heavy;
    gen_t5(&cfg)
}

pub fn gen_t5(cfg: &TransformerConfig) -> Result<RawGraph> {
    cfg.validate()?;
    let dims = Dims {
        b: cfg.batch,
        s: cfg.seq,
        d: cfg.d_model,
        h: cfg.heads,
        f: cfg.d_model * cfg.ffn_mult,
    };
    let mut bld = Builder::new(cfg.aux);

    let residual = |bld: &mut Builder, scope: &str, skip: &str, branch: &str| {
        let drop = bld.op_attr(
            format!("{scope}/residual/dropout"),
            OpKind::Elementwise,
            "identity",
            &[branch],
            dims.act(),
        );
        bld.op_attr(
            format!("{scope}/residual/Add"),
            OpKind::Elementwise,
            "add",
            &[skip, &drop],
            dims.act(),
        )
    };
    let norm = |bld: &mut Builder, scope: &str, input: &str| {
        bld.op(
            format!("{scope}/layer_norm/LayerNorm"),
            OpKind::LayerNorm,
            &[input],
            dims.act(),
        )
    };
    let embed = |bld: &mut Builder, stack: &str| {
        let ids = bld.op(
            format!("{stack}/input_ids"),
            OpKind::Input,
            &[],
            vec![dims.b, dims.s],
        );
        bld.weighted(
            &format!("{stack}/embed_tokens"),
            "Gather",
            OpKind::Embedding,
            &ids,
            TensorSpec::weight(vec![cfg.vocab, dims.d]),
            dims.act(),
        )
    };

    let mut x = embed(&mut bld, "encoder");
    for i in 0..cfg.layers {
        let l0 = format!("encoder/block_{i}/layer_0");
        let n = norm(&mut bld, &l0, &x);
        let sa = format!("{l0}/SelfAttention");
        let a = attention(&mut bld, &dims, &sa, &sa, &n, &n, ["q", "k", "v", "o"]);
        x = residual(&mut bld, &l0, &x, &a);
        let l1 = format!("encoder/block_{i}/layer_1");
        let n = norm(&mut bld, &l1, &x);
        let y = ffn(
            &mut bld,
            &dims,
            &format!("{l1}/DenseReluDense/wi"),
            &format!("{l1}/DenseReluDense/wo"),
            &n,
            "relu",
        );
        x = residual(&mut bld, &l1, &x, &y);
    }
    let memory = final_norm(&mut bld, &dims, "encoder/final_layer_norm", &x);

    let mut x = embed(&mut bld, "decoder");
    for i in 0..cfg.layers {
        let l0 = format!("decoder/block_{i}/layer_0");
        let n = norm(&mut bld, &l0, &x);
        let sa = format!("{l0}/SelfAttention");
        let a = attention(&mut bld, &dims, &sa, &sa, &n, &n, ["q", "k", "v", "o"]);
        x = residual(&mut bld, &l0, &x, &a);
        let l1 = format!("decoder/block_{i}/layer_1");
        let n = norm(&mut bld, &l1, &x);
        let ca = format!("{l1}/EncDecAttention");
        let a = attention(&mut bld, &dims, &ca, &ca, &n, &memory, ["q", "k", "v", "o"]);
        x = residual(&mut bld, &l1, &x, &a);
        let l2 = format!("decoder/block_{i}/layer_2");
        let n = norm(&mut bld, &l2, &x);
        let y = ffn(
            &mut bld,
            &dims,
            &format!("{l2}/DenseReluDense/wi"),
            &format!("{l2}/DenseReluDense/wo"),
            &n,
            "relu",
        );
        x = residual(&mut bld, &l2, &x, &y);
    }
    let normed = final_norm(&mut bld, &dims, "decoder/final_layer_norm", &x);
    let logits = bld.weighted(
        "lm_head",
        "MatMul",
        OpKind::MatMul,
        &normed,
        TensorSpec::weight(vec![dims.d, cfg.vocab]),
        vec![dims.b, dims.s, cfg.vocab],
    );
    bld.op(
        "output".into(),
        OpKind::Output,
        &[&logits],
        vec![dims.b, dims.s, cfg.vocab],
    );
    bld.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainable_in(g: &RawGraph, prefix: &str) -> usize {
        g.weights()
            .filter(|(n, w)| n.name.starts_with(prefix) && w.trainable)
            .count()
    }

    #[test]
    fn one_layer_has_six_trainable_weights() {
        let g = gen_transformer_stack(1, 8, 2).unwrap();
        assert_eq!(trainable_in(&g, "encoder/layer_0/"), 6);
    }

    #[test]
    fn layers_are_isomorphic_up_to_index() {
        let g = gen_transformer_stack(24, 8, 2).unwrap();
        let layer = |i: usize| -> Vec<(String, OpKind, Option<Vec<usize>>)> {
            let p = format!("encoder/layer_{i}/");
            let mut v: Vec<_> = g
                .nodes()
                .iter()
                .filter(|n| n.name.starts_with(&p))
                .map(|n| {
                    (
                        n.name[p.len()..].to_string(),
                        n.op,
                        n.weight.as_ref().map(|w| w.shape.clone()),
                    )
                })
                .collect();
            v.sort();
            v
        };
        let first = layer(0);
        assert!(!first.is_empty());
        for i in 1..24 {
            assert_eq!(layer(i), first, "layer {i}");
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_transformer_stack(3, 8, 2).unwrap(),
            gen_transformer_stack(3, 8, 2).unwrap()
        );
        assert_eq!(gen_t5_like(2, 8, 2).unwrap(), gen_t5_like(2, 8, 2).unwrap());
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            gen_transformer_stack(2, 10, 3),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            gen_transformer_stack(0, 8, 2),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            gen_wide_classifier(0, 8),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn wide_fc_dominates_parameters() {
        let g = gen_wide_classifier(100_000, 2048).unwrap();
        let total: u64 = g.parameter_bytes();
        let fc = g.get("head/fc/MatMul").unwrap().weight.clone().unwrap();
        assert_eq!(fc.byte_size(), 2048 * 100_000 * 4);
        let backbone = total - fc.byte_size();
        assert!(fc.byte_size() > 5 * backbone);
        assert!(fc.byte_size() * 2 > total);
    }

    #[test]
    fn transformer_groups_eleven_per_layer() {
        let g = gen_transformer_stack(24, 8, 2).unwrap();
        let gg = crate::ir::trim_and_group(&g).unwrap();
        assert_eq!(gg.len(), 24 * 11 + 5);
        assert_eq!(gg.weight_count(), 24 * 6 + 3);
    }

    #[test]
    fn t5_like_trims_more_than_tenfold() {
        let g = gen_t5_like(2, 8, 2).unwrap();
        let gg = crate::ir::trim_and_group(&g).unwrap();
        assert!(
            g.len() > 10 * gg.len(),
            "{} raw vs {} groups",
            g.len(),
            gg.len()
        );
    }

    #[test]
    fn single_class_is_valid() {
        let g = gen_wide_classifier(1, 4).unwrap();
        assert_eq!(g.get("output").unwrap().output.shape, vec![2, 1]);
    }
}
