//! A small pre-norm decoder-only transformer with an explicit block
//! decomposition: embed -> blocks -> final norm -> head. Blocks are
//! self-contained units so the reconstruction pipeline can treat each one
//! (or a pair) as its own optimization target.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokens::TokenBatch;
use crate::{Error, Result};

/// Attention logits at masked positions are filled with this instead of
/// -inf so tensors stay finite end to end.
const MASKED_LOGIT: f32 = -1e9;

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub eos_token_id: u32,
    pub bos_token_id: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_blocks, self.hidden, self.n_heads, self.ffn_dim, self.vocab, self.max_seq];
        if positive.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(String::from("all dimensions must be >= 1")));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.eos_token_id as usize >= self.vocab || self.bos_token_id as usize >= self.vocab {
            return Err(Error::InvalidConfig(String::from("eos/bos ids must be < vocab")));
        }
        if self.eos_token_id == self.bos_token_id {
            return Err(Error::InvalidConfig(String::from("eos and bos must differ")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Parameter count of one transformer block.
    pub fn block_param_count(&self) -> u64 {
        let h = self.hidden as u64;
        let f = self.ffn_dim as u64;
        4 * (h * h + h) + (f * h + f) + (h * f + h) + 4 * h
    }

    /// Total parameter count of the full model.
    pub fn param_count(&self) -> u64 {
        let h = self.hidden as u64;
        let v = self.vocab as u64;
        let t = self.max_seq as u64;
        v * h + t * h + 2 * h + h * v + self.n_blocks as u64 * self.block_param_count()
    }
}

/// The six prunable weight matrices of a block, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    WQ,
    WK,
    WV,
    WO,
    W1,
    W2,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] =
        [MatrixKind::WQ, MatrixKind::WK, MatrixKind::WV, MatrixKind::WO, MatrixKind::W1, MatrixKind::W2];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::WQ => "w_q",
            MatrixKind::WK => "w_k",
            MatrixKind::WV => "w_v",
            MatrixKind::WO => "w_o",
            MatrixKind::W1 => "w_1",
            MatrixKind::W2 => "w_2",
        }
    }

    pub fn index(self) -> usize {
        match self {
            MatrixKind::WQ => 0,
            MatrixKind::WK => 1,
            MatrixKind::WV => 2,
            MatrixKind::WO => 3,
            MatrixKind::W1 => 4,
            MatrixKind::W2 => 5,
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, MatrixKind::W1 | MatrixKind::W2)
    }

    /// (out, in) shape of this matrix under a config.
    pub fn shape(self, config: &ModelConfig) -> [usize; 2] {
        let h = config.hidden;
        let f = config.ffn_dim;
        match self {
            MatrixKind::W1 => [f, h],
            MatrixKind::W2 => [h, f],
            _ => [h, h],
        }
    }
}

/// One pre-norm block: x + Attn(LN1(x)), then + FFN(LN2(.)).
/// Weight matrices are stored (out, in); projections compute x @ W^T + b.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

pub const BLOCK_PARAM_COUNT: usize = 16;

impl TransformerBlock {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let f = config.ffn_dim;
        Self {
            ln1_gain: Tensor::zeros(&[h]),
            ln1_bias: Tensor::zeros(&[h]),
            w_q: Tensor::zeros(&[h, h]),
            b_q: Tensor::zeros(&[h]),
            w_k: Tensor::zeros(&[h, h]),
            b_k: Tensor::zeros(&[h]),
            w_v: Tensor::zeros(&[h, h]),
            b_v: Tensor::zeros(&[h]),
            w_o: Tensor::zeros(&[h, h]),
            b_o: Tensor::zeros(&[h]),
            ln2_gain: Tensor::zeros(&[h]),
            ln2_bias: Tensor::zeros(&[h]),
            w_1: Tensor::zeros(&[f, h]),
            b_1: Tensor::zeros(&[f]),
            w_2: Tensor::zeros(&[h, f]),
            b_2: Tensor::zeros(&[h]),
        }
    }

    pub fn matrix(&self, kind: MatrixKind) -> &Tensor {
        match kind {
            MatrixKind::WQ => &self.w_q,
            MatrixKind::WK => &self.w_k,
            MatrixKind::WV => &self.w_v,
            MatrixKind::WO => &self.w_o,
            MatrixKind::W1 => &self.w_1,
            MatrixKind::W2 => &self.w_2,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut Tensor {
        match kind {
            MatrixKind::WQ => &mut self.w_q,
            MatrixKind::WK => &mut self.w_k,
            MatrixKind::WV => &mut self.w_v,
            MatrixKind::WO => &mut self.w_o,
            MatrixKind::W1 => &mut self.w_1,
            MatrixKind::W2 => &mut self.w_2,
        }
    }

    /// All sixteen parameter tensors in canonical (serialization) order.
    pub fn params(&self) -> [&Tensor; BLOCK_PARAM_COUNT] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.w_q, &self.b_q, &self.w_k, &self.b_k,
            &self.w_v, &self.b_v, &self.w_o, &self.b_o, &self.ln2_gain, &self.ln2_bias,
            &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; BLOCK_PARAM_COUNT] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_q, &mut self.b_q,
            &mut self.w_k, &mut self.b_k, &mut self.w_v, &mut self.b_v,
            &mut self.w_o, &mut self.b_o, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w_1, &mut self.b_1, &mut self.w_2, &mut self.b_2,
        ]
    }

    /// Positions of the six prunable matrices inside [`Self::params`].
    pub const MATRIX_PARAM_SLOTS: [usize; 6] = [2, 4, 6, 8, 12, 14];

    /// Record this block's parameters on a graph, as trainable params or
    /// frozen leaves.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<BlockNodes> {
        let mut ids = [NodeId(0); BLOCK_PARAM_COUNT];
        for (slot, tensor) in ids.iter_mut().zip(self.params()) {
            *slot = if trainable { g.param(tensor.clone())? } else { g.leaf(tensor.clone())? };
        }
        Ok(BlockNodes { ids })
    }

    /// Plain forward pass through a scratch graph.
    pub fn forward(&self, x: &Tensor, n_heads: usize) -> Result<Tensor> {
        Ok(self.forward_with_taps(x, n_heads)?.0)
    }

    /// Forward pass that also returns the inputs seen by each prunable
    /// matrix (needed for activation statistics and layer-wise refits).
    pub fn forward_with_taps(&self, x: &Tensor, n_heads: usize) -> Result<(Tensor, TapValues)> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false)?;
        let xid = g.leaf(x.clone())?;
        let (out, taps) = block_forward(&mut g, &nodes, xid, n_heads)?;
        let values = TapValues {
            attn_in: g.value(taps.attn_in).clone(),
            attn_ctx: g.value(taps.attn_ctx).clone(),
            ffn_in: g.value(taps.ffn_in).clone(),
            ffn_mid: g.value(taps.ffn_mid).clone(),
        };
        Ok((g.value(out).clone(), values))
    }
}

/// Node ids of one registered block, ordered like [`TransformerBlock::params`].
pub struct BlockNodes {
    pub ids: [NodeId; BLOCK_PARAM_COUNT],
}

impl BlockNodes {
    fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    pub fn matrix(&self, kind: MatrixKind) -> NodeId {
        self.ids[TransformerBlock::MATRIX_PARAM_SLOTS[kind.index()]]
    }
}

/// Graph node ids of the intermediate activations feeding each prunable
/// matrix: `attn_in` feeds W_q/W_k/W_v, `attn_ctx` feeds W_o, `ffn_in`
/// feeds W_1, `ffn_mid` feeds W_2.
pub struct BlockTaps {
    pub attn_in: NodeId,
    pub attn_ctx: NodeId,
    pub ffn_in: NodeId,
    pub ffn_mid: NodeId,
}

/// Same taps, materialized.
pub struct TapValues {
    pub attn_in: Tensor,
    pub attn_ctx: Tensor,
    pub ffn_in: Tensor,
    pub ffn_mid: Tensor,
}

impl TapValues {
    /// Input activation feeding a given matrix.
    pub fn input_for(&self, kind: MatrixKind) -> &Tensor {
        match kind {
            MatrixKind::WQ | MatrixKind::WK | MatrixKind::WV => &self.attn_in,
            MatrixKind::WO => &self.attn_ctx,
            MatrixKind::W1 => &self.ffn_in,
            MatrixKind::W2 => &self.ffn_mid,
        }
    }
}

/// Lower-triangular (T, T) mask: 1 where key position <= query position.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for q in 0..t {
        for k in 0..=q {
            m.data_mut()[q * t + k] = 1.0;
        }
    }
    m
}

/// x @ W^T + b on the graph.
fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let wt = g.transpose(w, 0, 1)?;
    let y = g.matmul(x, wt)?;
    g.add(y, b)
}

/// One block applied to `x` of shape (N, T, H). Returns the output node and
/// the tap points.
pub fn block_forward(
    g: &mut Graph,
    nodes: &BlockNodes,
    x: NodeId,
    n_heads: usize,
) -> Result<(NodeId, BlockTaps)> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            detail: format!("expected (N, T, H), got {shape:?}"),
        });
    }
    let (n, t, h) = (shape[0], shape[1], shape[2]);
    if h % n_heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            detail: format!("hidden {h} not divisible by {n_heads} heads"),
        });
    }
    let dh = h / n_heads;

    // attention with pre-norm
    let attn_in = g.layer_norm(x, nodes.get(0), nodes.get(1))?;
    let q = linear(g, attn_in, nodes.get(2), nodes.get(3))?;
    let k = linear(g, attn_in, nodes.get(4), nodes.get(5))?;
    let v = linear(g, attn_in, nodes.get(6), nodes.get(7))?;

    let split = |g: &mut Graph, p: NodeId| -> Result<NodeId> {
        let r = g.reshape(p, &[n, t, n_heads, dh])?;
        g.transpose(r, 1, 2) // (N, heads, T, dh)
    };
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;

    let kt = g.transpose(kh, 2, 3)?; // (N, heads, dh, T)
    let scores = g.matmul(qh, kt)?; // (N, heads, T, T)
    let scaled = g.scale(scores, 1.0 / libm::sqrtf(dh as f32))?;
    let causal = causal_mask(t);
    let masked = g.mask_fill(scaled, &causal, MASKED_LOGIT)?;
    let attn = g.softmax_lastdim(masked)?;

    let ctx_h = g.matmul(attn, vh)?; // (N, heads, T, dh)
    let ctx_t = g.transpose(ctx_h, 1, 2)?; // (N, T, heads, dh)
    let attn_ctx = g.reshape(ctx_t, &[n, t, h])?;
    let proj = linear(g, attn_ctx, nodes.get(8), nodes.get(9))?;
    let x1 = g.add(x, proj)?;

    // feed-forward with pre-norm
    let ffn_in = g.layer_norm(x1, nodes.get(10), nodes.get(11))?;
    let mid = linear(g, ffn_in, nodes.get(12), nodes.get(13))?;
    let ffn_mid = g.gelu(mid)?;
    let down = linear(g, ffn_mid, nodes.get(14), nodes.get(15))?;
    let out = g.add(x1, down)?;

    Ok((out, BlockTaps { attn_in, attn_ctx, ffn_in, ffn_mid }))
}

/// Full model weights plus config: the unit that checkpoints serialize.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    pub head: Tensor,
    pub blocks: Vec<TransformerBlock>,
}

impl Model {
    /// Deterministic random initialization: matrices are N(0, 0.02), with
    /// the residual-writing projections (W_o, W_2) scaled by 1/sqrt(2B);
    /// biases zero, norm gains one.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let h = config.hidden;
        let f = config.ffn_dim;
        let v = config.vocab;
        let out_std = INIT_STD / libm::sqrtf(2.0 * config.n_blocks as f32);
        let mut draw = |shape: &[usize], std: f32| -> Tensor {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = (0..numel).map(|_| rng.normal_f32(std)).collect();
            Tensor::from_vec(shape, data).expect("draw shape")
        };
        let token_embedding = draw(&[v, h], INIT_STD);
        let positional_embedding = draw(&[config.max_seq, h], INIT_STD);
        let head = draw(&[h, v], INIT_STD);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let mut block = TransformerBlock::zeros(&config);
            block.ln1_gain = Tensor::full(&[h], 1.0);
            block.ln2_gain = Tensor::full(&[h], 1.0);
            block.w_q = draw(&[h, h], INIT_STD);
            block.w_k = draw(&[h, h], INIT_STD);
            block.w_v = draw(&[h, h], INIT_STD);
            block.w_o = draw(&[h, h], out_std);
            block.w_1 = draw(&[f, h], INIT_STD);
            block.w_2 = draw(&[h, f], out_std);
            blocks.push(block);
        }
        Ok(Model {
            config,
            token_embedding,
            positional_embedding,
            final_norm_gain: Tensor::full(&[h], 1.0),
            final_norm_bias: Tensor::zeros(&[h]),
            head,
            blocks,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.t() > self.config.max_seq {
            return Err(Error::ShapeMismatch {
                op: "forward_full",
                detail: format!("sequence length {} exceeds max {}", tokens.t(), self.config.max_seq),
            });
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&id| id as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: self.config.vocab as u32 });
        }
        Ok(())
    }

    /// Token + positional embedding on a graph: (N, T) ids -> (N, T, H).
    pub fn embed_on_graph(&self, g: &mut Graph, tokens: &TokenBatch) -> Result<NodeId> {
        let table = g.leaf(self.token_embedding.clone())?;
        let emb = g.embedding_lookup(table, tokens.ids(), tokens.n(), tokens.t())?;
        let pos_table = g.leaf(self.positional_embedding.clone())?;
        let pos = g.slice(pos_table, 0, 0, tokens.t())?;
        g.add(emb, pos)
    }

    /// Embedding output — the input x_1 to the first block.
    pub fn embed(&self, tokens: &TokenBatch) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let id = self.embed_on_graph(&mut g, tokens)?;
        Ok(g.value(id).clone())
    }

    /// Final layer norm + output head on a graph.
    pub fn head_on_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gain = g.leaf(self.final_norm_gain.clone())?;
        let bias = g.leaf(self.final_norm_bias.clone())?;
        let normed = g.layer_norm(x, gain, bias)?;
        let head = g.leaf(self.head.clone())?;
        g.matmul(normed, head)
    }

    /// Final norm + head applied to a block-stream activation.
    pub fn head_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone())?;
        let out = self.head_on_graph(&mut g, xid)?;
        Ok(g.value(out).clone())
    }

    /// Logits for a token batch: embed, all blocks in order, final norm,
    /// head. Identical (bit-exact) to composing the pieces by hand.
    pub fn forward_full(&self, tokens: &TokenBatch) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let mut x = self.embed_on_graph(&mut g, tokens)?;
        for block in &self.blocks {
            let nodes = block.register(&mut g, false)?;
            let (out, _) = block_forward(&mut g, &nodes, x, self.config.n_heads)?;
            x = out;
        }
        let logits = self.head_on_graph(&mut g, x)?;
        Ok(g.value(logits).clone())
    }

    /// Canonical (name, shape) table, in serialization order.
    pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let h = config.hidden;
        let f = config.ffn_dim;
        let mut specs = vec![
            (String::from("token_embedding"), vec![config.vocab, h]),
            (String::from("positional_embedding"), vec![config.max_seq, h]),
            (String::from("final_norm.gain"), vec![h]),
            (String::from("final_norm.bias"), vec![h]),
            (String::from("head"), vec![h, config.vocab]),
        ];
        for i in 0..config.n_blocks {
            let names = [
                "ln1.gain", "ln1.bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
                "w_o", "b_o", "ln2.gain", "ln2.bias", "w_1", "b_1", "w_2", "b_2",
            ];
            let shapes: [Vec<usize>; BLOCK_PARAM_COUNT] = [
                vec![h], vec![h], vec![h, h], vec![h], vec![h, h], vec![h],
                vec![h, h], vec![h], vec![h, h], vec![h], vec![h], vec![h],
                vec![f, h], vec![f], vec![h, f], vec![h],
            ];
            for (name, shape) in names.iter().zip(shapes) {
                specs.push((format!("blocks.{i}.{name}"), shape));
            }
        }
        specs
    }

    /// All tensors paired with their canonical names, in the same order as
    /// [`Model::tensor_specs`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (String::from("token_embedding"), &self.token_embedding),
            (String::from("positional_embedding"), &self.positional_embedding),
            (String::from("final_norm.gain"), &self.final_norm_gain),
            (String::from("final_norm.bias"), &self.final_norm_bias),
            (String::from("head"), &self.head),
        ];
        let names = [
            "ln1.gain", "ln1.bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
            "w_o", "b_o", "ln2.gain", "ln2.bias", "w_1", "b_1", "w_2", "b_2",
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, tensor) in names.iter().zip(block.params()) {
                out.push((format!("blocks.{i}.{name}"), tensor));
            }
        }
        out
    }

    /// Rebuild a model from named tensors (e.g. a decoded checkpoint).
    /// Every canonical tensor must be present exactly once with the right
    /// shape; extras are rejected.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: &mut alloc::collections::BTreeMap<String, Tensor>,
    ) -> Result<Model> {
        config.validate()?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::InvalidConfig(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let specs = Model::tensor_specs(&config);
        let mut iter = specs.iter();
        let mut next = |expect: &str| -> Result<Tensor> {
            let (name, shape) = iter.next().expect("spec table exhausted");
            debug_assert!(name.ends_with(expect) || name == expect);
            take(name, shape)
        };
        let token_embedding = next("token_embedding")?;
        let positional_embedding = next("positional_embedding")?;
        let final_norm_gain = next("final_norm.gain")?;
        let final_norm_bias = next("final_norm.bias")?;
        let head = next("head")?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            blocks.push(TransformerBlock {
                ln1_gain: next("ln1.gain")?,
                ln1_bias: next("ln1.bias")?,
                w_q: next("w_q")?,
                b_q: next("b_q")?,
                w_k: next("w_k")?,
                b_k: next("b_k")?,
                w_v: next("w_v")?,
                b_v: next("b_v")?,
                w_o: next("w_o")?,
                b_o: next("b_o")?,
                ln2_gain: next("ln2.gain")?,
                ln2_bias: next("ln2.bias")?,
                w_1: next("w_1")?,
                b_1: next("b_1")?,
                w_2: next("w_2")?,
                b_2: next("b_2")?,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::InvalidConfig(format!("unexpected tensor `{extra}`")));
        }
        Ok(Model {
            config,
            token_embedding,
            positional_embedding,
            final_norm_gain,
            final_norm_bias,
            head,
            blocks,
        })
    }
}
