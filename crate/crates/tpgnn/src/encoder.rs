//! Node-wise encoder over the memory stack.
//!
//! A node's state enters as a short token sequence: its previous
//! representation followed by its k layer memories, one token per hop depth.
//! Multi-head self-attention mixes the sequence, and a small learned network
//! scores each hop depth to bias the attention logits, letting the model
//! prefer some depths over others regardless of content. The mean over the
//! output tokens is the node's new representation.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{xavier_init, Tensor};

/// Width and depth choices shared by initialization and checkpointing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    /// Representation and memory width.
    pub dim: usize,
    /// Number of memory layers; the token sequence has `hops + 1` entries.
    pub hops: usize,
    /// Attention heads per block; must divide `dim`.
    pub heads: usize,
    /// Stacked attention blocks.
    pub blocks: usize,
    /// Hidden width of the hop-scoring network.
    pub bias_hidden: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub heads: Vec<AttentionHead>,
    /// Projection applied to the concatenated head outputs, `[dim, dim]`.
    pub output: ParamId,
    /// Hop-scoring network: one input row per token position.
    pub bias_in: ParamId,
    pub bias_in_shift: ParamId,
    pub bias_out: ParamId,
    pub bias_out_shift: ParamId,
    pub ffn_expand: ParamId,
    pub ffn_expand_shift: ParamId,
    pub ffn_contract: ParamId,
    pub ffn_contract_shift: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_shift: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_shift: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub blocks: Vec<EncoderBlock>,
}

/// Per-call switches for [`encode`].
#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    /// Apply dropout to the attention weights.
    pub train: bool,
    /// Dropout rate used when `train` is set.
    pub dropout: f64,
    /// Add the learned hop-depth scores to the attention logits. Turned off
    /// to measure what depth preferences contribute.
    pub hop_bias: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { train: false, dropout: 0.0, hop_bias: true }
    }
}

impl EncoderParams {
    /// Registers all encoder tensors. Projection matrices draw from a seeded
    /// Xavier stream; shifts start at zero and normalization gains at one, so
    /// a freshly initialized encoder maps an all-zero state to an all-zero
    /// representation.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, shape: EncoderShape, seed: u64) -> Result<Self> {
        if shape.heads == 0 || shape.dim % shape.heads != 0 {
            return Err(Error::usage(format!(
                "encoder dim {} not divisible into {} heads",
                shape.dim, shape.heads
            )));
        }
        if shape.blocks == 0 || shape.hops == 0 || shape.bias_hidden == 0 {
            return Err(Error::usage("encoder needs at least one block, hop, and bias unit"));
        }
        let (d, dh) = (shape.dim, shape.dim / shape.heads);
        let tokens = shape.hops + 1;
        let mut salt = 0u64;
        let mut blocks = Vec::with_capacity(shape.blocks);
        for b in 0..shape.blocks {
            let mut xav = |store: &mut ParamStore<T>, name: String, rows: usize, cols: usize| {
                salt += 1;
                store.register(name, xavier_init(&[rows, cols], seed.wrapping_add(salt)))
            };
            let mut heads = Vec::with_capacity(shape.heads);
            for h in 0..shape.heads {
                heads.push(AttentionHead {
                    query: xav(store, format!("enc{b}.head{h}.query"), d, dh),
                    key: xav(store, format!("enc{b}.head{h}.key"), d, dh),
                    value: xav(store, format!("enc{b}.head{h}.value"), d, dh),
                });
            }
            let output = xav(store, format!("enc{b}.output"), d, d);
            let bias_in = xav(store, format!("enc{b}.bias_in"), tokens, shape.bias_hidden);
            let bias_out = xav(store, format!("enc{b}.bias_out"), shape.bias_hidden, 1);
            let ffn_expand = xav(store, format!("enc{b}.ffn_expand"), d, 2 * d);
            let ffn_contract = xav(store, format!("enc{b}.ffn_contract"), 2 * d, d);
            let zeros = |store: &mut ParamStore<T>, name: String, n: usize| {
                store.register(name, Tensor::zeros(&[n]))
            };
            let ones = |store: &mut ParamStore<T>, name: String, n: usize| {
                store.register(name, Tensor::new(vec![n], vec![T::one(); n]).expect("shape"))
            };
            blocks.push(EncoderBlock {
                heads,
                output,
                bias_in,
                bias_in_shift: zeros(store, format!("enc{b}.bias_in_shift"), shape.bias_hidden),
                bias_out,
                bias_out_shift: zeros(store, format!("enc{b}.bias_out_shift"), 1),
                ffn_expand,
                ffn_expand_shift: zeros(store, format!("enc{b}.ffn_expand_shift"), 2 * d),
                ffn_contract,
                ffn_contract_shift: zeros(store, format!("enc{b}.ffn_contract_shift"), d),
                norm1_gain: ones(store, format!("enc{b}.norm1_gain"), d),
                norm1_shift: zeros(store, format!("enc{b}.norm1_shift"), d),
                norm2_gain: ones(store, format!("enc{b}.norm2_gain"), d),
                norm2_shift: zeros(store, format!("enc{b}.norm2_shift"), d),
            });
        }
        Ok(EncoderParams { shape, blocks })
    }
}

/// Learned score per token position, `[hops + 1]`. Each position's one-hot
/// selects a row of the input matrix, so the whole network evaluates as one
/// matrix pass: relu(rows + shift) through a linear readout.
fn hop_scores<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    block: &EncoderBlock,
    tokens: usize,
) -> Result<ValueId> {
    let pre = tape.add_bias(bound.id(block.bias_in), bound.id(block.bias_in_shift))?;
    let hidden = tape.relu(pre);
    let raw = tape.matmul(hidden, bound.id(block.bias_out))?;
    let raw = tape.add_bias(raw, bound.id(block.bias_out_shift))?;
    tape.reshape(raw, &[tokens])
}

/// Post-softmax attention weights for one head, `[tokens, tokens]`. Exposed
/// within the crate so tests can pin down the distribution itself.
pub(crate) fn attention_weights<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    block: &EncoderBlock,
    head: &AttentionHead,
    x: ValueId,
    dh: usize,
    opts: &EncodeOptions,
) -> Result<ValueId> {
    let q = tape.matmul(x, bound.id(head.query))?;
    let k = tape.matmul(x, bound.id(head.key))?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scale = T::one() / crate::scalar::c::<T>(dh as f64).sqrt();
    let mut logits = tape.affine(raw, scale, T::zero());
    if opts.hop_bias {
        let tokens = tape.value(x).rows();
        let scores = hop_scores(tape, bound, block, tokens)?;
        logits = tape.add_bias(logits, scores)?;
    }
    let attn = tape.softmax_rows(logits);
    if opts.train && opts.dropout > 0.0 {
        tape.dropout(attn, opts.dropout)
    } else {
        Ok(attn)
    }
}

/// Runs the token sequence `[hops + 1, dim]` through every block and returns
/// the mean output token, `[dim]`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    enc: &EncoderParams,
    tokens: ValueId,
    opts: &EncodeOptions,
) -> Result<ValueId> {
    let shape = enc.shape;
    let expect = [shape.hops + 1, shape.dim];
    if tape.value(tokens).shape() != expect {
        return Err(Error::Shape {
            op: "encode",
            lhs: expect.to_vec(),
            rhs: tape.value(tokens).shape().to_vec(),
        });
    }
    let dh = shape.dim / shape.heads;
    let mut x = tokens;
    for block in &enc.blocks {
        let mut head_outs = Vec::with_capacity(shape.heads);
        for head in &block.heads {
            let attn = attention_weights(tape, bound, block, head, x, dh, opts)?;
            let v = tape.matmul(x, bound.id(head.value))?;
            head_outs.push(tape.matmul(attn, v)?);
        }
        let mixed = tape.concat_cols(&head_outs)?;
        let projected = tape.matmul(mixed, bound.id(block.output))?;
        let summed = tape.add(x, projected)?;
        let normed = tape.layer_norm(summed, bound.id(block.norm1_gain), bound.id(block.norm1_shift))?;

        let expanded = tape.matmul(normed, bound.id(block.ffn_expand))?;
        let expanded = tape.add_bias(expanded, bound.id(block.ffn_expand_shift))?;
        let activated = tape.relu(expanded);
        let contracted = tape.matmul(activated, bound.id(block.ffn_contract))?;
        let contracted = tape.add_bias(contracted, bound.id(block.ffn_contract_shift))?;
        let summed = tape.add(normed, contracted)?;
        x = tape.layer_norm(summed, bound.id(block.norm2_gain), bound.id(block.norm2_shift))?;
    }
    tape.mean_rows(x)
}
