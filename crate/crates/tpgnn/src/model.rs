//! Full model assembly: one recurrent updater per memory layer, the
//! node-wise encoder, and the two task decoders, all registered in a single
//! parameter store so one bind covers every learned tensor.

use crate::encoder::{EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::propagator::GruParams;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{xavier_init, Tensor};

/// Architectural sizes fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Representation and memory width.
    pub dim: usize,
    /// Edge feature width.
    pub edge_dim: usize,
    /// Memory layers / propagation depth.
    pub hops: usize,
    /// Attention heads in the encoder.
    pub heads: usize,
    /// Stacked encoder blocks.
    pub blocks: usize,
    /// Hidden width of the encoder's hop-scoring network.
    pub bias_hidden: usize,
    /// Classes for the node task.
    pub classes: usize,
}

impl ModelDims {
    /// Raw message width: own representation, edge features, counterpart
    /// representation.
    pub fn msg_dim(&self) -> usize {
        2 * self.dim + self.edge_dim
    }
}

/// Two-layer perceptron with a relu in the middle. Inputs are row batches.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        seed: u64,
    ) -> Self {
        let (input, hidden, output) = dims;
        MlpParams {
            w1: store.register(format!("{name}.w1"), xavier_init(&[input, hidden], seed)),
            b1: store.register(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: store.register(format!("{name}.w2"), xavier_init(&[hidden, output], seed.wrapping_add(1))),
            b2: store.register(format!("{name}.b2"), Tensor::zeros(&[output])),
        }
    }
}

/// Applies the perceptron to a `[rows, input]` batch.
pub fn mlp_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    mlp: &MlpParams,
    x: ValueId,
) -> Result<ValueId> {
    mlp_apply(tape, bound.id(mlp.w1), bound.id(mlp.b1), bound.id(mlp.w2), bound.id(mlp.b2), x)
}

/// Same computation over already-placed tensors, for callers that bind the
/// perceptron weights themselves.
pub fn mlp_apply<T: Scalar>(
    tape: &mut Tape<T>,
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
    x: ValueId,
) -> Result<ValueId> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_bias(out, b2)
}

pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    /// One updater per memory layer, index 0 handling hop-1 mail.
    pub grus: Vec<GruParams>,
    pub encoder: EncoderParams,
    /// Scores an edge from `[z_i, features, z_j]`, one logit per row.
    pub link_decoder: MlpParams,
    /// Classifies a node from its representation.
    pub node_decoder: MlpParams,
    pub dims: ModelDims,
}

impl<T: Scalar> Model<T> {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.hops == 0 {
            return Err(Error::usage("model needs at least one memory layer"));
        }
        if dims.classes < 2 {
            return Err(Error::usage("node task needs at least two classes"));
        }
        let mut store = ParamStore::new();
        let msg_dim = dims.msg_dim();
        let grus = (1..=dims.hops)
            .map(|layer| {
                GruParams::init(&mut store, layer, dims.dim, msg_dim, derive(seed, layer as u64))
            })
            .collect();
        let shape = EncoderShape {
            dim: dims.dim,
            hops: dims.hops,
            heads: dims.heads,
            blocks: dims.blocks,
            bias_hidden: dims.bias_hidden,
        };
        let encoder = EncoderParams::init(&mut store, shape, derive(seed, 1000))?;
        let link_decoder = MlpParams::init(
            &mut store,
            "link",
            (msg_dim, dims.dim, 1),
            derive(seed, 2000),
        );
        let node_decoder = MlpParams::init(
            &mut store,
            "node",
            (dims.dim, dims.dim, dims.classes),
            derive(seed, 3000),
        );
        Ok(Model { store, grus, encoder, link_decoder, node_decoder, dims })
    }
}

/// Splits one seed into decorrelated per-component streams.
pub fn derive(seed: u64, stream: u64) -> u64 {
    // splitmix64 step over the combined value
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
